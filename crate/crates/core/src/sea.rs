//! Test-time SEA attention: estimate, select, sparse attention, mix.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::SeaConfig;
use crate::error::{Result, SeaError, StageContext};
use crate::estimator::{estimate, Estimate, EstimatorWeights};
use crate::flatcsr::{scale_rows, sparse_masked_qk, sparse_row_softmax, spmm, FlatCsr};
use crate::mask::{compress_k, grouped_topk, interpolate_mask, CompressedMask};
use crate::nn::Params;
use crate::performer::FeatureMap;
use crate::serialize::WeightStore;
use crate::tensor::{nn_source_index, Tensor};
use crate::work::{self, Stage};

/// Everything learnable (or fixed at construction) in one attention layer.
#[derive(Debug, Clone, PartialEq)]
pub struct SeaWeights {
    pub features: FeatureMap,
    pub estimator: EstimatorWeights<Tensor>,
}

pub const PROJECTION_NAME: &str = "performer.projection";

impl SeaWeights {
    pub fn init(cfg: &SeaConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        SeaWeights {
            features: FeatureMap::new(cfg.features, cfg.head_dim, seed ^ 0x9e37_79b9, cfg.orthogonal_features),
            estimator: EstimatorWeights::init(cfg, &mut rng),
        }
    }

    /// Adds every tensor under `prefix` (`performer.projection`, `estimator.*`).
    pub fn save_into(&self, store: &mut WeightStore, prefix: &str) {
        store.insert(crate::nn::join(prefix, PROJECTION_NAME), self.features.projection().clone());
        self.estimator
            .visit(&crate::nn::join(prefix, "estimator"), &mut |n, t| store.insert(n, t.clone()));
    }

    /// Reads the tensors written by [`SeaWeights::save_into`], checking shapes against `cfg`.
    pub fn load_from(store: &mut WeightStore, prefix: &str, cfg: &SeaConfig) -> Result<Self> {
        let template = SeaWeights::init(cfg, 0);
        let projection = store.take(
            &crate::nn::join(prefix, PROJECTION_NAME),
            template.features.projection().shape(),
        )?;
        let estimator = template
            .estimator
            .try_map(&crate::nn::join(prefix, "estimator"), &mut |n, t| store.take(n, t.shape()))?;
        Ok(SeaWeights {
            features: FeatureMap::from_projection(projection)?,
            estimator,
        })
    }
}

/// Pins the learned gates to constants; used to isolate pipeline stages.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct GateOverride {
    pub prob: Option<f64>,
    pub mix: Option<f64>,
}

impl GateOverride {
    /// Both gates pinned to one: plain sparse attention.
    pub const SPARSE_ONLY: GateOverride = GateOverride {
        prob: Some(1.0),
        mix: Some(1.0),
    };

    pub(crate) fn apply(&self, est: &mut Estimate<Tensor>) {
        if let Some(p) = self.prob {
            est.s_prob = Tensor::full(est.s_prob.shape().to_vec(), p);
        }
        if let Some(m) = self.mix {
            est.s_mix = Tensor::full(est.s_mix.shape().to_vec(), m);
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ForwardOptions {
    pub diagnostics: bool,
    pub gates: GateOverride,
}

/// Intermediate buffers of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Diagnostics {
    pub a_hat: Tensor,
    pub compressed: CompressedMask,
    pub mask: FlatCsr,
    pub a_star: FlatCsr,
    pub s_prob: Tensor,
    pub s_mix: Tensor,
    /// Per-token pooling weights `[H, T]` (bidirectional only).
    pub importance: Option<Tensor>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeaOutput {
    /// `[H, T, d]`
    pub c_sea: Tensor,
    pub diagnostics: Option<Diagnostics>,
}

fn check_qkv(q: &Tensor, k: &Tensor, v: &Tensor, cfg: &SeaConfig) -> Result<()> {
    let want = [cfg.heads, cfg.seq_len, cfg.head_dim];
    for x in [q, k, v] {
        if x.shape() != want {
            return Err(SeaError::shape("sea_forward", x.shape(), &want));
        }
    }
    Ok(())
}

/// Token weights for global pooling: row means of `a_hat` resized to `T`
/// and renormalized to sum to one. Returns `[H, T]`.
pub fn importance(a_hat: &Tensor, seq_len: usize) -> Result<Tensor> {
    if a_hat.rank() != 3 {
        return Err(SeaError::dim("importance", format!("expected [H,T,K], got {:?}", a_hat.shape())));
    }
    let (h, kk) = (a_hat.dim(0), a_hat.dim(2));
    let mean = a_hat.mean_axis(1)?.reshape([h, kk])?;
    let mut out = mean.nn_interpolate(seq_len, 1)?;
    for row in out.data_mut().chunks_mut(seq_len) {
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|x| *x /= s);
    }
    Ok(out)
}

/// Global context `[H, T, d]`: importance-weighted pooling of `v`
/// (the same row for every query) or, when causal, the running mean of `v`.
pub fn global_context(a_hat: &Tensor, v: &Tensor, causal: bool) -> Result<Tensor> {
    if v.rank() != 3 {
        return Err(SeaError::dim("global_context", format!("expected [H,T,d], got {:?}", v.shape())));
    }
    let (h, t, d) = (v.dim(0), v.dim(1), v.dim(2));
    if causal {
        let mut out = v.cumsum(1)?;
        for (i, row) in out.data_mut().chunks_mut(d).enumerate() {
            let n = (i % t + 1) as f64;
            row.iter_mut().for_each(|x| *x /= n);
        }
        work::add_macs((h * t * d) as u64);
        Ok(out)
    } else {
        let w = importance(a_hat, t)?.reshape([h, 1, t])?;
        w.matmul(v)?.broadcast_to(&[h, t, d])
    }
}

/// `s_mix ⊙ c + (1 − s_mix) ⊙ c_avg` with `s_mix: [H, T]`.
pub fn mix(c: &Tensor, c_avg: &Tensor, s_mix: &Tensor) -> Result<Tensor> {
    let (h, t) = (c.dim(0), c.dim(1));
    let s = s_mix.reshape([h, t, 1])?;
    let a = c.mul(&s)?;
    let b = c_avg.mul(&s.map(|x| 1.0 - x))?;
    a.add(&b)
}

/// Full SEA attention for one layer. `q`, `k`, `v` are `[H, T, d]`.
pub fn sea_forward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    w: &SeaWeights,
    cfg: &SeaConfig,
    opts: ForwardOptions,
) -> Result<SeaOutput> {
    cfg.validate()?;
    check_qkv(q, k, v, cfg)?;
    let mut est = work::with_stage(Stage::Estimator, || estimate(q, k, v, &w.estimator, &w.features, cfg))
        .stage("estimator")?;
    opts.gates.apply(&mut est);

    let (compressed, mask) = work::with_stage(Stage::Mask, || {
        let k_hat = compress_k(cfg.top_k, cfg.compressed_len, cfg.seq_len);
        let m = grouped_topk(&est.a_hat, cfg.mode, k_hat)?;
        let full = interpolate_mask(&m, cfg.top_k, cfg.causal)?;
        Ok((m, full))
    })
    .stage("mask")?;

    let (a_star, c) = work::with_stage(Stage::Sparse, || {
        let scores = sparse_masked_qk(q, k, &mask)?;
        let probs = sparse_row_softmax(&scores)?;
        let a_star = scale_rows(&probs, &est.s_prob)?;
        let c = spmm(&a_star, v)?;
        Ok((a_star, c))
    })
    .stage("sparse_attention")?;

    let c_sea = work::with_stage(Stage::Mix, || {
        let c_avg = global_context(&est.a_hat, v, cfg.causal)?;
        mix(&c, &c_avg, &est.s_mix)
    })
    .stage("mix")?;

    if !c_sea.is_finite() {
        return Err(SeaError::Stage {
            stage: "mix",
            source: Box::new(SeaError::Contract("non-finite attention output".into())),
        });
    }
    let diagnostics = if opts.diagnostics {
        Some(Diagnostics {
            importance: if cfg.causal { None } else { Some(importance(&est.a_hat, cfg.seq_len)?) },
            a_hat: est.a_hat,
            compressed,
            mask: mask.pattern(),
            a_star,
            s_prob: est.s_prob,
            s_mix: est.s_mix,
        })
    } else {
        None
    };
    Ok(SeaOutput { c_sea, diagnostics })
}

/// Nearest-neighbour resize of `a_hat` rows to full width: `[H, T, T]`.
/// Causal rows are resized to their own width `t + 1` and zero beyond it.
pub fn expand_compressed(a_hat: &Tensor, causal: bool) -> Tensor {
    let (h, t, kk) = (a_hat.dim(0), a_hat.dim(1), a_hat.dim(2));
    let mut out = Tensor::zeros([h, t, t]);
    let data = out.data_mut();
    for hh in 0..h {
        for row in 0..t {
            let w = if causal { row + 1 } else { t };
            for c in 0..w {
                data[(hh * t + row) * t + c] = a_hat.data()[(hh * t + row) * kk + nn_source_index(c, kk, w)];
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::TopKMode;

    fn cfg(causal: bool) -> SeaConfig {
        SeaConfig {
            seq_len: 32,
            compressed_len: 8,
            top_k: 6,
            head_dim: 4,
            heads: 2,
            hidden: 8,
            features: 16,
            causal,
            mode: if causal { TopKMode::CausalPerBatch } else { TopKMode::PerHead },
            ..SeaConfig::default()
        }
    }

    fn qkv(c: &SeaConfig, seed: u64) -> (Tensor, Tensor, Tensor) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = [c.heads, c.seq_len, c.head_dim];
        (Tensor::randn(s, 1.0, &mut rng), Tensor::randn(s, 1.0, &mut rng), Tensor::randn(s, 1.0, &mut rng))
    }

    #[test]
    fn output_shape_and_diagnostics() {
        for causal in [false, true] {
            let c = cfg(causal);
            let w = SeaWeights::init(&c, 1);
            let (q, k, v) = qkv(&c, 2);
            let out = sea_forward(&q, &k, &v, &w, &c, ForwardOptions { diagnostics: true, ..Default::default() }).unwrap();
            assert_eq!(out.c_sea.shape(), &[2, 32, 4]);
            let d = out.diagnostics.unwrap();
            assert_eq!(d.a_hat.shape(), &[2, 32, 8]);
            assert!(d.mask.nnz() <= 2 * 32 * 6);
            assert_eq!(d.importance.is_some(), !causal);
            let plain = sea_forward(&q, &k, &v, &w, &c, ForwardOptions::default()).unwrap();
            assert!(plain.diagnostics.is_none());
            assert_eq!(plain.c_sea, out.c_sea);
        }
    }

    #[test]
    fn mixer_identity_returns_sparse_path() {
        let c = cfg(false);
        let w = SeaWeights::init(&c, 3);
        let (q, k, v) = qkv(&c, 4);
        let opts = ForwardOptions {
            diagnostics: true,
            gates: GateOverride { prob: None, mix: Some(1.0) },
        };
        let out = sea_forward(&q, &k, &v, &w, &c, opts).unwrap();
        let d = out.diagnostics.unwrap();
        assert_eq!(out.c_sea, spmm(&d.a_star, &v).unwrap());
    }

    #[test]
    fn causal_running_mean() {
        let v = Tensor::new([1, 2, 1], vec![1.0, 3.0]).unwrap();
        let c = global_context(&Tensor::zeros([1, 2, 2]), &v, true).unwrap();
        assert_eq!(c.data(), &[1.0, 2.0]);
    }

    #[test]
    fn uniform_importance_pools_the_mean() {
        let a = Tensor::full([2, 12, 4], 0.25);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let v = Tensor::randn([2, 12, 3], 1.0, &mut rng);
        let c = global_context(&a, &v, false).unwrap();
        for h in 0..2 {
            for d in 0..3 {
                let mean: f64 = (0..12).map(|t| v.at(&[h, t, d])).sum::<f64>() / 12.0;
                for t in 0..12 {
                    assert!((c.at(&[h, t, d]) - mean).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn stage_errors_name_the_stage() {
        let c = cfg(false);
        let mut w = SeaWeights::init(&c, 1);
        w.estimator.decoder[2].bias = Tensor::full([2], f64::NAN);
        let (q, k, v) = qkv(&c, 2);
        let err = sea_forward(&q, &k, &v, &w, &c, ForwardOptions::default()).unwrap_err();
        assert!(matches!(err, SeaError::Stage { .. }), "{err}");
        let bad = Tensor::zeros([2, 31, 4]);
        assert!(sea_forward(&bad, &k, &v, &w, &c, ForwardOptions::default()).is_err());
    }

    #[test]
    fn weights_roundtrip_through_store() {
        for causal in [false, true] {
            let c = cfg(causal);
            let w = SeaWeights::init(&c, 9);
            let mut store = WeightStore::new();
            w.save_into(&mut store, "layers.0");
            let bytes = store.to_bytes();
            let mut back = WeightStore::from_bytes(&bytes).unwrap();
            let loaded = SeaWeights::load_from(&mut back, "layers.0", &c).unwrap();
            assert!(back.is_empty());
            let mut again = WeightStore::new();
            loaded.save_into(&mut again, "layers.0");
            assert_eq!(again.to_bytes(), bytes);
        }
    }

    #[test]
    fn expanded_rows_follow_nearest_source() {
        let a = Tensor::new([1, 2, 2], vec![0.1, 0.9, 0.4, 0.6]).unwrap();
        let e = expand_compressed(&a, false);
        assert_eq!(e.data(), &[0.1, 0.9, 0.4, 0.6]);
        let e = expand_compressed(&a, true);
        assert_eq!(e.data(), &[0.1, 0.0, 0.4, 0.6]);
    }
}
