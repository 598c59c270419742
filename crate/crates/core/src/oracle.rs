//! Dense quadratic ground truth for the sparse pipeline.
//!
//! Only the estimator is shared with [`crate::sea`]. Selection, mask
//! expansion, attention and pooling are rebuilt here on dense `[H, T, T]`
//! buffers with straightforward loops.

use crate::autodiff::{Tape, Var};
use crate::config::SeaConfig;
use crate::error::{Result, SeaError};
use crate::estimator::{estimate, Estimate};
use crate::mask::{compress_k, TopKMode};
use crate::sea::{ForwardOptions, SeaOutput, SeaWeights};
use crate::tensor::Tensor;

/// `softmax(q kᵀ/√d) v` with an optional lower-triangular mask. Shapes `[.., T, d]`.
pub fn dense_attention(q: &Tensor, k: &Tensor, v: &Tensor, causal: bool) -> Result<Tensor> {
    if q.rank() < 2 || q.shape() != k.shape() || k.shape()[..k.rank() - 1] != v.shape()[..v.rank() - 1] {
        return Err(SeaError::shape("dense_attention", q.shape(), v.shape()));
    }
    let t = q.dim(q.rank() - 2);
    let d = q.dim(q.rank() - 1);
    let scores = q.matmul(&k.transpose(q.rank() - 2, q.rank() - 1)?)?.scale(1.0 / (d as f64).sqrt());
    let keep: Vec<bool> = (0..scores.len()).map(|i| !causal || i % t <= (i / t) % t).collect();
    scores.masked_softmax_lastdim(&keep)?.matmul(v)
}

fn group_id(mode: TopKMode, h: usize, t: usize, seq_len: usize) -> usize {
    match mode {
        TopKMode::PerQuery => h * seq_len + t,
        TopKMode::PerHead => h,
        TopKMode::PerBatch => 0,
        TopKMode::CausalPerBatch => t,
    }
}

fn group_rows(mode: TopKMode, heads: usize, seq_len: usize) -> usize {
    match mode {
        TopKMode::PerQuery => 1,
        TopKMode::PerHead => seq_len,
        TopKMode::PerBatch => heads * seq_len,
        TopKMode::CausalPerBatch => heads,
    }
}

/// Selection by full sort: largest values first, ties to the lower flat index.
/// Returns a `[H, T, K]` indicator.
pub fn brute_force_topk(a_hat: &Tensor, mode: TopKMode, k_hat: usize) -> Vec<bool> {
    let (heads, seq_len, width) = (a_hat.dim(0), a_hat.dim(1), a_hat.dim(2));
    let data = a_hat.data();
    let n_groups = heads * seq_len / group_rows(mode, heads, seq_len);
    let mut groups: Vec<Vec<usize>> = vec![Vec::new(); n_groups];
    for i in 0..data.len() {
        let (h, t) = (i / (seq_len * width), (i / width) % seq_len);
        groups[group_id(mode, h, t, seq_len)].push(i);
    }
    let budget = k_hat * group_rows(mode, heads, seq_len);
    let mut keep = vec![false; data.len()];
    for mut g in groups {
        g.sort_by(|a, b| data[*b].partial_cmp(&data[*a]).unwrap().then(a.cmp(b)));
        for &i in g.iter().take(budget) {
            keep[i] = true;
        }
    }
    keep
}

/// Full `[H, T, T]` mask obtained by resizing the selected compressed cells.
///
/// For each selected `(h, t, j)` the destination cells are found by scanning
/// the whole row for columns whose nearest source is `j`; an empty preimage
/// falls back to `floor(j·W/K)`. Each group then gets the largest duplication
/// count that keeps its total within `k` per row.
pub fn brute_force_mask(
    selected: &[bool],
    shape: [usize; 3],
    mode: TopKMode,
    k: usize,
    causal: bool,
) -> Vec<bool> {
    let [heads, seq_len, width] = shape;
    let row_w = |t: usize| if causal { t + 1 } else { seq_len };
    let cells = |j: usize, w: usize| -> Vec<usize> {
        let hit: Vec<usize> = (0..w).filter(|&c| c * width / w == j).collect();
        if hit.is_empty() {
            vec![j * w / width]
        } else {
            hit
        }
    };
    let n_groups = heads * seq_len / group_rows(mode, heads, seq_len);
    let mut widths: Vec<Vec<usize>> = vec![Vec::new(); n_groups];
    for h in 0..heads {
        for t in 0..seq_len {
            for j in 0..width {
                if selected[(h * seq_len + t) * width + j] {
                    widths[group_id(mode, h, t, seq_len)].push(cells(j, row_w(t)).len());
                }
            }
        }
    }
    let budget = k * group_rows(mode, heads, seq_len);
    let cap = k.min(seq_len.div_ceil(width)).max(1);
    let dup: Vec<usize> = widths
        .iter()
        .map(|ws| {
            (1..=cap)
                .rev()
                .find(|&p| ws.iter().map(|&w| w.min(p)).sum::<usize>() <= budget)
                .unwrap_or(1)
        })
        .collect();
    let mut out = vec![false; heads * seq_len * seq_len];
    for h in 0..heads {
        for t in 0..seq_len {
            let p = dup[group_id(mode, h, t, seq_len)];
            for j in 0..width {
                if !selected[(h * seq_len + t) * width + j] {
                    continue;
                }
                let c = cells(j, row_w(t));
                let n = c.len().min(p);
                for i in 0..n {
                    out[(h * seq_len + t) * seq_len + c[i * c.len() / n]] = true;
                }
            }
        }
    }
    out
}

/// Differentiable dense SEA attention used for training and as the oracle.
///
/// `keep` is the `[H, T, T]` full mask; gradients flow into `q`, `k`, `v`,
/// both gates and (bidirectional pooling only) `a_hat`.
pub fn dense_sea_var(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    est: &Estimate<Var>,
    keep: &[bool],
    causal: bool,
) -> Result<Var> {
    let (h, t, d) = {
        let s = tape.shape(v);
        (s[0], s[1], s[2])
    };
    let kt = tape.transpose(k, 1, 2)?;
    let scores = tape.matmul(q, kt)?;
    let scores = tape.scale(scores, 1.0 / (tape.shape(q)[2] as f64).sqrt());
    let probs = tape.masked_softmax_lastdim(scores, keep)?;
    let s_prob = tape.reshape(est.s_prob, [h, t, 1])?;
    let a_star = tape.mul(probs, s_prob)?;
    let c = tape.matmul(a_star, v)?;
    let c_avg = if causal {
        let sums = tape.cumsum(v, 1)?;
        let counts = tape.constant(Tensor::from_fn([1, t, 1], |i| (i + 1) as f64));
        tape.div(sums, counts)?
    } else {
        let kk = tape.shape(est.a_hat)[2];
        let mean = tape.mean_axis(est.a_hat, 1)?;
        let mean = tape.reshape(mean, [h, 1, kk])?;
        let w = tape.nn_interpolate(mean, t, 2)?;
        let total = tape.sum_axis(w, 2)?;
        let w = tape.div(w, total)?;
        let pooled = tape.matmul(w, v)?;
        tape.expand(pooled, &[h, t, d])?
    };
    let s_mix = tape.reshape(est.s_mix, [h, t, 1])?;
    let rest = tape.one_minus(s_mix);
    let a = tape.mul(c, s_mix)?;
    let b = tape.mul(c_avg, rest)?;
    tape.add(a, b)
}

/// Dense buffers of one emulated forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseEmulation {
    pub c_sea: Tensor,
    pub estimate: Estimate<Tensor>,
    /// `[H, T, K]` selection indicator.
    pub selected: Vec<bool>,
    /// `[H, T, T]` full mask.
    pub keep: Vec<bool>,
}

/// Dense counterpart of [`crate::sea::sea_forward`] with full buffers.
pub fn dense_emulation_parts(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    w: &SeaWeights,
    cfg: &SeaConfig,
    opts: ForwardOptions,
) -> Result<DenseEmulation> {
    let mut est = estimate(q, k, v, &w.estimator, &w.features, cfg)?;
    opts.gates.apply(&mut est);
    let k_hat = compress_k(cfg.top_k, cfg.compressed_len, cfg.seq_len);
    let shape = [cfg.heads, cfg.seq_len, cfg.compressed_len];
    let selected = brute_force_topk(&est.a_hat, cfg.mode, k_hat);
    let keep = brute_force_mask(&selected, shape, cfg.mode, cfg.top_k, cfg.causal);
    let mut tape = Tape::new();
    let [qv, kv, vv] = [q, k, v].map(|x| tape.constant(x.clone()));
    let ev = Estimate {
        a_hat: tape.constant(est.a_hat.clone()),
        z: tape.constant(est.z.clone()),
        s_prob: tape.constant(est.s_prob.clone()),
        s_mix: tape.constant(est.s_mix.clone()),
    };
    let out = dense_sea_var(&mut tape, qv, kv, vv, &ev, &keep, cfg.causal)?;
    Ok(DenseEmulation {
        c_sea: tape.value(out).clone(),
        estimate: est,
        selected,
        keep,
    })
}

pub fn dense_emulation(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    w: &SeaWeights,
    cfg: &SeaConfig,
    opts: ForwardOptions,
) -> Result<SeaOutput> {
    let parts = dense_emulation_parts(q, k, v, w, cfg, opts)?;
    Ok(SeaOutput {
        c_sea: parts.c_sea,
        diagnostics: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::assert_gradients;
    use crate::mask::{grouped_topk, interpolate_mask};
    use crate::sea::{sea_forward, GateOverride};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn hand_two_by_two() {
        // Scores 0 and ln 3 after the 1/√d scale give weights 1/4, 3/4.
        let l3 = 3f64.ln();
        let q = Tensor::new([2, 1], vec![1.0, 0.0]).unwrap();
        let k = Tensor::new([2, 1], vec![0.0, l3]).unwrap();
        let v = Tensor::new([2, 1], vec![4.0, 8.0]).unwrap();
        let c = dense_attention(&q, &k, &v, false).unwrap();
        assert!((c.at(&[0, 0]) - 7.0).abs() < 1e-12);
        assert!((c.at(&[1, 0]) - 6.0).abs() < 1e-12);
        let c = dense_attention(&q, &k, &v, true).unwrap();
        assert_eq!(c.at(&[0, 0]), 4.0);
        assert!((c.at(&[1, 0]) - 6.0).abs() < 1e-12);
    }

    #[test]
    fn hand_three_by_three() {
        // Zero queries give uniform weights over the visible prefix.
        let q = Tensor::zeros([3, 2]);
        let k = Tensor::new([3, 2], vec![1.0, 2.0, -1.0, 0.5, 3.0, 0.0]).unwrap();
        let v = Tensor::new([3, 1], vec![3.0, 6.0, 9.0]).unwrap();
        let c = dense_attention(&q, &k, &v, true).unwrap();
        for (got, want) in c.data().iter().zip([3.0, 4.5, 6.0]) {
            assert!((got - want).abs() < 1e-12);
        }
        let c = dense_attention(&q, &k, &v, false).unwrap();
        assert!(c.data().iter().all(|x| (x - 6.0).abs() < 1e-12));
    }

    #[test]
    fn single_token_returns_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let q = Tensor::randn([2, 1, 3], 1.0, &mut rng);
        let v = Tensor::randn([2, 1, 3], 1.0, &mut rng);
        assert_eq!(dense_attention(&q, &q, &v, false).unwrap(), v);
    }

    #[test]
    fn brute_force_agrees_with_fast_paths() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for (t, kk, causal) in [(16, 4, false), (13, 8, true), (6, 8, false), (32, 16, true)] {
            let a = Tensor::uniform([2, t, kk], 0.0, 1.0, &mut rng);
            for mode in TopKMode::ALL {
                if causal && matches!(mode, TopKMode::PerHead | TopKMode::PerBatch) {
                    continue;
                }
                for k in 1..=t {
                    let k_hat = compress_k(k, kk, t);
                    let m = grouped_topk(&a, mode, k_hat).unwrap();
                    let sel = brute_force_topk(&a, mode, k_hat);
                    let dense: Vec<bool> = m.to_dense().data().iter().map(|&x| x > 0.5).collect();
                    assert_eq!(sel, dense);
                    let full = interpolate_mask(&m, k, causal).unwrap().densify();
                    let got: Vec<bool> = full.data().iter().map(|&x| x != 0.0).collect();
                    assert_eq!(got, brute_force_mask(&sel, [2, t, kk], mode, k, causal), "{t} {kk} {mode} {k}");
                }
            }
        }
    }

    fn small(causal: bool) -> SeaConfig {
        SeaConfig {
            seq_len: 16,
            compressed_len: 8,
            top_k: 5,
            head_dim: 4,
            heads: 2,
            hidden: 8,
            features: 16,
            causal,
            mode: if causal { TopKMode::CausalPerBatch } else { TopKMode::PerBatch },
            ..SeaConfig::default()
        }
    }

    #[test]
    fn emulation_matches_sparse_path() {
        for causal in [false, true] {
            let c = small(causal);
            let w = SeaWeights::init(&c, 4);
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            let s = [2, 16, 4];
            let (q, k, v) = (Tensor::randn(s, 1.0, &mut rng), Tensor::randn(s, 1.0, &mut rng), Tensor::randn(s, 1.0, &mut rng));
            let a = sea_forward(&q, &k, &v, &w, &c, ForwardOptions::default()).unwrap();
            let b = dense_emulation(&q, &k, &v, &w, &c, ForwardOptions::default()).unwrap();
            assert!(a.c_sea.max_abs_diff(&b.c_sea) < 1e-12);
        }
    }

    #[test]
    fn full_budget_is_dense_attention() {
        let c = SeaConfig { top_k: 16, mode: TopKMode::PerQuery, ..small(false) };
        let w = SeaWeights::init(&c, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let s = [2, 16, 4];
        let (q, k, v) = (Tensor::randn(s, 1.0, &mut rng), Tensor::randn(s, 1.0, &mut rng), Tensor::randn(s, 1.0, &mut rng));
        let opts = ForwardOptions { gates: GateOverride::SPARSE_ONLY, ..Default::default() };
        let e = dense_emulation(&q, &k, &v, &w, &c, opts).unwrap();
        assert!(e.c_sea.max_abs_diff(&dense_attention(&q, &k, &v, false).unwrap()) < 1e-12);
    }

    #[test]
    fn dense_path_gradients() {
        for causal in [false, true] {
            let (h, t, d, kk) = (2, 6, 3, 4);
            let mut rng = ChaCha8Rng::seed_from_u64(8);
            let keep: Vec<bool> = (0..h * t * t).map(|i| (!causal || i % t <= (i / t) % t) && i % 3 != 1).collect();
            let inputs = vec![
                Tensor::randn([h, t, d], 1.0, &mut rng),
                Tensor::randn([h, t, d], 1.0, &mut rng),
                Tensor::randn([h, t, d], 1.0, &mut rng),
                Tensor::uniform([h, t, kk], 0.1, 1.0, &mut rng),
                Tensor::uniform([h, t], 0.1, 0.9, &mut rng),
                Tensor::uniform([h, t], 0.1, 0.9, &mut rng),
            ];
            assert_gradients("dense_sea", &inputs, |tape: &mut Tape, x: &[Var]| {
                let est = Estimate { a_hat: x[3], z: x[3], s_prob: x[4], s_mix: x[5] };
                dense_sea_var(tape, x[0], x[1], x[2], &est, &keep, causal)
            });
        }
    }
}
