//! Decoder from kernel-attention context to the compressed attention
//! matrix `Â ∈ [H, T, K]` and the per-token probability and mixing gates.
//!
//! Per head (or jointly over heads) the pipeline is
//! `C_perf = FAVOR+(Q, K, [V_I; V])`, `Z = gelu(enc([C_perf; V]))`,
//! `Ẑ = expand(Z)` reshaped to `[H·c_h, T, K/c_s]`, then a three-layer
//! convolutional decoder and a softmax over the last axis.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::config::SeaConfig;
use crate::error::{Result, SeaError};
use crate::nn::{join, Conv, Linear, Params};
use crate::performer::{favor_plus_var, identity_positions, FeatureMap};
use crate::tensor::{Conv2dSpec, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorWeights<P> {
    /// `[C_perf; V] → Z`, followed by GELU.
    pub encoder: Linear<P>,
    /// `Z → Z → K·c_h/c_s` (GELU in between).
    pub expand: [Linear<P>; 2],
    pub decoder: [Conv<P>; 3],
    pub prob_gate: Linear<P>,
    pub mix_gate: Linear<P>,
    /// Learned replacement for the resized identity in the causal setting, `[T, d]`.
    pub positions: Option<P>,
}

impl EstimatorWeights<Tensor> {
    pub fn init(cfg: &SeaConfig, rng: &mut impl Rng) -> Self {
        let (h, d, dh) = (cfg.heads, cfg.head_dim, cfg.hidden);
        let heads_in = if cfg.concat_heads { h } else { 1 };
        let lanes = cfg.compressed_len * cfg.channel_expansion / cfg.width_reduction;
        let ch = h * cfg.channel_expansion;
        EstimatorWeights {
            encoder: Linear::init(heads_in * 3 * d, dh, 1.0, rng),
            expand: [
                Linear::init(dh, dh, 1.0, rng),
                Linear::init(dh, heads_in * lanes, 1.0, rng),
            ],
            decoder: [Conv::init(ch, ch, 1.0, rng), Conv::init(ch, ch, 1.0, rng), Conv::init(ch, h, 1.0, rng)],
            prob_gate: Linear::init(dh, 1, 1.0, rng),
            mix_gate: Linear::init(dh, 1, 1.0, rng),
            positions: cfg.causal.then(|| identity_positions(cfg.seq_len, d)),
        }
    }
}

impl<P> Params<P> for EstimatorWeights<P> {
    type Mapped<Q> = EstimatorWeights<Q>;

    fn try_map<Q>(&self, prefix: &str, f: &mut dyn FnMut(&str, &P) -> Result<Q>) -> Result<EstimatorWeights<Q>> {
        let [e0, e1] = &self.expand;
        let [c0, c1, c2] = &self.decoder;
        Ok(EstimatorWeights {
            encoder: self.encoder.try_map(&join(prefix, "mu"), f)?,
            expand: [e0.try_map(&join(prefix, "nu.0"), f)?, e1.try_map(&join(prefix, "nu.1"), f)?],
            decoder: [
                c0.try_map(&join(prefix, "cnn.0"), f)?,
                c1.try_map(&join(prefix, "cnn.1"), f)?,
                c2.try_map(&join(prefix, "cnn.2"), f)?,
            ],
            prob_gate: self.prob_gate.try_map(&join(prefix, "f_prob"), f)?,
            mix_gate: self.mix_gate.try_map(&join(prefix, "f_pool"), f)?,
            positions: match &self.positions {
                Some(p) => Some(f(&join(prefix, "pos_emb"), p)?),
                None => None,
            },
        })
    }
}

/// Estimator outputs: `a_hat: [H, T, K]`, `z: [H, T, d′]` (or `[T, d′]`
/// when heads are encoded jointly), gates `[H, T]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Estimate<P> {
    pub a_hat: P,
    pub z: P,
    pub s_prob: P,
    pub s_mix: P,
}

fn check_inputs(tape: &Tape, q: Var, k: Var, v: Var, cfg: &SeaConfig) -> Result<()> {
    let want = [cfg.heads, cfg.seq_len, cfg.head_dim];
    for x in [q, k, v] {
        if tape.shape(x) != want {
            return Err(SeaError::shape("estimate", tape.shape(x), &want));
        }
    }
    Ok(())
}

/// `sigmoid(gate(z))` reshaped to `[H, T]`.
fn gate(tape: &mut Tape, lin: &Linear<Var>, z: Var, cfg: &SeaConfig) -> Result<Var> {
    let g = lin.forward(tape, z)?;
    let g = tape.sigmoid(g);
    if cfg.concat_heads {
        let g = tape.reshape(g, [1, cfg.seq_len])?;
        tape.expand(g, &[cfg.heads, cfg.seq_len])
    } else {
        tape.reshape(g, [cfg.heads, cfg.seq_len])
    }
}

/// Estimator forward pass on the tape. `q`, `k`, `v` are `[H, T, d]`.
pub fn estimate_var(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    w: &EstimatorWeights<Var>,
    fm: &FeatureMap,
    cfg: &SeaConfig,
) -> Result<Estimate<Var>> {
    check_inputs(tape, q, k, v, cfg)?;
    let (h, t, d) = (cfg.heads, cfg.seq_len, cfg.head_dim);
    let (kk, cs, chx) = (cfg.compressed_len, cfg.width_reduction, cfg.channel_expansion);
    let lanes = kk / cs;

    let positions = match (cfg.causal, w.positions) {
        (true, Some(p)) => p,
        (true, None) => return Err(SeaError::Config("causal estimator needs positional embeddings".into())),
        (false, _) => tape.constant(identity_positions(t, d)),
    };
    let positions = tape.expand(positions, &[h, t, d])?;
    let v_cat = tape.concat(&[positions, v], 2)?;
    let context = favor_plus_var(tape, q, k, v_cat, fm, cfg.causal)?;
    let v_prime = tape.concat(&[context, v], 2)?;

    let enc_in = if cfg.concat_heads {
        let x = tape.permute(v_prime, &[1, 0, 2])?;
        tape.reshape(x, [t, h * 3 * d])?
    } else {
        v_prime
    };
    let z = w.encoder.forward(tape, enc_in)?;
    let z = tape.gelu(z);
    let hidden = w.expand[0].forward(tape, z)?;
    let hidden = tape.gelu(hidden);
    let z_hat = w.expand[1].forward(tape, hidden)?;
    let z_hat = if cfg.concat_heads {
        let x = tape.reshape(z_hat, [t, h, chx, lanes])?;
        tape.permute(x, &[1, 2, 0, 3])?
    } else {
        let x = tape.reshape(z_hat, [h, t, chx, lanes])?;
        tape.permute(x, &[0, 2, 1, 3])?
    };
    let x = tape.reshape(z_hat, [h * chx, t, lanes])?;

    let logits = if cfg.causal {
        let spec = Conv2dSpec::new((1, 1), true);
        let x = w.decoder[0].forward(tape, x, spec)?;
        let x = tape.gelu(x);
        let x = w.decoder[1].forward(tape, x, spec)?;
        let x = tape.gelu(x);
        let x = tape.nn_interpolate(x, kk, 2)?;
        w.decoder[2].forward(tape, x, spec)?
    } else {
        let x = w.decoder[0].forward(tape, x, Conv2dSpec::new((cs, 1), false))?;
        let x = tape.gelu(x);
        let x = w.decoder[1].forward(tape, x, Conv2dSpec::new((1, 1), false))?;
        let x = tape.gelu(x);
        let x = tape.nn_interpolate(x, t, 1)?;
        let x = tape.nn_interpolate(x, kk, 2)?;
        w.decoder[2].forward(tape, x, Conv2dSpec::new((1, 1), false))?
    };
    let a_hat = tape.softmax_lastdim(logits)?;
    let s_prob = gate(tape, &w.prob_gate, z, cfg)?;
    let s_mix = gate(tape, &w.mix_gate, z, cfg)?;
    Ok(Estimate { a_hat, z, s_prob, s_mix })
}

/// Evaluates the estimator on stored weights without recording gradients.
pub fn estimate(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    w: &EstimatorWeights<Tensor>,
    fm: &FeatureMap,
    cfg: &SeaConfig,
) -> Result<Estimate<Tensor>> {
    cfg.validate()?;
    let mut tape = Tape::new();
    let wv = crate::nn::bind(&mut tape, w, "", false);
    let (q, k, v) = (tape.constant(q.clone()), tape.constant(k.clone()), tape.constant(v.clone()));
    let e = estimate_var(&mut tape, q, k, v, &wv, fm, cfg)?;
    Ok(Estimate {
        a_hat: tape.value(e.a_hat).clone(),
        z: tape.value(e.z).clone(),
        s_prob: tape.value(e.s_prob).clone(),
        s_mix: tape.value(e.s_mix).clone(),
    })
}

/// Probability and mixing gates `(sigmoid(f_prob(z)), sigmoid(f_pool(z)))` for `z: [.., d′]`.
pub fn scalers(z: &Tensor, w: &EstimatorWeights<Tensor>) -> Result<(Tensor, Tensor)> {
    let mut tape = Tape::new();
    let zv = tape.constant(z.clone());
    let mut run = |lin: &Linear<Tensor>| -> Result<Tensor> {
        let l = crate::nn::bind(&mut tape, lin, "", false);
        let g = l.forward(&mut tape, zv)?;
        let g = tape.sigmoid(g);
        let mut shape = tape.shape(g).to_vec();
        shape.pop();
        tape.value(g).reshape(shape)
    };
    Ok((run(&w.prob_gate)?, run(&w.mix_gate)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::sigmoid;
    use crate::gradcheck::fd_check;
    use crate::mask::TopKMode;
    use crate::nn::bind;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg(h: usize, t: usize, kk: usize, causal: bool) -> SeaConfig {
        SeaConfig {
            seq_len: t,
            compressed_len: kk,
            top_k: 1,
            head_dim: 4,
            heads: h,
            hidden: 8,
            features: 16,
            causal,
            mode: if causal { TopKMode::CausalPerBatch } else { TopKMode::PerQuery },
            ..SeaConfig::default()
        }
    }

    fn inputs(c: &SeaConfig, rng: &mut ChaCha8Rng) -> (Tensor, Tensor, Tensor) {
        let s = [c.heads, c.seq_len, c.head_dim];
        (Tensor::randn(s, 1.0, rng), Tensor::randn(s, 1.0, rng), Tensor::randn(s, 1.0, rng))
    }

    fn run(c: &SeaConfig, seed: u64) -> Estimate<Tensor> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = EstimatorWeights::init(c, &mut rng);
        let fm = FeatureMap::new(c.features, c.head_dim, seed, false);
        let (q, k, v) = inputs(c, &mut rng);
        estimate(&q, &k, &v, &w, &fm, c).unwrap()
    }

    fn assert_stochastic(a: &Tensor) {
        let kk = a.dim(2);
        for row in a.data().chunks(kk) {
            assert!(row.iter().all(|&x| (0.0..=1.0).contains(&x)));
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn shapes_and_stochastic_rows() {
        for causal in [false, true] {
            for (h, t, kk) in [(1, 8, 8), (2, 17, 8), (4, 32, 16)] {
                let c = cfg(h, t, kk, causal);
                let e = run(&c, 3);
                assert_eq!(e.a_hat.shape(), &[h, t, kk]);
                assert_eq!(e.z.shape(), &[h, t, 8]);
                assert_eq!(e.s_prob.shape(), &[h, t]);
                assert_stochastic(&e.a_hat);
                for s in e.s_prob.data().iter().chain(e.s_mix.data()) {
                    assert!(*s > 0.0 && *s < 1.0);
                }
            }
        }
    }

    #[test]
    fn joint_head_encoding() {
        let c = SeaConfig {
            concat_heads: true,
            ..cfg(2, 16, 8, false)
        };
        let e = run(&c, 4);
        assert_eq!(e.z.shape(), &[16, 8]);
        assert_eq!(e.a_hat.shape(), &[2, 16, 8]);
        assert_eq!(e.s_mix.shape(), &[2, 16]);
        for t in 0..16 {
            assert_eq!(e.s_mix.at(&[0, t]), e.s_mix.at(&[1, t]));
        }
        assert_stochastic(&e.a_hat);
    }

    #[test]
    fn rejects_invalid_config() {
        let c = cfg(1, 16, 5, false);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let w = EstimatorWeights::init(&cfg(1, 16, 8, false), &mut rng);
        let fm = FeatureMap::new(16, 4, 0, false);
        let (q, k, v) = inputs(&c, &mut rng);
        assert!(matches!(estimate(&q, &k, &v, &w, &fm, &c), Err(SeaError::Config(_))));
    }

    #[test]
    fn causal_rows_ignore_the_future() {
        let c = cfg(2, 16, 8, true);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w = EstimatorWeights::init(&c, &mut rng);
        let fm = FeatureMap::new(c.features, c.head_dim, 5, false);
        let (q, k, v) = inputs(&c, &mut rng);
        let base = estimate(&q, &k, &v, &w, &fm, &c).unwrap();
        for cut in [1, 7, 15] {
            let bump = |x: &Tensor, by: f64| {
                Tensor::from_fn(x.shape().to_vec(), |i| {
                    let tt = (i / c.head_dim) % c.seq_len;
                    x.data()[i] + if tt >= cut { by } else { 0.0 }
                })
            };
            let pert = estimate(&bump(&q, 0.3), &bump(&k, -1.1), &bump(&v, 2.0), &w, &fm, &c).unwrap();
            for h in 0..2 {
                for tt in 0..cut {
                    for j in 0..8 {
                        assert_eq!(base.a_hat.at(&[h, tt, j]).to_bits(), pert.a_hat.at(&[h, tt, j]).to_bits());
                    }
                    assert_eq!(base.s_prob.at(&[h, tt]).to_bits(), pert.s_prob.at(&[h, tt]).to_bits());
                    assert_eq!(base.s_mix.at(&[h, tt]).to_bits(), pert.s_mix.at(&[h, tt]).to_bits());
                }
            }
        }
    }

    #[test]
    fn zero_gates_give_one_half() {
        let c = cfg(1, 8, 8, false);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut w = EstimatorWeights::init(&c, &mut rng);
        for g in [&mut w.prob_gate, &mut w.mix_gate] {
            g.weight = Tensor::zeros(g.weight.shape().to_vec());
        }
        let z = Tensor::randn([8, 8], 1.0, &mut rng);
        let (p, m) = scalers(&z, &w).unwrap();
        assert!(p.data().iter().chain(m.data()).all(|&x| x == 0.5));
    }

    #[test]
    fn gates_match_formula() {
        let c = cfg(1, 8, 8, false);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut w = EstimatorWeights::init(&c, &mut rng);
        w.prob_gate.bias = Tensor::new([1], vec![0.3]).unwrap();
        let z = Tensor::randn([5, 8], 1.0, &mut rng);
        let (p, _) = scalers(&z, &w).unwrap();
        for t in 0..5 {
            let lin: f64 = (0..8).map(|i| z.at(&[t, i]) * w.prob_gate.weight.at(&[i, 0])).sum::<f64>() + 0.3;
            assert!((p.at(&[t]) - sigmoid(lin)).abs() < 1e-12);
        }
    }

    #[test]
    fn estimator_gradients() {
        for causal in [false, true] {
            let c = SeaConfig { features: 6, hidden: 4, ..cfg(2, 8, 4, causal) };
            let mut rng = ChaCha8Rng::seed_from_u64(8);
            let w = EstimatorWeights::init(&c, &mut rng);
            let fm = FeatureMap::new(c.features, c.head_dim, 8, false);
            let (q, k, v) = inputs(&c, &mut rng);
            let mut tensors = vec![q, k, v];
            w.visit("", &mut |_, t| tensors.push(t.clone()));
            let rel = fd_check(&tensors, |tape, vars| {
                let mut it = vars[3..].iter().copied();
                let wv = w.map("", &mut |_, _| it.next().unwrap());
                let e = estimate_var(tape, vars[0], vars[1], vars[2], &wv, &fm, &c)?;
                let a = tape.sum_all(e.a_hat);
                let p = tape.mul(e.s_prob, e.s_mix)?;
                let p = tape.sum_all(p);
                let a2 = tape.mul(e.a_hat, e.a_hat)?;
                let a2 = tape.sum_all(a2);
                let s = tape.add(a, p)?;
                tape.add(s, a2)
            });
            assert!(rel < 1e-4, "causal={causal}: {rel:e}");
        }
    }

    #[test]
    fn weight_names() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let w = EstimatorWeights::init(&cfg(1, 8, 8, true), &mut rng);
        let mut names = Vec::new();
        w.visit("estimator", &mut |n, _| names.push(n.to_string()));
        assert!(names.contains(&"estimator.mu.weight".to_string()));
        assert!(names.contains(&"estimator.nu.1.bias".to_string()));
        assert!(names.contains(&"estimator.cnn.2.weight".to_string()));
        assert!(names.contains(&"estimator.f_prob.weight".to_string()));
        assert!(names.contains(&"estimator.f_pool.bias".to_string()));
        assert!(names.contains(&"estimator.pos_emb".to_string()));
        let mut tape = Tape::new();
        let _ = bind(&mut tape, &w, "estimator", true);
        assert_eq!(tape.len(), names.len());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(12))]
        #[test]
        fn shape_contract(seed in 0u64..100, h in prop::sample::select(vec![1usize, 2, 4]), t in 8usize..80, kk in prop::sample::select(vec![8usize, 16, 32]), causal: bool) {
            let t = t.max(kk);
            let c = cfg(h, t, kk, causal);
            let e = run(&c, seed);
            prop_assert_eq!(e.a_hat.shape(), &[h, t, kk]);
            for row in e.a_hat.data().chunks(kk) {
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
                prop_assert!(row.iter().all(|&x| x >= 0.0));
            }
        }
    }
}
