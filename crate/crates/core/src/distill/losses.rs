//! Distillation loss terms and their weighted total.
//!
//! Every KL here is `KL(teacher ‖ student)`, summed over the last axis and
//! averaged over rows, with the student floored at [`EPS`].

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Result, SeaError};
use crate::tensor::{nn_source_index, Tensor};

pub const EPS: f64 = 1e-12;

/// Per-term loss weights. Defaults are the published values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub kl_approx: f64,
    pub mse_approx: f64,
    pub kl_prob: f64,
    pub mse_prob: f64,
    pub context: f64,
    pub kd: f64,
    /// Multiplies the layer-averaged sum.
    pub layer: f64,
    pub kd_task: f64,
    pub task: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            kl_approx: 0.1,
            mse_approx: 1.0,
            kl_prob: 0.1,
            mse_prob: 1.0,
            context: 1.0,
            kd: 5.0,
            layer: 1.0,
            kd_task: 0.2,
            task: 0.1,
        }
    }
}

impl LossWeights {
    /// Only the task term, at unit weight: the undistilled baseline.
    pub fn task_only() -> Self {
        LossWeights {
            kl_approx: 0.0,
            mse_approx: 0.0,
            kl_prob: 0.0,
            mse_prob: 0.0,
            context: 0.0,
            kd: 0.0,
            layer: 1.0,
            kd_task: 0.0,
            task: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            self.kl_approx,
            self.mse_approx,
            self.kl_prob,
            self.mse_prob,
            self.context,
            self.kd,
            self.layer,
            self.kd_task,
            self.task,
        ];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(SeaError::Config(format!("loss weights must be finite and nonnegative: {self:?}")));
        }
        Ok(())
    }
}

/// Raw (unweighted) KL and MSE between a student and a teacher distribution.
#[derive(Debug, Clone, Copy)]
pub struct KlMse {
    pub kl: Var,
    pub mse: Var,
}

/// Raw per-layer terms.
#[derive(Debug, Clone, Copy)]
pub struct LayerTerms {
    pub approx: KlMse,
    pub prob: KlMse,
    pub context: Var,
    pub kd: Var,
}

/// Weighted contributions to the total; they sum to `total`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub approx: f64,
    pub prob: f64,
    pub context: f64,
    pub kd: f64,
    pub kd_task: f64,
    pub task: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub const COLUMNS: [&'static str; 7] = ["L_approx", "L_prob", "L_context", "L_kd", "L_kd_task", "L_task", "total"];

    pub fn terms(&self) -> [f64; 6] {
        [self.approx, self.prob, self.context, self.kd, self.kd_task, self.task]
    }

    pub fn values(&self) -> [f64; 7] {
        let t = self.terms();
        [t[0], t[1], t[2], t[3], t[4], t[5], self.total]
    }

    pub fn weighted_sum(&self) -> f64 {
        self.terms().iter().fold(0.0, |a, b| a + b)
    }
}

fn check_stochastic(p: &Tensor, what: &str) -> Result<()> {
    let n = *p.shape().last().unwrap_or(&0);
    if n == 0 {
        return Err(SeaError::Contract(format!("{what}: empty distribution")));
    }
    for (i, row) in p.data().chunks(n).enumerate() {
        let s: f64 = row.iter().sum();
        if row.iter().any(|x| !(*x >= 0.0)) || (s - 1.0).abs() > 1e-8 {
            return Err(SeaError::Contract(format!("{what}: row {i} is not a distribution (sum {s})")));
        }
    }
    Ok(())
}

/// `KL(teacher ‖ student)` averaged over rows.
pub fn kl_rows(tape: &mut Tape, student: Var, teacher: &Tensor) -> Result<Var> {
    if tape.shape(student) != teacher.shape() {
        return Err(SeaError::shape("kl_rows", tape.shape(student), teacher.shape()));
    }
    let n = *teacher.shape().last().unwrap_or(&1);
    let rows = (teacher.len() / n.max(1)) as f64;
    let entropy: f64 = teacher.data().iter().filter(|p| **p > 0.0).map(|p| p * p.ln()).sum();
    let floored = tape.add_scalar(student, EPS);
    let log_q = tape.log(floored);
    let p = tape.constant(teacher.clone());
    let cross = tape.mul(log_q, p)?;
    let cross = tape.sum_all(cross);
    let neg = tape.scale(cross, -1.0 / rows);
    Ok(tape.add_scalar(neg, entropy / rows))
}

/// Mean squared error over all entries.
pub fn mse(tape: &mut Tape, student: Var, teacher: &Tensor) -> Result<Var> {
    let t = tape.constant(teacher.clone());
    mse_var(tape, student, t)
}

pub(crate) fn mse_var(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let d = tape.sub(a, b)?;
    let sq = tape.mul(d, d)?;
    Ok(tape.mean_all(sq))
}

fn kl_mse(tape: &mut Tape, student: Var, teacher: &Tensor) -> Result<KlMse> {
    Ok(KlMse {
        kl: kl_rows(tape, student, teacher)?,
        mse: mse(tape, student, teacher)?,
    })
}

/// Compressed estimate `[H, T, K]` resized to the teacher's `[H, T, T]`.
///
/// Each row is resized to its own width (`t + 1` when causal, zero beyond)
/// and renormalized to sum to one.
pub fn expand_estimate(tape: &mut Tape, a_hat: Var, seq_len: usize, causal: bool) -> Result<Var> {
    let s = tape.shape(a_hat).to_vec();
    if s.len() != 3 || s[1] != seq_len {
        return Err(SeaError::dim("expand_estimate", format!("expected [H,{seq_len},K], got {s:?}")));
    }
    let (h, t, kk) = (s[0], s[1], s[2]);
    let mut index = Vec::with_capacity(h * t * t);
    let mut keep = Vec::with_capacity(h * t * t);
    for hh in 0..h {
        for row in 0..t {
            let w = if causal { row + 1 } else { t };
            for c in 0..t {
                let src = if c < w { nn_source_index(c, kk, w) } else { 0 };
                index.push((hh * t + row) * kk + src);
                keep.push(if c < w { 1.0 } else { 0.0 });
            }
        }
    }
    let full = tape.gather(a_hat, index.into(), &[h, t, t])?;
    let keep = tape.constant(Tensor::new([h, t, t], keep)?);
    let masked = tape.mul(full, keep)?;
    let total = tape.sum_axis(masked, 2)?;
    tape.div(masked, total)
}

/// Estimate-vs-teacher terms, computed on the expanded estimate.
pub fn loss_approx(tape: &mut Tape, a_hat: Var, teacher: &Tensor, causal: bool) -> Result<KlMse> {
    check_stochastic(teacher, "loss_approx teacher")?;
    let expanded = expand_estimate(tape, a_hat, teacher.dim(1), causal)?;
    kl_mse(tape, expanded, teacher)
}

/// Dense student attention `softmax(q kᵀ/√d)` `[H, T, T]` (quadratic; training only).
pub fn dense_probs(tape: &mut Tape, q: Var, k: Var, causal: bool) -> Result<Var> {
    let s = tape.shape(q).to_vec();
    let (h, t, d) = (s[0], s[1], s[2]);
    let kt = tape.transpose(k, 1, 2)?;
    let scores = tape.matmul(q, kt)?;
    let scores = tape.scale(scores, 1.0 / (d as f64).sqrt());
    if causal {
        let keep: Vec<bool> = (0..h * t * t).map(|i| i % t <= (i / t) % t).collect();
        tape.masked_softmax_lastdim(scores, &keep)
    } else {
        tape.softmax_lastdim(scores)
    }
}

/// Dense student attention vs teacher.
pub fn loss_prob(tape: &mut Tape, q: Var, k: Var, teacher: &Tensor, causal: bool) -> Result<KlMse> {
    check_stochastic(teacher, "loss_prob teacher")?;
    let a = dense_probs(tape, q, k, causal)?;
    kl_mse(tape, a, teacher)
}

pub fn loss_context(tape: &mut Tape, c_sea: Var, teacher: &Tensor) -> Result<Var> {
    mse(tape, c_sea, teacher)
}

pub fn loss_kd_layer(tape: &mut Tape, out: Var, teacher: &Tensor) -> Result<Var> {
    mse(tape, out, teacher)
}

/// KL between the softmax of teacher logits and student logits, `[N, V]`.
pub fn loss_kd_task(tape: &mut Tape, student_logits: Var, teacher_logits: &Tensor) -> Result<Var> {
    let p = tape.softmax_lastdim(student_logits)?;
    kl_rows(tape, p, &teacher_logits.softmax_lastdim()?)
}

/// Mean cross-entropy of `[N, V]` logits against `targets`.
pub fn cross_entropy(tape: &mut Tape, logits: Var, targets: &[usize]) -> Result<Var> {
    let s = tape.shape(logits).to_vec();
    if s.len() != 2 || s[0] != targets.len() || targets.iter().any(|&c| c >= s[1]) {
        return Err(SeaError::dim("cross_entropy", format!("logits {s:?} vs {} targets", targets.len())));
    }
    let p = tape.softmax_lastdim(logits)?;
    let index: Vec<usize> = targets.iter().enumerate().map(|(i, &c)| i * s[1] + c).collect();
    let picked = tape.gather(p, index.into(), &[targets.len()])?;
    let floored = tape.add_scalar(picked, EPS);
    let logp = tape.log(floored);
    let m = tape.mean_all(logp);
    Ok(tape.scale(m, -1.0))
}

/// Weighted total: layer-averaged per-layer terms plus the output terms.
pub fn total_loss(
    tape: &mut Tape,
    layers: &[LayerTerms],
    kd_task: Var,
    task: Var,
    w: &LossWeights,
) -> Result<(Var, LossBreakdown)> {
    if layers.is_empty() {
        return Err(SeaError::Config("total_loss needs at least one layer".into()));
    }
    let per_layer = w.layer / layers.len() as f64;
    let sum = |tape: &mut Tape, f: &dyn Fn(&LayerTerms) -> Vec<(Var, f64)>| -> Result<Var> {
        let mut acc: Option<Var> = None;
        for l in layers {
            for (v, wt) in f(l) {
                let x = tape.scale(v, wt);
                acc = Some(match acc {
                    None => x,
                    Some(a) => tape.add(a, x)?,
                });
            }
        }
        Ok(tape.scale(acc.expect("at least one layer"), per_layer))
    };
    let approx = sum(tape, &|l| vec![(l.approx.kl, w.kl_approx), (l.approx.mse, w.mse_approx)])?;
    let prob = sum(tape, &|l| vec![(l.prob.kl, w.kl_prob), (l.prob.mse, w.mse_prob)])?;
    let context = sum(tape, &|l| vec![(l.context, w.context)])?;
    let kd = sum(tape, &|l| vec![(l.kd, w.kd)])?;
    let kd_task = tape.scale(kd_task, w.kd_task);
    let task = tape.scale(task, w.task);
    let parts = [approx, prob, context, kd, kd_task, task];
    let mut total = parts[0];
    for p in &parts[1..] {
        total = tape.add(total, *p)?;
    }
    let val = |v: Var| tape.value(v).item();
    let breakdown = LossBreakdown {
        approx: val(approx),
        prob: val(prob),
        context: val(context),
        kd: val(kd),
        kd_task: val(kd_task),
        task: val(task),
        total: val(total),
    };
    Ok((total, breakdown))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::assert_gradients;
    use crate::work;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scalar(tape: &Tape, v: Var) -> f64 {
        tape.value(v).item()
    }

    #[test]
    fn identical_distributions_cost_nothing() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = Tensor::uniform([2, 4, 4], 0.0, 1.0, &mut rng).softmax_lastdim().unwrap();
        let mut tape = Tape::new();
        let s = tape.constant(a.clone());
        let kl = kl_rows(&mut tape, s, &a).unwrap();
        let m = mse(&mut tape, s, &a).unwrap();
        assert!(scalar(&tape, kl).abs() < 1e-10);
        assert_eq!(scalar(&tape, m), 0.0);
    }

    #[test]
    fn estimate_matching_teacher_costs_nothing() {
        // A K=T estimate expands to itself.
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = Tensor::uniform([1, 4, 4], 0.0, 1.0, &mut rng).softmax_lastdim().unwrap();
        let mut tape = Tape::new();
        let s = tape.constant(a.clone());
        let l = loss_approx(&mut tape, s, &a, false).unwrap();
        assert!(scalar(&tape, l.kl).abs() < 1e-10);
        assert!(scalar(&tape, l.mse) < 1e-30);
    }

    #[test]
    fn uniform_vs_one_hot_is_ln2() {
        let teacher = Tensor::new([1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let mut tape = Tape::new();
        let a_hat = tape.constant(Tensor::full([1, 2, 1], 1.0));
        let l = loss_approx(&mut tape, a_hat, &teacher, false).unwrap();
        assert!((scalar(&tape, l.kl) - 2f64.ln()).abs() < 1e-10);
        assert!((scalar(&tape, l.mse) - 0.25).abs() < 1e-15);
    }

    #[test]
    fn non_stochastic_teacher_is_rejected() {
        let mut tape = Tape::new();
        let a_hat = tape.constant(Tensor::full([1, 2, 1], 1.0));
        let bad = Tensor::new([1, 2, 2], vec![0.7, 0.7, 0.0, 1.0]).unwrap();
        assert!(matches!(loss_approx(&mut tape, a_hat, &bad, false), Err(SeaError::Contract(_))));
    }

    #[test]
    fn causal_expansion_stays_on_the_prefix() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = Tensor::uniform([2, 6, 3], 0.0, 1.0, &mut rng).softmax_lastdim().unwrap();
        let mut tape = Tape::new();
        let s = tape.constant(a);
        let e = expand_estimate(&mut tape, s, 6, true).unwrap();
        let e = tape.value(e);
        for h in 0..2 {
            for t in 0..6 {
                let row: Vec<f64> = (0..6).map(|c| e.at(&[h, t, c])).collect();
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                assert!(row[t + 1..].iter().all(|x| *x == 0.0));
            }
        }
    }

    #[test]
    fn two_token_mismatch_closed_form() {
        // Scores [x, −x] / [−x, x] give a = σ(2x) on the diagonal.
        let x: f64 = 0.3;
        let teacher = Tensor::new([1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let mut tape = Tape::new();
        let q = tape.constant(Tensor::new([1, 2, 1], vec![1.0, -1.0]).unwrap());
        let k = tape.constant(Tensor::new([1, 2, 1], vec![x, -x]).unwrap());
        let l = loss_prob(&mut tape, q, k, &teacher, false).unwrap();
        let a = 1.0 / (1.0 + (-2.0 * x).exp());
        assert!((scalar(&tape, l.kl) + a.ln()).abs() < 1e-10);
        assert!((scalar(&tape, l.mse) - (1.0 - a).powi(2)).abs() < 1e-14);
    }

    #[test]
    fn copied_student_matches_teacher() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let q = Tensor::randn([2, 5, 3], 1.0, &mut rng);
        let k = Tensor::randn([2, 5, 3], 1.0, &mut rng);
        for causal in [false, true] {
            let mut tape = Tape::new();
            let (qv, kv) = (tape.constant(q.clone()), tape.constant(k.clone()));
            let probs = dense_probs(&mut tape, qv, kv, causal).unwrap();
            let teacher = tape.value(probs).clone();
            let l = loss_prob(&mut tape, qv, kv, &teacher, causal).unwrap();
            assert!(scalar(&tape, l.kl).abs() < 1e-10);
            assert_eq!(scalar(&tape, l.mse), 0.0);
        }
    }

    #[test]
    fn dense_student_cost_is_quadratic() {
        let macs = |t: usize| {
            let mut rng = ChaCha8Rng::seed_from_u64(4);
            let q = Tensor::randn([2, t, 4], 1.0, &mut rng);
            let teacher = Tensor::full([2, t, t], 1.0 / t as f64);
            let mut tape = Tape::new();
            let qv = tape.constant(q);
            work::reset();
            loss_prob(&mut tape, qv, qv, &teacher, false).unwrap();
            work::snapshot().total_macs() as f64
        };
        let r = macs(128) / macs(64);
        assert!((3.6..=4.4).contains(&r), "ratio {r}");
    }

    #[test]
    fn kd_layer_weight_is_five() {
        let mut tape = Tape::new();
        let zero = tape.constant(Tensor::scalar(0.0));
        let one = tape.constant(Tensor::scalar(1.0));
        let z = KlMse { kl: zero, mse: zero };
        let layer = LayerTerms { approx: z, prob: z, context: zero, kd: one };
        let (total, b) = total_loss(&mut tape, &[layer], zero, zero, &LossWeights::default()).unwrap();
        assert_eq!(scalar(&tape, total), 5.0);
        assert_eq!(b.kd, 5.0);
        let quiet = LayerTerms { kd: zero, ..layer };
        let (total, _) = total_loss(&mut tape, &[quiet], zero, zero, &LossWeights::default()).unwrap();
        assert_eq!(scalar(&tape, total), 0.0);
    }

    #[test]
    fn breakdown_sums_to_total() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut tape = Tape::new();
        let mut r = || tape_scalar(&mut rng);
        let layers: Vec<[f64; 6]> = (0..3).map(|_| [r(), r(), r(), r(), r(), r()]).collect();
        let (kdt, task) = (r(), r());
        let mut v = |x: f64| tape.constant(Tensor::scalar(x));
        let terms: Vec<LayerTerms> = layers
            .iter()
            .map(|l| LayerTerms {
                approx: KlMse { kl: v(l[0]), mse: v(l[1]) },
                prob: KlMse { kl: v(l[2]), mse: v(l[3]) },
                context: v(l[4]),
                kd: v(l[5]),
            })
            .collect();
        let (kdt, task) = (v(kdt), v(task));
        let (total, b) = total_loss(&mut tape, &terms, kdt, task, &LossWeights::default()).unwrap();
        assert!((b.weighted_sum() - tape.value(total).item()).abs() <= 1e-12);
        assert_eq!(b.total, tape.value(total).item());
    }

    fn tape_scalar(rng: &mut ChaCha8Rng) -> f64 {
        use rand::Rng;
        rng.random_range(0.0..3.0)
    }

    #[test]
    fn layer_order_does_not_matter() {
        let mut tape = Tape::new();
        let mut mk = |a: f64, b: f64| {
            let x = tape.constant(Tensor::scalar(a));
            let y = tape.constant(Tensor::scalar(b));
            LayerTerms { approx: KlMse { kl: x, mse: y }, prob: KlMse { kl: y, mse: x }, context: x, kd: y }
        };
        let (l1, l2) = (mk(0.25, 1.5), mk(2.0, 0.125));
        let zero = tape.constant(Tensor::scalar(0.0));
        let w = LossWeights::default();
        let (_, a) = total_loss(&mut tape, &[l1, l2], zero, zero, &w).unwrap();
        let (_, b) = total_loss(&mut tape, &[l2, l1], zero, zero, &w).unwrap();
        for (x, y) in a.values().iter().zip(b.values()) {
            assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0));
        }
    }

    #[test]
    fn loss_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for causal in [false, true] {
            let teacher = {
                let mut tape = Tape::new();
                let q = tape.constant(Tensor::randn([2, 5, 3], 1.0, &mut rng));
                let k = tape.constant(Tensor::randn([2, 5, 3], 1.0, &mut rng));
                let probs = dense_probs(&mut tape, q, k, causal).unwrap();
                tape.value(probs).clone()
            };
            let a_hat = Tensor::uniform([2, 5, 3], 0.0, 1.0, &mut rng).softmax_lastdim().unwrap();
            assert_gradients("loss_approx", &[a_hat], |tape, x| {
                let l = loss_approx(tape, x[0], &teacher, causal)?;
                tape.add(l.kl, l.mse)
            });
            let qk = [Tensor::randn([2, 5, 3], 1.0, &mut rng), Tensor::randn([2, 5, 3], 1.0, &mut rng)];
            assert_gradients("loss_prob", &qk, |tape, x| {
                let l = loss_prob(tape, x[0], x[1], &teacher, causal)?;
                tape.add(l.kl, l.mse)
            });
        }
        let teacher_logits = Tensor::randn([4, 6], 1.0, &mut rng);
        let logits = Tensor::randn([4, 6], 1.0, &mut rng);
        assert_gradients("loss_kd_task", &[logits.clone()], |tape, x| loss_kd_task(tape, x[0], &teacher_logits));
        assert_gradients("cross_entropy", &[logits], |tape, x| cross_entropy(tape, x[0], &[0, 5, 2, 2]));
    }

    #[test]
    fn negative_weights_are_rejected() {
        assert!(LossWeights::default().validate().is_ok());
        let w = LossWeights { kd: -1.0, ..LossWeights::default() };
        assert!(w.validate().is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn kl_is_nonnegative(seed in 0u64..1000, rows in 1usize..5, n in 1usize..6) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let p = Tensor::randn([rows, n], 2.0, &mut rng).softmax_lastdim().unwrap();
                let q = Tensor::randn([rows, n], 2.0, &mut rng).softmax_lastdim().unwrap();
                let mut tape = Tape::new();
                let qv = tape.constant(q);
                let pv = tape.constant(p.clone());
                let cross = kl_rows(&mut tape, qv, &p).unwrap();
                let same = kl_rows(&mut tape, pv, &p).unwrap();
                // The floor can push KL below zero by at most about EPS.
                prop_assert!(tape.value(cross).item() >= -10.0 * EPS);
                prop_assert!(tape.value(same).item().abs() < 1e-10);
            }
        }
    }
}
