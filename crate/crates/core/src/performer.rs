//! FAVOR+ random-feature attention.
//!
//! Positive exponential features approximate the softmax kernel
//! `exp(qᵀk/√d)`, so attention can be evaluated as
//! `φ(Q)(φ(K)ᵀV) / φ(Q)(φ(K)ᵀ1)` without ever forming a `T×T` matrix.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Result, SeaError};
use crate::tensor::{nn_source_index, Tensor};

const NORMALIZER_EPS: f64 = 1e-12;
const DEGENERATE_BELOW: f64 = 1e-20;

/// Fixed random projection defining the feature map.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    projection: Tensor,
    seed: u64,
}

impl FeatureMap {
    /// Draws `features × dim` standard normal directions from `seed`.
    ///
    /// With `orthogonal`, directions are orthogonalised in blocks of `dim`
    /// and rescaled to chi-distributed norms, which keeps the estimator
    /// unbiased.
    pub fn new(features: usize, dim: usize, seed: u64, orthogonal: bool) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut projection = Tensor::randn([features, dim], 1.0, &mut rng);
        if orthogonal {
            orthogonalize_blocks(&mut projection, &mut rng);
        }
        FeatureMap { projection, seed }
    }

    pub fn from_projection(projection: Tensor) -> Result<Self> {
        if projection.rank() != 2 || projection.dim(0) == 0 || projection.dim(1) == 0 {
            return Err(SeaError::dim(
                "feature_map",
                format!("projection must be a non-empty [m,d] matrix, got {:?}", projection.shape()),
            ));
        }
        Ok(FeatureMap { projection, seed: 0 })
    }

    pub fn features(&self) -> usize {
        self.projection.dim(0)
    }

    pub fn dim(&self) -> usize {
        self.projection.dim(1)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn projection(&self) -> &Tensor {
        &self.projection
    }
}

fn orthogonalize_blocks(w: &mut Tensor, rng: &mut ChaCha8Rng) {
    let (m, d) = (w.dim(0), w.dim(1));
    let norms = Tensor::randn([m, d], 1.0, rng);
    let data = w.data_mut();
    for block in (0..m).step_by(d) {
        for i in block..(block + d).min(m) {
            for j in block..i {
                let dot: f64 = (0..d).map(|c| data[i * d + c] * data[j * d + c]).sum();
                for c in 0..d {
                    data[i * d + c] -= dot * data[j * d + c];
                }
            }
            let n = (0..d).map(|c| data[i * d + c].powi(2)).sum::<f64>().sqrt();
            for c in 0..d {
                data[i * d + c] /= n;
            }
        }
    }
    for i in 0..m {
        let target = norms.data()[i * d..(i + 1) * d].iter().map(|v| v * v).sum::<f64>().sqrt();
        for c in 0..d {
            data[i * d + c] *= target;
        }
    }
}

fn check_dim(x: &[usize], fm: &FeatureMap) -> Result<()> {
    if x.len() < 2 || x[x.len() - 1] != fm.dim() {
        return Err(SeaError::shape("phi", x, fm.projection.shape()));
    }
    Ok(())
}

/// Feature logits `xWᵀ/d^{1/4} − ‖x‖²/(2√d)` for inputs `[.., T, d]`.
fn feature_logits(tape: &mut Tape, x: Var, fm: &FeatureMap) -> Result<Var> {
    check_dim(tape.shape(x), fm)?;
    let d = fm.dim() as f64;
    let xs = tape.scale(x, d.powf(-0.25));
    let wt = tape.constant(fm.projection.transpose(0, 1)?);
    let proj = tape.matmul(xs, wt)?;
    let sq = tape.mul(xs, xs)?;
    let sq = tape.sum_axis(sq, tape.shape(sq).len() - 1)?;
    let sq = tape.scale(sq, 0.5);
    tape.sub(proj, sq)
}

/// Positive softmax-kernel features `[.., T, d] → [.., T, m]`.
pub fn phi(x: &Tensor, fm: &FeatureMap) -> Result<Tensor> {
    let mut tape = Tape::new();
    let x = tape.constant(x.clone());
    let logits = feature_logits(&mut tape, x, fm)?;
    let scale = (fm.features() as f64).powf(-0.5);
    Ok(tape.value(logits).map(|v| scale * v.exp()))
}

/// Subtracts a per-slice maximum of `logits` that the gradient treats as constant.
fn shift_by_max(tape: &mut Tape, logits: Var, axes_from: usize) -> Result<Var> {
    let v = tape.value(logits);
    let shape = v.shape().to_vec();
    let inner: usize = shape[axes_from..].iter().product();
    let maxes: Vec<f64> = v
        .data()
        .chunks(inner)
        .map(|c| c.iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .collect();
    let mut mshape = shape[..axes_from].to_vec();
    mshape.extend(std::iter::repeat_n(1, shape.len() - axes_from));
    let m = tape.constant(Tensor::new(mshape, maxes)?);
    tape.sub(logits, m)
}

/// Per query row, `max_j (logit_j + ln ksum_j)`; `ksum` broadcasts over rows.
fn query_shift(logits: &Tensor, ksum: &Tensor, t: usize) -> Result<Tensor> {
    let m = *logits.shape().last().unwrap();
    let per_row = ksum.dim(ksum.rank() - 2) == t;
    let mut out = Vec::with_capacity(logits.len() / m);
    for (i, row) in logits.data().chunks(m).enumerate() {
        let (slice, row_t) = (i / t, i % t);
        let krow = if per_row { slice * t + row_t } else { slice };
        let ks = &ksum.data()[krow * m..(krow + 1) * m];
        let c = row
            .iter()
            .zip(ks)
            .map(|(l, s)| l + s.ln())
            .fold(f64::NEG_INFINITY, f64::max);
        if !c.is_finite() {
            return Err(SeaError::Degenerate { op: "favor_plus", row: row_t });
        }
        out.push(c);
    }
    let mut shape = logits.shape().to_vec();
    *shape.last_mut().unwrap() = 1;
    Ok(Tensor::from_parts(shape, out))
}

/// FAVOR+ attention on the tape. `q`, `k` are `[.., T, d]`, `v` is `[.., T, dv]`.
///
/// Key features are shifted by their per-slice maximum (bidirectional
/// only) and query features by the largest term of their normalizer. Both
/// shifts cancel in the ratio, so the result is unchanged while the
/// normalizer lies in `[1, m]` next to its epsilon.
pub fn favor_plus_var(tape: &mut Tape, q: Var, k: Var, v: Var, fm: &FeatureMap, causal: bool) -> Result<Var> {
    let (qs, ks, vs) = (tape.shape(q).to_vec(), tape.shape(k).to_vec(), tape.shape(v).to_vec());
    let r = qs.len();
    if r < 2 || ks != qs || vs.len() != r || vs[..r - 1] != qs[..r - 1] {
        return Err(SeaError::shape("favor_plus", &qs, &vs));
    }
    let t = qs[r - 2];
    let dv = vs[r - 1];
    let m = fm.features();
    let lead = qs[..r - 2].to_vec();
    // A single token has no future to hide, and both variants coincide.
    let causal = causal && t > 1;

    // The m^{-1/2} factor of φ cancels in the ratio and is left out.
    let kl = feature_logits(tape, k, fm)?;
    let kl = if causal { kl } else { shift_by_max(tape, kl, r - 2)? };
    let pk = tape.exp(kl);
    let ksum = if causal {
        tape.cumsum(pk, r - 2)?
    } else {
        tape.sum_axis(pk, r - 2)?
    };

    let ql = feature_logits(tape, q, fm)?;
    let shift = tape.constant(query_shift(tape.value(ql), tape.value(ksum), t)?);
    let ql = tape.sub(ql, shift)?;
    let pq = tape.exp(ql);

    let num = if causal {
        // Running sums of φ(k_s) v_sᵀ over s ≤ t.
        let mut col = lead.clone();
        col.extend([t, m, 1]);
        let mut row = lead.clone();
        row.extend([t, 1, dv]);
        let pk_col = tape.reshape(pk, col)?;
        let v_row = tape.reshape(v, row)?;
        let outer = tape.mul(pk_col, v_row)?;
        let state = tape.cumsum(outer, r - 2)?;
        let mut qrow = lead.clone();
        qrow.extend([t, 1, m]);
        let pq_row = tape.reshape(pq, qrow)?;
        let num = tape.matmul(pq_row, state)?;
        let mut out = lead.clone();
        out.extend([t, dv]);
        tape.reshape(num, out)?
    } else {
        let pkt = tape.transpose(pk, r - 2, r - 1)?;
        let kv = tape.matmul(pkt, v)?;
        tape.matmul(pq, kv)?
    };
    let den = tape.mul(pq, ksum)?;
    let den = tape.sum_axis(den, r - 1)?;
    if let Some(row) = tape
        .value(den)
        .data()
        .iter()
        .position(|d| !d.is_finite() || *d < DEGENERATE_BELOW)
    {
        return Err(SeaError::Degenerate {
            op: "favor_plus",
            row: row % t,
        });
    }
    let den = tape.add_scalar(den, NORMALIZER_EPS);
    tape.div(num, den)
}

/// FAVOR+ attention for plain tensors; see [`favor_plus_var`].
pub fn favor_plus(q: &Tensor, k: &Tensor, v: &Tensor, fm: &FeatureMap, causal: bool) -> Result<Tensor> {
    let mut tape = Tape::new();
    let (q, k, v) = (tape.constant(q.clone()), tape.constant(k.clone()), tape.constant(v.clone()));
    let out = favor_plus_var(&mut tape, q, k, v, fm, causal)?;
    Ok(tape.value(out).clone())
}

/// Nearest-neighbour resize of the `d×d` identity to `T×d`: row t is `e_{⌊t·d/T⌋}`.
pub fn identity_positions(seq_len: usize, dim: usize) -> Tensor {
    Tensor::from_fn([seq_len, dim], |i| {
        let (t, c) = (i / dim, i % dim);
        if nn_source_index(t, dim, seq_len) == c {
            1.0
        } else {
            0.0
        }
    })
}

/// `[V_I; V]` along the feature axis for `V` of shape `[.., T, d]`.
pub fn build_v_cat(v: &Tensor) -> Result<Tensor> {
    let r = v.rank();
    if r < 2 || v.dim(r - 2) == 0 {
        return Err(SeaError::dim("build_v_cat", format!("need [.., T, d] with T ≥ 1, got {:?}", v.shape())));
    }
    let pos = identity_positions(v.dim(r - 2), v.dim(r - 1)).broadcast_to(v.shape())?;
    Tensor::concat(&[&pos, v], r - 1)
}
