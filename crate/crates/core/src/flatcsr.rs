//! Row-compressed sparse attention over a head-flattened key axis.
//!
//! Row `t` holds the entries of query `t` for every head; column
//! `h·T + s` addresses key `s` of head `h`. Softmax is taken per
//! `(row, head)` segment. Binary masks carry no values and read as ones.

use std::fmt::Write as _;

use crate::error::{Result, SeaError};
use crate::mask::TopKMode;
use crate::tensor::Tensor;
use crate::work;

#[derive(Debug, Clone, PartialEq)]
pub struct FlatCsr {
    n_rows: usize,
    heads: usize,
    row_offsets: Vec<usize>,
    col_indices: Vec<usize>,
    values: Option<Vec<f64>>,
    group_tag: TopKMode,
}

impl FlatCsr {
    /// Builds and validates a matrix of `seq_len` rows over `heads · seq_len` columns.
    pub fn new(
        seq_len: usize,
        heads: usize,
        row_offsets: Vec<usize>,
        col_indices: Vec<usize>,
        values: Option<Vec<f64>>,
        group_tag: TopKMode,
    ) -> Result<Self> {
        let m = FlatCsr {
            n_rows: seq_len,
            heads,
            row_offsets,
            col_indices,
            values,
            group_tag,
        };
        m.validate()?;
        Ok(m)
    }

    /// Empty binary pattern.
    pub fn empty(seq_len: usize, heads: usize, group_tag: TopKMode) -> Self {
        FlatCsr {
            n_rows: seq_len,
            heads,
            row_offsets: vec![0; seq_len + 1],
            col_indices: Vec::new(),
            values: None,
            group_tag,
        }
    }

    /// Every `(t, h, s)` with `s < T`, or `s ≤ t` when causal.
    pub fn full(seq_len: usize, heads: usize, causal: bool) -> Self {
        let mut offsets = vec![0];
        let mut cols = Vec::new();
        for t in 0..seq_len {
            let w = if causal { t + 1 } else { seq_len };
            for h in 0..heads {
                cols.extend(h * seq_len..h * seq_len + w);
            }
            offsets.push(cols.len());
        }
        FlatCsr {
            n_rows: seq_len,
            heads,
            row_offsets: offsets,
            col_indices: cols,
            values: None,
            group_tag: TopKMode::PerQuery,
        }
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.heads * self.n_rows
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn seq_len(&self) -> usize {
        self.n_rows
    }

    pub fn nnz(&self) -> usize {
        self.col_indices.len()
    }

    pub fn row_offsets(&self) -> &[usize] {
        &self.row_offsets
    }

    pub fn col_indices(&self) -> &[usize] {
        &self.col_indices
    }

    pub fn values(&self) -> Option<&[f64]> {
        self.values.as_deref()
    }

    pub fn group_tag(&self) -> TopKMode {
        self.group_tag
    }

    pub fn is_binary(&self) -> bool {
        self.values.is_none()
    }

    pub fn row(&self, t: usize) -> &[usize] {
        &self.col_indices[self.row_offsets[t]..self.row_offsets[t + 1]]
    }

    /// Stored value at entry `e`, 1 for binary masks.
    pub fn value(&self, e: usize) -> f64 {
        self.values.as_ref().map_or(1.0, |v| v[e])
    }

    /// `(head, key)` addressed by a flat column.
    pub fn split_col(&self, col: usize) -> (usize, usize) {
        (col / self.n_rows, col % self.n_rows)
    }

    /// The same pattern without values.
    pub fn pattern(&self) -> FlatCsr {
        FlatCsr {
            values: None,
            ..self.clone()
        }
    }

    /// Per-row entry counts.
    pub fn row_counts(&self) -> Vec<usize> {
        self.row_offsets.windows(2).map(|w| w[1] - w[0]).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SeaError::Structural(m));
        if self.row_offsets.len() != self.n_rows + 1 {
            return bad(format!(
                "{} row offsets for {} rows",
                self.row_offsets.len(),
                self.n_rows
            ));
        }
        if self.row_offsets[0] != 0 || self.row_offsets[self.n_rows] != self.col_indices.len() {
            return bad("row offsets do not span the column indices".into());
        }
        let n_cols = self.n_cols();
        for t in 0..self.n_rows {
            let (a, b) = (self.row_offsets[t], self.row_offsets[t + 1]);
            if a > b {
                return bad(format!("row offsets decrease at row {t}"));
            }
            let row = &self.col_indices[a..b];
            if row.windows(2).any(|w| w[0] >= w[1]) {
                return bad(format!("columns of row {t} are not strictly increasing"));
            }
            if row.last().is_some_and(|&c| c >= n_cols) {
                return bad(format!("column out of range in row {t}"));
            }
        }
        if let Some(v) = &self.values {
            if v.len() != self.col_indices.len() {
                return bad(format!("{} values for {} entries", v.len(), self.col_indices.len()));
            }
            if let Some(e) = v.iter().position(|x| !x.is_finite()) {
                return bad(format!("non-finite value at entry {e}"));
            }
        }
        Ok(())
    }

    fn with_values(&self, values: Vec<f64>) -> FlatCsr {
        FlatCsr {
            values: Some(values),
            ..self.clone()
        }
    }

    /// Entry ranges of each `(row, head)` segment within row `t`.
    fn segments(&self, t: usize) -> impl Iterator<Item = (usize, std::ops::Range<usize>)> + '_ {
        let (a, b) = (self.row_offsets[t], self.row_offsets[t + 1]);
        let cols = &self.col_indices;
        let seq = self.n_rows;
        let mut e = a;
        std::iter::from_fn(move || {
            if e >= b {
                return None;
            }
            let h = cols[e] / seq;
            let start = e;
            while e < b && cols[e] / seq == h {
                e += 1;
            }
            Some((h, start..e))
        })
    }

    /// Zero-filled dense `[H, T, T]` view.
    pub fn densify(&self) -> Tensor {
        let t = self.n_rows;
        let mut out = Tensor::zeros([self.heads, t, t]);
        let data = out.data_mut();
        for row in 0..t {
            for e in self.row_offsets[row]..self.row_offsets[row + 1] {
                let (h, s) = self.split_col(self.col_indices[e]);
                data[(h * t + row) * t + s] = self.value(e);
            }
        }
        out
    }

    /// Reads `dense[h, t, s]` at every stored position of this pattern.
    pub fn sparsify(&self, dense: &Tensor) -> Result<FlatCsr> {
        let t = self.n_rows;
        if dense.shape() != [self.heads, t, t] {
            return Err(SeaError::Structural(format!(
                "dense shape {:?} does not match [{}, {t}, {t}]",
                dense.shape(),
                self.heads
            )));
        }
        let mut values = Vec::with_capacity(self.nnz());
        for row in 0..t {
            for &c in self.row(row) {
                let (h, s) = self.split_col(c);
                values.push(dense.data()[(h * t + row) * t + s]);
            }
        }
        Ok(self.with_values(values))
    }

    /// One `row, [col:value]*` line per row.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for t in 0..self.n_rows {
            let _ = write!(out, "{t},");
            for e in self.row_offsets[t]..self.row_offsets[t + 1] {
                let _ = write!(out, " {}:{}", self.col_indices[e], self.value(e));
            }
            out.push('\n');
        }
        out
    }
}

fn check_heads(op: &str, m: &FlatCsr, x: &Tensor) -> Result<(usize, usize)> {
    if x.rank() != 3 || x.dim(0) != m.heads || x.dim(1) != m.n_rows {
        return Err(SeaError::Structural(format!(
            "{op}: operand {:?} does not match {} heads × {} rows",
            x.shape(),
            m.heads,
            m.n_rows
        )));
    }
    Ok((x.dim(1), x.dim(2)))
}

/// `q_t · k_s / √d` at every stored position of `mask`.
pub fn sparse_masked_qk(q: &Tensor, k: &Tensor, mask: &FlatCsr) -> Result<FlatCsr> {
    let (t, d) = check_heads("sparse_masked_qk", mask, q)?;
    if k.shape() != q.shape() {
        return Err(SeaError::Structural(format!(
            "sparse_masked_qk: query {:?} and key {:?} differ",
            q.shape(),
            k.shape()
        )));
    }
    let scale = 1.0 / (d as f64).sqrt();
    let (qd, kd) = (q.data(), k.data());
    let mut values = Vec::with_capacity(mask.nnz());
    for row in 0..t {
        for &c in mask.row(row) {
            let (h, s) = mask.split_col(c);
            let qr = &qd[(h * t + row) * d..(h * t + row + 1) * d];
            let kr = &kd[(h * t + s) * d..(h * t + s + 1) * d];
            values.push(qr.iter().zip(kr).map(|(a, b)| a * b).sum::<f64>() * scale);
        }
    }
    let nnz = mask.nnz() as u64;
    work::add_macs(nnz * d as u64);
    work::add_touches(nnz * (2 * d as u64 + 1));
    Ok(mask.with_values(values))
}

/// Softmax of each `(row, head)` segment over its stored values.
pub fn sparse_row_softmax(s: &FlatCsr) -> Result<FlatCsr> {
    let src = s
        .values
        .as_ref()
        .ok_or_else(|| SeaError::Structural("sparse_row_softmax needs values".into()))?;
    let mut values = src.clone();
    for t in 0..s.n_rows {
        for (_, r) in s.segments(t) {
            crate::tensor::softmax_in_place(&mut values[r]);
        }
    }
    let nnz = s.nnz() as u64;
    work::add_macs(nnz);
    work::add_touches(3 * nnz);
    Ok(s.with_values(values))
}

/// Multiplies row `t` of head `h` by `scale[t]` (shape `[T]`) or `scale[h, t]` (shape `[H, T]`).
pub fn scale_rows(p: &FlatCsr, scale: &Tensor) -> Result<FlatCsr> {
    let t = p.n_rows;
    let per_head = match scale.shape() {
        [n] if *n == t => false,
        [h, n] if *h == p.heads && *n == t => true,
        other => {
            return Err(SeaError::Structural(format!(
                "scale_rows: scale {other:?} does not match {} heads × {t} rows",
                p.heads
            )))
        }
    };
    let mut values = Vec::with_capacity(p.nnz());
    for row in 0..t {
        for e in p.row_offsets[row]..p.row_offsets[row + 1] {
            let f = if per_head {
                let h = p.col_indices[e] / t;
                scale.data()[h * t + row]
            } else {
                scale.data()[row]
            };
            values.push(p.value(e) * f);
        }
    }
    let nnz = p.nnz() as u64;
    work::add_macs(nnz);
    work::add_touches(2 * nnz);
    Ok(p.with_values(values))
}

/// `C[h, t, :] = Σ_e a_e · V[h, key(e), :]` over the entries of row `t` in head `h`.
pub fn spmm(a: &FlatCsr, v: &Tensor) -> Result<Tensor> {
    let (t, dv) = check_heads("spmm", a, v)?;
    let vd = v.data();
    let mut out = vec![0.0; a.heads * t * dv];
    for row in 0..t {
        for e in a.row_offsets[row]..a.row_offsets[row + 1] {
            let (h, s) = a.split_col(a.col_indices[e]);
            let w = a.value(e);
            let src = &vd[(h * t + s) * dv..(h * t + s + 1) * dv];
            let dst = &mut out[(h * t + row) * dv..(h * t + row + 1) * dv];
            for (o, x) in dst.iter_mut().zip(src) {
                *o += w * x;
            }
        }
    }
    let nnz = a.nnz() as u64;
    work::add_macs(nnz * dv as u64);
    work::add_touches(nnz * (2 * dv as u64 + 1));
    Tensor::new([a.heads, t, dv], out)
}
