//! Dense row-major `f64` tensors and their forward kernels.
//!
//! Everything here is value-level; [`crate::autodiff::Tape`] wraps these
//! kernels with backward rules.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Result, SeaError};
use crate::work;

/// Marks a gathered output cell that has no source and is zero-filled.
pub const NO_SOURCE: usize = usize::MAX;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

/// 3×3 convolution with unit padding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dSpec {
    /// (height, width) stride.
    pub stride: (usize, usize),
    /// Zero the taps that read rows after the output row.
    pub causal: bool,
}

impl Conv2dSpec {
    pub fn new(stride: (usize, usize), causal: bool) -> Self {
        Conv2dSpec { stride, causal }
    }

    pub fn output_hw(&self, h: usize, w: usize) -> (usize, usize) {
        ((h - 1) / self.stride.0 + 1, (w - 1) / self.stride.1 + 1)
    }

    fn tap_enabled(&self, dy: usize) -> bool {
        !(self.causal && dy == 2)
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for (i, o) in out.iter_mut().enumerate() {
        let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
        let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
        *o = if da == db || db == 1 {
            da
        } else if da == 1 {
            db
        } else {
            return None;
        };
    }
    Some(out)
}

/// Strides of `shape` viewed through broadcasting into `out` (0 on stretched axes).
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let own = strides(shape);
    let off = out.len() - shape.len();
    (0..out.len())
        .map(|i| {
            if i < off || shape[i - off] == 1 {
                0
            } else {
                own[i - off]
            }
        })
        .collect()
}

/// Odometer over `out_shape` calling `f(out_index, offset_a, offset_b)`.
fn for_each_broadcast(
    out_shape: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let total = numel(out_shape);
    if total == 0 {
        return;
    }
    let rank = out_shape.len();
    if rank == 0 {
        f(0, 0, 0);
        return;
    }
    let inner = out_shape[rank - 1];
    let (ia, ib) = (sa[rank - 1], sb[rank - 1]);
    let mut idx = vec![0usize; rank];
    let (mut oa, mut ob) = (0usize, 0usize);
    let mut o = 0;
    loop {
        for j in 0..inner {
            f(o + j, oa + j * ia, ob + j * ib);
        }
        o += inner;
        if o >= total {
            break;
        }
        let mut d = rank - 1;
        loop {
            if d == 0 {
                return;
            }
            d -= 1;
            idx[d] += 1;
            oa += sa[d];
            ob += sb[d];
            if idx[d] < out_shape[d] {
                break;
            }
            oa -= sa[d] * idx[d];
            ob -= sb[d] * idx[d];
            idx[d] = 0;
        }
    }
}

/// Source index of destination cell `dst` when resizing `src_len` → `dst_len`.
pub fn nn_source_index(dst: usize, src_len: usize, dst_len: usize) -> usize {
    dst * src_len / dst_len
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        if numel(&shape) != data.len() {
            return Err(SeaError::dim(
                "tensor",
                format!("shape {:?} needs {} values, got {}", shape, numel(&shape), data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Tensor { shape, data }
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f64) -> Self {
        let shape = shape.into();
        let n = numel(&shape);
        Tensor {
            shape,
            data: vec![value; n],
        }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> f64) -> Self {
        let shape = shape.into();
        let data = (0..numel(&shape)).map(&mut f).collect();
        Tensor { shape, data }
    }

    /// Gaussian entries with standard deviation `std`.
    pub fn randn(shape: impl Into<Vec<usize>>, std: f64, rng: &mut impl Rng) -> Self {
        Self::from_fn(shape, |_| std * rng.sample::<f64, _>(StandardNormal))
    }

    pub fn uniform(shape: impl Into<Vec<usize>>, lo: f64, hi: f64, rng: &mut impl Rng) -> Self {
        Self::from_fn(shape, |_| rng.random_range(lo..hi))
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn([n, n], |i| if i / n == i % n { 1.0 } else { 0.0 })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.shape[axis]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn at(&self, index: &[usize]) -> f64 {
        debug_assert_eq!(index.len(), self.shape.len());
        let off: usize = index.iter().zip(strides(&self.shape)).map(|(i, s)| i * s).sum();
        self.data[off]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum_all(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.map(|v| v * c)
    }

    /// Elementwise binary op with numpy-style broadcasting.
    pub fn zip_with(
        &self,
        other: &Tensor,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        if self.shape == other.shape {
            let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
            return Ok(Tensor::from_parts(self.shape.clone(), data));
        }
        let out_shape = broadcast_shape(&self.shape, &other.shape)
            .ok_or_else(|| SeaError::shape(op, &self.shape, &other.shape))?;
        let sa = broadcast_strides(&self.shape, &out_shape);
        let sb = broadcast_strides(&other.shape, &out_shape);
        let mut data = vec![0.0; numel(&out_shape)];
        for_each_broadcast(&out_shape, &sa, &sb, |o, a, b| {
            data[o] = f(self.data[a], other.data[b]);
        });
        Ok(Tensor::from_parts(out_shape, data))
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        let out = self.zip_with(other, "mul", |a, b| a * b)?;
        work::add_macs(out.len() as u64);
        Ok(out)
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        let out = self.zip_with(other, "div", |a, b| a / b)?;
        work::add_macs(out.len() as u64);
        Ok(out)
    }

    /// Materializes this tensor broadcast to `shape`.
    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Tensor> {
        let out = broadcast_shape(&self.shape, shape)
            .filter(|s| s.as_slice() == shape)
            .ok_or_else(|| SeaError::shape("broadcast_to", &self.shape, shape))?;
        Tensor::zeros(out).zip_with(self, "broadcast_to", |_, b| b)
    }

    /// Sums over broadcast axes so the result has `shape` (reverse of broadcasting).
    pub fn sum_to_shape(&self, shape: &[usize]) -> Result<Tensor> {
        if self.shape == shape {
            return Ok(self.clone());
        }
        match broadcast_shape(shape, &self.shape) {
            Some(s) if s == self.shape => {}
            _ => return Err(SeaError::shape("sum_to_shape", &self.shape, shape)),
        }
        let st = broadcast_strides(shape, &self.shape);
        let own = strides(&self.shape);
        let mut out = vec![0.0; numel(shape)];
        for_each_broadcast(&self.shape, &own, &st, |_, i, t| out[t] += self.data[i]);
        Ok(Tensor::from_parts(shape.to_vec(), out))
    }

    /// Batched matrix product over the last two axes; leading axes broadcast.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (ra, rb) = (self.rank(), other.rank());
        if ra < 2 || rb < 2 || self.shape[ra - 1] != other.shape[rb - 2] {
            return Err(SeaError::shape("matmul", &self.shape, &other.shape));
        }
        let (m, p, n) = (self.shape[ra - 2], self.shape[ra - 1], other.shape[rb - 1]);
        let ba = &self.shape[..ra - 2];
        let bb = &other.shape[..rb - 2];
        let batch = broadcast_shape(ba, bb)
            .ok_or_else(|| SeaError::shape("matmul", &self.shape, &other.shape))?;
        let sa: Vec<usize> = broadcast_strides(ba, &batch).iter().map(|s| s * m * p).collect();
        let sb: Vec<usize> = broadcast_strides(bb, &batch).iter().map(|s| s * p * n).collect();
        let nb = numel(&batch);
        let mut out = vec![0.0; nb * m * n];
        let mut run = |o: usize, a0: usize, b0: usize| {
            let c = &mut out[o * m * n..(o + 1) * m * n];
            for i in 0..m {
                let arow = &self.data[a0 + i * p..a0 + (i + 1) * p];
                let crow = &mut c[i * n..(i + 1) * n];
                for (kk, &av) in arow.iter().enumerate() {
                    if av == 0.0 {
                        continue;
                    }
                    let brow = &other.data[b0 + kk * n..b0 + (kk + 1) * n];
                    for (cv, &bv) in crow.iter_mut().zip(brow) {
                        *cv += av * bv;
                    }
                }
            }
        };
        if batch.is_empty() {
            run(0, 0, 0);
        } else {
            for_each_broadcast(&batch, &sa, &sb, &mut run);
        }
        work::add_macs((nb * m * n * p) as u64);
        let mut shape = batch;
        shape.extend([m, n]);
        Ok(Tensor::from_parts(shape, out))
    }

    fn last_dim(&self, op: &'static str) -> Result<usize> {
        match self.shape.last() {
            Some(&n) if n >= 1 => Ok(n),
            _ => Err(SeaError::dim(op, format!("empty last dimension in {:?}", self.shape))),
        }
    }

    /// Softmax over the last axis with max subtraction.
    pub fn softmax_lastdim(&self) -> Result<Tensor> {
        let n = self.last_dim("softmax")?;
        let mut data = self.data.clone();
        for row in data.chunks_mut(n) {
            softmax_in_place(row);
        }
        work::add_macs(self.len() as u64);
        Ok(Tensor::from_parts(self.shape.clone(), data))
    }

    /// Softmax over the last axis restricted to cells where `keep` is true;
    /// masked cells are 0 and fully masked rows are all zero.
    pub fn masked_softmax_lastdim(&self, keep: &[bool]) -> Result<Tensor> {
        let n = self.last_dim("masked_softmax")?;
        if keep.len() != self.len() {
            return Err(SeaError::dim(
                "masked_softmax",
                format!("mask has {} cells, tensor {}", keep.len(), self.len()),
            ));
        }
        let mut data = vec![0.0; self.len()];
        for ((out, x), m) in data.chunks_mut(n).zip(self.data.chunks(n)).zip(keep.chunks(n)) {
            let max = x
                .iter()
                .zip(m)
                .filter(|(_, &k)| k)
                .map(|(&v, _)| v)
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                continue;
            }
            let mut sum = 0.0;
            for ((o, &v), &k) in out.iter_mut().zip(x).zip(m) {
                if k {
                    *o = (v - max).exp();
                    sum += *o;
                }
            }
            for o in out.iter_mut() {
                *o /= sum;
            }
        }
        work::add_macs(self.len() as u64);
        Ok(Tensor::from_parts(self.shape.clone(), data))
    }

    fn check_axis(&self, op: &'static str, axis: usize) -> Result<()> {
        if axis >= self.rank() {
            return Err(SeaError::dim(op, format!("axis {axis} out of range for {:?}", self.shape)));
        }
        Ok(())
    }

    /// (outer, len, inner) decomposition around `axis`.
    fn split_at_axis(&self, axis: usize) -> (usize, usize, usize) {
        let outer = numel(&self.shape[..axis]);
        let inner = numel(&self.shape[axis + 1..]);
        (outer, self.shape[axis], inner)
    }

    /// Sum along `axis`, keeping it with size 1.
    pub fn sum_axis(&self, axis: usize) -> Result<Tensor> {
        self.check_axis("sum_axis", axis)?;
        let (outer, len, inner) = self.split_at_axis(axis);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let src = &self.data[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (d, s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        let mut shape = self.shape.clone();
        shape[axis] = 1;
        Ok(Tensor::from_parts(shape, out))
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Tensor> {
        let n = self.shape.get(axis).copied().unwrap_or(1) as f64;
        Ok(self.sum_axis(axis)?.scale(1.0 / n))
    }

    /// Maximum along `axis`, keeping it with size 1.
    pub fn max_axis(&self, axis: usize) -> Result<Tensor> {
        self.check_axis("max_axis", axis)?;
        let (outer, len, inner) = self.split_at_axis(axis);
        let mut out = vec![f64::NEG_INFINITY; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let src = &self.data[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (d, &s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d = d.max(s);
                }
            }
        }
        let mut shape = self.shape.clone();
        shape[axis] = 1;
        Ok(Tensor::from_parts(shape, out))
    }

    /// Running sum along `axis`; entry i holds the sum of entries 0..=i.
    pub fn cumsum(&self, axis: usize) -> Result<Tensor> {
        self.check_axis("cumsum", axis)?;
        let (outer, len, inner) = self.split_at_axis(axis);
        let mut data = self.data.clone();
        for o in 0..outer {
            for l in 1..len {
                let (prev, cur) = data.split_at_mut((o * len + l) * inner);
                let prev = &prev[(o * len + l - 1) * inner..];
                for (c, p) in cur[..inner].iter_mut().zip(prev) {
                    *c += p;
                }
            }
        }
        work::add_macs(self.len() as u64);
        Ok(Tensor::from_parts(self.shape.clone(), data))
    }

    /// Reverse running sum along `axis`; entry i holds the sum of entries i..len.
    pub fn rev_cumsum(&self, axis: usize) -> Result<Tensor> {
        self.check_axis("rev_cumsum", axis)?;
        let (outer, len, inner) = self.split_at_axis(axis);
        let mut data = self.data.clone();
        for o in 0..outer {
            for l in (0..len.saturating_sub(1)).rev() {
                let (cur, next) = data.split_at_mut((o * len + l + 1) * inner);
                let cur = &mut cur[(o * len + l) * inner..];
                for (c, nx) in cur.iter_mut().zip(&next[..inner]) {
                    *c += nx;
                }
            }
        }
        Ok(Tensor::from_parts(self.shape.clone(), data))
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Tensor> {
        let shape = shape.into();
        if numel(&shape) != self.len() {
            return Err(SeaError::shape("reshape", &self.shape, &shape));
        }
        Ok(Tensor::from_parts(shape, self.data.clone()))
    }

    /// Reorders axes so that output axis i is input axis `axes[i]`.
    pub fn permute(&self, axes: &[usize]) -> Result<Tensor> {
        let r = self.rank();
        let mut seen = vec![false; r];
        if axes.len() != r || axes.iter().any(|&a| a >= r || std::mem::replace(&mut seen[a], true)) {
            return Err(SeaError::dim("permute", format!("bad axes {axes:?} for {:?}", self.shape)));
        }
        let own = strides(&self.shape);
        let out_shape: Vec<usize> = axes.iter().map(|&a| self.shape[a]).collect();
        let src_strides: Vec<usize> = axes.iter().map(|&a| own[a]).collect();
        let zeros = vec![0; r];
        let mut data = vec![0.0; self.len()];
        for_each_broadcast(&out_shape, &src_strides, &zeros, |o, s, _| data[o] = self.data[s]);
        Ok(Tensor::from_parts(out_shape, data))
    }

    pub fn transpose(&self, a: usize, b: usize) -> Result<Tensor> {
        let mut axes: Vec<usize> = (0..self.rank()).collect();
        if a >= axes.len() || b >= axes.len() {
            return Err(SeaError::dim("transpose", format!("axes ({a},{b}) for {:?}", self.shape)));
        }
        axes.swap(a, b);
        self.permute(&axes)
    }

    /// Concatenation along `axis`; all other extents must agree.
    pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| SeaError::dim("concat", "no inputs"))?;
        first.check_axis("concat", axis)?;
        for p in parts {
            let same = p.rank() == first.rank()
                && p.shape.iter().zip(&first.shape).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !same {
                return Err(SeaError::shape("concat", &first.shape, &p.shape));
            }
        }
        let outer = numel(&first.shape[..axis]);
        let total_len: usize = parts.iter().map(|p| p.shape[axis]).sum();
        let mut data = Vec::with_capacity(outer * total_len * numel(&first.shape[axis + 1..]));
        for o in 0..outer {
            for p in parts {
                let block = p.shape[axis] * numel(&p.shape[axis + 1..]);
                data.extend_from_slice(&p.data[o * block..(o + 1) * block]);
            }
        }
        let mut shape = first.shape.clone();
        shape[axis] = total_len;
        Ok(Tensor::from_parts(shape, data))
    }

    /// out[i] = self[index[i]], or 0 where `index[i] == NO_SOURCE`.
    pub fn gather(&self, index: &[usize], out_shape: &[usize]) -> Result<Tensor> {
        if numel(out_shape) != index.len() {
            return Err(SeaError::dim("gather", "index length does not match output shape"));
        }
        let mut data = Vec::with_capacity(index.len());
        for &i in index {
            data.push(if i == NO_SOURCE {
                0.0
            } else {
                *self
                    .data
                    .get(i)
                    .ok_or_else(|| SeaError::dim("gather", format!("index {i} out of range")))?
            });
        }
        Ok(Tensor::from_parts(out_shape.to_vec(), data))
    }

    /// Adjoint of [`Tensor::gather`]: accumulates `self` into a zero tensor of `src_shape`.
    pub fn scatter_add(&self, index: &[usize], src_shape: &[usize]) -> Tensor {
        let mut out = vec![0.0; numel(src_shape)];
        for (&i, &g) in index.iter().zip(&self.data) {
            if i != NO_SOURCE {
                out[i] += g;
            }
        }
        Tensor::from_parts(src_shape.to_vec(), out)
    }

    /// Gather indices resizing `axis` to `new_size` by nearest neighbour.
    pub fn nn_index(&self, new_size: usize, axis: usize) -> Result<(Vec<usize>, Vec<usize>)> {
        self.check_axis("nn_interpolate", axis)?;
        if new_size == 0 {
            return Err(SeaError::dim("nn_interpolate", "new size must be at least 1"));
        }
        let (outer, len, inner) = self.split_at_axis(axis);
        let mut index = Vec::with_capacity(outer * new_size * inner);
        for o in 0..outer {
            for i in 0..new_size {
                let s = nn_source_index(i, len, new_size);
                let base = (o * len + s) * inner;
                index.extend(base..base + inner);
            }
        }
        let mut shape = self.shape.clone();
        shape[axis] = new_size;
        Ok((index, shape))
    }

    /// Nearest-neighbour resize of `axis`: destination i reads source floor(i·old/new).
    pub fn nn_interpolate(&self, new_size: usize, axis: usize) -> Result<Tensor> {
        let (index, shape) = self.nn_index(new_size, axis)?;
        self.gather(&index, &shape)
    }

    fn conv_check(&self, w: &Tensor, b: &Tensor) -> Result<(usize, usize, usize, usize)> {
        if self.rank() != 3 {
            return Err(SeaError::dim("conv2d", format!("input must be [C,H,W], got {:?}", self.shape)));
        }
        if w.rank() != 4 || w.shape[2] != 3 || w.shape[3] != 3 || w.shape[1] != self.shape[0] {
            return Err(SeaError::shape("conv2d", &self.shape, &w.shape));
        }
        if b.shape != [w.shape[0]] {
            return Err(SeaError::shape("conv2d", &w.shape, &b.shape));
        }
        Ok((self.shape[0], self.shape[1], self.shape[2], w.shape[0]))
    }

    /// Cross-correlation of `[C_in,H,W]` with `[C_out,C_in,3,3]` kernels plus bias.
    pub fn conv2d(&self, w: &Tensor, b: &Tensor, spec: Conv2dSpec) -> Result<Tensor> {
        let (cin, h, wd, cout) = self.conv_check(w, b)?;
        let (ho, wo) = spec.output_hw(h, wd);
        let (sh, sw) = spec.stride;
        let mut out = vec![0.0; cout * ho * wo];
        let mut macs = 0u64;
        for co in 0..cout {
            let plane = &mut out[co * ho * wo..(co + 1) * ho * wo];
            plane.iter_mut().for_each(|v| *v = b.data[co]);
            for ci in 0..cin {
                let x = &self.data[ci * h * wd..(ci + 1) * h * wd];
                let k = &w.data[(co * cin + ci) * 9..(co * cin + ci + 1) * 9];
                for dy in 0..3 {
                    if !spec.tap_enabled(dy) {
                        continue;
                    }
                    for oy in 0..ho {
                        let iy = (oy * sh + dy) as isize - 1;
                        if iy < 0 || iy as usize >= h {
                            continue;
                        }
                        let xrow = &x[iy as usize * wd..(iy as usize + 1) * wd];
                        let orow = &mut plane[oy * wo..(oy + 1) * wo];
                        for dx in 0..3 {
                            let kv = k[dy * 3 + dx];
                            for (ox, o) in orow.iter_mut().enumerate() {
                                let ix = (ox * sw + dx) as isize - 1;
                                if ix >= 0 && (ix as usize) < wd {
                                    *o += kv * xrow[ix as usize];
                                }
                            }
                            macs += wo as u64;
                        }
                    }
                }
            }
        }
        work::add_macs(macs);
        Ok(Tensor::from_parts(vec![cout, ho, wo], out))
    }

    /// Gradients of [`Tensor::conv2d`] with respect to input, kernels and bias.
    pub fn conv2d_backward(
        &self,
        w: &Tensor,
        b: &Tensor,
        spec: Conv2dSpec,
        grad_out: &Tensor,
    ) -> Result<(Tensor, Tensor, Tensor)> {
        let (cin, h, wd, cout) = self.conv_check(w, b)?;
        let (ho, wo) = spec.output_hw(h, wd);
        if grad_out.shape != [cout, ho, wo] {
            return Err(SeaError::shape("conv2d_backward", &[cout, ho, wo], &grad_out.shape));
        }
        let (sh, sw) = spec.stride;
        let mut gx = vec![0.0; self.len()];
        let mut gw = vec![0.0; w.len()];
        let mut gb = vec![0.0; cout];
        for co in 0..cout {
            let g = &grad_out.data[co * ho * wo..(co + 1) * ho * wo];
            gb[co] = g.iter().sum();
            for ci in 0..cin {
                let x = &self.data[ci * h * wd..(ci + 1) * h * wd];
                let gxp = &mut gx[ci * h * wd..(ci + 1) * h * wd];
                let kidx = (co * cin + ci) * 9;
                for dy in 0..3 {
                    if !spec.tap_enabled(dy) {
                        continue;
                    }
                    for oy in 0..ho {
                        let iy = (oy * sh + dy) as isize - 1;
                        if iy < 0 || iy as usize >= h {
                            continue;
                        }
                        let iy = iy as usize;
                        for dx in 0..3 {
                            let kv = w.data[kidx + dy * 3 + dx];
                            let mut acc = 0.0;
                            for ox in 0..wo {
                                let ix = (ox * sw + dx) as isize - 1;
                                if ix >= 0 && (ix as usize) < wd {
                                    let go = g[oy * wo + ox];
                                    acc += go * x[iy * wd + ix as usize];
                                    gxp[iy * wd + ix as usize] += go * kv;
                                }
                            }
                            gw[kidx + dy * 3 + dx] += acc;
                        }
                    }
                }
            }
        }
        Ok((
            Tensor::from_parts(self.shape.clone(), gx),
            Tensor::from_parts(w.shape.clone(), gw),
            Tensor::from_parts(vec![cout], gb),
        ))
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_dot() {
        let i = t(&[2, 2], &[1., 0., 0., 1.]);
        let b = t(&[2, 2], &[3., 4., 5., 6.]);
        assert_eq!(i.matmul(&b).unwrap(), b);
        let r = t(&[1, 2], &[1., 2.]).matmul(&t(&[2, 1], &[3., 4.])).unwrap();
        assert_eq!(r.data(), &[11.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Tensor::randn([4, 5], 1.0, &mut rng);
        let b = Tensor::randn([5, 3], 1.0, &mut rng);
        let c = a.matmul(&b).unwrap();
        for i in 0..4 {
            for j in 0..3 {
                let mut s = 0.0;
                for k in 0..5 {
                    s += a.at(&[i, k]) * b.at(&[k, j]);
                }
                assert!((c.at(&[i, j]) - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matmul_broadcasts_batch_axes() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = Tensor::randn([2, 3, 4], 1.0, &mut rng);
        let b = Tensor::randn([4, 5], 1.0, &mut rng);
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.shape(), &[2, 3, 5]);
        for h in 0..2 {
            let ah = t(&[3, 4], &a.data()[h * 12..(h + 1) * 12]);
            let ch = ah.matmul(&b).unwrap();
            assert_eq!(ch.data(), &c.data()[h * 15..(h + 1) * 15]);
        }
    }

    #[test]
    fn matmul_reports_both_shapes() {
        let err = Tensor::zeros([2, 3]).matmul(&Tensor::zeros([2, 3])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn softmax_cases() {
        let s = t(&[2], &[0., 0.]).softmax_lastdim().unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
        let s = t(&[2], &[1000., 0.]).softmax_lastdim().unwrap();
        assert_eq!(s.data()[0], 1.0);
        assert!(s.data()[1] < 1e-300 && s.is_finite());
        assert!(Tensor::zeros([3, 0]).softmax_lastdim().is_err());
    }

    #[test]
    fn softmax_matches_direct_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::randn([7], 2.0, &mut rng);
        let s = x.softmax_lastdim().unwrap();
        let z: f64 = x.data().iter().map(|v| v.exp()).sum();
        for (si, xi) in s.data().iter().zip(x.data()) {
            assert!((si - xi.exp() / z).abs() < 1e-12);
        }
        assert!((s.sum_all() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn conv_identity_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = Tensor::randn([1, 5, 4], 1.0, &mut rng);
        let mut w = Tensor::zeros([1, 1, 3, 3]);
        w.data_mut()[4] = 1.0;
        let y = x.conv2d(&w, &Tensor::zeros([1]), Conv2dSpec::new((1, 1), false)).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn conv_all_ones() {
        let x = Tensor::ones([1, 5, 5]);
        let w = Tensor::ones([1, 1, 3, 3]);
        let y = x.conv2d(&w, &Tensor::zeros([1]), Conv2dSpec::new((1, 1), false)).unwrap();
        assert_eq!(y.at(&[0, 2, 2]), 9.0);
        assert_eq!(y.at(&[0, 0, 0]), 4.0);
        assert_eq!(y.at(&[0, 4, 4]), 4.0);
        assert_eq!(y.at(&[0, 0, 2]), 6.0);
    }

    #[test]
    fn conv_strided_shapes_and_channel_check() {
        let x = Tensor::ones([2, 7, 6]);
        let w = Tensor::ones([3, 2, 3, 3]);
        let y = x.conv2d(&w, &Tensor::zeros([3]), Conv2dSpec::new((2, 1), false)).unwrap();
        assert_eq!(y.shape(), &[3, 4, 6]);
        let y = x.conv2d(&w, &Tensor::zeros([3]), Conv2dSpec::new((1, 2), false)).unwrap();
        assert_eq!(y.shape(), &[3, 7, 3]);
        let bad = Tensor::ones([3, 3, 3, 3]);
        assert!(x.conv2d(&bad, &Tensor::zeros([3]), Conv2dSpec::new((1, 1), false)).is_err());
    }

    #[test]
    fn causal_conv_ignores_later_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = Tensor::randn([2, 6, 4], 1.0, &mut rng);
        let w = Tensor::randn([3, 2, 3, 3], 1.0, &mut rng);
        let b = Tensor::randn([3], 1.0, &mut rng);
        let spec = Conv2dSpec::new((1, 1), true);
        let y = x.conv2d(&w, &b, spec).unwrap();
        for r in 0..5 {
            let mut x2 = x.clone();
            for c in 0..2 {
                for col in 0..4 {
                    x2.data_mut()[c * 24 + (r + 1) * 4 + col] += 3.0;
                }
            }
            let y2 = x2.conv2d(&w, &b, spec).unwrap();
            for c in 0..3 {
                for row in 0..=r {
                    for col in 0..4 {
                        assert_eq!(y.at(&[c, row, col]).to_bits(), y2.at(&[c, row, col]).to_bits());
                    }
                }
            }
        }
    }

    #[test]
    fn nn_interpolate_cases() {
        let x = t(&[4], &[1., 2., 3., 4.]);
        assert_eq!(x.nn_interpolate(4, 0).unwrap(), x);
        assert_eq!(x.nn_interpolate(2, 0).unwrap().data(), &[1., 3.]);
        let y = t(&[2], &[5., 7.]).nn_interpolate(4, 0).unwrap();
        assert_eq!(y.data(), &[5., 5., 7., 7.]);
        assert!(x.nn_interpolate(0, 0).is_err());
        let m = t(&[2, 2], &[1., 2., 3., 4.]).nn_interpolate(4, 1).unwrap();
        assert_eq!(m.data(), &[1., 1., 2., 2., 3., 3., 4., 4.]);
    }

    #[test]
    fn cumsum_and_reverse() {
        let x = t(&[2, 3], &[1., 2., 3., 4., 5., 6.]);
        assert_eq!(x.cumsum(1).unwrap().data(), &[1., 3., 6., 4., 9., 15.]);
        assert_eq!(x.cumsum(0).unwrap().data(), &[1., 2., 3., 5., 7., 9.]);
        assert_eq!(x.rev_cumsum(1).unwrap().data(), &[6., 5., 3., 15., 11., 6.]);
    }

    #[test]
    fn sum_to_shape_reverses_broadcast() {
        let x = Tensor::ones([2, 3, 4]);
        assert_eq!(x.sum_to_shape(&[3, 1]).unwrap(), Tensor::full([3, 1], 8.0));
        assert_eq!(x.sum_to_shape(&[]).unwrap(), Tensor::scalar(24.0));
        assert!(x.sum_to_shape(&[5]).is_err());
    }

    #[test]
    fn masked_softmax_empty_row_is_zero() {
        let x = t(&[2, 2], &[1., 2., 3., 4.]);
        let s = x.masked_softmax_lastdim(&[false, false, true, false]).unwrap();
        assert_eq!(s.data(), &[0., 0., 1., 0.]);
    }

    proptest! {
        #[test]
        fn reshape_and_transpose_roundtrip(a in 1usize..5, b in 1usize..5, c in 1usize..5, seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = Tensor::randn([a, b, c], 1.0, &mut rng);
            let back = x.reshape([a * b, c]).unwrap().reshape([a, b, c]).unwrap();
            prop_assert_eq!(&back, &x);
            let tt = x.transpose(0, 2).unwrap().transpose(0, 2).unwrap();
            prop_assert_eq!(&tt, &x);
            let p = x.permute(&[1, 2, 0]).unwrap().permute(&[2, 0, 1]).unwrap();
            prop_assert_eq!(&p, &x);
        }

        #[test]
        fn nn_up_then_down_recovers(n in 1usize..12, ratio in 1usize..5, seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = Tensor::randn([3, n], 1.0, &mut rng);
            let back = x.nn_interpolate(n * ratio, 1).unwrap().nn_interpolate(n, 1).unwrap();
            prop_assert_eq!(&back, &x);
        }

        #[test]
        fn softmax_rows_sum_to_one(seed in 0u64..1000, n in 1usize..20) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = Tensor::randn([3, n], 3.0, &mut rng);
            let s = x.softmax_lastdim().unwrap();
            for row in s.data().chunks(n) {
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }
}
