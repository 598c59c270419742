//! Reverse-mode differentiation over [`Tensor`] kernels.
//!
//! A [`Tape`] records every operation of a forward pass as a node holding
//! its value. [`Tape::backward`] consumes the tape and replays the nodes in
//! reverse, returning the gradient of a scalar loss for every node that
//! depends on a `requires_grad` leaf.

use std::rc::Rc;

use crate::error::{Result, SeaError};
use crate::tensor::{Conv2dSpec, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    Exp(Var),
    Log(Var),
    Sigmoid(Var),
    Gelu(Var),
    Softmax(Var),
    MaskedSoftmax(Var),
    SumAxis(Var),
    SumAll(Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Concat(Vec<Var>, usize),
    CumSum(Var, usize),
    Expand(Var),
    Conv2d(Var, Var, Var, Conv2dSpec),
    Gather(Var, Rc<[usize]>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros of `shape` when the loss does not depend on it.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape.to_vec()))
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).sub(self.value(b))?;
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).mul(self.value(b))?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).div(self.value(b))?;
        Ok(self.push(out, Op::Div(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).scale(c);
        self.push(out, Op::Scale(a, c), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|v| v + c);
        self.push(out, Op::AddScalar(a), &[a])
    }

    /// 1 - a
    pub fn one_minus(&mut self, a: Var) -> Var {
        let neg = self.scale(a, -1.0);
        self.add_scalar(neg, 1.0)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::exp);
        self.push(out, Op::Exp(a), &[a])
    }

    pub fn log(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::ln);
        self.push(out, Op::Log(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        self.push(out, Op::Sigmoid(a), &[a])
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(gelu);
        self.push(out, Op::Gelu(a), &[a])
    }

    pub fn softmax_lastdim(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).softmax_lastdim()?;
        Ok(self.push(out, Op::Softmax(a), &[a]))
    }

    /// Softmax over kept cells of each last-axis row; the mask is not differentiated.
    pub fn masked_softmax_lastdim(&mut self, a: Var, keep: &[bool]) -> Result<Var> {
        let out = self.value(a).masked_softmax_lastdim(keep)?;
        Ok(self.push(out, Op::MaskedSoftmax(a), &[a]))
    }

    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let out = self.value(a).sum_axis(axis)?;
        Ok(self.push(out, Op::SumAxis(a), &[a]))
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let n = self.shape(a).get(axis).copied().unwrap_or(1);
        let s = self.sum_axis(a, axis)?;
        Ok(self.scale(s, 1.0 / n as f64))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum_all());
        self.push(out, Op::SumAll(a), &[a])
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1);
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n as f64)
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        Ok(self.push(out, Op::Reshape(a), &[a]))
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let out = self.value(a).permute(axes)?;
        Ok(self.push(out, Op::Permute(a, axes.to_vec()), &[a]))
    }

    pub fn transpose(&mut self, a: Var, x: usize, y: usize) -> Result<Var> {
        let mut axes: Vec<usize> = (0..self.shape(a).len()).collect();
        if x >= axes.len() || y >= axes.len() {
            return Err(SeaError::dim("transpose", format!("axes ({x},{y}) for {:?}", self.shape(a))));
        }
        axes.swap(x, y);
        self.permute(a, &axes)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let values: Vec<&Tensor> = parts.iter().map(|v| self.value(*v)).collect();
        let out = Tensor::concat(&values, axis)?;
        Ok(self.push(out, Op::Concat(parts.to_vec(), axis), parts))
    }

    pub fn cumsum(&mut self, a: Var, axis: usize) -> Result<Var> {
        let out = self.value(a).cumsum(axis)?;
        Ok(self.push(out, Op::CumSum(a, axis), &[a]))
    }

    /// Broadcasts `a` to `shape`.
    pub fn expand(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).broadcast_to(shape)?;
        Ok(self.push(out, Op::Expand(a), &[a]))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, spec: Conv2dSpec) -> Result<Var> {
        let out = self.value(x).conv2d(self.value(w), self.value(b), spec)?;
        Ok(self.push(out, Op::Conv2d(x, w, b, spec), &[x, w, b]))
    }

    pub fn gather(&mut self, a: Var, index: Rc<[usize]>, out_shape: &[usize]) -> Result<Var> {
        let out = self.value(a).gather(&index, out_shape)?;
        Ok(self.push(out, Op::Gather(a, index), &[a]))
    }

    pub fn nn_interpolate(&mut self, a: Var, new_size: usize, axis: usize) -> Result<Var> {
        let (index, shape) = self.value(a).nn_index(new_size, axis)?;
        self.gather(a, index.into(), &shape)
    }

    /// Replays the tape in reverse from the scalar `loss`.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(SeaError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(self.shape(loss).to_vec(), 1.0));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let contributions = self.local_grads(node, &g)?;
            for (v, dv) in contributions {
                if !self.nodes[v.0].requires_grad {
                    continue;
                }
                match &mut grads[v.0] {
                    Some(acc) => {
                        for (a, d) in acc.data_mut().iter_mut().zip(dv.data()) {
                            *a += d;
                        }
                    }
                    slot @ None => *slot = Some(dv),
                }
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn local_grads(&self, node: &Node, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let val = |v: Var| &self.nodes[v.0].value;
        let out = &node.value;
        Ok(match &node.op {
            Op::Leaf => vec![],
            Op::Add(a, b) => vec![
                (*a, g.sum_to_shape(val(*a).shape())?),
                (*b, g.sum_to_shape(val(*b).shape())?),
            ],
            Op::Sub(a, b) => vec![
                (*a, g.sum_to_shape(val(*a).shape())?),
                (*b, g.scale(-1.0).sum_to_shape(val(*b).shape())?),
            ],
            Op::Mul(a, b) => vec![
                (*a, g.mul(val(*b))?.sum_to_shape(val(*a).shape())?),
                (*b, g.mul(val(*a))?.sum_to_shape(val(*b).shape())?),
            ],
            Op::Div(a, b) => {
                let ga = g.div(val(*b))?;
                let gb = ga.mul(out)?.scale(-1.0);
                vec![
                    (*a, ga.sum_to_shape(val(*a).shape())?),
                    (*b, gb.sum_to_shape(val(*b).shape())?),
                ]
            }
            Op::Scale(a, c) => vec![(*a, g.scale(*c))],
            Op::AddScalar(a) => vec![(*a, g.clone())],
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let bt = bv.transpose(bv.rank() - 2, bv.rank() - 1)?;
                let at = av.transpose(av.rank() - 2, av.rank() - 1)?;
                vec![
                    (*a, g.matmul(&bt)?.sum_to_shape(av.shape())?),
                    (*b, at.matmul(g)?.sum_to_shape(bv.shape())?),
                ]
            }
            Op::Exp(a) => vec![(*a, g.mul(out)?)],
            Op::Log(a) => vec![(*a, g.div(val(*a))?)],
            Op::Sigmoid(a) => vec![(*a, g.zip_with(out, "sigmoid", |g, y| g * y * (1.0 - y))?)],
            Op::Gelu(a) => vec![(*a, g.zip_with(val(*a), "gelu", |g, x| g * gelu_grad(x))?)],
            Op::Softmax(a) | Op::MaskedSoftmax(a) => {
                let n = *out.shape().last().unwrap_or(&1);
                let mut gx = vec![0.0; out.len()];
                for ((gr, yr), dr) in g.data().chunks(n).zip(out.data().chunks(n)).zip(gx.chunks_mut(n)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for ((d, gi), yi) in dr.iter_mut().zip(gr).zip(yr) {
                        *d = yi * (gi - dot);
                    }
                }
                vec![(*a, Tensor::from_parts(out.shape().to_vec(), gx))]
            }
            Op::SumAxis(a) => vec![(*a, g.broadcast_to(val(*a).shape())?)],
            Op::Expand(a) => vec![(*a, g.sum_to_shape(val(*a).shape())?)],
            Op::SumAll(a) => vec![(*a, Tensor::full(val(*a).shape().to_vec(), g.item()))],
            Op::Reshape(a) => vec![(*a, g.reshape(val(*a).shape().to_vec())?)],
            Op::Permute(a, axes) => {
                let mut inv = vec![0; axes.len()];
                for (i, &ax) in axes.iter().enumerate() {
                    inv[ax] = i;
                }
                vec![(*a, g.permute(&inv)?)]
            }
            Op::Concat(parts, axis) => {
                let axis = *axis;
                let outer: usize = out.shape()[..axis].iter().product();
                let out_block = out.shape()[axis..].iter().product::<usize>();
                let mut offset = 0;
                let mut res = Vec::with_capacity(parts.len());
                for p in parts {
                    let shape = val(*p).shape();
                    let block: usize = shape[axis..].iter().product();
                    let mut data = Vec::with_capacity(outer * block);
                    for o in 0..outer {
                        let start = o * out_block + offset;
                        data.extend_from_slice(&g.data()[start..start + block]);
                    }
                    offset += block;
                    res.push((*p, Tensor::from_parts(shape.to_vec(), data)));
                }
                res
            }
            Op::CumSum(a, axis) => vec![(*a, g.rev_cumsum(*axis)?)],
            Op::Conv2d(x, w, b, spec) => {
                let (gx, gw, gb) = val(*x).conv2d_backward(val(*w), val(*b), *spec, g)?;
                vec![(*x, gx), (*w, gw), (*b, gb)]
            }
            Op::Gather(a, index) => vec![(*a, g.scatter_add(index, val(*a).shape()))],
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{assert_gradients, fd_check};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn unif(shape: &[usize], seed: u64) -> Tensor {
        Tensor::uniform(shape.to_vec(), -2.0, 2.0, &mut rng(seed))
    }

    #[test]
    fn sum_gives_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(unif(&[3, 4], 1), true);
        let l = tape.sum_all(x);
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(x).unwrap(), &Tensor::ones([3, 4]));
    }

    #[test]
    fn sum_of_squares_gives_twice_x() {
        let xv = unif(&[5], 2);
        let mut tape = Tape::new();
        let x = tape.leaf(xv.clone(), true);
        let sq = tape.mul(x, x).unwrap();
        let l = tape.sum_all(sq);
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(x).unwrap(), &xv.scale(2.0));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::ones([2]), true);
        assert!(matches!(tape.backward(x), Err(SeaError::Contract(_))));
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::ones([2]), true);
        let c = tape.constant(Tensor::ones([2]));
        let y = tape.mul(x, c).unwrap();
        let l = tape.sum_all(y);
        let g = tape.backward(l).unwrap();
        assert!(g.get(c).is_none());
        assert!(g.get(x).is_some());
    }

    // Each closure builds a scalar loss from the leaves; a fixed random
    // projection keeps the loss sensitive to every output entry.
    #[test]
    fn gradcheck_elementwise_and_broadcast() {
        let inputs = vec![unif(&[2, 3, 4], 10), unif(&[3, 1], 11), unif(&[4], 12)];
        assert_gradients("broadcast arithmetic", &inputs, |t, v| {
            let a = t.add(v[0], v[1])?;
            let b = t.mul(a, v[2])?;
            let c = t.sub(b, v[1])?;
            let d = t.add_scalar(v[2], 3.0);
            let e = t.div(c, d)?;
            Ok(t.scale(e, 0.7))
        });
    }

    #[test]
    fn gradcheck_unary() {
        let inputs = vec![unif(&[3, 5], 13)];
        assert_gradients("exp", &inputs, |t, v| Ok(t.exp(v[0])));
        assert_gradients("sigmoid", &inputs, |t, v| Ok(t.sigmoid(v[0])));
        assert_gradients("gelu", &inputs, |t, v| Ok(t.gelu(v[0])));
        assert_gradients("log", &inputs, |t, v| {
            let e = t.exp(v[0]);
            let s = t.add_scalar(e, 0.5);
            Ok(t.log(s))
        });
    }

    #[test]
    fn gradcheck_matmul() {
        let inputs = vec![unif(&[2, 3, 4], 14), unif(&[4, 5], 15)];
        assert_gradients("matmul", &inputs, |t, v| t.matmul(v[0], v[1]));
        let inputs = vec![unif(&[2, 1, 3, 4], 16), unif(&[3, 4, 2], 17)];
        assert_gradients("matmul batch broadcast", &inputs, |t, v| t.matmul(v[0], v[1]));
    }

    #[test]
    fn gradcheck_softmax_family() {
        let inputs = vec![unif(&[3, 6], 18)];
        assert_gradients("softmax", &inputs, |t, v| t.softmax_lastdim(v[0]));
        let keep: Vec<bool> = (0..18).map(|i| i % 6 <= i / 6 + 1 && i != 12).collect();
        assert_gradients("masked softmax", &inputs, move |t, v| {
            t.masked_softmax_lastdim(v[0], &keep)
        });
    }

    #[test]
    fn gradcheck_shape_ops() {
        let inputs = vec![unif(&[2, 3, 4], 19), unif(&[2, 3, 2], 20)];
        assert_gradients("reshape/permute/concat", &inputs, |t, v| {
            let c = t.concat(&[v[0], v[1]], 2)?;
            let p = t.permute(c, &[2, 0, 1])?;
            let r = t.reshape(p, [6, 6])?;
            t.transpose(r, 0, 1)
        });
        assert_gradients("sum/mean axis", &inputs, |t, v| {
            let s = t.sum_axis(v[0], 1)?;
            let m = t.mean_axis(v[0], 2)?;
            let e = t.expand(m, &[2, 3, 4])?;
            let a = t.add(e, s)?;
            Ok(t.mean_all(a))
        });
        assert_gradients("cumsum", &inputs, |t, v| t.cumsum(v[0], 1));
        assert_gradients("nn_interpolate", &inputs, |t, v| {
            let up = t.nn_interpolate(v[0], 7, 2)?;
            t.nn_interpolate(up, 2, 1)
        });
    }

    #[test]
    fn gradcheck_conv2d() {
        for (stride, causal) in [((1, 1), false), ((2, 1), false), ((1, 2), true), ((1, 1), true)] {
            let inputs = vec![unif(&[2, 5, 4], 21), unif(&[3, 2, 3, 3], 22), unif(&[3], 23)];
            let spec = Conv2dSpec::new(stride, causal);
            assert_gradients("conv2d", &inputs, move |t, v| t.conv2d(v[0], v[1], v[2], spec));
        }
    }

    #[test]
    fn gradcheck_composite() {
        let inputs = vec![unif(&[4, 3], 24), unif(&[3, 4], 25), unif(&[4, 2], 26)];
        let rel = fd_check(&inputs, |t, v| {
            let s = t.matmul(v[0], v[1])?;
            let p = t.softmax_lastdim(s)?;
            let c = t.matmul(p, v[2])?;
            let g = t.gelu(c);
            let sq = t.mul(g, g)?;
            Ok(t.sum_all(sq))
        });
        assert!(rel < 1e-4, "composite rel err {rel}");
    }
}
