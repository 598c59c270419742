//! Small parameter containers shared by the estimator and the toy models.
//!
//! Containers are generic over the parameter handle: `Tensor` for stored
//! weights, [`Var`] once bound to a tape, `()` for shape-free visits.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::tensor::{Conv2dSpec, Tensor};

/// Named-parameter traversal in a fixed order.
pub trait Params<P> {
    type Mapped<Q>;

    fn try_map<Q>(&self, prefix: &str, f: &mut dyn FnMut(&str, &P) -> Result<Q>) -> Result<Self::Mapped<Q>>;

    fn map<Q>(&self, prefix: &str, f: &mut dyn FnMut(&str, &P) -> Q) -> Self::Mapped<Q> {
        self.try_map(prefix, &mut |n, p| Ok(f(n, p))).expect("infallible map")
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &P)) {
        self.map(prefix, &mut |n, p| f(n, p));
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Affine map `x W + b` with `W: [in, out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<P> {
    pub weight: P,
    pub bias: P,
}

impl Linear<Tensor> {
    /// Gaussian weights with standard deviation `gain/√in`, zero bias.
    pub fn init(input: usize, output: usize, gain: f64, rng: &mut impl Rng) -> Self {
        Linear {
            weight: Tensor::randn([input, output], gain / (input as f64).sqrt(), rng),
            bias: Tensor::zeros([output]),
        }
    }
}

impl Linear<Var> {
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let y = tape.matmul(x, self.weight)?;
        tape.add(y, self.bias)
    }
}

impl<P> Params<P> for Linear<P> {
    type Mapped<Q> = Linear<Q>;

    fn try_map<Q>(&self, prefix: &str, f: &mut dyn FnMut(&str, &P) -> Result<Q>) -> Result<Linear<Q>> {
        Ok(Linear {
            weight: f(&join(prefix, "weight"), &self.weight)?,
            bias: f(&join(prefix, "bias"), &self.bias)?,
        })
    }
}

/// 3×3 convolution `[C_out, C_in, 3, 3]` with bias.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv<P> {
    pub weight: P,
    pub bias: P,
}

impl Conv<Tensor> {
    pub fn init(c_in: usize, c_out: usize, gain: f64, rng: &mut impl Rng) -> Self {
        Conv {
            weight: Tensor::randn([c_out, c_in, 3, 3], gain / ((9 * c_in) as f64).sqrt(), rng),
            bias: Tensor::zeros([c_out]),
        }
    }
}

impl Conv<Var> {
    pub fn forward(&self, tape: &mut Tape, x: Var, spec: Conv2dSpec) -> Result<Var> {
        tape.conv2d(x, self.weight, self.bias, spec)
    }
}

impl<P> Params<P> for Conv<P> {
    type Mapped<Q> = Conv<Q>;

    fn try_map<Q>(&self, prefix: &str, f: &mut dyn FnMut(&str, &P) -> Result<Q>) -> Result<Conv<Q>> {
        Ok(Conv {
            weight: f(&join(prefix, "weight"), &self.weight)?,
            bias: f(&join(prefix, "bias"), &self.bias)?,
        })
    }
}

/// Binds stored parameters to a tape.
pub fn bind<W: Params<Tensor>>(tape: &mut Tape, w: &W, prefix: &str, trainable: bool) -> W::Mapped<Var> {
    w.map(prefix, &mut |_, t| tape.leaf(t.clone(), trainable))
}

/// Total scalar count.
pub fn param_count<W: Params<Tensor>>(w: &W) -> usize {
    let mut n = 0;
    w.visit("", &mut |_, t| n += t.len());
    n
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn names_follow_prefix() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let l = Linear::init(3, 2, 1.0, &mut rng);
        let mut names = Vec::new();
        l.visit("enc", &mut |n, t| names.push((n.to_string(), t.shape().to_vec())));
        assert_eq!(names, vec![("enc.weight".into(), vec![3, 2]), ("enc.bias".into(), vec![2])]);
        assert_eq!(param_count(&l), 8);
    }

    #[test]
    fn linear_forward() {
        let l = Linear {
            weight: Tensor::new([2, 1], vec![2.0, -1.0]).unwrap(),
            bias: Tensor::new([1], vec![0.5]).unwrap(),
        };
        let mut tape = Tape::new();
        let lv = bind(&mut tape, &l, "", false);
        let x = tape.constant(Tensor::new([2, 2], vec![1.0, 1.0, 3.0, 2.0]).unwrap());
        let y = lv.forward(&mut tape, x).unwrap();
        assert_eq!(tape.value(y).data(), &[1.5, 4.5]);
    }
}
