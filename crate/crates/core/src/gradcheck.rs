//! Central finite-difference checks for tape gradients.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::tensor::Tensor;

pub const FD_STEP: f64 = 1e-5;

/// Builds `sum(f(inputs) ⊙ R)` for a fixed random `R` so that non-scalar
/// outputs are fully exercised.
fn projected_loss<F>(tape: &mut Tape, vars: &[Var], f: &F) -> Result<Var>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let out = f(tape, vars)?;
    if tape.value(out).len() == 1 {
        return Ok(tape.sum_all(out));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0x5ea);
    let r = Tensor::uniform(tape.shape(out).to_vec(), 0.5, 1.5, &mut rng);
    let r = tape.constant(r);
    let p = tape.mul(out, r)?;
    Ok(tape.sum_all(p))
}

fn eval<F>(inputs: &[Tensor], f: &F) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let l = projected_loss(&mut tape, &vars, f)?;
    Ok(tape.value(l).item())
}

/// Analytic gradients of the projected loss, one tensor per input.
pub fn analytic_gradients<F>(inputs: &[Tensor], f: &F) -> Result<Vec<Tensor>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let l = projected_loss(&mut tape, &vars, f)?;
    let grads = tape.backward(l)?;
    Ok(vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| grads.get_or_zeros(*v, t.shape()))
        .collect())
}

/// Central-difference gradients of the projected loss.
pub fn numeric_gradients<F>(inputs: &[Tensor], f: &F, step: f64) -> Result<Vec<Tensor>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut g = Tensor::zeros(inputs[i].shape().to_vec());
        for j in 0..inputs[i].len() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + step;
            let plus = eval(&work, f)?;
            work[i].data_mut()[j] = orig - step;
            let minus = eval(&work, f)?;
            work[i].data_mut()[j] = orig;
            g.data_mut()[j] = (plus - minus) / (2.0 * step);
        }
        out.push(g);
    }
    Ok(out)
}

/// Norm-wise relative error `‖a − n‖ / max(‖a‖, ‖n‖)` over all tensors taken together.
pub fn relative_error(analytic: &[Tensor], numeric: &[Tensor]) -> f64 {
    let (mut diff, mut na, mut nn) = (0.0, 0.0, 0.0);
    for (a, n) in analytic.iter().zip(numeric) {
        for (x, y) in a.data().iter().zip(n.data()) {
            diff += (x - y).powi(2);
            na += x * x;
            nn += y * y;
        }
    }
    diff.sqrt() / na.sqrt().max(nn.sqrt()).max(1e-12)
}

/// Relative error between analytic and finite-difference gradients.
pub fn fd_check<F>(inputs: &[Tensor], f: F) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let a = analytic_gradients(inputs, &f).expect("analytic gradient pass failed");
    let n = numeric_gradients(inputs, &f, FD_STEP).expect("numeric gradient pass failed");
    relative_error(&a, &n)
}

/// Panics when the gradient check for `name` exceeds 1e-4.
pub fn assert_gradients<F>(name: &str, inputs: &[Tensor], f: F)
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let rel = fd_check(inputs, f);
    assert!(rel < 1e-4, "{name}: gradient relative error {rel:e}");
}
