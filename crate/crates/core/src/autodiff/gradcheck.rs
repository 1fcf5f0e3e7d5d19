//! Central finite-difference verification of tape gradients.

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// `|a - b| / max(|a|, |b|, 1e-8)`
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

fn evaluate<F>(f: &F, inputs: &[Tensor<f64>]) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t)).collect();
    let out = f(&mut tape, &vars)?;
    match tape.value(out) {
        [v] => Ok(*v),
        _ => Err(Error::Shape {
            op: "grad_check (function must be scalar-valued)",
            lhs: tape.shape(out).to_vec(),
            rhs: vec![1],
        }),
    }
}

/// Compares the gradient of `f` with respect to every input against central
/// differences with step `eps`, returning the largest relative error.
///
/// `f` must be deterministic; this is verified by evaluating it twice.
pub fn grad_check_many<F>(f: F, inputs: &[Tensor<f64>], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let inputs: Vec<Tensor<f64>> = inputs.iter().map(|t| t.clone().with_grad()).collect();
    let base = evaluate(&f, &inputs)?;
    if evaluate(&f, &inputs)?.to_bits() != base.to_bits() {
        return Err(Error::invalid(
            "grad_check needs a deterministic function (disable dropout)",
        ));
    }

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t)).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut worst = 0.0f64;
    let mut probe = inputs.clone();
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.wrt(*v)?.to_vec();
        for (j, &a) in analytic.iter().enumerate() {
            let orig = inputs[i].data()[j];
            probe[i].data_mut()[j] = orig + eps;
            let up = evaluate(&f, &probe)?;
            probe[i].data_mut()[j] = orig - eps;
            let down = evaluate(&f, &probe)?;
            probe[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * eps);
            worst = worst.max(relative_error(a, numeric));
        }
    }
    Ok(worst)
}

/// Single-input form of [`grad_check_many`].
pub fn grad_check<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    grad_check_many(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x), eps)
}
