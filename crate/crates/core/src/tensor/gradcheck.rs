//! Central finite-difference verification of tape gradients.

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Largest relative error between analytic and central-difference
/// gradients over every coordinate of every input. The relative error of a
/// coordinate is `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn finite_diff_check<F>(f: F, inputs: &[Tensor<f64>], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    finite_diff_check_with(f, inputs, eps, 1e-8)
}

/// As [`finite_diff_check`] with a caller-chosen denominator floor.
pub fn finite_diff_check_with<F>(f: F, inputs: &[Tensor<f64>], eps: f64, floor: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.constant(x.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let v = tape.value(out);
        if v.shape() != (1, 1) {
            return Err(Error::shape(
                "finite_diff_check",
                format!("f returned {:?}", v.shape()),
            ));
        }
        Ok(v.item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.param(x.clone())).collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;

    let mut worst: f64 = 0.0;
    let mut work = inputs.to_vec();
    for (which, var) in vars.iter().enumerate() {
        let analytic = tape
            .grad(*var)
            .unwrap_or_else(|| Tensor::zeros(inputs[which].rows(), inputs[which].cols()));
        for c in 0..inputs[which].len() {
            let orig = inputs[which].data()[c];
            work[which].data_mut()[c] = orig + eps;
            let up = eval(&work)?;
            work[which].data_mut()[c] = orig - eps;
            let down = eval(&work)?;
            work[which].data_mut()[c] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic.data()[c];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}
