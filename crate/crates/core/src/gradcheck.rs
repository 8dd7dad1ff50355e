//! Central finite-difference checks of tape gradients.

use crate::error::Result;
use crate::tensor::{Tape, Tensor, Var};

/// Default perturbation for double-precision checks.
pub const FD_STEP: f64 = 1e-4;

/// Relative disagreement `‖a − n‖₂ / max(‖a‖₂, ‖n‖₂)`; zero when both vanish.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, n)| (a - n) * (a - n)).sum::<f64>().sqrt();
    let na: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn: f64 = numeric.iter().map(|n| n * n).sum::<f64>().sqrt();
    let scale = na.max(nn);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Compares backward-pass gradients of a scalar function against central
/// differences, one input tensor at a time. `build` receives a fresh tape and
/// the leaf handles of `inputs` (in order) and must return a scalar node.
///
/// Returns the relative error for each input.
pub fn check_gradients<F>(inputs: &[Tensor<f64>], step: f64, build: F) -> Result<Vec<f64>>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.constant(t.clone())).collect();
        let out = build(&mut tape, &vars)?;
        tape.value(out).scalar()
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone().with_grad())).collect();
    let out = build(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut errors = Vec::with_capacity(inputs.len());
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; inputs[i].len()]);
        let mut numeric = Vec::with_capacity(inputs[i].len());
        for j in 0..inputs[i].len() {
            let orig = inputs[i].data()[j];
            work[i].data_mut()[j] = orig + step;
            let plus = eval(&work)?;
            work[i].data_mut()[j] = orig - step;
            let minus = eval(&work)?;
            work[i].data_mut()[j] = orig;
            numeric.push((plus - minus) / (2.0 * step));
        }
        errors.push(relative_error(&analytic, &numeric));
    }
    Ok(errors)
}

/// Reduces a tensor node to a scalar by a fixed random projection
/// `Σ xᵢ·wᵢ`, so that every output element influences the result.
pub fn project(tape: &mut Tape<f64>, x: Var, weights: &Tensor<f64>) -> Result<Var> {
    let w = tape.constant(weights.clone().reshape(tape.shape(x).to_vec())?);
    let prod = tape.mul(x, w)?;
    Ok(tape.sum(prod))
}
