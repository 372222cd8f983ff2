//! Finite-difference gradient checking. Runs in f64; central differences
//! are too noisy in f32.

use super::{Tape, Tensor, Var};
use crate::error::Result;

/// Compares analytic gradients of `f` against central finite differences.
///
/// `f` receives leaves for each input and returns any tensor; its elements
/// are summed to form the checked scalar. Returns the maximum over all
/// input coordinates of `|analytic - fd| / max(1, |fd|)`.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], epsilon: f64) -> Result<f64>
where
    F: Fn(&Tape<f64>, &[Var<f64>]) -> Result<Var<f64>>,
{
    let eval = |points: &[Tensor<f64>]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var<f64>> = points.iter().map(|t| tape.leaf(t)).collect();
        let out = f(&tape, &vars)?;
        Ok(out.sum_all().item())
    };

    // analytic pass
    let tape = Tape::new();
    let vars: Vec<Var<f64>> = inputs.iter().map(|t| tape.leaf(t)).collect();
    let out = f(&tape, &vars)?;
    let loss = out.sum_all();
    tape.backward(&loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|v| {
            v.grad()
                .map(|g| g.into_data())
                .unwrap_or_else(|| vec![0.0; v.numel()])
        })
        .collect();

    let mut max_err = 0.0f64;
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (vi, input) in inputs.iter().enumerate() {
        for ci in 0..input.numel() {
            let orig = input.data()[ci];
            work[vi].data_mut()[ci] = orig + epsilon;
            let up = eval(&work)?;
            work[vi].data_mut()[ci] = orig - epsilon;
            let down = eval(&work)?;
            work[vi].data_mut()[ci] = orig;
            let fd = (up - down) / (2.0 * epsilon);
            let err = (analytic[vi][ci] - fd).abs() / fd.abs().max(1.0);
            if err > max_err {
                max_err = err;
            }
        }
    }
    Ok(max_err)
}
