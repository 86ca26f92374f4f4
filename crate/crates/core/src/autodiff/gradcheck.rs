//! Central finite-difference verification of reverse-mode gradients.

use rand::Rng;
use rand_distr::StandardNormal;

use super::AutodiffError;
use super::{Graph, ParameterSet, Tensor};

/// Worst element-wise relative error between analytic and numeric gradients.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
}

/// Relative error with a small absolute floor so that near-zero gradients do
/// not dominate through round-off.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-4)
}

fn objective(out: &Tensor<f64>, weights: &[f64]) -> f64 {
    out.data().iter().zip(weights).map(|(a, b)| a * b).sum()
}

/// Checks input and parameter gradients of `graph` for the scalar objective
/// `Σ out ⊙ r` with random `r`, using central differences of size `step`.
pub fn check_graph<R: Rng + ?Sized>(
    graph: &Graph,
    params: &ParameterSet<f64>,
    input: &Tensor<f64>,
    step: f64,
    rng: &mut R,
) -> Result<GradCheckReport, AutodiffError> {
    let (out, tape) = graph.forward(params, input)?;
    let weights: Vec<f64> = (0..out.len()).map(|_| rng.sample(StandardNormal)).collect();
    let upstream = Tensor::new(out.shape().to_vec(), weights.clone());
    let grads = graph.backward(params, &tape, &upstream)?;

    let mut worst = 0.0f64;
    let mut checked = 0;
    let eval = |p: &ParameterSet<f64>, x: &Tensor<f64>| -> Result<f64, AutodiffError> {
        Ok(objective(&graph.forward(p, x)?.0, &weights))
    };

    for i in 0..input.len() {
        let mut xp = input.clone();
        xp.data_mut()[i] += step;
        let mut xm = input.clone();
        xm.data_mut()[i] -= step;
        let num = (eval(params, &xp)? - eval(params, &xm)?) / (2.0 * step);
        worst = worst.max(rel_err(grads.input.data()[i], num));
        checked += 1;
    }
    for (pi, t) in params.tensors().iter().enumerate() {
        for i in 0..t.len() {
            let mut pp = params.clone();
            pp.tensors_mut()[pi].data_mut()[i] += step;
            let mut pm = params.clone();
            pm.tensors_mut()[pi].data_mut()[i] -= step;
            let num = (eval(&pp, input)? - eval(&pm, input)?) / (2.0 * step);
            worst = worst.max(rel_err(grads.params[pi].data()[i], num));
            checked += 1;
        }
    }
    Ok(GradCheckReport {
        max_rel_err: worst,
        checked,
    })
}
