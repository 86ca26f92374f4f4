use super::params::ParameterSet;
use super::tensor::{Scalar, Tensor};
use super::AutodiffError;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment accumulators mirroring a parameter set.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub step: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &ParameterSet<T>) -> Self {
        let zeros = || {
            params
                .tensors()
                .iter()
                .map(|t| Tensor::zeros(t.shape()))
                .collect()
        };
        Self {
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }
}

/// One bias-corrected Adam update: `p ← p − lr · m̂ / (√v̂ + ε)`.
pub fn adam_step<T: Scalar>(
    params: &mut ParameterSet<T>,
    grads: &[Tensor<T>],
    state: &mut AdamState<T>,
    cfg: &AdamConfig,
) -> Result<(), AutodiffError> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(AutodiffError::Shape {
            layer: "adam".into(),
            msg: format!(
                "{} parameters, {} gradients, {} moment slots",
                params.len(),
                grads.len(),
                state.m.len()
            ),
        });
    }
    for (i, (p, g)) in params.tensors().iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || state.m[i].shape() != p.shape() {
            return Err(AutodiffError::Shape {
                layer: params.names()[i].clone(),
                msg: format!(
                    "gradient shape {:?} vs parameter {:?}",
                    g.shape(),
                    p.shape()
                ),
            });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    let (b1, b2) = (T::from_f64(cfg.beta1), T::from_f64(cfg.beta2));
    let (ob1, ob2) = (T::from_f64(1.0 - cfg.beta1), T::from_f64(1.0 - cfg.beta2));
    let (inv_c1, inv_c2) = (T::from_f64(1.0 / c1), T::from_f64(1.0 / c2));
    let (lr, eps) = (T::from_f64(cfg.lr), T::from_f64(cfg.eps));
    for (i, p) in params.tensors_mut().iter_mut().enumerate() {
        let g = grads[i].data();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (k, pk) in p.data_mut().iter_mut().enumerate() {
            m[k] = b1 * m[k] + ob1 * g[k];
            v[k] = b2 * v[k] + ob2 * g[k] * g[k];
            let mhat = m[k] * inv_c1;
            let vhat = v[k] * inv_c2;
            *pk -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_set(v: f64) -> ParameterSet<f64> {
        let mut p = ParameterSet::new();
        p.push("w", Tensor::from_f64(&[1], &[v]));
        p
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = scalar_set(0.0);
        let mut st = AdamState::new(&p);
        let cfg = AdamConfig::with_lr(1e-3);
        adam_step(&mut p, &[Tensor::from_f64(&[1], &[1.0])], &mut st, &cfg).unwrap();
        let expect = -1e-3 / (1.0 + 1e-8);
        assert!((p.tensors()[0].data()[0] - expect).abs() < 1e-12);
    }

    #[test]
    fn zero_gradient_is_noop() {
        let mut p = scalar_set(0.7);
        let mut st = AdamState::new(&p);
        adam_step(
            &mut p,
            &[Tensor::zeros(&[1])],
            &mut st,
            &AdamConfig::default(),
        )
        .unwrap();
        assert_eq!(p.tensors()[0].data()[0], 0.7);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn two_steps_match_closed_form() {
        let g = 0.3;
        let cfg = AdamConfig::default();
        let mut p = scalar_set(1.0);
        let mut st = AdamState::new(&p);
        for _ in 0..2 {
            adam_step(&mut p, &[Tensor::from_f64(&[1], &[g])], &mut st, &cfg).unwrap();
        }
        // hand-evaluated moment recursion
        let m1 = 0.1 * g;
        let v1 = 0.001 * g * g;
        let p1 = 1.0 - 1e-3 * (m1 / 0.1) / ((v1 / 0.001).sqrt() + 1e-8);
        let m2 = 0.9 * m1 + 0.1 * g;
        let v2 = 0.999 * v1 + 0.001 * g * g;
        let p2 = p1 - 1e-3 * (m2 / (1.0 - 0.81)) / ((v2 / (1.0 - 0.999 * 0.999)).sqrt() + 1e-8);
        assert!((p.tensors()[0].data()[0] - p2).abs() < 1e-12);
    }

    #[test]
    fn mismatched_gradients_rejected() {
        let mut p = scalar_set(0.0);
        let mut st = AdamState::new(&p);
        let r = adam_step(
            &mut p,
            &[Tensor::zeros(&[2])],
            &mut st,
            &AdamConfig::default(),
        );
        assert!(matches!(r, Err(AutodiffError::Shape { .. })));
    }
}
