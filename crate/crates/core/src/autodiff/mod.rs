//! Minimal reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Graph`] is a fixed DAG of layers built through [`GraphBuilder`], which
//! checks every shape at construction. [`Graph::forward`] records a [`Tape`]
//! and [`Graph::backward`] replays it in reverse to produce gradients for all
//! parameters and for the input batch.

mod adam;
pub mod gradcheck;
mod graph;
mod params;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use graph::{
    Gradients, Graph, GraphBuilder, Init, LayerKind, Node, NodeId, ParamId, ParamSpec, Tape,
};
pub use params::ParameterSet;
pub use tensor::{Scalar, Tensor};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("shape error in layer `{layer}`: {msg}")]
    Shape { layer: String, msg: String },
    #[error("non-finite value produced by layer `{layer}`")]
    NonFinite { layer: String },
    #[error("tape is stale: parameters or graph changed since the forward pass")]
    StaleTape,
}

/// Forward pass; see [`Graph::forward`].
pub fn forward_eval<T: Scalar>(
    graph: &Graph,
    params: &ParameterSet<T>,
    input: &Tensor<T>,
) -> Result<(Tensor<T>, Tape<T>), AutodiffError> {
    graph.forward(params, input)
}

/// Reverse pass; see [`Graph::backward`].
pub fn backward<T: Scalar>(
    graph: &Graph,
    params: &ParameterSet<T>,
    tape: &Tape<T>,
    upstream: &Tensor<T>,
) -> Result<Gradients<T>, AutodiffError> {
    graph.backward(params, tape, upstream)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng() -> rand_chacha::ChaCha8Rng {
        rand_chacha::ChaCha8Rng::seed_from_u64(0)
    }

    #[test]
    fn identity_dense_passes_input_through() {
        let mut b = GraphBuilder::new(&[3]);
        let y = b.dense("fc", b.input(), 3).unwrap();
        let g = b.build(y).unwrap();
        let mut p: ParameterSet<f64> = g.init_params(&mut rng());
        let w = p.get_mut("fc.weight").unwrap();
        w.data_mut()
            .copy_from_slice(&[1., 0., 0., 0., 1., 0., 0., 0., 1.]);
        let x = Tensor::from_f64(&[2, 3], &[1., -2., 3., 0.5, 0., 7.]);
        let (out, _) = forward_eval(&g, &p, &x).unwrap();
        assert_eq!(out.data(), x.data());
    }

    #[test]
    fn relu_forward_and_backward() {
        let mut b = GraphBuilder::new(&[3]);
        let y = b.relu(b.input()).unwrap();
        let g = b.build(y).unwrap();
        let p = ParameterSet::<f64>::new();
        let x = Tensor::from_f64(&[1, 3], &[-1., 0., 2.]);
        let (out, tape) = forward_eval(&g, &p, &x).unwrap();
        assert_eq!(out.data(), &[0., 0., 2.]);
        let gr = backward(&g, &p, &tape, &Tensor::filled(&[1, 3], 1.0)).unwrap();
        assert_eq!(gr.input.data(), &[0., 0., 1.]);
    }

    #[test]
    fn conv_of_impulse_is_plateau() {
        let mut b = GraphBuilder::new(&[1, 7, 7]);
        let y = b.conv3x3("c", b.input(), 1).unwrap();
        let g = b.build(y).unwrap();
        let mut p: ParameterSet<f64> = g.init_params(&mut rng());
        p.get_mut("c.weight")
            .unwrap()
            .data_mut()
            .iter_mut()
            .for_each(|v| *v = 1.0);
        let mut img = vec![0.0; 49];
        img[3 * 7 + 3] = 1.0;
        let (out, _) = forward_eval(&g, &p, &Tensor::from_f64(&[1, 1, 7, 7], &img)).unwrap();
        for r in 0..7 {
            for c in 0..7 {
                let inside = (2..=4).contains(&r) && (2..=4).contains(&c);
                assert_eq!(out.data()[r * 7 + c], if inside { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn scalar_chain_rule() {
        // y = w·x, L = y² at w = 1, x = 2  ⇒  dL/dw = 2·y·x = 8
        let mut b = GraphBuilder::new(&[1]);
        let y = b.dense("lin", b.input(), 1).unwrap();
        let g = b.build(y).unwrap();
        let mut p: ParameterSet<f64> = g.init_params(&mut rng());
        p.get_mut("lin.weight").unwrap().data_mut()[0] = 1.0;
        let (out, tape) = forward_eval(&g, &p, &Tensor::from_f64(&[1, 1], &[2.0])).unwrap();
        let up = Tensor::from_f64(&[1, 1], &[2.0 * out.data()[0]]);
        let gr = backward(&g, &p, &tape, &up).unwrap();
        assert_eq!(gr.params[0].data()[0], 8.0);
    }

    #[test]
    fn maxpool_tie_breaks_to_first() {
        let mut b = GraphBuilder::new(&[1, 2, 2]);
        let y = b.maxpool2(b.input()).unwrap();
        let g = b.build(y).unwrap();
        let p = ParameterSet::<f64>::new();
        let (_, tape) =
            forward_eval(&g, &p, &Tensor::from_f64(&[1, 1, 2, 2], &[1., 3., 3., 3.])).unwrap();
        let gr = backward(&g, &p, &tape, &Tensor::filled(&[1, 1, 1, 1], 1.0)).unwrap();
        assert_eq!(gr.input.data(), &[0., 1., 0., 0.]);
    }

    #[test]
    fn upsample_backward_sums_blocks() {
        let mut b = GraphBuilder::new(&[1, 1, 2]);
        let y = b.upsample2(b.input()).unwrap();
        let g = b.build(y).unwrap();
        let p = ParameterSet::<f64>::new();
        let (out, tape) =
            forward_eval(&g, &p, &Tensor::from_f64(&[1, 1, 1, 2], &[1., 2.])).unwrap();
        assert_eq!(out.data(), &[1., 1., 2., 2., 1., 1., 2., 2.]);
        let up = Tensor::from_f64(&[1, 1, 2, 4], &[1., 2., 3., 4., 5., 6., 7., 8.]);
        let gr = backward(&g, &p, &tape, &up).unwrap();
        assert_eq!(gr.input.data(), &[14., 22.]);
    }

    #[test]
    fn ill_formed_graphs_rejected_at_construction() {
        let mut b = GraphBuilder::new(&[1, 5, 5]);
        let err = b.maxpool2(b.input()).unwrap_err();
        assert!(matches!(err, AutodiffError::Shape { .. }));
        let mut b = GraphBuilder::new(&[2, 4, 4]);
        let err = b.dense("fc", b.input(), 3).unwrap_err();
        assert!(matches!(err, AutodiffError::Shape { ref layer, .. } if layer == "fc"));
        let mut b = GraphBuilder::new(&[2, 4, 4]);
        let p = b.maxpool2(b.input()).unwrap();
        assert!(b.concat_channels(&[0, p]).is_err());
    }

    #[test]
    fn forward_input_shape_checked() {
        let mut b = GraphBuilder::new(&[4]);
        let y = b.dense("fc", b.input(), 2).unwrap();
        let g = b.build(y).unwrap();
        let p: ParameterSet<f32> = g.init_params(&mut rng());
        let err = forward_eval(&g, &p, &Tensor::zeros(&[1, 5])).unwrap_err();
        assert!(matches!(err, AutodiffError::Shape { ref layer, .. } if layer == "input"));
    }

    #[test]
    fn stale_tape_rejected() {
        let mut b = GraphBuilder::new(&[2]);
        let y = b.dense("fc", b.input(), 1).unwrap();
        let g = b.build(y).unwrap();
        let mut p: ParameterSet<f64> = g.init_params(&mut rng());
        let (_, tape) = forward_eval(&g, &p, &Tensor::zeros(&[1, 2])).unwrap();
        p.get_mut("fc.bias").unwrap().data_mut()[0] = 1.0;
        let err = backward(&g, &p, &tape, &Tensor::zeros(&[1, 1])).unwrap_err();
        assert_eq!(err, AutodiffError::StaleTape);
    }

    #[test]
    fn nan_check_mode_names_layer() {
        let mut b = GraphBuilder::new(&[1]);
        let y = b.dense("fc", b.input(), 1).unwrap();
        let mut g = b.build(y).unwrap();
        g.set_check_finite(true);
        let p: ParameterSet<f64> = g.init_params(&mut rng());
        let err = forward_eval(&g, &p, &Tensor::from_f64(&[1, 1], &[f64::NAN])).unwrap_err();
        assert!(matches!(err, AutodiffError::NonFinite { ref layer } if layer == "input"));
    }
}
