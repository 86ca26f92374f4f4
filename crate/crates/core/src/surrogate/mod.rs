//! Differentiable surrogate of the forward map: a frozen linear sensitivity
//! branch blended with a convolutional correction branch.
//!
//! `F̂(σ) = γ·(V₀ + J·vec(σ − σ₀)) + (1 − γ)·CNN(σ − σ₀)`

mod train;

pub use train::{
    eval_forward_net, pair_mse, train_forward_net, ForwardEvalReport, SurrogateHistory,
    SurrogateTrainConfig,
};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autodiff::{AutodiffError, Graph, GraphBuilder, Init, ParameterSet, Scalar, Tensor};
use crate::forward::{ConductivityImage, SensitivityMatrix, VoltageFrame};

/// Name of the fusion coefficient inside the parameter set.
pub const GAMMA: &str = "fusion.gamma";

#[derive(Debug, Error)]
pub enum SurrogateError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("training diverged at epoch {epoch}: loss {loss}")]
    Divergence { epoch: usize, loss: f64 },
    #[error("empty test set")]
    EmptyTestSet,
}

/// How the correction branch maps its last feature map to 208 outputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CnnHead {
    /// Per-channel spatial mean followed by a dense layer.
    GlobalMean,
    /// Flattened feature map followed by a dense layer; keeps position.
    Flatten,
}

impl CnnHead {
    pub fn name(self) -> &'static str {
        match self {
            CnnHead::GlobalMean => "global_mean",
            CnnHead::Flatten => "flatten",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "global_mean" => Some(CnnHead::GlobalMean),
            "flatten" => Some(CnnHead::Flatten),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardNetConfig {
    pub channels: [usize; 3],
    pub head: CnnHead,
}

impl Default for ForwardNetConfig {
    fn default() -> Self {
        Self {
            channels: [8, 16, 32],
            head: CnnHead::GlobalMean,
        }
    }
}

fn correction_graph(
    grid_n: usize,
    n_out: usize,
    cfg: &ForwardNetConfig,
) -> Result<Graph, AutodiffError> {
    let [c1, c2, c3] = cfg.channels;
    let mut b = GraphBuilder::new(&[1, grid_n, grid_n]);
    let x = b.conv3x3("cnn.conv1", b.input(), c1)?;
    let x = b.relu(x)?;
    let x = b.maxpool2(x)?;
    let x = b.conv3x3("cnn.conv2", x, c2)?;
    let x = b.relu(x)?;
    let x = b.maxpool2(x)?;
    let x = b.conv3x3("cnn.conv3", x, c3)?;
    let x = b.relu(x)?;
    let x = match cfg.head {
        CnnHead::GlobalMean => b.global_mean(x)?,
        CnnHead::Flatten => {
            let n: usize = b.shape(x).iter().product();
            b.reshape(x, &[n])?
        }
    };
    let y = b.dense_init("cnn.out", x, n_out, Some(Init::Zeros))?;
    b.build(y)
}

/// The surrogate forward operator.
///
/// Parameters hold the correction branch followed by the scalar [`GAMMA`].
/// `J`, `V₀` and `σ₀` are owned and never modified.
#[derive(Debug, Clone)]
pub struct ForwardNet<T: Scalar = f32> {
    jacobian: SensitivityMatrix,
    v0: VoltageFrame,
    config: ForwardNetConfig,
    graph: Graph,
    params: ParameterSet<T>,
}

/// Per-batch intermediates of [`ForwardNet::forward_batch`].
#[derive(Debug, Clone)]
pub struct SurrogatePass<T: Scalar> {
    /// `V₀ + J·δ`, `[batch × n_meas]`.
    pub linear: Vec<f64>,
    pub tape: crate::autodiff::Tape<T>,
    /// Fused prediction, `[batch × n_meas]`.
    pub output: Vec<f64>,
}

/// Builds the surrogate with the default correction branch.
pub fn build_forward_net<R: Rng + ?Sized>(
    jacobian: SensitivityMatrix,
    v0: VoltageFrame,
    grid_n: usize,
    rng: &mut R,
) -> Result<ForwardNet, SurrogateError> {
    ForwardNet::new(jacobian, v0, grid_n, ForwardNetConfig::default(), rng)
}

impl<T: Scalar> ForwardNet<T> {
    pub fn new<R: Rng + ?Sized>(
        jacobian: SensitivityMatrix,
        v0: VoltageFrame,
        grid_n: usize,
        config: ForwardNetConfig,
        rng: &mut R,
    ) -> Result<Self, SurrogateError> {
        if jacobian.cols() != grid_n * grid_n {
            return Err(SurrogateError::Dimension(format!(
                "J has {} columns, grid {grid_n}×{grid_n} needs {}",
                jacobian.cols(),
                grid_n * grid_n
            )));
        }
        if jacobian.rows() != v0.len() {
            return Err(SurrogateError::Dimension(format!(
                "J has {} rows, V0 has {} entries",
                jacobian.rows(),
                v0.len()
            )));
        }
        if grid_n % 4 != 0 {
            return Err(SurrogateError::Dimension(format!(
                "grid {grid_n} not divisible by 4"
            )));
        }
        let graph = correction_graph(grid_n, v0.len(), &config)?;
        let mut params = graph.init_params(rng);
        params.push(GAMMA, Tensor::from_f64(&[1], &[0.5]));
        Ok(Self {
            jacobian,
            v0,
            config,
            graph,
            params,
        })
    }

    /// Reassembles a net from stored parameters.
    pub fn from_parts(
        jacobian: SensitivityMatrix,
        v0: VoltageFrame,
        config: ForwardNetConfig,
        params: ParameterSet<T>,
    ) -> Result<Self, SurrogateError> {
        let n = (jacobian.cols() as f64).sqrt().round() as usize;
        let mut net = Self::new(jacobian, v0, n, config, &mut ChaCha8Rng::seed_from_u64(0))?;
        if params.names() != net.params.names() {
            return Err(SurrogateError::Dimension(
                "parameter names do not match the architecture".into(),
            ));
        }
        for (a, b) in params.tensors().iter().zip(net.params.tensors()) {
            if a.shape() != b.shape() {
                return Err(SurrogateError::Dimension(
                    "parameter shapes do not match the architecture".into(),
                ));
            }
        }
        net.params = params;
        Ok(net)
    }

    pub fn grid_n(&self) -> usize {
        self.graph.input_shape()[1]
    }

    pub fn n_meas(&self) -> usize {
        self.v0.len()
    }

    pub fn jacobian(&self) -> &SensitivityMatrix {
        &self.jacobian
    }

    pub fn v0(&self) -> &VoltageFrame {
        &self.v0
    }

    pub fn sigma0(&self) -> &ConductivityImage {
        self.jacobian.baseline()
    }

    pub fn config(&self) -> &ForwardNetConfig {
        &self.config
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    pub fn params(&self) -> &ParameterSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParameterSet<T> {
        &mut self.params
    }

    pub fn gamma(&self) -> f64 {
        self.params.get(GAMMA).expect("gamma present").data()[0].as_f64()
    }

    pub fn set_gamma(&mut self, g: f64) {
        self.params
            .get_mut(GAMMA)
            .expect("gamma present")
            .data_mut()[0] = T::from_f64(g);
    }

    /// Same net in another precision.
    pub fn cast<U: Scalar>(&self) -> ForwardNet<U> {
        ForwardNet {
            jacobian: self.jacobian.clone(),
            v0: self.v0.clone(),
            config: self.config.clone(),
            graph: self.graph.clone(),
            params: self.params.cast(),
        }
    }

    /// `V₀ + J·δ` for a batch of flattened deltas `[batch × n²]`.
    pub fn linear_batch(&self, deltas: &[f64], batch: usize) -> Vec<f64> {
        let (m, k) = (self.jacobian.rows(), self.jacobian.cols());
        assert_eq!(deltas.len(), batch * k);
        // out[b, i] = Σ_e δ[b, e] J[i, e]
        let mut out: Vec<f64> = (0..batch)
            .flat_map(|_| self.v0.values().iter().copied())
            .collect();
        f64::gemm(
            batch,
            k,
            m,
            1.0,
            deltas,
            k as isize,
            1,
            self.jacobian.entries(),
            1,
            k as isize,
            1.0,
            &mut out,
            m as isize,
            1,
        );
        out
    }

    /// Fused forward pass on a batch of conductivity deltas `δ = σ − σ₀`
    /// (`[batch × n²]`). `linear` may be supplied when already known.
    pub fn forward_batch(
        &self,
        deltas: &[T],
        batch: usize,
        linear: Option<Vec<f64>>,
    ) -> Result<SurrogatePass<T>, SurrogateError> {
        let n = self.grid_n();
        let nm = self.n_meas();
        if deltas.len() != batch * n * n {
            return Err(SurrogateError::Dimension(format!(
                "expected {} conductivity values, got {}",
                batch * n * n,
                deltas.len()
            )));
        }
        let linear = match linear {
            Some(l) => {
                if l.len() != batch * nm {
                    return Err(SurrogateError::Dimension(
                        "cached linear branch has wrong length".into(),
                    ));
                }
                l
            }
            None => {
                let d64: Vec<f64> = deltas.iter().map(|v| v.as_f64()).collect();
                self.linear_batch(&d64, batch)
            }
        };
        let x = Tensor::new(vec![batch, 1, n, n], deltas.to_vec());
        let (cnn, tape) = self.graph.forward(&self.params, &x)?;
        let g = self.gamma();
        let output = linear
            .iter()
            .zip(cnn.data())
            .map(|(l, c)| g * l + (1.0 - g) * c.as_f64())
            .collect();
        Ok(SurrogatePass {
            linear,
            tape,
            output,
        })
    }

    /// Reverse pass for upstream `dL/dF̂` (`[batch × n_meas]`). Returns the
    /// parameter gradients (γ last) and `dL/dδ` (`[batch × n²]`).
    pub fn backward_batch(
        &self,
        pass: &SurrogatePass<T>,
        upstream: &[f64],
        need_params: bool,
    ) -> Result<(Vec<Tensor<T>>, Vec<f64>), SurrogateError> {
        let batch = pass.tape.batch();
        let nm = self.n_meas();
        if upstream.len() != batch * nm {
            return Err(SurrogateError::Dimension(
                "upstream gradient has wrong length".into(),
            ));
        }
        let g = self.gamma();
        let cnn = pass.tape.output();
        let up_cnn = Tensor::new(
            vec![batch, nm],
            upstream
                .iter()
                .map(|u| T::from_f64((1.0 - g) * u))
                .collect(),
        );
        let grads = self.graph.backward(&self.params, &pass.tape, &up_cnn)?;

        // dL/dδ = γ·Jᵀu + CNN input gradient
        let k = self.jacobian.cols();
        let mut d_delta: Vec<f64> = grads.input.data().iter().map(|v| v.as_f64()).collect();
        f64::gemm(
            batch,
            nm,
            k,
            g,
            upstream,
            nm as isize,
            1,
            self.jacobian.entries(),
            k as isize,
            1,
            1.0,
            &mut d_delta,
            k as isize,
            1,
        );

        let mut params = Vec::new();
        if need_params {
            params = grads.params;
            params.truncate(self.graph.param_specs().len());
            let dg: f64 = upstream
                .iter()
                .zip(&pass.linear)
                .zip(cnn.data())
                .map(|((u, l), c)| u * (l - c.as_f64()))
                .sum();
            params.push(Tensor::from_f64(&[1], &[dg]));
        }
        Ok((params, d_delta))
    }

    /// Predicted voltages for a single image.
    pub fn predict(&self, sigma: &ConductivityImage) -> Result<VoltageFrame, SurrogateError> {
        Ok(self.predict_batch(std::slice::from_ref(sigma))?.remove(0))
    }

    pub fn predict_batch(
        &self,
        sigmas: &[ConductivityImage],
    ) -> Result<Vec<VoltageFrame>, SurrogateError> {
        let nn = self.jacobian.cols();
        let mut deltas = Vec::with_capacity(sigmas.len() * nn);
        for s in sigmas {
            if s.values().len() != nn {
                return Err(SurrogateError::Dimension(format!(
                    "image has {} pixels, expected {nn}",
                    s.values().len()
                )));
            }
            deltas.extend(
                s.values()
                    .iter()
                    .zip(self.sigma0().values())
                    .map(|(a, b)| T::from_f64(a - b)),
            );
        }
        let pass = self.forward_batch(&deltas, sigmas.len(), None)?;
        Ok(pass
            .output
            .chunks(self.n_meas())
            .map(|c| VoltageFrame::new(c.to_vec()))
            .collect())
    }
}
