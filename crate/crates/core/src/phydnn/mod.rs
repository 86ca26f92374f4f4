//! Physics-driven reconstruction network.
//!
//! A [`ReconNet`] maps normalized boundary voltages to an absolute
//! conductivity map through a dense projection and a U-Net. Training
//! minimises `α·L_data + β·L_phy`, where the physics term runs the frozen
//! surrogate forward operator on the prediction.

mod search;
mod train;

pub use search::{evaluate_recon, grid_search_beta, log_spaced, BetaRow, BetaSearch};
pub use train::{
    physics_loss_gap, train, train_paired, write_history_csv, PairedRun, TrainConfig, TrainHistory,
    Trainer,
};

use std::time::{Duration, Instant};

use rand::Rng;
use thiserror::Error;

use crate::autodiff::{AutodiffError, Graph, GraphBuilder, ParameterSet, Scalar, Tensor};
use crate::forward::{ConductivityImage, VoltageFrame};
use crate::surrogate::{ForwardNet, SurrogateError};

/// Floor added to `|V₀|` in the input normalization.
pub const NORM_FLOOR: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum PhydnnError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("surrogate does not match the reconstruction setup: {0}")]
    SurrogateMismatch(String),
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error("training diverged at epoch {epoch}: loss {loss}")]
    Divergence { epoch: usize, loss: f64 },
    #[error("non-finite loss: L_data {data}, L_phy {phy}")]
    NonFiniteLoss { data: f64, phy: f64 },
    #[error("run with beta {beta}: {source}")]
    Beta {
        beta: f64,
        #[source]
        source: Box<PhydnnError>,
    },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Surrogate(#[from] SurrogateError),
    #[error(transparent)]
    Metrics(#[from] crate::metrics::MetricsError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReconNetConfig {
    pub grid_n: usize,
    pub n_meas: usize,
    /// Channels at the first encoder level; doubled at each level below.
    pub base_channels: usize,
    /// Number of pooling levels.
    pub depth: usize,
}

impl ReconNetConfig {
    /// Depth 3 from grid 64 upwards, depth 2 below; 16 base channels.
    pub fn for_grid(grid_n: usize) -> Self {
        Self {
            grid_n,
            n_meas: 208,
            base_channels: 16,
            depth: if grid_n >= 64 { 3 } else { 2 },
        }
    }

    pub fn with_base_channels(mut self, c: usize) -> Self {
        self.base_channels = c;
        self
    }

    fn validate(&self) -> Result<(), PhydnnError> {
        let div = 1usize << self.depth;
        if self.depth == 0 || self.base_channels == 0 || self.grid_n == 0 || self.grid_n % div != 0
        {
            return Err(PhydnnError::Dimension(format!(
                "grid {} must be a positive multiple of 2^depth = {div}, base channels {} positive",
                self.grid_n, self.base_channels
            )));
        }
        Ok(())
    }
}

fn conv_pair(b: &mut GraphBuilder, name: &str, x: usize, c: usize) -> Result<usize, AutodiffError> {
    let y = b.conv3x3(&format!("{name}.conv1"), x, c)?;
    let y = b.relu(y)?;
    let y = b.conv3x3(&format!("{name}.conv2"), y, c)?;
    b.relu(y)
}

fn unet_graph(cfg: &ReconNetConfig) -> Result<Graph, AutodiffError> {
    let n = cfg.grid_n;
    let mut b = GraphBuilder::new(&[cfg.n_meas]);
    let x = b.dense("proj", b.input(), n * n)?;
    let mut x = b.reshape(x, &[1, n, n])?;
    let mut skips = Vec::with_capacity(cfg.depth);
    let mut c = cfg.base_channels;
    for level in 0..cfg.depth {
        x = conv_pair(&mut b, &format!("enc{level}"), x, c)?;
        skips.push(x);
        x = b.maxpool2(x)?;
        c *= 2;
    }
    x = conv_pair(&mut b, "mid", x, c)?;
    for level in (0..cfg.depth).rev() {
        c /= 2;
        let up = b.upsample2(x)?;
        let cat = b.concat_channels(&[up, skips[level]])?;
        x = conv_pair(&mut b, &format!("dec{level}"), cat, c)?;
    }
    // background conductivity as the starting output
    let out = b.conv1x1_bias("out", x, 1, 1.0)?;
    b.build(out)
}

/// Voltage-to-conductivity U-Net with its input normalization.
#[derive(Debug, Clone)]
pub struct ReconNet<T: Scalar = f32> {
    config: ReconNetConfig,
    graph: Graph,
    params: ParameterSet<T>,
    v0: Vec<f64>,
}

/// One reconstructed frame and the wall time of its forward pass.
#[derive(Debug, Clone)]
pub struct Reconstruction {
    pub image: ConductivityImage,
    pub latency: Duration,
}

impl<T: Scalar> ReconNet<T> {
    pub fn new<R: Rng + ?Sized>(
        config: ReconNetConfig,
        v0: &VoltageFrame,
        rng: &mut R,
    ) -> Result<Self, PhydnnError> {
        config.validate()?;
        if v0.len() != config.n_meas {
            return Err(PhydnnError::Dimension(format!(
                "baseline has {} values, network expects {}",
                v0.len(),
                config.n_meas
            )));
        }
        let graph = unet_graph(&config)?;
        let params = graph.init_params(rng);
        Ok(Self {
            config,
            graph,
            params,
            v0: v0.values().to_vec(),
        })
    }

    /// Reassembles a network from stored parameters.
    pub fn from_parts(
        config: ReconNetConfig,
        v0: &VoltageFrame,
        params: ParameterSet<T>,
    ) -> Result<Self, PhydnnError> {
        config.validate()?;
        let graph = unet_graph(&config)?;
        let specs = graph.param_specs();
        if specs.len() != params.len()
            || specs
                .iter()
                .zip(params.iter())
                .any(|(s, (name, t))| s.name != name || s.shape != t.shape())
        {
            return Err(PhydnnError::Dimension(
                "parameters do not match the architecture".into(),
            ));
        }
        if v0.len() != config.n_meas {
            return Err(PhydnnError::Dimension(
                "baseline length does not match the network".into(),
            ));
        }
        Ok(Self {
            config,
            graph,
            params,
            v0: v0.values().to_vec(),
        })
    }

    pub fn config(&self) -> &ReconNetConfig {
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

    pub fn v0(&self) -> VoltageFrame {
        VoltageFrame::new(self.v0.clone())
    }

    pub fn cast<U: Scalar>(&self) -> ReconNet<U> {
        ReconNet {
            config: self.config,
            graph: self.graph.clone(),
            params: self.params.cast(),
            v0: self.v0.clone(),
        }
    }

    /// `(V − V₀) / (|V₀| + 1e-9)` elementwise, appended to `out`.
    pub fn normalize_into(&self, v: &[f64], out: &mut Vec<T>) -> Result<(), PhydnnError> {
        if v.len() != self.v0.len() {
            return Err(PhydnnError::Dimension(format!(
                "frame has {} values, expected {}",
                v.len(),
                self.v0.len()
            )));
        }
        out.extend(
            v.iter()
                .zip(&self.v0)
                .map(|(x, b)| T::from_f64((x - b) / (b.abs() + NORM_FLOOR))),
        );
        Ok(())
    }

    /// Forward pass on normalized inputs `[batch × n_meas]`.
    pub fn forward_normalized(
        &self,
        inputs: Vec<T>,
        batch: usize,
    ) -> Result<(Tensor<T>, crate::autodiff::Tape<T>), PhydnnError> {
        let x = Tensor::new(vec![batch, self.config.n_meas], inputs);
        Ok(self.graph.forward(&self.params, &x)?)
    }

    /// Absolute conductivity maps for a batch of voltage frames.
    pub fn reconstruct_batch(
        &self,
        frames: &[VoltageFrame],
    ) -> Result<Vec<ConductivityImage>, PhydnnError> {
        let n = self.config.grid_n;
        let mut out = Vec::with_capacity(frames.len());
        for chunk in frames.chunks(64) {
            let mut x = Vec::with_capacity(chunk.len() * self.config.n_meas);
            for f in chunk {
                self.normalize_into(f.values(), &mut x)?;
            }
            let (y, _) = self.forward_normalized(x, chunk.len())?;
            for img in y.data().chunks(n * n) {
                out.push(
                    ConductivityImage::new(n, img.iter().map(|v| v.as_f64()).collect())
                        .expect("n×n output"),
                );
            }
        }
        Ok(out)
    }
}

/// Single-frame reconstruction with its latency.
pub fn reconstruct<T: Scalar>(
    net: &ReconNet<T>,
    v_meas: &VoltageFrame,
) -> Result<Reconstruction, PhydnnError> {
    let start = Instant::now();
    let image = net
        .reconstruct_batch(std::slice::from_ref(v_meas))?
        .remove(0);
    Ok(Reconstruction {
        image,
        latency: start.elapsed(),
    })
}

/// `(L, L_data, L_phy)` with the gradient `∂L/∂σp`.
#[derive(Debug, Clone)]
pub struct CompositeLoss {
    pub total: f64,
    pub data: f64,
    pub phy: f64,
    /// `[batch × n²]`.
    pub grad_pred: Vec<f64>,
}

/// `L = α·mean‖σ − σp‖² + β·mean‖F̂(σp) − V_meas‖²`, means over pixels (or
/// channels) and batch. The surrogate is only read; its parameters get no
/// gradient. With `β = 0` the physics term is evaluated but not
/// differentiated.
pub fn composite_loss<T: Scalar>(
    sigma_true: &[f64],
    sigma_pred: &[T],
    v_meas: &[f64],
    batch: usize,
    surrogate: &ForwardNet<T>,
    alpha: f64,
    beta: f64,
) -> Result<CompositeLoss, PhydnnError> {
    let nn = surrogate.jacobian().cols();
    let nm = surrogate.n_meas();
    if sigma_true.len() != batch * nn
        || sigma_pred.len() != batch * nn
        || v_meas.len() != batch * nm
    {
        return Err(PhydnnError::Dimension(format!(
            "batch {batch}: σ {} / σp {} / V {} values",
            sigma_true.len(),
            sigma_pred.len(),
            v_meas.len()
        )));
    }
    let s0 = surrogate.sigma0().values();
    let mut delta = Vec::with_capacity(batch * nn);
    let mut grad_pred = Vec::with_capacity(batch * nn);
    let scale_d = 1.0 / (batch * nn) as f64;
    let mut data = 0.0;
    for (i, (p, t)) in sigma_pred.iter().zip(sigma_true).enumerate() {
        let p = p.as_f64();
        let r = p - t;
        data += r * r;
        grad_pred.push(alpha * 2.0 * scale_d * r);
        delta.push(T::from_f64(p - s0[i % nn]));
    }
    data *= scale_d;

    let pass = surrogate.forward_batch(&delta, batch, None)?;
    let scale_p = 1.0 / (batch * nm) as f64;
    let resid: Vec<f64> = pass.output.iter().zip(v_meas).map(|(f, v)| f - v).collect();
    let phy = resid.iter().map(|r| r * r).sum::<f64>() * scale_p;
    if !data.is_finite() || !phy.is_finite() {
        return Err(PhydnnError::NonFiniteLoss { data, phy });
    }
    if beta != 0.0 {
        let up: Vec<f64> = resid.iter().map(|r| 2.0 * scale_p * r).collect();
        let (_, d_delta) = surrogate.backward_batch(&pass, &up, false)?;
        for (g, d) in grad_pred.iter_mut().zip(d_delta) {
            *g += beta * d;
        }
    }
    Ok(CompositeLoss {
        total: alpha * data + beta * phy,
        data,
        phy,
        grad_pred,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck::rel_err;
    use crate::forward::{compute_jacobian, solve_forward, Mesh, Protocol};
    use crate::surrogate::build_forward_net;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn surrogate16() -> ForwardNet<f32> {
        let mesh = Mesh::with_default_width(16).unwrap();
        let proto = Protocol::new(3).unwrap();
        let s0 = ConductivityImage::uniform(16, 1.0);
        let j = compute_jacobian(&mesh, &s0, &proto).unwrap();
        let v0 = solve_forward(&mesh, &s0, &proto).unwrap();
        let mut net = build_forward_net(j, v0, 16, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        // give the correction branch a non-trivial output
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for t in net.params_mut().tensors_mut() {
            for v in t.data_mut() {
                *v += 0.05 * rng.random_range(-1.0f32..1.0);
            }
        }
        net
    }

    #[test]
    fn architecture_shapes() {
        for (n, depth) in [(32, 2), (80, 3)] {
            let cfg = ReconNetConfig::for_grid(n).with_base_channels(4);
            assert_eq!(cfg.depth, depth);
            let net: ReconNet<f32> = ReconNet::new(
                cfg,
                &VoltageFrame::new(vec![1.0; 208]),
                &mut ChaCha8Rng::seed_from_u64(0),
            )
            .unwrap();
            assert_eq!(net.graph().output_shape(), &[1, n, n]);
        }
        let bad = ReconNetConfig {
            grid_n: 18,
            n_meas: 208,
            base_channels: 4,
            depth: 2,
        };
        assert!(ReconNet::<f32>::new(
            bad,
            &VoltageFrame::new(vec![1.0; 208]),
            &mut ChaCha8Rng::seed_from_u64(0)
        )
        .is_err());
    }

    #[test]
    fn zero_input_gives_finite_output() {
        let cfg = ReconNetConfig::for_grid(16).with_base_channels(4);
        let v0 = VoltageFrame::new((0..208).map(|i| 0.1 + i as f64 * 1e-3).collect());
        let net: ReconNet<f32> =
            ReconNet::new(cfg, &v0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let r = reconstruct(&net, &VoltageFrame::new(vec![0.0; 208])).unwrap();
        assert!(r.image.is_finite());
        let base = reconstruct(&net, &v0).unwrap();
        // zero-change input leaves only the biases: the output starts near 1
        assert!(base.image.values().iter().all(|v| (v - 1.0).abs() < 0.5));
        assert!(reconstruct(&net, &VoltageFrame::new(vec![0.0; 207])).is_err());
    }

    #[test]
    fn loss_vanishes_at_consistent_prediction() {
        let sur = surrogate16();
        let sigma: Vec<f64> = (0..256)
            .map(|i| 1.0 - 0.4 * ((i / 16 > 5 && i / 16 < 10) as u8 as f64))
            .collect();
        let img = ConductivityImage::new(16, sigma.clone()).unwrap();
        let v = sur.predict(&img).unwrap();
        let pred: Vec<f32> = sigma.iter().map(|&v| v as f32).collect();
        let truth: Vec<f64> = pred.iter().map(|&v| v as f64).collect();
        let l = composite_loss(&truth, &pred, v.values(), 1, &sur, 1.0, 0.5).unwrap();
        assert_eq!(l.data, 0.0);
        assert!(l.phy < 1e-10, "{}", l.phy);
        assert!(l.total < 1e-10);
    }

    #[test]
    fn loss_decomposes_and_alpha_zero_is_physics_only() {
        let sur = surrogate16();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let batch = 3;
        let truth: Vec<f64> = (0..batch * 256)
            .map(|_| rng.random_range(0.2..1.0))
            .collect();
        let pred: Vec<f32> = (0..batch * 256)
            .map(|_| rng.random_range(0.2f32..1.0))
            .collect();
        let v: Vec<f64> = (0..batch)
            .flat_map(|_| sur.v0().values().to_vec())
            .collect();
        for (a, b) in [(1.0, 0.0029), (0.0, 0.7), (1.0, 0.0)] {
            let l = composite_loss(&truth, &pred, &v, batch, &sur, a, b).unwrap();
            assert_eq!(l.total, a * l.data + b * l.phy);
            if a == 0.0 {
                assert_eq!(l.total, b * l.phy);
            }
        }
        let l0 = composite_loss(&truth, &pred, &v, batch, &sur, 1.0, 0.0).unwrap();
        let ld = composite_loss(&truth, &pred, &v, batch, &sur, 1.0, 1e-3).unwrap();
        assert_eq!(l0.data, ld.data);
        assert_eq!(l0.phy, ld.phy);
        for (g, p) in l0
            .grad_pred
            .iter()
            .zip(&pred)
            .zip(&truth)
            .map(|((g, p), t)| (g, (*p as f64) - t))
        {
            assert_eq!(*g, 2.0 * (1.0 / (batch * 256) as f64) * p);
        }
    }

    #[test]
    fn physics_gradient_matches_finite_differences() {
        let sur: ForwardNet<f64> = surrogate16().cast();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let batch = 2;
        let truth: Vec<f64> = (0..batch * 256)
            .map(|_| rng.random_range(0.2..1.0))
            .collect();
        let pred: Vec<f64> = (0..batch * 256)
            .map(|_| rng.random_range(0.2..1.0))
            .collect();
        let v: Vec<f64> = (0..batch * 208)
            .map(|i| sur.v0().values()[i % 208] + rng.random_range(-0.01..0.01))
            .collect();
        let (alpha, beta) = (0.0, 1.0);
        let l = composite_loss(&truth, &pred, &v, batch, &sur, alpha, beta).unwrap();
        let h = 1e-6;
        let mut worst = 0.0f64;
        for _ in 0..40 {
            let i = rng.random_range(0..pred.len());
            let mut p = pred.clone();
            p[i] += h;
            let up = composite_loss(&truth, &p, &v, batch, &sur, alpha, beta)
                .unwrap()
                .total;
            p[i] -= 2.0 * h;
            let dn = composite_loss(&truth, &p, &v, batch, &sur, alpha, beta)
                .unwrap()
                .total;
            let fd = (up - dn) / (2.0 * h);
            // scale-free comparison against the largest gradient entry
            let scale = l.grad_pred.iter().fold(0.0f64, |m, g| m.max(g.abs()));
            worst = worst.max(rel_err(l.grad_pred[i] / scale, fd / scale));
        }
        assert!(worst < 1e-3, "max relative error {worst:e}");
    }

    #[test]
    fn loss_rejects_bad_shapes() {
        let sur = surrogate16();
        let err = composite_loss(&[0.0; 256], &[0.0f32; 255], &[0.0; 208], 1, &sur, 1.0, 0.0)
            .unwrap_err();
        assert!(matches!(err, PhydnnError::Dimension(_)));
    }
}
