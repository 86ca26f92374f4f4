use std::io::Write;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{composite_loss, PhydnnError, ReconNet};
use crate::autodiff::{adam_step, AdamConfig, AdamState, Tensor};
use crate::phantom::Dataset;
use crate::surrogate::ForwardNet;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub alpha: f64,
    pub beta: f64,
    /// Epochs during which `L_phy` is logged but not backpropagated.
    pub warmup_epochs: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub seed: u64,
    /// Held-out fraction of the training set.
    pub val_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 0.0029,
            warmup_epochs: 30,
            epochs: 100,
            lr: 1e-3,
            batch: 32,
            seed: 0,
            val_fraction: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), PhydnnError> {
        let ok = self.alpha >= 0.0
            && self.beta >= 0.0
            && self.alpha.is_finite()
            && self.beta.is_finite()
            && self.warmup_epochs <= self.epochs
            && self.lr > 0.0
            && self.batch >= 1
            && (0.0..1.0).contains(&self.val_fraction);
        if ok {
            Ok(())
        } else {
            Err(PhydnnError::InvalidConfig(format!("{self:?}")))
        }
    }
}

/// Per-epoch losses. Training values are means over the epoch's minibatches
/// taken before each update; validation values follow the epoch.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainHistory {
    pub beta: f64,
    pub l_data_train: Vec<f64>,
    pub l_phy_train: Vec<f64>,
    pub l_data_val: Vec<f64>,
    pub l_phy_val: Vec<f64>,
    /// Parameter digest after each epoch.
    pub digest: Vec<u64>,
}

impl TrainHistory {
    pub fn len(&self) -> usize {
        self.l_data_train.len()
    }

    pub fn is_empty(&self) -> bool {
        self.l_data_train.is_empty()
    }
}

struct Prepared {
    inputs: Vec<f32>,
    sigma: Vec<f64>,
    v_meas: Vec<f64>,
}

impl Prepared {
    fn gather(&self, idx: &[usize], nn: usize, nm: usize) -> (Vec<f32>, Vec<f64>, Vec<f64>) {
        let mut x = Vec::with_capacity(idx.len() * nm);
        let mut s = Vec::with_capacity(idx.len() * nn);
        let mut v = Vec::with_capacity(idx.len() * nm);
        for &i in idx {
            x.extend_from_slice(&self.inputs[i * nm..(i + 1) * nm]);
            s.extend_from_slice(&self.sigma[i * nn..(i + 1) * nn]);
            v.extend_from_slice(&self.v_meas[i * nm..(i + 1) * nm]);
        }
        (x, s, v)
    }
}

/// A resumable training run. Cloning it through [`Trainer::fork`] during the
/// warm-up gives runs whose trajectories coincide bitwise up to that point.
#[derive(Clone)]
pub struct Trainer<'a> {
    surrogate: &'a ForwardNet<f32>,
    data: Arc<Prepared>,
    train_idx: Vec<usize>,
    val_idx: Vec<usize>,
    net: ReconNet<f32>,
    adam: AdamState<f32>,
    rng: ChaCha8Rng,
    config: TrainConfig,
    history: TrainHistory,
    epoch: usize,
}

impl<'a> Trainer<'a> {
    pub fn new(
        net: ReconNet<f32>,
        dataset: &Dataset,
        config: TrainConfig,
        surrogate: &'a ForwardNet<f32>,
    ) -> Result<Self, PhydnnError> {
        config.validate()?;
        let n = net.config().grid_n;
        if surrogate.grid_n() != n || dataset.grid_n != n {
            return Err(PhydnnError::SurrogateMismatch(format!(
                "grids: network {n}, surrogate {}, dataset {}",
                surrogate.grid_n(),
                dataset.grid_n
            )));
        }
        if surrogate.n_meas() != net.config().n_meas {
            return Err(PhydnnError::SurrogateMismatch(format!(
                "measurements: network {}, surrogate {}",
                net.config().n_meas,
                surrogate.n_meas()
            )));
        }
        if dataset.len() < 2 {
            return Err(PhydnnError::InvalidConfig(
                "training needs at least two samples".into(),
            ));
        }
        let mut inputs = Vec::with_capacity(dataset.len() * surrogate.n_meas());
        let mut v_meas = Vec::with_capacity(dataset.len() * surrogate.n_meas());
        let mut sigma = Vec::with_capacity(dataset.len() * n * n);
        for (s, v) in dataset.sigmas.iter().zip(&dataset.voltages) {
            net.normalize_into(v.values(), &mut inputs)?;
            v_meas.extend_from_slice(v.values());
            sigma.extend_from_slice(s.values());
        }

        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        order.shuffle(&mut rng);
        let n_val =
            ((dataset.len() as f64 * config.val_fraction).round() as usize).min(dataset.len() - 1);
        let mut val_idx = order[..n_val].to_vec();
        let mut train_idx = order[n_val..].to_vec();
        val_idx.sort_unstable();
        train_idx.sort_unstable();

        Ok(Self {
            surrogate,
            data: Arc::new(Prepared {
                inputs,
                sigma,
                v_meas,
            }),
            train_idx,
            val_idx,
            adam: AdamState::new(net.params()),
            net,
            rng,
            history: TrainHistory {
                beta: config.beta,
                ..TrainHistory::default()
            },
            config,
            epoch: 0,
        })
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn net(&self) -> &ReconNet<f32> {
        &self.net
    }

    pub fn history(&self) -> &TrainHistory {
        &self.history
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    /// Copy of this run continuing with a different β. Only allowed while
    /// the physics term has not yet entered any update.
    pub fn fork(&self, beta: f64) -> Result<Self, PhydnnError> {
        if self.epoch > self.config.warmup_epochs {
            return Err(PhydnnError::InvalidConfig(format!(
                "cannot change beta after epoch {} (warm-up ends at {})",
                self.epoch, self.config.warmup_epochs
            )));
        }
        let mut t = self.clone();
        t.config.beta = beta;
        t.config.validate()?;
        t.history.beta = beta;
        Ok(t)
    }

    fn beta_now(&self) -> f64 {
        if self.epoch < self.config.warmup_epochs {
            0.0
        } else {
            self.config.beta
        }
    }

    pub fn step_epoch(&mut self) -> Result<(), PhydnnError> {
        let (nn, nm) = (self.surrogate.jacobian().cols(), self.surrogate.n_meas());
        let n = self.net.config().grid_n;
        let beta = self.beta_now();
        let adam_cfg = AdamConfig::with_lr(self.config.lr);
        self.train_idx.shuffle(&mut self.rng);
        let batches: Vec<Vec<usize>> = self
            .train_idx
            .chunks(self.config.batch)
            .map(<[usize]>::to_vec)
            .collect();
        let (mut acc_d, mut acc_p) = (0.0, 0.0);
        for chunk in &batches {
            let b = chunk.len();
            let (x, s, v) = self.data.gather(chunk, nn, nm);
            let (pred, tape) = self.net.forward_normalized(x, b)?;
            let loss = composite_loss(
                &s,
                pred.data(),
                &v,
                b,
                self.surrogate,
                self.config.alpha,
                beta,
            )
            .map_err(|e| self.diverged(e))?;
            acc_d += loss.data * b as f64;
            acc_p += loss.phy * b as f64;
            let up = Tensor::new(
                vec![b, 1, n, n],
                loss.grad_pred.iter().map(|&g| g as f32).collect(),
            );
            let grads = self.net.graph().backward(self.net.params(), &tape, &up)?;
            adam_step(
                self.net.params_mut(),
                &grads.params,
                &mut self.adam,
                &adam_cfg,
            )?;
        }
        let count = self.train_idx.len() as f64;
        let (ld, lp) = (acc_d / count, acc_p / count);
        if !(ld.is_finite() && lp.is_finite()) {
            return Err(PhydnnError::Divergence {
                epoch: self.epoch,
                loss: ld + lp,
            });
        }
        let (vd, vp) = self.validation_losses()?;
        self.history.l_data_train.push(ld);
        self.history.l_phy_train.push(lp);
        self.history.l_data_val.push(vd);
        self.history.l_phy_val.push(vp);
        self.history.digest.push(self.net.params().digest());
        log::debug!(
            "phydnn beta {} epoch {}: L_data {ld:.4e}/{vd:.4e} L_phy {lp:.4e}/{vp:.4e}",
            self.config.beta,
            self.epoch
        );
        self.epoch += 1;
        Ok(())
    }

    fn diverged(&self, e: PhydnnError) -> PhydnnError {
        match e {
            PhydnnError::NonFiniteLoss { data, phy } => PhydnnError::Divergence {
                epoch: self.epoch,
                loss: data + phy,
            },
            other => other,
        }
    }

    /// Mean `(L_data, L_phy)` over the validation samples; NaN without any.
    fn validation_losses(&self) -> Result<(f64, f64), PhydnnError> {
        if self.val_idx.is_empty() {
            return Ok((f64::NAN, f64::NAN));
        }
        let (nn, nm) = (self.surrogate.jacobian().cols(), self.surrogate.n_meas());
        let (mut d, mut p) = (0.0, 0.0);
        for chunk in self.val_idx.chunks(64) {
            let (x, s, v) = self.data.gather(chunk, nn, nm);
            let (pred, _) = self.net.forward_normalized(x, chunk.len())?;
            let l = composite_loss(&s, pred.data(), &v, chunk.len(), self.surrogate, 1.0, 0.0)
                .map_err(|e| self.diverged(e))?;
            d += l.data * chunk.len() as f64;
            p += l.phy * chunk.len() as f64;
        }
        let k = self.val_idx.len() as f64;
        Ok((d / k, p / k))
    }

    pub fn run_to(&mut self, epoch: usize) -> Result<(), PhydnnError> {
        while self.epoch < epoch.min(self.config.epochs) {
            self.step_epoch()?;
        }
        Ok(())
    }

    /// Runs the remaining epochs.
    pub fn finish(mut self) -> Result<(ReconNet<f32>, TrainHistory), PhydnnError> {
        let total = self.config.epochs;
        self.run_to(total)?;
        Ok((self.net, self.history))
    }
}

/// Trains `net` on `dataset` with the surrogate held fixed.
pub fn train(
    net: ReconNet<f32>,
    dataset: &Dataset,
    config: &TrainConfig,
    surrogate: &ForwardNet<f32>,
) -> Result<(ReconNet<f32>, TrainHistory), PhydnnError> {
    Trainer::new(net, dataset, config.clone(), surrogate)?.finish()
}

/// Outcome of [`train_paired`].
#[derive(Debug, Clone)]
pub struct PairedRun {
    pub dnn: ReconNet<f32>,
    pub phydnn: ReconNet<f32>,
    pub dnn_history: TrainHistory,
    pub phydnn_history: TrainHistory,
    /// [`physics_loss_gap`] of the validation physics losses.
    pub gap_percent: Vec<f64>,
}

/// The β = 0 ablation and the β = `config.beta` model from one shared
/// warm-up.
pub fn train_paired(
    net: ReconNet<f32>,
    dataset: &Dataset,
    config: &TrainConfig,
    surrogate: &ForwardNet<f32>,
) -> Result<PairedRun, PhydnnError> {
    let mut base = Trainer::new(net, dataset, config.clone(), surrogate)?;
    base.run_to(config.warmup_epochs)?;
    let (phydnn, phydnn_history) = base.fork(config.beta)?.finish()?;
    let (dnn, dnn_history) = base.fork(0.0)?.finish()?;
    let gap_percent = physics_loss_gap(&dnn_history, &phydnn_history)?;
    Ok(PairedRun {
        dnn,
        phydnn,
        dnn_history,
        phydnn_history,
        gap_percent,
    })
}

/// `(L_phy^DNN − L_phy^PhyDNN) / L_phy^DNN × 100` per epoch, on validation
/// physics losses, with the denominator floored at `1e-12`.
pub fn physics_loss_gap(
    dnn: &TrainHistory,
    phydnn: &TrainHistory,
) -> Result<Vec<f64>, PhydnnError> {
    if dnn.l_phy_val.len() != phydnn.l_phy_val.len() {
        return Err(PhydnnError::Dimension(format!(
            "histories have {} and {} epochs",
            dnn.l_phy_val.len(),
            phydnn.l_phy_val.len()
        )));
    }
    Ok(dnn
        .l_phy_val
        .iter()
        .zip(&phydnn.l_phy_val)
        .map(|(a, b)| (a - b) / a.max(1e-12) * 100.0)
        .collect())
}

pub fn write_history_csv<W: Write>(out: W, h: &TrainHistory) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "epoch",
        "l_data_train",
        "l_data_val",
        "l_phy_train",
        "l_phy_val",
    ])?;
    for e in 0..h.len() {
        w.write_record(&[
            e.to_string(),
            h.l_data_train[e].to_string(),
            h.l_data_val[e].to_string(),
            h.l_phy_train[e].to_string(),
            h.l_phy_val[e].to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
