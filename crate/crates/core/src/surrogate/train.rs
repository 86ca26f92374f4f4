use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{ForwardNet, SurrogateError};
use crate::autodiff::{adam_step, AdamConfig, AdamState};
use crate::forward::{ConductivityImage, VoltageFrame};
use crate::phantom::Dataset;

#[derive(Debug, Clone, PartialEq)]
pub struct SurrogateTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub seed: u64,
    /// Held-out fraction of the training pairs used for validation.
    pub val_fraction: f64,
}

impl Default for SurrogateTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            lr: 1e-3,
            batch: 32,
            seed: 0,
            val_fraction: 0.1,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SurrogateHistory {
    /// Mean over the epoch's minibatches, before each update.
    pub train_mse: Vec<f64>,
    /// Empty when no validation pairs were held out.
    pub val_mse: Vec<f64>,
    pub gamma: Vec<f64>,
}

struct Prepared {
    deltas: Vec<f32>,
    linear: Vec<f64>,
    targets: Vec<f64>,
}

fn prepare(
    net: &ForwardNet<f32>,
    sigmas: &[ConductivityImage],
    targets: &[VoltageFrame],
) -> Result<Prepared, SurrogateError> {
    let nn = net.jacobian().cols();
    let nm = net.n_meas();
    let mut d64 = Vec::with_capacity(sigmas.len() * nn);
    for s in sigmas {
        if s.values().len() != nn {
            return Err(SurrogateError::Dimension(format!(
                "image has {} pixels, expected {nn}",
                s.values().len()
            )));
        }
        d64.extend(
            s.values()
                .iter()
                .zip(net.sigma0().values())
                .map(|(a, b)| a - b),
        );
    }
    let mut t = Vec::with_capacity(targets.len() * nm);
    for v in targets {
        if v.len() != nm {
            return Err(SurrogateError::Dimension(format!(
                "frame has {} values, expected {nm}",
                v.len()
            )));
        }
        t.extend_from_slice(v.values());
    }
    Ok(Prepared {
        linear: net.linear_batch(&d64, sigmas.len()),
        deltas: d64.iter().map(|&v| v as f32).collect(),
        targets: t,
    })
}

impl Prepared {
    fn gather(&self, idx: &[usize], nn: usize, nm: usize) -> (Vec<f32>, Vec<f64>, Vec<f64>) {
        let mut d = Vec::with_capacity(idx.len() * nn);
        let mut l = Vec::with_capacity(idx.len() * nm);
        let mut t = Vec::with_capacity(idx.len() * nm);
        for &i in idx {
            d.extend_from_slice(&self.deltas[i * nn..(i + 1) * nn]);
            l.extend_from_slice(&self.linear[i * nm..(i + 1) * nm]);
            t.extend_from_slice(&self.targets[i * nm..(i + 1) * nm]);
        }
        (d, l, t)
    }
}

fn mse_of(pred: &[f64], target: &[f64]) -> f64 {
    pred.iter()
        .zip(target)
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        / pred.len() as f64
}

fn evaluate(
    net: &ForwardNet<f32>,
    data: &Prepared,
    idx: &[usize],
    batch: usize,
) -> Result<f64, SurrogateError> {
    let (nn, nm) = (net.jacobian().cols(), net.n_meas());
    let mut acc = 0.0;
    for chunk in idx.chunks(batch) {
        let (d, l, t) = data.gather(chunk, nn, nm);
        let pass = net.forward_batch(&d, chunk.len(), Some(l))?;
        acc += mse_of(&pass.output, &t) * chunk.len() as f64;
    }
    Ok(acc / idx.len() as f64)
}

/// Fits the correction branch and γ to clean (σ, V) pairs by minimising
/// `mean ‖F̂(σ) − V‖² / n_meas` with Adam. `J` and `V₀` are not touched.
pub fn train_forward_net(
    net: &mut ForwardNet<f32>,
    dataset: &Dataset,
    cfg: &SurrogateTrainConfig,
) -> Result<SurrogateHistory, SurrogateError> {
    if dataset.is_empty() {
        return Err(SurrogateError::Dimension("empty training set".into()));
    }
    let data = prepare(net, &dataset.sigmas, &dataset.clean_voltages)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut rng);
    let n_val = (dataset.len() as f64 * cfg.val_fraction).round() as usize;
    let n_val = n_val.min(dataset.len() - 1);
    let val: Vec<usize> = order[..n_val].to_vec();
    let mut train: Vec<usize> = order[n_val..].to_vec();
    train.sort_unstable();

    let (nn, nm) = (net.jacobian().cols(), net.n_meas());
    let adam = AdamConfig::with_lr(cfg.lr);
    let mut state = AdamState::new(net.params());
    let mut hist = SurrogateHistory::default();
    for epoch in 0..cfg.epochs {
        train.shuffle(&mut rng);
        let mut acc = 0.0;
        for chunk in train.chunks(cfg.batch.max(1)) {
            let b = chunk.len();
            let (d, l, t) = data.gather(chunk, nn, nm);
            let pass = net.forward_batch(&d, b, Some(l))?;
            let loss = mse_of(&pass.output, &t);
            if !loss.is_finite() {
                return Err(SurrogateError::Divergence { epoch, loss });
            }
            acc += loss * b as f64;
            let scale = 2.0 / (b * nm) as f64;
            let up: Vec<f64> = pass
                .output
                .iter()
                .zip(&t)
                .map(|(p, y)| scale * (p - y))
                .collect();
            let (grads, _) = net.backward_batch(&pass, &up, true)?;
            adam_step(net.params_mut(), &grads, &mut state, &adam)?;
        }
        let train_mse = acc / train.len() as f64;
        if !train_mse.is_finite() {
            return Err(SurrogateError::Divergence {
                epoch,
                loss: train_mse,
            });
        }
        hist.train_mse.push(train_mse);
        if !val.is_empty() {
            hist.val_mse
                .push(evaluate(net, &data, &val, cfg.batch.max(1))?);
        }
        hist.gamma.push(net.gamma());
        log::debug!(
            "surrogate epoch {epoch}: train {train_mse:.4e} gamma {:.4}",
            net.gamma()
        );
    }
    Ok(hist)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ForwardEvalReport {
    pub mse_learned: f64,
    pub r_learned: f64,
    pub mse_linear: f64,
    pub r_linear: f64,
    pub samples: usize,
}

/// Pearson correlation of two equal-length vectors; 0 if either is constant.
pub(crate) fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        0.0
    } else {
        sab / (saa * sbb).sqrt()
    }
}

/// Compares the surrogate and the linear model `V₀ + J·δ` against clean test
/// voltages: per-sample MSE averaged, and Pearson R over all voltages
/// concatenated.
pub fn eval_forward_net(
    net: &ForwardNet<f32>,
    testset: &Dataset,
) -> Result<ForwardEvalReport, SurrogateError> {
    if testset.is_empty() {
        return Err(SurrogateError::EmptyTestSet);
    }
    let data = prepare(net, &testset.sigmas, &testset.clean_voltages)?;
    let (nn, nm) = (net.jacobian().cols(), net.n_meas());
    let idx: Vec<usize> = (0..testset.len()).collect();
    let mut learned = Vec::with_capacity(idx.len() * nm);
    for chunk in idx.chunks(64) {
        let (d, l, _) = data.gather(chunk, nn, nm);
        learned.extend(net.forward_batch(&d, chunk.len(), Some(l))?.output);
    }
    let per_sample = |pred: &[f64]| -> f64 {
        pred.chunks(nm)
            .zip(data.targets.chunks(nm))
            .map(|(p, t)| mse_of(p, t))
            .sum::<f64>()
            / testset.len() as f64
    };
    Ok(ForwardEvalReport {
        mse_learned: per_sample(&learned),
        r_learned: pearson(&learned, &data.targets),
        mse_linear: per_sample(&data.linear),
        r_linear: pearson(&data.linear, &data.targets),
        samples: testset.len(),
    })
}

/// Surrogate MSE on explicit pairs.
pub fn pair_mse(
    net: &ForwardNet<f32>,
    sigmas: &[ConductivityImage],
    targets: &[VoltageFrame],
) -> Result<f64, SurrogateError> {
    let data = prepare(net, sigmas, targets)?;
    let idx: Vec<usize> = (0..sigmas.len()).collect();
    evaluate(net, &data, &idx, 64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::{compute_jacobian, solve_forward, Mesh, Protocol};
    use crate::phantom::{generate_dataset, DatasetConfig};
    use crate::surrogate::{CnnHead, ForwardNetConfig};

    fn setup(count: usize) -> (ForwardNet<f32>, Dataset) {
        let mesh = Mesh::with_default_width(16).unwrap();
        let proto = Protocol::new(3).unwrap();
        let s0 = ConductivityImage::uniform(16, 1.0);
        let j = compute_jacobian(&mesh, &s0, &proto).unwrap();
        let v0 = solve_forward(&mesh, &s0, &proto).unwrap();
        let cfg = ForwardNetConfig {
            channels: [4, 8, 8],
            head: CnnHead::GlobalMean,
        };
        let net = ForwardNet::new(j, v0, 16, cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let ds = generate_dataset(&DatasetConfig::train(count, 3), &mesh, &proto).unwrap();
        (net, ds)
    }

    #[test]
    fn memorises_one_sample() {
        let (mut net, ds) = setup(1);
        let one = ds.subset(&[0; 32]);
        let cfg = SurrogateTrainConfig {
            epochs: 200,
            lr: 1e-3,
            batch: 32,
            seed: 0,
            val_fraction: 0.0,
        };
        let hist = train_forward_net(&mut net, &one, &cfg).unwrap();
        let mse = pair_mse(&net, &one.sigmas[..1], &one.clean_voltages[..1]).unwrap();
        assert!(
            mse < 1e-6,
            "final {mse}, history tail {:?}",
            &hist.train_mse[190..]
        );
    }

    #[test]
    fn physics_branch_frozen_and_gamma_one_matches_linear() {
        let (mut net, ds) = setup(24);
        let j_before = net.jacobian().clone();
        let v0_before = net.v0().clone();
        let cfg = SurrogateTrainConfig {
            epochs: 2,
            batch: 8,
            ..Default::default()
        };
        let hist = train_forward_net(&mut net, &ds, &cfg).unwrap();
        assert_eq!(hist.train_mse.len(), 2);
        assert_eq!(hist.val_mse.len(), 2);
        assert_eq!(net.jacobian(), &j_before);
        assert_eq!(net.v0(), &v0_before);
        net.set_gamma(1.0);
        let r = eval_forward_net(&net, &ds).unwrap();
        assert_eq!(r.mse_learned, r.mse_linear);
        assert_eq!(r.r_learned, r.r_linear);
    }

    #[test]
    fn empty_testset_rejected() {
        let (net, ds) = setup(2);
        let empty = ds.subset(&[]);
        assert!(matches!(
            eval_forward_net(&net, &empty),
            Err(SurrogateError::EmptyTestSet)
        ));
    }

    #[test]
    fn pearson_of_identical_is_one() {
        let a = [1.0, 2.0, 4.0, 3.0];
        assert!((pearson(&a, &a) - 1.0).abs() < 1e-15);
        assert_eq!(pearson(&a, &[1.0; 4]), 0.0);
    }
}
