use super::{PhydnnError, ReconNet, TrainConfig, TrainHistory, Trainer};
use crate::metrics::{evaluate, summarize, MetricsReport, MetricsSummary};
use crate::phantom::Dataset;
use crate::surrogate::ForwardNet;

/// `count` values `10^e` with `e` evenly spaced over `[lo_exp, hi_exp]`.
pub fn log_spaced(lo_exp: f64, hi_exp: f64, count: usize) -> Vec<f64> {
    match count {
        0 => Vec::new(),
        1 => vec![10f64.powf(lo_exp)],
        _ => (0..count)
            .map(|k| 10f64.powf(lo_exp + (hi_exp - lo_exp) * k as f64 / (count - 1) as f64))
            .collect(),
    }
}

/// Metrics of `net` on every test sample, absolute maps against truth.
pub fn evaluate_recon(
    net: &ReconNet<f32>,
    testset: &Dataset,
) -> Result<(Vec<MetricsReport>, MetricsSummary), PhydnnError> {
    let images = net.reconstruct_batch(&testset.voltages)?;
    let reports = images
        .iter()
        .zip(&testset.sigmas)
        .map(|(est, gt)| evaluate(est, gt))
        .collect::<Result<Vec<_>, _>>()?;
    let summary = summarize(&reports);
    Ok((reports, summary))
}

#[derive(Debug, Clone)]
pub struct BetaRow {
    pub beta: f64,
    pub summary: MetricsSummary,
    pub history: TrainHistory,
    pub net: ReconNet<f32>,
}

#[derive(Debug, Clone)]
pub struct BetaSearch {
    pub rows: Vec<BetaRow>,
    /// Row with the highest mean score.
    pub best: usize,
}

impl BetaSearch {
    pub fn best_row(&self) -> &BetaRow {
        &self.rows[self.best]
    }

    pub fn row_for(&self, beta: f64) -> Option<&BetaRow> {
        self.rows.iter().find(|r| r.beta == beta)
    }
}

/// Trains one model per β from the same initial network and seed and scores
/// each on `testset`. The warm-up is run once and forked, which yields the
/// same models as independent runs because β does not enter the warm-up.
pub fn grid_search_beta(
    betas: &[f64],
    net: &ReconNet<f32>,
    dataset: &Dataset,
    testset: &Dataset,
    config: &TrainConfig,
    surrogate: &ForwardNet<f32>,
) -> Result<BetaSearch, PhydnnError> {
    if betas.is_empty() {
        return Err(PhydnnError::InvalidConfig("no beta values given".into()));
    }
    if let Some(b) = betas.iter().find(|b| !(**b >= 0.0) || !b.is_finite()) {
        return Err(PhydnnError::InvalidConfig(format!(
            "beta {b} is not a non-negative number"
        )));
    }
    let mut base = Trainer::new(net.clone(), dataset, config.clone(), surrogate)?;
    base.run_to(config.warmup_epochs)?;
    let mut rows = Vec::with_capacity(betas.len());
    for &beta in betas {
        let annotate = |e: PhydnnError| PhydnnError::Beta {
            beta,
            source: Box::new(e),
        };
        let (trained, history) = base
            .fork(beta)
            .and_then(Trainer::finish)
            .map_err(annotate)?;
        let (_, summary) = evaluate_recon(&trained, testset).map_err(annotate)?;
        log::info!("beta {beta:.4e}: mean S {:.4}", summary.score_s);
        rows.push(BetaRow {
            beta,
            summary,
            history,
            net: trained,
        });
    }
    let best = rows
        .iter()
        .enumerate()
        .filter(|(_, r)| r.summary.score_s.is_finite())
        .max_by(|a, b| a.1.summary.score_s.total_cmp(&b.1.summary.score_s))
        .map(|(i, _)| i)
        .unwrap_or(0);
    Ok(BetaSearch { rows, best })
}

#[cfg(test)]
mod tests {
    use super::super::ReconNetConfig;
    use super::*;

    #[test]
    fn log_grid_endpoints() {
        let b = log_spaced(-4.0, -0.301, 9);
        assert_eq!(b.len(), 9);
        assert!((b[0] - 1e-4).abs() < 1e-18);
        assert!((b[8] - 0.5).abs() < 1e-3);
        for w in b.windows(2) {
            assert!(w[1] > w[0]);
        }
        assert!(log_spaced(0.0, 1.0, 0).is_empty());
    }

    #[test]
    fn rejects_bad_betas() {
        use crate::forward::{compute_jacobian, solve_forward, ConductivityImage, Mesh, Protocol};
        use crate::phantom::{generate_dataset, DatasetConfig};
        use rand::SeedableRng;
        let mesh = Mesh::with_default_width(16).unwrap();
        let proto = Protocol::new(3).unwrap();
        let s0 = ConductivityImage::uniform(16, 1.0);
        let j = compute_jacobian(&mesh, &s0, &proto).unwrap();
        let v0 = solve_forward(&mesh, &s0, &proto).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let sur = crate::surrogate::build_forward_net(j, v0.clone(), 16, &mut rng).unwrap();
        let net = ReconNet::new(
            ReconNetConfig::for_grid(16).with_base_channels(2),
            &v0,
            &mut rng,
        )
        .unwrap();
        let data = generate_dataset(&DatasetConfig::train(4, 0), &mesh, &proto).unwrap();
        let cfg = TrainConfig {
            epochs: 1,
            warmup_epochs: 0,
            ..TrainConfig::default()
        };
        assert!(grid_search_beta(&[], &net, &data, &data, &cfg, &sur).is_err());
        assert!(grid_search_beta(&[-1.0], &net, &data, &data, &cfg, &sur).is_err());
        let single = grid_search_beta(&[0.0], &net, &data, &data, &cfg, &sur).unwrap();
        assert_eq!(single.rows.len(), 1);
        assert_eq!(single.best, 0);
        let (_, direct) = evaluate_recon(&single.rows[0].net, &data).unwrap();
        assert_eq!(direct, single.rows[0].summary);
    }
}
