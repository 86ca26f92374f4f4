//! Classical difference-imaging baselines: one-step NOSER and isotropic TV.

mod noser;
mod tv;

pub use noser::{noser, NoserOperator};
pub use tv::{
    tv_objective, tv_reconstruct, tv_reconstruct_report, tv_seminorm, TvReport, INNER_TOL,
};

use thiserror::Error;

use crate::forward::{ConductivityImage, ForwardError};

#[derive(Debug, Error)]
pub enum ReconError {
    #[error("singular system: {0}")]
    Singular(String),
    #[error("inner solver failed: {0}")]
    InnerSolver(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("invalid reconstruction settings: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Forward(#[from] ForwardError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReconConfig {
    pub lambda_noser: f64,
    pub lambda_tv: f64,
    pub tv_iters: usize,
    pub tv_eps: f64,
}

impl Default for ReconConfig {
    fn default() -> Self {
        Self {
            lambda_noser: 1e-2,
            lambda_tv: 1e-3,
            tv_iters: 50,
            tv_eps: 1e-6,
        }
    }
}

impl ReconConfig {
    pub fn validate(&self) -> Result<(), ReconError> {
        let ok = self.lambda_noser > 0.0
            && self.lambda_tv > 0.0
            && self.tv_eps > 0.0
            && self.tv_iters >= 1;
        if ok {
            Ok(())
        } else {
            Err(ReconError::InvalidConfig(format!("{self:?}")))
        }
    }
}

/// Centre of mass, in unit-square coordinates `(x, y)`, of the pixels whose
/// `|Δσ|` is at least `frac` of the maximum, weighted by `|Δσ|`.
pub fn center_of_mass(delta: &ConductivityImage, frac: f64) -> Option<(f64, f64)> {
    let n = delta.grid_n();
    let peak = delta.values().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak == 0.0 {
        return None;
    }
    let (mut sw, mut sx, mut sy) = (0.0, 0.0, 0.0);
    for r in 0..n {
        for c in 0..n {
            let v = delta.get(r, c).abs();
            if v >= frac * peak {
                sw += v;
                sx += v * (c as f64 + 0.5) / n as f64;
                sy += v * (r as f64 + 0.5) / n as f64;
            }
        }
    }
    Some((sx / sw, sy / sw))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::{
        compute_jacobian, solve_forward, Mesh, Protocol, SensitivityMatrix, VoltageFrame,
    };
    use crate::phantom::{Circle, Geometry, ShapeClass, ShapeSpec};
    use proptest::prelude::*;
    use std::sync::OnceLock;

    struct Fixture {
        j: SensitivityMatrix,
        v0: VoltageFrame,
        mesh: Mesh,
        proto: Protocol,
    }

    fn fixture(n: usize) -> Fixture {
        let mesh = Mesh::with_default_width(n).unwrap();
        let proto = Protocol::new(3).unwrap();
        let s0 = ConductivityImage::uniform(n, 1.0);
        Fixture {
            j: compute_jacobian(&mesh, &s0, &proto).unwrap(),
            v0: solve_forward(&mesh, &s0, &proto).unwrap(),
            mesh,
            proto,
        }
    }

    fn small() -> &'static Fixture {
        static F: OnceLock<Fixture> = OnceLock::new();
        F.get_or_init(|| fixture(16))
    }

    fn desk() -> &'static Fixture {
        static F: OnceLock<Fixture> = OnceLock::new();
        F.get_or_init(|| fixture(32))
    }

    const CENTER: (f64, f64) = (0.36, 0.62);

    fn circle_case(f: &Fixture) -> (ConductivityImage, VoltageFrame) {
        let n = f.mesh.grid_n();
        let spec = ShapeSpec {
            class: ShapeClass::SingleCircle,
            geometry: Geometry::Circle(Circle {
                cx: CENTER.0,
                cy: CENTER.1,
                r: 0.15,
            }),
            conductivity: 0.5,
        };
        let sigma = spec.rasterize(n);
        let v = solve_forward(&f.mesh, &sigma, &f.proto).unwrap();
        (sigma, v.sub(&f.v0))
    }

    #[test]
    fn noser_zero_in_zero_out() {
        let f = small();
        let d = noser(&f.j, &VoltageFrame::new(vec![0.0; 208]), 1e-2).unwrap();
        assert!(d.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn noser_rejects_bad_lambda() {
        let f = small();
        assert!(matches!(
            NoserOperator::new(&f.j, 0.0),
            Err(ReconError::InvalidConfig(_))
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn noser_is_linear(a in -3.0f64..3.0, b in -3.0f64..3.0, seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let f = small();
            let op = NoserOperator::new(&f.j, 1e-2).unwrap();
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let d1 = VoltageFrame::new((0..208).map(|_| rng.random_range(-0.1..0.1)).collect());
            let d2 = VoltageFrame::new((0..208).map(|_| rng.random_range(-0.1..0.1)).collect());
            let mix = VoltageFrame::new(d1.values().iter().zip(d2.values()).map(|(x, y)| a * x + b * y).collect());
            let lhs = op.apply(&mix).unwrap();
            let r1 = op.apply(&d1).unwrap();
            let r2 = op.apply(&d2).unwrap();
            let rhs: Vec<f64> = r1.values().iter().zip(r2.values()).map(|(x, y)| a * x + b * y).collect();
            let scale = rhs.iter().chain(lhs.values()).fold(0.0f64, |m, v| m.max(v.abs()));
            for (p, q) in lhs.values().iter().zip(&rhs) {
                prop_assert!((p - q).abs() <= 1e-8 * scale);
            }
        }
    }

    #[test]
    fn tv_zero_in_zero_out() {
        let f = small();
        let r =
            tv_reconstruct_report(&f.j, &VoltageFrame::new(vec![0.0; 208]), 1e-3, 5, 1e-6).unwrap();
        assert!(r.delta.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn tv_objective_monotone_and_inner_tolerance() {
        let f = desk();
        let (_, dv) = circle_case(f);
        let r = tv_reconstruct_report(&f.j, &dv, 1e-3, 50, 1e-6).unwrap();
        assert_eq!(r.objective.len(), 51);
        for w in r.objective.windows(2) {
            assert!(w[1] <= w[0] + 1e-10, "{} > {}", w[1], w[0]);
        }
        assert!(r.inner_residual.iter().all(|&v| v <= INNER_TOL));
    }

    #[test]
    fn both_baselines_localise_a_circle() {
        let f = desk();
        let (_, dv) = circle_case(f);
        let cfg = ReconConfig::default();
        for (name, d) in [
            ("noser", noser(&f.j, &dv, cfg.lambda_noser).unwrap()),
            (
                "tv",
                tv_reconstruct(&f.j, &dv, cfg.lambda_tv, cfg.tv_iters, cfg.tv_eps).unwrap(),
            ),
        ] {
            let (x, y) = center_of_mass(&d, 0.5).unwrap();
            let err = ((x - CENTER.0).powi(2) + (y - CENTER.1).powi(2)).sqrt();
            assert!(err < 0.1, "{name}: centre ({x:.3}, {y:.3}) error {err:.3}");
        }
    }

    /// Mean gradient magnitude over pixels more than two pixels from the
    /// true inclusion boundary.
    fn off_edge_gradient(d: &ConductivityImage, truth: &ConductivityImage) -> f64 {
        let n = d.grid_n();
        let near_edge = |r: usize, c: usize| {
            let v = truth.get(r, c);
            for rr in r.saturating_sub(2)..=(r + 2).min(n - 1) {
                for cc in c.saturating_sub(2)..=(c + 2).min(n - 1) {
                    if truth.get(rr, cc) != v {
                        return true;
                    }
                }
            }
            false
        };
        let (mut acc, mut count) = (0.0, 0);
        for r in 0..n - 1 {
            for c in 0..n - 1 {
                if near_edge(r, c) {
                    continue;
                }
                let gx = d.get(r, c + 1) - d.get(r, c);
                let gy = d.get(r + 1, c) - d.get(r, c);
                acc += (gx * gx + gy * gy).sqrt();
                count += 1;
            }
        }
        acc / count as f64
    }

    #[test]
    fn tv_is_flatter_than_noser_away_from_edges() {
        let f = desk();
        let (sigma, dv) = circle_case(f);
        let cfg = ReconConfig::default();
        let a = noser(&f.j, &dv, cfg.lambda_noser).unwrap();
        let b = tv_reconstruct(&f.j, &dv, cfg.lambda_tv, cfg.tv_iters, cfg.tv_eps).unwrap();
        let (ga, gb) = (off_edge_gradient(&a, &sigma), off_edge_gradient(&b, &sigma));
        assert!(gb < ga, "tv {gb:.4e} vs noser {ga:.4e}");
    }

    #[test]
    fn com_of_empty_image_is_none() {
        assert!(center_of_mass(&ConductivityImage::uniform(16, 0.0), 0.5).is_none());
    }
}
