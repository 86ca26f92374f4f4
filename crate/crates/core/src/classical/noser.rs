use super::ReconError;
use crate::forward::{ConductivityImage, SensitivityMatrix, VoltageFrame};
use crate::linalg::{HouseholderQr, LinalgError};

/// Precomputed one-step NOSER reconstruction matrix for a fixed `J` and λ.
///
/// `Δσ = (JᵀJ + λ·D)⁻¹ Jᵀ dV` with `D = diag(JᵀJ)`. With `B = J D^{-1/2}`
/// this is the Tikhonov problem `min ‖B y − dV‖² + λ‖y‖²`, `Δσ = D^{-1/2} y`.
/// Factoring `Bᵀ = Q₁R₁` gives `y = Q₁ z` with `z` solving the small problem
/// `min ‖R₁ᵀ z − dV‖² + λ‖z‖²`, which is solved by QR of `[R₁ᵀ; √λ I]`.
/// Both factorizations are orthogonal, so tiny λ stays accurate.
#[derive(Debug, Clone)]
pub struct NoserOperator {
    grid_n: usize,
    rows: usize,
    /// `n² × m`, row-major.
    matrix: Vec<f64>,
}

impl NoserOperator {
    pub fn new(j: &SensitivityMatrix, lambda: f64) -> Result<Self, ReconError> {
        if !(lambda > 0.0) || !lambda.is_finite() {
            return Err(ReconError::InvalidConfig(format!(
                "lambda_noser must be positive, got {lambda}"
            )));
        }
        let (m, n) = (j.rows(), j.cols());
        let grid_n = (n as f64).sqrt().round() as usize;
        let a = j.entries();
        let mut d = vec![0.0; n];
        for k in 0..m {
            for (d, v) in d.iter_mut().zip(&a[k * n..(k + 1) * n]) {
                *d += v * v;
            }
        }
        if let Some(e) = d.iter().position(|&v| v == 0.0) {
            return Err(ReconError::Singular(format!(
                "diag(JᵀJ) is zero at element {e}"
            )));
        }
        let inv_sqrt_d: Vec<f64> = d.iter().map(|v| 1.0 / v.sqrt()).collect();

        let mut bt = vec![0.0; n * m];
        for k in 0..m {
            for e in 0..n {
                bt[e * m + k] = a[k * n + e] * inv_sqrt_d[e];
            }
        }
        let tall = n >= m;
        // a wide B (more rows than pixels) skips the first reduction
        let qr1 = if tall {
            Some(HouseholderQr::new(&bt, n, m).map_err(singular)?)
        } else {
            None
        };
        let (p, core): (usize, Vec<f64>) = match &qr1 {
            Some(q) => {
                let mut rt = vec![0.0; m * m];
                for r in 0..m {
                    for c in 0..=r {
                        rt[r * m + c] = q.r_entry(c, r);
                    }
                }
                (m, rt)
            }
            None => {
                let mut b = vec![0.0; m * n];
                for e in 0..n {
                    for k in 0..m {
                        b[k * n + e] = bt[e * m + k];
                    }
                }
                (n, b)
            }
        };
        // [core; √λ I], (m + p) × p
        let mut aug = vec![0.0; (m + p) * p];
        aug[..m * p].copy_from_slice(&core);
        for i in 0..p {
            aug[(m + i) * p + i] = lambda.sqrt();
        }
        let qr2 = HouseholderQr::new(&aug, m + p, p).map_err(singular)?;

        let mut matrix = vec![0.0; n * m];
        let mut rhs = vec![0.0; m + p];
        let mut y = vec![0.0; n];
        for c in 0..m {
            rhs.iter_mut()
                .enumerate()
                .for_each(|(i, v)| *v = if i == c { 1.0 } else { 0.0 });
            qr2.apply_qt(&mut rhs);
            qr2.solve_r_in_place(&mut rhs).map_err(singular)?;
            match &qr1 {
                Some(q) => {
                    y.iter_mut().for_each(|v| *v = 0.0);
                    y[..m].copy_from_slice(&rhs[..m]);
                    q.apply_q(&mut y);
                }
                None => y.copy_from_slice(&rhs[..n]),
            }
            for e in 0..n {
                matrix[e * m + c] = y[e] * inv_sqrt_d[e];
            }
        }
        Ok(Self {
            grid_n,
            rows: m,
            matrix,
        })
    }

    /// Conductivity change for a voltage difference `dV = V_meas − V₀`.
    pub fn apply(&self, dv: &VoltageFrame) -> Result<ConductivityImage, ReconError> {
        if dv.len() != self.rows {
            return Err(ReconError::Dimension {
                expected: self.rows,
                got: dv.len(),
            });
        }
        let n = self.grid_n * self.grid_n;
        let mut out = vec![0.0; n];
        crate::linalg::gemv(&self.matrix, n, self.rows, dv.values(), &mut out);
        Ok(ConductivityImage::new(self.grid_n, out)?)
    }
}

/// One-step NOSER difference reconstruction. The result is a conductivity
/// change; add `σ₀` for an absolute map.
pub fn noser(
    j: &SensitivityMatrix,
    dv: &VoltageFrame,
    lambda: f64,
) -> Result<ConductivityImage, ReconError> {
    NoserOperator::new(j, lambda)?.apply(dv)
}

fn singular(e: LinalgError) -> ReconError {
    ReconError::Singular(e.to_string())
}
