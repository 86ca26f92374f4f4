//! EIT forward model on a square Q1 mesh.
//!
//! Solves `∇·(σ∇u) = 0` with a gap electrode model: the drive current is
//! split equally over the nodes of an electrode and measured potentials are
//! averaged over electrode nodes. Differential voltages are reported for a
//! skip-k protocol, and the sensitivity matrix is obtained from drive and
//! adjoint fields.

mod fem;
mod jacobian;
mod mesh;
mod protocol;

pub use fem::{
    assemble_stiffness, solve_fields, solve_forward, solve_forward_grounded, DriveFields,
    Q1_STIFFNESS, RESIDUAL_TOL,
};
pub use jacobian::{compute_jacobian, SensitivityMatrix};
pub use mesh::{default_electrode_width, Mesh, N_ELECTRODES};
pub use protocol::Protocol;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ForwardError {
    #[error("geometry infeasible: {0}")]
    Geometry(String),
    #[error("invalid skip {0}: must lie in 1..=7")]
    InvalidSkip(usize),
    #[error("conductivity has {got} values, mesh needs {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("singular system: {0}")]
    Singular(String),
    #[error("linear solve did not reach tolerance: relative residual {residual:e}")]
    NonConvergence { residual: f64 },
    #[error("ground node {0} out of range")]
    BadGround(usize),
}

/// Per-element conductivity on an `n × n` grid, row-major (S/m).
///
/// Row `r` covers `y ∈ [r/n, (r+1)/n]`. The same container carries
/// conductivity changes produced by difference imaging.
#[derive(Debug, Clone, PartialEq)]
pub struct ConductivityImage {
    n: usize,
    values: Vec<f64>,
}

impl ConductivityImage {
    pub fn new(n: usize, values: Vec<f64>) -> Result<Self, ForwardError> {
        if values.len() != n * n {
            return Err(ForwardError::DimensionMismatch {
                expected: n * n,
                got: values.len(),
            });
        }
        Ok(Self { n, values })
    }

    pub fn uniform(n: usize, value: f64) -> Self {
        Self {
            n,
            values: vec![value; n * n],
        }
    }

    pub fn grid_n(&self) -> usize {
        self.n
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.n + col]
    }

    /// Rotates the map by 90° counter-clockwise about the domain centre.
    pub fn rotate90(&self) -> Self {
        let n = self.n;
        let mut out = vec![0.0; n * n];
        for r in 0..n {
            for c in 0..n {
                out[c * n + (n - 1 - r)] = self.values[r * n + c];
            }
        }
        Self { n, values: out }
    }

    /// Elementwise `self + other`.
    pub fn add(&self, other: &Self) -> Self {
        Self {
            n: self.n,
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(a, b)| a + b)
                .collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Differential boundary voltages in frame order (drive-major).
#[derive(Debug, Clone, PartialEq)]
pub struct VoltageFrame {
    values: Vec<f64>,
}

impl VoltageFrame {
    pub fn new(values: Vec<f64>) -> Self {
        Self { values }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn norm(&self) -> f64 {
        crate::linalg::norm2(&self.values)
    }

    /// `self - other`, used for difference imaging.
    pub fn sub(&self, other: &Self) -> Self {
        Self::new(
            self.values
                .iter()
                .zip(&other.values)
                .map(|(a, b)| a - b)
                .collect(),
        )
    }
}
