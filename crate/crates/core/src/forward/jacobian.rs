use super::fem::{solve_fields, Q1_STIFFNESS};
use super::{ConductivityImage, ForwardError, Mesh, Protocol, VoltageFrame};

/// Dense `n_meas × n²` sensitivity matrix linearised about `baseline`.
///
/// Entry `(k, e)` is `∂V_k/∂σ_e` in V per S/m.
#[derive(Debug, Clone, PartialEq)]
pub struct SensitivityMatrix {
    rows: usize,
    cols: usize,
    entries: Vec<f64>,
    baseline: ConductivityImage,
}

impl SensitivityMatrix {
    pub fn from_parts(
        rows: usize,
        cols: usize,
        entries: Vec<f64>,
        baseline: ConductivityImage,
    ) -> Result<Self, ForwardError> {
        if entries.len() != rows * cols || baseline.values().len() != cols {
            return Err(ForwardError::DimensionMismatch {
                expected: rows * cols,
                got: entries.len(),
            });
        }
        Ok(Self {
            rows,
            cols,
            entries,
            baseline,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    pub fn row(&self, k: usize) -> &[f64] {
        &self.entries[k * self.cols..(k + 1) * self.cols]
    }

    pub fn baseline(&self) -> &ConductivityImage {
        &self.baseline
    }

    /// Column `e` gathered into a vector.
    pub fn column(&self, e: usize) -> Vec<f64> {
        (0..self.rows)
            .map(|k| self.entries[k * self.cols + e])
            .collect()
    }

    /// `J · x`.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.rows];
        crate::linalg::gemv(&self.entries, self.rows, self.cols, x, &mut y);
        y
    }

    /// `Jᵀ · y`.
    pub fn apply_transpose(&self, y: &[f64]) -> Vec<f64> {
        let mut x = vec![0.0; self.cols];
        crate::linalg::gemv_t(&self.entries, self.rows, self.cols, y, &mut x);
        x
    }

    /// Linear prediction `V₀ + J (σ − σ₀)`.
    pub fn linear_prediction(&self, v0: &VoltageFrame, sigma: &ConductivityImage) -> VoltageFrame {
        let delta: Vec<f64> = sigma
            .values()
            .iter()
            .zip(self.baseline.values())
            .map(|(s, s0)| s - s0)
            .collect();
        let dv = self.apply(&delta);
        VoltageFrame::new(v0.values().iter().zip(&dv).map(|(a, b)| a + b).collect())
    }
}

/// Sensitivity of every measurement to every element conductivity at
/// `sigma0`.
///
/// Uses `∂V_(d,m)/∂σ_e = −∫_e ∇u_d · ∇u_m`, where `u_m` is the field of a
/// unit current driven through measurement pair `m`. Measurement pairs of a
/// skip-k protocol are themselves drive pairs, so the adjoint fields are the
/// drive fields.
pub fn compute_jacobian(
    mesh: &Mesh,
    sigma0: &ConductivityImage,
    protocol: &Protocol,
) -> Result<SensitivityMatrix, ForwardError> {
    let fields = solve_fields(mesh, sigma0, protocol, 0)?;
    let n_el = mesh.element_count();
    let n_drive = protocol.drive_pairs().len();

    // per drive: nodal values on each element and K_e u_e
    let mut local = vec![[0.0f64; 4]; n_drive * n_el];
    let mut k_local = vec![[0.0f64; 4]; n_drive * n_el];
    for (d, u) in fields.potentials.iter().enumerate() {
        for e in 0..n_el {
            let nodes = mesh.element_nodes(e);
            let ue = nodes.map(|i| u[i]);
            let mut ke = [0.0; 4];
            for (a, row) in Q1_STIFFNESS.iter().enumerate() {
                ke[a] = row.iter().zip(&ue).map(|(k, v)| k * v).sum();
            }
            local[d * n_el + e] = ue;
            k_local[d * n_el + e] = ke;
        }
    }

    let rows = protocol.n_measurements();
    let mut entries = vec![0.0; rows * n_el];
    for (k, d, pair) in protocol.measurements() {
        let m = protocol.drive_index(pair).ok_or_else(|| {
            ForwardError::Geometry(format!("measurement pair {pair:?} is not a drive pair"))
        })?;
        let row = &mut entries[k * n_el..(k + 1) * n_el];
        let um = &local[m * n_el..(m + 1) * n_el];
        let kd = &k_local[d * n_el..(d + 1) * n_el];
        for ((out, a), b) in row.iter_mut().zip(um).zip(kd) {
            *out = -(a[0] * b[0] + a[1] * b[1] + a[2] * b[2] + a[3] * b[3]);
        }
    }
    SensitivityMatrix::from_parts(rows, n_el, entries, sigma0.clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::solve_forward;

    #[test]
    fn finite_difference_columns() {
        let mesh = Mesh::with_default_width(16).unwrap();
        let proto = Protocol::new(3).unwrap();
        let s0 = ConductivityImage::uniform(16, 1.0);
        let j = compute_jacobian(&mesh, &s0, &proto).unwrap();
        let v0 = solve_forward(&mesh, &s0, &proto).unwrap();
        let delta = 1e-5;
        for e in [0, 17, 100, 255] {
            let mut s = s0.clone();
            s.values_mut()[e] += delta;
            let v = solve_forward(&mesh, &s, &proto).unwrap();
            let col = j.column(e);
            let scale = col.iter().fold(0.0f64, |a, b| a.max(b.abs()));
            for (k, c) in col.iter().enumerate() {
                let fd = (v.values()[k] - v0.values()[k]) / delta;
                assert!((fd - c).abs() < 1e-3 * scale, "e={e} k={k}: {fd} vs {c}");
            }
        }
    }

    #[test]
    fn uniform_perturbation_scales_baseline() {
        let mesh = Mesh::with_default_width(16).unwrap();
        let proto = Protocol::new(3).unwrap();
        let s0 = ConductivityImage::uniform(16, 1.0);
        let j = compute_jacobian(&mesh, &s0, &proto).unwrap();
        let v0 = solve_forward(&mesh, &s0, &proto).unwrap();
        let c = 1e-5;
        let jv = j.apply(&vec![c; 256]);
        for (a, v) in jv.iter().zip(v0.values()) {
            let expect = -c * v;
            assert!((a - expect).abs() <= 1e-3 * expect.abs());
        }
    }

    #[test]
    fn reciprocal_rows_are_equal() {
        let mesh = Mesh::with_default_width(16).unwrap();
        let proto = Protocol::new(3).unwrap();
        let j = compute_jacobian(&mesh, &ConductivityImage::uniform(16, 1.0), &proto).unwrap();
        for (k, d, pair) in proto.measurements() {
            let m = proto.drive_index(pair).unwrap();
            let k2 = proto.index_of(m, proto.drive_pairs()[d]).unwrap();
            for (a, b) in j.row(k).iter().zip(j.row(k2)) {
                assert!((a - b).abs() <= 1e-10 * a.abs().max(1e-12));
            }
        }
    }
}
