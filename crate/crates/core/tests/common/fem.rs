//! Dense-matrix FEM reference.

use nalgebra::{DMatrix, DVector};

/// Q1 element stiffness for unit conductivity by 2×2 Gauss quadrature on the
/// reference square, local nodes counter-clockwise from the lower-left.
pub fn quadrature_stiffness() -> [[f64; 4]; 4] {
    let g = 1.0 / 3f64.sqrt();
    let pts = [-g, g];
    let corners = [(-1.0, -1.0), (1.0, -1.0), (1.0, 1.0), (-1.0, 1.0)];
    let mut k = [[0.0; 4]; 4];
    for &xi in &pts {
        for &eta in &pts {
            // dN/dxi, dN/deta of N_a = (1 + xi_a xi)(1 + eta_a eta)/4
            let grad: Vec<(f64, f64)> = corners
                .iter()
                .map(|&(xa, ya)| (xa * (1.0 + ya * eta) / 4.0, ya * (1.0 + xa * xi) / 4.0))
                .collect();
            // square element: the Jacobian scaling cancels in 2-D
            for a in 0..4 {
                for b in 0..4 {
                    k[a][b] += grad[a].0 * grad[b].0 + grad[a].1 * grad[b].1;
                }
            }
        }
    }
    k
}

pub struct Oracle {
    n: usize,
    electrodes: Vec<usize>,
}

impl Oracle {
    /// Point electrodes at odd perimeter positions, walking counter-clockwise
    /// from the origin.
    pub fn new(n: usize) -> Self {
        let mut ring = Vec::new();
        for i in 0..n {
            ring.push((i, 0));
        }
        for j in 0..n {
            ring.push((n, j));
        }
        for i in (1..=n).rev() {
            ring.push((i, n));
        }
        for j in (1..=n).rev() {
            ring.push((0, j));
        }
        let electrodes = (0..16)
            .map(|k| {
                let p = ((k as f64 + 0.5) * 4.0 * n as f64 / 16.0).round() as usize;
                let (i, j) = ring[p];
                j * (n + 1) + i
            })
            .collect();
        Self { n, electrodes }
    }

    pub fn voltages(&self, sigma: &[f64], skip: usize) -> Vec<f64> {
        let n = self.n;
        let nn = (n + 1) * (n + 1);
        let ke = quadrature_stiffness();
        let mut k = DMatrix::<f64>::zeros(nn, nn);
        for r in 0..n {
            for c in 0..n {
                let ll = r * (n + 1) + c;
                let nodes = [ll, ll + 1, ll + n + 2, ll + n + 1];
                for a in 0..4 {
                    for b in 0..4 {
                        k[(nodes[a], nodes[b])] += sigma[r * n + c] * ke[a][b];
                    }
                }
            }
        }
        // ground node 0 by deleting its row and column
        let kr = k.remove_row(0).remove_column(0);
        let lu = kr.lu();
        let mut fields = Vec::new();
        for d in 0..16 {
            let mut f = DVector::<f64>::zeros(nn - 1);
            let (a, b) = (self.electrodes[d], self.electrodes[(d + skip) % 16]);
            if a > 0 {
                f[a - 1] += 1.0;
            }
            if b > 0 {
                f[b - 1] -= 1.0;
            }
            let u = lu.solve(&f).expect("oracle system singular");
            let mut full = vec![0.0];
            full.extend(u.iter());
            fields.push(full);
        }
        let mut out = Vec::new();
        for d in 0..16 {
            let drive = [d, (d + skip) % 16];
            for j in 0..16 {
                let m = (j + skip) % 16;
                if drive.contains(&j) || drive.contains(&m) {
                    continue;
                }
                out.push(fields[d][self.electrodes[j]] - fields[d][self.electrodes[m]]);
            }
        }
        out
    }
}

pub fn max_rel(a: &[f64], b: &[f64]) -> f64 {
    let scale = b.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    a.iter()
        .zip(b)
        .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()))
        / scale
}
