use super::{ConductivityImage, ForwardError, Mesh, Protocol, VoltageFrame};
use crate::linalg::{norm2, BandedCholesky, BandedSym, LinalgError};

/// Relative residual every forward solve must reach.
pub const RESIDUAL_TOL: f64 = 1e-10;

/// Stiffness matrix of the bilinear element on a square (any size) for unit
/// conductivity, counter-clockwise node order.
pub const Q1_STIFFNESS: [[f64; 4]; 4] = [
    [4.0 / 6.0, -1.0 / 6.0, -2.0 / 6.0, -1.0 / 6.0],
    [-1.0 / 6.0, 4.0 / 6.0, -1.0 / 6.0, -2.0 / 6.0],
    [-2.0 / 6.0, -1.0 / 6.0, 4.0 / 6.0, -1.0 / 6.0],
    [-1.0 / 6.0, -2.0 / 6.0, -1.0 / 6.0, 4.0 / 6.0],
];

const MAX_REFINEMENT: usize = 4;

fn check_sigma(mesh: &Mesh, sigma: &ConductivityImage) -> Result<(), ForwardError> {
    if sigma.grid_n() != mesh.grid_n() || sigma.values().len() != mesh.element_count() {
        return Err(ForwardError::DimensionMismatch {
            expected: mesh.element_count(),
            got: sigma.values().len(),
        });
    }
    if let Some((e, v)) = sigma
        .values()
        .iter()
        .enumerate()
        .find(|(_, v)| !(**v > 0.0) || !v.is_finite())
    {
        return Err(ForwardError::Singular(format!(
            "conductivity must be positive and finite, element {e} is {v}"
        )));
    }
    Ok(())
}

/// Assembles the stiffness matrix with node `ground` eliminated. Unknown
/// `k` maps to node `k` below the ground node and `k + 1` above it.
pub fn assemble_stiffness(
    mesh: &Mesh,
    sigma: &ConductivityImage,
    ground: usize,
) -> Result<BandedSym, ForwardError> {
    check_sigma(mesh, sigma)?;
    if ground >= mesh.node_count() {
        return Err(ForwardError::BadGround(ground));
    }
    let dof = |node: usize| -> Option<usize> {
        use std::cmp::Ordering::*;
        match node.cmp(&ground) {
            Less => Some(node),
            Equal => None,
            Greater => Some(node - 1),
        }
    };
    let mut k = BandedSym::zeros(mesh.node_count() - 1, mesh.bandwidth());
    for (e, &s) in sigma.values().iter().enumerate() {
        let nodes = mesh.element_nodes(e);
        for a in 0..4 {
            let Some(ia) = dof(nodes[a]) else { continue };
            for b in 0..=a {
                let Some(ib) = dof(nodes[b]) else { continue };
                // lower triangle only; BandedSym stores one half
                k.add(ia, ib, s * Q1_STIFFNESS[a][b]);
            }
        }
    }
    Ok(k)
}

/// Nodal potentials for every drive pair of a protocol.
#[derive(Debug, Clone)]
pub struct DriveFields {
    /// `potentials[d][node]`, zero at the ground node.
    pub potentials: Vec<Vec<f64>>,
}

impl DriveFields {
    fn electrode_mean(u: &[f64], nodes: &[usize]) -> f64 {
        nodes.iter().map(|&i| u[i]).sum::<f64>() / nodes.len() as f64
    }

    /// Differential voltages in protocol frame order.
    pub fn voltages(&self, mesh: &Mesh, protocol: &Protocol) -> VoltageFrame {
        let el = mesh.electrodes();
        let mut out = Vec::with_capacity(protocol.n_measurements());
        for (d, u) in self.potentials.iter().enumerate() {
            for &(p, q) in protocol.meas_pairs(d) {
                out.push(Self::electrode_mean(u, &el[p]) - Self::electrode_mean(u, &el[q]));
            }
        }
        VoltageFrame::new(out)
    }
}

fn solve_with_refinement(
    k: &BandedSym,
    chol: &BandedCholesky,
    rhs: &[f64],
) -> Result<Vec<f64>, ForwardError> {
    let n = rhs.len();
    let mut x = rhs.to_vec();
    chol.solve_in_place(&mut x);
    let fnorm = norm2(rhs);
    let mut r = vec![0.0; n];
    for _ in 0..=MAX_REFINEMENT {
        k.matvec(&x, &mut r);
        r.iter_mut().zip(rhs).for_each(|(ri, fi)| *ri = fi - *ri);
        let rel = norm2(&r) / fnorm;
        if rel <= RESIDUAL_TOL {
            return Ok(x);
        }
        chol.solve_in_place(&mut r);
        x.iter_mut().zip(&r).for_each(|(xi, di)| *xi += di);
    }
    k.matvec(&x, &mut r);
    r.iter_mut().zip(rhs).for_each(|(ri, fi)| *ri = fi - *ri);
    let residual = norm2(&r) / fnorm;
    if residual <= RESIDUAL_TOL {
        Ok(x)
    } else {
        Err(ForwardError::NonConvergence { residual })
    }
}

/// Solves for the nodal potentials of each drive pair with the given node
/// grounded.
pub fn solve_fields(
    mesh: &Mesh,
    sigma: &ConductivityImage,
    protocol: &Protocol,
    ground: usize,
) -> Result<DriveFields, ForwardError> {
    let k = assemble_stiffness(mesh, sigma, ground)?;
    let chol = k.cholesky().map_err(|e| match e {
        LinalgError::NotPositiveDefinite { row, pivot } => {
            ForwardError::Singular(format!("stiffness pivot {pivot:e} at row {row}"))
        }
        other => ForwardError::Singular(other.to_string()),
    })?;
    let el = mesh.electrodes();
    let n_nodes = mesh.node_count();
    let mut potentials = Vec::with_capacity(protocol.drive_pairs().len());
    for &(a, b) in protocol.drive_pairs() {
        let mut f = vec![0.0; n_nodes];
        let ia = 1.0 / el[a].len() as f64;
        let ib = 1.0 / el[b].len() as f64;
        for &node in &el[a] {
            f[node] += ia;
        }
        for &node in &el[b] {
            f[node] -= ib;
        }
        let mut rhs = f;
        rhs.remove(ground);
        let mut u = solve_with_refinement(&k, &chol, &rhs)?;
        u.insert(ground, 0.0);
        potentials.push(u);
    }
    Ok(DriveFields { potentials })
}

/// Differential voltages for `sigma`, grounded at node `(0, 0)`.
pub fn solve_forward(
    mesh: &Mesh,
    sigma: &ConductivityImage,
    protocol: &Protocol,
) -> Result<VoltageFrame, ForwardError> {
    solve_forward_grounded(mesh, sigma, protocol, 0)
}

pub fn solve_forward_grounded(
    mesh: &Mesh,
    sigma: &ConductivityImage,
    protocol: &Protocol,
    ground: usize,
) -> Result<VoltageFrame, ForwardError> {
    Ok(solve_fields(mesh, sigma, protocol, ground)?.voltages(mesh, protocol))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup(n: usize) -> (Mesh, Protocol) {
        (
            Mesh::with_default_width(n).unwrap(),
            Protocol::new(3).unwrap(),
        )
    }

    fn rel_diff(a: &[f64], b: &[f64]) -> f64 {
        let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
        num.sqrt() / norm2(b)
    }

    fn random_sigma(n: usize, seed: u64) -> ConductivityImage {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        ConductivityImage::new(n, (0..n * n).map(|_| rng.random_range(0.2..2.0)).collect()).unwrap()
    }

    #[test]
    fn element_stiffness_rows_sum_to_zero() {
        for row in Q1_STIFFNESS {
            assert!(row.iter().sum::<f64>().abs() < 1e-15);
        }
    }

    #[test]
    fn reciprocity_homogeneous_and_random() {
        let (mesh, proto) = setup(16);
        for sigma in [ConductivityImage::uniform(16, 1.0), random_sigma(16, 3)] {
            let v = solve_forward(&mesh, &sigma, &proto).unwrap();
            for (k, d, pair) in proto.measurements() {
                let m = proto.drive_index(pair).unwrap();
                let swapped = proto.index_of(m, proto.drive_pairs()[d]).unwrap();
                let (a, b) = (v.values()[k], v.values()[swapped]);
                assert!((a - b).abs() <= 1e-8 * a.abs().max(b.abs()), "{a} vs {b}");
            }
        }
    }

    #[test]
    fn ground_gauge_invariance() {
        let (mesh, proto) = setup(16);
        let sigma = random_sigma(16, 9);
        let v0 = solve_forward(&mesh, &sigma, &proto).unwrap();
        for g in [1, 100, mesh.node_count() / 2, mesh.node_count() - 1] {
            let v = solve_forward_grounded(&mesh, &sigma, &proto, g).unwrap();
            assert!(rel_diff(v.values(), v0.values()) < 1e-10);
        }
    }

    #[test]
    fn conductivity_scaling_law() {
        let (mesh, proto) = setup(16);
        let sigma = random_sigma(16, 5);
        let v = solve_forward(&mesh, &sigma, &proto).unwrap();
        for alpha in [0.5, 3.0, 17.0] {
            let scaled =
                ConductivityImage::new(16, sigma.values().iter().map(|s| s * alpha).collect())
                    .unwrap();
            let va = solve_forward(&mesh, &scaled, &proto).unwrap();
            let expect: Vec<f64> = v.values().iter().map(|x| x / alpha).collect();
            assert!(rel_diff(va.values(), &expect) < 1e-10);
        }
    }

    #[test]
    fn rotation_shifts_drives_by_four() {
        let (mesh, proto) = setup(16);
        let sigma = random_sigma(16, 11);
        let v = solve_forward(&mesh, &sigma, &proto).unwrap();
        let vr = solve_forward(&mesh, &sigma.rotate90(), &proto).unwrap();
        for (k, d, (p, q)) in proto.measurements() {
            let k_rot = proto
                .index_of((d + 4) % 16, ((p + 4) % 16, (q + 4) % 16))
                .unwrap();
            let (a, b) = (v.values()[k], vr.values()[k_rot]);
            assert!((a - b).abs() <= 1e-8 * a.abs().max(1e-300), "{a} vs {b}");
        }
    }

    #[test]
    fn rejects_nonpositive_sigma() {
        let (mesh, proto) = setup(16);
        let mut sigma = ConductivityImage::uniform(16, 1.0);
        sigma.values_mut()[7] = 0.0;
        assert!(matches!(
            solve_forward(&mesh, &sigma, &proto),
            Err(ForwardError::Singular(_))
        ));
        let wrong = ConductivityImage::uniform(17, 1.0);
        assert!(matches!(
            solve_forward(&mesh, &wrong, &proto),
            Err(ForwardError::DimensionMismatch { .. })
        ));
    }
}
