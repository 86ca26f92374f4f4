use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tacteit::classical::noser;
use tacteit::forward::{
    compute_jacobian, ConductivityImage, Mesh, Protocol, SensitivityMatrix, VoltageFrame,
};

fn jacobian16() -> SensitivityMatrix {
    let mesh = Mesh::with_default_width(16).unwrap();
    let proto = Protocol::new(3).unwrap();
    compute_jacobian(&mesh, &ConductivityImage::uniform(16, 1.0), &proto).unwrap()
}

fn to_dmatrix(j: &SensitivityMatrix) -> DMatrix<f64> {
    DMatrix::from_row_slice(j.rows(), j.cols(), j.entries())
}

#[test]
fn noser_matches_dense_normal_equations() {
    let j = jacobian16();
    let a = to_dmatrix(&j);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let dv: Vec<f64> = (0..j.rows())
        .map(|_| rng.random_range(-1e-2..1e-2))
        .collect();
    let lambda = 1e-2;

    let ata = a.transpose() * &a;
    let mut lhs = ata.clone();
    for e in 0..j.cols() {
        lhs[(e, e)] += lambda * ata[(e, e)];
    }
    let rhs = a.transpose() * DVector::from_column_slice(&dv);
    let want = lhs.lu().solve(&rhs).unwrap();

    let got = noser(&j, &VoltageFrame::new(dv), lambda).unwrap();
    let scale = want.amax();
    for (g, w) in got.values().iter().zip(want.iter()) {
        assert!((g - w).abs() <= 1e-8 * scale, "{g} vs {w}");
    }
}

#[test]
fn vanishing_lambda_fits_consistent_data() {
    let j = jacobian16();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let truth: Vec<f64> = (0..j.cols()).map(|_| rng.random_range(-0.5..0.5)).collect();
    let dv = j.apply(&truth);
    let got = noser(&j, &VoltageFrame::new(dv.clone()), 1e-12).unwrap();
    let fit = j.apply(got.values());
    let num: f64 = fit
        .iter()
        .zip(&dv)
        .map(|(p, q)| (p - q).powi(2))
        .sum::<f64>()
        .sqrt();
    let den: f64 = dv.iter().map(|v| v * v).sum::<f64>().sqrt();
    assert!(num / den < 1e-6, "relative residual {:.3e}", num / den);
}
