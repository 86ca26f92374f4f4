mod common;

use common::fem::{max_rel, quadrature_stiffness, Oracle};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tacteit::forward::{compute_jacobian, solve_forward, ConductivityImage, Mesh, Protocol};

#[test]
fn quadrature_matches_closed_form_element() {
    let k = quadrature_stiffness();
    let expect = [4.0, -1.0, -2.0, -1.0];
    for a in 0..4 {
        for b in 0..4 {
            assert!((k[a][b] - expect[(b + 4 - a) % 4] / 6.0).abs() < 1e-14);
        }
    }
}

#[test]
fn homogeneous_8x8_skip1_matches_dense_lu() {
    let mesh = Mesh::with_point_electrodes(8).unwrap();
    let proto = Protocol::new(1).unwrap();
    let sigma = ConductivityImage::uniform(8, 1.0);
    let v = solve_forward(&mesh, &sigma, &proto).unwrap();
    let oracle = Oracle::new(8).voltages(sigma.values(), 1);
    assert_eq!(v.len(), 208);
    assert_eq!(oracle.len(), 208);
    assert!(max_rel(v.values(), &oracle) < 1e-8);
}

#[test]
fn random_sigma_matches_dense_lu() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mesh = Mesh::with_point_electrodes(8).unwrap();
    let values: Vec<f64> = (0..64).map(|_| rng.random_range(0.1..1.0)).collect();
    let sigma = ConductivityImage::new(8, values).unwrap();
    for skip in [1, 3] {
        let proto = Protocol::new(skip).unwrap();
        let v = solve_forward(&mesh, &sigma, &proto).unwrap();
        let oracle = Oracle::new(8).voltages(sigma.values(), skip);
        assert!(max_rel(v.values(), &oracle) < 1e-8, "skip {skip}");
    }
}

#[test]
fn rotated_element_columns_are_permutations() {
    let n = 16;
    let mesh = Mesh::with_default_width(n).unwrap();
    let proto = Protocol::new(3).unwrap();
    let j = compute_jacobian(&mesh, &ConductivityImage::uniform(n, 1.0), &proto).unwrap();
    // (r, c) → (c, n−1−r) is a 90° counter-clockwise turn of the pixel grid,
    // which moves every electrode four places along the perimeter.
    let (r, c) = (3usize, 5usize);
    let mut orbit = vec![(r, c)];
    for _ in 0..3 {
        let (r0, c0) = *orbit.last().unwrap();
        orbit.push((c0, n - 1 - r0));
    }
    let scale = j.entries().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    for w in orbit.windows(2) {
        let col_a = j.column(w[0].0 * n + w[0].1);
        let col_b = j.column(w[1].0 * n + w[1].1);
        for (k, d, (p, q)) in proto.measurements() {
            let k2 = proto
                .index_of((d + 4) % 16, ((p + 4) % 16, (q + 4) % 16))
                .unwrap();
            assert!((col_a[k] - col_b[k2]).abs() < 1e-10 * scale);
        }
    }
}
