//! Reference image pairs and loop-based SSIM/PSNR.

use tacteit::forward::ConductivityImage;

pub fn splitmix(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E3779B97F4A7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

pub fn unit(seed: u64, i: u64) -> f64 {
    (splitmix(seed.wrapping_mul(1000003).wrapping_add(i)) >> 11) as f64 * 2f64.powi(-53)
}

pub const N: usize = 32;

pub fn pair(k: u64) -> (ConductivityImage, ConductivityImage) {
    let a: Vec<f64> = (0..(N * N) as u64).map(|i| unit(2 * k + 1, i)).collect();
    let b: Vec<f64> = (0..(N * N) as u64)
        .map(|i| 0.6 * a[i as usize] + 0.4 * unit(2 * k + 2, i))
        .collect();
    (
        ConductivityImage::new(N, a).unwrap(),
        ConductivityImage::new(N, b).unwrap(),
    )
}

/// scikit-image 0.2x `structural_similarity(a, b, data_range=1,
/// gaussian_weights=True, sigma=1.5, use_sample_covariance=False)` and
/// `peak_signal_noise_ratio(a, b, data_range=1)` on the pairs above.
pub const REFERENCE: [(f64, f64); 5] = [
    (0.7999231571094123, 16.046300740178626),
    (0.7919725999219909, 15.524642289510629),
    (0.7788642472116706, 15.788937733096969),
    (0.796461658808908, 15.817882640182477),
    (0.770996827848784, 15.61408321973829),
];

/// Direct 2-D windowed sums, no separability.
pub fn naive_ssim(a: &ConductivityImage, b: &ConductivityImage) -> f64 {
    let n = a.grid_n();
    let mut w = [[0.0; 11]; 11];
    let mut total = 0.0;
    for (i, row) in w.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let d2 = (i as f64 - 5.0).powi(2) + (j as f64 - 5.0).powi(2);
            *v = (-d2 / 4.5).exp();
            total += *v;
        }
    }
    let (c1, c2) = (1e-4, 9e-4);
    let mut acc = 0.0;
    let m = n - 10;
    for r in 0..m {
        for c in 0..m {
            let (mut ux, mut uy, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for i in 0..11 {
                for j in 0..11 {
                    let wij = w[i][j] / total;
                    let (x, y) = (a.get(r + i, c + j), b.get(r + i, c + j));
                    ux += wij * x;
                    uy += wij * y;
                    sxx += wij * x * x;
                    syy += wij * y * y;
                    sxy += wij * x * y;
                }
            }
            let (vx, vy, cxy) = (sxx - ux * ux, syy - uy * uy, sxy - ux * uy);
            acc += (2.0 * ux * uy + c1) * (2.0 * cxy + c2)
                / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
        }
    }
    acc / (m * m) as f64
}

pub fn naive_psnr(a: &ConductivityImage, b: &ConductivityImage) -> f64 {
    let mse: f64 = a
        .values()
        .iter()
        .zip(b.values())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / (N * N) as f64;
    -10.0 * mse.log10()
}
