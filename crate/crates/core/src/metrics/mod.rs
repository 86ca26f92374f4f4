//! Image-quality metrics on absolute conductivity maps and the weighted
//! selection score `S = 0.25 (SSIM + CC + PSNR) − 0.25 RIE`.

use std::io::Write;

use thiserror::Error;

use crate::forward::ConductivityImage;

/// SSIM window side.
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("image shapes differ: {0}×{0} vs {1}×{1}")]
    Shape(usize, usize),
    #[error("ground truth has zero norm")]
    ZeroNorm,
    #[error("image {0}×{0} is smaller than the {SSIM_WINDOW}×{SSIM_WINDOW} SSIM window")]
    TooSmall(usize),
}

fn same_shape(a: &ConductivityImage, b: &ConductivityImage) -> Result<(), MetricsError> {
    if a.grid_n() != b.grid_n() {
        return Err(MetricsError::Shape(a.grid_n(), b.grid_n()));
    }
    Ok(())
}

/// Pearson correlation result. `constant_input` marks the case where
/// either image is constant and `value` is defined as 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correlation {
    pub value: f64,
    pub constant_input: bool,
}

pub fn pearson_cc(
    a: &ConductivityImage,
    b: &ConductivityImage,
) -> Result<Correlation, MetricsError> {
    same_shape(a, b)?;
    let (x, y) = (a.values(), b.values());
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (p, q) in x.iter().zip(y) {
        let (dp, dq) = (p - mx, q - my);
        sxy += dp * dq;
        sxx += dp * dp;
        syy += dq * dq;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Ok(Correlation {
            value: 0.0,
            constant_input: true,
        });
    }
    Ok(Correlation {
        value: (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0),
        constant_input: false,
    })
}

/// `‖est − gt‖₂ / ‖gt‖₂`.
pub fn rie(est: &ConductivityImage, gt: &ConductivityImage) -> Result<f64, MetricsError> {
    same_shape(est, gt)?;
    let den: f64 = gt.values().iter().map(|v| v * v).sum::<f64>().sqrt();
    if den == 0.0 {
        return Err(MetricsError::ZeroNorm);
    }
    let num: f64 = est
        .values()
        .iter()
        .zip(gt.values())
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        .sqrt();
    Ok(num / den)
}

/// `10 log10(range² / MSE)`; `+∞` when the images are identical.
pub fn psnr(
    est: &ConductivityImage,
    gt: &ConductivityImage,
    data_range: f64,
) -> Result<f64, MetricsError> {
    same_shape(est, gt)?;
    let mse = est
        .values()
        .iter()
        .zip(gt.values())
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        / gt.values().len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (data_range * data_range / mse).log10())
}

fn gaussian_taps() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (k, v) in w.iter_mut().enumerate() {
        *v = (-(k as f64 - c).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// Separable valid-mode Gaussian filter of an `n × n` image.
fn filter_valid(x: &[f64], n: usize, taps: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let m = n + 1 - SSIM_WINDOW;
    let mut rows = vec![0.0; n * m];
    for r in 0..n {
        for c in 0..m {
            rows[r * m + c] = taps.iter().zip(&x[r * n + c..]).map(|(w, v)| w * v).sum();
        }
    }
    let mut out = vec![0.0; m * m];
    for r in 0..m {
        for c in 0..m {
            out[r * m + c] = taps
                .iter()
                .enumerate()
                .map(|(k, w)| w * rows[(r + k) * m + c])
                .sum();
        }
    }
    out
}

/// Mean SSIM over all valid 11×11 Gaussian-weighted windows (σ = 1.5,
/// K1 = 0.01, K2 = 0.03, dynamic range `L = 1`).
pub fn ssim(a: &ConductivityImage, b: &ConductivityImage) -> Result<f64, MetricsError> {
    ssim_with_range(a, b, 1.0)
}

pub fn ssim_with_range(
    a: &ConductivityImage,
    b: &ConductivityImage,
    data_range: f64,
) -> Result<f64, MetricsError> {
    same_shape(a, b)?;
    let n = a.grid_n();
    if n < SSIM_WINDOW {
        return Err(MetricsError::TooSmall(n));
    }
    let taps = gaussian_taps();
    let (x, y) = (a.values(), b.values());
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(y).map(|(p, q)| p * q).collect();
    let [mx, my, mxx, myy, mxy] =
        [x, y, &xx[..], &yy[..], &xy[..]].map(|s| filter_valid(s, n, &taps));
    let c1 = (SSIM_K1 * data_range).powi(2);
    let c2 = (SSIM_K2 * data_range).powi(2);
    let mut acc = 0.0;
    for i in 0..mx.len() {
        let (ux, uy) = (mx[i], my[i]);
        let vx = mxx[i] - ux * ux;
        let vy = myy[i] - uy * uy;
        let cxy = mxy[i] - ux * uy;
        acc +=
            ((2.0 * ux * uy + c1) * (2.0 * cxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
    }
    Ok(acc / mx.len() as f64)
}

/// `S = 0.25 (SSIM + CC + PSNR) − 0.25 RIE`, PSNR in dB.
pub fn weighted_score(ssim: f64, cc: f64, psnr_db: f64, rie: f64) -> f64 {
    0.25 * (ssim + cc + psnr_db) - 0.25 * rie
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsReport {
    pub ssim: f64,
    pub cc: f64,
    pub rie: f64,
    pub psnr_db: f64,
    pub score_s: f64,
    pub constant_cc: bool,
}

/// All four metrics of `est` against `gt`, both absolute conductivity maps.
pub fn evaluate(
    est: &ConductivityImage,
    gt: &ConductivityImage,
) -> Result<MetricsReport, MetricsError> {
    let s = ssim(est, gt)?;
    let c = pearson_cc(est, gt)?;
    let r = rie(est, gt)?;
    let p = psnr(est, gt, 1.0)?;
    Ok(MetricsReport {
        ssim: s,
        cc: c.value,
        rie: r,
        psnr_db: p,
        score_s: weighted_score(s, c.value, p, r),
        constant_cc: c.constant_input,
    })
}

/// Means over a batch. Samples with infinite PSNR are left out of the PSNR
/// and score means and counted in `infinite_psnr`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsSummary {
    pub ssim: f64,
    pub cc: f64,
    pub rie: f64,
    pub psnr_db: f64,
    pub score_s: f64,
    pub samples: usize,
    pub infinite_psnr: usize,
    pub constant_cc: usize,
}

pub fn summarize(reports: &[MetricsReport]) -> MetricsSummary {
    let n = reports.len().max(1) as f64;
    let finite: Vec<&MetricsReport> = reports.iter().filter(|r| r.psnr_db.is_finite()).collect();
    let nf = finite.len().max(1) as f64;
    let nan_if_empty = |v: f64, empty: bool| if empty { f64::NAN } else { v };
    MetricsSummary {
        ssim: nan_if_empty(
            reports.iter().map(|r| r.ssim).sum::<f64>() / n,
            reports.is_empty(),
        ),
        cc: nan_if_empty(
            reports.iter().map(|r| r.cc).sum::<f64>() / n,
            reports.is_empty(),
        ),
        rie: nan_if_empty(
            reports.iter().map(|r| r.rie).sum::<f64>() / n,
            reports.is_empty(),
        ),
        psnr_db: nan_if_empty(
            finite.iter().map(|r| r.psnr_db).sum::<f64>() / nf,
            finite.is_empty(),
        ),
        score_s: nan_if_empty(
            finite.iter().map(|r| r.score_s).sum::<f64>() / nf,
            finite.is_empty(),
        ),
        samples: reports.len(),
        infinite_psnr: reports.len() - finite.len(),
        constant_cc: reports.iter().filter(|r| r.constant_cc).count(),
    }
}

/// Writes one row per sample followed by a `mean` row.
pub fn write_metrics_csv<W: Write>(
    out: W,
    reports: &[MetricsReport],
) -> csv::Result<MetricsSummary> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["sample", "ssim", "cc", "rie", "psnr_db", "score_s"])?;
    for (i, r) in reports.iter().enumerate() {
        w.write_record(&[
            i.to_string(),
            r.ssim.to_string(),
            r.cc.to_string(),
            r.rie.to_string(),
            r.psnr_db.to_string(),
            r.score_s.to_string(),
        ])?;
    }
    let s = summarize(reports);
    w.write_record(&[
        "mean".to_string(),
        s.ssim.to_string(),
        s.cc.to_string(),
        s.rie.to_string(),
        s.psnr_db.to_string(),
        s.score_s.to_string(),
    ])?;
    w.flush()?;
    Ok(s)
}
