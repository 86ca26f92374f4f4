//! Random conductivity phantoms, measurement noise, and paired datasets.

mod dataset;
mod shapes;

pub use dataset::{generate_dataset, Dataset, DatasetConfig, NoisePolicy, Split};
pub use shapes::{
    sample_phantom, sample_shape, Circle, Geometry, ShapeClass, ShapeSpec, BACKGROUND,
    INCLUSION_RANGE, MARGIN_PX, MAX_ATTEMPTS, SIZE_RANGE,
};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::forward::{ForwardError, VoltageFrame};

#[derive(Debug, Error)]
pub enum PhantomError {
    #[error("could not place a {class} inside the domain after {attempts} attempts")]
    Generation { class: ShapeClass, attempts: usize },
    #[error("sample {index}: {source}")]
    Solver {
        index: usize,
        #[source]
        source: ForwardError,
    },
    #[error("sample {index}: {source}")]
    Sample {
        index: usize,
        #[source]
        source: Box<PhantomError>,
    },
    #[error("invalid dataset configuration: {0}")]
    InvalidConfig(String),
}

/// Standard deviation of the Gaussian noise that gives `frame` the requested
/// SNR in expectation.
pub fn noise_std(frame: &VoltageFrame, snr_db: f64) -> f64 {
    frame.norm() / (frame.len() as f64).sqrt() * 10f64.powf(-snr_db / 20.0)
}

/// Adds i.i.d. zero-mean Gaussian noise at `snr_db`. An infinite SNR returns
/// the frame unchanged.
pub fn add_noise<R: Rng + ?Sized>(frame: &VoltageFrame, snr_db: f64, rng: &mut R) -> VoltageFrame {
    if snr_db == f64::INFINITY {
        return frame.clone();
    }
    let std = noise_std(frame, snr_db);
    if std == 0.0 || !std.is_finite() {
        return frame.clone();
    }
    let normal = Normal::new(0.0, std).expect("finite positive std");
    VoltageFrame::new(
        frame
            .values()
            .iter()
            .map(|v| v + normal.sample(rng))
            .collect(),
    )
}

/// Realised SNR of `noisy` against `clean`, in dB.
pub fn realized_snr_db(clean: &VoltageFrame, noisy: &VoltageFrame) -> f64 {
    let noise = noisy.sub(clean);
    10.0 * (clean.norm().powi(2) / noise.norm().powi(2)).log10()
}
