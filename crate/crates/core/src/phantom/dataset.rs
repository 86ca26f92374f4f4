use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{add_noise, sample_phantom, PhantomError, ShapeClass};
use crate::forward::{solve_forward, ConductivityImage, Mesh, Protocol, VoltageFrame};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }

    pub fn code(self) -> u8 {
        match self {
            Split::Train => 0,
            Split::Test => 1,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(Split::Train),
            1 => Some(Split::Test),
            _ => None,
        }
    }
}

/// Which samples get measurement noise and at what SNR.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoisePolicy {
    /// Fraction of samples that are noisy; the count is `floor(count · fraction)`.
    pub fraction: f64,
    /// SNR drawn uniformly from this closed range, dB.
    pub snr_db: (f64, f64),
}

impl NoisePolicy {
    pub fn none() -> Self {
        Self {
            fraction: 0.0,
            snr_db: (f64::INFINITY, f64::INFINITY),
        }
    }

    pub fn half(snr_lo: f64, snr_hi: f64) -> Self {
        Self {
            fraction: 0.5,
            snr_db: (snr_lo, snr_hi),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetConfig {
    pub count: usize,
    pub split: Split,
    pub seed: u64,
    pub noise: NoisePolicy,
    pub classes: Vec<ShapeClass>,
}

impl DatasetConfig {
    /// Training split: all six classes, half the samples noisy at 30–60 dB.
    pub fn train(count: usize, seed: u64) -> Self {
        Self {
            count,
            split: Split::Train,
            seed,
            noise: NoisePolicy::half(30.0, 60.0),
            classes: ShapeClass::ALL.to_vec(),
        }
    }

    /// Clean test split.
    pub fn test(count: usize, seed: u64) -> Self {
        Self {
            count,
            split: Split::Test,
            seed,
            noise: NoisePolicy::none(),
            classes: ShapeClass::ALL.to_vec(),
        }
    }

    fn validate(&self) -> Result<(), PhantomError> {
        if self.count == 0 {
            return Err(PhantomError::InvalidConfig(
                "count must be at least 1".into(),
            ));
        }
        if self.classes.is_empty() {
            return Err(PhantomError::InvalidConfig("no shape classes".into()));
        }
        let NoisePolicy { fraction, snr_db } = self.noise;
        if !(0.0..=1.0).contains(&fraction) {
            return Err(PhantomError::InvalidConfig(format!(
                "noise fraction {fraction}"
            )));
        }
        if fraction > 0.0 && !(snr_db.0.is_finite() && snr_db.1.is_finite() && snr_db.0 <= snr_db.1)
        {
            return Err(PhantomError::InvalidConfig(format!("SNR range {snr_db:?}")));
        }
        Ok(())
    }
}

/// Paired phantoms and voltages with their noise metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub grid_n: usize,
    pub split: Split,
    pub seed: u64,
    pub classes: Vec<ShapeClass>,
    pub sigmas: Vec<ConductivityImage>,
    /// Noise-free forward voltages.
    pub clean_voltages: Vec<VoltageFrame>,
    /// Voltages as a measurement would see them; equal to `clean_voltages`
    /// for samples without noise.
    pub voltages: Vec<VoltageFrame>,
    pub noise_flags: Vec<bool>,
    pub snr_db: Vec<Option<f64>>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.sigmas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sigmas.is_empty()
    }

    pub fn noisy_count(&self) -> usize {
        self.noise_flags.iter().filter(|&&f| f).count()
    }

    /// Samples at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            grid_n: self.grid_n,
            split: self.split,
            seed: self.seed,
            classes: indices.iter().map(|&i| self.classes[i]).collect(),
            sigmas: indices.iter().map(|&i| self.sigmas[i].clone()).collect(),
            clean_voltages: indices
                .iter()
                .map(|&i| self.clean_voltages[i].clone())
                .collect(),
            voltages: indices.iter().map(|&i| self.voltages[i].clone()).collect(),
            noise_flags: indices.iter().map(|&i| self.noise_flags[i]).collect(),
            snr_db: indices.iter().map(|&i| self.snr_db[i]).collect(),
        }
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Generator for stream `stream` of a (seed, split) pair. Sample `i` uses
/// stream `i`; dataset-level draws use the last stream.
fn stream_rng(seed: u64, split: Split, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(seed ^ splitmix64(split.code() as u64 + 1)));
    rng.set_stream(stream);
    rng
}

/// Generates `config.count` samples. Results depend only on the config, not
/// on thread count or scheduling.
pub fn generate_dataset(
    config: &DatasetConfig,
    mesh: &Mesh,
    protocol: &Protocol,
) -> Result<Dataset, PhantomError> {
    config.validate()?;
    let n = config.count;
    let grid_n = mesh.grid_n();

    let mut meta_rng = stream_rng(config.seed, config.split, u64::MAX);
    let k = config.classes.len();
    let mut classes: Vec<ShapeClass> = (0..n).map(|i| config.classes[i % k]).collect();
    classes.shuffle(&mut meta_rng);
    let n_noisy = (n as f64 * config.noise.fraction).floor() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut meta_rng);
    let mut noisy = vec![false; n];
    for &i in &order[..n_noisy] {
        noisy[i] = true;
    }

    let samples: Vec<_> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream_rng(config.seed, config.split, i as u64);
            let sigma =
                sample_phantom(&mut rng, classes[i], grid_n).map_err(|e| PhantomError::Sample {
                    index: i,
                    source: Box::new(e),
                })?;
            let clean = solve_forward(mesh, &sigma, protocol)
                .map_err(|source| PhantomError::Solver { index: i, source })?;
            let (measured, snr) = if noisy[i] {
                let (lo, hi) = config.noise.snr_db;
                let snr = rng.random_range(lo..=hi);
                (add_noise(&clean, snr, &mut rng), Some(snr))
            } else {
                (clean.clone(), None)
            };
            Ok((sigma, clean, measured, snr))
        })
        .collect::<Result<_, PhantomError>>()?;

    let mut ds = Dataset {
        grid_n,
        split: config.split,
        seed: config.seed,
        classes,
        sigmas: Vec::with_capacity(n),
        clean_voltages: Vec::with_capacity(n),
        voltages: Vec::with_capacity(n),
        noise_flags: noisy,
        snr_db: Vec::with_capacity(n),
    };
    for (sigma, clean, measured, snr) in samples {
        ds.sigmas.push(sigma);
        ds.clean_voltages.push(clean);
        ds.voltages.push(measured);
        ds.snr_db.push(snr);
    }
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup() -> (Mesh, Protocol) {
        (
            Mesh::with_default_width(16).unwrap(),
            Protocol::new(3).unwrap(),
        )
    }

    #[test]
    fn same_seed_same_dataset() {
        let (m, p) = setup();
        let cfg = DatasetConfig::train(30, 9);
        let a = generate_dataset(&cfg, &m, &p).unwrap();
        let b = generate_dataset(&cfg, &m, &p).unwrap();
        assert_eq!(a, b);
        let c = generate_dataset(&DatasetConfig::train(30, 10), &m, &p).unwrap();
        assert_ne!(a.sigmas, c.sigmas);
    }

    #[test]
    fn splits_use_different_streams() {
        let (m, p) = setup();
        let a = generate_dataset(&DatasetConfig::train(6, 1), &m, &p).unwrap();
        let b = generate_dataset(&DatasetConfig::test(6, 1), &m, &p).unwrap();
        assert_ne!(a.sigmas, b.sigmas);
    }

    #[test]
    fn balance_and_noise_fraction() {
        let (m, p) = setup();
        let ds = generate_dataset(&DatasetConfig::train(61, 4), &m, &p).unwrap();
        for c in ShapeClass::ALL {
            let count = ds.classes.iter().filter(|&&x| x == c).count();
            assert!((count as i64 - 61 / 6).abs() <= 1, "{c}: {count}");
        }
        assert_eq!(ds.noisy_count(), 30);
        for i in 0..ds.len() {
            match ds.snr_db[i] {
                Some(s) => {
                    assert!(ds.noise_flags[i]);
                    assert!((30.0..=60.0).contains(&s));
                    assert_ne!(ds.voltages[i], ds.clean_voltages[i]);
                }
                None => {
                    assert!(!ds.noise_flags[i]);
                    assert_eq!(ds.voltages[i], ds.clean_voltages[i]);
                }
            }
        }
        let test = generate_dataset(&DatasetConfig::test(12, 4), &m, &p).unwrap();
        assert_eq!(test.noisy_count(), 0);
    }

    #[test]
    fn sample_count_rejected_when_zero() {
        let (m, p) = setup();
        assert!(matches!(
            generate_dataset(&DatasetConfig::train(0, 1), &m, &p),
            Err(PhantomError::InvalidConfig(_))
        ));
    }

    #[test]
    fn thread_count_does_not_matter() {
        let (m, p) = setup();
        let cfg = DatasetConfig::train(12, 5);
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(3)
            .build()
            .unwrap();
        let a = pool.install(|| generate_dataset(&cfg, &m, &p).unwrap());
        let single = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .unwrap();
        let b = single.install(|| generate_dataset(&cfg, &m, &p).unwrap());
        assert_eq!(a, b);
    }
}
