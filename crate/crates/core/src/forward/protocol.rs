use super::{ForwardError, N_ELECTRODES};

/// Skip-k drive/measurement protocol.
///
/// Drive `i` injects current between electrodes `i` and `(i + skip) mod 16`.
/// For every drive, the measurement pairs are `(j, (j + skip) mod 16)` for
/// `j = 0..16`, dropping any pair that touches a drive electrode. With equal
/// drive and measurement skip this leaves 13 measurements per drive.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Protocol {
    skip: usize,
    drive_pairs: Vec<(usize, usize)>,
    meas_pairs: Vec<Vec<(usize, usize)>>,
}

impl Protocol {
    pub fn new(skip: usize) -> Result<Self, ForwardError> {
        if !(1..=7).contains(&skip) {
            return Err(ForwardError::InvalidSkip(skip));
        }
        let pair = |i: usize| (i, (i + skip) % N_ELECTRODES);
        let drive_pairs: Vec<_> = (0..N_ELECTRODES).map(pair).collect();
        let meas_pairs = drive_pairs
            .iter()
            .map(|&(a, b)| {
                (0..N_ELECTRODES)
                    .map(pair)
                    .filter(|&(p, q)| p != a && p != b && q != a && q != b)
                    .collect::<Vec<_>>()
            })
            .collect();
        Ok(Self {
            skip,
            drive_pairs,
            meas_pairs,
        })
    }

    pub fn skip(&self) -> usize {
        self.skip
    }

    pub fn n_electrodes(&self) -> usize {
        N_ELECTRODES
    }

    pub fn drive_pairs(&self) -> &[(usize, usize)] {
        &self.drive_pairs
    }

    /// Measurement pairs `(M⁺, M⁻)` for drive `d`.
    pub fn meas_pairs(&self, d: usize) -> &[(usize, usize)] {
        &self.meas_pairs[d]
    }

    /// Total number of differential measurements (208 for 16 electrodes).
    pub fn n_measurements(&self) -> usize {
        self.meas_pairs.iter().map(Vec::len).sum()
    }

    /// Iterates `(flat index, drive index, (M⁺, M⁻))` in frame order.
    pub fn measurements(&self) -> impl Iterator<Item = (usize, usize, (usize, usize))> + '_ {
        self.meas_pairs
            .iter()
            .enumerate()
            .flat_map(|(d, pairs)| pairs.iter().map(move |&p| (d, p)))
            .enumerate()
            .map(|(k, (d, p))| (k, d, p))
    }

    /// Flat frame index of measurement pair `pair` under drive `d`.
    pub fn index_of(&self, d: usize, pair: (usize, usize)) -> Option<usize> {
        let offset: usize = self.meas_pairs[..d].iter().map(Vec::len).sum();
        self.meas_pairs[d]
            .iter()
            .position(|&p| p == pair)
            .map(|k| offset + k)
    }

    /// Index of the drive pair equal to `pair`, if any.
    pub fn drive_index(&self, pair: (usize, usize)) -> Option<usize> {
        self.drive_pairs.iter().position(|&p| p == pair)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn skip3_counts() {
        let p = Protocol::new(3).unwrap();
        assert_eq!(p.n_measurements(), 208);
        assert_eq!(p.drive_pairs()[0], (0, 3));
        assert_eq!(p.drive_pairs()[15], (15, 2));
        let kept: Vec<usize> = p.meas_pairs(0).iter().map(|m| m.0).collect();
        let excluded: Vec<usize> = (0..16).filter(|j| !kept.contains(j)).collect();
        assert_eq!(excluded, vec![0, 3, 13]);
    }

    #[test]
    fn every_skip_gives_208_by_enumeration() {
        for skip in 1..=7 {
            let p = Protocol::new(skip).unwrap();
            // brute force: count all (drive, j) combinations with no shared electrode
            let mut count = 0;
            for i in 0..16 {
                let d = [i, (i + skip) % 16];
                for j in 0..16 {
                    let m = [j, (j + skip) % 16];
                    if m.iter().all(|e| !d.contains(e)) {
                        count += 1;
                    }
                }
            }
            assert_eq!(count, 208);
            assert_eq!(p.n_measurements(), 208);
            for d in 0..16 {
                assert_eq!(p.meas_pairs(d).len(), 13);
            }
        }
    }

    #[test]
    fn invalid_skip() {
        assert!(matches!(
            Protocol::new(0),
            Err(ForwardError::InvalidSkip(0))
        ));
        assert!(matches!(
            Protocol::new(8),
            Err(ForwardError::InvalidSkip(8))
        ));
    }

    #[test]
    fn index_lookup_roundtrip() {
        let p = Protocol::new(3).unwrap();
        for (k, d, pair) in p.measurements() {
            assert_eq!(p.index_of(d, pair), Some(k));
        }
    }
}
