//! Measured voltage frames from CSV.

use std::io::Read;
use std::path::Path;

use super::IoError;
use crate::forward::VoltageFrame;

/// Which row of the file holds the no-contact baseline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BaselineRow {
    #[default]
    First,
    /// Zero-based data row.
    Index(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct MeasuredFrames {
    pub baseline: VoltageFrame,
    /// Contact frames in file order, baseline excluded.
    pub frames: Vec<VoltageFrame>,
}

impl MeasuredFrames {
    /// `frame − V₀` for every contact frame.
    pub fn differences(&self) -> Vec<VoltageFrame> {
        self.frames.iter().map(|f| f.sub(&self.baseline)).collect()
    }
}

/// Reads frames with `n_meas` values per row. Lines starting with `#` are
/// comments; there is no header row. Row numbers in errors are 1-based and
/// count data rows only.
pub fn read_measured_frames<R: Read>(
    r: R,
    n_meas: usize,
    policy: BaselineRow,
) -> Result<MeasuredFrames, IoError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(r);
    let mut rows = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let row = i + 1;
        let rec = rec.map_err(|e| IoError::Csv {
            row,
            message: e.to_string(),
        })?;
        if rec.len() != n_meas {
            return Err(IoError::ColumnCount {
                row,
                expected: n_meas,
                got: rec.len(),
            });
        }
        let mut values = Vec::with_capacity(n_meas);
        for (col, field) in rec.iter().enumerate() {
            let v: f64 = field.parse().map_err(|_| IoError::Csv {
                row,
                message: format!("column {} `{field}` is not a number", col + 1),
            })?;
            if !v.is_finite() {
                return Err(IoError::NonFinite {
                    row,
                    column: col + 1,
                });
            }
            values.push(v);
        }
        rows.push(VoltageFrame::new(values));
    }
    let b = match policy {
        BaselineRow::First => 0,
        BaselineRow::Index(k) => k,
    };
    if b >= rows.len() {
        return Err(IoError::Format(format!(
            "baseline row {} requested, file has {} rows",
            b + 1,
            rows.len()
        )));
    }
    let baseline = rows.remove(b);
    Ok(MeasuredFrames {
        baseline,
        frames: rows,
    })
}

pub fn ingest_measured_frames(
    path: &Path,
    n_meas: usize,
    policy: BaselineRow,
) -> Result<MeasuredFrames, IoError> {
    read_measured_frames(std::fs::File::open(path)?, n_meas, policy)
}

pub fn write_measured_frames(
    path: &Path,
    baseline: &VoltageFrame,
    frames: &[VoltageFrame],
) -> Result<(), IoError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| IoError::Csv {
        row: 0,
        message: e.to_string(),
    })?;
    for (k, f) in std::iter::once(baseline).chain(frames).enumerate() {
        w.write_record(f.values().iter().map(|v| format!("{v:?}")))
            .map_err(|e| IoError::Csv {
                row: k + 1,
                message: e.to_string(),
            })?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn csv_text(rows: &[Vec<f64>]) -> String {
        rows.iter()
            .map(|r| {
                r.iter()
                    .map(|v| format!("{v:?}"))
                    .collect::<Vec<_>>()
                    .join(",")
            })
            .collect::<Vec<_>>()
            .join("\n")
    }

    fn row(k: usize) -> Vec<f64> {
        (0..208)
            .map(|i| 0.5 + 1e-3 * (i * (k + 1)) as f64)
            .collect()
    }

    #[test]
    fn baseline_only() {
        let m =
            read_measured_frames(csv_text(&[row(0)]).as_bytes(), 208, BaselineRow::First).unwrap();
        assert!(m.frames.is_empty());
        assert_eq!(m.baseline.values(), row(0).as_slice());
    }

    #[test]
    fn baseline_and_six_presses() {
        let rows: Vec<_> = (0..7).map(row).collect();
        let text = format!("# sensor log\n{}\n", csv_text(&rows));
        let m = read_measured_frames(text.as_bytes(), 208, BaselineRow::First).unwrap();
        assert_eq!(m.frames.len(), 6);
        let d = m.differences();
        assert!((d[0].values()[10] - (row(1)[10] - row(0)[10])).abs() < 1e-15);

        let m = read_measured_frames(text.as_bytes(), 208, BaselineRow::Index(3)).unwrap();
        assert_eq!(m.baseline.values(), row(3).as_slice());
        assert_eq!(m.frames[3].values(), row(4).as_slice());
        assert!(read_measured_frames(text.as_bytes(), 208, BaselineRow::Index(7)).is_err());
    }

    #[test]
    fn short_row_is_named() {
        let mut rows: Vec<_> = (0..4).map(row).collect();
        rows[2].pop();
        let err =
            read_measured_frames(csv_text(&rows).as_bytes(), 208, BaselineRow::First).unwrap_err();
        assert!(
            matches!(
                err,
                IoError::ColumnCount {
                    row: 3,
                    expected: 208,
                    got: 207
                }
            ),
            "{err}"
        );
        assert!(err.to_string().contains("row 3"));
    }

    #[test]
    fn non_finite_and_garbage() {
        let mut rows: Vec<_> = (0..2).map(row).collect();
        rows[1][5] = f64::NAN;
        let err =
            read_measured_frames(csv_text(&rows).as_bytes(), 208, BaselineRow::First).unwrap_err();
        assert!(
            matches!(err, IoError::NonFinite { row: 2, column: 6 }),
            "{err}"
        );
        let text = csv_text(&[row(0)]).replacen("0.5", "x", 1);
        assert!(matches!(
            read_measured_frames(text.as_bytes(), 208, BaselineRow::First),
            Err(IoError::Csv { row: 1, .. })
        ));
        assert!(read_measured_frames("".as_bytes(), 208, BaselineRow::First).is_err());
    }

    #[test]
    fn writer_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.csv");
        let b = VoltageFrame::new(row(0));
        let f = vec![VoltageFrame::new(row(1)), VoltageFrame::new(row(2))];
        write_measured_frames(&p, &b, &f).unwrap();
        let m = ingest_measured_frames(&p, 208, BaselineRow::First).unwrap();
        assert_eq!(m.baseline, b);
        assert_eq!(m.frames, f);
    }
}
