//! 8-bit binary graymap export.

use std::io::Write;
use std::path::{Path, PathBuf};

use super::IoError;
use crate::forward::ConductivityImage;

/// Normalisation used for an exported image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExportInfo {
    pub min: f64,
    pub max: f64,
    /// Set when `min == max`; every pixel is then mid-gray.
    pub constant: bool,
}

impl ExportInfo {
    /// Value represented by gray level `p`.
    pub fn dequantize(&self, p: u8) -> f64 {
        if self.constant {
            self.min
        } else {
            self.min + (self.max - self.min) * p as f64 / 255.0
        }
    }
}

/// Min–max scaled gray levels, row 0 first.
pub fn quantize(img: &ConductivityImage) -> Result<(Vec<u8>, ExportInfo), IoError> {
    if !img.is_finite() {
        return Err(IoError::Format("image has non-finite pixels".into()));
    }
    let v = img.values();
    let min = v.iter().copied().fold(f64::INFINITY, f64::min);
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if min == max {
        return Ok((
            vec![128; v.len()],
            ExportInfo {
                min,
                max,
                constant: true,
            },
        ));
    }
    let px = v
        .iter()
        .map(|&x| ((x - min) / (max - min) * 255.0).round() as u8)
        .collect();
    Ok((
        px,
        ExportInfo {
            min,
            max,
            constant: false,
        },
    ))
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".range");
    PathBuf::from(s)
}

/// Writes a P5 graymap at `path` and the normalisation to `path.range`.
pub fn export_image(img: &ConductivityImage, path: &Path) -> Result<ExportInfo, IoError> {
    let (px, info) = quantize(img)?;
    let n = img.grid_n();
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(f, "P5\n{n} {n}\n255\n")?;
    f.write_all(&px)?;
    f.flush()?;
    std::fs::write(
        sidecar_path(path),
        format!(
            "min = {:?}\nmax = {:?}\nconstant = {}\n",
            info.min, info.max, info.constant
        ),
    )?;
    Ok(info)
}

/// Reads back a graymap written by [`export_image`] with its sidecar.
pub fn read_exported(path: &Path) -> Result<(usize, usize, Vec<u8>, ExportInfo), IoError> {
    let bytes = std::fs::read(path)?;
    let bad = || IoError::Format("not an 8-bit P5 graymap".into());
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad());
        }
        fields.push(
            std::str::from_utf8(&bytes[start..pos])
                .map_err(|_| bad())?
                .to_string(),
        );
    }
    pos += 1;
    if fields[0] != "P5" || fields[3] != "255" {
        return Err(bad());
    }
    let w: usize = fields[1].parse().map_err(|_| bad())?;
    let h: usize = fields[2].parse().map_err(|_| bad())?;
    let px = bytes
        .get(pos..pos + w * h)
        .ok_or(IoError::Truncated)?
        .to_vec();

    let side = std::fs::read_to_string(sidecar_path(path))?;
    let mut info = ExportInfo {
        min: f64::NAN,
        max: f64::NAN,
        constant: false,
    };
    for line in side.lines() {
        let Some((k, v)) = line.split_once('=') else {
            continue;
        };
        let v = v.trim();
        match k.trim() {
            "min" => info.min = v.parse().map_err(|_| bad())?,
            "max" => info.max = v.parse().map_err(|_| bad())?,
            "constant" => info.constant = v == "true",
            _ => {}
        }
    }
    Ok((w, h, px, info))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkerboard_levels() {
        let img = ConductivityImage::new(2, vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let (px, info) = quantize(&img).unwrap();
        assert_eq!(px, [0, 255, 255, 0]);
        assert!(!info.constant);
    }

    #[test]
    fn constant_is_mid_gray() {
        let (px, info) = quantize(&ConductivityImage::uniform(3, 0.7)).unwrap();
        assert!(px.iter().all(|&p| p == 128));
        assert!(info.constant);
        assert_eq!(info.dequantize(128), 0.7);
    }

    #[test]
    fn file_round_trip_within_quantisation() {
        let n = 8;
        let vals: Vec<f64> = (0..n * n)
            .map(|i| 0.2 + 0.8 * ((i * 37) % 64) as f64 / 63.0)
            .collect();
        let img = ConductivityImage::new(n, vals.clone()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sigma.pgm");
        export_image(&img, &p).unwrap();
        let (w, h, px, info) = read_exported(&p).unwrap();
        assert_eq!((w, h), (n, n));
        let step = (info.max - info.min) / 255.0;
        for (q, v) in px.iter().zip(&vals) {
            assert!((info.dequantize(*q) - v).abs() <= 0.5 * step + 1e-12);
        }
        assert!(std::fs::read(&p).unwrap().starts_with(b"P5\n8 8\n255\n"));
    }

    #[test]
    fn rejects_nan() {
        let img = ConductivityImage::new(2, vec![0.0, f64::NAN, 1.0, 0.0]);
        if let Ok(img) = img {
            assert!(quantize(&img).is_err());
        }
    }
}
