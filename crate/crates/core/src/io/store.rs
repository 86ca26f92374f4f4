//! Datasets and trained networks as named archives.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use super::container::{read_archive, write_archive, Archive, Array};
use super::IoError;
use crate::autodiff::{ParameterSet, Tensor};
use crate::forward::{ConductivityImage, SensitivityMatrix, VoltageFrame};
use crate::phantom::{Dataset, ShapeClass, Split};
use crate::phydnn::{ReconNet, ReconNetConfig};
use crate::surrogate::{CnnHead, ForwardNet, ForwardNetConfig};

pub fn save_archive(path: &Path, archive: &Archive) -> Result<(), IoError> {
    let mut w = BufWriter::new(File::create(path)?);
    write_archive(&mut w, archive)?;
    w.flush()?;
    Ok(())
}

pub fn load_archive(path: &Path) -> Result<Archive, IoError> {
    read_archive(&mut BufReader::new(File::open(path)?))
}

fn stack(rows: impl Iterator<Item = impl AsRef<[f64]>>, dims: &[usize]) -> Result<Array, IoError> {
    let mut data = Vec::with_capacity(dims.iter().product());
    for r in rows {
        data.extend_from_slice(r.as_ref());
    }
    Array::f64(dims, data)
}

fn expect_dims(a: &Array, name: &str, dims: &[usize]) -> Result<(), IoError> {
    if a.dims() != dims {
        return Err(IoError::Shape(format!(
            "`{name}` has dims {:?}, expected {dims:?}",
            a.dims()
        )));
    }
    Ok(())
}

fn scalar_u64(x: f64, what: &str) -> Result<u64, IoError> {
    if x >= 0.0 && x.fract() == 0.0 && x < 2f64.powi(53) {
        Ok(x as u64)
    } else {
        Err(IoError::Format(format!("{what} = {x} is not a count")))
    }
}

/// Stacked `[N × n × n]` images.
pub fn images_to_array(images: &[ConductivityImage]) -> Result<Array, IoError> {
    let n = images.first().map_or(0, |i| i.grid_n());
    if images.iter().any(|i| i.grid_n() != n) {
        return Err(IoError::Shape("images differ in size".into()));
    }
    stack(images.iter().map(|i| i.values()), &[images.len(), n, n])
}

pub fn images_from_array(a: &Array) -> Result<Vec<ConductivityImage>, IoError> {
    let &[count, n, m] = a.dims() else {
        return Err(IoError::Shape(format!(
            "image stack has dims {:?}",
            a.dims()
        )));
    };
    if n != m {
        return Err(IoError::Shape(format!("images are {n}×{m}")));
    }
    let v = a.to_f64();
    (0..count)
        .map(|k| {
            ConductivityImage::new(n, v[k * n * n..(k + 1) * n * n].to_vec())
                .map_err(|e| IoError::Format(e.to_string()))
        })
        .collect()
}

/// Stacked `[N × m]` frames.
pub fn frames_to_array(frames: &[VoltageFrame]) -> Result<Array, IoError> {
    let m = frames.first().map_or(0, |f| f.len());
    if frames.iter().any(|f| f.len() != m) {
        return Err(IoError::Shape("frames differ in length".into()));
    }
    stack(frames.iter().map(|f| f.values()), &[frames.len(), m])
}

pub fn frames_from_array(a: &Array) -> Result<Vec<VoltageFrame>, IoError> {
    let &[count, m] = a.dims() else {
        return Err(IoError::Shape(format!(
            "frame stack has dims {:?}",
            a.dims()
        )));
    };
    let v = a.to_f64();
    Ok((0..count)
        .map(|k| VoltageFrame::new(v[k * m..(k + 1) * m].to_vec()))
        .collect())
}

pub fn dataset_to_archive(d: &Dataset) -> Result<Archive, IoError> {
    let n = d.grid_n;
    let len = d.len();
    let mut ar = Archive::new();
    ar.insert(
        "dataset.meta",
        Array::f64(
            &[4],
            vec![
                n as f64,
                d.split.code() as f64,
                (d.seed >> 32) as f64,
                (d.seed & 0xffff_ffff) as f64,
            ],
        )?,
    );
    ar.insert(
        "sigma",
        stack(d.sigmas.iter().map(|s| s.values()), &[len, n, n])?,
    );
    ar.insert("voltage", frames_to_array(&d.voltages)?);
    ar.insert("clean_voltage", frames_to_array(&d.clean_voltages)?);
    ar.insert(
        "class",
        Array::f64(&[len], d.classes.iter().map(|c| c.code() as f64).collect())?,
    );
    ar.insert(
        "noisy",
        Array::f64(
            &[len],
            d.noise_flags.iter().map(|&f| f as u8 as f64).collect(),
        )?,
    );
    ar.insert(
        "snr_db",
        Array::f64(
            &[len],
            d.snr_db.iter().map(|s| s.unwrap_or(f64::NAN)).collect(),
        )?,
    );
    Ok(ar)
}

pub fn dataset_from_archive(ar: &Archive) -> Result<Dataset, IoError> {
    let meta = ar.require("dataset.meta")?.to_f64();
    if meta.len() != 4 {
        return Err(IoError::Format("dataset.meta needs 4 values".into()));
    }
    let grid_n = scalar_u64(meta[0], "grid")? as usize;
    let split = Split::from_code(scalar_u64(meta[1], "split")? as u8)
        .ok_or_else(|| IoError::Format(format!("unknown split code {}", meta[1])))?;
    let seed = (scalar_u64(meta[2], "seed")? << 32) | scalar_u64(meta[3], "seed")?;
    let sigma = ar.require("sigma")?;
    let len = sigma.dims().first().copied().unwrap_or(0);
    expect_dims(sigma, "sigma", &[len, grid_n, grid_n])?;
    let sigmas = images_from_array(sigma)?;
    let voltages = frames_from_array(ar.require("voltage")?)?;
    let clean_voltages = frames_from_array(ar.require("clean_voltage")?)?;
    let per_sample = |name: &str| -> Result<Vec<f64>, IoError> {
        let a = ar.require(name)?;
        expect_dims(a, name, &[len])?;
        Ok(a.to_f64())
    };
    let classes = per_sample("class")?
        .into_iter()
        .map(|c| {
            ShapeClass::from_code(c as u8)
                .ok_or_else(|| IoError::Format(format!("unknown class code {c}")))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let noise_flags = per_sample("noisy")?.into_iter().map(|f| f != 0.0).collect();
    let snr_db = per_sample("snr_db")?
        .into_iter()
        .map(|s| if s.is_nan() { None } else { Some(s) })
        .collect();
    if voltages.len() != len || clean_voltages.len() != len {
        return Err(IoError::Shape("voltage and image counts differ".into()));
    }
    Ok(Dataset {
        grid_n,
        split,
        seed,
        classes,
        sigmas,
        clean_voltages,
        voltages,
        noise_flags,
        snr_db,
    })
}

pub fn save_dataset(path: &Path, d: &Dataset) -> Result<(), IoError> {
    save_archive(path, &dataset_to_archive(d)?)
}

pub fn load_dataset(path: &Path) -> Result<Dataset, IoError> {
    dataset_from_archive(&load_archive(path)?)
}

fn insert_params(ar: &mut Archive, params: &ParameterSet<f32>) -> Result<(), IoError> {
    for (name, t) in params.iter() {
        ar.insert(
            &format!("param/{name}"),
            Array::f32(t.shape(), t.data().to_vec())?,
        );
    }
    Ok(())
}

fn collect_params(ar: &Archive) -> Result<ParameterSet<f32>, IoError> {
    let mut params = ParameterSet::new();
    for (name, a) in ar.iter() {
        if let Some(p) = name.strip_prefix("param/") {
            params.push(p, Tensor::new(a.dims().to_vec(), a.clone().into_f32()?));
        }
    }
    Ok(params)
}

pub fn forward_net_to_archive(net: &ForwardNet<f32>) -> Result<Archive, IoError> {
    let cfg = net.config();
    let j = net.jacobian();
    let n = net.grid_n();
    let head = match cfg.head {
        CnnHead::GlobalMean => 0.0,
        CnnHead::Flatten => 1.0,
    };
    let mut ar = Archive::new();
    ar.insert(
        "surrogate.meta",
        Array::f64(
            &[5],
            vec![
                cfg.channels[0] as f64,
                cfg.channels[1] as f64,
                cfg.channels[2] as f64,
                head,
                n as f64,
            ],
        )?,
    );
    ar.insert(
        "jacobian",
        Array::f64(&[j.rows(), j.cols()], j.entries().to_vec())?,
    );
    ar.insert(
        "sigma0",
        Array::f64(&[n, n], j.baseline().values().to_vec())?,
    );
    ar.insert(
        "v0",
        Array::f64(&[net.n_meas()], net.v0().values().to_vec())?,
    );
    insert_params(&mut ar, net.params())?;
    Ok(ar)
}

pub fn forward_net_from_archive(ar: &Archive) -> Result<ForwardNet<f32>, IoError> {
    let meta = ar.require("surrogate.meta")?.to_f64();
    if meta.len() != 5 {
        return Err(IoError::Format("surrogate.meta needs 5 values".into()));
    }
    let ch = |k: usize| scalar_u64(meta[k], "channel count").map(|c| c as usize);
    let head = match meta[3] {
        h if h == 0.0 => CnnHead::GlobalMean,
        h if h == 1.0 => CnnHead::Flatten,
        h => return Err(IoError::Format(format!("unknown head code {h}"))),
    };
    let config = ForwardNetConfig {
        channels: [ch(0)?, ch(1)?, ch(2)?],
        head,
    };
    let n = ch(4)?;
    let ja = ar.require("jacobian")?;
    let &[rows, cols] = ja.dims() else {
        return Err(IoError::Shape("jacobian must be a matrix".into()));
    };
    let s0 = ar.require("sigma0")?;
    expect_dims(s0, "sigma0", &[n, n])?;
    let baseline =
        ConductivityImage::new(n, s0.to_f64()).map_err(|e| IoError::Format(e.to_string()))?;
    let j = SensitivityMatrix::from_parts(rows, cols, ja.to_f64(), baseline)
        .map_err(|e| IoError::Format(e.to_string()))?;
    let v0 = VoltageFrame::new(ar.require("v0")?.to_f64());
    ForwardNet::from_parts(j, v0, config, collect_params(ar)?)
        .map_err(|e| IoError::Format(e.to_string()))
}

/// A reconstruction network with the β it was trained with.
#[derive(Debug, Clone)]
pub struct ReconCheckpoint {
    pub net: ReconNet<f32>,
    pub beta: f64,
}

pub fn recon_net_to_archive(net: &ReconNet<f32>, beta: f64) -> Result<Archive, IoError> {
    let c = net.config();
    let mut ar = Archive::new();
    ar.insert(
        "recon.meta",
        Array::f64(
            &[5],
            vec![
                c.grid_n as f64,
                c.n_meas as f64,
                c.base_channels as f64,
                c.depth as f64,
                beta,
            ],
        )?,
    );
    ar.insert("v0", Array::f64(&[c.n_meas], net.v0().into_values())?);
    insert_params(&mut ar, net.params())?;
    Ok(ar)
}

pub fn recon_net_from_archive(ar: &Archive) -> Result<ReconCheckpoint, IoError> {
    let meta = ar.require("recon.meta")?.to_f64();
    if meta.len() != 5 {
        return Err(IoError::Format("recon.meta needs 5 values".into()));
    }
    let u = |k: usize| scalar_u64(meta[k], "network size").map(|c| c as usize);
    let config = ReconNetConfig {
        grid_n: u(0)?,
        n_meas: u(1)?,
        base_channels: u(2)?,
        depth: u(3)?,
    };
    let v0 = VoltageFrame::new(ar.require("v0")?.to_f64());
    let net = ReconNet::from_parts(config, &v0, collect_params(ar)?)
        .map_err(|e| IoError::Format(e.to_string()))?;
    Ok(ReconCheckpoint { net, beta: meta[4] })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::{compute_jacobian, solve_forward, Mesh, Protocol};
    use crate::phantom::{generate_dataset, DatasetConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn bytes(ar: &Archive) -> Vec<u8> {
        let mut v = Vec::new();
        write_archive(&mut v, ar).unwrap();
        v
    }

    #[test]
    fn dataset_round_trip() {
        let mesh = Mesh::with_default_width(16).unwrap();
        let proto = Protocol::new(3).unwrap();
        let d = generate_dataset(&DatasetConfig::train(6, u64::MAX - 3), &mesh, &proto).unwrap();
        let ar = dataset_to_archive(&d).unwrap();
        let back =
            dataset_from_archive(&read_archive(&mut bytes(&ar).as_slice()).unwrap()).unwrap();
        assert_eq!(back.seed, d.seed);
        assert_eq!(
            back.snr_db.iter().filter(|s| s.is_some()).count(),
            d.noisy_count()
        );
        assert_eq!(bytes(&dataset_to_archive(&back).unwrap()), bytes(&ar));
    }

    #[test]
    fn networks_round_trip() {
        let n = 16;
        let mesh = Mesh::with_default_width(n).unwrap();
        let proto = Protocol::new(3).unwrap();
        let s0 = ConductivityImage::uniform(n, 1.0);
        let j = compute_jacobian(&mesh, &s0, &proto).unwrap();
        let v0 = solve_forward(&mesh, &s0, &proto).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let sur = crate::surrogate::build_forward_net(j, v0.clone(), n, &mut rng).unwrap();
        let ar = forward_net_to_archive(&sur).unwrap();
        let back = forward_net_from_archive(&ar).unwrap();
        assert_eq!(back.params(), sur.params());
        assert_eq!(back.jacobian().entries(), sur.jacobian().entries());
        assert!(matches!(
            recon_net_from_archive(&ar),
            Err(IoError::MissingEntry(_))
        ));

        let net = ReconNet::new(
            ReconNetConfig::for_grid(n).with_base_channels(2),
            &v0,
            &mut rng,
        )
        .unwrap();
        let ar = recon_net_to_archive(&net, 0.0029).unwrap();
        let ck = recon_net_from_archive(&ar).unwrap();
        assert_eq!(ck.beta, 0.0029);
        assert_eq!(ck.net.params().digest(), net.params().digest());
        assert_eq!(
            bytes(&recon_net_to_archive(&ck.net, ck.beta).unwrap()),
            bytes(&ar)
        );
    }
}
