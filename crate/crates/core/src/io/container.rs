//! `EITD` tensor container and named archives.
//!
//! Header: magic `EITD`, version, dtype, rank, one pad byte, then `rank`
//! little-endian `u64` dims. The payload follows in row-major order, also
//! little-endian.

use std::io::{Read, Write};

use super::IoError;

pub const MAGIC: [u8; 4] = *b"EITD";
pub const VERSION: u8 = 1;
pub const DTYPE_F32: u8 = 1;
pub const DTYPE_F64: u8 = 2;

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl Payload {
    pub fn len(&self) -> usize {
        match self {
            Payload::F32(v) => v.len(),
            Payload::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn dtype(&self) -> u8 {
        match self {
            Payload::F32(_) => DTYPE_F32,
            Payload::F64(_) => DTYPE_F64,
        }
    }
}

/// A dense tensor as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct Array {
    dims: Vec<usize>,
    payload: Payload,
}

impl Array {
    pub fn new(dims: Vec<usize>, payload: Payload) -> Result<Self, IoError> {
        let n = element_count(&dims)?;
        if n != payload.len() {
            return Err(IoError::Shape(format!(
                "dims {dims:?} need {n} values, got {}",
                payload.len()
            )));
        }
        if dims.len() > u8::MAX as usize {
            return Err(IoError::Shape(format!("rank {} exceeds 255", dims.len())));
        }
        Ok(Self { dims, payload })
    }

    pub fn f64(dims: &[usize], data: Vec<f64>) -> Result<Self, IoError> {
        Self::new(dims.to_vec(), Payload::F64(data))
    }

    pub fn f32(dims: &[usize], data: Vec<f32>) -> Result<Self, IoError> {
        Self::new(dims.to_vec(), Payload::F32(data))
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn payload(&self) -> &Payload {
        &self.payload
    }

    /// Values widened to `f64`.
    pub fn to_f64(&self) -> Vec<f64> {
        match &self.payload {
            Payload::F32(v) => v.iter().map(|&x| x as f64).collect(),
            Payload::F64(v) => v.clone(),
        }
    }

    pub fn into_f64(self) -> Result<Vec<f64>, IoError> {
        match self.payload {
            Payload::F64(v) => Ok(v),
            Payload::F32(_) => Err(IoError::Dtype(DTYPE_F32)),
        }
    }

    pub fn into_f32(self) -> Result<Vec<f32>, IoError> {
        match self.payload {
            Payload::F32(v) => Ok(v),
            Payload::F64(_) => Err(IoError::Dtype(DTYPE_F64)),
        }
    }

    pub fn header_len(&self) -> usize {
        8 + 8 * self.dims.len()
    }

    pub fn encoded_len(&self) -> usize {
        let width = match self.payload {
            Payload::F32(_) => 4,
            Payload::F64(_) => 8,
        };
        self.header_len() + width * self.payload.len()
    }
}

fn element_count(dims: &[usize]) -> Result<usize, IoError> {
    dims.iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or(IoError::DimOverflow)
}

pub fn write_container<W: Write>(w: &mut W, a: &Array) -> Result<(), IoError> {
    let mut buf = Vec::with_capacity(a.encoded_len());
    buf.extend_from_slice(&MAGIC);
    buf.extend_from_slice(&[VERSION, a.payload.dtype(), a.dims.len() as u8, 0]);
    for &d in &a.dims {
        buf.extend_from_slice(&(d as u64).to_le_bytes());
    }
    match &a.payload {
        Payload::F32(v) => v
            .iter()
            .for_each(|x| buf.extend_from_slice(&x.to_le_bytes())),
        Payload::F64(v) => v
            .iter()
            .for_each(|x| buf.extend_from_slice(&x.to_le_bytes())),
    }
    w.write_all(&buf)?;
    Ok(())
}

fn read_full<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<(), IoError> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => IoError::Truncated,
        _ => IoError::Io(e),
    })
}

/// Reads one container. The header is validated before any payload bytes
/// are consumed.
pub fn read_container<R: Read>(r: &mut R) -> Result<Array, IoError> {
    let mut head = [0u8; 8];
    read_full(r, &mut head)?;
    if head[..4] != MAGIC {
        return Err(IoError::Magic([head[0], head[1], head[2], head[3]]));
    }
    if head[4] != VERSION {
        return Err(IoError::Version(head[4]));
    }
    let width = match head[5] {
        DTYPE_F32 => 4usize,
        DTYPE_F64 => 8,
        d => return Err(IoError::Dtype(d)),
    };
    let rank = head[6] as usize;
    let mut dims = Vec::with_capacity(rank);
    for _ in 0..rank {
        let mut d = [0u8; 8];
        read_full(r, &mut d)?;
        dims.push(usize::try_from(u64::from_le_bytes(d)).map_err(|_| IoError::DimOverflow)?);
    }
    let n = element_count(&dims)?;
    let bytes = n.checked_mul(width).ok_or(IoError::DimOverflow)?;
    let mut raw = Vec::new();
    r.take(bytes as u64).read_to_end(&mut raw)?;
    if raw.len() != bytes {
        return Err(IoError::Truncated);
    }
    let payload = if width == 4 {
        Payload::F32(
            raw.chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        )
    } else {
        Payload::F64(
            raw.chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        )
    };
    Ok(Array { dims, payload })
}

/// Ordered collection of named containers.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Archive {
    entries: Vec<(String, Array)>,
}

impl Archive {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds or replaces `name`.
    pub fn insert(&mut self, name: &str, a: Array) {
        match self.entries.iter_mut().find(|(n, _)| n == name) {
            Some(slot) => slot.1 = a,
            None => self.entries.push((name.to_string(), a)),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Array> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, a)| a)
    }

    pub fn require(&self, name: &str) -> Result<&Array, IoError> {
        self.get(name)
            .ok_or_else(|| IoError::MissingEntry(name.to_string()))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array)> {
        self.entries.iter().map(|(n, a)| (n.as_str(), a))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

pub fn write_archive<W: Write>(w: &mut W, archive: &Archive) -> Result<(), IoError> {
    let count =
        u32::try_from(archive.len()).map_err(|_| IoError::Shape("too many entries".into()))?;
    w.write_all(&count.to_le_bytes())?;
    for (name, a) in archive.iter() {
        let len = u16::try_from(name.len())
            .map_err(|_| IoError::Shape(format!("name `{name}` too long")))?;
        w.write_all(&len.to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        write_container(w, a)?;
    }
    Ok(())
}

pub fn read_archive<R: Read>(r: &mut R) -> Result<Archive, IoError> {
    let mut c = [0u8; 4];
    read_full(r, &mut c)?;
    let count = u32::from_le_bytes(c);
    let mut archive = Archive::new();
    for _ in 0..count {
        let mut l = [0u8; 2];
        read_full(r, &mut l)?;
        let mut name = vec![0u8; u16::from_le_bytes(l) as usize];
        read_full(r, &mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| IoError::Format("entry name is not UTF-8".into()))?;
        let a = read_container(r)?;
        archive.entries.push((name, a));
    }
    Ok(archive)
}
