//! Versioned binary container for parameter checkpoints and session
//! caches: a small header, a JSON metadata blob, a shape manifest, and
//! little-endian f64 payloads per named tensor.
//!
//! Values are stored as f64 regardless of the run's compute precision; the
//! `dtype` field records which precision produced them so loads can check
//! compatibility. f32 -> f64 -> f32 round-trips exactly.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{CoreError, Result};
use crate::scalar::Scalar;
use crate::tensor::Mat;

const MAGIC: &[u8; 8] = b"SGCONT01";
const VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct Container {
    /// Precision of the run that produced the tensors ("f32" / "f64").
    pub dtype: String,
    /// Free-form metadata (stage tag, config, config hash, ...).
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Mat<f64>)>,
}

impl Container {
    pub fn new(dtype: &str, meta: serde_json::Value) -> Self {
        Container { dtype: dtype.to_string(), meta, tensors: Vec::new() }
    }

    pub fn push<T: Scalar>(&mut self, name: &str, m: &Mat<T>) {
        self.tensors.push((name.to_string(), m.cast::<f64>()));
    }

    pub fn get(&self, name: &str) -> Option<&Mat<f64>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, m)| m)
    }

    pub fn require(&self, name: &str) -> Result<&Mat<f64>> {
        self.get(name)
            .ok_or_else(|| CoreError::data(format!("container missing tensor '{name}'")))
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        write_str(&mut w, &self.dtype)?;
        let meta = serde_json::to_string(&self.meta)?;
        write_str(&mut w, &meta)?;
        w.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        for (name, m) in &self.tensors {
            write_str(&mut w, name)?;
            w.write_all(&(m.rows as u64).to_le_bytes())?;
            w.write_all(&(m.cols as u64).to_le_bytes())?;
            for &v in &m.data {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Container> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(CoreError::data("not a checkpoint container (bad magic)"));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(CoreError::data(format!("unsupported container version {version}")));
        }
        let dtype = read_str(&mut r)?;
        let meta: serde_json::Value = serde_json::from_str(&read_str(&mut r)?)?;
        let n_tensors = read_u32(&mut r)? as usize;
        let mut tensors = Vec::with_capacity(n_tensors);
        for _ in 0..n_tensors {
            let name = read_str(&mut r)?;
            let rows = read_u64(&mut r)? as usize;
            let cols = read_u64(&mut r)? as usize;
            let mut data = vec![0f64; rows * cols];
            let mut buf = [0u8; 8];
            for v in data.iter_mut() {
                r.read_exact(&mut buf)?;
                *v = f64::from_le_bytes(buf);
            }
            tensors.push((name, Mat::from_vec(rows, cols, data)));
        }
        Ok(Container { dtype, meta, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_to(std::io::BufWriter::new(f))
    }

    pub fn load(path: &Path) -> Result<Container> {
        let f = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(f))
    }
}

fn write_str(w: &mut impl Write, s: &str) -> Result<()> {
    let bytes = s.as_bytes();
    w.write_all(&(bytes.len() as u32).to_le_bytes())?;
    w.write_all(bytes)?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

fn read_str(r: &mut impl Read) -> Result<String> {
    let len = read_u32(r)? as usize;
    if len > 1 << 24 {
        return Err(CoreError::data("container string too long"));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|_| CoreError::data("container string not utf8"))
}
