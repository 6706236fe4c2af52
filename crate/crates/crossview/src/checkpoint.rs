//! Binary checkpoint container shared by the model and the optimizer.
//!
//! Layout: magic bytes `"TGCKPT1\n"`, then a record count, then per
//! array: name length + name bytes, rank, extents, raw 32-bit floats.
//! All integers are 64-bit little-endian, floats 32-bit little-endian.
//! Round-trips are bit-exact.

use crate::tensor::Tensor;
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;
use thiserror::Error;

pub const MAGIC: &[u8; 8] = b"TGCKPT1\n";

/// Optimizer state is stored under this name prefix so model arrays and
/// optimizer arrays cannot collide.
pub const OPT_PREFIX: &str = "opt/";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("bad magic bytes; not a checkpoint file")]
    BadMagic,
    #[error("corrupt checkpoint: {0}")]
    Corrupt(&'static str),
    #[error("duplicate array name {0:?}")]
    DuplicateName(String),
    #[error("array {0:?} not found in checkpoint")]
    Missing(String),
}

/// Ordered collection of named f32 arrays.
#[derive(Default, Clone)]
pub struct Checkpoint {
    entries: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, t: Tensor<f32>) -> Result<(), CheckpointError> {
        if self.entries.iter().any(|(n, _)| n == name) {
            return Err(CheckpointError::DuplicateName(name.to_string()));
        }
        self.entries.push((name.to_string(), t));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor<f32>, CheckpointError> {
        self.get(name)
            .ok_or_else(|| CheckpointError::Missing(name.to_string()))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<f32>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<(), CheckpointError> {
        w.write_all(MAGIC)?;
        w.write_all(&(self.entries.len() as u64).to_le_bytes())?;
        for (name, t) in &self.entries {
            let bytes = name.as_bytes();
            w.write_all(&(bytes.len() as u64).to_le_bytes())?;
            w.write_all(bytes)?;
            w.write_all(&(t.rank() as u64).to_le_bytes())?;
            for &e in t.shape() {
                w.write_all(&(e as u64).to_le_bytes())?;
            }
            for &v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self, CheckpointError> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)
            .map_err(|_| CheckpointError::Corrupt("missing magic"))?;
        if &magic != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let count = read_u64(r)?;
        let mut out = Self::new();
        for _ in 0..count {
            let name_len = read_u64(r)? as usize;
            if name_len > 1 << 20 {
                return Err(CheckpointError::Corrupt("name length implausible"));
            }
            let mut name_bytes = vec![0u8; name_len];
            r.read_exact(&mut name_bytes)
                .map_err(|_| CheckpointError::Corrupt("truncated name"))?;
            let name = String::from_utf8(name_bytes)
                .map_err(|_| CheckpointError::Corrupt("name not utf-8"))?;
            let rank = read_u64(r)? as usize;
            if rank == 0 || rank > 8 {
                return Err(CheckpointError::Corrupt("rank out of range"));
            }
            let mut shape = Vec::with_capacity(rank);
            let mut numel: u64 = 1;
            for _ in 0..rank {
                let e = read_u64(r)?;
                numel = numel
                    .checked_mul(e)
                    .ok_or(CheckpointError::Corrupt("extent overflow"))?;
                shape.push(e as usize);
            }
            if numel > 1 << 32 {
                return Err(CheckpointError::Corrupt("array implausibly large"));
            }
            let mut data = Vec::with_capacity(numel as usize);
            let mut buf = [0u8; 4];
            for _ in 0..numel {
                r.read_exact(&mut buf)
                    .map_err(|_| CheckpointError::Corrupt("truncated payload"))?;
                data.push(f32::from_le_bytes(buf));
            }
            let t = Tensor::new(shape, data)
                .map_err(|_| CheckpointError::Corrupt("bad shape"))?;
            out.insert(&name, t)?;
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let mut r = BufReader::new(File::open(path)?);
        Self::read_from(&mut r)
    }
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64, CheckpointError> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)
        .map_err(|_| CheckpointError::Corrupt("truncated integer"))?;
    Ok(u64::from_le_bytes(buf))
}
