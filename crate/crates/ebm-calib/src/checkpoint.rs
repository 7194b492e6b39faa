//! Binary checkpoint format for named f64 tensors.
//!
//! Layout (all integers little-endian): magic `EBMC`, u32 version, then one
//! record per tensor: u32 name length, UTF-8 name bytes, u32 rank, u64 dims,
//! f64 data in row-major order. Records are read until end of file. Writing
//! preserves insertion order, so a checkpoint written from the same state is
//! byte-identical.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use thiserror::Error;

pub const MAGIC: [u8; 4] = *b"EBMC";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic {found:?}, expected {expected:?}")]
    BadMagic { found: [u8; 4], expected: [u8; 4] },
    #[error("unsupported version {found}, expected {expected}")]
    BadVersion { found: u32, expected: u32 },
    #[error("tensor name is not valid UTF-8: {0}")]
    BadName(#[from] std::string::FromUtf8Error),
    #[error("truncated record for tensor {name:?}: expected {expected} values")]
    Truncated { name: String, expected: usize },
    #[error("tensor {0:?} appears twice")]
    DuplicateName(String),
}

/// One named tensor: shape plus row-major values.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Write tensors in the given order.
pub fn save(path: &Path, tensors: &[NamedTensor]) -> Result<(), CheckpointError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    for t in tensors {
        let name = t.name.as_bytes();
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&(t.shape.len() as u32).to_le_bytes())?;
        for &d in &t.shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &v in &t.data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Read all records until end of file, verifying magic and version.
pub fn load(path: &Path) -> Result<Vec<NamedTensor>, CheckpointError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if magic != MAGIC {
        return Err(CheckpointError::BadMagic {
            found: magic,
            expected: MAGIC,
        });
    }
    let mut v4 = [0u8; 4];
    r.read_exact(&mut v4)?;
    let version = u32::from_le_bytes(v4);
    if version != VERSION {
        return Err(CheckpointError::BadVersion {
            found: version,
            expected: VERSION,
        });
    }

    let mut out: Vec<NamedTensor> = Vec::new();
    loop {
        let mut len4 = [0u8; 4];
        match r.read_exact(&mut len4) {
            Ok(()) => {}
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(e.into()),
        }
        let name_len = u32::from_le_bytes(len4) as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes)?;
        let name = String::from_utf8(name_bytes)?;
        if out.iter().any(|t| t.name == name) {
            return Err(CheckpointError::DuplicateName(name));
        }
        r.read_exact(&mut len4)?;
        let rank = u32::from_le_bytes(len4) as usize;
        let mut shape = Vec::with_capacity(rank);
        let mut d8 = [0u8; 8];
        for _ in 0..rank {
            r.read_exact(&mut d8)?;
            shape.push(u64::from_le_bytes(d8) as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            if let Err(e) = r.read_exact(&mut d8) {
                if e.kind() == std::io::ErrorKind::UnexpectedEof {
                    return Err(CheckpointError::Truncated {
                        name,
                        expected: numel,
                    });
                }
                return Err(e.into());
            }
            data.push(f64::from_le_bytes(d8));
        }
        out.push(NamedTensor { name, shape, data });
    }
    Ok(out)
}
