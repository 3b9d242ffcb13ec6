//! `KSCK` parameter checkpoints: magic, version byte, then one record per
//! parameter (u32 name length, UTF-8 name, u32 rank, u32 dims, f64 values),
//! all little-endian.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::scalar::Scalar;

use super::{ParamSet, Tensor};

const MAGIC: &[u8; 4] = b"KSCK";
const VERSION: u8 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    BadVersion(u8),
    #[error("checkpoint truncated in parameter record {index}")]
    Truncated { index: usize },
    #[error("parameter name is not UTF-8")]
    BadName,
    #[error("parameter {name}: invalid shape {shape:?}")]
    BadShape { name: String, shape: Vec<usize> },
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub fn write_params<T: Scalar, W: Write>(params: &ParamSet<T>, mut w: W) -> io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&[VERSION])?;
    for (name, t) in params.iter() {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for v in t.values() {
            w.write_all(&v.to_f64().unwrap_or(f64::NAN).to_le_bytes())?;
        }
    }
    w.flush()
}

/// Fills `buf` completely, or reports whether the stream ended before the
/// first byte (`Ok(false)`) or part-way (`Err`).
fn read_exact_or_eof<R: Read>(r: &mut R, buf: &mut [u8]) -> io::Result<bool> {
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..]) {
            Ok(0) if filled == 0 => return Ok(false),
            Ok(0) => return Err(io::ErrorKind::UnexpectedEof.into()),
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    Ok(true)
}

fn read_u32<R: Read>(r: &mut R) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_params<T: Scalar, R: Read>(mut r: R) -> Result<ParamSet<T>, CheckpointError> {
    let mut magic = [0u8; 4];
    if !read_exact_or_eof(&mut r, &mut magic)? || &magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let mut version = [0u8; 1];
    if !read_exact_or_eof(&mut r, &mut version)? {
        return Err(CheckpointError::BadMagic);
    }
    if version[0] != VERSION {
        return Err(CheckpointError::BadVersion(version[0]));
    }
    let mut params = ParamSet::new();
    for index in 0.. {
        let mut len = [0u8; 4];
        let more = read_exact_or_eof(&mut r, &mut len).map_err(|_| CheckpointError::Truncated { index })?;
        if !more {
            break;
        }
        let truncated = |_| CheckpointError::Truncated { index };
        let mut name = vec![0u8; u32::from_le_bytes(len) as usize];
        r.read_exact(&mut name).map_err(truncated)?;
        let name = String::from_utf8(name).map_err(|_| CheckpointError::BadName)?;
        let rank = read_u32(&mut r).map_err(truncated)? as usize;
        let shape = (0..rank)
            .map(|_| read_u32(&mut r).map(|d| d as usize))
            .collect::<io::Result<Vec<_>>>()
            .map_err(truncated)?;
        let n: usize = shape.iter().product();
        let mut values = Vec::with_capacity(n);
        let mut b = [0u8; 8];
        for _ in 0..n {
            r.read_exact(&mut b).map_err(truncated)?;
            values.push(T::lit(f64::from_le_bytes(b)));
        }
        let tensor = Tensor::new(shape.clone(), values).map_err(|_| CheckpointError::BadShape { name: name.clone(), shape })?;
        params.add(name, tensor);
    }
    Ok(params)
}

pub fn save_params<T: Scalar>(params: &ParamSet<T>, path: &Path) -> io::Result<()> {
    write_params(params, BufWriter::new(File::create(path)?))
}

pub fn load_params<T: Scalar>(path: &Path) -> Result<ParamSet<T>, CheckpointError> {
    read_params(BufReader::new(File::open(path)?))
}
