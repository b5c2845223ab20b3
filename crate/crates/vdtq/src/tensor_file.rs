//! Binary tensor files: `"VDTQ"`, version byte, dtype byte, rank byte,
//! little-endian `u32` dims, then row-major little-endian `f64` payload.

use std::fs;
use std::path::Path;

use vdtq_core::Tensor;

use crate::error::{CliError, Result};

pub const MAGIC: &[u8; 4] = b"VDTQ";
pub const VERSION: u8 = 1;
pub const DTYPE_F64: u8 = 0;

pub fn encode(t: &Tensor) -> Vec<u8> {
    let dims = t.dims();
    let mut out = Vec::with_capacity(7 + 4 * dims.len() + 8 * t.len());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(DTYPE_F64);
    out.push(dims.len() as u8);
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8]) -> std::result::Result<Tensor, String> {
    if bytes.len() < 7 || &bytes[..4] != MAGIC {
        return Err("not a VDTQ tensor file".into());
    }
    if bytes[4] != VERSION {
        return Err(format!("unsupported version {}", bytes[4]));
    }
    if bytes[5] != DTYPE_F64 {
        return Err(format!("unsupported dtype {}", bytes[5]));
    }
    let ndim = bytes[6] as usize;
    let header = 7 + 4 * ndim;
    if bytes.len() < header {
        return Err("truncated header".into());
    }
    let dims: Vec<usize> = bytes[7..header]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().expect("4-byte chunk")) as usize)
        .collect();
    let count: usize = dims.iter().product();
    let payload = &bytes[header..];
    if payload.len() != 8 * count {
        return Err(format!(
            "payload has {} bytes, dims {:?} need {}",
            payload.len(),
            dims,
            8 * count
        ));
    }
    let data = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Tensor::new(dims, data).map_err(|e| e.to_string())
}

pub fn write(path: &Path, t: &Tensor) -> Result<()> {
    if t.dims().len() > u8::MAX as usize || t.dims().iter().any(|&d| d > u32::MAX as usize) {
        return Err(CliError::format(path, format!("dims {:?} not representable", t.dims())));
    }
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    fs::write(path, encode(t)).map_err(|e| CliError::io(path, e))
}

pub fn read(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    decode(&bytes).map_err(|d| CliError::format(path, d))
}
