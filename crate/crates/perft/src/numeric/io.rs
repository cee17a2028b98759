//! Binary matrix dump format.
//!
//! Layout, little-endian: magic `PMAT`, `u32` rows, `u32` cols, then
//! `rows * cols` 64-bit floats row-major.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{PerftError, Result};
use crate::numeric::Matrix;

const MAGIC: &[u8; 4] = b"PMAT";

pub fn write_matrix(path: &Path, m: &Matrix) -> Result<()> {
    let mut buf = Vec::with_capacity(12 + m.len() * 8);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(m.rows() as u32).to_le_bytes());
    buf.extend_from_slice(&(m.cols() as u32).to_le_bytes());
    for v in m.to_vec() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

pub fn read_matrix(path: &Path) -> Result<Matrix> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 12 || &bytes[0..4] != MAGIC {
        return Err(PerftError::Argument(format!(
            "{} is not a PMAT matrix dump",
            path.display()
        )));
    }
    let rows = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let expected = 12 + rows * cols * 8;
    if bytes.len() != expected {
        return Err(PerftError::Argument(format!(
            "{}: expected {expected} bytes for {rows}x{cols}, found {}",
            path.display(),
            bytes.len()
        )));
    }
    let data: Vec<f64> = bytes[12..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Matrix::from_vec(rows, cols, data)
}
