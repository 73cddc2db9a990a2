//! Matrix containers.
//!
//! Binary layout: `rows: u64 LE`, `cols: u64 LE`, then `rows * cols` IEEE-754
//! `f64 LE` values in row-major order.

use std::io::{Read, Write};

use nalgebra::DMatrix;

use crate::error::{Error, Result};

const MAX_ENTRIES: u64 = 1 << 31;

pub fn write_matrix<W: Write>(w: &mut W, m: &DMatrix<f64>) -> Result<()> {
    w.write_all(&(m.nrows() as u64).to_le_bytes())?;
    w.write_all(&(m.ncols() as u64).to_le_bytes())?;
    let mut buf = Vec::with_capacity(m.len() * 8);
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            buf.extend_from_slice(&m[(i, j)].to_le_bytes());
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_matrix<R: Read>(r: &mut R) -> Result<DMatrix<f64>> {
    let rows = read_u64(r)?;
    let cols = read_u64(r)?;
    let len = rows
        .checked_mul(cols)
        .filter(|&n| n <= MAX_ENTRIES)
        .ok_or_else(|| Error::Format(format!("implausible matrix shape {rows}x{cols}")))?;
    let mut buf = vec![0u8; len as usize * 8];
    r.read_exact(&mut buf)?;
    let (rows, cols) = (rows as usize, cols as usize);
    let mut values = buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")));
    Ok(DMatrix::from_row_iterator(rows, cols, &mut values))
}

pub(crate) fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub(crate) fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

/// One CSV row per matrix row, no header. Values use Rust's shortest
/// round-trip formatting.
pub fn write_matrix_csv<W: Write>(w: &mut W, m: &DMatrix<f64>) -> Result<()> {
    for i in 0..m.nrows() {
        let row: Vec<String> = (0..m.ncols()).map(|j| m[(i, j)].to_string()).collect();
        writeln!(w, "{}", row.join(","))?;
    }
    Ok(())
}
