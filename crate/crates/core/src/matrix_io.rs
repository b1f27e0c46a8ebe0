//! Dense binary container for named `f64` matrices.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic  b"EHRSIGM1"
//! u32    number of entries
//! per entry:
//!   u32  name length, then UTF-8 name bytes
//!   u64  rows, u64 cols
//!   f64  rows*cols values, column-major
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::DMatrix;

use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"EHRSIGM1";

pub fn write_matrices<W: Write>(mut w: W, entries: &[(&str, &DMatrix<f64>)]) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&(entries.len() as u32).to_le_bytes())?;
    for (name, m) in entries {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(m.nrows() as u64).to_le_bytes())?;
        w.write_all(&(m.ncols() as u64).to_le_bytes())?;
        for v in m.iter() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub fn read_matrices<R: Read>(mut r: R) -> Result<Vec<(String, DMatrix<f64>)>> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::invalid("not a matrix container (bad magic)"));
    }
    let count = read_u32(&mut r)? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|e| Error::invalid(e.to_string()))?;
        let rows = read_u64(&mut r)? as usize;
        let cols = read_u64(&mut r)? as usize;
        let mut data = Vec::with_capacity(rows * cols);
        let mut b = [0u8; 8];
        for _ in 0..rows * cols {
            r.read_exact(&mut b)?;
            data.push(f64::from_le_bytes(b));
        }
        out.push((name, DMatrix::from_vec(rows, cols, data)));
    }
    Ok(out)
}

pub fn save(path: &Path, entries: &[(&str, &DMatrix<f64>)]) -> Result<()> {
    write_matrices(BufWriter::new(File::create(path)?), entries)
}

pub fn load(path: &Path) -> Result<Vec<(String, DMatrix<f64>)>> {
    read_matrices(BufReader::new(File::open(path)?))
}

/// Fetch a named entry from a loaded container.
pub fn take(entries: &mut Vec<(String, DMatrix<f64>)>, name: &str) -> Result<DMatrix<f64>> {
    let pos = entries
        .iter()
        .position(|(n, _)| n == name)
        .ok_or_else(|| Error::invalid(format!("matrix `{name}` missing from container")))?;
    Ok(entries.remove(pos).1)
}
