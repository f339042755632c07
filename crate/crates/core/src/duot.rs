//! DUOT binary tensor format.
//!
//! Layout: the magic bytes `DUOT`, a little-endian `u32` rank, `rank`
//! little-endian `u32` dimensions, then the row-major payload as
//! little-endian `f64`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{DuoError, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"DUOT";

pub fn encode(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 4 * t.rank() + 8 * t.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn write_to(t: &Tensor, w: &mut impl Write) -> Result<()> {
    w.write_all(&encode(t))?;
    Ok(())
}

pub fn read_from(r: &mut impl Read) -> Result<Tensor> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| DuoError::Format("truncated header".into()))?;
    if &magic != MAGIC {
        return Err(DuoError::Format(format!("bad magic {magic:?}")));
    }
    let rank = read_u32(r)? as usize;
    if rank > 16 {
        return Err(DuoError::Format(format!("implausible rank {rank}")));
    }
    let shape = (0..rank).map(|_| read_u32(r).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
    let n: usize = shape.iter().product();
    let mut buf = vec![0u8; 8 * n];
    r.read_exact(&mut buf).map_err(|_| DuoError::Format("truncated payload".into()))?;
    let data = buf.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    Tensor::new(shape, data).map_err(|e| DuoError::Format(e.to_string()))
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|_| DuoError::Format("truncated header".into()))?;
    Ok(u32::from_le_bytes(b))
}

pub fn save(t: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_to(t, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<Tensor> {
    read_from(&mut BufReader::new(File::open(path)?))
}
