//! Flat little-endian parameter files.
//!
//! Layout: `b"QFAT"`, `u32` version, `u32` parameter count, then per
//! parameter a `u16` name length, the UTF-8 name, a `u8` rank, `rank × u32`
//! dims and the `f32` payload.

use std::io::{Read, Write};
use std::path::Path;

use super::params::ParameterStore;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"QFAT";
pub const VERSION: u32 = 1;

pub fn write_to<W: Write>(store: &ParameterStore<f32>, mut w: W) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(store.len() as u32).to_le_bytes())?;
    for p in store.params() {
        let name = p.name.as_bytes();
        let len = u16::try_from(name.len()).map_err(|_| Error::Checkpoint(format!("name too long: {}", p.name)))?;
        w.write_all(&len.to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&[p.shape.len() as u8])?;
        for d in &p.shape {
            w.write_all(&(*d as u32).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(4 * p.value.len());
        for v in &p.value {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    w.flush()?;
    Ok(())
}

fn take<const N: usize, R: Read>(r: &mut R) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b)
        .map_err(|e| Error::Checkpoint(format!("truncated file: {e}")))?;
    Ok(b)
}

pub fn read_from<R: Read>(mut r: R) -> Result<ParameterStore<f32>> {
    let magic: [u8; 4] = take(&mut r)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("bad magic, not a checkpoint file".into()));
    }
    let version = u32::from_le_bytes(take(&mut r)?);
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version} (expected {VERSION})")));
    }
    let count = u32::from_le_bytes(take(&mut r)?);
    let mut store = ParameterStore::new();
    for _ in 0..count {
        let len = u16::from_le_bytes(take(&mut r)?) as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)
            .map_err(|e| Error::Checkpoint(format!("truncated file: {e}")))?;
        let name = String::from_utf8(name).map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?;
        let rank = take::<1, _>(&mut r)?[0] as usize;
        let shape = (0..rank)
            .map(|_| Ok(u32::from_le_bytes(take(&mut r)?) as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let mut raw = vec![0u8; 4 * n];
        r.read_exact(&mut raw)
            .map_err(|e| Error::Checkpoint(format!("truncated payload for {name}: {e}")))?;
        let value = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        store.insert(name, shape, value)?;
    }
    Ok(store)
}

pub fn save(store: &ParameterStore<f32>, path: &Path) -> Result<()> {
    let f = std::fs::File::create(path)?;
    write_to(store, std::io::BufWriter::new(f))
}

pub fn load(path: &Path) -> Result<ParameterStore<f32>> {
    let f = std::fs::File::open(path)?;
    read_from(std::io::BufReader::new(f))
}
