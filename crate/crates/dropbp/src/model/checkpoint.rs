//! Flat binary parameter dump.
//!
//! Layout: magic "DBPPARAM", u32 version, u32 entry count, then per entry
//! a length-prefixed UTF-8 name, u32 rank, u64 dims, and raw little-endian
//! f64 data. Round-trips are bit-exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::net::Model;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"DBPPARAM";
const VERSION: u32 = 1;

pub fn save_params(model: &Model, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let entries = model.params.named();
    w.write_all(&(entries.len() as u32).to_le_bytes())?;
    for (name, tensor) in &entries {
        let bytes = name.as_bytes();
        w.write_all(&(bytes.len() as u32).to_le_bytes())?;
        w.write_all(bytes)?;
        w.write_all(&(tensor.shape().len() as u32).to_le_bytes())?;
        for &dim in tensor.shape() {
            w.write_all(&(dim as u64).to_le_bytes())?;
        }
        for &v in tensor.iter() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Read a dump back into named tensors.
pub fn read_params(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::State("not a parameter dump".into()));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::State(format!("unsupported dump version {version}")));
    }
    let count = read_u32(&mut r)? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::State("invalid name in dump".into()))?;
        let rank = read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u64(&mut r)? as usize);
        }
        let len: usize = shape.iter().product();
        let mut data = Vec::with_capacity(len);
        let mut buf = [0u8; 8];
        for _ in 0..len {
            r.read_exact(&mut buf)?;
            data.push(f64::from_le_bytes(buf));
        }
        out.push((name, Tensor::from_parts(shape, data)));
    }
    Ok(out)
}

/// Load a dump into a model with matching architecture. Every parameter must
/// be present with the right shape.
pub fn load_params(model: &mut Model, path: &Path) -> Result<()> {
    let entries = read_params(path)?;
    let mut map: std::collections::BTreeMap<String, Tensor> = entries.into_iter().collect();
    let mut missing = Vec::new();
    model.params.visit_mut(&mut |name, t| match map.remove(name) {
        Some(loaded) if loaded.shape() == t.shape() => *t = loaded,
        Some(loaded) => missing.push(format!(
            "{name}: shape {:?} vs expected {:?}",
            loaded.shape(),
            t.shape()
        )),
        None => missing.push(format!("{name}: absent from dump")),
    });
    if !missing.is_empty() {
        return Err(Error::State(format!("parameter dump mismatch: {missing:?}")));
    }
    if !map.is_empty() {
        let extra: Vec<&String> = map.keys().collect();
        return Err(Error::State(format!("dump has extra tensors: {extra:?}")));
    }
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}
