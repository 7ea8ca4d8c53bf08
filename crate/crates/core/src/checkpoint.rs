//! Named-tensor checkpoint archive.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   8 bytes  "MODETCK1"
//! count   u64      number of entries
//! entry   repeated:
//!   name_len   u32
//!   name       UTF-8 bytes
//!   trainable  u8 (0 | 1)
//!   ndim       u32
//!   dims       ndim × u64
//!   values     product(dims) × f64, raw IEEE-754 bits
//! ```
//!
//! Values round-trip bit-exactly. Optimizer state rides along under the
//! `optim.` name prefix and is skipped when loading into a registry.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::param::ParamRegistry;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"MODETCK1";

#[derive(Debug, Clone)]
pub struct CheckpointEntry {
    pub name: String,
    pub tensor: Tensor,
    pub trainable: bool,
}

/// Write the registry plus any extra named tensors (optimizer state).
pub fn save(
    path: &Path,
    reg: &ParamRegistry,
    extras: &[(String, Tensor)],
) -> Result<()> {
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    w.write_all(MAGIC)?;
    let count = (reg.len() + extras.len()) as u64;
    w.write_all(&count.to_le_bytes())?;
    for e in reg.iter() {
        write_entry(&mut w, &e.name, &e.tensor, e.trainable)?;
    }
    for (name, t) in extras {
        write_entry(&mut w, name, t, false)?;
    }
    Ok(())
}

fn write_entry(w: &mut impl Write, name: &str, t: &Tensor, trainable: bool) -> Result<()> {
    w.write_all(&(name.len() as u32).to_le_bytes())?;
    w.write_all(name.as_bytes())?;
    w.write_all(&[trainable as u8])?;
    w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
    for &d in t.shape() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    for v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn load(path: &Path) -> Result<Vec<CheckpointEntry>> {
    let file = File::open(path)?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!(
            "not a checkpoint: magic {:?}",
            String::from_utf8_lossy(&magic)
        )));
    }
    let count = read_u64(&mut r)?;
    let mut entries = Vec::with_capacity(count as usize);
    for _ in 0..count {
        entries.push(read_entry(&mut r)?);
    }
    Ok(entries)
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

fn read_entry(r: &mut impl Read) -> Result<CheckpointEntry> {
    let name_len = read_u32(r)? as usize;
    if name_len > 4096 {
        return Err(Error::Format(format!("implausible name length {name_len}")));
    }
    let mut name_buf = vec![0u8; name_len];
    r.read_exact(&mut name_buf)?;
    let name = String::from_utf8(name_buf)
        .map_err(|_| Error::Format("non-UTF-8 tensor name".into()))?;
    let mut flag = [0u8; 1];
    r.read_exact(&mut flag)?;
    let ndim = read_u32(r)? as usize;
    if ndim > 8 {
        return Err(Error::Format(format!("implausible rank {ndim} for '{name}'")));
    }
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        shape.push(read_u64(r)? as usize);
    }
    let numel: usize = shape.iter().product();
    let mut data = Vec::with_capacity(numel);
    let mut buf = [0u8; 8];
    for _ in 0..numel {
        r.read_exact(&mut buf)?;
        data.push(f64::from_le_bytes(buf));
    }
    let tensor = Tensor::new(shape, data).map_err(|e| Error::Format(e.to_string()))?;
    Ok(CheckpointEntry { name, tensor, trainable: flag[0] != 0 })
}

/// Copy checkpoint values into matching registry entries, verifying names
/// and shapes. Returns the `optim.` entries for the optimizer to import.
/// Fails on the first mismatched tensor, naming it.
pub fn apply_to_registry(
    reg: &mut ParamRegistry,
    entries: &[CheckpointEntry],
) -> Result<Vec<(String, Tensor)>> {
    let mut extras = Vec::new();
    let mut seen = 0usize;
    for e in entries {
        if e.name.starts_with("optim.") {
            extras.push((e.name.clone(), e.tensor.clone()));
            continue;
        }
        let Some(slot) = reg.entry_mut(&e.name) else {
            return Err(Error::Format(format!(
                "checkpoint tensor '{}' not in this model",
                e.name
            )));
        };
        if slot.tensor.shape() != e.tensor.shape() {
            return Err(Error::Format(format!(
                "checkpoint tensor '{}' has shape {:?}, model wants {:?}",
                e.name,
                e.tensor.shape(),
                slot.tensor.shape()
            )));
        }
        slot.tensor
            .data_mut()
            .copy_from_slice(e.tensor.data());
        seen += 1;
    }
    if seen != reg.len() {
        let missing = reg
            .iter()
            .find(|e| !entries.iter().any(|c| c.name == e.name))
            .map(|e| e.name.clone())
            .unwrap_or_default();
        return Err(Error::Format(format!(
            "checkpoint covers {seen} of {} model tensors; first missing '{missing}'",
            reg.len()
        )));
    }
    Ok(extras)
}
