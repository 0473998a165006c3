//! Model checkpoints.
//!
//! ```text
//! "DRXC"  u16 version
//! u32 header_len, header (the model config as `key = value` lines)
//! u32 param_count
//! per parameter: u16 name_len, name, u8 rank, u32 extent * rank, f64 payload
//! u32 CRC-32 of every byte after the version field
//! ```
//!
//! Loading rebuilds the model from the header and requires every stored
//! name and shape to match it one-to-one.

use std::collections::HashSet;
use std::path::Path;

use crate::config::DraxConfig;
use crate::data::binary::{check_header, check_trailer, put_trailer, put_u16, put_u32, Reader};
use crate::error::{Error, Result};
use crate::pipeline::DraxModel;

pub const MAGIC: [u8; 4] = *b"DRXC";
pub const VERSION: u16 = 1;

pub fn encode_checkpoint(model: &DraxModel) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    put_u16(&mut out, VERSION);
    let start = out.len();
    let header = model.config.to_kv();
    put_u32(&mut out, header.len() as u32);
    out.extend_from_slice(header.as_bytes());
    put_u32(&mut out, model.store.len() as u32);
    for (_, p) in model.store.iter() {
        put_u16(&mut out, p.name.len() as u16);
        out.extend_from_slice(p.name.as_bytes());
        out.push(p.tensor.shape().len() as u8);
        for &e in p.tensor.shape() {
            put_u32(&mut out, e as u32);
        }
        for &v in p.tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    put_trailer(&mut out, start);
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<DraxModel> {
    let mut r = Reader::new(bytes);
    check_header(&mut r, MAGIC, VERSION)?;
    let start = r.pos();
    let header_len = r.u32()? as usize;
    let header = r.string(header_len)?;
    let count = r.u32()? as usize;
    let mut raw = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = r.string(name_len)?;
        let rank = r.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let n: usize = shape.iter().product();
        let payload = r.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint(format!("`{name}` is too large")))?)?;
        raw.push((name, shape, payload));
    }
    check_trailer(&mut r, bytes, start)?;

    let config = DraxConfig::from_kv(&header).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
    let mut model = DraxModel::new(config)?;
    if raw.len() != model.store.len() {
        return Err(Error::Checkpoint(format!(
            "{} parameters stored, model has {}",
            raw.len(),
            model.store.len()
        )));
    }
    let mut seen = HashSet::new();
    for (name, shape, payload) in raw {
        let id = model
            .store
            .id(&name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter `{name}`")))?;
        if !seen.insert(id) {
            return Err(Error::Checkpoint(format!("parameter `{name}` stored twice")));
        }
        let t = model.store.tensor_mut(id);
        if t.shape() != shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "`{name}` has shape {shape:?}, model expects {:?}",
                t.shape()
            )));
        }
        for (dst, c) in t.data_mut().iter_mut().zip(payload.chunks_exact(8)) {
            *dst = f64::from_le_bytes(c.try_into().unwrap());
        }
    }
    Ok(model)
}

pub fn save_checkpoint(model: &DraxModel, path: &Path) -> Result<()> {
    std::fs::write(path, encode_checkpoint(model))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<DraxModel> {
    decode_checkpoint(&std::fs::read(path)?)
}
