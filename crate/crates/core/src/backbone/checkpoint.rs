//! CKP1 checkpoints: "CKP1", u32 LE record count, then per record a u16 LE
//! name length, the UTF-8 name and a TSB1 tensor.
//!
//! Parameter names are dotted paths such as `levels.0.main.experts.2.weight`.
//! Names under `optim.` carry optimizer state and are ignored when loading a
//! model.

use std::fs;
use std::path::Path;

use crate::backbone::{BackboneConfig, BackboneParams};
use crate::error::{Error, Result};
use crate::moe_blocks::Params;
use crate::tensor_core::tsb1::{self, read_tensor, Cursor};
use crate::tensor_core::Tensor;

pub const MAGIC: [u8; 4] = *b"CKP1";

pub fn encode(records: &[(String, Tensor)]) -> Vec<u8> {
    let mut out = MAGIC.to_vec();
    out.extend_from_slice(&(records.len() as u32).to_le_bytes());
    for (name, t) in records {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&tsb1::encode(t));
    }
    out
}

pub fn decode(bytes: &[u8], source: &str) -> Result<Vec<(String, Tensor)>> {
    let mut cur = Cursor::new(bytes, source);
    let magic = cur.take(4, "magic")?;
    if magic != MAGIC {
        cur.pos = 0;
        return Err(cur.error(format!("bad magic bytes {:02x?} (expected \"CKP1\")", magic)));
    }
    let count = cur.u32("record count")? as usize;
    let mut records = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = cur.u16("name length")? as usize;
        let raw = cur.take(len, "name")?;
        let name = std::str::from_utf8(raw)
            .map_err(|_| cur.error("record name is not UTF-8"))?
            .to_string();
        records.push((name, read_tensor(&mut cur)?));
    }
    if !cur.is_done() {
        return Err(cur.error("trailing bytes after last record"));
    }
    Ok(records)
}

pub fn save_records(records: &[(String, Tensor)], path: &Path) -> Result<()> {
    fs::write(path, encode(records)).map_err(|e| Error::io(path, e))
}

pub fn load_records(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, &path.display().to_string())
}

/// Model parameters as checkpoint records, in canonical order.
pub fn records(params: &BackboneParams) -> Vec<(String, Tensor)> {
    let mut out = Vec::new();
    params.visit("", &mut |name, t| out.push((name.to_string(), t.clone())));
    out
}

pub fn save(params: &BackboneParams, path: &Path) -> Result<()> {
    save_records(&records(params), path)
}

/// Builds parameters for `config` from checkpoint records, requiring every
/// name to be present with the shape the config implies.
pub fn from_records(config: &BackboneConfig, records: &[(String, Tensor)]) -> Result<BackboneParams> {
    let mut params = BackboneParams::zeros(config)?;
    let model: Vec<&(String, Tensor)> = records.iter().filter(|(n, _)| !n.starts_with("optim.")).collect();
    let mut problem = None;
    let mut used = 0;
    params.visit_mut("", &mut |name, slot| {
        if problem.is_some() {
            return;
        }
        match model.iter().find(|(n, _)| n == name) {
            None => problem = Some(format!("checkpoint lacks parameter {name}")),
            Some((_, t)) if t.shape() != slot.shape() => {
                problem = Some(format!(
                    "parameter {name} has shape {:?} in the checkpoint but the config implies {:?}",
                    t.shape(),
                    slot.shape()
                ))
            }
            Some((_, t)) => {
                *slot = t.clone();
                used += 1;
            }
        }
    });
    if let Some(detail) = problem {
        return Err(Error::shape("checkpoint", detail));
    }
    if used != model.len() {
        let names = params.names();
        let extra = model.iter().find(|(n, _)| !names.contains(n)).map(|(n, _)| n.clone());
        return Err(Error::shape(
            "checkpoint",
            format!("checkpoint has parameter {} that the config does not define", extra.unwrap_or_default()),
        ));
    }
    Ok(params)
}

pub fn load(config: &BackboneConfig, path: &Path) -> Result<BackboneParams> {
    from_records(config, &load_records(path)?)
}
