//! "TSB1" binary tensor encoding: magic `TSB1`, u32 LE rank, rank x u32 LE
//! dims, then the values as f64 LE in row-major order.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor_core::Tensor;

pub const MAGIC: [u8; 4] = *b"TSB1";

pub fn write_to<W: Write>(tensor: &Tensor, out: &mut W) -> std::io::Result<()> {
    out.write_all(&MAGIC)?;
    out.write_all(&(tensor.rank() as u32).to_le_bytes())?;
    for &d in tensor.shape() {
        out.write_all(&(d as u32).to_le_bytes())?;
    }
    for v in tensor.data() {
        out.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn encode(tensor: &Tensor) -> Vec<u8> {
    let mut buf = Vec::with_capacity(8 + 4 * tensor.rank() + 8 * tensor.numel());
    write_to(tensor, &mut buf).expect("writing to a Vec cannot fail");
    buf
}

/// Byte cursor that reports offsets in its diagnostics.
pub(crate) struct Cursor<'a> {
    pub bytes: &'a [u8],
    pub pos: usize,
    pub source: &'a str,
}

impl<'a> Cursor<'a> {
    pub fn new(bytes: &'a [u8], source: &'a str) -> Self {
        Self {
            bytes,
            pos: 0,
            source,
        }
    }

    pub fn error(&self, detail: impl Into<String>) -> Error {
        Error::Format {
            path: self.source.to_string(),
            location: format!("byte offset {}", self.pos),
            detail: detail.into(),
        }
    }

    pub fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(self.error(format!(
                "truncated {what}: need {n} bytes, {} remain",
                self.bytes.len() - self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    pub fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    pub fn is_done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

pub(crate) fn read_tensor(cur: &mut Cursor<'_>) -> Result<Tensor> {
    let start = cur.pos;
    let magic = cur.take(4, "magic")?;
    if magic != MAGIC {
        cur.pos = start;
        return Err(cur.error(format!(
            "bad magic bytes {:02x?} (expected {:02x?} \"TSB1\")",
            magic, MAGIC
        )));
    }
    let rank = cur.u32("rank")? as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(cur.u32("dimension")? as usize);
    }
    let n: usize = shape.iter().product();
    let raw = cur.take(n * 8, "tensor data")?;
    let data = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor::from_vec(shape, data)
}

pub fn decode(bytes: &[u8], source: &str) -> Result<Tensor> {
    let mut cur = Cursor::new(bytes, source);
    let t = read_tensor(&mut cur)?;
    if !cur.is_done() {
        return Err(cur.error("trailing bytes after tensor"));
    }
    Ok(t)
}

pub fn save(tensor: &Tensor, path: &Path) -> Result<()> {
    fs::write(path, encode(tensor)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Tensor> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    decode(&bytes, &path.display().to_string())
}
