//! `LICM` checkpoint files.
//!
//! Layout (little-endian): magic `LICM`, version byte, family tag byte,
//! lambda as f64, then until end of file one block per parameter:
//! name length (u32), UTF-8 name, rank (u32), dims (u32 each), raw f32 values.

use std::io::{Read, Write};
use std::path::Path;

use indexmap::IndexMap;

use super::{CompressionModel, Family};
use crate::diffcore::Tensor;
use crate::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"LICM";
pub const CHECKPOINT_VERSION: u8 = 1;

pub fn write_checkpoint(model: &CompressionModel, mut w: impl Write) -> Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&[CHECKPOINT_VERSION, model.family().tag()])?;
    w.write_all(&model.lambda().to_le_bytes())?;
    for (name, t) in model.params() {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        let mut raw = Vec::with_capacity(t.numel() * 4);
        for v in t.data() {
            raw.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&raw)?;
    }
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::format("checkpoint", "unexpected end of file"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn read_checkpoint(mut r: impl Read) -> Result<CompressionModel> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    let mut c = Cursor { buf: &buf, pos: 0 };
    if c.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::format("checkpoint", "bad magic"));
    }
    let header = c.take(2)?;
    if header[0] != CHECKPOINT_VERSION {
        return Err(Error::format("checkpoint", format!("unsupported version {}", header[0])));
    }
    let family = Family::from_tag(header[1])?;
    let lambda = f64::from_le_bytes(c.take(8)?.try_into().expect("8 bytes"));
    let mut params = IndexMap::new();
    while c.pos < buf.len() {
        let len = c.u32()? as usize;
        let name = std::str::from_utf8(c.take(len)?)
            .map_err(|_| Error::format("checkpoint", "parameter name is not UTF-8"))?
            .to_string();
        let rank = c.u32()? as usize;
        if rank > 8 {
            return Err(Error::format("checkpoint", format!("{name}: rank {rank}")));
        }
        let shape = (0..rank).map(|_| c.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let raw = c.take(numel * 4)?;
        let data = raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes"))).collect();
        params.insert(name, Tensor::new(shape, data)?);
    }
    CompressionModel::from_parts(family, lambda, params)
}

pub fn save_checkpoint(model: &CompressionModel, path: impl AsRef<Path>) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(model, &mut buf)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<CompressionModel> {
    read_checkpoint(std::fs::File::open(path)?)
}
