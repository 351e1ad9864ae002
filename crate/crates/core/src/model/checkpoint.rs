//! Binary checkpoint container.
//!
//! Layout (little endian):
//!
//! ```text
//! magic    8 bytes  "CAFMCKPT"
//! version  u32
//! header   u64 length + UTF-8 JSON {"config": ModelConfig, "meta": any}
//! count    u32
//! count × tensor:
//!   name   u32 length + UTF-8
//!   ndim   u32, dims ndim × u64
//!   data   numel × f64
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::caf::CafMamba;
use super::config::ModelConfig;

pub const MAGIC: &[u8; 8] = b"CAFMCKPT";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    meta: serde_json::Value,
}

/// Serializes `model` and arbitrary metadata into `w`.
pub fn write_checkpoint<W: Write>(mut w: W, model: &CafMamba, meta: &serde_json::Value) -> std::io::Result<()> {
    let header = serde_json::to_vec(&Header { config: model.config.clone(), meta: meta.clone() })?;
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(header.len() as u64).to_le_bytes())?;
    w.write_all(&header)?;
    w.write_all(&(model.params.len() as u32).to_le_bytes())?;
    for (_, name, t) in model.params.iter() {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.ndim() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn read_exact<R: Read>(r: &mut R, n: usize, what: &str) -> Result<Vec<u8>> {
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf).map_err(|e| bad(format!("truncated while reading {what}: {e}")))?;
    Ok(buf)
}

fn read_u32<R: Read>(r: &mut R, what: &str) -> Result<u32> {
    Ok(u32::from_le_bytes(read_exact(r, 4, what)?.try_into().unwrap()))
}

fn read_u64<R: Read>(r: &mut R, what: &str) -> Result<u64> {
    Ok(u64::from_le_bytes(read_exact(r, 8, what)?.try_into().unwrap()))
}

/// Parses a checkpoint, returning the model and its metadata.
pub fn read_checkpoint<R: Read>(mut r: R) -> Result<(CafMamba, serde_json::Value)> {
    if read_exact(&mut r, 8, "magic")? != MAGIC {
        return Err(bad("not a checkpoint file (bad magic)"));
    }
    let version = read_u32(&mut r, "version")?;
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let hlen = read_u64(&mut r, "header length")? as usize;
    let header: Header =
        serde_json::from_slice(&read_exact(&mut r, hlen, "header")?).map_err(|e| bad(format!("header: {e}")))?;
    let mut model = CafMamba::new(header.config, &mut ChaCha8Rng::seed_from_u64(0))?;
    let count = read_u32(&mut r, "tensor count")? as usize;
    if count != model.params.len() {
        return Err(bad(format!("expected {} tensors, found {count}", model.params.len())));
    }
    for _ in 0..count {
        let nlen = read_u32(&mut r, "name length")? as usize;
        let name = String::from_utf8(read_exact(&mut r, nlen, "name")?).map_err(|_| bad("tensor name is not UTF-8"))?;
        let id = model.params.find(&name).ok_or_else(|| bad(format!("unexpected tensor {name}")))?;
        let ndim = read_u32(&mut r, "ndim")? as usize;
        let dims = (0..ndim).map(|_| read_u64(&mut r, "dims").map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let t = model.params.get_mut(id);
        if dims != t.shape() {
            return Err(bad(format!("{name}: shape {dims:?} does not match {:?}", t.shape())));
        }
        let raw = read_exact(&mut r, t.numel() * 8, &name)?;
        for (dst, chunk) in t.data_mut().iter_mut().zip(raw.chunks_exact(8)) {
            *dst = f64::from_le_bytes(chunk.try_into().unwrap());
        }
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest).map_err(|e| bad(e.to_string()))? != 0 {
        return Err(bad("trailing bytes after last tensor"));
    }
    Ok((model, header.meta))
}

pub fn save(path: &Path, model: &CafMamba, meta: &serde_json::Value) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    write_checkpoint(BufWriter::new(f), model, meta).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<(CafMamba, serde_json::Value)> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(BufReader::new(f)).map_err(|e| match e {
        Error::Checkpoint(msg) => Error::Checkpoint(format!("{}: {msg}", path.display())),
        other => other,
    })
}
