//! Binary model checkpoints.
//!
//! Layout (little-endian): `b"FOVX0001"`, `u32` array count, then per array a
//! `u32` name length, UTF-8 name, `u32` rank and `u64` extents; then the f32
//! payloads in manifest order; then a `u64` length and the JSON trailer.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::model::{ImputationModel, ModelHyper, Shell};
use super::params::ParamStore;

pub const MAGIC: &[u8; 8] = b"FOVX0001";

#[derive(Debug, Serialize, Deserialize)]
struct Trailer {
    shell: Shell,
    hyper: ModelHyper,
}

fn arrays(m: &ImputationModel<f32>) -> Vec<(String, &[usize], &[f32])> {
    let mut out = Vec::new();
    for (prefix, store) in [("gen", &m.generator), ("disc", &m.discriminator)] {
        for (name, t) in store.names().iter().zip(store.tensors()) {
            out.push((format!("{prefix}/{name}"), t.shape.as_slice(), t.data.as_slice()));
        }
    }
    out
}

pub fn encode_checkpoint(m: &ImputationModel<f32>) -> Result<Vec<u8>> {
    let arrays = arrays(m);
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(arrays.len() as u32).to_le_bytes());
    for (name, shape, _) in &arrays {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &e in *shape {
            buf.extend_from_slice(&(e as u64).to_le_bytes());
        }
    }
    for (_, _, data) in &arrays {
        for x in *data {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    let json = serde_json::to_vec(&Trailer { shell: m.shell, hyper: m.hyper.clone() })?;
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    Ok(buf)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Corrupt(format!("checkpoint truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<ImputationModel<f32>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Format("not a FOVX0001 checkpoint".into()));
    }
    let count = r.u32()? as usize;
    let mut manifest = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Corrupt("array name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        manifest.push((name, shape));
    }
    let mut payloads = Vec::with_capacity(manifest.len());
    for (_, shape) in &manifest {
        let n: usize = shape.iter().product();
        let raw = r.take(n.checked_mul(4).ok_or_else(|| Error::Corrupt("array too large".into()))?)?;
        payloads
            .push(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect::<Vec<_>>());
    }
    let json_len = r.u64()? as usize;
    let trailer: Trailer = serde_json::from_slice(r.take(json_len)?)?;
    if r.pos != bytes.len() {
        return Err(Error::Corrupt(format!("{} trailing bytes", bytes.len() - r.pos)));
    }

    let mut model = ImputationModel::<f32>::new(trailer.hyper, trailer.shell, 0)?;
    let expected = model.generator.len() + model.discriminator.len();
    if manifest.len() != expected {
        return Err(Error::Corrupt(format!("{} arrays, architecture needs {expected}", manifest.len())));
    }
    for ((name, shape), data) in manifest.into_iter().zip(payloads) {
        let (store, local): (&mut ParamStore<f32>, &str) = if let Some(n) = name.strip_prefix("gen/") {
            (&mut model.generator, n)
        } else if let Some(n) = name.strip_prefix("disc/") {
            (&mut model.discriminator, n)
        } else {
            return Err(Error::Corrupt(format!("unexpected array '{name}'")));
        };
        let idx = store.find(local).ok_or_else(|| Error::Corrupt(format!("unknown array '{name}'")))?;
        let t = store.tensor_mut(idx);
        if t.shape != shape {
            return Err(Error::Corrupt(format!("array '{name}' has shape {shape:?}, expected {:?}", t.shape)));
        }
        t.data = data;
    }
    Ok(model)
}

pub fn save_checkpoint(m: &ImputationModel<f32>, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, encode_checkpoint(m)?)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ImputationModel<f32>> {
    decode_checkpoint(&std::fs::read(path)?)
}
