//! Binary checkpoint format, little-endian throughout:
//!
//! ```text
//! magic "MTPN" | version u32 | config_len u32 | config JSON bytes
//! | tensor_count u32
//! | per tensor (sorted by name):
//!     name_len u32 | name bytes | rank u32 (= 4) | dims u32 x 4
//!     | dtype u8 (0 = f32) | data (little-endian f32)
//! ```
//!
//! The file length is fully determined by the header; trailing bytes are
//! rejected. Loading rebuilds the model from the embedded config and fills
//! parameters by name, so round trips are bitwise lossless.

use std::path::Path;

use crate::error::{Error, Result};
use crate::network::config::ModelConfig;
use crate::network::graph::ParamSpec;
use crate::network::model::Model;
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"MTPN";
pub const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

/// Exact byte length a checkpoint of this architecture will have.
pub fn serialized_len(config: &ModelConfig, specs: &[ParamSpec]) -> Result<u64> {
    let json = serde_json::to_vec(config).map_err(|e| Error::Format(e.to_string()))?;
    let mut len = 4 + 4 + 4 + json.len() as u64 + 4;
    for s in specs {
        len += 4 + s.name.len() as u64 + 4 + 16 + 1 + 4 * s.numel() as u64;
    }
    Ok(len)
}

pub fn to_bytes(model: &Model) -> Result<Vec<u8>> {
    let json = serde_json::to_vec(&model.config).map_err(|e| Error::Format(e.to_string()))?;
    let mut order: Vec<usize> = (0..model.graph.params.len()).collect();
    order.sort_by(|&a, &b| model.graph.params[a].name.cmp(&model.graph.params[b].name));

    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&(order.len() as u32).to_le_bytes());
    for i in order {
        let spec = &model.graph.params[i];
        out.extend_from_slice(&(spec.name.len() as u32).to_le_bytes());
        out.extend_from_slice(spec.name.as_bytes());
        out.extend_from_slice(&4u32.to_le_bytes());
        for d in spec.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        out.push(DTYPE_F32);
        for v in model.param(i).data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Checkpoint(format!(
                "file truncated reading {what} ({n} bytes needed at offset {}, {} available)",
                self.pos,
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<Model> {
    let mut c = Cursor { buf: bytes, pos: 0 };
    if c.take(4, "magic")? != MAGIC {
        return Err(Error::Checkpoint("bad magic, not a checkpoint file".into()));
    }
    let version = c.u32("version")?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {version} (expected {VERSION})"
        )));
    }
    let json_len = c.u32("config length")? as usize;
    let json = c.take(json_len, "config blob")?;
    let config: ModelConfig = serde_json::from_slice(json)
        .map_err(|e| Error::Checkpoint(format!("invalid embedded config: {e}")))?;
    let mut model = Model::build(config, 0)?;
    let expected = model.graph.params.len();
    let count = c.u32("tensor count")? as usize;
    if count != expected {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds {count} tensors, architecture has {expected}"
        )));
    }
    let mut seen = std::collections::HashSet::with_capacity(count);
    for _ in 0..count {
        let name_len = c.u32("tensor name length")? as usize;
        let name = std::str::from_utf8(c.take(name_len, "tensor name")?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = c.u32("tensor rank")?;
        if rank != 4 {
            return Err(Error::Checkpoint(format!(
                "tensor '{name}' has rank {rank}, expected 4"
            )));
        }
        let mut dims = [0usize; 4];
        for d in &mut dims {
            *d = c.u32("tensor dim")? as usize;
        }
        let dtype = c.u8("dtype tag")?;
        if dtype != DTYPE_F32 {
            return Err(Error::Checkpoint(format!(
                "tensor '{name}' has unknown dtype tag {dtype}"
            )));
        }
        let numel: usize = dims.iter().product();
        if numel == 0 {
            return Err(Error::Checkpoint(format!("tensor '{name}' has a zero dim")));
        }
        let raw = c.take(4 * numel, "tensor data")?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let t = Tensor::new(dims, data)
            .map_err(|e| Error::Checkpoint(format!("tensor '{name}': {e}")))?;
        if !seen.insert(name.clone()) {
            return Err(Error::Checkpoint(format!("duplicate tensor '{name}'")));
        }
        model.set_param(&name, t)?;
    }
    if c.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after the last tensor",
            bytes.len() - c.pos
        )));
    }
    Ok(model)
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    crate::runtime::atomic_write(path, &to_bytes(model)?)
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    from_bytes(&std::fs::read(path)?)
}
