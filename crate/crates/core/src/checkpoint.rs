//! Binary checkpoint format.
//!
//! ```text
//! "SHFUCKPT" | u32 version | u64 len | config JSON | u32 tensor count
//! per tensor: u32 name len | name | u32 rank | rank × u64 extents | f32 data
//! ```
//! All integers and floats little-endian.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use shefu_tensor::Tensor;

use crate::dataset::Vocab;
use crate::error::{io_err, Result, ShefuError};
use crate::model::params::ParamSet;
use crate::model::{Model, ModelConfig};

pub const MAGIC: &[u8; 8] = b"SHFUCKPT";
pub const VERSION: u32 = 1;

/// The JSON header of a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub config_hash: String,
    /// tokens in id order, so scoring needs no dataset
    #[serde(default)]
    pub vocab: Vec<String>,
    /// the full run configuration, verbatim
    #[serde(default)]
    pub run: serde_json::Value,
}

pub fn encode(meta: &CheckpointMeta, params: &ParamSet<f32>) -> Result<Vec<u8>> {
    let json = serde_json::to_vec(meta)?;
    let mut out = Vec::with_capacity(json.len() + 4 * params.scalar_count() + 64);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params.names().iter().zip(params.tensors()) {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &e in t.shape() {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for &x in t.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            ShefuError::ArtifactMismatch(format!("checkpoint truncated while reading {what} at byte {}", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self, what: &str) -> Result<usize> {
        usize::try_from(self.u64(what)?).map_err(|_| ShefuError::ArtifactMismatch(format!("{what} overflows")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<(CheckpointMeta, ParamSet<f32>)> {
    let mismatch = |m: String| ShefuError::ArtifactMismatch(m);
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8, "magic")? != MAGIC {
        return Err(mismatch("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(mismatch(format!("checkpoint version {version}, expected {VERSION}")));
    }
    let n = r.len("config length")?;
    let meta: CheckpointMeta = serde_json::from_slice(r.take(n, "config")?)
        .map_err(|e| mismatch(format!("checkpoint config: {e}")))?;
    let count = r.u32("tensor count")?;
    let mut params = ParamSet::new();
    for _ in 0..count {
        let n = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(n, "name")?)
            .map_err(|_| mismatch("tensor name is not UTF-8".into()))?
            .to_string();
        if params.id(&name).is_some() {
            return Err(mismatch(format!("duplicate tensor {name}")));
        }
        let rank = r.u32("rank")? as usize;
        let shape = (0..rank).map(|_| r.len("extent")).collect::<Result<Vec<_>>>()?;
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &e| a.checked_mul(e))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| mismatch(format!("tensor {name} is too large")))?;
        let data = r
            .take(numel, "tensor data")?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| mismatch(format!("tensor {name}: {e}")))?;
        params.add(name, t);
    }
    if r.pos != bytes.len() {
        return Err(mismatch(format!("{} trailing bytes after the last tensor", bytes.len() - r.pos)));
    }
    Ok((meta, params))
}

impl CheckpointMeta {
    pub fn vocab(&self) -> Result<Vocab> {
        Vocab::parse(&self.vocab.join("\n"), Path::new("<checkpoint vocab>"))
            .map_err(|e| ShefuError::ArtifactMismatch(e.to_string()))
    }
}

pub fn save(path: &Path, meta: &CheckpointMeta, params: &ParamSet<f32>) -> Result<()> {
    fs::write(path, encode(meta, params)?).map_err(io_err(format!("writing {}", path.display())))
}

/// Reads a checkpoint and rebuilds the model it describes; any disagreement
/// between the stored tensors and the stored config is an artifact mismatch.
pub fn load(path: &Path) -> Result<(CheckpointMeta, Model<f32>)> {
    let bytes = fs::read(path).map_err(io_err(format!("reading {}", path.display())))?;
    let (meta, params) = decode(&bytes)?;
    let model = Model::from_params(meta.model.clone(), params).map_err(|e| match e {
        ShefuError::Config(m) => ShefuError::ArtifactMismatch(format!("checkpoint config: {m}")),
        other => other,
    })?;
    Ok((meta, model))
}
