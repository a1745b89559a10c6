//! Single-file checkpoint container.
//!
//! Layout: the 8-byte magic `PHDFCKPT`, a little-endian `u32` format
//! version, a little-endian `u64` header length, the JSON header, then the
//! tensor blob. The header lists every tensor as
//! `{group, name, shape, dtype, offset, len}` with `offset`/`len` in bytes
//! relative to the start of the blob; data is little-endian `f32`.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::bundle::{ModelBundle, ModelConfig};
use crate::autograd::ParamSet;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"PHDFCKPT";
pub const VERSION: u32 = 1;
pub const FORMAT: &str = "physdiff-checkpoint";

pub const GROUP_PARAMS: &str = "param";
pub const GROUP_EMA: &str = "ema";

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    group: String,
    name: String,
    shape: Vec<usize>,
    dtype: String,
    offset: u64,
    len: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    model: ModelConfig,
    step: u64,
    #[serde(default)]
    metadata: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

/// A model bundle plus any extra named tensor groups (optimizer moments) and free-form metadata.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: ModelBundle<f32>,
    pub extra_groups: Vec<(String, ParamSet<f32>)>,
    pub metadata: serde_json::Value,
}

impl Checkpoint {
    pub fn new(model: ModelBundle<f32>) -> Self {
        Self { model, extra_groups: Vec::new(), metadata: serde_json::Value::Null }
    }

    pub fn group(&self, name: &str) -> Option<&ParamSet<f32>> {
        self.extra_groups.iter().find(|(g, _)| g == name).map(|(_, p)| p)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut tensors = Vec::new();
        let mut blob = Vec::new();
        let groups = [(GROUP_PARAMS, self.model.params()), (GROUP_EMA, self.model.ema())]
            .into_iter()
            .chain(self.extra_groups.iter().map(|(g, p)| (g.as_str(), p)));
        for (group, set) in groups {
            for e in set.entries() {
                let offset = blob.len() as u64;
                for v in e.value.data() {
                    blob.extend_from_slice(&v.to_le_bytes());
                }
                tensors.push(TensorEntry {
                    group: group.to_string(),
                    name: e.name.clone(),
                    shape: e.value.shape().to_vec(),
                    dtype: "f32".into(),
                    offset,
                    len: blob.len() as u64 - offset,
                });
            }
        }
        let header = Header {
            format: FORMAT.into(),
            version: VERSION,
            model: self.model.config().clone(),
            step: self.model.step(),
            metadata: self.metadata.clone(),
            tensors,
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut out = Vec::with_capacity(20 + json.len() + blob.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&blob);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let header_end =
            20usize.checked_add(hlen).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated header"))?;
        let header: Header =
            serde_json::from_slice(&bytes[20..header_end]).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
        if header.format != FORMAT {
            return Err(Error::Checkpoint(format!("unknown format tag {:?}", header.format)));
        }
        let blob = &bytes[header_end..];

        let mut groups: Vec<(String, ParamSet<f32>)> = Vec::new();
        for t in &header.tensors {
            if t.dtype != "f32" {
                return Err(Error::Checkpoint(format!("{}: unsupported dtype {}", t.name, t.dtype)));
            }
            let numel: usize = t.shape.iter().product();
            let (start, len) = (t.offset as usize, t.len as usize);
            if len != numel * 4 || start.checked_add(len).is_none_or(|end| end > blob.len()) {
                return Err(Error::Checkpoint(format!("{}: data range out of bounds", t.name)));
            }
            let data = blob[start..start + len]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            let idx = match groups.iter().position(|(g, _)| *g == t.group) {
                Some(i) => i,
                None => {
                    groups.push((t.group.clone(), ParamSet::new()));
                    groups.len() - 1
                }
            };
            groups[idx].1.add(t.name.clone(), Tensor::new(t.shape.clone(), data));
        }
        let mut take = |name: &str| -> Result<ParamSet<f32>> {
            let i = groups
                .iter()
                .position(|(g, _)| g == name)
                .ok_or_else(|| Error::Checkpoint(format!("missing {name} group")))?;
            Ok(groups.remove(i).1)
        };
        let params = take(GROUP_PARAMS)?;
        let ema = take(GROUP_EMA)?;
        let model = ModelBundle::from_parts(header.model, params, ema, header.step)?;
        Ok(Self { model, extra_groups: groups, metadata: header.metadata })
    }

    /// Writes atomically through a sibling temporary file.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path).and_then(|mut f| f.read_to_end(&mut bytes)).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let file_name =
        path.file_name().ok_or_else(|| Error::InvalidParameter(format!("{} is not a file path", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp-{}", file_name.to_string_lossy(), std::process::id()));
    let write = || -> std::io::Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    };
    write().map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io(path, e)
    })
}
