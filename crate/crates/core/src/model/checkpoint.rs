//! Binary checkpoint format.
//!
//! Layout: the 8-byte magic `HMTCKPT1`, a little-endian `u64` header length,
//! a JSON header, then every tensor as raw little-endian `f64` in header order.
//! Files are written to a temporary sibling and renamed into place.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig, ParamGroup, Params};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"HMTCKPT1";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    group: String,
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    step: u64,
    seed: u64,
    #[serde(default)]
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

/// Adam moment estimates stored alongside the weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub m: Params,
    pub v: Params,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub step: u64,
    pub seed: u64,
    pub moments: Option<Moments>,
    /// Free-form training metadata.
    pub meta: serde_json::Value,
}

impl Checkpoint {
    pub fn new(model: Model, step: u64, seed: u64) -> Self {
        Checkpoint {
            model,
            step,
            seed,
            moments: None,
            meta: serde_json::Value::Null,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut groups: Vec<(&str, &Params)> = vec![("params", &self.model.params)];
        if let Some(mo) = &self.moments {
            groups.push(("adam_m", &mo.m));
            groups.push(("adam_v", &mo.v));
        }
        let mut tensors = Vec::new();
        let mut data: Vec<u8> = Vec::new();
        for (group, p) in &groups {
            p.visit("", &mut |name, shape, values| {
                tensors.push(TensorEntry {
                    group: group.to_string(),
                    name,
                    shape: shape.to_vec(),
                });
                for x in values {
                    data.extend_from_slice(&x.to_le_bytes());
                }
            });
        }
        let header = serde_json::to_vec(&Header {
            config: self.model.config.clone(),
            step: self.step,
            seed: self.seed,
            meta: self.meta.clone(),
            tensors,
        })?;
        let mut bytes = Vec::with_capacity(16 + header.len() + data.len());
        bytes.extend_from_slice(MAGIC);
        bytes.extend_from_slice(&(header.len() as u64).to_le_bytes());
        bytes.extend_from_slice(&header);
        bytes.extend_from_slice(&data);

        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let tmp = path.with_extension("tmp");
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        let bad = |msg: &str| Error::Checkpoint(format!("{}: {msg}", path.display()));
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let body = 16usize
            .checked_add(hlen)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(&bytes[16..body])?;
        header.config.validate()?;

        let template = Model::init(header.config.clone(), 0)?.params;
        let mut params = template.clone();
        let mut adam_m: Option<Params> = None;
        let mut adam_v: Option<Params> = None;
        let expected = template.named();
        let mut offset = body;
        let mut idx_in_group = 0usize;
        let mut current = String::new();
        for t in &header.tensors {
            if t.group != current {
                current = t.group.clone();
                idx_in_group = 0;
            }
            let (ename, eshape, _) = expected
                .get(idx_in_group)
                .ok_or_else(|| bad("too many tensors"))?;
            if &t.name != ename || &t.shape != eshape {
                return Err(bad(&format!(
                    "tensor {}.{} {:?} does not match model layout",
                    t.group, t.name, t.shape
                )));
            }
            let target = match t.group.as_str() {
                "params" => &mut params,
                "adam_m" => adam_m.get_or_insert_with(|| template.clone()),
                "adam_v" => adam_v.get_or_insert_with(|| template.clone()),
                other => return Err(bad(&format!("unknown tensor group '{other}'"))),
            };
            let n: usize = t.shape.iter().product();
            let end = offset + n * 8;
            if end > bytes.len() {
                return Err(bad("truncated tensor data"));
            }
            let slot = target
                .slices_mut()
                .into_iter()
                .nth(idx_in_group)
                .expect("layout checked above");
            for (x, chunk) in slot.iter_mut().zip(bytes[offset..end].chunks_exact(8)) {
                *x = f64::from_le_bytes(chunk.try_into().unwrap());
            }
            offset = end;
            idx_in_group += 1;
        }
        if offset != bytes.len() {
            return Err(bad("trailing bytes after tensor data"));
        }
        let moments = match (adam_m, adam_v) {
            (Some(m), Some(v)) => Some(Moments { m, v }),
            (None, None) => None,
            _ => return Err(bad("incomplete optimizer state")),
        };
        Ok(Checkpoint {
            model: Model::new(header.config, params)?,
            step: header.step,
            seed: header.seed,
            moments,
            meta: header.meta,
        })
    }
}
