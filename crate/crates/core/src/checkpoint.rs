//! Checkpoint files: a text header followed by raw little-endian f64 arrays.
//!
//! ```text
//! ZEMI-CHECKPOINT 1
//! meta model.d_model 32
//! meta fusion.strategy "zemi"
//! param embed f64 120x32 trainable
//! param fusion.gated0.gate_attn f64 1 trainable
//! END
//! <values of every param, in header order>
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use serde_json::{Map, Value};

use crate::autograd::Tensor;
use crate::error::{Error, Result};
use crate::fusion::FusionConfig;
use crate::io_util;
use crate::model::Model;
use crate::nn::ModelConfig;

const MAGIC: &str = "ZEMI-CHECKPOINT 1";
const END: &str = "END";

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub trainable: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointHeader {
    /// Flattened `model.*` and `fusion.*` configuration, JSON-encoded values.
    pub meta: BTreeMap<String, String>,
    pub params: Vec<ParamEntry>,
}

impl CheckpointHeader {
    pub fn has_param(&self, name: &str) -> bool {
        self.params.iter().any(|p| p.name == name)
    }

    pub fn has_gate_params(&self) -> bool {
        self.params.iter().any(|p| p.name.contains(".gate_"))
    }

    fn configs(&self, path: &Path) -> Result<(ModelConfig, FusionConfig)> {
        let mut root = Map::new();
        for (k, v) in &self.meta {
            let (section, key) = k
                .split_once('.')
                .ok_or_else(|| Error::format(path, format!("meta key {k:?} lacks a section")))?;
            let value: Value = serde_json::from_str(v).map_err(|e| Error::format(path, format!("meta {k}: {e}")))?;
            root.entry(section.to_string())
                .or_insert_with(|| Value::Object(Map::new()))
                .as_object_mut()
                .expect("sections are objects")
                .insert(key.to_string(), value);
        }
        let take = |name: &str| root.get(name).cloned().unwrap_or(Value::Object(Map::new()));
        let model = serde_json::from_value(take("model")).map_err(|e| Error::format(path, format!("model config: {e}")))?;
        let fusion = serde_json::from_value(take("fusion")).map_err(|e| Error::format(path, format!("fusion config: {e}")))?;
        Ok((model, fusion))
    }
}

fn flatten(prefix: &str, value: Value, out: &mut BTreeMap<String, String>) {
    if let Value::Object(map) = value {
        for (k, v) in map {
            out.insert(format!("{prefix}.{k}"), v.to_string());
        }
    }
}

fn shape_str(shape: &[usize]) -> String {
    if shape.is_empty() {
        "scalar".into()
    } else {
        shape.iter().map(usize::to_string).collect::<Vec<_>>().join("x")
    }
}

pub fn header_of(model: &Model) -> CheckpointHeader {
    let mut meta = BTreeMap::new();
    flatten("model", serde_json::to_value(&model.model_cfg).expect("config serializes"), &mut meta);
    flatten("fusion", serde_json::to_value(&model.fusion_cfg).expect("config serializes"), &mut meta);
    let params = model
        .store
        .iter()
        .map(|(_, p)| ParamEntry { name: p.name.clone(), shape: p.value.shape().to_vec(), trainable: p.trainable })
        .collect();
    CheckpointHeader { meta, params }
}

pub fn to_bytes(model: &Model) -> Vec<u8> {
    let header = header_of(model);
    let mut text = format!("{MAGIC}\n");
    for (k, v) in &header.meta {
        text.push_str(&format!("meta {k} {v}\n"));
    }
    for p in &header.params {
        let flag = if p.trainable { "trainable" } else { "frozen" };
        text.push_str(&format!("param {} f64 {} {flag}\n", p.name, shape_str(&p.shape)));
    }
    text.push_str(END);
    text.push('\n');
    let mut out = text.into_bytes();
    for (_, p) in model.store.iter() {
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn save(model: &Model, path: &Path) -> Result<()> {
    io_util::write_atomic(path, &to_bytes(model))
}

fn parse_header(bytes: &[u8], path: &Path) -> Result<(CheckpointHeader, usize)> {
    let marker = format!("\n{END}\n");
    let end = bytes
        .windows(marker.len())
        .position(|w| w == marker.as_bytes())
        .ok_or_else(|| Error::format(path, "missing END line"))?;
    let text = std::str::from_utf8(&bytes[..end]).map_err(|_| Error::format(path, "header is not utf-8"))?;
    let mut lines = text.lines();
    if lines.next() != Some(MAGIC) {
        return Err(Error::format(path, "not a checkpoint (bad first line)"));
    }
    let mut meta = BTreeMap::new();
    let mut params = Vec::new();
    for (i, line) in lines.enumerate() {
        let bad = || Error::format(path, format!("header line {}: {line:?}", i + 2));
        let mut parts = line.splitn(3, ' ');
        match parts.next() {
            Some("meta") => {
                let key = parts.next().ok_or_else(bad)?;
                let value = parts.next().ok_or_else(bad)?;
                meta.insert(key.to_string(), value.to_string());
            }
            Some("param") => {
                let fields: Vec<&str> = line.split(' ').collect();
                let [_, name, dtype, dims, flag] = fields[..] else { return Err(bad()) };
                if dtype != "f64" {
                    return Err(Error::format(path, format!("unsupported dtype {dtype}")));
                }
                let shape = if dims == "scalar" {
                    Vec::new()
                } else {
                    dims.split('x').map(|d| d.parse().map_err(|_| bad())).collect::<Result<_>>()?
                };
                let trainable = match flag {
                    "trainable" => true,
                    "frozen" => false,
                    _ => return Err(bad()),
                };
                params.push(ParamEntry { name: name.to_string(), shape, trainable });
            }
            _ => return Err(bad()),
        }
    }
    Ok((CheckpointHeader { meta, params }, end + marker.len()))
}

/// Reads only the header.
pub fn read_header(path: &Path) -> Result<CheckpointHeader> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(parse_header(&bytes, path)?.0)
}

pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Model> {
    let (header, mut pos) = parse_header(bytes, path)?;
    let (model_cfg, fusion_cfg) = header.configs(path)?;
    let mut model = Model::new(model_cfg, fusion_cfg, 0)?;
    let expected: Vec<&str> = model.store.iter().map(|(_, p)| p.name.as_str()).collect();
    let found: Vec<&str> = header.params.iter().map(|p| p.name.as_str()).collect();
    if expected != found {
        return Err(Error::format(path, "parameter list does not match the configuration"));
    }
    let ids: Vec<_> = model.store.ids().collect();
    for (id, entry) in ids.into_iter().zip(&header.params) {
        if model.store.get(id).shape() != entry.shape.as_slice() {
            return Err(Error::format(path, format!("shape mismatch for {}", entry.name)));
        }
        let n: usize = entry.shape.iter().product();
        let end = pos + 8 * n;
        let raw = bytes.get(pos..end).ok_or_else(|| Error::format(path, "truncated parameter data"))?;
        let values: Vec<f64> = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        *model.store.get_mut(id) = Tensor::new(entry.shape.clone(), values)?;
        model.store.set_trainable(id, entry.trainable);
        pos = end;
    }
    if pos != bytes.len() {
        return Err(Error::format(path, "trailing bytes after parameter data"));
    }
    Ok(model)
}

pub fn load(path: &Path) -> Result<Model> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes, path)
}
