//! Single-file checkpoint container.
//!
//! Layout: `u64` little-endian header length, a JSON header, then raw
//! little-endian `f32` data. The header maps each parameter name to
//! `{dtype, shape, data_offsets}` and carries string metadata under
//! `__metadata__` (architecture JSON, format version, user entries).

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde_json::{json, Map, Value};

use super::{contract, Architecture, ModelHandle};
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;
const FORMAT_TAG: &str = "pcce-checkpoint";

impl ModelHandle {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut header = Map::new();
        let mut meta: BTreeMap<String, String> = self.metadata.clone();
        meta.insert("format".into(), FORMAT_TAG.into());
        meta.insert("version".into(), CHECKPOINT_FORMAT_VERSION.to_string());
        meta.insert("architecture".into(), serde_json::to_string(&self.arch)?);
        header.insert("__metadata__".into(), serde_json::to_value(&meta)?);
        let mut offset = 0usize;
        for p in self.params.iter() {
            let bytes = p.value.len() * 4;
            header.insert(
                p.name.clone(),
                json!({"dtype": "F32", "shape": p.shape, "data_offsets": [offset, offset + bytes]}),
            );
            offset += bytes;
        }
        let head = serde_json::to_vec(&Value::Object(header))?;
        let mut out = Vec::with_capacity(8 + head.len() + offset);
        out.extend_from_slice(&(head.len() as u64).to_le_bytes());
        out.extend_from_slice(&head);
        for p in self.params.iter() {
            for v in &p.value {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<ModelHandle> {
        let bad = |m: &str| contract(format!("checkpoint: {m}"));
        if bytes.len() < 8 {
            return Err(bad("truncated header length"));
        }
        let n = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
        let data = bytes.get(8 + n..).ok_or_else(|| bad("truncated header"))?;
        let header: Map<String, Value> = serde_json::from_slice(&bytes[8..8 + n])?;
        let meta: BTreeMap<String, String> =
            serde_json::from_value(header.get("__metadata__").cloned().ok_or_else(|| bad("missing metadata"))?)?;
        if meta.get("format").map(String::as_str) != Some(FORMAT_TAG) {
            return Err(bad("not a pcce checkpoint"));
        }
        let version: u32 = meta.get("version").and_then(|v| v.parse().ok()).ok_or_else(|| bad("missing version"))?;
        if version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Unsupported(format!("checkpoint format version {version}")));
        }
        let arch: Architecture = serde_json::from_str(meta.get("architecture").ok_or_else(|| bad("missing architecture"))?)?;
        let mut model = ModelHandle::build(arch, 0)?;
        if header.len() - 1 != model.params.len() {
            return Err(bad("parameter count does not match the architecture"));
        }
        for p in model.params.iter_mut() {
            let entry = header.get(&p.name).ok_or_else(|| bad(&format!("missing tensor {}", p.name)))?;
            let shape: Vec<usize> = serde_json::from_value(entry["shape"].clone())?;
            let [a, b]: [usize; 2] = serde_json::from_value(entry["data_offsets"].clone())?;
            if shape != p.shape || entry["dtype"] != "F32" || b < a || b - a != p.value.len() * 4 {
                return Err(bad(&format!("tensor {} has an unexpected layout", p.name)));
            }
            let raw = data.get(a..b).ok_or_else(|| bad(&format!("tensor {} out of range", p.name)))?;
            for (v, c) in p.value.iter_mut().zip(raw.chunks_exact(4)) {
                *v = f32::from_le_bytes(c.try_into().expect("4 bytes"));
            }
        }
        model.metadata = meta
            .into_iter()
            .filter(|(k, _)| !matches!(k.as_str(), "format" | "version" | "architecture"))
            .collect();
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<ModelHandle> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        ModelHandle::from_bytes(&bytes)
    }
}
