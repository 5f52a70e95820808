//! Named-tensor container: an 8-byte little-endian header length, a JSON
//! header mapping each name to `{dtype, shape, data_offsets}` (plus an
//! optional `__metadata__` string map), then the raw little-endian data.
//! The layout is the one used by `.safetensors` files.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde_json::{json, Map, Value};
use vitscope_core::Tensor;

use crate::error::{Error, Result};

const METADATA_KEY: &str = "__metadata__";
/// Refuse headers above this size instead of allocating blindly.
const MAX_HEADER: u64 = 100 << 20;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TensorFile {
    pub tensors: BTreeMap<String, Tensor>,
    pub metadata: BTreeMap<String, String>,
}

impl TensorFile {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn with_metadata(mut self, key: impl Into<String>, value: impl Into<String>) -> Self {
        self.metadata.insert(key.into(), value.into());
        self
    }

    /// Serialized bytes; tensors are laid out in name order.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header = Map::new();
        if !self.metadata.is_empty() {
            header.insert(METADATA_KEY.into(), json!(self.metadata));
        }
        let mut offset = 0usize;
        for (name, t) in &self.tensors {
            let len = t.numel() * 4;
            header.insert(
                name.clone(),
                json!({"dtype": "F32", "shape": t.shape(), "data_offsets": [offset, offset + len]}),
            );
            offset += len;
        }
        let mut head = serde_json::to_vec(&Value::Object(header)).expect("header serializes");
        while head.len() % 8 != 0 {
            head.push(b' ');
        }
        let mut out = Vec::with_capacity(8 + head.len() + offset);
        out.extend_from_slice(&(head.len() as u64).to_le_bytes());
        out.extend_from_slice(&head);
        for t in self.tensors.values() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Parses bytes; `origin` names the source in error messages.
    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let bad = |m: String| Error::format(origin, m);
        if bytes.len() < 8 {
            return Err(bad("file too short for a tensor container".into()));
        }
        let n = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"));
        if n > MAX_HEADER || 8 + n > bytes.len() as u64 {
            return Err(bad(format!("header length {n} exceeds the file")));
        }
        let head = &bytes[8..8 + n as usize];
        let data = &bytes[8 + n as usize..];
        let header: Map<String, Value> =
            serde_json::from_slice(head).map_err(|e| bad(format!("header is not a JSON object: {e}")))?;
        let mut out = TensorFile::new();
        for (name, entry) in header {
            if name == METADATA_KEY {
                out.metadata = serde_json::from_value(entry)
                    .map_err(|e| bad(format!("metadata must map strings to strings: {e}")))?;
                continue;
            }
            let dtype = entry.get("dtype").and_then(Value::as_str).unwrap_or("");
            if dtype != "F32" {
                return Err(bad(format!("tensor `{name}` has dtype `{dtype}`; only F32 is supported")));
            }
            let shape: Vec<usize> = entry
                .get("shape")
                .cloned()
                .and_then(|v| serde_json::from_value(v).ok())
                .ok_or_else(|| bad(format!("tensor `{name}` has no valid shape")))?;
            let offs: [usize; 2] = entry
                .get("data_offsets")
                .cloned()
                .and_then(|v| serde_json::from_value(v).ok())
                .ok_or_else(|| bad(format!("tensor `{name}` has no valid data_offsets")))?;
            let numel: usize = shape.iter().product();
            if offs[0] > offs[1] || offs[1] > data.len() || offs[1] - offs[0] != numel * 4 {
                return Err(bad(format!("tensor `{name}` offsets {offs:?} do not match shape {shape:?}")));
            }
            let values = data[offs[0]..offs[1]]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            out.insert(name, Tensor::new(shape, values)?);
        }
        Ok(out)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(Error::io(path))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(Error::io(path))?;
        Self::from_bytes(&bytes, path)
    }

    pub fn take(&mut self, name: &str, origin: &Path) -> Result<Tensor> {
        self.tensors
            .remove(name)
            .ok_or_else(|| Error::format(origin, format!("missing tensor `{name}`")))
    }
}
