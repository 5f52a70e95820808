//! Model weights and sparse-coder checkpoints on disk.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use vitscope_core::coder::{param_shapes, ParamSet, SparseCoder, SparseCoderConfig};
use vitscope_core::vit::{HookedViT, ViTConfig};

use crate::container::TensorFile;
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;
pub const ENGINE_VERSION: &str = env!("CARGO_PKG_VERSION");

pub const MODEL_FILE: &str = "model.safetensors";
pub const CODER_FILE: &str = "coder.safetensors";
pub const CODER_SIDECAR: &str = "coder_config.json";

const MODEL_CONFIG_KEY: &str = "vit_config";
const MODEL_VERSION_KEY: &str = "format_version";

/// Resolves a model argument: a weights file, or a directory holding one.
pub fn model_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(MODEL_FILE)
    } else {
        path.to_path_buf()
    }
}

pub fn save_model(path: &Path, model: &HookedViT) -> Result<()> {
    let config = serde_json::to_string(model.config()).expect("config serializes");
    let mut file = TensorFile::new()
        .with_metadata(MODEL_CONFIG_KEY, config)
        .with_metadata(MODEL_VERSION_KEY, CHECKPOINT_FORMAT_VERSION.to_string());
    for (name, t) in model.named_weights() {
        file.insert(name, t.clone());
    }
    file.write(path)
}

pub fn load_model(path: &Path) -> Result<HookedViT> {
    let path = model_path(path);
    let file = TensorFile::read(&path)?;
    check_version(file.metadata.get(MODEL_VERSION_KEY).map(String::as_str), &path)?;
    let raw = file
        .metadata
        .get(MODEL_CONFIG_KEY)
        .ok_or_else(|| Error::format(&path, "no model configuration in the file metadata"))?;
    let config: ViTConfig =
        serde_json::from_str(raw).map_err(|e| Error::format(&path, format!("bad model configuration: {e}")))?;
    Ok(HookedViT::from_named(config, file.tensors)?)
}

fn check_version(found: Option<&str>, path: &Path) -> Result<()> {
    match found.map(str::parse::<u32>) {
        Some(Ok(CHECKPOINT_FORMAT_VERSION)) => Ok(()),
        Some(Ok(v)) => Err(Error::Version(format!(
            "{}: format version {v} is not supported (this build reads version {CHECKPOINT_FORMAT_VERSION})",
            path.display()
        ))),
        _ => Err(Error::Version(format!("{}: missing or unreadable format version", path.display()))),
    }
}

/// Human-readable companion of `coder.safetensors`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoderSidecar {
    pub format_version: u32,
    pub engine_version: String,
    pub config: SparseCoderConfig,
    pub input_scale: f32,
    pub output_scale: f32,
}

/// Writes `coder.safetensors` and `coder_config.json` into `dir`.
pub fn save_coder(dir: &Path, coder: &SparseCoder) -> Result<()> {
    fs::create_dir_all(dir).map_err(Error::io(dir))?;
    let mut file = TensorFile::new().with_metadata(MODEL_VERSION_KEY, CHECKPOINT_FORMAT_VERSION.to_string());
    for (name, t) in coder.params().iter() {
        file.insert(name, t.clone());
    }
    file.write(&dir.join(CODER_FILE))?;
    let sidecar = CoderSidecar {
        format_version: CHECKPOINT_FORMAT_VERSION,
        engine_version: ENGINE_VERSION.into(),
        config: coder.config().clone(),
        input_scale: coder.input_scale(),
        output_scale: coder.output_scale(),
    };
    write_json(&dir.join(CODER_SIDECAR), &sidecar)
}

/// Loads a checkpoint directory (or the directory of a given
/// `coder.safetensors`).
pub fn load_coder(path: &Path) -> Result<SparseCoder> {
    let dir = if path.is_dir() { path } else { path.parent().unwrap_or(Path::new(".")) };
    let side_path = dir.join(CODER_SIDECAR);
    let raw = fs::read(&side_path).map_err(Error::io(&side_path))?;
    let value: serde_json::Value =
        serde_json::from_slice(&raw).map_err(|e| Error::format(&side_path, e.to_string()))?;
    let version = value.get("format_version").map(|v| v.to_string());
    check_version(version.as_deref(), &side_path)?;
    let sidecar: CoderSidecar =
        serde_json::from_value(value).map_err(|e| Error::format(&side_path, e.to_string()))?;
    let weights_path = dir.join(CODER_FILE);
    let mut file = TensorFile::read(&weights_path)?;
    check_version(file.metadata.get(MODEL_VERSION_KEY).map(String::as_str), &weights_path)?;
    let mut params = ParamSet::new();
    for (name, _) in param_shapes(&sidecar.config) {
        let t = file.take(&name, &weights_path)?;
        params.push(name, t);
    }
    if let Some(extra) = file.tensors.keys().next() {
        return Err(Error::format(&weights_path, format!("unexpected tensor `{extra}`")));
    }
    Ok(SparseCoder::from_params(
        sidecar.config,
        params,
        sidecar.input_scale,
        sidecar.output_scale,
    )?)
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value).expect("value serializes");
    s.push('\n');
    fs::write(path, s).map_err(Error::io(path))
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let raw = fs::read(path).map_err(Error::io(path))?;
    serde_json::from_slice(&raw).map_err(|e| Error::format(path, e.to_string()))
}

/// All tensors of a coder by name, for comparisons.
pub fn coder_tensors(coder: &SparseCoder) -> BTreeMap<String, Vec<f32>> {
    coder
        .params()
        .iter()
        .map(|(n, t)| (n.to_string(), t.data().to_vec()))
        .collect()
}
