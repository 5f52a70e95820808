//! Sharded on-disk activation caches and row streams.
//!
//! A cache is a directory holding `manifest.json` and shards
//! `shard_00000.bin`, ... of little-endian f32 rows `[rows × d_model]`,
//! concatenated in example-major token order. The manifest is written last,
//! so a directory without one is an incomplete cache.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use vitscope_core::data::Dataset;
use vitscope_core::vit::{activation_shape, select_token_rows, HookPoint, HookedViT, ModelInput, TokenSelector};
use vitscope_core::Tensor;

use crate::checkpoint::{read_json, write_json};
use crate::error::{config, Error, Result};

pub const CACHE_FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const DEFAULT_SHARD_ROWS: usize = 65_536;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShardInfo {
    pub file: String,
    pub rows: usize,
}

/// Describes every byte of a cache directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CacheManifest {
    pub format_version: u32,
    pub model_id: String,
    pub hook: HookPoint,
    /// Tokens kept at write time.
    pub token_selector: TokenSelector,
    /// Row width.
    pub d_model: usize,
    /// Rows contributed by each example.
    pub tokens_per_example: usize,
    pub n_examples: usize,
    /// Total rows over all shards.
    pub n_tokens: usize,
    pub seed: u64,
    pub dtype: String,
    pub byte_order: String,
    pub shards: Vec<ShardInfo>,
}

/// Fixed description of a cache, known before any rows are written.
#[derive(Clone, Debug, PartialEq)]
pub struct CacheHeader {
    pub model_id: String,
    pub hook: HookPoint,
    pub token_selector: TokenSelector,
    pub d_model: usize,
    pub tokens_per_example: usize,
    pub seed: u64,
}

fn shard_name(i: usize) -> String {
    format!("shard_{i:05}.bin")
}

fn is_shard_file(name: &str) -> bool {
    name.starts_with("shard_") && name.ends_with(".bin")
}

/// Append-only writer; call [`CacheWriter::finish`] to publish the manifest.
pub struct CacheWriter {
    dir: PathBuf,
    header: CacheHeader,
    shard_rows: usize,
    pending: Vec<f32>,
    shards: Vec<ShardInfo>,
    n_tokens: usize,
}

impl CacheWriter {
    /// Prepares `dir`, removing any manifest and shards of an earlier cache.
    pub fn create(dir: &Path, header: CacheHeader, shard_rows: usize) -> Result<Self> {
        if shard_rows == 0 {
            return Err(config("shard size must be positive"));
        }
        if header.d_model == 0 {
            return Err(config("cache rows must have positive width"));
        }
        fs::create_dir_all(dir).map_err(Error::io(dir))?;
        let manifest = dir.join(MANIFEST_FILE);
        if manifest.exists() {
            fs::remove_file(&manifest).map_err(Error::io(&manifest))?;
        }
        for entry in fs::read_dir(dir).map_err(Error::io(dir))? {
            let entry = entry.map_err(Error::io(dir))?;
            if entry.file_name().to_str().is_some_and(is_shard_file) {
                fs::remove_file(entry.path()).map_err(Error::io(entry.path()))?;
            }
        }
        Ok(Self {
            dir: dir.to_path_buf(),
            header,
            shard_rows,
            pending: Vec::new(),
            shards: Vec::new(),
            n_tokens: 0,
        })
    }

    /// Appends rows `[n × d_model]`.
    pub fn append(&mut self, rows: &Tensor) -> Result<()> {
        let (n, d) = rows.dims2()?;
        if d != self.header.d_model {
            return Err(vitscope_core::Error::Dimension(format!(
                "cache rows are {} wide, got a batch of width {d}",
                self.header.d_model
            ))
            .into());
        }
        self.pending.extend_from_slice(rows.data());
        self.n_tokens += n;
        let full = self.shard_rows * d;
        while self.pending.len() >= full {
            let rest = self.pending.split_off(full);
            let shard = std::mem::replace(&mut self.pending, rest);
            self.flush(&shard)?;
        }
        Ok(())
    }

    fn flush(&mut self, values: &[f32]) -> Result<()> {
        let name = shard_name(self.shards.len());
        let path = self.dir.join(&name);
        let mut bytes = Vec::with_capacity(values.len() * 4);
        for v in values {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        fs::write(&path, bytes).map_err(Error::io(&path))?;
        self.shards.push(ShardInfo {
            file: name,
            rows: values.len() / self.header.d_model,
        });
        Ok(())
    }

    /// Writes the last partial shard and then the manifest.
    pub fn finish(mut self) -> Result<CacheManifest> {
        if !self.pending.is_empty() {
            let rest = std::mem::take(&mut self.pending);
            self.flush(&rest)?;
        }
        let h = &self.header;
        let manifest = CacheManifest {
            format_version: CACHE_FORMAT_VERSION,
            model_id: h.model_id.clone(),
            hook: h.hook,
            token_selector: h.token_selector,
            d_model: h.d_model,
            tokens_per_example: h.tokens_per_example,
            n_examples: self.n_tokens / h.tokens_per_example.max(1),
            n_tokens: self.n_tokens,
            seed: h.seed,
            dtype: "f32".into(),
            byte_order: "little".into(),
            shards: self.shards,
        };
        write_json(&self.dir.join(MANIFEST_FILE), &manifest)?;
        Ok(manifest)
    }
}

/// Writes a whole stream of row batches as one cache.
pub fn write_cache(
    dir: &Path,
    header: CacheHeader,
    shard_rows: usize,
    batches: impl IntoIterator<Item = Tensor>,
) -> Result<CacheManifest> {
    let mut w = CacheWriter::create(dir, header, shard_rows)?;
    for b in batches {
        w.append(&b)?;
    }
    w.finish()
}

/// A finalized cache opened for reading.
#[derive(Clone, Debug)]
pub struct CacheReader {
    dir: PathBuf,
    manifest: CacheManifest,
}

impl CacheReader {
    pub fn open(dir: &Path) -> Result<Self> {
        if !dir.is_dir() {
            return Err(Error::Io {
                path: dir.to_path_buf(),
                source: std::io::Error::new(std::io::ErrorKind::NotFound, "activation cache directory not found"),
            });
        }
        let mpath = dir.join(MANIFEST_FILE);
        if !mpath.exists() {
            return Err(Error::format(dir, "no manifest.json; the cache is missing or was not finalized"));
        }
        let raw: serde_json::Value = read_json(&mpath)?;
        match raw.get("format_version").and_then(serde_json::Value::as_u64) {
            Some(v) if v == CACHE_FORMAT_VERSION as u64 => {}
            v => {
                return Err(Error::Version(format!(
                    "{}: cache format version {v:?} is not supported (this build reads version {CACHE_FORMAT_VERSION})",
                    mpath.display()
                )))
            }
        }
        let manifest: CacheManifest =
            serde_json::from_value(raw).map_err(|e| Error::format(&mpath, e.to_string()))?;
        if manifest.dtype != "f32" || manifest.byte_order != "little" {
            return Err(Error::format(&mpath, "only little-endian f32 caches are supported"));
        }
        let sum: usize = manifest.shards.iter().map(|s| s.rows).sum();
        if sum != manifest.n_tokens {
            return Err(Error::format(
                &mpath,
                format!("shards hold {sum} rows but the manifest declares {}", manifest.n_tokens),
            ));
        }
        for s in &manifest.shards {
            let p = dir.join(&s.file);
            let len = fs::metadata(&p).map_err(Error::io(&p))?.len();
            if len != (s.rows * manifest.d_model * 4) as u64 {
                return Err(Error::format(&p, format!("{len} bytes, expected {} rows", s.rows)));
            }
        }
        Ok(Self {
            dir: dir.to_path_buf(),
            manifest,
        })
    }

    pub fn manifest(&self) -> &CacheManifest {
        &self.manifest
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn read_shard(&self, i: usize) -> Result<Tensor> {
        let s = &self.manifest.shards[i];
        let p = self.dir.join(&s.file);
        let bytes = fs::read(&p).map_err(Error::io(&p))?;
        let values = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Ok(Tensor::new(vec![s.rows, self.manifest.d_model], values)?)
    }

    /// Every row, in storage order.
    pub fn read_all(&self) -> Result<Tensor> {
        let mut data = Vec::with_capacity(self.manifest.n_tokens * self.manifest.d_model);
        for i in 0..self.manifest.shards.len() {
            data.extend_from_slice(self.read_shard(i)?.data());
        }
        Ok(Tensor::new(vec![self.manifest.n_tokens, self.manifest.d_model], data)?)
    }

    /// Rows restricted to `tokens`: either the selector the cache was
    /// written with, or any selector over an all-tokens cache.
    pub fn read_selected(&self, tokens: TokenSelector) -> Result<Tensor> {
        let rows: Vec<Tensor> = self.chunks(tokens)?.collect::<Result<_>>()?;
        let refs: Vec<&Tensor> = rows.iter().collect();
        if refs.is_empty() {
            return Ok(Tensor::new(vec![0, self.manifest.d_model], Vec::new())?);
        }
        Ok(Tensor::vcat(&refs)?)
    }

    fn chunks(&self, tokens: TokenSelector) -> Result<impl Iterator<Item = Result<Tensor>> + '_> {
        let m = &self.manifest;
        let filter = if tokens == m.token_selector {
            None
        } else if m.token_selector == TokenSelector::All && m.tokens_per_example > 1 {
            Some(m.tokens_per_example)
        } else {
            return Err(config(format!(
                "cache at {} holds `{}` tokens; `{}` cannot be selected from it",
                self.dir.display(),
                m.token_selector.as_str(),
                tokens.as_str()
            )));
        };
        let mut offset = 0usize;
        Ok((0..m.shards.len()).map(move |i| {
            let shard = self.read_shard(i)?;
            let rows = shard.shape()[0];
            let start = offset;
            offset += rows;
            match filter {
                None => Ok(shard),
                Some(t) => {
                    let keep: Vec<usize> = (0..rows).filter(|r| tokens.includes((start + r) % t)).collect();
                    Ok(shard.select_rows(&keep)?)
                }
            }
        }))
    }
}

/// Rows of a captured activation `[B × …]` under `tokens`.
pub fn hook_rows(acts: &Tensor, hook: HookPoint, tokens: TokenSelector) -> Result<Tensor> {
    match hook {
        HookPoint::Pattern(_) => Err(config("attention patterns are exported with `lens attn`, not cached")),
        h if h.has_token_axis() => Ok(select_token_rows(acts, tokens)?),
        h => {
            if tokens != TokenSelector::All {
                return Err(config(format!("`{h}` has no token axis; use the `all` selector")));
            }
            Ok(acts.clone())
        }
    }
}

/// Width and rows-per-example of a cacheable hook.
pub fn hook_row_layout(model: &HookedViT, hook: HookPoint, tokens: TokenSelector) -> Result<(usize, usize)> {
    hook.validate(model.config())?;
    let t = model.config().n_tokens();
    let shape = activation_shape(model.config(), hook, t);
    match hook {
        HookPoint::Pattern(_) => Err(config("attention patterns are exported with `lens attn`, not cached")),
        h if h.has_token_axis() => Ok((shape[1], tokens.count(t))),
        h => {
            if tokens != TokenSelector::All {
                return Err(config(format!("`{h}` has no token axis; use the `all` selector")));
            }
            Ok((shape[0], 1))
        }
    }
}

/// Where rows come from.
pub enum ActivationSource<'a> {
    Cache(&'a CacheReader),
    /// Computed on the fly, `image_batch` images per forward pass.
    Model {
        model: &'a HookedViT,
        dataset: &'a Dataset,
        hook: HookPoint,
        image_batch: usize,
    },
}

/// Re-batches a stream of row chunks into `[batch × d]` tensors; the last
/// batch may be shorter.
pub struct RowBatches<'a> {
    chunks: Box<dyn Iterator<Item = Result<Tensor>> + 'a>,
    width: usize,
    batch: usize,
    pending: Vec<f32>,
    exhausted: bool,
}

impl<'a> RowBatches<'a> {
    pub fn new(chunks: impl Iterator<Item = Result<Tensor>> + 'a, width: usize, batch: usize) -> Result<Self> {
        if batch == 0 {
            return Err(config("batch size must be positive"));
        }
        Ok(Self {
            chunks: Box::new(chunks),
            width,
            batch,
            pending: Vec::new(),
            exhausted: false,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }
}

impl Iterator for RowBatches<'_> {
    type Item = Result<Tensor>;

    fn next(&mut self) -> Option<Self::Item> {
        let want = self.batch * self.width;
        while self.pending.len() < want && !self.exhausted {
            match self.chunks.next() {
                Some(Ok(t)) => self.pending.extend_from_slice(t.data()),
                Some(Err(e)) => {
                    self.exhausted = true;
                    return Some(Err(e));
                }
                None => self.exhausted = true,
            }
        }
        if self.pending.is_empty() {
            return None;
        }
        let take = want.min(self.pending.len());
        let rest = self.pending.split_off(take);
        let out = std::mem::replace(&mut self.pending, rest);
        let rows = out.len() / self.width;
        Some(Tensor::new(vec![rows, self.width], out).map_err(Error::from))
    }
}

/// Streams `[batch_size × d]` rows of the selected tokens, in example-major
/// order. Cached and on-the-fly sources yield identical sequences.
pub fn stream_activations<'a>(
    source: ActivationSource<'a>,
    batch_size: usize,
    tokens: TokenSelector,
) -> Result<RowBatches<'a>> {
    match source {
        ActivationSource::Cache(reader) => {
            let width = reader.manifest().d_model;
            RowBatches::new(reader.chunks(tokens)?, width, batch_size)
        }
        ActivationSource::Model {
            model,
            dataset,
            hook,
            image_batch,
        } => {
            let (width, _) = hook_row_layout(model, hook, tokens)?;
            let chunks = dataset.batches(image_batch).map(move |b| {
                let (images, _) = b?;
                let out = model.forward(ModelInput::Images(&images), &[hook])?;
                hook_rows(out.cache.get(hook)?, hook, tokens)
            });
            RowBatches::new(chunks, width, batch_size)
        }
    }
}

#[derive(Clone, Debug)]
pub struct ExtractOptions {
    pub tokens: TokenSelector,
    pub image_batch: usize,
    pub shard_rows: usize,
    pub model_id: String,
    pub seed: u64,
}

/// Directory name of a hook's cache under an extraction root.
pub fn cache_dir(root: &Path, hook: HookPoint) -> PathBuf {
    root.join(hook.to_string())
}

/// Runs the dataset through the model once and writes one cache per hook
/// under `root`.
pub fn extract_activations(
    model: &HookedViT,
    dataset: &Dataset,
    hooks: &[HookPoint],
    root: &Path,
    opts: &ExtractOptions,
) -> Result<Vec<CacheManifest>> {
    if hooks.is_empty() {
        return Err(config("at least one hook is required"));
    }
    if opts.image_batch == 0 {
        return Err(config("image batch size must be positive"));
    }
    let layouts = hooks
        .iter()
        .map(|&h| hook_row_layout(model, h, opts.tokens))
        .collect::<Result<Vec<_>>>()?;
    let mut writers = Vec::with_capacity(hooks.len());
    for (&hook, &(d_model, tokens_per_example)) in hooks.iter().zip(&layouts) {
        let header = CacheHeader {
            model_id: opts.model_id.clone(),
            hook,
            token_selector: opts.tokens,
            d_model,
            tokens_per_example,
            seed: opts.seed,
        };
        writers.push(CacheWriter::create(&cache_dir(root, hook), header, opts.shard_rows)?);
    }
    for batch in dataset.batches(opts.image_batch) {
        let (images, _) = batch?;
        let out = model.forward(ModelInput::Images(&images), hooks)?;
        for (w, &hook) in writers.iter_mut().zip(hooks) {
            w.append(&hook_rows(out.cache.get(hook)?, hook, opts.tokens)?)?;
        }
    }
    writers.into_iter().map(CacheWriter::finish).collect()
}
