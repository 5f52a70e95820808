//! Settings of each command. Field names are the flag names (kebab-case on
//! the command line) and the keys of `--config` files.

use std::path::PathBuf;

use clap::{ArgAction, Args};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use vitscope_core::coder::{Activation, Architecture, Normalization};
use vitscope_core::vit::{HookPoint, TokenSelector};

use crate::datasets::DatasetSpec;

/// Parses a flag value with the serde name of `T`.
fn by_name<T: DeserializeOwned>(s: &str) -> Result<T, String> {
    serde_json::from_value(Value::String(s.to_string())).map_err(|e| e.to_string())
}

fn tokens(s: &str) -> Result<TokenSelector, String> {
    s.parse().map_err(|e: vitscope_core::Error| e.to_string())
}

fn hook(s: &str) -> Result<HookPoint, String> {
    s.parse().map_err(|e: vitscope_core::Error| e.to_string())
}

fn dataset(s: &str) -> Result<DatasetRef, String> {
    Ok(DatasetRef::Path(PathBuf::from(s)))
}

/// A dataset given as a path (flag) or a full spec (config file).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DatasetRef {
    Path(PathBuf),
    Spec(DatasetSpec),
}

impl DatasetRef {
    pub fn spec(&self) -> DatasetSpec {
        match self {
            DatasetRef::Path(p) => DatasetSpec::from_path(p),
            DatasetRef::Spec(s) => s.clone(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AblationKind {
    Zero,
    Mean,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ImageFormat {
    /// One tensor file with `img.{i}` / `label.{i}` entries.
    Raw,
    /// `class_NNNN/img_NNNNNN.ppm` directories (8-bit, lossy).
    Ppm,
}

#[derive(Clone, Debug, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExtractArgs {
    /// Settings file or run manifest.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Model weights file or directory.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long, value_parser = dataset)]
    pub dataset: Option<DatasetRef>,
    /// Comma-separated hook names, e.g. `blocks.0.hook_resid_post`.
    #[arg(long, value_delimiter = ',', value_parser = hook)]
    pub hooks: Vec<HookPoint>,
    /// `all`, `cls_only` or `spatial_only`, applied at write time.
    #[arg(long, default_value = "all", value_parser = tokens)]
    pub tokens: TokenSelector,
    /// Images per forward pass.
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    /// Rows per shard file.
    #[arg(long, default_value_t = crate::cache::DEFAULT_SHARD_ROWS)]
    pub shard_size: usize,
    /// Output root; one cache directory per hook is created inside.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Activation caches; several caches of `resid_post` hooks train a crosscoder.
    #[arg(long, value_delimiter = ',')]
    pub cache: Vec<PathBuf>,
    /// Cache the coder reconstructs (makes a transcoder).
    #[arg(long)]
    pub target_cache: Option<PathBuf>,
    /// Compute activations on the fly from this model instead of a cache.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long, value_parser = dataset)]
    pub dataset: Option<DatasetRef>,
    /// Hook read on the fly.
    #[arg(long, value_parser = hook)]
    pub hook: Option<HookPoint>,
    /// Image batch for on-the-fly activations.
    #[arg(long, default_value_t = 32)]
    pub image_batch: usize,
    /// Tokens to train on; defaults to the tokens stored in the cache.
    #[arg(long, value_parser = tokens)]
    pub tokens: Option<TokenSelector>,
    /// `sae`, `transcoder` or `crosscoder`; inferred from the inputs when absent.
    #[arg(long, value_parser = by_name::<Architecture>)]
    pub architecture: Option<Architecture>,
    /// `relu`, `topk`, `jumprelu` or `gated`.
    #[arg(long, default_value = "relu", value_parser = by_name::<Activation>)]
    pub variant: Activation,
    #[arg(long, default_value_t = 64)]
    pub expansion_factor: usize,
    #[arg(long, default_value_t = 1e-5)]
    pub l1_coefficient: f32,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long, default_value_t = 0.001)]
    pub jumprelu_threshold_init: f32,
    #[arg(long, default_value_t = 0.001)]
    pub jumprelu_bandwidth: f32,
    /// `none` or `unit_mean_squared_norm`.
    #[arg(long, default_value = "none", value_parser = by_name::<Normalization>)]
    pub normalization: Normalization,
    #[arg(long, default_value_t = 4096)]
    pub batch_size: usize,
    /// Peak learning rate.
    #[arg(long, default_value_t = 4e-4)]
    pub lr: f64,
    #[arg(long, default_value_t = 200)]
    pub warmup_steps: usize,
    /// Optimizer steps; defaults to `epochs` passes over the data.
    #[arg(long)]
    pub total_steps: Option<usize>,
    #[arg(long, default_value_t = 1)]
    pub epochs: usize,
    #[arg(long, action = ArgAction::Set, num_args = 0..=1, default_value_t = false, default_missing_value = "true")]
    pub ghost_grads: bool,
    /// Steps between dead-feature resamples; 0 disables.
    #[arg(long, default_value_t = 3000)]
    pub resample_interval: usize,
    #[arg(long, default_value_t = 1000)]
    pub dead_window: usize,
    #[arg(long, action = ArgAction::Set, num_args = 0..=1, default_value_t = false, default_missing_value = "true")]
    pub early_stop: bool,
    #[arg(long, default_value_t = 100)]
    pub eval_every: usize,
    #[arg(long, default_value_t = 3)]
    pub patience: usize,
    /// Minimum explained-variance gain in percentage points.
    #[arg(long, default_value_t = 0.1)]
    pub min_delta: f64,
    /// Fraction of rows held out for validation.
    #[arg(long, default_value_t = 0.1)]
    pub val_fraction: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Sweep learning rates.
    #[arg(long, value_delimiter = ',')]
    pub lr_grid: Vec<f64>,
    /// Sweep sparsity coefficients.
    #[arg(long, value_delimiter = ',')]
    pub l1_grid: Vec<f32>,
    /// Sweep ranking prefers cells with mean L0 at most this.
    #[arg(long)]
    pub l0_budget: Option<f64>,
    /// Parallel sweep cells; 0 uses every core.
    #[arg(long, default_value_t = 0)]
    pub jobs: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Coder checkpoint directory.
    #[arg(long)]
    pub coder: Option<PathBuf>,
    #[arg(long, value_parser = dataset)]
    pub dataset: Option<DatasetRef>,
    /// Hook to substitute; defaults to the hook the coder was trained on.
    #[arg(long, value_parser = hook)]
    pub hook: Option<HookPoint>,
    #[arg(long, default_value = "all", value_parser = tokens)]
    pub tokens: TokenSelector,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0.0)]
    pub l0_threshold: f32,
    /// Also record this many max-activating tokens per feature.
    #[arg(long)]
    pub max_activating_k: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LensLogitArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long, value_parser = dataset)]
    pub dataset: Option<DatasetRef>,
    /// Only the first this many examples.
    #[arg(long)]
    pub examples: Option<usize>,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LensAttnArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long, value_parser = dataset)]
    pub dataset: Option<DatasetRef>,
    #[arg(long)]
    pub layer: Option<usize>,
    #[arg(long)]
    pub head: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub example: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblateArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long, value_parser = dataset)]
    pub dataset: Option<DatasetRef>,
    #[arg(long, value_parser = hook)]
    pub hook: Option<HookPoint>,
    /// `zero` or `mean`.
    #[arg(long, default_value = "zero", value_parser = by_name::<AblationKind>)]
    pub kind: AblationKind,
    #[arg(long, default_value = "all", value_parser = tokens)]
    pub tokens: TokenSelector,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubstitutionArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long, value_parser = dataset)]
    pub dataset: Option<DatasetRef>,
    /// Coder checkpoint directories, one per layer.
    #[arg(long, value_delimiter = ',')]
    pub coders: Vec<PathBuf>,
    #[arg(long, default_value = "all", value_parser = tokens)]
    pub tokens: TokenSelector,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AliveArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long, value_parser = dataset)]
    pub dataset: Option<DatasetRef>,
    #[arg(long, value_delimiter = ',')]
    pub coders: Vec<PathBuf>,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// `eval.json` files or the directories holding them.
    #[arg(long, value_delimiter = ',')]
    pub evals: Vec<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenDatasetArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 64)]
    pub n_images: usize,
    #[arg(long, default_value_t = 10)]
    pub n_classes: usize,
    #[arg(long, default_value_t = 224)]
    pub image_size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.1)]
    pub noise: f32,
    /// `raw` or `ppm`.
    #[arg(long, default_value = "raw", value_parser = by_name::<ImageFormat>)]
    pub format: ImageFormat,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitToyArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// 1 to 4.
    #[arg(long, default_value_t = 2)]
    pub layers: usize,
    /// 16 or 32.
    #[arg(long, default_value_t = 32)]
    pub patch_size: usize,
    #[arg(long, action = ArgAction::Set, num_args = 0..=1, default_value_t = false, default_missing_value = "true")]
    pub attention_only: bool,
    #[arg(long, default_value_t = 224)]
    pub image_size: usize,
    #[arg(long, default_value_t = 1000)]
    pub n_classes: usize,
    #[arg(long, default_value_t = 128)]
    pub d_model: usize,
    #[arg(long, default_value_t = 4)]
    pub n_heads: usize,
    /// Defaults to four times `d_model`.
    #[arg(long)]
    pub d_mlp: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}
