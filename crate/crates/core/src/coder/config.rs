use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::config_err;
use crate::vit::HookPoint;
use crate::Result;

/// Latent nonlinearity.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    TopK,
    JumpRelu,
    Gated,
}

/// What the coder reads and reconstructs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Architecture {
    /// Reconstructs its own input.
    Sae,
    /// Reads one hook and reconstructs another.
    Transcoder,
    /// Shared latents over the residual streams of several layers.
    Crosscoder,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    #[default]
    None,
    /// Scale inputs so their mean squared norm equals `d_in`.
    UnitMeanSquaredNorm,
}

/// Hyperparameters and wiring of a sparse coder. Serialized verbatim as
/// the checkpoint sidecar.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SparseCoderConfig {
    pub architecture: Architecture,
    pub activation: Activation,
    pub d_in: usize,
    /// Output width; defaults to `d_in`.
    #[serde(default)]
    pub d_out: Option<usize>,
    pub expansion_factor: usize,
    /// λ, the sparsity penalty coefficient.
    pub l1_coefficient: f32,
    /// Active latents per row (Top-K only).
    #[serde(default)]
    pub k: Option<usize>,
    #[serde(default = "default_threshold")]
    pub jumprelu_threshold_init: f32,
    /// Straight-through window width ε (JumpReLU only).
    #[serde(default = "default_bandwidth")]
    pub jumprelu_bandwidth: f32,
    #[serde(default)]
    pub input_hook: Option<HookPoint>,
    #[serde(default)]
    pub output_hook: Option<HookPoint>,
    /// Layers whose `hook_resid_post` a crosscoder spans.
    #[serde(default)]
    pub layers: Vec<usize>,
    #[serde(default)]
    pub normalization: Normalization,
    #[serde(default)]
    pub seed: u64,
}

fn default_threshold() -> f32 {
    0.001
}

fn default_bandwidth() -> f32 {
    0.001
}

impl SparseCoderConfig {
    /// A plain SAE on `d_in`-wide activations.
    pub fn sae(activation: Activation, d_in: usize, expansion_factor: usize, l1: f32) -> Self {
        Self {
            architecture: Architecture::Sae,
            activation,
            d_in,
            d_out: None,
            expansion_factor,
            l1_coefficient: l1,
            k: None,
            jumprelu_threshold_init: default_threshold(),
            jumprelu_bandwidth: default_bandwidth(),
            input_hook: None,
            output_hook: None,
            layers: Vec::new(),
            normalization: Normalization::None,
            seed: 0,
        }
    }

    pub fn dictionary_size(&self) -> usize {
        self.d_in * self.expansion_factor
    }

    pub fn output_width(&self) -> usize {
        self.d_out.unwrap_or(self.d_in)
    }

    /// Short label: `relu`, `topk`, `jumprelu`, `gated`, `transcoder` or
    /// `crosscoder`.
    pub fn variant_label(&self) -> &'static str {
        match (self.architecture, self.activation) {
            (Architecture::Transcoder, _) => "transcoder",
            (Architecture::Crosscoder, _) => "crosscoder",
            (_, Activation::Relu) => "relu",
            (_, Activation::TopK) => "topk",
            (_, Activation::JumpRelu) => "jumprelu",
            (_, Activation::Gated) => "gated",
        }
    }

    /// Decoder rows are held at unit norm during training.
    pub fn unit_norm_decoder(&self) -> bool {
        self.architecture != Architecture::Crosscoder
            && matches!(self.activation, Activation::Relu | Activation::TopK)
    }

    /// Validates every field, reporting all problems at once.
    pub fn validate(&self) -> Result<()> {
        let mut problems: Vec<String> = Vec::new();
        let dict = self.dictionary_size();
        if self.d_in == 0 {
            problems.push("d_in must be positive".into());
        }
        if self.expansion_factor == 0 {
            problems.push("expansion_factor must be positive".into());
        }
        if !(self.l1_coefficient >= 0.0) || !self.l1_coefficient.is_finite() {
            problems.push("l1_coefficient must be finite and non-negative".into());
        }
        match (self.activation, self.k) {
            (Activation::TopK, None) => problems.push("k is required for topk".into()),
            (Activation::TopK, Some(0)) => problems.push("k must be positive".into()),
            (Activation::TopK, Some(k)) if k > dict => {
                problems.push(alloc::format!("k ({k}) exceeds dictionary size ({dict})"))
            }
            _ => {}
        }
        if self.activation == Activation::JumpRelu
            && (!(self.jumprelu_bandwidth > 0.0) || !(self.jumprelu_threshold_init >= 0.0))
        {
            problems.push("jumprelu needs bandwidth > 0 and threshold_init >= 0".into());
        }
        match self.architecture {
            Architecture::Sae => {
                if self.output_width() != self.d_in {
                    problems.push("an SAE reconstructs its input: d_out must equal d_in".into());
                }
            }
            Architecture::Transcoder => {
                if self.input_hook.is_none() || self.output_hook.is_none() {
                    problems.push("transcoder needs input_hook and output_hook".into());
                }
            }
            Architecture::Crosscoder => {
                if self.layers.is_empty() {
                    problems.push("crosscoder needs a non-empty layer set".into());
                }
                let mut sorted = self.layers.clone();
                sorted.sort_unstable();
                sorted.dedup();
                if sorted.len() != self.layers.len() {
                    problems.push("crosscoder layers must be distinct".into());
                }
                if self.activation != Activation::Relu {
                    problems.push("crosscoder supports the relu activation only".into());
                }
                if self.output_width() != self.d_in {
                    problems.push("crosscoder d_out must equal d_in".into());
                }
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(config_err!("{}", problems.join("; ")))
        }
    }
}
