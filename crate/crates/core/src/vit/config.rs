use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::config_err;
use crate::Result;

/// Input channels; images are `H×W×3`.
pub const N_CHANNELS: usize = 3;

/// Architecture of a frozen ViT.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViTConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_head: usize,
    pub d_mlp: usize,
    pub patch_size: usize,
    pub image_size: usize,
    pub n_classes: usize,
    #[serde(default)]
    pub attention_only: bool,
    #[serde(default = "default_ln_eps")]
    pub layer_norm_eps: f32,
}

fn default_ln_eps() -> f32 {
    1e-5
}

/// Named toy sizes: layer counts 1–4.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ToySize {
    Tiny,
    Base,
    Small,
    Medium,
}

impl ToySize {
    pub fn n_layers(self) -> usize {
        match self {
            ToySize::Tiny => 1,
            ToySize::Base => 2,
            ToySize::Small => 3,
            ToySize::Medium => 4,
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "tiny" => Some(Self::Tiny),
            "base" => Some(Self::Base),
            "small" => Some(Self::Small),
            "medium" => Some(Self::Medium),
            _ => None,
        }
    }
}

impl ViTConfig {
    /// ViT-B/32 geometry (768-wide, 12 layers, 224px, 1000 classes).
    pub fn base_patch32() -> Self {
        Self {
            n_layers: 12,
            d_model: 768,
            n_heads: 12,
            d_head: 64,
            d_mlp: 3072,
            patch_size: 32,
            image_size: 224,
            n_classes: 1000,
            attention_only: false,
            layer_norm_eps: 1e-5,
        }
    }

    /// Small toy model with the given depth and patch size.
    pub fn toy(size: ToySize, patch_size: usize, attention_only: bool) -> Self {
        Self {
            n_layers: size.n_layers(),
            d_model: 128,
            n_heads: 4,
            d_head: 32,
            d_mlp: 512,
            patch_size,
            image_size: 224,
            n_classes: 1000,
            attention_only,
            layer_norm_eps: 1e-5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems: Vec<String> = Vec::new();
        if self.n_layers == 0 {
            problems.push("n_layers must be at least 1".into());
        }
        if self.d_model != self.n_heads * self.d_head {
            problems.push(alloc::format!(
                "d_model ({}) != n_heads ({}) * d_head ({})",
                self.d_model,
                self.n_heads,
                self.d_head
            ));
        }
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            problems.push(alloc::format!(
                "image_size {} is not divisible by patch_size {}",
                self.image_size,
                self.patch_size
            ));
        }
        if self.n_classes < 2 {
            problems.push("n_classes must be at least 2".into());
        }
        if !self.attention_only && self.d_mlp == 0 {
            problems.push("d_mlp must be positive unless attention_only".into());
        }
        if !(self.layer_norm_eps > 0.0) {
            problems.push("layer_norm_eps must be positive".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(config_err!("{}", problems.join("; ")))
        }
    }

    pub fn grid_side(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn n_patches(&self) -> usize {
        self.grid_side() * self.grid_side()
    }

    /// Spatial patches plus the CLS token.
    pub fn n_tokens(&self) -> usize {
        self.n_patches() + 1
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * N_CHANNELS
    }

    /// Every weight tensor the model must carry, with its shape, in a
    /// fixed order.
    pub fn weight_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let d = self.d_model;
        let mut out = vec![
            ("embed.W_E".into(), vec![self.patch_dim(), d]),
            ("embed.b_E".into(), vec![d]),
            ("cls_token".into(), vec![d]),
            ("pos_embed.W_pos".into(), vec![self.n_tokens(), d]),
        ];
        for l in 0..self.n_layers {
            let p = |s: &str| alloc::format!("blocks.{l}.{s}");
            out.push((p("ln1.w"), vec![d]));
            out.push((p("ln1.b"), vec![d]));
            for m in ["Q", "K", "V", "O"] {
                out.push((p(&alloc::format!("attn.W_{m}")), vec![d, d]));
                out.push((p(&alloc::format!("attn.b_{m}")), vec![d]));
            }
            if !self.attention_only {
                out.push((p("ln2.w"), vec![d]));
                out.push((p("ln2.b"), vec![d]));
                out.push((p("mlp.W_in"), vec![d, self.d_mlp]));
                out.push((p("mlp.b_in"), vec![self.d_mlp]));
                out.push((p("mlp.W_out"), vec![self.d_mlp, d]));
                out.push((p("mlp.b_out"), vec![d]));
            }
        }
        out.push(("ln_final.w".into(), vec![d]));
        out.push(("ln_final.b".into(), vec![d]));
        out.push(("head.W_head".into(), vec![d, self.n_classes]));
        out.push(("head.b_head".into(), vec![self.n_classes]));
        out
    }
}
