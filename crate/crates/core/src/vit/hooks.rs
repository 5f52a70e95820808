//! Hook point names, token selectors and the activation cache.

use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::ViTConfig;
use crate::{Error, Result, Tensor};

/// A named location in the forward pass.
///
/// Per-example activation shapes (`T` tokens, `H` heads):
/// `Embed`, `PosEmbed`, resid/attn/mlp hooks are `[T×d_model]`;
/// `Pattern` is `[H×T×T]`; `LnFinal` is `[d_model]` (CLS only);
/// `Logits` is `[n_classes]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum HookPoint {
    Embed,
    PosEmbed,
    ResidPre(usize),
    Pattern(usize),
    AttnOut(usize),
    ResidMid(usize),
    MlpOut(usize),
    ResidPost(usize),
    LnFinal,
    Logits,
}

impl HookPoint {
    pub fn layer(self) -> Option<usize> {
        match self {
            HookPoint::ResidPre(l)
            | HookPoint::Pattern(l)
            | HookPoint::AttnOut(l)
            | HookPoint::ResidMid(l)
            | HookPoint::MlpOut(l)
            | HookPoint::ResidPost(l) => Some(l),
            _ => None,
        }
    }

    /// Short sublayer label used in report rows (`resid_post`, `mlp_out`, ...).
    pub fn sublayer(self) -> &'static str {
        match self {
            HookPoint::Embed => "embed",
            HookPoint::PosEmbed => "pos_embed",
            HookPoint::ResidPre(_) => "resid_pre",
            HookPoint::Pattern(_) => "pattern",
            HookPoint::AttnOut(_) => "attn_out",
            HookPoint::ResidMid(_) => "resid_mid",
            HookPoint::MlpOut(_) => "mlp_out",
            HookPoint::ResidPost(_) => "resid_post",
            HookPoint::LnFinal => "ln_final",
            HookPoint::Logits => "logits",
        }
    }

    /// Whether the activation carries a token axis that selectors act on.
    pub fn has_token_axis(self) -> bool {
        !matches!(self, HookPoint::LnFinal | HookPoint::Logits)
    }

    pub fn is_valid_for(self, config: &ViTConfig) -> bool {
        match self {
            HookPoint::MlpOut(l) => !config.attention_only && l < config.n_layers,
            p => p.layer().is_none_or(|l| l < config.n_layers),
        }
    }

    pub fn validate(self, config: &ViTConfig) -> Result<()> {
        if self.is_valid_for(config) {
            Ok(())
        } else {
            Err(Error::UnknownHook(self.to_string()))
        }
    }

    /// Position in forward execution order; earlier hooks fire first.
    pub fn order_key(self) -> (usize, usize) {
        match self {
            HookPoint::Embed => (0, 0),
            HookPoint::PosEmbed => (0, 1),
            HookPoint::ResidPre(l) => (1 + l, 0),
            HookPoint::Pattern(l) => (1 + l, 1),
            HookPoint::AttnOut(l) => (1 + l, 2),
            HookPoint::ResidMid(l) => (1 + l, 3),
            HookPoint::MlpOut(l) => (1 + l, 4),
            HookPoint::ResidPost(l) => (1 + l, 5),
            HookPoint::LnFinal => (usize::MAX, 0),
            HookPoint::Logits => (usize::MAX, 1),
        }
    }
}

impl fmt::Display for HookPoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            HookPoint::Embed => write!(f, "embed"),
            HookPoint::PosEmbed => write!(f, "pos_embed"),
            HookPoint::ResidPre(l) => write!(f, "blocks.{l}.hook_resid_pre"),
            HookPoint::Pattern(l) => write!(f, "blocks.{l}.hook_pattern"),
            HookPoint::AttnOut(l) => write!(f, "blocks.{l}.hook_attn_out"),
            HookPoint::ResidMid(l) => write!(f, "blocks.{l}.hook_resid_mid"),
            HookPoint::MlpOut(l) => write!(f, "blocks.{l}.hook_mlp_out"),
            HookPoint::ResidPost(l) => write!(f, "blocks.{l}.hook_resid_post"),
            HookPoint::LnFinal => write!(f, "ln_final"),
            HookPoint::Logits => write!(f, "logits"),
        }
    }
}

impl FromStr for HookPoint {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let unknown = || Error::UnknownHook(s.to_string());
        match s {
            "embed" => return Ok(HookPoint::Embed),
            "pos_embed" => return Ok(HookPoint::PosEmbed),
            "ln_final" => return Ok(HookPoint::LnFinal),
            "logits" => return Ok(HookPoint::Logits),
            _ => {}
        }
        let rest = s.strip_prefix("blocks.").ok_or_else(unknown)?;
        let (layer, name) = rest.split_once('.').ok_or_else(unknown)?;
        if layer.is_empty() || (layer.len() > 1 && layer.starts_with('0')) {
            return Err(unknown());
        }
        let l: usize = layer.parse().map_err(|_| unknown())?;
        Ok(match name {
            "hook_resid_pre" => HookPoint::ResidPre(l),
            "hook_pattern" => HookPoint::Pattern(l),
            "hook_attn_out" => HookPoint::AttnOut(l),
            "hook_resid_mid" => HookPoint::ResidMid(l),
            "hook_mlp_out" => HookPoint::MlpOut(l),
            "hook_resid_post" => HookPoint::ResidPost(l),
            _ => return Err(unknown()),
        })
    }
}

impl Serialize for HookPoint {
    fn serialize<S: Serializer>(&self, s: S) -> core::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for HookPoint {
    fn deserialize<D: Deserializer<'de>>(d: D) -> core::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Every hook point of a config in forward order. MLP hooks are omitted
/// for attention-only models.
pub fn list_hook_points(config: &ViTConfig) -> Vec<HookPoint> {
    let mut out = Vec::with_capacity(4 + 6 * config.n_layers);
    out.push(HookPoint::Embed);
    out.push(HookPoint::PosEmbed);
    for l in 0..config.n_layers {
        out.push(HookPoint::ResidPre(l));
        out.push(HookPoint::Pattern(l));
        out.push(HookPoint::AttnOut(l));
        out.push(HookPoint::ResidMid(l));
        if !config.attention_only {
            out.push(HookPoint::MlpOut(l));
        }
        out.push(HookPoint::ResidPost(l));
    }
    out.push(HookPoint::LnFinal);
    out.push(HookPoint::Logits);
    out
}

/// Which tokens of a `[T×…]` activation an operation applies to.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenSelector {
    #[default]
    All,
    ClsOnly,
    SpatialOnly,
}

impl TokenSelector {
    /// Selected token indices out of `n_tokens` (CLS is index 0).
    pub fn indices(self, n_tokens: usize) -> Vec<usize> {
        match self {
            TokenSelector::All => (0..n_tokens).collect(),
            TokenSelector::ClsOnly => (0..n_tokens.min(1)).collect(),
            TokenSelector::SpatialOnly => (1..n_tokens).collect(),
        }
    }

    pub fn count(self, n_tokens: usize) -> usize {
        match self {
            TokenSelector::All => n_tokens,
            TokenSelector::ClsOnly => n_tokens.min(1),
            TokenSelector::SpatialOnly => n_tokens.saturating_sub(1),
        }
    }

    pub fn includes(self, token: usize) -> bool {
        match self {
            TokenSelector::All => true,
            TokenSelector::ClsOnly => token == 0,
            TokenSelector::SpatialOnly => token != 0,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TokenSelector::All => "all",
            TokenSelector::ClsOnly => "cls_only",
            TokenSelector::SpatialOnly => "spatial_only",
        }
    }
}

impl FromStr for TokenSelector {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(TokenSelector::All),
            "cls_only" | "cls" => Ok(TokenSelector::ClsOnly),
            "spatial_only" | "spatial" => Ok(TokenSelector::SpatialOnly),
            _ => Err(Error::Config(alloc::format!("unknown token selector `{s}`"))),
        }
    }
}

/// Flattens the selected tokens of token-major activations `[B×T×d]`
/// into rows `[B·n_selected × d]`, example-major.
pub fn select_token_rows(acts: &Tensor, tokens: TokenSelector) -> Result<Tensor> {
    let s = acts.shape();
    if s.len() != 3 {
        return Err(Error::Dimension(alloc::format!("expected [B×T×d] activations, got {s:?}")));
    }
    let (b, t, d) = (s[0], s[1], s[2]);
    let idx = tokens.indices(t);
    let mut data = Vec::with_capacity(b * idx.len() * d);
    for e in 0..b {
        for &tok in &idx {
            let start = (e * t + tok) * d;
            data.extend_from_slice(&acts.data()[start..start + d]);
        }
    }
    Tensor::new(alloc::vec![b * idx.len(), d], data)
}

/// Token role, used when reporting per-kind statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenKind {
    Cls,
    Spatial,
}

impl TokenKind {
    pub fn of_position(token: usize) -> Self {
        if token == 0 {
            TokenKind::Cls
        } else {
            TokenKind::Spatial
        }
    }
}

/// Captured activations, batch-leading (`[B × per-example shape]`), kept
/// in forward order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ActivationCache {
    entries: Vec<(HookPoint, Tensor)>,
}

impl ActivationCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, point: HookPoint, value: Tensor) {
        match self.entries.binary_search_by_key(&point.order_key(), |(p, _)| p.order_key()) {
            Ok(i) => self.entries[i].1 = value,
            Err(i) => self.entries.insert(i, (point, value)),
        }
    }

    pub fn get(&self, point: HookPoint) -> Result<&Tensor> {
        self.entries
            .iter()
            .find(|(p, _)| *p == point)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::MissingActivation(point.to_string()))
    }

    pub fn contains(&self, point: HookPoint) -> bool {
        self.entries.iter().any(|(p, _)| *p == point)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (HookPoint, &Tensor)> {
        self.entries.iter().map(|(p, t)| (*p, t))
    }

    pub fn names(&self) -> Vec<HookPoint> {
        self.entries.iter().map(|(p, _)| *p).collect()
    }
}
