use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::config_err;
use crate::vit::{ActivationCache, HookPoint, TokenKind, ViTConfig};
use crate::Result;

/// Where a token sits: CLS, or a patch at `(row, col)` of the grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenPosition {
    pub index: usize,
    pub kind: TokenKind,
    pub row: Option<usize>,
    pub col: Option<usize>,
}

/// One head's attention for one example, with grid metadata for rendering.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionPattern {
    pub layer: usize,
    pub head: usize,
    pub example: usize,
    pub grid_side: usize,
    pub cls_index: usize,
    pub tokens: Vec<TokenPosition>,
    /// `[query][key]`, rows sum to 1.
    pub pattern: Vec<Vec<f32>>,
}

pub fn export_attention(
    config: &ViTConfig,
    cache: &ActivationCache,
    layer: usize,
    head: usize,
    example: usize,
) -> Result<AttentionPattern> {
    if head >= config.n_heads {
        return Err(config_err!("head {head} out of range (model has {})", config.n_heads));
    }
    let p = cache.get(HookPoint::Pattern(layer))?;
    let s = p.shape();
    let (batch, t) = (s[0], s[2]);
    if example >= batch {
        return Err(config_err!("example {example} out of range (batch of {batch})"));
    }
    let side = config.grid_side();
    let base = ((example * config.n_heads + head) * t) * t;
    let pattern = (0..t)
        .map(|q| p.data()[base + q * t..base + (q + 1) * t].to_vec())
        .collect();
    let tokens = (0..t)
        .map(|i| {
            let patch = i.checked_sub(1);
            TokenPosition {
                index: i,
                kind: TokenKind::of_position(i),
                row: patch.map(|k| k / side),
                col: patch.map(|k| k % side),
            }
        })
        .collect();
    Ok(AttentionPattern {
        layer,
        head,
        example,
        grid_side: side,
        cls_index: 0,
        tokens,
        pattern,
    })
}
