use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::coder::SparseCoder;
use crate::data::Dataset;
use crate::error::dim_err;
use crate::eval::{alive_features, ce_suite};
use crate::vit::{HookPoint, HookedViT, TokenSelector};
use crate::{Result, Tensor};

/// Cross-entropy with one layer's activations replaced by a coder's
/// reconstruction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubstitutionPoint {
    pub layer: Option<usize>,
    pub hook: String,
    pub ce_clean: f64,
    pub ce_recon: f64,
    /// `ce_recon − ce_clean`; negative means the substitution helped.
    pub delta: f64,
    pub improved: bool,
}

/// Substitutes each coder at its hook in turn and records the loss change.
pub fn substitution_sweep(
    model: &HookedViT,
    coders: &[(HookPoint, &SparseCoder)],
    dataset: &Dataset,
    batch_size: usize,
    tokens: TokenSelector,
) -> Result<Vec<SubstitutionPoint>> {
    coders
        .iter()
        .map(|&(hook, coder)| {
            let ce = ce_suite(model, coder, hook, dataset.batches(batch_size), tokens)?;
            Ok(SubstitutionPoint {
                layer: hook.layer(),
                hook: alloc::format!("{hook}"),
                ce_clean: ce.clean,
                ce_recon: ce.recon,
                delta: ce.recon - ce.clean,
                improved: ce.recon < ce.clean,
            })
        })
        .collect()
}

/// Percentage of alive features per layer, separately for CLS and spatial
/// token streams.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AliveByLayer {
    pub layers: Vec<usize>,
    pub cls: Vec<f64>,
    pub spatial: Vec<f64>,
}

/// `coders[i]` is applied to `cls[i]` and `spatial[i]`, raw activation rows
/// of layer `layers[i]`.
pub fn alive_by_layer(
    layers: &[usize],
    coders: &[&SparseCoder],
    cls: &[Tensor],
    spatial: &[Tensor],
) -> Result<AliveByLayer> {
    let n = layers.len();
    if coders.len() != n || cls.len() != n || spatial.len() != n {
        return Err(dim_err!("alive_by_layer needs one coder and two streams per layer"));
    }
    let pct = |coder: &SparseCoder, stream: &Tensor| -> Result<f64> {
        let f = coder.encode(stream)?;
        alive_features([&f], coder.dict_size())
    };
    let mut out = AliveByLayer {
        layers: layers.to_vec(),
        cls: Vec::with_capacity(n),
        spatial: Vec::with_capacity(n),
    };
    for i in 0..n {
        out.cls.push(pct(coders[i], &cls[i])?);
        out.spatial.push(pct(coders[i], &spatial[i])?);
    }
    Ok(out)
}
