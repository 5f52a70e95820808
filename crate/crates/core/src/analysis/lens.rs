use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::vit::{HookPoint, HookedViT};
use crate::Result;

/// What the classifier would predict from the CLS residual after each layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LensTrajectory {
    pub example: usize,
    /// `[n_layers][n_classes]`
    pub logits: Vec<Vec<f32>>,
    /// Arg-max class per layer (lowest index on ties).
    pub top1: Vec<usize>,
}

fn argmax(v: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Applies the final layernorm and the head to every layer's CLS residual,
/// for every example in `cache`. The cache must hold all `resid_post` hooks.
pub fn logit_lens(model: &HookedViT, cache: &crate::vit::ActivationCache) -> Result<Vec<LensTrajectory>> {
    let n_layers = model.config().n_layers;
    let resid: Vec<_> = (0..n_layers)
        .map(|l| cache.get(HookPoint::ResidPost(l)))
        .collect::<Result<_>>()?;
    let batch = resid[0].shape()[0];
    let mut out = Vec::with_capacity(batch);
    for e in 0..batch {
        let mut logits = Vec::with_capacity(n_layers);
        for r in &resid {
            let per: usize = r.shape()[1..].iter().product();
            let d = model.config().d_model;
            let cls = &r.data()[e * per..e * per + d];
            logits.push(model.unembed(&model.final_norm(cls)?)?.into_data());
        }
        let top1 = logits.iter().map(|l| argmax(l)).collect();
        out.push(LensTrajectory {
            example: e,
            logits,
            top1,
        });
    }
    Ok(out)
}
