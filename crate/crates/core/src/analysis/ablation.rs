use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::config_err;
use crate::eval::per_example_ce;
use crate::vit::{HookedViT, Intervention, InterventionKind, ModelInput, TokenSelector};
use crate::{Result, Tensor};

/// Effect of one intervention, as ablated minus clean.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
    pub target: String,
    pub kind: String,
    pub tokens: TokenSelector,
    pub examples: usize,
    pub ce_clean: f64,
    pub ce_ablated: f64,
    pub delta_ce: f64,
    pub accuracy_clean: f64,
    pub accuracy_ablated: f64,
    pub delta_accuracy: f64,
    /// Mean change of each class logit.
    pub delta_logits: Vec<f64>,
}

fn kind_name(kind: &InterventionKind<'_>) -> &'static str {
    match kind {
        InterventionKind::ZeroAblate => "zero",
        InterventionKind::MeanAblate(_) => "mean",
        InterventionKind::ReplaceWith(_) => "replace",
        InterventionKind::SubstituteCoder(_) => "substitute_coder",
    }
}

fn correct(logits: &Tensor, labels: &[usize]) -> Result<usize> {
    let (rows, _) = logits.dims2()?;
    Ok((0..rows)
        .filter(|&i| {
            let r = logits.row(i);
            let mut best = 0;
            for (c, &v) in r.iter().enumerate() {
                if v > r[best] {
                    best = c;
                }
            }
            best == labels[i]
        })
        .count())
}

/// Runs every batch clean and with `intervention`, and reports the change
/// in cross-entropy, accuracy and per-class logits.
pub fn ablate<'d>(
    model: &HookedViT,
    intervention: &Intervention<'_>,
    batches: impl IntoIterator<Item = Result<(Tensor, &'d [usize])>>,
) -> Result<AblationResult> {
    let classes = model.config().n_classes;
    let (mut ce_c, mut ce_a) = (0.0f64, 0.0f64);
    let (mut ok_c, mut ok_a) = (0usize, 0usize);
    let mut dlog = vec![0.0f64; classes];
    let mut n = 0usize;
    for batch in batches {
        let (images, labels) = batch?;
        let input = ModelInput::Images(&images);
        let clean = model.forward(input, &[])?.logits;
        let abl = model.run_with_intervention(input, intervention)?;
        ce_c += per_example_ce(&clean, labels)?.iter().sum::<f64>();
        ce_a += per_example_ce(&abl, labels)?.iter().sum::<f64>();
        ok_c += correct(&clean, labels)?;
        ok_a += correct(&abl, labels)?;
        for (i, d) in dlog.iter_mut().enumerate() {
            for r in 0..labels.len() {
                *d += abl.row(r)[i] as f64 - clean.row(r)[i] as f64;
            }
        }
        n += labels.len();
    }
    if n == 0 {
        return Err(config_err!("ablation over an empty dataset"));
    }
    let nf = n as f64;
    let (ce_clean, ce_ablated) = (ce_c / nf, ce_a / nf);
    let (accuracy_clean, accuracy_ablated) = (100.0 * ok_c as f64 / nf, 100.0 * ok_a as f64 / nf);
    Ok(AblationResult {
        target: alloc::format!("{}", intervention.target),
        kind: kind_name(&intervention.kind).into(),
        tokens: intervention.tokens,
        examples: n,
        ce_clean,
        ce_ablated,
        delta_ce: ce_ablated - ce_clean,
        accuracy_clean,
        accuracy_ablated,
        delta_accuracy: accuracy_ablated - accuracy_clean,
        delta_logits: dlog.into_iter().map(|d| d / nf).collect(),
    })
}
