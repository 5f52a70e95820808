use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::metrics::{
    pct_ce_recovered, per_example_ce, AliveTracker, CosineAccumulator, EvAccumulator, L0Accumulator,
    L0Stats, MaxActivatingSet,
};
use super::report::EvalRow;
use crate::coder::SparseCoder;
use crate::error::config_err;
use crate::vit::{
    select_token_rows, HookPoint, HookedViT, Intervention, InterventionKind, ModelInput, TokenKind, TokenSelector,
};
use crate::{Error, Result, Tensor};

/// Clean, substituted and zero-ablated cross-entropy.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CeTriplet {
    pub clean: f64,
    pub recon: f64,
    pub zero: f64,
    /// `None` when `|zero − clean|` is degenerate.
    pub pct_recovered: Option<f64>,
}

impl CeTriplet {
    pub fn from_parts(clean: f64, recon: f64, zero: f64) -> Self {
        Self {
            clean,
            recon,
            zero,
            pct_recovered: pct_ce_recovered(clean, recon, zero),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalOptions {
    pub tokens: TokenSelector,
    pub l0_threshold: f32,
    /// Track this many max-activating tokens per feature.
    pub max_activating_k: Option<usize>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            tokens: TokenSelector::All,
            l0_threshold: 0.0,
            max_activating_k: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct CoderEvaluation {
    pub row: EvalRow,
    pub ce: CeTriplet,
    pub l0: L0Stats,
    /// Token pairs skipped by the cosine metrics because of zero vectors.
    pub cos_skipped: u64,
    pub alive: AliveTracker,
    pub max_activating: Option<MaxActivatingSet>,
}

struct CeSums {
    clean: f64,
    recon: f64,
    zero: f64,
    n: usize,
}

impl CeSums {
    fn finish(&self) -> Result<CeTriplet> {
        if self.n == 0 {
            return Err(Error::Undefined("cross-entropy over an empty dataset".into()));
        }
        let n = self.n as f64;
        Ok(CeTriplet::from_parts(self.clean / n, self.recon / n, self.zero / n))
    }
}

fn final_resid(model: &HookedViT) -> HookPoint {
    HookPoint::ResidPost(model.config().n_layers - 1)
}

/// Mean CE of the clean model, with `hook` replaced by the coder's
/// reconstruction, and with `hook` zero-ablated, on the selected tokens.
pub fn ce_suite<'d>(
    model: &HookedViT,
    coder: &SparseCoder,
    hook: HookPoint,
    batches: impl IntoIterator<Item = Result<(Tensor, &'d [usize])>>,
    tokens: TokenSelector,
) -> Result<CeTriplet> {
    let opts = EvalOptions {
        tokens,
        ..EvalOptions::default()
    };
    Ok(evaluate_coder(model, coder, hook, batches, &opts)?.ce)
}

/// The full metric row for a coder attached at `hook`.
pub fn evaluate_coder<'d>(
    model: &HookedViT,
    coder: &SparseCoder,
    hook: HookPoint,
    batches: impl IntoIterator<Item = Result<(Tensor, &'d [usize])>>,
    opts: &EvalOptions,
) -> Result<CoderEvaluation> {
    if coder.is_crosscoder() {
        return Err(Error::Unsupported("evaluating a crosscoder by substitution".into()));
    }
    hook.validate(model.config())?;
    if !hook.has_token_axis() || matches!(hook, HookPoint::Pattern(_)) {
        return Err(config_err!("coders attach to token-major hooks, not `{hook}`"));
    }
    if let Some(out) = coder.config().output_hook.filter(|_| coder.transcoder_input().is_some()) {
        if out != hook {
            return Err(config_err!("transcoder reconstructs `{out}`, not `{hook}`"));
        }
    }
    let input_hook = coder.transcoder_input().unwrap_or(hook);
    let last = final_resid(model);
    let mut capture = vec![input_hook, hook, last];
    capture.sort_by_key(|p| p.order_key());
    capture.dedup();

    let n_tokens = model.config().n_tokens();
    let selected = opts.tokens.indices(n_tokens);
    let mut ce = CeSums {
        clean: 0.0,
        recon: 0.0,
        zero: 0.0,
        n: 0,
    };
    let mut ev = EvAccumulator::new();
    let mut cos = CosineAccumulator::default();
    let mut recon_cos = CosineAccumulator::default();
    let mut l0 = L0Accumulator::new(opts.l0_threshold);
    let mut alive = AliveTracker::new(coder.dict_size());
    let mut maxact = match opts.max_activating_k {
        Some(k) => Some(MaxActivatingSet::new(coder.dict_size(), k)?),
        None => None,
    };
    let mut example_base = 0u64;

    for batch in batches {
        let (images, labels) = batch?;
        let input = ModelInput::Images(&images);
        let clean = model.forward(input, &capture)?;
        let substitute = Intervention::new(hook, InterventionKind::SubstituteCoder(coder), opts.tokens);
        let sub = model.run_with_hooks(input, &[last], core::slice::from_ref(&substitute))?;
        let zero = model.run_with_intervention(input, &Intervention::zero(hook, opts.tokens))?;

        for (sum, logits) in [
            (&mut ce.clean, &clean.logits),
            (&mut ce.recon, &sub.logits),
            (&mut ce.zero, &zero),
        ] {
            *sum += per_example_ce(logits, labels)?.iter().sum::<f64>();
        }
        ce.n += labels.len();

        let x = select_token_rows(clean.cache.get(input_hook)?, opts.tokens)?;
        let y = select_token_rows(clean.cache.get(hook)?, opts.tokens)?;
        let fw = coder.forward(&x)?;
        let recon = coder.decode(&fw.latents)?;
        ev.observe(&y, &recon)?;
        cos.observe(&y, &recon)?;
        let b = labels.len();
        let kinds: Vec<TokenKind> = (0..b)
            .flat_map(|_| selected.iter().map(|&t| TokenKind::of_position(t)))
            .collect();
        l0.observe(&fw.latents, &kinds)?;
        alive.observe(&fw.latents)?;
        if let Some(m) = maxact.as_mut() {
            let ex: Vec<u64> = (0..b as u64)
                .flat_map(|e| core::iter::repeat_n(example_base + e, selected.len()))
                .collect();
            let tok: Vec<u32> = (0..b).flat_map(|_| selected.iter().map(|&t| t as u32)).collect();
            m.observe(&fw.latents, &ex, &tok)?;
        }
        let clean_last = clean.cache.get(last)?;
        let sub_last = sub.cache.get(last)?;
        let d = model.config().d_model;
        let per = n_tokens * d;
        for e in 0..b {
            let at = e * per..e * per + d;
            recon_cos.observe_pair(&clean_last.data()[at.clone()], &sub_last.data()[at]);
        }
        example_base += b as u64;
    }

    let ce = ce.finish()?;
    let l0s = l0.finish(model.config().n_patches());
    let row = EvalRow {
        layer: hook.layer(),
        sublayer: hook.sublayer().into(),
        l1_coeff: coder.config().l1_coefficient,
        explained_variance: ev.finish()?,
        avg_l0: l0s.mean_all,
        avg_cls_l0: l0s.mean_cls,
        cos_sim: cos.mean(),
        recon_cos_sim: recon_cos.mean(),
        ce: ce.clean,
        recon_ce: ce.recon,
        zero_abl_ce: ce.zero,
        pct_ce_recovered: ce.pct_recovered,
        pct_alive: alive.pct_alive(),
    };
    if cos.skipped + recon_cos.skipped > 0 {
        log::warn!(
            "cosine metrics skipped {} zero-vector pairs",
            cos.skipped + recon_cos.skipped
        );
    }
    Ok(CoderEvaluation {
        row,
        ce,
        l0: l0s,
        cos_skipped: cos.skipped + recon_cos.skipped,
        alive,
        max_activating: maxact,
    })
}
