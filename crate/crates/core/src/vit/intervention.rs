//! Forward-pass interventions and the per-call hook dispatcher.

use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;

use super::hooks::{ActivationCache, HookPoint, TokenSelector};
use super::ViTConfig;
use crate::coder::SparseCoder;
use crate::error::{config_err, dim_err};
use crate::{Error, Result, Tensor};

/// What to do with the selected tokens of a hooked activation.
#[derive(Clone, Debug)]
pub enum InterventionKind<'a> {
    ZeroAblate,
    /// Per-position means with the per-example activation shape.
    MeanAblate(Tensor),
    /// Replacement values shaped `[B × selected per-example shape]`.
    ReplaceWith(Tensor),
    /// Replace with the coder's reconstruction. A transcoder reads its
    /// input hook from the same forward pass.
    SubstituteCoder(&'a SparseCoder),
}

#[derive(Clone, Debug)]
pub struct Intervention<'a> {
    pub target: HookPoint,
    pub kind: InterventionKind<'a>,
    pub tokens: TokenSelector,
}

impl<'a> Intervention<'a> {
    pub fn new(target: HookPoint, kind: InterventionKind<'a>, tokens: TokenSelector) -> Self {
        Self { target, kind, tokens }
    }

    pub fn zero(target: HookPoint, tokens: TokenSelector) -> Self {
        Self::new(target, InterventionKind::ZeroAblate, tokens)
    }
}

/// Per-example activation shape of a hook for a `t`-token sequence.
pub fn activation_shape(config: &ViTConfig, point: HookPoint, t: usize) -> Vec<usize> {
    match point {
        HookPoint::Pattern(_) => vec![config.n_heads, t, t],
        HookPoint::LnFinal => vec![config.d_model],
        HookPoint::Logits => vec![config.n_classes],
        _ => vec![t, config.d_model],
    }
}

/// Axis of the token dimension selectors act on (query axis for patterns).
fn token_axis(point: HookPoint) -> Option<usize> {
    match point {
        HookPoint::Pattern(_) => Some(1),
        HookPoint::LnFinal | HookPoint::Logits => None,
        _ => Some(0),
    }
}

/// Contiguous chunks `(outer, token, k)` of the selected tokens: `k` is the
/// position among selected tokens. Each chunk spans `inner` elements.
fn selected_chunks(shape: &[usize], axis: usize, sel: TokenSelector) -> (Vec<(usize, usize, usize)>, usize, usize) {
    let t = shape[axis];
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let idx = sel.indices(t);
    let mut out = Vec::with_capacity(outer * idx.len());
    for o in 0..outer {
        for (k, &tok) in idx.iter().enumerate() {
            out.push((o, tok, k));
        }
    }
    (out, inner, idx.len())
}

pub(crate) struct HookCtx<'a> {
    config: &'a ViTConfig,
    capture: &'a [HookPoint],
    interventions: &'a [Intervention<'a>],
    batch: usize,
    example: usize,
    captured: Vec<Vec<Tensor>>,
    /// Transcoder input hooks that must be remembered within an example.
    needed: Vec<HookPoint>,
    seen: Vec<(HookPoint, Tensor)>,
}

impl<'a> HookCtx<'a> {
    pub(crate) fn new(
        config: &'a ViTConfig,
        capture: &'a [HookPoint],
        interventions: &'a [Intervention<'a>],
        batch: usize,
    ) -> Result<Self> {
        let mut needed = Vec::new();
        for iv in interventions {
            iv.target.validate(config)?;
            if !iv.target.has_token_axis() && iv.tokens != TokenSelector::All {
                return Err(config_err!(
                    "hook `{}` has no token axis; only the `all` selector applies",
                    iv.target
                ));
            }
            match &iv.kind {
                InterventionKind::SubstituteCoder(coder) => {
                    if token_axis(iv.target) != Some(0) {
                        return Err(Error::Unsupported(alloc::format!(
                            "coder substitution at `{}`",
                            iv.target
                        )));
                    }
                    if coder.d_out() != config.d_model {
                        return Err(dim_err!(
                            "coder output width {} != d_model {}",
                            coder.d_out(),
                            config.d_model
                        ));
                    }
                    if coder.d_in() != config.d_model {
                        return Err(dim_err!(
                            "coder input width {} != d_model {}",
                            coder.d_in(),
                            config.d_model
                        ));
                    }
                    if coder.is_crosscoder() {
                        return Err(Error::Unsupported("crosscoder substitution".into()));
                    }
                    if let Some(input) = coder.transcoder_input() {
                        input.validate(config)?;
                        if input.order_key() >= iv.target.order_key() || token_axis(input) != Some(0) {
                            return Err(config_err!(
                                "transcoder input `{}` must be a token-major hook before `{}`",
                                input,
                                iv.target
                            ));
                        }
                        needed.push(input);
                    }
                }
                InterventionKind::ReplaceWith(t) => {
                    if t.shape().first() != Some(&batch) {
                        return Err(dim_err!(
                            "replacement for `{}` has shape {:?}, expected batch {}",
                            iv.target,
                            t.shape(),
                            batch
                        ));
                    }
                }
                _ => {}
            }
        }
        Ok(Self {
            config,
            capture,
            interventions,
            batch,
            example: 0,
            captured: vec![Vec::with_capacity(batch); capture.len()],
            needed,
            seen: Vec::new(),
        })
    }

    pub(crate) fn begin_example(&mut self, b: usize) {
        self.example = b;
        self.seen.clear();
    }

    pub(crate) fn visit(&mut self, point: HookPoint, act: &mut Tensor) -> Result<()> {
        for iv in self.interventions.iter().filter(|iv| iv.target == point) {
            self.apply(iv, act)?;
        }
        if self.needed.contains(&point) {
            self.seen.push((point, act.clone()));
        }
        for (slot, p) in self.captured.iter_mut().zip(self.capture) {
            if *p == point {
                slot.push(act.clone());
            }
        }
        Ok(())
    }

    fn apply(&self, iv: &Intervention<'_>, act: &mut Tensor) -> Result<()> {
        let shape = act.shape().to_vec();
        let axis = match token_axis(iv.target) {
            Some(a) => a,
            None => {
                // Whole-activation replacement: the selector is `All`.
                return self.apply_whole(iv, act);
            }
        };
        let (chunks, inner, n_sel) = selected_chunks(&shape, axis, iv.tokens);
        let t = shape[axis];
        let at = |o: usize, tok: usize| o * t * inner + tok * inner;
        match &iv.kind {
            InterventionKind::ZeroAblate => {
                let data = act.data_mut();
                for &(o, tok, _) in &chunks {
                    data[at(o, tok)..at(o, tok) + inner].fill(0.0);
                }
            }
            InterventionKind::MeanAblate(means) => {
                if means.shape() != shape.as_slice() {
                    return Err(dim_err!(
                        "mean for `{}` has shape {:?}, activation is {:?}",
                        iv.target,
                        means.shape(),
                        shape
                    ));
                }
                let data = act.data_mut();
                for &(o, tok, _) in &chunks {
                    let r = at(o, tok)..at(o, tok) + inner;
                    data[r.clone()].copy_from_slice(&means.data()[r]);
                }
            }
            InterventionKind::ReplaceWith(rep) => {
                let mut want = vec![self.batch];
                want.extend_from_slice(&shape);
                want[1 + axis] = n_sel;
                if rep.shape() != want.as_slice() {
                    return Err(dim_err!(
                        "replacement for `{}` has shape {:?}, expected {:?}",
                        iv.target,
                        rep.shape(),
                        want
                    ));
                }
                let per: usize = want[1..].iter().product();
                let src = &rep.data()[self.example * per..(self.example + 1) * per];
                let data = act.data_mut();
                for &(o, tok, k) in &chunks {
                    let s = o * n_sel * inner + k * inner;
                    data[at(o, tok)..at(o, tok) + inner].copy_from_slice(&src[s..s + inner]);
                }
            }
            InterventionKind::SubstituteCoder(coder) => {
                let rows: Vec<usize> = chunks.iter().map(|&(_, tok, _)| tok).collect();
                let source = match coder.transcoder_input() {
                    Some(input) => {
                        &self
                            .seen
                            .iter()
                            .find(|(p, _)| *p == input)
                            .ok_or_else(|| Error::MissingActivation(input.to_string()))?
                            .1
                    }
                    None => &*act,
                };
                let recon = coder.reconstruct(&source.select_rows(&rows)?)?;
                let data = act.data_mut();
                for (k, &tok) in rows.iter().enumerate() {
                    data[at(0, tok)..at(0, tok) + inner].copy_from_slice(recon.row(k));
                }
            }
        }
        Ok(())
    }

    fn apply_whole(&self, iv: &Intervention<'_>, act: &mut Tensor) -> Result<()> {
        match &iv.kind {
            InterventionKind::ZeroAblate => act.data_mut().fill(0.0),
            InterventionKind::MeanAblate(m) => {
                act.same_shape(m, "mean ablation")?;
                act.data_mut().copy_from_slice(m.data());
            }
            InterventionKind::ReplaceWith(rep) => {
                let per = act.numel();
                if rep.numel() != per * self.batch || rep.shape()[1..] != *act.shape() {
                    return Err(dim_err!(
                        "replacement for `{}` has shape {:?}",
                        iv.target,
                        rep.shape()
                    ));
                }
                act.data_mut()
                    .copy_from_slice(&rep.data()[self.example * per..(self.example + 1) * per]);
            }
            InterventionKind::SubstituteCoder(_) => {
                return Err(Error::Unsupported(alloc::format!(
                    "coder substitution at `{}`",
                    iv.target
                )))
            }
        }
        Ok(())
    }

    pub(crate) fn finish(self) -> Result<ActivationCache> {
        let mut cache = ActivationCache::new();
        for (p, parts) in self.capture.iter().zip(self.captured) {
            if parts.is_empty() {
                let shape = activation_shape(self.config, *p, 0);
                let mut s = vec![0];
                s.extend(shape);
                cache.insert(*p, Tensor::zeros(&s));
            } else {
                cache.insert(*p, Tensor::stack(&parts)?);
            }
        }
        Ok(cache)
    }
}
