use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::hooks::{ActivationCache, HookPoint};
use super::intervention::{HookCtx, Intervention};
use super::{ViTConfig, N_CHANNELS};
use crate::error::{config_err, dim_err};
use crate::numerics::{add, add_row_bias, gelu, layer_norm, matmul, matmul_nt, softmax};
use crate::{Result, Tensor};

/// `y = x·W + b` with `W: [in×out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub w: Tensor,
    pub b: Tensor,
}

impl Linear {
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let mut y = matmul(x, &self.w)?;
        add_row_bias(&mut y, &self.b)?;
        Ok(y)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNormParams {
    pub w: Tensor,
    pub b: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlpParams {
    pub ln2: LayerNormParams,
    pub fc_in: Linear,
    pub fc_out: Linear,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub ln1: LayerNormParams,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub mlp: Option<MlpParams>,
}

/// A frozen ViT whose forward pass exposes named hook points.
///
/// Blocks are pre-norm: `mid = pre + attn(LN1(pre))`,
/// `post = mid + mlp(LN2(mid))`. The head reads the final-normed CLS token.
#[derive(Clone, Debug, PartialEq)]
pub struct HookedViT {
    config: ViTConfig,
    pub(crate) embed: Linear,
    pub(crate) cls_token: Tensor,
    pub(crate) pos_embed: Tensor,
    pub(crate) blocks: Vec<Block>,
    pub(crate) ln_final: LayerNormParams,
    pub(crate) head: Linear,
}

/// Model input: raw images `[B×H×W×3]` or pre-embedded tokens
/// `[B×T×d_model]` (CLS at index 0, positional embedding still added).
#[derive(Clone, Copy, Debug)]
pub enum ModelInput<'a> {
    Images(&'a Tensor),
    Tokens(&'a Tensor),
}

impl ModelInput<'_> {
    pub fn batch_size(&self) -> usize {
        match self {
            ModelInput::Images(t) | ModelInput::Tokens(t) => t.shape().first().copied().unwrap_or(0),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// `[B × n_classes]`
    pub logits: Tensor,
    pub cache: ActivationCache,
}

impl HookedViT {
    /// Builds a model from a name → tensor map. Every expected name must be
    /// present with its exact shape and no unexpected names are allowed.
    pub fn from_named(config: ViTConfig, mut weights: BTreeMap<String, Tensor>) -> Result<Self> {
        config.validate()?;
        let mut ordered = alloc::collections::VecDeque::new();
        for (name, shape) in config.weight_shapes() {
            let t = weights
                .remove(&name)
                .ok_or_else(|| config_err!("missing weight `{}`", name))?;
            if t.shape() != shape.as_slice() {
                return Err(dim_err!(
                    "weight `{}` has shape {:?}, expected {:?}",
                    name,
                    t.shape(),
                    shape
                ));
            }
            ordered.push_back(t);
        }
        if let Some(extra) = weights.keys().next() {
            return Err(config_err!("unexpected weight `{}`", extra));
        }
        let mut next = || -> Result<Tensor> {
            Ok(ordered.pop_front().expect("one tensor per expected weight"))
        };
        let embed = Linear { w: next()?, b: next()? };
        let cls_token = next()?;
        let pos_embed = next()?;
        let mut blocks = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            let ln1 = LayerNormParams { w: next()?, b: next()? };
            let q = Linear { w: next()?, b: next()? };
            let k = Linear { w: next()?, b: next()? };
            let v = Linear { w: next()?, b: next()? };
            let o = Linear { w: next()?, b: next()? };
            let mlp = if config.attention_only {
                None
            } else {
                Some(MlpParams {
                    ln2: LayerNormParams { w: next()?, b: next()? },
                    fc_in: Linear { w: next()?, b: next()? },
                    fc_out: Linear { w: next()?, b: next()? },
                })
            };
            blocks.push(Block { ln1, q, k, v, o, mlp });
        }
        let ln_final = LayerNormParams { w: next()?, b: next()? };
        let head = Linear { w: next()?, b: next()? };
        Ok(Self {
            config,
            embed,
            cls_token,
            pos_embed,
            blocks,
            ln_final,
            head,
        })
    }

    /// Every weight in the canonical order of [`ViTConfig::weight_shapes`].
    pub fn named_weights(&self) -> Vec<(String, &Tensor)> {
        let mut tensors: Vec<&Tensor> = vec![&self.embed.w, &self.embed.b, &self.cls_token, &self.pos_embed];
        for b in &self.blocks {
            tensors.extend([&b.ln1.w, &b.ln1.b, &b.q.w, &b.q.b, &b.k.w, &b.k.b, &b.v.w, &b.v.b, &b.o.w, &b.o.b]);
            if let Some(m) = &b.mlp {
                tensors.extend([&m.ln2.w, &m.ln2.b, &m.fc_in.w, &m.fc_in.b, &m.fc_out.w, &m.fc_out.b]);
            }
        }
        tensors.extend([&self.ln_final.w, &self.ln_final.b, &self.head.w, &self.head.b]);
        self.config
            .weight_shapes()
            .into_iter()
            .map(|(n, _)| n)
            .zip(tensors)
            .collect()
    }

    /// All-zero weights (layernorm gains included).
    pub fn zeros(config: ViTConfig) -> Result<Self> {
        let map = config
            .weight_shapes()
            .into_iter()
            .map(|(n, s)| (n, Tensor::zeros(&s)))
            .collect();
        Self::from_named(config, map)
    }

    /// Seeded random weights: Gaussian linear maps scaled by `1/√fan_in`,
    /// unit layernorm gains, zero biases, Gaussian CLS and positional
    /// embeddings.
    pub fn random(config: ViTConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut map = BTreeMap::new();
        for (name, shape) in config.weight_shapes() {
            let n: usize = shape.iter().product();
            let std = if name.ends_with(".w") {
                None
            } else if name == "cls_token" {
                Some(1.0)
            } else if name == "pos_embed.W_pos" {
                Some(0.5)
            } else if shape.len() == 2 {
                Some(1.0 / libm::sqrtf(shape[0] as f32))
            } else {
                Some(0.0)
            };
            let data = match std {
                None => vec![1.0; n],
                Some(s) if s == 0.0 => vec![0.0; n],
                Some(s) => {
                    let dist = Normal::new(0.0f32, s).map_err(|_| config_err!("bad init std"))?;
                    (0..n).map(|_| dist.sample(&mut rng)).collect()
                }
            };
            map.insert(name, Tensor::new(shape, data)?);
        }
        Self::from_named(config, map)
    }

    pub fn config(&self) -> &ViTConfig {
        &self.config
    }

    pub fn head(&self) -> &Linear {
        &self.head
    }

    pub fn head_mut(&mut self) -> &mut Linear {
        &mut self.head
    }

    pub fn ln_final(&self) -> &LayerNormParams {
        &self.ln_final
    }

    /// Patch projections of one image with the CLS vector prepended, before
    /// positional embeddings: `[(n_patches+1) × d_model]`.
    pub fn embed_tokens(&self, image: &Tensor) -> Result<Tensor> {
        let c = &self.config;
        let s = c.image_size;
        if image.shape() != [s, s, N_CHANNELS] {
            return Err(dim_err!(
                "image shape {:?}, expected [{}, {}, {}]",
                image.shape(),
                s,
                s,
                N_CHANNELS
            ));
        }
        let p = c.patch_size;
        let g = c.grid_side();
        let px = image.data();
        let mut patches = Vec::with_capacity(c.n_patches() * c.patch_dim());
        for pr in 0..g {
            for pc in 0..g {
                for y in 0..p {
                    let row = (pr * p + y) * s + pc * p;
                    patches.extend_from_slice(&px[row * N_CHANNELS..(row + p) * N_CHANNELS]);
                }
            }
        }
        let patches = Tensor::new(vec![c.n_patches(), c.patch_dim()], patches)?;
        let proj = self.embed.apply(&patches)?;
        let mut data = Vec::with_capacity(c.n_tokens() * c.d_model);
        data.extend_from_slice(self.cls_token.data());
        data.extend_from_slice(proj.data());
        Tensor::new(vec![c.n_tokens(), c.d_model], data)
    }

    /// Token sequence entering block 0: projected patches, CLS at index 0,
    /// positional embeddings added.
    pub fn patch_embed(&self, image: &Tensor) -> Result<Tensor> {
        add(&self.embed_tokens(image)?, &self.pos_embed)
    }

    /// Clean forward pass recording the requested hook points.
    pub fn forward(&self, input: ModelInput<'_>, capture: &[HookPoint]) -> Result<ForwardOutput> {
        self.run_with_hooks(input, capture, &[])
    }

    /// Forward pass with one intervention applied; returns logits.
    pub fn run_with_intervention(&self, input: ModelInput<'_>, intervention: &Intervention<'_>) -> Result<Tensor> {
        Ok(self
            .run_with_hooks(input, &[], core::slice::from_ref(intervention))?
            .logits)
    }

    /// Forward pass applying `interventions` (in order, at their hook
    /// points) and capturing post-intervention activations.
    pub fn run_with_hooks(
        &self,
        input: ModelInput<'_>,
        capture: &[HookPoint],
        interventions: &[Intervention<'_>],
    ) -> Result<ForwardOutput> {
        for p in capture {
            p.validate(&self.config)?;
        }
        let batch = input.batch_size();
        let mut ctx = HookCtx::new(&self.config, capture, interventions, batch)?;
        let mut logits = Vec::with_capacity(batch);
        for b in 0..batch {
            ctx.begin_example(b);
            let emb = match input {
                ModelInput::Images(imgs) => self.embed_tokens(&imgs.index_outer(b)?)?,
                ModelInput::Tokens(toks) => toks.index_outer(b)?,
            };
            logits.push(self.forward_example(emb, &mut ctx)?);
        }
        let logits = if batch == 0 {
            Tensor::zeros(&[0, self.config.n_classes])
        } else {
            Tensor::stack(&logits)?
        };
        Ok(ForwardOutput {
            logits,
            cache: ctx.finish()?,
        })
    }

    fn forward_example(&self, mut emb: Tensor, ctx: &mut HookCtx<'_>) -> Result<Tensor> {
        let c = &self.config;
        let (t, d) = emb.dims2()?;
        if d != c.d_model || t == 0 || t > c.n_tokens() {
            return Err(dim_err!(
                "token input [{}×{}] incompatible with {} tokens of width {}",
                t,
                d,
                c.n_tokens(),
                c.d_model
            ));
        }
        ctx.visit(HookPoint::Embed, &mut emb)?;
        let mut pos = Tensor::new(vec![t, d], self.pos_embed.data()[..t * d].to_vec())?;
        ctx.visit(HookPoint::PosEmbed, &mut pos)?;
        let mut resid = add(&emb, &pos)?;
        for (l, block) in self.blocks.iter().enumerate() {
            ctx.visit(HookPoint::ResidPre(l), &mut resid)?;
            let x = layer_norm(&resid, &block.ln1.w, &block.ln1.b, c.layer_norm_eps)?;
            let v = block.v.apply(&x)?;
            let mut pattern = self.attention_pattern(block, &x)?;
            ctx.visit(HookPoint::Pattern(l), &mut pattern)?;
            let mut attn_out = self.attend(block, &pattern, &v)?;
            ctx.visit(HookPoint::AttnOut(l), &mut attn_out)?;
            let mut mid = add(&resid, &attn_out)?;
            ctx.visit(HookPoint::ResidMid(l), &mut mid)?;
            let mut post = match &block.mlp {
                Some(mlp) => {
                    let h = layer_norm(&mid, &mlp.ln2.w, &mlp.ln2.b, c.layer_norm_eps)?;
                    let mut out = mlp.fc_out.apply(&gelu(&mlp.fc_in.apply(&h)?)?)?;
                    ctx.visit(HookPoint::MlpOut(l), &mut out)?;
                    add(&mid, &out)?
                }
                None => mid,
            };
            ctx.visit(HookPoint::ResidPost(l), &mut post)?;
            resid = post;
        }
        let mut normed = self.final_norm(resid.row(0))?;
        ctx.visit(HookPoint::LnFinal, &mut normed)?;
        let mut logits = self.unembed(&normed)?;
        ctx.visit(HookPoint::Logits, &mut logits)?;
        Ok(logits)
    }

    /// Final layernorm of one residual vector: `[d_model]`.
    pub fn final_norm(&self, resid: &[f32]) -> Result<Tensor> {
        let x = Tensor::new(vec![1, resid.len()], resid.to_vec())?;
        let y = layer_norm(&x, &self.ln_final.w, &self.ln_final.b, self.config.layer_norm_eps)?;
        y.reshape(&[resid.len()])
    }

    /// Classifier head on a final-normed vector: `[n_classes]`.
    pub fn unembed(&self, normed: &Tensor) -> Result<Tensor> {
        let d = normed.numel();
        let y = self.head.apply(&normed.clone().reshape(&[1, d])?)?;
        y.reshape(&[self.config.n_classes])
    }

    /// Softmax attention pattern `[H×T×T]` of one block given its normed input.
    fn attention_pattern(&self, block: &Block, x: &Tensor) -> Result<Tensor> {
        let c = &self.config;
        let q = block.q.apply(x)?;
        let k = block.k.apply(x)?;
        let t = x.dims2()?.0;
        let scale = 1.0 / libm::sqrtf(c.d_head as f32);
        let mut scores = Vec::with_capacity(c.n_heads * t * t);
        for h in 0..c.n_heads {
            let (lo, hi) = (h * c.d_head, (h + 1) * c.d_head);
            let s = matmul_nt(&q.col_slice(lo, hi)?, &k.col_slice(lo, hi)?)?;
            scores.extend(s.data().iter().map(|&v| v * scale));
        }
        softmax(&Tensor::new(vec![c.n_heads, t, t], scores)?, 2)
    }

    fn attend(&self, block: &Block, pattern: &Tensor, v: &Tensor) -> Result<Tensor> {
        let c = &self.config;
        let t = v.dims2()?.0;
        let mut heads = Vec::with_capacity(c.n_heads);
        for h in 0..c.n_heads {
            let p = Tensor::new(vec![t, t], pattern.data()[h * t * t..(h + 1) * t * t].to_vec())?;
            heads.push(matmul(&p, &v.col_slice(h * c.d_head, (h + 1) * c.d_head)?)?);
        }
        let z = Tensor::hcat(&heads.iter().collect::<Vec<_>>())?;
        block.o.apply(&z)
    }
}

/// Per-position mean of a hook's activation over a set of inputs; the
/// result has the per-example activation shape.
pub fn activation_means<'a>(
    model: &HookedViT,
    inputs: impl IntoIterator<Item = ModelInput<'a>>,
    point: HookPoint,
) -> Result<Tensor> {
    let mut sum: Option<(Vec<usize>, Vec<f64>)> = None;
    let mut count = 0usize;
    for input in inputs {
        let out = model.forward(input, &[point])?;
        let acts = out.cache.get(point)?;
        let per: usize = acts.shape()[1..].iter().product();
        let (_, acc) = sum.get_or_insert_with(|| (acts.shape()[1..].to_vec(), vec![0.0; per]));
        if acc.len() != per {
            return Err(dim_err!("activation shape changed between batches"));
        }
        for ex in acts.data().chunks_exact(per.max(1)) {
            for (a, &v) in acc.iter_mut().zip(ex) {
                *a += v as f64;
            }
            count += 1;
        }
    }
    let (shape, acc) = sum.ok_or_else(|| config_err!("no inputs to average"))?;
    Tensor::new(shape, acc.into_iter().map(|v| (v / count as f64) as f32).collect())
}
