//! Hooked ViT forward pass, caching and interventions.

use vitscope_core::coder::SparseCoder;
use vitscope_core::data::{Dataset, SyntheticSpec};
use vitscope_core::eval::{ce_suite, cross_entropy, evaluate_coder, EvalOptions};
use vitscope_core::vit::{
    list_hook_points, select_token_rows, HookPoint, HookedViT, Intervention, InterventionKind, ModelInput,
    TokenSelector, ToySize, ViTConfig,
};
use vitscope_core::Tensor;

fn small(n_layers: usize, attention_only: bool, n_classes: usize) -> ViTConfig {
    ViTConfig {
        n_layers,
        d_model: 16,
        n_heads: 2,
        d_head: 8,
        d_mlp: 32,
        patch_size: 16,
        image_size: 64,
        n_classes,
        attention_only,
        layer_norm_eps: 1e-5,
    }
}

fn images(n: usize, size: usize, seed: u64) -> Dataset {
    Dataset::synthetic(&SyntheticSpec::new(n, size, 10, seed)).unwrap()
}

#[test]
fn token_counts_follow_patch_size() {
    assert_eq!(ViTConfig::toy(ToySize::Tiny, 32, false).n_tokens(), 50);
    assert_eq!(ViTConfig::toy(ToySize::Tiny, 16, false).n_tokens(), 197);
    let mut bad = small(1, false, 10);
    bad.image_size = 60;
    assert!(bad.validate().is_err());
}

#[test]
fn zero_model_embeds_cls_and_zero_patches() {
    let cfg = small(1, false, 10);
    let mut weights: std::collections::BTreeMap<String, Tensor> = cfg
        .weight_shapes()
        .into_iter()
        .map(|(n, s)| (n, Tensor::zeros(&s)))
        .collect();
    let cls: Vec<f32> = (0..16).map(|i| i as f32 * 0.1).collect();
    weights.insert("cls_token".into(), Tensor::new(vec![16], cls.clone()).unwrap());
    let model = HookedViT::from_named(cfg, weights).unwrap();
    let img = Tensor::zeros(&[64, 64, 3]);
    let toks = model.patch_embed(&img).unwrap();
    assert_eq!(toks.shape(), &[17, 16]);
    assert_eq!(toks.row(0), cls.as_slice());
    assert!((1..17).all(|t| toks.row(t).iter().all(|&v| v == 0.0)));
}

#[test]
fn zero_model_gives_zero_logits_and_residuals() {
    let cfg = small(2, false, 10);
    let model = HookedViT::zeros(cfg.clone()).unwrap();
    let data = images(3, 64, 1);
    let capture: Vec<HookPoint> = (0..2).map(HookPoint::ResidPost).chain((0..2).map(HookPoint::ResidPre)).collect();
    let out = model.forward(ModelInput::Images(data.images()), &capture).unwrap();
    assert!(out.logits.data().iter().all(|&v| v == 0.0));
    for p in capture {
        assert!(out.cache.get(p).unwrap().data().iter().all(|&v| v == 0.0));
    }
    assert_eq!(out.cache.len(), 4);
}

#[test]
fn residual_stream_is_additive() {
    for attention_only in [false, true] {
        let cfg = small(3, attention_only, 10);
        let model = HookedViT::random(cfg.clone(), 5).unwrap();
        let data = images(2, 64, 2);
        let capture: Vec<HookPoint> = list_hook_points(&cfg);
        let out = model.forward(ModelInput::Images(data.images()), &capture).unwrap();
        for l in 0..3 {
            let pre = out.cache.get(HookPoint::ResidPre(l)).unwrap();
            let attn = out.cache.get(HookPoint::AttnOut(l)).unwrap();
            let post = out.cache.get(HookPoint::ResidPost(l)).unwrap();
            let mlp = (!attention_only).then(|| out.cache.get(HookPoint::MlpOut(l)).unwrap());
            for i in 0..pre.numel() {
                let m = mlp.map_or(0.0, |t| t.data()[i]);
                let sum = pre.data()[i] + attn.data()[i] + m;
                assert!((post.data()[i] - sum).abs() <= 1e-6 * post.data()[i].abs().max(1.0));
            }
            let pat = out.cache.get(HookPoint::Pattern(l)).unwrap();
            let t = pat.shape()[3];
            for row in pat.data().chunks_exact(t) {
                let s: f64 = row.iter().map(|&v| v as f64).sum();
                assert!((s - 1.0).abs() < 1e-6);
            }
        }
    }
}

#[test]
fn hook_listing() {
    let ao = list_hook_points(&small(1, true, 10));
    assert!(ao.contains(&HookPoint::AttnOut(0)));
    assert!(!ao.contains(&HookPoint::MlpOut(0)));
    let full = ViTConfig::base_patch32();
    let names = list_hook_points(&full);
    assert_eq!(names.iter().filter(|p| matches!(p, HookPoint::ResidPost(_))).count(), 12);
    let render = |v: &[HookPoint]| v.iter().map(|p| p.to_string()).collect::<Vec<_>>();
    assert_eq!(render(&names), render(&list_hook_points(&full)));
    assert!(names.contains(&"blocks.3.hook_resid_post".parse().unwrap()));
}

#[test]
fn unknown_hooks_are_rejected() {
    let model = HookedViT::random(small(1, true, 10), 0).unwrap();
    let data = images(1, 64, 0);
    assert!(model.forward(ModelInput::Images(data.images()), &[HookPoint::ResidPost(4)]).is_err());
    assert!(model.forward(ModelInput::Images(data.images()), &[HookPoint::MlpOut(0)]).is_err());
    assert!("blocks.0.hook_nonsense".parse::<HookPoint>().is_err());
}

#[test]
fn clean_replacement_is_a_bitwise_noop() {
    let cfg = small(2, false, 10);
    let model = HookedViT::random(cfg.clone(), 9).unwrap();
    let data = images(3, 64, 4);
    let input = ModelInput::Images(data.images());
    let hooks: Vec<HookPoint> = list_hook_points(&cfg);
    let clean = model.forward(input, &hooks).unwrap();
    for &hook in &hooks {
        for tokens in [TokenSelector::All, TokenSelector::ClsOnly, TokenSelector::SpatialOnly] {
            if !hook.has_token_axis() && tokens != TokenSelector::All {
                continue;
            }
            let acts = clean.cache.get(hook).unwrap();
            let value = if hook.has_token_axis() && !matches!(hook, HookPoint::Pattern(_)) {
                let rows = select_token_rows(acts, tokens).unwrap();
                let n = tokens.count(cfg.n_tokens());
                rows.reshape(&[3, n, cfg.d_model]).unwrap()
            } else if let HookPoint::Pattern(_) = hook {
                let (h, t) = (cfg.n_heads, cfg.n_tokens());
                let idx = tokens.indices(t);
                let mut v = Vec::new();
                for e in 0..3 {
                    for hh in 0..h {
                        for &q in &idx {
                            let start = ((e * h + hh) * t + q) * t;
                            v.extend_from_slice(&acts.data()[start..start + t]);
                        }
                    }
                }
                Tensor::new(vec![3, h, idx.len(), t], v).unwrap()
            } else {
                acts.clone()
            };
            let iv = Intervention::new(hook, InterventionKind::ReplaceWith(value), tokens);
            let logits = model.run_with_intervention(input, &iv).unwrap();
            assert!(logits.bit_eq(&clean.logits), "{hook} {tokens:?}");
        }
    }
}

#[test]
fn replacement_shape_mismatch_is_an_error() {
    let model = HookedViT::random(small(1, false, 10), 9).unwrap();
    let data = images(2, 64, 4);
    let iv = Intervention::new(
        HookPoint::ResidPost(0),
        InterventionKind::ReplaceWith(Tensor::zeros(&[2, 3, 16])),
        TokenSelector::All,
    );
    assert!(model.run_with_intervention(ModelInput::Images(data.images()), &iv).is_err());
}

#[test]
fn token_partition_reassembles() {
    let model = HookedViT::random(small(1, false, 10), 3).unwrap();
    let data = images(2, 64, 4);
    let hook = HookPoint::ResidPost(0);
    let out = model.forward(ModelInput::Images(data.images()), &[hook]).unwrap();
    let acts = out.cache.get(hook).unwrap();
    let cls = select_token_rows(acts, TokenSelector::ClsOnly).unwrap();
    let sp = select_token_rows(acts, TokenSelector::SpatialOnly).unwrap();
    let t = model.config().n_tokens();
    let mut rebuilt = Vec::new();
    for e in 0..2 {
        rebuilt.extend_from_slice(cls.row(e));
        for k in 0..t - 1 {
            rebuilt.extend_from_slice(sp.row(e * (t - 1) + k));
        }
    }
    assert_eq!(rebuilt.as_slice(), acts.data());
}

#[test]
fn zero_ablating_final_residual_gives_uniform_ce() {
    let mut cfg = ViTConfig::toy(ToySize::Tiny, 32, false);
    cfg.image_size = 64;
    let model = HookedViT::random(cfg.clone(), 2).unwrap();
    assert!(model.head().b.data().iter().all(|&v| v == 0.0));
    let data = Dataset::synthetic(&SyntheticSpec::new(3, 64, 1000, 1)).unwrap();
    let iv = Intervention::zero(HookPoint::ResidPost(0), TokenSelector::All);
    let logits = model.run_with_intervention(ModelInput::Images(data.images()), &iv).unwrap();
    let ce = cross_entropy(&logits, data.labels()).unwrap();
    assert!((ce - 1000f64.ln()).abs() < 1e-3, "{ce}");
    assert!((ce - 6.9078).abs() < 1e-4);
}

#[test]
fn lossless_coder_substitution_matches_clean() {
    let cfg = small(2, false, 10);
    let model = HookedViT::random(cfg.clone(), 12).unwrap();
    let data = images(4, 64, 6);
    let coder = SparseCoder::lossless(cfg.d_model).unwrap();
    for hook in [HookPoint::ResidPost(0), HookPoint::MlpOut(1), HookPoint::ResidPost(1)] {
        let input = ModelInput::Images(data.images());
        let clean = model.forward(input, &[]).unwrap().logits;
        let iv = Intervention::new(hook, InterventionKind::SubstituteCoder(&coder), TokenSelector::All);
        let sub = model.run_with_intervention(input, &iv).unwrap();
        assert!(sub.max_abs_diff(&clean) <= 1e-5);

        let ce = ce_suite(&model, &coder, hook, data.batches(2), TokenSelector::All).unwrap();
        assert!((ce.recon - ce.clean).abs() <= 1e-5);
        if let Some(p) = ce.pct_recovered {
            assert!((p - 100.0).abs() <= 0.1, "{p}");
        }
        let ev = evaluate_coder(&model, &coder, hook, data.batches(2), &EvalOptions::default()).unwrap();
        assert!((ev.row.recon_cos_sim.unwrap() - 1.0).abs() <= 1e-6);
        assert!((ev.row.cos_sim.unwrap() - 1.0).abs() <= 1e-6);
        assert!((ev.row.explained_variance - 100.0).abs() < 1e-4);
    }
}

#[test]
fn pre_embedded_tokens_match_images() {
    let model = HookedViT::random(small(1, false, 10), 1).unwrap();
    let data = images(2, 64, 3);
    let from_images = model.forward(ModelInput::Images(data.images()), &[]).unwrap().logits;
    let mut toks = Vec::new();
    for e in 0..2 {
        toks.push(model.embed_tokens(&data.images().index_outer(e).unwrap()).unwrap());
    }
    let toks = Tensor::stack(&toks).unwrap();
    let from_tokens = model.forward(ModelInput::Tokens(&toks), &[]).unwrap().logits;
    assert!(from_images.bit_eq(&from_tokens));
}
