//! Training loop, dead-feature handling and sweep properties.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use vitscope_core::coder::{Activation, SparseCoder, SparseCoderConfig};
use vitscope_core::data::{Dataset, SyntheticSpec};
use vitscope_core::numerics::AdamState;
use vitscope_core::train::{
    ghost_grad_term, resample_dead, sweep, train, EarlyStop, FeatureVitals, HighLossBuffer, InMemorySource,
    TrainConfig, Validation,
};
use vitscope_core::vit::{select_token_rows, HookPoint, HookedViT, ModelInput, TokenSelector, ViTConfig};
use vitscope_core::Tensor;

fn gaussian(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..rows * cols).map(|_| StandardNormal.sample(&mut rng)).collect();
    Tensor::new(vec![rows, cols], data).unwrap()
}

/// Sparse combinations of a fixed set of directions, which a coder can
/// learn quickly.
fn sparse_mixture(rows: usize, cols: usize, atoms: usize, seed: u64) -> Tensor {
    let dirs = gaussian(atoms, cols, seed ^ 0xA5);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Tensor::zeros(&[rows, cols]);
    for r in 0..rows {
        for _ in 0..3 {
            let a = (rand::Rng::random::<u32>(&mut rng) as usize) % atoms;
            let w: f32 = rand::Rng::random_range(&mut rng, 0.5..2.0);
            for (o, &d) in out.row_mut(r).iter_mut().zip(dirs.row(a)) {
                *o += w * d;
            }
        }
    }
    out
}

fn short_config(steps: usize) -> TrainConfig {
    let mut c = TrainConfig::new(1e-3);
    c.batch_size = 64;
    c.total_steps = Some(steps);
    c.warmup_steps = steps.min(10) / 2;
    c.resample_interval = None;
    c
}

fn sae(act: Activation, d: usize, exp: usize, l1: f32, seed: u64) -> SparseCoder {
    let mut c = SparseCoderConfig::sae(act, d, exp, l1);
    c.k = Some(4);
    c.seed = seed;
    SparseCoder::new(c).unwrap()
}

fn decoder_rows_unit(coder: &SparseCoder) -> bool {
    let w = coder.params().get("W_dec").unwrap();
    (0..w.shape()[0]).all(|i| {
        let n: f64 = w.row(i).iter().map(|&v| v as f64 * v as f64).sum::<f64>().sqrt();
        (n - 1.0).abs() < 1e-5
    })
}

/// Independent evaluation of the ghost loss with the residual, the
/// rescaling factor, the loss weight and the encoder input held fixed.
struct GhostShadow {
    centered: Vec<Vec<f64>>,
    resid: Vec<Vec<f64>>,
    scale: Vec<f64>,
    weight: Vec<f64>,
    dead: Vec<usize>,
}

impl GhostShadow {
    fn loss(&self, w_enc: &[f64], b_enc: &[f64], w_dec: &[f64], dict: usize) -> f64 {
        let m = self.resid[0].len();
        let b = self.centered.len() as f64;
        let mut total = 0.0;
        for (r, a) in self.centered.iter().enumerate() {
            let mut g = vec![0.0; m];
            for &j in &self.dead {
                let z: f64 = a.iter().enumerate().map(|(i, v)| v * w_enc[i * dict + j]).sum::<f64>() + b_enc[j];
                let h = z.exp();
                for t in 0..m {
                    g[t] += h * w_dec[j * m + t];
                }
            }
            let err: f64 = (0..m).map(|t| (self.scale[r] * g[t] - self.resid[r][t]).powi(2)).sum();
            total += self.weight[r] * err;
        }
        total / b
    }
}

fn rows_f64(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.shape()[0]).map(|i| t.row(i).iter().map(|&v| v as f64).collect()).collect()
}

#[test]
fn ghost_gradients_match_finite_differences() {
    let coder = sae(Activation::Relu, 5, 2, 0.1, 11);
    let x = gaussian(6, 5, 12);
    let out = coder.loss_and_grads(&x, &x).unwrap();
    let dead = vec![2, 7];
    let (loss, grads) = ghost_grad_term(&coder, &out, &dead).unwrap();

    let p = coder.params();
    let to64 = |n: &str| p.get(n).unwrap().data().iter().map(|&v| v as f64).collect::<Vec<_>>();
    let (w_enc, b_enc, w_dec) = (to64("W_enc"), to64("b_enc"), to64("W_dec"));
    let dict = coder.dict_size();
    let centered = rows_f64(&out.forward.centered);
    let resid: Vec<Vec<f64>> = rows_f64(&out.target)
        .into_iter()
        .zip(rows_f64(&out.forward.recon))
        .map(|(y, x)| y.iter().zip(&x).map(|(a, b)| a - b).collect())
        .collect();
    // Detached quantities, recomputed from the unperturbed parameters.
    let mut scale = Vec::new();
    let mut weight = Vec::new();
    for (a, r) in centered.iter().zip(&resid) {
        let m = r.len();
        let mut g = vec![0.0; m];
        for &j in &dead {
            let z: f64 = a.iter().enumerate().map(|(i, v)| v * w_enc[i * dict + j]).sum::<f64>() + b_enc[j];
            for t in 0..m {
                g[t] += z.exp() * w_dec[j * m + t];
            }
        }
        let rn = r.iter().map(|v| v * v).sum::<f64>().sqrt();
        let gn = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        let s = rn / (2.0 * gn + 1e-6);
        let err: f64 = (0..m).map(|t| (s * g[t] - r[t]).powi(2)).sum();
        scale.push(s);
        weight.push(rn * rn / (err + 1e-6));
    }
    let shadow = GhostShadow {
        centered,
        resid,
        scale,
        weight,
        dead: dead.clone(),
    };
    let base = shadow.loss(&w_enc, &b_enc, &w_dec, dict);
    assert!((base - loss).abs() <= 1e-4 * base.abs().max(1.0), "{base} vs {loss}");

    let h = 1e-4;
    let mut worst = 0.0f64;
    let mut check = |name: &str, analytic: f32, f: &dyn Fn(f64) -> f64| {
        let num = (f(h) - f(-h)) / (2.0 * h);
        let rel = (num - analytic as f64).abs() / num.abs().max(analytic.abs() as f64).max(1e-3);
        assert!(rel < 1e-3, "{name}: numeric {num}, analytic {analytic}");
        worst = worst.max(rel);
    };
    let g_enc = grads.get("W_enc").unwrap().data();
    for idx in 0..w_enc.len() {
        check("W_enc", g_enc[idx], &|d| {
            let mut w = w_enc.clone();
            w[idx] += d;
            shadow.loss(&w, &b_enc, &w_dec, dict)
        });
    }
    let g_b = grads.get("b_enc").unwrap().data();
    for idx in 0..b_enc.len() {
        check("b_enc", g_b[idx], &|d| {
            let mut b = b_enc.clone();
            b[idx] += d;
            shadow.loss(&w_enc, &b, &w_dec, dict)
        });
    }
    let g_dec = grads.get("W_dec").unwrap().data();
    for idx in 0..w_dec.len() {
        check("W_dec", g_dec[idx], &|d| {
            let mut w = w_dec.clone();
            w[idx] += d;
            shadow.loss(&w_enc, &b_enc, &w, dict)
        });
    }
    assert!(worst < 1e-3);
}

#[test]
fn ghost_term_touches_only_dead_features() {
    let coder = sae(Activation::TopK, 6, 3, 0.0, 4);
    let x = gaussian(8, 6, 5);
    let out = coder.loss_and_grads(&x, &x).unwrap();
    let (loss, empty) = ghost_grad_term(&coder, &out, &[]).unwrap();
    assert_eq!(loss, 0.0);
    assert!(empty.iter().all(|(_, t)| t.data().iter().all(|&v| v == 0.0)));

    let dead = [1usize, 9];
    let (loss, g) = ghost_grad_term(&coder, &out, &dead).unwrap();
    assert!(loss > 0.0);
    let dict = coder.dict_size();
    let enc = g.get("W_enc").unwrap();
    let dec = g.get("W_dec").unwrap();
    for j in (0..dict).filter(|j| !dead.contains(j)) {
        assert!((0..6).all(|i| enc.data()[i * dict + j] == 0.0));
        assert!(g.get("b_enc").unwrap().data()[j] == 0.0);
        assert!(dec.row(j).iter().all(|&v| v == 0.0));
    }
    assert!(g.get("b_dec").unwrap().data().iter().all(|&v| v == 0.0));
}

#[test]
fn resampling_sets_stated_norms() {
    let d = 4;
    let mut coder = sae(Activation::Relu, d, 2, 0.0, 1);
    let dict = coder.dict_size();
    // Feature 0 alive with encoder column norm 5.
    {
        let w = coder.params_mut().get_mut("W_enc").unwrap();
        for i in 0..d {
            w.data_mut()[i * dict] = if i == 0 { 5.0 } else { 0.0 };
        }
        coder.params_mut().get_mut("b_enc").unwrap().data_mut().fill(0.3);
    }
    let mut vitals = FeatureVitals::new(dict, 10);
    let f = Tensor::new(vec![1, dict], (0..dict).map(|j| if j == 0 { 1.0 } else { 0.0 }).collect()).unwrap();
    vitals.update(&f, 20).unwrap();
    let mut buffer = HighLossBuffer::new(2 * dict);
    let ex = gaussian(3, d, 8);
    buffer.offer(&[1.0, 3.0, 2.0], &ex, &ex);
    let mut optim: Vec<AdamState> = coder
        .params()
        .tensors()
        .iter()
        .map(|t| {
            let mut s = AdamState::new(t.shape());
            s.m.data_mut().fill(1.0);
            s.v.data_mut().fill(1.0);
            s
        })
        .collect();
    let before = coder.clone();
    let report = resample_dead(&mut coder, &mut vitals, &buffer, &mut optim, 20).unwrap();
    assert_eq!(report.resampled.len(), dict - 1);

    let w_enc = coder.params().get("W_enc").unwrap();
    let w_dec = coder.params().get("W_dec").unwrap();
    for &j in &report.resampled {
        let n: f64 = (0..d).map(|i| (w_enc.data()[i * dict + j] as f64).powi(2)).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-6, "encoder norm {n}");
        let dn: f64 = w_dec.row(j).iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
        assert!((dn - 1.0).abs() < 1e-6);
        assert_eq!(coder.params().get("b_enc").unwrap().data()[j], 0.0);
        assert_eq!(optim[0].m.data()[j], 0.0);
    }
    // Highest-loss example goes to the first dead feature.
    let first = report.resampled[0];
    let norm: f32 = ex.row(1).iter().map(|v| v * v).sum::<f32>().sqrt();
    for (a, b) in w_dec.row(first).iter().zip(ex.row(1)) {
        assert!((a - b / norm).abs() < 1e-6);
    }
    // The alive feature is untouched.
    assert_eq!(w_dec.row(0), before.params().get("W_dec").unwrap().row(0));
    assert_eq!(coder.params().get("b_enc").unwrap().data()[0], 0.3);
    assert_eq!(optim[0].m.data()[0], 1.0);
    assert!(vitals.dead(20).is_empty());

    // Nothing dead: nothing changes.
    let snapshot = coder.clone();
    let report = resample_dead(&mut coder, &mut vitals, &buffer, &mut optim, 21).unwrap();
    assert!(report.resampled.is_empty());
    assert_eq!(coder, snapshot);
}

#[test]
fn resampling_without_alive_features_is_skipped() {
    let mut coder = sae(Activation::Relu, 4, 2, 0.0, 1);
    let mut vitals = FeatureVitals::new(coder.dict_size(), 1);
    let mut buffer = HighLossBuffer::new(4);
    let ex = gaussian(2, 4, 8);
    buffer.offer(&[1.0, 2.0], &ex, &ex);
    let mut optim: Vec<AdamState> = coder.params().tensors().iter().map(|t| AdamState::new(t.shape())).collect();
    let before = coder.clone();
    let report = resample_dead(&mut coder, &mut vitals, &buffer, &mut optim, 50).unwrap();
    assert!(report.skipped.is_some());
    assert_eq!(coder, before);
}

#[test]
fn zero_steps_returns_initialization() {
    let coder = sae(Activation::Relu, 8, 4, 1e-3, 3);
    let mut src = InMemorySource::new(gaussian(100, 8, 1), 0).unwrap();
    let mut cfg = short_config(0);
    cfg.warmup_steps = 0;
    let out = train(coder.clone(), &cfg, &mut src, None).unwrap();
    assert_eq!(out.coder, coder);
    assert!(out.log.is_empty());
    let w_enc = out.coder.params().get("W_enc").unwrap();
    let w_dec = out.coder.params().get("W_dec").unwrap();
    assert!(w_enc.bit_eq(&w_dec.transpose().unwrap()));
}

#[test]
fn runs_are_bitwise_reproducible() {
    let data = sparse_mixture(400, 8, 12, 2);
    let mut cfg = short_config(40);
    cfg.ghost_grads = true;
    cfg.dead_window = 5;
    cfg.resample_interval = Some(15);
    let run = || {
        let mut src = InMemorySource::new(data.clone(), 7).unwrap();
        train(sae(Activation::Relu, 8, 4, 1e-3, 3), &cfg, &mut src, None).unwrap()
    };
    let (a, b) = (run(), run());
    assert!(a.coder.params().bit_eq(b.coder.params()));
    assert_eq!(a.log, b.log);
    let bits = |l: &[vitscope_core::train::StepRecord]| l.iter().map(|r| r.mse.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a.log), bits(&b.log));
}

#[test]
fn decoder_stays_unit_norm_every_step() {
    let data = sparse_mixture(300, 6, 10, 9);
    for act in [Activation::Relu, Activation::TopK] {
        for steps in 1..=6 {
            let mut src = InMemorySource::new(data.clone(), 1).unwrap();
            let mut cfg = short_config(steps);
            cfg.lr = 5e-2;
            cfg.warmup_steps = 0;
            let out = train(sae(act, 6, 3, 1e-2, 5), &cfg, &mut src, None).unwrap();
            assert!(decoder_rows_unit(&out.coder), "{act:?} after {steps} steps");
        }
    }
}

#[test]
fn early_stop_waits_for_warmup() {
    let data = sparse_mixture(300, 6, 10, 9);
    let val = Validation::autoencoder(sparse_mixture(100, 6, 10, 10)).unwrap();
    let mut cfg = short_config(200);
    cfg.warmup_steps = 60;
    cfg.lr = 1e-9;
    cfg.early_stop = Some(EarlyStop {
        eval_every: 5,
        patience: 2,
        min_delta: 0.1,
    });
    let mut src = InMemorySource::new(data, 1).unwrap();
    let out = train(sae(Activation::Relu, 6, 3, 1e-3, 5), &cfg, &mut src, Some(&val)).unwrap();
    let at = out.stopped_at.expect("a frozen coder plateaus");
    assert!(at >= cfg.warmup_steps);
    assert_eq!(out.steps_run, at);
}

#[test]
fn jumprelu_threshold_stays_nonnegative() {
    let data = sparse_mixture(300, 6, 10, 3);
    let mut cfg = short_config(30);
    cfg.lr = 5e-2;
    let mut src = InMemorySource::new(data, 1).unwrap();
    let out = train(sae(Activation::JumpRelu, 6, 3, 0.5, 2), &cfg, &mut src, None).unwrap();
    assert!(out.coder.params().get("threshold").unwrap().data().iter().all(|&t| t >= 0.0));
}

#[test]
fn nan_input_aborts_with_snapshot() {
    let mut data = gaussian(50, 4, 1);
    data.data_mut()[7] = f32::NAN;
    let mut src = InMemorySource::new(data, 0).unwrap().sequential();
    let coder = sae(Activation::Relu, 4, 2, 1e-3, 0);
    let err = train(coder.clone(), &short_config(5), &mut src, None).unwrap_err();
    assert_eq!(err.step, 1);
    assert_eq!(err.snapshot.as_ref(), Some(&coder));
}

/// Tokens of a random two-layer toy ViT.
fn toy_vit_tokens(n_tokens: usize, d_model: usize) -> Tensor {
    let cfg = ViTConfig {
        n_layers: 2,
        d_model,
        n_heads: 4,
        d_head: d_model / 4,
        d_mlp: 4 * d_model,
        patch_size: 8,
        image_size: 32,
        n_classes: 10,
        attention_only: false,
        layer_norm_eps: 1e-5,
    };
    let model = HookedViT::random(cfg, 17).unwrap();
    let per_image = model.config().n_tokens();
    let images = n_tokens.div_ceil(per_image);
    let data = Dataset::synthetic(&SyntheticSpec::new(images, 32, 10, 3)).unwrap();
    let hook = HookPoint::ResidPost(1);
    let mut parts = Vec::new();
    for batch in data.batches(64) {
        let (x, _) = batch.unwrap();
        let out = model.forward(ModelInput::Images(&x), &[hook]).unwrap();
        parts.push(select_token_rows(out.cache.get(hook).unwrap(), TokenSelector::All).unwrap());
    }
    let refs: Vec<&Tensor> = parts.iter().collect();
    let all = Tensor::vcat(&refs).unwrap();
    let idx: Vec<usize> = (0..n_tokens).collect();
    all.select_rows(&idx).unwrap()
}

#[test]
fn toy_vit_training_reduces_mse() {
    let tokens = toy_vit_tokens(10_000, 64);
    let mut cfg = TrainConfig::new(1e-3);
    cfg.batch_size = 256;
    cfg.total_steps = Some(200);
    cfg.warmup_steps = 20;
    let mut src = InMemorySource::new(tokens, 0).unwrap();
    let out = train(sae(Activation::Relu, 64, 8, 1e-4, 1), &cfg, &mut src, None).unwrap();
    let first = out.log.first().unwrap().mse;
    let last = out.log.last().unwrap().mse;
    assert!(last < first, "final mse {last} not below initial {first}");
}

#[test]
fn sweep_cells_are_isolated_and_sparsity_is_monotone() {
    let data = sparse_mixture(600, 8, 16, 4);
    let val = Validation::autoencoder(sparse_mixture(200, 8, 16, 5)).unwrap();
    let src = InMemorySource::new(data, 2).unwrap();
    let mut coder_cfg = SparseCoderConfig::sae(Activation::Relu, 8, 4, 1e-5);
    coder_cfg.seed = 6;
    let mut cfg = short_config(150);
    cfg.lr = 1e-2;
    cfg.l1_grid = vec![1e-5, 1e-2];
    let cells = sweep(&coder_cfg, &cfg, &src, &val, None).unwrap();
    let l0 = |l1: f32| cells.iter().find(|c| c.l1_coefficient == l1).unwrap().metrics.l0_mean;
    assert!(l0(1e-2) <= l0(1e-5), "{} > {}", l0(1e-2), l0(1e-5));

    let mut permuted = cfg.clone();
    permuted.l1_grid = vec![1e-2, 1e-5];
    let other = sweep(&coder_cfg, &permuted, &src, &val, None).unwrap();
    for c in &cells {
        let twin = other.iter().find(|o| o.l1_coefficient == c.l1_coefficient).unwrap();
        assert!(twin.outcome.coder.params().bit_eq(c.outcome.coder.params()));
        assert_eq!(twin.metrics, c.metrics);
    }

    // A 1×1 grid is a plain training run.
    let mut single = cfg.clone();
    single.l1_grid = vec![1e-2];
    let cell = &sweep(&coder_cfg, &single, &src, &val, None).unwrap()[0];
    let mut cc = coder_cfg.clone();
    cc.l1_coefficient = 1e-2;
    let direct = train(SparseCoder::new(cc).unwrap(), &cfg, &mut src.clone(), Some(&val)).unwrap();
    assert!(direct.coder.params().bit_eq(cell.outcome.coder.params()));
    assert_eq!(direct.log, cell.outcome.log);
}
