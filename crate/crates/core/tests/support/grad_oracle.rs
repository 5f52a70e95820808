//! Central finite differences of an independent 64-bit coder loss written
//! with plain loops, compared entry by entry with the closed-form gradients.

#![allow(dead_code)]

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vitscope_core::coder::{Activation, Architecture, ParamSet, SparseCoder, SparseCoderConfig};
use vitscope_core::Tensor;

const STEP: f64 = 1e-3;
pub const TOL: f64 = 1e-4;
/// Relative error denominators never drop below this, so entries that are
/// zero up to rounding are compared absolutely.
const FLOOR: f64 = 1e-3;
const MARGIN: f64 = 0.02;

type Params = BTreeMap<String, (Vec<usize>, Vec<f64>)>;

fn to_f64(p: &ParamSet) -> Params {
    p.iter()
        .map(|(n, t)| (n.to_string(), (t.shape().to_vec(), t.data().iter().map(|&v| v as f64).collect())))
        .collect()
}

fn at(p: &Params, name: &str, i: usize, j: usize) -> f64 {
    let (s, d) = &p[name];
    d[i * s[1] + j]
}

fn vec1<'a>(p: &'a Params, name: &str) -> &'a [f64] {
    &p[name].1
}

fn relu(v: f64) -> f64 {
    v.max(0.0)
}

struct Shadow<'a> {
    cfg: &'a SparseCoderConfig,
    x: Vec<Vec<f64>>,
    y: Vec<Vec<f64>>,
    /// Decoder used by the gated auxiliary term (held fixed).
    frozen: Params,
}

impl Shadow<'_> {
    /// Loss and the smallest distance of any pre-activation to a kink.
    fn eval(&self, p: &Params) -> (f64, f64) {
        let c = self.cfg;
        let lam = c.l1_coefficient as f64;
        let (n, dict) = (c.d_in, c.dictionary_size());
        let b = self.x.len() as f64;
        let mut loss = 0.0;
        let mut margin = f64::INFINITY;
        for (x, y) in self.x.iter().zip(&self.y) {
            if c.architecture == Architecture::Crosscoder {
                let mut z: Vec<f64> = vec1(p, "b_enc").to_vec();
                for (li, l) in c.layers.iter().enumerate() {
                    let w = format!("W_enc.{l}");
                    for j in 0..dict {
                        for i in 0..n {
                            z[j] += x[li * n + i] * at(p, &w, i, j);
                        }
                    }
                }
                let f: Vec<f64> = z.iter().map(|&v| relu(v)).collect();
                margin = z.iter().fold(margin, |m, v| m.min(v.abs()));
                for (li, l) in c.layers.iter().enumerate() {
                    let w = format!("W_dec.{l}");
                    let bd = vec1(p, &format!("b_dec.{l}"));
                    for k in 0..n {
                        let mut r = bd[k];
                        for j in 0..dict {
                            r += f[j] * at(p, &w, j, k);
                        }
                        loss += (r - x[li * n + k]).powi(2) / b;
                    }
                    for j in 0..dict {
                        let norm: f64 = (0..n).map(|k| at(p, &w, j, k).powi(2)).sum::<f64>().sqrt();
                        loss += lam * f[j] * norm / b;
                    }
                }
                continue;
            }
            let m = c.output_width();
            let centered: Vec<f64> = if c.architecture == Architecture::Sae {
                x.iter().zip(vec1(p, "b_dec")).map(|(a, bd)| a - bd).collect()
            } else {
                x.clone()
            };
            let affine = |w: &str, bias: &[f64], col_scale: Option<&[f64]>| -> Vec<f64> {
                (0..dict)
                    .map(|j| {
                        let s = col_scale.map_or(1.0, |r| r[j].exp());
                        bias[j] + (0..n).map(|i| centered[i] * at(p, w, i, j) * s).sum::<f64>()
                    })
                    .collect()
            };
            let f: Vec<f64> = match c.activation {
                Activation::Gated => {
                    let g = affine("W_gate", vec1(p, "b_gate"), None);
                    let mg = affine("W_gate", vec1(p, "b_mag"), Some(vec1(p, "r_mag")));
                    margin = g.iter().chain(&mg).fold(margin, |m, v| m.min(v.abs()));
                    let active: Vec<f64> = g.iter().map(|&v| relu(v)).collect();
                    loss += lam * active.iter().sum::<f64>() / b;
                    for k in 0..m {
                        let mut r = vec1(&self.frozen, "b_dec")[k];
                        for j in 0..dict {
                            r += active[j] * at(&self.frozen, "W_dec", j, k);
                        }
                        loss += (r - y[k]).powi(2) / b;
                    }
                    g.iter().zip(&mg).map(|(&g, &mg)| if g > 0.0 { relu(mg) } else { 0.0 }).collect()
                }
                act => {
                    let z = affine("W_enc", vec1(p, "b_enc"), None);
                    margin = z.iter().fold(margin, |m, v| m.min(v.abs()));
                    let f: Vec<f64> = match act {
                        Activation::Relu => z.iter().map(|&v| relu(v)).collect(),
                        Activation::JumpRelu => {
                            let th = vec1(p, "threshold");
                            margin = z.iter().zip(th).fold(margin, |m, (v, t)| m.min((v - t).abs()));
                            z.iter().zip(th).map(|(&v, &t)| if v > t && v > 0.0 { v } else { 0.0 }).collect()
                        }
                        Activation::TopK => {
                            let k = c.k.unwrap();
                            let mut order: Vec<usize> = (0..dict).filter(|&j| z[j] > 0.0).collect();
                            order.sort_by(|&a, &bb| z[bb].partial_cmp(&z[a]).unwrap());
                            if order.len() > k {
                                margin = margin.min(z[order[k - 1]] - z[order[k]]);
                            }
                            let mut f = vec![0.0; dict];
                            for &j in order.iter().take(k) {
                                f[j] = z[j];
                            }
                            f
                        }
                        Activation::Gated => unreachable!(),
                    };
                    loss += lam * f.iter().sum::<f64>() / b;
                    f
                }
            };
            for k in 0..m {
                let mut r = vec1(p, "b_dec")[k];
                for j in 0..dict {
                    r += f[j] * at(p, "W_dec", j, k);
                }
                loss += (r - y[k]).powi(2) / b;
            }
        }
        (loss, margin)
    }
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f32, hi: f32) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// A coder with every tensor randomized (not just the tied initialization).
fn random_coder(cfg: &SparseCoderConfig, rng: &mut ChaCha8Rng) -> SparseCoder {
    let base = SparseCoder::new(cfg.clone()).unwrap();
    let mut p = ParamSet::new();
    for (name, t) in base.params().iter() {
        let t = match name {
            "threshold" => random_tensor(rng, t.shape(), 0.1, 0.6),
            "r_mag" => random_tensor(rng, t.shape(), -0.5, 0.5),
            n if n.starts_with('b') => random_tensor(rng, t.shape(), -0.3, 0.3),
            _ => random_tensor(rng, t.shape(), -0.6, 0.6),
        };
        p.push(name, t);
    }
    SparseCoder::from_params(cfg.clone(), p, 1.0, 1.0).unwrap()
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.shape()[0]).map(|i| t.row(i).iter().map(|&v| v as f64).collect()).collect()
}

/// Finds a seed whose instance keeps every pre-activation away from kinks,
/// then compares every gradient entry with central differences. Returns
/// the worst relative error.
pub fn check(cfg: &SparseCoderConfig, batch: usize) -> Result<f64, String> {
    let in_w = match cfg.architecture {
        Architecture::Crosscoder => cfg.d_in * cfg.layers.len(),
        _ => cfg.d_in,
    };
    for seed in 0..500u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let coder = random_coder(cfg, &mut rng);
        let x = random_tensor(&mut rng, &[batch, in_w], -1.5, 1.5);
        let y = match cfg.architecture {
            Architecture::Transcoder => random_tensor(&mut rng, &[batch, cfg.output_width()], -1.0, 1.0),
            _ => x.clone(),
        };
        let base = to_f64(coder.params());
        let shadow = Shadow {
            cfg,
            x: rows(&x),
            y: rows(&y),
            frozen: base.clone(),
        };
        let (l0, margin) = shadow.eval(&base);
        if margin < MARGIN {
            continue;
        }
        let out = coder.loss_and_grads(&x, &y).map_err(|e| e.to_string())?;
        if (out.total - l0).abs() > 1e-5 * l0.abs().max(1.0) {
            return Err(format!("{}: loss {} vs shadow {}", cfg.variant_label(), out.total, l0));
        }
        let mut worst = 0.0f64;
        for (name, g) in out.grads.iter() {
            for idx in 0..g.numel() {
                let mut plus = base.clone();
                plus.get_mut(name).unwrap().1[idx] += STEP;
                let mut minus = base.clone();
                minus.get_mut(name).unwrap().1[idx] -= STEP;
                let (lp, mp) = shadow.eval(&plus);
                let (lm, mm) = shadow.eval(&minus);
                if !(mp > 0.0 && mm > 0.0) {
                    return Err(format!("{} {name}[{idx}]: perturbation crossed a kink", cfg.variant_label()));
                }
                let numeric = (lp - lm) / (2.0 * STEP);
                let analytic = g.data()[idx] as f64;
                let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR);
                worst = worst.max(rel);
                if !(rel < TOL) {
                    return Err(format!(
                        "{} {name}[{idx}]: analytic {analytic} numeric {numeric} rel {rel}",
                        cfg.variant_label()
                    ));
                }
            }
        }
        eprintln!("{} seed {seed}: worst rel err {worst:.2e}", cfg.variant_label());
        return Ok(worst);
    }
    Err(format!("no kink-free instance found for {}", cfg.variant_label()))
}

