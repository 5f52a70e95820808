//! Loss terms and closed-form gradients.
//!
//! Notation: `B` rows, `G = (2/B)(x̂ − y)` is the gradient of the mean
//! squared error wrt the reconstruction, `dF` the gradient wrt latents and
//! `dZ` wrt encoder pre-activations.

use alloc::vec::Vec;

use super::{Activation, Architecture, Forward, ParamSet, SparseCoder};
use crate::error::dim_err;
use crate::numerics::{matmul, matmul_nt, matmul_tn, sum_rows};
use crate::{Error, Result, Tensor};

#[derive(Clone, Debug)]
pub struct LossOutput {
    /// Mean over rows of the squared reconstruction error.
    pub mse: f64,
    /// Unweighted sparsity penalty (mean over rows).
    pub sparsity: f64,
    /// Variant auxiliary loss (Gated only).
    pub aux: f64,
    /// `mse + λ·sparsity + aux`.
    pub total: f64,
    pub per_example_mse: Vec<f64>,
    pub grads: ParamSet,
    pub forward: Forward,
    /// Normalized-space target.
    pub target: Tensor,
}

/// `(2/B)(x̂ − y)` plus the per-row squared errors.
fn residual_grad(recon: &Tensor, target: &Tensor) -> Result<(Tensor, Vec<f64>)> {
    recon.same_shape(target, "reconstruction target")?;
    let (b, m) = recon.dims2()?;
    let c = 2.0 / b as f64;
    let mut g = Tensor::zeros(&[b, m]);
    let mut per = Vec::with_capacity(b);
    for i in 0..b {
        let mut s = 0.0f64;
        for ((o, &x), &y) in g.row_mut(i).iter_mut().zip(recon.row(i)).zip(target.row(i)) {
            let e = x as f64 - y as f64;
            s += e * e;
            *o = (c * e) as f32;
        }
        per.push(s);
    }
    Ok((g, per))
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

/// `dF ⊙ 1[mask > 0]`.
fn gate(df: &Tensor, mask: &Tensor) -> Tensor {
    let mut out = df.clone();
    for (o, &m) in out.data_mut().iter_mut().zip(mask.data()) {
        if !(m > 0.0) {
            *o = 0.0;
        }
    }
    out
}

/// Adds the constant `c` to every entry (in `f64`, rounded once).
fn add_const(t: &mut Tensor, c: f64) {
    if c != 0.0 {
        for v in t.data_mut() {
            *v = (*v as f64 + c) as f32;
        }
    }
}

/// `b_dec` gradient through the centering `ā = x − b_dec`: subtracts
/// `Σ_paths (Σ_b dZ) · W_pathᵀ`.
fn centering_correction(g_bdec: &mut Tensor, bias_grad: &Tensor, w: &Tensor) -> Result<()> {
    let d = bias_grad.numel();
    let row = bias_grad.clone().reshape(&[1, d])?;
    let corr = matmul_nt(&row, w)?;
    for (g, &c) in g_bdec.data_mut().iter_mut().zip(corr.data()) {
        *g -= c;
    }
    Ok(())
}

impl SparseCoder {
    /// Loss terms and the gradient of the total loss wrt every trainable
    /// tensor. Inputs are raw-space; crosscoders take their layers
    /// concatenated along columns and reconstruct them.
    pub fn loss_and_grads(&self, a_in: &Tensor, a_target: &Tensor) -> Result<LossOutput> {
        self.check_input(a_in)?;
        let (b, _) = a_in.dims2()?;
        let (bt, mt) = a_target.dims2()?;
        if bt != b || mt != self.target_width() {
            return Err(dim_err!(
                "target {:?} does not match {} rows of width {}",
                a_target.shape(),
                b,
                self.target_width()
            ));
        }
        if b == 0 {
            return Err(dim_err!("empty batch"));
        }
        let fw = self.forward_normalized(self.normalize_input(a_in))?;
        let target = if self.is_crosscoder() {
            fw.input.clone()
        } else {
            self.normalize_target(a_target)
        };
        let (g, per) = residual_grad(&fw.recon, &target)?;
        let lambda = self.config.l1_coefficient as f64;
        let (sparsity, aux, grads) = if self.is_crosscoder() {
            self.cross_grads(&fw, &g, lambda)?
        } else if self.config.activation == Activation::Gated {
            self.gated_grads(&fw, &target, &g, lambda)?
        } else {
            self.standard_grads(&fw, &g, lambda)?
        };
        let mse = mean(&per);
        let total = mse + lambda * sparsity + aux;
        if !total.is_finite() {
            return Err(Error::Numeric("sparse coder loss".into()));
        }
        for (name, t) in grads.iter() {
            t.ensure_finite(name)?;
        }
        Ok(LossOutput {
            mse,
            sparsity,
            aux,
            total,
            per_example_mse: per,
            grads,
            forward: fw,
            target,
        })
    }

    fn standard_grads(&self, fw: &Forward, g: &Tensor, lambda: f64) -> Result<(f64, f64, ParamSet)> {
        let (b, _) = g.dims2()?;
        let f = &fw.latents;
        let sparsity = f.data().iter().map(|&v| v as f64).sum::<f64>() / b as f64;
        let w_dec = self.p("W_dec");
        let w_enc = self.p("W_enc");
        let g_wdec = matmul_tn(f, g)?;
        let mut g_bdec = sum_rows(g)?;
        let mut df = matmul_nt(g, w_dec)?;
        add_const(&mut df, lambda / b as f64);
        let dz = gate(&df, f);
        let g_wenc = matmul_tn(&fw.centered, &dz)?;
        let g_benc = sum_rows(&dz)?;
        if self.config.architecture == Architecture::Sae {
            centering_correction(&mut g_bdec, &g_benc, w_enc)?;
        }
        let mut grads = ParamSet::new();
        grads.push("W_enc", g_wenc);
        grads.push("b_enc", g_benc);
        grads.push("W_dec", g_wdec);
        grads.push("b_dec", g_bdec);
        if self.config.activation == Activation::JumpRelu {
            // Straight-through estimate: d/dθ 1[z > θ] ≈ −(1/ε)·1[|z − θ| < ε/2].
            let eps = self.config.jumprelu_bandwidth as f64;
            let theta = self.p("threshold").data();
            let d = theta.len();
            let mut acc = alloc::vec![0.0f64; d];
            for i in 0..b {
                for (j, a) in acc.iter_mut().enumerate() {
                    let z = fw.pre.row(i)[j] as f64;
                    if z > 0.0 && (z - theta[j] as f64).abs() < eps / 2.0 {
                        *a -= df.row(i)[j] as f64 * z / eps;
                    }
                }
            }
            grads.push(
                "threshold",
                Tensor::new(alloc::vec![d], acc.into_iter().map(|v| v as f32).collect())?,
            );
        }
        Ok((sparsity, 0.0, grads))
    }

    fn gated_grads(
        &self,
        fw: &Forward,
        target: &Tensor,
        g: &Tensor,
        lambda: f64,
    ) -> Result<(f64, f64, ParamSet)> {
        let (b, _) = g.dims2()?;
        let gate_pre = &fw.pre;
        let mag_pre = fw.mag.as_ref().expect("gated forward carries the magnitude path");
        let w_dec = self.p("W_dec");
        let w_gate = self.p("W_gate");
        let w_mag = self.magnitude_weights()?;
        let gate_act = gate_pre.map(|v| if v > 0.0 { v } else { 0.0 });
        let sparsity = gate_act.data().iter().map(|&v| v as f64).sum::<f64>() / b as f64;

        // Auxiliary reconstruction through a frozen copy of the decoder.
        let mut aux_recon = matmul(&gate_act, w_dec)?;
        crate::numerics::add_row_bias(&mut aux_recon, self.p("b_dec"))?;
        let (g_aux, per_aux) = residual_grad(&aux_recon, target)?;
        let aux = mean(&per_aux);

        let g_wdec = matmul_tn(&fw.latents, g)?;
        let mut g_bdec = sum_rows(g)?;

        let df = matmul_nt(g, w_dec)?;
        let open = gate_pre.map(|v| if v > 0.0 { 1.0 } else { 0.0 });
        let d_mag = gate(&gate(&df, &open), mag_pre);
        let mut d_gate = matmul_nt(&g_aux, w_dec)?;
        add_const(&mut d_gate, lambda / b as f64);
        let d_gate = gate(&d_gate, gate_pre);

        let g_bgate = sum_rows(&d_gate)?;
        let g_bmag = sum_rows(&d_mag)?;
        let via_mag = matmul_tn(&fw.centered, &d_mag)?;
        let mut g_wgate = matmul_tn(&fw.centered, &d_gate)?;
        let dict = self.dict_size();
        let rescale: Vec<f64> = self.p("r_mag").data().iter().map(|&r| libm::exp(r as f64)).collect();
        let mut g_r = alloc::vec![0.0f64; dict];
        for i in 0..w_gate.shape()[0] {
            let (gw, vm, wm) = (g_wgate.row_mut(i), via_mag.row(i), w_mag.row(i));
            for j in 0..dict {
                gw[j] = (gw[j] as f64 + vm[j] as f64 * rescale[j]) as f32;
                g_r[j] += vm[j] as f64 * wm[j] as f64;
            }
        }
        if self.config.architecture == Architecture::Sae {
            centering_correction(&mut g_bdec, &g_bgate, w_gate)?;
            centering_correction(&mut g_bdec, &g_bmag, &w_mag)?;
        }
        let mut grads = ParamSet::new();
        grads.push("W_gate", g_wgate);
        grads.push("b_gate", g_bgate);
        grads.push(
            "r_mag",
            Tensor::new(alloc::vec![dict], g_r.into_iter().map(|v| v as f32).collect())?,
        );
        grads.push("b_mag", g_bmag);
        grads.push("W_dec", g_wdec);
        grads.push("b_dec", g_bdec);
        Ok((sparsity, aux, grads))
    }

    fn cross_grads(&self, fw: &Forward, g: &Tensor, lambda: f64) -> Result<(f64, f64, ParamSet)> {
        let (b, _) = g.dims2()?;
        let n = self.config.d_in;
        let layers = &self.config.layers;
        let dict = self.dict_size();
        let f = &fw.latents;

        // Per-feature decoder norm per layer and their sum.
        let mut norms: Vec<Vec<f64>> = Vec::with_capacity(layers.len());
        for l in layers {
            let w = self.p(&alloc::format!("W_dec.{l}"));
            norms.push(
                (0..dict)
                    .map(|i| libm::sqrt(w.row(i).iter().map(|&v| v as f64 * v as f64).sum()))
                    .collect(),
            );
        }
        let weight: Vec<f64> = (0..dict).map(|i| norms.iter().map(|nl| nl[i]).sum()).collect();
        let mut sparsity = 0.0f64;
        let mut fsum = alloc::vec![0.0f64; dict];
        for r in 0..b {
            for (i, &v) in f.row(r).iter().enumerate() {
                sparsity += v as f64 * weight[i];
                fsum[i] += v as f64;
            }
        }
        sparsity /= b as f64;

        let mut g_wdec = Vec::with_capacity(layers.len());
        let mut g_bdec = Vec::with_capacity(layers.len());
        let mut dec_parts = Vec::with_capacity(layers.len());
        for (li, l) in layers.iter().enumerate() {
            let w = self.p(&alloc::format!("W_dec.{l}"));
            let gl = g.col_slice(li * n, (li + 1) * n)?;
            let mut gw = matmul_tn(f, &gl)?;
            for i in 0..dict {
                let nrm = norms[li][i];
                if nrm > 0.0 {
                    let c = lambda / b as f64 * fsum[i] / nrm;
                    for (o, &wv) in gw.row_mut(i).iter_mut().zip(w.row(i)) {
                        *o = (*o as f64 + c * wv as f64) as f32;
                    }
                }
            }
            g_wdec.push(gw);
            g_bdec.push(sum_rows(&gl)?);
            dec_parts.push(w);
        }
        let w_dec_cat = Tensor::hcat(&dec_parts)?;
        let mut df = matmul_nt(g, &w_dec_cat)?;
        for r in 0..b {
            for (v, &w) in df.row_mut(r).iter_mut().zip(&weight) {
                *v = (*v as f64 + lambda / b as f64 * w) as f32;
            }
        }
        let dz = gate(&df, f);
        let g_wenc = matmul_tn(&fw.input, &dz)?;
        let g_benc = sum_rows(&dz)?;

        let mut grads = ParamSet::new();
        for (li, l) in layers.iter().enumerate() {
            let rows: Vec<usize> = (li * n..(li + 1) * n).collect();
            grads.push(alloc::format!("W_enc.{l}"), g_wenc.select_rows(&rows)?);
        }
        grads.push("b_enc", g_benc);
        for (l, gw) in layers.iter().zip(g_wdec) {
            grads.push(alloc::format!("W_dec.{l}"), gw);
        }
        for (l, gb) in layers.iter().zip(g_bdec) {
            grads.push(alloc::format!("b_dec.{l}"), gb);
        }
        Ok((sparsity, 0.0, grads))
    }
}
