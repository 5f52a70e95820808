//! Sparse coders: SAE variants (ReLU, Top-K, JumpReLU, Gated), transcoders
//! and cross-layer crosscoders, with hand-derived gradients.
//!
//! Coders work internally in a normalized space: inputs are multiplied by
//! `input_scale`, targets by `output_scale`, and reconstructions are divided
//! by `output_scale` before they leave [`SparseCoder::reconstruct`].

mod config;
mod grads;
mod params;

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub use config::{Activation, Architecture, Normalization, SparseCoderConfig};
pub use grads::LossOutput;
pub use params::ParamSet;

use crate::error::{config_err, dim_err};
use crate::numerics::{add_row_bias, matmul};
use crate::vit::HookPoint;
use crate::{Error, Result, Tensor};

/// Names and shapes of every trainable tensor for a config, in canonical
/// order.
pub fn param_shapes(config: &SparseCoderConfig) -> Vec<(String, Vec<usize>)> {
    let (n, m, d) = (config.d_in, config.output_width(), config.dictionary_size());
    let mut out: Vec<(String, Vec<usize>)> = Vec::new();
    match (config.architecture, config.activation) {
        (Architecture::Crosscoder, _) => {
            for l in &config.layers {
                out.push((alloc::format!("W_enc.{l}"), vec![n, d]));
            }
            out.push(("b_enc".into(), vec![d]));
            for l in &config.layers {
                out.push((alloc::format!("W_dec.{l}"), vec![d, n]));
            }
            for l in &config.layers {
                out.push((alloc::format!("b_dec.{l}"), vec![n]));
            }
        }
        (_, Activation::Gated) => {
            out.push(("W_gate".into(), vec![n, d]));
            out.push(("b_gate".into(), vec![d]));
            out.push(("r_mag".into(), vec![d]));
            out.push(("b_mag".into(), vec![d]));
            out.push(("W_dec".into(), vec![d, m]));
            out.push(("b_dec".into(), vec![m]));
        }
        (_, act) => {
            out.push(("W_enc".into(), vec![n, d]));
            out.push(("b_enc".into(), vec![d]));
            out.push(("W_dec".into(), vec![d, m]));
            out.push(("b_dec".into(), vec![m]));
            if act == Activation::JumpRelu {
                out.push(("threshold".into(), vec![d]));
            }
        }
    }
    out
}

/// Scale that brings the mean squared row norm of `batch` to its width.
pub fn unit_mean_squared_norm_scale(batch: &Tensor) -> Result<f32> {
    let (rows, cols) = batch.dims2()?;
    if rows == 0 {
        return Err(dim_err!("cannot estimate a scale from zero rows"));
    }
    let mean_sq = batch.data().iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>() / rows as f64;
    if !(mean_sq > 0.0) {
        return Err(Error::Undefined("activations have zero norm".into()));
    }
    Ok(libm::sqrt(cols as f64 / mean_sq) as f32)
}

/// Intermediate values of one forward pass in normalized space.
#[derive(Clone, Debug)]
pub struct Forward {
    /// Scaled input (crosscoder: layers concatenated along columns).
    pub input: Tensor,
    /// Encoder input: `input − b_dec` for SAEs, `input` otherwise.
    pub centered: Tensor,
    /// Encoder pre-activations (Gated: the gate path).
    pub pre: Tensor,
    /// Gated magnitude path.
    pub mag: Option<Tensor>,
    pub latents: Tensor,
    /// Normalized-space reconstruction.
    pub recon: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SparseCoder {
    config: SparseCoderConfig,
    params: ParamSet,
    input_scale: f32,
    output_scale: f32,
}

impl SparseCoder {
    /// Seeded initialization: unit-norm decoder rows, encoder equal to the
    /// decoder transpose, zero biases.
    pub fn new(config: SparseCoderConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (n, m, d) = (config.d_in, config.output_width(), config.dictionary_size());
        let mut params = ParamSet::new();
        let unit_rows = |rng: &mut ChaCha8Rng, rows: usize, cols: usize| -> Tensor {
            let mut t = Tensor::zeros(&[rows, cols]);
            for i in 0..rows {
                let row = t.row_mut(i);
                for v in row.iter_mut() {
                    *v = StandardNormal.sample(rng);
                }
                normalize_row(row);
            }
            t
        };
        match (config.architecture, config.activation) {
            (Architecture::Crosscoder, _) => {
                let decs: Vec<Tensor> = config.layers.iter().map(|_| unit_rows(&mut rng, d, n)).collect();
                for (l, w) in config.layers.iter().zip(&decs) {
                    params.push(alloc::format!("W_enc.{l}"), w.transpose()?);
                }
                params.push("b_enc", Tensor::zeros(&[d]));
                for (l, w) in config.layers.iter().zip(decs) {
                    params.push(alloc::format!("W_dec.{l}"), w);
                }
                for l in &config.layers {
                    params.push(alloc::format!("b_dec.{l}"), Tensor::zeros(&[n]));
                }
            }
            (_, act) => {
                let w_dec = unit_rows(&mut rng, d, m);
                let w_enc = if n == m {
                    w_dec.transpose()?
                } else {
                    unit_rows(&mut rng, d, n).transpose()?
                };
                if act == Activation::Gated {
                    params.push("W_gate", w_enc);
                    params.push("b_gate", Tensor::zeros(&[d]));
                    params.push("r_mag", Tensor::zeros(&[d]));
                    params.push("b_mag", Tensor::zeros(&[d]));
                } else {
                    params.push("W_enc", w_enc);
                    params.push("b_enc", Tensor::zeros(&[d]));
                }
                params.push("W_dec", w_dec);
                params.push("b_dec", Tensor::zeros(&[m]));
                if act == Activation::JumpRelu {
                    params.push("threshold", Tensor::full(&[d], config.jumprelu_threshold_init));
                }
            }
        }
        Ok(Self {
            config,
            params,
            input_scale: 1.0,
            output_scale: 1.0,
        })
    }

    /// Rebuilds a coder from stored tensors, checking names and shapes.
    pub fn from_params(
        config: SparseCoderConfig,
        params: ParamSet,
        input_scale: f32,
        output_scale: f32,
    ) -> Result<Self> {
        config.validate()?;
        let want = param_shapes(&config);
        if want.len() != params.len() {
            return Err(config_err!(
                "coder expects {} tensors, got {}",
                want.len(),
                params.len()
            ));
        }
        for ((name, shape), (got_name, t)) in want.iter().zip(params.iter()) {
            if name != got_name || t.shape() != shape.as_slice() {
                return Err(dim_err!(
                    "coder tensor `{}` {:?} where `{}` {:?} was expected",
                    got_name,
                    t.shape(),
                    name,
                    shape
                ));
            }
        }
        let mut c = Self {
            config,
            params,
            input_scale: 1.0,
            output_scale: 1.0,
        };
        c.set_scales(input_scale, output_scale)?;
        Ok(c)
    }

    /// A `2·d`-feature ReLU SAE whose atoms are `±e_i`; it reconstructs any
    /// input exactly.
    pub fn lossless(d: usize) -> Result<Self> {
        let config = SparseCoderConfig::sae(Activation::Relu, d, 2, 0.0);
        let mut w_dec = Tensor::zeros(&[2 * d, d]);
        for i in 0..d {
            w_dec.row_mut(2 * i)[i] = 1.0;
            w_dec.row_mut(2 * i + 1)[i] = -1.0;
        }
        let mut params = ParamSet::new();
        params.push("W_enc", w_dec.transpose()?);
        params.push("b_enc", Tensor::zeros(&[2 * d]));
        params.push("W_dec", w_dec);
        params.push("b_dec", Tensor::zeros(&[d]));
        Self::from_params(config, params, 1.0, 1.0)
    }

    pub fn config(&self) -> &SparseCoderConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn input_scale(&self) -> f32 {
        self.input_scale
    }

    pub fn output_scale(&self) -> f32 {
        self.output_scale
    }

    pub fn set_scales(&mut self, input: f32, output: f32) -> Result<()> {
        if !(input.is_finite() && input > 0.0 && output.is_finite() && output > 0.0) {
            return Err(config_err!("normalization scales must be finite and positive"));
        }
        self.input_scale = input;
        self.output_scale = output;
        Ok(())
    }

    /// Per-layer input width.
    pub fn d_in(&self) -> usize {
        self.config.d_in
    }

    pub fn d_out(&self) -> usize {
        self.config.output_width()
    }

    pub fn dict_size(&self) -> usize {
        self.config.dictionary_size()
    }

    /// Row width of a training batch: `d_in` times the number of layers
    /// for a crosscoder, `d_in` otherwise.
    pub fn input_width(&self) -> usize {
        match self.config.architecture {
            Architecture::Crosscoder => self.config.d_in * self.config.layers.len(),
            _ => self.config.d_in,
        }
    }

    pub fn target_width(&self) -> usize {
        match self.config.architecture {
            Architecture::Crosscoder => self.input_width(),
            _ => self.d_out(),
        }
    }

    pub fn is_crosscoder(&self) -> bool {
        self.config.architecture == Architecture::Crosscoder
    }

    pub fn transcoder_input(&self) -> Option<HookPoint> {
        match self.config.architecture {
            Architecture::Transcoder => self.config.input_hook,
            _ => None,
        }
    }

    fn p(&self, name: &str) -> &Tensor {
        self.params.get(name).expect("parameter names are validated at construction")
    }

    fn check_input(&self, a: &Tensor) -> Result<()> {
        let (_, w) = a.dims2()?;
        if w != self.input_width() {
            return Err(dim_err!("coder input width {} != {}", w, self.input_width()));
        }
        Ok(())
    }

    /// Latent activations for raw-space inputs.
    pub fn encode(&self, a: &Tensor) -> Result<Tensor> {
        Ok(self.forward(a)?.latents)
    }

    /// Raw-space reconstruction from latents.
    pub fn decode(&self, f: &Tensor) -> Result<Tensor> {
        let (_, d) = f.dims2()?;
        if d != self.dict_size() {
            return Err(dim_err!("latent width {} != dictionary {}", d, self.dict_size()));
        }
        let x = self.decode_normalized(f)?;
        Ok(self.denormalize(x))
    }

    /// Raw-space reconstruction of raw-space inputs.
    pub fn reconstruct(&self, a: &Tensor) -> Result<Tensor> {
        let fw = self.forward(a)?;
        Ok(self.denormalize(fw.recon))
    }

    fn denormalize(&self, x: Tensor) -> Tensor {
        if self.output_scale == 1.0 {
            x
        } else {
            x.scale(1.0 / self.output_scale)
        }
    }

    fn normalize_input(&self, a: &Tensor) -> Tensor {
        if self.input_scale == 1.0 {
            a.clone()
        } else {
            a.scale(self.input_scale)
        }
    }

    pub(crate) fn normalize_target(&self, y: &Tensor) -> Tensor {
        if self.output_scale == 1.0 {
            y.clone()
        } else {
            y.scale(self.output_scale)
        }
    }

    /// Full forward pass on raw-space inputs.
    pub fn forward(&self, a: &Tensor) -> Result<Forward> {
        self.check_input(a)?;
        self.forward_normalized(self.normalize_input(a))
    }

    pub(crate) fn forward_normalized(&self, input: Tensor) -> Result<Forward> {
        if self.is_crosscoder() {
            return self.cross_forward(input);
        }
        let centered = if self.config.architecture == Architecture::Sae {
            let mut c = input.clone();
            let b = self.p("b_dec").data();
            let m = b.len();
            for row in c.data_mut().chunks_exact_mut(m) {
                for (v, &bv) in row.iter_mut().zip(b) {
                    *v -= bv;
                }
            }
            c
        } else {
            input.clone()
        };
        let (pre, mag, latents) = if self.config.activation == Activation::Gated {
            let mut gate = matmul(&centered, self.p("W_gate"))?;
            add_row_bias(&mut gate, self.p("b_gate"))?;
            let mut mag = matmul(&centered, &self.magnitude_weights()?)?;
            add_row_bias(&mut mag, self.p("b_mag"))?;
            let mut f = Tensor::zeros(gate.shape());
            for ((o, &g), &m) in f.data_mut().iter_mut().zip(gate.data()).zip(mag.data()) {
                if g > 0.0 && m > 0.0 {
                    *o = m;
                }
            }
            (gate, Some(mag), f)
        } else {
            let mut z = matmul(&centered, self.p("W_enc"))?;
            add_row_bias(&mut z, self.p("b_enc"))?;
            let f = self.activate(&z)?;
            (z, None, f)
        };
        let recon = self.decode_normalized(&latents)?;
        Ok(Forward {
            input,
            centered,
            pre,
            mag,
            latents,
            recon,
        })
    }

    /// `W_gate` with column `j` scaled by `exp(r_mag[j])`.
    pub(crate) fn magnitude_weights(&self) -> Result<Tensor> {
        let mut w = self.p("W_gate").clone();
        let scale: Vec<f32> = self
            .p("r_mag")
            .data()
            .iter()
            .map(|&r| libm::exp(r as f64) as f32)
            .collect();
        let d = scale.len();
        for row in w.data_mut().chunks_exact_mut(d) {
            for (v, &s) in row.iter_mut().zip(&scale) {
                *v *= s;
            }
        }
        w.ensure_finite("gated magnitude weights")?;
        Ok(w)
    }

    fn activate(&self, z: &Tensor) -> Result<Tensor> {
        let (rows, d) = z.dims2()?;
        let mut f = Tensor::zeros(&[rows, d]);
        match self.config.activation {
            Activation::Relu => {
                for (o, &v) in f.data_mut().iter_mut().zip(z.data()) {
                    if v > 0.0 {
                        *o = v;
                    }
                }
            }
            Activation::JumpRelu => {
                let theta = self.p("threshold").data();
                for i in 0..rows {
                    for ((o, &v), &t) in f.row_mut(i).iter_mut().zip(z.row(i)).zip(theta) {
                        if v > t && v > 0.0 {
                            *o = v;
                        }
                    }
                }
            }
            Activation::TopK => {
                let k = self.config.k.unwrap_or(d);
                let mut cand: Vec<usize> = Vec::with_capacity(d);
                for i in 0..rows {
                    let zr = z.row(i);
                    cand.clear();
                    cand.extend((0..d).filter(|&j| zr[j] > 0.0));
                    if cand.len() > k {
                        // Larger value first; equal values keep the lower index.
                        let by_rank = |&a: &usize, &b: &usize| zr[b].total_cmp(&zr[a]).then(a.cmp(&b));
                        cand.select_nth_unstable_by(k - 1, by_rank);
                        cand.truncate(k);
                    }
                    let fr = f.row_mut(i);
                    for &j in &cand {
                        fr[j] = zr[j];
                    }
                }
            }
            Activation::Gated => unreachable!("gated latents come from two paths"),
        }
        Ok(f)
    }

    fn decode_normalized(&self, f: &Tensor) -> Result<Tensor> {
        if self.is_crosscoder() {
            let parts = self.cross_decode(f)?;
            let refs: Vec<&Tensor> = parts.iter().collect();
            return Tensor::hcat(&refs);
        }
        let mut x = matmul(f, self.p("W_dec"))?;
        add_row_bias(&mut x, self.p("b_dec"))?;
        Ok(x)
    }

    fn cross_encoder(&self) -> Result<Tensor> {
        let parts: Vec<&Tensor> = self
            .config
            .layers
            .iter()
            .map(|l| self.p(&alloc::format!("W_enc.{l}")))
            .collect();
        Tensor::vcat(&parts)
    }

    fn cross_forward(&self, input: Tensor) -> Result<Forward> {
        let mut z = matmul(&input, &self.cross_encoder()?)?;
        add_row_bias(&mut z, self.p("b_enc"))?;
        let f = z.map(|v| if v > 0.0 { v } else { 0.0 });
        let recon = self.decode_normalized(&f)?;
        Ok(Forward {
            centered: input.clone(),
            input,
            pre: z,
            mag: None,
            latents: f,
            recon,
        })
    }

    fn cross_decode(&self, f: &Tensor) -> Result<Vec<Tensor>> {
        self.config
            .layers
            .iter()
            .map(|l| {
                let mut x = matmul(f, self.p(&alloc::format!("W_dec.{l}")))?;
                add_row_bias(&mut x, self.p(&alloc::format!("b_dec.{l}")))?;
                Ok(x)
            })
            .collect()
    }

    /// Per-layer raw-space reconstructions and shared latents. `acts` are
    /// the layer activations in the order of the configured layer set.
    pub fn crosscoder_forward(&self, acts: &[Tensor]) -> Result<(Vec<Tensor>, Tensor)> {
        if !self.is_crosscoder() {
            return Err(config_err!("not a crosscoder"));
        }
        if acts.len() != self.config.layers.len() {
            return Err(config_err!(
                "crosscoder spans {} layers, got {} activations",
                self.config.layers.len(),
                acts.len()
            ));
        }
        let refs: Vec<&Tensor> = acts.iter().collect();
        let fw = self.forward(&Tensor::hcat(&refs)?)?;
        let n = self.config.d_in;
        let recon = (0..acts.len())
            .map(|i| Ok(self.denormalize(fw.recon.col_slice(i * n, (i + 1) * n)?)))
            .collect::<Result<Vec<_>>>()?;
        Ok((recon, fw.latents))
    }

    /// Rescales every decoder row to unit norm (ReLU/Top-K constraint).
    pub fn normalize_decoder_rows(&mut self) -> Result<()> {
        let w = self.params.get_mut("W_dec")?;
        let (rows, _) = w.dims2()?;
        for i in 0..rows {
            normalize_row(w.row_mut(i));
        }
        Ok(())
    }

    /// Removes from the decoder gradient the component parallel to each
    /// (unit) decoder row.
    pub fn remove_parallel_decoder_grad(&self, grads: &mut ParamSet) -> Result<()> {
        let w = self.p("W_dec");
        let g = grads.get_mut("W_dec")?;
        let (rows, _) = w.dims2()?;
        for i in 0..rows {
            let wr = w.row(i);
            let norm_sq: f64 = wr.iter().map(|&v| v as f64 * v as f64).sum();
            if norm_sq == 0.0 {
                continue;
            }
            let dot: f64 = wr.iter().zip(g.row(i)).map(|(&a, &b)| a as f64 * b as f64).sum();
            let c = dot / norm_sq;
            for (gv, &wv) in g.row_mut(i).iter_mut().zip(wr) {
                *gv = (*gv as f64 - c * wv as f64) as f32;
            }
        }
        Ok(())
    }
}

fn normalize_row(row: &mut [f32]) {
    let norm = libm::sqrt(row.iter().map(|&v| v as f64 * v as f64).sum::<f64>());
    if norm > 0.0 {
        for v in row.iter_mut() {
            *v = (*v as f64 / norm) as f32;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::matmul_tn;

    fn coder(act: Activation, seed: u64) -> SparseCoder {
        let mut c = SparseCoderConfig::sae(act, 6, 2, 0.1);
        c.k = Some(3);
        c.seed = seed;
        SparseCoder::new(c).unwrap()
    }

    fn random(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..rows * cols).map(|_| StandardNormal.sample(&mut rng)).collect();
        Tensor::new(vec![rows, cols], data).unwrap()
    }

    #[test]
    fn init_ties_encoder_to_decoder_transpose() {
        for act in [Activation::Relu, Activation::TopK, Activation::JumpRelu] {
            let c = coder(act, 3);
            let t = c.p("W_dec").transpose().unwrap();
            assert!(c.p("W_enc").bit_eq(&t));
            for i in 0..c.dict_size() {
                let n: f64 = c.p("W_dec").row(i).iter().map(|&v| (v as f64).powi(2)).sum();
                assert!((n.sqrt() - 1.0).abs() < 1e-6);
            }
        }
        let g = coder(Activation::Gated, 3);
        assert!(g.p("W_gate").bit_eq(&g.p("W_dec").transpose().unwrap()));
    }

    #[test]
    fn input_equal_to_decoder_bias_gives_no_latents() {
        for act in [Activation::Relu, Activation::TopK, Activation::JumpRelu, Activation::Gated] {
            let mut c = coder(act, 1);
            let b = random(1, 6, 9);
            c.params_mut().get_mut("b_dec").unwrap().data_mut().copy_from_slice(b.data());
            let f = c.encode(&Tensor::vcat(&[&b, &b]).unwrap()).unwrap();
            assert!(f.data().iter().all(|&v| v == 0.0), "{act:?}");
        }
    }

    #[test]
    fn topk_keeps_largest_positive_entries() {
        let mut cfg = SparseCoderConfig::sae(Activation::TopK, 4, 1, 0.0);
        cfg.k = Some(2);
        let mut params = ParamSet::new();
        params.push("W_enc", Tensor::eye(4));
        params.push("b_enc", Tensor::zeros(&[4]));
        params.push("W_dec", Tensor::eye(4));
        params.push("b_dec", Tensor::zeros(&[4]));
        let c = SparseCoder::from_params(cfg, params, 1.0, 1.0).unwrap();
        let f = c.encode(&Tensor::new(vec![1, 4], vec![3.0, 1.0, -1.0, 2.0]).unwrap()).unwrap();
        assert_eq!(f.data(), &[3.0, 0.0, 0.0, 2.0]);
        // Ties resolve to the lower index; fewer positives than k keeps them all.
        let f = c
            .encode(&Tensor::new(vec![2, 4], vec![1.0, 2.0, 2.0, 2.0, -1.0, 5.0, -2.0, -3.0]).unwrap())
            .unwrap();
        assert_eq!(f.data(), &[0.0, 2.0, 2.0, 0.0, 0.0, 5.0, 0.0, 0.0]);
    }

    #[test]
    fn decode_matches_matmul_oracle_bitwise() {
        let c = coder(Activation::Relu, 5);
        let f = random(7, 12, 2).map(|v| v.max(0.0));
        let x = c.decode(&f).unwrap();
        let mut want = matmul(&f, c.p("W_dec")).unwrap();
        add_row_bias(&mut want, c.p("b_dec")).unwrap();
        assert!(x.bit_eq(&want));
        let zero = c.decode(&Tensor::zeros(&[2, 12])).unwrap();
        assert!(zero.row(1).iter().zip(c.p("b_dec").data()).all(|(a, b)| a == b));
    }

    #[test]
    fn one_hot_latent_decodes_to_its_atom() {
        let c = coder(Activation::Relu, 8);
        let mut f = Tensor::zeros(&[1, 12]);
        f.data_mut()[4] = 2.5;
        let x = c.decode(&f).unwrap();
        for (got, &w) in x.data().iter().zip(c.p("W_dec").row(4)) {
            assert_eq!(*got, ((2.5f64 * w as f64) as f32));
        }
    }

    #[test]
    fn lossless_coder_reconstructs_bitwise() {
        let c = SparseCoder::lossless(5).unwrap();
        let a = random(9, 5, 4);
        assert!(c.reconstruct(&a).unwrap().bit_eq(&a));
    }

    #[test]
    fn latents_are_nonnegative_for_every_variant() {
        for act in [Activation::Relu, Activation::TopK, Activation::JumpRelu, Activation::Gated] {
            let c = coder(act, 11);
            let f = c.encode(&random(20, 6, 12)).unwrap();
            assert!(f.data().iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn normalization_scale_round_trips() {
        let a = random(16, 6, 1).scale(7.0);
        let s = unit_mean_squared_norm_scale(&a).unwrap();
        let scaled = a.scale(s);
        let msn: f64 = scaled.data().iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / 16.0;
        assert!((msn - 6.0).abs() < 1e-4);
        let mut c = SparseCoder::lossless(6).unwrap();
        c.set_scales(s, s).unwrap();
        assert!(c.reconstruct(&a).unwrap().max_abs_diff(&a) < 1e-4);
    }

    #[test]
    fn parallel_component_removal_is_orthogonal() {
        let c = coder(Activation::Relu, 2);
        let mut g = c.params().zeros_like();
        *g.get_mut("W_dec").unwrap() = random(12, 6, 3);
        c.remove_parallel_decoder_grad(&mut g).unwrap();
        let dots = matmul_tn(&c.p("W_dec").transpose().unwrap(), &g.get("W_dec").unwrap().transpose().unwrap()).unwrap();
        for i in 0..12 {
            assert!(dots.row(i)[i].abs() < 1e-6);
        }
    }

    #[test]
    fn rejects_wrong_input_width() {
        let c = coder(Activation::Relu, 0);
        assert!(matches!(c.encode(&Tensor::zeros(&[1, 5])), Err(Error::Dimension(_))));
        assert!(matches!(c.decode(&Tensor::zeros(&[1, 5])), Err(Error::Dimension(_))));
    }
}
