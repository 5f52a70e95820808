//! Dead-feature handling: firing statistics, ghost gradients and
//! resampling from high-loss examples.

use alloc::collections::BinaryHeap;
use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Ordering;

use crate::coder::{Activation, Architecture, LossOutput, ParamSet, SparseCoder};
use crate::error::dim_err;
use crate::numerics::AdamState;
use crate::{Error, Result, Tensor};

/// Decay of the rolling firing frequency per step.
const FREQUENCY_DECAY: f64 = 0.99;

/// Per-feature firing statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureVitals {
    /// Step at which each feature last fired (or was born/resampled).
    pub last_fired: Vec<usize>,
    pub fire_count: Vec<u64>,
    /// Exponential moving average of the per-step firing rate.
    pub frequency: Vec<f64>,
    pub dead_window: usize,
}

impl FeatureVitals {
    pub fn new(dict: usize, dead_window: usize) -> Self {
        Self {
            last_fired: vec![0; dict],
            fire_count: vec![0; dict],
            frequency: vec![0.0; dict],
            dead_window,
        }
    }

    /// Records the latents of the batch used at `step`.
    pub fn update(&mut self, latents: &Tensor, step: usize) -> Result<()> {
        let (rows, d) = latents.dims2()?;
        if d != self.last_fired.len() {
            return Err(dim_err!("latent width {} != dictionary {}", d, self.last_fired.len()));
        }
        let mut counts = vec![0u64; d];
        for i in 0..rows {
            for (c, &v) in counts.iter_mut().zip(latents.row(i)) {
                if v > 0.0 {
                    *c += 1;
                }
            }
        }
        for (j, &c) in counts.iter().enumerate() {
            if c > 0 {
                self.last_fired[j] = step;
                self.fire_count[j] += c;
            }
            let rate = c as f64 / rows.max(1) as f64;
            self.frequency[j] = FREQUENCY_DECAY * self.frequency[j] + (1.0 - FREQUENCY_DECAY) * rate;
        }
        Ok(())
    }

    pub fn is_dead(&self, feature: usize, step: usize) -> bool {
        step.saturating_sub(self.last_fired[feature]) > self.dead_window
    }

    pub fn dead(&self, step: usize) -> Vec<usize> {
        (0..self.last_fired.len()).filter(|&j| self.is_dead(j, step)).collect()
    }

    pub fn alive_fraction(&self, step: usize) -> f64 {
        let d = self.last_fired.len();
        if d == 0 {
            return 0.0;
        }
        (d - self.dead(step).len()) as f64 / d as f64
    }

    pub fn revive(&mut self, feature: usize, step: usize) {
        self.last_fired[feature] = step;
        self.frequency[feature] = 0.0;
    }
}

#[derive(Clone, Debug)]
struct Candidate {
    loss: f64,
    seq: u64,
    input: Vec<f32>,
    target: Vec<f32>,
}

impl PartialEq for Candidate {
    fn eq(&self, o: &Self) -> bool {
        self.cmp(o) == Ordering::Equal
    }
}
impl Eq for Candidate {}
impl PartialOrd for Candidate {
    fn partial_cmp(&self, o: &Self) -> Option<Ordering> {
        Some(self.cmp(o))
    }
}
impl Ord for Candidate {
    /// "Greater" means "kept longer": higher loss, then earlier arrival.
    fn cmp(&self, o: &Self) -> Ordering {
        self.loss.total_cmp(&o.loss).then(o.seq.cmp(&self.seq))
    }
}

/// The highest-loss examples seen since the last resample.
#[derive(Clone, Debug)]
pub struct HighLossBuffer {
    capacity: usize,
    /// Min-heap on the keep order, so the weakest entry is on top.
    heap: BinaryHeap<core::cmp::Reverse<Candidate>>,
    seq: u64,
}

impl HighLossBuffer {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            heap: BinaryHeap::new(),
            seq: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }

    pub fn clear(&mut self) {
        self.heap.clear();
    }

    /// Offers each row with its squared reconstruction error.
    pub fn offer(&mut self, losses: &[f64], inputs: &Tensor, targets: &Tensor) {
        for (i, &loss) in losses.iter().enumerate() {
            self.seq += 1;
            if self.capacity == 0 {
                continue;
            }
            if self.heap.len() == self.capacity {
                let weakest = &self.heap.peek().expect("full heap").0;
                if loss.total_cmp(&weakest.loss) != Ordering::Greater {
                    continue;
                }
                self.heap.pop();
            }
            self.heap.push(core::cmp::Reverse(Candidate {
                loss,
                seq: self.seq,
                input: inputs.row(i).to_vec(),
                target: targets.row(i).to_vec(),
            }));
        }
    }

    /// `(input, target)` rows, highest loss first.
    pub fn ranked(&self) -> Vec<(&[f32], &[f32])> {
        let mut v: Vec<&Candidate> = self.heap.iter().map(|r| &r.0).collect();
        v.sort_by(|a, b| b.cmp(a));
        v.into_iter().map(|c| (c.input.as_slice(), c.target.as_slice())).collect()
    }
}

/// Whether the coder has the single-encoder layout ghost grads and
/// resampling operate on.
pub fn supports_dead_feature_tools(coder: &SparseCoder) -> bool {
    coder.config().architecture != Architecture::Crosscoder && coder.config().activation != Activation::Gated
}

/// Auxiliary loss that routes gradient only to `dead` features: the
/// detached residual is reconstructed from `exp` of the dead features'
/// pre-activations, rescaled to half the residual norm, and the resulting
/// error is weighted to the magnitude of the main reconstruction error.
pub fn ghost_grad_term(coder: &SparseCoder, out: &LossOutput, dead: &[usize]) -> Result<(f64, ParamSet)> {
    let mut grads = coder.params().zeros_like();
    if dead.is_empty() {
        return Ok((0.0, grads));
    }
    if !supports_dead_feature_tools(coder) {
        return Err(Error::Unsupported("ghost gradients for this coder layout".into()));
    }
    let fw = &out.forward;
    let (b, m) = out.target.dims2()?;
    let w_dec = coder.params().get("W_dec")?;
    let mut loss = 0.0f64;
    let mut g_wdec = vec![0.0f64; dead.len() * m];
    let mut dz = vec![0.0f64; b * dead.len()];
    for r in 0..b {
        let resid: Vec<f64> = out
            .target
            .row(r)
            .iter()
            .zip(fw.recon.row(r))
            .map(|(&y, &x)| y as f64 - x as f64)
            .collect();
        let h: Vec<f64> = dead.iter().map(|&j| libm::exp(fw.pre.row(r)[j] as f64)).collect();
        let mut ghost = vec![0.0f64; m];
        for (k, &j) in dead.iter().enumerate() {
            for (g, &w) in ghost.iter_mut().zip(w_dec.row(j)) {
                *g += h[k] * w as f64;
            }
        }
        let rn = libm::sqrt(resid.iter().map(|v| v * v).sum::<f64>());
        let gn = libm::sqrt(ghost.iter().map(|v| v * v).sum::<f64>());
        let scale = rn / (2.0 * gn + 1e-6);
        let diff: Vec<f64> = ghost.iter().zip(&resid).map(|(g, r)| scale * g - r).collect();
        let ghost_err: f64 = diff.iter().map(|v| v * v).sum();
        let weight = rn * rn / (ghost_err + 1e-6);
        loss += weight * ghost_err / b as f64;
        // d loss / d ghost = (2/B)·weight·scale·diff
        let c = 2.0 * weight * scale / b as f64;
        for (k, &j) in dead.iter().enumerate() {
            let wj = w_dec.row(j);
            let mut dh = 0.0;
            for (t, d) in diff.iter().enumerate() {
                g_wdec[k * m + t] += c * h[k] * d;
                dh += c * d * wj[t] as f64;
            }
            dz[r * dead.len() + k] = dh * h[k];
        }
    }
    if !loss.is_finite() {
        return Err(Error::Numeric("ghost gradient loss".into()));
    }
    let n = fw.centered.shape()[1];
    let dict = coder.dict_size();
    {
        let ge = grads.get_mut("W_enc")?;
        for i in 0..n {
            for (k, &j) in dead.iter().enumerate() {
                let mut acc = 0.0f64;
                for r in 0..b {
                    acc += fw.centered.row(r)[i] as f64 * dz[r * dead.len() + k];
                }
                ge.data_mut()[i * dict + j] = acc as f32;
            }
        }
    }
    {
        let gb = grads.get_mut("b_enc")?;
        for (k, &j) in dead.iter().enumerate() {
            gb.data_mut()[j] = (0..b).map(|r| dz[r * dead.len() + k]).sum::<f64>() as f32;
        }
    }
    {
        let gd = grads.get_mut("W_dec")?;
        for (k, &j) in dead.iter().enumerate() {
            for (o, &v) in gd.row_mut(j).iter_mut().zip(&g_wdec[k * m..(k + 1) * m]) {
                *o = v as f32;
            }
        }
    }
    Ok((loss, grads))
}

/// Outcome of one resampling pass.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ResampleReport {
    pub resampled: Vec<usize>,
    /// Why the pass did nothing, if it was skipped.
    pub skipped: Option<&'static str>,
}

/// Reinitializes every dead feature from the high-loss buffer: the
/// decoder row becomes the normalized target example, the encoder column
/// the normalized input example scaled to 0.2× the mean alive encoder
/// norm, the encoder bias 0. Adam moments of touched entries are reset.
pub fn resample_dead(
    coder: &mut SparseCoder,
    vitals: &mut FeatureVitals,
    buffer: &HighLossBuffer,
    optim: &mut [AdamState],
    step: usize,
) -> Result<ResampleReport> {
    let dead = vitals.dead(step);
    if dead.is_empty() {
        return Ok(ResampleReport::default());
    }
    let skip = |why: &'static str| {
        log::warn!("resampling skipped: {why}");
        Ok(ResampleReport {
            resampled: Vec::new(),
            skipped: Some(why),
        })
    };
    if !supports_dead_feature_tools(coder) {
        return skip("coder layout has no single encoder");
    }
    let dict = coder.dict_size();
    let alive: Vec<usize> = (0..dict).filter(|j| !dead.contains(j)).collect();
    if alive.is_empty() {
        return skip("no alive features");
    }
    let examples = buffer.ranked();
    if examples.is_empty() {
        return skip("no buffered examples");
    }
    let idx = |name: &str| coder.params().index_of(name).expect("standard layout");
    let (i_wenc, i_benc, i_wdec) = (idx("W_enc"), idx("b_enc"), idx("W_dec"));
    let w_enc = coder.params().get("W_enc")?;
    let n = w_enc.shape()[0];
    let col_norm = |j: usize| -> f64 {
        libm::sqrt((0..n).map(|i| { let w = w_enc.data()[i * dict + j] as f64; w * w }).sum::<f64>())
    };
    let mean_alive = alive.iter().map(|&j| col_norm(j)).sum::<f64>() / alive.len() as f64;
    let target_norm = 0.2 * mean_alive;

    let unit = |v: &[f32]| -> Option<Vec<f64>> {
        let nrm = libm::sqrt(v.iter().map(|&x| x as f64 * x as f64).sum::<f64>());
        (nrm > 0.0).then(|| v.iter().map(|&x| x as f64 / nrm).collect())
    };
    let mut done = Vec::with_capacity(dead.len());
    let m = coder.d_out();
    for (k, &j) in dead.iter().enumerate() {
        let (input, target) = examples[k % examples.len()];
        let (Some(enc_dir), Some(dec_dir)) = (unit(input), unit(target)) else {
            continue;
        };
        let params = coder.params_mut().tensors_mut();
        for (i, v) in enc_dir.iter().enumerate() {
            params[i_wenc].data_mut()[i * dict + j] = (v * target_norm) as f32;
        }
        params[i_benc].data_mut()[j] = 0.0;
        for (o, v) in params[i_wdec].row_mut(j).iter_mut().zip(&dec_dir) {
            *o = *v as f32;
        }
        optim[i_wenc].reset_indices((0..n).map(|i| i * dict + j));
        optim[i_benc].reset_indices([j]);
        optim[i_wdec].reset_range(j * m..(j + 1) * m);
        vitals.revive(j, step);
        done.push(j);
    }
    Ok(ResampleReport {
        resampled: done,
        skipped: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dead_means_older_than_window() {
        let mut v = FeatureVitals::new(3, 10);
        let f = Tensor::new(vec![1, 3], vec![1.0, 0.0, 0.0]).unwrap();
        v.update(&f, 5).unwrap();
        assert!(v.dead(10).is_empty());
        assert_eq!(v.dead(11), vec![1, 2]);
        assert_eq!(v.dead(16), vec![0, 1, 2]);
        assert!((v.alive_fraction(11) - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn buffer_keeps_highest_losses() {
        let mut b = HighLossBuffer::new(2);
        let x = Tensor::new(vec![4, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        b.offer(&[0.5, 3.0, 1.0, 3.0], &x, &x);
        let r = b.ranked();
        assert_eq!(r.len(), 2);
        // Equal losses keep the earlier example first.
        assert_eq!((r[0].0[0], r[1].0[0]), (2.0, 4.0));
    }
}
