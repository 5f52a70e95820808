//! Labeled image sets and the seeded synthetic generator.

use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, dim_err};
use crate::vit::N_CHANNELS;
use crate::{Result, Tensor};

/// Images `[N×H×W×3]` with one integer label each.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    images: Tensor,
    labels: Vec<usize>,
}

/// Parameters of the synthetic generator; the dataset is a pure function
/// of this value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_images: usize,
    pub image_size: usize,
    pub n_classes: usize,
    pub seed: u64,
    #[serde(default = "default_noise")]
    pub noise: f32,
}

fn default_noise() -> f32 {
    0.1
}

impl SyntheticSpec {
    pub fn new(n_images: usize, image_size: usize, n_classes: usize, seed: u64) -> Self {
        Self {
            n_images,
            image_size,
            n_classes,
            seed,
            noise: default_noise(),
        }
    }
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>) -> Result<Self> {
        let s = images.shape();
        if s.len() != 4 || s[3] != N_CHANNELS || s[1] != s[2] {
            return Err(dim_err!("images must be [N×S×S×3], got {:?}", s));
        }
        if s[0] != labels.len() {
            return Err(dim_err!("{} images but {} labels", s[0], labels.len()));
        }
        Ok(Self { images, labels })
    }

    /// Class-conditional oriented gratings with per-image phase and pixel
    /// noise. Label of image `i` is `i mod n_classes`; image `i` depends
    /// only on `(seed, i)`.
    pub fn synthetic(spec: &SyntheticSpec) -> Result<Self> {
        if spec.n_classes == 0 || spec.image_size == 0 {
            return Err(config_err!("synthetic dataset needs classes and a positive image size"));
        }
        if !(spec.noise >= 0.0) {
            return Err(config_err!("noise must be non-negative"));
        }
        let s = spec.image_size;
        let per = s * s * N_CHANNELS;
        let mut data = Vec::with_capacity(spec.n_images * per);
        let mut labels = Vec::with_capacity(spec.n_images);
        let noise = Normal::new(0.0f32, spec.noise.max(f32::MIN_POSITIVE)).expect("positive std");
        let phase_dist = Uniform::new(0.0f64, core::f64::consts::TAU).expect("valid range");
        for i in 0..spec.n_images {
            let class = i % spec.n_classes;
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
            let angle = core::f64::consts::PI * (class % 8) as f64 / 8.0;
            let freq = (1 + (class / 8) % 4) as f64 * core::f64::consts::TAU / s as f64;
            let tint = class / 32;
            let phase = phase_dist.sample(&mut rng);
            let (ca, sa) = (libm::cos(angle), libm::sin(angle));
            for y in 0..s {
                for x in 0..s {
                    let u = (x as f64 * ca + y as f64 * sa) * freq + phase;
                    for c in 0..N_CHANNELS {
                        let shift = ((tint + c) % 3) as f64 * core::f64::consts::FRAC_PI_3;
                        let v = 0.5 + 0.4 * libm::sin(u + shift);
                        let n = if spec.noise > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                        data.push(v as f32 + n);
                    }
                }
            }
            labels.push(class);
        }
        Self::new(Tensor::new(alloc::vec![spec.n_images, s, s, N_CHANNELS], data)?, labels)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_size(&self) -> usize {
        self.images.shape()[1]
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Images `[start, end)` and their labels.
    pub fn slice(&self, start: usize, end: usize) -> Result<(Tensor, &[usize])> {
        if start > end || end > self.len() {
            return Err(dim_err!("image range {}..{} out of {}", start, end, self.len()));
        }
        let per = self.images.numel() / self.len().max(1);
        let s = self.image_size();
        let t = Tensor::new(
            alloc::vec![end - start, s, s, N_CHANNELS],
            self.images.data()[start * per..end * per].to_vec(),
        )?;
        Ok((t, &self.labels[start..end]))
    }

    /// Consecutive batches of at most `size` images, in dataset order.
    pub fn batches(&self, size: usize) -> impl Iterator<Item = Result<(Tensor, &[usize])>> + '_ {
        let size = size.max(1);
        (0..self.len().div_ceil(size)).map(move |k| self.slice(k * size, ((k + 1) * size).min(self.len())))
    }

    /// Per-channel mean and standard deviation over all pixels.
    pub fn channel_stats(&self) -> ([f32; N_CHANNELS], [f32; N_CHANNELS]) {
        let mut sum = [0.0f64; N_CHANNELS];
        let mut sq = [0.0f64; N_CHANNELS];
        for px in self.images.data().chunks_exact(N_CHANNELS) {
            for c in 0..N_CHANNELS {
                sum[c] += px[c] as f64;
                sq[c] += px[c] as f64 * px[c] as f64;
            }
        }
        let n = (self.images.numel() / N_CHANNELS).max(1) as f64;
        let mut mean = [0.0f32; N_CHANNELS];
        let mut std = [0.0f32; N_CHANNELS];
        for c in 0..N_CHANNELS {
            let m = sum[c] / n;
            mean[c] = m as f32;
            std[c] = libm::sqrt((sq[c] / n - m * m).max(0.0)) as f32;
        }
        (mean, std)
    }

    /// `(x − mean)/std` per channel. Zero-deviation channels are only
    /// centered.
    pub fn normalize(&mut self, mean: [f32; N_CHANNELS], std: [f32; N_CHANNELS]) {
        for px in self.images.data_mut().chunks_exact_mut(N_CHANNELS) {
            for c in 0..N_CHANNELS {
                let d = if std[c] > 0.0 { std[c] } else { 1.0 };
                px[c] = (px[c] - mean[c]) / d;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_is_a_pure_function_of_the_spec() {
        let spec = SyntheticSpec::new(6, 8, 3, 42);
        let a = Dataset::synthetic(&spec).unwrap();
        let b = Dataset::synthetic(&spec).unwrap();
        assert!(a.images().bit_eq(b.images()));
        assert_eq!(a.labels(), &[0, 1, 2, 0, 1, 2]);
        // A longer set shares its prefix.
        let c = Dataset::synthetic(&SyntheticSpec::new(9, 8, 3, 42)).unwrap();
        assert!(c.slice(0, 6).unwrap().0.bit_eq(a.images()));
        let d = Dataset::synthetic(&SyntheticSpec::new(6, 8, 3, 43)).unwrap();
        assert!(!d.images().bit_eq(a.images()));
    }

    #[test]
    fn batches_cover_every_image_once() {
        let ds = Dataset::synthetic(&SyntheticSpec::new(7, 4, 2, 1)).unwrap();
        let sizes: Vec<usize> = ds.batches(3).map(|b| b.unwrap().1.len()).collect();
        assert_eq!(sizes, [3, 3, 1]);
    }

    #[test]
    fn normalization_centers_channels() {
        let mut ds = Dataset::synthetic(&SyntheticSpec::new(4, 8, 2, 5)).unwrap();
        let (m, s) = ds.channel_stats();
        ds.normalize(m, s);
        let (m2, s2) = ds.channel_stats();
        for c in 0..N_CHANNELS {
            assert!(m2[c].abs() < 1e-4);
            assert!((s2[c] - 1.0).abs() < 1e-3);
        }
    }
}
