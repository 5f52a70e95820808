use alloc::vec;
use alloc::vec::Vec;

use crate::error::dim_err;
use crate::vit::TokenKind;
use crate::{Error, Result, Tensor};

/// Nonzero latents per row: entries strictly above `threshold`.
pub fn l0_per_row(f: &Tensor, threshold: f32) -> Result<Vec<usize>> {
    let (rows, _) = f.dims2()?;
    Ok((0..rows)
        .map(|i| f.row(i).iter().filter(|&&v| v > threshold).count())
        .collect())
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct L0Stats {
    pub mean_all: f64,
    /// `None` when no CLS rows were seen.
    pub mean_cls: Option<f64>,
    pub mean_spatial: Option<f64>,
    /// CLS L0 divided by the number of spatial patches.
    pub cls_per_patch: Option<f64>,
}

/// Running L0 sums split by token kind.
#[derive(Clone, Debug, Default)]
pub struct L0Accumulator {
    threshold: f32,
    sum: [u64; 2],
    rows: [u64; 2],
}

impl L0Accumulator {
    pub fn new(threshold: f32) -> Self {
        Self {
            threshold,
            ..Self::default()
        }
    }

    pub fn observe(&mut self, f: &Tensor, kinds: &[TokenKind]) -> Result<()> {
        let counts = l0_per_row(f, self.threshold)?;
        if counts.len() != kinds.len() {
            return Err(dim_err!("{} latent rows but {} token kinds", counts.len(), kinds.len()));
        }
        for (c, k) in counts.into_iter().zip(kinds) {
            let slot = match k {
                TokenKind::Cls => 0,
                TokenKind::Spatial => 1,
            };
            self.sum[slot] += c as u64;
            self.rows[slot] += 1;
        }
        Ok(())
    }

    pub fn finish(&self, n_spatial_patches: usize) -> L0Stats {
        let mean = |s: u64, r: u64| if r == 0 { None } else { Some(s as f64 / r as f64) };
        let total_rows = self.rows[0] + self.rows[1];
        let mean_cls = mean(self.sum[0], self.rows[0]);
        L0Stats {
            mean_all: mean(self.sum[0] + self.sum[1], total_rows).unwrap_or(0.0),
            mean_cls,
            mean_spatial: mean(self.sum[1], self.rows[1]),
            cls_per_patch: mean_cls
                .filter(|_| n_spatial_patches > 0)
                .map(|m| m / n_spatial_patches as f64),
        }
    }
}

pub fn l0_stats(f: &Tensor, kinds: &[TokenKind], n_spatial_patches: usize, threshold: f32) -> Result<L0Stats> {
    let mut acc = L0Accumulator::new(threshold);
    acc.observe(f, kinds)?;
    Ok(acc.finish(n_spatial_patches))
}

/// Pooled explained variance over any number of batches. Per-dimension
/// means and centered second moments are merged with Welford updates.
#[derive(Clone, Debug, Default)]
pub struct EvAccumulator {
    n: u64,
    mean: Vec<f64>,
    m2: Vec<f64>,
    err: f64,
}

impl EvAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn observe(&mut self, a: &Tensor, recon: &Tensor) -> Result<()> {
        a.same_shape(recon, "explained variance")?;
        let (rows, cols) = a.dims2()?;
        if self.mean.is_empty() {
            self.mean = vec![0.0; cols];
            self.m2 = vec![0.0; cols];
        } else if self.mean.len() != cols {
            return Err(dim_err!("width {} after {}", cols, self.mean.len()));
        }
        for i in 0..rows {
            self.n += 1;
            let n = self.n as f64;
            for (j, (&x, &y)) in a.row(i).iter().zip(recon.row(i)).enumerate() {
                let x = x as f64;
                let d = x - self.mean[j];
                self.mean[j] += d / n;
                self.m2[j] += d * (x - self.mean[j]);
                let e = x - y as f64;
                self.err += e * e;
            }
        }
        Ok(())
    }

    /// Percentage; undefined when the inputs have no variance.
    pub fn finish(&self) -> Result<f64> {
        let var: f64 = self.m2.iter().sum();
        if !(var > 0.0) {
            return Err(Error::Undefined("explained variance of zero-variance inputs".into()));
        }
        Ok(100.0 * (1.0 - self.err / var))
    }
}

pub fn explained_variance(a: &Tensor, recon: &Tensor) -> Result<f64> {
    let mut acc = EvAccumulator::new();
    acc.observe(a, recon)?;
    acc.finish()
}

/// Per-example cross-entropy of integer labels under softmax(logits).
pub fn per_example_ce(logits: &Tensor, labels: &[usize]) -> Result<Vec<f64>> {
    let (rows, classes) = logits.dims2()?;
    if labels.len() != rows {
        return Err(dim_err!("{} logit rows but {} labels", rows, labels.len()));
    }
    let mut out = Vec::with_capacity(rows);
    for (i, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(dim_err!("label {} out of {} classes", y, classes));
        }
        let row = logits.row(i);
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
        let lse = max + libm::log(row.iter().map(|&v| libm::exp(v as f64 - max)).sum::<f64>());
        out.push(lse - row[y] as f64);
    }
    Ok(out)
}

pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let ce = per_example_ce(logits, labels)?;
    if ce.is_empty() {
        return Err(Error::Undefined("cross-entropy of an empty batch".into()));
    }
    Ok(ce.iter().sum::<f64>() / ce.len() as f64)
}

/// Denominators smaller than this make the recovered fraction meaningless.
pub const DEGENERATE_CE_GAP: f64 = 1e-6;

/// `100·(CE_zero − CE_recon)/(CE_zero − CE_clean)`, or `None` when the
/// ablation barely moves the loss.
pub fn pct_ce_recovered(clean: f64, recon: f64, zero: f64) -> Option<f64> {
    let den = zero - clean;
    if den.abs() < DEGENERATE_CE_GAP {
        None
    } else {
        Some(100.0 * ((zero - recon) / den))
    }
}

pub fn cosine(a: &[f32], b: &[f32]) -> Option<f64> {
    let (mut ab, mut aa, mut bb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x as f64, y as f64);
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    if aa == 0.0 || bb == 0.0 {
        None
    } else {
        Some(ab / libm::sqrt(aa * bb))
    }
}

/// Mean cosine over row pairs; pairs containing a zero vector are skipped
/// and counted.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct CosineAccumulator {
    sum: f64,
    pub count: u64,
    pub skipped: u64,
}

impl CosineAccumulator {
    pub fn observe(&mut self, a: &Tensor, b: &Tensor) -> Result<()> {
        a.same_shape(b, "cosine")?;
        let (rows, _) = a.dims2()?;
        for i in 0..rows {
            self.observe_pair(a.row(i), b.row(i));
        }
        Ok(())
    }

    pub fn observe_pair(&mut self, a: &[f32], b: &[f32]) {
        match cosine(a, b) {
            Some(c) => {
                self.sum += c;
                self.count += 1;
            }
            None => self.skipped += 1,
        }
    }

    pub fn mean(&self) -> Option<f64> {
        (self.count > 0).then(|| self.sum / self.count as f64)
    }
}

/// Which dictionary features have fired at least once.
#[derive(Clone, Debug, PartialEq)]
pub struct AliveTracker {
    fired: Vec<bool>,
    threshold: f32,
}

impl AliveTracker {
    pub fn new(dict: usize) -> Self {
        Self {
            fired: vec![false; dict],
            threshold: 0.0,
        }
    }

    pub fn observe(&mut self, f: &Tensor) -> Result<()> {
        let (rows, d) = f.dims2()?;
        if d != self.fired.len() {
            return Err(dim_err!("latent width {} != dictionary {}", d, self.fired.len()));
        }
        for i in 0..rows {
            for (flag, &v) in self.fired.iter_mut().zip(f.row(i)) {
                *flag |= v > self.threshold;
            }
        }
        Ok(())
    }

    pub fn alive_count(&self) -> usize {
        self.fired.iter().filter(|&&b| b).count()
    }

    pub fn pct_alive(&self) -> f64 {
        if self.fired.is_empty() {
            return 0.0;
        }
        100.0 * self.alive_count() as f64 / self.fired.len() as f64
    }

    pub fn fired(&self) -> &[bool] {
        &self.fired
    }
}

/// Percentage of features that fire anywhere in the stream.
pub fn alive_features<'a>(stream: impl IntoIterator<Item = &'a Tensor>, dict: usize) -> Result<f64> {
    let mut t = AliveTracker::new(dict);
    for f in stream {
        t.observe(f)?;
    }
    Ok(t.pct_alive())
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Activating {
    pub example: u64,
    pub token: u32,
    pub value: f32,
}

impl Activating {
    /// Ranking order: larger value first, then lower example id, then
    /// lower token index.
    fn outranks(&self, other: &Activating) -> bool {
        match self.value.total_cmp(&other.value) {
            core::cmp::Ordering::Less => false,
            core::cmp::Ordering::Greater => true,
            core::cmp::Ordering::Equal => (self.example, self.token) < (other.example, other.token),
        }
    }
}

/// Bounded top-k of activating tokens for every feature.
#[derive(Clone, Debug, PartialEq)]
pub struct MaxActivatingSet {
    k: usize,
    per_feature: Vec<Vec<Activating>>,
}

impl MaxActivatingSet {
    pub fn new(dict: usize, k: usize) -> Result<Self> {
        if k == 0 {
            return Err(crate::error::config_err!("max-activating k must be at least 1"));
        }
        Ok(Self {
            k,
            per_feature: vec![Vec::new(); dict],
        })
    }

    /// Offers every positive entry of `f`; row `i` belongs to
    /// `(examples[i], tokens[i])`.
    pub fn observe(&mut self, f: &Tensor, examples: &[u64], tokens: &[u32]) -> Result<()> {
        let (rows, d) = f.dims2()?;
        if d != self.per_feature.len() || examples.len() != rows || tokens.len() != rows {
            return Err(dim_err!("max-activating batch does not match ids or dictionary"));
        }
        for i in 0..rows {
            for (j, &v) in f.row(i).iter().enumerate() {
                if v > 0.0 {
                    self.offer(
                        j,
                        Activating {
                            example: examples[i],
                            token: tokens[i],
                            value: v,
                        },
                    );
                }
            }
        }
        Ok(())
    }

    fn offer(&mut self, feature: usize, item: Activating) {
        let list = &mut self.per_feature[feature];
        if list.len() == self.k && !item.outranks(&list[self.k - 1]) {
            return;
        }
        let pos = list.iter().position(|e| item.outranks(e)).unwrap_or(list.len());
        list.insert(pos, item);
        list.truncate(self.k);
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn feature(&self, i: usize) -> &[Activating] {
        &self.per_feature[i]
    }

    pub fn features(&self) -> &[Vec<Activating>] {
        &self.per_feature
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vit::TokenKind::{Cls, Spatial};

    fn t(rows: usize, cols: usize, v: &[f32]) -> Tensor {
        Tensor::new(vec![rows, cols], v.to_vec()).unwrap()
    }

    #[test]
    fn l0_counts_by_hand() {
        let f = t(3, 5, &[1., 2., 0., 0., 0., 0., 0., 0., 0., 0., 1., 1., 1., 1., 1.]);
        let s = l0_stats(&f, &[Cls, Spatial, Spatial], 2, 0.0).unwrap();
        assert!((s.mean_all - 7.0 / 3.0).abs() < 1e-12);
        assert_eq!(s.mean_cls, Some(2.0));
        assert_eq!(s.mean_spatial, Some(2.5));
        assert_eq!(s.cls_per_patch, Some(1.0));
        let z = l0_stats(&Tensor::zeros(&[2, 5]), &[Cls, Spatial], 1, 0.0).unwrap();
        assert_eq!((z.mean_all, z.mean_cls, z.mean_spatial), (0.0, Some(0.0), Some(0.0)));
    }

    #[test]
    fn explained_variance_baselines() {
        let a = t(3, 2, &[1., 2., 3., 5., 2., -1.]);
        assert_eq!(explained_variance(&a, &a).unwrap(), 100.0);
        let mean = t(3, 2, &[2., 2., 2., 2., 2., 2.]);
        assert!(explained_variance(&a, &mean).unwrap().abs() < 1e-12);
        assert!(matches!(explained_variance(&mean, &a), Err(Error::Undefined(_))));
    }

    #[test]
    fn ev_pools_across_batches() {
        let a = t(4, 2, &[1., 2., 3., 5., 2., -1., 0., 4.]);
        let r = a.map(|v| v * 0.9 + 0.1);
        let whole = explained_variance(&a, &r).unwrap();
        let mut acc = EvAccumulator::new();
        for i in 0..4 {
            acc.observe(&a.select_rows(&[i]).unwrap(), &r.select_rows(&[i]).unwrap()).unwrap();
        }
        assert!((acc.finish().unwrap() - whole).abs() < 1e-10);
    }

    #[test]
    fn ce_recovered_special_cases() {
        assert_eq!(pct_ce_recovered(1.0, 1.0, 3.0), Some(100.0));
        assert_eq!(pct_ce_recovered(2.0, 2.5, 2.0 + 1e-8), None);
        assert_eq!(pct_ce_recovered(1.0, 3.0, 3.0), Some(0.0));
    }

    #[test]
    fn uniform_logits_give_log_classes() {
        let z = Tensor::zeros(&[3, 1000]);
        let ce = cross_entropy(&z, &[0, 5, 999]).unwrap();
        assert!((ce - libm::log(1000.0)).abs() < 1e-12);
    }

    #[test]
    fn cosine_extremes_and_skips() {
        let a = t(2, 3, &[1., 2., 3., 0., 0., 0.]);
        let mut acc = CosineAccumulator::default();
        acc.observe(&a, &a).unwrap();
        assert_eq!((acc.count, acc.skipped), (1, 1));
        assert!((acc.mean().unwrap() - 1.0).abs() < 1e-12);
        let mut neg = CosineAccumulator::default();
        neg.observe(&a, &a.scale(-1.0)).unwrap();
        assert!((neg.mean().unwrap() + 1.0).abs() < 1e-12);
    }

    #[test]
    fn alive_counts_fired_features() {
        let f = t(2, 8, &[1., 0., 0., 0., 0., 0., 0., 0., 0., 0., 0., 2., 0., 0., 0., 0.]);
        assert_eq!(alive_features([&f], 8).unwrap(), 25.0);
        assert_eq!(alive_features([&Tensor::zeros(&[3, 8])], 8).unwrap(), 0.0);
    }

    #[test]
    fn max_activating_keeps_every_instance_below_k() {
        let mut m = MaxActivatingSet::new(2, 5).unwrap();
        let f = t(2, 2, &[1., 0., 3., 0.]);
        m.observe(&f, &[7, 7], &[0, 1]).unwrap();
        assert_eq!(m.feature(0).len(), 2);
        assert_eq!(m.feature(0)[0].value, 3.0);
        assert!(m.feature(1).is_empty());
    }
}
