use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use super::config::{lr_at, TrainConfig};
use super::dead::{ghost_grad_term, resample_dead, supports_dead_feature_tools, FeatureVitals, HighLossBuffer};
use super::source::BatchSource;
use crate::coder::{unit_mean_squared_norm_scale, Architecture, Normalization, SparseCoder};
use crate::error::{config_err, dim_err};
use crate::eval::{explained_variance, l0_per_row};
use crate::numerics::{adam_step, AdamState};
use crate::{Error, Result, Tensor};

/// Rows used to estimate the normalization scales.
const SCALE_ESTIMATE_ROWS: usize = 4096;

/// One line of the per-step log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub mse: f64,
    /// Unweighted sparsity penalty.
    pub l1: f64,
    pub l0_mean: f64,
    pub alive_frac: f64,
}

/// Held-out rows for early stopping and final metrics.
#[derive(Clone, Debug)]
pub struct Validation {
    pub inputs: Tensor,
    pub targets: Tensor,
}

impl Validation {
    pub fn new(inputs: Tensor, targets: Tensor) -> Result<Self> {
        if inputs.dims2()?.0 != targets.dims2()?.0 {
            return Err(dim_err!("validation inputs and targets differ in rows"));
        }
        Ok(Self { inputs, targets })
    }

    /// Autoencoder validation: targets equal inputs.
    pub fn autoencoder(inputs: Tensor) -> Result<Self> {
        Self::new(inputs.clone(), inputs)
    }
}

/// Reconstruction quality of a coder on held-out rows.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeldOutMetrics {
    pub explained_variance: f64,
    pub mse: f64,
    pub l0_mean: f64,
}

pub fn held_out_metrics(coder: &SparseCoder, val: &Validation) -> Result<HeldOutMetrics> {
    let fw = coder.forward(&val.inputs)?;
    let recon = coder.reconstruct(&val.inputs)?;
    let (rows, _) = recon.dims2()?;
    let mse = recon
        .data()
        .iter()
        .zip(val.targets.data())
        .map(|(&a, &b)| {
            let e = a as f64 - b as f64;
            e * e
        })
        .sum::<f64>()
        / rows.max(1) as f64;
    let l0 = l0_per_row(&fw.latents, 0.0)?;
    Ok(HeldOutMetrics {
        explained_variance: explained_variance(&val.targets, &recon)?,
        mse,
        l0_mean: l0.iter().sum::<usize>() as f64 / rows.max(1) as f64,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResampleEvent {
    pub step: usize,
    pub features: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub coder: SparseCoder,
    pub log: Vec<StepRecord>,
    pub steps_run: usize,
    /// Step at which early stopping fired.
    pub stopped_at: Option<usize>,
    /// `(step, explained variance)` of every validation pass.
    pub validation: Vec<(usize, f64)>,
    pub resamples: Vec<ResampleEvent>,
    pub vitals: FeatureVitals,
}

/// A run that aborted; `snapshot` holds the coder as it was before the
/// failing step when the failure happened mid-run.
#[derive(Debug)]
pub struct TrainFailure {
    pub error: Error,
    pub step: usize,
    pub snapshot: Option<SparseCoder>,
    pub log: Vec<StepRecord>,
}

impl From<Error> for TrainFailure {
    fn from(error: Error) -> Self {
        Self {
            error,
            step: 0,
            snapshot: None,
            log: Vec::new(),
        }
    }
}

impl fmt::Display for TrainFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "training failed at step {}: {}", self.step, self.error)
    }
}

fn mean_l0(latents: &Tensor) -> Result<f64> {
    let l0 = l0_per_row(latents, 0.0)?;
    Ok(l0.iter().sum::<usize>() as f64 / l0.len().max(1) as f64)
}

/// Sets the coder's normalization scales from the head of the stream.
fn estimate_scales(coder: &mut SparseCoder, source: &dyn BatchSource) -> Result<()> {
    if coder.config().normalization != Normalization::UnitMeanSquaredNorm {
        return Ok(());
    }
    let (x, y) = source.head(SCALE_ESTIMATE_ROWS)?;
    let s_in = unit_mean_squared_norm_scale(&x)?;
    let s_out = if coder.config().architecture == Architecture::Transcoder {
        unit_mean_squared_norm_scale(&y)?
    } else {
        s_in
    };
    log::info!("normalization scales: input {s_in}, output {s_out}");
    coder.set_scales(s_in, s_out)
}

/// Whether the last `patience` evaluations failed to beat the best earlier
/// one by `min_delta`.
fn plateaued(history: &[(usize, f64)], patience: usize, min_delta: f64) -> bool {
    if history.len() <= patience {
        return false;
    }
    let split = history.len() - patience;
    let best = |h: &[(usize, f64)]| h.iter().map(|e| e.1).fold(f64::NEG_INFINITY, f64::max);
    best(&history[split..]) - best(&history[..split]) < min_delta
}

/// Trains `coder` in place on `source`.
pub fn train(
    mut coder: SparseCoder,
    config: &TrainConfig,
    source: &mut dyn BatchSource,
    validation: Option<&Validation>,
) -> core::result::Result<TrainOutcome, TrainFailure> {
    config.validate(source.rows())?;
    if source.input_width() != coder.input_width() || source.target_width() != coder.target_width() {
        return Err(dim_err!(
            "stream widths ({}, {}) do not match coder ({}, {})",
            source.input_width(),
            source.target_width(),
            coder.input_width(),
            coder.target_width()
        )
        .into());
    }
    if config.early_stop.is_some() && validation.is_none() {
        return Err(config_err!("early stopping needs validation rows").into());
    }
    if config.ghost_grads && !supports_dead_feature_tools(&coder) {
        return Err(Error::Unsupported(alloc::format!(
            "ghost gradients for {} coders",
            coder.config().variant_label()
        ))
        .into());
    }
    estimate_scales(&mut coder, source)?;

    let total = config.resolved_steps(source.rows());
    let dict = coder.dict_size();
    let mut optim: Vec<AdamState> = coder
        .params()
        .tensors()
        .iter()
        .map(|t| AdamState::with_hyper(t.shape(), config.adam_beta1, config.adam_beta2, config.adam_eps))
        .collect();
    let mut vitals = FeatureVitals::new(dict, config.dead_window);
    let mut buffer = HighLossBuffer::new(2 * dict);
    let resample = config.resample_interval.filter(|_| supports_dead_feature_tools(&coder));
    let unit_norm = coder.config().unit_norm_decoder();
    let threshold_idx = coder.params().index_of("threshold");
    let mut log = Vec::with_capacity(total);
    let mut history: Vec<(usize, f64)> = Vec::new();
    let mut resamples = Vec::new();
    let mut stopped_at = None;
    let mut steps_run = 0;

    for step in 1..=total {
        let lr = lr_at(step, config.lr, config.warmup_steps, total);
        let fail = |error: Error, coder: &SparseCoder, log: &Vec<StepRecord>| TrainFailure {
            error,
            step,
            snapshot: Some(coder.clone()),
            log: log.clone(),
        };
        let (x, y) = source.next_batch(config.batch_size).map_err(|e| fail(e, &coder, &log))?;
        let mut out = coder.loss_and_grads(&x, &y).map_err(|e| fail(e, &coder, &log))?;
        if config.ghost_grads {
            let dead = vitals.dead(step);
            let (_, ghost) = ghost_grad_term(&coder, &out, &dead).map_err(|e| fail(e, &coder, &log))?;
            out.grads.add_assign(&ghost).map_err(|e| fail(e, &coder, &log))?;
        }
        vitals.update(&out.forward.latents, step).map_err(|e| fail(e, &coder, &log))?;
        if resample.is_some() {
            buffer.offer(&out.per_example_mse, &x, &y);
        }
        if unit_norm {
            coder
                .remove_parallel_decoder_grad(&mut out.grads)
                .map_err(|e| fail(e, &coder, &log))?;
        }
        let before = coder.clone();
        let updated = coder
            .params_mut()
            .tensors_mut()
            .iter_mut()
            .zip(out.grads.tensors())
            .zip(optim.iter_mut())
            .try_for_each(|((p, g), st)| adam_step(p, g, st, lr));
        if let Err(e) = updated {
            return Err(fail(e, &before, &log));
        }
        if let Some(i) = threshold_idx {
            for v in coder.params_mut().tensors_mut()[i].data_mut() {
                *v = v.max(0.0);
            }
        }
        if unit_norm {
            coder.normalize_decoder_rows().map_err(|e| fail(e, &coder, &log))?;
        }
        log.push(StepRecord {
            step,
            lr,
            mse: out.mse,
            l1: out.sparsity,
            l0_mean: mean_l0(&out.forward.latents).map_err(|e| fail(e, &coder, &log))?,
            alive_frac: vitals.alive_fraction(step),
        });
        steps_run = step;

        if let Some(interval) = resample {
            if step % interval == 0 {
                let report = resample_dead(&mut coder, &mut vitals, &buffer, &mut optim, step)
                    .map_err(|e| fail(e, &coder, &log))?;
                if !report.resampled.is_empty() {
                    log::info!("step {step}: resampled {} dead features", report.resampled.len());
                    resamples.push(ResampleEvent {
                        step,
                        features: report.resampled,
                    });
                }
                buffer.clear();
            }
        }

        if let (Some(es), Some(val)) = (config.early_stop, validation) {
            if step % es.eval_every == 0 {
                let ev = held_out_metrics(&coder, val)
                    .map_err(|e| fail(e, &coder, &log))?
                    .explained_variance;
                history.push((step, ev));
                if step >= config.warmup_steps && plateaued(&history, es.patience, es.min_delta) {
                    log::info!("early stop at step {step}: explained variance {ev:.3}");
                    stopped_at = Some(step);
                    break;
                }
            }
        }
    }

    Ok(TrainOutcome {
        coder,
        log,
        steps_run,
        stopped_at,
        validation: history,
        resamples,
        vitals,
    })
}

/// One `(lr, λ)` cell of a sweep.
#[derive(Clone, Debug)]
pub struct SweepCell {
    /// Position in grid order (learning rate major).
    pub index: usize,
    pub lr: f64,
    pub l1_coefficient: f32,
    pub metrics: HeldOutMetrics,
    pub final_step: Option<StepRecord>,
    pub outcome: TrainOutcome,
}

/// Grid cells in order, learning rate major. Empty grids fall back to the
/// base values.
pub fn sweep_grid(base_lr: f64, base_l1: f32, config: &TrainConfig) -> Vec<(f64, f32)> {
    let lrs = if config.lr_grid.is_empty() {
        alloc::vec![base_lr]
    } else {
        config.lr_grid.clone()
    };
    let l1s = if config.l1_grid.is_empty() {
        alloc::vec![base_l1]
    } else {
        config.l1_grid.clone()
    };
    lrs.iter().flat_map(|&lr| l1s.iter().map(move |&l1| (lr, l1))).collect()
}

/// Trains and scores one grid cell from scratch.
pub fn run_cell<S: BatchSource + Clone>(
    index: usize,
    lr: f64,
    l1: f32,
    coder_config: &crate::coder::SparseCoderConfig,
    config: &TrainConfig,
    source: &S,
    validation: &Validation,
) -> core::result::Result<SweepCell, TrainFailure> {
    let mut cc = coder_config.clone();
    cc.l1_coefficient = l1;
    let coder = SparseCoder::new(cc)?;
    let mut tc = config.clone();
    tc.lr = lr;
    let mut src = source.clone();
    let outcome = train(coder, &tc, &mut src, Some(validation))?;
    let metrics = held_out_metrics(&outcome.coder, validation)?;
    Ok(SweepCell {
        index,
        lr,
        l1_coefficient: l1,
        metrics,
        final_step: outcome.log.last().cloned(),
        outcome,
    })
}

/// Orders cells: within the L0 budget first, then by explained variance
/// (descending), then by grid position.
pub fn rank_cells(cells: &mut [SweepCell], l0_budget: Option<f64>) {
    let over = |c: &SweepCell| l0_budget.is_some_and(|b| c.metrics.l0_mean > b);
    cells.sort_by(|a, b| {
        over(a)
            .cmp(&over(b))
            .then(b.metrics.explained_variance.total_cmp(&a.metrics.explained_variance))
            .then(a.index.cmp(&b.index))
    });
}

/// Independent runs over the `lr × λ` grid, ranked.
pub fn sweep<S: BatchSource + Clone>(
    coder_config: &crate::coder::SparseCoderConfig,
    config: &TrainConfig,
    source: &S,
    validation: &Validation,
    l0_budget: Option<f64>,
) -> core::result::Result<Vec<SweepCell>, TrainFailure> {
    let grid = sweep_grid(config.lr, coder_config.l1_coefficient, config);
    let mut cells = grid
        .iter()
        .enumerate()
        .map(|(i, &(lr, l1))| run_cell(i, lr, l1, coder_config, config, source, validation))
        .collect::<core::result::Result<Vec<_>, _>>()?;
    rank_cells(&mut cells, l0_budget);
    Ok(cells)
}

/// Describes a cell for logs and tables.
pub fn cell_label(cell: &SweepCell) -> String {
    alloc::format!("lr={:e} l1={:e}", cell.lr, cell.l1_coefficient)
}
