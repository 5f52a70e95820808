use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;
use vitscope_core::analysis::{self, AttentionPattern, LensTrajectory};
use vitscope_core::coder::{Architecture, SparseCoder, SparseCoderConfig};
use vitscope_core::data::{Dataset, SyntheticSpec};
use vitscope_core::eval::{evaluate_coder, render_markdown, sort_rows, EvalOptions, NOT_AVAILABLE};
use vitscope_core::train::{
    self as training, rank_cells, run_cell, sweep_grid, EarlyStop, InMemorySource, StepRecord, SweepCell,
    TrainConfig, TrainFailure, Validation,
};
use vitscope_core::vit::{
    activation_means, select_token_rows, HookPoint, HookedViT, Intervention, InterventionKind, ModelInput,
    TokenSelector, ViTConfig,
};
use vitscope_core::Tensor;

use super::args::*;
use super::{cache_root, required, Resolved};
use crate::cache::{extract_activations, stream_activations, ActivationSource, CacheReader, ExtractOptions};
use crate::checkpoint::{self, load_coder, load_model, save_coder, save_model, write_json, MODEL_FILE};
use crate::datasets::{encode_ppm, save_raw, DatasetSource, DatasetSpec, DATASET_FILE};
use crate::error::{config, Error, Result};
use crate::manifest::RunManifest;
use crate::reports::{write_csv, write_markdown, EvalRecord, EVAL_FILE};

/// Log line announcing the dictionary of a coder configuration.
pub fn dictionary_message(cfg: &SparseCoderConfig) -> String {
    format!(
        "dictionary size {} ({} inputs x expansion {})",
        cfg.dictionary_size(),
        cfg.d_in,
        cfg.expansion_factor
    )
}

fn make_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(Error::io(dir))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(Error::io(path))
}

fn load_dataset(r: Option<&DatasetRef>) -> Result<(Dataset, DatasetSpec)> {
    let spec = required(r, "dataset")?.spec();
    Ok((spec.load()?, spec))
}

fn dataset_seed(spec: &DatasetSpec) -> Option<u64> {
    match &spec.source {
        DatasetSource::Synthetic(s) => Some(s.seed),
        _ => None,
    }
}

fn open_model(path: Option<&PathBuf>) -> Result<(HookedViT, PathBuf)> {
    let path = checkpoint::model_path(required(path, "model")?);
    Ok((load_model(&path)?, path))
}

/// Records a finished command in `out/run_manifest.json`.
fn finish(mut run: RunManifest, out: &Path, started: Instant) -> Result<()> {
    run.wall_clock_secs = started.elapsed().as_secs_f64();
    run.write(out)
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut s = String::new();
    for it in items {
        s.push_str(&serde_json::to_string(it).expect("record serializes"));
        s.push('\n');
    }
    write_text(path, &s)
}

pub fn extract(r: Resolved<ExtractArgs>) -> Result<()> {
    let started = Instant::now();
    let a = &r.settings;
    let (model, model_path) = open_model(a.model.as_ref())?;
    let (data, spec) = load_dataset(a.dataset.as_ref())?;
    if a.hooks.is_empty() {
        return Err(config("--hooks needs at least one hook"));
    }
    let root = cache_root(a.out.clone())?;
    let seed = dataset_seed(&spec).unwrap_or(0);
    let opts = ExtractOptions {
        tokens: a.tokens,
        image_batch: a.batch_size,
        shard_rows: a.shard_size,
        model_id: model_path.display().to_string(),
        seed,
    };
    let manifests = extract_activations(&model, &data, &a.hooks, &root, &opts)?;
    for m in &manifests {
        log::info!("{}: {} rows of width {}", m.hook, m.n_tokens, m.d_model);
    }
    let mut cfg = r.json.clone();
    cfg["out"] = json!(root);
    let mut run = RunManifest::new("extract", cfg, Some(seed));
    run.inputs.push(model_path);
    run.inputs.extend(spec.inputs());
    run.outputs = a.hooks.iter().map(|&h| crate::cache::cache_dir(&root, h)).collect();
    finish(run, &root, started)
}

/// Activation rows and wiring for a training run.
struct TrainingData {
    coder: SparseCoderConfig,
    inputs: Tensor,
    targets: Tensor,
    sources: Vec<PathBuf>,
}

fn training_data(a: &TrainArgs) -> Result<TrainingData> {
    if !a.cache.is_empty() {
        return cached_training_data(a);
    }
    if a.model.is_none() && a.dataset.is_none() {
        return Err(config("give --cache, or --model, --dataset and --hook"));
    }
    if a.architecture.is_some_and(|x| x != Architecture::Sae) {
        return Err(config("on-the-fly activations train plain SAEs only; extract caches first"));
    }
    let (model, model_path) = open_model(a.model.as_ref())?;
    let (data, spec) = load_dataset(a.dataset.as_ref())?;
    let hook = required(a.hook, "hook")?;
    let source = ActivationSource::Model {
        model: &model,
        dataset: &data,
        hook,
        image_batch: a.image_batch,
    };
    let stream = stream_activations(source, 4096, a.tokens.unwrap_or_default())?;
    let width = stream.width();
    let batches = stream.collect::<Result<Vec<_>>>()?;
    let refs: Vec<&Tensor> = batches.iter().collect();
    let inputs = if refs.is_empty() {
        Tensor::new(vec![0, width], Vec::new())?
    } else {
        Tensor::vcat(&refs)?
    };
    let mut coder = coder_config(a, Architecture::Sae, width);
    coder.input_hook = Some(hook);
    let mut sources = vec![model_path];
    sources.extend(spec.inputs());
    Ok(TrainingData {
        coder,
        targets: inputs.clone(),
        inputs,
        sources,
    })
}

fn cached_training_data(a: &TrainArgs) -> Result<TrainingData> {
    let readers = a.cache.iter().map(|p| CacheReader::open(p)).collect::<Result<Vec<_>>>()?;
    let target = a.target_cache.as_deref().map(CacheReader::open).transpose()?;
    let inferred = if target.is_some() {
        Architecture::Transcoder
    } else if readers.len() > 1 {
        Architecture::Crosscoder
    } else {
        Architecture::Sae
    };
    if let Some(arch) = a.architecture.filter(|&x| x != inferred) {
        return Err(config(format!(
            "--architecture {arch:?} does not match the inputs: {} cache(s){}",
            readers.len(),
            if target.is_some() { " plus a target cache" } else { "" }
        )));
    }
    let select = |r: &CacheReader| r.read_selected(a.tokens.unwrap_or(r.manifest().token_selector));
    let mut sources: Vec<PathBuf> = a.cache.clone();
    let data = match inferred {
        Architecture::Sae => {
            let inputs = select(&readers[0])?;
            let mut coder = coder_config(a, inferred, readers[0].manifest().d_model);
            coder.input_hook = Some(readers[0].manifest().hook);
            TrainingData {
                coder,
                targets: inputs.clone(),
                inputs,
                sources,
            }
        }
        Architecture::Transcoder => {
            if readers.len() != 1 {
                return Err(config("a transcoder reads exactly one input cache"));
            }
            let target = target.expect("transcoder has a target");
            let inputs = select(&readers[0])?;
            let targets = select(&target)?;
            if inputs.shape()[0] != targets.shape()[0] {
                return Err(config(format!(
                    "input cache has {} rows but the target cache has {}",
                    inputs.shape()[0],
                    targets.shape()[0]
                )));
            }
            let mut coder = coder_config(a, inferred, readers[0].manifest().d_model);
            coder.d_out = Some(target.manifest().d_model);
            coder.input_hook = Some(readers[0].manifest().hook);
            coder.output_hook = Some(target.manifest().hook);
            sources.push(target.dir().to_path_buf());
            TrainingData {
                coder,
                inputs,
                targets,
                sources,
            }
        }
        Architecture::Crosscoder => {
            let mut layers = Vec::new();
            for rd in &readers {
                match rd.manifest().hook {
                    HookPoint::ResidPost(l) => layers.push(l),
                    h => return Err(config(format!("crosscoders span resid_post caches, got `{h}`"))),
                }
            }
            let d = readers[0].manifest().d_model;
            let parts = readers.iter().map(select).collect::<Result<Vec<_>>>()?;
            if parts.iter().any(|p| p.shape() != parts[0].shape()) {
                return Err(config("crosscoder caches must agree in rows and width"));
            }
            let inputs = Tensor::hcat(&parts.iter().collect::<Vec<_>>())?;
            let mut coder = coder_config(a, inferred, d);
            coder.layers = layers;
            TrainingData {
                coder,
                targets: inputs.clone(),
                inputs,
                sources,
            }
        }
    };
    Ok(data)
}

fn coder_config(a: &TrainArgs, architecture: Architecture, d_in: usize) -> SparseCoderConfig {
    let mut c = SparseCoderConfig::sae(a.variant, d_in, a.expansion_factor, a.l1_coefficient);
    c.architecture = architecture;
    c.k = a.k;
    c.jumprelu_threshold_init = a.jumprelu_threshold_init;
    c.jumprelu_bandwidth = a.jumprelu_bandwidth;
    c.normalization = a.normalization;
    c.seed = a.seed;
    c
}

fn train_config(a: &TrainArgs) -> TrainConfig {
    let mut t = TrainConfig::new(a.lr);
    t.batch_size = a.batch_size;
    t.warmup_steps = a.warmup_steps;
    t.total_steps = a.total_steps;
    t.epochs = a.epochs;
    t.lr_grid = a.lr_grid.clone();
    t.l1_grid = a.l1_grid.clone();
    t.ghost_grads = a.ghost_grads;
    t.resample_interval = (a.resample_interval > 0).then_some(a.resample_interval);
    t.dead_window = a.dead_window;
    t.early_stop = a.early_stop.then_some(EarlyStop {
        eval_every: a.eval_every,
        patience: a.patience,
        min_delta: a.min_delta,
    });
    t.seed = a.seed;
    t
}

/// Training rows, validation rows and a shuffling source over the former.
struct Prepared {
    coder: SparseCoderConfig,
    train: TrainConfig,
    source: InMemorySource,
    validation: Option<Validation>,
    sources: Vec<PathBuf>,
    train_rows: usize,
}

fn prepare_training(a: &TrainArgs) -> Result<Prepared> {
    if !(0.0..1.0).contains(&a.val_fraction) {
        return Err(config("--val-fraction must be in [0, 1)"));
    }
    let data = training_data(a)?;
    data.coder.validate()?;
    log::info!("{}", dictionary_message(&data.coder));
    let rows = data.inputs.shape()[0];
    let n_val = if a.val_fraction > 0.0 && rows > 1 {
        ((rows as f64 * a.val_fraction) as usize).clamp(1, rows - 1)
    } else {
        0
    };
    let n_train = rows - n_val;
    let train = train_config(a);
    if train.early_stop.is_some() && n_val == 0 {
        return Err(config("--early-stop needs held-out rows; set --val-fraction above 0"));
    }
    train.validate(n_train)?;
    let head: Vec<usize> = (0..n_train).collect();
    let tail: Vec<usize> = (n_train..rows).collect();
    let validation = if n_val > 0 {
        Some(Validation::new(
            data.inputs.select_rows(&tail)?,
            data.targets.select_rows(&tail)?,
        )?)
    } else {
        None
    };
    let source = if data.coder.architecture == Architecture::Transcoder {
        InMemorySource::paired(data.inputs.select_rows(&head)?, data.targets.select_rows(&head)?, a.seed)?
    } else {
        InMemorySource::new(data.inputs.select_rows(&head)?, a.seed)?
    };
    Ok(Prepared {
        coder: data.coder,
        train,
        source,
        validation,
        sources: data.sources,
        train_rows: n_train,
    })
}

fn failure_error(out: &Path, f: TrainFailure) -> Result<()> {
    if let Some(snap) = &f.snapshot {
        let diag = out.join("diagnostic");
        save_coder(&diag, snap)?;
        write_jsonl(&diag.join("train_log.jsonl"), &f.log)?;
        log::error!("training aborted at step {}; last good state in {}", f.step, diag.display());
    }
    Err(match f.error {
        vitscope_core::Error::Numeric(m) => Error::Numeric(format!("training aborted at step {}: non-finite value in {m}", f.step)),
        e => e.into(),
    })
}

pub fn train(r: Resolved<TrainArgs>) -> Result<()> {
    let started = Instant::now();
    let a = &r.settings;
    let out = required(a.out.clone(), "out")?;
    let p = prepare_training(a)?;
    let coder = SparseCoder::new(p.coder.clone())?;
    make_dir(&out)?;
    let mut source = p.source;
    let outcome = match training::train(coder, &p.train, &mut source, p.validation.as_ref()) {
        Ok(o) => o,
        Err(f) => return failure_error(&out, f),
    };
    save_coder(&out, &outcome.coder)?;
    write_jsonl(&out.join("train_log.jsonl"), &outcome.log)?;
    let held_out = p
        .validation
        .as_ref()
        .map(|v| training::held_out_metrics(&outcome.coder, v))
        .transpose()?;
    let summary = json!({
        "dictionary_size": p.coder.dictionary_size(),
        "variant": p.coder.variant_label(),
        "train_rows": p.train_rows,
        "validation_rows": p.validation.as_ref().map_or(0, |v| v.inputs.shape()[0]),
        "steps_run": outcome.steps_run,
        "stopped_at": outcome.stopped_at,
        "validation": outcome.validation,
        "resamples": outcome.resamples.iter().map(|e| json!({"step": e.step, "features": e.features})).collect::<Vec<_>>(),
        "held_out": held_out,
        "final_step": outcome.log.last(),
    });
    write_json(&out.join("summary.json"), &summary)?;
    if let Some(m) = held_out {
        println!(
            "steps {}  explained variance {:.2}%  mean L0 {:.2}  mse {:.6}",
            outcome.steps_run, m.explained_variance, m.l0_mean, m.mse
        );
    }
    let mut run = RunManifest::new("train", r.json.clone(), Some(a.seed));
    run.inputs = p.sources;
    run.outputs = vec![out.join(checkpoint::CODER_FILE), out.join(checkpoint::CODER_SIDECAR)];
    finish(run, &out, started)
}

#[derive(Serialize)]
struct SweepRow {
    rank: usize,
    index: usize,
    lr: f64,
    l1_coefficient: f32,
    explained_variance: f64,
    mse: f64,
    l0_mean: f64,
    within_budget: bool,
    steps_run: usize,
    stopped_at: Option<usize>,
    final_step: Option<StepRecord>,
    checkpoint: PathBuf,
}

fn cell_dir(out: &Path, index: usize) -> PathBuf {
    out.join("cells").join(format!("cell_{index:03}"))
}

pub fn sweep(r: Resolved<TrainArgs>) -> Result<()> {
    let started = Instant::now();
    let a = &r.settings;
    let out = required(a.out.clone(), "out")?;
    let p = prepare_training(a)?;
    let validation = p
        .validation
        .as_ref()
        .ok_or_else(|| config("a sweep ranks cells on held-out rows; set --val-fraction above 0"))?;
    let grid = sweep_grid(p.train.lr, p.coder.l1_coefficient, &p.train);
    log::info!("sweeping {} cells", grid.len());
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(a.jobs)
        .build()
        .map_err(|e| config(format!("thread pool: {e}")))?;
    make_dir(&out)?;
    let results: Vec<std::result::Result<SweepCell, TrainFailure>> = pool.install(|| {
        grid.par_iter()
            .enumerate()
            .map(|(i, &(lr, l1))| run_cell(i, lr, l1, &p.coder, &p.train, &p.source, validation))
            .collect()
    });
    let mut cells = Vec::with_capacity(results.len());
    for (i, res) in results.into_iter().enumerate() {
        match res {
            Ok(c) => cells.push(c),
            Err(f) => return failure_error(&cell_dir(&out, i), f),
        }
    }
    for c in &cells {
        let dir = cell_dir(&out, c.index);
        save_coder(&dir, &c.outcome.coder)?;
        write_jsonl(&dir.join("train_log.jsonl"), &c.outcome.log)?;
    }
    rank_cells(&mut cells, a.l0_budget);
    let rows: Vec<SweepRow> = cells
        .iter()
        .enumerate()
        .map(|(rank, c)| SweepRow {
            rank: rank + 1,
            index: c.index,
            lr: c.lr,
            l1_coefficient: c.l1_coefficient,
            explained_variance: c.metrics.explained_variance,
            mse: c.metrics.mse,
            l0_mean: c.metrics.l0_mean,
            within_budget: a.l0_budget.is_none_or(|b| c.metrics.l0_mean <= b),
            steps_run: c.outcome.steps_run,
            stopped_at: c.outcome.stopped_at,
            final_step: c.final_step.clone(),
            checkpoint: cell_dir(&out, c.index),
        })
        .collect();
    write_json(&out.join("sweep.json"), &rows)?;
    let mut csv = String::from("rank,index,lr,l1_coefficient,explained_variance,mse,l0_mean,within_budget,steps_run\n");
    for row in &rows {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            row.rank,
            row.index,
            row.lr,
            row.l1_coefficient,
            row.explained_variance,
            row.mse,
            row.l0_mean,
            row.within_budget,
            row.steps_run
        ));
        println!(
            "#{:<3} {}  EV {:.2}%  L0 {:.2}",
            row.rank,
            training::cell_label(&cells[row.rank - 1]),
            row.explained_variance,
            row.l0_mean
        );
    }
    write_text(&out.join("sweep.csv"), &csv)?;
    let mut run = RunManifest::new("sweep", r.json.clone(), Some(a.seed));
    run.inputs = p.sources;
    run.outputs = vec![out.join("sweep.json"), out.join("sweep.csv"), out.join("cells")];
    finish(run, &out, started)
}

fn coder_hook(coder: &SparseCoder, path: &Path) -> Result<HookPoint> {
    let c = coder.config();
    c.output_hook.or(c.input_hook).ok_or_else(|| {
        config(format!("{} does not record its hook; pass --hook", path.display()))
    })
}

pub fn eval(r: Resolved<EvalArgs>) -> Result<()> {
    let started = Instant::now();
    let a = &r.settings;
    let (model, model_path) = open_model(a.model.as_ref())?;
    let coder_path = required(a.coder.clone(), "coder")?;
    let coder = load_coder(&coder_path)?;
    let (data, spec) = load_dataset(a.dataset.as_ref())?;
    let hook = match a.hook {
        Some(h) => h,
        None => coder_hook(&coder, &coder_path)?,
    };
    let out = required(a.out.clone(), "out")?;
    let opts = EvalOptions {
        tokens: a.tokens,
        l0_threshold: a.l0_threshold,
        max_activating_k: a.max_activating_k,
    };
    let ev = evaluate_coder(&model, &coder, hook, data.batches(a.batch_size), &opts)?;
    make_dir(&out)?;
    let record = EvalRecord::new(hook, a.tokens, data.len(), coder.dict_size(), &ev);
    write_json(&out.join(EVAL_FILE), &record)?;
    let mut outputs = vec![out.join(EVAL_FILE)];
    if let Some(set) = &ev.max_activating {
        let path = out.join("max_activating.json");
        write_json(&path, &json!({"k": set.k(), "features": set.features()}))?;
        outputs.push(path);
    }
    print!("{}", render_markdown(std::slice::from_ref(&record.row)));
    match record.row.pct_ce_recovered {
        Some(p) => println!("% CE recovered: {p:.2}"),
        None => println!("% CE recovered: {NOT_AVAILABLE}"),
    }
    let mut run = RunManifest::new("eval", r.json.clone(), dataset_seed(&spec));
    run.inputs = vec![model_path, coder_path];
    run.inputs.extend(spec.inputs());
    run.outputs = outputs;
    finish(run, &out, started)
}

pub fn lens_logit(r: Resolved<LensLogitArgs>) -> Result<()> {
    let started = Instant::now();
    let a = &r.settings;
    let (model, model_path) = open_model(a.model.as_ref())?;
    let (data, spec) = load_dataset(a.dataset.as_ref())?;
    let out = required(a.out.clone(), "out")?;
    let n = a.examples.map_or(data.len(), |k| k.min(data.len()));
    let layers: Vec<HookPoint> = (0..model.config().n_layers).map(HookPoint::ResidPost).collect();
    let step = a.batch_size.max(1);
    let mut trajectories: Vec<LensTrajectory> = Vec::with_capacity(n);
    for start in (0..n).step_by(step) {
        let (images, _) = data.slice(start, (start + step).min(n))?;
        let fw = model.forward(ModelInput::Images(&images), &layers)?;
        for mut t in analysis::logit_lens(&model, &fw.cache)? {
            t.example += start;
            trajectories.push(t);
        }
    }
    make_dir(&out)?;
    let path = out.join("logit_lens.json");
    write_json(&path, &json!({"layers": layers.len(), "labels": &data.labels()[..n], "trajectories": trajectories}))?;
    let mut run = RunManifest::new("lens logit", r.json.clone(), dataset_seed(&spec));
    run.inputs.push(model_path);
    run.inputs.extend(spec.inputs());
    run.outputs.push(path);
    finish(run, &out, started)
}

pub fn lens_attn(r: Resolved<LensAttnArgs>) -> Result<()> {
    let started = Instant::now();
    let a = &r.settings;
    let (model, model_path) = open_model(a.model.as_ref())?;
    let (data, spec) = load_dataset(a.dataset.as_ref())?;
    let out = required(a.out.clone(), "out")?;
    let layer = required(a.layer, "layer")?;
    let head = required(a.head, "head")?;
    if a.example >= data.len() {
        return Err(config(format!("--example {} but the dataset has {} images", a.example, data.len())));
    }
    let hook = HookPoint::Pattern(layer);
    hook.validate(model.config())?;
    let (image, _) = data.slice(a.example, a.example + 1)?;
    let fw = model.forward(ModelInput::Images(&image), &[hook])?;
    let mut pattern: AttentionPattern = analysis::export_attention(model.config(), &fw.cache, layer, head, 0)?;
    pattern.example = a.example;
    make_dir(&out)?;
    let path = out.join(format!("attention_l{layer}_h{head}_ex{}.json", a.example));
    write_json(&path, &pattern)?;
    let mut run = RunManifest::new("lens attn", r.json.clone(), dataset_seed(&spec));
    run.inputs.push(model_path);
    run.inputs.extend(spec.inputs());
    run.outputs.push(path);
    finish(run, &out, started)
}

pub fn ablate(r: Resolved<AblateArgs>) -> Result<()> {
    let started = Instant::now();
    let a = &r.settings;
    let (model, model_path) = open_model(a.model.as_ref())?;
    let (data, spec) = load_dataset(a.dataset.as_ref())?;
    let out = required(a.out.clone(), "out")?;
    let hook = required(a.hook, "hook")?;
    hook.validate(model.config())?;
    let intervention = match a.kind {
        AblationKind::Zero => Intervention::zero(hook, a.tokens),
        AblationKind::Mean => {
            let images = data
                .batches(a.batch_size)
                .map(|b| b.map(|(t, _)| t))
                .collect::<vitscope_core::Result<Vec<_>>>()?;
            let means = activation_means(&model, images.iter().map(ModelInput::Images), hook)?;
            Intervention::new(hook, InterventionKind::MeanAblate(means), a.tokens)
        }
    };
    let result = analysis::ablate(&model, &intervention, data.batches(a.batch_size))?;
    make_dir(&out)?;
    let path = out.join("ablation.json");
    write_json(&path, &result)?;
    println!(
        "{} ablation of {}: CE {:.4} -> {:.4} (delta {:+.4}), accuracy {:.4} -> {:.4}",
        result.kind, result.target, result.ce_clean, result.ce_ablated, result.delta_ce, result.accuracy_clean,
        result.accuracy_ablated
    );
    let mut run = RunManifest::new("ablate", r.json.clone(), dataset_seed(&spec));
    run.inputs.push(model_path);
    run.inputs.extend(spec.inputs());
    run.outputs.push(path);
    finish(run, &out, started)
}

fn load_coders(paths: &[PathBuf]) -> Result<Vec<(HookPoint, SparseCoder)>> {
    if paths.is_empty() {
        return Err(config("--coders needs at least one checkpoint"));
    }
    paths
        .iter()
        .map(|p| {
            let c = load_coder(p)?;
            Ok((coder_hook(&c, p)?, c))
        })
        .collect()
}

pub fn substitution(r: Resolved<SubstitutionArgs>) -> Result<()> {
    let started = Instant::now();
    let a = &r.settings;
    let (model, model_path) = open_model(a.model.as_ref())?;
    let (data, spec) = load_dataset(a.dataset.as_ref())?;
    let out = required(a.out.clone(), "out")?;
    let coders = load_coders(&a.coders)?;
    let pairs: Vec<(HookPoint, &SparseCoder)> = coders.iter().map(|(h, c)| (*h, c)).collect();
    let series = analysis::substitution_sweep(&model, &pairs, &data, a.batch_size, a.tokens)?;
    make_dir(&out)?;
    write_json(&out.join("substitution_sweep.json"), &series)?;
    let mut csv = String::from("layer,hook,ce_clean,ce_recon,delta,improved\n");
    for p in &series {
        csv.push_str(&format!(
            "{},{},{},{},{},{}\n",
            p.layer.map_or_else(|| "-".into(), |l| l.to_string()),
            p.hook,
            p.ce_clean,
            p.ce_recon,
            p.delta,
            p.improved
        ));
    }
    write_text(&out.join("substitution_sweep.csv"), &csv)?;
    let mut run = RunManifest::new("substitution-sweep", r.json.clone(), dataset_seed(&spec));
    run.inputs.push(model_path);
    run.inputs.extend(a.coders.iter().cloned());
    run.inputs.extend(spec.inputs());
    run.outputs = vec![out.join("substitution_sweep.json"), out.join("substitution_sweep.csv")];
    finish(run, &out, started)
}

pub fn alive(r: Resolved<AliveArgs>) -> Result<()> {
    let started = Instant::now();
    let a = &r.settings;
    let (model, model_path) = open_model(a.model.as_ref())?;
    let (data, spec) = load_dataset(a.dataset.as_ref())?;
    let out = required(a.out.clone(), "out")?;
    let coders = load_coders(&a.coders)?;
    let mut layers = Vec::with_capacity(coders.len());
    for (h, _) in &coders {
        h.validate(model.config())?;
        if !h.has_token_axis() || matches!(h, HookPoint::Pattern(_)) {
            return Err(config(format!("`{h}` has no token rows to split into CLS and spatial")));
        }
        layers.push(h.layer().ok_or_else(|| config(format!("`{h}` is not a per-layer hook")))?);
    }
    let mut capture: Vec<HookPoint> = coders.iter().map(|(h, _)| *h).collect();
    capture.sort_by_key(|p| p.order_key());
    capture.dedup();
    let mut cls: Vec<Vec<Tensor>> = vec![Vec::new(); coders.len()];
    let mut spatial: Vec<Vec<Tensor>> = vec![Vec::new(); coders.len()];
    for batch in data.batches(a.batch_size) {
        let (images, _) = batch?;
        let fw = model.forward(ModelInput::Images(&images), &capture)?;
        for (i, (h, _)) in coders.iter().enumerate() {
            let acts = fw.cache.get(*h)?;
            cls[i].push(select_token_rows(acts, TokenSelector::ClsOnly)?);
            spatial[i].push(select_token_rows(acts, TokenSelector::SpatialOnly)?);
        }
    }
    let join = |parts: &[Tensor]| -> Result<Tensor> { Ok(Tensor::vcat(&parts.iter().collect::<Vec<_>>())?) };
    let cls = cls.iter().map(|p| join(p)).collect::<Result<Vec<_>>>()?;
    let spatial = spatial.iter().map(|p| join(p)).collect::<Result<Vec<_>>>()?;
    let refs: Vec<&SparseCoder> = coders.iter().map(|(_, c)| c).collect();
    let series = analysis::alive_by_layer(&layers, &refs, &cls, &spatial)?;
    make_dir(&out)?;
    write_json(&out.join("alive_by_layer.json"), &series)?;
    let mut csv = String::from("layer,cls,spatial\n");
    for i in 0..series.layers.len() {
        csv.push_str(&format!("{},{},{}\n", series.layers[i], series.cls[i], series.spatial[i]));
    }
    write_text(&out.join("alive_by_layer.csv"), &csv)?;
    let mut run = RunManifest::new("alive-by-layer", r.json.clone(), dataset_seed(&spec));
    run.inputs.push(model_path);
    run.inputs.extend(a.coders.iter().cloned());
    run.inputs.extend(spec.inputs());
    run.outputs = vec![out.join("alive_by_layer.json"), out.join("alive_by_layer.csv")];
    finish(run, &out, started)
}

pub fn report(r: Resolved<ReportArgs>) -> Result<()> {
    let started = Instant::now();
    let a = &r.settings;
    if a.evals.is_empty() {
        return Err(config("--evals needs at least one eval.json"));
    }
    let out = required(a.out.clone(), "out")?;
    let mut rows = a
        .evals
        .iter()
        .map(|p| EvalRecord::read(p).map(|e| e.row))
        .collect::<Result<Vec<_>>>()?;
    sort_rows(&mut rows);
    make_dir(&out)?;
    write_markdown(&out.join("report.md"), &rows)?;
    write_csv(&out.join("report.csv"), &rows)?;
    print!("{}", render_markdown(&rows));
    let mut run = RunManifest::new("report", r.json.clone(), None);
    run.inputs = a.evals.clone();
    run.outputs = vec![out.join("report.md"), out.join("report.csv")];
    finish(run, &out, started)
}

pub fn gen_dataset(r: Resolved<GenDatasetArgs>) -> Result<()> {
    let started = Instant::now();
    let a = &r.settings;
    let out = required(a.out.clone(), "out")?;
    if a.n_classes < 2 {
        return Err(config("--n-classes must be at least 2"));
    }
    let spec = SyntheticSpec {
        n_images: a.n_images,
        image_size: a.image_size,
        n_classes: a.n_classes,
        seed: a.seed,
        noise: a.noise,
    };
    let data = Dataset::synthetic(&spec)?;
    make_dir(&out)?;
    let outputs = match a.format {
        ImageFormat::Raw => {
            let path = out.join(DATASET_FILE);
            save_raw(&path, &data)?;
            vec![path]
        }
        ImageFormat::Ppm => {
            let mut dirs = Vec::new();
            for i in 0..data.len() {
                let dir = out.join(format!("class_{:04}", data.labels()[i]));
                if !dirs.contains(&dir) {
                    make_dir(&dir)?;
                    dirs.push(dir.clone());
                }
                let path = dir.join(format!("img_{i:06}.ppm"));
                fs::write(&path, encode_ppm(&data.images().index_outer(i)?)?).map_err(Error::io(&path))?;
            }
            dirs.sort();
            dirs
        }
    };
    let mut run = RunManifest::new("gen-dataset", r.json.clone(), Some(a.seed));
    run.outputs = outputs;
    finish(run, &out, started)
}

pub fn init_toy(r: Resolved<InitToyArgs>) -> Result<()> {
    let started = Instant::now();
    let a = &r.settings;
    let out = required(a.out.clone(), "out")?;
    let mut problems = Vec::new();
    if !(1..=4).contains(&a.layers) {
        problems.push(format!("--layers must be 1 to 4, got {}", a.layers));
    }
    if a.patch_size != 16 && a.patch_size != 32 {
        problems.push(format!("--patch-size must be 16 or 32, got {}", a.patch_size));
    }
    if a.n_heads == 0 || a.d_model % a.n_heads != 0 {
        problems.push(format!("--d-model {} must be a multiple of --n-heads {}", a.d_model, a.n_heads));
    }
    if !problems.is_empty() {
        return Err(config(problems.join("; ")));
    }
    let cfg = ViTConfig {
        n_layers: a.layers,
        d_model: a.d_model,
        n_heads: a.n_heads,
        d_head: a.d_model / a.n_heads,
        d_mlp: a.d_mlp.unwrap_or(4 * a.d_model),
        patch_size: a.patch_size,
        image_size: a.image_size,
        n_classes: a.n_classes,
        attention_only: a.attention_only,
        layer_norm_eps: 1e-5,
    };
    let model = HookedViT::random(cfg, a.seed)?;
    make_dir(&out)?;
    let path = out.join(MODEL_FILE);
    save_model(&path, &model)?;
    log::info!(
        "{} layers, {} tokens per image, {} weight tensors",
        model.config().n_layers,
        model.config().n_tokens(),
        model.named_weights().len()
    );
    let mut run = RunManifest::new("init-toy-model", r.json.clone(), Some(a.seed));
    run.outputs.push(path);
    finish(run, &out, started)
}
