//! Command-line interface.
//!
//! Every command reads one settings struct. Values are resolved as:
//! explicit flags, then the `--config` file (a bare settings object or a
//! `run_manifest.json`), then built-in defaults.

mod args;
mod commands;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::parser::ValueSource;
use clap::{ArgMatches, CommandFactory, FromArgMatches, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

pub use args::*;
pub use commands::dictionary_message;

use crate::error::{config, Error, Result};

/// Environment variable naming the default root for extracted caches.
pub const CACHE_ROOT_ENV: &str = "VITSCOPE_CACHE_ROOT";

#[derive(Debug, Parser)]
#[command(name = "vitscope", version, about = "Sparse coders and interpretability tools for vision transformers")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Cache hook activations of a model over a dataset.
    Extract(ExtractArgs),
    /// Train one sparse coder.
    Train(TrainArgs),
    /// Train a grid of learning rates and sparsity coefficients.
    Sweep(TrainArgs),
    /// Evaluate a coder substituted into the model.
    Eval(EvalArgs),
    #[command(subcommand)]
    Lens(LensCommand),
    /// Zero- or mean-ablate a hook and measure the damage.
    Ablate(AblateArgs),
    /// Substitute per-layer coders one at a time.
    SubstitutionSweep(SubstitutionArgs),
    /// Alive-feature percentages per layer for CLS and spatial tokens.
    AliveByLayer(AliveArgs),
    /// Collect evaluation results into Markdown and CSV tables.
    Report(ReportArgs),
    /// Write a synthetic labeled image dataset.
    GenDataset(GenDatasetArgs),
    /// Write a randomly initialized toy ViT.
    InitToyModel(InitToyArgs),
}

#[derive(Debug, Subcommand)]
pub enum LensCommand {
    /// Per-layer logit lens over the CLS residual.
    Logit(LensLogitArgs),
    /// Export one attention head's pattern.
    Attn(LensAttnArgs),
}

/// Parses `argv` (including the program name), runs the command and
/// returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = match Cli::command().try_get_matches_from(argv) {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match dispatch(&matches) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(matches: &ArgMatches) -> Result<()> {
    let cli = Cli::from_arg_matches(matches).map_err(|e| config(e.to_string()))?;
    let (_, sub) = matches.subcommand().expect("a subcommand is required");
    match cli.command {
        Command::Extract(a) => commands::extract(resolve(&a, sub, a.config.as_deref())?),
        Command::Train(a) => commands::train(resolve(&a, sub, a.config.as_deref())?),
        Command::Sweep(a) => commands::sweep(resolve(&a, sub, a.config.as_deref())?),
        Command::Eval(a) => commands::eval(resolve(&a, sub, a.config.as_deref())?),
        Command::Lens(lens) => {
            let (_, leaf) = sub.subcommand().expect("a lens subcommand is required");
            match lens {
                LensCommand::Logit(a) => commands::lens_logit(resolve(&a, leaf, a.config.as_deref())?),
                LensCommand::Attn(a) => commands::lens_attn(resolve(&a, leaf, a.config.as_deref())?),
            }
        }
        Command::Ablate(a) => commands::ablate(resolve(&a, sub, a.config.as_deref())?),
        Command::SubstitutionSweep(a) => commands::substitution(resolve(&a, sub, a.config.as_deref())?),
        Command::AliveByLayer(a) => commands::alive(resolve(&a, sub, a.config.as_deref())?),
        Command::Report(a) => commands::report(resolve(&a, sub, a.config.as_deref())?),
        Command::GenDataset(a) => commands::gen_dataset(resolve(&a, sub, a.config.as_deref())?),
        Command::InitToyModel(a) => commands::init_toy(resolve(&a, sub, a.config.as_deref())?),
    }
}

/// Settings of a command after merging, with their JSON form for the run
/// manifest.
pub struct Resolved<T> {
    pub settings: T,
    pub json: Value,
}

/// Reads a `--config` file; a run manifest contributes its `config` field.
pub fn read_config_file(path: &Path) -> Result<Map<String, Value>> {
    let raw = std::fs::read(path).map_err(Error::io(path))?;
    let value: Value = serde_json::from_slice(&raw)
        .map_err(|e| config(format!("{}: not valid JSON: {e}", path.display())))?;
    let value = match value {
        Value::Object(mut m) if m.contains_key("command") && m.contains_key("config") => {
            m.remove("config").expect("checked")
        }
        v => v,
    };
    match value {
        Value::Object(m) => Ok(m),
        _ => Err(config(format!("{}: settings must be a JSON object", path.display()))),
    }
}

fn resolve<T: Serialize + DeserializeOwned>(parsed: &T, matches: &ArgMatches, file: Option<&Path>) -> Result<Resolved<T>> {
    let Value::Object(mut merged) = serde_json::to_value(parsed).expect("settings serialize") else {
        unreachable!("settings are structs")
    };
    if let Some(path) = file {
        for (k, v) in read_config_file(path)? {
            let explicit = merged.contains_key(&k)
                && matches!(matches.value_source(&k), Some(ValueSource::CommandLine));
            if !explicit {
                merged.insert(k, v);
            }
        }
    }
    let settings: T = serde_json::from_value(Value::Object(merged))
        .map_err(|e| config(format!("invalid settings: {e}")))?;
    let json = serde_json::to_value(&settings).expect("settings serialize");
    Ok(Resolved { settings, json })
}

/// Unwraps a setting that has no default.
pub(crate) fn required<T>(value: Option<T>, flag: &str) -> Result<T> {
    value.ok_or_else(|| config(format!("missing required setting --{flag}")))
}

/// Output directory from the flag or, for caches, the environment.
pub(crate) fn cache_root(out: Option<PathBuf>) -> Result<PathBuf> {
    match out {
        Some(p) => Ok(p),
        None => std::env::var_os(CACHE_ROOT_ENV)
            .map(|root| PathBuf::from(root).join("activations"))
            .ok_or_else(|| config(format!("missing --out and {CACHE_ROOT_ENV} is not set"))),
    }
}
