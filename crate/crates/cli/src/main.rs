mod ablate;
mod args;
mod config_file;
mod demosaic;
mod eval;
mod train;

use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Result;
use clap::Parser;
use rstca_core::train::Checkpoint;
use rstca_core::{Error, ModelConfig, RstcaNet};

use args::{Cli, Command, ModelArgs, OptionalModelArgs};

/// Bad flags or unusable inputs; exit code 2.
#[derive(Debug)]
pub struct Usage(pub String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

/// Non-finite values in outputs; exit code 4.
#[derive(Debug)]
pub struct Numerical(pub String);

impl fmt::Display for Numerical {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Numerical {}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<Usage>() || cause.is::<std::io::Error>() {
            return 2;
        }
        if cause.is::<Numerical>() {
            return 4;
        }
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::ParamMismatch { .. } | Error::Checkpoint(_) => 3,
                Error::NonFiniteLoss { .. } | Error::NonFiniteGradient(_) => 4,
                Error::Config(_) | Error::Data(_) | Error::Io(_) | Error::Image(_) => 2,
                _ => 1,
            };
        }
    }
    1
}

/// Preset plus `--set` overrides.
pub fn resolve_model(variant: &str, overrides: &[String]) -> Result<ModelConfig> {
    let mut cfg = ModelConfig::preset(variant)?;
    for kv in overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Usage(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        if !cfg.set(k.trim(), v.trim())? {
            let keys: Vec<_> = cfg.to_pairs().into_iter().map(|(k, _)| k).collect();
            return Err(Usage(format!("unknown model field `{k}` (one of {})", keys.join(", "))).into());
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

impl ModelArgs {
    pub fn resolve(&self) -> Result<ModelConfig> {
        resolve_model(&self.variant, &self.overrides)
    }
}

/// Loads a checkpoint into the requested architecture, or into the stored one
/// when no `--variant` is given.
pub fn load_network(path: &Path, model: &OptionalModelArgs) -> Result<(RstcaNet, Checkpoint)> {
    let ckpt = Checkpoint::load(path)?;
    let net = match &model.variant {
        Some(v) => {
            let mut net = RstcaNet::new(resolve_model(v, &model.overrides)?, ckpt.seed)?;
            ckpt.load_into(&mut net)?;
            net
        }
        None => ckpt.to_net()?,
    };
    Ok((net, ckpt))
}

pub fn dataset_dir(dir: &Option<PathBuf>) -> Result<PathBuf> {
    let dir = dir
        .clone()
        .ok_or_else(|| Usage("no dataset given: pass --dataset or set RSTCA_DATA_DIR".into()))?;
    if !dir.is_dir() {
        return Err(Usage(format!("dataset directory {} does not exist", dir.display())).into());
    }
    Ok(dir)
}

pub fn echo_config(entries: &[(String, String)]) {
    eprint!("{}", config_file::render(entries));
}

pub fn model_entries(cfg: &ModelConfig) -> Vec<(String, String)> {
    cfg.to_pairs().into_iter().map(|(k, v)| (k.to_string(), v)).collect()
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let argv = match config_file::expand(std::env::args_os().collect()) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(exit_code(&e));
        }
    };
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    let result = match cli.command {
        Command::Train(a) => train::run(a),
        Command::Demosaic(a) => demosaic::run(a),
        Command::Eval(a) => eval::run(a),
        Command::Ablate(a) => ablate::run(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
