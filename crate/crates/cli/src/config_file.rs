//! `key=value` config files, turned into flags placed right after the
//! subcommand so that later command-line flags override them.

use std::ffi::OsString;
use std::path::Path;

use anyhow::{Context, Result};
use rstca_core::ModelConfig;

use crate::Usage;

const SUBCOMMANDS: [&str; 4] = ["train", "demosaic", "eval", "ablate"];

/// Parses `key=value` lines; `#` starts a comment.
pub fn parse(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Usage(format!("config line {}: expected key=value, got `{line}`", n + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

fn is_model_key(key: &str) -> bool {
    ModelConfig::default().to_pairs().iter().any(|(k, _)| *k == key)
}

/// Flags equivalent to config entries. Architecture fields become `--set`,
/// `true` becomes a bare switch and `false` drops it.
pub fn to_flags(entries: &[(String, String)]) -> Vec<OsString> {
    let mut flags = Vec::new();
    for (k, v) in entries {
        if is_model_key(k) {
            flags.push("--set".into());
            flags.push(format!("{k}={v}").into());
            continue;
        }
        let flag = format!("--{}", k.replace('_', "-"));
        match v.as_str() {
            "true" => flags.push(flag.into()),
            "false" => {}
            _ => {
                flags.push(flag.into());
                flags.push(v.into());
            }
        }
    }
    flags
}

fn config_path(argv: &[OsString]) -> Option<OsString> {
    let mut it = argv.iter();
    while let Some(a) = it.next() {
        let s = a.to_string_lossy();
        if s == "--" {
            return None;
        }
        if s == "--config" {
            return it.next().cloned();
        }
        if let Some(p) = s.strip_prefix("--config=") {
            return Some(p.into());
        }
    }
    None
}

/// Inserts the flags of the `--config` file, if any, after the subcommand.
pub fn expand(argv: Vec<OsString>) -> Result<Vec<OsString>> {
    let Some(path) = config_path(&argv) else {
        return Ok(argv);
    };
    let Some(at) = argv.iter().position(|a| SUBCOMMANDS.contains(&a.to_string_lossy().as_ref())) else {
        return Ok(argv);
    };
    let path = Path::new(&path);
    let text = std::fs::read_to_string(path)
        .map_err(|e| Usage(format!("cannot read config file {}: {e}", path.display())))
        .context("loading config")?;
    let flags = to_flags(&parse(&text)?);
    let mut out = argv[..=at].to_vec();
    out.extend(flags);
    out.extend_from_slice(&argv[at + 1..]);
    Ok(out)
}

/// Prints a resolved configuration in the same format the loader reads.
pub fn render(entries: &[(String, String)]) -> String {
    let mut s = String::from("# resolved configuration\n");
    for (k, v) in entries {
        s.push_str(&format!("{k}={v}\n"));
    }
    s
}
