//! Run manifests: what a command read, what it wrote, and how to replay it.

use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::Args;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::GlobalArgs;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// Arguments after the program name, as given.
    pub args: Vec<String>,
    pub working_dir: PathBuf,
    pub config_path: Option<PathBuf>,
    pub seed: Option<u64>,
    pub component: String,
    pub deterministic: bool,
    pub threads: usize,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    /// Outputs with timing data, not expected to replay bit for bit.
    pub logs: Vec<PathBuf>,
    pub toolkit_version: String,
    pub wall_clock_seconds: f64,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

fn digests(paths: &[PathBuf]) -> Result<Vec<FileDigest>> {
    paths
        .iter()
        .map(|p| {
            Ok(FileDigest {
                path: p.clone(),
                sha256: sha256_file(p)?,
            })
        })
        .collect()
}

/// Collects inputs and outputs while a command runs.
pub struct Recorder {
    manifest: RunManifest,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    default_path: Option<PathBuf>,
    start: Instant,
}

impl Recorder {
    pub fn start(command: &str, args: Vec<String>, global: &GlobalArgs, threads: usize) -> Self {
        Self {
            manifest: RunManifest {
                command: command.to_string(),
                args,
                working_dir: std::env::current_dir().unwrap_or_default(),
                config_path: global.config.clone(),
                seed: global.seed,
                component: global.component.as_str().to_string(),
                deterministic: global.deterministic,
                threads,
                inputs: Vec::new(),
                outputs: Vec::new(),
                logs: Vec::new(),
                toolkit_version: env!("CARGO_PKG_VERSION").to_string(),
                wall_clock_seconds: 0.0,
            },
            inputs: global.config.iter().cloned().collect(),
            outputs: Vec::new(),
            default_path: None,
            start: Instant::now(),
        }
    }

    pub fn input(&mut self, path: impl Into<PathBuf>) {
        self.inputs.push(path.into());
    }

    pub fn output(&mut self, path: impl Into<PathBuf>) {
        self.outputs.push(path.into());
    }

    pub fn log(&mut self, path: impl Into<PathBuf>) {
        self.manifest.logs.push(path.into());
    }

    /// Where the manifest goes unless `--run-manifest` says otherwise.
    pub fn default_path(&mut self, path: impl Into<PathBuf>) {
        self.default_path = Some(path.into());
    }

    pub fn finish(mut self, explicit: Option<&Path>) -> Result<()> {
        self.manifest.inputs = digests(&self.inputs)?;
        self.manifest.outputs = digests(&self.outputs)?;
        self.manifest.wall_clock_seconds = self.start.elapsed().as_secs_f64();
        let json = serde_json::to_string_pretty(&self.manifest)?;
        match explicit.or(self.default_path.as_deref()) {
            Some(path) => std::fs::write(path, json + "\n").with_context(|| format!("writing {}", path.display()))?,
            None => eprintln!("{json}"),
        }
        Ok(())
    }
}

#[derive(Args, Debug)]
pub struct Replay {
    /// Manifest written by an earlier run.
    pub manifest: PathBuf,
}

/// Drops any `--run-manifest` so the replay does not overwrite the original.
fn strip_run_manifest(args: &[String]) -> Vec<String> {
    let mut out = Vec::with_capacity(args.len());
    let mut skip = false;
    for a in args {
        if skip {
            skip = false;
        } else if a == "--run-manifest" {
            skip = true;
        } else if !a.starts_with("--run-manifest=") {
            out.push(a.clone());
        }
    }
    out
}

impl Replay {
    pub fn run(&self) -> Result<()> {
        let text = std::fs::read_to_string(&self.manifest).with_context(|| format!("reading {}", self.manifest.display()))?;
        let recorded: RunManifest = serde_json::from_str(&text).with_context(|| format!("parsing {}", self.manifest.display()))?;
        if recorded.command == "replay" {
            bail!("cannot replay a replay");
        }
        if recorded.toolkit_version != env!("CARGO_PKG_VERSION") {
            eprintln!(
                "warning: recorded with toolkit {}, replaying with {}",
                recorded.toolkit_version,
                env!("CARGO_PKG_VERSION")
            );
        }
        let previous = std::env::current_dir()?;
        std::env::set_current_dir(&recorded.working_dir).with_context(|| format!("entering {}", recorded.working_dir.display()))?;
        let scratch = std::env::temp_dir().join(format!("bqe-replay-{}.json", std::process::id()));
        let mut args = strip_run_manifest(&recorded.args);
        args.push("--run-manifest".into());
        args.push(scratch.display().to_string());
        let outcome = crate::execute(args).and_then(|()| {
            let mut mismatches = Vec::new();
            for d in &recorded.outputs {
                let now = sha256_file(&d.path)?;
                if now != d.sha256 {
                    mismatches.push(d.path.display().to_string());
                }
            }
            if mismatches.is_empty() {
                println!("replay: {} outputs reproduced bit for bit", recorded.outputs.len());
                Ok(())
            } else {
                bail!("replay produced different bytes for {}", mismatches.join(", "))
            }
        });
        let _ = std::fs::remove_file(&scratch);
        std::env::set_current_dir(previous)?;
        outcome
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn run_manifest_flags_are_stripped() {
        let args: Vec<String> = ["patch", "--run-manifest", "a.json", "--input", "x.ply", "--run-manifest=b.json"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        assert_eq!(strip_run_manifest(&args), vec!["patch", "--input", "x.ply"]);
    }
}
