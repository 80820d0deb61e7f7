//! `run.json` records: what ran, on which inputs, producing which files.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use sha1::{Digest, Sha1};

use crate::config::RunConfig;

pub const RUN_FILE: &str = "run.json";

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn object_id(kind: &str, body: &[u8]) -> [u8; 20] {
    let mut h = Sha1::new();
    h.update(format!("{kind} {}\0", body.len()).as_bytes());
    h.update(body);
    h.finalize().into()
}

/// Object id git would give the file's contents.
pub fn blob_id(path: &Path) -> std::io::Result<String> {
    Ok(hex(&object_id("blob", &fs::read(path)?)))
}

fn tree_id_raw(dir: &Path, skip: &[&str]) -> std::io::Result<[u8; 20]> {
    let mut entries = Vec::new();
    for entry in fs::read_dir(dir)? {
        let entry = entry?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if skip.contains(&name.as_str()) {
            continue;
        }
        let path = entry.path();
        if path.is_dir() {
            entries.push((format!("{name}/"), "40000", name, tree_id_raw(&path, &[])?));
        } else {
            entries.push((name.clone(), "100644", name, object_id("blob", &fs::read(&path)?)));
        }
    }
    // Git orders tree entries as if directory names ended in '/'.
    entries.sort_by(|a, b| a.0.as_bytes().cmp(b.0.as_bytes()));
    let mut body = Vec::new();
    for (_, mode, name, id) in entries {
        body.extend_from_slice(format!("{mode} {name}\0").as_bytes());
        body.extend_from_slice(&id);
    }
    Ok(object_id("tree", &body))
}

/// Object id git would give the directory tree, ignoring `skip` names at
/// the top level.
pub fn tree_id(dir: &Path, skip: &[&str]) -> std::io::Result<String> {
    Ok(hex(&tree_id_raw(dir, skip)?))
}

#[derive(Debug, Clone, Serialize)]
pub struct Hashed {
    pub path: String,
    pub kind: &'static str,
    pub sha1: String,
}

/// Hash of a file or directory, with `path` written relative to `base`
/// when possible.
pub fn hash_path(path: &Path, base: &Path) -> std::io::Result<Hashed> {
    let shown = path.strip_prefix(base).unwrap_or(path).to_string_lossy().into_owned();
    if path.is_dir() {
        Ok(Hashed {
            path: shown,
            kind: "tree",
            sha1: tree_id(path, &[RUN_FILE])?,
        })
    } else {
        Ok(Hashed {
            path: shown,
            kind: "blob",
            sha1: blob_id(path)?,
        })
    }
}

#[derive(Serialize)]
struct RunRecord<'a> {
    command: &'a str,
    version: &'static str,
    args: &'a [String],
    seed: u64,
    config_hash: String,
    config: &'a RunConfig,
    inputs: Vec<Hashed>,
    outputs: Vec<Hashed>,
    wall_time_seconds: f64,
}

/// Collects inputs while a subcommand runs, then writes `run.json` next to
/// its outputs.
pub struct Provenance {
    command: String,
    started: Instant,
    inputs: Vec<PathBuf>,
}

impl Provenance {
    pub fn start(command: &str) -> Self {
        Self {
            command: command.to_string(),
            started: Instant::now(),
            inputs: Vec::new(),
        }
    }

    pub fn input(&mut self, path: impl Into<PathBuf>) {
        self.inputs.push(path.into());
    }

    pub fn finish(self, config: &RunConfig, args: &[String], dir: &Path) -> std::io::Result<()> {
        let base = &config.out;
        let inputs = self
            .inputs
            .iter()
            .map(|p| hash_path(p, base))
            .collect::<std::io::Result<Vec<_>>>()?;
        let mut names: Vec<PathBuf> = fs::read_dir(dir)?
            .map(|e| e.map(|e| e.path()))
            .collect::<std::io::Result<_>>()?;
        names.sort();
        let outputs = names
            .iter()
            .filter(|p| p.file_name().is_some_and(|n| n != RUN_FILE))
            .map(|p| hash_path(p, base))
            .collect::<std::io::Result<Vec<_>>>()?;
        let record = RunRecord {
            command: &self.command,
            version: env!("CARGO_PKG_VERSION"),
            args,
            seed: config.seed,
            config_hash: config.hash(),
            config,
            inputs,
            outputs,
            wall_time_seconds: self.started.elapsed().as_secs_f64(),
        };
        let text = serde_json::to_string_pretty(&record).map_err(std::io::Error::other)?;
        fs::write(dir.join(RUN_FILE), text + "\n")
    }
}
