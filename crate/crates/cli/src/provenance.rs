//! `run.json` records and content hashes.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::error::CliError;

pub const RUN_FILE: &str = "run.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub command: String,
    pub tool_version: String,
    /// Hash of the whole config (output directory excluded).
    pub config_hash: String,
    /// Hash of the blocks this command depends on.
    pub stage_hash: String,
    pub master_seed: u64,
    /// Every seed derived for this command, by stream name.
    pub seeds: BTreeMap<String, u64>,
    /// Content hashes of consumed artifacts, by path relative to the output directory.
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub config: ExperimentConfig,
}

fn sha_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn collect_files(
    root: &Path,
    dir: &Path,
    out: &mut Vec<(String, std::path::PathBuf)>,
) -> std::io::Result<()> {
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            collect_files(root, &path, out)?;
        } else if path.file_name().is_some_and(|n| n != RUN_FILE) {
            let rel = path.strip_prefix(root).unwrap_or(&path);
            out.push((rel.to_string_lossy().replace('\\', "/"), path.clone()));
        }
    }
    Ok(())
}

/// `sha256:<hex>` of a file's bytes, or of a directory's sorted
/// `path\0hash\n` listing (run records excluded).
pub fn hash_path(path: &Path) -> Result<String, CliError> {
    if !path.exists() {
        return Err(CliError::Missing {
            path: path.to_path_buf(),
            message: "cannot hash a missing artifact".into(),
        });
    }
    if path.is_file() {
        return Ok(format!("sha256:{}", sha_hex(&fs::read(path)?)));
    }
    let mut files = Vec::new();
    collect_files(path, path, &mut files)?;
    files.sort();
    let mut h = Sha256::new();
    for (rel, full) in files {
        h.update(rel.as_bytes());
        h.update([0]);
        h.update(sha_hex(&fs::read(&full)?).as_bytes());
        h.update(b"\n");
    }
    Ok(format!("sha256:{}", hex::encode(h.finalize())))
}

pub fn write_record(dir: &Path, rec: &RunRecord) -> Result<(), CliError> {
    fs::create_dir_all(dir)?;
    let text = serde_json::to_string_pretty(rec).expect("record serializes");
    fs::write(dir.join(RUN_FILE), text + "\n")?;
    Ok(())
}

pub fn read_record(dir: &Path) -> Option<RunRecord> {
    let text = fs::read_to_string(dir.join(RUN_FILE)).ok()?;
    serde_json::from_str(&text).ok()
}

/// What a command should do with an existing output directory.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Freshness {
    /// Nothing there yet, or `force` was given.
    Run,
    /// Same stage hash and inputs: nothing to do.
    UpToDate,
}

pub fn check_existing(
    dir: &Path,
    stage_hash: &str,
    inputs: &BTreeMap<String, String>,
    force: bool,
) -> Result<Freshness, CliError> {
    if force || !dir.exists() {
        return Ok(Freshness::Run);
    }
    match read_record(dir) {
        Some(r) if r.stage_hash == stage_hash && &r.inputs == inputs => Ok(Freshness::UpToDate),
        Some(_) => Err(CliError::Runtime(starmt::Error::AlreadyExists {
            path: dir.to_path_buf(),
        })),
        // an interrupted run left no record
        None => Ok(Freshness::Run),
    }
}
