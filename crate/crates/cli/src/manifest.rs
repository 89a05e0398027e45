//! Experiment manifests: enough to replay a command and check its outputs.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::Failure;

pub const MANIFEST_FILE: &str = "manifest.json";

/// Outputs that legitimately change between identical runs.
const NONDETERMINISTIC: [&str; 2] = [MANIFEST_FILE, "timings.jsonl"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentManifest {
    pub command: String,
    /// Arguments after the program name, exactly as given.
    pub argv: Vec<String>,
    /// Working directory the arguments are relative to.
    pub cwd: PathBuf,
    pub config_path: Option<PathBuf>,
    /// Fully resolved configuration, when the command has one.
    pub config: Option<serde_json::Value>,
    pub out_dir: PathBuf,
    pub seed: Option<u64>,
    /// SHA-256 of every input file.
    pub inputs: BTreeMap<String, String>,
    /// SHA-256 of every deterministic output file, keyed by path relative to `out_dir`.
    pub outputs: BTreeMap<String, String>,
}

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure { code: 3, message: format!("io error on {}: {e}", path.display()) }
}

pub fn sha256_file(path: &Path) -> Result<String, Failure> {
    let bytes = fs::read(path).map_err(|e| io_failure(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

pub fn hash_inputs(paths: &[PathBuf]) -> Result<BTreeMap<String, String>, Failure> {
    let mut out = BTreeMap::new();
    for p in paths {
        if p.is_file() {
            out.insert(p.display().to_string(), sha256_file(p)?);
        }
    }
    Ok(out)
}

fn walk(dir: &Path, root: &Path, out: &mut BTreeMap<String, String>) -> Result<(), Failure> {
    let mut entries: Vec<_> = fs::read_dir(dir)
        .map_err(|e| io_failure(dir, e))?
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| io_failure(dir, e))?;
    entries.sort_by_key(|e| e.path());
    for e in entries {
        let path = e.path();
        if path.is_dir() {
            walk(&path, root, out)?;
        } else {
            let rel = path.strip_prefix(root).expect("walked under root").to_string_lossy().replace('\\', "/");
            if !NONDETERMINISTIC.contains(&rel.as_str()) {
                out.insert(rel, sha256_file(&path)?);
            }
        }
    }
    Ok(())
}

/// Hashes every deterministic file under `dir`.
pub fn hash_outputs(dir: &Path) -> Result<BTreeMap<String, String>, Failure> {
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out)?;
    Ok(out)
}

impl ExperimentManifest {
    pub fn write(&self) -> Result<(), Failure> {
        let path = self.out_dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(&path, text + "\n").map_err(|e| io_failure(&path, e))
    }

    pub fn read(path: &Path) -> Result<Self, Failure> {
        let text = fs::read_to_string(path).map_err(|e| io_failure(path, e))?;
        serde_json::from_str(&text)
            .map_err(|e| Failure { code: 3, message: format!("malformed manifest {}: {e}", path.display()) })
    }
}

/// `argv` with the value of `--out` replaced.
pub fn with_out(argv: &[String], out: &Path) -> Vec<String> {
    let mut res = Vec::with_capacity(argv.len());
    let mut it = argv.iter();
    while let Some(a) = it.next() {
        if a == "--out" {
            res.push(a.clone());
            it.next();
            res.push(out.display().to_string());
        } else if a.starts_with("--out=") {
            res.push(format!("--out={}", out.display()));
        } else {
            res.push(a.clone());
        }
    }
    res
}
