//! `run.json`: what a command was asked to do and what it read and wrote.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

pub const MANIFEST_FILE: &str = "run.json";

#[derive(Debug, Serialize)]
pub struct FileDigest {
    pub path: PathBuf,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub version: String,
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    pub inputs: Vec<FileDigest>,
    pub artifacts: Vec<FileDigest>,
    pub wall_clock_secs: f64,
}

pub fn digest(path: &Path) -> Result<FileDigest> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(FileDigest {
        path: path.to_path_buf(),
        sha256: hex::encode(Sha256::digest(&bytes)),
        bytes: bytes.len() as u64,
    })
}

/// Digests `path`, or every file directly inside it when it is a directory.
fn digest_all(path: &Path) -> Result<Vec<FileDigest>> {
    if !path.is_dir() {
        return Ok(vec![digest(path)?]);
    }
    let mut files: Vec<PathBuf> = fs::read_dir(path)
        .with_context(|| format!("listing {}", path.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    files.retain(|p| p.is_file() && p.file_name().is_some_and(|n| n != MANIFEST_FILE));
    files.sort();
    files.iter().map(|p| digest(p)).collect()
}

/// Collects inputs and outputs over a run and writes the manifest at the end.
pub struct Recorder {
    subcommand: String,
    config: serde_json::Value,
    seed: Option<u64>,
    inputs: Vec<PathBuf>,
    started: Instant,
}

impl Recorder {
    pub fn new(subcommand: &str, config: &impl Serialize, seed: Option<u64>) -> Result<Self> {
        Ok(Recorder {
            subcommand: subcommand.into(),
            config: serde_json::to_value(config)?,
            seed,
            inputs: Vec::new(),
            started: Instant::now(),
        })
    }

    pub fn input(&mut self, path: &Path) {
        self.inputs.push(path.to_path_buf());
    }

    /// Writes the manifest to `location`: `DIR/run.json` for a directory,
    /// `FILE.run.json` next to a file.
    pub fn finish(self, location: &Path, artifacts: &[&Path]) -> Result<PathBuf> {
        let mut inputs = Vec::new();
        for p in &self.inputs {
            inputs.extend(digest_all(p)?);
        }
        let mut outs = Vec::new();
        for p in artifacts {
            outs.extend(digest_all(p)?);
        }
        let manifest = RunManifest {
            subcommand: self.subcommand,
            version: env!("CARGO_PKG_VERSION").into(),
            config: self.config,
            seed: self.seed,
            inputs,
            artifacts: outs,
            wall_clock_secs: self.started.elapsed().as_secs_f64(),
        };
        let path = if location.is_dir() {
            location.join(MANIFEST_FILE)
        } else {
            let mut name = location.file_name().unwrap_or_default().to_os_string();
            name.push(".");
            name.push(MANIFEST_FILE);
            location.with_file_name(name)
        };
        let mut json = serde_json::to_string_pretty(&manifest)?;
        json.push('\n');
        fs::write(&path, json).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sha256_of_known_input() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("abc");
        fs::write(&p, "abc").unwrap();
        let d = digest(&p).unwrap();
        assert_eq!(
            d.sha256,
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
        assert_eq!(d.bytes, 3);
    }

    #[test]
    fn manifest_location() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("hyp.txt");
        fs::write(&file, "x\n").unwrap();
        let rec = Recorder::new("translate", &serde_json::json!({}), None).unwrap();
        assert_eq!(
            rec.finish(&file, &[&file]).unwrap(),
            dir.path().join("hyp.txt.run.json")
        );
        let rec = Recorder::new("gen-toy", &serde_json::json!({}), Some(3)).unwrap();
        let m = rec.finish(dir.path(), &[dir.path()]).unwrap();
        assert_eq!(m, dir.path().join(MANIFEST_FILE));
        let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(m).unwrap()).unwrap();
        assert_eq!(v["seed"], 3);
        // the earlier manifest is an artifact of this directory, run.json is not
        let names: Vec<&str> = v["artifacts"]
            .as_array()
            .unwrap()
            .iter()
            .map(|a| a["path"].as_str().unwrap())
            .collect();
        assert_eq!(names.len(), 2);
    }
}
