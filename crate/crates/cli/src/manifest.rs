use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::Result;
use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Debug, Serialize)]
pub struct InputDigest {
    pub path: PathBuf,
    pub sha256: String,
}

/// Provenance record written next to every command's outputs. Timings live
/// here and never in metrics files, so those stay byte-stable.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: Vec<String>,
    pub config: BTreeMap<String, String>,
    pub inputs: Vec<InputDigest>,
    pub outputs: Vec<PathBuf>,
    pub duration_secs: f64,
}

pub struct Recorder {
    started: Instant,
    inputs: Vec<InputDigest>,
}

impl Recorder {
    pub fn start() -> Self {
        Self {
            started: Instant::now(),
            inputs: Vec::new(),
        }
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        if self.inputs.iter().any(|i| i.path == path) {
            return Ok(());
        }
        let bytes = std::fs::read(path)?;
        self.inputs.push(InputDigest {
            path: path.to_path_buf(),
            sha256: hex::encode(Sha256::digest(&bytes)),
        });
        Ok(())
    }

    /// Lists every file under `out` and writes `out/manifest.json`.
    pub fn finish(self, out: &Path, config: BTreeMap<String, String>) -> Result<()> {
        let mut outputs = Vec::new();
        walk(out, out, &mut outputs)?;
        outputs.retain(|p| p != Path::new("manifest.json"));
        outputs.sort();
        let manifest = RunManifest {
            command: std::env::args().collect(),
            config,
            inputs: self.inputs,
            outputs,
            duration_secs: self.started.elapsed().as_secs_f64(),
        };
        std::fs::write(out.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }
}

fn walk(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            walk(root, &path, out)?;
        } else {
            out.push(path.strip_prefix(root)?.to_path_buf());
        }
    }
    Ok(())
}
