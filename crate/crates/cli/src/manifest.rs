use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Serialize)]
struct FileEntry {
    path: String,
    sha256: String,
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    config: &'a serde_json::Value,
    seed: Option<u64>,
    inputs: Vec<FileEntry>,
    outputs: Vec<FileEntry>,
    started_unix: u64,
    wall_seconds: f64,
    versions: serde_json::Value,
}

pub fn sha256_file(path: &Path) -> anyhow::Result<String> {
    Ok(hex::encode(Sha256::digest(std::fs::read(path)?)))
}

/// Records inputs and outputs of one command run.
pub struct Recorder {
    command: &'static str,
    started: Instant,
    started_unix: u64,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
}

impl Recorder {
    pub fn new(command: &'static str) -> Self {
        Self {
            command,
            started: Instant::now(),
            started_unix: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn input(&mut self, path: &Path) {
        self.inputs.push(path.to_path_buf());
    }

    /// Writes `contents` and records the file as an output.
    pub fn write(&mut self, path: PathBuf, contents: impl AsRef<[u8]>) -> anyhow::Result<()> {
        std::fs::write(&path, contents)?;
        self.outputs.push(path);
        Ok(())
    }

    /// Records a file written by other code.
    pub fn output(&mut self, path: PathBuf) {
        self.outputs.push(path);
    }

    pub fn finish(self, out: &Path, config: &serde_json::Value, seed: Option<u64>) -> anyhow::Result<()> {
        let entries = |paths: &[PathBuf]| -> anyhow::Result<Vec<FileEntry>> {
            paths
                .iter()
                .map(|p| {
                    Ok(FileEntry {
                        path: p.display().to_string(),
                        sha256: sha256_file(p)?,
                    })
                })
                .collect()
        };
        let manifest = Manifest {
            command: self.command,
            config,
            seed,
            inputs: entries(&self.inputs)?,
            outputs: entries(&self.outputs)?,
            started_unix: self.started_unix,
            wall_seconds: self.started.elapsed().as_secs_f64(),
            versions: serde_json::json!({ "medna": env!("CARGO_PKG_VERSION") }),
        };
        std::fs::write(out.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
        Ok(())
    }
}
