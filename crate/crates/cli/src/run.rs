use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::Failure;

pub const MANIFEST: &str = "manifest.json";

#[derive(Serialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    seed: u64,
    config: &'a BTreeMap<String, String>,
    inputs: &'a [FileDigest],
    outputs: &'a [FileDigest],
    wall_time_s: f64,
    tool_version: &'static str,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn digest_file(path: &Path, shown: String) -> Result<FileDigest, Failure> {
    let bytes = fs::read(path).map_err(|e| Failure::Io(path.to_path_buf(), e))?;
    Ok(FileDigest {
        path: shown,
        sha256: sha256_hex(&bytes),
        bytes: bytes.len() as u64,
    })
}

/// A fresh output directory for one command invocation.
pub struct RunDir {
    root: PathBuf,
    command: &'static str,
    started: Instant,
    inputs: Vec<FileDigest>,
    outputs: Vec<FileDigest>,
}

impl RunDir {
    /// `out_dir` must be absent or empty. Without it a new directory under
    /// `runs/` is created.
    pub fn create(out_dir: Option<&Path>, command: &'static str) -> Result<Self, Failure> {
        let root = match out_dir {
            Some(p) => p.to_path_buf(),
            None => {
                let secs = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
                PathBuf::from("runs").join(format!("{command}-{secs}-{}", std::process::id()))
            }
        };
        if root.exists() {
            let mut entries = fs::read_dir(&root).map_err(|e| Failure::Io(root.clone(), e))?;
            if entries.next().is_some() {
                return Err(Failure::Usage(format!(
                    "output directory {} is not empty; every run needs a fresh directory",
                    root.display()
                )));
            }
        }
        fs::create_dir_all(&root).map_err(|e| Failure::Io(root.clone(), e))?;
        Ok(Self {
            root,
            command,
            started: Instant::now(),
            inputs: Vec::new(),
            outputs: Vec::new(),
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn input(&mut self, path: &Path) -> Result<(), Failure> {
        let d = digest_file(path, path.display().to_string())?;
        self.inputs.push(d);
        Ok(())
    }

    pub fn write(&mut self, name: &str, contents: impl AsRef<[u8]>) -> Result<(), Failure> {
        let path = self.path(name);
        fs::write(&path, contents).map_err(|e| Failure::Io(path, e))?;
        self.record(name)
    }

    /// Digest a file some other writer already placed in the run directory.
    pub fn record(&mut self, name: &str) -> Result<(), Failure> {
        let d = digest_file(&self.path(name), name.to_string())?;
        self.outputs.push(d);
        Ok(())
    }

    pub fn finish(self, seed: u64, config: &BTreeMap<String, String>) -> Result<PathBuf, Failure> {
        let manifest = Manifest {
            command: self.command,
            seed,
            config,
            inputs: &self.inputs,
            outputs: &self.outputs,
            wall_time_s: self.started.elapsed().as_secs_f64(),
            tool_version: env!("CARGO_PKG_VERSION"),
        };
        let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        let path = self.root.join(MANIFEST);
        fs::write(&path, json).map_err(|e| Failure::Io(path, e))?;
        Ok(self.root)
    }
}
