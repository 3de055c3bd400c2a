//! Run directories: every command writes its artifacts, a log, and a
//! manifest into a fresh `<root>/<timestamp>-<command>/`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

pub const RUN_ROOT_ENV: &str = "CODEBIAS_RUN_ROOT";
pub const MANIFEST: &str = "manifest.json";

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub tool_version: String,
    pub started_at: String,
    pub config: serde_json::Value,
    pub seeds: BTreeMap<String, u64>,
    pub inputs: Vec<Artifact>,
    /// Paths relative to the run directory.
    pub outputs: Vec<Artifact>,
    pub timings_s: BTreeMap<String, f64>,
}

impl RunManifest {
    pub fn load(run_dir: &Path) -> Result<Self, CliError> {
        let path = run_dir.join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn output(&self, name: &str) -> Option<&Artifact> {
        self.outputs.iter().find(|a| a.path == name)
    }

    /// Re-hashes every listed output; returns the paths that differ.
    pub fn verify(&self, run_dir: &Path) -> Result<Vec<String>, CliError> {
        let mut bad = Vec::new();
        for a in &self.outputs {
            let p = run_dir.join(&a.path);
            let bytes = fs::read(&p).map_err(|e| CliError::io(&p, e))?;
            if sha256_hex(&bytes) != a.sha256 {
                bad.push(a.path.clone());
            }
        }
        Ok(bad)
    }
}

pub struct RunDir {
    path: PathBuf,
    manifest: RunManifest,
    log: String,
    clock: Instant,
}

impl RunDir {
    /// `explicit` must not exist yet or be an empty directory. Otherwise a
    /// new timestamped directory is made under `root`.
    pub fn create(root: &Path, explicit: Option<&Path>, command: &str, args: Vec<String>) -> Result<Self, CliError> {
        let now = chrono::Local::now();
        let path = match explicit {
            Some(p) => {
                if p.exists() && fs::read_dir(p).map_err(|e| CliError::io(p, e))?.next().is_some() {
                    return Err(CliError::Config(format!("run directory {} is not empty", p.display())));
                }
                p.to_path_buf()
            }
            None => {
                let stem = format!("{}-{command}", now.format("%Y%m%dT%H%M%S"));
                let mut p = root.join(&stem);
                let mut k = 2;
                while p.exists() {
                    p = root.join(format!("{stem}-{k}"));
                    k += 1;
                }
                p
            }
        };
        fs::create_dir_all(&path).map_err(|e| CliError::io(&path, e))?;
        Ok(RunDir {
            path,
            manifest: RunManifest {
                command: command.to_string(),
                args,
                tool_version: env!("CARGO_PKG_VERSION").to_string(),
                started_at: now.to_rfc3339(),
                config: serde_json::Value::Null,
                seeds: BTreeMap::new(),
                inputs: Vec::new(),
                outputs: Vec::new(),
                timings_s: BTreeMap::new(),
            },
            log: String::new(),
            clock: Instant::now(),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn set_config<T: Serialize>(&mut self, config: &T) {
        self.manifest.config = serde_json::to_value(config).expect("config serializes");
    }

    pub fn seed(&mut self, name: &str, seed: u64) {
        self.manifest.seeds.insert(name.to_string(), seed);
    }

    /// Reads an input artifact and records its hash.
    pub fn read_input(&mut self, path: &Path) -> Result<Vec<u8>, CliError> {
        let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
        let entry = Artifact {
            path: path.display().to_string(),
            sha256: sha256_hex(&bytes),
        };
        if !self.manifest.inputs.contains(&entry) {
            self.manifest.inputs.push(entry);
        }
        Ok(bytes)
    }

    pub fn read_input_string(&mut self, path: &Path) -> Result<String, CliError> {
        String::from_utf8(self.read_input(path)?)
            .map_err(|_| CliError::Config(format!("{}: not UTF-8 text", path.display())))
    }

    /// Writes a new artifact; existing files are never overwritten.
    pub fn write(&mut self, name: &str, bytes: impl AsRef<[u8]>) -> Result<PathBuf, CliError> {
        let bytes = bytes.as_ref();
        let p = self.path.join(name);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
        }
        let mut f = fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&p)
            .map_err(|e| CliError::Runtime(format!("{}: {e}", p.display())))?;
        std::io::Write::write_all(&mut f, bytes).map_err(|e| CliError::io(&p, e))?;
        self.manifest.outputs.push(Artifact {
            path: name.to_string(),
            sha256: sha256_hex(bytes),
        });
        Ok(p)
    }

    /// Prints a line and keeps it for `log.txt`.
    pub fn say(&mut self, line: impl AsRef<str>) {
        println!("{}", line.as_ref());
        self.log.push_str(line.as_ref());
        self.log.push('\n');
    }

    pub fn timed<T>(&mut self, phase: &str, f: impl FnOnce(&mut Self) -> T) -> T {
        let t = Instant::now();
        let out = f(self);
        self.manifest.timings_s.insert(phase.to_string(), t.elapsed().as_secs_f64());
        out
    }

    /// Writes the log and the manifest. Returns the run directory.
    pub fn finish(mut self) -> Result<PathBuf, CliError> {
        let log = std::mem::take(&mut self.log);
        self.write("log.txt", log)?;
        self.manifest
            .timings_s
            .insert("total".into(), self.clock.elapsed().as_secs_f64());
        let json = serde_json::to_string_pretty(&self.manifest).expect("manifest serializes");
        let p = self.path.join(MANIFEST);
        let mut f = fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&p)
            .map_err(|e| CliError::Runtime(format!("{}: {e}", p.display())))?;
        std::io::Write::write_all(&mut f, json.as_bytes()).map_err(|e| CliError::io(&p, e))?;
        Ok(self.path)
    }
}
