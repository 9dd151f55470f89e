//! Run manifests: a key-value record of the exact configuration of one CLI
//! invocation, written next to its outputs.

use std::path::{Path, PathBuf};

use super::kv::KvMap;
use crate::error::{Error, Result};

pub const FORMAT_TAG: &str = "mvs-run/1";

#[derive(Debug, Clone, Default)]
pub struct RunManifest {
    pub command: String,
    pub inputs: Vec<PathBuf>,
    pub config: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub artifacts: Vec<String>,
    pub extra: Vec<(String, String)>,
}

impl RunManifest {
    pub fn new(command: &str, output_dir: &Path) -> Self {
        Self {
            command: command.to_string(),
            output_dir: output_dir.to_path_buf(),
            ..Self::default()
        }
    }

    /// Abort early when a referenced input is missing, before any output is
    /// written.
    pub fn check_inputs(&self) -> Result<()> {
        for p in &self.inputs {
            if !p.exists() {
                return Err(Error::usage(format!(
                    "input path does not exist: {}",
                    p.display()
                )));
            }
        }
        if let Some(c) = &self.config {
            if !c.exists() {
                return Err(Error::usage(format!(
                    "config path does not exist: {}",
                    c.display()
                )));
            }
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: impl std::fmt::Display) {
        self.extra.push((key.to_string(), value.to_string()));
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut kv = KvMap::new();
        kv.set("format", FORMAT_TAG);
        kv.set("command", &self.command);
        kv.set("output", self.output_dir.display());
        if let Some(c) = &self.config {
            kv.set("config", c.display());
        }
        for (i, input) in self.inputs.iter().enumerate() {
            kv.set(&format!("input.{i}"), input.display());
        }
        for (i, a) in self.artifacts.iter().enumerate() {
            kv.set(&format!("artifact.{i}"), a);
        }
        for (k, v) in &self.extra {
            kv.set(k, v);
        }
        kv.save(path)
    }
}
