//! Resolved run settings, config loading and the output manifest.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::json;
use stickbreaking::model::CHECKPOINT_FORMAT;
use stickbreaking::verify::Precision;
use stickbreaking::Exec;

/// Versions of the CSV layouts written by the commands.
pub const CSV_SCHEMAS: &[(&str, &str)] = &[
    ("gradcheck.csv", "gradcheck/1"),
    ("equiv.csv", "equiv/1"),
    ("bench.csv", "bench/1"),
    ("arm_*.csv", "metrics/1"),
    ("eval_length.csv", "eval_length/1"),
    ("attn_*.csv", "attention/1"),
];

pub struct RunContext {
    pub command: &'static str,
    pub out: PathBuf,
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub precision: Option<Precision>,
    outputs: Vec<String>,
}

impl RunContext {
    pub fn new(
        command: &'static str,
        out: PathBuf,
        seed: Option<u64>,
        threads: Option<usize>,
        precision: Option<Precision>,
    ) -> Result<Self> {
        std::fs::create_dir_all(&out)
            .with_context(|| format!("creating output directory {}", out.display()))?;
        Ok(Self {
            command,
            out,
            seed,
            threads,
            precision,
            outputs: Vec::new(),
        })
    }

    pub fn exec(&self) -> Exec {
        match self.threads {
            Some(0) | None => Exec::default(),
            Some(1) => Exec::Sequential,
            Some(n) => Exec::threads(n),
        }
    }

    /// Commands whose numerics are 64-bit only reject `--precision f32`.
    pub fn require_f64(&self) -> Result<()> {
        if self.precision == Some(Precision::F32) {
            anyhow::bail!(crate::ConfigError(format!(
                "`{}` runs in 64-bit precision only",
                self.command
            )));
        }
        Ok(())
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    pub fn write(&mut self, name: &str, contents: impl AsRef<[u8]>) -> Result<()> {
        let path = self.path(name);
        std::fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))?;
        self.record(name);
        Ok(())
    }

    pub fn record(&mut self, name: &str) {
        if !self.outputs.iter().any(|o| o == name) {
            self.outputs.push(name.to_string());
        }
    }

    /// `manifest.json`: the resolved configuration plus everything needed to
    /// rerun the command exactly. Contains no timestamps, so reruns produce
    /// identical manifests.
    pub fn write_manifest(&mut self, resolved: &impl Serialize) -> Result<()> {
        let mut outputs = self.outputs.clone();
        outputs.sort();
        let schemas: serde_json::Map<String, serde_json::Value> = CSV_SCHEMAS
            .iter()
            .map(|(k, v)| (k.to_string(), json!(v)))
            .collect();
        let manifest = json!({
            "command": self.command,
            "config": resolved,
            "seed": self.seed,
            "threads": self.threads,
            "precision": self.precision.unwrap_or_default(),
            "versions": {
                "sb": env!("CARGO_PKG_VERSION"),
                "checkpoint_format": CHECKPOINT_FORMAT,
                "csv_schemas": schemas,
            },
            "outputs": outputs,
        });
        let text = serde_json::to_string_pretty(&manifest)?;
        std::fs::write(self.path("manifest.json"), text)?;
        Ok(())
    }
}

/// Parse a JSON config file, or return `T::default()` when none is given.
pub fn load_or_default<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        Some(p) => load(p),
        None => Ok(T::default()),
    }
}

pub fn load<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| crate::ConfigError(format!("cannot read config {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| crate::ConfigError(format!("invalid config {}: {e}", path.display())).into())
}

pub fn require<'a>(path: Option<&'a Path>, command: &str) -> Result<&'a Path> {
    path.ok_or_else(|| crate::ConfigError(format!("`{command}` needs --config <path>")).into())
}
