use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::Context;
use chrono::Utc;
use serde::Serialize;

#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub tool_version: String,
    pub started_at: String,
    pub wall_clock_secs: f64,
    pub status: String,
}

/// A fresh output directory plus the manifest being filled in for it.
pub struct Run {
    pub dir: PathBuf,
    pub manifest: RunManifest,
    started: Instant,
}

impl Run {
    /// Create `out/<command>-<UTC timestamp>/`.
    pub fn create(out: &Path, command: &str) -> anyhow::Result<Run> {
        let now = Utc::now();
        let stamp = now.format("%Y%m%dT%H%M%S%.3fZ").to_string();
        let mut dir = out.join(format!("{command}-{stamp}"));
        let mut n = 1;
        while dir.exists() {
            dir = out.join(format!("{command}-{stamp}-{n}"));
            n += 1;
        }
        std::fs::create_dir_all(&dir)
            .map_err(|e| integral_core::Error::io(&dir, e))
            .with_context(|| format!("creating output directory for {command}"))?;
        Ok(Run {
            dir,
            manifest: RunManifest {
                command: command.to_string(),
                config: serde_json::Value::Null,
                seed: None,
                inputs: Vec::new(),
                outputs: Vec::new(),
                tool_version: env!("CARGO_PKG_VERSION").to_string(),
                started_at: now.to_rfc3339(),
                wall_clock_secs: 0.0,
                status: "running".into(),
            },
            started: Instant::now(),
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn output(&mut self, path: PathBuf) -> PathBuf {
        self.manifest.outputs.push(path.clone());
        path
    }

    pub fn finish(&mut self, status: &str) -> anyhow::Result<PathBuf> {
        self.manifest.wall_clock_secs = self.started.elapsed().as_secs_f64();
        self.manifest.status = status.to_string();
        let path = self.dir.join("manifest.json");
        let body = serde_json::to_string_pretty(&self.manifest)?;
        std::fs::write(&path, body).map_err(|e| integral_core::Error::io(&path, e))?;
        Ok(path)
    }
}
