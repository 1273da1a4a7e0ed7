//! Artifact emission: rank maps, per-epoch metrics and run manifests.
//!
//! Every file is written to a temporary sibling and renamed into place, so a
//! reader never observes a partial artifact.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::search::EpochMetrics;
use crate::supernet::RankMap;

/// Environment variable naming the default output directory.
pub const OUT_DIR_ENV: &str = "LORA_NAS_OUT_DIR";

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(&dir).map_err(|e| Error::io(path, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub fn export_rank_map(map: &RankMap, path: &Path) -> Result<()> {
    write_atomic(path, map.to_json().as_bytes())
}

pub fn load_rank_map(path: &Path) -> Result<RankMap> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    RankMap::from_json(&text)
}

/// CSV with one row per epoch. The wall-clock column is opt-in because it
/// is the only value that differs between otherwise identical runs.
pub fn metrics_csv(metrics: &[EpochMetrics], wall_clock: bool) -> Result<String> {
    if metrics.is_empty() {
        return Err(Error::arg("no recorded epochs to export"));
    }
    let mut out = String::from("phase,epoch,train_loss,val_loss,eval_perplexity,trainable_params");
    if wall_clock {
        out.push_str(",wall_seconds");
    }
    out.push('\n');
    for m in metrics {
        write!(
            out,
            "{},{},{:?},{:?},{:?},{}",
            m.phase.as_str(),
            m.epoch,
            m.train_loss,
            m.val_loss,
            m.eval_perplexity,
            m.trainable_params
        )
        .expect("string write");
        if wall_clock {
            write!(out, ",{:.3}", m.wall_seconds).expect("string write");
        }
        out.push('\n');
    }
    Ok(out)
}

pub fn export_metrics_csv(metrics: &[EpochMetrics], path: &Path, wall_clock: bool) -> Result<()> {
    write_atomic(path, metrics_csv(metrics, wall_clock)?.as_bytes())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// Fully materialized configuration; feeding it back reproduces the run.
    pub config: serde_json::Value,
    pub seed: u64,
    pub started_at: String,
    pub finished_at: String,
    pub artifacts: Vec<PathBuf>,
    /// Per-epoch wall-clock seconds, kept out of the metrics file.
    #[serde(default)]
    pub epoch_seconds: Vec<f64>,
    pub tool_version: String,
}

impl RunManifest {
    pub fn begin(command: &str, config: serde_json::Value, seed: u64) -> Self {
        Self {
            command: command.to_string(),
            config,
            seed,
            started_at: chrono::Utc::now().to_rfc3339(),
            finished_at: String::new(),
            artifacts: Vec::new(),
            epoch_seconds: Vec::new(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
        }
    }

    pub fn finish(&mut self) {
        self.finished_at = chrono::Utc::now().to_rfc3339();
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        write_atomic(path, s.as_bytes())
    }
}
