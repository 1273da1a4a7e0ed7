//! Versioned JSON checkpoints.
//!
//! Layout (`schema_version` 1):
//!
//! ```text
//! {
//!   "schema_version": 1,
//!   "model":  { "base": {...frozen tensors...}, "attachments": {...}, "text_sees_prefix": true },
//!   "search": null | { "config": {...}, "state": {...optimizer moments, alpha history...} },
//!   "data": null | { "task": "copy", "size": 120, "params": {...}, "corpus": null },
//!   "seed": 7,
//!   "metrics": [ ...per-epoch rows... ]
//! }
//! ```
//!
//! Tensors are `{ "shape": [..], "data": [..] }` with shortest round-trip
//! float formatting, so save → load is bit-exact.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::DataConfig;
use crate::error::{Error, Result};
use crate::model::AdaptedModel;
use crate::report::write_atomic;
use crate::search::{EpochMetrics, SearchConfig, SearchState};

pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchProgress {
    pub config: SearchConfig,
    pub state: SearchState,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub schema_version: u32,
    pub model: AdaptedModel,
    #[serde(default)]
    pub search: Option<SearchProgress>,
    /// Data source and seed the model was trained on, for `eval`.
    #[serde(default)]
    pub data: Option<DataConfig>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub metrics: Vec<EpochMetrics>,
}

impl Checkpoint {
    pub fn new(model: AdaptedModel) -> Self {
        Self {
            schema_version: CHECKPOINT_SCHEMA_VERSION,
            model,
            search: None,
            data: None,
            seed: 0,
            metrics: Vec::new(),
        }
    }

    pub fn with_data(mut self, data: DataConfig, seed: u64) -> Self {
        self.data = Some(data);
        self.seed = seed;
        self
    }

    pub fn with_metrics(mut self, metrics: Vec<EpochMetrics>) -> Self {
        self.metrics = metrics;
        self
    }

    pub fn with_search(mut self, state: SearchState, config: SearchConfig) -> Self {
        self.search = Some(SearchProgress { config, state });
        self
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Self = serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        if ck.schema_version != CHECKPOINT_SCHEMA_VERSION {
            return Err(Error::validation(
                "schema_version",
                format!("unsupported checkpoint version {}", ck.schema_version),
            ));
        }
        ck.model.config().validate()?;
        for att in ck.model.attachments.values() {
            if let crate::model::Attachment::Super(m) = att {
                m.validate()?;
            }
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_json().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}
