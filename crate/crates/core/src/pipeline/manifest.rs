use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;

/// Per-stage bookkeeping; a stage is complete iff it has a record.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    /// File names relative to the run directory.
    pub artifacts: Vec<String>,
    pub wall_clock_s: f64,
    pub model_rollouts: usize,
    pub true_rollouts: usize,
}

/// True-system usage. Evaluation rollouts are kept apart from the budget N.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BudgetLedger {
    pub total: usize,
    pub initial: usize,
    pub initial_used: usize,
    pub sequential_used: usize,
    pub evaluation_queries: usize,
}

impl BudgetLedger {
    pub fn training_queries(&self) -> usize {
        self.initial_used + self.sequential_used
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub seed: u64,
    pub stages: BTreeMap<String, StageRecord>,
    pub budget: BudgetLedger,
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Option<Self>> {
        if !path.exists() {
            return Ok(None);
        }
        Ok(Some(serde_json::from_str(&fs::read_to_string(path)?)?))
    }

    /// Writes through a temporary file so a crash never leaves half a manifest.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("json.tmp");
        fs::write(&tmp, serde_json::to_string_pretty(self)?)?;
        fs::rename(tmp, path)?;
        Ok(())
    }
}
