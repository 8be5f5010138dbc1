use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::backbone::MlpSpec;
use crate::baselines::BaselineConfig;
use crate::error::Result;

use super::TrainConfig;

pub const CSV_HEADER: &str = "epoch,train_loss,eval_loss,metric,wall_ms";

/// Everything needed to reproduce a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: MlpSpec,
    pub baseline: BaselineConfig,
    pub train: TrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub eval_loss: f64,
    /// Accuracy for classification, mean squared error for regression.
    pub metric: f64,
    pub wall_ms: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub epochs_completed: usize,
    pub metric_name: String,
    pub train_loss: f64,
    pub train_metric: f64,
    pub eval_loss: f64,
    pub eval_metric: f64,
    pub trainable_params: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    config: RunConfig,
    pub provenance: String,
    pub rows: Vec<EpochRow>,
    pub summary: Option<RunSummary>,
    /// Reason the run stopped early, if it did.
    pub aborted: Option<String>,
}

fn fmt_f64(v: f64) -> String {
    // shortest representation that round-trips
    format!("{v:?}")
}

impl RunRecord {
    pub fn new(config: RunConfig, provenance: impl Into<String>) -> Self {
        Self {
            config,
            provenance: provenance.into(),
            rows: Vec::new(),
            summary: None,
            aborted: None,
        }
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn is_aborted(&self) -> bool {
        self.aborted.is_some()
    }

    pub fn last_row(&self) -> Option<&EpochRow> {
        self.rows.last()
    }

    /// Row for `epoch`, if one was recorded.
    pub fn row(&self, epoch: usize) -> Option<&EpochRow> {
        self.rows.iter().find(|r| r.epoch == epoch)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                r.epoch,
                fmt_f64(r.train_loss),
                fmt_f64(r.eval_loss),
                fmt_f64(r.metric),
                r.wall_ms
            );
        }
        out
    }

    /// JSON lines: config and provenance first, then one line per row, then summary.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = serde_json::to_string(&serde_json::json!({
            "config": self.config,
            "provenance": self.provenance,
        }))?;
        out.push('\n');
        for r in &self.rows {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        out.push_str(&serde_json::to_string(&serde_json::json!({
            "summary": self.summary,
            "aborted": self.aborted,
        }))?);
        out.push('\n');
        Ok(out)
    }
}
