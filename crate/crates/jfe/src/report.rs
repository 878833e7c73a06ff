//! Machine-readable evaluation reports and training logs.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use jfe_core::eval::EvalReport;
use jfe_core::trainer::{Checkpoint, Stage, StepLog};
use serde::{Deserialize, Serialize};

use crate::error::{JfeError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRow {
    pub dataset: String,
    pub task: String,
    pub k: usize,
    pub recall: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionalRow {
    pub subtask: String,
    pub recall_at_1: f64,
    pub recall_at_2: f64,
    pub recall_at_3: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointSummary {
    pub stage: String,
    pub stages: Vec<Stage>,
    pub steps: u64,
    pub parameters: usize,
}

impl CheckpointSummary {
    pub fn of(ckpt: &Checkpoint) -> Self {
        Self {
            stage: ckpt.stage_tag().to_string(),
            stages: ckpt.stages.clone(),
            steps: ckpt.steps,
            parameters: ckpt.store.scalar_count(),
        }
    }
}

/// The evaluation report document. Field order and number formatting are
/// stable, so equal runs give byte-identical files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportDoc {
    pub config: serde_json::Value,
    pub checkpoint: CheckpointSummary,
    pub scope: String,
    pub use_instructions: bool,
    pub results: Vec<DatasetRow>,
    pub conditional: Vec<ConditionalRow>,
    pub category_avg: BTreeMap<String, f64>,
    pub overall_avg: f64,
}

impl ReportDoc {
    pub fn new(report: &EvalReport, ckpt: &Checkpoint, config: serde_json::Value) -> Self {
        Self {
            config,
            checkpoint: CheckpointSummary::of(ckpt),
            scope: report.scope.as_str().to_string(),
            use_instructions: report.use_instructions,
            results: report
                .results
                .iter()
                .map(|r| DatasetRow {
                    dataset: r.dataset.clone(),
                    task: r.task.as_str().into(),
                    k: r.k,
                    recall: r.recall,
                })
                .collect(),
            conditional: report
                .conditional
                .iter()
                .map(|c| ConditionalRow {
                    subtask: c.subtask.as_str().into(),
                    recall_at_1: c.recall[0],
                    recall_at_2: c.recall[1],
                    recall_at_3: c.recall[2],
                })
                .collect(),
            category_avg: report
                .category_avg
                .iter()
                .map(|(c, v)| (c.as_str().to_string(), *v))
                .collect(),
            overall_avg: report.overall_avg,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = serde_json::to_vec_pretty(self).expect("report serializes");
        out.push(b'\n');
        out
    }

    pub fn category(&self, name: &str) -> Option<f64> {
        self.category_avg.get(name).copied()
    }
}

/// One line of the metrics log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsLine {
    pub stage: Stage,
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
}

/// Appends `(stage, step, lr, loss)` lines as JSON.
#[derive(Debug)]
pub struct MetricsLog<W: Write> {
    out: W,
}

impl<W: Write> MetricsLog<W> {
    pub fn new(out: W) -> Self {
        Self { out }
    }

    pub fn write(&mut self, stage: Stage, log: &[StepLog]) -> std::io::Result<()> {
        for l in log {
            let line = MetricsLine {
                stage,
                step: l.step,
                lr: l.lr,
                loss: l.loss,
            };
            serde_json::to_writer(&mut self.out, &line)?;
            self.out.write_all(b"\n")?;
        }
        self.out.flush()
    }
}

pub fn write_report(path: &Path, doc: &ReportDoc) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| JfeError::io(dir, e))?;
    }
    std::fs::write(path, doc.to_bytes()).map_err(|e| JfeError::io(path, e))
}
