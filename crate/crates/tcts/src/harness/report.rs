//! Training reports: per-epoch CSV rows plus a JSON sidecar.
//!
//! The CSV is the hashed artifact; wall time lives only in the sidecar so
//! two identical runs produce identical report hashes.

use std::path::Path;

use serde::Serialize;

use crate::metrics::MetricReport;

use super::config::{sha256_hex, HarnessError, Mode};

#[derive(Debug, Clone)]
pub struct EpochRow {
    pub epoch: usize,
    /// Mean training loss for XE-style stages, mean reward for RL stages.
    pub train_metric: f64,
    pub val: MetricReport,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub mode: Mode,
    pub seed: u64,
    pub batch_size: usize,
    pub rows: Vec<EpochRow>,
    pub test: MetricReport,
    pub wall_time_s: f64,
    pub config_hash: String,
    /// Mean loss per optimizer step, in step order (not part of the CSV).
    pub step_losses: Vec<f64>,
}

#[derive(Serialize)]
struct Sidecar<'a> {
    version: u32,
    mode: String,
    seed: u64,
    batch_size: usize,
    epochs: usize,
    config_hash: &'a str,
    report_sha256: String,
    wall_time_s: f64,
}

impl TrainReport {
    pub fn csv(&self) -> String {
        let mut out = String::from("row,train_metric,bleu1,bleu2,bleu3,bleu4,rougeL,cider\n");
        for row in &self.rows {
            out.push_str(&format!(
                "{},{},{}\n",
                row.epoch,
                row.train_metric,
                metric_cells(&row.val)
            ));
        }
        out.push_str(&format!("test,,{}\n", metric_cells(&self.test)));
        out
    }

    /// SHA-256 of the CSV payload; the determinism fingerprint of a run.
    pub fn hash(&self) -> String {
        sha256_hex(self.csv().as_bytes())
    }

    /// Writes `path` (CSV) and `path.json` (sidecar).
    pub fn write(&self, path: &Path) -> Result<(), HarnessError> {
        std::fs::write(path, self.csv())?;
        let sidecar = Sidecar {
            version: 1,
            mode: self.mode.to_string(),
            seed: self.seed,
            batch_size: self.batch_size,
            epochs: self.rows.len(),
            config_hash: &self.config_hash,
            report_sha256: self.hash(),
            wall_time_s: self.wall_time_s,
        };
        let json = serde_json::to_string_pretty(&sidecar)
            .map_err(|e| HarnessError::Numeric(format!("sidecar serialization failed: {e}")))?;
        let mut sidecar_path = path.as_os_str().to_owned();
        sidecar_path.push(".json");
        std::fs::write(sidecar_path, json)?;
        Ok(())
    }
}

fn metric_cells(m: &MetricReport) -> String {
    format!(
        "{},{},{},{},{},{}",
        m.bleu[0], m.bleu[1], m.bleu[2], m.bleu[3], m.rouge_l, m.cider
    )
}

/// Per-record scoring rows emitted by `eval` and `score`.
pub fn scores_csv(rows: &[(String, MetricReport)], mean: Option<&MetricReport>) -> String {
    let mut out = String::from("id,bleu1,bleu2,bleu3,bleu4,rougeL,cider\n");
    for (id, m) in rows {
        out.push_str(&format!("{id},{}\n", metric_cells(m)));
    }
    if let Some(m) = mean {
        out.push_str(&format!("mean,{}\n", metric_cells(m)));
    }
    out
}
