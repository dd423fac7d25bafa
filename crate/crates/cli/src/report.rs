//! Artifact writers: per-epoch loss curves, the append-only run ledger,
//! metrics documents, and run metadata.
//!
//! Every artifact except `run_meta.json` is a pure function of (config,
//! seed): rerunning a command overwrites byte-identical files. Timestamps
//! live only in run metadata.

use crate::CliError;
use serde::Serialize;
use std::io::Write;
use std::path::Path;
use timedrl_core::evaluation::MetricsReport;
use timedrl_core::trainer::EpochRecord;

/// `losses.csv`: one row per (epoch, split) with the six loss scalars and
/// their combination.
pub fn write_loss_csv(path: &Path, history: &[EpochRecord]) -> Result<(), CliError> {
    let mut out = String::from("epoch,L_P1,L_P2,L_P,L_C1,L_C2,L_C,total,split\n");
    for rec in history {
        let l = &rec.losses;
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            rec.epoch,
            l.l_p1,
            l.l_p2,
            l.l_p,
            l.l_c1,
            l.l_c2,
            l.l_c,
            l.total,
            rec.split.name()
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}

const LEDGER_HEADER: &str =
    "command,task,dataset,config_hash,seed,precision,arm,label_fraction,init,embedding_mode,mse,mae,acc,mf1,kappa,warning\n";

/// One row of the append-only run ledger.
#[derive(Debug, Clone, Default)]
pub struct LedgerRow {
    pub command: String,
    pub task: String,
    pub dataset: String,
    pub config_hash: String,
    pub seed: u64,
    pub precision: String,
    pub arm: String,
    pub label_fraction: Option<f64>,
    pub init: String,
    pub embedding_mode: String,
    pub mse: Option<f64>,
    pub mae: Option<f64>,
    pub acc: Option<f64>,
    pub mf1: Option<f64>,
    pub kappa: Option<f64>,
    pub warning: Option<String>,
}

impl LedgerRow {
    pub fn from_report(command: &str, report: &MetricsReport) -> Self {
        LedgerRow {
            command: command.to_string(),
            task: report.task.clone(),
            dataset: report.dataset_id.clone(),
            config_hash: report.config_hash.clone(),
            seed: report.seed,
            precision: String::new(),
            arm: String::new(),
            label_fraction: Some(report.label_fraction),
            init: report.init_mode.clone(),
            embedding_mode: report.embedding_mode.clone(),
            mse: report.metrics.get("mse").copied(),
            mae: report.metrics.get("mae").copied(),
            acc: report.metrics.get("acc").copied(),
            mf1: report.metrics.get("mf1").copied(),
            kappa: report.metrics.get("kappa").copied(),
            warning: report.warning.clone(),
        }
    }
}

fn opt(v: &Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Append one row, creating the file with its header on first use.
pub fn append_ledger(path: &Path, row: &LedgerRow) -> Result<(), CliError> {
    let fresh = !path.exists();
    let mut file = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
    if fresh {
        file.write_all(LEDGER_HEADER.as_bytes())?;
    }
    let line = format!(
        "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
        row.command,
        row.task,
        row.dataset,
        row.config_hash,
        row.seed,
        row.precision,
        row.arm,
        opt(&row.label_fraction),
        row.init,
        row.embedding_mode,
        opt(&row.mse),
        opt(&row.mae),
        opt(&row.acc),
        opt(&row.mf1),
        opt(&row.kappa),
        row.warning.clone().unwrap_or_default().replace(',', ";"),
    );
    file.write_all(line.as_bytes())?;
    Ok(())
}

pub fn write_report(path: &Path, report: &MetricsReport) -> Result<(), CliError> {
    let json = serde_json::to_string_pretty(report)
        .map_err(|e| CliError::Other(format!("report serialization: {e}")))?;
    std::fs::write(path, json + "\n")?;
    Ok(())
}

/// Run metadata: the only artifact allowed to carry a timestamp.
#[derive(Debug, Serialize)]
pub struct RunMeta {
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub precision: String,
    pub code_version: String,
    pub timestamp_unix: u64,
    pub notes: std::collections::BTreeMap<String, String>,
}

impl RunMeta {
    pub fn new(command: &str, config_hash: &str, seed: u64, precision: &str) -> Self {
        RunMeta {
            command: command.to_string(),
            config_hash: config_hash.to_string(),
            seed,
            precision: precision.to_string(),
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            timestamp_unix: std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
            notes: std::collections::BTreeMap::new(),
        }
    }

    pub fn note(mut self, key: &str, value: &str) -> Self {
        self.notes.insert(key.to_string(), value.to_string());
        self
    }

    pub fn write(&self, path: &Path) -> Result<(), CliError> {
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| CliError::Other(format!("run meta serialization: {e}")))?;
        std::fs::write(path, json + "\n")?;
        Ok(())
    }
}

/// Embeddings CSV: one row per sample, one column per dimension.
pub fn write_embeddings_csv(path: &Path, rows: &[Vec<f64>]) -> Result<(), CliError> {
    let dims = rows.first().map(|r| r.len()).unwrap_or(0);
    let mut out = String::new();
    out.push_str("sample");
    for d in 0..dims {
        out.push_str(&format!(",e{d}"));
    }
    out.push('\n');
    for (i, row) in rows.iter().enumerate() {
        out.push_str(&i.to_string());
        for v in row {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}
