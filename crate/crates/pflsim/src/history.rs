//! History CSV, run manifest, and the cross-run report.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use pflsim_core::config::{Ablation, RunConfig};
use pflsim_core::federation::{EpochRecord, RoundRecord, RunOutcome};
use pflsim_core::model::ParamAccounting;
use serde::{Deserialize, Serialize};

use crate::error::{format_err, io_err, Error, Result};

pub const COLUMNS: [&str; 9] = ["epoch", "client", "train_loss", "ce", "ld", "reg", "val_acc", "test_acc", "lr"];

pub fn write_csv(path: &Path, records: &[EpochRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| format_err(path, e))?;
    if records.is_empty() {
        w.write_record(COLUMNS).map_err(|e| format_err(path, e))?;
    }
    for r in records {
        w.serialize(r).map_err(|e| format_err(path, e))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_csv(path: &Path) -> Result<Vec<EpochRecord>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| format_err(path, e))?;
    let header = r.headers().map_err(|e| format_err(path, e))?.clone();
    if header.iter().ne(COLUMNS) {
        return Err(format_err(path, format!("unexpected columns {:?}, expected {:?}", header.iter().collect::<Vec<_>>(), COLUMNS)));
    }
    r.deserialize()
        .enumerate()
        .map(|(i, rec)| rec.map_err(|e| Error::Line { path: path.to_path_buf(), line: i + 2, reason: e.to_string() }))
        .collect()
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Everything about a run except the per-epoch rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub seed: u64,
    pub ablation: String,
    pub config: RunConfig,
    pub accounting: ParamAccounting,
    /// Bytes per round when every client sends both towers.
    pub full_round_bytes: u64,
    pub backbone_hash_before: String,
    pub backbone_hash_after: String,
    pub final_test_acc: Vec<f64>,
    pub mean_final_test_acc: f64,
    /// Reliability matrix and payload of every communication round.
    pub rounds: Vec<RoundRecord>,
}

impl RunManifest {
    pub fn new(config: &RunConfig, outcome: &RunOutcome) -> Self {
        Self {
            seed: config.seed,
            ablation: ablation_name(&config.federation.ablation),
            config: config.clone(),
            accounting: outcome.accounting,
            full_round_bytes: outcome.accounting.round_bytes(config.federation.clients as u64),
            backbone_hash_before: hex(&outcome.backbone_hash_before),
            backbone_hash_after: hex(&outcome.backbone_hash_after),
            final_test_acc: outcome.history.final_records().iter().map(|r| r.test_acc).collect(),
            mean_final_test_acc: outcome.history.mean_final_test_acc(),
            rounds: outcome.history.rounds.clone(),
        }
    }
}

pub fn ablation_name(a: &Ablation) -> String {
    match a.preset_name() {
        Some("none") => "pm".to_string(),
        Some(n) => n.to_string(),
        None => format!("custom{:?}", a),
    }
}

/// Mean and sample standard deviation of final test accuracy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub mode: String,
    /// Client index, or `mean` for the per-run average over clients.
    pub client: String,
    pub runs: usize,
    pub mean_test_acc: f64,
    pub std_test_acc: f64,
}

/// The config with every field that may differ between compared runs reset.
fn comparable(c: &RunConfig) -> RunConfig {
    let mut c = c.clone();
    c.seed = 0;
    c.data.synth.seed = 0;
    c.output_dir.clear();
    c.federation.ablation = Ablation::NONE;
    c
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 { xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (mean, var.sqrt())
}

/// Groups history files by ablation mode and summarizes the final epoch of
/// each. Every history needs its `manifest.json` alongside; runs whose
/// configs differ in anything but seed, output directory and ablation are
/// refused.
pub fn report(histories: &[PathBuf]) -> Result<Vec<ReportRow>> {
    if histories.is_empty() {
        return Err(Error::Usage("report needs at least one history file".into()));
    }
    let mut reference: Option<(PathBuf, RunConfig)> = None;
    let mut groups: BTreeMap<String, Vec<Vec<f64>>> = BTreeMap::new();
    for path in histories {
        let manifest_path = path.parent().unwrap_or(Path::new(".")).join(crate::commands::MANIFEST_FILE);
        let text = std::fs::read_to_string(&manifest_path).map_err(io_err(&manifest_path))?;
        let manifest: RunManifest = serde_json::from_str(&text).map_err(|e| format_err(&manifest_path, e))?;
        let cfg = comparable(&manifest.config);
        match &reference {
            None => reference = Some((path.clone(), cfg)),
            Some((first, c)) if *c != cfg => {
                return Err(format_err(path, format!("run config differs from {} beyond seed and ablation; refusing to mix", first.display())));
            }
            Some(_) => {}
        }
        let records = read_csv(path)?;
        let Some(last) = records.iter().map(|r| r.epoch).max() else {
            return Err(format_err(path, "history has no rows"));
        };
        let mut finals: Vec<&EpochRecord> = records.iter().filter(|r| r.epoch == last).collect();
        finals.sort_by_key(|r| r.client);
        if finals.len() != manifest.config.federation.clients || finals.iter().enumerate().any(|(i, r)| r.client != i) {
            return Err(format_err(path, format!("final epoch {last} does not have one row per client")));
        }
        groups.entry(manifest.ablation).or_default().push(finals.iter().map(|r| r.test_acc).collect());
    }
    let mut rows = Vec::new();
    for (mode, runs) in groups {
        let clients = runs[0].len();
        for t in 0..clients {
            let xs: Vec<f64> = runs.iter().map(|r| r[t]).collect();
            let (mean, std) = mean_std(&xs);
            rows.push(ReportRow { mode: mode.clone(), client: t.to_string(), runs: runs.len(), mean_test_acc: mean, std_test_acc: std });
        }
        let per_run: Vec<f64> = runs.iter().map(|r| r.iter().sum::<f64>() / r.len() as f64).collect();
        let (mean, std) = mean_std(&per_run);
        rows.push(ReportRow { mode, client: "mean".into(), runs: runs.len(), mean_test_acc: mean, std_test_acc: std });
    }
    Ok(rows)
}

pub fn write_report(path: &Path, rows: &[ReportRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| format_err(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| format_err(path, e))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn format_report(rows: &[ReportRow]) -> String {
    let mut s = format!("{:<8} {:>6} {:>5} {:>9} {:>9}\n", "mode", "client", "runs", "mean", "std");
    for r in rows {
        s.push_str(&format!("{:<8} {:>6} {:>5} {:>9.4} {:>9.4}\n", r.mode, r.client, r.runs, r.mean_test_acc, r.std_test_acc));
    }
    s
}
