//! The five operator commands. Each one is deterministic given its inputs.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use pflsim_core::config::RunConfig;
use pflsim_core::data::{gen_synthetic, split, ClientDataset, DataLimits};
use pflsim_core::federation::{evaluate, run_observed, split_ratios, ClientParams, Executor, RunOutcome};
use pflsim_core::model::{Backbone, Modality, ModalityPair, ParamAccounting, PromptKind};
use serde::{Deserialize, Serialize};

use crate::error::{format_err, io_err, Error, Result};
use crate::formats::{self, load_jsonl, write_jsonl};
use crate::history::{self, RunManifest};

pub const HISTORY_FILE: &str = "history.csv";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const ACCOUNTING_FILE: &str = "accounting.json";

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| format_err(path, e))?;
    text.push('\n');
    fs::write(path, text).map_err(io_err(path))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| format_err(path, e))
}

/// The config's datasets: loaded JSONL files when listed, otherwise the
/// synthetic generator. Every sample is checked against the model limits.
pub fn datasets(config: &RunConfig) -> Result<Vec<ClientDataset>> {
    config.validate()?;
    let m = &config.model;
    let limits =
        DataLimits { image_vocab: m.image_vocab, text_vocab: m.text_vocab, image_seq_len: m.image_seq_len, text_seq_len: m.text_seq_len };
    let sets = if config.data.jsonl.is_empty() {
        let clients = gen_synthetic(&config.data.synth).map_err(|e| Error::Data { path: "<synthetic>".into(), reason: e })?;
        clients.into_iter().map(|c| (PathBuf::from("<synthetic>"), c.dataset)).collect::<Vec<_>>()
    } else {
        let mut out = Vec::new();
        for (i, p) in config.data.jsonl.iter().enumerate() {
            let path = PathBuf::from(p);
            if !path.is_file() {
                return Err(pflsim_core::config::ConfigError::new(format!("data.jsonl[{i}]"), format!("{p} is not a file")).into());
            }
            let ds = load_jsonl(&path)?;
            out.push((path, ds));
        }
        out
    };
    for (path, ds) in &sets {
        ds.validate(&limits).map_err(|reason| Error::Data { path: path.clone(), reason })?;
    }
    Ok(sets.into_iter().map(|(_, d)| d).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataManifestEntry {
    pub file: String,
    pub samples: usize,
    pub num_answers: usize,
    pub label_marginals: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataManifest {
    pub seed: u64,
    pub clients: Vec<DataManifestEntry>,
}

/// Writes `client{t}.jsonl` per synthetic client plus `data_manifest.json`.
pub fn gen_data(config: &RunConfig, out: &Path) -> Result<DataManifest> {
    config.data.synth.validate()?;
    create_dir(out)?;
    let clients = gen_synthetic(&config.data.synth).map_err(|e| Error::Data { path: out.to_path_buf(), reason: e })?;
    let mut entries = Vec::with_capacity(clients.len());
    for (t, c) in clients.iter().enumerate() {
        let file = format!("client{t}.jsonl");
        write_jsonl(&out.join(&file), &c.dataset)?;
        entries.push(DataManifestEntry {
            file,
            samples: c.dataset.len(),
            num_answers: c.dataset.num_answers,
            label_marginals: c.dataset.label_distribution(),
        });
    }
    let manifest = DataManifest { seed: config.data.synth.seed, clients: entries };
    write_json(&out.join("data_manifest.json"), &manifest)?;
    info!("wrote {} client datasets to {}", manifest.clients.len(), out.display());
    Ok(manifest)
}

pub fn write_checkpoint(dir: &Path, clients: &[ClientParams]) -> Result<()> {
    create_dir(dir)?;
    for c in clients {
        for m in Modality::ALL {
            formats::write_prompt(dir, c.id, c.local.get(m))?;
            formats::write_prompt(dir, c.id, c.shared.get(m))?;
        }
        formats::write_head(dir, c.id, &c.head)?;
    }
    Ok(())
}

pub fn read_checkpoint(dir: &Path, config: &RunConfig) -> Result<Vec<ClientParams>> {
    (0..config.federation.clients)
        .map(|t| {
            let read = |m, kind| formats::read_prompt(dir, t, m, kind);
            let local = ModalityPair { image: read(Modality::Image, PromptKind::Local)?, text: read(Modality::Text, PromptKind::Local)? };
            let shared =
                ModalityPair { image: read(Modality::Image, PromptKind::Shared)?, text: read(Modality::Text, PromptKind::Shared)? };
            let head = formats::read_head(dir, t, config.model.head_dropout)?;
            Ok(ClientParams { id: t, local, shared, head, acc: 0.0 })
        })
        .collect()
}

/// Federated training, then `history.csv`, `manifest.json` and
/// `checkpoints/` under `out`.
pub fn train<E: Executor>(config: &RunConfig, executor: &E, out: &Path) -> Result<RunOutcome> {
    let data = datasets(config)?;
    create_dir(out)?;
    let outcome = run_observed(config, data, executor, |epoch, msgs| {
        info!("epoch {epoch}: exchanged prompts of {} clients", msgs.len());
    });
    let outcome = match outcome {
        Ok(o) => o,
        Err(failure) => {
            history::write_csv(&out.join(HISTORY_FILE), &failure.history.records)?;
            return Err(failure.into());
        }
    };
    history::write_csv(&out.join(HISTORY_FILE), &outcome.history.records)?;
    let manifest = RunManifest::new(config, &outcome);
    write_json(&out.join(MANIFEST_FILE), &manifest)?;
    let ckpt = out.join(CHECKPOINT_DIR);
    write_checkpoint(&ckpt, &outcome.clients)?;
    write_json(&ckpt.join(ACCOUNTING_FILE), &outcome.accounting)?;
    info!("mean final test accuracy {:.4}", outcome.history.mean_final_test_acc());
    Ok(outcome)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub client: usize,
    pub test_acc: f64,
}

/// Test accuracy of every checkpointed client on its own test split.
pub fn eval(config: &RunConfig, checkpoint_dir: &Path, out: &Path) -> Result<Vec<EvalRow>> {
    let data = datasets(config)?;
    let params = read_checkpoint(checkpoint_dir, config)?;
    let backbone = Backbone::init(&config.model, config.seed)?;
    let ratios = split_ratios(config);
    let mut rows = Vec::with_capacity(params.len());
    for (t, (p, ds)) in params.iter().zip(&data).enumerate() {
        if p.head.answers() != ds.num_answers {
            return Err(format_err(
                &checkpoint_dir.join(formats::head_file_name(t, "w2")),
                format!("head has {} answers, dataset of client {t} has {}", p.head.answers(), ds.num_answers),
            ));
        }
        let splits = split(ds, ratios, config.seed.wrapping_add(t as u64))?;
        let acc = evaluate(p, &backbone, &splits.test, &config.federation.ablation, config.schedule.batch_size)?;
        rows.push(EvalRow { client: t, test_acc: acc });
    }
    create_dir(out)?;
    let path = out.join("eval.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| format_err(&path, e))?;
    for r in &rows {
        w.serialize(r).map_err(|e| format_err(&path, e))?;
    }
    w.flush().map_err(io_err(&path))?;
    Ok(rows)
}

/// Copies every prompt of a checkpoint into `out` (re-validating each file)
/// and writes the parameter-accounting record next to them.
pub fn export_prompts(checkpoint_dir: &Path, out: &Path) -> Result<Vec<PathBuf>> {
    let mut found: BTreeMap<(usize, Modality, PromptKind), ()> = BTreeMap::new();
    let entries = fs::read_dir(checkpoint_dir).map_err(io_err(checkpoint_dir))?;
    for e in entries {
        let path = e.map_err(io_err(checkpoint_dir))?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        if !name.ends_with(".bin") || name.contains("_head_") {
            continue;
        }
        let (h, _) = formats::read_tensor(&path)?;
        let (Some(m), Ok(kind)) = (h.modality, serde_json::from_value::<PromptKind>(h.kind.clone().into())) else {
            return Err(format_err(&path, "not a prompt file"));
        };
        found.insert((h.client, m, kind), ());
    }
    if found.is_empty() {
        return Err(format_err(checkpoint_dir, "no prompt checkpoints found"));
    }
    create_dir(out)?;
    let mut written = Vec::with_capacity(found.len());
    for &(client, m, kind) in found.keys() {
        let p = formats::read_prompt(checkpoint_dir, client, m, kind)?;
        formats::write_prompt(out, client, &p)?;
        written.push(out.join(formats::prompt_file_name(client, m, kind)));
    }
    let acc_path = checkpoint_dir.join(ACCOUNTING_FILE);
    let accounting: ParamAccounting = read_json(&acc_path)?;
    write_json(&out.join(ACCOUNTING_FILE), &accounting)?;
    Ok(written)
}
