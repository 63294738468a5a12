use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Instant;

use pflsim::commands::{self, CHECKPOINT_DIR, HISTORY_FILE};
use pflsim::config::to_toml;
use pflsim::formats;
use pflsim::history::{self, read_csv};
use pflsim_core::config::{Ablation, RunConfig};
use pflsim_core::federation::setup;
use pflsim_core::model::{Modality, ModelConfig, PromptKind};

fn pflsim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pflsim")).args(args).env("PFLSIM_LOG", "warn").output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = pflsim(args);
    assert!(out.status.success(), "pflsim {args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn smoke_config() -> RunConfig {
    let mut c = RunConfig::default();
    c.data.synth.clients.truncate(2);
    c.federation.clients = 2;
    c.schedule.global_epochs = 1;
    c.model = ModelConfig { width: 16, ..ModelConfig::for_synth(&c.data.synth) };
    c
}

fn write_config(dir: &Path, name: &str, c: &RunConfig) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, to_toml(c)).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn gen_data_writes_paper_sized_clients_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("nested/a");
    let b = dir.path().join("b");
    ok(&["gen-data", "--seed", "3", "--out", s(&a)]);
    ok(&["gen-data", "--seed", "3", "--out", s(&b)]);
    let mut sizes = Vec::new();
    for t in 0..4 {
        let name = format!("client{t}.jsonl");
        let bytes = fs::read(a.join(&name)).unwrap();
        assert_eq!(bytes, fs::read(b.join(&name)).unwrap());
        sizes.push(bytes.iter().filter(|&&c| c == b'\n').count());
    }
    assert_eq!(sizes, [734, 829, 461, 335]);
    let manifest: serde_json::Value = serde_json::from_slice(&fs::read(a.join("data_manifest.json")).unwrap()).unwrap();
    let clients = manifest["clients"].as_array().unwrap();
    assert_eq!(clients[2]["samples"], 461);
    let marg: f64 = clients[0]["label_marginals"].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).sum();
    assert!((marg - 1.0).abs() < 1e-9);
}

#[test]
fn smoke_train_eval_export() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "smoke.toml", &smoke_config());
    let run = dir.path().join("run");
    let start = Instant::now();
    ok(&["train", "--config", s(&cfg), "--out", s(&run)]);
    let secs = start.elapsed().as_secs_f64();
    assert!(secs < 30.0, "smoke run took {secs:.1}s");

    let hist = read_csv(&run.join(HISTORY_FILE)).unwrap();
    assert_eq!(hist.len(), 2);

    let table = ok(&["eval", "--config", s(&cfg), "--out", s(&run)]);
    assert!(table.starts_with("client test_acc"));
    let eval: Vec<commands::EvalRow> =
        csv::Reader::from_path(run.join("eval.csv")).unwrap().deserialize().collect::<Result<_, _>>().unwrap();
    assert_eq!(eval.len(), 2);
    for (row, rec) in eval.iter().zip(&hist) {
        assert_eq!(row.client, rec.client);
        assert_eq!(row.test_acc, rec.test_acc);
    }

    let exported = dir.path().join("prompts");
    ok(&["export-prompts", s(&run.join(CHECKPOINT_DIR)), s(&exported)]);
    let bins = fs::read_dir(&exported).unwrap().filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "bin")).count();
    assert_eq!(bins, 2 * 2 * 2);
    assert!(exported.join("accounting.json").is_file());
    let ckpt = run.join(CHECKPOINT_DIR);
    for t in 0..2 {
        for m in Modality::ALL {
            for kind in [PromptKind::Local, PromptKind::Shared] {
                let p = formats::read_prompt(&exported, t, m, kind).unwrap();
                assert_eq!(p.shape(), [4, 4, 16]);
                assert_eq!(p, formats::read_prompt(&ckpt, t, m, kind).unwrap());
            }
        }
    }
}

#[test]
fn same_seed_gives_identical_history() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "smoke.toml", &smoke_config());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&["train", "--config", s(&cfg), "--out", s(&a), "--ablation", "no_communication"]);
    ok(&["train", "--config", s(&cfg), "--out", s(&b), "--ablation", "as2"]);
    assert_eq!(fs::read(a.join(HISTORY_FILE)).unwrap(), fs::read(b.join(HISTORY_FILE)).unwrap());
    let hist = read_csv(&a.join(HISTORY_FILE)).unwrap();
    assert!(hist.iter().all(|r| r.ld == 0.0));
    let manifest: serde_json::Value = serde_json::from_slice(&fs::read(a.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["ablation"], "as2");
    assert!(manifest["rounds"].as_array().unwrap().is_empty());
}

#[test]
fn report_groups_seeds_and_refuses_mixed_configs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "smoke.toml", &smoke_config());
    let mut runs = Vec::new();
    for seed in 0..3 {
        let out = dir.path().join(format!("seed{seed}"));
        ok(&["train", "--config", s(&cfg), "--seed", &seed.to_string(), "--out", s(&out)]);
        runs.push(out.join(HISTORY_FILE));
    }

    let single = history::report(&runs[..1]).unwrap();
    let finals = read_csv(&runs[0]).unwrap();
    assert_eq!(single.len(), 3);
    for (row, rec) in single.iter().zip(&finals) {
        assert_eq!((row.runs, row.mean_test_acc, row.std_test_acc), (1, rec.test_acc, 0.0));
    }

    let report_dir = dir.path().join("report");
    let paths: Vec<&str> = runs.iter().map(|p| s(p)).collect();
    let mut args = vec!["report", "--out", s(&report_dir)];
    args.extend(&paths);
    let table = ok(&args);
    assert!(table.contains("mean"), "{table}");
    let rows = history::report(&runs).unwrap();
    let accs: Vec<f64> = runs.iter().map(|p| read_csv(p).unwrap()[1].test_acc).collect();
    let mean = accs.iter().sum::<f64>() / 3.0;
    let std = (accs.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / 2.0).sqrt();
    assert_eq!(rows[1].runs, 3);
    assert!((rows[1].mean_test_acc - mean).abs() < 1e-12);
    assert!((rows[1].std_test_acc - std).abs() < 1e-12);
    assert!(report_dir.join("report.csv").is_file());

    let mut other = smoke_config();
    other.losses.beta = 0.01;
    let cfg2 = write_config(dir.path(), "other.toml", &other);
    let odd = dir.path().join("odd");
    ok(&["train", "--config", s(&cfg2), "--out", s(&odd)]);
    let out = pflsim(&["report", "--out", s(&report_dir), paths[0], s(&odd.join(HISTORY_FILE))]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("refusing to mix"));

    fs::create_dir_all(dir.path().join("x")).unwrap();
    let moved = dir.path().join("x").join("h.csv");
    fs::copy(&runs[0], &moved).unwrap();
    assert!(history::report(&[moved]).unwrap_err().to_string().contains("manifest.json"));
}

#[test]
fn errors_name_what_went_wrong() {
    let dir = tempfile::tempdir().unwrap();
    let mut bad = smoke_config();
    bad.model.heads = 3;
    let cfg = write_config(dir.path(), "bad.toml", &bad);
    let out = pflsim(&["train", "--config", s(&cfg), "--out", s(&dir.path().join("r"))]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("model.heads"));

    let good = write_config(dir.path(), "good.toml", &smoke_config());
    let empty = dir.path().join("empty");
    fs::create_dir_all(&empty).unwrap();
    let out = pflsim(&["eval", "--config", s(&good), "--checkpoint", s(&empty), "--out", s(&empty)]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("client 0"));

    let out = pflsim(&["train", "--ablation", "as9", "--out", s(&empty)]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("--ablation"));
}

#[test]
fn untrained_checkpoint_scores_near_chance() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = smoke_config();
    c.data.synth.clients.truncate(1);
    c.federation.clients = 1;
    c.federation.ablation = Ablation::preset("as2").unwrap();
    let slots = c.data.synth.slots;
    let values = c.data.synth.values_per_slot;
    let profile = &mut c.data.synth.clients[0];
    profile.samples = 1000;
    profile.slot_weights = vec![1.0; slots];
    profile.value_weights = vec![1.0; values];
    let answers = (slots * values) as f64;
    let mut total = 0.0;
    let seeds = 5;
    for seed in 0..seeds {
        c.seed = seed;
        c.data.synth.seed = seed;
        let data = commands::datasets(&c).unwrap();
        let (_, clients) = setup(&c, data).unwrap();
        let ckpt = dir.path().join(format!("ckpt{seed}"));
        let params: Vec<_> = clients.into_iter().map(|cl| cl.params).collect();
        commands::write_checkpoint(&ckpt, &params).unwrap();
        total += commands::eval(&c, &ckpt, &ckpt).unwrap()[0].test_acc;
    }
    let mean = total / seeds as f64;
    // 5 × 150 test answers: the sd of the mean under chance is about 0.007.
    assert!((mean - 1.0 / answers).abs() < 0.05, "mean acc {mean}, chance {}", 1.0 / answers);
}
