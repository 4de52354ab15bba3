use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use drs::checkpoint::Checkpoint;
use serde_json::Value;
use tempfile::TempDir;

fn drs(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_drs"))
        .args(args)
        .arg("--quiet")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn json(out: &Output) -> Value {
    assert_eq!(code(out), 0, "stderr: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("JSON on stdout")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const CORPUS: &str = "1\thello there\thow are you\tfine thanks\n\
0\thello there\thow are you\tno idea\n\
1\tany plans\tgoing home\tsounds good\n";

fn corpus(dir: &TempDir) -> PathBuf {
    let path = dir.path().join("train.tsv");
    fs::write(&path, CORPUS).unwrap();
    path
}

/// A small synthetic corpus plus the tiny-model flags shared by the training tests.
fn synth(dir: &TempDir) -> PathBuf {
    let out = dir.path().join("synth");
    let o = drs(&["synth", "--output", p(&out), "--dialogues", "100", "--seed", "3",
        "--set", "synth_valid_groups=8", "--set", "synth_test_groups=8"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    out
}

const TINY: &[&str] = &["--model", "tiny", "--hidden", "16", "--max-len", "24", "--batch-size", "16",
    "--warmup-steps", "2", "--learning-rate", "1e-3"];

#[test]
fn stats_reports_counts_and_provenance() {
    let dir = TempDir::new().unwrap();
    let v = json(&drs(&["stats", "--input", p(&corpus(&dir))]));
    assert_eq!(v["pair_count"], 3);
    assert_eq!(v["positive_count"], 2);
    assert_eq!(v["negative_count"], 1);
    assert_eq!(v["distinct_response_count"], 3);
    assert_eq!(v["provenance"]["command"], "stats");
    assert_eq!(v["provenance"]["toolkit_version"], env!("CARGO_PKG_VERSION"));
    assert!(v["provenance"]["config"]["input"].as_str().unwrap().ends_with("train.tsv"));
}

#[test]
fn malformed_lines_are_skipped_or_fatal() {
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("bad.tsv");
    fs::write(&path, format!("{CORPUS}2\tx\ty\n1\tonly\n")).unwrap();
    let v = json(&drs(&["stats", "--input", p(&path)]));
    assert_eq!(v["pair_count"], 3);
    assert_eq!(v["skipped_lines"], serde_json::json!([4, 5]));
    let strict = drs(&["stats", "--input", p(&path), "--strict"]);
    assert_eq!(code(&strict), 2);
    assert!(String::from_utf8_lossy(&strict.stderr).contains("line 4"));
}

#[test]
fn exit_codes() {
    assert_eq!(code(&drs(&[])), 1);
    assert_eq!(code(&drs(&["frobnicate"])), 1);
    assert_eq!(code(&drs(&["stats", "--bogus"])), 1);
    assert_eq!(code(&drs(&["--help"])), 0);
    assert_eq!(code(&drs(&["stats"])), 1, "missing required input");
    assert_eq!(code(&drs(&["stats", "--input", "/no/such/file.tsv"])), 2);
    assert_eq!(code(&drs(&["stats", "--input", "x", "--set", "epochs=lots"])), 1);
    assert_eq!(code(&drs(&["stats", "--input", "x", "--set", "colour=red"])), 1);
}

#[test]
fn config_file_then_flags() {
    let dir = TempDir::new().unwrap();
    let input = corpus(&dir);
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, format!("# shared\ninput = {}\nseed = 5\nratio = 3\n", p(&input))).unwrap();
    let v = json(&drs(&["stats", "--config", p(&cfg)]));
    assert_eq!(v["provenance"]["config"]["seed"], 5);
    assert_eq!(v["provenance"]["config"]["training"]["seed"], 5);
    let out = dir.path().join("tap.tsv");
    let o = drs(&["augment", "--config", p(&cfg), "--ratio", "1", "--output", p(&out)]);
    assert_eq!(code(&o), 0);
    let sidecar: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("tap.tsv.run.json")).unwrap()).unwrap();
    assert_eq!(sidecar["provenance"]["config"]["ratio"], 1);
    assert_eq!(sidecar["provenance"]["config"]["seed"], 5);
}

#[test]
fn augment_writes_the_tap_set_reproducibly() {
    let dir = TempDir::new().unwrap();
    let input = corpus(&dir);
    let a = dir.path().join("a.tsv");
    let b = dir.path().join("b.tsv");
    for out in [&a, &b] {
        assert_eq!(code(&drs(&["augment", "--input", p(&input), "--ratio", "1", "--seed", "7", "--output", p(out)])), 0);
    }
    let text = fs::read_to_string(&a).unwrap();
    assert_eq!(text, fs::read_to_string(&b).unwrap());
    // two positive dialogues with two turns each: 4 positives, 4 negatives
    assert_eq!(text.lines().count(), 8);
    assert_eq!(text.lines().filter(|l| l.starts_with("1\t")).count(), 4);
    assert!(text.contains("1\thello there\thow are you\n"));

    let sidecar: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("a.tsv.run.json")).unwrap()).unwrap();
    assert_eq!(sidecar["pairs"], 8);
    assert_eq!(sidecar["provenance"]["command"], "augment");
}

#[test]
fn ngram_overlap_json() {
    let dir = TempDir::new().unwrap();
    let train = dir.path().join("tr.tsv");
    let test = dir.path().join("te.tsv");
    fs::write(&train, "1\ta b c d e f\tx\n").unwrap();
    fs::write(&test, "1\tb c d e f g\tx\n").unwrap();
    let v = json(&drs(&["ngram", "--train", p(&train), "--test", p(&test), "--n", "5"]));
    assert_eq!(v["overlap_percent"], 50.0);
    assert_eq!(v["train_distinct"], 2);
    assert_eq!(v["mode"], "exact");
    let hashed = json(&drs(&["ngram", "--train", p(&train), "--test", p(&test), "--n", "5", "--mode", "hashed"]));
    assert_eq!(hashed["overlap_percent"], 50.0);
    assert_eq!(code(&drs(&["ngram", "--train", p(&train), "--test", p(&test), "--n", "9"])), 2);
}

#[test]
fn synth_pretrain_finetune_evaluate() {
    let dir = TempDir::new().unwrap();
    let data = synth(&dir);
    let train = data.join("train.tsv");
    let ck_dir = dir.path().join("cks");
    let tap = dir.path().join("tap.ck");
    let report = dir.path().join("tap.jsonl");
    let valid = data.join("valid.tsv");
    let mut args = vec!["pretrain", "--train", p(&train), "--valid", p(&valid),
        "--output", p(&tap), "--epochs", "2", "--checkpoint-dir", p(&ck_dir), "--checkpoint-epochs", "1,2",
        "--report", p(&report), "--seed", "4"];
    args.extend(TINY);
    let o = drs(&args);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));

    let lines: Vec<Value> = fs::read_to_string(&report)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 3);
    assert_eq!(lines[0]["command"], "pretrain");
    assert_eq!(lines[2]["epoch"], 2);
    assert!(lines[2]["valid_r_at_1"].is_f64());
    assert!(lines[2]["mlm_loss"].is_f64() && lines[2]["nsp_loss"].is_f64());
    assert!(lines[1]["checkpoint"].as_str().unwrap().ends_with("epoch-001.safetensors"));

    let tap_ck = Checkpoint::load(&tap).unwrap();
    let epoch2 = Checkpoint::load(&ck_dir.join("epoch-002.safetensors")).unwrap();
    assert_eq!(tap_ck.model, epoch2.model);
    assert_eq!(tap_ck.model.provenance.stages.len(), 1);
    assert_eq!(tap_ck.run["config"]["training"]["epochs"], 2);

    let ft = dir.path().join("ft.ck");
    let o = drs(&["finetune", "--init", p(&tap), "--train", p(&train), "--output", p(&ft), "--epochs", "1",
        "--batch-size", "16", "--warmup-steps", "2", "--learning-rate", "1e-3"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let ft_ck = Checkpoint::load(&ft).unwrap();
    assert_eq!(ft_ck.model.provenance.stages.len(), 2);
    assert_ne!(ft_ck.model.params(), tap_ck.model.params());

    let scores = dir.path().join("scores.tsv");
    let v = json(&drs(&["evaluate", "--checkpoint", p(&ft), "--test", p(&data.join("test.tsv")), "--group-size", "10",
        "--scores", p(&scores)]));
    assert_eq!(v["group_count"], 8);
    for k in ["1", "2", "5"] {
        let r = v["r_at"][k].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&r));
    }
    assert_eq!(v["model"]["stages"][1]["kind"], "finetune");
    let score_rows = fs::read_to_string(&scores).unwrap();
    assert_eq!(score_rows.lines().count(), 1 + 80);
    assert!(dir.path().join("scores.tsv.run.json").exists());

    // wrong group size is a data error
    assert_eq!(code(&drs(&["evaluate", "--checkpoint", p(&ft), "--test", p(&data.join("test.tsv")), "--group-size", "7"])), 2);
}

#[test]
fn zero_learning_rate_finetune_keeps_weights() {
    let dir = TempDir::new().unwrap();
    let data = synth(&dir);
    let train = data.join("train.tsv");
    let init = dir.path().join("init.ck");
    let mut args = vec!["pretrain", "--train", p(&train), "--output", p(&init), "--epochs", "1", "--task-mix", "mlm"];
    args.extend(TINY);
    assert_eq!(code(&drs(&args)), 0);
    let out = dir.path().join("ft.ck");
    let o = drs(&["finetune", "--init", p(&init), "--train", p(&train), "--output", p(&out), "--epochs", "1",
        "--learning-rate", "0", "--batch-size", "16", "--warmup-steps", "0"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(Checkpoint::load(&out).unwrap().model.params(), Checkpoint::load(&init).unwrap().model.params());
}

#[test]
fn grid_search_selects_a_rate() {
    let dir = TempDir::new().unwrap();
    let data = synth(&dir);
    let out = dir.path().join("ft.ck");
    let report = dir.path().join("grid.json");
    let (train, valid) = (data.join("train.tsv"), data.join("valid.tsv"));
    let mut args = vec!["finetune", "--train", p(&train), "--valid", p(&valid),
        "--output", p(&out), "--report", p(&report), "--grid-search", "--epochs", "1",
        "--set", "lr_grid=0,1e-3"];
    args.extend(TINY);
    let o = drs(&args);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let v: Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(v["grid"]["scores"].as_array().unwrap().len(), 2);
    let best = v["grid"]["best_lr"].as_f64().unwrap();
    assert!(best == 0.0 || best == 1e-3);
    assert_eq!(Checkpoint::load(&out).unwrap().model.provenance.stages[0].learning_rate, best);
}

#[test]
fn diverging_training_exits_with_three() {
    let dir = TempDir::new().unwrap();
    let data = synth(&dir);
    let (train, out) = (data.join("train.tsv"), dir.path().join("x.ck"));
    let mut args = vec!["pretrain", "--train", p(&train), "--output", p(&out),
        "--epochs", "3", "--set", "grad_clip_norm=1e300", "--learning-rate", "1e300", "--warmup-steps", "0"];
    args.extend(&TINY[..6]);
    let o = drs(&args);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(!dir.path().join("x.ck").exists());
}

#[test]
fn dump_instance_prints_encoded_json() {
    let dir = TempDir::new().unwrap();
    let input = corpus(&dir);
    let o = Command::new(env!("CARGO_BIN_EXE_drs"))
        .args(["pretrain", "--train", p(&input), "--output", p(&dir.path().join("x.ck")), "--epochs", "1",
            "--dump-instance", "0", "--task-mix", "mlm", "--model", "tiny", "--max-len", "16", "--batch-size", "4",
            "--warmup-steps", "0"])
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let stderr = String::from_utf8_lossy(&o.stderr);
    let start = stderr.find('{').unwrap();
    let end = stderr.rfind('}').unwrap();
    let v: Value = serde_json::from_str(&stderr[start..=end]).unwrap();
    assert_eq!(v["tokens"][0], "[CLS]");
    assert_eq!(v["token_ids"].as_array().unwrap().len(), 16);
    assert_eq!(v["attention_mask"].as_array().unwrap().len(), 16);
}

#[test]
fn max_len_must_fit_the_model() {
    let dir = TempDir::new().unwrap();
    let input = corpus(&dir);
    let o = drs(&["pretrain", "--train", p(&input), "--output", p(&dir.path().join("x.ck")), "--model", "tiny",
        "--max-len", "100"]);
    assert_eq!(code(&o), 1);
}
