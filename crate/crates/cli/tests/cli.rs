use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn offergen(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_offergen"))
        .args(args)
        .env_remove("OFFERGEN_OUT")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = offergen(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn gen(dir: &Path, n: &str, seed: &str) {
    ok(&["gen-data", "--n", n, "--seed", seed, "--out", p(dir)]);
}

#[test]
fn gen_data_layout_and_determinism() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    gen(&a, "100", "7");
    gen(&b, "100", "7");
    for f in ["train.jsonl", "val.jsonl", "test.jsonl"] {
        let x = std::fs::read(a.join(f)).unwrap();
        assert!(!x.is_empty());
        assert_eq!(x, std::fs::read(b.join(f)).unwrap(), "{f} differs");
    }
    let m = json(&a.join("manifest.json"));
    assert_eq!(m["subcommand"], "gen-data");
    assert_eq!(m["seed"], 7);
    assert_eq!(m["config"]["n"], 100);
}

#[test]
fn usage_and_runtime_errors_have_distinct_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = offergen(&["gen-data", "--n", "0", "--out", p(tmp.path())]);
    assert_eq!(out.status.code(), Some(2));

    let out = offergen(&["gen-data", "--n", "10", "--split", "0.5", "0.5", "0.5"]);
    assert_eq!(out.status.code(), Some(2));

    let out = offergen(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));

    let missing = tmp.path().join("missing.ckpt");
    let out = offergen(&[
        "eval",
        "--ckpt",
        p(&missing),
        "--test",
        p(&missing),
        "--out",
        p(tmp.path()),
    ]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn out_dir_falls_back_to_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let target = tmp.path().join("from-env");
    let out = Command::new(env!("CARGO_BIN_EXE_offergen"))
        .args(["gen-data", "--n", "30", "--seed", "1"])
        .env("OFFERGEN_OUT", &target)
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(target.join("train.jsonl").exists());
}

#[test]
fn train_modes_record_lambda() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen(&data, "40", "3");

    let sft = tmp.path().join("sft");
    ok(&[
        "train",
        "--data",
        p(&data),
        "--mode",
        "sft",
        "--epochs",
        "1",
        "--out",
        p(&sft),
    ]);
    let m = json(&sft.join("manifest.json"));
    assert_eq!(m["config"]["train"]["loss"]["lambda"], 0.0);
    assert_eq!(m["config"]["mode"], "sft");
    assert!(sft.join("model.ckpt").exists());
    let csv = std::fs::read_to_string(sft.join("loss.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next(),
        Some("epoch,train_final,train_contrastive,train_generation,val_final")
    );
    let row: Vec<f64> = lines
        .next()
        .unwrap()
        .split(',')
        .map(|x| x.parse().unwrap())
        .collect();
    assert_eq!(row.len(), 5);
    assert_eq!(row[0], 1.0);

    let con = tmp.path().join("con");
    ok(&[
        "train",
        "--data",
        p(&data),
        "--mode",
        "contrastive",
        "--epochs",
        "1",
        "--out",
        p(&con),
    ]);
    let m = json(&con.join("manifest.json"));
    assert_eq!(m["config"]["train"]["loss"]["lambda"], 0.5);
    assert_eq!(m["config"]["train"]["loss"]["tau"], 0.1);

    let out = offergen(&[
        "train",
        "--data",
        p(&data),
        "--mode",
        "sft",
        "--lambda",
        "0.5",
        "--out",
        p(&con),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn flags_override_config_file() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen(&data, "40", "4");
    let cfg = tmp.path().join("cfg.json");
    std::fs::write(
        &cfg,
        r#"{"epochs": 1, "lambda": 0.25, "learning_rate": 0.001}"#,
    )
    .unwrap();
    let out = tmp.path().join("run");
    ok(&[
        "train",
        "--data",
        p(&data),
        "--mode",
        "contrastive",
        "--config",
        p(&cfg),
        "--learning-rate",
        "0.002",
        "--out",
        p(&out),
    ]);
    let m = json(&out.join("manifest.json"));
    assert_eq!(m["config"]["train"]["epochs"], 1);
    assert_eq!(m["config"]["train"]["loss"]["lambda"], 0.25);
    assert_eq!(m["config"]["train"]["learning_rate"], 0.002);

    std::fs::write(&cfg, r#"{"epochz": 1}"#).unwrap();
    let bad = offergen(&[
        "train",
        "--data",
        p(&data),
        "--mode",
        "sft",
        "--config",
        p(&cfg),
    ]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn eval_compare_and_diagnose() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen(&data, "60", "5");
    let run = tmp.path().join("run");
    ok(&[
        "train",
        "--data",
        p(&data),
        "--mode",
        "contrastive",
        "--epochs",
        "1",
        "--out",
        p(&run),
    ]);
    let ckpt = run.join("model.ckpt");
    let test = data.join("test.jsonl");

    let ev = tmp.path().join("eval");
    ok(&[
        "eval",
        "--ckpt",
        p(&ckpt),
        "--test",
        p(&test),
        "--out",
        p(&ev),
    ]);
    let r = json(&ev.join("eval.json"));
    let (acc, total) = (
        r["accepted_count"].as_f64().unwrap(),
        r["total"].as_f64().unwrap(),
    );
    assert_eq!(r["rate"].as_f64().unwrap(), acc / total);
    assert_eq!(r["rate_percent"].as_f64().unwrap(), acc * 100.0 / total);

    let cmp = tmp.path().join("cmp");
    let table = ok(&[
        "compare",
        "--ckpt-a",
        p(&ckpt),
        "--ckpt-b",
        p(&ckpt),
        "--test",
        p(&test),
        "--out",
        p(&cmp),
    ]);
    assert!(table.contains("Offer accepted count"));
    assert!(table.contains("Offer Acceptance Rate (%)"));
    let c = json(&cmp.join("comparison.json"));
    assert_eq!(c["delta"]["absolute"], 0.0);
    assert!(cmp.join("manifest.json").exists());

    let diag = tmp.path().join("diag");
    let text = ok(&["diagnose", "--ckpt", p(&ckpt), "--out", p(&diag)]);
    let d = json(&diag.join("diagnostics.json"));
    let layers = d["layers"].as_array().unwrap().len();
    let s = &d["summary"];
    let counted = s["overfit"].as_u64().unwrap()
        + s["normal"].as_u64().unwrap()
        + s["underfit"].as_u64().unwrap();
    assert_eq!(counted as usize, layers);
    let rows = text.lines().filter(|l| l.contains("alpha=")).count();
    assert_eq!(rows, layers);
}

#[test]
fn chisq_reports_statistic() {
    let text = ok(&["chisq", "--table", "41", "9", "3", "147"]);
    assert!(text.contains("statistic = 139.86"), "{text}");
    assert!(text.contains("p < 0.001"));
    let text = ok(&["chisq", "--table", "25", "25", "25", "25"]);
    assert!(text.contains("statistic = 0.0000"));
    let out = offergen(&["chisq", "--table", "0", "0", "3", "4"]);
    assert_eq!(out.status.code(), Some(2));
}
