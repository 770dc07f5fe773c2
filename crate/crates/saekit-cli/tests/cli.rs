//! End-to-end tests driving the compiled `saekit` binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use saekit::data::{read_pgm_mask, replicate3, save_dataset, Dataset, Mask, SegSample};
use saekit::net::{NetworkConfig, SaetcnConfig, SasnetConfig};
use saekit::tensor::Tensor;
use saekit::train::{load_checkpoint, save_checkpoint};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_saekit"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn run_ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "command {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn exit_code(out: &Output) -> i32 {
    out.status.code().expect("terminated by signal")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Sorted (name, bytes) listing of a flat directory.
fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut entries: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().into_string().unwrap(), std::fs::read(e.path()).unwrap())
        })
        .collect();
    entries.sort();
    entries
}

fn write_file(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

/// Desk-scale classifier config with a one-epoch plan baked in.
const CLS_CFG: &str = r#"{"arch":"saetcn","width_scale":16,
  "plan":{"epochs":1,"batch_size":4,"lr":0.001,"seed":5}}"#;

fn gen_cls(dir: &Path) {
    run_ok(&["gen-data", "--kind", "cls", "--n", "2", "--size", "32", "--seed", "7", "--out", s(dir)]);
}

#[test]
fn gen_data_rerun_is_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = tmp.path().join("ds");
    gen_cls(&ds);
    let first = dir_bytes(&ds);
    // 4 classes x 2 samples, plus manifest.json and run.json.
    assert_eq!(first.len(), 10);
    assert_eq!(first.iter().filter(|(n, _)| n.ends_with(".pgm")).count(), 8);
    gen_cls(&ds);
    assert_eq!(first, dir_bytes(&ds), "rerun with the same flags changed bytes");
}

#[test]
fn gen_data_seg_size_must_divide_16() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(&["gen-data", "--kind", "seg", "--n", "5", "--size", "30", "--seed", "1",
        "--out", s(&tmp.path().join("bad"))]);
    assert_eq!(exit_code(&out), 1);
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("multiple of 16"), "unhelpful message: {err}");
}

#[test]
fn train_smoke_writes_loadable_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = tmp.path().join("ds");
    gen_cls(&ds);
    let cfg = write_file(tmp.path(), "cfg.json", CLS_CFG);
    let out = tmp.path().join("run");
    run_ok(&["train", "--config", s(&cfg), "--data", s(&ds), "--split", "all", "--out", s(&out)]);

    let ckpt = load_checkpoint(&out.join("model.saek")).unwrap();
    let NetworkConfig::Saetcn(c) = &ckpt.config else { panic!("wrong arch in checkpoint") };
    assert_eq!(c.width_scale, 16);
    assert!(ckpt.opt.is_some(), "final checkpoint should carry optimizer state");

    let csv = std::fs::read_to_string(out.join("train_log.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2, "header plus one epoch: {csv}");

    let run_json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("run.json")).unwrap()).unwrap();
    assert_eq!(run_json["plan"]["epochs"], 1);
    assert_eq!(run_json["network"]["arch"], "saetcn");
}

#[test]
fn flags_override_config_file() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = tmp.path().join("ds");
    gen_cls(&ds);
    let cfg = write_file(tmp.path(), "cfg.json", CLS_CFG);
    let out = tmp.path().join("run");
    run_ok(&["train", "--config", s(&cfg), "--data", s(&ds), "--split", "all", "--out", s(&out),
        "--epochs", "2", "--batch", "8", "--seed", "9"]);
    let run_json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("run.json")).unwrap()).unwrap();
    assert_eq!(run_json["plan"]["epochs"], 2);
    assert_eq!(run_json["plan"]["batch_size"], 8);
    assert_eq!(run_json["plan"]["seed"], 9);
    // Untouched fields keep the file's values.
    assert_eq!(run_json["plan"]["lr"], 0.001);
}

#[test]
fn resume_matches_uninterrupted_tail() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = tmp.path().join("ds");
    gen_cls(&ds);
    let cfg = write_file(tmp.path(), "cfg.json", CLS_CFG);
    let (full, head, resumed) =
        (tmp.path().join("full"), tmp.path().join("head"), tmp.path().join("resumed"));

    run_ok(&["train", "--config", s(&cfg), "--data", s(&ds), "--split", "all", "--out", s(&full),
        "--epochs", "3"]);
    run_ok(&["train", "--config", s(&cfg), "--data", s(&ds), "--split", "all", "--out", s(&head),
        "--epochs", "1"]);
    run_ok(&["train", "--config", s(&cfg), "--data", s(&ds), "--split", "all", "--out", s(&resumed),
        "--epochs", "3", "--resume", s(&head.join("model.saek"))]);

    let full_csv = std::fs::read_to_string(full.join("train_log.csv")).unwrap();
    let resumed_csv = std::fs::read_to_string(resumed.join("train_log.csv")).unwrap();
    let tail: Vec<&str> = full_csv.lines().skip(2).collect();
    let got: Vec<&str> = resumed_csv.lines().skip(1).collect();
    assert_eq!(tail, got, "resumed log is not the uninterrupted tail");
    assert_eq!(
        std::fs::read(full.join("model.saek")).unwrap(),
        std::fs::read(resumed.join("model.saek")).unwrap(),
        "resumed checkpoint differs from the uninterrupted one"
    );
}

/// Five segmentation pairs whose masks are entirely class 0.
fn zero_mask_dataset(dir: &Path) {
    let size = 32usize;
    let samples = (0..5u64)
        .map(|id| {
            let ramp: Vec<f32> = (0..size * size)
                .map(|p| ((p / size + p % size) as f32 + id as f32) / (2 * size) as f32)
                .collect();
            let gray = Tensor::new(vec![size, size], ramp).unwrap();
            SegSample {
                image: replicate3(&gray).unwrap(),
                mask: Mask::zeros(size, size),
                sample_id: id,
            }
        })
        .collect();
    let ds = Dataset::Segmentation { samples, num_classes: 4 };
    save_dataset(&ds, dir, 3).unwrap();
}

/// A segmenter whose final conv weight is zero: logits are identically zero,
/// so the per-pixel argmax resolves every tie to class 0.
fn zero_head_segmenter(path: &Path) {
    let cfg = NetworkConfig::Sasnet(SasnetConfig { width_scale: 16, ..Default::default() });
    let mut store = cfg.init_params::<f32>(8).unwrap();
    let shape = store.param("final.w").unwrap().shape().to_vec();
    *store.param_mut("final.w").unwrap() = Tensor::zeros(shape).unwrap();
    save_checkpoint(path, &store, None, &cfg).unwrap();
}

#[test]
fn eval_perfect_predictions_scores_one() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = tmp.path().join("ds");
    zero_mask_dataset(&ds);
    let ckpt = tmp.path().join("zero.saek");
    zero_head_segmenter(&ckpt);
    let out = tmp.path().join("eval");
    let table = run_ok(&["eval", "--checkpoint", s(&ckpt), "--data", s(&ds), "--split", "all",
        "--out", s(&out)]);
    assert!(table.contains("pixel accuracy"), "missing table: {table}");

    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["pixel_accuracy"], 1.0);
    assert_eq!(report["per_class"][0]["iou"], 1.0);
    assert_eq!(report["per_class"][0]["dsc"], 1.0);
}

#[test]
fn predict_cls_probabilities_sum_to_one() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = tmp.path().join("ds");
    gen_cls(&ds);
    let cfg = write_file(tmp.path(), "cfg.json", CLS_CFG);
    let out = tmp.path().join("run");
    run_ok(&["train", "--config", s(&cfg), "--data", s(&ds), "--split", "all", "--out", s(&out)]);

    let stdout = run_ok(&["predict", "--checkpoint", s(&out.join("model.saek")),
        "--image", s(&ds.join("img_0000.pgm"))]);
    let probs: Vec<f64> = stdout
        .lines()
        .filter(|l| l.starts_with("class "))
        .map(|l| l.rsplit(' ').next().unwrap().parse().unwrap())
        .collect();
    assert_eq!(probs.len(), 4, "expected 4 class lines: {stdout}");
    let sum: f64 = probs.iter().sum();
    assert!((sum - 1.0).abs() <= 1e-6, "probabilities sum to {sum}");
    assert!(stdout.contains("prediction: class "), "missing verdict: {stdout}");
}

#[test]
fn predict_seg_writes_mask() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = tmp.path().join("ds");
    zero_mask_dataset(&ds);
    let ckpt = tmp.path().join("zero.saek");
    zero_head_segmenter(&ckpt);

    let refused = run(&["predict", "--checkpoint", s(&ckpt), "--image", s(&ds.join("img_0000.pgm"))]);
    assert_eq!(exit_code(&refused), 1, "seg predict without --out must be refused");

    let out = tmp.path().join("pred");
    run_ok(&["predict", "--checkpoint", s(&ckpt), "--image", s(&ds.join("img_0000.pgm")),
        "--out", s(&out)]);
    let mask = read_pgm_mask(&out.join("mask.pgm")).unwrap();
    assert_eq!((mask.h, mask.w), (32, 32));
    assert!(mask.data.iter().all(|&v| v == 0), "zero logits must argmax to class 0");
}

#[test]
fn divergent_training_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = tmp.path().join("ds");
    gen_cls(&ds);
    let cfg = write_file(tmp.path(), "cfg.json", CLS_CFG);
    let out = run(&["train", "--config", s(&cfg), "--data", s(&ds), "--split", "all",
        "--out", s(&tmp.path().join("boom")), "--epochs", "3", "--lr", "1e8"]);
    assert_eq!(exit_code(&out), 2, "stderr: {}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn missing_config_file_exits_3() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(&["train", "--config", s(&tmp.path().join("absent.json")),
        "--data", s(tmp.path()), "--out", s(&tmp.path().join("run"))]);
    assert_eq!(exit_code(&out), 3);
}

#[test]
fn validation_problems_exit_1() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = tmp.path().join("ds");
    gen_cls(&ds);
    // No architecture from either source.
    let out = run(&["train", "--data", s(&ds), "--out", s(&tmp.path().join("r1"))]);
    assert_eq!(exit_code(&out), 1);
    // Flag contradicts the config file.
    let cfg = write_file(tmp.path(), "cfg.json", CLS_CFG);
    let out = run(&["train", "--arch", "sasnet", "--config", s(&cfg), "--data", s(&ds),
        "--out", s(&tmp.path().join("r2"))]);
    assert_eq!(exit_code(&out), 1);
    // Unknown flag is a usage error, also 1.
    let out = run(&["train", "--data", s(&ds), "--out", s(&tmp.path().join("r3")), "--bogus"]);
    assert_eq!(exit_code(&out), 1);
}

#[test]
fn eval_kind_mismatch_exits_1() {
    let tmp = tempfile::tempdir().unwrap();
    let seg_ds = tmp.path().join("seg");
    zero_mask_dataset(&seg_ds);
    let cfg = NetworkConfig::Saetcn(SaetcnConfig { width_scale: 16, ..Default::default() });
    let store = cfg.init_params::<f32>(0).unwrap();
    let ckpt = tmp.path().join("cls.saek");
    save_checkpoint(&ckpt, &store, None, &cfg).unwrap();

    let out = run(&["eval", "--checkpoint", s(&ckpt), "--data", s(&seg_ds), "--split", "all",
        "--out", s(&tmp.path().join("ev"))]);
    assert_eq!(exit_code(&out), 1);
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("saetcn") && err.contains("segmentation"), "unhelpful: {err}");
}

#[test]
fn summary_prints_census_and_param_total() {
    let tmp = tempfile::tempdir().unwrap();
    let cls = write_file(tmp.path(), "cls.json", r#"{"arch":"saetcn"}"#);
    let stdout = run_ok(&["summary", "--config", s(&cls)]);
    assert_eq!(stdout.matches(" SAEB ").count(), 16, "census broken:\n{stdout}");
    assert!(stdout.contains("2048x"), "fusion ladder top missing:\n{stdout}");
    assert!(stdout.contains("total parameters: "), "no total:\n{stdout}");

    let seg = write_file(tmp.path(), "seg.json", r#"{"arch":"sasnet"}"#);
    let stdout = run_ok(&["summary", "--config", s(&seg), "--size", "64"]);
    assert_eq!(stdout.matches(" SAEB ").count(), 5, "encoder rows:\n{stdout}");
    assert_eq!(stdout.matches(" SFD ").count(), 4, "decoder rows:\n{stdout}");
}

#[test]
fn gradcheck_cli_passes_and_reports() {
    let stdout = run_ok(&["gradcheck", "--arch", "saetcn", "--seed", "0"]);
    let ok_lines = stdout.lines().filter(|l| l.starts_with("ok ")).count();
    assert!(ok_lines >= 20, "suite shrank to {ok_lines} entries:\n{stdout}");
    assert!(!stdout.contains("net.sasnet_w16"), "--arch saetcn must drop the sasnet entry");
    assert!(stdout.contains("net.saetcn_w16"), "whole-network entry missing");
    assert!(stdout.trim_end().ends_with("gradient suite passed"));
}
