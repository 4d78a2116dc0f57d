//! End-to-end run of every subcommand on a tiny configuration.

use std::fs;
use std::path::Path;

use cookie_kit::cli::run;
use cookie_kit::eval::RetrievalReport;
use cookie_kit::train::{load_checkpoint, Checkpoint};

const TINY: &str = r#"{
  "seed": 3,
  "data": {"samples": 120},
  "encoder": {"patch": 16, "visual_dim": 16, "text_dim": 16, "model_dim": 16, "ff_dim": 16},
  "train": {"stage1_epochs": 1, "stage2_epochs": 1, "finetune_epochs": 2, "batch_size": 8, "finetune_batch_size": 8},
  "bench": {"sizes": [8, 16, 32, 64], "repeats": 5, "warmup": 0, "pair_chunk": 16}
}"#;

fn cli(args: &[&str]) -> i32 {
    let mut full = vec!["cookie-kit"];
    full.extend_from_slice(args);
    run(full)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn every_subcommand_runs_on_a_tiny_config() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let cfg = root.join("tiny.json");
    fs::write(&cfg, TINY).unwrap();
    let (data, pre, ft, ev, attn, bench) = (
        root.join("data"),
        root.join("pre"),
        root.join("ft"),
        root.join("eval"),
        root.join("attn"),
        root.join("bench"),
    );

    assert_eq!(cli(&["gen-data", "--config", s(&cfg), "--out", s(&data)]), 0);
    assert!(data.join("manifest.jsonl").exists());

    assert_eq!(cli(&["pretrain", "--config", s(&cfg), "--data", s(&data), "--out", s(&pre)]), 0);
    let ckpt: Checkpoint<f32> = load_checkpoint(&pre.join("pretrain.ckpt")).unwrap();
    assert_eq!(ckpt.meta.stage, 2);
    assert_eq!(ckpt.meta.encoder.model_dim, 16);
    let log = fs::read_to_string(pre.join("pretrain_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 2);

    let init = pre.join("pretrain.ckpt");
    assert_eq!(
        cli(&["finetune", "--config", s(&cfg), "--data", s(&data), "--ckpt", s(&init), "--out", s(&ft)]),
        0
    );
    let model = ft.join("model.ckpt");
    assert!(model.exists());

    assert_eq!(cli(&["eval", "--config", s(&cfg), "--data", s(&data), "--ckpt", s(&model), "--out", s(&ev)]), 0);
    let report: RetrievalReport = serde_json::from_str(&fs::read_to_string(ev.join("report.json")).unwrap()).unwrap();
    let recalls = [report.r1_i2t, report.r5_i2t, report.r10_i2t, report.r1_t2i, report.r5_t2i, report.r10_t2i];
    assert!((recalls.iter().sum::<f64>() - report.rsum).abs() < 1e-9);
    assert!(ev.join("ranks.json").exists() && ev.join("embeddings.json").exists());

    assert_eq!(
        cli(&["attn", "--config", s(&cfg), "--data", s(&data), "--ckpt", s(&model), "--n", "4", "--out", s(&attn)]),
        0
    );
    let csv = fs::read_to_string(attn.join("attention_image.csv")).unwrap();
    assert!(csv.lines().count() > 4);

    assert_eq!(cli(&["bench", "--config", s(&cfg), "--ckpt", s(&model), "--out", s(&bench)]), 0);
    let table = fs::read_to_string(bench.join("bench.csv")).unwrap();
    // header plus one row per mode and size
    assert_eq!(table.lines().count(), 1 + 2 * 4);

    for out in [&pre, &ft, &ev, &attn, &bench] {
        assert!(out.join("run_config.json").exists());
    }
}

#[test]
fn a_bad_config_field_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    fs::write(&cfg, r#"{"train": {"batch_size": 1}}"#).unwrap();
    let out = dir.path().join("o");
    assert_eq!(cli(&["pretrain", "--config", s(&cfg), "--n", "40", "--out", s(&out)]), 2);
    fs::write(&cfg, r#"{"trian": {}}"#).unwrap();
    assert_eq!(cli(&["pretrain", "--config", s(&cfg), "--out", s(&out)]), 2);
}
