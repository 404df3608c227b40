use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

const TINY: [&str; 10] = ["--dim", "16", "--heads", "2", "--ffn-hidden", "16", "--fusion-layers", "2", "--decoder-layers", "1"];

fn avcap(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_avcap")).current_dir(dir).args(args).output().expect("spawn avcap")
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = avcap(dir, args);
    assert!(out.status.success(), "avcap {args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn fails(dir: &Path, args: &[&str], code: i32) -> String {
    let out = avcap(dir, args);
    assert_eq!(out.status.code(), Some(code), "avcap {args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn read(dir: &Path, rel: &str) -> String {
    fs::read_to_string(dir.join(rel)).unwrap_or_else(|e| panic!("{rel}: {e}"))
}

fn json(dir: &Path, rel: &str) -> serde_json::Value {
    serde_json::from_str(&read(dir, rel)).unwrap()
}

/// A small dataset plus a briefly pretrained checkpoint under `pre`.
fn workspace(mbp: &str) -> TempDir {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["generate", "--n", "100", "--seed", "4", "--out", "data"]);
    let mut args = vec!["pretrain", "--data", "data", "--out", "pre", "--steps", "6", "--batch-size", "8", "--mbp", mbp];
    if mbp == "off" {
        args.extend(["--mono-log-every", "0"]);
    }
    args.extend(TINY);
    ok(dir.path(), &args);
    dir
}

fn csv_rows(text: &str) -> Vec<Vec<String>> {
    text.lines().map(|l| l.split(',').map(str::to_string).collect()).collect()
}

#[test]
fn generate_writes_the_requested_split_sizes() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["generate", "--n", "1000", "--out", "d"]);
    for (split, n) in [("train", 800), ("val", 100), ("test", 100)] {
        assert_eq!(read(dir.path(), &format!("d/{split}.jsonl")).lines().count(), n, "{split}");
    }
    assert_eq!(read(dir.path(), "d/DONE"), "ok\n");
    assert!(dir.path().join("d/spec.json").exists() && dir.path().join("d/vocab.json").exists());
}

#[test]
fn generate_is_deterministic_and_seeded() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["generate", "--n", "50", "--seed", "9", "--out", "a"]);
    ok(dir.path(), &["generate", "--n", "50", "--seed", "9", "--out", "b"]);
    ok(dir.path(), &["generate", "--n", "50", "--seed", "10", "--out", "c"]);
    assert_eq!(read(dir.path(), "a/train.jsonl"), read(dir.path(), "b/train.jsonl"));
    assert_ne!(read(dir.path(), "a/train.jsonl"), read(dir.path(), "c/train.jsonl"));
}

#[test]
fn generate_rejects_an_empty_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let err = fails(dir.path(), &["generate", "--n", "0", "--out", "d"], 2);
    assert!(err.contains("empty"), "{err}");
    assert!(!dir.path().join("d/DONE").exists());
}

#[test]
fn downstream_flag_changes_the_task() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["generate", "--n", "20", "--out", "up"]);
    ok(dir.path(), &["generate", "--n", "20", "--downstream", "--out", "down"]);
    let (up, down) = (json(dir.path(), "up/spec.json"), json(dir.path(), "down/spec.json"));
    assert_ne!(up["p_audio"], down["p_audio"]);
}

#[test]
fn pretrain_metrics_are_reproducible() {
    let a = workspace("on");
    let b = workspace("on");
    let csv = read(a.path(), "pre/metrics.csv");
    assert_eq!(csv, read(b.path(), "pre/metrics.csv"));
    assert_eq!(read(a.path(), "pre/summary.json"), read(b.path(), "pre/summary.json"));
    assert_eq!(fs::read(a.path().join("pre/model.bin")).unwrap(), fs::read(b.path().join("pre/model.bin")).unwrap());
    let rows = csv_rows(&csv);
    assert_eq!(rows[0].join(","), "step,loss_av,loss_a,loss_v,g_a,g_v,w_a,w_v,lr,pnc_loss");
    assert_eq!(rows.len(), 7);
    for row in &rows[1..] {
        let w: f64 = row[6].parse::<f64>().unwrap() + row[7].parse::<f64>().unwrap();
        assert!((w - 1.0).abs() < 1e-12);
    }
}

#[test]
fn mbp_columns_are_empty_when_disabled() {
    let dir = workspace("off");
    let rows = csv_rows(&read(dir.path(), "pre/metrics.csv"));
    for row in &rows[1..] {
        assert!(!row[1].is_empty());
        assert!(row[2..8].iter().all(String::is_empty), "{row:?}");
    }
    let summary = json(dir.path(), "pre/summary.json");
    assert!(summary["w_a"].is_null());

    // Periodic monitoring fills the mono-modal losses only, never the weights.
    let mut args = vec!["pretrain", "--data", "data", "--out", "mon", "--steps", "4", "--batch-size", "8", "--mbp", "off"];
    args.extend(["--mono-log-every", "2"]);
    args.extend(TINY);
    ok(dir.path(), &args);
    let rows = csv_rows(&read(dir.path(), "mon/metrics.csv"));
    for row in &rows[1..] {
        let logged = row[0] == "1" || row[0] == "3";
        assert_eq!(!row[2].is_empty() && !row[3].is_empty(), logged, "{row:?}");
        assert!(row[6..8].iter().all(String::is_empty), "{row:?}");
    }
}

#[test]
fn config_file_is_merged_under_flags() {
    let dir = workspace("on");
    fs::write(dir.path().join("ft.json"), r#"{"steps": 3, "lr": 0.001, "batch_size": 4}"#).unwrap();
    ok(dir.path(), &["finetune", "--config", "ft.json", "--checkpoint", "pre", "--data", "data", "--out", "ft", "--steps", "2"]);
    let resolved = json(dir.path(), "ft/config.resolved.json");
    assert_eq!(resolved["command"], "finetune");
    assert_eq!(resolved["config"]["steps"], 2);
    assert_eq!(resolved["config"]["lr"], 0.001);
    assert_eq!(resolved["config"]["batch_size"], 4);
    assert_eq!(read(dir.path(), "ft/metrics.csv").lines().count(), 3);

    fs::write(dir.path().join("bad.json"), r#"{"stepz": 3}"#).unwrap();
    let err = fails(dir.path(), &["finetune", "--config", "bad.json", "--checkpoint", "pre", "--data", "data", "--out", "x"], 2);
    assert!(err.contains("stepz"), "{err}");
}

#[test]
fn finetune_from_scratch_and_incompatible_shapes() {
    let dir = workspace("on");
    ok(dir.path(), &["finetune", "--from-scratch", "--data", "data", "--out", "fs", "--steps", "2", "--dim", "16", "--heads", "2"]);
    assert!(dir.path().join("fs/model.bin").exists());

    let err = fails(dir.path(), &["finetune", "--checkpoint", "pre", "--data", "data", "--out", "x", "--ffn-hidden", "24"], 3);
    assert!(err.contains("ffn"), "{err}");
    fails(dir.path(), &["finetune", "--checkpoint", "pre", "--from-scratch", "--data", "data", "--out", "x"], 2);
    fails(dir.path(), &["finetune", "--data", "data", "--out", "x"], 2);
}

#[test]
fn eval_beam_one_is_greedy_and_deterministic() {
    let dir = workspace("on");
    ok(dir.path(), &["eval", "--checkpoint", "pre", "--data", "data", "--beam", "1", "--out", "b1"]);
    ok(dir.path(), &["eval", "--checkpoint", "pre", "--data", "data", "--greedy", "--out", "g"]);
    ok(dir.path(), &["eval", "--checkpoint", "pre", "--data", "data", "--greedy", "--out", "g2"]);
    assert_eq!(read(dir.path(), "b1/decodes.jsonl"), read(dir.path(), "g/decodes.jsonl"));
    assert_eq!(read(dir.path(), "b1/eval.json"), read(dir.path(), "g/eval.json"));
    assert_eq!(read(dir.path(), "g/eval.json"), read(dir.path(), "g2/eval.json"));
    let report = json(dir.path(), "g/eval.json");
    assert_eq!(report["beam"], 1);
    assert_eq!(report["samples"], 10);
    assert_eq!(read(dir.path(), "g/decodes.jsonl").lines().count(), 10);

    ok(dir.path(), &["eval", "--checkpoint", "pre", "--data", "data", "--modality", "v", "--split", "val", "--out", "v"]);
    assert_eq!(json(dir.path(), "v/eval.json")["modality"], "v");
    fails(dir.path(), &["eval", "--checkpoint", "pre", "--data", "data", "--beam", "0", "--out", "z"], 2);
}

#[test]
fn eval_rejects_a_checkpoint_for_another_task() {
    let dir = workspace("on");
    let mut spec = json(dir.path(), "data/spec.json");
    spec["caption_vocab"] = 12.into();
    fs::write(dir.path().join("spec.json"), spec.to_string()).unwrap();
    ok(dir.path(), &["generate", "--n", "20", "--spec", "spec.json", "--out", "small"]);
    let err = fails(dir.path(), &["eval", "--checkpoint", "pre", "--data", "small", "--out", "e"], 3);
    assert!(err.contains("vocab"), "{err}");
}

#[test]
fn rollout_rows_are_stochastic_per_layer() {
    let dir = workspace("on");
    ok(dir.path(), &["rollout", "--checkpoint", "pre", "--data", "data", "--sample", "1", "--out", "ro"]);
    let summary = json(dir.path(), "ro/rollout.json");
    assert_eq!(summary["layers"], 2);
    for layer in 0..2 {
        assert!(dir.path().join(format!("ro/attention_layer{layer}.csv")).exists());
        let rows = csv_rows(&read(dir.path(), &format!("ro/rollout_layer{layer}.csv")));
        assert_eq!(rows.len() - 1, summary["tokens"].as_u64().unwrap() as usize);
        for row in &rows[1..] {
            let s: f64 = row[1..].iter().map(|x| x.parse::<f64>().unwrap()).sum();
            assert!((s - 1.0).abs() < 1e-6, "{s}");
        }
    }
    assert!(!dir.path().join("ro/attention_layer2.csv").exists());
    let mass = ["audio_mass", "video_mass", "global_mass"].iter().map(|k| summary[k].as_f64().unwrap()).sum::<f64>();
    assert!((mass - 1.0).abs() < 1e-6);
    fails(dir.path(), &["rollout", "--checkpoint", "pre", "--data", "data", "--sample", "999", "--out", "x"], 2);
}

#[test]
fn analyze_scr_and_ars() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    fs::write(p.join("caps.txt"), "the dog barks at a cat\nsomeone chops onions\n").unwrap();
    fs::write(p.join("audio.txt"), "a dog barks\nthe engine roars\n").unwrap();
    fs::write(p.join("image.txt"), "a red car\na cat on a mat\n").unwrap();
    ok(p, &["analyze", "--captions", "caps.txt", "--transcripts", "caps.txt", "--out", "same"]);
    assert_eq!(json(p, "same/analysis.json")["scr"], 100.0);

    ok(p, &["analyze", "--captions", "caps.txt", "--transcripts", "audio.txt", "--audio-captions", "audio.txt", "--image-captions", "image.txt", "--out", "full"]);
    let a = json(p, "full/analysis.json");
    let scr = a["scr"].as_f64().unwrap();
    assert!(scr > 0.0 && scr < 100.0, "{scr}");
    assert!(a["ars"]["audio_corpus"].as_f64().unwrap() > a["ars"]["image_corpus"].as_f64().unwrap());
    let words = read(p, "full/ars_words.csv");
    assert!(words.starts_with("word,ars,audio_count,image_count\n"));

    fs::write(p.join("stop.txt"), "the a of\nit is\n").unwrap();
    fails(p, &["analyze", "--audio-captions", "stop.txt", "--image-captions", "image.txt", "--out", "stop"], 3);
    fails(p, &["analyze", "--captions", "caps.txt", "--out", "half"], 2);
    fails(p, &["analyze", "--out", "nothing"], 2);
}

fn attr(svg: &str, chart: &str, name: &str) -> f64 {
    let start = svg.find(&format!(r#"id="{chart}""#)).unwrap();
    let tag = &svg[start..start + svg[start..].find('>').unwrap()];
    let key = format!(r#"{name}=""#);
    let at = tag.find(&key).unwrap() + key.len();
    tag[at..at + tag[at..].find('"').unwrap()].parse().unwrap()
}

#[test]
fn plot_draws_available_series_with_true_ranges() {
    let dir = workspace("on");
    ok(dir.path(), &["plot", "--metrics", "pre/metrics.csv", "--out", "pl"]);
    let svg = read(dir.path(), "pl/plot.svg");
    let losses = &svg[..svg.find(r#"id="weights""#).unwrap()];
    assert_eq!(losses.matches("<polyline").count(), 3);
    assert_eq!(svg.matches("<polyline").count(), 5);

    let rows = csv_rows(&read(dir.path(), "pre/metrics.csv"));
    let values: Vec<f64> = rows[1..].iter().flat_map(|r| r[1..4].iter().map(|x| x.parse::<f64>().unwrap())).collect();
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(attr(&svg, "losses", "data-y-min"), lo);
    assert_eq!(attr(&svg, "losses", "data-y-max"), hi);
    assert_eq!(attr(&svg, "losses", "data-x-min"), 1.0);
    assert_eq!(attr(&svg, "losses", "data-x-max"), 6.0);

    fs::write(dir.path().join("bad.csv"), "step,loss_av,loss_a\n1,2,3\n").unwrap();
    let err = fails(dir.path(), &["plot", "--metrics", "bad.csv", "--out", "bad"], 3);
    assert!(err.contains("loss_v"), "{err}");
}

#[test]
fn plot_of_a_run_without_mbp_shows_only_the_joint_loss() {
    let dir = workspace("off");
    ok(dir.path(), &["plot", "--metrics", "pre/metrics.csv", "--out", "pl"]);
    let svg = read(dir.path(), "pl/plot.svg");
    assert_eq!(svg.matches("<polyline").count(), 1);
    assert!(svg.contains("no data"));
}

#[test]
fn exit_codes_distinguish_usage_from_data_errors() {
    let dir = tempfile::tempdir().unwrap();
    fails(dir.path(), &["pretrain", "--bogus"], 2);
    fails(dir.path(), &["frobnicate"], 2);
    fails(dir.path(), &["pretrain", "--data", "missing", "--out", "x"], 3);
    fails(dir.path(), &["pretrain", "--data", "missing", "--out", "x", "--mbp", "maybe"], 2);
    fs::create_dir(dir.path().join("broken")).unwrap();
    fs::write(dir.path().join("broken/spec.json"), "{not json").unwrap();
    fails(dir.path(), &["eval", "--checkpoint", "nowhere", "--data", "broken", "--out", "x"], 3);
}
