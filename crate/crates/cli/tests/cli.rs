//! End-to-end runs of the `pesto` binary on tiny synthetic data.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use pesto_core::audio::{save_wav, AudioClip};
use pesto_core::ModelFile;
use tempfile::TempDir;

const FAST: &[&str] = &[
    "--override",
    "train.epochs=1",
    "--override",
    "train.frames_per_clip=8",
    "--override",
    "train.batch_size=16",
    "--override",
    "synth.n_samples=6",
    "--override",
    "synth.duration=0.5",
];

fn pesto(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pesto"))
        .args(args)
        .env_remove("PESTO_THREADS")
        .output()
        .expect("binary runs")
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn check(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn synth_dir(root: &Path, count: usize) -> PathBuf {
    let dir = root.join("synth");
    let out = pesto(&["synth", "--out", path(&dir), "--count", &count.to_string(), "--override", "synth.duration=0.5"]);
    check(&out);
    dir
}

fn train_model(root: &Path, data: &Path, seed: &str) -> PathBuf {
    let model = root.join(format!("model_{seed}.pesto"));
    let mut args = vec!["train", "--data", path(data), "--out", path(&model), "--seed", seed];
    args.extend_from_slice(FAST);
    check(&pesto(&args));
    model
}

#[test]
fn synth_writes_pairs() {
    let tmp = TempDir::new().unwrap();
    let dir = synth_dir(tmp.path(), 3);
    let mut names: Vec<String> = fs::read_dir(&dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    assert_eq!(names, ["synth_0.csv", "synth_0.wav", "synth_1.csv", "synth_1.wav", "synth_2.csv", "synth_2.wav"]);
}

#[test]
fn train_infer_eval_calibrate() {
    let tmp = TempDir::new().unwrap();
    let data = synth_dir(tmp.path(), 4);
    let model = train_model(tmp.path(), &data, "3");
    assert!(tmp.path().join("train_log.csv").is_file());
    let file = ModelFile::load(&model).unwrap();
    assert!(file.calibration.is_some());
    assert_eq!(file.training.as_ref().unwrap().epochs_completed, 1);

    // Same seed, same bytes.
    let again = tmp.path().join("again");
    fs::create_dir(&again).unwrap();
    let model_b = train_model(&again, &data, "3");
    assert_eq!(fs::read(&model).unwrap(), fs::read(&model_b).unwrap());

    let csv = tmp.path().join("track.csv");
    let svg = tmp.path().join("track.svg");
    let wav = data.join("synth_0.wav");
    check(&pesto(&[
        "infer", "--model", path(&model), "--audio", path(&wav), "--out", path(&csv), "--plot", path(&svg),
    ]));
    let text = fs::read_to_string(&csv).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("time,frequency,confidence"));
    assert!(lines.count() > 10);
    let plot = fs::read_to_string(&svg).unwrap();
    assert!(plot.starts_with("<svg") && plot.trim_end().ends_with("</svg>"));

    let report = tmp.path().join("report.json");
    check(&pesto(&["eval", "--model", path(&model), "--data", path(&data), "--ablation", "--out", path(&report)]));
    let doc: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    let rpa = doc["rpa"].as_f64().unwrap();
    let rca = doc["rca"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&rpa) && rpa <= rca && rca <= 1.0);
    assert_eq!(doc["per_clip"].as_array().unwrap().len(), 4);
    assert_eq!(doc["loss_terms"]["use_equiv"], serde_json::Value::Bool(true));
    assert!(doc["fingerprint"].is_string());

    let recal = tmp.path().join("recal.pesto");
    let mut args = vec!["calibrate", "--model", path(&model), "--out", path(&recal)];
    args.extend_from_slice(FAST);
    let out = pesto(&args);
    check(&out);
    let stats: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(stats["p0"].is_i64());
    // Same calibration set as training, so the same offset.
    assert_eq!(
        ModelFile::load(&recal).unwrap().calibration,
        ModelFile::load(&model).unwrap().calibration
    );
}

#[test]
fn snr_sweep_has_one_row_per_column() {
    let tmp = TempDir::new().unwrap();
    let data = synth_dir(tmp.path(), 2);
    let model = train_model(tmp.path(), &data, "1");
    for i in 0..2 {
        let noise: Vec<f32> = (0..8000).map(|j| (((j * 7919 + i * 31) % 2001) as f32 / 1000.0 - 1.0) * 0.3).collect();
        let clip = AudioClip::new(noise, 16000, "bg").unwrap();
        save_wav(&clip, data.join(format!("synth_{i}_bg.wav"))).unwrap();
    }
    let out = pesto(&["eval", "--model", path(&model), "--data", path(&data), "--snr", "clean,20,10,0"]);
    check(&out);
    let doc: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let labels: Vec<&str> = doc["columns"]
        .as_array()
        .unwrap()
        .iter()
        .map(|c| c["snr"].as_str().unwrap())
        .collect();
    assert_eq!(labels, ["clean", "20", "10", "0"]);
}

#[test]
fn exit_codes() {
    let tmp = TempDir::new().unwrap();
    let missing = tmp.path().join("nowhere");
    let out = pesto(&["train", "--data", path(&missing), "--out", path(&tmp.path().join("m.pesto"))]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nowhere"));

    let out = pesto(&["config", "print", "--override", "train.no_such_key=1"]);
    assert_eq!(out.status.code(), Some(2));
    let out = pesto(&["config", "print", "--override", "model.in_bins=10"]);
    assert_eq!(out.status.code(), Some(2));

    let bad = tmp.path().join("bad.json");
    fs::write(&bad, r#"{"train": {"epochs": 0}}"#).unwrap();
    assert_eq!(pesto(&["config", "print", "--config", path(&bad)]).status.code(), Some(2));

    let out = pesto(&["infer", "--model", path(&missing), "--audio", path(&missing)]);
    assert_eq!(out.status.code(), Some(3));

    let data = synth_dir(tmp.path(), 2);
    let model = train_model(tmp.path(), &data, "0");
    let empty = tmp.path().join("empty.wav");
    save_wav(&AudioClip { samples: vec![], sample_rate: 16000, id: "e".into() }, &empty).unwrap();
    let out = pesto(&["infer", "--model", path(&model), "--audio", path(&empty)]);
    assert_eq!(out.status.code(), Some(3));

    let no_ann = tmp.path().join("plain");
    fs::create_dir(&no_ann).unwrap();
    fs::copy(data.join("synth_0.wav"), no_ann.join("a.wav")).unwrap();
    let out = pesto(&["eval", "--model", path(&model), "--data", path(&no_ann)]);
    assert_eq!(out.status.code(), Some(3));

    // An absurd step size overflows the weights.
    let nan_model = tmp.path().join("nan.pesto");
    let mut args = vec!["train", "--data", path(&data), "--out", path(&nan_model)];
    args.extend_from_slice(FAST);
    args.extend_from_slice(&["--override", "train.lr=1e30", "--override", "train.epochs=3", "--override", "train.schedule=constant"]);
    assert_eq!(pesto(&args).status.code(), Some(4));
}

#[test]
fn config_and_help() {
    let out = pesto(&["config", "print", "--override", "train.epochs=1", "--seed", "9"]);
    check(&out);
    let cfg: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(cfg["train"]["epochs"], 1);
    assert_eq!(cfg["seed"], 9);

    let out = pesto(&["--help"]);
    check(&out);
    let help = String::from_utf8_lossy(&out.stdout);
    let reference = pesto_core::config::config_reference();
    for line in reference.lines() {
        let key = line.split_whitespace().next().unwrap();
        assert!(help.contains(key), "help lacks {key}");
    }
    assert!(help.contains("loss.lambda_equiv"));
}

#[test]
fn bench_is_deterministic() {
    let out = pesto(&["bench", "--seconds", "1", "--repeats", "1", "--threads", "1"]);
    check(&out);
    let doc: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(doc["deterministic"], true);
    assert!(doc["realtime_factor"].as_f64().unwrap() > 1.0);
}
