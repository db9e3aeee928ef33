//! End-to-end runs of the command-line binary.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use inrreg::nets::{save_checkpoint, Model, NetConfig};
use inrreg::volume::{write_landmarks, LandmarkSet};
use sha2::{Digest, Sha256};

const BIN: &str = env!("CARGO_BIN_EXE_inrreg");

/// Tiny networks and batches so each command finishes in well under a second.
const SMALL: &[&str] = &[
    "--set",
    "net.main_hidden=[8, 8]",
    "--set",
    "net.harmonizer_hidden=[4]",
    "--set",
    "train.batch_points=64",
    "--set",
    "eval.jacobian_samples=500",
];

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(BIN)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn synth(dir: &Path, out: &str) -> PathBuf {
    let o = run(dir, &["synth", "--out", out, "--dims", "12", "--landmarks", "6", "--seed", "7"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    dir.join(out)
}

fn train_args<'a>(out: &'a str, extra: &[&'a str]) -> Vec<&'a str> {
    let mut v = vec![
        "train",
        "--moving",
        "s/moving.vh",
        "--fixed",
        "s/fixed.vh",
        "--mask",
        "s/moving_mask.vh",
        "--out",
        out,
        "--epochs",
        "10",
    ];
    v.extend_from_slice(SMALL);
    v.extend_from_slice(extra);
    v
}

fn digests(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.file_name().unwrap() != "run.toml")
        .map(|p| {
            let name = p.file_name().unwrap().to_string_lossy().into_owned();
            (name, Sha256::digest(fs::read(&p).unwrap()).to_vec())
        })
        .collect();
    v.sort();
    v
}

#[test]
fn synth_reruns_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let a = synth(tmp.path(), "a");
    let b = synth(tmp.path(), "b");
    let (da, db) = (digests(&a), digests(&b));
    assert!(da.len() >= 5, "{da:?}");
    assert_eq!(da, db);
    assert!(a.join("manifest.toml").exists());
    assert!(a.join("run.toml").exists());
}

#[test]
fn folding_amplitude_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run(tmp.path(), &["synth", "--out", "s", "--dims", "12", "--amplitude", "5"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).to_lowercase().contains("fold"), "{}", stderr(&o));
}

#[test]
fn missing_inputs_are_enumerated() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run(tmp.path(), &["train", "--moving", "m.vh", "--out", "t"]);
    assert_eq!(code(&o), 2);
    let err = stderr(&o);
    for key in ["paths.fixed", "paths.mask"] {
        assert!(err.contains(key), "{err}");
    }
}

#[test]
fn weight_domain_depends_on_mode() {
    let tmp = tempfile::tempdir().unwrap();
    synth(tmp.path(), "s");
    let o = run(tmp.path(), &train_args("c", &["--mode", "conditioned", "--alpha", "10"]));
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    let o = run(tmp.path(), &train_args("b", &["--mode", "baseline", "--alpha", "10", "--reg", "bending"]));
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(tmp.path().join("b/checkpoint.ckpt").exists());
    assert!(tmp.path().join("b/loss_log.csv").exists());
}

#[test]
fn unknown_keys_are_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run(tmp.path(), &["synth", "--out", "s", "--set", "synth.colour=3"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("synth.colour"), "{}", stderr(&o));
}

#[test]
fn diverging_training_is_a_numeric_failure() {
    let tmp = tempfile::tempdir().unwrap();
    synth(tmp.path(), "s");
    let o = run(tmp.path(), &train_args("t", &["--set", "train.learning_rate=1e30"]));
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    // The partial log is still written.
    assert!(tmp.path().join("t/loss_log.csv").exists());
}

#[test]
fn training_is_reproducible_from_its_run_file() {
    let tmp = tempfile::tempdir().unwrap();
    synth(tmp.path(), "s");
    let o = run(tmp.path(), &train_args("t1", &["--seed", "3"]));
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let o = run(tmp.path(), &["--config", "t1/run.toml", "--set", "paths.out=\"t2\"", "train"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for f in ["loss_log.csv", "checkpoint.ckpt"] {
        let (a, b) = (fs::read(tmp.path().join("t1").join(f)).unwrap(), fs::read(tmp.path().join("t2").join(f)).unwrap());
        assert!(a == b, "{f} differs");
    }
}

#[test]
fn identity_checkpoint_on_coincident_landmarks_has_zero_error() {
    let tmp = tempfile::tempdir().unwrap();
    synth(tmp.path(), "s");
    let cfg = NetConfig {
        main_hidden: vec![8],
        conditioned: false,
        ..NetConfig::default()
    };
    save_checkpoint(&Model::<f32>::zeros(cfg.architecture()), &tmp.path().join("id.ckpt")).unwrap();
    let pts = vec![[1.0, 2.0, 3.0], [5.0, 5.0, 5.0], [10.0, 0.0, 7.0]];
    let set = LandmarkSet {
        moving: pts.clone(),
        fixed: pts,
    };
    write_landmarks(&tmp.path().join("lm.csv"), &set).unwrap();
    let o = run(
        tmp.path(),
        &[
            "eval",
            "--checkpoint",
            "id.ckpt",
            "--moving",
            "s/moving.vh",
            "--landmarks",
            "lm.csv",
            "--out",
            "e",
            "--set",
            "eval.jacobian_samples=500",
        ],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let summary: toml::Table = fs::read_to_string(tmp.path().join("e/summary.toml")).unwrap().parse().unwrap();
    assert_eq!(summary["tre_mean_mm"].as_float(), Some(0.0));
    assert_eq!(summary["landmarks"].as_integer(), Some(3));
    let tre = fs::read_to_string(tmp.path().join("e/tre.csv")).unwrap();
    assert_eq!(tre.lines().count(), 4);
}

#[test]
fn tune_warp_eval_and_report_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    synth(tmp.path(), "s");
    let o = run(tmp.path(), &train_args("t", &["--mode", "conditioned"]));
    assert_eq!(code(&o), 0, "{}", stderr(&o));

    let mut tune = vec![
        "tune",
        "--checkpoint",
        "t/checkpoint.ckpt",
        "--moving",
        "s/moving.vh",
        "--fixed",
        "s/fixed.vh",
        "--mask",
        "s/moving_mask.vh",
        "--fixed-mask",
        "s/fixed_mask.vh",
        "--out",
        "t",
        "--method",
        "both",
        "--set",
        "tune.bo_budget=3",
        "--set",
        "tune.bo_epochs=5",
    ];
    tune.extend_from_slice(SMALL);
    let o = run(tmp.path(), &tune);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let table = fs::read_to_string(tmp.path().join("t/tune.csv")).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines[0], "alpha,dice");
    assert_eq!(lines.len(), 1 + 11 + 1);
    assert!(lines[12].starts_with("alpha_star,"));
    let rows: Vec<(f64, f64)> = lines[1..12]
        .iter()
        .map(|l| {
            let (a, d) = l.split_once(',').unwrap();
            (a.parse().unwrap(), d.parse().unwrap())
        })
        .collect();
    let star: f64 = lines[12]["alpha_star,".len()..].parse().unwrap();
    let best = rows.iter().map(|r| r.1).fold(f64::NEG_INFINITY, f64::max);
    let last_best = rows.iter().filter(|r| r.1 == best).map(|r| r.0).fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(star, last_best);
    assert_eq!(fs::read_to_string(tmp.path().join("t/bo_history.csv")).unwrap().lines().count(), 4);

    let o = run(
        tmp.path(),
        &["warp", "--checkpoint", "t/checkpoint.ckpt", "--moving", "s/moving.vh", "--out", "w"],
    );
    assert_eq!(code(&o), 2, "conditioned warp needs a weight: {}", stderr(&o));
    let o = run(
        tmp.path(),
        &[
            "warp",
            "--checkpoint",
            "t/checkpoint.ckpt",
            "--moving",
            "s/moving.vh",
            "--mask",
            "s/moving_mask.vh",
            "--out",
            "w",
            "--alpha",
            "0.5",
        ],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for f in ["field.vh", "moved.vh", "moved_mask.vh"] {
        assert!(tmp.path().join("w").join(f).exists(), "{f}");
    }

    let o = run(tmp.path(), &["report", "t", "--out", "r"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let md = fs::read_to_string(tmp.path().join("r/summary.md")).unwrap();
    assert!(md.contains("Ratio (BO / grid):"), "{md}");
    let report: toml::Table = fs::read_to_string(tmp.path().join("r/report.toml")).unwrap().parse().unwrap();
    let (g, b, r) = (
        report["grid_seconds"].as_float().unwrap(),
        report["bo_seconds"].as_float().unwrap(),
        report["ratio_bo_over_grid"].as_float().unwrap(),
    );
    assert!(g > 0.0 && b > 0.0);
    assert!((r - b / g).abs() <= 1e-9 * r.abs().max(1.0));
    for f in ["loss_curve.svg", "alpha_dice.svg", "alpha_bending.svg"] {
        let svg = fs::read_to_string(tmp.path().join("r").join(f)).unwrap();
        assert!(svg.starts_with("<svg") || svg.starts_with("<?xml"), "{f}");
    }
}

#[test]
fn keys_lists_every_namespace() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run(tmp.path(), &["keys"]);
    assert_eq!(code(&o), 0);
    let out = String::from_utf8(o.stdout).unwrap();
    for ns in ["paths.", "train.", "net.", "tune.", "eval.", "synth."] {
        assert!(out.contains(ns), "{ns}");
    }
}
