use std::path::Path;
use std::process::{Command, Output};

use densecorr::autonet::ModelConfig;
use densecorr::io::config::write_run_config;
use densecorr::io::report::read_records;
use densecorr::training::RunConfig;
use serde_json::Value;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_densecorr"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn stdout_lines(out: &Output) -> Vec<Value> {
    String::from_utf8_lossy(&out.stdout)
        .lines()
        .filter(|l| l.starts_with('{'))
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

fn error_of(out: &Output) -> Value {
    let text = String::from_utf8_lossy(&out.stderr);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 1, "stderr should be one line: {text}");
    serde_json::from_str(lines[0]).unwrap()
}

fn small_config(path: &Path, epochs: usize) {
    let mut config = RunConfig {
        synthetic_epochs: epochs,
        mixed_epochs: epochs,
        ..RunConfig::default()
    };
    config.model = ModelConfig {
        vertex_count: 162,
        latent_id: 3,
        latent_exp: 2,
        encoder_widths: vec![8, 16],
        decoder_hidden: 16,
        anchor_zero_expression: false,
    };
    write_run_config(path, &config).unwrap();
}

fn synth(dir: &Path) {
    let out = run(&[
        "synth",
        "--out",
        dir.to_str().unwrap(),
        "--subjects",
        "4",
        "--expressions",
        "1",
        "--n",
        "162",
        "--k-id",
        "3",
        "--k-exp",
        "2",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let line = &stdout_lines(&out)[0];
    assert_eq!(line["bundles"], 8);
    assert_eq!(line["real"], 4);
}

#[test]
fn help_and_version_exit_zero() {
    assert!(run(&["--help"]).status.success());
    assert!(run(&["train", "--help"]).status.success());
    assert!(run(&["--version"]).status.success());
}

#[test]
fn usage_errors_are_json() {
    let out = run(&["train", "--bogus"]);
    assert_eq!(out.status.code(), Some(2));
    let e = error_of(&out);
    assert_eq!(e["error"], "usage");
    assert_eq!(e["code"], 2);
    assert_eq!(run(&[]).status.code(), Some(2));
}

#[test]
fn missing_file_is_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "eval",
        "--metric",
        "per-vertex",
        "--a",
        dir.path().join("nope.obj").to_str().unwrap(),
        "--b",
        dir.path().join("nope2.obj").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(3));
    assert_eq!(error_of(&out)["error"], "io");
}

#[test]
fn bad_config_and_bad_format_have_distinct_codes() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    synth(&data);
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "batch_size = 0\n").unwrap();
    let out = run(&[
        "train",
        "--data",
        data.to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.path().join("o").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(4));
    assert_eq!(error_of(&out)["error"], "config");

    let quad = dir.path().join("quad.obj");
    std::fs::write(&quad, "v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1 2 3 4\n").unwrap();
    let out = run(&["eval", "--metric", "fitting", "--a", quad.to_str().unwrap(), "--b", quad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(5));
    assert_eq!(error_of(&out)["error"], "format");
}

#[test]
fn train_is_deterministic_and_outputs_are_usable() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    synth(&data);
    let cfg = dir.path().join("run.toml");
    small_config(&cfg, 2);
    let mut finals = Vec::new();
    for name in ["a", "b"] {
        let out_dir = dir.path().join(name);
        let out = run(&[
            "train",
            "--data",
            data.to_str().unwrap(),
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            out_dir.to_str().unwrap(),
        ]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        let line = &stdout_lines(&out)[0];
        assert_eq!(line["epochs"], 12);
        assert!(out_dir.join("latest.ckpt").exists());
        let log: Vec<Value> = read_records(out_dir.join("log.jsonl")).unwrap();
        assert_eq!(log.iter().filter(|r| r.get("mean_loss").is_some()).count(), 12);
        finals.push(std::fs::read(out_dir.join("final.ckpt")).unwrap());
    }
    assert_eq!(finals[0], finals[1]);

    let corr = dir.path().join("corr");
    let scan = data.join("s0000_e0.ply");
    let out = run(&[
        "correspond",
        "--checkpoint",
        dir.path().join("a/final.ckpt").to_str().unwrap(),
        "--template",
        data.to_str().unwrap(),
        "--scans",
        scan.to_str().unwrap(),
        "--out",
        corr.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let mesh = corr.join("s0000_e0_corr.obj");
    assert!(mesh.exists());

    let report = dir.path().join("metrics.jsonl");
    let gt = data.join("s0000_e0_gt.obj");
    for metric in ["per-vertex", "fitting"] {
        let out = run(&[
            "eval",
            "--metric",
            metric,
            "--a",
            gt.to_str().unwrap(),
            "--b",
            mesh.to_str().unwrap(),
            "--out",
            report.to_str().unwrap(),
        ]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let records: Vec<Value> = read_records(&report).unwrap();
    assert_eq!(records.len(), 3);
    let per_vertex = records[0]["mean"].as_f64().unwrap();
    let fitting = records[1]["mean"].as_f64().unwrap();
    assert!(fitting <= per_vertex);

    let out = run(&[
        "eval",
        "--metric",
        "landmark",
        "--a",
        mesh.to_str().unwrap(),
        "--b",
        data.join("s0000_e0.lmk").to_str().unwrap(),
        "--template",
        data.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(stdout_lines(&out)[0]["metric"], "semantic_landmark");
}

#[test]
fn preprocess_recovers_a_synthetic_scan() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    synth(&data);
    let sampled = dir.path().join("in.ply");
    let raw = dir.path().join("raw.ply");
    let out = run(&[
        "preprocess",
        "--scan",
        data.join("s0000_e0_gt.obj").to_str().unwrap(),
        "--landmarks",
        data.join("s0000_e0.lmk").to_str().unwrap(),
        "--template",
        data.to_str().unwrap(),
        "--out",
        sampled.to_str().unwrap(),
        "--raw-out",
        raw.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let line = &stdout_lines(&out)[0];
    assert_eq!(line["points"], 162);
    assert!(line["landmark_rms"].as_f64().unwrap() < 0.2);
    let cloud = densecorr::io::read_cloud(&sampled).unwrap();
    assert!(cloud.points().iter().all(|p| p.norm() <= 1.0 + 1e-9));
    assert!(raw.exists());
}

#[test]
fn bench_reports_equal_answers() {
    let out = run(&["bench", "--points", "3000", "--brute-points", "500"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let lines = stdout_lines(&out);
    assert!(lines.len() >= 4);
    for l in lines.iter().filter(|l| l.get("equal").is_some()) {
        assert_eq!(l["equal"], true, "{l}");
    }
}

#[test]
fn gradcheck_command_passes() {
    let out = run(&["gradcheck", "--instances", "2", "--seed", "7"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(stdout_lines(&out)[0]["passed"], true);
}
