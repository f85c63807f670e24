use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn octoseq(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_octoseq")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = octoseq(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn help_and_usage_exit_codes() {
    assert_eq!(octoseq(&["--help"]).status.code(), Some(0));
    assert_eq!(octoseq(&["--version"]).status.code(), Some(0));
    assert_eq!(octoseq(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(octoseq(&["encode"]).status.code(), Some(1));
}

#[test]
fn data_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.octv");
    fs::write(&bad, b"not a grid").unwrap();
    let out = octoseq(&["encode", "--input", s(&bad), "--out", s(&dir.path().join("x.txt"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}

#[test]
fn encode_decode_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&["make-dataset", "--out", s(&data), "--count", "3", "--resolution", "16", "--seed", "4"]);
    for i in 0..3 {
        let grid = data.join(format!("shape_{i:04}.octv"));
        let seq = dir.path().join(format!("{i}.txt"));
        let back = dir.path().join(format!("{i}.octv"));
        ok(&["encode", "--input", s(&grid), "--out", s(&seq), "--class", "1"]);
        ok(&["decode", "--input", s(&seq), "--out", s(&back), "--resolution", "16"]);
        assert_eq!(fs::read(&grid).unwrap(), fs::read(&back).unwrap());
    }
}

#[test]
fn stats_prints_table() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&["make-dataset", "--out", s(&data), "--count", "4", "--resolution", "8"]);
    let out = ok(&["stats", "--corpus", s(&data), "--scheme", "0/2"]);
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("scheme 0/2") && text.contains("latents"));
}

#[test]
fn export_formats() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&["make-dataset", "--out", s(&data), "--count", "1", "--resolution", "4", "--kind", "box"]);
    let grid = data.join("shape_0000.octv");
    let obj = dir.path().join("a.obj");
    ok(&["export", "--input", s(&grid), "--format", "obj", "--out", s(&obj)]);
    assert!(fs::read_to_string(&obj).unwrap().contains("\nf "));
    ok(&["export", "--input", s(&grid), "--format", "slices", "--out", s(&dir.path().join("sl"))]);
    assert_eq!(fs::read_dir(dir.path().join("sl")).unwrap().count(), 4);
    let out = octoseq(&["export", "--input", s(&grid), "--format", "stl", "--out", s(&obj)]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn train_sample_upres_eval() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&["make-dataset", "--out", s(&data), "--count", "2", "--resolution", "8", "--seed", "2"]);
    let cfg = dir.path().join("run.toml");
    fs::write(
        &cfg,
        "[model]\nlayers = 1\nheads = 2\nwidth = 16\nff_width = 32\nmax_positions = 256\n\n[train]\nepochs = 1\nbatch_size = 2\n",
    )
    .unwrap();
    let ckpt = dir.path().join("m.ckpt");
    let out = ok(&[
        "train", "--corpus", s(&data), "--config", s(&cfg), "--out", s(&ckpt), "--scheme", "0/1,0/2", "--seed", "1",
    ]);
    assert!(String::from_utf8(out.stdout).unwrap().contains("bits/token"));
    let csv = fs::read_to_string(ckpt.with_extension("csv")).unwrap();
    assert!(csv.starts_with("epoch,step,loss,bits_per_token,lr\n"));

    let samples = dir.path().join("samples");
    ok(&["sample", "--checkpoint", s(&ckpt), "--out", s(&samples), "--count", "2", "--temperature", "0"]);
    assert!(samples.join("sample_0001.octv").exists());

    let up = dir.path().join("up.octv");
    let grid = data.join("shape_0000.octv");
    ok(&["upres", "--checkpoint", s(&ckpt), "--input", s(&grid), "--prefix-depth", "1", "--out", s(&up)]);
    assert!(up.exists());

    let report = dir.path().join("eval.csv");
    let out = ok(&["eval", "--checkpoint", s(&ckpt), "--corpus", s(&data), "--multiplier", "1", "--out", s(&report)]);
    assert!(String::from_utf8(out.stdout).unwrap().contains("COV"));
    assert!(fs::read_to_string(&report).unwrap().starts_with("cov_percent"));
}
