use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn nextframe(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nextframe"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(o: &Output) {
    assert!(
        o.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        o.status.code(),
        String::from_utf8_lossy(&o.stdout),
        String::from_utf8_lossy(&o.stderr)
    );
}

#[test]
fn gen_leaves_is_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&nextframe(&["gen-leaves", "--n", "100", "--seed", "7", "--out", "a.vseq"], d));
    ok(&nextframe(&["--threads", "1", "gen-leaves", "--n", "100", "--seed", "7", "--out", "b.vseq"], d));
    assert_eq!(fs::read(d.join("a.vseq")).unwrap(), fs::read(d.join("b.vseq")).unwrap());
    let m: serde_json::Value = serde_json::from_slice(&fs::read(d.join("a.vseq.manifest.json")).unwrap()).unwrap();
    assert_eq!(m["seed"], 7);
    assert_eq!(m["config"]["params"]["n"], 100);
    assert_eq!(m["command"], "gen-leaves");
}

#[test]
fn usage_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let o = nextframe(&["frobnicate"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
    let o = nextframe(&["gen-leaves", "--bogus"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    let o = nextframe(&["--help"], dir.path());
    assert_eq!(o.status.code(), Some(0));
}

#[test]
fn runtime_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let o = nextframe(&["denoise", "--model", "missing.bfun", "--data", "x.vseq", "--sigma", "0.1", "--out", "o.csv"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("missing.bfun"));
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("c.json"), r#"{"params": {"n": 5, "leaves": {"widht": 32}}}"#).unwrap();
    let o = nextframe(&["gen-leaves", "--config", "c.json", "--out", "x.vseq"], d);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("widht"));
    fs::write(d.join("c.json"), r#"{"seed": 2, "params": {"n": 5}}"#).unwrap();
    ok(&nextframe(&["gen-leaves", "--config", "c.json", "--out", "x.vseq"], d));
}

#[test]
fn demo1d_writes_figure_tables() {
    let dir = tempfile::tempdir().unwrap();
    let o = nextframe(&["demo1d", "--out", "d", "--chains", "200"], dir.path());
    ok(&o);
    let d = dir.path().join("d");
    for f in [
        "densities.csv",
        "blind_denoiser.csv",
        "deterministic_trajectories.csv",
        "stochastic_endpoints.csv",
        "noisy_pdf.svg",
        "manifest.json",
    ] {
        assert!(d.join(f).is_file(), "{f} missing");
    }
    let head = fs::read_to_string(d.join("densities.csv")).unwrap();
    assert!(head.starts_with("y,sigma,noisy_pdf,score,denoised\n"));
}

#[test]
fn train_sample_rollout_analyze_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(
        d.join("leaves.json"),
        r#"{"params": {"n": 12, "leaves": {"height": 16, "width": 16, "ref_radius": 3.0}}}"#,
    )
    .unwrap();
    ok(&nextframe(&["gen-leaves", "--config", "leaves.json", "--seed", "1", "--out", "d.vseq"], d));
    ok(&nextframe(
        &["train", "--data", "d.vseq", "--tau", "2", "--epochs", "2", "--base-channels", "2", "--out", "run"],
        d,
    ));
    for f in ["model.bfun", "train_log.csv", "manifest.json"] {
        assert!(d.join("run").join(f).is_file(), "{f} missing");
    }
    let log = fs::read_to_string(d.join("run/train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 3, "{log}");

    ok(&nextframe(&["denoise", "--model", "run/model.bfun", "--data", "d.vseq", "--sigma", "0.2", "--out", "den.csv"], d));
    ok(&nextframe(
        &["sample", "--model", "run/model.bfun", "--cond", "d.vseq:0", "--n-samples", "2", "--max-iters", "20", "--out", "s"],
        d,
    ));
    assert!(d.join("s/samples.vseq").is_file());
    ok(&nextframe(
        &["rollout", "--model", "run/model.bfun", "--cond", "d.vseq:1", "--steps", "2", "--mode", "one-step", "--out", "r.vseq"],
        d,
    ));
    let (seqs, _) = nextframe::vseq::read_sequences(&d.join("r.vseq")).unwrap();
    assert_eq!(seqs[0].len(), 4);
    ok(&nextframe(
        &["analyze", "curve", "--model", "run/model.bfun", "--data", "d.vseq", "--psnr-lo", "0", "--psnr-hi", "10", "--out", "c"],
        d,
    ));
    assert!(d.join("c/curve.csv").is_file() && d.join("c/curve.svg").is_file());
    ok(&nextframe(
        &["analyze", "filter", "--model", "run/model.bfun", "--cond", "d.vseq:0", "--pixel", "8,8", "--out", "f"],
        d,
    ));
    assert!(d.join("f/weights_2.pgm").is_file());
}
