use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn capt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_capt"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, extra: &str) -> String {
    let path = dir.join("run.conf");
    let text = format!(
        "preset = tiny\nlayers = 1\nhidden = 16\nheads = 2\nffn_inner = 32\nagg_inner = 16\nagg_out = 16\n\
         max_len = 24\nvocab_size = 1024\nbatch_size = 4\ntotal_steps = 6\nwarmup_steps = 1\nqueue_capacity = 16\n\
         corpus = corpus.txt\noutput_dir = out\ncheckpoint_interval = 3\nprobe_train = 40\nprobe_val = 20\n\
         finetune_steps = 4\neval_interval = 2\nfinetune_seeds = 1,2\nprobe_topic_words = 2\nprobe_filler_words = 2\n{extra}"
    );
    fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn gradcheck_passes_and_detects_corruption() {
    let ok = capt(&["gradcheck", "--batches", "5"]);
    assert!(
        ok.status.success(),
        "{}",
        String::from_utf8_lossy(&ok.stdout)
    );
    let stdout = String::from_utf8_lossy(&ok.stdout);
    assert!(!stdout.contains("FAIL"), "{stdout}");

    let bad = capt(&["gradcheck", "--batches", "5", "--corrupt-gradient", "1e-3"]);
    assert_eq!(bad.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&bad.stdout).contains("FAIL"));
}

#[test]
fn generate_pretrain_probe_inspect() {
    let dir = TempDir::new().unwrap();
    let conf = write_config(dir.path(), "");
    let probe_dir = dir.path().join("probe");
    let probe = probe_dir.to_str().unwrap();

    let out = capt(&[
        "generate-probe",
        "--config",
        &conf,
        "--out",
        probe,
        "--corpus-lines",
        "300",
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    for f in ["train.txt", "train.labels", "val.txt", "val.labels"] {
        assert!(probe_dir.join(f).exists(), "{f}");
    }

    let out = capt(&["pretrain", "--config", &conf]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let ckpt = dir.path().join("out/step-000006.ckpt");
    assert!(ckpt.exists());
    let metrics = fs::read_to_string(dir.path().join("out/metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 7);

    let resumed = capt(&[
        "pretrain",
        "--config",
        &conf,
        "--resume",
        dir.path().join("out/step-000003.ckpt").to_str().unwrap(),
    ]);
    assert!(resumed.status.success());
    assert_eq!(
        fs::read_to_string(dir.path().join("out/metrics.csv")).unwrap(),
        metrics
    );

    let ck = ckpt.to_str().unwrap();
    let out = capt(&[
        "probe",
        "--config",
        &conf,
        "--checkpoint",
        ck,
        "--baseline",
        ck,
        "--data",
        probe,
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("median final accuracy"), "{stdout}");
    assert!(dir.path().join("out/probe_curves.csv").exists());

    let out = capt(&["inspect", "--checkpoint", ck]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("embeddings.token"));
}

#[test]
fn config_errors_exit_with_one() {
    let dir = TempDir::new().unwrap();
    let conf = write_config(dir.path(), "hiddn = 3\n");
    let out = capt(&["pretrain", "--config", &conf]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("hiddn"));

    let out = capt(&[
        "pretrain",
        "--config",
        dir.path().join("missing.conf").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn diverging_run_exits_with_two() {
    let dir = TempDir::new().unwrap();
    fs::write(
        dir.path().join("corpus.txt"),
        "alpha beta gamma delta\nepsilon zeta eta theta\n".repeat(20),
    )
    .unwrap();
    let conf = write_config(dir.path(), "peak_lr = 1e300\n");
    let out = capt(&["pretrain", "--config", &conf]);
    assert_eq!(
        out.status.code(),
        Some(2),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
}
