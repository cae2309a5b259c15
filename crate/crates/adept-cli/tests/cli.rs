//! End-to-end checks of the `adept` binary: exit codes, artifact layout,
//! overwrite protection, and byte-stable strict reruns.

use std::path::Path;
use std::process::{Command, Output};

fn adept(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_adept")).args(args).output().expect("binary runs")
}

fn write_ppm(path: &Path, size: usize) {
    let mut bytes = format!("P6\n{size} {size}\n255\n").into_bytes();
    for y in 0..size {
        for x in 0..size {
            for c in 0..3 {
                bytes.push(((x * 7 + y * 13 + c * 29) % 256) as u8);
            }
        }
    }
    std::fs::write(path, bytes).unwrap();
}

fn tiny_config(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("tiny.toml");
    std::fs::write(
        &path,
        "strict = true\n\
         [dataset]\n\
         canvas = 32\npatch = 8\ntrain_samples = 8\n\
         probe_train_samples = 6\nprobe_eval_samples = 3\nseed = 11\n\
         [encoder]\n\
         embed_dim = 16\ndepth = 1\nheads = 2\nproj_dim = 8\n\
         [train]\n\
         batch_size = 4\nstage1_epochs = 1\nstage2_epochs = 1\n\
         queue_capacity = 32\nseed = 3\n",
    )
    .unwrap();
    path
}

#[test]
fn dctmap_writes_blobs_and_rejects_bad_geometry() {
    let dir = tempfile::tempdir().unwrap();
    let ok_img = dir.path().join("ok.ppm");
    write_ppm(&ok_img, 32);

    let out = adept(&[
        "dctmap",
        "--out",
        dir.path().to_str().unwrap(),
        "--check",
        ok_img.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("energy_compaction_0.25 ="), "{stdout}");
    assert!(stdout.contains("roundtrip_max_err"), "{stdout}");
    assert!(dir.path().join("ok.f64").exists());
    assert!(dir.path().join("ok.hdr").exists());

    // Rerunning without --force refuses to clobber the blobs.
    let again = adept(&["dctmap", "--out", dir.path().to_str().unwrap(), ok_img.to_str().unwrap()]);
    assert_eq!(again.status.code(), Some(1));

    let bad_img = dir.path().join("bad.ppm");
    write_ppm(&bad_img, 60);
    let bad = adept(&["dctmap", "--out", dir.path().to_str().unwrap(), bad_img.to_str().unwrap()]);
    assert_eq!(bad.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("not a positive multiple"));
}

#[test]
fn pretrain_validates_before_training_and_reruns_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());

    // A config error must fail fast without leaving artifacts behind.
    let bad_out = dir.path().join("bad_run");
    let bad = adept(&[
        "pretrain",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        bad_out.to_str().unwrap(),
        "--patch-size",
        "5",
    ]);
    assert_eq!(bad.status.code(), Some(1));
    assert!(!bad_out.exists(), "validation failures must not create the run directory");

    let run_a = dir.path().join("run_a");
    let first = adept(&[
        "pretrain",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        run_a.to_str().unwrap(),
    ]);
    assert!(first.status.success(), "{}", String::from_utf8_lossy(&first.stderr));
    for artifact in
        ["config_resolved.toml", "metrics.jsonl", "checkpoint_stage1.ckpt", "checkpoint_final.ckpt"]
    {
        assert!(run_a.join(artifact).exists(), "missing {artifact}");
    }

    // Idempotent: a second run into the same directory is refused.
    let refused = adept(&[
        "pretrain",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        run_a.to_str().unwrap(),
    ]);
    assert_eq!(refused.status.code(), Some(1));

    // A strict rerun into a fresh directory is byte-identical.
    let run_b = dir.path().join("run_b");
    let second = adept(&[
        "pretrain",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        run_b.to_str().unwrap(),
    ]);
    assert!(second.status.success());
    for artifact in ["metrics.jsonl", "checkpoint_stage1.ckpt", "checkpoint_final.ckpt"] {
        assert_eq!(
            std::fs::read(run_a.join(artifact)).unwrap(),
            std::fs::read(run_b.join(artifact)).unwrap(),
            "{artifact} differs between identical strict runs"
        );
    }
}

#[test]
fn probe_reports_json_and_flags_missing_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());

    let missing = adept(&[
        "probe",
        "--config",
        cfg.to_str().unwrap(),
        "--checkpoint",
        dir.path().join("nope.ckpt").to_str().unwrap(),
    ]);
    assert_eq!(missing.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("checkpoint not found"));

    let control = adept(&[
        "probe",
        "--config",
        cfg.to_str().unwrap(),
        "--random-control",
        "--num-seeds",
        "2",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert!(control.status.success(), "{}", String::from_utf8_lossy(&control.stderr));
    let report: serde_json::Value =
        serde_json::from_slice(&control.stdout).expect("stdout is a JSON report");
    for key in ["pretrained_error_px", "random_baseline_error_px", "seeds", "win_rate"] {
        assert!(report.get(key).is_some(), "missing {key}");
    }
    assert!(dir.path().join("probe_report.json").exists());
}

#[test]
fn gradcheck_passes_and_negative_control_trips() {
    let ok = adept(&["gradcheck", "--instances", "2"]);
    assert!(ok.status.success(), "{}", String::from_utf8_lossy(&ok.stderr));
    let stdout = String::from_utf8_lossy(&ok.stdout);
    assert!(stdout.contains("suites within"), "{stdout}");

    let control = adept(&["gradcheck", "--negative-control"]);
    assert!(control.status.success());
    assert!(String::from_utf8_lossy(&control.stdout).contains("corrupted rule detected"));
}
