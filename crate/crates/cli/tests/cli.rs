//! End-to-end command tests against the built binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_dvd")
}

fn run(args: &[&str]) -> Output {
    Command::new(bin())
        .args(args)
        .env_remove("DVD_OUT_DIR")
        .output()
        .expect("binary runs")
}

fn run_ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "command {:?} failed: {}\n{}",
        args,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn gen_small(dir: &Path, seed: u64) -> (PathBuf, PathBuf) {
    let out = dir.to_str().unwrap();
    run_ok(&[
        "gen",
        "--out-dir",
        out,
        "--seed",
        &seed.to_string(),
        "--samples-per-class",
        "60",
    ]);
    (dir.join("source.dvdf"), dir.join("target.dvdf"))
}

#[test]
fn gen_is_deterministic_across_runs() {
    let dir_a = tempfile::tempdir().unwrap();
    let dir_b = tempfile::tempdir().unwrap();
    gen_small(dir_a.path(), 7);
    gen_small(dir_b.path(), 7);
    for name in ["source.dvdf", "target.dvdf"] {
        let a = std::fs::read(dir_a.path().join(name)).unwrap();
        let b = std::fs::read(dir_b.path().join(name)).unwrap();
        assert_eq!(a, b, "{name} differs between identical runs");
    }
}

#[test]
fn gen_theta_zero_notes_no_shift() {
    let dir = tempfile::tempdir().unwrap();
    let stdout = run_ok(&[
        "gen",
        "--out-dir",
        dir.path().to_str().unwrap(),
        "--seed",
        "1",
        "--theta",
        "0",
        "--samples-per-class",
        "60",
    ]);
    assert!(stdout.contains("no shift"), "stdout: {stdout}");
}

#[test]
fn gen_invalid_theta_exits_with_usage_code() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "gen",
        "--out-dir",
        dir.path().to_str().unwrap(),
        "--theta",
        "400",
    ]);
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("360"), "stderr: {stderr}");
}

/// Tiny but complete pipeline: gen -> pretrain -> traindvd -> adapt -> eval.
#[test]
fn full_pipeline_smoke() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let (source, target) = gen_small(dir.path(), 3);
    let source = source.to_str().unwrap().to_string();
    let target = target.to_str().unwrap().to_string();

    run_ok(&[
        "pretrain", "--out-dir", out, "--source", &source, "--seed", "3", "--epochs", "25",
        "--batch", "32", "--latent", "8", "--hidden", "32",
    ]);
    let gs = dir.path().join("gs.dvd1");
    let f = dir.path().join("f.dvd1");
    assert!(gs.exists() && f.exists());

    run_ok(&[
        "traindvd", "--out-dir", out, "--source", &source,
        "--gs", gs.to_str().unwrap(), "--f", f.to_str().unwrap(),
        "--seed", "3", "--epochs", "2", "--t-steps", "8",
        "--drift-hidden", "32", "--k-s-dif", "5",
    ]);
    let d = dir.path().join("d.dvd1");
    assert!(d.exists());

    let metrics = dir.path().join("adapt.csv");
    run_ok(&[
        "adapt", "--out-dir", out, "--target", &target,
        "--gs", gs.to_str().unwrap(), "--f", f.to_str().unwrap(), "--d", d.to_str().unwrap(),
        "--seed", "3", "--epochs", "2", "--batch", "32", "--k-t-dif", "5", "--k-t", "3",
        "--metrics", metrics.to_str().unwrap(),
    ]);
    let gt = dir.path().join("gt.dvd1");
    assert!(gt.exists());
    let csv = std::fs::read_to_string(&metrics).unwrap();
    assert!(csv.starts_with("epoch,l_cls,target_accuracy"));
    assert_eq!(csv.lines().count(), 3, "header + 2 epochs");

    let stdout = run_ok(&[
        "eval", "--data", &target, "--encoder", gt.to_str().unwrap(),
        "--f", f.to_str().unwrap(),
    ]);
    assert!(stdout.contains("overall accuracy"), "stdout: {stdout}");
}

#[test]
fn adapt_zero_epochs_copies_source_encoder_weights() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let (source, target) = gen_small(dir.path(), 5);
    let source = source.to_str().unwrap().to_string();
    let target = target.to_str().unwrap().to_string();
    run_ok(&[
        "pretrain", "--out-dir", out, "--source", &source, "--seed", "5", "--epochs", "5",
        "--batch", "32", "--latent", "8", "--hidden", "16",
    ]);
    let gs = dir.path().join("gs.dvd1");
    let f = dir.path().join("f.dvd1");
    run_ok(&[
        "traindvd", "--out-dir", out, "--source", &source,
        "--gs", gs.to_str().unwrap(), "--f", f.to_str().unwrap(),
        "--seed", "5", "--epochs", "1", "--t-steps", "4", "--drift-hidden", "16",
        "--k-s-dif", "5",
    ]);
    let d = dir.path().join("d.dvd1");
    run_ok(&[
        "adapt", "--out-dir", out, "--target", &target,
        "--gs", gs.to_str().unwrap(), "--f", f.to_str().unwrap(), "--d", d.to_str().unwrap(),
        "--seed", "5", "--epochs", "0",
    ]);
    // Same layer payloads; the role tag and frozen flag legitimately differ.
    let gs_bytes = std::fs::read(dir.path().join("gs.dvd1")).unwrap();
    let gt_bytes = std::fs::read(dir.path().join("gt.dvd1")).unwrap();
    assert_eq!(gs_bytes.len(), gt_bytes.len());
    assert_eq!(&gs_bytes[8..], &gt_bytes[8..], "parameter payload differs");
}

#[test]
fn traindvd_with_unfrozen_head_is_contract_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let (source, _) = gen_small(dir.path(), 9);
    let source = source.to_str().unwrap().to_string();
    run_ok(&[
        "pretrain", "--out-dir", out, "--source", &source, "--seed", "9", "--epochs", "2",
        "--batch", "32", "--latent", "8", "--hidden", "16",
    ]);
    // Flip the frozen byte (offset 7) in the classifier checkpoint.
    let f_path = dir.path().join("f.dvd1");
    let mut bytes = std::fs::read(&f_path).unwrap();
    assert_eq!(bytes[7], 1);
    bytes[7] = 0;
    std::fs::write(&f_path, bytes).unwrap();

    let gs = dir.path().join("gs.dvd1");
    let output = run(&[
        "traindvd", "--out-dir", out, "--source", &source,
        "--gs", gs.to_str().unwrap(), "--f", f_path.to_str().unwrap(),
        "--epochs", "1",
    ]);
    assert_eq!(output.status.code(), Some(4), "contract violations exit 4");
}

#[test]
fn checkpoint_role_mismatch_is_contract_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let (source, target) = gen_small(dir.path(), 11);
    let source = source.to_str().unwrap().to_string();
    let target = target.to_str().unwrap().to_string();
    run_ok(&[
        "pretrain", "--out-dir", out, "--source", &source, "--seed", "11", "--epochs", "2",
        "--batch", "32", "--latent", "8", "--hidden", "16",
    ]);
    let gs = dir.path().join("gs.dvd1");
    let f = dir.path().join("f.dvd1");
    // Feed Gs where D is expected.
    let output = run(&[
        "adapt", "--out-dir", out, "--target", &target,
        "--gs", gs.to_str().unwrap(), "--f", f.to_str().unwrap(),
        "--d", gs.to_str().unwrap(), "--epochs", "1",
    ]);
    assert_eq!(output.status.code(), Some(4));
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains("role"), "stderr: {stderr}");
}

#[test]
fn missing_input_file_is_io_error() {
    let output = run(&[
        "eval",
        "--data", "/nonexistent/data.dvdf",
        "--encoder", "/nonexistent/gs.dvd1",
        "--f", "/nonexistent/f.dvd1",
    ]);
    assert_eq!(output.status.code(), Some(3));
}

#[test]
fn config_file_supplies_defaults_and_flags_override() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "seed=21\nsamples_per_class=60\n").unwrap();
    // theta from flag, the rest from config.
    run_ok(&[
        "gen", "--out-dir", dir.path().to_str().unwrap(),
        "--config", cfg.to_str().unwrap(), "--theta", "90",
    ]);
    // Same outcome as passing everything by flag.
    let dir2 = tempfile::tempdir().unwrap();
    run_ok(&[
        "gen", "--out-dir", dir2.path().to_str().unwrap(),
        "--seed", "21", "--samples-per-class", "60", "--theta", "90",
    ]);
    let a = std::fs::read(dir.path().join("target.dvdf")).unwrap();
    let b = std::fs::read(dir2.path().join("target.dvdf")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn reproducible_checkpoints_and_metrics_across_identical_runs() {
    let run_once = |dir: &Path| -> (Vec<u8>, Vec<u8>, String) {
        let out = dir.to_str().unwrap();
        let (source, _) = gen_small(dir, 13);
        let source = source.to_str().unwrap().to_string();
        let metrics = dir.join("pretrain.csv");
        run_ok(&[
            "pretrain", "--out-dir", out, "--source", &source, "--seed", "13",
            "--epochs", "6", "--batch", "32", "--latent", "8", "--hidden", "16",
            "--metrics", metrics.to_str().unwrap(),
        ]);
        (
            std::fs::read(dir.join("gs.dvd1")).unwrap(),
            std::fs::read(dir.join("f.dvd1")).unwrap(),
            std::fs::read_to_string(&metrics).unwrap(),
        )
    };
    let dir_a = tempfile::tempdir().unwrap();
    let dir_b = tempfile::tempdir().unwrap();
    let (gs_a, f_a, m_a) = run_once(dir_a.path());
    let (gs_b, f_b, m_b) = run_once(dir_b.path());
    assert_eq!(gs_a, gs_b);
    assert_eq!(f_a, f_b);
    assert_eq!(m_a, m_b);
}
