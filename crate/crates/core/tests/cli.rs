use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use fedshift::harness::cli_main;
use fedshift::params::init_params;
use fedshift::quantization::{quantize_model, write_fsq, QuantSpec, Scheme};

fn smoke_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("configs/smoke.toml")
}

fn cli(args: &[&str]) -> (i32, String, String) {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let argv = std::iter::once("fedshift").chain(args.iter().copied());
    let code = cli_main(argv, &mut out, &mut err);
    (
        code,
        String::from_utf8(out).unwrap(),
        String::from_utf8(err).unwrap(),
    )
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn smoke_run_succeeds_quickly() {
    let dir = tempfile::tempdir().unwrap();
    let start = Instant::now();
    let status = Command::new(env!("CARGO_BIN_EXE_fedshift"))
        .args(["run", "--config", s(&smoke_path()), "--out", s(dir.path())])
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0));
    assert!(start.elapsed().as_secs() < 60);
    let text = std::fs::read_to_string(dir.path().join("rounds.csv")).unwrap();
    assert_eq!(text.lines().count(), 21);
    assert!(dir.path().join("config.toml").exists());
}

#[test]
fn seed_flag_and_overrides_match_file_edits() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let (code, _, err) = cli(&[
        "run",
        "--config",
        s(&smoke_path()),
        "--out",
        s(&a),
        "--seed",
        "9",
        "--override",
        "federation.rounds=4",
        "--override",
        "local.lr=0.1",
    ]);
    assert_eq!(code, 0, "{err}");
    let edited = std::fs::read_to_string(smoke_path())
        .unwrap()
        .replace("rounds = 20", "rounds = 4")
        .replace("lr = 0.05", "lr = 0.1")
        .replace("seeds = [1]", "seeds = [9]");
    let cfg = dir.path().join("edited.toml");
    std::fs::write(&cfg, edited).unwrap();
    let (code, _, err) = cli(&[
        "run",
        "--config",
        s(&cfg),
        "--out",
        s(&b),
        "--parallelism",
        "2",
    ]);
    assert_eq!(code, 0, "{err}");
    assert_eq!(
        std::fs::read(a.join("rounds.csv")).unwrap(),
        std::fs::read(b.join("rounds.csv")).unwrap()
    );
}

#[test]
fn malformed_config_exits_1_naming_key() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    let text = std::fs::read_to_string(smoke_path())
        .unwrap()
        .replace("epochs = 2", "epochs = 2\nlearning_rate = 0.1");
    std::fs::write(&cfg, text).unwrap();
    let (code, _, err) = cli(&["run", "--config", s(&cfg), "--out", s(dir.path())]);
    assert_eq!(code, 1);
    assert!(err.contains("learning_rate"), "{err}");

    let (code, _, err) = cli(&[
        "run",
        "--config",
        s(&smoke_path()),
        "--override",
        "federation.participation=2",
    ]);
    assert_eq!(code, 1, "{err}");
}

#[test]
fn usage_errors_exit_1() {
    let (code, _, err) = cli(&["run", "--bogus"]);
    assert_eq!(code, 1);
    assert!(err.contains("Usage"), "{err}");
    assert_eq!(cli(&[]).0, 1);
    let (code, out, _) = cli(&["--help"]);
    assert_eq!(code, 0);
    assert!(out.contains("inspect-payload"));
}

#[test]
fn missing_files_exit_3() {
    let (code, _, err) = cli(&["run", "--config", "/nonexistent/cfg.toml"]);
    assert_eq!(code, 3, "{err}");
    let (code, _, _) = cli(&["inspect-payload", "/nonexistent/x.fsq"]);
    assert_eq!(code, 3);
}

#[test]
fn divergence_exits_2_and_keeps_completed_rounds() {
    let dir = tempfile::tempdir().unwrap();
    let (code, _, err) = cli(&[
        "run",
        "--config",
        s(&smoke_path()),
        "--out",
        s(dir.path()),
        "--override",
        "local.lr=1e30",
    ]);
    assert_eq!(code, 2);
    assert!(err.contains("diverged"), "{err}");
    let text = std::fs::read_to_string(dir.path().join("rounds.csv")).unwrap();
    assert!(text.starts_with("seed,round,"));
}

#[test]
fn check_passes() {
    let (code, out, err) = cli(&["check"]);
    assert_eq!(code, 0, "{err}");
    assert!(out.contains("1000/1000"), "{out}");
    assert!(out.trim_end().ends_with("ok"));
}

#[test]
fn inspect_payload_describes_file() {
    let dir = tempfile::tempdir().unwrap();
    let spec = fedshift::params::ModelSpec::mlp(4, &[3], 2);
    let q = quantize_model(&init_params(&spec, 1), &QuantSpec::new(Scheme::Kmeans, 2)).unwrap();
    let path = dir.path().join("p.fsq");
    write_fsq(&path, &q).unwrap();
    let (code, out, _) = cli(&["inspect-payload", s(&path)]);
    assert_eq!(code, 0);
    assert!(out.contains("fc0.weight: 12 values"), "{out}");
    assert!(out.contains("2 bits"));

    let mut bytes = std::fs::read(&path).unwrap();
    bytes[0] = b'X';
    std::fs::write(&path, bytes).unwrap();
    let (code, _, err) = cli(&["inspect-payload", s(&path)]);
    assert_eq!(code, 2);
    assert!(err.contains("byte 0"), "{err}");
}
