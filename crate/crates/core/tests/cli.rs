use std::path::{Path, PathBuf};
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_handcal"))
}

fn quick_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/quick.toml")
}

fn run(args: &[&str], out: &Path) -> (i32, String) {
    let o = bin().args(args).arg("--out").arg(out).output().unwrap();
    (o.status.code().unwrap(), String::from_utf8_lossy(&o.stderr).into_owned())
}

#[test]
fn config_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "schema_version = 1\nseed = 1\nunknown_key = 2\n").unwrap();
    let (code, err) = run(&["study", "--config", bad.to_str().unwrap()], dir.path());
    assert_eq!(code, 1, "{err}");
    std::fs::write(&bad, "schema_version = 2\nseed = 1\n").unwrap();
    assert_eq!(run(&["model-check", "--config", bad.to_str().unwrap()], dir.path()).0, 1);
    assert_eq!(run(&["select"], &dir.path().join("empty")).0, 1);
    assert_eq!(bin().arg("no-such-verb").output().unwrap().status.code(), Some(1));
}

#[test]
fn malformed_dataset_is_a_runtime_failure_with_its_line() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("dataset.jsonl");
    std::fs::write(&data, "# comment\n{\"kind\":\"contact\",\"q\":[0,0,0,0,0,0,0,0,0,0,0,0],\"pair\":{\"k\":0,\"l\":1},\"y\":[0.0]}\nnot json\n").unwrap();
    let (code, err) = run(&["calibrate"], dir.path());
    assert_eq!(code, 2);
    assert!(err.contains("line 3"), "{err}");
}

#[test]
fn pipeline_verbs_run_and_are_byte_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let cfg = quick_config();
    let cfg = cfg.to_str().unwrap();
    for dir in [a.path(), b.path()] {
        for verb in ["testset", "generate", "simulate", "select", "calibrate", "report"] {
            let (code, err) = run(&[verb, "--config", cfg, "--jobs", "2"], dir);
            assert_eq!(code, 0, "{verb}: {err}");
        }
    }
    for name in [
        "testset.json",
        "trajectories.json",
        "dataset.jsonl",
        "simulation.json",
        "selection.json",
        "calibration.json",
        "residual_histogram.csv",
        "residual_scatter.csv",
        "report.txt",
    ] {
        let x = std::fs::read(a.path().join(name)).unwrap();
        let y = std::fs::read(b.path().join(name)).unwrap();
        assert!(x == y, "{name} differs between runs");
    }
    let csv = std::fs::read_to_string(a.path().join("residual_histogram.csv")).unwrap();
    assert!(csv.starts_with("# config_hash="));
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(a.path().join("calibration.json")).unwrap()).unwrap();
    assert_eq!(json["config_hash"].as_str().unwrap().len(), 64);
}
