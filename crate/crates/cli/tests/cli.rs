use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn dctlr(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dctlr"))
        .args(args)
        .current_dir(cwd)
        .env_remove("DCTLR_OUT_DIR")
        .output()
        .expect("run dctlr")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn dct_check_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let ok = dctlr(&["dct", "check", "--n", "1,2,64"], dir.path());
    assert_eq!(ok.status.code(), Some(0));
    let out = stdout(&ok);
    assert_eq!(out.lines().filter(|l| l.ends_with("ok")).count(), 3);
    assert_eq!(dctlr(&["dct", "check", "--n", "0"], dir.path()).status.code(), Some(2));
    assert_eq!(dctlr(&["dct", "check"], dir.path()).status.code(), Some(2));
}

#[test]
fn memory_reproduces_table_cells() {
    let dir = tempfile::tempdir().unwrap();
    let o = dctlr(&["memory", "--layers", "224", "--n", "4096", "--rank", "256", "--dtype", "fp32"], dir.path());
    assert_eq!(o.status.code(), Some(0));
    let out = stdout(&o);
    assert!(out.contains("896.00"), "{out}");
    assert!(out.contains("64.22"), "{out}");

    let o = dctlr(&["memory", "--layers", "224", "--n", "4096", "--rank", "32", "--json"], dir.path());
    let reports: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(reports[0]["human"], "56.00 MiB");
    assert_eq!(reports[1]["human"], "32.03 MiB");
}

#[test]
fn memory_warns_when_rank_exceeds_order() {
    let dir = tempfile::tempdir().unwrap();
    let o = dctlr(&["memory", "--layers", "2", "--n", "4", "--rank", "8"], dir.path());
    assert_eq!(o.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&o.stderr).contains("warning"));
}

#[test]
fn projection_sweep_writes_one_row_per_cell() {
    let dir = tempfile::tempdir().unwrap();
    let o = dctlr(
        &["bench", "projection", "--dims", "8,16", "--ranks", "1,n/4", "--trials", "3", "--out-dir", "sweep"],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(dir.path().join("sweep/projection.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "n,r,trial,projector,norm_mode,ratio,elapsed_us");
    // 2 dims x 2 ranks x 3 trials x 5 projector rows.
    assert_eq!(lines.count(), 2 * 2 * 3 * 5);
}

#[test]
fn bench_rejects_unknown_kind_and_bad_grid() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(dctlr(&["bench", "spectral"], dir.path()).status.code(), Some(2));
    assert_eq!(dctlr(&["bench", "projection", "--ranks", "n/0"], dir.path()).status.code(), Some(2));
    assert_eq!(dctlr(&["bench", "timing", "--n", "64", "--trials", "2"], dir.path()).status.code(), Some(2));
}

#[test]
fn timing_writes_json_report() {
    let dir = tempfile::tempdir().unwrap();
    let o = dctlr(&["bench", "timing", "--n", "64", "--trials", "5"], dir.path());
    assert_eq!(o.status.code(), Some(0));
    let text = fs::read_to_string(dir.path().join("dctlr-out/timing.json")).unwrap();
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(v[0]["n"], 64);
    assert_eq!(v[0]["rank"], 16);
    assert!(v[0]["median_ratio"].as_f64().unwrap() > 0.0);
}

const SMOKE: &str = "steps = 100\nd_in = 16\nd_h = 16\nd_out = 16\nrank = 4\nn_samples = 256\n";

#[test]
fn train_smoke_run_per_seed_outputs() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("run.toml"), SMOKE).unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_dctlr"))
        .args(["train", "--config", "run.toml", "--seeds", "1,2,3"])
        .current_dir(dir.path())
        .env("DCTLR_OUT_DIR", "from-env")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let out = dir.path().join("from-env");
    for seed in 1..=3 {
        let csv = fs::read_to_string(out.join(format!("dct_seed{seed}.csv"))).unwrap();
        assert_eq!(csv.lines().count(), 101);
        let summary: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(out.join(format!("dct_seed{seed}.json"))).unwrap()).unwrap();
        assert_eq!(summary["status"], "completed");
        assert!(summary["final_loss"].as_f64().unwrap().is_finite());
    }
    let all: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(all.as_array().unwrap().len(), 3);
}

#[test]
fn train_is_deterministic_and_overwrites() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("run.toml"), SMOKE).unwrap();
    let args = ["train", "--config", "run.toml", "--out-dir", "o", "--projector", "randperm", "--projector-seed=5"];
    assert_eq!(dctlr(&args, dir.path()).status.code(), Some(0));
    let first = fs::read_to_string(dir.path().join("o/randperm_seed0.csv")).unwrap();
    assert_eq!(dctlr(&args, dir.path()).status.code(), Some(0));
    let second = fs::read_to_string(dir.path().join("o/randperm_seed0.csv")).unwrap();
    let losses = |s: &str| s.lines().skip(1).map(|l| l.split(',').nth(1).unwrap().to_string()).collect::<Vec<_>>();
    assert_eq!(losses(&first), losses(&second));
}

#[test]
fn train_config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let o = dctlr(&["train", "--config", "nope.toml"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("nope.toml"));

    fs::write(dir.path().join("run.toml"), SMOKE).unwrap();
    for bad in [
        vec!["--unknown-key", "1"],
        vec!["--rank", "17"],
        vec!["--ef-mode", "int4"],
        vec!["--batch-size", "1000"],
        vec!["--seeds"],
        vec!["positional"],
    ] {
        let mut args = vec!["train", "--config", "run.toml"];
        args.extend(bad.iter().copied());
        assert_eq!(dctlr(&args, dir.path()).status.code(), Some(2), "{bad:?}");
    }
    // Nothing ran, so nothing was written.
    assert!(!dir.path().join("dctlr-out").exists());
}
