use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn moecg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_moecg"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn tiny_config(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("tiny.toml");
    fs::write(
        &path,
        "trainers = [\"GDME\", \"MCS-CGME\"]\nk = 2\nrestarts = 2\nepochs = 3\n\
         [dataset]\nkind = \"artificial\"\nn_per_class = 10\n\
         [mcs]\nmax_evals = 50\n",
    )
    .unwrap();
    path
}

#[test]
fn gen_funcapprox_writes_both_splits() {
    let dir = tempfile::tempdir().unwrap();
    let out = moecg(&["gen", "funcapprox", "--out", dir.path().to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let rows = |name: &str| fs::read_to_string(dir.path().join(name)).unwrap().lines().count() - 1;
    assert_eq!(rows("train.csv"), 500);
    assert_eq!(rows("test.csv"), 250);
}

#[test]
fn gen_artificial_respects_class_size() {
    let dir = tempfile::tempdir().unwrap();
    let out = moecg(&["gen", "artificial", "--n-per-class", "7", "--out", dir.path().to_str().unwrap()]);
    assert!(out.status.success());
    let text = fs::read_to_string(dir.path().join("data.csv")).unwrap();
    assert_eq!(text.lines().count(), 22);
    assert_eq!(text.lines().next().unwrap(), "x0,x1,label");
}

#[test]
fn search_writes_monotone_trace() {
    let dir = tempfile::tempdir().unwrap();
    let trace = dir.path().join("trace.csv");
    for algo in ["cs", "mcs"] {
        let out = moecg(&[
            "search",
            "sphere",
            "--algo",
            algo,
            "--dim",
            "2",
            "--evals",
            "10000",
            "--trace",
            trace.to_str().unwrap(),
        ]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        let text = fs::read_to_string(&trace).unwrap();
        let values: Vec<f64> = text
            .lines()
            .skip(1)
            .map(|l| l.split(',').nth(1).unwrap().parse().unwrap())
            .collect();
        assert_eq!(values.len(), 10_000);
        assert!(values.windows(2).all(|w| w[1] <= w[0]));
        assert!(String::from_utf8_lossy(&out.stdout).starts_with("best_fitness "));
    }
}

#[test]
fn exit_codes() {
    assert_eq!(moecg(&["--help"]).status.code(), Some(0));
    assert_eq!(moecg(&["search", "sphere", "--bogus"]).status.code(), Some(1));
    assert_eq!(moecg(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(moecg(&["run"]).status.code(), Some(1));
    assert_eq!(moecg(&["run", "--config", "/nonexistent/cfg.toml"]).status.code(), Some(2));
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "epochs = \"many\"\n").unwrap();
    assert_eq!(moecg(&["run", "--config", bad.to_str().unwrap()]).status.code(), Some(2));
}

#[test]
fn run_then_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out_dir = dir.path().join("out");
    let out = moecg(&[
        "run",
        "--config",
        cfg.to_str().unwrap(),
        "--seed",
        "7",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let runs = fs::read_to_string(out_dir.join("runs.csv")).unwrap();
    // 2 trainers x 2 folds x 2 restarts + header
    assert_eq!(runs.lines().count(), 9);
    assert!(runs.starts_with("trainer,fold,restart,seed,train_metric,test_metric,wall_ms,status\n"));
    let md = fs::read_to_string(out_dir.join("report.md")).unwrap();
    assert!(md.contains("seed = 7"));

    let report = moecg(&["report", out_dir.join("runs.csv").to_str().unwrap(), "--format", "md"]);
    assert!(report.status.success());
    let text = String::from_utf8(report.stdout).unwrap();
    assert!(text.contains("GDME Best (fold mean)") && text.contains("MCS-CGME Average"));
}
