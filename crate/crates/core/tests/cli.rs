use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn sacp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sacp")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn write(dir: &Path, name: &str, body: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, body).unwrap();
    p.to_str().unwrap().to_string()
}

const SYNTHETIC: &str = r#"{"name": "lin", "data": {"source": "synthetic", "generator": "linear", "n": 300, "d": 3},
    "n_seeds": 3, "alphas": [0.1], "methods": ["split_cp", "sacp", "sacp++", "cm", "cr", "wagg", "csa"], "grid_size": 101}"#;

#[test]
fn run_writes_both_files_and_is_reproducible() {
    let dir = TempDir::new().unwrap();
    let cfg = write(dir.path(), "cfg.json", SYNTHETIC);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let o = sacp(&["run", &cfg, "--out", a.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("sacp++ alpha=0.1"));
    let o = sacp(&["--threads", "1", "run", &cfg, "--out", b.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    for f in ["results.csv", "summary.json"] {
        let x = fs::read(a.join(f)).unwrap();
        assert!(!x.is_empty());
        assert_eq!(x, fs::read(b.join(f)).unwrap(), "{f} differs between thread counts");
    }
    let csv = fs::read_to_string(a.join("results.csv")).unwrap();
    assert!(csv.starts_with("dataset,method,alpha,seed,coverage,avg_length,wall_ms"));
    // 7 methods x 3 seeds
    assert_eq!(csv.lines().count(), 22);
}

#[test]
fn flags_override_config() {
    let dir = TempDir::new().unwrap();
    let cfg = write(dir.path(), "cfg.json", SYNTHETIC);
    let out = dir.path().join("o");
    let o = sacp(&[
        "run", &cfg, "--out", out.to_str().unwrap(), "--alpha", "0.2,0.05", "--methods", "sacp,sacp:min",
        "--grid-size", "51", "--seed", "9", "--p-grid", "-2:2:5",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(out.join("results.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2 * 2 * 3);
    assert!(csv.contains(",sacp:min,0.05,"));
}

#[test]
fn run_exit_codes() {
    let dir = TempDir::new().unwrap();
    let bad_split = write(
        dir.path(),
        "split.json",
        r#"{"data": {"source": "synthetic", "generator": "linear", "n": 100, "d": 2},
            "split": {"train": 0.7, "calibration": 0.1, "test": 0.1}}"#,
    );
    let o = sacp(&["run", &bad_split]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(String::from_utf8_lossy(&o.stderr).lines().count(), 1);

    let missing = write(
        dir.path(),
        "missing.json",
        r#"{"data": {"source": "csv", "path": "/nonexistent/data.csv"}}"#,
    );
    assert_eq!(sacp(&["run", &missing]).status.code(), Some(3));
    assert_eq!(sacp(&["run", "/nonexistent/config.json"]).status.code(), Some(2));
    assert_eq!(sacp(&["run", &bad_split, "--methods", "nonsense"]).status.code(), Some(2));
}

#[test]
fn validate_exit_codes() {
    let o = sacp(&["validate", "all", "--seed", "7"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    let reports: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(reports.as_array().unwrap().len(), 4);
    assert_eq!(sacp(&["validate", "bound", "--alpha", "0.001"]).status.code(), Some(2));
    assert_eq!(sacp(&["validate", "uniformity", "--negative-control"]).status.code(), Some(1));
    assert_eq!(sacp(&["validate", "nope"]).status.code(), Some(2));
}

/// Calibration scores 0.05, 0.10, ..., 0.95 for one model.
fn single_model_files(dir: &Path) -> (String, String, String) {
    let mut calib = String::from("model_1\n");
    for i in 1..=19 {
        calib += &format!("{}\n", i as f64 / 20.0);
    }
    let test = "test_id,candidate,model_1\n\
                a,cat,0.10\na,dog,0.88\na,fox,0.97\n\
                b,cat,0.93\nb,dog,0.30\nb,fox,0.91\n";
    let labels = "test_id,label\na,dog\nb,fox\n";
    (write(dir, "calib.csv", &calib), write(dir, "test.csv", test), write(dir, "labels.csv", labels))
}

#[test]
fn predict_single_model_matches_split_cp() {
    let dir = TempDir::new().unwrap();
    let (calib, test, labels) = single_model_files(dir.path());
    // alpha 0.1, n 19: rank ceil(0.9 * 20) = 18, threshold 0.90
    let o = sacp(&["predict", "--calib", &calib, "--test", &test, "--alpha", "0.1", "--labels", &labels]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(stdout(&o), "a: cat dog\nb: dog\ncoverage=0.5,avg_length=1.5\n");
    let split = sacp(&["predict", "--calib", &calib, "--test", &test, "--alpha", "0.1", "--method", "split_cp"]);
    let sacp_only = sacp(&["predict", "--calib", &calib, "--test", &test, "--alpha", "0.1"]);
    assert_eq!(stdout(&split), stdout(&sacp_only));
}

fn summary_length(out: &str) -> f64 {
    let last = out.lines().last().unwrap();
    last.split("avg_length=").nth(1).unwrap().parse().unwrap()
}

#[test]
fn predict_sacp_plus_plus_is_no_longer() {
    let dir = TempDir::new().unwrap();
    let mut calib = String::from("m1,m2,m3\n");
    for i in 0..60 {
        let f = |s: usize| ((i * s) % 97) as f64 / 97.0;
        calib += &format!("{},{},{}\n", f(13), f(29), (f(7) * 3.0).min(1.0));
    }
    let mut test = String::from("test_id,candidate,m1,m2,m3\n");
    let mut labels = String::from("test_id,label\n");
    for t in 0..30 {
        for c in 0..4 {
            let f = |s: usize| ((t * 7 + c * s) % 89) as f64 / 89.0;
            test += &format!("t{t},c{c},{},{},{}\n", f(11), f(23), f(41));
        }
        labels += &format!("t{t},c{}\n", t % 4);
    }
    let calib = write(dir.path(), "calib.csv", &calib);
    let test = write(dir.path(), "test.csv", &test);
    let labels = write(dir.path(), "labels.csv", &labels);
    let run = |m: &str| {
        let o = sacp(&["predict", "--calib", &calib, "--test", &test, "--labels", &labels, "--method", m, "--alpha", "0.2"]);
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
        summary_length(&stdout(&o))
    };
    assert!(run("sacp++") <= run("sacp"));
}

#[test]
fn predict_majority_with_disjoint_sets_is_empty() {
    let dir = TempDir::new().unwrap();
    // Two models; each accepts exactly the candidate the other rejects.
    let mut calib = String::from("m1,m2\n");
    for i in 1..=19 {
        calib += &format!("{},{}\n", i as f64 / 20.0, i as f64 / 20.0);
    }
    let calib = write(dir.path(), "calib.csv", &calib);
    let test = write(dir.path(), "test.csv", "test_id,candidate,m1,m2\nx,a,0.01,5.0\nx,b,5.0,0.01\n");
    let o = sacp(&["predict", "--calib", &calib, "--test", &test, "--method", "cm", "--alpha", "0.2"]);
    assert_eq!(stdout(&o), "x: \n");
    let o = sacp(&["predict", "--calib", &calib, "--test", &test, "--method", "union", "--alpha", "0.2"]);
    assert_eq!(stdout(&o), "x: a b\n");
}

#[test]
fn predict_ingestion_errors() {
    let dir = TempDir::new().unwrap();
    let calib = write(dir.path(), "calib.csv", "m1\n0.5\n-1\nabc\n");
    let test = write(dir.path(), "test.csv", "test_id,candidate,m1\nx,a,0.1\n");
    let o = sacp(&["predict", "--calib", &calib, "--test", &test]);
    assert_eq!(o.status.code(), Some(3));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("row 3") && err.contains("row 4"), "{err}");
    let o = sacp(&["predict", "--calib", "/nonexistent.csv", "--test", &test]);
    assert_eq!(o.status.code(), Some(3));
}
