use std::path::Path;
use std::process::{Command, Output};

const HEADER: &str =
    "experiment,model,estimator,component,n,N,seed,estimate,stderr,reference,wall_time_ms";

fn halfgrad(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_halfgrad"))
        .args(args)
        .current_dir(dir)
        .env_remove("HALFGRAD_WORKERS")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn read(dir: &Path, name: &str) -> String {
    std::fs::read_to_string(dir.join(name)).unwrap()
}

/// All columns except the trailing wall time.
fn numeric_part(csv: &str) -> Vec<String> {
    csv.lines()
        .map(|l| l.rsplit_once(',').map_or(l, |(head, _)| head).to_string())
        .collect()
}

#[test]
fn validate_bm1d_defaults_pass() {
    let dir = tempfile::tempdir().unwrap();
    let out = halfgrad(
        dir.path(),
        &[
            "validate", "--paths", "50000", "--steps", "16", "--out", "v.csv",
        ],
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stdout));
    let csv = read(dir.path(), "v.csv");
    assert!(csv.starts_with("check,value,reference,stderr,pass\n"));
    assert!(!csv.contains(",false"));
    assert!(String::from_utf8_lossy(&out.stdout).contains("weight_martingale"));
}

#[test]
fn validate_flags_off_diagonal_boundary_coupling() {
    let dir = tempfile::tempdir().unwrap();
    let out = halfgrad(
        dir.path(),
        &[
            "validate", "--model", "skew2d", "--paths", "20000", "--steps", "8", "--out", "v.csv",
        ],
    );
    assert_eq!(code(&out), 1);
    assert!(read(dir.path(), "v.csv").contains("boundary_orthogonality,0.3,0,,false"));
}

#[test]
fn malformed_config_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.cfg"), "model bm1d\n").unwrap();
    let out = halfgrad(dir.path(), &["validate", "--config", "bad.cfg"]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("expected key = value"));

    for args in [
        &["gradient", "--estimators", ""][..],
        &["gradient", "--x0", "-0.5"],
        &["gradient", "--config", "missing.cfg"],
        &["gradient", "--paths", "many"],
        &["frobnicate"],
    ] {
        assert_eq!(code(&halfgrad(dir.path(), args)), 2, "{args:?}");
    }
}

#[test]
fn overflowing_model_is_a_numeric_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = halfgrad(
        dir.path(),
        &[
            "gradient", "--drift", "1e308", "--paths", "64", "--steps", "4", "--out", "g.csv",
        ],
    );
    assert_eq!(code(&out), 3);
}

#[test]
fn gradient_csv_is_stable_and_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("run.cfg"),
        "model = bm1d\nf = linear1\nN = 4000\nn = 16\nestimators = pushforward, psi, intermediate, bel\n",
    )
    .unwrap();
    let first = halfgrad(
        dir.path(),
        &[
            "gradient",
            "--config",
            "run.cfg",
            "--out",
            "a.csv",
            "--workers",
            "1",
        ],
    );
    let second = halfgrad(
        dir.path(),
        &[
            "gradient",
            "--config",
            "run.cfg",
            "--out",
            "b.csv",
            "--workers",
            "4",
        ],
    );
    assert_eq!((code(&first), code(&second)), (0, 0));
    let a = read(dir.path(), "a.csv");
    assert_eq!(a.lines().next(), Some(HEADER));
    assert_eq!(a.lines().count(), 5);
    assert_eq!(numeric_part(&a), numeric_part(&read(dir.path(), "b.csv")));
    for line in a.lines().skip(1) {
        let cols: Vec<&str> = line.split(',').collect();
        assert_eq!(cols[0], "gradient");
        assert!((cols[9].parse::<f64>().unwrap() - 1.0).abs() < 1e-9);
    }
}

#[test]
fn flags_override_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("run.cfg"),
        "seed = 1\nN = 100\nn = 4\nestimators = psi\n",
    )
    .unwrap();
    let out = halfgrad(
        dir.path(),
        &[
            "gradient", "--config", "run.cfg", "--seed", "77", "--out", "g.csv",
        ],
    );
    assert_eq!(code(&out), 0);
    let csv = read(dir.path(), "g.csv");
    assert!(csv.lines().nth(1).unwrap().contains(",4,100,77,"));
}

#[test]
fn convergence_without_reference_leaves_the_column_empty() {
    let dir = tempfile::tempdir().unwrap();
    let out = halfgrad(
        dir.path(),
        &[
            "convergence",
            "--model",
            "intro2d",
            "--f",
            "product2d",
            "--n-list",
            "4,8",
            "--paths",
            "500",
            "--estimators",
            "psi",
            "--out",
            "c.csv",
        ],
    );
    assert_eq!(code(&out), 0);
    let csv = read(dir.path(), "c.csv");
    let rows: Vec<Vec<&str>> = csv
        .lines()
        .skip(1)
        .map(|l| l.split(',').collect())
        .collect();
    assert_eq!(rows.len(), 4);
    assert!(rows.iter().all(|r| r[9].is_empty()));
    assert_eq!(
        rows.iter().map(|r| r[4]).collect::<Vec<_>>(),
        ["4", "4", "8", "8"]
    );
}

#[test]
fn compare_references_the_finite_difference_oracle() {
    let dir = tempfile::tempdir().unwrap();
    let out = halfgrad(
        dir.path(),
        &[
            "compare",
            "--drift",
            "0.3",
            "--f",
            "expsat",
            "--paths",
            "20000",
            "--steps",
            "16",
            "--estimators",
            "psi,bel",
            "--out",
            "cmp.csv",
        ],
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stdout));
    let csv = read(dir.path(), "cmp.csv");
    let rows: Vec<Vec<&str>> = csv
        .lines()
        .skip(1)
        .map(|l| l.split(',').collect())
        .collect();
    assert_eq!(
        rows.iter().map(|r| r[2]).collect::<Vec<_>>(),
        ["fd", "psi", "bel"]
    );
    assert_eq!(rows[1][9], rows[0][7]);
}

#[test]
fn worker_environment_variable_does_not_change_results() {
    let dir = tempfile::tempdir().unwrap();
    let args = [
        "gradient",
        "--paths",
        "3000",
        "--steps",
        "8",
        "--f",
        "expsat",
        "--estimators",
        "bel",
    ];
    let one = halfgrad(dir.path(), &[&args[..], &["--out", "one.csv"]].concat());
    let env = Command::new(env!("CARGO_BIN_EXE_halfgrad"))
        .args([&args[..], &["--out", "env.csv"]].concat())
        .current_dir(dir.path())
        .env("HALFGRAD_WORKERS", "3")
        .output()
        .unwrap();
    assert_eq!((code(&one), code(&env)), (0, 0));
    assert_eq!(
        numeric_part(&read(dir.path(), "one.csv")),
        numeric_part(&read(dir.path(), "env.csv"))
    );
}
