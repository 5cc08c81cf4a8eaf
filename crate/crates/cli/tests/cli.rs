use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dfr_core::fit::predict_mean;
use dfr_core::io::{ingest, read_json, ParamsFile};
use dfr_core::mstep::{reporting_grid, standardize_on_grid};
use dfr_core::simulate::{generate_dataset, SimScenario};
use nalgebra::DVector;

const SCENARIO: &str = r#"{"design": "IRS", "N": 12, "M": 6, "sigma2": 0.2, "rho": 0.4, "seed": 31}"#;
const CONFIG: &str = r#"{"basis": {"kind": "fourier", "J": 5}, "seed": 4, "draws": 20, "max_iter": 4}"#;

fn dfr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dfr"))
        .args(args)
        .output()
        .expect("dfr runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn simulate(dir: &Path) -> PathBuf {
    let scenario = write(dir, "scenario.json", SCENARIO);
    let out = dir.join("sim");
    let o = dfr(&["simulate", "--scenario", s(&scenario), "--out", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    out
}

fn fit_into(dir: &Path, sim: &Path, name: &str) -> (Output, PathBuf) {
    let config = write(dir, "config.json", CONFIG);
    let out = dir.join(name);
    let o = dfr(&[
        "fit",
        "--config",
        s(&config),
        "--obs",
        s(&sim.join("obs.csv")),
        "--cov",
        s(&sim.join("cov.csv")),
        "--out",
        s(&out),
        "--no-rescale",
    ]);
    (o, out)
}

fn read_table(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let text = std::fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    let header = lines.next().unwrap().split(',').map(str::to_string).collect();
    let rows = lines.map(|l| l.split(',').map(str::to_string).collect()).collect();
    (header, rows)
}

#[test]
fn simulated_files_ingest_to_the_generated_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let sim = simulate(dir.path());
    let scenario: SimScenario = serde_json::from_str(SCENARIO).unwrap();
    let (expected, _) = generate_dataset(&scenario).unwrap();
    let (data, _) = ingest(&sim.join("obs.csv"), &sim.join("cov.csv"), false).unwrap();
    assert_eq!(data, expected);
    for f in ["truth.json", "truth.csv", "latent.csv"] {
        assert!(sim.join(f).exists(), "{f} missing");
    }
}

#[test]
fn simulate_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let a = simulate(dir.path());
    let first = std::fs::read(a.join("obs.csv")).unwrap();
    let b = simulate(dir.path());
    assert_eq!(first, std::fs::read(b.join("obs.csv")).unwrap());
}

#[test]
fn fit_reruns_are_byte_identical_and_report_nonconvergence() {
    let dir = tempfile::tempdir().unwrap();
    let sim = simulate(dir.path());
    let (o, a) = fit_into(dir.path(), &sim, "a");
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let (_, b) = fit_into(dir.path(), &sim, "b");
    for f in ["params.json", "standardized.csv", "trace.csv"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    let params: ParamsFile = read_json(&a.join("params.json")).unwrap();
    assert!(!params.converged);
    assert_eq!(params.iterations, 4);
    let (header, rows) = read_table(&a.join("trace.csv"));
    assert_eq!(header[..5], ["iteration", "sigma2", "xi", "delta", "mean_lambda"]);
    assert_eq!(rows.len(), 4);
}

#[test]
fn params_restandardize_to_the_written_curves() {
    let dir = tempfile::tempdir().unwrap();
    let sim = simulate(dir.path());
    let (_, out) = fit_into(dir.path(), &sim, "fit");
    let file: ParamsFile = read_json(&out.join("params.json")).unwrap();
    let params = file.params().unwrap();
    let basis = file.basis().unwrap();
    let est = standardize_on_grid(&params.b, &params.sigma_theta, &basis, &reporting_grid(file.grid_size)).unwrap();

    let (header, rows) = read_table(&out.join("standardized.csv"));
    let column = |name: &str| -> Vec<f64> {
        let c = header.iter().position(|h| h == name).unwrap_or_else(|| panic!("no column {name}"));
        rows.iter().map(|r| r[c].parse().unwrap()).collect()
    };
    let close = |a: &[f64], b: &[f64]| a.iter().zip(b).all(|(x, y)| (x - y).abs() <= 1e-10);
    for (l, name) in file.covariate_names.iter().enumerate() {
        assert!(close(&column(&format!("alpha_{name}")), &est.alpha_curve(&basis, l)));
    }
    for k in 0..basis.dim() {
        assert!(close(&column(&format!("phi_{}", k + 1)), &est.eigenfunction_curve(&basis, k)));
        let rho = column(&format!("varrho_{}", k + 1));
        assert!((rho[0] - est.eigenvalues[k]).abs() <= 1e-10);
    }
    assert!(close(&column("kernel_diag"), est.kernel_diag.as_slice()));
}

#[test]
fn predict_without_observations_returns_the_mean_curve() {
    let dir = tempfile::tempdir().unwrap();
    let sim = simulate(dir.path());
    let (_, fit_dir) = fit_into(dir.path(), &sim, "fit");
    let params_path = fit_dir.join("params.json");
    let cov = write(dir.path(), "new_cov.csv", "subject_id,x\nnew,0.5\nother,-1\n");
    let partial = write(dir.path(), "partial.csv", "subject_id,time,y\nnew,0.1,1\nnew,0.4,1\nnew,0.7,0\n");
    let out = dir.path().join("pred");
    let o = dfr(&[
        "predict",
        "--params",
        s(&params_path),
        "--cov",
        s(&cov),
        "--obs",
        s(&partial),
        "--out",
        s(&out),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    let file: ParamsFile = read_json(&params_path).unwrap();
    let params = file.params().unwrap();
    let basis = file.basis().unwrap();
    let grid = reporting_grid(file.grid_size);
    let expected = predict_mean(&params, &basis, &DVector::from_column_slice(&[1.0, -1.0]), &grid).unwrap();

    let (header, rows) = read_table(&out.join("predictions.csv"));
    assert_eq!(header, ["subject_id", "t", "mean", "conditional"]);
    assert_eq!(rows.len(), 2 * grid.len());
    let other: Vec<&Vec<String>> = rows.iter().filter(|r| r[0] == "other").collect();
    for (r, e) in other.iter().zip(&expected) {
        assert_eq!(r[2].parse::<f64>().unwrap(), *e);
        assert_eq!(r.get(3).map_or("", String::as_str), "");
    }
    assert!(rows.iter().filter(|r| r[0] == "new").all(|r| r[3].parse::<f64>().is_ok()));
}

#[test]
fn missing_config_key_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let sim = simulate(dir.path());
    let config = write(dir.path(), "bad.json", r#"{"basis": {"kind": "fourier", "J": 5}}"#);
    let o = dfr(&[
        "fit",
        "--config",
        s(&config),
        "--obs",
        s(&sim.join("obs.csv")),
        "--cov",
        s(&sim.join("cov.csv")),
        "--out",
        s(&dir.path().join("out")),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("seed"));
}

#[test]
fn exit_codes_separate_io_from_validation() {
    let dir = tempfile::tempdir().unwrap();
    let config = write(dir.path(), "config.json", CONFIG);
    let cov = write(dir.path(), "cov.csv", "subject_id,x\na,1\n");
    let missing = dir.path().join("nowhere.csv");
    let o = dfr(&[
        "fit",
        "--config",
        s(&config),
        "--obs",
        s(&missing),
        "--cov",
        s(&cov),
        "--out",
        s(&dir.path().join("out")),
    ]);
    assert_eq!(o.status.code(), Some(3));

    let obs = write(dir.path(), "obs.csv", "subject_id,time,y\na,0,1\na,1,2\n");
    let o = dfr(&[
        "fit",
        "--config",
        s(&config),
        "--obs",
        s(&obs),
        "--cov",
        s(&cov),
        "--out",
        s(&dir.path().join("out")),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains(":3:"));
}
