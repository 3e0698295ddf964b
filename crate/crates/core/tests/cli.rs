//! The command line end to end: outputs, overrides, determinism and errors.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use dsar::cli::{run_from, ChangesReport, FitReport};
use dsar::design::{build_design, build_instruments};
use dsar::estimator::{fit, ls_phi};
use dsar::io::{read_panel, read_series};
use dsar::model::{FitSettings, WeightSet};
use dsar::simulation::{presets, simulate, Truth};
use dsar::weights::{load_weights, WeightFormat};
use tempfile::TempDir;

fn dsar(args: &[&str]) {
    let mut full = vec!["dsar"];
    full.extend_from_slice(args);
    if let Err(e) = run_from(full) {
        panic!("dsar {args:?} failed: {e}");
    }
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn simulate_preset(dir: &Path, name: &str, d: usize, t: usize, seed: u64) -> PathBuf {
    let out = dir.join(format!("{name}-{seed}"));
    dsar(&["simulate", "--preset", name, "--d", &d.to_string(), "--t-len", &t.to_string(), "--seed", &seed.to_string(), "-o", p(&out)]);
    out
}

fn files(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<(PathBuf, Vec<u8>)>) {
        for entry in fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(root, &path, out);
            } else {
                out.push((path.strip_prefix(root).unwrap().to_path_buf(), fs::read(&path).unwrap()));
            }
        }
    }
    let mut out = Vec::new();
    walk(dir, dir, &mut out);
    out.sort();
    out
}

fn fit_report(dir: &Path) -> FitReport {
    serde_json::from_str(&fs::read_to_string(dir.join("fit.json")).unwrap()).unwrap()
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_path(path).unwrap();
    rdr.records().map(|r| r.unwrap().iter().map(str::to_string).collect()).collect()
}

#[test]
fn simulate_is_byte_identical_under_a_seed() {
    let tmp = TempDir::new().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    for out in [&a, &b] {
        dsar(&["simulate", "--preset", "threshold_ar", "--d", "12", "--t-len", "30", "--seed", "7", "-o", p(out)]);
    }
    let (fa, fb) = (files(&a), files(&b));
    assert!(fa.iter().any(|(n, _)| n == Path::new("weights/w2.csv")));
    assert!(fa.iter().any(|(n, _)| n == Path::new("driver.csv")));
    assert_eq!(fa, fb);
    let c = tmp.path().join("c");
    dsar(&["simulate", "--preset", "threshold_ar", "--d", "12", "--t-len", "30", "--seed", "8", "-o", p(&c)]);
    assert_ne!(fs::read(a.join("panel.csv")).unwrap(), fs::read(c.join("panel.csv")).unwrap());
}

#[test]
fn simulated_export_fits_like_the_in_memory_panel() {
    let tmp = TempDir::new().unwrap();
    let dir = simulate_preset(tmp.path(), "general", 20, 40, 3);
    let out = tmp.path().join("fit");
    dsar(&["fit", "--config", p(&dir.join("fit_config.json")), "-o", p(&out)]);

    let mut dgp = presets::general(20, 40);
    dgp.seed = 3;
    let sim = simulate(&dgp).unwrap();
    let panel = read_panel(&dir.join("panel.csv")).unwrap();
    assert_eq!(panel.y, sim.data.y);
    assert_eq!(panel.x, sim.data.x);
    assert_eq!(panel.u, sim.data.u);
    let truth: Truth = serde_json::from_str(&fs::read_to_string(dir.join("truth.json")).unwrap()).unwrap();
    assert_eq!(truth.phi, sim.truth.phi);
    assert_eq!(truth.rho, sim.truth.rho);

    let mem = fit(&sim.data, &FitSettings::default().spec(sim.weights.clone(), sim.basis.clone())).unwrap();
    let rep = fit_report(&out);
    let phi: Vec<f64> = rep.phi.iter().map(|c| c.value).collect();
    assert_eq!(phi, mem.phi.as_slice());
    assert_eq!(rep.beta, mem.beta.as_slice());
    assert_eq!(rep.mu, mem.mu.as_slice());
    assert_eq!(rep.lambda, mem.lambda);
    assert_eq!(rep.phi[5].label, "phi_2_2");
    let residuals = csv_rows(&out.join("residuals.csv"));
    assert_eq!(residuals.len(), 20 * 40);
    assert_eq!(residuals[21][..2], ["2".to_string(), "2".to_string()]);
    assert_eq!(residuals[21][2].parse::<f64>().unwrap(), mem.residuals[(1, 1)]);
    assert!(!out.join("se.csv").exists());
}

#[test]
fn zero_lambda_gives_least_squares() {
    let tmp = TempDir::new().unwrap();
    let dir = simulate_preset(tmp.path(), "general", 15, 30, 5);
    let out = tmp.path().join("fit");
    dsar(&["fit", "--config", p(&dir.join("fit_config.json")), "--lambda", "0", "--constraint", "off", "-o", p(&out)]);
    let rep = fit_report(&out);

    // least squares from the exported files, built independently of the fit
    let data = read_panel(&dir.join("panel.csv")).unwrap();
    let weights = WeightSet::new(
        (1..=2)
            .map(|j| load_weights(&dir.join(format!("weights/w{j}.csv")), WeightFormat::DenseCsv, Some(15), false).unwrap())
            .collect(),
    )
    .unwrap();
    let basis = dsar::io::basis_from_series(&read_series(&dir.join("basis.csv")).unwrap(), &[true, true]).unwrap();
    let spec = FitSettings::default().spec(weights, basis);
    let inst = build_instruments(&data, &spec.weights, 1).unwrap();
    let ls = ls_phi(&build_design(&data, &spec, &inst).unwrap(), &spec.basis).unwrap();
    for (c, want) in rep.phi.iter().zip(ls.iter()) {
        assert!((c.value - want).abs() <= 1e-8 * want.abs().max(1.0), "{} {} vs {want}", c.label, c.value);
    }
    assert_eq!(rep.lambda, 0.0);
}

#[test]
fn inference_writes_intervals_or_a_note() {
    let tmp = TempDir::new().unwrap();
    let dir = simulate_preset(tmp.path(), "general", 25, 40, 1);
    let cfg = dir.join("fit_config.json");

    let out = tmp.path().join("se");
    dsar(&["fit", "--config", p(&cfg), "--infer", "-o", p(&out)]);
    let rep = fit_report(&out);
    let rows = csv_rows(&out.join("se.csv"));
    assert_eq!(rows.len(), rep.active_set.len());
    for (row, label) in rows.iter().zip(&rep.active_set) {
        assert_eq!(&row[0], label);
        let v: Vec<f64> = row[1..].iter().map(|s| s.parse().unwrap()).collect();
        assert!(v[1] > 0.0 && v[2] < v[0] && v[0] < v[3]);
        assert!((v[3] - v[0] - 1.959963984540054 * v[1]).abs() < 1e-9);
    }

    let sandwich = tmp.path().join("sandwich");
    dsar(&["fit", "--config", p(&cfg), "--infer", "--covariance", "sandwich", "--active", "0,1", "-o", p(&sandwich)]);
    assert_eq!(csv_rows(&sandwich.join("se.csv")).len(), 2);

    let empty = tmp.path().join("empty");
    dsar(&["fit", "--config", p(&cfg), "--lambda", "1e12", "--infer", "-o", p(&empty)]);
    assert!(fit_report(&empty).active_set.is_empty());
    let text = fs::read_to_string(empty.join("se.csv")).unwrap();
    assert!(text.starts_with("# empty active set"));
    assert!(csv_rows(&empty.join("se.csv")).is_empty());
}

fn changes(dir: &Path) -> ChangesReport {
    serde_json::from_str(&fs::read_to_string(dir.join("changes.json")).unwrap()).unwrap()
}

#[test]
fn single_candidate_is_a_two_regime_fit() {
    let tmp = TempDir::new().unwrap();
    let dir = simulate_preset(tmp.path(), "single_break", 30, 50, 2);
    let out = tmp.path().join("det");
    dsar(&["detect", "--config", p(&dir.join("fit_config.json")), "--breaks-list", "30", "-o", p(&out)]);
    let rep = changes(&out);
    assert_eq!(rep.candidates, [30.0]);
    let fit = rep.fit.expect("the break survives");
    let labels: Vec<&str> = fit.phi.iter().map(|c| c.label.as_str()).collect();
    assert_eq!(labels, ["phi_1_1", "phi_2_1"]);
    assert_eq!(rep.changes[0].value, 30.0);
    let seg = csv_rows(&out.join("segmentation.csv"));
    assert_eq!(seg.len(), 50);
    assert!(seg.iter().all(|r| r[1] == if r[0].parse::<usize>().unwrap() <= 30 { "1" } else { "2" }));
}

#[test]
fn full_size_divide_and_conquer_matches_plain_detection() {
    let tmp = TempDir::new().unwrap();
    let dir = simulate_preset(tmp.path(), "single_break", 30, 50, 4);
    let cfg = dir.join("fit_config.json");
    let plain = tmp.path().join("plain");
    let dac = tmp.path().join("dac");
    dsar(&["detect", "--config", p(&cfg), "--breaks-grid", "5", "-o", p(&plain)]);
    dsar(&["detect", "--config", p(&cfg), "--breaks-grid", "5", "--dac", "9", "-o", p(&dac)]);
    assert_eq!(files(&plain), files(&dac));
    assert_eq!(changes(&plain).candidates.len(), 9);
}

#[test]
fn threshold_detection_reads_the_driver() {
    let tmp = TempDir::new().unwrap();
    let dir = simulate_preset(tmp.path(), "threshold_ar", 30, 60, 1);
    let out = tmp.path().join("det");
    dsar(&["detect", "--config", p(&dir.join("fit_config.json")), "--threshold-quantiles", "5", "-o", p(&out)]);
    let rep = changes(&out);
    assert_eq!(rep.candidates.len(), 4);
    let driver = read_series(&dir.join("driver.csv")).unwrap();
    let seg = csv_rows(&out.join("segmentation.csv"));
    let cuts: Vec<f64> = rep.changes.iter().map(|c| c.value).collect();
    for (row, q) in seg.iter().zip(&driver.columns[0]) {
        let want = 1 + cuts.iter().filter(|&&c| *q > c).count();
        assert_eq!(row[1], want.to_string());
    }
}

#[test]
fn zero_weights_reduce_to_the_linear_panel() {
    let tmp = TempDir::new().unwrap();
    let mut dgp = presets::normality(6, 8);
    dgp.weights = vec![dsar::simulation::WeightGen::Dense { rows: vec![vec![0.0; 6]; 6] }; 2];
    dgp.mu = vec![0.5, 1.0, 1.5, 2.0, 2.5, 3.0];
    let cfg = tmp.path().join("sim.json");
    fs::write(&cfg, serde_json::json!({ "dgp": dgp, "output": "zero" }).to_string()).unwrap();
    dsar(&["simulate", "--config", p(&cfg)]);
    let dir = tmp.path().join("zero");
    let panel = read_panel(&dir.join("panel.csv")).unwrap();
    let truth: Truth = serde_json::from_str(&fs::read_to_string(dir.join("truth.json")).unwrap()).unwrap();
    for t in 0..8 {
        for i in 0..6 {
            let xb: f64 = (0..3).map(|c| panel.x[t][(i, c)] * truth.beta[c]).sum();
            let want = truth.mu[i] + xb + truth.eps[t][i];
            assert!((panel.y[(i, t)] - want).abs() < 1e-12);
        }
    }
}

#[test]
fn replicate_outputs_and_worker_invariance() {
    let tmp = TempDir::new().unwrap();
    let cfg = tmp.path().join("rep.json");
    fs::write(
        &cfg,
        r#"{"preset": {"name": "normality", "d": 12, "t_len": 30}, "infer": {"active": [1, 2]}, "replicate": {"reps": 7, "seed": 11}}"#,
    )
    .unwrap();
    let one = tmp.path().join("one");
    let many = tmp.path().join("many");
    dsar(&["replicate", "--config", p(&cfg), "--workers", "1", "--infer-hist", "-o", p(&one)]);
    dsar(&["replicate", "--config", p(&cfg), "--workers", "8", "--infer-hist", "-o", p(&many)]);
    assert_eq!(files(&one), files(&many));

    let summary = csv_rows(&one.join("summary.csv"));
    assert_eq!(summary[0][0], "mse_phi");
    assert!(summary.iter().any(|r| r[0] == "cover_phi_1_1"));
    assert_eq!(csv_rows(&one.join("per_rep.csv")).len(), 7);
    let hist = csv_rows(&one.join("hist_bins.csv"));
    assert_eq!(hist.len(), 2 * 40);
    let total: usize = hist.iter().filter(|r| r[0] == "z_phi_1_2").map(|r| r[3].parse::<usize>().unwrap()).sum();
    assert_eq!(total, 7);

    // a flag overrides the configured count; one replication has zero spread
    let single = tmp.path().join("single");
    dsar(&["replicate", "--config", p(&cfg), "--reps", "1", "-o", p(&single)]);
    let per_rep = csv_rows(&single.join("per_rep.csv"));
    assert_eq!(per_rep.len(), 1);
    assert_eq!(per_rep[0][1], "ok");
    for (k, row) in csv_rows(&single.join("summary.csv")).iter().enumerate() {
        assert_eq!(row[1], per_rep[0][k + 2]);
        assert_eq!(row[2], "0");
    }
    assert!(!single.join("hist_bins.csv").exists());
}

#[test]
fn detection_study_through_replicate() {
    let tmp = TempDir::new().unwrap();
    let cfg = tmp.path().join("rep.json");
    fs::write(
        &cfg,
        r#"{"preset": {"name": "two_breaks", "d": 20, "t_len": 60},
            "detect": {"candidates": {"kind": "breaks_grid", "delta": 6}, "options": {"rule": "either"}, "dac": {"subset_size": 4}},
            "replicate": {"reps": 2, "workers": 2}}"#,
    )
    .unwrap();
    dsar(&["replicate", "--config", p(&cfg), "-o", p(&tmp.path().join("out"))]);
    let metrics: Vec<String> = csv_rows(&tmp.path().join("out/summary.csv")).into_iter().map(|r| r[0].clone()).collect();
    assert_eq!(metrics, ["k_hat", "ari", "true_unique"]);
}

fn binary(args: &[&str], dir: &Path) -> (bool, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_dsar")).args(args).current_dir(dir).output().unwrap();
    (out.status.success(), String::from_utf8_lossy(&out.stderr).into_owned())
}

#[test]
fn binary_exit_codes_and_messages() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();

    let (ok, err) = binary(&["fit"], dir);
    assert!(!ok && err.contains("no panel"), "{err}");

    fs::write(dir.join("bad.json"), r#"{"data": {"panle": "p.csv"}}"#).unwrap();
    let (ok, err) = binary(&["fit", "--config", "bad.json"], dir);
    assert!(!ok && err.contains("unknown field"), "{err}");

    fs::write(dir.join("p.csv"), "t,unit,y,x1\n1,1,0.5,1\n1,2,x,2\n").unwrap();
    fs::write(dir.join("w.csv"), "0,1\n1,0\n").unwrap();
    let (ok, err) = binary(&["fit", "--panel", "p.csv", "--weights", "w.csv"], dir);
    assert!(!ok && err.contains("line 3"), "{err}");

    fs::write(
        dir.join("explode.json"),
        r#"{"preset": {"name": "no_change", "d": 10, "t_len": 20}}"#,
    )
    .unwrap();
    let (ok, _) = binary(&["simulate", "--config", "explode.json", "-o", "fine"], dir);
    assert!(ok);
    let mut dgp = presets::no_change(10, 20);
    dgp.phi = vec![-1.5];
    fs::write(dir.join("explode.json"), serde_json::json!({ "dgp": dgp }).to_string()).unwrap();
    let (ok, err) = binary(&["simulate", "--config", "explode.json"], dir);
    assert!(!ok && err.contains("|rho_t| = 1.5"), "{err}");

    let (ok, _) = binary(&["detect", "--breaks-grid", "5", "--breaks-list", "10"], dir);
    assert!(!ok);
}
