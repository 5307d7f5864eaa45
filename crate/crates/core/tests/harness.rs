mod common;

use std::collections::BTreeMap;
use std::path::Path;

use uise::harness::{
    bench_timing, emit_plot_data, run_experiment, EstimatorSummary, ExperimentConfig, HarnessError, NoiseRegime,
    RunArtifacts,
};

fn short_crop(steps: usize, out: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::load(common::config_path("crop_noisy.conf")).unwrap();
    cfg.steps = steps;
    cfg.out_dir = out.to_path_buf();
    cfg
}

fn read(path: impl AsRef<Path>) -> String {
    std::fs::read_to_string(path).unwrap()
}

/// CSV rows with the trailing wall-time column dropped.
fn without_timing(text: &str) -> Vec<String> {
    text.lines().map(|l| l.rsplit_once(',').unwrap().0.to_string()).collect()
}

fn table(text: &str) -> (Vec<String>, Vec<Vec<String>>) {
    let mut lines = text.lines();
    let header = lines.next().unwrap().split(',').map(str::to_string).collect();
    (header, lines.map(|l| l.split(',').map(str::to_string).collect()).collect())
}

fn col(text: &str, name: &str) -> Vec<f64> {
    let (h, rows) = table(text);
    let i = h.iter().position(|c| c == name).unwrap();
    rows.iter().filter(|r| !r[i].is_empty()).map(|r| r[i].parse().unwrap()).collect()
}

#[test]
fn reruns_produce_identical_artifacts() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let mut first = short_crop(40, a.path());
    first.parallel = true;
    let mut second = short_crop(40, b.path());
    second.parallel = false;
    let ra = run_experiment(&first).unwrap();
    let rb = run_experiment(&second).unwrap();
    for f in ["truth.csv", "errors.csv"] {
        assert_eq!(read(a.path().join(f)), read(b.path().join(f)), "{f}");
    }
    for e in &first.estimators {
        let f = format!("estimates_{}.csv", e.name);
        assert_eq!(without_timing(&read(a.path().join(&f))), without_timing(&read(b.path().join(&f))), "{f}");
    }
    assert_eq!(ra.summary.measurement_hash, rb.summary.measurement_hash);
    for (x, y) in ra.summary.estimators.iter().zip(&rb.summary.estimators) {
        assert_eq!((x.final_error, x.max_error, x.failures), (y.final_error, y.max_error, y.failures));
        assert_eq!(x.measurement_hash, ra.summary.measurement_hash);
    }
}

#[test]
fn summary_matches_the_written_columns() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = short_crop(40, dir.path());
    let art = run_experiment(&cfg).unwrap();
    let errors = read(dir.path().join("errors.csv"));
    for s in &art.summary.estimators {
        let est = read(dir.path().join(format!("estimates_{}.csv", s.name)));
        let errs = col(&errors, &s.name);
        let wall = col(&est, "wall_time_ms");
        let (h, rows) = table(&est);
        let st = h.iter().position(|c| c == "status").unwrap();
        let failures = rows.iter().filter(|r| r[st] != "direct" && r[st] != "converged").count();
        let n = errs.len();
        assert_eq!(n, 41);
        assert_eq!(s.final_error, errs[n - 1]);
        assert_eq!(s.max_error, errs.iter().copied().fold(0.0, f64::max));
        assert!((s.mean_error - errs.iter().sum::<f64>() / n as f64).abs() <= 1e-15 * s.mean_error.max(1e-300) * n as f64);
        assert_eq!(s.tail_max_error, errs[n - 4..].iter().copied().fold(0.0, f64::max));
        assert_eq!(s.failures, failures);
        assert_eq!(s.wall_time.max_ms, wall.iter().copied().fold(0.0, f64::max));
        let recomputed = EstimatorSummary::from_columns(&s.name, &s.scheme, &s.measurement_hash, &errs, &wall, failures);
        assert_eq!(&recomputed, s);
    }
    // the summary on disk is what the run returned
    assert_eq!(RunArtifacts::load(dir.path()).unwrap().summary, art.summary);
}

#[test]
fn plot_data_series() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = short_crop(30, dir.path());
    let art = run_experiment(&cfg).unwrap();
    let plot = read(emit_plot_data(&RunArtifacts::load(dir.path()).unwrap()).unwrap());
    let mut series: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for line in plot.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        series.entry(f[1].to_string()).or_default().push(f[2].parse().unwrap());
    }
    assert_eq!(series.len(), 2 + 2 * cfg.estimators.len());
    assert!(series.values().all(|v| v.len() == 31));

    let truth = read(dir.path().join("truth.csv"));
    for (w, x) in series["truth:w"].iter().zip(col(&truth, "x_d2")) {
        assert!((w - (1.0 - (-45.0 * x).exp())).abs() < 1e-15);
    }
    assert_eq!(series["truth:x_d1"], col(&truth, "x_d1"));
    let run = art.run("two-stage").unwrap();
    assert_eq!(series["two-stage:error"], run.errors);
}

#[test]
fn plot_data_without_estimators() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = short_crop(10, dir.path());
    cfg.estimators.clear();
    let art = run_experiment(&cfg).unwrap();
    let plot = read(emit_plot_data(&art).unwrap());
    let mut names: Vec<&str> = plot.lines().skip(1).map(|l| l.split(',').nth(1).unwrap()).collect();
    names.dedup();
    assert_eq!(names, vec!["truth:x_d1", "truth:w"]);
}

#[test]
fn single_repeat_timing_is_the_raw_run() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = short_crop(15, dir.path());
    cfg.estimators.retain(|e| e.name != "baseline");
    let table = bench_timing(&cfg, &[NoiseRegime::Noiseless], 1).unwrap();
    assert_eq!(table.rows.len(), 2);
    for r in &table.rows {
        assert_eq!(r.repeats, 1);
        assert_eq!(r.per_step_ms.len(), 16);
        assert_eq!(r.t_max_ms, r.per_step_ms.iter().copied().fold(0.0, f64::max));
        assert!((r.t_mean_ms - r.per_step_ms.iter().sum::<f64>() / 16.0).abs() < 1e-12);
    }
    assert!(table.to_markdown().contains("| noiseless |"));
    assert!(bench_timing(&cfg, &[NoiseRegime::Noiseless], 0).is_err());
}

#[test]
fn longer_windows_cost_more_time() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = short_crop(40, dir.path());
    cfg.estimators.retain(|e| e.name == "full-order");
    let mean = |horizon: usize, cfg: &mut ExperimentConfig| {
        cfg.estimators[0].config.horizon = horizon;
        let t = bench_timing(cfg, &[NoiseRegime::Noiseless], 2).unwrap();
        t.rows[0].t_mean_ms
    };
    let short = mean(8, &mut cfg);
    let long = mean(16, &mut cfg);
    assert!(long > short, "N = 16 took {long} ms, N = 8 took {short} ms");
}

#[test]
fn missing_files_are_named() {
    let err = ExperimentConfig::load("/nonexistent/experiment.conf").unwrap_err();
    assert!(matches!(&err, HarnessError::Io { path, .. } if path.ends_with("experiment.conf")));
    assert!(err.to_string().contains("experiment.conf"));

    let dir = tempfile::tempdir().unwrap();
    let err = RunArtifacts::load(dir.path()).unwrap_err();
    assert!(err.to_string().contains("summary.json"));
}
