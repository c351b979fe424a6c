use std::fs;

use catm_core::pipeline::{
    cmd_pipeline, estimates_csv, run_benchmark, run_pipeline, BenchmarkConfig, PipelineConfig, RunConfig,
    ESTIMATE_COLUMNS,
};
use catm_core::Error;

fn small(extra: &[&str]) -> RunConfig {
    let mut run = RunConfig::default();
    run.apply_overrides(&[
        "docs=500",
        "vocab=60",
        "doc_len=30",
        "topics=4",
        "hidden=8",
        "epochs=3",
        "bootstrap=3",
        "folds=2",
        "representation=bow",
    ])
    .unwrap();
    run.apply_overrides(extra).unwrap();
    run
}

#[test]
fn rerun_writes_byte_identical_estimates() {
    for rep in ["bow", "catm"] {
        let run = small(&[&format!("representation={rep}")]);
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        cmd_pipeline(&run, a.path()).unwrap();
        cmd_pipeline(&run, b.path()).unwrap();
        for file in ["estimates.csv", "config.txt", "manifest.json"] {
            assert_eq!(
                fs::read(a.path().join(file)).unwrap(),
                fs::read(b.path().join(file)).unwrap(),
                "{rep}: {file}"
            );
        }
    }
}

#[test]
fn bow_run_reports_every_estimator() {
    let dir = tempfile::tempdir().unwrap();
    let out = cmd_pipeline(&small(&[]), dir.path()).unwrap();
    assert_eq!(out.rows.len(), 4);
    let text = fs::read_to_string(dir.path().join("estimates.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), ESTIMATE_COLUMNS.join(","));
    assert_eq!(lines.count(), 4);
    for row in &out.rows {
        assert_eq!(row.psi_true, Some(1.0));
        assert!(row.psi_hat.is_finite());
        assert!(row.n_kept <= 500);
    }
    let config = fs::read_to_string(dir.path().join("config.txt")).unwrap();
    assert_eq!(RunConfig::parse(&config).unwrap(), small(&[]));
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["vocab_hash"].as_str().unwrap(), out.vocab_hash);
    assert!(dir.path().join("timing.txt").exists());
}

#[test]
fn benchmark_cell_equals_standalone_run() {
    let run = small(&["representations=bow,oracle-strata", "seeds=2", "b1=1,10", "bootstrap=0"]);
    let cfg = BenchmarkConfig::from_run(&run).unwrap();
    let report = run_benchmark(&cfg).unwrap();
    assert_eq!(report.cells.len(), 8);
    assert!(report.failures().is_empty());
    for cell in &report.cells {
        let alone = run_pipeline(&PipelineConfig::from_run(&cfg.cell_config(&cell.cell).unwrap()).unwrap()).unwrap();
        assert_eq!(
            estimates_csv(cell.outcome.as_ref().unwrap()).unwrap(),
            estimates_csv(&alone.rows).unwrap()
        );
    }
    // every representation sees the same data, so unadjusted rows agree
    let unadjusted: Vec<f64> = report
        .rows()
        .iter()
        .filter(|r| r.estimator == "unadjusted" && r.b1 == Some(10.0) && r.seed == report.cells[0].cell.seed)
        .map(|r| r.psi_hat)
        .collect();
    assert_eq!(unadjusted.len(), 2);
    assert_eq!(unadjusted[0], unadjusted[1]);
}

#[test]
fn missing_input_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let run = small(&["dataset=file", "input=/no/such/corpus.jsonl"]);
    let err = cmd_pipeline(&run, dir.path()).unwrap_err();
    assert!(err.to_string().contains("/no/such/corpus.jsonl"), "{err}");
    assert!(!dir.path().join("estimates.csv").exists());
}

#[test]
fn unknown_keys_are_rejected() {
    let mut run = RunConfig::default();
    assert!(matches!(run.set("learning_rate", "0.1"), Err(Error::Invalid(_))));
    assert!(matches!(RunConfig::parse("seed = 1\nbogus = 2\n"), Err(Error::Parse { line: 2, .. })));
}
