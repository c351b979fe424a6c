use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;

use super::run::{estimates_csv, run_pipeline, write_run_metadata, EstimateRow, PipelineConfig, Representation};
use super::RunConfig;
use crate::error::{Error, Result};
use crate::estimators::EstimatorKind;
use crate::seed;

/// Cross-product of representations, confounding settings and seeds on top
/// of a base configuration.
#[derive(Clone, Debug)]
pub struct BenchmarkConfig {
    pub base: RunConfig,
    pub representations: Vec<Representation>,
    pub b1: Vec<f64>,
    pub gamma: Vec<f64>,
    pub p: Vec<Option<f64>>,
    pub seeds: usize,
    /// Worker threads; 0 uses all cores.
    pub jobs: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Cell {
    pub index: usize,
    pub representation: Representation,
    pub b1: f64,
    pub gamma: f64,
    pub p: Option<f64>,
    pub seed_index: usize,
    /// Seed of the cell's pipeline run, `derive(global, seed_index)`.
    pub seed: u64,
}

impl BenchmarkConfig {
    pub fn from_run(run: &RunConfig) -> Result<Self> {
        let representations = run
            .list::<String>("representations")?
            .iter()
            .map(|s| s.parse())
            .collect::<Result<Vec<Representation>>>()?;
        let cfg = BenchmarkConfig {
            base: run.clone(),
            representations,
            b1: run.list("b1")?,
            gamma: run.list("gamma")?,
            p: run.optional_f64_list("p")?,
            seeds: run.parsed("seeds")?,
            jobs: run.parsed("jobs")?,
        };
        if cfg.seeds == 0 {
            return Err(Error::Invalid("benchmark grid is empty: seeds = 0".into()));
        }
        Ok(cfg)
    }

    pub fn cells(&self) -> Result<Vec<Cell>> {
        let global: u64 = self.base.parsed("seed")?;
        let mut cells = Vec::new();
        for &representation in &self.representations {
            for &b1 in &self.b1 {
                for &gamma in &self.gamma {
                    for &p in &self.p {
                        for seed_index in 0..self.seeds {
                            cells.push(Cell {
                                index: cells.len(),
                                representation,
                                b1,
                                gamma,
                                p,
                                seed_index,
                                seed: seed::derive(global, seed_index as u64),
                            });
                        }
                    }
                }
            }
        }
        Ok(cells)
    }

    /// The standalone configuration whose pipeline run is this cell.
    pub fn cell_config(&self, cell: &Cell) -> Result<RunConfig> {
        let mut run = self.base.clone();
        let p = cell.p.map_or_else(|| "none".to_string(), |v| v.to_string());
        run.apply_overrides(&[
            format!("representation={}", cell.representation),
            format!("b1={}", cell.b1),
            format!("gamma={}", cell.gamma),
            format!("p={p}"),
            format!("seed={}", cell.seed),
        ])?;
        Ok(run)
    }
}

#[derive(Clone, Debug)]
pub struct CellResult {
    pub cell: Cell,
    /// Estimate rows, or the error message of a failed cell.
    pub outcome: std::result::Result<Vec<EstimateRow>, String>,
    pub seconds: f64,
}

#[derive(Clone, Debug)]
pub struct BenchmarkReport {
    pub cells: Vec<CellResult>,
}

fn median(mut xs: Vec<f64>) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    xs.sort_by(f64::total_cmp);
    let m = xs.len() / 2;
    Some(if xs.len() % 2 == 1 { xs[m] } else { 0.5 * (xs[m - 1] + xs[m]) })
}

fn setting_label(b1: f64, gamma: f64, p: Option<f64>) -> String {
    match p {
        Some(p) => format!("b1={b1} gamma={gamma} p={p}"),
        None => format!("b1={b1} gamma={gamma}"),
    }
}

type Setting = (u64, u64, Option<u64>);

fn setting_key(c: &Cell) -> Setting {
    (c.b1.to_bits(), c.gamma.to_bits(), c.p.map(f64::to_bits))
}

impl BenchmarkReport {
    pub fn rows(&self) -> Vec<EstimateRow> {
        self.cells
            .iter()
            .filter_map(|c| c.outcome.as_ref().ok())
            .flatten()
            .cloned()
            .collect()
    }

    pub fn failures(&self) -> Vec<&CellResult> {
        self.cells.iter().filter(|c| c.outcome.is_err()).collect()
    }

    /// Median `psi_hat` across seeds of every successful cell matching
    /// `(representation, estimator, setting)`.
    pub fn median_estimate(
        &self,
        representation: Representation,
        estimator: EstimatorKind,
        b1: f64,
        gamma: f64,
        p: Option<f64>,
    ) -> Option<f64> {
        let key = (b1.to_bits(), gamma.to_bits(), p.map(f64::to_bits));
        let vals = self
            .cells
            .iter()
            .filter(|c| c.cell.representation == representation && setting_key(&c.cell) == key)
            .filter_map(|c| c.outcome.as_ref().ok())
            .flatten()
            .filter(|r| r.estimator == estimator.name())
            .map(|r| r.psi_hat)
            .collect();
        median(vals)
    }

    /// Text table: one column per confounding setting, rows for the ground
    /// truth, the unadjusted estimate and every adjusted
    /// representation/estimator pair. Entries are medians across seeds.
    pub fn summary(&self) -> String {
        let mut settings: Vec<(Setting, String)> = Vec::new();
        for c in &self.cells {
            let key = setting_key(&c.cell);
            if !settings.iter().any(|(k, _)| *k == key) {
                settings.push((key, setting_label(c.cell.b1, c.cell.gamma, c.cell.p)));
            }
        }
        // per setting and seed, the first successful cell supplies truth and
        // the unadjusted estimate (both are independent of representation)
        let mut shared: BTreeMap<(Setting, usize), (Option<f64>, f64)> = BTreeMap::new();
        let mut adjusted: BTreeMap<(Representation, &'static str, Setting), Vec<f64>> = BTreeMap::new();
        let mut reps: Vec<Representation> = Vec::new();
        for c in &self.cells {
            if !reps.contains(&c.cell.representation) {
                reps.push(c.cell.representation);
            }
            let Ok(rows) = &c.outcome else { continue };
            let key = setting_key(&c.cell);
            for r in rows {
                let kind: EstimatorKind = match r.estimator.parse() {
                    Ok(k) => k,
                    Err(_) => continue,
                };
                if kind == EstimatorKind::Unadjusted {
                    shared.entry((key, c.cell.seed_index)).or_insert((r.psi_true, r.psi_hat));
                } else {
                    adjusted
                        .entry((c.cell.representation, kind.name(), key))
                        .or_default()
                        .push(r.psi_hat);
                }
            }
        }

        let mut lines: Vec<(String, Vec<Option<f64>>)> = Vec::new();
        let per_setting = |f: &dyn Fn(&(Option<f64>, f64)) -> Option<f64>| -> Vec<Option<f64>> {
            settings
                .iter()
                .map(|(key, _)| {
                    median(
                        shared
                            .iter()
                            .filter(|((k, _), _)| k == key)
                            .filter_map(|(_, v)| f(v))
                            .collect(),
                    )
                })
                .collect()
        };
        lines.push(("ground truth".into(), per_setting(&|v| v.0)));
        lines.push(("unadjusted".into(), per_setting(&|v| Some(v.1))));
        for &rep in &reps {
            for kind in EstimatorKind::ALL.iter().filter(|k| k.is_adjusted()) {
                let vals = settings
                    .iter()
                    .map(|(key, _)| {
                        adjusted
                            .get(&(rep, kind.name(), *key))
                            .and_then(|v| median(v.clone()))
                    })
                    .collect();
                lines.push((format!("{rep} {kind}"), vals));
            }
        }

        let label_w = lines.iter().map(|(l, _)| l.len()).max().unwrap_or(0);
        let col_w: Vec<usize> = settings.iter().map(|(_, h)| h.len().max(8)).collect();
        let mut out = String::new();
        let _ = write!(out, "{:label_w$}", "");
        for ((_, h), w) in settings.iter().zip(&col_w) {
            let _ = write!(out, "  {h:>w$}");
        }
        out.push('\n');
        for (label, vals) in &lines {
            let _ = write!(out, "{label:label_w$}");
            for (v, w) in vals.iter().zip(&col_w) {
                let cell = v.map_or_else(|| "NA".to_string(), |x| format!("{x:.3}"));
                let _ = write!(out, "  {cell:>w$}");
            }
            out.push('\n');
        }
        let failed = self.failures().len();
        if failed > 0 {
            let _ = writeln!(out, "\n{failed} of {} cells failed; see failures.csv", self.cells.len());
        }
        out
    }
}

fn run_cell(cfg: &BenchmarkConfig, cell: Cell, cell_dir: Option<&Path>) -> CellResult {
    let start = Instant::now();
    let outcome = cfg
        .cell_config(&cell)
        .and_then(|run| PipelineConfig::from_run(&run))
        .and_then(|pc| run_pipeline(&pc))
        .map(|out| out.rows)
        .and_then(|rows| {
            if let Some(dir) = cell_dir {
                let path = dir.join(format!("cell_{:04}.csv", cell.index));
                fs::write(&path, estimates_csv(&rows)?).map_err(|e| Error::io(&path, e))?;
            }
            Ok(rows)
        })
        .map_err(|e| e.to_string());
    if let Err(msg) = &outcome {
        log::warn!("cell {} ({}) failed: {msg}", cell.index, cell.representation);
    }
    CellResult {
        cell,
        outcome,
        seconds: start.elapsed().as_secs_f64(),
    }
}

fn execute(cfg: &BenchmarkConfig, cell_dir: Option<&Path>) -> Result<BenchmarkReport> {
    let cells = cfg.cells()?;
    if cells.is_empty() {
        return Err(Error::Invalid("benchmark grid is empty".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.jobs)
        .build()
        .map_err(|e| Error::Invalid(e.to_string()))?;
    let results = pool.install(|| cells.into_par_iter().map(|c| run_cell(cfg, c, cell_dir)).collect());
    Ok(BenchmarkReport { cells: results })
}

/// Runs every cell concurrently; failed cells are recorded, not fatal.
pub fn run_benchmark(cfg: &BenchmarkConfig) -> Result<BenchmarkReport> {
    execute(cfg, None)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Runs the grid, writing per-cell CSVs under `cells/` and then the merged
/// `estimates.csv`, `failures.csv`, `timing.csv`, `summary.txt`, plus the
/// config echo and manifest.
pub fn cmd_benchmark(run: &RunConfig, out_dir: &Path) -> Result<BenchmarkReport> {
    let cfg = BenchmarkConfig::from_run(run)?;
    let cell_dir = out_dir.join("cells");
    fs::create_dir_all(&cell_dir).map_err(|e| Error::io(&cell_dir, e))?;
    write_run_metadata(out_dir, "benchmark", run, None)?;
    let report = execute(&cfg, Some(&cell_dir))?;

    let write = |name: &str, text: String| {
        let path = out_dir.join(name);
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    };
    write("estimates.csv", estimates_csv(&report.rows())?)?;

    let mut failures = csv::Writer::from_writer(Vec::new());
    failures.write_record(["cell", "representation", "b1", "gamma", "p", "seed", "error"])?;
    let mut timing = csv::Writer::from_writer(Vec::new());
    timing.write_record(["cell", "representation", "b1", "gamma", "p", "seed", "status", "wall_seconds"])?;
    for c in &report.cells {
        let base = [
            c.cell.index.to_string(),
            c.cell.representation.to_string(),
            c.cell.b1.to_string(),
            c.cell.gamma.to_string(),
            fmt_opt(c.cell.p),
            c.cell.seed.to_string(),
        ];
        let status = if let Err(msg) = &c.outcome {
            let mut rec = base.to_vec();
            rec.push(msg.clone());
            failures.write_record(&rec)?;
            "failed"
        } else {
            "ok"
        };
        let mut rec = base.to_vec();
        rec.push(status.to_string());
        rec.push(format!("{:.3}", c.seconds));
        timing.write_record(&rec)?;
    }
    let to_text = |w: csv::Writer<Vec<u8>>| -> Result<String> {
        let bytes = w.into_inner().map_err(|e| Error::Invalid(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    };
    write("failures.csv", to_text(failures)?)?;
    write("timing.csv", to_text(timing)?)?;
    write("summary.txt", report.summary())?;
    Ok(report)
}
