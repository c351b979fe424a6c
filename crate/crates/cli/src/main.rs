use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use catm_core::atm::{self, save_checkpoint, TrainMode};
use catm_core::corpus::{split_folds, write_records};
use catm_core::pipeline::{
    cmd_benchmark, cmd_pipeline, load_corpus, prepare, representation_features, run_gradcheck,
    write_run_metadata, GradcheckConfig, PipelineConfig, Representation, RunConfig, KEYS,
};
use catm_core::simulate::{simulate_dataset, write_sidecar};
use catm_core::{seed, Tensor};

/// Causal effect estimation from text with amortized topic models.
#[derive(Parser)]
#[command(name = "catm", version)]
struct Cli {
    /// Log progress (info level) to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Plain-text `key = value` configuration file.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(short, long, default_value = "out")]
    out: PathBuf,
    /// Global seed (overrides the config file).
    #[arg(long)]
    seed: Option<u64>,
    /// Input records (overrides the config file).
    #[arg(long)]
    input: Option<PathBuf>,
    /// Any config key, as KEY=VALUE; repeatable, applied last.
    #[arg(short = 's', long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl Common {
    fn resolve(&self) -> Result<RunConfig> {
        let mut run = match &self.config {
            Some(p) => RunConfig::from_file(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            run.set("seed", &s.to_string())?;
        }
        if let Some(p) = &self.input {
            run.set("input", &p.to_string_lossy())?;
        }
        run.apply_overrides(&self.set)?;
        Ok(run)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Tokenize records (or generate the synthetic corpus) and export the
    /// corpus, vocabulary and fold assignment.
    Ingest(Common),
    /// Simulate outcomes (and treatments when p is set) and export them with
    /// a ground-truth sidecar.
    Simulate(Common),
    /// Fit the configured representation on all documents and export it.
    Train(Common),
    /// Full pipeline for one dataset and representation; writes estimates.csv.
    Estimate(Common),
    /// Run the representation x confounding x seed grid.
    Benchmark(Common),
    /// Finite-difference check of every backward rule and model loss.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Include a deliberately wrong backward rule (self-test).
        #[arg(long)]
        inject_fault: bool,
    },
    /// List every configuration key with its default.
    Keys,
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn ingest(run: &RunConfig, out: &Path) -> Result<()> {
    let cfg = PipelineConfig::from_run(run)?;
    let corpus = load_corpus(&cfg).context("ingest")?;
    write_run_metadata(out, "ingest", run, Some(&corpus.vocab().hash()))?;
    write_records(&out.join("corpus.jsonl"), &corpus.to_records())?;
    write(&out.join("vocab.txt"), &(corpus.vocab().tokens().join("\n") + "\n"))?;
    if cfg.folds >= 2 {
        let folds = split_folds(corpus.len(), cfg.folds, seed::derive_named(cfg.seed, "folds"))?;
        let ids: Vec<String> = corpus.docs().iter().map(|d| d.id.clone()).collect();
        folds.write_csv(&out.join("folds.csv"), &ids)?;
    }
    println!("{} documents, {} vocabulary entries -> {}", corpus.len(), corpus.vocab().len(), out.display());
    Ok(())
}

fn simulate(run: &RunConfig, out: &Path) -> Result<()> {
    let cfg = PipelineConfig::from_run(run)?;
    let corpus = load_corpus(&cfg).context("ingest")?;
    let sim = simulate_dataset(&corpus, &cfg.sim_config()).context("simulate")?;
    let labeled = corpus.with_labels(&sim.treatment, &sim.outcome)?;
    write_run_metadata(out, "simulate", run, Some(&corpus.vocab().hash()))?;
    write_records(&out.join("simulated.jsonl"), &labeled.to_records())?;
    write_sidecar(&out.join("simulation.json"), &labeled, &sim)?;
    println!("psi_true = {}", sim.psi_true);
    Ok(())
}

fn matrix_csv(path: &Path, ids: &[String], x: &Tensor, prefix: &str) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["id".to_string()];
    header.extend((0..x.cols()).map(|k| format!("{prefix}{k}")));
    w.write_record(&header)?;
    for (r, id) in ids.iter().enumerate() {
        let mut rec = vec![id.clone()];
        rec.extend(x.row(r).iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

fn train(run: &RunConfig, out: &Path) -> Result<()> {
    let cfg = PipelineConfig::from_run(run)?;
    let corpus = load_corpus(&cfg).context("ingest")?;
    let vocab_hash = corpus.vocab().hash();
    let data = prepare(&cfg, corpus).context("simulate")?;
    write_run_metadata(out, "train", run, Some(&vocab_hash))?;
    let ids: Vec<String> = data.corpus.docs().iter().map(|d| d.id.clone()).collect();
    let mode = match cfg.representation {
        Representation::Catm => Some(TrainMode::Causal),
        Representation::Atm => Some(TrainMode::Unsupervised),
        Representation::Nn => Some(TrainMode::SupervisedOnly),
        _ => None,
    };
    match mode {
        Some(mode) => {
            let net = atm::AtmConfig {
                mode,
                family: cfg.family,
                seed: seed::derive_named(cfg.seed, cfg.representation.name()),
                ..cfg.atm.clone()
            };
            let all: Vec<usize> = (0..data.corpus.len()).collect();
            let model = atm::train(&data.corpus, &all, Some(&data.outcome), &net).context("train")?;
            save_checkpoint(&out.join("checkpoint.json"), &model.params, &net, &vocab_hash)?;
            let trace: String = model
                .loss_trace
                .iter()
                .enumerate()
                .map(|(e, l)| format!("{e},{l}\n"))
                .collect();
            write(&out.join("loss_trace.csv"), &format!("epoch,loss\n{trace}"))?;
            let theta = atm::embed(&data.corpus, &all, &model.params)?;
            matrix_csv(&out.join("topics.csv"), &ids, &theta, "topic")?;
            println!(
                "final epoch loss {:.4}; checkpoint -> {}",
                model.loss_trace.last().copied().unwrap_or(f64::NAN),
                out.join("checkpoint.json").display()
            );
        }
        None => {
            let features = representation_features(&cfg, &data, cfg.seed).context("representation")?;
            features.write_csv(&out.join("features.csv"), &ids)?;
            println!("{} x {} features -> {}", features.rows(), features.cols(), out.display());
        }
    }
    Ok(())
}

fn gradcheck(run: &RunConfig, out: &Path, inject_fault: bool) -> Result<bool> {
    let cfg = GradcheckConfig {
        instances: run.parsed("gradcheck_instances")?,
        tolerance: run.parsed("gradcheck_tolerance")?,
        seed: run.parsed("seed")?,
        inject_fault,
    };
    let report = run_gradcheck(&cfg);
    let text = report.render();
    write_run_metadata(out, "gradcheck", run, None)?;
    write(&out.join("gradcheck.txt"), &text)?;
    print!("{text}");
    Ok(report.passed())
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Ingest(c) => ingest(&c.resolve()?, &c.out)?,
        Command::Simulate(c) => simulate(&c.resolve()?, &c.out)?,
        Command::Train(c) => train(&c.resolve()?, &c.out)?,
        Command::Estimate(c) => {
            let out = cmd_pipeline(&c.resolve()?, &c.out)?;
            for r in &out.rows {
                println!(
                    "{:<18} {:<16} psi_hat={:.4} sd={} n_kept={}",
                    r.representation,
                    r.estimator,
                    r.psi_hat,
                    r.sd.map_or_else(|| "NA".into(), |s| format!("{s:.4}")),
                    r.n_kept
                );
            }
        }
        Command::Benchmark(c) => {
            let report = cmd_benchmark(&c.resolve()?, &c.out)?;
            print!("{}", report.summary());
            let failed = report.failures().len();
            if failed == report.cells.len() {
                bail!("every benchmark cell failed; see {}", c.out.join("failures.csv").display());
            }
        }
        Command::Gradcheck { common, inject_fault } => {
            return gradcheck(&common.resolve()?, &common.out, inject_fault);
        }
        Command::Keys => {
            for (k, d, help) in KEYS {
                println!("{k:<22} {d:<24} {help}");
            }
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            // core errors already embed their sources; print each link once
            let mut msg = String::new();
            for cause in e.chain() {
                let text = cause.to_string();
                if !msg.contains(&text) {
                    if !msg.is_empty() {
                        msg.push_str(": ");
                    }
                    msg.push_str(&text);
                }
            }
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
