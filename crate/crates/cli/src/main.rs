//! `fedspu` command-line runner.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fedspu::config::OneOrMany;
use fedspu::experiment::{self, ExperimentError};
use fedspu::{ExperimentConfig, MethodRegistry};

#[derive(Parser)]
#[command(name = "fedspu", version, about = "Federated learning with stochastic neuron freezing")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Partition the dataset across clients and write partition.json.
    Partition(Common),
    /// Run every (method, alpha, seed) cell of the sweep.
    Run(Common),
    /// Run the gradient, lemma, cost and bound checks.
    Diagnose(Common),
    /// Aggregate summary.json of a finished run into report.csv.
    Report(Common),
}

#[derive(Args)]
struct Common {
    /// TOML experiment file; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Replace the seed list with a single master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Replace the method list with a single method.
    #[arg(long)]
    method: Option<String>,
    /// Replace the alpha list with a single Dirichlet concentration.
    #[arg(long)]
    alpha: Option<f64>,
    /// Enable early stopping.
    #[arg(long)]
    es: bool,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig, ExperimentError> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = OneOrMany::One(seed);
        }
        if let Some(method) = &self.method {
            cfg.method = OneOrMany::One(method.clone());
        }
        if let Some(alpha) = self.alpha {
            cfg.alpha = OneOrMany::One(alpha);
        }
        if self.es {
            cfg.early_stopping = true;
        }
        if let Some(out) = &self.out {
            cfg.out_dir = out.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn partition(args: &Common) -> Result<(), ExperimentError> {
    let cfg = args.load()?;
    let seed = cfg.seed.values()[0];
    let alpha = cfg.alpha.values()[0];
    let dataset = experiment::build_dataset(&cfg, seed)?;
    let report = experiment::partition(&cfg, &dataset, alpha, seed)?;
    experiment::write_partition(&cfg.out_dir, &report)?;
    for c in &report.clients {
        println!(
            "client {:>4}  p={:<4} train={:<5} validation={:<5} classes={:?}",
            c.id,
            c.p,
            c.train.len(),
            c.validation.len(),
            c.class_histogram
        );
    }
    println!("wrote {}", cfg.out_dir.join("partition.json").display());
    Ok(())
}

fn run(args: &Common) -> Result<(), ExperimentError> {
    let cfg = args.load()?;
    let rows = experiment::execute(&cfg, &MethodRegistry::builtin(), &cfg.out_dir)?;
    println!("{:<15} {:>6} {:>6} {:>7} {:>9} {:>14} {:>16}", "method", "alpha", "seed", "rounds", "accuracy", "bytes", "flops");
    for r in &rows {
        println!(
            "{:<15} {:>6} {:>6} {:>7} {:>9.4} {:>14} {:>16}",
            r.method, r.alpha, r.seed, r.rounds_executed, r.mean_accuracy, r.total_bytes, r.total_flops
        );
    }
    println!("wrote {}", cfg.out_dir.display());
    Ok(())
}

fn diagnose(args: &Common) -> Result<(), ExperimentError> {
    let cfg = args.load()?;
    let out = experiment::run_diagnostics(&cfg, cfg.seed.values()[0])?;
    experiment::write_diagnostics(&cfg.out_dir, &out)?;
    for r in &out.records {
        println!("{} {:<40} value={:<12.4e} threshold={:.4e}", if r.pass { "PASS" } else { "FAIL" }, r.name, r.value, r.threshold);
    }
    let passed = out.records.iter().filter(|r| r.pass).count();
    println!("{passed}/{} checks passed; wrote {}", out.records.len(), cfg.out_dir.join("diagnostics.jsonl").display());
    Ok(())
}

fn report(args: &Common) -> Result<(), ExperimentError> {
    let dir = match &args.out {
        Some(out) => out.clone(),
        None => args.load()?.out_dir,
    };
    let rows = experiment::aggregate_report(&experiment::read_summaries(&dir.join("summary.json"))?);
    let path = dir.join("report.csv");
    experiment::write_report_csv(&path, &rows)?;
    println!("{:<15} {:>6} {:>5} {:>9} {:>8} {:>8}", "method", "alpha", "seeds", "accuracy", "std", "rounds");
    for r in &rows {
        println!(
            "{:<15} {:>6} {:>5} {:>9.4} {:>8.4} {:>8.1}",
            r.method, r.alpha, r.seeds, r.mean_accuracy, r.accuracy_std, r.rounds_executed
        );
    }
    println!("wrote {}", path.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match &cli.command {
        Command::Partition(a) => partition(a),
        Command::Run(a) => run(a),
        Command::Diagnose(a) => diagnose(a),
        Command::Report(a) => report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
