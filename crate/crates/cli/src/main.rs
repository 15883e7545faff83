use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fedsim::cost::{format_table, write_csv, TableSettings};
use fedsim::harness::{
    build_federation, cost_table, emit_report, read_report, run_experiment, ExperimentConfig, FoldChoice, RunReport,
};
use fedsim::Error;

/// Deterministic cross-silo federated optimization simulator.
#[derive(Debug, Parser)]
#[command(name = "fedsim", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run an experiment and write its report.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Run a single fold instead of the configured selection.
        #[arg(long)]
        fold: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory; overrides `output_dir` in the config.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Worker threads. Results do not depend on it.
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Print the per-algorithm cost table for the configured federation.
    Cost {
        #[arg(long)]
        config: PathBuf,
        /// Also write the table as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Show how the configured partition splits the data.
    Partition {
        #[arg(long)]
        config: PathBuf,
        /// Print per-client counts and fold sizes.
        #[arg(long)]
        summary: bool,
    },
    /// Pretty-print a report directory.
    Report {
        #[arg(long = "in")]
        dir: PathBuf,
    },
}

/// Exit status for configuration problems.
const EXIT_CONFIG: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

enum Failure {
    Config(Error),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        if e.is_config() {
            Failure::Config(e)
        } else {
            Failure::Runtime(e)
        }
    }
}

fn load(path: &Path) -> Result<ExperimentConfig, Failure> {
    // an unreadable config file is a configuration problem too
    ExperimentConfig::load(path).map_err(Failure::Config)
}

fn run(cli: Cli) -> Result<String, Failure> {
    match cli.command {
        Command::Run {
            config,
            fold,
            seed,
            out,
            workers,
        } => {
            let mut cfg = load(&config)?;
            if let Some(f) = fold {
                cfg.folds.fold = FoldChoice::Index(f);
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(w) = workers {
                cfg.workers = Some(w);
            }
            if let Some(o) = out {
                cfg.output_dir = Some(o);
            }
            cfg.validate().map_err(Failure::Config)?;
            let dir = cfg.output_dir.clone().unwrap_or_else(|| PathBuf::from("fedsim-out"));
            let outcome = run_experiment(&cfg)?;
            emit_report(&outcome.report, &outcome.models, outcome.global.as_ref(), &dir)?;
            let mut s = render_report(&outcome.report);
            let _ = writeln!(s, "\nwritten to {}", dir.display());
            Ok(s)
        }
        Command::Cost { config, csv } => {
            let cfg = load(&config)?;
            let rows = cost_table(&cfg, &TableSettings::default())?;
            if let Some(path) = csv {
                let f = std::fs::File::create(&path).map_err(|e| Failure::Runtime(io_error(&path, e)))?;
                write_csv(&rows, f)?;
            }
            Ok(format_table(&rows))
        }
        Command::Partition { config, summary } => {
            let cfg = load(&config)?;
            let fed = build_federation(&cfg)?;
            let fold = cfg.folds.selected()[0];
            let rows = fed.summary(fold)?;
            let total: usize = rows.iter().map(|r| r.samples).sum();
            let mut s = format!(
                "{} clients, {} samples, task {}\n",
                rows.len(),
                total,
                fed.task.kind().name()
            );
            if summary {
                let _ = writeln!(s, "\nfold {fold}");
                let _ = writeln!(
                    s,
                    "{:>6}  {:>7}  {:>6}  {:>4}  {:>5}  per_group",
                    "client", "samples", "train", "val", "test"
                );
                for r in &rows {
                    let _ = writeln!(
                        s,
                        "{:>6}  {:>7}  {:>6}  {:>4}  {:>5}  {:?}",
                        r.client_id, r.samples, r.train, r.val, r.test, r.per_group
                    );
                }
            }
            Ok(s)
        }
        Command::Report { dir } => {
            let report = read_report(&dir).map_err(|e| match e {
                Error::Io { .. } | Error::Serde(_) => Failure::Config(e),
                other => Failure::from(other),
            })?;
            Ok(render_report(&report))
        }
    }
}

fn io_error(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn render_report(r: &RunReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "algorithm {}  seed {}  hash {}", r.algorithm, r.seed, r.content_hash);

    let _ = writeln!(s, "\nmetrics (test samples)");
    let _ = writeln!(
        s,
        "{:<10}  {:>12}  {:>12}  {:>6}  {:>9}",
        "metric", "mean", "std", "count", "undefined"
    );
    let fmt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"));
    for (name, sum) in &r.metrics.overall {
        let _ = writeln!(
            s,
            "{:<10}  {:>12}  {:>12}  {:>6}  {:>9}",
            name,
            fmt(sum.mean),
            fmt(sum.std),
            sum.count,
            sum.undefined
        );
    }

    if !r.metrics.per_institution.is_empty() {
        let _ = writeln!(s, "\nper institution (mean)");
        let mut header = format!("{:>6}", "client");
        for m in &r.metrics.metrics {
            let _ = write!(header, "  {m:>10}");
        }
        let _ = writeln!(s, "{header}");
        for (id, row) in &r.metrics.per_institution {
            let _ = write!(s, "{id:>6}");
            for m in &r.metrics.metrics {
                let _ = write!(s, "  {:>10}", fmt(row.get(m).and_then(|x| x.mean)));
            }
            let _ = writeln!(s);
        }
    }

    for f in &r.folds {
        let _ = writeln!(s, "\nfold {}: {} rounds recorded", f.fold, f.curves.len());
        if let Some(b) = &f.best {
            let _ = writeln!(
                s,
                "best global model: {} round {} (val loss {:.6})",
                b.phase, b.round, b.val_loss
            );
        }
        if let Some(c) = &f.clusters {
            for cl in &c.clusters {
                let label = cl.label.as_deref().unwrap_or("-");
                let _ = writeln!(s, "cluster {} [{}]: {:?}", cl.id, label, cl.members);
            }
        }
    }
    let costs: Vec<_> = r.folds.iter().map(|f| f.cost.clone()).collect();
    if !costs.is_empty() {
        let _ = writeln!(s, "\ncost");
        s.push_str(&format_table(&costs));
    }
    s
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(out) => {
            print!("{out}");
            ExitCode::SUCCESS
        }
        Err(Failure::Config(e)) => {
            eprintln!("fedsim: {e}");
            ExitCode::from(EXIT_CONFIG)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("fedsim: {e}");
            ExitCode::from(EXIT_RUNTIME)
        }
    }
}
