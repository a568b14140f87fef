//! Command-line front end.

use std::ffi::OsString;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use crate::bench::{self, ExperimentConfig, ReportFormat};
use crate::data::{self, Task};
use crate::error::{Error, Result};
use crate::kernel::RngStream;
use crate::mcs::{self, Bounds, CsParams, McsParams};

#[derive(Debug, Parser)]
#[command(name = "moecg", version, about = "Mixture-of-experts training benchmarks")]
struct Cli {
    /// Overrides the seed of the config or command.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Export a generated dataset as CSV.
    Gen {
        dataset: GenDataset,
        #[arg(long)]
        out: PathBuf,
        /// Samples per class for the artificial dataset.
        #[arg(long, default_value_t = 300)]
        n_per_class: usize,
    },
    /// Run an experiment described by a TOML config.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Directory for runs.csv and report.md.
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Minimize a benchmark function with cuckoo search.
    Search {
        objective: Objective,
        #[arg(long, value_enum, default_value_t = Algo::Mcs)]
        algo: Algo,
        #[arg(long, default_value_t = 2)]
        dim: usize,
        #[arg(long, default_value_t = 10_000)]
        evals: usize,
        #[arg(long, default_value_t = 25)]
        nests: usize,
        /// Where to write the `evaluation,best_fitness` trace.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Summarize a runs.csv file.
    Report {
        runs: PathBuf,
        #[arg(long, value_enum, default_value_t = Format::Md)]
        format: Format,
        /// Task of the runs; guessed from the metric range when omitted.
        #[arg(long, value_enum)]
        task: Option<TaskArg>,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum GenDataset {
    Funcapprox,
    Artificial,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Objective {
    Sphere,
    Rosenbrock,
    Rastrigin,
    Ackley,
}

impl Objective {
    fn name(self) -> &'static str {
        match self {
            Self::Sphere => "sphere",
            Self::Rosenbrock => "rosenbrock",
            Self::Rastrigin => "rastrigin",
            Self::Ackley => "ackley",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Algo {
    Cs,
    Mcs,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Format {
    Md,
    Csv,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum TaskArg {
    Regression,
    Classification,
}

/// Runs the CLI on `args` (program name first). Returns 0 on success, 1 on a
/// usage error and 2 when the command itself fails.
pub fn cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let parsed = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match execute(parsed) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

fn execute(cli: Cli) -> Result<()> {
    let seed = cli.seed;
    match cli.command {
        Command::Gen {
            dataset,
            out,
            n_per_class,
        } => {
            fs::create_dir_all(&out)?;
            let mut rng = RngStream::new(seed.unwrap_or(0), 1);
            match dataset {
                GenDataset::Funcapprox => {
                    let (train, test) = data::gen_funcapprox(&mut rng);
                    train.write_csv(&out.join("train.csv"))?;
                    test.write_csv(&out.join("test.csv"))?;
                }
                GenDataset::Artificial => {
                    data::gen_artificial(&mut rng, n_per_class)?.write_csv(&out.join("data.csv"))?;
                }
            }
            Ok(())
        }
        Command::Run { config, out } => {
            let mut cfg = ExperimentConfig::from_file(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let report = bench::run_experiment(&cfg)?;
            fs::create_dir_all(&out)?;
            write_file(&out.join("runs.csv"), &bench::emit_report(&report, ReportFormat::Csv))?;
            let md = bench::emit_report(&report, ReportFormat::Markdown);
            write_file(&out.join("report.md"), &md)?;
            let failed = report.records.iter().filter(|r| r.status == bench::RunStatus::Failed).count();
            if failed > 0 {
                eprintln!("warning: {failed} of {} runs failed", report.records.len());
            }
            print!("{}", bench::markdown_summary(&report.records, report.task, &cfg.dataset.label()));
            Ok(())
        }
        Command::Search {
            objective,
            algo,
            dim,
            evals,
            nests,
            trace,
        } => {
            let (f, half) = mcs::benchmark(objective.name()).expect("every objective is registered");
            let bounds = Bounds::uniform(dim, -half, half)?;
            let mut rng = RngStream::new(seed.unwrap_or(0), 0);
            let outcome = match algo {
                Algo::Cs => {
                    let p = CsParams {
                        n_nests: nests,
                        max_evals: evals,
                        ..CsParams::new(bounds)
                    };
                    mcs::cs_search(f, &p, &mut rng)?
                }
                Algo::Mcs => {
                    let p = McsParams {
                        n_nests: nests,
                        max_evals: evals,
                        ..McsParams::new(bounds)
                    };
                    mcs::mcs_search(f, &p, &mut rng)?
                }
            };
            if let Some(path) = trace {
                outcome.write_trace(fs::File::create(path)?)?;
            }
            let mut stdout = io::stdout().lock();
            writeln!(stdout, "best_fitness {}", outcome.best.fitness)?;
            writeln!(stdout, "best_position {:?}", outcome.best.pos)?;
            writeln!(stdout, "evaluations {}", outcome.evaluations())?;
            Ok(())
        }
        Command::Report { runs, format, task } => {
            let text = fs::read_to_string(&runs)?;
            let records = bench::parse_runs_csv(&text)?;
            let out = match format {
                Format::Csv => bench::runs_csv(&records),
                Format::Md => {
                    let task = match task {
                        Some(TaskArg::Regression) => Task::Regression,
                        Some(TaskArg::Classification) => Task::Classification,
                        None => guess_task(&records),
                    };
                    let label = runs
                        .parent()
                        .and_then(Path::file_name)
                        .map_or_else(|| "runs".into(), |s| s.to_string_lossy().into_owned());
                    bench::markdown_summary(&records, task, &label)
                }
            };
            print!("{out}");
            Ok(())
        }
    }
}

/// Accuracies live in percent, normalized MSEs well below 1.
fn guess_task(records: &[bench::RunRecord]) -> Task {
    let max = records
        .iter()
        .map(|r| r.test_metric)
        .filter(|v| v.is_finite())
        .fold(0.0, f64::max);
    if max > 1.0 {
        Task::Classification
    } else {
        Task::Regression
    }
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}
