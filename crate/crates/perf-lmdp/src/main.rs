use std::collections::HashSet;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use perf_lmdp::commands::{self, OutputNames};
use perf_lmdp::config::{self, Driver, ExperimentConfig, LambdaSetting, MSetting, SigmaKind, SolverKind};
use perf_lmdp::CliError;
use rayon::prelude::*;

#[derive(Parser, Debug)]
#[command(name = "perf-lmdp", version, about = "Performative RL experiments in linear MDPs")]
struct Cli {
    /// Config file; repeat to run several configs in parallel.
    #[arg(long = "config", global = true)]
    config: Vec<PathBuf>,
    /// Overrides the seed of every config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (one subdirectory per config when several are given).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// error, warn, info, debug or trace.
    #[arg(long = "log-level", global = true, default_value = "warn")]
    log_level: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
struct Common {
    /// Regularization strength, or `auto` for 1.25 λ_min.
    #[arg(long, value_parser = LambdaSetting::parse)]
    lambda: Option<LambdaSetting>,
}

#[derive(Args, Debug, Clone, Default)]
struct TraceFiles {
    /// Trace file name inside the output directory.
    #[arg(long)]
    trace: Option<String>,
    /// Summary file name inside the output directory.
    #[arg(long)]
    summary: Option<String>,
    /// Maximum number of retraining rounds.
    #[arg(long)]
    rounds: Option<usize>,
}

#[derive(Subcommand, Debug, Clone)]
enum Command {
    /// Runs the driver named in each config.
    Run(Common),
    /// Spectral constants and the convergence certificate.
    Certify(Common),
    /// One regularized occupancy solve.
    Solve {
        #[command(flatten)]
        common: Common,
        /// Directory with theta.csv and mu.csv.
        #[arg(long)]
        params: Option<PathBuf>,
        #[arg(long)]
        tol: Option<f64>,
    },
    /// Repeated retraining with exact solves.
    RetrainExact {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        files: TraceFiles,
    },
    /// Repeated retraining from fresh samples each round.
    RetrainFinite {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        files: TraceFiles,
        /// A size, `infinite`, or a file with one size per line.
        #[arg(long = "m-schedule")]
        m_schedule: Option<String>,
        #[arg(long, value_enum)]
        solver: Option<SolverKind>,
        #[arg(long, value_enum)]
        sigma: Option<SigmaKind>,
        #[arg(long)]
        ridge: Option<f64>,
        /// Write each round's dataset under datasets/.
        #[arg(long = "save-datasets")]
        save_datasets: bool,
    },
    /// Offline primal-dual solver on one dataset.
    PrimalDual {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long = "T")]
        t_inner: Option<usize>,
        #[arg(long = "K")]
        k: Option<usize>,
        #[arg(long = "eta-omega")]
        eta_omega: Option<f64>,
        #[arg(long = "eta-pi")]
        eta_pi: Option<f64>,
        #[arg(long = "b-cov")]
        b_cov: Option<f64>,
    },
    /// Sensitivity checks for a Stackelberg game.
    Stackelberg {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        game: Option<PathBuf>,
        /// Also run retraining on the induced response map.
        #[arg(long)]
        retrain: bool,
    },
    /// Constants, bounds and a brute-force comparison on small instances.
    Diagnose {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        grid: Option<f64>,
    },
}

impl Command {
    fn driver(&self) -> Option<Driver> {
        match self {
            Command::Run(_) => None,
            Command::Certify(_) => Some(Driver::Certify),
            Command::Solve { .. } => Some(Driver::Solve),
            Command::RetrainExact { .. } => Some(Driver::RetrainExact),
            Command::RetrainFinite { .. } => Some(Driver::RetrainFinite),
            Command::PrimalDual { .. } => Some(Driver::PrimalDual),
            Command::Stackelberg { .. } => Some(Driver::Stackelberg),
            Command::Diagnose { .. } => Some(Driver::Diagnose),
        }
    }

    fn common(&self) -> &Common {
        match self {
            Command::Run(c) | Command::Certify(c) => c,
            Command::Solve { common, .. }
            | Command::RetrainExact { common, .. }
            | Command::RetrainFinite { common, .. }
            | Command::PrimalDual { common, .. }
            | Command::Stackelberg { common, .. }
            | Command::Diagnose { common, .. } => common,
        }
    }

    fn files(&self) -> Option<&TraceFiles> {
        match self {
            Command::RetrainExact { files, .. } | Command::RetrainFinite { files, .. } => Some(files),
            _ => None,
        }
    }
}

fn absolute(p: &Path) -> PathBuf {
    std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf())
}

/// Applies command-line flags on top of a parsed config.
fn apply_overrides(cli: &Cli, cfg: &mut ExperimentConfig) {
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(l) = cli.command.common().lambda {
        cfg.lambda = l;
    }
    if let Some(f) = cli.command.files() {
        if let Some(r) = f.rounds {
            cfg.retrain.max_rounds = r;
        }
    }
    match &cli.command {
        Command::Solve { params, tol, .. } => {
            if let Some(p) = params {
                cfg.solve.params = Some(absolute(p));
            }
            if let Some(t) = tol {
                cfg.solve.tol = *t;
            }
        }
        Command::RetrainFinite {
            m_schedule,
            solver,
            sigma,
            ridge,
            save_datasets,
            ..
        } => {
            if let Some(m) = m_schedule {
                cfg.finite.m_schedule = match MSetting::parse(m) {
                    MSetting::Word(w) if w != "infinite" => MSetting::Word(absolute(Path::new(&w)).display().to_string()),
                    other => other,
                };
            }
            if let Some(s) = solver {
                cfg.finite.solver = *s;
            }
            if let Some(s) = sigma {
                cfg.finite.sigma = *s;
            }
            if let Some(r) = ridge {
                cfg.finite.ridge = *r;
            }
            if *save_datasets {
                cfg.finite.save_datasets = true;
            }
        }
        Command::PrimalDual {
            dataset,
            t_inner,
            k,
            eta_omega,
            eta_pi,
            b_cov,
            ..
        } => {
            if let Some(d) = dataset {
                cfg.pd.dataset = Some(absolute(d));
            }
            if let Some(t) = t_inner {
                cfg.pd.t_inner = *t;
            }
            if let Some(k) = k {
                cfg.pd.k = *k;
            }
            if eta_omega.is_some() {
                cfg.pd.eta_omega = *eta_omega;
            }
            if eta_pi.is_some() {
                cfg.pd.eta_pi = *eta_pi;
            }
            if b_cov.is_some() {
                cfg.pd.b_cov = *b_cov;
            }
        }
        Command::Stackelberg { game, retrain, .. } => {
            if let Some(g) = game {
                cfg.stackelberg.game = Some(absolute(g));
            }
            if *retrain {
                cfg.stackelberg.retrain = true;
            }
        }
        Command::Diagnose { grid: Some(g), .. } => cfg.diagnose.grid = *g,
        _ => {}
    }
}

struct Job {
    label: String,
    cfg: ExperimentConfig,
    driver: Driver,
    out: PathBuf,
}

fn build_jobs(cli: &Cli) -> Result<Vec<Job>, CliError> {
    let mut loaded = Vec::new();
    if cli.config.is_empty() {
        let cfg = ExperimentConfig {
            base_dir: absolute(Path::new(".")),
            ..ExperimentConfig::default()
        };
        loaded.push((String::from("default"), cfg));
    }
    for path in &cli.config {
        let cfg = config::parse_config(path)?;
        let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        loaded.push((stem, cfg));
    }
    let several = loaded.len() > 1;
    let mut stems = HashSet::new();
    let mut jobs = Vec::new();
    for (stem, mut cfg) in loaded {
        apply_overrides(cli, &mut cfg);
        cfg.validate("").map_err(|e| prefix(&stem, e))?;
        let driver = cli
            .command
            .driver()
            .or(cfg.driver)
            .ok_or_else(|| CliError::Config(format!("{}: no driver given (set `driver` or use a subcommand)", stem)))?;
        let base = match (&cli.out, &cfg.output) {
            (Some(o), _) => o.clone(),
            (None, Some(o)) => cfg.resolve(o),
            (None, None) => PathBuf::from("out"),
        };
        let out = if several {
            if !stems.insert(stem.clone()) {
                return Err(CliError::Config(format!("two configs share the name {:?}; their outputs would collide", stem)));
            }
            base.join(&stem)
        } else {
            base
        };
        jobs.push(Job {
            label: stem,
            cfg,
            driver,
            out,
        });
    }
    Ok(jobs)
}

fn prefix(label: &str, e: CliError) -> CliError {
    match e {
        CliError::Config(m) => CliError::Config(format!("{}: {}", label, m)),
        CliError::ConfigList(v) => CliError::ConfigList(v.into_iter().map(|m| format!("{}: {}", label, m)).collect()),
        e => e,
    }
}

fn thread_cap() -> Option<usize> {
    let v = std::env::var("PERF_LMDP_THREADS").ok()?;
    match v.trim().parse::<usize>() {
        Ok(n) if n > 0 => Some(n),
        _ => {
            log::warn!("ignoring PERF_LMDP_THREADS={:?}", v);
            None
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new()
        .parse_filters(&cli.log_level)
        .format_timestamp(None)
        .init();
    let jobs = match build_jobs(&cli) {
        Ok(j) => j,
        Err(e) => {
            eprintln!("{}", e);
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    let names = {
        let mut n = OutputNames::default();
        if let Some(f) = cli.command.files() {
            if let Some(t) = &f.trace {
                n.trace = t.clone();
            }
            if let Some(s) = &f.summary {
                n.summary = s.clone();
            }
        }
        n
    };
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = thread_cap() {
        builder = builder.num_threads(n);
    }
    let pool = match builder.build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("cannot start worker threads: {}", e);
            return ExitCode::from(2);
        }
    };
    let results: Vec<(String, Result<commands::RunReport, CliError>)> = pool.install(|| {
        jobs.par_iter()
            .map(|job| (job.label.clone(), commands::run(&job.cfg, job.driver, &job.out, &names)))
            .collect()
    });
    let mut code = 0;
    for (label, res) in results {
        match res {
            Ok(report) => log::info!("{}: wrote {}", label, report.out_dir.display()),
            Err(e) => {
                eprintln!("{}: {}", label, e);
                code = code.max(e.exit_code());
            }
        }
    }
    ExitCode::from(code as u8)
}
