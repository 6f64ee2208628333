use chemoflow::config::{load_config, ConfigError, RunConfig};
use chemoflow::diagnostics::check_records;
use chemoflow::driver::{epsilon_study, homogeneous_oracle, init_state, RunResult, Runner};
use chemoflow::storage::{
    read_checkpoint, read_records, write_checkpoint, write_records, write_snapshot, StorageError,
};
use chemoflow::DriverError;
use clap::{Parser, Subcommand};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

const EXIT_VIOLATION: u8 = 2;
const EXIT_CONFIG: u8 = 3;
const EXIT_SOLVER: u8 = 4;

#[derive(Parser)]
#[command(
    name = "chemoflow",
    version,
    about = "Chemotaxis-fluid simulator and diagnostics"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario described by a TOML config.
    Run {
        config: PathBuf,
        /// Overrides `output.dir`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Continue a run from a checkpoint snapshot.
    Resume {
        checkpoint: PathBuf,
        /// Overrides the stored end time.
        #[arg(long)]
        t_end: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate the spatially homogeneous reference solution.
    Oracle {
        /// `key=value` pairs among n0, c0, eps, t, kappa, mu.
        args: Vec<String>,
    },
    /// Run a scenario for each `study.eps_list` entry and compare.
    EpsStudy { config: PathBuf },
    /// Re-check a records CSV.
    Check {
        records: PathBuf,
        /// Config of the run, enabling the parameter-dependent checks.
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

enum Failure {
    Config(String),
    Violations(usize),
    Solver(String),
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Config(e.to_string())
    }
}

impl From<StorageError> for Failure {
    fn from(e: StorageError) -> Self {
        match e {
            StorageError::Driver(d) => Failure::from(d),
            StorageError::Config(c) => Failure::from(c),
            e => Failure::Config(e.to_string()),
        }
    }
}

impl From<DriverError> for Failure {
    fn from(e: DriverError) -> Self {
        match e {
            DriverError::Config(m) => Failure::Config(m),
            DriverError::PositivityLoss { .. } => {
                eprintln!("{e}");
                Failure::Violations(1)
            }
            e => Failure::Solver(e.to_string()),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Run { config, out } => cmd_run(&config, out),
        Command::Resume {
            checkpoint,
            t_end,
            out,
        } => cmd_resume(&checkpoint, t_end, out),
        Command::Oracle { args } => cmd_oracle(&args),
        Command::EpsStudy { config } => cmd_eps_study(&config),
        Command::Check { records, config } => cmd_check(&records, config.as_deref()),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(EXIT_CONFIG)
        }
        Err(Failure::Violations(k)) => {
            eprintln!("{k} invariant violation(s)");
            ExitCode::from(EXIT_VIOLATION)
        }
        Err(Failure::Solver(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(EXIT_SOLVER)
        }
    }
}

fn cmd_run(config: &Path, out: Option<PathBuf>) -> Result<(), Failure> {
    let mut cfg = load_config(config)?;
    if let Some(dir) = out {
        cfg.output.dir = dir;
    }
    prepare_dir(&cfg.output.dir)?;
    let runner = Runner::new(cfg.sim.clone())?;
    drive(&cfg, runner)
}

fn cmd_resume(checkpoint: &Path, t_end: Option<f64>, out: Option<PathBuf>) -> Result<(), Failure> {
    let (mut cfg, runner) = read_checkpoint(checkpoint)?;
    if let Some(dir) = out {
        cfg.output.dir = dir;
    }
    let runner = match t_end {
        Some(t) => {
            let mut params = runner.params().clone();
            params.time.t_end = t;
            cfg.sim.time.t_end = t;
            let RunnerParts(state, book, records) = RunnerParts::of(&runner);
            Runner::from_parts(params, state, book, records)?
        }
        None => runner,
    };
    prepare_dir(&cfg.output.dir)?;
    drive(&cfg, runner)
}

struct RunnerParts(
    chemoflow::SimState,
    chemoflow::driver::Bookkeeping,
    Vec<chemoflow::DiagnosticsRecord>,
);

impl RunnerParts {
    fn of(r: &Runner) -> Self {
        Self(
            r.state().clone(),
            r.bookkeeping().clone(),
            r.records().to_vec(),
        )
    }
}

fn prepare_dir(dir: &Path) -> Result<(), Failure> {
    std::fs::create_dir_all(dir)
        .map_err(|e| Failure::Config(format!("output.dir {}: {e}", dir.display())))
}

fn cadence_index(t: f64, every: f64) -> u64 {
    (t / every + 1e-9).floor() as u64
}

fn drive(cfg: &RunConfig, mut runner: Runner) -> Result<(), Failure> {
    let out = &cfg.output;
    let exps = runner.params().diagnostics.lp_exponents.clone();
    let records_path = out.dir.join("records.csv");
    while !runner.is_finished() {
        let t0 = runner.state().t;
        if let Err(e) = runner.step_to_next_sample() {
            if let DriverError::PositivityLoss { state, .. } = &e {
                let path = out.dir.join("postmortem.chfl");
                if write_snapshot(state, &path).is_ok() {
                    eprintln!("postmortem snapshot written to {}", path.display());
                }
            }
            write_records(runner.records(), &exps, &records_path)?;
            return Err(e.into());
        }
        let t1 = runner.state().t;
        if cadence_index(t1, out.record_every) > cadence_index(t0, out.record_every) {
            write_records(runner.records(), &exps, &records_path)?;
        }
        let snap = cadence_index(t1, out.snapshot_every);
        if snap > cadence_index(t0, out.snapshot_every) {
            write_snapshot(
                runner.state(),
                &out.dir.join(format!("snapshot_{snap:05}.chfl")),
            )?;
        }
        if cadence_index(t1, out.checkpoint_every) > cadence_index(t0, out.checkpoint_every) {
            write_checkpoint(&runner, cfg, &out.dir.join("checkpoint.chfl"))?;
        }
    }
    write_checkpoint(&runner, cfg, &out.dir.join("checkpoint.chfl"))?;
    write_snapshot(runner.state(), &out.dir.join("final.chfl"))?;
    write_records(runner.records(), &exps, &records_path)?;
    let result = runner.into_result();
    report(&cfg.scenario, &result);
    if result.is_clean() {
        Ok(())
    } else {
        Err(Failure::Violations(result.violations.len()))
    }
}

fn report(scenario: &str, r: &RunResult) {
    let s = &r.final_state;
    println!(
        "scenario {scenario}: t = {}, {} steps, {:.2?}",
        s.t, r.steps, r.wall_time
    );
    println!(
        "min n = {:e}, max n = {:e}, sup c = {:e}, max |u| = {:e}",
        s.n.min(),
        s.n.max(),
        s.c.max_abs(),
        s.u.max_abs()
    );
    println!("max mass residual = {:e}", r.max_mass_residual);
    for v in &r.violations {
        println!("violation: {v}");
    }
}

fn cmd_oracle(args: &[String]) -> Result<(), Failure> {
    let (mut n0, mut c0, mut eps, mut t, mut kappa, mut mu) = (1.0, 1.0, 1e-3, 1.0, 1.0, 1.0);
    for a in args {
        let (k, v) = a
            .split_once('=')
            .ok_or_else(|| Failure::Config(format!("expected key=value, got {a:?}")))?;
        let v: f64 = v
            .parse()
            .map_err(|e| Failure::Config(format!("{k}: {e}")))?;
        match k {
            "n0" => n0 = v,
            "c0" => c0 = v,
            "eps" => eps = v,
            "t" => t = v,
            "kappa" => kappa = v,
            "mu" => mu = v,
            _ => return Err(Failure::Config(format!("unknown oracle key {k:?}"))),
        }
    }
    let (n, c) = homogeneous_oracle(n0, c0, eps, t, kappa, mu)?;
    println!("n = {n:.16e}");
    println!("c = {c:.16e}");
    Ok(())
}

fn cmd_eps_study(config: &Path) -> Result<(), Failure> {
    let cfg = load_config(config)?;
    let study = epsilon_study(&cfg.sim, &cfg.study.eps_list)?;
    println!("eps_j,eps_j+1,d_n,d_c,d_u");
    for (j, d) in study.distances.iter().enumerate() {
        println!(
            "{:e},{:e},{:.6e},{:.6e},{:.6e}",
            study.eps[j],
            study.eps[j + 1],
            d[0],
            d[1],
            d[2]
        );
    }
    let flags = study.strictly_decreasing();
    let unclean = study.results.iter().filter(|r| !r.is_clean()).count();
    for (name, ok) in ["n", "c", "u"].iter().zip(flags) {
        println!("{name} distances strictly decreasing: {ok}");
    }
    if flags.iter().all(|f| *f) && unclean == 0 {
        Ok(())
    } else {
        Err(Failure::Violations(
            flags.iter().filter(|f| !**f).count() + unclean,
        ))
    }
}

fn cmd_check(records: &Path, config: Option<&Path>) -> Result<(), Failure> {
    let (_, recs) = read_records(records)?;
    let ctx = match config {
        Some(path) => {
            let cfg = load_config(path)?;
            let state0 = init_state(&cfg.sim)?;
            Some(
                cfg.sim
                    .check_context(&state0)
                    .map_err(|e| Failure::Config(e.to_string()))?,
            )
        }
        None => None,
    };
    let violations = check_records(&recs, ctx.as_ref());
    println!("{} records checked", recs.len());
    for v in &violations {
        println!("violation: {v}");
    }
    if violations.is_empty() {
        Ok(())
    } else {
        Err(Failure::Violations(violations.len()))
    }
}
