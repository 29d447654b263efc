//! Command-line pipelines.
//!
//! Each pipeline computes the full set of output files in memory and only
//! then writes them, each through a temporary file and a rename, so a failed
//! run leaves no partial CSVs behind.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::error::{invalid, Error, Result};
use crate::linalg::Vector;
use crate::problem::{builtin, InitialPair, SlqProblem};
use crate::problem_file::load_problem;
use crate::riccati::solve_gre;
use crate::simulate::{
    control_norm, estimate_cost, simulate_ensemble, terminal_moment,
    counterexample_open_loop, ControlSpec, MonteCarloConfig, MonteCarloEstimate,
};
use crate::strategy::{
    closed_loop_report, diagnose_ladder, extract_limit, geometric_ladder, ladder_summary_csv,
    run_ladder, OpenLoopVerdict, PerturbedSolution, SolvabilityReport,
};
use crate::verify;

pub const DEFAULT_SEED: u64 = 20190;

#[derive(Debug, Parser)]
#[command(name = "slq", version, about = "Stochastic linear-quadratic control: Riccati, ε-ladder and weak closed-loop strategies")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Solve the ε-ladder and extract the weak closed-loop strategy.
    Solve(RunArgs),
    /// Closed-loop and open-loop solvability verdicts.
    Diagnose(RunArgs),
    /// Monte Carlo estimates for one control.
    Simulate(RunArgs),
    /// Run the acceptance checks for a built-in example.
    VerifyExample {
        /// example-1.1, example-5.1 or standard-scalar
        name: String,
    },
}

#[derive(Debug, Clone, Default, Args)]
pub struct RunArgs {
    /// Built-in problem name.
    #[arg(long, conflicts_with = "problem")]
    pub builtin: Option<String>,
    /// Problem definition file.
    #[arg(long)]
    pub problem: Option<PathBuf>,
    /// `key = value` file with defaults for the flags below.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Initial time.
    #[arg(long)]
    pub t: Option<f64>,
    /// Initial state, comma separated.
    #[arg(long)]
    pub x: Option<String>,
    #[arg(long)]
    pub eps_max: Option<f64>,
    #[arg(long)]
    pub eps_min: Option<f64>,
    #[arg(long)]
    pub ladder_factor: Option<f64>,
    /// Riccati and adjoint steps on [0, T].
    #[arg(long)]
    pub steps: Option<usize>,
    /// Euler-Maruyama steps on [t, T].
    #[arg(long)]
    pub sim_steps: Option<usize>,
    /// Truncation gap of the weak closed-loop strategy.
    #[arg(long)]
    pub delta: Option<f64>,
    /// Relative tolerance for declaring the ladder converged.
    #[arg(long)]
    pub tol: Option<f64>,
    #[arg(long)]
    pub paths: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long)]
    pub threads: Option<usize>,
    /// For `simulate`: zero, limit, regular, eps:<ε> or counterexample.
    #[arg(long)]
    pub control: Option<String>,
    /// For `simulate`: also write every path node to paths.csv.
    #[arg(long)]
    pub dump_paths: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Which control `simulate` runs.
#[derive(Debug, Clone, PartialEq)]
pub enum ControlChoice {
    Zero,
    /// The extracted weak closed-loop strategy, held past `T − δ`.
    Limit,
    /// The feedback of a regular generalized Riccati solution.
    Regular,
    Perturbed(f64),
    /// The open-loop control steering the homogeneous example to zero.
    Counterexample,
}

impl std::str::FromStr for ControlChoice {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zero" => Ok(ControlChoice::Zero),
            "limit" => Ok(ControlChoice::Limit),
            "regular" => Ok(ControlChoice::Regular),
            "counterexample" => Ok(ControlChoice::Counterexample),
            other => match other.strip_prefix("eps:").map(str::parse::<f64>) {
                Some(Ok(e)) if e > 0.0 => Ok(ControlChoice::Perturbed(e)),
                _ => Err(invalid(format!("unknown control '{other}'"))),
            },
        }
    }
}

/// Fully resolved run parameters.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub problem_label: String,
    pub problem: SlqProblem,
    pub initial: InitialPair,
    pub eps_max: f64,
    pub eps_min: f64,
    pub ladder_factor: f64,
    pub steps: usize,
    pub delta: f64,
    pub tol: f64,
    pub mc: MonteCarloConfig,
    pub threads: Option<usize>,
    pub control: ControlChoice,
    pub out_dir: PathBuf,
}

impl RunConfig {
    pub fn ladder(&self) -> Result<Vec<f64>> {
        geometric_ladder(self.eps_max, self.eps_min, self.ladder_factor)
    }

    /// Defaults for a built-in problem, as used by the acceptance checks.
    pub fn for_builtin(name: &str) -> Result<Self> {
        RunConfig::resolve(&RunArgs {
            builtin: Some(name.to_string()),
            ..RunArgs::default()
        })
    }

    /// Defaults, then the config file, then the flags.
    pub fn resolve(args: &RunArgs) -> Result<Self> {
        let mut merged = args.clone();
        if let Some(path) = &args.config {
            apply_config_file(&mut merged, path)?;
        }
        let (label, problem, file_initial) = match (&merged.builtin, &merged.problem) {
            (Some(name), None) => {
                let (p, ip) = builtin(name)?;
                (name.clone(), p, Some(ip))
            }
            (None, Some(path)) => {
                let file = load_problem(path)?;
                (path.display().to_string(), file.problem, file.initial)
            }
            (Some(_), Some(_)) => return Err(invalid("give either --builtin or --problem, not both")),
            (None, None) => return Err(invalid("one of --builtin or --problem is required")),
        };
        let default_initial = file_initial.unwrap_or_else(|| InitialPair::new(0.0, Vector::zeros(problem.n)));
        let t = merged.t.unwrap_or(default_initial.t);
        let x = match &merged.x {
            Some(text) => {
                let values = text
                    .split(',')
                    .map(|v| v.trim().parse::<f64>().map_err(|_| invalid(format!("bad --x entry '{v}'"))))
                    .collect::<Result<Vec<f64>>>()?;
                Vector::from_vec(values)
            }
            None => default_initial.x.clone(),
        };
        if x.len() != problem.n {
            return Err(invalid(format!("--x has {} entries, the state has {}", x.len(), problem.n)));
        }
        if !(t >= 0.0 && t < problem.horizon) {
            return Err(invalid(format!("--t must lie in [0, {})", problem.horizon)));
        }
        let horizon = problem.horizon;
        let delta = merged.delta.unwrap_or(1e-2 * horizon);
        if !(delta > 0.0 && delta < horizon) {
            return Err(invalid(format!("--delta must lie in (0, {horizon})")));
        }
        let factor = merged.ladder_factor.unwrap_or(0.5);
        if !(factor > 0.0 && factor < 1.0) {
            return Err(invalid("--ladder-factor must lie in (0, 1)"));
        }
        let control = match &merged.control {
            Some(c) => c.parse()?,
            None => ControlChoice::Limit,
        };
        let mut mc = MonteCarloConfig::new(
            merged.paths.unwrap_or(10_000),
            merged.sim_steps.unwrap_or(1024),
            merged.seed.unwrap_or(DEFAULT_SEED),
        )
        .with_truncation(delta);
        mc.record_paths = merged.dump_paths;
        Ok(RunConfig {
            problem_label: label,
            problem,
            initial: InitialPair::new(t, x),
            eps_max: merged.eps_max.unwrap_or(1.0),
            eps_min: merged.eps_min.unwrap_or(2f64.powi(-10)),
            ladder_factor: factor,
            steps: merged.steps.unwrap_or(2048),
            delta,
            tol: merged.tol.unwrap_or(1e-3),
            mc,
            threads: merged.threads,
            control,
            out_dir: merged.out.unwrap_or_else(|| PathBuf::from(".")),
        })
    }
}

/// Fills unset flags from a `key = value` file. Keys are flag names with
/// dashes or underscores; `#` starts a comment.
fn apply_config_file(args: &mut RunArgs, path: &Path) -> Result<()> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let content = raw.split('#').next().unwrap().trim();
        if content.is_empty() {
            continue;
        }
        let (key, value) = content.split_once('=').ok_or_else(|| Error::Parse {
            line,
            message: format!("expected 'key = value', got '{content}'"),
        })?;
        let key = key.trim().replace('_', "-");
        let value = value.trim().to_string();
        let bad = |what: &str| Error::Parse {
            line,
            message: format!("bad {what} '{value}'"),
        };
        let real = || value.parse::<f64>().map_err(|_| bad("number"));
        let int = || value.parse::<usize>().map_err(|_| bad("count"));
        macro_rules! fill {
            ($field:ident, $v:expr) => {
                if args.$field.is_none() {
                    args.$field = Some($v);
                }
            };
        }
        match key.as_str() {
            "builtin" => {
                if args.builtin.is_none() && args.problem.is_none() {
                    args.builtin = Some(value.clone());
                }
            }
            "problem" => {
                if args.builtin.is_none() && args.problem.is_none() {
                    let p = PathBuf::from(&value);
                    let base = path.parent().unwrap_or(Path::new("."));
                    args.problem = Some(if p.is_relative() { base.join(p) } else { p });
                }
            }
            "t" => fill!(t, real()?),
            "x" => fill!(x, value.clone()),
            "eps-max" => fill!(eps_max, real()?),
            "eps-min" => fill!(eps_min, real()?),
            "ladder-factor" => fill!(ladder_factor, real()?),
            "steps" => fill!(steps, int()?),
            "sim-steps" => fill!(sim_steps, int()?),
            "delta" => fill!(delta, real()?),
            "tol" => fill!(tol, real()?),
            "paths" => fill!(paths, int()?),
            "seed" => fill!(seed, value.parse::<u64>().map_err(|_| bad("seed"))?),
            "threads" => fill!(threads, int()?),
            "control" => fill!(control, value.clone()),
            "out" => fill!(out, PathBuf::from(&value)),
            "dump-paths" => args.dump_paths |= value == "true",
            other => {
                return Err(Error::Parse {
                    line,
                    message: format!("unknown key '{other}'"),
                })
            }
        }
    }
    Ok(())
}

/// Files to write plus the exit status.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub files: Vec<(String, String)>,
    pub status: RunStatus,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunStatus {
    Success,
    Inconclusive,
}

impl RunOutput {
    pub fn file(&self, name: &str) -> Option<&str> {
        self.files.iter().find(|(n, _)| n == name).map(|(_, c)| c.as_str())
    }
}

fn header(cfg: &RunConfig) -> String {
    let x: Vec<String> = cfg.initial.x.iter().map(|v| v.to_string()).collect();
    format!(
        "problem: {}\ninitial: t = {}, x = {}\n",
        cfg.problem_label,
        cfg.initial.t,
        x.join(",")
    )
}

fn regularity_line(r: &crate::riccati::RegularityReport) -> String {
    match r.blow_up {
        Some(s) => format!("regularity: generalized Riccati equation blows up at s = {s}\n"),
        None => format!(
            "regularity: min eigenvalue {:.6e}, theta-hat L2 norm {:.6e}, range inclusion {}{}\n",
            r.min_eigenvalue,
            r.theta_hat_l2,
            if r.range_ok { "holds" } else { "fails" },
            r.first_range_violation
                .map_or(String::new(), |s| format!(" (first at s = {s})"))
        ),
    }
}

/// Ladder solutions plus the Monte Carlo solvability evidence, shared by
/// `solve` and `diagnose`.
fn run_ladder_with_mc(cfg: &RunConfig) -> Result<(Vec<PerturbedSolution>, SolvabilityReport)> {
    let closed_loop = closed_loop_report(&cfg.problem, cfg.steps)?;
    let sols = run_ladder(&cfg.problem, &cfg.ladder()?, cfg.steps)?;
    let mut mc = cfg.mc.clone();
    mc.truncation_delta = 0.0;
    mc.record_paths = false;
    let report = diagnose_ladder(&cfg.problem, &cfg.initial, closed_loop, &sols, &mc)?;
    Ok((sols, report))
}

/// `solve`: Riccati per rung, strategy, ladder summary and report.
pub fn solve_outputs(cfg: &RunConfig) -> Result<RunOutput> {
    let (sols, run) = run_ladder_with_mc(cfg)?;
    let regular = run.closed_loop_solvable();
    let limit = extract_limit(&sols, cfg.delta, cfg.tol)?;

    let mut files = Vec::new();
    for (k, sol) in sols.iter().enumerate() {
        files.push((format!("riccati_eps_{k}.csv"), sol.p.to_csv()));
    }
    let strategy_csv = if regular {
        PerturbedSolution::assemble(&cfg.problem, solve_gre(&cfg.problem, cfg.steps)?)?.to_csv()
    } else {
        limit.to_csv()
    };
    files.push(("strategy.csv".into(), strategy_csv));
    files.push((
        "ladder_summary.csv".into(),
        ladder_summary_csv(&limit, &run.ladder, Some(&run.u_norms)),
    ));

    let last = limit.cauchy_evidence.last().unwrap();
    let mut report = header(cfg);
    report.push_str(&run.verdict_lines());
    report.push_str(&regularity_line(&run.closed_loop));
    report.push_str(&format!(
        "ladder: {} rungs from {} to {}, factor {}, steps {}\n",
        run.ladder.len(),
        run.ladder[0],
        run.ladder.last().unwrap(),
        cfg.ladder_factor,
        cfg.steps
    ));
    report.push_str(&format!(
        "open-loop evidence: {} paths, {} of {} rungs resolved by the simulation step, u-distance shrink factor per halving {:.4}\n",
        cfg.mc.paths,
        run.resolved_rungs,
        run.ladder.len(),
        run.convergence_ratio
    ));
    if regular {
        report.push_str("strategy: regular feedback of the generalized Riccati equation on [t, T]\n");
    } else {
        report.push_str(&format!(
            "strategy: weak closed-loop limit on [0, {}], {} (last theta distance {:.6e}, last v distance {:.6e}, tol {})\n",
            cfg.problem.horizon - cfg.delta,
            if limit.converged() { "converged" } else { "inconclusive" },
            last.theta_distance,
            last.v_distance,
            cfg.tol
        ));
    }
    files.push(("report.txt".into(), report));
    let status = if regular || limit.converged() {
        RunStatus::Success
    } else {
        RunStatus::Inconclusive
    };
    Ok(RunOutput { files, status })
}

/// `diagnose`: solvability verdicts and ladder norms.
pub fn diagnose_outputs(cfg: &RunConfig) -> Result<RunOutput> {
    let (_, run) = run_ladder_with_mc(cfg)?;
    let mut report = header(cfg);
    report.push_str(&run.verdict_lines());
    report.push_str(&regularity_line(&run.closed_loop));
    report.push_str(&format!(
        "open-loop evidence: {} paths, {} of {} rungs resolved by the simulation step, u-distance shrink factor per halving {:.4}\n",
        cfg.mc.paths,
        run.resolved_rungs,
        run.ladder.len(),
        run.convergence_ratio
    ));
    let status = if run.open_loop_verdict == OpenLoopVerdict::Inconclusive {
        RunStatus::Inconclusive
    } else {
        RunStatus::Success
    };
    Ok(RunOutput {
        files: vec![("solvability.csv".into(), run.to_csv()), ("report.txt".into(), report)],
        status,
    })
}

/// `simulate`: cost, control norm and terminal moment for one control.
pub fn simulate_outputs(cfg: &RunConfig) -> Result<RunOutput> {
    let p = &cfg.problem;
    let mut mc = cfg.mc.clone();
    let control = match &cfg.control {
        ControlChoice::Zero => ControlSpec::Zero,
        ControlChoice::Limit => {
            let sols = run_ladder(p, &cfg.ladder()?, cfg.steps)?;
            extract_limit(&sols, cfg.delta, cfg.tol)?.control()
        }
        ControlChoice::Regular => {
            let sol = solve_gre(p, cfg.steps)?;
            mc.truncation_delta = 0.0;
            PerturbedSolution::assemble(p, sol)?.control()
        }
        ControlChoice::Perturbed(eps) => {
            mc.truncation_delta = 0.0;
            PerturbedSolution::solve(p, *eps, cfg.steps)?.control()
        }
        ControlChoice::Counterexample => {
            if p.n != 1 || p.m != 1 || p.horizon != 1.0 {
                return Err(Error::WrongClass("the counterexample control needs a scalar problem on [0, 1]".into()));
            }
            counterexample_open_loop(&cfg.initial, cfg.steps)?
        }
    };
    let ens = simulate_ensemble(p, &cfg.initial, &control, &mc)?;
    let mut csv = format!("{}\n", MonteCarloEstimate::CSV_HEADER);
    for e in [
        estimate_cost(p, &cfg.initial, &ens)?,
        control_norm(&ens),
        terminal_moment(&ens),
    ] {
        csv.push_str(&e.csv_row());
        csv.push('\n');
    }
    let mut files = vec![("simulation.csv".to_string(), csv)];
    if mc.record_paths {
        files.push(("paths.csv".into(), ens.to_path_csv()));
    }
    Ok(RunOutput {
        files,
        status: RunStatus::Success,
    })
}

/// Writes every file through a temporary name and a rename.
pub fn write_outputs(dir: &Path, out: &RunOutput) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io(format!("{}: {e}", dir.display())))?;
    let mut staged = Vec::with_capacity(out.files.len());
    for (name, content) in &out.files {
        let tmp = dir.join(format!(".{name}.tmp"));
        if let Err(e) = std::fs::write(&tmp, content) {
            for (t, _) in &staged {
                let _ = std::fs::remove_file(t);
            }
            let _ = std::fs::remove_file(&tmp);
            return Err(Error::Io(format!("{}: {e}", tmp.display())));
        }
        staged.push((tmp, dir.join(name)));
    }
    for (tmp, target) in staged {
        std::fs::rename(&tmp, &target).map_err(|e| Error::Io(format!("{}: {e}", target.display())))?;
    }
    Ok(())
}

fn with_threads<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match threads {
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| invalid(format!("thread pool: {e}")))?;
            Ok(pool.install(f))
        }
        None => Ok(f()),
    }
}

fn run_pipeline(args: &RunArgs, pipeline: fn(&RunConfig) -> Result<RunOutput>) -> Result<RunStatus> {
    let cfg = RunConfig::resolve(args)?;
    let out = with_threads(cfg.threads, || pipeline(&cfg))??;
    write_outputs(&cfg.out_dir, &out)?;
    if let Some(report) = out.file("report.txt") {
        print!("{report}");
    }
    if let Some(sim) = out.file("simulation.csv") {
        print!("{sim}");
    }
    Ok(out.status)
}

/// Runs a parsed command line; 0 success, 2 inconclusive, 1 error.
pub fn run(cli: Cli) -> ExitCode {
    let result = match &cli.command {
        Command::Solve(args) => run_pipeline(args, solve_outputs),
        Command::Diagnose(args) => run_pipeline(args, diagnose_outputs),
        Command::Simulate(args) => run_pipeline(args, simulate_outputs),
        Command::VerifyExample { name } => verify::run_example(name).map(|outcomes| {
            for o in &outcomes {
                println!("{o}");
            }
            if outcomes.iter().all(|o| o.passed) {
                RunStatus::Success
            } else {
                RunStatus::Inconclusive
            }
        }),
    };
    match result {
        Ok(RunStatus::Success) => ExitCode::SUCCESS,
        Ok(RunStatus::Inconclusive) => match cli.command {
            // A failed verification is a failure, not an open question.
            Command::VerifyExample { .. } => ExitCode::from(1),
            _ => ExitCode::from(2),
        },
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
