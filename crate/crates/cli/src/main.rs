//! `srusk`: constraint analysis, integration and invariant checks for the
//! bundled Lagrangian models.

mod commands;
mod config;
mod verify;

use std::collections::BTreeSet;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use clap::{Args, Parser, Subcommand};
use serde_json::Value;

use commands::{Failure, Run, EXIT_ERROR};
use config::{from_tree, parse_assignment, read_tree, set_path, RunConfig};

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Run the constraint algorithm and write the chain report.
    Analyze,
    /// Integrate from the initial state and write the trajectory CSV.
    Integrate,
    /// Run the invariant suite on the configured model.
    Verify,
    /// Print the Legendre maps and regularity at the initial state.
    Legendre,
}

/// Options shared by every subcommand.
#[derive(Args)]
struct Shared {
    /// TOML or JSON config file; built-in defaults when omitted.
    #[arg(global = true, long, short)]
    config: Option<PathBuf>,
    /// Run several configs concurrently; relative outputs of each go to a
    /// directory named after its file stem.
    #[arg(global = true, long, num_args = 1.., conflicts_with = "config", value_name = "CONFIG")]
    sweep: Vec<PathBuf>,
    /// Override any config key, e.g. `--set analysis.sample_box.q=[-2,2]`.
    #[arg(global = true, long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args, Default)]
#[command(next_help_heading = "Config overrides")]
struct Overrides {
    #[arg(global = true, long)]
    seed: Option<u64>,
    /// model.name
    #[arg(global = true, long)]
    model: Option<String>,
    #[arg(global = true, long)]
    dof: Option<usize>,
    #[arg(global = true, long, allow_hyphen_values = true)]
    omega: Option<f64>,
    #[arg(global = true, long, allow_hyphen_values = true)]
    omega_amplitude: Option<f64>,
    #[arg(global = true, long, allow_hyphen_values = true)]
    omega_frequency: Option<f64>,
    #[arg(global = true, long)]
    intervals: Option<usize>,
    #[arg(global = true, long)]
    period: Option<f64>,
    #[arg(global = true, long)]
    sigma: Option<String>,
    #[arg(global = true, long, value_delimiter = ',', allow_hyphen_values = true)]
    sigma_coeffs: Option<Vec<f64>>,
    #[arg(global = true, long)]
    g: Option<String>,
    #[arg(global = true, long, value_delimiter = ',', allow_hyphen_values = true)]
    g_coeffs: Option<Vec<f64>>,
    #[arg(global = true, long, num_args = 0..=1, default_missing_value = "true")]
    closed_chain: Option<bool>,
    #[arg(global = true, long, allow_hyphen_values = true)]
    force: Option<f64>,
    #[arg(global = true, long, allow_hyphen_values = true)]
    t0: Option<f64>,
    #[arg(global = true, long, value_delimiter = ',', allow_hyphen_values = true)]
    q: Option<Vec<f64>>,
    #[arg(global = true, long, value_delimiter = ',', allow_hyphen_values = true)]
    v: Option<Vec<f64>>,
    #[arg(global = true, long, value_delimiter = ',', allow_hyphen_values = true)]
    p: Option<Vec<f64>>,
    #[arg(global = true, long, num_args = 0..=1, default_missing_value = "true")]
    project_positions: Option<bool>,
    #[arg(global = true, long)]
    step: Option<f64>,
    #[arg(global = true, long, allow_hyphen_values = true)]
    t_end: Option<f64>,
    /// rk4 or euler
    #[arg(global = true, long)]
    scheme: Option<String>,
    /// newton or off
    #[arg(global = true, long)]
    projection: Option<String>,
    #[arg(global = true, long)]
    projection_tol: Option<f64>,
    #[arg(global = true, long)]
    projection_max_iter: Option<usize>,
    /// reject or zero
    #[arg(global = true, long)]
    gauge: Option<String>,
    #[arg(global = true, long)]
    max_levels: Option<usize>,
    #[arg(global = true, long)]
    rank_tol: Option<f64>,
    #[arg(global = true, long)]
    independence_tol: Option<f64>,
    #[arg(global = true, long)]
    sample_count: Option<usize>,
    #[arg(global = true, long)]
    trajectory: Option<PathBuf>,
    #[arg(global = true, long)]
    report: Option<PathBuf>,
}

impl Overrides {
    fn assignments(&self) -> Vec<(&'static str, Value)> {
        fn put<T: Into<Value> + Clone>(out: &mut Vec<(&'static str, Value)>, key: &'static str, x: &Option<T>) {
            if let Some(x) = x {
                out.push((key, x.clone().into()));
            }
        }
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.to_string_lossy().into_owned());
        let mut out = Vec::new();
        put(&mut out, "seed", &self.seed);
        put(&mut out, "model.name", &self.model);
        put(&mut out, "model.dof", &self.dof);
        put(&mut out, "model.omega", &self.omega);
        put(&mut out, "model.omega_amplitude", &self.omega_amplitude);
        put(&mut out, "model.omega_frequency", &self.omega_frequency);
        put(&mut out, "model.intervals", &self.intervals);
        put(&mut out, "model.period", &self.period);
        put(&mut out, "model.sigma", &self.sigma);
        put(&mut out, "model.sigma_coeffs", &self.sigma_coeffs);
        put(&mut out, "model.g", &self.g);
        put(&mut out, "model.g_coeffs", &self.g_coeffs);
        put(&mut out, "model.closed_chain", &self.closed_chain);
        put(&mut out, "model.force", &self.force);
        put(&mut out, "initial_state.t0", &self.t0);
        put(&mut out, "initial_state.q", &self.q);
        put(&mut out, "initial_state.v", &self.v);
        put(&mut out, "initial_state.p", &self.p);
        put(&mut out, "initial_state.project_positions", &self.project_positions);
        put(&mut out, "integrator.step", &self.step);
        put(&mut out, "integrator.t_end", &self.t_end);
        put(&mut out, "integrator.scheme", &self.scheme);
        put(&mut out, "integrator.projection", &self.projection);
        put(&mut out, "integrator.projection_tol", &self.projection_tol);
        put(&mut out, "integrator.projection_max_iter", &self.projection_max_iter);
        put(&mut out, "integrator.gauge", &self.gauge);
        put(&mut out, "analysis.max_levels", &self.max_levels);
        put(&mut out, "analysis.rank_tol", &self.rank_tol);
        put(&mut out, "analysis.independence_tol", &self.independence_tol);
        put(&mut out, "analysis.sample_count", &self.sample_count);
        put(&mut out, "outputs.trajectory", &path(&self.trajectory));
        put(&mut out, "outputs.report", &path(&self.report));
        out
    }
}

/// Top-level parser: the subcommand plus the shared options.
#[derive(Parser)]
#[command(name = "srusk", version, about = "Constraint analysis and integration of time-dependent Lagrangian systems")]
struct Top {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    shared: Shared,
}

struct Outcome {
    code: u8,
    stdout: String,
    stderr: String,
}

fn execute(command: Command, cfg: &RunConfig) -> Outcome {
    let mut stdout = String::new();
    let result: Run<u8> = match command {
        Command::Analyze => commands::analyze(cfg, &mut stdout),
        Command::Integrate => commands::integrate_cmd(cfg, &mut stdout),
        Command::Verify => verify::verify(cfg, &mut stdout),
        Command::Legendre => commands::legendre(cfg, &mut stdout),
    };
    match result {
        Ok(code) => Outcome { code, stdout, stderr: String::new() },
        Err(Failure { code, message }) => Outcome { code, stdout, stderr: format!("error: {message}\n") },
    }
}

fn load(path: Option<&Path>, shared: &Shared) -> Run<RunConfig> {
    let mut tree = match path {
        Some(p) => read_tree(p)?,
        None => Value::Object(Default::default()),
    };
    for (key, value) in shared.overrides.assignments() {
        set_path(&mut tree, key, value)?;
    }
    for s in &shared.set {
        let (key, value) = parse_assignment(s)?;
        set_path(&mut tree, &key, value)?;
    }
    Ok(from_tree(tree)?)
}

/// Worker count for `--sweep`: `SRUSK_THREADS` if set, else the machine's
/// parallelism, never more than the number of jobs.
fn sweep_threads(jobs: usize) -> Run<usize> {
    let cap = match std::env::var("SRUSK_THREADS") {
        Ok(s) => match s.trim().parse::<usize>() {
            Ok(k) if k > 0 => k,
            _ => return Err(Failure::new(EXIT_ERROR, format!("SRUSK_THREADS must be a positive integer, got `{s}`"))),
        },
        Err(_) => std::thread::available_parallelism().map(|k| k.get()).unwrap_or(1),
    };
    Ok(cap.min(jobs).max(1))
}

fn sweep(command: Command, shared: &Shared) -> Run<Vec<(PathBuf, Outcome)>> {
    let mut stems = BTreeSet::new();
    let mut jobs = Vec::new();
    for path in &shared.sweep {
        let stem = path
            .file_stem()
            .map(PathBuf::from)
            .ok_or_else(|| Failure::new(EXIT_ERROR, format!("{}: no file name", path.display())))?;
        if !stems.insert(stem.clone()) {
            return Err(Failure::new(EXIT_ERROR, format!("sweep configs share the file stem `{}`", stem.display())));
        }
        let mut cfg = load(Some(path), shared)?;
        for out in [&mut cfg.outputs.trajectory, &mut cfg.outputs.report] {
            if out.is_relative() {
                *out = stem.join(&*out);
            }
        }
        jobs.push((path.clone(), cfg));
    }
    let threads = sweep_threads(jobs.len())?;
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Outcome>>> = Mutex::new((0..jobs.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..threads {
            s.spawn(|| loop {
                let k = next.fetch_add(1, Ordering::Relaxed);
                let Some((_, cfg)) = jobs.get(k) else { break };
                let outcome = execute(command, cfg);
                results.lock().expect("sweep results")[k] = Some(outcome);
            });
        }
    });
    let results = results.into_inner().expect("sweep results");
    Ok(jobs.into_iter().map(|(p, _)| p).zip(results.into_iter().map(|o| o.expect("every job ran"))).collect())
}

fn main() -> ExitCode {
    let top = Top::parse();
    let outcomes = if top.shared.sweep.is_empty() {
        load(top.shared.config.as_deref(), &top.shared).map(|cfg| vec![(None, execute(top.command, &cfg))])
    } else {
        sweep(top.command, &top.shared).map(|v| v.into_iter().map(|(p, o)| (Some(p), o)).collect())
    };
    let outcomes = match outcomes {
        Ok(o) => o,
        Err(f) => {
            eprintln!("error: {}", f.message);
            return ExitCode::from(f.code);
        }
    };
    let mut code = 0;
    let (mut out, mut err) = (std::io::stdout().lock(), std::io::stderr().lock());
    for (path, o) in &outcomes {
        if let Some(p) = path {
            let _ = writeln!(out, "== {} (exit {}) ==", p.display(), o.code);
            if !o.stderr.is_empty() {
                let _ = write!(err, "{}: ", p.display());
            }
        }
        let _ = out.write_all(o.stdout.as_bytes());
        let _ = err.write_all(o.stderr.as_bytes());
        if code == 0 {
            code = o.code;
        }
    }
    ExitCode::from(code)
}
