//! The `analyze`, `integrate` and `legendre` pipelines.

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufWriter, Write as _};
use std::path::Path;

use serde::Serialize;
use srusk::constraints::{project, sample_points, ChainReport, ProjectionVars, SampleBox};
use srusk::integrator::{integrate, Projection};
use srusk::lagrangian::{hamiltonian, legendre_extended, legendre_restricted, regularity, NewtonOptions, Regularity};
use srusk::models::builtin;
use srusk::{run_constraint_algorithm, ConstraintChain, Error, LagrangianSystem, Termination, UnifiedPoint};

use crate::config::{ConfigError, RunConfig};

pub const EXIT_OK: u8 = 0;
pub const EXIT_ERROR: u8 = 1;
pub const EXIT_INCONSISTENT: u8 = 2;
pub const EXIT_MAX_LEVELS: u8 = 3;
pub const EXIT_PROJECTION: u8 = 4;
pub const EXIT_VERIFY: u8 = 5;

/// A run that stops early with an exit code and a message for stderr.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn new(code: u8, message: impl Into<String>) -> Self {
        Self { code, message: message.into() }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = if matches!(e, Error::ProjectionFailed(_)) { EXIT_PROJECTION } else { EXIT_ERROR };
        Failure::new(code, e.to_string())
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::new(EXIT_ERROR, e.0)
    }
}

pub type Run<T> = std::result::Result<T, Failure>;

/// Builds the model and checks the config against its dimension.
pub fn system(cfg: &RunConfig) -> Run<LagrangianSystem> {
    let sys = builtin(&cfg.model.name, &cfg.model.params)?;
    cfg.validate(sys.n())?;
    Ok(sys)
}

pub fn chain(cfg: &RunConfig, sys: &LagrangianSystem) -> Run<ConstraintChain> {
    let samples = sample_points(sys, &cfg.analysis.sample_box, cfg.analysis.sample_count, cfg.seed)?;
    Ok(run_constraint_algorithm(sys, &samples, cfg.chain_options())?)
}

pub fn termination_code(t: Option<Termination>) -> u8 {
    match t {
        Some(Termination::Inconsistent) => EXIT_INCONSISTENT,
        Some(Termination::MaxLevelsReached) => EXIT_MAX_LEVELS,
        _ => EXIT_OK,
    }
}

/// The configured initial point, optionally moved onto the final constraint set.
pub fn initial_point(cfg: &RunConfig, sys: &LagrangianSystem, chain: &ConstraintChain) -> Run<UnifiedPoint> {
    let s = &cfg.initial_state;
    let (q, v) = cfg.initial_qv(sys.n());
    let pt = match &s.p {
        Some(p) => UnifiedPoint::new(s.t0, &q, &v, p),
        None => UnifiedPoint::on_w1(sys, s.t0, &q, &v)?,
    };
    if !s.project_positions {
        return Ok(pt);
    }
    project(chain, &pt, ProjectionVars::PositionVelocityMomentum, cfg.integrator.projection_tol, 30)
        .map(|(p, _)| p)
        .map_err(|e| Failure::new(EXIT_PROJECTION, format!("projection of the initial state failed: {e}")))
}

pub fn fmt_vec(x: impl IntoIterator<Item = f64>) -> String {
    let parts: Vec<String> = x.into_iter().map(|c| c.to_string()).collect();
    format!("[{}]", parts.join(", "))
}

fn create(path: &Path) -> Run<BufWriter<File>> {
    let io = |e: std::io::Error| Failure::new(EXIT_ERROR, format!("{}: {e}", path.display()));
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io)?;
    }
    File::create(path).map(BufWriter::new).map_err(io)
}

/// JSON written by `analyze`.
#[derive(Serialize)]
struct AnalyzeReport {
    #[serde(flatten)]
    chain: ChainReport,
    seed: u64,
    sample_box: SampleBox,
}

fn summarize_chain(out: &mut String, chain: &ConstraintChain) {
    let r = chain.report();
    let _ = writeln!(out, "model: {} (n = {})", r.model, r.n);
    let _ = writeln!(out, "level sizes: {:?}", r.level_sizes);
    match (r.termination, r.gauge_dim) {
        (Some(t), Some(dim)) => {
            let _ = writeln!(out, "termination: {t} (dim {dim})");
        }
        (Some(t), None) => {
            let _ = writeln!(out, "termination: {t}");
        }
        (None, _) => {
            let _ = writeln!(out, "termination: none");
        }
    }
    let _ = writeln!(
        out,
        "kernel dim: {}, free coefficients: {}",
        r.kernel_dim,
        r.free_lambda.iter().max().copied().unwrap_or(0)
    );
    for s in &r.levels {
        let _ = writeln!(
            out,
            "level {}: {} constraint(s), max residual {:.3e}, mean residual {:.3e}, kernel drift {:.3e}",
            s.level, s.size, s.max_residual, s.mean_residual, s.kernel_drift
        );
    }
    for d in &r.diagnostics {
        let _ = writeln!(out, "diagnostic: {d}");
    }
}

pub fn analyze(cfg: &RunConfig, out: &mut String) -> Run<u8> {
    let sys = system(cfg)?;
    let chain = chain(cfg, &sys)?;
    summarize_chain(out, &chain);
    let report = AnalyzeReport { chain: chain.report(), seed: cfg.seed, sample_box: cfg.analysis.sample_box };
    let mut w = create(&cfg.outputs.report)?;
    serde_json::to_writer_pretty(&mut w, &report).map_err(|e| Failure::new(EXIT_ERROR, e.to_string()))?;
    writeln!(w).and_then(|_| w.flush()).map_err(|e| Failure::new(EXIT_ERROR, e.to_string()))?;
    let _ = writeln!(out, "report: {}", cfg.outputs.report.display());
    Ok(termination_code(chain.termination))
}

pub fn integrate_cmd(cfg: &RunConfig, out: &mut String) -> Run<u8> {
    let sys = system(cfg)?;
    let chain = chain(cfg, &sys)?;
    let code = termination_code(chain.termination);
    if code != EXIT_OK {
        let label = chain.termination.map(|t| t.label()).unwrap_or("none");
        return Err(Failure::new(code, format!("constraint analysis ended with {label}; nothing to integrate")));
    }
    let pt0 = initial_point(cfg, &sys, &chain)?;
    let opts = cfg.integrator_options();
    let tr = integrate(&sys, &chain, &pt0, &opts)?;
    let mut w = create(&cfg.outputs.trajectory)?;
    tr.write_csv(&mut w).and_then(|_| w.flush()).map_err(|e| Failure::new(EXIT_ERROR, e.to_string()))?;

    let end = tr.last().expect("trajectory has the initial point");
    let _ = writeln!(out, "model: {} (n = {}), levels {:?}", sys.name(), sys.n(), chain.level_sizes());
    let _ = writeln!(out, "points: {}", tr.len());
    let _ = writeln!(out, "final t = {}", end.t);
    let _ = writeln!(out, "final q = {}", fmt_vec(end.q.iter().copied()));
    let _ = writeln!(out, "final v = {}", fmt_vec(end.v.iter().copied()));
    let _ = writeln!(out, "max constraint residual: {:.3e}", tr.max_constraint_residual());
    let _ = writeln!(out, "max EL residual: {:.3e}", tr.max_el_residual());
    let _ = writeln!(out, "energy drift: {:.3e}", tr.energy_drift());
    match opts.projection {
        Projection::Off => {
            let _ = writeln!(out, "projection: off");
        }
        Projection::Newton { tol, max_iter } => {
            let _ = writeln!(out, "projection: newton (tol {tol:e}, max_iter {max_iter})");
        }
    }
    let _ = writeln!(out, "trajectory: {}", cfg.outputs.trajectory.display());
    Ok(EXIT_OK)
}

pub fn legendre(cfg: &RunConfig, out: &mut String) -> Run<u8> {
    let sys = system(cfg)?;
    let n = sys.n();
    let t = cfg.initial_state.t0;
    let (q, v) = cfg.initial_qv(n);
    let p = legendre_restricted(&sys, t, &q, &v)?;
    let (pt, _) = legendre_extended(&sys, t, &q, &v)?;
    let reg = regularity(&sys, t, &q, &v, cfg.analysis.rank_tol)?;
    let w = srusk::lagrangian::velocity_hessian(&sys, t, &q, &v)?;

    let _ = writeln!(out, "model: {} (n = {n})", sys.name());
    let _ = writeln!(out, "t = {t}");
    let _ = writeln!(out, "q = {}", fmt_vec(q.iter().copied()));
    let _ = writeln!(out, "v = {}", fmt_vec(v.iter().copied()));
    let _ = writeln!(out, "FL: p = {}", fmt_vec(p.iter().copied()));
    let _ = writeln!(out, "extended FL: p_t = L - p·v = {pt}");
    let _ = writeln!(out, "velocity Hessian W:");
    for i in 0..n {
        let _ = writeln!(out, "  {}", fmt_vec(w.row(i).iter().copied()));
    }
    let _ = writeln!(out, "singular values: {}", fmt_vec(reg.singular_values.iter().copied()));
    let class = match reg.classification {
        Regularity::Regular => "regular",
        Regularity::Singular => "singular",
    };
    let _ =
        writeln!(out, "classification: {class} (rank tol {:e}, kernel dim {})", reg.tolerance_used, reg.kernel_dim());
    for k in &reg.kernel_basis {
        let _ = writeln!(out, "kernel: {}", fmt_vec(k.iter().copied()));
    }
    if reg.classification == Regularity::Regular {
        let h = hamiltonian(&sys, t, &q, p.as_slice(), &v, NewtonOptions::default())?;
        let _ = writeln!(out, "H = {h}");
    }
    Ok(EXIT_OK)
}
