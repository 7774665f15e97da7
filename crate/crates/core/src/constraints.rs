//! Constraint algorithm by iterated tangency.
//!
//! Starting from the primary constraints `φᵢ = pᵢ − ∂L/∂vⁱ`, every constraint
//! `φ` must satisfy `dφ(X₀) = 0` along the dynamical vector field. Writing
//! `X₀ = Y + Gⁱ∂_{vⁱ}` with `Y = ∂_t + vⁱ∂_{qⁱ} + (∂L/∂qᵢ)∂_{pᵢ}`, the
//! stacked conditions read `c + D·G = 0` with `c_r = Y(φ_r)` and
//! `D_r = ∂φ_r/∂v`. Left null directions `u` of `D` produce the candidate
//! constraints `u·c`, which are kept when their gradients are independent of
//! the constraints already present. When no new constraint appears the
//! remaining free coefficients `λ` along `ker W` are counted.
//!
//! Null directions are computed once at a base point and frozen into the
//! constraint, so every constraint is a smooth function that can itself be
//! differentiated on the scalar tower.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{dir_deriv, Field, SmoothScalarField};
use crate::error::{Error, Result};
use crate::lagrangian::{LagrangianSystem, DEFAULT_RANK_TOL};
use crate::linalg::{
    left_null_space, null_space, orthonormal_basis, project_out, sign_normalized, subspace_angle, SortedSvd,
};
use crate::scalar::{seed, Scalar, MAX_DEPTH};
use crate::unified::{vector_field_unchecked, UnifiedPoint, VectorFieldSolution};

/// Absolute tolerance for a point to count as lying on a constraint set.
pub const ON_MANIFOLD_TOL: f64 = 1e-8;

/// Deepest chain whose extension can still be differentiated on the tower.
pub const MAX_LEVELS: usize = MAX_DEPTH - 2;

pub type ConstraintId = usize;

/// Where a constraint function came from.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub enum Provenance {
    /// `pᵢ − ∂L/∂vⁱ`.
    Primary(usize),
    /// `Σ_r u_r Y(φ_r)` over the parent constraints.
    Tangency { parents: Vec<ConstraintId>, null_direction: Vec<f64> },
    /// Closed-form reference supplied by a model.
    Analytic(String),
}

/// A scalar constraint on `(t, q, v, p)`.
#[derive(Clone, Debug)]
pub struct ConstraintFunction {
    pub id: ConstraintId,
    pub level: usize,
    pub provenance: Provenance,
    /// Arity `3n + 1`.
    pub evaluator: SmoothScalarField,
}

impl ConstraintFunction {
    pub fn value(&self, pt: &UnifiedPoint) -> Result<f64> {
        crate::autodiff::value(&self.evaluator, &pt.coords())
    }

    pub fn gradient(&self, pt: &UnifiedPoint) -> Result<DVector<f64>> {
        crate::autodiff::gradient(&self.evaluator, &pt.coords())
    }

    pub fn directional(&self, pt: &UnifiedPoint, dir: &[f64]) -> Result<f64> {
        crate::autodiff::directional_derivative(&self.evaluator, &pt.coords(), dir)
    }
}

/// Provenance records of a chain, shared by the evaluators built from it.
#[derive(Debug)]
struct Graph {
    sys: LagrangianSystem,
    nodes: Vec<Provenance>,
}

impl Graph {
    fn depth(&self, id: ConstraintId) -> usize {
        match &self.nodes[id] {
            Provenance::Primary(_) => 1,
            Provenance::Tangency { parents, .. } => 1 + parents.iter().map(|&p| self.depth(p)).max().unwrap_or(1),
            Provenance::Analytic(_) => 0,
        }
    }
}

struct NodeField {
    graph: Arc<Graph>,
    id: ConstraintId,
}

impl Field for NodeField {
    fn arity(&self) -> usize {
        3 * self.graph.sys.n() + 1
    }

    fn eval<S: Scalar>(&self, x: &[S]) -> S {
        eval_node(&self.graph, self.id, x)
    }
}

fn eval_node<S: Scalar>(g: &Graph, id: ConstraintId, x: &[S]) -> S {
    let n = g.sys.n();
    match &g.nodes[id] {
        Provenance::Primary(i) => x[1 + 2 * n + i] - g.sys.dl_dv(&x[..2 * n + 1], *i),
        Provenance::Tangency { parents, null_direction } => eval_tangency(g, parents, null_direction, x),
        Provenance::Analytic(_) => unreachable!("analytic constraints are not part of a chain graph"),
    }
}

/// `Σ w_r φ_r(x)`, with all primary terms folded into one directional
/// derivative of `L`.
fn eval_combination<S: Scalar>(g: &Graph, ids: &[ConstraintId], w: &[f64], x: &[S]) -> S {
    let n = g.sys.n();
    let mut acc = S::zero();
    let mut vdir = vec![S::zero(); 2 * n + 1];
    let mut any_primary = false;
    for (&id, &wr) in ids.iter().zip(w) {
        if wr == 0.0 {
            continue;
        }
        match &g.nodes[id] {
            Provenance::Primary(i) => {
                any_primary = true;
                vdir[1 + n + i] += S::from_f64(wr);
                acc += S::from_f64(wr) * x[1 + 2 * n + i];
            }
            _ => acc += S::from_f64(wr) * eval_node(g, id, x),
        }
    }
    if any_primary {
        acc -= g.sys.dl(&x[..2 * n + 1], &vdir);
    }
    acc
}

/// `Σ w_r Y(φ_r)` with `Y = ∂_t + vⁱ∂_{qⁱ} + (∂L/∂qⁱ)∂_{pᵢ}`.
///
/// Only primary constraints depend on `p`, and linearly, so the `∂_p` part
/// of `Y` reduces to one derivative of `L` along the primary weights.
fn eval_tangency<S: Scalar>(g: &Graph, parents: &[ConstraintId], w: &[f64], x: &[S]) -> S {
    let n = g.sys.n();
    let mut dir = vec![S::zero(); x.len()];
    dir[0] = S::one();
    dir[1..1 + n].copy_from_slice(&x[1 + n..1 + 2 * n]);
    let xu = seed(x, &dir);
    let mut acc = S::split_up(eval_combination::<S::Up>(g, parents, w, &xu)).1;
    let mut qdir = vec![S::zero(); 2 * n + 1];
    let mut any_primary = false;
    for (&id, &wr) in parents.iter().zip(w) {
        if let Provenance::Primary(i) = g.nodes[id] {
            if wr != 0.0 {
                any_primary = true;
                qdir[1 + i] += S::from_f64(wr);
            }
        }
    }
    if any_primary {
        acc += g.sys.dl(&x[..2 * n + 1], &qdir);
    }
    acc
}

/// How the algorithm ended.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Termination {
    /// Every coefficient along `ker W` is fixed on the final constraint set.
    AllDetermined,
    /// No new constraints, but `dim` coefficients stay free.
    GaugeFreedom { dim: usize },
    /// A constraint has no zero set in the sampling box.
    Inconsistent,
    /// The level cap was hit while new constraints were still appearing.
    MaxLevelsReached,
}

impl Termination {
    pub fn label(&self) -> &'static str {
        match self {
            Termination::AllDetermined => "AllDetermined",
            Termination::GaugeFreedom { .. } => "GaugeFreedom",
            Termination::Inconsistent => "Inconsistent",
            Termination::MaxLevelsReached => "MaxLevelsReached",
        }
    }
}

/// Axis-aligned box the sample points are drawn from.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleBox {
    pub t: (f64, f64),
    pub q: (f64, f64),
    pub v: (f64, f64),
}

impl Default for SampleBox {
    fn default() -> Self {
        Self { t: (0.0, 1.0), q: (-1.0, 1.0), v: (-1.0, 1.0) }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ChainOptions {
    pub max_levels: usize,
    pub rank_tol: f64,
    /// Relative residual a candidate's gradient must keep after projecting
    /// out the existing constraint gradients.
    pub independence_tol: f64,
    pub projection_tol: f64,
    pub projection_max_iter: usize,
}

impl Default for ChainOptions {
    fn default() -> Self {
        Self {
            max_levels: MAX_LEVELS,
            rank_tol: DEFAULT_RANK_TOL,
            independence_tol: 1e-6,
            projection_tol: 1e-12,
            projection_max_iter: 30,
        }
    }
}

/// Residual statistics of one level over the sample points.
#[derive(Clone, Debug, Serialize)]
pub struct LevelStats {
    pub level: usize,
    pub size: usize,
    pub max_residual: f64,
    pub mean_residual: f64,
    /// Largest angle between the frozen left null space and the one at any
    /// sample point, for the directions that produced this level.
    pub kernel_drift: f64,
}

/// The leveled constraint functions together with the decisions that built
/// them.
#[derive(Clone, Debug)]
pub struct ConstraintChain {
    sys: LagrangianSystem,
    graph: Arc<Graph>,
    pub levels: Vec<Vec<ConstraintFunction>>,
    pub termination: Option<Termination>,
    pub sample_points: Vec<UnifiedPoint>,
    pub options: ChainOptions,
    /// Dimension of `ker W` at the base point.
    pub kernel_dim: usize,
    /// Free coefficient count at each sample point when the algorithm
    /// stopped.
    pub free_lambda: Vec<usize>,
    pub stats: Vec<LevelStats>,
    pub diagnostics: Vec<String>,
}

impl ConstraintChain {
    /// The chain holding only the primary constraints.
    pub fn primary(sys: &LagrangianSystem, options: ChainOptions) -> Self {
        let n = sys.n();
        let graph = Arc::new(Graph { sys: sys.clone(), nodes: (0..n).map(Provenance::Primary).collect() });
        let level = (0..n)
            .map(|i| ConstraintFunction {
                id: i,
                level: 1,
                provenance: Provenance::Primary(i),
                evaluator: SmoothScalarField::new(NodeField { graph: graph.clone(), id: i }),
            })
            .collect();
        Self {
            sys: sys.clone(),
            graph,
            levels: vec![level],
            termination: None,
            sample_points: Vec::new(),
            options,
            kernel_dim: 0,
            free_lambda: Vec::new(),
            stats: Vec::new(),
            diagnostics: Vec::new(),
        }
    }

    /// The chain cut back to its first `levels` levels, undecided.
    pub fn truncated(&self, levels: usize) -> ConstraintChain {
        let mut c = self.clone();
        c.levels.truncate(levels.max(1));
        c.stats.truncate(levels.max(1));
        c.termination = None;
        c.free_lambda.clear();
        c
    }

    pub fn system(&self) -> &LagrangianSystem {
        &self.sys
    }

    pub fn level_sizes(&self) -> Vec<usize> {
        self.levels.iter().map(Vec::len).collect()
    }

    pub fn constraints(&self) -> impl Iterator<Item = &ConstraintFunction> {
        self.levels.iter().flatten()
    }

    pub fn len(&self) -> usize {
        self.levels.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn values(&self, pt: &UnifiedPoint) -> Result<DVector<f64>> {
        let x = pt.coords();
        let vals: Vec<f64> = self.constraints().map(|c| c.evaluator.eval(&x)).collect();
        if vals.iter().all(|v| v.is_finite()) {
            Ok(DVector::from_vec(vals))
        } else {
            Err(Error::Domain("constraint value"))
        }
    }

    /// `max |φ|` over every constraint of the chain.
    pub fn max_residual(&self, pt: &UnifiedPoint) -> Result<f64> {
        Ok(self.values(pt)?.amax())
    }

    /// Jacobian of all constraints with respect to the coordinates listed in
    /// `vars` (indices into `(t, q, v, p)`).
    pub fn jacobian(&self, pt: &UnifiedPoint, vars: &[usize]) -> Result<DMatrix<f64>> {
        let x = pt.coords();
        let dim = x.len();
        let mut j = DMatrix::zeros(self.len(), vars.len());
        for (r, c) in self.constraints().enumerate() {
            for (k, &var) in vars.iter().enumerate() {
                let mut d = vec![0.0; dim];
                d[var] = 1.0;
                j[(r, k)] = dir_deriv(&c.evaluator, &x, &d);
            }
        }
        if j.iter().all(|v| v.is_finite()) {
            Ok(j)
        } else {
            Err(Error::Domain("constraint Jacobian"))
        }
    }

    fn next_id(&self) -> ConstraintId {
        self.graph.nodes.len()
    }

    fn push_level(&mut self, directions: Vec<DVector<f64>>) {
        let parents: Vec<ConstraintId> = self.constraints().map(|c| c.id).collect();
        let mut nodes = self.graph.nodes.clone();
        let first = self.next_id();
        for u in &directions {
            nodes.push(Provenance::Tangency { parents: parents.clone(), null_direction: u.iter().copied().collect() });
        }
        let graph = Arc::new(Graph { sys: self.sys.clone(), nodes });
        let level_no = self.levels.len() + 1;
        let level = (0..directions.len())
            .map(|k| {
                let id = first + k;
                ConstraintFunction {
                    id,
                    level: level_no,
                    provenance: graph.nodes[id].clone(),
                    evaluator: SmoothScalarField::new(NodeField { graph: graph.clone(), id }),
                }
            })
            .collect();
        self.graph = graph;
        self.levels.push(level);
    }

    /// Differentiation depth needed to take gradients of candidates one level
    /// beyond the current chain.
    fn extension_depth(&self) -> usize {
        (0..self.next_id()).map(|id| self.graph.depth(id)).max().unwrap_or(1) + 2
    }

    fn refresh_stats(&mut self, drift: f64) -> Result<()> {
        let mut stats = Vec::with_capacity(self.levels.len());
        for (k, level) in self.levels.iter().enumerate() {
            let mut max: f64 = 0.0;
            let mut sum = 0.0;
            let mut count = 0usize;
            for pt in &self.sample_points {
                for c in level {
                    let r = c.value(pt)?.abs();
                    max = max.max(r);
                    sum += r;
                    count += 1;
                }
            }
            let prev_drift = self.stats.get(k).map(|s| s.kernel_drift).unwrap_or(0.0);
            stats.push(LevelStats {
                level: k + 1,
                size: level.len(),
                max_residual: max,
                mean_residual: if count > 0 { sum / count as f64 } else { 0.0 },
                kernel_drift: if k + 1 == self.levels.len() && k > 0 { drift } else { prev_drift },
            });
        }
        self.stats = stats;
        Ok(())
    }
}

/// One constraint in a [`ChainReport`].
#[derive(Clone, Debug, Serialize)]
pub struct ConstraintReport {
    pub id: ConstraintId,
    pub level: usize,
    pub provenance: Provenance,
}

/// Serializable summary of a chain.
#[derive(Clone, Debug, Serialize)]
pub struct ChainReport {
    pub model: String,
    pub n: usize,
    pub level_sizes: Vec<usize>,
    pub termination: Option<&'static str>,
    pub gauge_dim: Option<usize>,
    pub kernel_dim: usize,
    pub free_lambda: Vec<usize>,
    pub sample_count: usize,
    pub levels: Vec<LevelStats>,
    pub constraints: Vec<ConstraintReport>,
    /// Frozen null directions, one per tangency constraint.
    pub null_directions: Vec<Vec<f64>>,
    pub diagnostics: Vec<String>,
    pub options: ChainOptions,
}

impl ConstraintChain {
    pub fn report(&self) -> ChainReport {
        ChainReport {
            model: self.sys.name().to_string(),
            n: self.sys.n(),
            level_sizes: self.level_sizes(),
            termination: self.termination.map(|t| t.label()),
            gauge_dim: match self.termination {
                Some(Termination::GaugeFreedom { dim }) => Some(dim),
                _ => None,
            },
            kernel_dim: self.kernel_dim,
            free_lambda: self.free_lambda.clone(),
            sample_count: self.sample_points.len(),
            levels: self.stats.clone(),
            constraints: self
                .constraints()
                .map(|c| ConstraintReport { id: c.id, level: c.level, provenance: c.provenance.clone() })
                .collect(),
            null_directions: self
                .constraints()
                .filter_map(|c| match &c.provenance {
                    Provenance::Tangency { null_direction, .. } => Some(null_direction.clone()),
                    _ => None,
                })
                .collect(),
            diagnostics: self.diagnostics.clone(),
            options: self.options,
        }
    }
}

/// The tangency conditions `dφ(X₀(λ)) = A + B·λ` for every constraint of the
/// chain at one point.
#[derive(Clone, Debug)]
pub struct TangencySystem {
    /// `dφ_r(X₀)` with `G = G_particular`.
    pub a: DVector<f64>,
    /// `dφ_r(∂_v·K_j)`, one column per kernel direction.
    pub b: DMatrix<f64>,
    /// `∂φ_r/∂v`.
    pub g_coefficients: DMatrix<f64>,
    /// `Y(φ_r) = A_r − D_r·G_particular`.
    pub drift: DVector<f64>,
    pub solution: VectorFieldSolution,
}

fn tangency_rows(chain: &ConstraintChain, pt: &UnifiedPoint, rank_tol: f64) -> Result<TangencySystem> {
    let sys = &chain.sys;
    let n = sys.n();
    let sol = vector_field_unchecked(sys, pt, rank_tol)?;
    let x = pt.coords();
    let dim = x.len();
    let m = chain.len();
    let k = sol.kernel_dim();
    let x0 = sol.direction_with_g(&sol.g_particular);
    let mut d = DMatrix::zeros(m, n);
    let mut a = DVector::zeros(m);
    for (r, c) in chain.constraints().enumerate() {
        a[r] = dir_deriv(&c.evaluator, &x, &x0);
        for i in 0..n {
            let mut e = vec![0.0; dim];
            e[1 + n + i] = 1.0;
            d[(r, i)] = dir_deriv(&c.evaluator, &x, &e);
        }
    }
    if !(a.iter().chain(d.iter()).all(|v| v.is_finite())) {
        return Err(Error::Domain("tangency system"));
    }
    let b = if k == 0 { DMatrix::zeros(m, 0) } else { &d * DMatrix::from_columns(&sol.g_kernel) };
    let drift = &a - &d * &sol.g_particular;
    Ok(TangencySystem { a, b, g_coefficients: d, drift, solution: sol })
}

/// Assembles `A + B·λ` for the chain at `pt`, which must lie on the chain's
/// zero set.
pub fn tangency_system(chain: &ConstraintChain, pt: &UnifiedPoint, rank_tol: f64) -> Result<TangencySystem> {
    let r = chain.max_residual(pt)?;
    if r > ON_MANIFOLD_TOL {
        return Err(Error::NotOnConstraintSet(r));
    }
    tangency_rows(chain, pt, rank_tol)
}

/// Which coordinates a projection may move.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProjectionVars {
    /// Velocities and momenta only.
    VelocityMomentum,
    /// Positions, velocities and momenta; time stays fixed.
    PositionVelocityMomentum,
}

impl ProjectionVars {
    fn indices(self, n: usize) -> Vec<usize> {
        match self {
            ProjectionVars::VelocityMomentum => (1 + n..1 + 3 * n).collect(),
            ProjectionVars::PositionVelocityMomentum => (1..1 + 3 * n).collect(),
        }
    }
}

/// Newton iteration with minimum-norm corrections onto the chain's zero set.
/// Returns the projected point and the number of iterations taken.
///
/// An iterate whose residual stops halving is accepted once it is within
/// `10·tol`; that is the roundoff floor of the constraint evaluation.
pub fn project(
    chain: &ConstraintChain,
    pt: &UnifiedPoint,
    vars: ProjectionVars,
    tol: f64,
    max_iter: usize,
) -> Result<(UnifiedPoint, usize)> {
    newton(chain, pt, vars, tol, max_iter, false).map(|r| (r.point, r.iterations))
}

/// Result of [`project_reachable`].
#[derive(Clone, Debug)]
pub struct Projected {
    pub point: UnifiedPoint,
    pub iterations: usize,
    /// `max |φ|` at the returned point.
    pub residual: f64,
    /// Part of the residual outside the range of the Jacobian in the moved
    /// variables; no correction of those variables removes it.
    pub unreachable: f64,
}

/// Newton iteration like [`project`], but converged once the residual
/// component the moved variables can change is below `tol`. The remainder is
/// reported in [`Projected::unreachable`].
pub fn project_reachable(
    chain: &ConstraintChain,
    pt: &UnifiedPoint,
    vars: ProjectionVars,
    tol: f64,
    max_iter: usize,
) -> Result<Projected> {
    newton(chain, pt, vars, tol, max_iter, true)
}

fn newton(
    chain: &ConstraintChain,
    pt: &UnifiedPoint,
    vars: ProjectionVars,
    tol: f64,
    max_iter: usize,
    reachable_only: bool,
) -> Result<Projected> {
    let idx = vars.indices(pt.n());
    let mut x = pt.coords();
    let mut cur = pt.clone();
    let mut iterations = 0;
    let mut prev = f64::INFINITY;
    loop {
        let phi = chain.values(&cur)?;
        let residual = phi.amax();
        if residual <= tol {
            return Ok(Projected { point: cur, iterations, residual, unreachable: 0.0 });
        }
        let svd = SortedSvd::new(&chain.jacobian(&cur, &idx)?);
        let (target, unreachable) = if reachable_only {
            let ur = svd.u.view((0, 0), (phi.len(), svd.rank(1e-12)));
            let reach = ur * (ur.transpose() * &phi);
            (reach.amax(), (&phi - &reach).amax())
        } else {
            (residual, 0.0)
        };
        if target <= tol || (target <= 10.0 * tol && target > 0.5 * prev) {
            return Ok(Projected { point: cur, iterations, residual, unreachable });
        }
        if iterations == max_iter {
            return Err(Error::NoConvergence { iterations, residual: target });
        }
        prev = target;
        let step = svd.solve_min_norm(&phi, 1e-12);
        for (k, &var) in idx.iter().enumerate() {
            x[var] -= step[k];
        }
        cur = UnifiedPoint::from_coords(&x);
        iterations += 1;
    }
}

/// Random points of `W₁` over the box, reproducible from `seed`.
pub fn sample_points(sys: &LagrangianSystem, bx: &SampleBox, count: usize, seed: u64) -> Result<Vec<UnifiedPoint>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = sys.n();
    let mut draw = |(lo, hi): (f64, f64)| if hi > lo { rng.gen_range(lo..hi) } else { lo };
    let mut pts = Vec::with_capacity(count);
    for _ in 0..count {
        let t = draw(bx.t);
        let q: Vec<f64> = (0..n).map(|_| draw(bx.q)).collect();
        let v: Vec<f64> = (0..n).map(|_| draw(bx.v)).collect();
        pts.push(UnifiedPoint::on_w1(sys, t, &q, &v)?);
    }
    Ok(pts)
}

/// Outcome of one round of the algorithm.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ChainStep {
    Extended { level: usize, added: usize },
    Terminated(Termination),
}

fn lambda_rank(b: &DMatrix<f64>, scale: f64, rank_tol: f64) -> usize {
    if b.ncols() == 0 {
        return 0;
    }
    let svd = SortedSvd::new(b);
    svd.singular_values.iter().filter(|&&s| s > rank_tol * scale).count()
}

/// Imposes tangency on the current chain once: appends a level of new
/// constraints or decides termination.
pub fn extend_chain(chain: &mut ConstraintChain) -> Result<ChainStep> {
    if let Some(t) = chain.termination {
        return Ok(ChainStep::Terminated(t));
    }
    if chain.sample_points.is_empty() {
        return Err(Error::InvalidParameter("the chain has no sample points".into()));
    }
    let needed = chain.extension_depth();
    if needed > MAX_DEPTH {
        return Err(Error::DepthExceeded { needed, available: MAX_DEPTH });
    }
    let opts = chain.options;
    let rank_tol = opts.rank_tol;

    let systems: Vec<TangencySystem> =
        chain.sample_points.iter().map(|pt| tangency_rows(chain, pt, rank_tol)).collect::<Result<_>>()?;
    let scales: Vec<f64> = systems
        .iter()
        .map(|s| {
            SortedSvd::new(&s.g_coefficients)
                .max_singular_value()
                .max(SortedSvd::new(&s.solution.velocity_hessian).max_singular_value())
        })
        .collect();

    // Frozen left null directions of D at the base point.
    let null_tol = |s: &TangencySystem, scale: f64| -> Vec<DVector<f64>> {
        let d = &s.g_coefficients;
        if scale == 0.0 {
            return (0..d.nrows()).map(|i| crate::linalg::unit_vector(d.nrows(), i)).collect();
        }
        let svd = SortedSvd::new(&d.transpose());
        let rank = svd.singular_values.iter().filter(|&&x| x > rank_tol * scale).count();
        (rank..svd.v.ncols()).map(|c| sign_normalized(svd.v.column(c).into_owned())).collect()
    };
    let base_null = null_tol(&systems[0], scales[0]);
    let mut dims = Vec::with_capacity(systems.len());
    let mut drift: f64 = 0.0;
    for (s, &scale) in systems.iter().zip(&scales) {
        let u = null_tol(s, scale);
        dims.push(u.len());
        if u.len() == base_null.len() {
            drift = drift.max(subspace_angle(&base_null, &u));
        }
    }
    if dims.iter().any(|&d| d != base_null.len()) {
        chain.diagnostics.push(format!("left null space dimension varies across samples: {dims:?}"));
        return Err(Error::RankJump(dims));
    }
    if drift > 1e-6 {
        chain.diagnostics.push(format!(
            "level {}: frozen null directions drift by {drift:.3e} rad across samples",
            chain.levels.len() + 1
        ));
    }

    // Candidate constraints u·c and their gradients at the base point.
    let base = chain.sample_points[0].clone();
    let parents: Vec<ConstraintId> = chain.constraints().map(|c| c.id).collect();
    let probe = |u: &DVector<f64>| -> SmoothScalarField {
        let mut nodes = chain.graph.nodes.clone();
        nodes.push(Provenance::Tangency { parents: parents.clone(), null_direction: u.iter().copied().collect() });
        let id = nodes.len() - 1;
        SmoothScalarField::new(NodeField { graph: Arc::new(Graph { sys: chain.sys.clone(), nodes }), id })
    };
    let base_x = base.coords();
    let existing: Vec<DVector<f64>> = chain.constraints().map(|c| c.gradient(&base)).collect::<Result<_>>()?;
    let grad_scale = existing.iter().map(|g| g.norm()).fold(0.0f64, f64::max).max(1.0);
    let q = orthonormal_basis(&existing, 1e-10);
    let cand_grads: Vec<DVector<f64>> =
        base_null.iter().map(|u| crate::autodiff::gradient(&probe(u), &base_x)).collect::<Result<_>>()?;

    let mut accepted: Vec<DVector<f64>> = Vec::new();
    let mut implied: Vec<DVector<f64>> = Vec::new();
    if !base_null.is_empty() {
        let resid: Vec<DVector<f64>> = cand_grads.iter().map(|g| project_out(&q, g)).collect();
        let r = DMatrix::from_columns(&resid);
        let g_all = DMatrix::from_columns(&cand_grads);
        let u_all = DMatrix::from_columns(&base_null);
        let svd = SortedSvd::new(&r);
        for j in 0..svd.v.ncols() {
            let c = svd.v.column(j).into_owned();
            let sigma = svd.singular_values.get(j).copied().unwrap_or(0.0);
            let g = &g_all * &c;
            let u = sign_normalized(&u_all * &c);
            let independent = sigma > opts.independence_tol * g.norm() && sigma > 1e-10 * grad_scale;
            if independent {
                accepted.push(u);
            } else {
                implied.push(u);
            }
        }
    }

    chain.kernel_dim = systems[0].solution.kernel_dim();

    // Directions whose candidate is implied by the chain must vanish on it.
    for u in &implied {
        let f = probe(u);
        for pt in &chain.sample_points {
            let val = f.eval(&pt.coords());
            if !val.is_finite() || val.abs() > 1e-6 * grad_scale {
                chain.diagnostics.push(format!(
                    "level {}: candidate constraint is constant {val:.3e} on the feasible set",
                    chain.levels.len() + 1
                ));
                chain.termination = Some(Termination::Inconsistent);
                return Ok(ChainStep::Terminated(Termination::Inconsistent));
            }
        }
    }

    if accepted.is_empty() {
        chain.free_lambda = systems
            .iter()
            .zip(&scales)
            .map(|(s, &scale)| s.solution.kernel_dim() - lambda_rank(&s.b, scale, rank_tol))
            .collect();
        let free = chain.free_lambda.iter().copied().max().unwrap_or(0);
        if chain.free_lambda.iter().any(|&f| f != free) {
            chain.diagnostics.push(format!("free coefficient count varies across samples: {:?}", chain.free_lambda));
        }
        let t = if free == 0 { Termination::AllDetermined } else { Termination::GaugeFreedom { dim: free } };
        chain.termination = Some(t);
        chain.refresh_stats(drift)?;
        return Ok(ChainStep::Terminated(t));
    }

    if chain.levels.len() >= opts.max_levels {
        chain.termination = Some(Termination::MaxLevelsReached);
        return Ok(ChainStep::Terminated(Termination::MaxLevelsReached));
    }

    let added = accepted.len();
    chain.push_level(accepted);
    let level = chain.levels.len();

    // Move the samples onto the new zero set.
    let mut kept = Vec::with_capacity(chain.sample_points.len());
    for pt in &chain.sample_points {
        match project(
            chain,
            pt,
            ProjectionVars::PositionVelocityMomentum,
            opts.projection_tol,
            opts.projection_max_iter,
        ) {
            Ok((p, _)) => kept.push(p),
            Err(Error::NoConvergence { .. }) | Err(Error::Domain(_)) => {}
            Err(e) => return Err(e),
        }
    }
    let total = chain.sample_points.len();
    if kept.len() * 2 < total {
        chain.diagnostics.push(format!("level {level}: only {} of {total} samples reach the zero set", kept.len()));
        chain.termination = Some(Termination::Inconsistent);
        return Ok(ChainStep::Terminated(Termination::Inconsistent));
    }
    if kept.len() < total {
        chain.diagnostics.push(format!("level {level}: dropped {} samples that failed to project", total - kept.len()));
    }
    // The base point must stay first for reproducibility.
    chain.sample_points = kept;
    chain.refresh_stats(drift)?;
    Ok(ChainStep::Extended { level, added })
}

/// Runs the algorithm from the primary constraints to termination.
pub fn run_constraint_algorithm(
    sys: &LagrangianSystem,
    samples: &[UnifiedPoint],
    options: ChainOptions,
) -> Result<ConstraintChain> {
    if samples.is_empty() {
        return Err(Error::InvalidParameter("at least one sample point is required".into()));
    }
    if options.max_levels == 0 || options.max_levels > MAX_LEVELS {
        return Err(Error::InvalidParameter(format!("max_levels must lie in 1..={MAX_LEVELS}")));
    }
    if !(options.rank_tol > 0.0 && options.projection_tol > 0.0 && options.independence_tol > 0.0) {
        return Err(Error::InvalidParameter("tolerances must be positive".into()));
    }
    let mut chain = ConstraintChain::primary(sys, options);
    chain.sample_points = samples
        .iter()
        .map(|pt| UnifiedPoint::on_w1(sys, pt.t, pt.q.as_slice(), pt.v.as_slice()))
        .collect::<Result<_>>()?;
    chain.refresh_stats(0.0)?;
    loop {
        if let ChainStep::Terminated(_) = extend_chain(&mut chain)? {
            return Ok(chain);
        }
    }
}

/// Rule fixing the coefficients the chain leaves free.
#[derive(Clone, Default)]
pub enum GaugeRule {
    /// Refuse to integrate a gauge-free chain.
    #[default]
    Reject,
    /// Minimum-norm choice: free coefficients set to zero.
    Zero,
    /// Caller-supplied coefficients along the free directions, given the
    /// point and the number of free directions.
    Custom(Arc<dyn Fn(&UnifiedPoint, usize) -> Vec<f64> + Send + Sync>),
}

impl std::fmt::Debug for GaugeRule {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            GaugeRule::Reject => f.write_str("Reject"),
            GaugeRule::Zero => f.write_str("Zero"),
            GaugeRule::Custom(_) => f.write_str("Custom"),
        }
    }
}

/// `X₀` with its coefficients `λ` resolved from the chain.
#[derive(Clone, Debug)]
pub struct ResolvedField {
    pub solution: VectorFieldSolution,
    pub lambda: DVector<f64>,
    pub g: DVector<f64>,
    /// `(1, v, G, H)`.
    pub direction: Vec<f64>,
    pub free_dim: usize,
}

/// Resolves the free coefficients of `X₀` at `pt` from the chain's tangency
/// conditions, by least squares; coefficients the chain leaves free are fixed
/// by `rule`. The point is not required to lie exactly on the chain.
pub fn resolve_vector_field(chain: &ConstraintChain, pt: &UnifiedPoint, rule: &GaugeRule) -> Result<ResolvedField> {
    let sys = &chain.sys;
    let rank_tol = chain.options.rank_tol;
    let sol = vector_field_unchecked(sys, pt, rank_tol)?;
    let k = sol.kernel_dim();
    if k == 0 {
        let g = sol.g_particular.clone();
        let direction = sol.direction_with_g(&g);
        return Ok(ResolvedField { solution: sol, lambda: DVector::zeros(0), g, direction, free_dim: 0 });
    }
    let x = pt.coords();
    let x0 = sol.direction_with_g(&sol.g_particular);
    let dim = x.len();
    let n = sys.n();
    let kernel_dirs: Vec<Vec<f64>> = sol
        .g_kernel
        .iter()
        .map(|kv| {
            let mut d = vec![0.0; dim];
            d[1 + n..1 + 2 * n].copy_from_slice(kv.as_slice());
            d
        })
        .collect();
    let m = chain.len();
    let mut a = DVector::zeros(m);
    let mut b = DMatrix::zeros(m, k);
    for (r, c) in chain.constraints().enumerate() {
        a[r] = dir_deriv(&c.evaluator, &x, &x0);
        for (j, d) in kernel_dirs.iter().enumerate() {
            b[(r, j)] = dir_deriv(&c.evaluator, &x, d);
        }
    }
    if !(a.iter().chain(b.iter()).all(|v| v.is_finite())) {
        return Err(Error::Domain("tangency system"));
    }
    let scale = SortedSvd::new(&sol.velocity_hessian).max_singular_value();
    let svd = SortedSvd::new(&b);
    let smax = svd.max_singular_value().max(scale);
    let rank = svd.singular_values.iter().filter(|&&s| s > rank_tol * smax).count();
    let mut lambda = DVector::zeros(k);
    for i in 0..rank {
        let coef = -svd.u.column(i).rows(0, m).dot(&a) / svd.singular_values[i];
        lambda.axpy(coef, &svd.v.column(i), 1.0);
    }
    let free_dim = k - rank;
    if free_dim > 0 {
        match rule {
            GaugeRule::Reject => return Err(Error::VectorFieldUndetermined(free_dim)),
            GaugeRule::Zero => {}
            GaugeRule::Custom(f) => {
                let mu = f(pt, free_dim);
                if mu.len() != free_dim {
                    return Err(Error::InvalidParameter(format!(
                        "gauge rule returned {} coefficients, expected {free_dim}",
                        mu.len()
                    )));
                }
                for (i, m) in mu.iter().enumerate() {
                    lambda.axpy(*m, &svd.v.column(rank + i), 1.0);
                }
            }
        }
    }
    let g = sol.g(lambda.as_slice());
    let direction = sol.direction_with_g(&g);
    Ok(ResolvedField { solution: sol, lambda, g, direction, free_dim })
}

/// Right null space of the λ-coefficient matrix, exposed for diagnostics.
pub fn free_directions(ts: &TangencySystem, rank_tol: f64) -> Vec<DVector<f64>> {
    if ts.b.ncols() == 0 {
        return Vec::new();
    }
    null_space(&ts.b, rank_tol)
}

#[doc(hidden)]
pub fn left_null_directions(d: &DMatrix<f64>, rank_tol: f64) -> Vec<DVector<f64>> {
    left_null_space(d, rank_tol)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scalar::Scalar;

    struct Oscillator;
    impl Field for Oscillator {
        fn arity(&self) -> usize {
            3
        }
        fn eval<S: Scalar>(&self, x: &[S]) -> S {
            (x[2] * x[2] - x[1] * x[1]) * S::from_f64(0.5)
        }
    }

    /// `½(v¹)²` with `n = 2`.
    struct HalfKinetic;
    impl Field for HalfKinetic {
        fn arity(&self) -> usize {
            5
        }
        fn eval<S: Scalar>(&self, x: &[S]) -> S {
            x[3] * x[3] * S::from_f64(0.5)
        }
    }

    /// `½(v¹)² + c·q²`: the second Euler–Lagrange equation reads `0 = c`.
    struct Contradiction(f64);
    impl Field for Contradiction {
        fn arity(&self) -> usize {
            5
        }
        fn eval<S: Scalar>(&self, x: &[S]) -> S {
            x[3] * x[3] * S::from_f64(0.5) + x[2] * S::from_f64(self.0)
        }
    }

    fn chain_for(sys: &LagrangianSystem, opts: ChainOptions) -> ConstraintChain {
        let samples = sample_points(sys, &SampleBox::default(), 8, 7).unwrap();
        run_constraint_algorithm(sys, &samples, opts).unwrap()
    }

    #[test]
    fn regular_terminates_at_primary_level() {
        let sys = LagrangianSystem::new("osc", 1, Oscillator).unwrap();
        let chain = chain_for(&sys, ChainOptions::default());
        assert_eq!(chain.level_sizes(), vec![1]);
        assert_eq!(chain.termination, Some(Termination::AllDetermined));
    }

    #[test]
    fn toy_has_one_gauge_direction() {
        let sys = LagrangianSystem::new("toy", 2, HalfKinetic).unwrap();
        let chain = chain_for(&sys, ChainOptions::default());
        assert_eq!(chain.level_sizes(), vec![2]);
        assert_eq!(chain.termination, Some(Termination::GaugeFreedom { dim: 1 }));
        let pt = chain.sample_points[0].clone();
        assert!(matches!(
            resolve_vector_field(&chain, &pt, &GaugeRule::Reject),
            Err(Error::VectorFieldUndetermined(1))
        ));
        let r = resolve_vector_field(&chain, &pt, &GaugeRule::Zero).unwrap();
        assert_eq!(r.free_dim, 1);
        let custom = GaugeRule::Custom(Arc::new(|_, k| vec![2.0; k]));
        let r = resolve_vector_field(&chain, &pt, &custom).unwrap();
        assert!((r.g[1].abs() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn contradiction_is_inconsistent() {
        let sys = LagrangianSystem::new("bad", 2, Contradiction(1.0)).unwrap();
        let chain = chain_for(&sys, ChainOptions::default());
        assert_eq!(chain.termination, Some(Termination::Inconsistent));
    }

    #[test]
    fn tangency_requires_points_on_the_chain() {
        let sys = LagrangianSystem::new("osc", 1, Oscillator).unwrap();
        let chain = chain_for(&sys, ChainOptions::default());
        let mut pt = chain.sample_points[0].clone();
        let ts = tangency_system(&chain, &pt, DEFAULT_RANK_TOL).unwrap();
        assert_eq!(ts.b.ncols(), 0);
        assert!(ts.a.amax() < 1e-12);
        pt.p[0] += 1e-3;
        assert!(matches!(tangency_system(&chain, &pt, DEFAULT_RANK_TOL), Err(Error::NotOnConstraintSet(_))));
    }

    #[test]
    fn options_are_validated() {
        let sys = LagrangianSystem::new("osc", 1, Oscillator).unwrap();
        let samples = sample_points(&sys, &SampleBox::default(), 2, 1).unwrap();
        let bad = ChainOptions { max_levels: MAX_LEVELS + 1, ..Default::default() };
        assert!(run_constraint_algorithm(&sys, &samples, bad).is_err());
        assert!(run_constraint_algorithm(&sys, &[], ChainOptions::default()).is_err());
    }

    #[test]
    fn projection_resets_momenta_of_regular_system() {
        let sys = LagrangianSystem::new("osc", 1, Oscillator).unwrap();
        let chain = chain_for(&sys, ChainOptions::default());
        let pt = UnifiedPoint::new(0.0, &[0.5], &[0.25], &[3.0]);
        let (p, _) = project(&chain, &pt, ProjectionVars::VelocityMomentum, 1e-12, 10).unwrap();
        assert!((p.p[0] - p.v[0]).abs() < 1e-12);
        assert_eq!(p.q[0], 0.5);
    }
}
