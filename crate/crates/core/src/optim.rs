//! Damped least squares over residual blocks.
//!
//! A [`Problem`] owns flat parameter blocks (Euclidean vectors or 7-number
//! poses with a 6-DoF local parameterization) and residual blocks, each with
//! an optional square-root information weight and an optional Huber loss.
//! [`solve_lm`] runs Levenberg–Marquardt with additive damping on the normal
//! equations. When some blocks are flagged for elimination (landmarks in
//! bundle adjustment) the solver forms the reduced camera system by block
//! Schur complement; otherwise it factors the dense system directly.
//!
//! Cost functions return Jacobians with respect to the *tangent* coordinates
//! of each block, so poses are differentiated through [`retract_pose`].

use nalgebra::{DMatrix, DVector, UnitQuaternion, Vector3};
use thiserror::Error;

use crate::geom::Pose;
use crate::par::{self, Execution};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OptimError {
    #[error("NoVariables: problem has no non-constant parameter block")]
    NoVariables,
    #[error("InvalidBlock: {0}")]
    InvalidBlock(String),
    #[error("NumericalFailure: {0}")]
    NumericalFailure(String),
}

/// Failure to evaluate a residual (e.g. a point behind the camera).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EvalFailure;

/// Local parameterization of a parameter block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Manifold {
    Euclidean(usize),
    /// `[qx, qy, qz, qw, tx, ty, tz]`, updated by `(δθ, δt)`.
    Pose,
}

impl Manifold {
    pub fn ambient_dim(self) -> usize {
        match self {
            Manifold::Euclidean(n) => n,
            Manifold::Pose => 7,
        }
    }

    pub fn tangent_dim(self) -> usize {
        match self {
            Manifold::Euclidean(n) => n,
            Manifold::Pose => 6,
        }
    }

    pub fn retract(self, x: &[f64], delta: &[f64]) -> Vec<f64> {
        match self {
            Manifold::Euclidean(_) => x.iter().zip(delta).map(|(a, b)| a + b).collect(),
            Manifold::Pose => {
                let d: [f64; 6] = std::array::from_fn(|i| delta[i]);
                retract_pose(&Pose::from_params(x), &d).to_params().to_vec()
            }
        }
    }

    /// Finite-difference step for tangent coordinate `j`.
    fn fd_step(self, x: &[f64], j: usize) -> f64 {
        match self {
            Manifold::Euclidean(_) => 1e-6 * x[j].abs().max(1.0),
            Manifold::Pose if j < 3 => 1e-6,
            Manifold::Pose => 1e-6 * x[4 + j - 3].abs().max(1.0),
        }
    }
}

/// Left-multiplicative exponential-map update of the rotation, additive
/// update of the translation.
pub fn retract_pose(pose: &Pose, delta: &[f64; 6]) -> Pose {
    let dr = UnitQuaternion::from_scaled_axis(Vector3::new(delta[0], delta[1], delta[2]));
    Pose::new(
        dr * pose.rotation(),
        pose.translation() + Vector3::new(delta[3], delta[4], delta[5]),
    )
}

/// Inverse of [`retract_pose`]: the 6-vector taking `from` to `to`.
pub fn pose_delta(from: &Pose, to: &Pose) -> [f64; 6] {
    let r = (to.rotation() * from.rotation().inverse()).scaled_axis();
    let t = to.translation() - from.translation();
    [r.x, r.y, r.z, t.x, t.y, t.z]
}

/// A residual function of one or more parameter blocks.
pub trait CostFunction: Send + Sync {
    fn residual_dim(&self) -> usize;

    /// Writes residuals and, when requested, one `residual_dim × tangent_dim`
    /// Jacobian per parameter block.
    fn evaluate(
        &self,
        params: &[&[f64]],
        residuals: &mut [f64],
        jacobians: Option<&mut [DMatrix<f64>]>,
    ) -> Result<(), EvalFailure>;

    /// `false` makes the solver differentiate numerically.
    fn has_analytic_jacobian(&self) -> bool {
        true
    }
}

/// Robust loss applied to the squared norm of a whitened residual.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum Loss {
    #[default]
    Trivial,
    Huber(f64),
}

impl Loss {
    /// `(rho(s), rho'(s))`.
    pub fn eval(self, s: f64) -> (f64, f64) {
        match self {
            Loss::Trivial => (s, 1.0),
            Loss::Huber(d) => {
                if s <= d * d {
                    (s, 1.0)
                } else {
                    let r = s.sqrt();
                    (2.0 * d * r - d * d, d / r)
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BlockId(pub usize);

#[derive(Debug, Clone)]
struct ParameterBlock {
    values: Vec<f64>,
    manifold: Manifold,
    constant: bool,
    eliminate: bool,
}

pub struct ResidualBlock {
    pub cost: Box<dyn CostFunction>,
    pub blocks: Vec<BlockId>,
    /// Square root of the information matrix.
    pub weight: Option<DMatrix<f64>>,
    pub loss: Loss,
}

#[derive(Default)]
pub struct Problem {
    params: Vec<ParameterBlock>,
    residuals: Vec<ResidualBlock>,
}

impl Problem {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_parameter_block(&mut self, values: Vec<f64>, manifold: Manifold) -> BlockId {
        assert_eq!(values.len(), manifold.ambient_dim(), "block size mismatch");
        self.params.push(ParameterBlock {
            values,
            manifold,
            constant: false,
            eliminate: false,
        });
        BlockId(self.params.len() - 1)
    }

    pub fn add_pose_block(&mut self, pose: &Pose) -> BlockId {
        self.add_parameter_block(pose.to_params().to_vec(), Manifold::Pose)
    }

    pub fn add_point_block(&mut self, p: &Vector3<f64>) -> BlockId {
        self.add_parameter_block(vec![p.x, p.y, p.z], Manifold::Euclidean(3))
    }

    pub fn set_constant(&mut self, id: BlockId, constant: bool) {
        self.params[id.0].constant = constant;
    }

    /// Marks a block for Schur elimination. Only honored if every residual
    /// touches at most one eliminated block.
    pub fn set_eliminate(&mut self, id: BlockId, eliminate: bool) {
        self.params[id.0].eliminate = eliminate;
    }

    pub fn add_residual_block(
        &mut self,
        cost: Box<dyn CostFunction>,
        blocks: &[BlockId],
        weight: Option<DMatrix<f64>>,
        loss: Loss,
    ) -> Result<usize, OptimError> {
        let dim = cost.residual_dim();
        if dim == 0 {
            return Err(OptimError::InvalidBlock("residual dimension must be >= 1".into()));
        }
        if let Some(b) = blocks.iter().find(|b| b.0 >= self.params.len()) {
            return Err(OptimError::InvalidBlock(format!("unknown parameter block {}", b.0)));
        }
        if let Some(w) = &weight {
            if w.nrows() != dim || w.ncols() != dim {
                return Err(OptimError::InvalidBlock("weight matrix shape mismatch".into()));
            }
            if w.iter().any(|v| !v.is_finite()) || (w.transpose() * w).cholesky().is_none() {
                return Err(OptimError::InvalidBlock("weight matrix not positive definite".into()));
            }
        }
        if let Loss::Huber(d) = loss {
            if !(d > 0.0) {
                return Err(OptimError::InvalidBlock("Huber delta must be positive".into()));
            }
        }
        self.residuals.push(ResidualBlock {
            cost,
            blocks: blocks.to_vec(),
            weight,
            loss,
        });
        Ok(self.residuals.len() - 1)
    }

    pub fn values(&self, id: BlockId) -> &[f64] {
        &self.params[id.0].values
    }

    pub fn pose(&self, id: BlockId) -> Pose {
        Pose::from_params(&self.params[id.0].values)
    }

    pub fn point(&self, id: BlockId) -> Vector3<f64> {
        Vector3::from_column_slice(&self.params[id.0].values)
    }

    pub fn num_residual_blocks(&self) -> usize {
        self.residuals.len()
    }

    pub fn residual_blocks(&self) -> &[ResidualBlock] {
        &self.residuals
    }

    fn states(&self) -> Vec<Vec<f64>> {
        self.params.iter().map(|p| p.values.clone()).collect()
    }

    /// Total cost `½ Σ ρ(‖W r‖²)` at the current parameter values.
    pub fn cost(&self) -> Result<f64, EvalFailure> {
        let state = self.states();
        self.residuals
            .iter()
            .map(|rb| evaluate_block(rb, &self.params, &state, false, false).map(|e| e.cost))
            .sum()
    }

    /// Raw (unweighted, non-robust) residual vector of one block.
    pub fn raw_residual(&self, index: usize) -> Result<DVector<f64>, EvalFailure> {
        let rb = &self.residuals[index];
        let state = self.states();
        let slices: Vec<&[f64]> = rb.blocks.iter().map(|b| state[b.0].as_slice()).collect();
        let mut r = DVector::zeros(rb.cost.residual_dim());
        rb.cost.evaluate(&slices, r.as_mut_slice(), None)?;
        Ok(r)
    }

    /// Largest analytic-vs-finite-difference Jacobian deviation over all
    /// residual blocks with analytic Jacobians.
    pub fn check_jacobians(&self) -> Result<f64, EvalFailure> {
        let mut worst = 0.0f64;
        for rb in &self.residuals {
            if !rb.cost.has_analytic_jacobian() {
                continue;
            }
            let manifolds: Vec<Manifold> = rb.blocks.iter().map(|b| self.params[b.0].manifold).collect();
            let values: Vec<&[f64]> = rb.blocks.iter().map(|b| self.params[b.0].values.as_slice()).collect();
            worst = worst.max(check_jacobian(rb.cost.as_ref(), &manifolds, &values)?);
        }
        Ok(worst)
    }
}

fn numeric_jacobians(
    cost: &dyn CostFunction,
    manifolds: &[Manifold],
    params: &[&[f64]],
) -> Result<Vec<DMatrix<f64>>, EvalFailure> {
    let m = cost.residual_dim();
    let mut out = Vec::with_capacity(params.len());
    let mut rp = vec![0.0; m];
    let mut rm = vec![0.0; m];
    for (bi, man) in manifolds.iter().enumerate() {
        let td = man.tangent_dim();
        let mut j = DMatrix::zeros(m, td);
        for c in 0..td {
            let h = man.fd_step(params[bi], c);
            let mut d = vec![0.0; td];
            d[c] = h;
            let xp = man.retract(params[bi], &d);
            d[c] = -h;
            let xm = man.retract(params[bi], &d);
            let mut ps: Vec<&[f64]> = params.to_vec();
            ps[bi] = &xp;
            cost.evaluate(&ps, &mut rp, None)?;
            ps[bi] = &xm;
            cost.evaluate(&ps, &mut rm, None)?;
            for r in 0..m {
                j[(r, c)] = (rp[r] - rm[r]) / (2.0 * h);
            }
        }
        out.push(j);
    }
    Ok(out)
}

/// Compares analytic Jacobians with central finite differences (step
/// `1e-6` scaled by parameter magnitude) and returns the largest deviation,
/// relative to the largest finite-difference entry of each block (floored at 1).
pub fn check_jacobian(
    cost: &dyn CostFunction,
    manifolds: &[Manifold],
    params: &[&[f64]],
) -> Result<f64, EvalFailure> {
    let m = cost.residual_dim();
    let mut r = vec![0.0; m];
    let mut analytic: Vec<DMatrix<f64>> = manifolds.iter().map(|mf| DMatrix::zeros(m, mf.tangent_dim())).collect();
    cost.evaluate(params, &mut r, Some(&mut analytic))?;
    let numeric = numeric_jacobians(cost, manifolds, params)?;
    let mut worst = 0.0f64;
    for (a, n) in analytic.iter().zip(&numeric) {
        let scale = n.amax().max(1.0);
        worst = worst.max((a - n).amax() / scale);
    }
    Ok(worst)
}

struct Evaluated {
    cost: f64,
    residual: DVector<f64>,
    jacobians: Vec<DMatrix<f64>>,
}

fn evaluate_block(
    rb: &ResidualBlock,
    params: &[ParameterBlock],
    state: &[Vec<f64>],
    want_jacobians: bool,
    force_numeric: bool,
) -> Result<Evaluated, EvalFailure> {
    let m = rb.cost.residual_dim();
    let slices: Vec<&[f64]> = rb.blocks.iter().map(|b| state[b.0].as_slice()).collect();
    let manifolds: Vec<Manifold> = rb.blocks.iter().map(|b| params[b.0].manifold).collect();
    let mut r = DVector::zeros(m);
    let mut jacobians = Vec::new();
    if want_jacobians {
        if force_numeric || !rb.cost.has_analytic_jacobian() {
            rb.cost.evaluate(&slices, r.as_mut_slice(), None)?;
            jacobians = numeric_jacobians(rb.cost.as_ref(), &manifolds, &slices)?;
        } else {
            jacobians = manifolds.iter().map(|mf| DMatrix::zeros(m, mf.tangent_dim())).collect();
            rb.cost.evaluate(&slices, r.as_mut_slice(), Some(&mut jacobians))?;
        }
    } else {
        rb.cost.evaluate(&slices, r.as_mut_slice(), None)?;
    }
    if let Some(w) = &rb.weight {
        r = w * r;
        for j in jacobians.iter_mut() {
            *j = w * &*j;
        }
    }
    let s = r.norm_squared();
    if !s.is_finite() {
        return Err(EvalFailure);
    }
    let (rho, drho) = rb.loss.eval(s);
    if drho != 1.0 {
        let k = drho.sqrt();
        r *= k;
        for j in jacobians.iter_mut() {
            *j *= k;
        }
    }
    Ok(Evaluated {
        cost: 0.5 * rho,
        residual: r,
        jacobians,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LinearSolver {
    /// Schur elimination when blocks are flagged, dense otherwise.
    #[default]
    Auto,
    Dense,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    pub max_iters: usize,
    pub grad_tol: f64,
    pub rel_cost_tol: f64,
    /// `None` uses `1e-4 × max diag(JᵀJ)`.
    pub init_lambda: Option<f64>,
    pub lambda_up: f64,
    pub lambda_down: f64,
    pub numeric_jacobians: bool,
    pub linear_solver: LinearSolver,
    pub exec: Execution,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            max_iters: 100,
            grad_tol: 1e-10,
            rel_cost_tol: 1e-12,
            init_lambda: None,
            lambda_up: 10.0,
            lambda_down: 1.0 / 3.0,
            numeric_jacobians: false,
            linear_solver: LinearSolver::Auto,
            exec: Execution::Parallel,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    Converged,
    MaxIterations,
    NumericalFailure,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveReport {
    pub iterations: usize,
    pub initial_cost: f64,
    pub final_cost: f64,
    pub termination: Termination,
    pub gradient_norm: f64,
    /// Cost after initialization and after every accepted step.
    pub cost_history: Vec<f64>,
    pub accepted_steps: usize,
    pub rejected_steps: usize,
}

/// Index bookkeeping for the (possibly Schur-reduced) normal equations.
struct Layout {
    /// Offset in the reduced system for variable, non-eliminated blocks.
    reduced: Vec<Option<usize>>,
    /// Index into the eliminated set.
    elim: Vec<Option<usize>>,
    reduced_dim: usize,
    elim_dims: Vec<usize>,
    elim_blocks: Vec<usize>,
}

impl Layout {
    fn new(problem: &Problem, use_schur: bool) -> Self {
        let n = problem.params.len();
        let mut elim_ok = use_schur;
        if elim_ok {
            for rb in &problem.residuals {
                let count = rb
                    .blocks
                    .iter()
                    .filter(|b| {
                        let p = &problem.params[b.0];
                        p.eliminate && !p.constant
                    })
                    .count();
                if count > 1 {
                    elim_ok = false;
                    break;
                }
            }
        }
        let mut reduced = vec![None; n];
        let mut elim = vec![None; n];
        let mut reduced_dim = 0;
        let mut elim_dims = Vec::new();
        let mut elim_blocks = Vec::new();
        for (i, p) in problem.params.iter().enumerate() {
            if p.constant {
                continue;
            }
            if elim_ok && p.eliminate {
                elim[i] = Some(elim_dims.len());
                elim_dims.push(p.manifold.tangent_dim());
                elim_blocks.push(i);
            } else {
                reduced[i] = Some(reduced_dim);
                reduced_dim += p.manifold.tangent_dim();
            }
        }
        Self {
            reduced,
            elim,
            reduced_dim,
            elim_dims,
            elim_blocks,
        }
    }
}

struct ElimBlock {
    c: DMatrix<f64>,
    g: DVector<f64>,
    /// (reduced offset, B block of shape reduced_dim_i × elim_dim)
    couplings: Vec<(usize, DMatrix<f64>)>,
}

struct Normal {
    a: DMatrix<f64>,
    ga: DVector<f64>,
    elim: Vec<ElimBlock>,
    cost: f64,
}

impl Normal {
    fn max_diag(&self) -> f64 {
        let mut m = self.a.diagonal().amax();
        for e in &self.elim {
            m = m.max(e.c.diagonal().amax());
        }
        m
    }

    fn gradient_norm(&self) -> f64 {
        let mut g = self.ga.amax();
        for e in &self.elim {
            g = g.max(e.g.amax());
        }
        g
    }
}

fn linearize(
    problem: &Problem,
    layout: &Layout,
    state: &[Vec<f64>],
    opts: &SolverOptions,
) -> Result<Normal, EvalFailure> {
    let evals: Vec<Result<Evaluated, EvalFailure>> = par::map(opts.exec, &problem.residuals, |rb| {
        evaluate_block(rb, &problem.params, state, true, opts.numeric_jacobians)
    });
    let n = layout.reduced_dim;
    let mut a = DMatrix::zeros(n, n);
    let mut ga = DVector::zeros(n);
    let mut elim: Vec<ElimBlock> = layout
        .elim_dims
        .iter()
        .map(|&d| ElimBlock {
            c: DMatrix::zeros(d, d),
            g: DVector::zeros(d),
            couplings: Vec::new(),
        })
        .collect();
    let mut cost = 0.0;
    for (rb, ev) in problem.residuals.iter().zip(evals) {
        let ev = ev?;
        cost += ev.cost;
        let r = &ev.residual;
        let mut eblock: Option<(usize, &DMatrix<f64>)> = None;
        let mut reduced: Vec<(usize, &DMatrix<f64>)> = Vec::new();
        for (b, j) in rb.blocks.iter().zip(&ev.jacobians) {
            if let Some(off) = layout.reduced[b.0] {
                reduced.push((off, j));
            } else if let Some(e) = layout.elim[b.0] {
                eblock = Some((e, j));
            }
        }
        for &(oi, ji) in &reduced {
            let gi = ji.transpose() * r;
            let mut seg = ga.rows_mut(oi, gi.len());
            seg += &gi;
            for &(oj, jj) in &reduced {
                let h = ji.transpose() * jj;
                let mut v = a.view_mut((oi, oj), (h.nrows(), h.ncols()));
                v += &h;
            }
        }
        if let Some((e, je)) = eblock {
            let blk = &mut elim[e];
            blk.c += je.transpose() * je;
            blk.g += je.transpose() * r;
            for &(oi, ji) in &reduced {
                let b = ji.transpose() * je;
                match blk.couplings.iter_mut().find(|(o, _)| *o == oi) {
                    Some((_, acc)) => *acc += b,
                    None => blk.couplings.push((oi, b)),
                }
            }
        }
    }
    Ok(Normal { a, ga, elim, cost })
}

/// Marquardt damping: `λ · max(h_ii, floor) / d0`, with `d0` the largest
/// diagonal entry at the initial point so that `λ` keeps the units of `H`.
#[derive(Clone, Copy)]
struct Damping {
    lambda: f64,
    d0: f64,
}

impl Damping {
    fn of(&self, h_ii: f64) -> f64 {
        self.lambda * h_ii.max(1e-9 * self.d0) / self.d0
    }
}

/// Solves `(H + λD) δ = −g`, returning the reduced and eliminated steps.
fn solve_damped(normal: &Normal, damping: Damping) -> Option<(DVector<f64>, Vec<DVector<f64>>)> {
    let n = normal.a.nrows();
    let mut s = normal.a.clone();
    for i in 0..n {
        s[(i, i)] += damping.of(normal.a[(i, i)]);
    }
    let mut rhs = -&normal.ga;
    let mut cinvs = Vec::with_capacity(normal.elim.len());
    for e in &normal.elim {
        let mut c = e.c.clone();
        for i in 0..c.nrows() {
            c[(i, i)] += damping.of(e.c[(i, i)]);
        }
        let cinv = c.cholesky()?.inverse();
        for (oi, bi) in &e.couplings {
            let ti = bi * &cinv;
            let mut seg = rhs.rows_mut(*oi, bi.nrows());
            seg += &ti * &e.g;
            for (oj, bj) in &e.couplings {
                let prod = &ti * bj.transpose();
                let mut v = s.view_mut((*oi, *oj), (prod.nrows(), prod.ncols()));
                v -= &prod;
            }
        }
        cinvs.push(cinv);
    }
    let da = if n > 0 {
        let da = s.cholesky()?.solve(&rhs);
        if da.iter().any(|v| !v.is_finite()) {
            return None;
        }
        da
    } else {
        DVector::zeros(0)
    };
    let mut de = Vec::with_capacity(normal.elim.len());
    for (e, cinv) in normal.elim.iter().zip(&cinvs) {
        let mut rhs_e = -&e.g;
        for (oi, bi) in &e.couplings {
            rhs_e -= bi.transpose() * da.rows(*oi, bi.nrows());
        }
        let d = cinv * rhs_e;
        if d.iter().any(|v| !v.is_finite()) {
            return None;
        }
        de.push(d);
    }
    Some((da, de))
}

fn predicted_reduction(normal: &Normal, da: &DVector<f64>, de: &[DVector<f64>], damping: Damping) -> f64 {
    // ½ δᵀ(λDδ − g)
    let mut p = -0.5 * da.dot(&normal.ga);
    for (i, v) in da.iter().enumerate() {
        p += 0.5 * damping.of(normal.a[(i, i)]) * v * v;
    }
    for (e, d) in normal.elim.iter().zip(de) {
        p -= 0.5 * d.dot(&e.g);
        for (i, v) in d.iter().enumerate() {
            p += 0.5 * damping.of(e.c[(i, i)]) * v * v;
        }
    }
    p
}

fn apply_step(
    problem: &Problem,
    layout: &Layout,
    state: &[Vec<f64>],
    da: &DVector<f64>,
    de: &[DVector<f64>],
) -> Vec<Vec<f64>> {
    let mut next = state.to_vec();
    for (i, p) in problem.params.iter().enumerate() {
        if let Some(off) = layout.reduced[i] {
            let d = da.rows(off, p.manifold.tangent_dim());
            next[i] = p.manifold.retract(&state[i], d.as_slice());
        }
    }
    for (k, &i) in layout.elim_blocks.iter().enumerate() {
        next[i] = problem.params[i].manifold.retract(&state[i], de[k].as_slice());
    }
    next
}

fn total_cost(problem: &Problem, state: &[Vec<f64>], exec: Execution) -> f64 {
    let costs = par::map(exec, &problem.residuals, |rb| {
        evaluate_block(rb, &problem.params, state, false, false).map(|e| e.cost)
    });
    let mut sum = 0.0;
    for c in costs {
        match c {
            Ok(v) => sum += v,
            Err(_) => return f64::INFINITY,
        }
    }
    sum
}

/// Levenberg–Marquardt. Parameter values are written back to `problem`
/// only after the iteration finishes.
pub fn solve_lm(problem: &mut Problem, opts: &SolverOptions) -> Result<SolveReport, OptimError> {
    if !problem.params.iter().any(|p| !p.constant) {
        return Err(OptimError::NoVariables);
    }
    let layout = Layout::new(problem, opts.linear_solver == LinearSolver::Auto);
    let mut state = problem.states();
    let mut normal = linearize(problem, &layout, &state, opts)
        .map_err(|_| OptimError::NumericalFailure("residual evaluation failed at the initial point".into()))?;
    let initial_cost = normal.cost;
    let mut cost = initial_cost;
    let mut lambda = opts
        .init_lambda
        .unwrap_or_else(|| 1e-4 * normal.max_diag())
        .max(1e-12);
    let d0 = match normal.max_diag() {
        d if d > 0.0 && d.is_finite() => d,
        _ => 1.0,
    };
    let mut history = vec![cost];
    let mut termination = Termination::MaxIterations;
    let mut iterations = 0;
    let (mut accepted, mut rejected) = (0, 0);
    let mut failures = 0;

    while iterations < opts.max_iters {
        if cost == 0.0 || normal.gradient_norm() < opts.grad_tol {
            termination = Termination::Converged;
            break;
        }
        iterations += 1;
        let Some((da, de)) = solve_damped(&normal, Damping { lambda, d0 }) else {
            failures += 1;
            if failures > 20 {
                termination = Termination::NumericalFailure;
                break;
            }
            lambda *= opts.lambda_up;
            rejected += 1;
            continue;
        };
        let step_norm = (da.norm_squared() + de.iter().map(|d| d.norm_squared()).sum::<f64>()).sqrt();
        let x_norm = state.iter().flatten().map(|v| v * v).sum::<f64>().sqrt();
        if step_norm <= 1e-15 * (x_norm + 1e-15) {
            termination = Termination::Converged;
            break;
        }
        let candidate = apply_step(problem, &layout, &state, &da, &de);
        let new_cost = total_cost(problem, &candidate, opts.exec);
        let predicted = predicted_reduction(&normal, &da, &de, Damping { lambda, d0 });
        if new_cost.is_finite() && new_cost < cost && predicted > 0.0 {
            let rel = (cost - new_cost) / cost;
            state = candidate;
            cost = new_cost;
            history.push(cost);
            accepted += 1;
            lambda = (lambda * opts.lambda_down).max(1e-15);
            normal = linearize(problem, &layout, &state, opts).map_err(|_| {
                OptimError::NumericalFailure("residual evaluation failed after an accepted step".into())
            })?;
            if rel < opts.rel_cost_tol {
                termination = Termination::Converged;
                break;
            }
        } else {
            rejected += 1;
            lambda *= opts.lambda_up;
            if lambda > 1e32 {
                // no descent left at machine precision
                termination = Termination::Converged;
                break;
            }
        }
    }
    if termination == Termination::NumericalFailure {
        return Err(OptimError::NumericalFailure(
            "normal equations singular beyond damping recovery".into(),
        ));
    }
    let gradient_norm = normal.gradient_norm();
    for (p, s) in problem.params.iter_mut().zip(state) {
        p.values = s;
    }
    Ok(SolveReport {
        iterations,
        initial_cost,
        final_cost: cost,
        termination,
        gradient_norm,
        cost_history: history,
        accepted_steps: accepted,
        rejected_steps: rejected,
    })
}

/// `true` if the sequence never increases.
pub fn is_monotone_non_increasing(costs: &[f64]) -> bool {
    costs.windows(2).all(|w| w[1] <= w[0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    struct Rosenbrock;

    impl CostFunction for Rosenbrock {
        fn residual_dim(&self) -> usize {
            2
        }
        fn evaluate(&self, p: &[&[f64]], r: &mut [f64], j: Option<&mut [DMatrix<f64>]>) -> Result<(), EvalFailure> {
            let (x, y) = (p[0][0], p[0][1]);
            r[0] = 10.0 * (y - x * x);
            r[1] = 1.0 - x;
            if let Some(j) = j {
                j[0] = DMatrix::from_row_slice(2, 2, &[-20.0 * x, 10.0, -1.0, 0.0]);
            }
            Ok(())
        }
    }

    /// `r = A x - b` for a fixed A, b.
    struct Linear {
        a: DMatrix<f64>,
        b: DVector<f64>,
    }

    impl CostFunction for Linear {
        fn residual_dim(&self) -> usize {
            self.a.nrows()
        }
        fn evaluate(&self, p: &[&[f64]], r: &mut [f64], j: Option<&mut [DMatrix<f64>]>) -> Result<(), EvalFailure> {
            let x = DVector::from_column_slice(p[0]);
            let v = &self.a * x - &self.b;
            r.copy_from_slice(v.as_slice());
            if let Some(j) = j {
                j[0] = self.a.clone();
            }
            Ok(())
        }
    }

    /// Scalar difference `x - y` between two 1-vectors.
    struct Difference(f64);

    impl CostFunction for Difference {
        fn residual_dim(&self) -> usize {
            1
        }
        fn evaluate(&self, p: &[&[f64]], r: &mut [f64], j: Option<&mut [DMatrix<f64>]>) -> Result<(), EvalFailure> {
            r[0] = p[0][0] - p[1][0] - self.0;
            if let Some(j) = j {
                j[0] = DMatrix::from_element(1, 1, 1.0);
                j[1] = DMatrix::from_element(1, 1, -1.0);
            }
            Ok(())
        }
    }

    struct Prior(f64);

    impl CostFunction for Prior {
        fn residual_dim(&self) -> usize {
            1
        }
        fn evaluate(&self, p: &[&[f64]], r: &mut [f64], j: Option<&mut [DMatrix<f64>]>) -> Result<(), EvalFailure> {
            r[0] = p[0][0] - self.0;
            if let Some(j) = j {
                j[0] = DMatrix::from_element(1, 1, 1.0);
            }
            Ok(())
        }
    }

    /// Pose translation prior, residual `target - t`.
    struct TranslationPrior(Vector3<f64>);

    impl CostFunction for TranslationPrior {
        fn residual_dim(&self) -> usize {
            3
        }
        fn evaluate(&self, p: &[&[f64]], r: &mut [f64], j: Option<&mut [DMatrix<f64>]>) -> Result<(), EvalFailure> {
            let pose = Pose::from_params(p[0]);
            let d = self.0 - pose.translation();
            r.copy_from_slice(d.as_slice());
            if let Some(j) = j {
                let mut m = DMatrix::zeros(3, 6);
                for i in 0..3 {
                    m[(i, 3 + i)] = -1.0;
                }
                j[0] = m;
            }
            Ok(())
        }
    }

    #[test]
    fn rosenbrock_from_classic_start() {
        let mut p = Problem::new();
        let x = p.add_parameter_block(vec![-1.2, 1.0], Manifold::Euclidean(2));
        p.add_residual_block(Box::new(Rosenbrock), &[x], None, Loss::Trivial).unwrap();
        let rep = solve_lm(&mut p, &SolverOptions::default()).unwrap();
        assert_eq!(rep.termination, Termination::Converged);
        let v = p.values(x);
        assert!((v[0] - 1.0).abs() < 1e-8 && (v[1] - 1.0).abs() < 1e-8, "{v:?}");
        assert!(is_monotone_non_increasing(&rep.cost_history));
        assert!(rep.final_cost <= rep.initial_cost);
    }

    #[test]
    fn rosenbrock_with_numeric_jacobians() {
        let mut p = Problem::new();
        let x = p.add_parameter_block(vec![-1.2, 1.0], Manifold::Euclidean(2));
        p.add_residual_block(Box::new(Rosenbrock), &[x], None, Loss::Trivial).unwrap();
        let opts = SolverOptions {
            numeric_jacobians: true,
            ..Default::default()
        };
        solve_lm(&mut p, &opts).unwrap();
        let v = p.values(x);
        assert!((v[0] - 1.0).abs() < 1e-7 && (v[1] - 1.0).abs() < 1e-7);
    }

    #[test]
    fn zero_residual_start() {
        let mut p = Problem::new();
        let x = p.add_parameter_block(vec![1.0, 1.0], Manifold::Euclidean(2));
        p.add_residual_block(Box::new(Rosenbrock), &[x], None, Loss::Trivial).unwrap();
        let rep = solve_lm(&mut p, &SolverOptions::default()).unwrap();
        assert!(rep.iterations <= 1);
        assert_eq!(rep.final_cost, 0.0);
        assert_eq!(rep.termination, Termination::Converged);
    }

    #[test]
    fn damping_schedule() {
        // quadratic bowl: first step from a tiny lambda must be accepted and
        // shrink lambda; we only check the cost history is monotone and the
        // bookkeeping is consistent
        let mut p = Problem::new();
        let x = p.add_parameter_block(vec![3.0, -2.0], Manifold::Euclidean(2));
        let a = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, -1.0, 0.5, 0.3, 0.3]);
        let b = DVector::from_vec(vec![0.1, 0.2, 0.3]);
        p.add_residual_block(Box::new(Linear { a, b }), &[x], None, Loss::Trivial).unwrap();
        let rep = solve_lm(&mut p, &SolverOptions::default()).unwrap();
        assert_eq!(rep.accepted_steps + 1, rep.cost_history.len());
        assert!(is_monotone_non_increasing(&rep.cost_history));
    }

    #[test]
    fn no_variables_rejected() {
        let mut p = Problem::new();
        let x = p.add_parameter_block(vec![0.0], Manifold::Euclidean(1));
        p.set_constant(x, true);
        p.add_residual_block(Box::new(Prior(1.0)), &[x], None, Loss::Trivial).unwrap();
        assert_eq!(solve_lm(&mut p, &SolverOptions::default()), Err(OptimError::NoVariables));
    }

    #[test]
    fn invalid_blocks_rejected() {
        let mut p = Problem::new();
        let x = p.add_parameter_block(vec![0.0], Manifold::Euclidean(1));
        assert!(p.add_residual_block(Box::new(Prior(1.0)), &[BlockId(7)], None, Loss::Trivial).is_err());
        let w = DMatrix::from_element(1, 1, 0.0);
        assert!(p.add_residual_block(Box::new(Prior(1.0)), &[x], Some(w), Loss::Trivial).is_err());
        assert!(p.add_residual_block(Box::new(Prior(1.0)), &[x], None, Loss::Huber(0.0)).is_err());
    }

    #[test]
    fn nan_residual_is_numerical_failure() {
        struct Nan;
        impl CostFunction for Nan {
            fn residual_dim(&self) -> usize {
                1
            }
            fn evaluate(&self, _: &[&[f64]], r: &mut [f64], j: Option<&mut [DMatrix<f64>]>) -> Result<(), EvalFailure> {
                r[0] = f64::NAN;
                if let Some(j) = j {
                    j[0] = DMatrix::from_element(1, 1, 1.0);
                }
                Ok(())
            }
        }
        let mut p = Problem::new();
        let x = p.add_parameter_block(vec![0.0], Manifold::Euclidean(1));
        p.add_residual_block(Box::new(Nan), &[x], None, Loss::Trivial).unwrap();
        assert!(matches!(
            solve_lm(&mut p, &SolverOptions::default()),
            Err(OptimError::NumericalFailure(_))
        ));
    }

    #[test]
    fn linear_jacobian_check_is_exact() {
        let a = DMatrix::from_row_slice(2, 3, &[1.0, -2.0, 0.5, 0.25, 3.0, -1.0]);
        let b = DVector::from_vec(vec![0.3, -0.1]);
        let cost = Linear { a, b };
        let x = [0.2, -0.4, 0.7];
        let dev = check_jacobian(&cost, &[Manifold::Euclidean(3)], &[&x]).unwrap();
        assert!(dev < 1e-10, "{dev}");
    }

    #[test]
    fn pose_translation_prior_jacobian() {
        let pose = Pose::from_xyzw([0.1, -0.3, 0.2, 0.9], [12.0, -40.0, 3.0]).unwrap();
        let cost = TranslationPrior(Vector3::new(11.0, -39.5, 2.0));
        let params = pose.to_params();
        let dev = check_jacobian(&cost, &[Manifold::Pose], &[&params]).unwrap();
        assert!(dev < 1e-8, "{dev}");
    }

    #[test]
    fn retract_identities() {
        let p = Pose::from_xyzw([0.1, 0.2, 0.3, 0.9], [1.0, 2.0, 3.0]).unwrap();
        let same = retract_pose(&p, &[0.0; 6]);
        assert!(same.angle_to(&p) < 1e-15 && same.distance_to(&p) < 1e-15);
        let rz = retract_pose(&Pose::identity(), &[0.0, 0.0, std::f64::consts::FRAC_PI_2, 0.0, 0.0, 0.0]);
        assert!(rz.angle_to(&Pose::rot_z(std::f64::consts::FRAC_PI_2)) < 1e-12);
    }

    #[test]
    fn retract_log_oracle() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100 {
            let q: [f64; 4] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
            let p = Pose::from_xyzw(q, [1.0, -2.0, 0.5]).unwrap();
            let d: [f64; 6] = std::array::from_fn(|_| rng.random_range(-1e-3..1e-3));
            let moved = retract_pose(&p, &d);
            // log(R' R⁻¹) recovers the rotation part; translation is additive
            let back = pose_delta(&p, &moved);
            for i in 0..6 {
                assert!((back[i] - d[i]).abs() < 1e-12, "{i}: {} vs {}", back[i], d[i]);
            }
        }
    }

    #[test]
    fn huber_is_continuous_and_differentiable_at_kink() {
        let d = 2.0;
        let loss = Loss::Huber(d);
        let s0 = d * d;
        let eps = 1e-7;
        let (lo, dlo) = loss.eval(s0 - eps);
        let (hi, dhi) = loss.eval(s0 + eps);
        assert!((lo - hi).abs() < 3e-7);
        assert!((dlo - dhi).abs() < 1e-7);
        // numerical slope on both sides matches rho'
        let h = 1e-6;
        let left = (loss.eval(s0).0 - loss.eval(s0 - h).0) / h;
        let right = (loss.eval(s0 + h).0 - loss.eval(s0).0) / h;
        assert!((left - right).abs() < 1e-6);
    }

    #[test]
    fn huber_problem_cost_continuous_across_threshold() {
        let costs: Vec<f64> = [1.999999, 2.0, 2.000001]
            .iter()
            .map(|&v| {
                let mut p = Problem::new();
                let x = p.add_parameter_block(vec![v], Manifold::Euclidean(1));
                p.add_residual_block(Box::new(Prior(0.0)), &[x], None, Loss::Huber(2.0)).unwrap();
                p.cost().unwrap()
            })
            .collect();
        assert!((costs[0] - costs[1]).abs() < 1e-5);
        assert!((costs[2] - costs[1]).abs() < 1e-5);
    }

    fn chain_problem(order: &[usize], schur: bool) -> (Problem, Vec<BlockId>) {
        // 1-D "landmarks" x_i tied to anchors and to each other
        let targets = [0.0, 1.1, 1.9, 3.2, 4.0];
        let mut p = Problem::new();
        let mut ids = vec![BlockId(0); targets.len()];
        for &i in order {
            ids[i] = p.add_parameter_block(vec![targets[i] + 0.7], Manifold::Euclidean(1));
        }
        let anchor = p.add_parameter_block(vec![0.3], Manifold::Euclidean(1));
        for (i, t) in targets.iter().enumerate() {
            p.set_eliminate(ids[i], schur);
            p.add_residual_block(Box::new(Prior(*t)), &[ids[i]], None, Loss::Trivial).unwrap();
            p.add_residual_block(Box::new(Difference(*t)), &[ids[i], anchor], None, Loss::Trivial)
                .unwrap();
        }
        p.add_residual_block(Box::new(Prior(0.1)), &[anchor], None, Loss::Trivial).unwrap();
        ids.push(anchor);
        (p, ids)
    }

    #[test]
    fn schur_matches_dense_and_ordering_is_irrelevant() {
        let (mut dense, ids_d) = chain_problem(&[0, 1, 2, 3, 4], false);
        let (mut schur, ids_s) = chain_problem(&[4, 2, 0, 3, 1], true);
        let rd = solve_lm(&mut dense, &SolverOptions::default()).unwrap();
        let rs = solve_lm(&mut schur, &SolverOptions::default()).unwrap();
        assert!((rd.final_cost - rs.final_cost).abs() < 1e-12);
        for (a, b) in ids_d.iter().zip(&ids_s) {
            assert!((dense.values(*a)[0] - schur.values(*b)[0]).abs() < 1e-9);
        }
    }

    #[test]
    fn sequential_and_parallel_agree_bitwise() {
        let (mut a, ids) = chain_problem(&[0, 1, 2, 3, 4], true);
        let (mut b, _) = chain_problem(&[0, 1, 2, 3, 4], true);
        let seq = SolverOptions {
            exec: Execution::Sequential,
            ..Default::default()
        };
        let ra = solve_lm(&mut a, &seq).unwrap();
        let rb = solve_lm(&mut b, &SolverOptions::default()).unwrap();
        assert_eq!(ra, rb);
        for id in ids {
            assert_eq!(a.values(id), b.values(id));
        }
    }
}
