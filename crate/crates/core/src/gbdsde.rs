//! Backward solver for generalized doubly stochastic equations with jumps.
//!
//! The unknown triple `(Y, Z, J)` satisfies, on `[t, T]`,
//!
//! ```text
//! Y(t) = xi + int_t^T f(s, L(s)) ds + int_t^T g(s, L(s)) dB(s)   (backward)
//!           - int_t^T Z(s) dW(s) - int_t^T int_E J(s,e) N~(ds,de)
//!           + int_t^T h(s, Y(s)) dA(s),          L = (Y, Z, J nu-aggregate)
//! ```
//!
//! Conditioning is on `G_t = F_t^W v F_t^N v F_T^B`: the whole backward path
//! `B` is frozen (one [`PathBundle`] per `B` scenario) and the remaining
//! `(W, N)` randomness is averaged by regression on polynomial features of
//! the current state. One Picard sweep freezes the driver arguments at the
//! previous iterate and solves the resulting linear backward recursion; the
//! sweeps stop when the weighted norm of successive differences (the norm in
//! which the fixed-point map is a contraction) falls below the tolerance.
//!
//! The linear equation additionally has a per-path closed form through the
//! exponential process `Gamma`, which doubles as an independent oracle for
//! the Picard route.

use std::sync::Arc;

use crate::coeffs::{CompiledCoeffs, LipschitzDecl};
use crate::dsl::EvalError;
use crate::grid::TimeGrid;
use crate::paths::{
    BrownianPath, Direction, IncreasingProcessPath, JumpMeasurePath, LevySpec, PathError,
};
use crate::regression::{FeatureBasis, RegressionError, RidgeSolver};
use crate::rng::{substream, RngKey};
use crate::stats::{mean, stderr_of_mean};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SolverError {
    #[error("Picard iteration did not converge: residual {residual:.3e} after {iterations} sweeps")]
    NoConvergence { iterations: usize, residual: f64 },
    #[error(transparent)]
    Regression(#[from] RegressionError),
    #[error("Monte Carlo budget too small: {0}")]
    BudgetTooSmall(String),
    #[error("drivers are not on a shared grid")]
    GridMismatch,
    #[error("linear jump coefficient must stay above -1")]
    NonPositiveGamma,
    #[error("declared alpha {alpha} invalid: jumping A requires alpha < 3/4")]
    InvalidAlpha { alpha: f64 },
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Path(#[from] PathError),
}

// ---------------------------------------------------------------------------
// drivers
// ---------------------------------------------------------------------------

/// Forward state paths used for regression features and as the `x` argument
/// of the coefficients; `n_inner x n_points x n_dim`, row-major.
#[derive(Debug, Clone)]
pub struct StatePaths {
    pub n_dim: usize,
    pub data: Vec<f64>,
}

impl StatePaths {
    pub fn at(&self, path: usize, k: usize, n_points: usize) -> &[f64] {
        let base = (path * n_points + k) * self.n_dim;
        &self.data[base..base + self.n_dim]
    }
}

/// One conditioning scenario: a frozen backward path plus the inner forward
/// drivers averaged under it.
#[derive(Debug, Clone)]
pub struct PathBundle {
    pub grid: Arc<TimeGrid>,
    pub b: BrownianPath,
    pub w: Vec<BrownianPath>,
    pub jumps: Vec<JumpMeasurePath>,
    pub state: Option<StatePaths>,
}

/// Increasing integrator, either shared by all inner paths or per path.
#[derive(Debug, Clone)]
pub enum AProcesses {
    Shared(IncreasingProcessPath),
    PerPath(Vec<IncreasingProcessPath>),
}

impl AProcesses {
    pub fn get(&self, path: usize) -> &IncreasingProcessPath {
        match self {
            AProcesses::Shared(a) => a,
            AProcesses::PerPath(v) => &v[path],
        }
    }

    pub fn has_jumps(&self) -> bool {
        match self {
            AProcesses::Shared(a) => a.has_jumps(),
            AProcesses::PerPath(v) => v.iter().any(|a| a.has_jumps()),
        }
    }
}

/// Stream roles inside one bundle.
const ROLE_B: u64 = 1;
const ROLE_W: u64 = 2;
const ROLE_N: u64 = 3;

impl PathBundle {
    /// Standard generator: one backward path per `outer` index and `n_inner`
    /// forward/jump paths, all counter-keyed, so any bundle can be rebuilt
    /// independently of generation order.
    pub fn generate(
        grid: &Arc<TimeGrid>,
        dim_w: usize,
        dim_b: usize,
        levy: &Arc<LevySpec>,
        n_inner: usize,
        seed: u64,
        stream: u64,
        outer: u64,
    ) -> Result<Self, SolverError> {
        let b = BrownianPath::generate_with(
            grid,
            dim_b,
            RngKey::new(seed, substream(stream, ROLE_B), outer),
            Direction::Backward,
        );
        let w_stream = substream(substream(stream, ROLE_W), outer);
        let n_stream = substream(substream(stream, ROLE_N), outer);
        let mut w = Vec::with_capacity(n_inner);
        let mut jumps = Vec::with_capacity(n_inner);
        for i in 0..n_inner {
            w.push(BrownianPath::generate(
                grid,
                dim_w,
                RngKey::new(seed, w_stream, i as u64),
            ));
            if levy.is_empty() {
                jumps.push(JumpMeasurePath::no_jumps(grid));
            } else {
                jumps.push(JumpMeasurePath::generate(
                    grid,
                    levy,
                    RngKey::new(seed, n_stream, i as u64),
                )?);
            }
        }
        Ok(Self {
            grid: grid.clone(),
            b,
            w,
            jumps,
            state: None,
        })
    }

    pub fn n_inner(&self) -> usize {
        self.w.len()
    }

    pub fn dim_w(&self) -> usize {
        self.w.first().map_or(0, |p| p.dim())
    }

    pub fn dim_b(&self) -> usize {
        self.b.dim()
    }

    pub fn n_atoms(&self) -> usize {
        self.jumps.first().map_or(0, |j| j.n_atoms())
    }

    fn validate(&self) -> Result<(), SolverError> {
        if self.w.len() != self.jumps.len() || self.w.is_empty() {
            return Err(SolverError::BudgetTooSmall(
                "bundle needs matching non-empty W and jump path sets".into(),
            ));
        }
        for p in &self.w {
            if p.grid().as_ref() != self.grid.as_ref() {
                return Err(SolverError::GridMismatch);
            }
        }
        for p in &self.jumps {
            if p.grid().as_ref() != self.grid.as_ref() {
                return Err(SolverError::GridMismatch);
            }
        }
        if self.b.grid().as_ref() != self.grid.as_ref() {
            return Err(SolverError::GridMismatch);
        }
        if let Some(s) = &self.state {
            if s.data.len() != self.w.len() * self.grid.n_points() * s.n_dim {
                return Err(SolverError::GridMismatch);
            }
        }
        Ok(())
    }

    /// Regression features of path `i` at grid point `k`: the forward state
    /// when present, otherwise the `W` path values.
    fn feature_state(&self, i: usize, k: usize, out: &mut [f64]) {
        match &self.state {
            Some(s) => out.copy_from_slice(s.at(i, k, self.grid.n_points())),
            None => out.copy_from_slice(self.w[i].values_at(k)),
        }
    }

    fn feature_dim(&self) -> usize {
        match &self.state {
            Some(s) => s.n_dim,
            None => self.dim_w(),
        }
    }

    /// Coefficient `x`-argument of path `i` at point `k`; empty when the
    /// model has no forward state.
    fn coeff_state(&self, i: usize, k: usize) -> &[f64] {
        match &self.state {
            Some(s) => s.at(i, k, self.grid.n_points()),
            None => &[],
        }
    }
}

// ---------------------------------------------------------------------------
// coefficient interface
// ---------------------------------------------------------------------------

/// Driver coefficients of the backward equation as seen by the solver.
///
/// `x` is the forward state (empty slice when there is none), `z` the
/// `W`-integrand and `j` the nu-aggregated jump component.
pub trait Coefficients: Sync {
    fn dim_z(&self) -> usize;
    fn dim_b(&self) -> usize;
    fn f(&self, t: f64, x: &[f64], y: f64, z: &[f64], j: f64) -> Result<f64, EvalError>;
    fn g(
        &self,
        t: f64,
        x: &[f64],
        y: f64,
        z: &[f64],
        j: f64,
        out: &mut [f64],
    ) -> Result<(), EvalError>;
    fn h(&self, t: f64, x: &[f64], y: f64) -> Result<f64, EvalError>;
    fn lipschitz(&self) -> LipschitzDecl {
        LipschitzDecl::default()
    }
}

impl Coefficients for CompiledCoeffs {
    fn dim_z(&self) -> usize {
        self.dim_w
    }

    fn dim_b(&self) -> usize {
        self.dim_b
    }

    fn f(&self, t: f64, x: &[f64], y: f64, z: &[f64], j: f64) -> Result<f64, EvalError> {
        self.eval_f(t, x, y, z, j)
    }

    fn g(
        &self,
        t: f64,
        x: &[f64],
        y: f64,
        z: &[f64],
        j: f64,
        out: &mut [f64],
    ) -> Result<(), EvalError> {
        self.eval_g(t, x, y, z, j, out)
    }

    fn h(&self, t: f64, x: &[f64], y: f64) -> Result<f64, EvalError> {
        self.eval_h(t, x, y)
    }

    fn lipschitz(&self) -> LipschitzDecl {
        self.lipschitz
    }
}

/// Closure-backed coefficients, used by oracle tests and internal adapters.
pub struct FnCoefficients<F, G, H>
where
    F: Fn(f64, &[f64], f64, &[f64], f64) -> f64 + Sync,
    G: Fn(f64, &[f64], f64, &[f64], f64, &mut [f64]) + Sync,
    H: Fn(f64, &[f64], f64) -> f64 + Sync,
{
    pub dim_z: usize,
    pub dim_b: usize,
    pub f: F,
    pub g: G,
    pub h: H,
    pub lipschitz: LipschitzDecl,
}

impl<F, G, H> Coefficients for FnCoefficients<F, G, H>
where
    F: Fn(f64, &[f64], f64, &[f64], f64) -> f64 + Sync,
    G: Fn(f64, &[f64], f64, &[f64], f64, &mut [f64]) + Sync,
    H: Fn(f64, &[f64], f64) -> f64 + Sync,
{
    fn dim_z(&self) -> usize {
        self.dim_z
    }

    fn dim_b(&self) -> usize {
        self.dim_b
    }

    fn f(&self, t: f64, x: &[f64], y: f64, z: &[f64], j: f64) -> Result<f64, EvalError> {
        Ok((self.f)(t, x, y, z, j))
    }

    fn g(
        &self,
        t: f64,
        x: &[f64],
        y: f64,
        z: &[f64],
        j: f64,
        out: &mut [f64],
    ) -> Result<(), EvalError> {
        (self.g)(t, x, y, z, j, out);
        Ok(())
    }

    fn h(&self, t: f64, x: &[f64], y: f64) -> Result<f64, EvalError> {
        Ok((self.h)(t, x, y))
    }

    fn lipschitz(&self) -> LipschitzDecl {
        self.lipschitz
    }
}

// ---------------------------------------------------------------------------
// solution container
// ---------------------------------------------------------------------------

/// Regression Monte Carlo budget.
#[derive(Debug, Clone, Copy)]
pub struct RegressionConfig {
    /// Total polynomial degree of the feature basis.
    pub degree: usize,
    /// Number of frozen backward scenarios (outer loop).
    pub n_outer: usize,
    /// Inner `(W, N)` paths per scenario.
    pub n_inner: usize,
    /// Relative ridge weight; effective ridge is
    /// `ridge * ||X||_F^2 / n_basis`.
    pub ridge: f64,
}

impl Default for RegressionConfig {
    fn default() -> Self {
        Self {
            degree: 3,
            n_outer: 16,
            n_inner: 512,
            ridge: 1e-8,
        }
    }
}

/// Discretized `(Y, Z, J)` per inner path; `J` stored per Lévy atom.
#[derive(Debug, Clone)]
pub struct SolutionTriple {
    pub grid: Arc<TimeGrid>,
    pub start_index: usize,
    pub n_inner: usize,
    pub dim_z: usize,
    pub n_atoms: usize,
    /// `n_inner x n_points`
    pub y: Vec<f64>,
    /// `n_inner x n_points x dim_z`
    pub z: Vec<f64>,
    /// `n_inner x n_points x n_atoms`
    pub j: Vec<f64>,
    /// Picard sweeps performed.
    pub iterations: usize,
    /// Weighted-norm residual after each sweep.
    pub residuals: Vec<f64>,
}

impl SolutionTriple {
    fn zeros(
        grid: &Arc<TimeGrid>,
        start_index: usize,
        n_inner: usize,
        dim_z: usize,
        n_atoms: usize,
    ) -> Self {
        let np = grid.n_points();
        Self {
            grid: grid.clone(),
            start_index,
            n_inner,
            dim_z,
            n_atoms,
            y: vec![0.0; n_inner * np],
            z: vec![0.0; n_inner * np * dim_z],
            j: vec![0.0; n_inner * np * n_atoms],
            iterations: 0,
            residuals: Vec::new(),
        }
    }

    #[inline]
    pub fn y_at(&self, path: usize, k: usize) -> f64 {
        self.y[path * self.grid.n_points() + k]
    }

    #[inline]
    pub fn z_at(&self, path: usize, k: usize) -> &[f64] {
        let base = (path * self.grid.n_points() + k) * self.dim_z;
        &self.z[base..base + self.dim_z]
    }

    #[inline]
    pub fn j_at(&self, path: usize, k: usize) -> &[f64] {
        let base = (path * self.grid.n_points() + k) * self.n_atoms;
        &self.j[base..base + self.n_atoms]
    }

    /// nu-aggregate of `J` at `(path, k)` under the given atom weights.
    pub fn j_aggregate(&self, path: usize, k: usize, weights: &[f64]) -> f64 {
        self.j_at(path, k)
            .iter()
            .zip(weights)
            .map(|(j, w)| j * w)
            .sum()
    }

    /// Mean of `Y` over inner paths at the start index.
    pub fn y_start_mean(&self) -> f64 {
        let col: Vec<f64> = (0..self.n_inner)
            .map(|i| self.y_at(i, self.start_index))
            .collect();
        mean(&col)
    }

    pub fn y_column(&self, k: usize) -> Vec<f64> {
        (0..self.n_inner).map(|i| self.y_at(i, k)).collect()
    }
}

// ---------------------------------------------------------------------------
// Picard solver
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
struct PicardWeights {
    lambda: f64,
    mu: f64,
    lambda_hat: f64,
    mu_hat: f64,
}

/// Norm weights from the contraction proof: with `eps = C/(3/8 - alpha/2)`,
/// `lambda = eps + (3/4)(C/eps + C)/(C/eps + alpha)`,
/// `mu = 1 + C/(C/eps + alpha)`, and the hatted pair are the `ds`/`dA`
/// weights on `Y^2`.
fn picard_weights(decl: LipschitzDecl, a_has_jumps: bool) -> Result<PicardWeights, SolverError> {
    let c = decl.c;
    let mut alpha = decl.alpha;
    if a_has_jumps && alpha >= 0.75 {
        return Err(SolverError::InvalidAlpha { alpha });
    }
    // continuous A admits alpha < 1; the weight formulas still need
    // alpha < 3/4, so cap the value used for the stopping norm
    alpha = alpha.min(0.7499);
    let eps = c / (0.375 - alpha / 2.0);
    let ratio = c / eps;
    let lambda_hat = (ratio + c) / (ratio + alpha);
    let mu_hat = c / (ratio + alpha);
    Ok(PicardWeights {
        lambda: eps + 0.75 * lambda_hat,
        mu: 1.0 + mu_hat,
        lambda_hat,
        mu_hat,
    })
}

/// Weighted norm (squared) of the difference between two iterates, the
/// discretization of
/// `E int e^{lambda s + mu A}([lhat dY^2 + dZ^2 + |dJ|_nu^2] ds + mhat dY^2 dA)`.
#[allow(clippy::too_many_arguments)]
fn weighted_diff_norm2(
    new: &SolutionTriple,
    old: &SolutionTriple,
    a: &AProcesses,
    weights: PicardWeights,
    atom_weights: &[f64],
    start: usize,
) -> f64 {
    let grid = &new.grid;
    let n = grid.n_steps();
    let dt = grid.dt();
    let mut acc = 0.0;
    for i in 0..new.n_inner {
        let ap = a.get(i);
        let mut path_acc = 0.0;
        for k in start..n {
            let t = grid.time(k);
            let wfac = (weights.lambda * t + weights.mu * ap.value(k)).exp();
            let dy = new.y_at(i, k) - old.y_at(i, k);
            let dz2: f64 = new
                .z_at(i, k)
                .iter()
                .zip(old.z_at(i, k))
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            let dj2: f64 = new
                .j_at(i, k)
                .iter()
                .zip(old.j_at(i, k))
                .zip(atom_weights)
                .map(|((a, b), w)| (a - b) * (a - b) * w)
                .sum();
            path_acc += wfac
                * ((weights.lambda_hat * dy * dy + dz2 + dj2) * dt
                    + weights.mu_hat * dy * dy * ap.increment(k));
        }
        acc += path_acc;
    }
    acc / new.n_inner as f64
}

/// Regression operators for every time step of one bundle, factorized once
/// and reused across Picard sweeps and targets.
struct StepRegressions {
    solvers: Vec<Option<RidgeSolver>>,
}

fn build_regressions(
    bundle: &PathBundle,
    reg: &RegressionConfig,
    start: usize,
) -> Result<StepRegressions, SolverError> {
    let n = bundle.grid.n_steps();
    let n_inner = bundle.n_inner();
    let fdim = bundle.feature_dim();
    let n_basis = FeatureBasis::n_basis(fdim, reg.degree);
    if n_inner < 2 {
        return Err(SolverError::BudgetTooSmall(format!(
            "n_inner = {n_inner}, need at least 2"
        )));
    }
    if n_inner < n_basis + 1 {
        return Err(SolverError::BudgetTooSmall(format!(
            "n_inner = {n_inner} below basis dimension {n_basis} + 1"
        )));
    }
    let mut solvers = Vec::with_capacity(n + 1);
    let mut states = vec![0.0; n_inner * fdim];
    for k in 0..=n {
        if k < start || k == n {
            solvers.push(None);
            continue;
        }
        for i in 0..n_inner {
            bundle.feature_state(i, k, &mut states[i * fdim..(i + 1) * fdim]);
        }
        let basis = FeatureBasis::from_samples(&states, fdim, reg.degree);
        let design = basis.design(&states);
        solvers.push(Some(RidgeSolver::factorize(
            design,
            n_inner,
            basis.len(),
            reg.ridge,
        )?));
    }
    Ok(StepRegressions { solvers })
}

impl StepRegressions {
    fn fitted(&self, k: usize, targets: &[f64]) -> Vec<f64> {
        self.solvers[k]
            .as_ref()
            .expect("regression requested outside solve window")
            .fitted(targets)
    }
}

/// Solves the equation from time zero; see [`solve_picard_from`].
pub fn solve_picard<C: Coefficients>(
    coeffs: &C,
    xi: &[f64],
    a: &AProcesses,
    bundle: &PathBundle,
    reg: &RegressionConfig,
    tol: f64,
    max_iter: usize,
) -> Result<SolutionTriple, SolverError> {
    solve_picard_from(coeffs, xi, a, bundle, 0, reg, tol, max_iter)
}

/// Backward Picard iteration on `[t_{start}, T]`.
///
/// Each sweep freezes the coefficient arguments at the previous iterate and
/// runs the one-step backward recursion
///
/// ```text
/// Y(t_k) = E^[ Y(t_{k+1}) + f(t_k, Th(t_k)) dt + h(t_k, y(t_k)) dA_k
///              + g(t_{k+1}, Th(t_{k+1})) . dB_k | G_{t_k} ]
/// Z(t_k) = E^[ Y(t_{k+1}) dW_k ] / dt
/// J(t_k, e_a) = E^[ Y(t_{k+1}) (N-mass of atom a on cell k - w_a dt) ] / (w_a dt)
/// ```
///
/// with `E^` the per-step regression estimator. `g` is sampled at the right
/// endpoint, the backward-integral convention. Values before `start` are
/// frozen at the start value.
#[allow(clippy::too_many_arguments)]
pub fn solve_picard_from<C: Coefficients>(
    coeffs: &C,
    xi: &[f64],
    a: &AProcesses,
    bundle: &PathBundle,
    start: usize,
    reg: &RegressionConfig,
    tol: f64,
    max_iter: usize,
) -> Result<SolutionTriple, SolverError> {
    bundle.validate()?;
    let grid = &bundle.grid;
    let n = grid.n_steps();
    let np = grid.n_points();
    let n_inner = bundle.n_inner();
    if xi.len() != n_inner {
        return Err(SolverError::BudgetTooSmall(format!(
            "xi has {} entries for {} inner paths",
            xi.len(),
            n_inner
        )));
    }
    if max_iter == 0 {
        return Err(SolverError::NoConvergence {
            iterations: 0,
            residual: f64::INFINITY,
        });
    }
    let dim_z = coeffs.dim_z();
    let dim_b = coeffs.dim_b();
    if dim_z != bundle.dim_w() || dim_b != bundle.dim_b() {
        return Err(SolverError::GridMismatch);
    }
    let n_atoms = bundle.n_atoms();
    let atom_weights: Vec<f64> = bundle
        .jumps
        .first()
        .map(|j| j.levy().atoms().iter().map(|a| a.weight).collect())
        .unwrap_or_default();
    let weights = picard_weights(coeffs.lipschitz(), a.has_jumps())?;
    let regs = build_regressions(bundle, reg, start)?;
    let dt = grid.dt();

    // previous iterate; start from the mean terminal value so a
    // state-independent equation converges immediately
    let mut prev = SolutionTriple::zeros(grid, start, n_inner, dim_z, n_atoms);
    let xi_mean = mean(xi);
    for i in 0..n_inner {
        for k in 0..np {
            prev.y[i * np + k] = if k == n { xi[i] } else { xi_mean };
        }
    }

    let mut targets = vec![0.0; n_inner];
    let mut gbuf = vec![0.0; dim_b];
    let mut residuals = Vec::new();

    for sweep in 1..=max_iter {
        let mut cur = SolutionTriple::zeros(grid, start, n_inner, dim_z, n_atoms);
        for i in 0..n_inner {
            cur.y[i * np + n] = xi[i];
        }
        for k in (start..n).rev() {
            let t_k = grid.time(k);
            let t_k1 = grid.time(k + 1);
            // conditional-mean target for Y
            for i in 0..n_inner {
                let y_next = cur.y_at(i, k + 1);
                let x_k = bundle.coeff_state(i, k);
                let y_prev = prev.y_at(i, k);
                let z_prev = prev.z_at(i, k);
                let j_prev = prev.j_aggregate(i, k, &atom_weights);
                let f_val = coeffs.f(t_k, x_k, y_prev, z_prev, j_prev)?;
                let h_val = coeffs.h(t_k, x_k, y_prev)?;
                let da = a.get(i).increment(k);
                coeffs.g(
                    t_k1,
                    bundle.coeff_state(i, k + 1),
                    prev.y_at(i, k + 1),
                    prev.z_at(i, k + 1),
                    prev.j_aggregate(i, k + 1, &atom_weights),
                    &mut gbuf,
                )?;
                let g_db: f64 = gbuf
                    .iter()
                    .zip(bundle.b.increments_at(k))
                    .map(|(g, db)| g * db)
                    .sum();
                targets[i] = y_next + f_val * dt + h_val * da + g_db;
            }
            let fitted = regs.fitted(k, &targets);
            for i in 0..n_inner {
                cur.y[i * np + k] = fitted[i];
            }
            // martingale-representation estimators for Z and J
            for c in 0..dim_z {
                for i in 0..n_inner {
                    targets[i] = cur.y_at(i, k + 1) * bundle.w[i].increment(k, c) / dt;
                }
                let fitted = regs.fitted(k, &targets);
                for i in 0..n_inner {
                    cur.z[(i * np + k) * dim_z + c] = fitted[i];
                }
            }
            for atom in 0..n_atoms {
                let w_a = atom_weights[atom];
                for i in 0..n_inner {
                    targets[i] =
                        cur.y_at(i, k + 1) * bundle.jumps[i].compensated_mass(k, atom) / (w_a * dt);
                }
                let fitted = regs.fitted(k, &targets);
                for i in 0..n_inner {
                    cur.j[(i * np + k) * n_atoms + atom] = fitted[i];
                }
            }
        }
        // freeze values before the start index at the start value
        for i in 0..n_inner {
            let y0 = cur.y_at(i, start);
            for k in 0..start {
                cur.y[i * np + k] = y0;
            }
        }
        let res2 = weighted_diff_norm2(&cur, &prev, a, weights, &atom_weights, start);
        let res = res2.sqrt();
        residuals.push(res);
        prev = cur;
        if res <= tol {
            prev.iterations = sweep;
            prev.residuals = residuals;
            return Ok(prev);
        }
    }
    Err(SolverError::NoConvergence {
        iterations: max_iter,
        residual: *residuals.last().unwrap_or(&f64::INFINITY),
    })
}

// ---------------------------------------------------------------------------
// linear closed form
// ---------------------------------------------------------------------------

/// Coefficients of the linear equation
///
/// ```text
/// dY = -[phi + alpha Y + beta.Z + int gamma(e) J(e) nu(de)] dt
///      - [varphi + delta Y] dB + Z dW + int J dN~ - h dA,    Y(T) = xi,
/// ```
///
/// all deterministic per-time arrays except the per-path terminal `xi`.
#[derive(Debug, Clone)]
pub struct LinearCoeffs {
    pub dim_z: usize,
    pub dim_b: usize,
    pub n_atoms: usize,
    /// `n_points`
    pub alpha: Vec<f64>,
    /// `n_points x dim_z`
    pub beta: Vec<f64>,
    /// `n_points x n_atoms`, entries > -1
    pub gamma: Vec<f64>,
    /// `n_points x dim_b`
    pub delta: Vec<f64>,
    /// `n_points`
    pub phi: Vec<f64>,
    /// `n_points x dim_b`
    pub varphi: Vec<f64>,
    /// `n_points`
    pub h: Vec<f64>,
    /// terminal value per inner path
    pub xi: Vec<f64>,
}

impl LinearCoeffs {
    /// Constant-in-time coefficients.
    #[allow(clippy::too_many_arguments)]
    pub fn constant(
        n_points: usize,
        alpha: f64,
        beta: &[f64],
        gamma: &[f64],
        delta: &[f64],
        phi: f64,
        varphi: &[f64],
        h: f64,
        xi: Vec<f64>,
    ) -> Self {
        let rep = |v: &[f64]| {
            let mut out = Vec::with_capacity(n_points * v.len());
            for _ in 0..n_points {
                out.extend_from_slice(v);
            }
            out
        };
        Self {
            dim_z: beta.len(),
            dim_b: delta.len(),
            n_atoms: gamma.len(),
            alpha: vec![alpha; n_points],
            beta: rep(beta),
            gamma: rep(gamma),
            delta: rep(delta),
            phi: vec![phi; n_points],
            varphi: rep(varphi),
            h: vec![h; n_points],
            xi,
        }
    }

    fn validate(&self, bundle: &PathBundle) -> Result<(), SolverError> {
        let np = bundle.grid.n_points();
        if self.alpha.len() != np
            || self.beta.len() != np * self.dim_z
            || self.gamma.len() != np * self.n_atoms
            || self.delta.len() != np * self.dim_b
            || self.phi.len() != np
            || self.varphi.len() != np * self.dim_b
            || self.h.len() != np
        {
            return Err(SolverError::GridMismatch);
        }
        if self.dim_z != bundle.dim_w()
            || self.dim_b != bundle.dim_b()
            || self.n_atoms != bundle.n_atoms()
        {
            return Err(SolverError::GridMismatch);
        }
        if self.gamma.iter().any(|g| *g <= -1.0) {
            return Err(SolverError::NonPositiveGamma);
        }
        Ok(())
    }

    fn beta_at(&self, k: usize) -> &[f64] {
        &self.beta[k * self.dim_z..(k + 1) * self.dim_z]
    }

    fn gamma_at(&self, k: usize) -> &[f64] {
        &self.gamma[k * self.n_atoms..(k + 1) * self.n_atoms]
    }

    fn delta_at(&self, k: usize) -> &[f64] {
        &self.delta[k * self.dim_b..(k + 1) * self.dim_b]
    }

    fn varphi_at(&self, k: usize) -> &[f64] {
        &self.varphi[k * self.dim_b..(k + 1) * self.dim_b]
    }
}

/// Exponential process of the linear equation, stored through its exponent
/// so ratios `Gamma(s)/Gamma(t)` are exact.
#[derive(Debug, Clone)]
pub struct GammaProcess {
    pub n_inner: usize,
    pub n_points: usize,
    /// `n_inner x n_points`: `Gamma(t_k) = exp(exponents[i,k])`
    pub exponents: Vec<f64>,
    /// log factor contributed by Poisson events snapped to `t_k`; removing
    /// it gives the pre-jump value `Gamma(t_k-)`
    pub event_logfac: Vec<f64>,
}

impl GammaProcess {
    #[inline]
    pub fn exponent(&self, path: usize, k: usize) -> f64 {
        self.exponents[path * self.n_points + k]
    }

    #[inline]
    pub fn value(&self, path: usize, k: usize) -> f64 {
        self.exponent(path, k).exp()
    }

    /// `Gamma(t_to) / Gamma(t_from)`, exact in the exponent.
    #[inline]
    pub fn ratio(&self, path: usize, from: usize, to: usize) -> f64 {
        (self.exponent(path, to) - self.exponent(path, from)).exp()
    }

    /// Left limit at `t_k`: the value with same-time Poisson factors removed.
    #[inline]
    pub fn value_left(&self, path: usize, k: usize) -> f64 {
        (self.exponent(path, k) - self.event_logfac[path * self.n_points + k]).exp()
    }
}

/// Evaluates the exponential formula
///
/// ```text
/// Gamma(t) = exp( int_0^t [alpha - delta^2/2 - beta^2/2] ds
///               + int beta dW + int delta dB (backward)
///               + int int ln(1+gamma) dN~ + int int [ln(1+gamma)-gamma] nu ds )
/// ```
///
/// on the grid, per inner path. `Gamma(0) = 1` exactly and `Gamma > 0`.
pub fn gamma_process(lin: &LinearCoeffs, bundle: &PathBundle) -> Result<GammaProcess, SolverError> {
    bundle.validate()?;
    lin.validate(bundle)?;
    let grid = &bundle.grid;
    let n = grid.n_steps();
    let np = grid.n_points();
    let dt = grid.dt();
    let n_inner = bundle.n_inner();
    let mut exponents = vec![0.0; n_inner * np];
    let mut event_logfac = vec![0.0; n_inner * np];
    let atom_weights: Vec<f64> = bundle
        .jumps
        .first()
        .map(|j| j.levy().atoms().iter().map(|a| a.weight).collect())
        .unwrap_or_default();
    for i in 0..n_inner {
        let w = &bundle.w[i];
        let jm = &bundle.jumps[i];
        let mut e = 0.0;
        for k in 0..n {
            let beta = lin.beta_at(k);
            let delta_r = lin.delta_at(k + 1);
            let beta2: f64 = beta.iter().map(|b| b * b).sum();
            let delta2: f64 = lin.delta_at(k).iter().map(|d| d * d).sum();
            let mut incr = (lin.alpha[k] - 0.5 * delta2 - 0.5 * beta2) * dt;
            for c in 0..lin.dim_z {
                incr += beta[c] * w.increment(k, c);
            }
            for c in 0..lin.dim_b {
                incr += delta_r[c] * bundle.b.increment(k, c);
            }
            // Poisson events at the right endpoint, compensator over the cell
            let gamma_r = lin.gamma_at(k + 1);
            let gamma_l = lin.gamma_at(k);
            let mut logfac = 0.0;
            for atom in 0..lin.n_atoms {
                let cnt = jm.count(k, atom) as f64;
                if cnt > 0.0 {
                    logfac += cnt * (1.0 + gamma_r[atom]).ln();
                }
                incr -= dt * gamma_l[atom] * atom_weights[atom];
            }
            incr += logfac;
            e += incr;
            exponents[i * np + k + 1] = e;
            event_logfac[i * np + k + 1] = logfac;
        }
    }
    Ok(GammaProcess {
        n_inner,
        n_points: np,
        exponents,
        event_logfac,
    })
}

/// Per-time estimate of the linear solution, averaged over the inner paths
/// of one bundle.
#[derive(Debug, Clone)]
pub struct LinearSolution {
    pub y: Vec<f64>,
    pub se: Vec<f64>,
}

/// Per-path closed form of the linear equation:
///
/// ```text
/// Y(t) = E[ G(T)/G(t) xi + int_t^T G(s)/G(t) (phi - delta.varphi) ds
///         + int_t^T G(s)/G(t) h dA + int_t^T G(s)/G(t) varphi dB
///         + sum_{t<s<=T} G(s-)/G(t) (int gamma(s,e) N({s},de)) h(s) dA(s) | G_t ],
/// ```
///
/// estimated by averaging the bracket over the inner paths (the backward
/// path is frozen per bundle). At `t = 0` this is the exact conditional
/// expectation given `B`; at later times the inner average estimates the
/// `F_T^B`-conditional mean of `Y(t)`.
pub fn solve_linear(
    lin: &LinearCoeffs,
    a: &IncreasingProcessPath,
    bundle: &PathBundle,
    reg: &RegressionConfig,
) -> Result<LinearSolution, SolverError> {
    bundle.validate()?;
    lin.validate(bundle)?;
    if reg.n_inner < 2 || bundle.n_inner() < 2 {
        return Err(SolverError::BudgetTooSmall(
            "solve_linear needs n_inner >= 2".into(),
        ));
    }
    if lin.xi.len() != bundle.n_inner() {
        return Err(SolverError::BudgetTooSmall(format!(
            "xi has {} entries for {} inner paths",
            lin.xi.len(),
            bundle.n_inner()
        )));
    }
    if a.grid().as_ref() != bundle.grid.as_ref() {
        return Err(SolverError::GridMismatch);
    }
    let gamma = gamma_process(lin, bundle)?;
    let grid = &bundle.grid;
    let n = grid.n_steps();
    let np = grid.n_points();
    let dt = grid.dt();
    let n_inner = bundle.n_inner();
    // suffix accumulation of the bracket, then division by Gamma(t_k)
    let mut brackets = vec![0.0; n_inner * np];
    for i in 0..n_inner {
        let mut s = gamma.value(i, n) * lin.xi[i];
        brackets[i * np + n] = s;
        for k in (0..n).rev() {
            let g_k = gamma.value(i, k);
            let g_r = gamma.value(i, k + 1);
            let g_r_left = gamma.value_left(i, k + 1);
            let delta = lin.delta_at(k);
            let varphi = lin.varphi_at(k);
            let varphi_r = lin.varphi_at(k + 1);
            let ddotv: f64 = delta.iter().zip(varphi).map(|(d, v)| d * v).sum();
            s += g_k * (lin.phi[k] - ddotv) * dt;
            s += g_k * lin.h[k] * a.cont_increment(k);
            let da_jump = a.jump_at_cell_end(k);
            if da_jump > 0.0 {
                s += g_r_left * lin.h[k + 1] * da_jump;
                // jump-interaction term, realized when Poisson events snap
                // to the same grid time as a jump of A
                let gamma_r = lin.gamma_at(k + 1);
                let mut nmass = 0.0;
                for atom in 0..lin.n_atoms {
                    nmass += bundle.jumps[i].count(k, atom) as f64 * gamma_r[atom];
                }
                if nmass != 0.0 {
                    s += g_r_left * nmass * lin.h[k + 1] * da_jump;
                }
            }
            let db = bundle.b.increments_at(k);
            let vdotb: f64 = varphi_r.iter().zip(db).map(|(v, b)| v * b).sum();
            s += g_r * vdotb;
            brackets[i * np + k] = s;
        }
    }
    let mut y = vec![0.0; np];
    let mut se = vec![0.0; np];
    let mut col = vec![0.0; n_inner];
    for k in 0..np {
        for i in 0..n_inner {
            col[i] = brackets[i * np + k] / gamma.value(i, k);
        }
        y[k] = mean(&col);
        se[k] = stderr_of_mean(&col);
    }
    Ok(LinearSolution { y, se })
}

// ---------------------------------------------------------------------------
// comparison check
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub struct ComparisonReport {
    /// Minimum of `Y_2 - Y_1` over paths and times.
    pub min_diff: f64,
    /// Fraction of `(path, time)` values below `-tol`.
    pub violation_fraction: f64,
    pub n_values: usize,
}

/// Pointwise dominance check between two solutions on the same grid and
/// driver set.
pub fn check_comparison(
    sol1: &SolutionTriple,
    sol2: &SolutionTriple,
    tol: f64,
) -> Result<ComparisonReport, SolverError> {
    if sol1.grid.as_ref() != sol2.grid.as_ref()
        || sol1.n_inner != sol2.n_inner
        || sol1.start_index != sol2.start_index
    {
        return Err(SolverError::GridMismatch);
    }
    let np = sol1.grid.n_points();
    let mut min_diff = f64::INFINITY;
    let mut violations = 0usize;
    let mut total = 0usize;
    for i in 0..sol1.n_inner {
        for k in sol1.start_index..np {
            let d = sol2.y_at(i, k) - sol1.y_at(i, k);
            min_diff = min_diff.min(d);
            if d < -tol {
                violations += 1;
            }
            total += 1;
        }
    }
    Ok(ComparisonReport {
        min_diff,
        violation_fraction: violations as f64 / total as f64,
        n_values: total,
    })
}

// ---------------------------------------------------------------------------
// mean-square Ito identity check
// ---------------------------------------------------------------------------

/// Deterministic per-time components of a semimartingale
/// `alpha(t) = alpha0 + int beta ds + int gamma dB + int delta dW
///           + int int theta dN~ + int lambda dA`.
///
/// The backward component is realized through its suffix integral so that
/// `alpha(t)` reads only future increments of `B`; `alpha(0)` then carries
/// the full backward integral, which is what adaptedness to the doubly
/// stochastic filtration requires.
#[derive(Debug, Clone)]
pub struct ItoComponents {
    pub alpha0: f64,
    /// `n_points`
    pub beta: Vec<f64>,
    /// `n_points x dim_b`
    pub gamma: Vec<f64>,
    /// `n_points x dim_w`
    pub delta: Vec<f64>,
    /// `n_points x n_atoms`
    pub theta: Vec<f64>,
    /// `n_points`
    pub lambda: Vec<f64>,
}

#[derive(Debug, Clone, Copy)]
pub struct ItoCheckReport {
    pub lhs_mean: f64,
    pub rhs_mean: f64,
    pub diff_mean: f64,
    pub diff_stderr: f64,
    /// `|diff_mean| / diff_stderr`; zero when both sides agree exactly.
    pub residual: f64,
}

/// Builds `alpha` pathwise by forward accumulation and compares
/// `E[alpha^2(T)]` with the mean-square expansion
///
/// ```text
/// E[alpha^2(0)] + E int (2 alpha beta - |gamma|^2 + |delta|^2) ds
/// + E int int theta^2 nu(de) ds + 2 E int alpha lambda dA
/// + E sum lambda^2 (dA)^2 + E sum (int theta N({s},de)) lambda dA(s),
/// ```
///
/// returning the studentized residual of the per-path difference. The
/// expectation is unconditional, so several scenarios (each with its own
/// backward path) must be supplied whenever `gamma` is nonzero; the check
/// runs over every `(scenario, inner path)` pair.
pub fn ito_identity_check(
    comps: &ItoComponents,
    a: &IncreasingProcessPath,
    scenarios: &[PathBundle],
) -> Result<ItoCheckReport, SolverError> {
    let first = scenarios
        .first()
        .ok_or_else(|| SolverError::BudgetTooSmall("no scenarios supplied".into()))?;
    let grid = &first.grid;
    if a.grid().as_ref() != grid.as_ref() {
        return Err(SolverError::GridMismatch);
    }
    let n = grid.n_steps();
    let np = grid.n_points();
    let dt = grid.dt();
    let dim_b = first.dim_b();
    let dim_w = first.dim_w();
    let n_atoms = first.n_atoms();
    if comps.beta.len() != np
        || comps.gamma.len() != np * dim_b
        || comps.delta.len() != np * dim_w
        || comps.theta.len() != np * n_atoms
        || comps.lambda.len() != np
    {
        return Err(SolverError::GridMismatch);
    }
    let atom_weights: Vec<f64> = first
        .jumps
        .first()
        .map(|j| j.levy().atoms().iter().map(|a| a.weight).collect())
        .unwrap_or_default();
    let mut diffs = Vec::new();
    let mut scenario_means = Vec::with_capacity(scenarios.len());
    let mut lhs_acc = 0.0;
    let mut rhs_acc = 0.0;
    for bundle in scenarios {
        let cluster_from = diffs.len();
        bundle.validate()?;
        if bundle.grid.as_ref() != grid.as_ref() {
            return Err(SolverError::GridMismatch);
        }
        for i in 0..bundle.n_inner() {
            let w = &bundle.w[i];
            let jm = &bundle.jumps[i];
            // suffix of the backward component:
            // S(k) = sum_{l>=k} gamma(t_{l+1}).dB_l
            let mut suffix_gamma = vec![0.0; np];
            for k in (0..n).rev() {
                let g_r = &comps.gamma[(k + 1) * dim_b..(k + 2) * dim_b];
                let dot: f64 = g_r
                    .iter()
                    .zip(bundle.b.increments_at(k))
                    .map(|(g, db)| g * db)
                    .sum();
                suffix_gamma[k] = suffix_gamma[k + 1] + dot;
            }
            let mut alpha = comps.alpha0 - suffix_gamma[0];
            let mut rhs = alpha * alpha;
            for k in 0..n {
                let beta_k = comps.beta[k];
                let lambda_k = comps.lambda[k];
                let delta_k = &comps.delta[k * dim_w..(k + 1) * dim_w];
                let theta_r = &comps.theta[(k + 1) * n_atoms..(k + 2) * n_atoms];
                let gamma_r = &comps.gamma[(k + 1) * dim_b..(k + 2) * dim_b];
                let da_cont = a.cont_increment(k);
                // flow part of the cell
                let mut d_flow = beta_k * dt + lambda_k * da_cont;
                for c in 0..dim_w {
                    d_flow += delta_k[c] * w.increment(k, c);
                }
                for c in 0..dim_b {
                    d_flow += gamma_r[c] * bundle.b.increment(k, c);
                }
                let mut comp_theta = 0.0;
                for atom in 0..n_atoms {
                    comp_theta += theta_r[atom] * atom_weights[atom];
                }
                d_flow -= comp_theta * dt;
                // kept terms of the expansion, flow stage
                let delta2: f64 = delta_k.iter().map(|d| d * d).sum();
                let gamma2: f64 = gamma_r.iter().map(|g| g * g).sum();
                let theta2nu: f64 = theta_r
                    .iter()
                    .zip(&atom_weights)
                    .map(|(t, w)| t * t * w)
                    .sum();
                rhs += 2.0 * alpha * (beta_k * dt + lambda_k * da_cont);
                rhs += (delta2 - gamma2 + theta2nu) * dt;
                let pre_jump = alpha + d_flow;
                // jump stage at the right endpoint
                let mut poisson = 0.0;
                for atom in 0..n_atoms {
                    let cnt = jm.count(k, atom) as f64;
                    if cnt > 0.0 {
                        poisson += cnt * theta_r[atom];
                    }
                }
                let da_jump = a.jump_at_cell_end(k);
                let lambda_r = comps.lambda[k + 1];
                if da_jump > 0.0 {
                    rhs += 2.0 * pre_jump * lambda_r * da_jump;
                    rhs += lambda_r * lambda_r * da_jump * da_jump;
                    rhs += poisson * lambda_r * da_jump;
                }
                alpha = pre_jump + poisson + lambda_r * da_jump;
            }
            let lhs = alpha * alpha;
            lhs_acc += lhs;
            rhs_acc += rhs;
            diffs.push(lhs - rhs);
        }
        scenario_means.push(mean(&diffs[cluster_from..]));
    }
    let lhs_mean = lhs_acc / diffs.len() as f64;
    let rhs_mean = rhs_acc / diffs.len() as f64;
    let diff_mean = mean(&diffs);
    // inner paths within a scenario share its backward path, so the
    // independent units are the scenarios whenever there is more than one
    let diff_stderr = if scenario_means.len() > 1 {
        stderr_of_mean(&scenario_means)
    } else {
        stderr_of_mean(&diffs)
    };
    let residual = if diff_stderr > 1e-300 {
        (diff_mean / diff_stderr).abs()
    } else if diff_mean.abs() < 1e-10 {
        0.0
    } else {
        f64::INFINITY
    };
    Ok(ItoCheckReport {
        lhs_mean,
        rhs_mean,
        diff_mean,
        diff_stderr,
        residual,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::paths::LevyAtom;

    fn grid(t: f64, n: usize) -> Arc<TimeGrid> {
        Arc::new(TimeGrid::new(t, n).unwrap())
    }

    fn bundle_no_jumps(g: &Arc<TimeGrid>, n_inner: usize, seed: u64) -> PathBundle {
        PathBundle::generate(g, 1, 1, &Arc::new(LevySpec::none()), n_inner, seed, 40, 0).unwrap()
    }

    fn zero_coeffs() -> FnCoefficients<
        impl Fn(f64, &[f64], f64, &[f64], f64) -> f64 + Sync,
        impl Fn(f64, &[f64], f64, &[f64], f64, &mut [f64]) + Sync,
        impl Fn(f64, &[f64], f64) -> f64 + Sync,
    > {
        FnCoefficients {
            dim_z: 1,
            dim_b: 1,
            f: |_, _, _, _: &[f64], _| 0.0,
            g: |_, _, _, _: &[f64], _, out: &mut [f64]| out.fill(0.0),
            h: |_, _, _| 0.0,
            lipschitz: LipschitzDecl::default(),
        }
    }

    #[test]
    fn gamma_all_zero_coefficients_is_one() {
        let g = grid(1.0, 16);
        let bundle = bundle_no_jumps(&g, 8, 1);
        let lin = LinearCoeffs::constant(17, 0.0, &[0.0], &[], &[0.0], 0.0, &[0.0], 0.0, vec![0.0; 8]);
        let gp = gamma_process(&lin, &bundle).unwrap();
        for i in 0..8 {
            for k in 0..=16 {
                assert_eq!(gp.value(i, k), 1.0);
            }
        }
    }

    #[test]
    fn gamma_deterministic_drift_exact_exponential() {
        let g = grid(2.0, 32);
        let bundle = bundle_no_jumps(&g, 4, 2);
        let a = 0.7;
        let lin = LinearCoeffs::constant(33, a, &[0.0], &[], &[0.0], 0.0, &[0.0], 0.0, vec![0.0; 4]);
        let gp = gamma_process(&lin, &bundle).unwrap();
        for k in 0..=32 {
            let expect = (a * g.time(k)).exp();
            assert!((gp.value(0, k) - expect).abs() < 1e-12 * expect);
        }
    }

    #[test]
    fn gamma_exponential_martingale_mean() {
        let g = grid(1.0, 16);
        let bundle = bundle_no_jumps(&g, 100_000, 3);
        let lin = LinearCoeffs::constant(
            17,
            0.0,
            &[1.0],
            &[],
            &[0.0],
            0.0,
            &[0.0],
            0.0,
            vec![0.0; 100_000],
        );
        let gp = gamma_process(&lin, &bundle).unwrap();
        let finals: Vec<f64> = (0..100_000).map(|i| gp.value(i, 16)).collect();
        let (m, se) = (mean(&finals), stderr_of_mean(&finals));
        assert!((m - 1.0).abs() <= 4.0 * se, "mean {m} se {se}");
    }

    #[test]
    fn gamma_with_jumps_stays_positive_and_martingale() {
        let g = grid(1.0, 16);
        let levy = Arc::new(
            LevySpec::new(vec![
                LevyAtom { mark: 1.0, weight: 1.0 },
                LevyAtom { mark: -0.5, weight: 2.0 },
            ])
            .unwrap(),
        );
        let bundle =
            PathBundle::generate(&g, 1, 1, &levy, 50_000, 7, 41, 0).unwrap();
        let lin = LinearCoeffs::constant(
            17,
            0.0,
            &[0.0],
            &[0.8, -0.4],
            &[0.0],
            0.0,
            &[0.0],
            0.0,
            vec![0.0; 50_000],
        );
        let gp = gamma_process(&lin, &bundle).unwrap();
        let finals: Vec<f64> = (0..50_000).map(|i| gp.value(i, 16)).collect();
        assert!(finals.iter().all(|&v| v > 0.0));
        let (m, se) = (mean(&finals), stderr_of_mean(&finals));
        assert!((m - 1.0).abs() <= 4.0 * se, "mean {m} se {se}");
        // exponent additivity is exact by construction
        let r = gp.ratio(0, 3, 11) * gp.ratio(0, 11, 14);
        assert!((r - gp.ratio(0, 3, 14)).abs() <= 1e-12 * r.abs());
    }

    #[test]
    fn gamma_rejects_bad_jump_coefficient() {
        let g = grid(1.0, 4);
        let levy = Arc::new(
            LevySpec::new(vec![LevyAtom { mark: 1.0, weight: 1.0 }]).unwrap(),
        );
        let bundle = PathBundle::generate(&g, 1, 1, &levy, 4, 7, 42, 0).unwrap();
        let lin =
            LinearCoeffs::constant(5, 0.0, &[0.0], &[-1.0], &[0.0], 0.0, &[0.0], 0.0, vec![0.0; 4]);
        assert!(matches!(
            gamma_process(&lin, &bundle),
            Err(SolverError::NonPositiveGamma)
        ));
    }

    #[test]
    fn linear_constant_terminal() {
        let g = grid(1.0, 8);
        let bundle = bundle_no_jumps(&g, 16, 4);
        let lin = LinearCoeffs::constant(9, 0.0, &[0.0], &[], &[0.0], 0.0, &[0.0], 0.0, vec![3.25; 16]);
        let a = IncreasingProcessPath::zero(&g);
        let sol = solve_linear(&lin, &a, &bundle, &RegressionConfig::default()).unwrap();
        for k in 0..=8 {
            assert!((sol.y[k] - 3.25).abs() < 1e-12);
        }
    }

    #[test]
    fn linear_exponential_decay() {
        let g = grid(1.0, 64);
        let bundle = bundle_no_jumps(&g, 8, 5);
        let a_coef = 0.9;
        let lin =
            LinearCoeffs::constant(65, a_coef, &[0.0], &[], &[0.0], 0.0, &[0.0], 0.0, vec![1.0; 8]);
        let a = IncreasingProcessPath::zero(&g);
        let sol = solve_linear(&lin, &a, &bundle, &RegressionConfig::default()).unwrap();
        for k in 0..=64 {
            let expect = (a_coef * (1.0 - g.time(k))).exp();
            assert!(
                (sol.y[k] - expect).abs() < 1e-12 * expect,
                "k={k}: {} vs {expect}",
                sol.y[k]
            );
        }
    }

    #[test]
    fn linear_pure_drift_integrates_time() {
        let g = grid(1.0, 32);
        let bundle = bundle_no_jumps(&g, 8, 6);
        let lin = LinearCoeffs::constant(33, 0.0, &[0.0], &[], &[0.0], 1.0, &[0.0], 0.0, vec![0.0; 8]);
        let a = IncreasingProcessPath::zero(&g);
        let sol = solve_linear(&lin, &a, &bundle, &RegressionConfig::default()).unwrap();
        for k in 0..=32 {
            assert!((sol.y[k] - (1.0 - g.time(k))).abs() < 1e-12);
        }
    }

    #[test]
    fn linear_stieltjes_term() {
        // h = 1 against dA with density 1 and a jump of 0.5 at T/2:
        // Y(t) = A(T) - A(t), Gamma = 1
        let g = grid(1.0, 32);
        let bundle = bundle_no_jumps(&g, 8, 7);
        let lin = LinearCoeffs::constant(33, 0.0, &[0.0], &[], &[0.0], 0.0, &[0.0], 1.0, vec![0.0; 8]);
        let a = IncreasingProcessPath::new(&g, vec![1.0; 32], vec![(16, 0.5)]).unwrap();
        let sol = solve_linear(&lin, &a, &bundle, &RegressionConfig::default()).unwrap();
        for k in 0..=32 {
            let expect = a.total_mass() - a.value(k);
            assert!((sol.y[k] - expect).abs() < 1e-12, "k={k}");
        }
    }

    #[test]
    fn picard_immediate_fixed_point() {
        let g = grid(1.0, 8);
        let bundle = bundle_no_jumps(&g, 64, 8);
        let reg = RegressionConfig { degree: 2, n_outer: 1, n_inner: 64, ridge: 0.0 };
        let a = AProcesses::Shared(IncreasingProcessPath::zero(&g));
        let sol = solve_picard(&zero_coeffs(), &vec![2.5; 64], &a, &bundle, &reg, 1e-10, 10)
            .unwrap();
        assert!(sol.iterations <= 2, "iterations {}", sol.iterations);
        for i in 0..64 {
            for k in 0..=8 {
                assert!((sol.y_at(i, k) - 2.5).abs() < 1e-12);
            }
        }
        // Z carries only regression noise around zero: rms scale
        // |xi| sqrt(p / n_inner) / sqrt(dt)
        let noise = 2.5 * (3.0f64 / 64.0).sqrt() / (1.0f64 / 8.0).sqrt();
        let mut sq = 0.0;
        for i in 0..64 {
            for k in 0..8 {
                sq += sol.z_at(i, k)[0].powi(2);
            }
        }
        let rms = (sq / (64.0 * 8.0)).sqrt();
        assert!(rms < 2.0 * noise, "Z rms {rms} vs noise scale {noise}");
    }

    #[test]
    fn picard_terminal_condition_exact() {
        let g = grid(1.0, 8);
        let bundle = bundle_no_jumps(&g, 32, 9);
        let reg = RegressionConfig { degree: 1, n_outer: 1, n_inner: 32, ridge: 1e-8 };
        let a = AProcesses::Shared(IncreasingProcessPath::zero(&g));
        let xi: Vec<f64> = (0..32).map(|i| i as f64 * 0.1).collect();
        let sol = solve_picard(&zero_coeffs(), &xi, &a, &bundle, &reg, 1e-10, 10).unwrap();
        for i in 0..32 {
            assert_eq!(sol.y_at(i, 8), xi[i]);
        }
    }

    #[test]
    fn picard_matches_linear_closed_form() {
        let g = grid(1.0, 32);
        let n_inner = 4000;
        let bundle = bundle_no_jumps(&g, n_inner, 10);
        let a_coef = 0.3;
        let eps = 0.5;
        let xi: Vec<f64> = (0..n_inner).map(|i| 1.0 + eps * bundle.w[i].value(32, 0)).collect();
        let lin = LinearCoeffs::constant(
            33,
            a_coef,
            &[0.0],
            &[],
            &[0.0],
            0.0,
            &[0.0],
            0.0,
            xi.clone(),
        );
        let a_path = IncreasingProcessPath::zero(&g);
        let reg = RegressionConfig { degree: 1, n_outer: 1, n_inner, ridge: 1e-10 };
        let closed = solve_linear(&lin, &a_path, &bundle, &reg).unwrap();
        let coeffs = FnCoefficients {
            dim_z: 1,
            dim_b: 1,
            f: move |_, _, y, _: &[f64], _| a_coef * y,
            g: |_, _, _, _: &[f64], _, out: &mut [f64]| out.fill(0.0),
            h: |_, _, _| 0.0,
            lipschitz: LipschitzDecl { c: 1.0, alpha: 0.25 },
        };
        let a = AProcesses::Shared(a_path);
        let sol = solve_picard(&coeffs, &xi, &a, &bundle, &reg, 1e-10, 200).unwrap();
        let diff = (sol.y_start_mean() - closed.y[0]).abs();
        let tol = 3.0 * (closed.se[0] + closed.se[0]).max(0.01);
        assert!(diff <= tol, "picard {} vs linear {} (tol {tol})", sol.y_start_mean(), closed.y[0]);
    }

    /// Exact backward recursion on the binomial tree, the independent oracle
    /// for the regression solver: per node, Z = (Y_up - Y_dn)/(2 sqrt(dt)),
    /// Y = (mean child + Z dt) / (1 - dt) for the driver f = y + z.
    fn binomial_oracle(n: usize, horizon: f64, terminal: impl Fn(f64) -> f64) -> f64 {
        let dt = horizon / n as f64;
        let sd = dt.sqrt();
        let mut level: Vec<f64> = (0..=n)
            .map(|u| terminal((2.0 * u as f64 - n as f64) * sd))
            .collect();
        for k in (0..n).rev() {
            let mut next = Vec::with_capacity(k + 1);
            for u in 0..=k {
                let y_dn = level[u];
                let y_up = level[u + 1];
                let m = 0.5 * (y_up + y_dn);
                let z = (y_up - y_dn) / (2.0 * sd);
                next.push((m + z * dt) / (1.0 - dt));
            }
            level = next;
        }
        level[0]
    }

    #[test]
    fn picard_reproduces_binomial_tree_two_steps() {
        let n = 2;
        let g = grid(1.0, n);
        let dt = g.dt();
        let sd = dt.sqrt();
        // all 4 outcomes enumerated as equally weighted inner paths
        let mut w_paths = Vec::new();
        for mask in 0..4u32 {
            let incs: Vec<f64> = (0..n)
                .map(|k| if mask >> k & 1 == 1 { sd } else { -sd })
                .collect();
            w_paths.push(BrownianPath::from_increments(&g, 1, incs).unwrap());
        }
        let jumps = vec![JumpMeasurePath::no_jumps(&g); 4];
        let bundle = PathBundle {
            grid: g.clone(),
            b: BrownianPath::zero(&g, 1),
            w: w_paths,
            jumps,
            state: None,
        };
        let terminal = |w: f64| w * w + 0.5 * w;
        let xi: Vec<f64> = (0..4).map(|i| terminal(bundle.w[i].value(n, 0))).collect();
        let coeffs = FnCoefficients {
            dim_z: 1,
            dim_b: 1,
            f: |_, _, y, z: &[f64], _| y + z[0],
            g: |_, _, _, _: &[f64], _, out: &mut [f64]| out.fill(0.0),
            h: |_, _, _| 0.0,
            lipschitz: LipschitzDecl { c: 2.0, alpha: 0.25 },
        };
        let a = AProcesses::Shared(IncreasingProcessPath::zero(&g));
        let reg = RegressionConfig { degree: n, n_outer: 1, n_inner: 4, ridge: 0.0 };
        let sol = solve_picard(&coeffs, &xi, &a, &bundle, &reg, 1e-14, 500).unwrap();
        let oracle = binomial_oracle(n, 1.0, terminal);
        assert!(
            (sol.y_start_mean() - oracle).abs() < 1e-10,
            "solver {} vs tree {}",
            sol.y_start_mean(),
            oracle
        );
    }

    #[test]
    fn picard_residuals_non_increasing_after_second_sweep() {
        let g = grid(1.0, 16);
        let bundle = bundle_no_jumps(&g, 512, 11);
        let xi: Vec<f64> = (0..512).map(|i| bundle.w[i].value(16, 0).tanh()).collect();
        let coeffs = FnCoefficients {
            dim_z: 1,
            dim_b: 1,
            f: |_, _, y: f64, z: &[f64], _| y.tanh() + 0.3 * z[0],
            g: |_, _, y: f64, _: &[f64], _, out: &mut [f64]| out.fill(0.2 * y),
            h: |_, _, _| 0.0,
            lipschitz: LipschitzDecl { c: 1.0, alpha: 0.25 },
        };
        let a = AProcesses::Shared(IncreasingProcessPath::zero(&g));
        let reg = RegressionConfig { degree: 3, n_outer: 1, n_inner: 512, ridge: 1e-8 };
        let sol = solve_picard(&coeffs, &xi, &a, &bundle, &reg, 1e-12, 80).unwrap();
        assert!(sol.residuals.len() >= 3);
        for i in 1..sol.residuals.len() - 1 {
            assert!(
                sol.residuals[i + 1] <= sol.residuals[i] * (1.0 + 1e-9),
                "residuals not contracting at sweep {i}: {:?}",
                sol.residuals
            );
        }
    }

    #[test]
    fn conditional_mean_of_brownian_increment_vanishes() {
        // regression of dW_k on the features has no real signal: the fitted
        // values stay within noise of zero at every step
        let g = grid(1.0, 16);
        let n_inner = 2000;
        let bundle = bundle_no_jumps(&g, n_inner, 12);
        let reg = RegressionConfig { degree: 3, n_outer: 1, n_inner, ridge: 1e-8 };
        let regs = build_regressions(&bundle, &reg, 0).unwrap();
        let dt = g.dt();
        for k in 0..16 {
            let targets: Vec<f64> = (0..n_inner).map(|i| bundle.w[i].increment(k, 0)).collect();
            let fitted = regs.fitted(k, &targets);
            let m = mean(&fitted);
            let bound = 3.0 * (dt / n_inner as f64).sqrt() * 3.0;
            assert!(m.abs() <= bound, "step {k}: fitted mean {m} vs bound {bound}");
        }
    }

    #[test]
    fn comparison_identical_and_shifted() {
        let g = grid(1.0, 8);
        let bundle = bundle_no_jumps(&g, 128, 13);
        let reg = RegressionConfig { degree: 2, n_outer: 1, n_inner: 128, ridge: 0.0 };
        let a = AProcesses::Shared(IncreasingProcessPath::zero(&g));
        let xi: Vec<f64> = (0..128).map(|i| bundle.w[i].value(8, 0)).collect();
        let xi_up: Vec<f64> = xi.iter().map(|v| v + 1.0).collect();
        let sol1 = solve_picard(&zero_coeffs(), &xi, &a, &bundle, &reg, 1e-10, 10).unwrap();
        let sol2 = solve_picard(&zero_coeffs(), &xi_up, &a, &bundle, &reg, 1e-10, 10).unwrap();
        let same = check_comparison(&sol1, &sol1, 1e-12).unwrap();
        assert_eq!(same.min_diff, 0.0);
        assert_eq!(same.violation_fraction, 0.0);
        let shifted = check_comparison(&sol1, &sol2, 1e-9).unwrap();
        assert!((shifted.min_diff - 1.0).abs() < 1e-9);
        assert_eq!(shifted.violation_fraction, 0.0);
    }

    #[test]
    fn ito_check_zero_components_exact() {
        let g = grid(1.0, 16);
        let bundle = bundle_no_jumps(&g, 32, 14);
        let comps = ItoComponents {
            alpha0: 0.0,
            beta: vec![0.0; 17],
            gamma: vec![0.0; 17],
            delta: vec![0.0; 17],
            theta: vec![0.0; 17 * 0],
            lambda: vec![0.0; 17],
        };
        let a = IncreasingProcessPath::zero(&g);
        let rep = ito_identity_check(&comps, &a, std::slice::from_ref(&bundle)).unwrap();
        assert_eq!(rep.residual, 0.0);
        assert_eq!(rep.lhs_mean, 0.0);
    }

    #[test]
    fn ito_check_isometry() {
        let g = grid(1.0, 32);
        let bundle = bundle_no_jumps(&g, 10_000, 15);
        let comps = ItoComponents {
            alpha0: 0.0,
            beta: vec![0.0; 33],
            gamma: vec![0.0; 33],
            delta: vec![1.0; 33],
            theta: vec![0.0; 0],
            lambda: vec![0.0; 33],
        };
        let a = IncreasingProcessPath::zero(&g);
        let rep = ito_identity_check(&comps, &a, std::slice::from_ref(&bundle)).unwrap();
        assert!(rep.residual <= 4.0, "residual {}", rep.residual);
        assert!((rep.lhs_mean - 1.0).abs() < 0.05);
    }

    #[test]
    fn ito_check_pure_predictable_jump_exact() {
        let g = grid(1.0, 16);
        let bundle = bundle_no_jumps(&g, 16, 16);
        let comps = ItoComponents {
            alpha0: 0.0,
            beta: vec![0.0; 17],
            gamma: vec![0.0; 17],
            delta: vec![0.0; 17],
            theta: vec![0.0; 0],
            lambda: vec![1.0; 17],
        };
        let a = IncreasingProcessPath::new(&g, vec![0.0; 16], vec![(8, 1.0)]).unwrap();
        let rep = ito_identity_check(&comps, &a, std::slice::from_ref(&bundle)).unwrap();
        assert_eq!(rep.residual, 0.0);
        assert!((rep.lhs_mean - 1.0).abs() < 1e-14);
    }

    #[test]
    fn ito_check_backward_component() {
        // alpha = suffix integral of a deterministic gamma against B; the
        // -|gamma|^2 term of the identity is what makes the residual vanish
        let g = grid(1.0, 32);
        let scenarios: Vec<PathBundle> = (0..100)
            .map(|o| {
                PathBundle::generate(&g, 1, 1, &Arc::new(LevySpec::none()), 100, 17, 43, o)
                    .unwrap()
            })
            .collect();
        let comps = ItoComponents {
            alpha0: 0.0,
            beta: vec![0.0; 33],
            gamma: (0..33).map(|k| 1.0 + 0.3 * (k as f64 * 0.2).sin()).collect(),
            delta: vec![0.0; 33],
            theta: vec![0.0; 0],
            lambda: vec![0.0; 33],
        };
        let a = IncreasingProcessPath::zero(&g);
        let rep = ito_identity_check(&comps, &a, &scenarios).unwrap();
        assert!(rep.residual <= 4.0, "residual {}", rep.residual);
    }

    #[test]
    fn drift_dominance_against_linear_closed_form() {
        // chi = linear part + |noise| >= linear part: the solved Y dominates
        // the closed form with the noise dropped, up to Monte Carlo error
        let g = grid(1.0, 32);
        let n_inner = 2000;
        let bundle = bundle_no_jumps(&g, n_inner, 20);
        let a_path = IncreasingProcessPath::constant_density(&g, 0.5).unwrap();
        let (alpha, beta, delta, varphi, h_coef) = (0.3, 0.2, 0.25, 0.1, 0.3);
        let xi: Vec<f64> = (0..n_inner)
            .map(|i| 1.0 + 0.4 * bundle.w[i].value(32, 0))
            .collect();
        let lin = LinearCoeffs::constant(
            33,
            alpha,
            &[beta],
            &[],
            &[delta],
            0.0,
            &[varphi],
            h_coef,
            xi.clone(),
        );
        let reg = RegressionConfig { degree: 1, n_outer: 1, n_inner, ridge: 1e-10 };
        let rhs = solve_linear(&lin, &a_path, &bundle, &reg).unwrap();
        let coeffs = FnCoefficients {
            dim_z: 1,
            dim_b: 1,
            f: move |t: f64, _x: &[f64], y: f64, z: &[f64], _j: f64| {
                alpha * y + beta * z[0] + 0.5 * (8.0 * t).sin().abs()
            },
            g: move |_t: f64, _x: &[f64], y: f64, _z: &[f64], _j: f64, out: &mut [f64]| {
                out[0] = varphi + delta * y;
            },
            h: move |_t: f64, _x: &[f64], _y: f64| h_coef,
            lipschitz: LipschitzDecl { c: 1.0, alpha: 0.25 },
        };
        let a = AProcesses::Shared(a_path);
        let sol = solve_picard(&coeffs, &xi, &a, &bundle, &reg, 1e-9, 100).unwrap();
        let se = rhs.se[0].max(1e-4);
        assert!(
            sol.y_start_mean() >= rhs.y[0] - 3.0 * (se + se),
            "Y(0) = {} does not dominate the closed form {}",
            sol.y_start_mean(),
            rhs.y[0]
        );
    }

    #[test]
    fn budget_validation() {
        let g = grid(1.0, 4);
        let bundle = bundle_no_jumps(&g, 3, 18);
        let reg = RegressionConfig { degree: 3, n_outer: 1, n_inner: 3, ridge: 0.0 };
        let a = AProcesses::Shared(IncreasingProcessPath::zero(&g));
        let err = solve_picard(&zero_coeffs(), &vec![0.0; 3], &a, &bundle, &reg, 1e-9, 5);
        assert!(matches!(err, Err(SolverError::BudgetTooSmall(_))));
    }

    #[test]
    fn alpha_validation_with_jumping_a() {
        let g = grid(1.0, 4);
        let bundle = bundle_no_jumps(&g, 16, 19);
        let reg = RegressionConfig { degree: 1, n_outer: 1, n_inner: 16, ridge: 0.0 };
        let a = AProcesses::Shared(
            IncreasingProcessPath::new(&g, vec![0.0; 4], vec![(2, 1.0)]).unwrap(),
        );
        let coeffs = FnCoefficients {
            dim_z: 1,
            dim_b: 1,
            f: |_, _, _, _: &[f64], _| 0.0,
            g: |_, _, _, _: &[f64], _, out: &mut [f64]| out.fill(0.0),
            h: |_, _, _| 0.0,
            lipschitz: LipschitzDecl { c: 1.0, alpha: 0.8 },
        };
        let err = solve_picard(&coeffs, &vec![0.0; 16], &a, &bundle, &reg, 1e-9, 5);
        assert!(matches!(err, Err(SolverError::InvalidAlpha { .. })));
    }
}
