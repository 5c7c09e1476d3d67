//! Singular-control checks for a backward doubly stochastic system.
//!
//! The controlled state is the backward component `X` of
//!
//! ```text
//! X(t) = xi + int_t^T f(s, X, Y, Z) ds + int_t^T g(s, X) dB
//!        - int_t^T Y dW - int_t^T int_E Z(e) dN~ + int_t^T h(s) dA(s),
//! ```
//!
//! where the increasing process `A` is the control, and the cost is
//! `J(A) = E[int F(t, X(t)) dt + G(X(0)) + int H(t) dA(t)]`. In the
//! coefficient table the drivers use the solver signature: `y` is the state
//! `X(t)`, the `z` slots hold the `W`-integrand and `j` the nu-aggregated
//! jump component, while `F`, `G`, `H` read the state through `x`.
//!
//! The checks evaluate, per path,
//!
//! ```text
//! Gamma(t,s) = exp( int_t^s [f_x - g_x^2/2 - f_y^2/2] dr + int f_y dW
//!                 + int g_x dB + int int ln(1+f_z) dN~
//!                 + int int [ln(1+f_z) - f_z] nu dr ),
//! p(t)   = -int_0^t F_x(s) Gamma(s,t) ds - Gamma(0,t) G_x(X(0)),
//! U(t)   = H(t) - p(t) h(t),
//! V(t)   = H(t) - p(t) h(t) [1 + int f_z(t,e) N({t},de)],
//! ```
//!
//! with all derivatives taken along the optimal trajectory by central
//! differences. A candidate passes the necessary conditions when `U` and `V`
//! stay nonnegative and their integrals against the continuous and jump
//! parts of the control vanish; the sufficient check probes convexity of the
//! Hamiltonian density and of `G` by midpoint sampling and compares the
//! `dA`-density against perturbation controls.

use rand::Rng;
use thiserror::Error;

use crate::coeffs::CompiledCoeffs;
use crate::dsl::EvalError;
use crate::gbdsde::{
    solve_picard, AProcesses, GammaProcess, PathBundle, RegressionConfig, SolutionTriple,
    SolverError,
};
use crate::paths::IncreasingProcessPath;
use crate::stats::{mean, stderr_of_mean};

#[derive(Debug, Error)]
pub enum ControlError {
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("non-finite derivative at t = {t} ({which}); kink in a coefficient")]
    DerivativeAtKink { t: f64, which: &'static str },
    #[error("jump-slot derivative f_z = {0} is not above -1")]
    JumpDerivativeTooNegative(f64),
    #[error("bad control configuration: {0}")]
    BadConfig(String),
}

/// Candidate singular control: a deterministic increasing process.
#[derive(Debug, Clone)]
pub struct ControlCandidate {
    pub a: IncreasingProcessPath,
}

/// Solver and differentiation budget shared by the checks.
#[derive(Debug, Clone)]
pub struct ControlConfig {
    pub reg: RegressionConfig,
    pub picard_tol: f64,
    pub picard_max_iter: usize,
    /// Step scale of the central differences along the trajectory.
    pub grad_scale: f64,
}

impl Default for ControlConfig {
    fn default() -> Self {
        Self {
            reg: RegressionConfig::default(),
            picard_tol: 1e-9,
            picard_max_iter: 60,
            grad_scale: 1.0,
        }
    }
}

fn validate_control_table(coeffs: &CompiledCoeffs) -> Result<(), ControlError> {
    if coeffs.n_dim != 0 {
        return Err(ControlError::BadConfig(
            "control problems use the stateless signature (n_dim = 0); the state is y".into(),
        ));
    }
    // h must be h(t): slot 1 is y in the (t, y) signature
    if coeffs.h.uses_slot(1) {
        return Err(ControlError::BadConfig(
            "the control coefficient h may depend on t only".into(),
        ));
    }
    Ok(())
}

/// Solves the controlled system under the candidate; the solution triple
/// holds `X` in `y`, the `W`-integrand in `z` and the jump component in `j`.
pub fn solve_controlled(
    coeffs: &CompiledCoeffs,
    xi: &[f64],
    candidate: &ControlCandidate,
    bundle: &PathBundle,
    cfg: &ControlConfig,
) -> Result<SolutionTriple, ControlError> {
    validate_control_table(coeffs)?;
    let a = AProcesses::Shared(candidate.a.clone());
    Ok(solve_picard(
        coeffs,
        xi,
        &a,
        bundle,
        &cfg.reg,
        cfg.picard_tol,
        cfg.picard_max_iter,
    )?)
}

/// Performance functional estimate over the supplied scenarios:
/// `J(A) = E[int F(t, X) dt + G(X(0)) + int H dA]`.
pub fn cost(
    candidate: &ControlCandidate,
    coeffs: &CompiledCoeffs,
    bundles: &[PathBundle],
    xis: &[Vec<f64>],
    cfg: &ControlConfig,
) -> Result<(f64, f64), ControlError> {
    validate_control_table(coeffs)?;
    if bundles.len() != xis.len() || bundles.is_empty() {
        return Err(ControlError::BadConfig(
            "need one terminal vector per scenario".into(),
        ));
    }
    let mut per_outer = Vec::with_capacity(bundles.len());
    for (bundle, xi) in bundles.iter().zip(xis) {
        let sol = solve_controlled(coeffs, xi, candidate, bundle, cfg)?;
        let grid = &bundle.grid;
        let dt = grid.dt();
        let mut f_term = Vec::with_capacity(sol.n_inner);
        for i in 0..sol.n_inner {
            let mut acc = 0.0;
            for k in 0..grid.n_steps() {
                acc += coeffs.eval_big_f(grid.time(k), sol.y_at(i, k))? * dt;
            }
            f_term.push(acc);
        }
        let g_term = coeffs.eval_big_g(sol.y_start_mean())?;
        let mut h_term = 0.0;
        for k in 0..grid.n_steps() {
            h_term += coeffs.eval_big_h(grid.time(k))? * candidate.a.cont_increment(k);
            let jump = candidate.a.jump_at_cell_end(k);
            if jump > 0.0 {
                h_term += coeffs.eval_big_h(grid.time(k + 1))? * jump;
            }
        }
        per_outer.push(mean(&f_term) + g_term + h_term);
    }
    Ok((mean(&per_outer), stderr_of_mean(&per_outer)))
}

/// Hamiltonian densities against `dt` and `dA`:
///
/// ```text
/// dt: F(t, x) - f(t, x, y, z) p - g(t, x) . q,
/// dA: H(t) - p h(t).
/// ```
///
/// `state` binds both `F`'s `x` and the driver's `y`; `w_integrand` fills
/// the `z` slots and `jump_component` is aggregated against the Lévy
/// weights into `j`.
pub fn hamiltonian(
    t: f64,
    state: f64,
    w_integrand: &[f64],
    jump_component: &[f64],
    p: f64,
    q: &[f64],
    coeffs: &CompiledCoeffs,
) -> Result<(f64, f64), ControlError> {
    let j_agg: f64 = jump_component
        .iter()
        .zip(coeffs.levy.atoms())
        .map(|(z, a)| z * a.weight)
        .sum();
    let f_val = coeffs.eval_f(t, &[], state, w_integrand, j_agg)?;
    let mut g_val = vec![0.0; coeffs.dim_b];
    coeffs.eval_g(t, &[], state, w_integrand, j_agg, &mut g_val)?;
    let gq: f64 = g_val.iter().zip(q).map(|(g, q)| g * q).sum();
    let dt_density = coeffs.eval_big_f(t, state)? - f_val * p - gq;
    let da_density = coeffs.eval_big_h(t)? - p * coeffs.eval_h(t, &[], state)?;
    Ok((dt_density, da_density))
}

/// Per-path per-time driver derivatives along a trajectory.
struct TrajectoryDerivatives {
    /// `n_inner x n_points` each
    f_x: Vec<f64>,
    f_y: Vec<f64>,
    f_z: Vec<f64>,
    g_x: Vec<f64>,
    big_f_x: Vec<f64>,
}

fn trajectory_derivatives(
    coeffs: &CompiledCoeffs,
    sol: &SolutionTriple,
    cfg: &ControlConfig,
) -> Result<TrajectoryDerivatives, ControlError> {
    let np = sol.grid.n_points();
    let n_inner = sol.n_inner;
    let d = sol.dim_z;
    let weights: Vec<f64> = coeffs.levy.atoms().iter().map(|a| a.weight).collect();
    let mut out = TrajectoryDerivatives {
        f_x: vec![0.0; n_inner * np],
        f_y: vec![0.0; n_inner * np],
        f_z: vec![0.0; n_inner * np],
        g_x: vec![0.0; n_inner * np],
        big_f_x: vec![0.0; n_inner * np],
    };
    if coeffs.dim_b != 1 {
        return Err(ControlError::BadConfig(
            "control checks assume a one-dimensional backward driver".into(),
        ));
    }
    // signature (t, y, z1..zd, j): slots 1 and 2..2+d and 2+d
    let y_slot = 1;
    let z0_slot = 2;
    let j_slot = 2 + d;
    // analytic overrides take precedence over central differences
    let mut sig: Vec<String> = vec!["t".into(), "y".into()];
    sig.extend((1..=d).map(|c| format!("z{c}")));
    sig.push("j".into());
    let sig_refs: Vec<&str> = sig.iter().map(|s| s.as_str()).collect();
    let ov_f_x = coeffs.derivative_override("f", "y", &sig_refs);
    let ov_f_y = coeffs.derivative_override("f", "z1", &sig_refs);
    let ov_f_z = coeffs.derivative_override("f", "j", &sig_refs);
    let ov_g_x = coeffs.derivative_override("g1", "y", &sig_refs);
    let ov_big_f_x = coeffs.derivative_override("F", "x", &["t", "x"]);
    let mut vals = vec![0.0; 3 + d];
    for i in 0..n_inner {
        for k in 0..np {
            let t = sol.grid.time(k);
            vals[0] = t;
            vals[y_slot] = sol.y_at(i, k);
            for c in 0..d {
                vals[z0_slot + c] = sol.z_at(i, k)[c];
            }
            vals[j_slot] = sol.j_aggregate(i, k, &weights);
            let idx = i * np + k;
            let kinked = |which: &'static str, v: Result<f64, EvalError>| {
                v.ok()
                    .filter(|g| g.is_finite())
                    .ok_or(ControlError::DerivativeAtKink { t, which })
            };
            out.f_x[idx] = match ov_f_x {
                Some(expr) => kinked("f_x", expr.eval(&vals))?,
                None => kinked("f_x", coeffs.f.num_grad(y_slot, &mut vals, cfg.grad_scale))?,
            };
            out.f_y[idx] = match ov_f_y {
                Some(expr) => kinked("f_y", expr.eval(&vals))?,
                None => kinked("f_y", coeffs.f.num_grad(z0_slot, &mut vals, cfg.grad_scale))?,
            };
            out.f_z[idx] = match ov_f_z {
                Some(expr) => kinked("f_z", expr.eval(&vals))?,
                None => kinked("f_z", coeffs.f.num_grad(j_slot, &mut vals, cfg.grad_scale))?,
            };
            if out.f_z[idx] <= -1.0 + 1e-12 {
                return Err(ControlError::JumpDerivativeTooNegative(out.f_z[idx]));
            }
            out.g_x[idx] = match ov_g_x {
                Some(expr) => kinked("g_x", expr.eval(&vals))?,
                None => kinked(
                    "g_x",
                    coeffs.g[0].num_grad(y_slot, &mut vals, cfg.grad_scale),
                )?,
            };
            let mut fx_vals = [t, sol.y_at(i, k)];
            out.big_f_x[idx] = match ov_big_f_x {
                Some(expr) => kinked("F_x", expr.eval(&fx_vals))?,
                None => kinked(
                    "F_x",
                    coeffs.big_f.num_grad(1, &mut fx_vals, cfg.grad_scale),
                )?,
            };
        }
    }
    Ok(out)
}

/// Exponential process of the variational equation along the trajectory,
/// with `(alpha, beta, gamma, delta) = (f_x, f_y, f_z, g_x)` evaluated per
/// path. Exponents are stored, so `Gamma(t,t) = 1` and the cocycle identity
/// `Gamma(t,s) Gamma(s,r) = Gamma(t,r)` hold exactly.
pub fn variational_gamma(
    coeffs: &CompiledCoeffs,
    sol: &SolutionTriple,
    bundle: &PathBundle,
    cfg: &ControlConfig,
) -> Result<GammaProcess, ControlError> {
    let derivs = trajectory_derivatives(coeffs, sol, cfg)?;
    gamma_from_derivatives(&derivs, sol, bundle)
}

fn gamma_from_derivatives(
    derivs: &TrajectoryDerivatives,
    sol: &SolutionTriple,
    bundle: &PathBundle,
) -> Result<GammaProcess, ControlError> {
    let grid = &bundle.grid;
    let n = grid.n_steps();
    let np = grid.n_points();
    let dt = grid.dt();
    let n_inner = sol.n_inner;
    let atoms = bundle
        .jumps
        .first()
        .map(|j| j.levy().atoms().to_vec())
        .unwrap_or_default();
    let total_mass: f64 = atoms.iter().map(|a| a.weight).sum();
    let mut exponents = vec![0.0; n_inner * np];
    let mut event_logfac = vec![0.0; n_inner * np];
    for i in 0..n_inner {
        let mut e = 0.0;
        for k in 0..n {
            let idx = i * np + k;
            let idx_r = i * np + k + 1;
            let mut incr = (derivs.f_x[idx]
                - 0.5 * derivs.g_x[idx] * derivs.g_x[idx]
                - 0.5 * derivs.f_y[idx] * derivs.f_y[idx])
                * dt;
            incr += derivs.f_y[idx] * bundle.w[i].increment(k, 0);
            incr += derivs.g_x[idx_r] * bundle.b.increment(k, 0);
            // f_z is the nu-density derivative, constant across marks
            let mut logfac = 0.0;
            if !atoms.is_empty() {
                let events: u32 = (0..atoms.len())
                    .map(|a| bundle.jumps[i].count(k, a))
                    .sum();
                if events > 0 {
                    logfac = events as f64 * (1.0 + derivs.f_z[idx_r]).ln();
                }
                incr += logfac - dt * derivs.f_z[idx] * total_mass;
            }
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

/// Adjoint values per path and time from the closed form
/// `p(t) = -int_0^t F_x(s) Gamma(s,t) ds - Gamma(0,t) G_x(X(0))`, so that
/// `p(0) = -G_x(X(0))` exactly.
pub struct AdjointProcess {
    pub p: Vec<f64>,
    pub n_points: usize,
}

impl AdjointProcess {
    pub fn value(&self, path: usize, k: usize) -> f64 {
        self.p[path * self.n_points + k]
    }

    pub fn mean_per_time(&self, n_inner: usize) -> Vec<f64> {
        let np = self.n_points;
        (0..np)
            .map(|k| (0..n_inner).map(|i| self.value(i, k)).sum::<f64>() / n_inner as f64)
            .collect()
    }
}

pub fn adjoint(
    coeffs: &CompiledCoeffs,
    sol: &SolutionTriple,
    gamma: &GammaProcess,
    cfg: &ControlConfig,
) -> Result<AdjointProcess, ControlError> {
    let derivs = trajectory_derivatives(coeffs, sol, cfg)?;
    adjoint_from_derivatives(coeffs, &derivs, sol, gamma, cfg)
}

fn adjoint_from_derivatives(
    coeffs: &CompiledCoeffs,
    derivs: &TrajectoryDerivatives,
    sol: &SolutionTriple,
    gamma: &GammaProcess,
    cfg: &ControlConfig,
) -> Result<AdjointProcess, ControlError> {
    let np = sol.grid.n_points();
    let dt = sol.grid.dt();
    let ov_g_x = coeffs.derivative_override("G", "x", &["x"]);
    let mut p = vec![0.0; sol.n_inner * np];
    for i in 0..sol.n_inner {
        let x0 = sol.y_at(i, 0);
        let mut gx_vals = [x0];
        let g_x0 = match ov_g_x {
            Some(expr) => expr.eval(&gx_vals)?,
            None => coeffs.big_g.num_grad(0, &mut gx_vals, cfg.grad_scale)?,
        };
        if !g_x0.is_finite() {
            return Err(ControlError::DerivativeAtKink {
                t: 0.0,
                which: "G_x",
            });
        }
        // running quadrature in the exponent frame:
        // p(t_k) = -e^{E_k} [ sum_{l<k} F_x(t_l) e^{-E_l} dt + G_x(X(0)) ]
        let mut acc = g_x0;
        p[i * np] = -acc;
        for k in 1..np {
            let idx_prev = i * np + k - 1;
            acc += derivs.big_f_x[idx_prev] * (-gamma.exponent(i, k - 1)).exp() * dt;
            p[i * np + k] = -gamma.exponent(i, k).exp() * acc;
        }
    }
    Ok(AdjointProcess { p, n_points: np })
}

/// Studentized residual of the adjoint dynamics on `[0, T]`: the increments
/// of the closed-form `p` are compared against `-H_x dt` in the mean (the
/// martingale parts drop out). Meaningful for tables with `g_x = 0`, where
/// the unobserved `q` does not enter.
pub fn adjoint_dynamics_residual(
    coeffs: &CompiledCoeffs,
    sol: &SolutionTriple,
    adj: &AdjointProcess,
    cfg: &ControlConfig,
) -> Result<f64, ControlError> {
    let derivs = trajectory_derivatives(coeffs, sol, cfg)?;
    let np = sol.grid.n_points();
    let dt = sol.grid.dt();
    let mut sums = Vec::with_capacity(sol.n_inner);
    for i in 0..sol.n_inner {
        let mut acc = 0.0;
        for k in 0..np - 1 {
            let idx = i * np + k;
            let ham_x = derivs.big_f_x[idx] - derivs.f_x[idx] * adj.value(i, k);
            acc += adj.value(i, k + 1) - adj.value(i, k) + ham_x * dt;
        }
        sums.push(acc);
    }
    let (m, se) = (mean(&sums), stderr_of_mean(&sums));
    Ok(if se > 1e-300 {
        (m / se).abs()
    } else if m.abs() < 1e-10 {
        0.0
    } else {
        f64::INFINITY
    })
}

/// Necessary-condition report; the CSV rows follow
/// `t,p,U,V,dAc,dAjump`.
#[derive(Debug, Clone)]
pub struct MPReport {
    pub j_estimate: f64,
    pub j_stderr: f64,
    pub times: Vec<f64>,
    pub p_mean: Vec<f64>,
    pub u_mean: Vec<f64>,
    pub v_mean: Vec<f64>,
    pub da_cont: Vec<f64>,
    pub da_jump: Vec<f64>,
    pub min_u: f64,
    pub min_v: f64,
    pub slack_cont: f64,
    pub slack_jump: f64,
    pub control_mass: f64,
    pub tol: f64,
    pub pass: bool,
}

impl MPReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,p,U,V,dAc,dAjump\n");
        for k in 0..self.times.len() {
            out.push_str(&format!(
                "{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e}\n",
                self.times[k],
                self.p_mean[k],
                self.u_mean[k],
                self.v_mean[k],
                self.da_cont[k],
                self.da_jump[k]
            ));
        }
        out
    }

    pub fn verdict_line(&self) -> String {
        format!(
            "necessary: {} (min U = {:.6e}, min V = {:.6e}, slack_c = {:.6e}, slack_d = {:.6e}, mass = {:.6e}, tol = {:.1e})",
            if self.pass { "PASS" } else { "FAIL" },
            self.min_u,
            self.min_v,
            self.slack_cont,
            self.slack_jump,
            self.control_mass,
            self.tol
        )
    }
}

/// Evaluates the complementary-slackness conditions of the candidate:
/// `U, V >= -tol` over every path and grid time, and the integrals of `U`
/// against the continuous part and of `V` against the jumps of the control
/// within `tol * mass`.
pub fn necessary_check(
    candidate: &ControlCandidate,
    coeffs: &CompiledCoeffs,
    bundles: &[PathBundle],
    xis: &[Vec<f64>],
    cfg: &ControlConfig,
    tol: f64,
) -> Result<MPReport, ControlError> {
    validate_control_table(coeffs)?;
    if bundles.len() != xis.len() || bundles.is_empty() {
        return Err(ControlError::BadConfig(
            "need one terminal vector per scenario".into(),
        ));
    }
    let grid = &bundles[0].grid;
    let np = grid.n_points();
    let (j_estimate, j_stderr) = cost(candidate, coeffs, bundles, xis, cfg)?;
    let mut p_sum = vec![0.0; np];
    let mut u_sum = vec![0.0; np];
    let mut v_sum = vec![0.0; np];
    let mut min_u = f64::INFINITY;
    let mut min_v = f64::INFINITY;
    let mut slack_cont_vals = Vec::new();
    let mut slack_jump_vals = Vec::new();
    let mut total_paths = 0usize;
    for (bundle, xi) in bundles.iter().zip(xis) {
        let sol = solve_controlled(coeffs, xi, candidate, bundle, cfg)?;
        let derivs = trajectory_derivatives(coeffs, &sol, cfg)?;
        let gamma = gamma_from_derivatives(&derivs, &sol, bundle)?;
        let adj = adjoint_from_derivatives(coeffs, &derivs, &sol, &gamma, cfg)?;
        for i in 0..sol.n_inner {
            let mut slack_c = 0.0;
            let mut slack_d = 0.0;
            for k in 0..np {
                let t = grid.time(k);
                let h_t = coeffs.eval_h(t, &[], 0.0)?;
                let big_h = coeffs.eval_big_h(t)?;
                let p_val = adj.value(i, k);
                let u_val = big_h - p_val * h_t;
                // events snapped to t_k live in the cell ending there
                let mut n_mass = 0.0;
                if k >= 1 {
                    let events: u32 = (0..bundle.n_atoms())
                        .map(|a| bundle.jumps[i].count(k - 1, a))
                        .sum();
                    if events > 0 {
                        n_mass = events as f64 * derivs.f_z[i * np + k];
                    }
                }
                let v_val = big_h - p_val * h_t * (1.0 + n_mass);
                p_sum[k] += p_val;
                u_sum[k] += u_val;
                v_sum[k] += v_val;
                min_u = min_u.min(u_val);
                min_v = min_v.min(v_val);
                if k < np - 1 {
                    slack_c += u_val * candidate.a.cont_increment(k);
                }
                let jump = if k >= 1 {
                    candidate.a.jump_at_cell_end(k - 1)
                } else {
                    0.0
                };
                if jump > 0.0 {
                    slack_d += v_val * jump;
                }
            }
            slack_cont_vals.push(slack_c);
            slack_jump_vals.push(slack_d);
            total_paths += 1;
        }
    }
    let scale = total_paths as f64;
    let mass = candidate.a.total_mass();
    let slack_cont = mean(&slack_cont_vals);
    let slack_jump = mean(&slack_jump_vals);
    let pass = min_u >= -tol
        && min_v >= -tol
        && slack_cont.abs() <= tol * mass.max(1e-300)
        && slack_jump.abs() <= tol * mass.max(1e-300);
    Ok(MPReport {
        j_estimate,
        j_stderr,
        times: grid.times().to_vec(),
        p_mean: p_sum.iter().map(|v| v / scale).collect(),
        u_mean: u_sum.iter().map(|v| v / scale).collect(),
        v_mean: v_sum.iter().map(|v| v / scale).collect(),
        da_cont: (0..np)
            .map(|k| if k < np - 1 { candidate.a.cont_increment(k) } else { 0.0 })
            .collect(),
        da_jump: (0..np)
            .map(|k| if k >= 1 { candidate.a.jump_at_cell_end(k - 1) } else { 0.0 })
            .collect(),
        min_u,
        min_v,
        slack_cont,
        slack_jump,
        control_mass: mass,
        tol,
        pass,
    })
}

#[derive(Debug, Clone)]
pub struct SufficientReport {
    pub hamiltonian_convex: bool,
    pub g_convex: bool,
    pub variational_inequality: bool,
    pub worst_convexity_gap: f64,
    pub worst_inequality_gap: f64,
    pub pass: bool,
}

impl SufficientReport {
    pub fn verdict_line(&self) -> String {
        format!(
            "sufficient: {} (H convex: {}, G convex: {}, dA comparison: {}, gaps {:.3e} / {:.3e})",
            if self.pass { "PASS" } else { "FAIL" },
            self.hamiltonian_convex,
            self.g_convex,
            self.variational_inequality,
            self.worst_convexity_gap,
            self.worst_inequality_gap
        )
    }
}

/// Probes the sufficient conditions: convexity of the Hamiltonian
/// `dt`-density in `(x, y, z)` and of `G` by `n_probe` midpoint tests on
/// sampled pairs, and the comparison
/// `int (H - p h) dA >= int (H - p h) dA*` against perturbation controls
/// (scalings and time shifts of the candidate, single atoms and convex
/// combinations). `q` is not estimated and enters the probes as zero, which
/// is exact for tables whose `g` is affine in the state.
#[allow(clippy::too_many_arguments)]
pub fn sufficient_check(
    candidate: &ControlCandidate,
    coeffs: &CompiledCoeffs,
    bundles: &[PathBundle],
    xis: &[Vec<f64>],
    cfg: &ControlConfig,
    tol: f64,
    n_probe: usize,
    probe_seed: u64,
) -> Result<SufficientReport, ControlError> {
    validate_control_table(coeffs)?;
    let grid = &bundles[0].grid;
    let np = grid.n_points();
    let d = coeffs.dim_w;
    // trajectory ranges and mean adjoint from the first scenario
    let sol = solve_controlled(coeffs, &xis[0], candidate, &bundles[0], cfg)?;
    let derivs = trajectory_derivatives(coeffs, &sol, cfg)?;
    let gamma = gamma_from_derivatives(&derivs, &sol, &bundles[0])?;
    let adj = adjoint_from_derivatives(coeffs, &derivs, &sol, &gamma, cfg)?;
    let p_mean = adj.mean_per_time(sol.n_inner);
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for i in 0..sol.n_inner {
        for k in 0..np {
            lo = lo.min(sol.y_at(i, k));
            hi = hi.max(sol.y_at(i, k));
        }
    }
    let spread = (hi - lo).max(1.0);
    let (box_lo, box_hi) = (lo - 0.5 * spread, hi + 0.5 * spread);
    let mut rng = crate::rng::rng_for(crate::rng::RngKey::new(probe_seed, 0xc0, 0));
    let mut worst_convexity: f64 = 0.0;
    let mut ham_ok = true;
    let mut g_ok = true;
    let q = vec![0.0; coeffs.dim_b];
    for _ in 0..n_probe {
        let k = rng.gen_range(0..np);
        let t = grid.time(k);
        let p = p_mean[k];
        let draw_point = |rng: &mut rand_chacha::ChaCha12Rng| {
            let x = box_lo + rng.gen::<f64>() * (box_hi - box_lo);
            let y: Vec<f64> = (0..d)
                .map(|_| -spread + 2.0 * spread * rng.gen::<f64>())
                .collect();
            let z: Vec<f64> = (0..coeffs.levy.n_atoms())
                .map(|_| -spread + 2.0 * spread * rng.gen::<f64>())
                .collect();
            (x, y, z)
        };
        let (x1, y1, z1) = draw_point(&mut rng);
        let (x2, y2, z2) = draw_point(&mut rng);
        let xm = 0.5 * (x1 + x2);
        let ym: Vec<f64> = y1.iter().zip(&y2).map(|(a, b)| 0.5 * (a + b)).collect();
        let zm: Vec<f64> = z1.iter().zip(&z2).map(|(a, b)| 0.5 * (a + b)).collect();
        let (h1, _) = hamiltonian(t, x1, &y1, &z1, p, &q, coeffs)?;
        let (h2, _) = hamiltonian(t, x2, &y2, &z2, p, &q, coeffs)?;
        let (hm, _) = hamiltonian(t, xm, &ym, &zm, p, &q, coeffs)?;
        let gap = hm - 0.5 * (h1 + h2);
        worst_convexity = worst_convexity.max(gap);
        if gap > tol {
            ham_ok = false;
        }
        let g1 = coeffs.eval_big_g(x1)?;
        let g2 = coeffs.eval_big_g(x2)?;
        let gm = coeffs.eval_big_g(xm)?;
        let g_gap = gm - 0.5 * (g1 + g2);
        worst_convexity = worst_convexity.max(g_gap);
        if g_gap > tol {
            g_ok = false;
        }
    }
    // dA-density comparison against perturbation controls
    let da_integral = |a: &IncreasingProcessPath| -> Result<f64, ControlError> {
        let mut acc = 0.0;
        for k in 0..np - 1 {
            let u = coeffs.eval_big_h(grid.time(k))? - p_mean[k] * coeffs.eval_h(grid.time(k), &[], 0.0)?;
            acc += u * a.cont_increment(k);
            let jump = a.jump_at_cell_end(k);
            if jump > 0.0 {
                let t = grid.time(k + 1);
                let u_j = coeffs.eval_big_h(t)? - p_mean[k + 1] * coeffs.eval_h(t, &[], 0.0)?;
                acc += u_j * jump;
            }
        }
        Ok(acc)
    };
    let base = da_integral(&candidate.a)?;
    let n = grid.n_steps();
    let mut worst_gap: f64 = 0.0;
    let mut ineq_ok = true;
    let mut probe_controls: Vec<IncreasingProcessPath> = Vec::new();
    for scale in [0.0, 0.5, 1.5, 2.0] {
        let density: Vec<f64> = candidate.a.density().iter().map(|v| v * scale).collect();
        let jumps: Vec<(usize, f64)> = candidate
            .a
            .jumps()
            .iter()
            .map(|&(k, s)| (k, s * scale))
            .collect();
        probe_controls.push(IncreasingProcessPath::new(grid, density, jumps).unwrap());
    }
    for shift in [1usize, n / 4 + 1] {
        let mut density = vec![0.0; n];
        for k in 0..n {
            density[(k + shift) % n] = candidate.a.density()[k];
        }
        let jumps: Vec<(usize, f64)> = candidate
            .a
            .jumps()
            .iter()
            .map(|&(k, s)| ((k + shift - 1) % n + 1, s))
            .collect();
        probe_controls.push(IncreasingProcessPath::new(grid, density, jumps).unwrap());
    }
    let mass_scale = candidate.a.total_mass().max(1.0);
    for _ in probe_controls.len()..n_probe.max(probe_controls.len() + 4) {
        let k = rng.gen_range(1..=n);
        let size = rng.gen::<f64>() * 2.0 * mass_scale;
        let mut atom = IncreasingProcessPath::new(grid, vec![0.0; n], vec![(k, size)]).unwrap();
        if rng.gen::<bool>() {
            // convex combination with the candidate
            let w = rng.gen::<f64>();
            let density: Vec<f64> = candidate
                .a
                .density()
                .iter()
                .map(|v| v * (1.0 - w))
                .collect();
            let mut jumps: Vec<(usize, f64)> = candidate
                .a
                .jumps()
                .iter()
                .map(|&(kk, s)| (kk, s * (1.0 - w)))
                .collect();
            jumps.push((k, size * w));
            atom = IncreasingProcessPath::new(grid, density, jumps).unwrap();
        }
        probe_controls.push(atom);
    }
    for probe in &probe_controls {
        let val = da_integral(probe)?;
        let gap = base - val; // positive when the probe beats the candidate
        worst_gap = worst_gap.max(gap);
        if gap > tol {
            ineq_ok = false;
        }
    }
    Ok(SufficientReport {
        hamiltonian_convex: ham_ok,
        g_convex: g_ok,
        variational_inequality: ineq_ok,
        worst_convexity_gap: worst_convexity,
        worst_inequality_gap: worst_gap,
        pass: ham_ok && g_ok && ineq_ok,
    })
}
