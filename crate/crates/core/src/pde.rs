//! Deterministic 1-D finite-difference solver for the integro-PDE
//!
//! ```text
//! du/dt + b u_x + (sigma^2/2) u_xx
//!       + int [u(x + gamma(t,x,e)) - u(x) - u_x gamma(t,x,e)] nu(de)
//!       + f(t, x, u, sigma u_x, A u) = 0,
//! A u = int [u(x + gamma) - u(x)] nu(de),
//! du/dn + h(t, x, u) = 0 on the boundary,      u(T, x) = ell(x),
//! ```
//!
//! used as the acceptance oracle for the Monte Carlo field. Backward time
//! stepping, semi-implicit in the diffusion term (tridiagonal solve per
//! level), explicit in advection, the integral terms and `f`. Displaced
//! points `x + gamma` are evaluated by linear interpolation, matching the
//! first-order regime of the Euler scheme the oracle is compared against;
//! points displaced outside the interval are clamped and counted. The
//! nonlinear Neumann condition closes each level through a second-order
//! one-sided difference solved per boundary node by a bisection-safeguarded
//! secant iteration.

use thiserror::Error;

use crate::coeffs::CompiledCoeffs;
use crate::dsl::EvalError;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PdeError {
    #[error("time step {dt:.3e} violates the stability bound {bound:.3e} (c = {C_STAB})")]
    StabilityViolation { dt: f64, bound: f64 },
    #[error("boundary closure did not converge")]
    BoundaryNewtonFailure,
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("bad oracle configuration: {0}")]
    BadConfig(String),
}

/// Stability constant: `dt <= C_STAB * dx^2 / max sigma^2`. Conservative (the
/// diffusion is implicit) but keeps every explicit term well inside its own
/// CFL region.
pub const C_STAB: f64 = 0.5;

/// Smallest admissible number of time steps for the given spatial grid.
pub fn stable_n_t(horizon: f64, x_lo: f64, x_hi: f64, n_x: usize, sigma_max: f64) -> usize {
    let dx = (x_hi - x_lo) / (n_x - 1) as f64;
    let bound = C_STAB * dx * dx / sigma_max.max(1e-12).powi(2);
    (horizon / bound).ceil() as usize
}

/// Solution levels stored at the requested output times.
#[derive(Debug, Clone)]
pub struct FdSolution {
    pub x_nodes: Vec<f64>,
    /// `(time, nodal values)`, ascending in time; always contains `t = 0`
    /// and the terminal level.
    pub levels: Vec<(f64, Vec<f64>)>,
    /// Number of displaced points clamped back into the interval.
    pub clamped: usize,
    pub n_t: usize,
}

impl FdSolution {
    /// Value at `(t, x)` with `t` one of the stored levels (within 1e-9 of
    /// it) and `x` interpolated linearly between nodes.
    pub fn value(&self, t: f64, x: f64) -> Option<f64> {
        let level = self
            .levels
            .iter()
            .find(|(lt, _)| (lt - t).abs() <= 1e-9 * (1.0 + t.abs()))?;
        let n = self.x_nodes.len();
        let lo = self.x_nodes[0];
        let hi = self.x_nodes[n - 1];
        if x < lo - 1e-12 || x > hi + 1e-12 {
            return None;
        }
        let dx = (hi - lo) / (n - 1) as f64;
        let u = ((x - lo) / dx).clamp(0.0, (n - 1) as f64);
        let i = (u.floor() as usize).min(n - 2);
        let frac = u - i as f64;
        Some(level.1[i] * (1.0 - frac) + level.1[i + 1] * frac)
    }
}

struct Workspace {
    n_x: usize,
    dx: f64,
    x: Vec<f64>,
    clamped: usize,
}

impl Workspace {
    fn interp(&mut self, u: &[f64], x: f64) -> f64 {
        let lo = self.x[0];
        let hi = self.x[self.n_x - 1];
        let xc = if x < lo {
            self.clamped += 1;
            lo
        } else if x > hi {
            self.clamped += 1;
            hi
        } else {
            x
        };
        let s = ((xc - lo) / self.dx).clamp(0.0, (self.n_x - 1) as f64);
        let i = (s.floor() as usize).min(self.n_x - 2);
        let mut frac = s - i as f64;
        // snap to the node so that a zero displacement reproduces the nodal
        // value bit for bit
        if frac < 1e-9 {
            frac = 0.0;
        } else if frac > 1.0 - 1e-9 {
            frac = 1.0;
        }
        if frac == 0.0 {
            u[i]
        } else if frac == 1.0 {
            u[i + 1]
        } else {
            u[i] * (1.0 - frac) + u[i + 1] * frac
        }
    }
}

/// Thomas algorithm for the tridiagonal system `(a, b, c) u = d` (sub, diag,
/// super). Overwrites scratch, returns the solution in `d`.
fn solve_tridiag(a: &[f64], b: &[f64], c: &[f64], d: &mut [f64], scratch: &mut [f64]) {
    let n = d.len();
    scratch[0] = c[0] / b[0];
    d[0] /= b[0];
    for i in 1..n {
        let m = b[i] - a[i] * scratch[i - 1];
        scratch[i] = c[i] / m;
        d[i] = (d[i] - a[i] * d[i - 1]) / m;
    }
    for i in (0..n - 1).rev() {
        d[i] -= scratch[i] * d[i + 1];
    }
}

/// Scalar root of the boundary closure `q(u0) = slope_term(u0) + h(t,x,u0)`,
/// bisection-safeguarded secant to 1e-10.
fn boundary_root(
    mut q: impl FnMut(f64) -> Result<f64, EvalError>,
    guess: f64,
) -> Result<f64, PdeError> {
    let mut lo = guess;
    let mut q_lo = q(lo)?;
    if q_lo.abs() <= 1e-12 {
        return Ok(lo);
    }
    // expand a bracket around the guess
    let mut hi = lo;
    let mut q_hi = q_lo;
    let mut step = 1e-3 * (1.0 + guess.abs());
    let mut found = false;
    for _ in 0..80 {
        let dir = if q_lo > 0.0 { 1.0 } else { -1.0 };
        // q is strictly decreasing in u0 for fine grids; move towards the root
        hi = lo + dir * step;
        q_hi = q(hi)?;
        if q_lo * q_hi <= 0.0 {
            found = true;
            break;
        }
        lo = hi;
        q_lo = q_hi;
        step *= 2.0;
    }
    if !found {
        return Err(PdeError::BoundaryNewtonFailure);
    }
    let (mut a, mut qa, mut b, mut qb) = if lo <= hi { (lo, q_lo, hi, q_hi) } else { (hi, q_hi, lo, q_lo) };
    for _ in 0..200 {
        let mut cand = if (qb - qa).abs() > 1e-300 {
            b - qb * (b - a) / (qb - qa)
        } else {
            0.5 * (a + b)
        };
        if !(cand > a && cand < b) {
            cand = 0.5 * (a + b);
        }
        let qc = q(cand)?;
        if qc.abs() <= 1e-10 || (b - a).abs() <= 1e-14 * (1.0 + cand.abs()) {
            return Ok(cand);
        }
        if qa * qc <= 0.0 {
            b = cand;
            qb = qc;
        } else {
            a = cand;
            qa = qc;
        }
    }
    Err(PdeError::BoundaryNewtonFailure)
}

/// Solves the problem on `[x_lo, x_hi] x [0, T]` and stores the levels at
/// `output_times` (snapped to the nearest time level). `n_t = None` picks the
/// stability bound.
pub fn solve_ipde(
    coeffs: &CompiledCoeffs,
    x_lo: f64,
    x_hi: f64,
    horizon: f64,
    n_x: usize,
    n_t: Option<usize>,
    output_times: &[f64],
) -> Result<FdSolution, PdeError> {
    if coeffs.n_dim != 1 || coeffs.dim_w != 1 {
        return Err(PdeError::BadConfig(
            "the oracle handles 1-D state and 1-D noise only".into(),
        ));
    }
    if coeffs.g.iter().any(|g| {
        // oracle covers the deterministic equation
        g.uses_slot(0) || g.uses_slot(1) || g.uses_slot(2) || g.uses_slot(3) || g.uses_slot(4)
    }) {
        return Err(PdeError::BadConfig("g must be identically 0".into()));
    }
    if n_x < 5 {
        return Err(PdeError::BadConfig("need at least 5 spatial nodes".into()));
    }
    let dx = (x_hi - x_lo) / (n_x - 1) as f64;
    // stability scan of sigma over the grid at t = 0 and t = T
    let mut sigma_max: f64 = 0.0;
    let mut sbuf = [0.0];
    for i in 0..n_x {
        let x = x_lo + i as f64 * dx;
        for t in [0.0, horizon] {
            coeffs.eval_sigma(t, &[x], &mut sbuf)?;
            sigma_max = sigma_max.max(sbuf[0].abs());
        }
    }
    let n_t_min = stable_n_t(horizon, x_lo, x_hi, n_x, sigma_max);
    let n_t = n_t.unwrap_or(n_t_min);
    let dt = horizon / n_t as f64;
    let bound = C_STAB * dx * dx / sigma_max.max(1e-12).powi(2);
    if dt > bound * (1.0 + 1e-12) {
        return Err(PdeError::StabilityViolation { dt, bound });
    }
    let mut ws = Workspace {
        n_x,
        dx,
        x: (0..n_x).map(|i| x_lo + i as f64 * dx).collect(),
        clamped: 0,
    };
    let mut u: Vec<f64> = (0..n_x)
        .map(|i| coeffs.eval_ell(&[ws.x[i]]))
        .collect::<Result<_, _>>()?;
    // requested output levels snapped to time indices (terminal kept as-is)
    let mut wanted: Vec<(usize, f64)> = output_times
        .iter()
        .map(|&t| (((t / dt).round() as usize).min(n_t), t))
        .collect();
    wanted.push((0, 0.0));
    wanted.sort_by_key(|&(m, _)| m);
    wanted.dedup_by_key(|&mut (m, _)| m);
    let mut levels: Vec<(f64, Vec<f64>)> = Vec::new();
    if wanted.iter().any(|&(m, _)| m == n_t) {
        levels.push((horizon, u.clone()));
    }
    let atoms = coeffs.levy.atoms().to_vec();
    let mut sub = vec![0.0; n_x - 2];
    let mut diag = vec![0.0; n_x - 2];
    let mut sup = vec![0.0; n_x - 2];
    let mut rhs_base = vec![0.0; n_x - 2];
    let mut rhs = vec![0.0; n_x - 2];
    let mut scratch = vec![0.0; n_x - 2];
    let mut gbuf = [0.0];
    let mut bbuf = [0.0];
    for m in (0..n_t).rev() {
        let t = m as f64 * dt;
        // explicit part from the known level
        for i in 1..n_x - 1 {
            let x = ws.x[i];
            let du = (u[i + 1] - u[i - 1]) / (2.0 * dx);
            coeffs.eval_b(t, &[x], &mut bbuf)?;
            coeffs.eval_sigma(t, &[x], &mut sbuf)?;
            let mut lev_gen = 0.0;
            let mut a_op = 0.0;
            for atom in &atoms {
                coeffs.eval_gamma(t, &[x], atom.mark, &mut gbuf)?;
                let disp = ws.interp(&u, x + gbuf[0]);
                let diff = disp - u[i];
                a_op += diff * atom.weight;
                lev_gen += (diff - du * gbuf[0]) * atom.weight;
            }
            let f_val = coeffs.eval_f(t, &[x], u[i], &[sbuf[0] * du], a_op)?;
            rhs_base[i - 1] = u[i] + dt * (bbuf[0] * du + lev_gen + f_val);
            let r = 0.5 * sbuf[0] * sbuf[0] * dt / (dx * dx);
            sub[i - 1] = -r;
            diag[i - 1] = 1.0 + 2.0 * r;
            sup[i - 1] = -r;
        }
        // implicit diffusion with nonlinear Neumann closure at both ends,
        // solved in increment form so constants are exact equilibria
        let mut u0 = u[0];
        let mut un = u[n_x - 1];
        let mut interior = vec![0.0; n_x - 2];
        let mut converged = false;
        for _pass in 0..50 {
            for i in 1..n_x - 1 {
                let left = if i == 1 { u0 } else { u[i - 1] };
                let right = if i == n_x - 2 { un } else { u[i + 1] };
                let r = -sub[i - 1];
                let second_diff = (right - u[i]) - (u[i] - left);
                rhs[i - 1] = (rhs_base[i - 1] - u[i]) + r * second_diff;
            }
            let mut d = rhs.clone();
            solve_tridiag(&sub, &diag, &sup, &mut d, &mut scratch);
            for i in 0..n_x - 2 {
                interior[i] = u[i + 1] + d[i];
            }
            let (u1, u2) = (interior[0], interior[1]);
            let (um1, um2) = (interior[n_x - 3], interior[n_x - 4]);
            // inner normal: +d/dx on the left, -d/dx on the right
            let new_u0 = boundary_root(
                |v| {
                    Ok((-3.0 * v + 4.0 * u1 - u2) / (2.0 * dx)
                        + coeffs.eval_h(t, &[ws.x[0]], v)?)
                },
                u0,
            )?;
            let new_un = boundary_root(
                |v| {
                    Ok(-(3.0 * v - 4.0 * um1 + um2) / (2.0 * dx)
                        + coeffs.eval_h(t, &[ws.x[n_x - 1]], v)?)
                },
                un,
            )?;
            let moved = (new_u0 - u0).abs().max((new_un - un).abs());
            u0 = new_u0;
            un = new_un;
            if moved <= 1e-12 * (1.0 + u0.abs().max(un.abs())) {
                converged = true;
                break;
            }
        }
        if !converged {
            return Err(PdeError::BoundaryNewtonFailure);
        }
        u[0] = u0;
        u[n_x - 1] = un;
        u[1..n_x - 1].copy_from_slice(&interior);
        if wanted.iter().any(|&(lvl, _)| lvl == m) {
            levels.push((t, u.clone()));
        }
    }
    levels.sort_by(|a, b| a.0.total_cmp(&b.0));
    Ok(FdSolution {
        x_nodes: ws.x,
        levels,
        clamped: ws.clamped,
        n_t,
    })
}
