//! Pointwise evaluation of the solution field `u(t,x) = Y^{t,x}(t)` of the
//! integro-PDE with nonlinear Neumann boundary condition.
//!
//! Every point is evaluated by forward resimulation: the reflected
//! jump-diffusion runs from `(t, x)` under fresh inner drivers, the backward
//! equation is solved along those paths, and `Y(t)` is read off at the start.
//! Driver streams are keyed only by `(seed, stream, replicate, path)` — never
//! by the point — so different points, terminal data or routes can be
//! compared under common random numbers.
//!
//! With a backward coefficient `g != 0` the field is a random function of
//! the frozen backward path `B`; two routes are exposed per fixed `B`:
//!
//! * `Direct` solves the doubly stochastic equation as given;
//! * `Transform` removes `g` through the flow of [`crate::doss`], solves the
//!   omega-wise equation `(f~, 0, h~)` and maps the value back through
//!   `eta`. The transformed route is the reference: its inner recursion has
//!   no backward integral.

use std::sync::Arc;
use rayon::prelude::*;
use thiserror::Error;

use crate::coeffs::CompiledCoeffs;
use crate::doss::{FlowError, FlowPair, SpatialLattice, TransformedCoeffs};
use crate::dsl::EvalError;
use crate::gbdsde::{
    solve_picard_from, AProcesses, PathBundle, RegressionConfig, SolverError, StatePaths,
};
use crate::grid::{GridError, TimeGrid};
use crate::paths::{BrownianPath, Direction, JumpMeasurePath};
use crate::reflect::{simulate_reflected, DomainSpec, ReflectError};
use crate::rng::{substream, RngKey};
use crate::stats::{mean, stderr_of_mean};

#[derive(Debug, Error)]
pub enum FkError {
    #[error(transparent)]
    Reflect(#[from] ReflectError),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Path(#[from] crate::paths::PathError),
    #[error("bad evaluation point: {0}")]
    BadPoint(String),
    #[error("model violates a field precondition: {0}")]
    Model(String),
}

/// Problem bundle for field evaluation: coefficients, domain geometry, time
/// discretization and solver controls.
#[derive(Debug, Clone)]
pub struct FkProblem {
    pub coeffs: CompiledCoeffs,
    pub domain: DomainSpec,
    pub horizon: f64,
    pub n_steps: usize,
    /// Bounding box of the domain, the support of the flow lattice.
    pub box_lo: Vec<f64>,
    pub box_hi: Vec<f64>,
    /// Flow lattice resolution per dimension.
    pub lattice_points: usize,
    pub picard_tol: f64,
    pub picard_max_iter: usize,
}

impl FkProblem {
    pub fn grid(&self) -> Result<Arc<TimeGrid>, FkError> {
        Ok(Arc::new(TimeGrid::new(self.horizon, self.n_steps)?))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Route {
    Direct,
    Transform,
}

#[derive(Debug, Clone, Copy)]
pub struct PointEstimate {
    pub value: f64,
    pub stderr: f64,
}

/// Field values over a batch of points, with the budget that produced them.
#[derive(Debug, Clone)]
pub struct FieldEstimate {
    pub points: Vec<(f64, Vec<f64>)>,
    pub values: Vec<f64>,
    pub stderrs: Vec<f64>,
    pub n_outer: usize,
    pub n_inner: usize,
    pub n_steps: usize,
}

impl FieldEstimate {
    /// CSV rows `t,x1..xn,u,stderr,n_outer,n_inner,n_steps` with
    /// 17-significant-digit floats.
    pub fn to_csv(&self) -> String {
        let n_dim = self.points.first().map_or(0, |(_, x)| x.len());
        let mut out = String::from("t,");
        for c in 1..=n_dim {
            out.push_str(&format!("x{c},"));
        }
        out.push_str("u,stderr,n_outer,n_inner,n_steps\n");
        for (i, (t, x)) in self.points.iter().enumerate() {
            out.push_str(&format!("{t:.16e},"));
            for v in x {
                out.push_str(&format!("{v:.16e},"));
            }
            out.push_str(&format!(
                "{:.16e},{:.16e},{},{},{}\n",
                self.values[i], self.stderrs[i], self.n_outer, self.n_inner, self.n_steps
            ));
        }
        out
    }
}

const ROLE_W: u64 = 2;
const ROLE_N: u64 = 3;
const ROLE_B: u64 = 4;

/// One replicate: inner drivers, reflected states from `(t, x)` and the
/// terminal data, assembled into a solver bundle.
fn build_replicate(
    problem: &FkProblem,
    grid: &Arc<TimeGrid>,
    point: (f64, &[f64]),
    n_inner: usize,
    seed: u64,
    stream: u64,
    replicate: u64,
    b: &BrownianPath,
) -> Result<(PathBundle, AProcesses, Vec<f64>, usize), FkError> {
    let coeffs = &problem.coeffs;
    let levy = coeffs.levy.clone();
    let w_stream = substream(substream(stream, ROLE_W), replicate);
    let n_stream = substream(substream(stream, ROLE_N), replicate);
    let start_index = grid.index_of(point.0)?;
    let n_dim = problem.domain.n_dim();
    let np = grid.n_points();
    let mut w = Vec::with_capacity(n_inner);
    let mut jumps = Vec::with_capacity(n_inner);
    let mut a = Vec::with_capacity(n_inner);
    let mut xi = Vec::with_capacity(n_inner);
    let mut state = vec![0.0; n_inner * np * n_dim];
    for i in 0..n_inner {
        let wp = BrownianPath::generate(grid, coeffs.dim_w, RngKey::new(seed, w_stream, i as u64));
        let jm = if levy.is_empty() {
            JumpMeasurePath::no_jumps(grid)
        } else {
            JumpMeasurePath::generate(grid, &levy, RngKey::new(seed, n_stream, i as u64))?
        };
        let refl = simulate_reflected(point, coeffs, &problem.domain, &wp, &jm)?;
        xi.push(coeffs.eval_ell(refl.x_at(np - 1))?);
        state[i * np * n_dim..(i + 1) * np * n_dim].copy_from_slice(&refl.x);
        a.push(refl.a_local);
        w.push(wp);
        jumps.push(jm);
    }
    let bundle = PathBundle {
        grid: grid.clone(),
        b: b.clone(),
        w,
        jumps,
        state: Some(StatePaths {
            n_dim,
            data: state,
        }),
    };
    Ok((bundle, AProcesses::PerPath(a), xi, start_index))
}

fn replicate_value(
    problem: &FkProblem,
    grid: &Arc<TimeGrid>,
    point: (f64, &[f64]),
    mc: &RegressionConfig,
    seed: u64,
    stream: u64,
    replicate: u64,
    b: &BrownianPath,
    route: Route,
    flow: Option<&FlowPair>,
) -> Result<f64, FkError> {
    let (bundle, a, xi, start) = build_replicate(
        problem, grid, point, mc.n_inner, seed, stream, replicate, b,
    )?;
    match route {
        Route::Direct => {
            let sol = solve_picard_from(
                &problem.coeffs,
                &xi,
                &a,
                &bundle,
                start,
                mc,
                problem.picard_tol,
                problem.picard_max_iter,
            )?;
            Ok(sol.y_start_mean())
        }
        Route::Transform => {
            let flow = flow.expect("transform route needs a flow");
            let transformed = TransformedCoeffs::new(&problem.coeffs, flow, &problem.domain)?;
            // terminal data is unchanged: epsilon(T, x, y) = y
            let sol = solve_picard_from(
                &transformed,
                &xi,
                &a,
                &bundle,
                start,
                mc,
                problem.picard_tol,
                problem.picard_max_iter,
            )?;
            let u_start = sol.y_start_mean();
            // map back through eta at the evaluation point
            Ok(u_start + flow.i(start, point.1)?)
        }
    }
}

fn evaluate_point(
    problem: &FkProblem,
    point: (f64, &[f64]),
    mc: &RegressionConfig,
    seed: u64,
    stream: u64,
    b: &BrownianPath,
    route: Route,
    flow: Option<&FlowPair>,
) -> Result<PointEstimate, FkError> {
    let grid = problem.grid()?;
    if point.1.len() != problem.domain.n_dim() {
        return Err(FkError::BadPoint(format!(
            "state has {} components, domain needs {}",
            point.1.len(),
            problem.domain.n_dim()
        )));
    }
    let reps: Vec<Result<f64, FkError>> = (0..mc.n_outer as u64)
        .into_par_iter()
        .map(|o| replicate_value(problem, &grid, point, mc, seed, stream, o, b, route, flow))
        .collect();
    let mut values = Vec::with_capacity(reps.len());
    for r in reps {
        values.push(r?);
    }
    Ok(PointEstimate {
        value: mean(&values),
        stderr: stderr_of_mean(&values),
    })
}

/// Deterministic field (`g == 0`): simulate the reflected diffusion from
/// `(t,x)`, solve the backward equation with jumps, return `Y^{t,x}(t)` with
/// its replicate standard error.
pub fn evaluate_u_deterministic(
    point: (f64, &[f64]),
    problem: &FkProblem,
    mc: &RegressionConfig,
    seed: u64,
    stream: u64,
) -> Result<PointEstimate, FkError> {
    if !problem.coeffs.g.iter().all(|g| g.is_const_zero()) {
        return Err(FkError::Model(
            "the deterministic field needs g identically 0; use the stochastic evaluator".into(),
        ));
    }
    let grid = problem.grid()?;
    let b = BrownianPath::generate_with(
        &grid,
        problem.coeffs.dim_b,
        RngKey::new(seed, substream(stream, ROLE_B), 0),
        Direction::Backward,
    );
    evaluate_point(problem, point, mc, seed, stream, &b, Route::Direct, None)
}

/// Stochastic field for a fixed backward path, by either route.
pub fn evaluate_u_stochastic(
    point: (f64, &[f64]),
    problem: &FkProblem,
    b: &BrownianPath,
    mc: &RegressionConfig,
    seed: u64,
    stream: u64,
    route: Route,
) -> Result<PointEstimate, FkError> {
    if problem.coeffs.g_depends_on_state() {
        return Err(FkError::Model(
            "the field representation needs g = g(t, x), independent of y, z and j".into(),
        ));
    }
    match route {
        Route::Direct => evaluate_point(problem, point, mc, seed, stream, b, route, None),
        Route::Transform => {
            let lattice = SpatialLattice {
                n_dim: problem.box_lo.len(),
                points_per_dim: problem.lattice_points,
                ..SpatialLattice::inflated(&problem.box_lo, &problem.box_hi)
            };
            let flow = FlowPair::build(&problem.coeffs, b, lattice)?;
            evaluate_point(problem, point, mc, seed, stream, b, route, Some(&flow))
        }
    }
}

/// Batch evaluation over a grid of points with shared driver streams;
/// `b` fixes the backward path (required when `g != 0`).
pub fn evaluate_field(
    points: &[(f64, Vec<f64>)],
    problem: &FkProblem,
    mc: &RegressionConfig,
    seed: u64,
    stream: u64,
    b: Option<&BrownianPath>,
    route: Route,
) -> Result<FieldEstimate, FkError> {
    if problem.coeffs.g_depends_on_state() {
        return Err(FkError::Model(
            "the field representation needs g = g(t, x), independent of y, z and j".into(),
        ));
    }
    let grid = problem.grid()?;
    let owned_b;
    let b_ref = match b {
        Some(p) => p,
        None => {
            owned_b = BrownianPath::generate_with(
                &grid,
                problem.coeffs.dim_b,
                RngKey::new(seed, substream(stream, ROLE_B), 0),
                Direction::Backward,
            );
            &owned_b
        }
    };
    let flow_store;
    let flow = match route {
        Route::Direct => None,
        Route::Transform => {
            let lattice = SpatialLattice {
                n_dim: problem.box_lo.len(),
                points_per_dim: problem.lattice_points,
                ..SpatialLattice::inflated(&problem.box_lo, &problem.box_hi)
            };
            flow_store = FlowPair::build(&problem.coeffs, b_ref, lattice)?;
            Some(&flow_store)
        }
    };
    let mut values = Vec::with_capacity(points.len());
    let mut stderrs = Vec::with_capacity(points.len());
    for (t, x) in points {
        let est = evaluate_point(problem, (*t, x), mc, seed, stream, b_ref, route, flow)?;
        values.push(est.value);
        stderrs.push(est.stderr);
    }
    Ok(FieldEstimate {
        points: points.to_vec(),
        values,
        stderrs,
        n_outer: mc.n_outer,
        n_inner: mc.n_inner,
        n_steps: problem.n_steps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coeffs::CoefficientStrings;
    use crate::dsl::parse;
    use crate::pde::solve_ipde;
    use std::f64::consts::PI;

    const PI_SRC: &str = "3.141592653589793";

    fn heat_problem(terminal: &str, n_steps: usize) -> FkProblem {
        let mut s = CoefficientStrings::zero(1, 1, 1);
        s.sigma = vec!["1".into()];
        s.ell = terminal.into();
        s.phi = "x1*(1-x1)".to_string();
        let coeffs = s.parse().unwrap().compile().unwrap();
        let domain = DomainSpec::new(&parse(&"x1*(1-x1)".to_string()).unwrap(), 1)
            .unwrap();
        FkProblem {
            coeffs,
            domain,
            horizon: 1.0,
            n_steps,
            box_lo: vec![0.0],
            box_hi: vec![1.0],
            lattice_points: 33,
            picard_tol: 1e-8,
            picard_max_iter: 60,
        }
    }

    fn budget(n_outer: usize, n_inner: usize) -> RegressionConfig {
        RegressionConfig {
            degree: 2,
            n_outer,
            n_inner,
            ridge: 1e-8,
        }
    }

    #[test]
    fn constant_terminal_gives_constant_field() {
        let problem = heat_problem("3.5", 32);
        let mut mc = budget(4, 64);
        mc.ridge = 0.0;
        let est = evaluate_u_deterministic((0.5, &[0.5]), &problem, &mc, 1, 70).unwrap();
        assert!((est.value - 3.5).abs() < 1e-10, "{}", est.value);
    }

    #[test]
    fn terminal_row_is_exact() {
        let problem = heat_problem("1 + x1^2", 16);
        let est =
            evaluate_u_deterministic((1.0, &[0.3]), &problem, &budget(2, 16), 2, 71).unwrap();
        assert_eq!(est.value, 1.09);
        assert_eq!(est.stderr, 0.0);
    }

    #[test]
    fn x_independent_linear_driver_reduces_to_ode() {
        // f = -c y, ell = 1: u = exp(-c (T - t)) regardless of the state
        let mut s = CoefficientStrings::zero(1, 1, 1);
        s.sigma = vec!["1".into()];
        s.ell = "1".into();
        s.f = "-0.8*y".into();
        s.phi = "x1*(1-x1)".to_string();
        let coeffs = s.parse().unwrap().compile().unwrap();
        let domain =
            DomainSpec::new(&parse(&"x1*(1-x1)".to_string()).unwrap(), 1).unwrap();
        let problem = FkProblem {
            coeffs,
            domain,
            horizon: 1.0,
            n_steps: 64,
            box_lo: vec![0.0],
            box_hi: vec![1.0],
            lattice_points: 33,
            picard_tol: 1e-9,
            picard_max_iter: 80,
        };
        let est =
            evaluate_u_deterministic((0.25, &[0.5]), &problem, &budget(4, 128), 3, 72).unwrap();
        let expect = (-0.8f64 * 0.75).exp();
        // first-order scheme bias plus replicate noise
        let tol = (3.0 * est.stderr).max(0.8 * 0.8 * 0.75 / 64.0) + 3e-3;
        assert!(
            (est.value - expect).abs() <= tol,
            "{} vs {expect} (tol {tol})",
            est.value
        );
    }

    #[test]
    fn heat_field_matches_fd_oracle_at_midpoint() {
        let problem = heat_problem(&format!("1 + cos({PI_SRC}*x1)"), 256);
        let mc = budget(6, 400);
        let est = evaluate_u_deterministic((0.5, &[0.5]), &problem, &mc, 4, 73).unwrap();
        let fd = solve_ipde(&problem.coeffs, 0.0, 1.0, 1.0, 201, None, &[0.5]).unwrap();
        let oracle = fd.value(0.5, 0.5).unwrap();
        let tol = (0.05 * oracle.abs()).max(4.0 * est.stderr);
        assert!(
            (est.value - oracle).abs() <= tol,
            "mc {} vs fd {oracle} (tol {tol})",
            est.value
        );
        // sanity: the separated solution at the midpoint is 1 + 0
        assert!((oracle - 1.0).abs() < 1e-3);
    }

    #[test]
    fn stochastic_field_constant_g_exact_per_path() {
        // f = h = 0, ell = 0, g = c: u(t,x) = c (B(T) - B(t)) exactly
        let mut s = CoefficientStrings::zero(1, 1, 1);
        s.sigma = vec!["1".into()];
        s.g = vec!["0.7".into()];
        s.phi = "x1*(1-x1)".to_string();
        let coeffs = s.parse().unwrap().compile().unwrap();
        let domain =
            DomainSpec::new(&parse(&"x1*(1-x1)".to_string()).unwrap(), 1).unwrap();
        let problem = FkProblem {
            coeffs,
            domain,
            horizon: 1.0,
            n_steps: 32,
            box_lo: vec![0.0],
            box_hi: vec![1.0],
            lattice_points: 33,
            picard_tol: 1e-10,
            picard_max_iter: 40,
        };
        let grid = problem.grid().unwrap();
        let b = BrownianPath::generate_with(
            &grid,
            1,
            RngKey::new(9, 99, 0),
            Direction::Backward,
        );
        let mut mc = budget(2, 64);
        mc.ridge = 0.0;
        let est = evaluate_u_stochastic((0.25, &[0.5]), &problem, &b, &mc, 5, 74, Route::Direct)
            .unwrap();
        let expect = 0.7 * (b.value(32, 0) - b.value(8, 0));
        assert!((est.value - expect).abs() < 1e-9, "{} vs {expect}", est.value);
    }

    #[test]
    fn routes_agree_bitwise_when_g_vanishes() {
        let problem = heat_problem(&format!("cos({PI_SRC}*x1)"), 32);
        let grid = problem.grid().unwrap();
        let b = BrownianPath::generate_with(
            &grid,
            1,
            RngKey::new(11, 98, 0),
            Direction::Backward,
        );
        let mc = budget(2, 96);
        let direct = evaluate_u_stochastic(
            (0.5, &[0.4]),
            &problem,
            &b,
            &mc,
            6,
            75,
            Route::Direct,
        )
        .unwrap();
        let transform = evaluate_u_stochastic(
            (0.5, &[0.4]),
            &problem,
            &b,
            &mc,
            6,
            75,
            Route::Transform,
        )
        .unwrap();
        assert!(
            (direct.value - transform.value).abs() < 1e-12,
            "direct {} vs transform {}",
            direct.value,
            transform.value
        );
    }

    #[test]
    fn route_equivalence_smooth_g() {
        let mut s = CoefficientStrings::zero(1, 1, 1);
        s.sigma = vec!["1".into()];
        s.ell = format!("cos({PI_SRC}*x1)");
        s.g = vec!["0.2*sin(x1+t)".into()];
        s.phi = "x1*(1-x1)".to_string();
        let coeffs = s.parse().unwrap().compile().unwrap();
        let domain =
            DomainSpec::new(&parse(&"x1*(1-x1)".to_string()).unwrap(), 1).unwrap();
        let problem = FkProblem {
            coeffs,
            domain,
            horizon: 1.0,
            n_steps: 64,
            box_lo: vec![0.0],
            box_hi: vec![1.0],
            lattice_points: 65,
            picard_tol: 1e-8,
            picard_max_iter: 60,
        };
        let grid = problem.grid().unwrap();
        let b = BrownianPath::generate_with(
            &grid,
            1,
            RngKey::new(13, 97, 0),
            Direction::Backward,
        );
        let mc = budget(6, 256);
        let point = (0.5, [0.5]);
        let direct =
            evaluate_u_stochastic((point.0, &point.1), &problem, &b, &mc, 7, 76, Route::Direct)
                .unwrap();
        let transform = evaluate_u_stochastic(
            (point.0, &point.1),
            &problem,
            &b,
            &mc,
            7,
            76,
            Route::Transform,
        )
        .unwrap();
        let combined = (direct.stderr.powi(2) + transform.stderr.powi(2)).sqrt();
        assert!(
            (direct.value - transform.value).abs() <= 4.0 * combined,
            "direct {}+-{} vs transform {}+-{}",
            direct.value,
            direct.stderr,
            transform.value,
            transform.stderr
        );
    }

    #[test]
    fn route_equivalence_with_jumps() {
        // exercises the jump terms of the transform: the atom sums in the
        // generator on eta and the shift of the j argument
        let mut s = CoefficientStrings::zero(1, 1, 1);
        s.sigma = vec!["0.8".into()];
        s.ell = format!("cos({PI_SRC}*x1)");
        s.g = vec!["0.15*cos(x1)".into()];
        s.f = "-0.3*y + 0.5*j".into();
        s.gamma = vec!["0.1*e*x1*(1-x1)".into()];
        s.levy = crate::paths::LevySpec::new(vec![
            crate::paths::LevyAtom { mark: 1.0, weight: 1.0 },
            crate::paths::LevyAtom { mark: -1.0, weight: 1.0 },
        ])
        .unwrap();
        s.phi = "x1*(1-x1)".to_string();
        let coeffs = s.parse().unwrap().compile().unwrap();
        let domain = DomainSpec::new(&parse("x1*(1-x1)").unwrap(), 1).unwrap();
        let problem = FkProblem {
            coeffs,
            domain,
            horizon: 1.0,
            n_steps: 64,
            box_lo: vec![0.0],
            box_hi: vec![1.0],
            lattice_points: 65,
            picard_tol: 1e-8,
            picard_max_iter: 60,
        };
        let grid = problem.grid().unwrap();
        let b = BrownianPath::generate_with(
            &grid,
            1,
            RngKey::new(15, 96, 0),
            Direction::Backward,
        );
        let mc = budget(6, 256);
        let direct = evaluate_u_stochastic(
            (0.5, &[0.5]),
            &problem,
            &b,
            &mc,
            16,
            95,
            Route::Direct,
        )
        .unwrap();
        let transform = evaluate_u_stochastic(
            (0.5, &[0.5]),
            &problem,
            &b,
            &mc,
            16,
            95,
            Route::Transform,
        )
        .unwrap();
        let combined = (direct.stderr.powi(2) + transform.stderr.powi(2)).sqrt();
        assert!(
            (direct.value - transform.value).abs() <= 4.0 * combined,
            "direct {} +- {} vs transform {} +- {}",
            direct.value,
            direct.stderr,
            transform.value,
            transform.stderr
        );
    }

    #[test]
    fn terminal_monotonicity_shared_noise() {
        let lo = heat_problem(&format!("cos({PI_SRC}*x1)"), 64);
        let hi = heat_problem(&format!("cos({PI_SRC}*x1) + 0.5"), 64);
        let mc = budget(4, 128);
        let a = evaluate_u_deterministic((0.5, &[0.35]), &lo, &mc, 8, 77).unwrap();
        let b = evaluate_u_deterministic((0.5, &[0.35]), &hi, &mc, 8, 77).unwrap();
        assert!(
            b.value - a.value >= -3.0 * (a.stderr + b.stderr),
            "{} vs {}",
            a.value,
            b.value
        );
    }

    #[test]
    fn field_csv_schema_and_consistency() {
        let problem = heat_problem("1 + x1", 8);
        let est = evaluate_field(
            &[(0.5, vec![0.5]), (1.0, vec![0.25])],
            &problem,
            &budget(2, 16),
            10,
            78,
            None,
            Route::Direct,
        )
        .unwrap();
        let csv = est.to_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "t,x1,u,stderr,n_outer,n_inner,n_steps");
        assert_eq!(lines.count(), 2);
        assert!(csv.contains(",2,16,8\n"));
        // a single-point batch reproduces the pointwise estimator bitwise
        // (the driver streams never depend on the point)
        let single = evaluate_u_deterministic((0.5, &[0.5]), &problem, &budget(2, 16), 10, 78)
            .unwrap();
        assert_eq!(est.values[0].to_bits(), single.value.to_bits());
        // terminal rows evaluate the terminal function exactly
        assert_eq!(est.values[1], 1.25);
        assert_eq!(est.stderrs[1], 0.0);
    }

    #[test]
    fn five_by_five_field_against_oracle() {
        let problem = heat_problem(&format!("1 + cos({PI_SRC}*x1)"), 512);
        let mc = budget(6, 400);
        let mut points = Vec::new();
        for t in [0.25, 0.375, 0.5, 0.625, 0.75] {
            for x in [0.2, 0.35, 0.5, 0.65, 0.8] {
                points.push((t, vec![x]));
            }
        }
        let field =
            evaluate_field(&points, &problem, &mc, 21, 80, None, Route::Direct).unwrap();
        let fd = solve_ipde(
            &problem.coeffs,
            0.0,
            1.0,
            1.0,
            201,
            None,
            &[0.25, 0.375, 0.5, 0.625, 0.75],
        )
        .unwrap();
        let mut worst: f64 = 0.0;
        let mut worst_pt = (0.0, 0.0, 0.0, 0.0, 0.0);
        for (i, (t, x)) in field.points.iter().enumerate() {
            let oracle = fd.value(*t, x[0]).unwrap();
            let rel = (field.values[i] - oracle).abs() / oracle.abs();
            if rel > worst {
                worst = rel;
                worst_pt = (*t, x[0], field.values[i], field.stderrs[i], oracle);
            }
        }
        assert!(worst <= 0.07, "max relative error {worst} at {worst_pt:?}");
    }

    #[test]
    fn field_preconditions_enforced() {
        let mut s = CoefficientStrings::zero(1, 1, 1);
        s.sigma = vec!["1".into()];
        s.g = vec!["0.1".into()];
        s.phi = "x1*(1-x1)".to_string();
        let coeffs = s.parse().unwrap().compile().unwrap();
        let domain = DomainSpec::new(&parse("x1*(1-x1)").unwrap(), 1).unwrap();
        let problem = FkProblem {
            coeffs,
            domain,
            horizon: 1.0,
            n_steps: 8,
            box_lo: vec![0.0],
            box_hi: vec![1.0],
            lattice_points: 33,
            picard_tol: 1e-8,
            picard_max_iter: 40,
        };
        // nonzero g rejected by the deterministic evaluator
        let err = evaluate_u_deterministic((0.5, &[0.5]), &problem, &budget(2, 16), 1, 90)
            .unwrap_err();
        assert!(matches!(err, FkError::Model(_)));
        // solution-dependent g rejected by the stochastic evaluator
        let mut s = CoefficientStrings::zero(1, 1, 1);
        s.sigma = vec!["1".into()];
        s.g = vec!["0.1*y".into()];
        s.phi = "x1*(1-x1)".to_string();
        let coeffs = s.parse().unwrap().compile().unwrap();
        let domain = DomainSpec::new(&parse("x1*(1-x1)").unwrap(), 1).unwrap();
        let problem = FkProblem { coeffs, ..problem };
        let grid = problem.grid().unwrap();
        let b = BrownianPath::generate_with(
            &grid,
            1,
            RngKey::new(1, 91, 0),
            Direction::Backward,
        );
        let err = evaluate_u_stochastic(
            (0.5, &[0.5]),
            &problem,
            &b,
            &budget(2, 16),
            1,
            91,
            Route::Direct,
        )
        .unwrap_err();
        assert!(matches!(err, FkError::Model(_)));
    }

    #[test]
    fn field_continuity_proxy() {
        // |u(x + d) - u(x)| <= L d + 4 se under shared noise
        let problem = heat_problem(&format!("cos({PI_SRC}*x1)"), 64);
        let mc = budget(4, 128);
        let base = evaluate_u_deterministic((0.5, &[0.4]), &problem, &mc, 12, 79).unwrap();
        let lipschitz = PI; // |d ell / dx| bound propagates to the field
        for delta in [0.1, 0.05] {
            let shifted =
                evaluate_u_deterministic((0.5, &[0.4 + delta]), &problem, &mc, 12, 79).unwrap();
            let gap = (shifted.value - base.value).abs();
            assert!(
                gap <= lipschitz * delta + 4.0 * (base.stderr + shifted.stderr),
                "delta {delta}: gap {gap}"
            );
        }
    }
}
