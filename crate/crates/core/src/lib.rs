//! Monte Carlo laboratory for generalized backward doubly stochastic
//! differential equations (GBDSDEs) with jumps.
//!
//! The crate simulates the driver quartet (forward Brownian motion `W`,
//! backward Brownian motion `B`, a finite-activity Poisson random measure and
//! a càdlàg increasing process `A`) on a shared uniform time grid, and builds
//! on top of it:
//!
//! * [`gbdsde`] — discrete-time Picard solver with regression Monte Carlo
//!   conditional expectations, plus the per-path closed form for linear
//!   equations and the mean-square Itô identity check;
//! * [`reflect`] — Euler scheme for jump-diffusions reflected at the boundary
//!   of a smooth domain `{phi > 0}`, with the boundary local time recorded as
//!   an increasing process;
//! * [`doss`] — the stochastic flows `eta`/`epsilon` that remove the backward
//!   integral from the equation, together with the coefficient and solution
//!   transforms;
//! * [`feynman_kac`] — pointwise evaluation of the solution field
//!   `u(t,x) = Y^{t,x}(t)` of the associated integro-PDE with nonlinear
//!   Neumann boundary condition, by either the direct or the transformed
//!   route;
//! * [`pde`] — a deterministic 1-D finite-difference solver for the same
//!   integro-PDE, used as an oracle for the Monte Carlo field;
//! * [`control`] — Hamiltonian, adjoint and complementary-slackness checks
//!   for singular control candidates of a backward doubly stochastic system.
//!
//! Coefficients are supplied as text expressions parsed by [`dsl`]; all random
//! number generation is counter-keyed so that results are reproducible across
//! runs and thread counts.

pub mod control;
pub mod coeffs;
pub mod doss;
pub mod dsl;
pub mod feynman_kac;
pub mod gbdsde;
pub mod grid;
pub mod paths;
pub mod pde;
pub mod reflect;
pub mod regression;
pub mod rng;
pub mod stats;

pub use grid::TimeGrid;
pub use paths::{BrownianPath, IncreasingProcessPath, JumpMeasurePath, LevySpec};
pub use rng::RngKey;
