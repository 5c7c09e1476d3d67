//! Stochastic flows that remove the backward integral from the equation.
//!
//! For a coefficient `g = g(t,x)` (no dependence on the solution), the flow
//! pair
//!
//! ```text
//! eta(t,x,y) = y + I(t,x),   epsilon(t,x,y) = y - I(t,x),
//! I(t,x) = int_t^T g(s,x) dB(s)      (backward integral, per frozen B)
//! ```
//!
//! turns the equation with drivers `(f, g, h)` into an omega-wise equation
//! with drivers `(f~, 0, h~)`:
//!
//! ```text
//! f~(t,x,y,z,j) = f(t, x, eta, (grad_x eta) sigma + z, A_x eta + j) + L_x eta,
//! h~(t,x,y)     = h(t, x, eta) + d eta / d n,
//! ```
//!
//! with `L_x` the generator acting in `x` and `A_x` the jump-difference
//! operator. `I` and its first two `x`-derivatives are cached on a spatial
//! lattice and interpolated multilinearly: the flow is queried at every Monte
//! Carlo state visit, so per-query re-integration would be quadratic in the
//! budget. The jump sums over the Lévy atoms are exact.

use std::sync::Arc;

use thiserror::Error;

use crate::coeffs::CompiledCoeffs;
use crate::dsl::EvalError;
use crate::gbdsde::{Coefficients, SolutionTriple, StatePaths};
use crate::grid::{GridError, TimeGrid};
use crate::paths::BrownianPath;
use crate::reflect::DomainSpec;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FlowError {
    #[error("point {0:?} lies outside the interpolation hull of the flow lattice")]
    OutOfHull(Vec<f64>),
    #[error("g must not depend on y, z or j for the flow transform")]
    GDependsOnState,
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error("flow and drivers are not on the same grid")]
    GridMismatch,
}

/// Uniform tensor lattice over a box, the cache support of the flow.
#[derive(Debug, Clone)]
pub struct SpatialLattice {
    pub n_dim: usize,
    pub points_per_dim: usize,
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl SpatialLattice {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>, points_per_dim: usize) -> Self {
        assert_eq!(lo.len(), hi.len());
        assert!(points_per_dim >= 2);
        Self {
            n_dim: lo.len(),
            points_per_dim,
            lo,
            hi,
        }
    }

    /// Default lattice: 33 points per dimension over the box inflated by
    /// 10%, wide enough to cover admissible jump displacements.
    pub fn inflated(lo: &[f64], hi: &[f64]) -> Self {
        let margin: Vec<f64> = lo
            .iter()
            .zip(hi)
            .map(|(a, b)| 0.1 * (b - a).abs().max(1e-6))
            .collect();
        Self::new(
            lo.iter().zip(&margin).map(|(a, m)| a - m).collect(),
            hi.iter().zip(&margin).map(|(b, m)| b + m).collect(),
            33,
        )
    }

    pub fn n_nodes(&self) -> usize {
        self.points_per_dim.pow(self.n_dim as u32)
    }

    fn step(&self, c: usize) -> f64 {
        (self.hi[c] - self.lo[c]) / (self.points_per_dim - 1) as f64
    }

    /// Node coordinates from a flat index (row-major over dimensions).
    fn node(&self, mut idx: usize) -> Vec<f64> {
        let mut x = vec![0.0; self.n_dim];
        for c in (0..self.n_dim).rev() {
            let i = idx % self.points_per_dim;
            idx /= self.points_per_dim;
            x[c] = self.lo[c] + i as f64 * self.step(c);
        }
        x
    }

    fn flat(&self, indices: &[usize]) -> usize {
        let mut idx = 0;
        for &i in indices {
            idx = idx * self.points_per_dim + i;
        }
        idx
    }

    /// Base cell and fractional offsets of a query point.
    fn locate(&self, x: &[f64]) -> Result<(Vec<usize>, Vec<f64>), FlowError> {
        let mut base = vec![0usize; self.n_dim];
        let mut frac = vec![0.0; self.n_dim];
        for c in 0..self.n_dim {
            let span = self.hi[c] - self.lo[c];
            let tol = 1e-9 * span.max(1.0);
            if x[c] < self.lo[c] - tol || x[c] > self.hi[c] + tol {
                return Err(FlowError::OutOfHull(x.to_vec()));
            }
            let u = ((x[c] - self.lo[c]) / self.step(c))
                .clamp(0.0, (self.points_per_dim - 1) as f64);
            let i = (u.floor() as usize).min(self.points_per_dim - 2);
            base[c] = i;
            frac[c] = u - i as f64;
        }
        Ok((base, frac))
    }
}

/// Cached suffix integrals `I(t_k, x)` of one frozen backward path, with
/// nodal first and second differences.
#[derive(Debug, Clone)]
pub struct FlowPair {
    pub grid: Arc<TimeGrid>,
    pub lattice: SpatialLattice,
    n_dim: usize,
    /// `(n_points) x n_nodes`
    i_vals: Vec<f64>,
    /// `(n_points) x n_nodes x n_dim`
    di_vals: Vec<f64>,
    /// `(n_points) x n_nodes x n_dim x n_dim`
    d2i_vals: Vec<f64>,
}

impl FlowPair {
    /// Accumulates the suffix backward integrals of `g` on the lattice.
    /// Rejects tables whose `g` reads the solution state.
    pub fn build(
        coeffs: &CompiledCoeffs,
        b: &BrownianPath,
        lattice: SpatialLattice,
    ) -> Result<Self, FlowError> {
        if coeffs.g_depends_on_state() {
            return Err(FlowError::GDependsOnState);
        }
        if lattice.n_dim != coeffs.n_dim {
            return Err(FlowError::GridMismatch);
        }
        let grid = b.grid().clone();
        let n = grid.n_steps();
        let np = grid.n_points();
        let nodes = lattice.n_nodes();
        let n_dim = lattice.n_dim;
        let dim_b = coeffs.dim_b;
        let mut i_vals = vec![0.0; np * nodes];
        let mut gbuf = vec![0.0; dim_b];
        let zero_z = vec![0.0; coeffs.dim_w];
        for node in 0..nodes {
            let x = lattice.node(node);
            let mut suffix = 0.0;
            for k in (0..n).rev() {
                coeffs.eval_g(grid.time(k + 1), &x, 0.0, &zero_z, 0.0, &mut gbuf)?;
                let dot: f64 = gbuf
                    .iter()
                    .zip(b.increments_at(k))
                    .map(|(g, db)| g * db)
                    .sum();
                suffix += dot;
                i_vals[k * nodes + node] = suffix;
            }
        }
        // nodal derivatives by central differences, one-sided at the edges;
        // edge second differences copy the adjacent interior stencil
        let m = lattice.points_per_dim;
        let mut di_vals = vec![0.0; np * nodes * n_dim];
        let mut d2i_vals = vec![0.0; np * nodes * n_dim * n_dim];
        let mut indices = vec![0usize; n_dim];
        for k in 0..np {
            let level = &i_vals[k * nodes..(k + 1) * nodes];
            for node in 0..nodes {
                let mut rem = node;
                for c in (0..n_dim).rev() {
                    indices[c] = rem % m;
                    rem /= m;
                }
                let shift = |indices: &[usize], c: usize, delta: isize| -> usize {
                    let mut idx = indices.to_vec();
                    idx[c] = (idx[c] as isize + delta) as usize;
                    lattice.flat(&idx)
                };
                for c in 0..n_dim {
                    let h = lattice.step(c);
                    let i = indices[c];
                    let (d1, d2) = if i == 0 {
                        (
                            (level[shift(&indices, c, 1)] - level[node]) / h,
                            (level[shift(&indices, c, 2.min(m as isize - 1) as isize)]
                                - 2.0 * level[shift(&indices, c, 1)]
                                + level[node])
                                / (h * h),
                        )
                    } else if i == m - 1 {
                        (
                            (level[node] - level[shift(&indices, c, -1)]) / h,
                            (level[node] - 2.0 * level[shift(&indices, c, -1)]
                                + level[shift(&indices, c, -2)])
                                / (h * h),
                        )
                    } else {
                        (
                            (level[shift(&indices, c, 1)] - level[shift(&indices, c, -1)])
                                / (2.0 * h),
                            (level[shift(&indices, c, 1)] - 2.0 * level[node]
                                + level[shift(&indices, c, -1)])
                                / (h * h),
                        )
                    };
                    di_vals[(k * nodes + node) * n_dim + c] = d1;
                    d2i_vals[((k * nodes + node) * n_dim + c) * n_dim + c] = d2;
                }
                for c in 0..n_dim {
                    for d in c + 1..n_dim {
                        let ic = indices[c].clamp(1, m - 2);
                        let id = indices[d].clamp(1, m - 2);
                        let mut idx = indices.clone();
                        idx[c] = ic;
                        idx[d] = id;
                        let at = |dc: isize, dd: isize| -> f64 {
                            let mut q = idx.clone();
                            q[c] = (ic as isize + dc) as usize;
                            q[d] = (id as isize + dd) as usize;
                            level[lattice.flat(&q)]
                        };
                        let cross = (at(1, 1) - at(1, -1) - at(-1, 1) + at(-1, -1))
                            / (4.0 * lattice.step(c) * lattice.step(d));
                        d2i_vals[((k * nodes + node) * n_dim + c) * n_dim + d] = cross;
                        d2i_vals[((k * nodes + node) * n_dim + d) * n_dim + c] = cross;
                    }
                }
            }
        }
        Ok(Self {
            grid,
            lattice,
            n_dim,
            i_vals,
            di_vals,
            d2i_vals,
        })
    }

    /// Flow with `g == 0`: identity in `y` everywhere.
    pub fn zero(grid: &Arc<TimeGrid>, lattice: SpatialLattice) -> Self {
        let nodes = lattice.n_nodes();
        let np = grid.n_points();
        let n_dim = lattice.n_dim;
        Self {
            grid: grid.clone(),
            n_dim,
            i_vals: vec![0.0; np * nodes],
            di_vals: vec![0.0; np * nodes * n_dim],
            d2i_vals: vec![0.0; np * nodes * n_dim * n_dim],
            lattice,
        }
    }

    fn interp(&self, values: &[f64], stride: usize, offset: usize, x: &[f64]) -> Result<f64, FlowError> {
        let (base, frac) = self.lattice.locate(x)?;
        let corners = 1usize << self.n_dim;
        let mut acc = 0.0;
        for corner in 0..corners {
            let mut weight = 1.0;
            let mut idx = base.clone();
            for c in 0..self.n_dim {
                if corner >> c & 1 == 1 {
                    idx[c] += 1;
                    weight *= frac[c];
                } else {
                    weight *= 1.0 - frac[c];
                }
            }
            if weight != 0.0 {
                acc += weight * values[self.lattice.flat(&idx) * stride + offset];
            }
        }
        Ok(acc)
    }

    /// `I(t_k, x)` by multilinear interpolation.
    pub fn i(&self, k: usize, x: &[f64]) -> Result<f64, FlowError> {
        let nodes = self.lattice.n_nodes();
        self.interp(&self.i_vals[k * nodes..(k + 1) * nodes], 1, 0, x)
    }

    /// Interpolated nodal gradient of `I(t_k, .)`.
    pub fn grad_i(&self, k: usize, x: &[f64], out: &mut [f64]) -> Result<(), FlowError> {
        let nodes = self.lattice.n_nodes();
        let level = &self.di_vals[k * nodes * self.n_dim..(k + 1) * nodes * self.n_dim];
        for c in 0..self.n_dim {
            out[c] = self.interp(level, self.n_dim, c, x)?;
        }
        Ok(())
    }

    /// Interpolated nodal Hessian of `I(t_k, .)`, row-major `n_dim x n_dim`.
    pub fn hess_i(&self, k: usize, x: &[f64], out: &mut [f64]) -> Result<(), FlowError> {
        let nodes = self.lattice.n_nodes();
        let d2 = self.n_dim * self.n_dim;
        let level = &self.d2i_vals[k * nodes * d2..(k + 1) * nodes * d2];
        for e in 0..d2 {
            out[e] = self.interp(level, d2, e, x)?;
        }
        Ok(())
    }

    /// `eta(t_k, x, y) = y + I(t_k, x)`.
    pub fn eta(&self, k: usize, x: &[f64], y: f64) -> Result<f64, FlowError> {
        Ok(y + self.i(k, x)?)
    }

    /// `epsilon(t_k, x, y) = y - I(t_k, x)`, the inverse of `eta` in `y`.
    pub fn epsilon(&self, k: usize, x: &[f64], y: f64) -> Result<f64, FlowError> {
        Ok(y - self.i(k, x)?)
    }
}

/// Coefficients `(f~, 0, h~)` of the omega-wise transformed equation.
pub struct TransformedCoeffs<'a> {
    pub base: &'a CompiledCoeffs,
    pub flow: &'a FlowPair,
    pub domain: &'a DomainSpec,
}

impl<'a> TransformedCoeffs<'a> {
    pub fn new(
        base: &'a CompiledCoeffs,
        flow: &'a FlowPair,
        domain: &'a DomainSpec,
    ) -> Result<Self, FlowError> {
        if base.g_depends_on_state() {
            return Err(FlowError::GDependsOnState);
        }
        Ok(Self { base, flow, domain })
    }

    fn hull_err(e: FlowError) -> EvalError {
        EvalError::Domain(format!("flow lattice: {e}"))
    }
}

impl Coefficients for TransformedCoeffs<'_> {
    fn dim_z(&self) -> usize {
        self.base.dim_w
    }

    fn dim_b(&self) -> usize {
        self.base.dim_b
    }

    fn f(&self, t: f64, x: &[f64], y: f64, z: &[f64], j: f64) -> Result<f64, EvalError> {
        let k = self
            .flow
            .grid
            .index_of(t)
            .map_err(|e| EvalError::Domain(e.to_string()))?;
        let n = self.base.n_dim;
        let d = self.base.dim_w;
        let flow = self.flow;
        let i_here = flow.i(k, x).map_err(Self::hull_err)?;
        let mut grad = vec![0.0; n];
        flow.grad_i(k, x, &mut grad).map_err(Self::hull_err)?;
        let mut hess = vec![0.0; n * n];
        flow.hess_i(k, x, &mut hess).map_err(Self::hull_err)?;
        let mut sigma = vec![0.0; n * d];
        self.base.eval_sigma(t, x, &mut sigma)?;
        let mut drift = vec![0.0; n];
        self.base.eval_b(t, x, &mut drift)?;
        // z-shift (grad_x eta) sigma
        let mut z_tilde = z.to_vec();
        for c in 0..d {
            let mut dot = 0.0;
            for i in 0..n {
                dot += grad[i] * sigma[i * d + c];
            }
            z_tilde[c] += dot;
        }
        // exact atom sums for the jump operators
        let mut a_eta = 0.0;
        let mut jump_gen = 0.0;
        let mut gbuf = vec![0.0; n];
        let mut displaced = vec![0.0; n];
        for atom in self.base.levy.atoms() {
            self.base.eval_gamma(t, x, atom.mark, &mut gbuf)?;
            for i in 0..n {
                displaced[i] = x[i] + gbuf[i];
            }
            let i_disp = flow.i(k, &displaced).map_err(Self::hull_err)?;
            let diff = i_disp - i_here;
            a_eta += diff * atom.weight;
            let mut graddot = 0.0;
            for i in 0..n {
                graddot += grad[i] * gbuf[i];
            }
            jump_gen += (diff - graddot) * atom.weight;
        }
        // generator on eta: drift, diffusion and jump parts
        let mut gen = jump_gen;
        for i in 0..n {
            gen += drift[i] * grad[i];
        }
        for i in 0..n {
            for l in 0..n {
                let mut a_il = 0.0;
                for c in 0..d {
                    a_il += sigma[i * d + c] * sigma[l * d + c];
                }
                gen += 0.5 * a_il * hess[i * n + l];
            }
        }
        let f_val = self.base.eval_f(t, x, y + i_here, &z_tilde, j + a_eta)?;
        Ok(f_val + gen)
    }

    fn g(
        &self,
        _t: f64,
        _x: &[f64],
        _y: f64,
        _z: &[f64],
        _j: f64,
        out: &mut [f64],
    ) -> Result<(), EvalError> {
        out.fill(0.0);
        Ok(())
    }

    fn h(&self, t: f64, x: &[f64], y: f64) -> Result<f64, EvalError> {
        let k = self
            .flow
            .grid
            .index_of(t)
            .map_err(|e| EvalError::Domain(e.to_string()))?;
        let n = self.base.n_dim;
        let i_here = self.flow.i(k, x).map_err(Self::hull_err)?;
        let mut grad = vec![0.0; n];
        self.flow.grad_i(k, x, &mut grad).map_err(Self::hull_err)?;
        let mut nrm = vec![0.0; n];
        self.domain.grad_phi(x, &mut nrm)?;
        let normal_deriv: f64 = nrm.iter().zip(&grad).map(|(a, b)| a * b).sum();
        Ok(self.base.eval_h(t, x, y + i_here)? + normal_deriv)
    }

    fn lipschitz(&self) -> crate::coeffs::LipschitzDecl {
        self.base.lipschitz
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MapDirection {
    /// `(Y, Z, J) -> (U, V, M)`.
    Forward,
    /// `(U, V, M) -> (Y, Z, J)`.
    Inverse,
}

/// Maps a solution triple through the flow along the given state paths:
///
/// ```text
/// U = epsilon(s, X, Y) = Y - I,    V = Z - (grad_x I) sigma,
/// M(e) = J(e) - [I(s, X + gamma(s, X, e)) - I(s, X)],
/// ```
///
/// and the inverse adds the same quantities back, so the round trip cancels
/// exactly (the same cached values enter both directions).
pub fn map_solution(
    sol: &SolutionTriple,
    states: &StatePaths,
    coeffs: &CompiledCoeffs,
    flow: &FlowPair,
    direction: MapDirection,
) -> Result<SolutionTriple, FlowError> {
    if flow.grid.as_ref() != sol.grid.as_ref() {
        return Err(FlowError::GridMismatch);
    }
    let np = sol.grid.n_points();
    let n = coeffs.n_dim;
    let d = sol.dim_z;
    let sign = match direction {
        MapDirection::Forward => -1.0,
        MapDirection::Inverse => 1.0,
    };
    let mut out = sol.clone();
    let mut grad = vec![0.0; n];
    let mut sigma = vec![0.0; n * d];
    let mut gbuf = vec![0.0; n];
    let mut displaced = vec![0.0; n];
    for path in 0..sol.n_inner {
        for k in sol.start_index..np {
            let x = states.at(path, k, np);
            let t = sol.grid.time(k);
            let i_here = flow.i(k, x)?;
            out.y[path * np + k] = sol.y_at(path, k) + sign * i_here;
            flow.grad_i(k, x, &mut grad)?;
            coeffs.eval_sigma(t, x, &mut sigma)?;
            for c in 0..d {
                let mut dot = 0.0;
                for i in 0..n {
                    dot += grad[i] * sigma[i * d + c];
                }
                out.z[(path * np + k) * d + c] = sol.z_at(path, k)[c] + sign * dot;
            }
            for (ai, atom) in coeffs.levy.atoms().iter().enumerate() {
                coeffs.eval_gamma(t, x, atom.mark, &mut gbuf)?;
                for i in 0..n {
                    displaced[i] = x[i] + gbuf[i];
                }
                let diff = flow.i(k, &displaced)? - i_here;
                out.j[(path * np + k) * sol.n_atoms + ai] =
                    sol.j_at(path, k)[ai] + sign * diff;
            }
        }
        // keep the pre-start padding consistent with the start value
        let y0 = out.y_at(path, sol.start_index);
        for k in 0..sol.start_index {
            out.y[path * np + k] = y0;
        }
    }
    Ok(out)
}
