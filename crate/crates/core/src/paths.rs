//! Driver paths on a shared time grid and the three discrete integrals
//! against them.
//!
//! Conventions, used consistently by every consumer in this crate:
//!
//! * forward Itô integrals sample the integrand at the **left** endpoint of
//!   each cell;
//! * backward Itô integrals sample the integrand at the **right** endpoint
//!   and accumulate from the horizon down (suffix sums);
//! * Poisson events are snapped to the right endpoint of the cell containing
//!   them, so that all integrators live on one grid;
//! * jumps of an increasing process sit exactly at grid points and the
//!   integrand value stored at that index is treated as the left limit.

use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use thiserror::Error;

use crate::grid::{GridError, TimeGrid};
use crate::rng::{rng_for, RngKey};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PathError {
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error("Levy measure has no atoms; use JumpMeasurePath::no_jumps for a jump-free model")]
    EmptyLevy,
    #[error("Levy atom weight must be positive and finite, got {0}")]
    BadWeight(f64),
    #[error("integrand and driver are not on the same grid")]
    GridMismatch,
    #[error("driver has dimension {0}, expected 1 for the scalar integral")]
    DimMismatch(usize),
    #[error("increasing process needs nonnegative densities and jump sizes")]
    NotIncreasing,
    #[error("jump index {0} outside 1..=n_steps")]
    BadJumpIndex(usize),
}

/// Direction tag for a Brownian driver. Informational: it records whether an
/// instance plays the forward (`W`) or backward (`B`) role.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Backward,
}

/// Discretized Brownian path: per-cell increments plus their prefix sums.
#[derive(Debug, Clone)]
pub struct BrownianPath {
    grid: Arc<TimeGrid>,
    dim: usize,
    direction: Direction,
    /// `n_steps x dim`, row-major.
    increments: Vec<f64>,
    /// `(n_steps + 1) x dim`, row-major; `values[0] = 0`.
    values: Vec<f64>,
}

impl BrownianPath {
    fn from_raw(
        grid: Arc<TimeGrid>,
        dim: usize,
        direction: Direction,
        increments: Vec<f64>,
    ) -> Self {
        let n = grid.n_steps();
        debug_assert_eq!(increments.len(), n * dim);
        let mut values = vec![0.0; (n + 1) * dim];
        for k in 0..n {
            for c in 0..dim {
                values[(k + 1) * dim + c] = values[k * dim + c] + increments[k * dim + c];
            }
        }
        Self {
            grid,
            dim,
            direction,
            increments,
            values,
        }
    }

    /// Samples `dim` independent Brownian components, increments i.i.d.
    /// `N(0, dt)`. Pure function of the key.
    pub fn generate(grid: &Arc<TimeGrid>, dim: usize, key: RngKey) -> Self {
        Self::generate_with(grid, dim, key, Direction::Forward)
    }

    pub fn generate_with(
        grid: &Arc<TimeGrid>,
        dim: usize,
        key: RngKey,
        direction: Direction,
    ) -> Self {
        assert!(dim >= 1, "Brownian dimension must be at least 1");
        let mut rng = rng_for(key);
        let sd = grid.dt().sqrt();
        let n = grid.n_steps();
        let mut increments = Vec::with_capacity(n * dim);
        for _ in 0..n * dim {
            let z: f64 = StandardNormal.sample(&mut rng);
            increments.push(sd * z);
        }
        Self::from_raw(grid.clone(), dim, direction, increments)
    }

    /// Builds a path from explicit increments (used by tree oracles and fixed
    /// scenarios).
    pub fn from_increments(
        grid: &Arc<TimeGrid>,
        dim: usize,
        increments: Vec<f64>,
    ) -> Result<Self, PathError> {
        if increments.len() != grid.n_steps() * dim {
            return Err(PathError::GridMismatch);
        }
        Ok(Self::from_raw(grid.clone(), dim, Direction::Forward, increments))
    }

    /// All-zero path (e.g. a disabled backward driver).
    pub fn zero(grid: &Arc<TimeGrid>, dim: usize) -> Self {
        Self::from_raw(
            grid.clone(),
            dim,
            Direction::Forward,
            vec![0.0; grid.n_steps() * dim],
        )
    }

    pub fn grid(&self) -> &Arc<TimeGrid> {
        &self.grid
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn direction(&self) -> Direction {
        self.direction
    }

    /// Increment of component `c` over cell `k`.
    pub fn increment(&self, k: usize, c: usize) -> f64 {
        self.increments[k * self.dim + c]
    }

    /// All components of the increment over cell `k`.
    pub fn increments_at(&self, k: usize) -> &[f64] {
        &self.increments[k * self.dim..(k + 1) * self.dim]
    }

    /// Path value of component `c` at grid point `k` (prefix sum).
    pub fn value(&self, k: usize, c: usize) -> f64 {
        self.values[k * self.dim + c]
    }

    pub fn values_at(&self, k: usize) -> &[f64] {
        &self.values[k * self.dim..(k + 1) * self.dim]
    }
}

/// Atom of a finite-activity Lévy measure: a mark and its intensity weight.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LevyAtom {
    pub mark: f64,
    pub weight: f64,
}

/// Finite-activity Lévy measure given by finitely many atoms. Every integral
/// against `nu(de)` is then a finite weighted sum.
#[derive(Debug, Clone, PartialEq)]
pub struct LevySpec {
    atoms: Vec<LevyAtom>,
}

impl LevySpec {
    pub fn new(atoms: Vec<LevyAtom>) -> Result<Self, PathError> {
        if atoms.is_empty() {
            return Err(PathError::EmptyLevy);
        }
        for a in &atoms {
            if !(a.weight > 0.0) || !a.weight.is_finite() || !a.mark.is_finite() {
                return Err(PathError::BadWeight(a.weight));
            }
        }
        Ok(Self { atoms })
    }

    /// Explicit no-jump model. `gen` of a jump path over this measure yields
    /// no events; constructing it through [`LevySpec::new`] is rejected so a
    /// jump-free model is always a deliberate choice.
    pub fn none() -> Self {
        Self { atoms: Vec::new() }
    }

    pub fn atoms(&self) -> &[LevyAtom] {
        &self.atoms
    }

    pub fn n_atoms(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    /// Total mass `nu(E)`.
    pub fn total_mass(&self) -> f64 {
        self.atoms.iter().map(|a| a.weight).sum()
    }
}

/// One realized jump: raw time, containing cell and atom index.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JumpEvent {
    pub time: f64,
    pub cell: usize,
    pub atom: usize,
}

/// Realization of the Poisson random measure on the grid.
///
/// Events are stored with their raw times but integrators only see the
/// per-cell per-atom counts (events snapped to the right endpoint of their
/// cell).
#[derive(Debug, Clone)]
pub struct JumpMeasurePath {
    grid: Arc<TimeGrid>,
    levy: Arc<LevySpec>,
    events: Vec<JumpEvent>,
    /// `n_steps x n_atoms`, row-major.
    counts: Vec<u32>,
}

impl JumpMeasurePath {
    /// Samples the jump measure: event count `~ Poisson(nu(E) T)`, times
    /// uniform on `(0, T]`, marks categorical with probabilities
    /// `w_i / nu(E)`.
    pub fn generate(
        grid: &Arc<TimeGrid>,
        levy: &Arc<LevySpec>,
        key: RngKey,
    ) -> Result<Self, PathError> {
        if levy.is_empty() {
            return Err(PathError::EmptyLevy);
        }
        let mut rng = rng_for(key);
        let mass = levy.total_mass();
        let horizon = grid.horizon();
        let n_events = Poisson::new(mass * horizon)
            .expect("positive rate")
            .sample(&mut rng) as usize;
        let mut events = Vec::with_capacity(n_events);
        for _ in 0..n_events {
            // uniform on (0, T]: 1 - U with U in [0, 1)
            let t = (1.0 - rng.gen::<f64>()) * horizon;
            let mut u = rng.gen::<f64>() * mass;
            let mut atom = levy.n_atoms() - 1;
            for (i, a) in levy.atoms().iter().enumerate() {
                if u < a.weight {
                    atom = i;
                    break;
                }
                u -= a.weight;
            }
            events.push(JumpEvent {
                time: t,
                cell: grid.cell_of(t),
                atom,
            });
        }
        events.sort_by(|a, b| a.time.total_cmp(&b.time).then(a.atom.cmp(&b.atom)));
        Ok(Self::from_events(grid.clone(), levy.clone(), events))
    }

    fn from_events(grid: Arc<TimeGrid>, levy: Arc<LevySpec>, events: Vec<JumpEvent>) -> Self {
        let n_atoms = levy.n_atoms();
        let mut counts = vec![0u32; grid.n_steps() * n_atoms];
        for e in &events {
            counts[e.cell * n_atoms + e.atom] += 1;
        }
        Self {
            grid,
            levy,
            events,
            counts,
        }
    }

    /// Jump-free path over the explicit no-jump measure.
    pub fn no_jumps(grid: &Arc<TimeGrid>) -> Self {
        Self::from_events(grid.clone(), Arc::new(LevySpec::none()), Vec::new())
    }

    /// Fixed events at given `(time, atom)` pairs; used by tests and oracles.
    pub fn from_fixed_events(
        grid: &Arc<TimeGrid>,
        levy: &Arc<LevySpec>,
        times_atoms: &[(f64, usize)],
    ) -> Result<Self, PathError> {
        if levy.is_empty() && !times_atoms.is_empty() {
            return Err(PathError::EmptyLevy);
        }
        let mut events: Vec<JumpEvent> = times_atoms
            .iter()
            .map(|&(t, atom)| JumpEvent {
                time: t,
                cell: grid.cell_of(t),
                atom,
            })
            .collect();
        events.sort_by(|a, b| a.time.total_cmp(&b.time).then(a.atom.cmp(&b.atom)));
        Ok(Self::from_events(grid.clone(), levy.clone(), events))
    }

    pub fn grid(&self) -> &Arc<TimeGrid> {
        &self.grid
    }

    pub fn levy(&self) -> &Arc<LevySpec> {
        &self.levy
    }

    pub fn events(&self) -> &[JumpEvent] {
        &self.events
    }

    pub fn n_atoms(&self) -> usize {
        self.levy.n_atoms()
    }

    /// Number of atom-`a` events snapped to cell `k`.
    pub fn count(&self, cell: usize, atom: usize) -> u32 {
        if self.levy.is_empty() {
            0
        } else {
            self.counts[cell * self.levy.n_atoms() + atom]
        }
    }

    /// `N`-mass of atom `a` on cell `k` minus its compensator `w_a dt`.
    pub fn compensated_mass(&self, cell: usize, atom: usize) -> f64 {
        let w = self.levy.atoms()[atom].weight;
        self.count(cell, atom) as f64 - w * self.grid.dt()
    }
}

/// Càdlàg increasing process `A` with `A(0) = 0`: a nonnegative density for
/// the continuous part plus finitely many jumps at grid points.
#[derive(Debug, Clone, PartialEq)]
pub struct IncreasingProcessPath {
    grid: Arc<TimeGrid>,
    /// Per-cell rate of the continuous part (length `n_steps`).
    density: Vec<f64>,
    /// `(grid index in 1..=n_steps, size)`, sorted by index, merged.
    jumps: Vec<(usize, f64)>,
    /// `A(t_k)` for every grid point.
    values: Vec<f64>,
}

impl IncreasingProcessPath {
    pub fn new(
        grid: &Arc<TimeGrid>,
        density: Vec<f64>,
        jumps: Vec<(usize, f64)>,
    ) -> Result<Self, PathError> {
        if density.len() != grid.n_steps() {
            return Err(PathError::GridMismatch);
        }
        if density.iter().any(|d| !d.is_finite() || *d < 0.0) {
            return Err(PathError::NotIncreasing);
        }
        let mut merged: Vec<(usize, f64)> = Vec::new();
        let mut sorted = jumps;
        sorted.sort_by_key(|&(k, _)| k);
        for (k, size) in sorted {
            if k == 0 || k > grid.n_steps() {
                return Err(PathError::BadJumpIndex(k));
            }
            if !size.is_finite() || size < 0.0 {
                return Err(PathError::NotIncreasing);
            }
            match merged.last_mut() {
                Some((last, s)) if *last == k => *s += size,
                _ => merged.push((k, size)),
            }
        }
        let mut values = vec![0.0; grid.n_points()];
        let dt = grid.dt();
        let mut ji = 0;
        for k in 0..grid.n_steps() {
            let mut v = values[k] + density[k] * dt;
            while ji < merged.len() && merged[ji].0 == k + 1 {
                v += merged[ji].1;
                ji += 1;
            }
            values[k + 1] = v;
        }
        Ok(Self {
            grid: grid.clone(),
            density,
            jumps: merged,
            values,
        })
    }

    pub fn zero(grid: &Arc<TimeGrid>) -> Self {
        Self::new(grid, vec![0.0; grid.n_steps()], Vec::new()).expect("zero path is valid")
    }

    pub fn constant_density(grid: &Arc<TimeGrid>, rate: f64) -> Result<Self, PathError> {
        Self::new(grid, vec![rate; grid.n_steps()], Vec::new())
    }

    pub fn grid(&self) -> &Arc<TimeGrid> {
        &self.grid
    }

    /// `A(t_k)` (right-continuous: includes a jump at `t_k`).
    pub fn value(&self, k: usize) -> f64 {
        self.values[k]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn total_mass(&self) -> f64 {
        self.values[self.grid.n_steps()]
    }

    pub fn density(&self) -> &[f64] {
        &self.density
    }

    pub fn jumps(&self) -> &[(usize, f64)] {
        &self.jumps
    }

    pub fn has_jumps(&self) -> bool {
        self.jumps.iter().any(|&(_, s)| s > 0.0)
    }

    /// Continuous increment over cell `k`.
    pub fn cont_increment(&self, k: usize) -> f64 {
        self.density[k] * self.grid.dt()
    }

    /// Jump size at the right endpoint of cell `k` (grid index `k + 1`).
    pub fn jump_at_cell_end(&self, k: usize) -> f64 {
        match self.jumps.binary_search_by_key(&(k + 1), |&(j, _)| j) {
            Ok(i) => self.jumps[i].1,
            Err(_) => 0.0,
        }
    }

    /// Total increment `A(t_{k+1}) - A(t_k)` over cell `k`.
    pub fn increment(&self, k: usize) -> f64 {
        self.values[k + 1] - self.values[k]
    }
}

fn check_same_grid(a: &TimeGrid, b: &TimeGrid) -> Result<(), PathError> {
    if a == b {
        Ok(())
    } else {
        Err(PathError::GridMismatch)
    }
}

/// Forward Itô integral: prefix values of `sum_{i<k} integrand[i] dW_i`.
///
/// The integrand has one value per cell, sampled at the left endpoint. The
/// driver must be one-dimensional.
pub fn forward_ito_integral(
    integrand: &[f64],
    driver: &BrownianPath,
) -> Result<Vec<f64>, PathError> {
    if driver.dim() != 1 {
        return Err(PathError::DimMismatch(driver.dim()));
    }
    if integrand.len() != driver.grid().n_steps() {
        return Err(PathError::GridMismatch);
    }
    let n = integrand.len();
    let mut out = vec![0.0; n + 1];
    for k in 0..n {
        out[k + 1] = out[k] + integrand[k] * driver.increment(k, 0);
    }
    Ok(out)
}

/// Backward Itô integral: suffix values `out[k] = sum_{i>=k} integrand[i+1] dB_i`.
///
/// The integrand has one value per grid point; the sum over cell `i` uses the
/// value at its right endpoint `t_{i+1}`, which is the defining convention of
/// the backward integral.
pub fn backward_ito_integral(
    integrand: &[f64],
    driver: &BrownianPath,
) -> Result<Vec<f64>, PathError> {
    if driver.dim() != 1 {
        return Err(PathError::DimMismatch(driver.dim()));
    }
    if integrand.len() != driver.grid().n_points() {
        return Err(PathError::GridMismatch);
    }
    let n = driver.grid().n_steps();
    let mut out = vec![0.0; n + 1];
    for k in (0..n).rev() {
        out[k] = out[k + 1] + integrand[k + 1] * driver.increment(k, 0);
    }
    Ok(out)
}

/// Stieltjes integral against an increasing process: prefix values of
/// `int_0^{t_k} integrand dA`.
///
/// The continuous part uses left-endpoint values; a jump at grid index `j`
/// contributes `integrand[j] * dA(t_j)`, the caller-supplied value at `t_j`
/// standing for the integrand's left limit there.
pub fn stieltjes_integral(
    integrand: &[f64],
    a: &IncreasingProcessPath,
) -> Result<Vec<f64>, PathError> {
    if integrand.len() != a.grid().n_points() {
        return Err(PathError::GridMismatch);
    }
    let n = a.grid().n_steps();
    let mut out = vec![0.0; n + 1];
    for k in 0..n {
        out[k + 1] =
            out[k] + integrand[k] * a.cont_increment(k) + integrand[k + 1] * a.jump_at_cell_end(k);
    }
    Ok(out)
}

/// Grid-compatibility check exposed for consumers that combine several
/// drivers.
pub fn require_same_grid(a: &TimeGrid, b: &TimeGrid) -> Result<(), PathError> {
    check_same_grid(a, b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::{mean, stderr_of_mean};

    fn grid(t: f64, n: usize) -> Arc<TimeGrid> {
        Arc::new(TimeGrid::new(t, n).unwrap())
    }

    #[test]
    fn one_step_path_prefix_base_case() {
        let g = grid(1.0, 1);
        let p = BrownianPath::generate(&g, 1, RngKey::new(1, 0, 0));
        assert_eq!(p.value(0, 0), 0.0);
        assert_eq!(p.value(1, 0), p.increment(0, 0));
    }

    #[test]
    fn generation_is_deterministic() {
        let g = grid(1.0, 4);
        let key = RngKey::new(99, 7, 3);
        let a = BrownianPath::generate(&g, 2, key);
        let b = BrownianPath::generate(&g, 2, key);
        assert_eq!(a.increments, b.increments);
    }

    #[test]
    fn increment_moments_match_law() {
        // 1e5 one-step paths with dt = 1: mean within 4/sqrt(1e5) of 0,
        // variance within 5% of 1.
        let g = grid(1.0, 1);
        let n = 100_000;
        let xs: Vec<f64> = (0..n)
            .map(|i| BrownianPath::generate(&g, 1, RngKey::new(5, 1, i)).increment(0, 0))
            .collect();
        let m = mean(&xs);
        assert!(m.abs() < 4.0 / (n as f64).sqrt(), "mean {m}");
        let var = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n as f64 - 1.0);
        assert!((var - 1.0).abs() < 0.05, "variance {var}");
    }

    #[test]
    fn levy_rejects_zero_weight() {
        let err = LevySpec::new(vec![LevyAtom {
            mark: 1.0,
            weight: 0.0,
        }])
        .unwrap_err();
        assert!(matches!(err, PathError::BadWeight(_)));
    }

    #[test]
    fn empty_levy_rejected_by_generator() {
        let g = grid(1.0, 4);
        let levy = Arc::new(LevySpec::none());
        let err = JumpMeasurePath::generate(&g, &levy, RngKey::new(1, 2, 0)).unwrap_err();
        assert!(matches!(err, PathError::EmptyLevy));
    }

    #[test]
    fn poisson_event_count_mean() {
        // nu(E) T = 2 over 1e5 samples: sample mean within
        // 3 sqrt(2/1e5) sqrt(2) of 2.
        let g = grid(1.0, 8);
        let levy = Arc::new(
            LevySpec::new(vec![LevyAtom {
                mark: 1.0,
                weight: 2.0,
            }])
            .unwrap(),
        );
        let n = 100_000;
        let counts: Vec<f64> = (0..n)
            .map(|i| {
                JumpMeasurePath::generate(&g, &levy, RngKey::new(11, 3, i))
                    .unwrap()
                    .events()
                    .len() as f64
            })
            .collect();
        let m = mean(&counts);
        let tol = 3.0 * (2.0f64 / n as f64).sqrt() * 2.0f64.sqrt();
        assert!((m - 2.0).abs() < tol, "mean count {m}, tol {tol}");
    }

    #[test]
    fn mark_frequencies_follow_weights() {
        let g = grid(1.0, 8);
        let levy = Arc::new(
            LevySpec::new(vec![
                LevyAtom {
                    mark: -1.0,
                    weight: 1.0,
                },
                LevyAtom {
                    mark: 2.0,
                    weight: 3.0,
                },
            ])
            .unwrap(),
        );
        let mut n0 = 0u64;
        let mut total = 0u64;
        let mut i = 0;
        while total < 100_000 {
            let p = JumpMeasurePath::generate(&g, &levy, RngKey::new(13, 4, i)).unwrap();
            for e in p.events() {
                if e.atom == 0 {
                    n0 += 1;
                }
                total += 1;
            }
            i += 1;
        }
        let f0 = n0 as f64 / total as f64;
        assert!((f0 - 0.25).abs() < 0.02, "atom-0 frequency {f0}");
    }

    #[test]
    fn events_strictly_inside_horizon() {
        let g = grid(2.0, 16);
        let levy = Arc::new(
            LevySpec::new(vec![LevyAtom {
                mark: 1.0,
                weight: 5.0,
            }])
            .unwrap(),
        );
        for i in 0..200 {
            let p = JumpMeasurePath::generate(&g, &levy, RngKey::new(17, 5, i)).unwrap();
            for e in p.events() {
                assert!(e.time > 0.0 && e.time <= 2.0);
                assert!(e.cell < 16);
            }
        }
    }

    #[test]
    fn forward_integral_constant_integrand() {
        let g = grid(1.0, 32);
        let w = BrownianPath::generate(&g, 1, RngKey::new(3, 0, 0));
        let c = 2.5;
        let out = forward_ito_integral(&vec![c; 32], &w).unwrap();
        for k in 0..=32 {
            assert!((out[k] - c * w.value(k, 0)).abs() < 1e-14);
        }
        let zero = forward_ito_integral(&vec![0.0; 32], &w).unwrap();
        assert!(zero.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_integral_ito_identity() {
        // per-path exact: sum W_i dW_i = (W_T^2 - sum dW_i^2)/2, so the
        // MC mean of int W dW + T/2 - W_T^2/2 vanishes within noise.
        let g = grid(1.0, 64);
        let n = 100_000u64;
        let mut resid = Vec::with_capacity(n as usize);
        let mut ivals = Vec::with_capacity(n as usize);
        for i in 0..n {
            let w = BrownianPath::generate(&g, 1, RngKey::new(23, 6, i));
            let integrand: Vec<f64> = (0..64).map(|k| w.value(k, 0)).collect();
            let iw = forward_ito_integral(&integrand, &w).unwrap();
            let wt = w.value(64, 0);
            resid.push(iw[64] + 0.5 - wt * wt / 2.0);
            ivals.push(iw[64]);
        }
        let (m, se) = (mean(&resid), stderr_of_mean(&resid));
        assert!(m.abs() <= 4.0 * se, "identity residual {m} vs se {se}");
        let (mi, sei) = (mean(&ivals), stderr_of_mean(&ivals));
        assert!(mi.abs() <= 4.0 * sei, "E[int W dW] = {mi} vs se {sei}");
    }

    #[test]
    fn backward_integral_constant_integrand() {
        let g = grid(1.0, 16);
        let b = BrownianPath::generate(&g, 1, RngKey::new(29, 7, 0));
        let c = -1.5;
        let out = backward_ito_integral(&vec![c; 17], &b).unwrap();
        for k in 0..=16 {
            let expect = c * (b.value(16, 0) - b.value(k, 0));
            assert!((out[k] - expect).abs() < 1e-13);
        }
        let zero = backward_ito_integral(&vec![0.0; 17], &b).unwrap();
        assert!(zero.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_backward_agree_for_deterministic_cell_constant_integrand() {
        // For an integrand constant on each cell and deterministic, the
        // backward sum over [t_k, T] equals the forward sum of the same
        // per-cell values: there is no endpoint dependence.
        let g = grid(1.0, 8);
        let b = BrownianPath::generate(&g, 1, RngKey::new(31, 8, 0));
        let cell_values: Vec<f64> = (0..8).map(|k| (k as f64 * 0.7).sin()).collect();
        // backward takes per-point values; value used on cell i is index i+1
        let mut per_point = vec![0.0; 9];
        for i in 0..8 {
            per_point[i + 1] = cell_values[i];
        }
        let back = backward_ito_integral(&per_point, &b).unwrap();
        let fwd = forward_ito_integral(&cell_values, &b).unwrap();
        for k in 0..=8 {
            assert!((back[k] - (fwd[8] - fwd[k])).abs() < 1e-13);
        }
    }

    #[test]
    fn stieltjes_zero_and_total_mass() {
        let g = grid(1.0, 10);
        let zero = IncreasingProcessPath::zero(&g);
        let out = stieltjes_integral(&vec![1.0; 11], &zero).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));

        let a = IncreasingProcessPath::new(&g, vec![0.3; 10], vec![(4, 1.25)]).unwrap();
        let out = stieltjes_integral(&vec![1.0; 11], &a).unwrap();
        for k in 0..=10 {
            assert!((out[k] - a.value(k)).abs() < 1e-14);
        }
    }

    #[test]
    fn stieltjes_hand_quadrature() {
        // density 1, one jump of size 2 at T/2, integrand s on [0,1]:
        // int_0^1 s ds + 0.5 * 2 = 1.5; left-endpoint quadrature error dt/2.
        let n = 1000;
        let g = grid(1.0, n);
        let a = IncreasingProcessPath::new(&g, vec![1.0; n], vec![(n / 2, 2.0)]).unwrap();
        let integrand: Vec<f64> = g.times().to_vec();
        let out = stieltjes_integral(&integrand, &a).unwrap();
        assert!(
            (out[n] - 1.5).abs() < 1.5 / n as f64,
            "got {} expected 1.5",
            out[n]
        );
    }

    #[test]
    fn increasing_process_is_monotone() {
        let g = grid(1.0, 20);
        let a = IncreasingProcessPath::new(
            &g,
            (0..20).map(|k| (k as f64 * 1.3).cos().abs()).collect(),
            vec![(3, 0.5), (17, 0.0), (9, 2.0)],
        )
        .unwrap();
        for k in 0..20 {
            assert!(a.value(k) <= a.value(k + 1));
        }
        assert_eq!(a.value(0), 0.0);
    }

    #[test]
    fn increasing_process_rejects_bad_input() {
        let g = grid(1.0, 4);
        assert!(IncreasingProcessPath::new(&g, vec![-0.1; 4], vec![]).is_err());
        assert!(IncreasingProcessPath::new(&g, vec![0.0; 4], vec![(0, 1.0)]).is_err());
        assert!(IncreasingProcessPath::new(&g, vec![0.0; 4], vec![(5, 1.0)]).is_err());
        assert!(IncreasingProcessPath::new(&g, vec![0.0; 4], vec![(2, -1.0)]).is_err());
    }

    #[test]
    fn grid_mismatch_reported() {
        let g = grid(1.0, 8);
        let w = BrownianPath::generate(&g, 1, RngKey::new(1, 0, 0));
        assert!(matches!(
            forward_ito_integral(&vec![1.0; 7], &w),
            Err(PathError::GridMismatch)
        ));
        assert!(matches!(
            backward_ito_integral(&vec![1.0; 8], &w),
            Err(PathError::GridMismatch)
        ));
    }

    #[test]
    fn ito_isometry_statistical() {
        // adapted integrand Z = W: |mean[(int Z dW)^2] - mean[int Z^2 dt]|
        // within 4 stderr over 1e4 paths.
        let g = grid(1.0, 32);
        let n = 10_000u64;
        let mut diffs = Vec::with_capacity(n as usize);
        for i in 0..n {
            let w = BrownianPath::generate(&g, 1, RngKey::new(41, 9, i));
            let z: Vec<f64> = (0..32).map(|k| w.value(k, 0)).collect();
            let iw = forward_ito_integral(&z, &w).unwrap();
            let quad: f64 = z.iter().map(|v| v * v * g.dt()).sum();
            diffs.push(iw[32] * iw[32] - quad);
        }
        let (m, se) = (mean(&diffs), stderr_of_mean(&diffs));
        assert!(m.abs() <= 4.0 * se, "isometry residual {m} vs stderr {se}");
    }
}
