//! Uniform time grids on `[0, T]`.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GridError {
    #[error("time horizon must be positive and finite, got {0}")]
    BadHorizon(f64),
    #[error("grid needs at least one step")]
    NoSteps,
    #[error("time {0} is not a grid point")]
    OffGrid(f64),
}

/// Uniform partition of `[0, T]` into `n_steps` cells.
///
/// `times[k] = k * T / n_steps`, so `times[0] = 0` and `times[n_steps] = T`
/// exactly.
#[derive(Debug, Clone)]
pub struct TimeGrid {
    horizon: f64,
    n_steps: usize,
    times: Vec<f64>,
}

impl TimeGrid {
    pub fn new(horizon: f64, n_steps: usize) -> Result<Self, GridError> {
        if !(horizon > 0.0) || !horizon.is_finite() {
            return Err(GridError::BadHorizon(horizon));
        }
        if n_steps == 0 {
            return Err(GridError::NoSteps);
        }
        let times = (0..=n_steps)
            .map(|k| horizon * k as f64 / n_steps as f64)
            .collect();
        Ok(Self {
            horizon,
            n_steps,
            times,
        })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    /// Number of grid points, `n_steps + 1`.
    pub fn n_points(&self) -> usize {
        self.n_steps + 1
    }

    /// Cell width `T / n_steps`.
    pub fn dt(&self) -> f64 {
        self.horizon / self.n_steps as f64
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn time(&self, k: usize) -> f64 {
        self.times[k]
    }

    /// Index of a grid-aligned time, within a relative tolerance of one part
    /// in 10^9 of the cell width.
    pub fn index_of(&self, t: f64) -> Result<usize, GridError> {
        let dt = self.dt();
        let k = (t / dt).round();
        if k < 0.0 || k > self.n_steps as f64 {
            return Err(GridError::OffGrid(t));
        }
        let k = k as usize;
        if (self.times[k] - t).abs() <= 1e-9 * dt.max(1.0) {
            Ok(k)
        } else {
            Err(GridError::OffGrid(t))
        }
    }

    /// Cell index containing a time `s` in `(0, T]`, with events at a grid
    /// point attributed to the cell ending there.
    pub fn cell_of(&self, s: f64) -> usize {
        let dt = self.dt();
        // s in (t_k, t_{k+1}] maps to cell k
        let k = (s / dt).ceil() as usize;
        k.clamp(1, self.n_steps) - 1
    }
}

impl PartialEq for TimeGrid {
    fn eq(&self, other: &Self) -> bool {
        self.n_steps == other.n_steps && self.horizon == other.horizon
    }
}
