//! Least-squares machinery for regression Monte Carlo conditional
//! expectations.
//!
//! The conditional expectation at one time step is approximated by projecting
//! per-path targets onto a polynomial basis of the current state. The basis
//! is spanned by products of Chebyshev polynomials up to a total degree,
//! which spans exactly the polynomials of that degree but keeps the design
//! matrix well conditioned. The design is factorized once per step by a
//! modified Gram-Schmidt QR (with reorthogonalization and rank truncation)
//! and reused for every target vector at that step; the ridge term enters
//! through row augmentation, `[X; sqrt(lambda) I]`.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RegressionError {
    #[error("design matrix is singular beyond ridge repair")]
    Singular,
    #[error("regression needs at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },
}

/// Exponent multi-indices of total degree at most `degree` over `dim`
/// variables, in a fixed deterministic order.
fn multi_indices(dim: usize, degree: usize) -> Vec<Vec<u8>> {
    let mut out = Vec::new();
    let mut current = vec![0u8; dim];
    fn rec(out: &mut Vec<Vec<u8>>, current: &mut Vec<u8>, pos: usize, left: usize) {
        if pos == current.len() {
            out.push(current.clone());
            return;
        }
        for k in 0..=left {
            current[pos] = k as u8;
            rec(out, current, pos + 1, left - k);
        }
        current[pos] = 0;
    }
    rec(&mut out, &mut current, 0, degree);
    out.sort_by_key(|c| (c.iter().map(|&e| e as usize).sum::<usize>(), c.clone()));
    out
}

/// Polynomial feature map over `dim` state components with total degree at
/// most `degree`, Chebyshev-scaled to the sample range of each component.
#[derive(Debug, Clone)]
pub struct FeatureBasis {
    dim: usize,
    degree: usize,
    combos: Vec<Vec<u8>>,
    lo: Vec<f64>,
    hi: Vec<f64>,
}

impl FeatureBasis {
    pub fn n_basis(dim: usize, degree: usize) -> usize {
        multi_indices(dim, degree).len()
    }

    /// Builds the basis with per-component ranges taken from the samples
    /// (`n x dim`, row-major). Degenerate ranges collapse to a constant
    /// feature; the rank truncation later drops the collinear columns.
    pub fn from_samples(samples: &[f64], dim: usize, degree: usize) -> Self {
        let n = if dim == 0 { 0 } else { samples.len() / dim };
        let mut lo = vec![f64::INFINITY; dim];
        let mut hi = vec![f64::NEG_INFINITY; dim];
        for i in 0..n {
            for c in 0..dim {
                let v = samples[i * dim + c];
                lo[c] = lo[c].min(v);
                hi[c] = hi[c].max(v);
            }
        }
        for c in 0..dim {
            if !lo[c].is_finite() || !hi[c].is_finite() || hi[c] - lo[c] < 1e-300 {
                lo[c] = 0.0;
                hi[c] = 0.0;
            }
        }
        Self {
            dim,
            degree,
            combos: multi_indices(dim, degree),
            lo,
            hi,
        }
    }

    pub fn len(&self) -> usize {
        self.combos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.combos.is_empty()
    }

    /// Writes the feature vector of one state into `out` (length `len()`).
    pub fn features_into(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.dim);
        debug_assert_eq!(out.len(), self.combos.len());
        let mut cheb = vec![0.0; self.dim * (self.degree + 1)];
        for c in 0..self.dim {
            let s = if self.hi[c] > self.lo[c] {
                (2.0 * x[c] - self.lo[c] - self.hi[c]) / (self.hi[c] - self.lo[c])
            } else {
                0.0
            };
            let row = &mut cheb[c * (self.degree + 1)..(c + 1) * (self.degree + 1)];
            row[0] = 1.0;
            if self.degree >= 1 {
                row[1] = s;
            }
            for k in 2..=self.degree {
                row[k] = 2.0 * s * row[k - 1] - row[k - 2];
            }
        }
        for (b, combo) in self.combos.iter().enumerate() {
            let mut v = 1.0;
            for (c, &e) in combo.iter().enumerate() {
                v *= cheb[c * (self.degree + 1) + e as usize];
            }
            out[b] = v;
        }
    }

    /// Design matrix (`n x len()`, row-major) for states given row-major.
    pub fn design(&self, states: &[f64]) -> Vec<f64> {
        let n = if self.dim == 0 {
            states.len().max(1)
        } else {
            states.len() / self.dim
        };
        let p = self.len();
        let mut m = vec![0.0; n * p];
        for i in 0..n {
            let x = if self.dim == 0 {
                &[][..]
            } else {
                &states[i * self.dim..(i + 1) * self.dim]
            };
            let row = &mut m[i * p..(i + 1) * p];
            self.features_into(x, row);
        }
        m
    }
}

/// QR factorization of one (row-augmented) design matrix, reused for many
/// target vectors.
///
/// `ridge_rel` is a relative Tikhonov weight: the effective ridge is
/// `ridge_rel * ||X||_F^2 / n_basis`, so `ridge_rel = 0` is plain least
/// squares with dependent columns truncated at the numerical rank.
#[derive(Debug, Clone)]
pub struct RidgeSolver {
    /// original design, `n x p` row-major, kept for computing fitted values
    design: Vec<f64>,
    /// orthonormal factor of the augmented matrix, `(n + p) x p` col-major;
    /// dropped columns are zero
    q: Vec<f64>,
    /// upper-triangular factor, `p x p` row-major
    r: Vec<f64>,
    kept: Vec<bool>,
    n: usize,
    p: usize,
}

impl RidgeSolver {
    pub fn factorize(design: Vec<f64>, n: usize, p: usize, ridge_rel: f64) -> Result<Self, RegressionError> {
        debug_assert_eq!(design.len(), n * p);
        if n < p + 1 {
            return Err(RegressionError::TooFewSamples { needed: p + 1, got: n });
        }
        let frob2: f64 = design.iter().map(|v| v * v).sum();
        if !frob2.is_finite() {
            return Err(RegressionError::Singular);
        }
        let sqrt_ridge = (ridge_rel * frob2 / p as f64).sqrt();
        let rows = n + p;
        // augmented matrix in column-major scratch
        let mut q = vec![0.0; rows * p];
        for j in 0..p {
            let col = &mut q[j * rows..(j + 1) * rows];
            for i in 0..n {
                col[i] = design[i * p + j];
            }
            col[n + j] = sqrt_ridge;
        }
        let mut r = vec![0.0; p * p];
        let mut kept = vec![false; p];
        let mut any = false;
        for j in 0..p {
            let norm0 = {
                let col = &q[j * rows..(j + 1) * rows];
                col.iter().map(|v| v * v).sum::<f64>().sqrt()
            };
            // two orthogonalization passes against the kept columns
            for _pass in 0..2 {
                for i in 0..j {
                    if !kept[i] {
                        continue;
                    }
                    let mut dot = 0.0;
                    for row in 0..rows {
                        dot += q[i * rows + row] * q[j * rows + row];
                    }
                    r[i * p + j] += dot;
                    for row in 0..rows {
                        q[j * rows + row] -= dot * q[i * rows + row];
                    }
                }
            }
            let norm = {
                let col = &q[j * rows..(j + 1) * rows];
                col.iter().map(|v| v * v).sum::<f64>().sqrt()
            };
            if norm <= norm0.max(1e-300) * 1e-12 || norm == 0.0 {
                // dependent column: leave q zero, beta_j pinned to zero
                for row in 0..rows {
                    q[j * rows + row] = 0.0;
                }
                r[j * p + j] = 0.0;
            } else {
                let inv = 1.0 / norm;
                for row in 0..rows {
                    q[j * rows + row] *= inv;
                }
                r[j * p + j] = norm;
                kept[j] = true;
                any = true;
            }
        }
        if !any {
            return Err(RegressionError::Singular);
        }
        Ok(Self {
            design,
            q,
            r,
            kept,
            n,
            p,
        })
    }

    pub fn n_samples(&self) -> usize {
        self.n
    }

    /// Ridge coefficients for one target vector.
    pub fn coefficients(&self, y: &[f64]) -> Vec<f64> {
        debug_assert_eq!(y.len(), self.n);
        let rows = self.n + self.p;
        let p = self.p;
        // q^T [y; 0]: augmentation rows multiply zeros
        let mut qty = vec![0.0; p];
        for j in 0..p {
            if !self.kept[j] {
                continue;
            }
            let col = &self.q[j * rows..(j + 1) * rows];
            let mut dot = 0.0;
            for i in 0..self.n {
                dot += col[i] * y[i];
            }
            qty[j] = dot;
        }
        // back substitution, dropped columns pinned to zero
        let mut beta = vec![0.0; p];
        for j in (0..p).rev() {
            if !self.kept[j] {
                continue;
            }
            let mut s = qty[j];
            for k in j + 1..p {
                s -= self.r[j * p + k] * beta[k];
            }
            beta[j] = s / self.r[j * p + j];
        }
        beta
    }

    /// Fitted values at the sample points, `X beta`.
    pub fn fitted(&self, y: &[f64]) -> Vec<f64> {
        let beta = self.coefficients(y);
        let mut out = vec![0.0; self.n];
        for i in 0..self.n {
            let row = &self.design[i * self.p..(i + 1) * self.p];
            let mut s = 0.0;
            for j in 0..self.p {
                s += row[j] * beta[j];
            }
            out[i] = s;
        }
        out
    }
}
