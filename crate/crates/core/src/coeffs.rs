//! Coefficient tables: the parsed, evaluable model definition.
//!
//! A [`CoefficientSet`] holds every scalar entry of the model as a DSL
//! expression together with the Lévy measure and the declared Lipschitz
//! metadata. Signatures follow one convention crate-wide:
//!
//! | entry      | variables                         |
//! |------------|-----------------------------------|
//! | `f`, `g_k` | `t, x1..xn, y, z1..zd, j`         |
//! | `h`        | `t, x1..xn, y`                    |
//! | `b_i`      | `t, x1..xn`                       |
//! | `sigma_ic` | `t, x1..xn`                       |
//! | `gamma_i`  | `t, x1..xn, e`                    |
//! | `F`        | `t, x`                            |
//! | `G`        | `x`                               |
//! | `H`        | `t`                               |
//! | `ell`      | `x1..xn`                          |
//! | `phi`      | `x1..xn`                          |
//!
//! `j` is the scalar aggregate `int J(t,e) nu(de)`, the form in which the
//! jump component enters the driver of the backward equation.

use std::sync::Arc;

use thiserror::Error;

use crate::dsl::{self, CompiledExpr, EvalError, Expr, ParseError};
use crate::paths::LevySpec;
use crate::rng::{rng_for, RngKey};
use rand::Rng;

/// Largest total number of variables any compiled signature may have; keeps
/// evaluation scratch on the stack.
pub const MAX_VARS: usize = 24;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CoeffError {
    #[error("failed to parse `{entry}`: {source}")]
    Parse {
        entry: String,
        #[source]
        source: ParseError,
    },
    #[error("entry `{entry}` references `{var}` outside its signature")]
    BadVariable { entry: String, var: String },
    #[error("expected {expected} expression(s) for `{entry}`, got {got}")]
    BadArity {
        entry: String,
        expected: usize,
        got: usize,
    },
    #[error("dimensions too large: {0} variables exceed the supported {MAX_VARS}")]
    TooManyVariables(usize),
    #[error("Lipschitz constant C must be positive, got {0}")]
    BadLipschitzC(f64),
    #[error("Lipschitz exponent alpha must lie in (0,1), got {0}")]
    BadAlpha(f64),
}

/// User-declared Lipschitz metadata: the constant `C` and the backward
/// coefficient's contraction exponent `alpha`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LipschitzDecl {
    pub c: f64,
    pub alpha: f64,
}

impl Default for LipschitzDecl {
    fn default() -> Self {
        Self { c: 1.0, alpha: 0.25 }
    }
}

/// Parsed coefficient table; see the module docs for signatures.
#[derive(Debug, Clone)]
pub struct CoefficientSet {
    pub n_dim: usize,
    pub dim_w: usize,
    pub dim_b: usize,
    pub f: Expr,
    pub g: Vec<Expr>,
    pub h: Expr,
    pub b: Vec<Expr>,
    pub sigma: Vec<Expr>,
    pub gamma: Vec<Expr>,
    pub big_f: Expr,
    pub big_g: Expr,
    pub big_h: Expr,
    pub ell: Expr,
    pub phi: Expr,
    pub levy: LevySpec,
    pub lipschitz: LipschitzDecl,
    pub derivatives: Vec<(String, String, Expr)>,
}

/// Raw text form of a coefficient table, convenient for configs and tests.
#[derive(Debug, Clone)]
pub struct CoefficientStrings {
    pub n_dim: usize,
    pub dim_w: usize,
    pub dim_b: usize,
    pub f: String,
    pub g: Vec<String>,
    pub h: String,
    pub b: Vec<String>,
    pub sigma: Vec<String>,
    pub gamma: Vec<String>,
    pub big_f: String,
    pub big_g: String,
    pub big_h: String,
    pub ell: String,
    pub phi: String,
    pub levy: LevySpec,
    pub lipschitz: LipschitzDecl,
    /// Analytic derivative overrides `(entry, variable, expression)`, e.g.
    /// `("f", "y", "2*y")`. Consumers fall back to central differences for
    /// derivatives without an override.
    pub derivatives: Vec<(String, String, String)>,
}

impl CoefficientStrings {
    /// All-zero table for the given dimensions; callers override the entries
    /// they use.
    pub fn zero(n_dim: usize, dim_w: usize, dim_b: usize) -> Self {
        Self {
            n_dim,
            dim_w,
            dim_b,
            f: "0".into(),
            g: vec!["0".into(); dim_b],
            h: "0".into(),
            b: vec!["0".into(); n_dim],
            sigma: vec!["0".into(); n_dim * dim_w],
            gamma: vec!["0".into(); n_dim],
            big_f: "0".into(),
            big_g: "0".into(),
            big_h: "0".into(),
            ell: "0".into(),
            phi: "1".into(),
            levy: LevySpec::none(),
            lipschitz: LipschitzDecl::default(),
            derivatives: Vec::new(),
        }
    }

    pub fn parse(&self) -> Result<CoefficientSet, CoeffError> {
        fn one(entry: &str, src: &str) -> Result<Expr, CoeffError> {
            dsl::parse(src).map_err(|source| CoeffError::Parse {
                entry: entry.into(),
                source,
            })
        }
        fn many(entry: &str, srcs: &[String], expected: usize) -> Result<Vec<Expr>, CoeffError> {
            if srcs.len() != expected {
                return Err(CoeffError::BadArity {
                    entry: entry.into(),
                    expected,
                    got: srcs.len(),
                });
            }
            srcs.iter()
                .enumerate()
                .map(|(i, s)| one(&format!("{entry}[{i}]"), s))
                .collect()
        }
        let set = CoefficientSet {
            n_dim: self.n_dim,
            dim_w: self.dim_w,
            dim_b: self.dim_b,
            f: one("f", &self.f)?,
            g: many("g", &self.g, self.dim_b)?,
            h: one("h", &self.h)?,
            b: many("b", &self.b, self.n_dim)?,
            sigma: many("sigma", &self.sigma, self.n_dim * self.dim_w)?,
            gamma: many("gamma", &self.gamma, self.n_dim)?,
            big_f: one("F", &self.big_f)?,
            big_g: one("G", &self.big_g)?,
            big_h: one("H", &self.big_h)?,
            ell: one("ell", &self.ell)?,
            phi: one("phi", &self.phi)?,
            levy: self.levy.clone(),
            lipschitz: self.lipschitz,
            derivatives: self
                .derivatives
                .iter()
                .map(|(entry, var, src)| {
                    Ok((
                        entry.clone(),
                        var.clone(),
                        one(&format!("derivative {entry}/{var}"), src)?,
                    ))
                })
                .collect::<Result<_, CoeffError>>()?,
        };
        set.validate()?;
        Ok(set)
    }
}

fn sig_fg(n: usize, d: usize) -> Vec<String> {
    let mut v = vec!["t".to_owned()];
    v.extend((1..=n).map(|i| format!("x{i}")));
    v.push("y".into());
    v.extend((1..=d).map(|i| format!("z{i}")));
    v.push("j".into());
    v
}

fn sig_h(n: usize) -> Vec<String> {
    let mut v = vec!["t".to_owned()];
    v.extend((1..=n).map(|i| format!("x{i}")));
    v.push("y".into());
    v
}

fn sig_tx(n: usize) -> Vec<String> {
    let mut v = vec!["t".to_owned()];
    v.extend((1..=n).map(|i| format!("x{i}")));
    v
}

fn sig_gamma(n: usize) -> Vec<String> {
    let mut v = sig_tx(n);
    v.push("e".into());
    v
}

fn sig_x(n: usize) -> Vec<String> {
    (1..=n).map(|i| format!("x{i}")).collect()
}

impl CoefficientSet {
    fn validate(&self) -> Result<(), CoeffError> {
        let widest = 2 + self.n_dim + self.dim_w + 1;
        if widest > MAX_VARS {
            return Err(CoeffError::TooManyVariables(widest));
        }
        if !(self.lipschitz.c > 0.0) || !self.lipschitz.c.is_finite() {
            return Err(CoeffError::BadLipschitzC(self.lipschitz.c));
        }
        if !(self.lipschitz.alpha > 0.0 && self.lipschitz.alpha < 1.0) {
            return Err(CoeffError::BadAlpha(self.lipschitz.alpha));
        }
        Ok(())
    }

    /// Compiles every entry against its signature. Fails when an entry
    /// references a variable outside it.
    pub fn compile(&self) -> Result<CompiledCoeffs, CoeffError> {
        fn comp(entry: &str, e: &Expr, sig: &[String]) -> Result<CompiledExpr, CoeffError> {
            let refs: Vec<&str> = sig.iter().map(|s| s.as_str()).collect();
            e.compile(&refs).map_err(|err| match err {
                EvalError::UnboundVariable(var) => CoeffError::BadVariable {
                    entry: entry.into(),
                    var,
                },
                _ => unreachable!("compile only reports unbound variables"),
            })
        }
        let n = self.n_dim;
        let d = self.dim_w;
        let fg = sig_fg(n, d);
        let h = sig_h(n);
        let tx = sig_tx(n);
        let ge = sig_gamma(n);
        let xs = sig_x(n);
        let big_f_sig = vec!["t".to_owned(), "x".to_owned()];
        let big_g_sig = vec!["x".to_owned()];
        let big_h_sig = vec!["t".to_owned()];
        Ok(CompiledCoeffs {
            n_dim: n,
            dim_w: d,
            dim_b: self.dim_b,
            f: comp("f", &self.f, &fg)?,
            g: self
                .g
                .iter()
                .enumerate()
                .map(|(i, e)| comp(&format!("g[{i}]"), e, &fg))
                .collect::<Result<_, _>>()?,
            h: comp("h", &self.h, &h)?,
            b: self
                .b
                .iter()
                .enumerate()
                .map(|(i, e)| comp(&format!("b[{i}]"), e, &tx))
                .collect::<Result<_, _>>()?,
            sigma: self
                .sigma
                .iter()
                .enumerate()
                .map(|(i, e)| comp(&format!("sigma[{i}]"), e, &tx))
                .collect::<Result<_, _>>()?,
            gamma: self
                .gamma
                .iter()
                .enumerate()
                .map(|(i, e)| comp(&format!("gamma[{i}]"), e, &ge))
                .collect::<Result<_, _>>()?,
            big_f: comp("F", &self.big_f, &["t".into(), "x".into()])?,
            big_g: comp("G", &self.big_g, &["x".into()])?,
            big_h: comp("H", &self.big_h, &["t".into()])?,
            ell: comp("ell", &self.ell, &xs)?,
            phi: comp("phi", &self.phi, &xs)?,
            levy: Arc::new(self.levy.clone()),
            lipschitz: self.lipschitz,
            derivative_overrides: self
                .derivatives
                .iter()
                .map(|(entry, var, expr)| {
                    let sig: &[String] = match entry.as_str() {
                        "f" => &fg,
                        e if e.starts_with('g') => &fg,
                        "h" => &h,
                        "F" => &big_f_sig,
                        "G" => &big_g_sig,
                        "H" => &big_h_sig,
                        "ell" | "phi" => &xs,
                        _ => {
                            return Err(CoeffError::BadVariable {
                                entry: format!("derivative {entry}/{var}"),
                                var: entry.clone(),
                            })
                        }
                    };
                    let slot = sig.iter().position(|s| s == var).ok_or_else(|| {
                        CoeffError::BadVariable {
                            entry: format!("derivative {entry}/{var}"),
                            var: var.clone(),
                        }
                    })?;
                    Ok((
                        entry.clone(),
                        slot,
                        comp(&format!("derivative {entry}/{var}"), expr, sig)?,
                    ))
                })
                .collect::<Result<_, CoeffError>>()?,
        })
    }
}

/// Compiled coefficient table with stack-buffered evaluation helpers.
#[derive(Debug, Clone)]
pub struct CompiledCoeffs {
    pub n_dim: usize,
    pub dim_w: usize,
    pub dim_b: usize,
    pub f: CompiledExpr,
    pub g: Vec<CompiledExpr>,
    pub h: CompiledExpr,
    pub b: Vec<CompiledExpr>,
    pub sigma: Vec<CompiledExpr>,
    pub gamma: Vec<CompiledExpr>,
    pub big_f: CompiledExpr,
    pub big_g: CompiledExpr,
    pub big_h: CompiledExpr,
    pub ell: CompiledExpr,
    pub phi: CompiledExpr,
    pub levy: Arc<LevySpec>,
    pub lipschitz: LipschitzDecl,
    /// `(entry, slot in the entry's signature, compiled expression over the
    /// same signature)`.
    pub derivative_overrides: Vec<(String, usize, CompiledExpr)>,
}

impl CompiledCoeffs {
    /// Analytic derivative override of `entry` with respect to `var`, when
    /// declared.
    pub fn derivative_override(&self, entry: &str, var: &str, sig: &[&str]) -> Option<&CompiledExpr> {
        let slot = sig.iter().position(|s| *s == var)?;
        self.derivative_overrides
            .iter()
            .find(|(e, s, _)| e == entry && *s == slot)
            .map(|(_, _, expr)| expr)
    }

    #[inline]
    fn fill_fg(&self, t: f64, x: &[f64], y: f64, z: &[f64], j: f64, buf: &mut [f64]) -> usize {
        buf[0] = t;
        buf[1..1 + x.len()].copy_from_slice(x);
        buf[1 + x.len()] = y;
        buf[2 + x.len()..2 + x.len() + z.len()].copy_from_slice(z);
        buf[2 + x.len() + z.len()] = j;
        3 + x.len() + z.len()
    }

    pub fn eval_f(&self, t: f64, x: &[f64], y: f64, z: &[f64], j: f64) -> Result<f64, EvalError> {
        let mut buf = [0.0; MAX_VARS];
        let n = self.fill_fg(t, x, y, z, j, &mut buf);
        self.f.eval(&buf[..n])
    }

    pub fn eval_g(
        &self,
        t: f64,
        x: &[f64],
        y: f64,
        z: &[f64],
        j: f64,
        out: &mut [f64],
    ) -> Result<(), EvalError> {
        let mut buf = [0.0; MAX_VARS];
        let n = self.fill_fg(t, x, y, z, j, &mut buf);
        for (c, g) in self.g.iter().enumerate() {
            out[c] = g.eval(&buf[..n])?;
        }
        Ok(())
    }

    pub fn eval_h(&self, t: f64, x: &[f64], y: f64) -> Result<f64, EvalError> {
        let mut buf = [0.0; MAX_VARS];
        buf[0] = t;
        buf[1..1 + x.len()].copy_from_slice(x);
        buf[1 + x.len()] = y;
        self.h.eval(&buf[..2 + x.len()])
    }

    pub fn eval_b(&self, t: f64, x: &[f64], out: &mut [f64]) -> Result<(), EvalError> {
        let mut buf = [0.0; MAX_VARS];
        buf[0] = t;
        buf[1..1 + x.len()].copy_from_slice(x);
        for (i, b) in self.b.iter().enumerate() {
            out[i] = b.eval(&buf[..1 + x.len()])?;
        }
        Ok(())
    }

    /// Row-major `n_dim x dim_w` diffusion matrix at `(t, x)`.
    pub fn eval_sigma(&self, t: f64, x: &[f64], out: &mut [f64]) -> Result<(), EvalError> {
        let mut buf = [0.0; MAX_VARS];
        buf[0] = t;
        buf[1..1 + x.len()].copy_from_slice(x);
        for (i, s) in self.sigma.iter().enumerate() {
            out[i] = s.eval(&buf[..1 + x.len()])?;
        }
        Ok(())
    }

    /// Jump displacement `gamma(t, x, e)` for mark value `e`.
    pub fn eval_gamma(&self, t: f64, x: &[f64], e: f64, out: &mut [f64]) -> Result<(), EvalError> {
        let mut buf = [0.0; MAX_VARS];
        buf[0] = t;
        buf[1..1 + x.len()].copy_from_slice(x);
        buf[1 + x.len()] = e;
        for (i, g) in self.gamma.iter().enumerate() {
            out[i] = g.eval(&buf[..2 + x.len()])?;
        }
        Ok(())
    }

    pub fn eval_ell(&self, x: &[f64]) -> Result<f64, EvalError> {
        self.ell.eval(x)
    }

    pub fn eval_phi(&self, x: &[f64]) -> Result<f64, EvalError> {
        self.phi.eval(x)
    }

    pub fn eval_big_f(&self, t: f64, x: f64) -> Result<f64, EvalError> {
        self.big_f.eval(&[t, x])
    }

    pub fn eval_big_g(&self, x: f64) -> Result<f64, EvalError> {
        self.big_g.eval(&[x])
    }

    pub fn eval_big_h(&self, t: f64) -> Result<f64, EvalError> {
        self.big_h.eval(&[t])
    }

    /// True when any `g` component references `y`, `z*` or `j`; such tables
    /// are rejected by the transform modules.
    pub fn g_depends_on_state(&self) -> bool {
        let y_slot = 1 + self.n_dim;
        let z0 = 2 + self.n_dim;
        self.g.iter().any(|g| {
            g.uses_slot(y_slot)
                || (0..self.dim_w).any(|c| g.uses_slot(z0 + c))
                || g.uses_slot(z0 + self.dim_w)
        })
    }
}

/// Samples `n_pairs` random point pairs and reports, as human-readable
/// warnings, where the declared Lipschitz bounds fail. The bounds are global
/// and undecidable from the expressions, so violations never abort a run.
pub fn validate_lipschitz(
    coeffs: &CompiledCoeffs,
    horizon: f64,
    n_pairs: usize,
    seed: u64,
) -> Vec<String> {
    let mut warnings = Vec::new();
    let mut rng = rng_for(RngKey::new(seed, 0x11b5, 0));
    let c2 = coeffs.lipschitz.c;
    let alpha = coeffs.lipschitz.alpha;
    let n = coeffs.n_dim;
    let d = coeffs.dim_w;
    let mut worst_f: f64 = 0.0;
    let mut worst_g: f64 = 0.0;
    let mut worst_h: f64 = 0.0;
    let mut skipped = 0usize;
    let draw = |rng: &mut rand_chacha::ChaCha12Rng| -> (f64, Vec<f64>, f64, Vec<f64>, f64) {
        let t = rng.gen::<f64>() * horizon;
        let x: Vec<f64> = (0..n).map(|_| rng.gen::<f64>() * 4.0 - 2.0).collect();
        let y = rng.gen::<f64>() * 4.0 - 2.0;
        let z: Vec<f64> = (0..d).map(|_| rng.gen::<f64>() * 4.0 - 2.0).collect();
        let j = rng.gen::<f64>() * 4.0 - 2.0;
        (t, x, y, z, j)
    };
    for _ in 0..n_pairs {
        let (t, x, y1, z1, j1) = draw(&mut rng);
        let (_, _, y2, z2, j2) = draw(&mut rng);
        let d_y2 = (y1 - y2) * (y1 - y2);
        let d_zj2 = z1
            .iter()
            .zip(&z2)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            + (j1 - j2) * (j1 - j2);
        let fs = (
            coeffs.eval_f(t, &x, y1, &z1, j1),
            coeffs.eval_f(t, &x, y2, &z2, j2),
        );
        let mut gs1 = vec![0.0; coeffs.dim_b];
        let mut gs2 = vec![0.0; coeffs.dim_b];
        let g_ok = coeffs.eval_g(t, &x, y1, &z1, j1, &mut gs1).is_ok()
            && coeffs.eval_g(t, &x, y2, &z2, j2, &mut gs2).is_ok();
        let hs = (coeffs.eval_h(t, &x, y1), coeffs.eval_h(t, &x, y2));
        match (fs.0, fs.1) {
            (Ok(f1), Ok(f2)) => {
                let lhs = (f1 - f2) * (f1 - f2);
                let bound = c2 * (d_y2 + d_zj2);
                if bound > 0.0 {
                    worst_f = worst_f.max(lhs / bound);
                }
            }
            _ => skipped += 1,
        }
        if g_ok {
            let lhs: f64 = gs1
                .iter()
                .zip(&gs2)
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            let bound = c2 * d_y2 + alpha * d_zj2;
            if bound > 0.0 {
                worst_g = worst_g.max(lhs / bound);
            }
        } else {
            skipped += 1;
        }
        match hs {
            (Ok(h1), Ok(h2)) => {
                if d_y2 > 0.0 {
                    worst_h = worst_h.max((h1 - h2) * (h1 - h2) / (c2 * d_y2));
                }
            }
            _ => skipped += 1,
        }
    }
    if worst_f > 1.0 {
        warnings.push(format!(
            "f exceeds the declared Lipschitz bound: worst sampled quotient {worst_f:.3} (C = {c2})"
        ));
    }
    if worst_g > 1.0 {
        warnings.push(format!(
            "g exceeds the declared (C, alpha) bound: worst sampled quotient {worst_g:.3} (alpha = {alpha})"
        ));
    }
    if worst_h > 1.0 {
        warnings.push(format!(
            "h exceeds the declared Lipschitz bound: worst sampled quotient {worst_h:.3} (C = {c2})"
        ));
    }
    if skipped > n_pairs / 10 {
        warnings.push(format!(
            "{skipped} sample evaluations hit domain errors; Lipschitz screening is partial"
        ));
    }
    warnings
}

/// Compares each declared analytic derivative against the central
/// difference of its entry on `n_points` random points; reports relative
/// disagreements above `1e-5` as warnings.
pub fn validate_derivative_overrides(
    coeffs: &CompiledCoeffs,
    set: &CoefficientSet,
    horizon: f64,
    n_points: usize,
    seed: u64,
) -> Vec<String> {
    let mut warnings = Vec::new();
    let mut rng = rng_for(RngKey::new(seed, 0xd1ff, 0));
    for (entry, var, _) in &set.derivatives {
        let (expr, sig): (&CompiledExpr, Vec<String>) = match entry.as_str() {
            "f" => (&coeffs.f, sig_fg(coeffs.n_dim, coeffs.dim_w)),
            "h" => (&coeffs.h, sig_h(coeffs.n_dim)),
            "F" => (&coeffs.big_f, vec!["t".into(), "x".into()]),
            "G" => (&coeffs.big_g, vec!["x".into()]),
            "H" => (&coeffs.big_h, vec!["t".into()]),
            "ell" => (&coeffs.ell, sig_x(coeffs.n_dim)),
            "phi" => (&coeffs.phi, sig_x(coeffs.n_dim)),
            e if e.starts_with('g') => {
                let idx: usize = e[1..].parse::<usize>().map(|v| v - 1).unwrap_or(0);
                (&coeffs.g[idx.min(coeffs.g.len() - 1)], sig_fg(coeffs.n_dim, coeffs.dim_w))
            }
            _ => continue,
        };
        let refs: Vec<&str> = sig.iter().map(|s| s.as_str()).collect();
        let claimed = match coeffs.derivative_override(entry, var, &refs) {
            Some(c) => c,
            None => continue,
        };
        let slot = refs.iter().position(|s| *s == var).unwrap();
        let mut worst: f64 = 0.0;
        let mut checked = 0usize;
        for _ in 0..n_points {
            let mut vals: Vec<f64> = refs
                .iter()
                .map(|name| {
                    if *name == "t" {
                        rng.gen::<f64>() * horizon
                    } else {
                        rng.gen::<f64>() * 4.0 - 2.0
                    }
                })
                .collect();
            let numeric = match expr.num_grad(slot, &mut vals, 1.0) {
                Ok(v) if v.is_finite() => v,
                _ => continue,
            };
            let analytic = match claimed.eval(&vals) {
                Ok(v) if v.is_finite() => v,
                _ => continue,
            };
            let scale = analytic.abs().max(1.0);
            worst = worst.max((numeric - analytic).abs() / scale);
            checked += 1;
        }
        if checked == 0 {
            warnings.push(format!(
                "derivative override {entry}/{var}: no evaluable sample points"
            ));
        } else if worst > 1e-5 {
            warnings.push(format!(
                "derivative override {entry}/{var} disagrees with central differences: worst relative error {worst:.2e} over {checked} points"
            ));
        }
    }
    warnings
}
