//! Config schema: one TOML file per experiment, schema-validated before any
//! simulation runs. Unknown keys are rejected everywhere.

use anyhow::{bail, Context, Result};
use serde::Deserialize;

use gbdsde_core::coeffs::{CoefficientStrings, LipschitzDecl};
use gbdsde_core::paths::{LevyAtom, LevySpec};

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    pub grid: GridSection,
    #[serde(default)]
    pub coefficients: CoeffSection,
    #[serde(default)]
    pub levy: LevySection,
    #[serde(default)]
    pub mc: McSection,
    #[serde(default)]
    pub a_process: AProcessSection,
    pub linear: Option<LinearSection>,
    pub gbdsde: Option<GbdsdeSection>,
    pub reflect: Option<ReflectSection>,
    pub feynman_kac: Option<FkSection>,
    pub pde: Option<PdeSection>,
    pub control: Option<ControlSection>,
    pub ito: Option<ItoSection>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    pub t_end: f64,
    pub n_steps: usize,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CoeffSection {
    pub n_dim: usize,
    pub dim_w: usize,
    pub dim_b: usize,
    pub f: String,
    pub g: Vec<String>,
    pub h: String,
    pub b: Vec<String>,
    pub sigma: Vec<String>,
    pub gamma: Vec<String>,
    #[serde(rename = "F")]
    pub big_f: String,
    #[serde(rename = "G")]
    pub big_g: String,
    #[serde(rename = "H")]
    pub big_h: String,
    pub ell: String,
    pub phi: String,
    pub lipschitz_c: f64,
    pub lipschitz_alpha: f64,
    /// Analytic derivative overrides `[entry, variable, expression]`.
    pub derivatives: Vec<(String, String, String)>,
}

impl Default for CoeffSection {
    fn default() -> Self {
        Self {
            n_dim: 0,
            dim_w: 1,
            dim_b: 1,
            f: "0".into(),
            g: vec![],
            h: "0".into(),
            b: vec![],
            sigma: vec![],
            gamma: vec![],
            big_f: "0".into(),
            big_g: "0".into(),
            big_h: "0".into(),
            ell: "0".into(),
            phi: "1".into(),
            lipschitz_c: 1.0,
            lipschitz_alpha: 0.25,
            derivatives: Vec::new(),
        }
    }
}

impl CoeffSection {
    pub fn to_strings(&self) -> CoefficientStrings {
        let mut s = CoefficientStrings::zero(self.n_dim, self.dim_w, self.dim_b);
        s.f = self.f.clone();
        if !self.g.is_empty() {
            s.g = self.g.clone();
        }
        s.h = self.h.clone();
        if !self.b.is_empty() {
            s.b = self.b.clone();
        }
        if !self.sigma.is_empty() {
            s.sigma = self.sigma.clone();
        }
        if !self.gamma.is_empty() {
            s.gamma = self.gamma.clone();
        }
        s.big_f = self.big_f.clone();
        s.big_g = self.big_g.clone();
        s.big_h = self.big_h.clone();
        s.ell = self.ell.clone();
        s.phi = self.phi.clone();
        s.lipschitz = LipschitzDecl {
            c: self.lipschitz_c,
            alpha: self.lipschitz_alpha,
        };
        s.derivatives = self.derivatives.clone();
        s
    }
}

#[derive(Debug, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct LevySection {
    #[serde(default)]
    pub marks: Vec<f64>,
    #[serde(default)]
    pub weights: Vec<f64>,
}

impl LevySection {
    pub fn to_spec(&self) -> Result<LevySpec> {
        if self.marks.len() != self.weights.len() {
            bail!("levy.marks and levy.weights must have equal length");
        }
        if self.marks.is_empty() {
            return Ok(LevySpec::none());
        }
        LevySpec::new(
            self.marks
                .iter()
                .zip(&self.weights)
                .map(|(&mark, &weight)| LevyAtom { mark, weight })
                .collect(),
        )
        .context("invalid Levy atoms")
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct McSection {
    pub n_outer: usize,
    pub n_inner: usize,
    pub degree: usize,
    pub ridge: f64,
    pub picard_tol: f64,
    pub picard_max_iter: usize,
}

impl Default for McSection {
    fn default() -> Self {
        Self {
            n_outer: 16,
            n_inner: 512,
            degree: 3,
            ridge: 1e-8,
            picard_tol: 1e-8,
            picard_max_iter: 60,
        }
    }
}

/// Increasing process: a density expression in `t` plus jumps at given times.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AProcessSection {
    pub density: String,
    /// `(time, size)` pairs; times must sit on the grid.
    pub jumps: Vec<(f64, f64)>,
}

impl Default for AProcessSection {
    fn default() -> Self {
        Self {
            density: "0".into(),
            jumps: vec![],
        }
    }
}

/// Linear equation: constant coefficients and a terminal expression in the
/// terminal driver values `w1..wd, b1..bm`.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinearSection {
    #[serde(default)]
    pub alpha: f64,
    #[serde(default)]
    pub beta: Vec<f64>,
    #[serde(default)]
    pub gamma: Vec<f64>,
    #[serde(default)]
    pub delta: Vec<f64>,
    #[serde(default)]
    pub phi_drift: f64,
    #[serde(default)]
    pub varphi: Vec<f64>,
    #[serde(default)]
    pub h: f64,
    pub xi: String,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GbdsdeSection {
    /// Terminal expression in `w1..wd, b1..bm`.
    pub xi: String,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReflectSection {
    pub start_t: f64,
    pub start_x: Vec<f64>,
    pub n_paths: usize,
    #[serde(default = "default_dump_paths")]
    pub dump_paths: usize,
}

fn default_dump_paths() -> usize {
    8
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FkSection {
    /// Rows `(t, x1..xn)`.
    pub points: Vec<Vec<f64>>,
    #[serde(default = "default_route")]
    pub route: String,
    pub box_lo: Vec<f64>,
    pub box_hi: Vec<f64>,
    #[serde(default = "default_lattice_points")]
    pub lattice_points: usize,
}

fn default_route() -> String {
    "direct".into()
}

fn default_lattice_points() -> usize {
    33
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PdeSection {
    pub x_lo: f64,
    pub x_hi: f64,
    pub n_x: usize,
    /// 0 picks the stability bound.
    #[serde(default)]
    pub n_t: usize,
    pub output_times: Vec<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlSection {
    #[serde(default)]
    pub candidate_density: Option<String>,
    #[serde(default)]
    pub candidate_jumps: Vec<(f64, f64)>,
    pub tol: f64,
    #[serde(default = "default_n_probe")]
    pub n_probe: usize,
    pub xi: String,
}

fn default_n_probe() -> usize {
    64
}

/// Components of the mean-square identity check, expressions in `t` (one per
/// backward/forward/jump component).
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ItoSection {
    #[serde(default)]
    pub alpha0: f64,
    pub beta: String,
    pub gamma: Vec<String>,
    pub delta: Vec<String>,
    pub theta: Vec<String>,
    pub lambda: String,
    #[serde(default = "default_scenarios")]
    pub n_scenarios: usize,
}

fn default_scenarios() -> usize {
    64
}

pub fn load(text: &str) -> Result<Config> {
    let cfg: Config = toml::from_str(text).context("config validation failed")?;
    if cfg.grid.t_end <= 0.0 || cfg.grid.n_steps == 0 {
        bail!("grid.t_end must be positive and grid.n_steps at least 1");
    }
    Ok(cfg)
}
