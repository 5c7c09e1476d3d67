//! Subcommand implementations: each binds the config to a module pipeline,
//! writes CSV artifacts plus a run manifest, and keeps every output byte
//! deterministic for a fixed seed (independent of thread count).

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use anyhow::{anyhow, bail, Context, Result};
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use gbdsde_core::coeffs::{validate_derivative_overrides, validate_lipschitz, CompiledCoeffs};
use gbdsde_core::control::{
    necessary_check, sufficient_check, ControlCandidate, ControlConfig,
};
use gbdsde_core::dsl::{self, CompiledExpr};
use gbdsde_core::feynman_kac::{evaluate_field, FkProblem, Route};
use gbdsde_core::gbdsde::{
    ito_identity_check, solve_linear, solve_picard, AProcesses, ItoComponents, LinearCoeffs,
    PathBundle, RegressionConfig,
};
use gbdsde_core::grid::TimeGrid;
use gbdsde_core::paths::{BrownianPath, IncreasingProcessPath, JumpMeasurePath};
use gbdsde_core::pde::solve_ipde;
use gbdsde_core::reflect::{simulate_reflected, DomainSpec};
use gbdsde_core::rng::{substream, RngKey};
use gbdsde_core::stats::{mean, stderr_of_mean};

use crate::config::Config;

/// Validation problems exit with 2, numerical failures with 3.
pub enum CmdError {
    Validation(anyhow::Error),
    Numerical(anyhow::Error),
}

impl CmdError {
    pub fn code(&self) -> i32 {
        match self {
            CmdError::Validation(_) => 2,
            CmdError::Numerical(_) => 3,
        }
    }

    pub fn message(&self) -> String {
        match self {
            CmdError::Validation(e) => format!("validation error: {e:#}"),
            CmdError::Numerical(e) => format!("numerical failure: {e:#}"),
        }
    }
}

fn val<T>(r: Result<T>) -> std::result::Result<T, CmdError> {
    r.map_err(CmdError::Validation)
}

fn num<T, E: std::error::Error + Send + Sync + 'static>(
    r: std::result::Result<T, E>,
) -> std::result::Result<T, CmdError> {
    r.map_err(|e| CmdError::Numerical(anyhow!(e)))
}

fn f17(x: f64) -> String {
    format!("{x:.16e}")
}

pub struct RunContext<'a> {
    pub cfg: &'a Config,
    pub config_bytes: &'a [u8],
    pub seed: u64,
    pub out_dir: &'a Path,
}

impl RunContext<'_> {
    fn write(&self, name: &str, contents: &str) -> Result<()> {
        fs::create_dir_all(self.out_dir)
            .with_context(|| format!("creating {}", self.out_dir.display()))?;
        let path = self.out_dir.join(name);
        fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))?;
        Ok(())
    }

    fn manifest(&self, subcommand: &str) -> Result<()> {
        let mut hasher = Sha256::new();
        hasher.update(self.config_bytes);
        let digest = hasher.finalize();
        let mut hex = String::new();
        for b in digest {
            let _ = write!(hex, "{b:02x}");
        }
        let body = format!(
            "subcommand = \"{subcommand}\"\nseed = {}\nconfig_sha256 = \"{hex}\"\nversion = \"{}\"\n",
            self.seed,
            env!("CARGO_PKG_VERSION"),
        );
        self.write(&format!("{subcommand}-manifest.toml"), &body)
    }

    fn grid(&self) -> Result<Arc<TimeGrid>> {
        Ok(Arc::new(TimeGrid::new(
            self.cfg.grid.t_end,
            self.cfg.grid.n_steps,
        )?))
    }

    fn coeffs(&self) -> Result<CompiledCoeffs> {
        let mut strings = self.cfg.coefficients.to_strings();
        strings.levy = self.cfg.levy.to_spec()?;
        let set = strings.parse().context("coefficient table")?;
        let compiled = set.compile().context("coefficient table")?;
        for w in validate_lipschitz(&compiled, self.cfg.grid.t_end, 10_000, self.seed) {
            eprintln!("warning: {w}");
        }
        for w in
            validate_derivative_overrides(&compiled, &set, self.cfg.grid.t_end, 100, self.seed)
        {
            eprintln!("warning: {w}");
        }
        Ok(compiled)
    }

    fn a_process(&self, grid: &Arc<TimeGrid>) -> Result<IncreasingProcessPath> {
        let density_expr = dsl::parse(&self.cfg.a_process.density)
            .context("a_process.density")?
            .compile(&["t"])
            .context("a_process.density")?;
        let mut density = Vec::with_capacity(grid.n_steps());
        for k in 0..grid.n_steps() {
            density.push(density_expr.eval(&[grid.time(k)])?);
        }
        let mut jumps = Vec::new();
        for &(t, size) in &self.cfg.a_process.jumps {
            let idx = grid
                .index_of(t)
                .with_context(|| format!("a_process jump time {t} is off-grid"))?;
            jumps.push((idx, size));
        }
        Ok(IncreasingProcessPath::new(grid, density, jumps)?)
    }
}

/// Compiles a terminal expression over `w1..wd, b1..bm` and evaluates it at
/// the terminal driver values of each inner path.
fn terminal_values(src: &str, bundle: &PathBundle) -> Result<Vec<f64>> {
    let d = bundle.dim_w();
    let m = bundle.dim_b();
    let names: Vec<String> = (1..=d)
        .map(|c| format!("w{c}"))
        .chain((1..=m).map(|c| format!("b{c}")))
        .collect();
    let refs: Vec<&str> = names.iter().map(|s| s.as_str()).collect();
    let expr = dsl::parse(src).context("xi")?.compile(&refs).context("xi")?;
    let n = bundle.grid.n_steps();
    let mut out = Vec::with_capacity(bundle.n_inner());
    let mut vals = vec![0.0; d + m];
    for i in 0..bundle.n_inner() {
        for c in 0..d {
            vals[c] = bundle.w[i].value(n, c);
        }
        for c in 0..m {
            vals[d + c] = bundle.b.value(n, c);
        }
        out.push(expr.eval(&vals)?);
    }
    Ok(out)
}

fn mc_reg(cfg: &Config) -> RegressionConfig {
    RegressionConfig {
        degree: cfg.mc.degree,
        n_outer: cfg.mc.n_outer,
        n_inner: cfg.mc.n_inner,
        ridge: cfg.mc.ridge,
    }
}

const STREAM_CLI: u64 = 0xc11;

// ---------------------------------------------------------------------------

pub fn paths_selftest(ctx: &RunContext) -> std::result::Result<(), CmdError> {
    let grid = val(ctx.grid())?;
    let levy = Arc::new(val(ctx.cfg.levy.to_spec())?);
    let n_paths = ctx.cfg.mc.n_inner.max(2);
    let dt = grid.dt();
    let mut incs = Vec::with_capacity(n_paths * grid.n_steps());
    for p in 0..n_paths as u64 {
        let w = BrownianPath::generate(&grid, 1, RngKey::new(ctx.seed, STREAM_CLI, p));
        incs.extend((0..grid.n_steps()).map(|k| w.increment(k, 0)));
    }
    let m = mean(&incs);
    let var = incs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (incs.len() as f64 - 1.0);
    let redo = BrownianPath::generate(&grid, 1, RngKey::new(ctx.seed, STREAM_CLI, 0));
    let first = BrownianPath::generate(&grid, 1, RngKey::new(ctx.seed, STREAM_CLI, 0));
    let deterministic = redo
        .increments_at(0)
        .iter()
        .zip(first.increments_at(0))
        .all(|(a, b)| a.to_bits() == b.to_bits());
    let mut csv = String::from("stat,value\n");
    let _ = writeln!(csv, "n_paths,{n_paths}");
    let _ = writeln!(csv, "dt,{}", f17(dt));
    let _ = writeln!(csv, "w_increment_mean,{}", f17(m));
    let _ = writeln!(csv, "w_increment_var,{}", f17(var));
    let _ = writeln!(csv, "deterministic,{}", u8::from(deterministic));
    if !levy.is_empty() {
        let stream = substream(STREAM_CLI, 7);
        let mut counts = Vec::with_capacity(n_paths);
        let mut atom_counts = vec![0u64; levy.n_atoms()];
        for p in 0..n_paths as u64 {
            let jm = num(JumpMeasurePath::generate(
                &grid,
                &levy,
                RngKey::new(ctx.seed, stream, p),
            ))?;
            counts.push(jm.events().len() as f64);
            for e in jm.events() {
                atom_counts[e.atom] += 1;
            }
        }
        let total: u64 = atom_counts.iter().sum();
        let _ = writeln!(csv, "poisson_mean_count,{}", f17(mean(&counts)));
        let _ = writeln!(
            csv,
            "poisson_expected_count,{}",
            f17(levy.total_mass() * grid.horizon())
        );
        for (a, c) in atom_counts.iter().enumerate() {
            let freq = if total > 0 { *c as f64 / total as f64 } else { 0.0 };
            let _ = writeln!(csv, "mark_freq_{a},{}", f17(freq));
        }
    }
    val(ctx.write("paths-selftest.csv", &csv))?;
    val(ctx.manifest("paths-selftest"))
}

// ---------------------------------------------------------------------------

pub fn solve_linear_cmd(ctx: &RunContext) -> std::result::Result<(), CmdError> {
    let section = val(ctx
        .cfg
        .linear
        .as_ref()
        .ok_or_else(|| anyhow!("missing [linear] section")))?;
    let grid = val(ctx.grid())?;
    let levy = Arc::new(val(ctx.cfg.levy.to_spec())?);
    let dims = &ctx.cfg.coefficients;
    let (d, mb) = (dims.dim_w, dims.dim_b);
    let fill = |v: &Vec<f64>, len: usize, name: &str| -> Result<Vec<f64>> {
        if v.is_empty() {
            Ok(vec![0.0; len])
        } else if v.len() == len {
            Ok(v.clone())
        } else {
            bail!("linear.{name} needs {len} entries, got {}", v.len())
        }
    };
    let beta = val(fill(&section.beta, d, "beta"))?;
    let gamma = val(fill(&section.gamma, levy.n_atoms(), "gamma"))?;
    let delta = val(fill(&section.delta, mb, "delta"))?;
    let varphi = val(fill(&section.varphi, mb, "varphi"))?;
    let a = val(ctx.a_process(&grid))?;
    let reg = mc_reg(ctx.cfg);
    let np = grid.n_points();
    let rows: Vec<std::result::Result<Vec<f64>, CmdError>> = (0..reg.n_outer as u64)
        .into_par_iter()
        .map(|outer| {
            let bundle = num(PathBundle::generate(
                &grid, d, mb, &levy, reg.n_inner, ctx.seed, STREAM_CLI, outer,
            ))?;
            let xi = val(terminal_values(&section.xi, &bundle))?;
            let lin = LinearCoeffs::constant(
                np,
                section.alpha,
                &beta,
                &gamma,
                &delta,
                section.phi_drift,
                &varphi,
                section.h,
                xi,
            );
            let sol = num(solve_linear(&lin, &a, &bundle, &reg))?;
            Ok(sol.y)
        })
        .collect();
    let mut per_outer = Vec::with_capacity(rows.len());
    for r in rows {
        per_outer.push(r?);
    }
    let mut csv = String::from("t,y,stderr\n");
    for k in 0..np {
        let col: Vec<f64> = per_outer.iter().map(|y| y[k]).collect();
        let _ = writeln!(
            csv,
            "{},{},{}",
            f17(grid.time(k)),
            f17(mean(&col)),
            f17(stderr_of_mean(&col))
        );
    }
    val(ctx.write("linear.csv", &csv))?;
    val(ctx.manifest("solve-linear"))
}

// ---------------------------------------------------------------------------

pub fn solve_gbdsde_cmd(ctx: &RunContext) -> std::result::Result<(), CmdError> {
    let section = val(ctx
        .cfg
        .gbdsde
        .as_ref()
        .ok_or_else(|| anyhow!("missing [gbdsde] section")))?;
    if ctx.cfg.coefficients.n_dim != 0 {
        return Err(CmdError::Validation(anyhow!(
            "solve-gbdsde runs the stateless equation; set coefficients.n_dim = 0"
        )));
    }
    let grid = val(ctx.grid())?;
    let coeffs = val(ctx.coeffs())?;
    let levy = coeffs.levy.clone();
    let a_path = val(ctx.a_process(&grid))?;
    let reg = mc_reg(ctx.cfg);
    let np = grid.n_points();
    let rows: Vec<std::result::Result<Vec<f64>, CmdError>> = (0..reg.n_outer as u64)
        .into_par_iter()
        .map(|outer| {
            let bundle = num(PathBundle::generate(
                &grid,
                coeffs.dim_w,
                coeffs.dim_b,
                &levy,
                reg.n_inner,
                ctx.seed,
                STREAM_CLI,
                outer,
            ))?;
            let xi = val(terminal_values(&section.xi, &bundle))?;
            let a = AProcesses::Shared(a_path.clone());
            let sol = num(solve_picard(
                &coeffs,
                &xi,
                &a,
                &bundle,
                &reg,
                ctx.cfg.mc.picard_tol,
                ctx.cfg.mc.picard_max_iter,
            ))?;
            let means: Vec<f64> = (0..np).map(|k| mean(&sol.y_column(k))).collect();
            Ok(means)
        })
        .collect();
    let mut per_outer = Vec::new();
    for r in rows {
        per_outer.push(r?);
    }
    let mut csv = String::from("t,y,stderr\n");
    for k in 0..np {
        let col: Vec<f64> = per_outer.iter().map(|y| y[k]).collect();
        let _ = writeln!(
            csv,
            "{},{},{}",
            f17(grid.time(k)),
            f17(mean(&col)),
            f17(stderr_of_mean(&col))
        );
    }
    val(ctx.write("gbdsde.csv", &csv))?;
    val(ctx.manifest("solve-gbdsde"))
}

// ---------------------------------------------------------------------------

pub fn reflect_cmd(ctx: &RunContext) -> std::result::Result<(), CmdError> {
    let section = val(ctx
        .cfg
        .reflect
        .as_ref()
        .ok_or_else(|| anyhow!("missing [reflect] section")))?;
    let grid = val(ctx.grid())?;
    let coeffs = val(ctx.coeffs())?;
    if coeffs.n_dim == 0 {
        return Err(CmdError::Validation(anyhow!(
            "reflect needs coefficients.n_dim >= 1"
        )));
    }
    let phi = val(dsl::parse(&ctx.cfg.coefficients.phi).context("phi"))?;
    let domain = num(DomainSpec::new(&phi, coeffs.n_dim))?;
    let levy = coeffs.levy.clone();
    let n_dim = coeffs.n_dim;
    let w_stream = substream(STREAM_CLI, 21);
    let n_stream = substream(STREAM_CLI, 22);
    let states: Vec<std::result::Result<_, CmdError>> = (0..section.n_paths as u64)
        .into_par_iter()
        .map(|p| {
            let w = BrownianPath::generate(&grid, coeffs.dim_w, RngKey::new(ctx.seed, w_stream, p));
            let jm = if levy.is_empty() {
                JumpMeasurePath::no_jumps(&grid)
            } else {
                num(JumpMeasurePath::generate(
                    &grid,
                    &levy,
                    RngKey::new(ctx.seed, n_stream, p),
                ))?
            };
            num(simulate_reflected(
                (section.start_t, &section.start_x),
                &coeffs,
                &domain,
                &w,
                &jm,
            ))
        })
        .collect();
    let mut all = Vec::with_capacity(states.len());
    for s in states {
        all.push(s?);
    }
    let mut paths_csv = String::from("path,t");
    for c in 1..=n_dim {
        let _ = write!(paths_csv, ",x{c}");
    }
    paths_csv.push_str(",a,contact\n");
    for (p, st) in all.iter().take(section.dump_paths).enumerate() {
        for k in 0..grid.n_points() {
            let _ = write!(paths_csv, "{p},{}", f17(grid.time(k)));
            for &v in st.x_at(k) {
                let _ = write!(paths_csv, ",{}", f17(v));
            }
            let _ = writeln!(
                paths_csv,
                ",{},{}",
                f17(st.a_local.value(k)),
                u8::from(st.contact[k])
            );
        }
    }
    let mut stats_csv = String::from("t");
    for c in 1..=n_dim {
        let _ = write!(stats_csv, ",mean_x{c}");
    }
    stats_csv.push_str(",mean_a,contact_rate,min_phi\n");
    for k in 0..grid.n_points() {
        let _ = write!(stats_csv, "{}", f17(grid.time(k)));
        for c in 0..n_dim {
            let col: Vec<f64> = all.iter().map(|s| s.x_at(k)[c]).collect();
            let _ = write!(stats_csv, ",{}", f17(mean(&col)));
        }
        let acol: Vec<f64> = all.iter().map(|s| s.a_local.value(k)).collect();
        let contact =
            all.iter().filter(|s| s.contact[k]).count() as f64 / all.len() as f64;
        let mut min_phi = f64::INFINITY;
        for s in &all {
            min_phi = min_phi.min(num(domain.phi(s.x_at(k)))?);
        }
        let _ = writeln!(
            stats_csv,
            ",{},{},{}",
            f17(mean(&acol)),
            f17(contact),
            f17(min_phi)
        );
    }
    val(ctx.write("reflect-paths.csv", &paths_csv))?;
    val(ctx.write("reflect-stats.csv", &stats_csv))?;
    val(ctx.manifest("reflect"))
}

// ---------------------------------------------------------------------------

pub fn feynman_kac_cmd(ctx: &RunContext) -> std::result::Result<(), CmdError> {
    let section = val(ctx
        .cfg
        .feynman_kac
        .as_ref()
        .ok_or_else(|| anyhow!("missing [feynman_kac] section")))?;
    let coeffs = val(ctx.coeffs())?;
    if coeffs.n_dim == 0 {
        return Err(CmdError::Validation(anyhow!(
            "feynman-kac needs coefficients.n_dim >= 1"
        )));
    }
    let phi = val(dsl::parse(&ctx.cfg.coefficients.phi).context("phi"))?;
    let domain = num(DomainSpec::new(&phi, coeffs.n_dim))?;
    let route = match section.route.as_str() {
        "direct" => Route::Direct,
        "transform" => Route::Transform,
        other => {
            return Err(CmdError::Validation(anyhow!(
                "feynman_kac.route must be `direct` or `transform`, got `{other}`"
            )))
        }
    };
    let mut points = Vec::with_capacity(section.points.len());
    for row in &section.points {
        if row.len() != coeffs.n_dim + 1 {
            return Err(CmdError::Validation(anyhow!(
                "each feynman_kac.points row needs 1 + n_dim entries"
            )));
        }
        points.push((row[0], row[1..].to_vec()));
    }
    let n_dim = coeffs.n_dim;
    let problem = FkProblem {
        coeffs,
        domain,
        horizon: ctx.cfg.grid.t_end,
        n_steps: ctx.cfg.grid.n_steps,
        box_lo: section.box_lo.clone(),
        box_hi: section.box_hi.clone(),
        lattice_points: section.lattice_points,
        picard_tol: ctx.cfg.mc.picard_tol,
        picard_max_iter: ctx.cfg.mc.picard_max_iter,
    };
    if section.box_lo.len() != n_dim || section.box_hi.len() != n_dim {
        return Err(CmdError::Validation(anyhow!(
            "feynman_kac.box_lo/box_hi need n_dim entries"
        )));
    }
    let reg = mc_reg(ctx.cfg);
    let field = num(evaluate_field(
        &points, &problem, &reg, ctx.seed, STREAM_CLI, None, route,
    ))?;
    val(ctx.write("field.csv", &field.to_csv()))?;
    val(ctx.manifest("feynman-kac"))
}

// ---------------------------------------------------------------------------

pub fn oracle_pde_cmd(ctx: &RunContext) -> std::result::Result<(), CmdError> {
    let section = val(ctx
        .cfg
        .pde
        .as_ref()
        .ok_or_else(|| anyhow!("missing [pde] section")))?;
    let coeffs = val(ctx.coeffs())?;
    let n_t = if section.n_t == 0 { None } else { Some(section.n_t) };
    let sol = num(solve_ipde(
        &coeffs,
        section.x_lo,
        section.x_hi,
        ctx.cfg.grid.t_end,
        section.n_x,
        n_t,
        &section.output_times,
    ))?;
    let mut csv = String::from("t,x,u\n");
    for (t, level) in &sol.levels {
        for (i, &x) in sol.x_nodes.iter().enumerate() {
            let _ = writeln!(csv, "{},{},{}", f17(*t), f17(x), f17(level[i]));
        }
    }
    val(ctx.write("pde.csv", &csv))?;
    val(ctx.manifest("oracle-pde"))
}

// ---------------------------------------------------------------------------

pub fn control_check_cmd(ctx: &RunContext) -> std::result::Result<(), CmdError> {
    let section = val(ctx
        .cfg
        .control
        .as_ref()
        .ok_or_else(|| anyhow!("missing [control] section")))?;
    if ctx.cfg.coefficients.n_dim != 0 {
        return Err(CmdError::Validation(anyhow!(
            "control problems use coefficients.n_dim = 0 (the state is y)"
        )));
    }
    let grid = val(ctx.grid())?;
    let coeffs = val(ctx.coeffs())?;
    let levy = coeffs.levy.clone();
    let density_src = section.candidate_density.clone().unwrap_or_else(|| "0".into());
    let density_expr = val(dsl::parse(&density_src)
        .context("control.candidate_density")
        .and_then(|e| e.compile(&["t"]).context("control.candidate_density")))?;
    let mut density = Vec::with_capacity(grid.n_steps());
    for k in 0..grid.n_steps() {
        density.push(num(density_expr.eval(&[grid.time(k)]))?);
    }
    let mut jumps = Vec::new();
    for &(t, size) in &section.candidate_jumps {
        let idx = val(grid
            .index_of(t)
            .with_context(|| format!("candidate jump time {t} is off-grid")))?;
        jumps.push((idx, size));
    }
    let candidate = ControlCandidate {
        a: num(IncreasingProcessPath::new(&grid, density, jumps))?,
    };
    let reg = mc_reg(ctx.cfg);
    let mut bundles = Vec::with_capacity(reg.n_outer);
    let mut xis = Vec::with_capacity(reg.n_outer);
    for outer in 0..reg.n_outer as u64 {
        let bundle = num(PathBundle::generate(
            &grid,
            coeffs.dim_w,
            coeffs.dim_b,
            &levy,
            reg.n_inner,
            ctx.seed,
            STREAM_CLI,
            outer,
        ))?;
        xis.push(val(terminal_values(&section.xi, &bundle))?);
        bundles.push(bundle);
    }
    let ccfg = ControlConfig {
        reg,
        picard_tol: ctx.cfg.mc.picard_tol,
        picard_max_iter: ctx.cfg.mc.picard_max_iter,
        grad_scale: 1.0,
    };
    let report = num(necessary_check(
        &candidate,
        &coeffs,
        &bundles,
        &xis,
        &ccfg,
        section.tol,
    ))?;
    let suff = num(sufficient_check(
        &candidate,
        &coeffs,
        &bundles,
        &xis,
        &ccfg,
        section.tol,
        section.n_probe,
        ctx.seed ^ 0x5ffc,
    ))?;
    let mut verdict = String::new();
    let _ = writeln!(
        verdict,
        "J = {} +- {}",
        f17(report.j_estimate),
        f17(report.j_stderr)
    );
    let _ = writeln!(verdict, "{}", report.verdict_line());
    let _ = writeln!(verdict, "{}", suff.verdict_line());
    print!("{verdict}");
    val(ctx.write("control-report.csv", &report.to_csv()))?;
    val(ctx.write("control-verdict.txt", &verdict))?;
    val(ctx.manifest("control-check"))
}

// ---------------------------------------------------------------------------

pub fn ito_check_cmd(ctx: &RunContext) -> std::result::Result<(), CmdError> {
    let section = val(ctx
        .cfg
        .ito
        .as_ref()
        .ok_or_else(|| anyhow!("missing [ito] section")))?;
    let grid = val(ctx.grid())?;
    let levy = Arc::new(val(ctx.cfg.levy.to_spec())?);
    let dims = &ctx.cfg.coefficients;
    if section.gamma.len() != dims.dim_b
        || section.delta.len() != dims.dim_w
        || section.theta.len() != levy.n_atoms()
    {
        return Err(CmdError::Validation(anyhow!(
            "ito components need dim_b gamma, dim_w delta and one theta per Levy atom"
        )));
    }
    let compile_t = |src: &str, what: &str| -> Result<CompiledExpr> {
        dsl::parse(src)
            .with_context(|| what.to_owned())?
            .compile(&["t"])
            .with_context(|| what.to_owned())
    };
    let eval_levels = |expr: &CompiledExpr| -> Result<Vec<f64>> {
        (0..grid.n_points())
            .map(|k| Ok(expr.eval(&[grid.time(k)])?))
            .collect()
    };
    let eval_many = |srcs: &[String], what: &str| -> Result<Vec<f64>> {
        // component-major to time-major layout
        let per: Vec<Vec<f64>> = srcs
            .iter()
            .map(|s| eval_levels(&compile_t(s, what)?))
            .collect::<Result<_>>()?;
        let mut out = vec![0.0; grid.n_points() * srcs.len()];
        for k in 0..grid.n_points() {
            for (c, col) in per.iter().enumerate() {
                out[k * srcs.len() + c] = col[k];
            }
        }
        Ok(out)
    };
    let comps = ItoComponents {
        alpha0: section.alpha0,
        beta: val(eval_levels(&val(compile_t(&section.beta, "ito.beta"))?))?,
        gamma: val(eval_many(&section.gamma, "ito.gamma"))?,
        delta: val(eval_many(&section.delta, "ito.delta"))?,
        theta: val(eval_many(&section.theta, "ito.theta"))?,
lambda: val(eval_levels(&val(compile_t(&section.lambda, "ito.lambda"))?))?,
    };
    let a = val(ctx.a_process(&grid))?;
    let scen_results: Vec<std::result::Result<PathBundle, CmdError>> = (0..section.n_scenarios
        as u64)
        .into_par_iter()
        .map(|o| {
            num(PathBundle::generate(
                &grid,
                dims.dim_w,
                dims.dim_b,
                &levy,
                ctx.cfg.mc.n_inner,
                ctx.seed,
                STREAM_CLI,
                o,
            ))
        })
        .collect();
    let mut scenarios = Vec::with_capacity(scen_results.len());
    for s in scen_results {
        scenarios.push(s?);
    }
    let report = num(ito_identity_check(&comps, &a, &scenarios))?;
    let mut csv = String::from("lhs_mean,rhs_mean,diff_mean,diff_stderr,residual\n");
    let _ = writeln!(
        csv,
        "{},{},{},{},{}",
        f17(report.lhs_mean),
        f17(report.rhs_mean),
        f17(report.diff_mean),
        f17(report.diff_stderr),
        f17(report.residual)
    );
    println!(
        "ito identity: residual {} ({} scenarios x {} paths)",
        f17(report.residual),
        section.n_scenarios,
        ctx.cfg.mc.n_inner
    );
    val(ctx.write("ito.csv", &csv))?;
    val(ctx.manifest("ito-check"))
}
