//! End-to-end checks of the experiment runner: config validation, exit
//! codes, output schemas and rerun determinism.

use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_gbdsde"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn gbdsde")
}

fn write_config(dir: &Path, name: &str, body: &str) -> String {
    let path = dir.join(name);
    std::fs::write(&path, body).unwrap();
    path.to_str().unwrap().to_owned()
}

const BASE: &str = r#"
seed = 7
[grid]
t_end = 1.0
n_steps = 16
[mc]
n_outer = 3
n_inner = 32
degree = 1
"#;

#[test]
fn missing_seed_is_named_with_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "noseed.toml",
        "[grid]\nt_end = 1.0\nn_steps = 4\n",
    );
    let out = run(&["solve-linear", "--config", &cfg, "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("seed"), "stderr: {stderr}");
}

#[test]
fn unknown_key_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "unknown.toml",
        &format!("{BASE}\nnot_a_key = 1\n"),
    );
    let out = run(&["solve-linear", "--config", &cfg, "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn all_zero_linear_config_returns_terminal() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "linear.toml",
        &format!("{BASE}\n[linear]\nxi = \"2.5\"\n"),
    );
    let outdir = dir.path().join("out");
    let out = run(&["solve-linear", "--config", &cfg, "--out", outdir.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(outdir.join("linear.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "t,y,stderr");
    for line in lines {
        let y: f64 = line.split(',').nth(1).unwrap().parse().unwrap();
        assert!((y - 2.5).abs() < 1e-12, "line {line}");
    }
    assert!(outdir.join("solve-linear-manifest.toml").exists());
}

#[test]
fn rerun_is_byte_identical_and_hash_tracks_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "a.toml",
        &format!("{BASE}\n[linear]\nxi = \"w1\"\n"),
    );
    let out1 = dir.path().join("o1");
    let out2 = dir.path().join("o2");
    assert!(run(&["solve-linear", "--config", &cfg, "--out", out1.to_str().unwrap()])
        .status
        .success());
    assert!(run(&["solve-linear", "--config", &cfg, "--out", out2.to_str().unwrap()])
        .status
        .success());
    let a = std::fs::read(out1.join("linear.csv")).unwrap();
    let b = std::fs::read(out2.join("linear.csv")).unwrap();
    assert_eq!(a, b);
    let m1 = std::fs::read_to_string(out1.join("solve-linear-manifest.toml")).unwrap();
    // one extra byte in the config changes the recorded hash
    let cfg2 = write_config(
        dir.path(),
        "b.toml",
        &format!("{BASE}\n[linear]\nxi = \"w1\"\n# x\n"),
    );
    let out3 = dir.path().join("o3");
    assert!(run(&["solve-linear", "--config", &cfg2, "--out", out3.to_str().unwrap()])
        .status
        .success());
    let m3 = std::fs::read_to_string(out3.join("solve-linear-manifest.toml")).unwrap();
    let hash = |m: &str| {
        m.lines()
            .find(|l| l.starts_with("config_sha256"))
            .unwrap()
            .to_owned()
    };
    assert_ne!(hash(&m1), hash(&m3));
}

#[test]
fn seed_flag_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "seeded.toml",
        &format!("{BASE}\n[linear]\nxi = \"w1\"\n"),
    );
    let out1 = dir.path().join("s1");
    let out2 = dir.path().join("s2");
    run(&["solve-linear", "--config", &cfg, "--out", out1.to_str().unwrap()]);
    run(&[
        "solve-linear",
        "--config",
        &cfg,
        "--seed",
        "123",
        "--out",
        out2.to_str().unwrap(),
    ]);
    let a = std::fs::read(out1.join("linear.csv")).unwrap();
    let b = std::fs::read(out2.join("linear.csv")).unwrap();
    assert_ne!(a, b);
}

#[test]
fn numerical_failure_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    // explicit n_t far below the stability bound
    let cfg = write_config(
        dir.path(),
        "pde.toml",
        &format!(
            "{BASE}
[coefficients]
n_dim = 1
dim_w = 1
dim_b = 1
sigma = [\"1\"]
ell = \"x1\"
[pde]
x_lo = 0.0
x_hi = 1.0
n_x = 201
n_t = 3
output_times = [0.0]
"
        ),
    );
    let out = run(&["oracle-pde", "--config", &cfg, "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("stability"), "stderr: {stderr}");
}

#[test]
fn gbdsde_reflect_ito_and_control_run_green() {
    let dir = tempfile::tempdir().unwrap();
    let outdir = dir.path().join("out");
    let o = outdir.to_str().unwrap();

    let gb = write_config(
        dir.path(),
        "gb.toml",
        &format!("{BASE}\n[coefficients]\nf = \"-0.5*y\"\n[gbdsde]\nxi = \"1\"\n"),
    );
    let out = run(&["solve-gbdsde", "--config", &gb, "--out", o]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(outdir.join("gbdsde.csv")).unwrap();
    let first: f64 = csv
        .lines()
        .nth(1)
        .unwrap()
        .split(',')
        .nth(1)
        .unwrap()
        .parse()
        .unwrap();
    let expect = (0.5f64).exp().recip();
    assert!((first - expect).abs() < 0.05, "Y(0) = {first} vs {expect}");

    let rf = write_config(
        dir.path(),
        "rf.toml",
        &format!(
            "{BASE}
[coefficients]
n_dim = 1
dim_w = 1
dim_b = 1
sigma = [\"1\"]
phi = \"x1*(1-x1)\"
[reflect]
start_t = 0.0
start_x = [0.5]
n_paths = 64
"
        ),
    );
    let out = run(&["reflect", "--config", &rf, "--out", o]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stats = std::fs::read_to_string(outdir.join("reflect-stats.csv")).unwrap();
    for line in stats.lines().skip(1) {
        let min_phi: f64 = line.split(',').next_back().unwrap().parse().unwrap();
        assert!(min_phi >= -1e-8, "line {line}");
    }

    let ito = write_config(
        dir.path(),
        "ito.toml",
        &format!(
            "{BASE}
[ito]
beta = \"0\"
gamma = [\"0\"]
delta = [\"1\"]
theta = []
lambda = \"0\"
n_scenarios = 4
"
        ),
    );
    let out = run(&["ito-check", "--config", &ito, "--out", o]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(outdir.join("ito.csv")).unwrap();
    let residual: f64 = csv
        .lines()
        .nth(1)
        .unwrap()
        .split(',')
        .next_back()
        .unwrap()
        .parse()
        .unwrap();
    assert!(residual <= 4.0, "residual {residual}");

    let ctl = write_config(
        dir.path(),
        "ctl.toml",
        &format!(
            "{BASE}
[coefficients]
G = \"x^2\"
H = \"-1\"
h = \"1\"
[control]
candidate_jumps = [[0.5, 0.5]]
tol = 1e-3
xi = \"0\"
"
        ),
    );
    let out = run(&["control-check", "--config", &ctl, "--out", o]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let verdict = std::fs::read_to_string(outdir.join("control-verdict.txt")).unwrap();
    assert!(verdict.contains("necessary: PASS"), "{verdict}");
    assert!(verdict.contains("sufficient: PASS"), "{verdict}");
    let report = std::fs::read_to_string(outdir.join("control-report.csv")).unwrap();
    assert!(report.starts_with("t,p,U,V,dAc,dAjump"));
}

#[test]
fn paths_selftest_reports_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "st.toml",
        &format!("{BASE}\n[levy]\nmarks = [1.0, -1.0]\nweights = [1.0, 3.0]\n"),
    );
    let outdir = dir.path().join("out");
    let out = run(&["paths-selftest", "--config", &cfg, "--out", outdir.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(outdir.join("paths-selftest.csv")).unwrap();
    assert!(csv.contains("deterministic,1"));
    assert!(csv.contains("mark_freq_0"));
}

#[test]
fn feynman_kac_and_oracle_pde_cross_check() {
    // two subcommands on the heat config: interior points agree within
    // max(5%, 4 stderr / |oracle|)
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "heat.toml",
        r#"
seed = 31
[grid]
t_end = 1.0
n_steps = 256
[coefficients]
n_dim = 1
dim_w = 1
dim_b = 1
sigma = ["1"]
ell = "1 + cos(3.141592653589793*x1)"
phi = "x1*(1-x1)"
[mc]
n_outer = 4
n_inner = 250
degree = 2
[feynman_kac]
points = [[0.5, 0.3], [0.5, 0.5], [0.5, 0.7]]
route = "direct"
box_lo = [0.0]
box_hi = [1.0]
[pde]
x_lo = 0.0
x_hi = 1.0
n_x = 201
output_times = [0.5]
"#,
    );
    let outdir = dir.path().join("out");
    let o = outdir.to_str().unwrap();
    assert!(run(&["feynman-kac", "--config", &cfg, "--out", o]).status.success());
    assert!(run(&["oracle-pde", "--config", &cfg, "--out", o]).status.success());
    let field = std::fs::read_to_string(outdir.join("field.csv")).unwrap();
    let pde = std::fs::read_to_string(outdir.join("pde.csv")).unwrap();
    let oracle_at = |x: f64| -> f64 {
        pde.lines()
            .skip(1)
            .map(|l| {
                let mut it = l.split(',');
                let t: f64 = it.next().unwrap().parse().unwrap();
                let xi: f64 = it.next().unwrap().parse().unwrap();
                let u: f64 = it.next().unwrap().parse().unwrap();
                (t, xi, u)
            })
            .filter(|(t, xi, _)| (t - 0.5).abs() < 1e-9 && (xi - x).abs() < 2.6e-3)
            .map(|(_, _, u)| u)
            .next()
            .unwrap()
    };
    for line in field.lines().skip(1) {
        let cols: Vec<f64> = line.split(',').take(4).map(|v| v.parse().unwrap()).collect();
        let (x, u, se) = (cols[1], cols[2], cols[3]);
        let oracle = oracle_at(x);
        let rel = (u - oracle).abs() / oracle.abs();
        let allowed = (0.05f64).max(4.0 * se / oracle.abs());
        assert!(rel <= allowed, "x={x}: mc {u} vs fd {oracle} (rel {rel})");
    }
}

#[test]
fn transform_route_via_cli() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "tr.toml",
        r#"
seed = 17
[grid]
t_end = 1.0
n_steps = 32
[coefficients]
n_dim = 1
dim_w = 1
dim_b = 1
sigma = ["1"]
ell = "cos(3.141592653589793*x1)"
g = ["0.2*sin(x1 + t)"]
phi = "x1*(1-x1)"
[mc]
n_outer = 3
n_inner = 64
degree = 2
[feynman_kac]
points = [[0.5, 0.5]]
route = "transform"
box_lo = [0.0]
box_hi = [1.0]
lattice_points = 33
"#,
    );
    let outdir = dir.path().join("out");
    let out = run(&["feynman-kac", "--config", &cfg, "--out", outdir.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(outdir.join("field.csv")).unwrap();
    let u: f64 = csv.lines().nth(1).unwrap().split(',').nth(2).unwrap().parse().unwrap();
    assert!(u.is_finite() && u.abs() < 5.0);
}

#[test]
fn env_seed_override() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "env.toml",
        &format!("{BASE}\n[linear]\nxi = \"w1\"\n"),
    );
    let out_env = dir.path().join("env");
    let out_flag = dir.path().join("flag");
    let status = bin()
        .args(["solve-linear", "--config", &cfg, "--out", out_env.to_str().unwrap()])
        .env("GBDSDE_SEED", "555")
        .status()
        .unwrap();
    assert!(status.success());
    assert!(run(&[
        "solve-linear",
        "--config",
        &cfg,
        "--seed",
        "555",
        "--out",
        out_flag.to_str().unwrap()
    ])
    .status
    .success());
    let a = std::fs::read(out_env.join("linear.csv")).unwrap();
    let b = std::fs::read(out_flag.join("linear.csv")).unwrap();
    assert_eq!(a, b);
}
