//! End-to-end acceptance suite. Each criterion prints one PASS/FAIL line.

use std::f64::consts::PI;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use sgdm_cli::{execute, Command, ExperimentConfig, Outcome};
use sgdm_core::analysis::{max_l2_error, PiecewiseConstantPath};
use sgdm_core::flux::ProbeConfig;
use sgdm_core::noise::GrowthCheckConfig;
use sgdm_core::scheme::{initial_state, RunSpec, SolverConfig, Stepper};
use sgdm_core::{BoundingBox, FluxModel, GdKind, GradientDiscretisation, Mesh, Multiplier, NoiseModel, SpaceTimeGd};

const SEED: u64 = 20_240_611;

fn config(text: &str, dir: &Path) -> ExperimentConfig {
    let mut c = ExperimentConfig::from_toml(text).expect("acceptance config parses");
    c.output.dir = dir.to_path_buf();
    c.run.master_seed = SEED;
    c
}

fn check<'a>(o: &'a Outcome, name: &str) -> Result<&'a sgdm_cli::Check, String> {
    o.checks.iter().find(|c| c.name == name).ok_or_else(|| format!("missing check {name}"))
}

fn all_pass(o: &Outcome, names: &[&str]) -> Result<(bool, String), String> {
    let mut ok = true;
    let mut detail = Vec::new();
    for n in names {
        let c = check(o, n)?;
        ok &= c.pass;
        detail.push(format!("{n}: {}", c.detail));
    }
    Ok((ok, detail.join("; ")))
}

type Verdict = Result<(bool, String), String>;

fn report(results: &mut Vec<(usize, bool)>, id: usize, title: &str, v: Verdict) {
    let (ok, detail) = match v {
        Ok(x) => x,
        Err(e) => (false, format!("error: {e}")),
    };
    let lead = if results.is_empty() { "\n" } else { "" };
    let line = format!("{lead}{} criterion {id:>2} ({title}): {detail}\n", if ok { "PASS" } else { "FAIL" });
    // written to the raw handle so the line is visible without --nocapture
    let _ = std::io::stderr().write_all(line.as_bytes());
    results.push((id, ok));
}

fn heat_oracle() -> Verdict {
    let start = Instant::now();
    let t_final = 0.1;
    let flux = FluxModel::linear_diffusion();
    let mut h = Vec::new();
    let mut errors = Vec::new();
    for cells in [8usize, 16, 32] {
        let mesh = Mesh::uniform_interval(cells, 0.0, 1.0).map_err(|e| e.to_string())?;
        let noise = NoiseModel::sine(mesh.bbox(), 1, 1, 1.0, Multiplier::Zero).map_err(|e| e.to_string())?;
        let gd = GradientDiscretisation::new(&mesh, GdKind::P1Conforming).map_err(|e| e.to_string())?;
        let hh = 1.0 / cells as f64;
        let n = (t_final / (hh * hh)).round() as usize;
        let sgd = SpaceTimeGd::new(gd, t_final, n).map_err(|e| e.to_string())?;
        let st = Stepper::new(&sgd, &flux, &noise, SolverConfig::default()).map_err(|e| e.to_string())?;
        let traj = st.run_deterministic(&initial_state(&sgd, |x| (PI * x[0]).sin())).map_err(|e| e.to_string())?;
        let err = max_l2_error(&sgd.gd, &traj, |t, x| (-PI * PI * t).exp() * (PI * x[0]).sin()).map_err(|e| e.to_string())?;
        h.push(hh);
        errors.push(err);
    }
    let orders: Vec<f64> = (1..3).map(|i| (errors[i - 1] / errors[i]).ln() / (h[i - 1] / h[i]).ln()).collect();
    let secs = start.elapsed().as_secs_f64();
    let ok = orders.iter().all(|o| *o >= 1.8) && secs < 10.0;
    Ok((ok, format!("errors {:?}, orders {orders:.3?}, {secs:.2} s", errors.iter().map(|e| format!("{e:.3e}")).collect::<Vec<_>>())))
}

fn ou_oracle(dir: &Path) -> Verdict {
    let start = Instant::now();
    let cfg = config("[oracle]\nn_samples = 100000\nn_steps = 16\ndual_trials = 0\n", dir);
    let out = execute(Command::Oracle, &cfg).map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    let c = check(&out, "ou_moments")?;
    Ok((c.pass && secs < 60.0, format!("{}, {secs:.1} s", c.detail)))
}

const P3_BENCHMARK: &str = "
[mesh]
cells = 16
[gd]
levels = 3
[flux]
kind = \"p-laplace\"
p = 3.0
[time]
t_final = 0.1
n_steps = 32
level_factor = 2
[noise]
k_max = 8
s = 1.5
f0 = \"tanh\"
[initial]
kind = \"sine\"
[run]
n_samples = 1000
[estimators]
dual_r = []
moments = [1, 2, 3]
beta = 0.25
";

const P2_BENCHMARK: &str = "
[mesh]
cells = 16
[flux]
kind = \"linear\"
p = 2.0
[time]
t_final = 0.1
n_steps = 32
[noise]
k_max = 8
s = 1.5
f0 = \"tanh\"
[initial]
kind = \"sine\"
[run]
n_samples = 1000
[estimators]
ells = [1, 2, 4, 8]
dual_r = [2]
martingale = false
[checks]
slopes = true
slope_fraction = 0.8
increment_mean = false
";

fn translate_consistency(dir: &Path) -> Verdict {
    let cfg = config(P2_BENCHMARK, dir);
    let sgd = &cfg.space_time().map_err(|e| e.to_string())?[0];
    let flux = cfg.flux_model().map_err(|e| e.to_string())?;
    let noise = cfg.noise_model(sgd.gd.mesh()).map_err(|e| e.to_string())?;
    let st = Stepper::new(sgd, &flux, &noise, cfg.solver).map_err(|e| e.to_string())?;
    let traj = st.run_trajectory(&initial_state(sgd, |x| (PI * x[0]).sin()), RunSpec::new(SEED, 0)).map_err(|e| e.to_string())?;
    let dt = sgd.dt();
    let values = &traj.u[1..];
    let path = PiecewiseConstantPath::from_dof_vectors(&sgd.gd, dt, values).map_err(|e| e.to_string())?;
    let t = sgd.t_final();
    let value_at = |s: f64| ((s / dt).ceil() as usize).clamp(1, values.len()) - 1;
    let mut worst: f64 = 0.0;
    for rho in [0.3 * dt, dt, 2.5 * dt, 7.1 * dt, 20.0 * dt + 1e-3 * dt] {
        let mut nodes: Vec<f64> = (0..=values.len()).map(|n| n as f64 * dt).chain((0..=values.len()).map(|n| n as f64 * dt - rho)).filter(|s| *s >= 0.0 && *s <= t - rho).collect();
        nodes.push(0.0);
        nodes.push(t - rho);
        nodes.sort_by(f64::total_cmp);
        let mut brute = 0.0;
        for w in nodes.windows(2) {
            if w[1] - w[0] <= 0.0 {
                continue;
            }
            let mid = 0.5 * (w[0] + w[1]);
            let d = &values[value_at(mid + rho)] - &values[value_at(mid)];
            brute += (w[1] - w[0]) * sgd.gd.lp_norm(&d, 2.0).map_err(|e| e.to_string())?.powi(2);
        }
        let fast = path.continuous_translate(rho).map_err(|e| e.to_string())?;
        worst = worst.max((fast - brute).abs());
    }
    Ok((worst <= 1e-8, format!("continuous translate vs brute force: max difference {worst:.2e}")))
}

fn probes() -> Verdict {
    let cfg = ProbeConfig { n_samples: 100_000, ..ProbeConfig::default() };
    let mut fluxes: Vec<(String, FluxModel)> = vec![("linear".into(), FluxModel::linear_diffusion())];
    for p in [1.5, 2.0, 2.5, 3.0, 4.0] {
        fluxes.push((format!("p-laplace({p})"), FluxModel::p_laplace(p).map_err(|e| e.to_string())?));
    }
    for p in [2.0, 2.5, 3.0, 4.0] {
        fluxes.push((format!("regularized({p})"), FluxModel::regularized_p_laplace(p).map_err(|e| e.to_string())?));
    }
    let mut ok = true;
    let mut detail = Vec::new();
    for (name, f) in &fluxes {
        let r = f.probe_assumptions(&cfg).map_err(|e| e.to_string())?;
        let v = r.coercivity_violations + r.growth_violations + r.monotonicity_violations;
        ok &= v == 0;
        if v > 0 {
            detail.push(format!("{name}: {v} violations"));
        }
    }
    let anti: sgdm_core::flux::FluxFn = std::sync::Arc::new(|_, y| [-y[0], -y[1]]);
    let planted = FluxModel::custom(anti, 2.0, 1.0, 1.0).map_err(|e| e.to_string())?.probe_assumptions(&cfg).map_err(|e| e.to_string())?;
    ok &= !planted.pass && planted.monotonicity_violations > 0 && planted.coercivity_violations > 0;
    detail.push(format!("anti-monotone flux: {} coercivity, {} monotonicity violations", planted.coercivity_violations, planted.monotonicity_violations));

    let growth = GrowthCheckConfig { trials: 100_000, ..GrowthCheckConfig::default() };
    for (mesh, dim) in [
        (Mesh::uniform_interval(16, 0.0, 1.0).map_err(|e| e.to_string())?, 1),
        (Mesh::uniform_rectangle(6, 6, BoundingBox::unit_square()).map_err(|e| e.to_string())?, 2),
    ] {
        let gd = GradientDiscretisation::new(&mesh, GdKind::P1Conforming).map_err(|e| e.to_string())?;
        for (name, m) in [("zero", Multiplier::Zero), ("constant", Multiplier::Constant(1.5)), ("identity", Multiplier::Identity), ("tanh", Multiplier::Tanh)] {
            let nz = NoiseModel::sine(mesh.bbox(), dim, 8, 1.5, m).map_err(|e| e.to_string())?;
            let r = nz.growth_check(&gd, &growth).map_err(|e| e.to_string())?;
            ok &= r.violations == 0;
            if r.violations > 0 {
                detail.push(format!("{name} ({dim}d): {} violations", r.violations));
            }
        }
        let sq = NoiseModel::sine(mesh.bbox(), dim, 8, 1.5, Multiplier::Square).map_err(|e| e.to_string())?;
        let r = sq.growth_check(&gd, &growth).map_err(|e| e.to_string())?;
        ok &= r.violations > 0;
        detail.push(format!("unbounded square multiplier ({dim}d): {} violations", r.violations));
    }
    Ok((ok, format!("{} built-in fluxes and 8 noises clean; {}", fluxes.len(), detail.join("; "))))
}

fn indicators(root: &Path) -> Verdict {
    let mut ok = true;
    let mut detail = Vec::new();

    let dir = root.join("ind_p1_1d");
    let cfg = config("[mesh]\ncells = 16\n[gd]\nlevels = 3\n[flux]\nkind = \"linear\"\np = 2.0\n", &dir);
    let out = execute(Command::Indicators, &cfg).map_err(|e| e.to_string())?;
    let (pass, d) = all_pass(
        &out,
        &["consistency_sin1_decreasing", "consistency_sin2_decreasing", "conformity_vanishes", "translate_linear_bound", "poincare_approaches_continuum"],
    )?;
    ok &= pass;
    detail.push(format!("P1 (0,1): {d}"));
    let cp = out.data["poincare"][2].as_f64().ok_or("missing C_p")?;
    let gap = (cp - 1.0 / PI).abs();
    ok &= gap <= 1e-3;
    detail.push(format!("|C_p - 1/pi| = {gap:.2e} at h = 1/64"));

    let dir = root.join("ind_p1_2d");
    let cfg = config("[mesh]\ngenerator = \"rectangle\"\nnx = 4\nny = 4\n[gd]\nlevels = 3\n[flux]\nkind = \"linear\"\np = 2.0\n", &dir);
    let out = execute(Command::Indicators, &cfg).map_err(|e| e.to_string())?;
    let (pass, d) = all_pass(&out, &["consistency_sin1_decreasing", "consistency_sin2_decreasing", "conformity_vanishes", "translate_linear_bound"])?;
    ok &= pass;
    detail.push(format!("P1 unit square: {d}"));

    let dir = root.join("ind_cr_2d");
    let cfg = config(
        "[mesh]\ngenerator = \"rectangle\"\nnx = 4\nny = 4\n[gd]\nkind = \"crouzeix-raviart\"\nlevels = 3\n[flux]\nkind = \"linear\"\np = 2.0\n",
        &dir,
    );
    let out = execute(Command::Indicators, &cfg).map_err(|e| e.to_string())?;
    let (pass, d) = all_pass(&out, &["consistency_sin1_decreasing", "consistency_sin2_decreasing", "conformity_sine_decreasing", "translate_linear_bound"])?;
    ok &= pass;
    let w: Vec<f64> = out.data["conformity"][3].as_array().ok_or("missing W_D")?.iter().filter_map(|v| v.as_f64()).collect();
    let orders: Vec<f64> = w.windows(2).map(|p| (p[0] / p[1]).log2()).collect();
    ok &= orders.len() == 2 && orders.iter().all(|o| *o >= 0.8);
    detail.push(format!("Crouzeix-Raviart: {d}; W_D orders {orders:.3?}"));
    Ok((ok, detail.join(" | ")))
}

fn csv_files(dir: &Path) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = std::fs::read_dir(dir)
        .map(|rd| rd.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| p.extension().is_some_and(|x| x == "csv")).collect())
        .unwrap_or_default();
    v.sort();
    v
}

fn reproducibility(root: &Path) -> Verdict {
    let cases = [
        (Command::Run, "[mesh]\ncells = 8\n[gd]\nlevels = 2\n[time]\nn_steps = 16\n[run]\nn_samples = 24\n[estimators]\nells = [1, 2]\n"),
        (Command::Convergence, "[mesh]\ncells = 4\n[gd]\nlevels = 3\n[time]\nn_steps = 8\n[run]\nn_samples = 12\n[estimators]\nells = [1, 2]\n"),
        (Command::Oracle, "[oracle]\nn_samples = 2000\ndual_trials = 2\n"),
    ];
    let mut compared = 0;
    for (i, (cmd, text)) in cases.iter().enumerate() {
        let mut dirs = Vec::new();
        for workers in [1usize, 3, 1] {
            let dir = root.join(format!("repro{i}_{}", dirs.len()));
            let mut cfg = config(text, &dir);
            cfg.run.workers = workers;
            execute(*cmd, &cfg).map_err(|e| e.to_string())?;
            dirs.push(dir);
        }
        let base = csv_files(&dirs[0]);
        if base.is_empty() {
            return Ok((false, format!("{} produced no CSV", cmd.name())));
        }
        for d in &dirs[1..] {
            let other = csv_files(d);
            if other.len() != base.len() {
                return Ok((false, format!("{}: file sets differ", cmd.name())));
            }
            for (a, b) in base.iter().zip(&other) {
                if std::fs::read(a).map_err(|e| e.to_string())? != std::fs::read(b).map_err(|e| e.to_string())? {
                    return Ok((false, format!("{} differs", b.display())));
                }
                compared += 1;
            }
        }
    }
    Ok((true, format!("{compared} CSV files byte-identical across reruns with 1 and 3 workers")))
}

#[test]
fn acceptance() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let mut results = Vec::new();

    report(&mut results, 1, "heat oracle", heat_oracle());
    report(&mut results, 2, "OU oracle", ou_oracle(&root.join("ou")));

    let p3 = execute(Command::Run, &config(P3_BENCHMARK, &root.join("p3"))).map_err(|e| e.to_string());
    report(
        &mut results,
        3,
        "energy estimate",
        p3.as_ref().map_err(|e| e.clone()).and_then(|o| all_pass(o, &["energy_identity", "energy_bounded"])),
    );
    report(
        &mut results,
        4,
        "higher moments",
        p3.as_ref().map_err(|e| e.clone()).and_then(|o| all_pass(o, &["moment_1_bounded", "moment_2_bounded", "moment_3_bounded"])),
    );

    let p2 = execute(Command::Run, &config(P2_BENCHMARK, &root.join("p2"))).map_err(|e| e.to_string());
    report(
        &mut results,
        5,
        "time translates",
        p2.as_ref().map_err(|e| e.clone()).and_then(|o| {
            let (a, da) = all_pass(o, &["translate_slope_level0"])?;
            let (b, db) = translate_consistency(&root.join("p2_path"))?;
            Ok((a && b, format!("{da}; {db}")))
        }),
    );
    report(
        &mut results,
        6,
        "dual-norm increments",
        p2.as_ref().map_err(|e| e.clone()).and_then(|o| {
            let (a, da) = all_pass(o, &["dual_slope_r2_level0"])?;
            let cfg = config("[oracle]\nn_samples = 4\ndual_trials = 10\n", &root.join("dual"));
            let mut ok = a;
            let mut detail = vec![da];
            for p in [2.0, 3.0, 1.5] {
                let mut c = cfg.clone();
                c.flux.kind = sgdm_cli::config::FluxChoice::PLaplace;
                c.flux.p = p;
                let out = execute(Command::Oracle, &c).map_err(|e| e.to_string())?;
                let ch = check(&out, "dual_norm_oracle")?;
                ok &= ch.pass;
                detail.push(format!("p = {p}: {}", ch.detail));
            }
            Ok((ok, detail.join("; ")))
        }),
    );

    let additive = "
[mesh]
cells = 16
[flux]
kind = \"linear\"
p = 2.0
[time]
t_final = 0.1
n_steps = 32
[noise]
k_max = 8
s = 1.5
f0 = \"constant\"
f0_constant = 1.0
[initial]
kind = \"zero\"
[run]
n_samples = 1000
[estimators]
dual_r = []
[checks]
martingale_identity = true
";
    report(
        &mut results,
        7,
        "martingale suite",
        p3.as_ref().map_err(|e| e.clone()).and_then(|o| {
            let (a, da) = all_pass(o, &["martingale_bounded", "increment_mean_level0", "increment_mean_level1", "increment_mean_level2"])?;
            let add = execute(Command::Run, &config(additive, &root.join("additive"))).map_err(|e| e.to_string())?;
            let (b, db) = all_pass(&add, &["martingale_identity", "increment_mean_level0"])?;
            Ok((a && b, format!("{da}; additive: {db}")))
        }),
    );

    report(&mut results, 8, "discretisation indicators", indicators(root));
    report(&mut results, 9, "assumption probes", probes());

    let selfconv = "
[mesh]
cells = 16
[gd]
levels = 4
[flux]
kind = \"p-laplace\"
p = 3.0
[time]
t_final = 0.1
n_steps = 32
level_factor = 2
[noise]
k_max = 8
s = 1.5
f0 = \"tanh\"
[run]
n_samples = 100
";
    report(
        &mut results,
        10,
        "self-convergence",
        execute(Command::Convergence, &config(selfconv, &root.join("selfconv")))
            .map_err(|e| e.to_string())
            .and_then(|o| all_pass(&o, &["differences_decrease"])),
    );
    report(&mut results, 11, "reproducibility", reproducibility(root));

    let failed: Vec<usize> = results.iter().filter(|r| !r.1).map(|r| r.0).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
