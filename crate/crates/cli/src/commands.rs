//! Subcommand implementations. Each writes its tables, a `summary.json`
//! with the named checks and a `manifest.json` into the output directory.

use std::f64::consts::PI;
use std::path::Path;

use nalgebra::DVector;
use serde::Serialize;
use serde_json::{json, Value};
use sgdm_core::analysis::{
    coupled_refinement_study, max_l2_error, ou_oracle, run_ensemble, simulate_ensemble, variance_with_se, ConvergenceReport,
    DualNorm, DualNormOptions, EstimatorReport, MeanSe, OuParams,
};
use sgdm_core::gd::{indicator_t, indicator_w, interpolate_best, poincare_constant};
use sgdm_core::gd::{GdKind, GradientDiscretisation, SpaceTimeGd};
use sgdm_core::geometry::Point;
use sgdm_core::mesh::{BoundingBox, Mesh};
use sgdm_core::noise::{Multiplier, NoiseModel};
use sgdm_core::scheme::{initial_state, write_trajectory_csv, write_trajectory_sidecar, RunSpec, Stepper};

use crate::config::{sine_product, ExperimentConfig, F0Choice, FluxChoice, InitialChoice};
use crate::error::CliError;
use crate::output::{num, write_json, Manifest, Table};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Run,
    Indicators,
    Probe,
    Oracle,
    Convergence,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Run => "run",
            Command::Indicators => "indicators",
            Command::Probe => "probe",
            Command::Oracle => "oracle",
            Command::Convergence => "convergence",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

impl Check {
    fn new(name: &str, pass: bool, detail: impl Into<String>) -> Self {
        Check { name: name.to_string(), pass, detail: detail.into() }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Outcome {
    pub command: &'static str,
    pub pass: bool,
    pub checks: Vec<Check>,
    pub data: Value,
}

/// Validates `cfg`, runs `cmd` and writes all outputs.
pub fn execute(cmd: Command, cfg: &ExperimentConfig) -> Result<Outcome, CliError> {
    cfg.validate()?;
    let dir = cfg.output.dir.clone();
    std::fs::create_dir_all(&dir)?;
    let manifest = Manifest::new(cmd.name(), cfg)?;
    let (checks, data) = match cmd {
        Command::Run => run(cfg, &dir, &manifest.config_hash)?,
        Command::Indicators => indicators(cfg, &dir)?,
        Command::Probe => probe(cfg, &dir)?,
        Command::Oracle => oracle(cfg, &dir)?,
        Command::Convergence => convergence(cfg, &dir)?,
    };
    let outcome = Outcome { command: cmd.name(), pass: checks.iter().all(|c| c.pass), checks, data };
    write_json(&outcome, &dir.join("summary.json"))?;
    write_json(&manifest, &dir.join("manifest.json"))?;
    Ok(outcome)
}

fn to_value<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).unwrap_or(Value::Null)
}

fn ms_cells(m: &MeanSe) -> [String; 3] {
    [num(m.mean), num(m.se), m.n.to_string()]
}

fn estimator_rows(t: &mut Table, level: usize, rep: &EstimatorReport) {
    let mut push = |name: &str, index: String, x: String, m: &MeanSe| {
        let [a, b, c] = ms_cells(m);
        t.push(vec![level.to_string(), name.to_string(), index, x, a, b, c]);
    };
    push("max_l2_sq", String::new(), String::new(), &rep.energy_max_l2_sq);
    push("grad_lp_p", String::new(), String::new(), &rep.grad_lp_p);
    push("increment_sum", String::new(), String::new(), &rep.increment_sum);
    push("apriori_total", String::new(), String::new(), &rep.apriori_total);
    for (q, m) in &rep.higher_moments {
        push("moment", q.to_string(), String::new(), m);
    }
    for r in &rep.translate_table {
        push("time_translate", r.ell.to_string(), num(r.t_ell), &r.value);
    }
    for r in &rep.dual_increment_table {
        push(&format!("dual_increment_r{}", r.r), r.ell.to_string(), num(r.t_ell), &r.value);
    }
    if let Some(ms) = &rep.martingale_stats {
        push("martingale_hbeta_sq", String::new(), String::new(), &ms.hbeta_sq);
        push(&format!("martingale_sup_r{}", ms.r), String::new(), String::new(), &ms.sup_r);
        for (n, m) in ms.norms_sq.iter().enumerate() {
            push("martingale_norm_sq", n.to_string(), num((n + 1) as f64 * rep.dt), m);
        }
        push("increment_mean", String::new(), String::new(), &ms.increment_mean);
    }
}

/// Ratio check of a per-level quantity against level 0.
fn bounded(name: &str, values: &[f64], factor: f64) -> Check {
    let base = values[0];
    let worst = values.iter().map(|v| v / base.max(f64::MIN_POSITIVE)).fold(0.0, f64::max);
    let ok = values.iter().all(|v| v.is_finite()) && (base == 0.0 && values.iter().all(|v| *v == 0.0) || worst <= factor);
    Check::new(name, ok, format!("largest ratio to level 0: {worst:.4} (limit {factor})"))
}

fn run(cfg: &ExperimentConfig, dir: &Path, hash: &str) -> Result<(Vec<Check>, Value), CliError> {
    let sts = cfg.space_time()?;
    let flux = cfg.flux_model()?;
    let noise = cfg.noise_model(sts[0].gd.mesh())?;
    let u0f = cfg.initial_function()?;
    let (seed, n, workers) = (cfg.run.master_seed, cfg.run.n_samples, cfg.run.workers);
    let mut est = Table::new(&["level", "estimator", "index", "t", "mean", "se", "n"]);
    let mut slopes = Table::new(&["level", "quantity", "r", "slope", "nominal"]);
    let mut paths = Table::new(&["level", "sample", "max_l2_sq", "grad_lp_p", "increment_sum", "identity_residual", "max_step_residual"]);
    let mut reports = Vec::with_capacity(sts.len());
    for (l, sgd) in sts.iter().enumerate() {
        let st = Stepper::new(sgd, &flux, &noise, cfg.solver)?;
        let u0 = initial_state(sgd, |x| u0f(x));
        let (rep, samples) = simulate_ensemble(&st, &u0, seed, n, workers, &cfg.estimators)?;
        let traj = st.run_trajectory(&u0, RunSpec::new(seed, 0))?;
        write_trajectory_csv(&traj, dir.join(format!("trajectory_level{l}_sample0.csv")))?;
        write_trajectory_sidecar(&traj, hash, dir.join(format!("trajectory_level{l}_sample0.json")))?;
        estimator_rows(&mut est, l, &rep);
        if let Some(s) = rep.translate_slope {
            slopes.push(vec![l.to_string(), "time_translate".into(), String::new(), num(s), num(1.0)]);
        }
        for (r, s) in &rep.dual_slopes {
            slopes.push(vec![l.to_string(), "dual_increment".into(), r.to_string(), num(*s), num(*r as f64 / 2.0)]);
        }
        for (i, s) in samples.iter().enumerate() {
            paths.push(vec![
                l.to_string(),
                i.to_string(),
                num(s.max_l2_sq),
                num(s.grad_lp_p),
                num(s.increment_sum),
                num(s.identity_residual),
                num(s.max_step_residual),
            ]);
        }
        reports.push(rep);
    }
    est.write(&dir.join("estimators.csv"))?;
    slopes.write(&dir.join("slopes.csv"))?;
    paths.write(&dir.join("paths.csv"))?;

    let ck = &cfg.checks;
    let mut checks = Vec::new();
    let worst_identity = reports.iter().map(|r| r.max_identity_residual).fold(0.0, f64::max);
    checks.push(Check::new(
        "energy_identity",
        worst_identity <= ck.identity_tol,
        format!("max residual {worst_identity:e} (tolerance {:e})", ck.identity_tol),
    ));
    if reports.len() >= 2 {
        let f = ck.bounded_factor;
        checks.push(bounded("energy_bounded", &reports.iter().map(|r| r.apriori_total.mean).collect::<Vec<_>>(), f));
        for (i, (q, _)) in reports[0].higher_moments.iter().enumerate() {
            let v: Vec<f64> = reports.iter().map(|r| r.higher_moments[i].1.mean).collect();
            checks.push(bounded(&format!("moment_{q}_bounded"), &v, f));
        }
        if reports[0].martingale_stats.is_some() {
            let v: Vec<f64> = reports.iter().map(|r| r.martingale_stats.as_ref().unwrap().hbeta_sq.mean).collect();
            checks.push(bounded("martingale_bounded", &v, f));
        }
    }
    if ck.slopes {
        for (l, r) in reports.iter().enumerate() {
            if let Some(s) = r.translate_slope {
                let need = ck.slope_fraction;
                checks.push(Check::new(&format!("translate_slope_level{l}"), s >= need, format!("slope {s:.4} (minimum {need})")));
            }
            for (rr, s) in &r.dual_slopes {
                let need = ck.slope_fraction * *rr as f64 / 2.0;
                checks.push(Check::new(&format!("dual_slope_r{rr}_level{l}"), *s >= need, format!("slope {s:.4} (minimum {need})")));
            }
        }
    }
    if ck.increment_mean {
        for (l, r) in reports.iter().enumerate() {
            if let Some(ms) = &r.martingale_stats {
                let z = ms.increment_mean.z_score(0.0);
                checks.push(Check::new(
                    &format!("increment_mean_level{l}"),
                    z.abs() <= ck.se_factor,
                    format!("mean {:e}, z = {z:.3}", ms.increment_mean.mean),
                ));
            }
        }
    }
    if ck.martingale_identity {
        let c = match cfg.noise.f0 {
            F0Choice::Constant => Some(cfg.noise.f0_constant),
            F0Choice::Zero => Some(0.0),
            _ => None,
        };
        match c {
            None => checks.push(Check::new("martingale_identity", false, "requires a constant multiplier")),
            Some(c) => {
                let mut worst: f64 = 0.0;
                for r in &reports {
                    if let Some(ms) = &r.martingale_stats {
                        for (k, m) in ms.norms_sq.iter().enumerate() {
                            let expected = (k + 1) as f64 * r.dt * c * c * noise.trace();
                            worst = worst.max(m.z_score(expected).abs());
                        }
                    }
                }
                checks.push(Check::new("martingale_identity", worst <= ck.se_factor, format!("largest |z| = {worst:.3}")));
            }
        }
    }
    Ok((checks, json!({ "levels": to_value(&reports) })))
}

type ScalarTest = (String, Box<dyn Fn(Point) -> f64>, Box<dyn Fn(Point) -> Point>);
type VectorTest = (String, bool, Box<dyn Fn(Point) -> Point>, Box<dyn Fn(Point) -> f64>);

/// Products of sines of the bounding box with their gradients.
fn scalar_tests(bbox: BoundingBox, dim: usize) -> Vec<ScalarTest> {
    [1.0, 2.0]
        .into_iter()
        .map(|k: f64| {
            let ext = bbox.extent();
            let arg = move |x: Point, d: usize| k * PI * (x[d] - bbox.min[d]) / ext[d];
            let f: Box<dyn Fn(Point) -> f64> = Box::new(move |x| (0..dim).map(|d| arg(x, d).sin()).product());
            let g: Box<dyn Fn(Point) -> Point> = Box::new(move |x| {
                let mut out = [0.0; 2];
                for (d, o) in out.iter_mut().enumerate().take(dim) {
                    *o = k * PI / ext[d] * arg(x, d).cos() * (0..dim).filter(|&e| e != d).map(|e| arg(x, e).sin()).product::<f64>();
                }
                out
            });
            (format!("sin{k}"), f, g)
        })
        .collect()
}

/// Vector fields with their divergences; the flag marks polynomial fields.
fn vector_tests(dim: usize) -> Vec<VectorTest> {
    if dim == 1 {
        vec![
            ("constant".into(), true, Box::new(|_| [1.0, 0.0]), Box::new(|_| 0.0)),
            ("quadratic".into(), true, Box::new(|x: Point| [x[0] * x[0], 0.0]), Box::new(|x: Point| 2.0 * x[0])),
            ("cubic".into(), true, Box::new(|x: Point| [x[0].powi(3), 0.0]), Box::new(|x: Point| 3.0 * x[0] * x[0])),
            ("cosine".into(), false, Box::new(|x: Point| [(PI * x[0]).cos(), 0.0]), Box::new(|x: Point| -PI * (PI * x[0]).sin())),
        ]
    } else {
        vec![
            ("constant".into(), true, Box::new(|_| [1.0, -2.0]), Box::new(|_| 0.0)),
            ("bilinear".into(), true, Box::new(|x: Point| [x[0] * x[1], x[1]]), Box::new(|x: Point| x[1] + 1.0)),
            ("cubic".into(), true, Box::new(|x: Point| [x[0].powi(3), -x[1] * x[1]]), Box::new(|x: Point| 3.0 * x[0] * x[0] - 2.0 * x[1])),
            ("sine".into(), false, Box::new(|x: Point| [(PI * x[1]).sin(), (PI * x[0]).sin()]), Box::new(|_| 0.0)),
        ]
    }
}

fn strictly_decreasing(v: &[f64]) -> bool {
    v.windows(2).all(|w| w[1] < w[0])
}

fn indicators(cfg: &ExperimentConfig, dir: &Path) -> Result<(Vec<Check>, Value), CliError> {
    let meshes = cfg.meshes()?;
    let bbox = meshes[0].bbox();
    let dim = meshes[0].dim();
    let (p, phat, opts) = (cfg.flux.p, cfg.indicators.phat, &cfg.indicators.irls);
    let scalars = scalar_tests(bbox, dim);
    let fields = vector_tests(dim);
    let mut table = Table::new(&["level", "h", "n_dofs", "indicator", "test", "value", "lower_bound"]);
    let nl = meshes.len();
    let mut s_vals = vec![vec![0.0; nl]; scalars.len()];
    let mut w_vals = vec![vec![0.0; nl]; fields.len()];
    let mut t_vals = vec![vec![0.0; nl]; cfg.indicators.shifts.len()];
    let mut c_vals = vec![0.0; nl];
    for (l, mesh) in meshes.iter().enumerate() {
        let gd = GradientDiscretisation::new(mesh, cfg.gd.kind)?;
        let h = mesh.max_diameter();
        let mut row = |ind: &str, test: &str, value: f64, lower: f64| {
            table.push(vec![l.to_string(), num(h), gd.n_dofs().to_string(), ind.into(), test.into(), num(value), num(lower)]);
        };
        for (i, (name, f, g)) in scalars.iter().enumerate() {
            let r = interpolate_best(&gd, f, g, p, phat, opts)?;
            s_vals[i][l] = r.value;
            row("S", name, r.value, r.value);
        }
        for (i, (name, _, f, d)) in fields.iter().enumerate() {
            let r = indicator_w(&gd, f, d, p, opts)?;
            w_vals[i][l] = r.value;
            row("W", name, r.value, r.lower_bound);
        }
        for (i, &s) in cfg.indicators.shifts.iter().enumerate() {
            let r = indicator_t(&gd, [s, 0.0], p, opts)?;
            t_vals[i][l] = r.value;
            row("T", &format!("{s}"), r.value, r.lower_bound);
        }
        let r = poincare_constant(&gd, p, opts)?;
        c_vals[l] = r.value;
        row("C", "", r.value, r.lower_bound);
    }
    table.write(&dir.join("indicators.csv"))?;

    let mut checks = Vec::new();
    if nl >= 2 {
        for (i, (name, _, _)) in scalars.iter().enumerate() {
            checks.push(Check::new(&format!("consistency_{name}_decreasing"), strictly_decreasing(&s_vals[i]), format!("{:?}", s_vals[i])));
        }
    }
    if cfg.gd.kind == GdKind::P1Conforming {
        let worst = fields.iter().zip(&w_vals).filter(|(f, _)| f.1).flat_map(|(_, v)| v.iter().copied()).fold(0.0, f64::max);
        checks.push(Check::new("conformity_vanishes", worst <= 1e-10, format!("largest polynomial-field defect {worst:e}")));
    } else if nl >= 2 {
        for (i, f) in fields.iter().enumerate().filter(|(_, f)| !f.1) {
            checks.push(Check::new(&format!("conformity_{}_decreasing", f.0), strictly_decreasing(&w_vals[i]), format!("{:?}", w_vals[i])));
        }
    }
    if !t_vals.is_empty() {
        let c0 = cfg.indicators.shifts.iter().zip(&t_vals).map(|(s, v)| v[0] / s.abs()).fold(0.0, f64::max);
        let limit = cfg.indicators.shift_slack * c0;
        let worst = cfg.indicators.shifts.iter().zip(&t_vals).flat_map(|(s, v)| v.iter().map(move |t| t / s.abs())).fold(0.0, f64::max);
        checks.push(Check::new("translate_linear_bound", worst <= limit, format!("max T/|xi| = {worst:.5} (limit {limit:.5})")));
    }
    let mut continuum = None;
    if p == 2.0 {
        let ext = bbox.extent();
        let lam: f64 = (0..dim).map(|d| (PI / ext[d]).powi(2)).sum();
        let c = 1.0 / lam.sqrt();
        continuum = Some(c);
        let dist: Vec<f64> = c_vals.iter().map(|v| (v - c).abs()).collect();
        let ok = dist.windows(2).all(|w| w[1] <= w[0] + 1e-12);
        checks.push(Check::new("poincare_approaches_continuum", ok, format!("distances {dist:?} to {c}")));
    }
    let data = json!({
        "consistency": s_vals,
        "conformity": w_vals,
        "translates": t_vals,
        "poincare": c_vals,
        "poincare_continuum": continuum,
    });
    Ok((checks, data))
}

fn probe(cfg: &ExperimentConfig, dir: &Path) -> Result<(Vec<Check>, Value), CliError> {
    let flux = cfg.flux_model()?;
    let fr = flux.probe_assumptions(&cfg.probe.flux)?;
    let gd = GradientDiscretisation::new(&cfg.base_mesh()?, cfg.gd.kind)?;
    let noise = cfg.noise_model(gd.mesh())?;
    let gr = noise.growth_check(&gd, &cfg.probe.growth)?;
    let mut t = Table::new(&["probe", "quantity", "value"]);
    let mut row = |a: &str, b: &str, v: String| t.push(vec![a.into(), b.into(), v]);
    row("flux", "samples", fr.n_samples.to_string());
    row("flux", "coercivity_violations", fr.coercivity_violations.to_string());
    row("flux", "growth_violations", fr.growth_violations.to_string());
    row("flux", "monotonicity_violations", fr.monotonicity_violations.to_string());
    row("flux", "tight_c1", num(fr.tight_c1));
    row("flux", "tight_c2", num(fr.tight_c2));
    row("flux", "declared_c1", num(fr.declared_c1));
    row("flux", "declared_c2", num(fr.declared_c2));
    row("noise", "trials", gr.trials.to_string());
    row("noise", "violations", gr.violations.to_string());
    row("noise", "worst_ratio", num(gr.worst_ratio));
    row("noise", "f1", num(gr.growth.f1));
    row("noise", "f2", num(gr.growth.f2));
    t.write(&dir.join("probe.csv"))?;
    let checks = vec![
        Check::new(
            "flux_assumptions",
            fr.pass,
            format!(
                "{} coercivity, {} growth, {} monotonicity violations in {} samples",
                fr.coercivity_violations, fr.growth_violations, fr.monotonicity_violations, fr.n_samples
            ),
        ),
        Check::new("noise_growth", gr.pass, format!("{} violations in {} trials, worst ratio {:.4}", gr.violations, gr.trials, gr.worst_ratio)),
    ];
    Ok((checks, json!({ "flux": to_value(&fr), "noise": to_value(&gr) })))
}

/// Deterministic loads for the dual-norm comparison.
fn dual_load(n: usize, trial: usize) -> DVector<f64> {
    DVector::from_fn(n, |i, _| (1.3 * (trial + 1) as f64 * (i + 1) as f64).sin() + 0.1 * trial as f64)
}

fn oracle(cfg: &ExperimentConfig, dir: &Path) -> Result<(Vec<Check>, Value), CliError> {
    let oc = &cfg.oracle;
    let ck = &cfg.checks;
    let mesh = Mesh::uniform_interval(2, 0.0, 1.0)?;
    let gd = GradientDiscretisation::new(&mesh, GdKind::P1Conforming)?;
    let sgd = SpaceTimeGd::new(gd, oc.t_final, oc.n_steps)?;
    let flux = sgdm_core::FluxModel::linear_diffusion();
    let noise = NoiseModel::sine(mesh.bbox(), 1, 1, cfg.noise.s, Multiplier::Constant(oc.f0_constant))?;
    let st = Stepper::new(&sgd, &flux, &noise, cfg.solver)?;
    let u0 = initial_state(&sgd, |x| (PI * x[0]).sin());
    let b: f64 = sgd.gd.quad_points().iter().map(|q| q.weight * q.eval(&DVector::from_element(1, 1.0)) * noise.basis().eval(0, q.x)).sum();
    let params = OuParams {
        stiffness: sgd.gd.stiffness_matrix().to_dense()[(0, 0)],
        mass: sgd.gd.mass_matrix().to_dense()[(0, 0)],
        q1: noise.q()[0],
        f0: oc.f0_constant,
        b,
        dt: sgd.dt(),
        n_steps: oc.n_steps,
        mean0: u0[0],
        var0: 0.0,
    };
    let exact = ou_oracle(&params)?;
    let paths = run_ensemble(cfg.run.workers, oc.n_samples, |s| {
        let t = st.run_trajectory(&u0, RunSpec::new(cfg.run.master_seed, s))?;
        Ok(t.u.iter().map(|u| u[0]).collect::<Vec<f64>>())
    })?;
    let mut table = Table::new(&["n", "t", "exact_mean", "mc_mean", "mean_se", "exact_var", "mc_var", "var_se"]);
    let mut worst_z: f64 = 0.0;
    for n in 0..=oc.n_steps {
        let xs: Vec<f64> = paths.iter().map(|p| p[n]).collect();
        let m = MeanSe::from_samples(&xs);
        let v = variance_with_se(&xs);
        if n > 0 {
            worst_z = worst_z.max(m.z_score(exact.mean[n]).abs()).max(v.z_score(exact.var[n]).abs());
        }
        table.push(vec![n.to_string(), num(sgd.time(n)), num(exact.mean[n]), num(m.mean), num(m.se), num(exact.var[n]), num(v.mean), num(v.se)]);
    }
    table.write(&dir.join("oracle.csv"))?;

    let small = Mesh::uniform_interval(6, 0.0, 1.0)?;
    let mut dual = Table::new(&["kind", "trial", "p", "value", "oracle", "gap"]);
    let mut worst_gap: f64 = 0.0;
    let opts = DualNormOptions { oracle_max_dofs: 20, ..cfg.estimators.dual };
    for kind in [GdKind::P1Conforming, GdKind::P1MassLumped] {
        let g = GradientDiscretisation::new(&small, kind)?;
        let dn = DualNorm::new(&g, cfg.flux.p, opts)?;
        for trial in 0..oc.dual_trials {
            let r = dn.of_dofs(&dual_load(g.n_dofs(), trial))?;
            let o = r.oracle.unwrap_or(f64::NAN);
            let gap = r.gap.unwrap_or(f64::NAN);
            worst_gap = worst_gap.max(gap.abs() / r.value.max(1.0));
            if gap.is_nan() {
                worst_gap = f64::INFINITY;
            }
            dual.push(vec![kind.to_string(), trial.to_string(), num(cfg.flux.p), num(r.value), num(o), num(gap)]);
        }
    }
    dual.write(&dir.join("dual_oracle.csv"))?;
    let checks = vec![
        Check::new("ou_moments", worst_z <= ck.se_factor, format!("largest |z| over n = {worst_z:.3} (limit {})", ck.se_factor)),
        Check::new("dual_norm_oracle", worst_gap <= oc.dual_tol, format!("largest relative gap {worst_gap:e} (tolerance {:e})", oc.dual_tol)),
    ];
    Ok((checks, json!({ "ou": to_value(&params), "ou_largest_z": worst_z, "dual_largest_gap": worst_gap })))
}

fn convergence(cfg: &ExperimentConfig, dir: &Path) -> Result<(Vec<Check>, Value), CliError> {
    if cfg.gd.levels < 2 {
        return Err(CliError::Config { key: "gd.levels".into(), message: "a convergence study needs at least 2 levels".into() });
    }
    let sts = cfg.space_time()?;
    let flux = cfg.flux_model()?;
    let noise = cfg.noise_model(sts[0].gd.mesh())?;
    let u0f = cfg.initial_function()?;
    let steppers = sts.iter().map(|s| Stepper::new(s, &flux, &noise, cfg.solver)).collect::<Result<Vec<_>, _>>()?;
    let heat = cfg.flux.kind == FluxChoice::Linear && noise.is_silent() && cfg.initial.kind == InitialChoice::Sine;
    let mut checks = Vec::new();
    let report = if heat {
        let mesh = sts[0].gd.mesh();
        let (bbox, dim, a) = (mesh.bbox(), mesh.dim(), cfg.initial.amplitude);
        let ext = bbox.extent();
        let lam: f64 = (0..dim).map(|d| (PI / ext[d]).powi(2)).sum();
        let mut errors = Vec::new();
        for st in &steppers {
            let sgd = st.sgd();
            let traj = st.run_deterministic(&initial_state(sgd, |x| u0f(x)))?;
            errors.push(max_l2_error(&sgd.gd, &traj, |t, x| a * (-lam * t).exp() * sine_product(bbox, dim, x))?);
        }
        let h: Vec<f64> = sts.iter().map(|s| s.gd.mesh().max_diameter()).collect();
        let dt: Vec<f64> = sts.iter().map(|s| s.dt()).collect();
        let nd: Vec<usize> = sts.iter().map(|s| s.gd.n_dofs()).collect();
        let rep = ConvergenceReport::from_errors(&h, &dt, &nd, &errors);
        let nominal = if cfg.time.level_factor >= 4 { 2.0 } else { 1.0 };
        let orders: Vec<f64> = rep.rows.iter().filter_map(|r| r.order).collect();
        let need = 0.9 * nominal;
        checks.push(Check::new("heat_order", orders.iter().all(|o| *o >= need), format!("orders {orders:?} (minimum {need})")));
        rep
    } else {
        let (rep, _) = coupled_refinement_study(&steppers, &*u0f, cfg.run.master_seed, cfg.run.n_samples, cfg.flux.p, cfg.run.workers)?;
        let d = rep.differences();
        if d.len() >= 2 {
            checks.push(Check::new("differences_decrease", rep.strictly_decreasing(), format!("{d:?}")));
        } else {
            checks.push(Check::new("differences_finite", d.iter().all(|x| x.is_finite()), format!("{d:?}")));
        }
        rep
    };
    let mut t = Table::new(&["level", "h", "dt", "n_dofs", "error", "order", "difference_mean", "difference_se"]);
    let opt = |x: Option<f64>| x.map(num).unwrap_or_default();
    for r in &report.rows {
        t.push(vec![
            r.level.to_string(),
            num(r.h),
            num(r.dt),
            r.n_dofs.to_string(),
            opt(r.error),
            opt(r.order),
            opt(r.difference.map(|d| d.mean)),
            opt(r.difference.map(|d| d.se)),
        ]);
    }
    t.write(&dir.join("convergence.csv"))?;
    Ok((checks, to_value(&report)))
}
