//! Per-path summaries and their Monte Carlo aggregation.

use serde::{Deserialize, Serialize};

use crate::analysis::dual::{DualNorm, DualNormOptions};
use crate::analysis::ensemble::run_ensemble;
use crate::analysis::path::PiecewiseConstantPath;
use crate::analysis::stats::{loglog_slope, MeanSe};
use crate::error::{invalid, Result};
use crate::gd::{DiscreteVector, GradientDiscretisation};
use crate::geometry::Point;
use crate::scheme::{RunSpec, Stepper, Trajectory};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimatorConfig {
    pub energy: bool,
    pub ells: Vec<usize>,
    /// Exponents `r` of the dual-norm increments (powers of two); empty
    /// disables the dual-norm estimator.
    pub dual_r: Vec<u32>,
    pub beta: f64,
    /// Moment indices `q`; the estimator is `max_n ||Pi u^n||^{2^q}`.
    pub moments: Vec<u32>,
    pub martingale: bool,
    pub martingale_r: u32,
    pub dual: DualNormOptions,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        EstimatorConfig {
            energy: true,
            ells: vec![1, 2, 4, 8],
            dual_r: vec![2],
            beta: 0.25,
            moments: vec![1, 2, 3],
            martingale: true,
            martingale_r: 2,
            dual: DualNormOptions { oracle_max_dofs: 0, ..DualNormOptions::default() },
        }
    }
}

impl EstimatorConfig {
    pub fn validate(&self, n_steps: usize) -> Result<()> {
        for &l in &self.ells {
            if l == 0 || l >= n_steps {
                return Err(invalid(format!("estimators.ells: lag {l} outside 1..{}", n_steps.saturating_sub(1))));
            }
        }
        for &r in self.dual_r.iter().chain(std::iter::once(&self.martingale_r)) {
            if !r.is_power_of_two() {
                return Err(invalid(format!("estimators: exponent r = {r} must be a power of two")));
            }
        }
        if !(self.beta > 0.0 && self.beta < 0.5) {
            return Err(invalid(format!("estimators.beta must lie in (0, 1/2) (got {})", self.beta)));
        }
        if self.moments.iter().any(|&q| q == 0 || q > 16) {
            return Err(invalid("estimators.moments entries must lie in 1..=16"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MartingaleSample {
    /// `||M||^2_{L^2(0,T;L^2)} + |M|^2_{W^{beta,2}(0,T;L^2)}`.
    pub hbeta_sq: f64,
    /// `max_n ||M^(n)||^r`.
    pub sup_r: f64,
    /// `||M^(n)||^2`, `n = 0..N-1`.
    pub norms_sq: Vec<f64>,
    /// `<M^(n) - M^(n-1), phi>`, `n = 0..N-1`.
    pub pairings: Vec<f64>,
}

/// Everything the estimators need from one path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathSample {
    pub max_l2_sq: f64,
    pub grad_lp_p: f64,
    pub increment_sum: f64,
    pub moments: Vec<f64>,
    pub translates: Vec<f64>,
    /// `dual_increments[i][j]` for `r = dual_r[i]`, `ell = ells[j]`.
    pub dual_increments: Vec<Vec<f64>>,
    pub martingale: Option<MartingaleSample>,
    pub identity_residual: f64,
    pub max_step_residual: f64,
}

/// `max_n ||Pi u^n||^2`, `sum_n dt ||grad u^{n+1}||_p^p`,
/// `sum_n ||Pi(u^{n+1} - u^n)||^2`.
pub fn path_energy(gd: &GradientDiscretisation, p: f64, traj: &Trajectory) -> (f64, f64, f64) {
    let mass = gd.mass_matrix();
    let max_l2_sq = traj.u.iter().map(|u| mass.bilinear(u, u)).fold(0.0, f64::max);
    let grad = traj.u[1..].iter().map(|u| traj.dt * gd.grad_lp_pow(u, p)).sum();
    let inc = traj
        .u
        .windows(2)
        .map(|w| {
            let d = &w[1] - &w[0];
            mass.bilinear(&d, &d)
        })
        .sum();
    (max_l2_sq, grad, inc)
}

fn check_lag(ell: usize, n: usize) -> Result<()> {
    if ell == 0 || ell >= n {
        return Err(invalid(format!("lag {ell} outside 1..{}", n.saturating_sub(1))));
    }
    Ok(())
}

/// `dt sum_{n=1}^{N-ell} ||Pi(u^{n+ell} - u^n)||^2`.
pub fn path_translate(gd: &GradientDiscretisation, traj: &Trajectory, ell: usize) -> Result<f64> {
    let n = traj.n_steps();
    check_lag(ell, n)?;
    let mass = gd.mass_matrix();
    Ok(traj.dt
        * (1..=n - ell)
            .map(|k| {
                let d = &traj.u[k + ell] - &traj.u[k];
                mass.bilinear(&d, &d)
            })
            .sum::<f64>())
}

/// Dual norms `|Pi(u^{n+ell} - u^n)|_{*,D}` for `n = 1..N-ell`.
pub fn path_dual_increments(dn: &DualNorm<'_>, traj: &Trajectory, ell: usize) -> Result<Vec<f64>> {
    let n = traj.n_steps();
    check_lag(ell, n)?;
    (1..=n - ell)
        .map(|k| {
            let d: DiscreteVector = &traj.u[k + ell] - &traj.u[k];
            Ok(dn.of_dofs(&d)?.value)
        })
        .collect()
}

pub fn path_martingale(gd: &GradientDiscretisation, traj: &Trajectory, beta: f64, r: u32, phi: &[f64]) -> Result<MartingaleSample> {
    let qp = gd.quad_points();
    if phi.len() != qp.len() {
        return Err(invalid("test function must be given at every quadrature point"));
    }
    let weights: Vec<f64> = qp.iter().map(|q| q.weight).collect();
    let norm_sq = |f: &[f64]| -> f64 { weights.iter().zip(f).map(|(w, g)| w * g * g).sum() };
    let norms_sq: Vec<f64> = traj.m_partial.iter().map(|m| norm_sq(m)).collect();
    let path = PiecewiseConstantPath::from_fields(&weights, traj.dt, &traj.m_partial)?;
    let hbeta_sq = path.l2_in_time(&norms_sq)? + path.fractional_norm(beta, 2.0)?;
    let sup_r = norms_sq.iter().map(|s| s.sqrt().powi(r as i32)).fold(0.0, f64::max);
    let pairings = (0..traj.n_steps())
        .map(|n| {
            let term = traj.noise_term(n);
            weights.iter().zip(&term).zip(phi).map(|((w, g), f)| w * g * f).sum()
        })
        .collect();
    Ok(MartingaleSample { hbeta_sq, sup_r, norms_sq, pairings })
}

/// `prod_d sin(pi (x_d - min_d) / len_d)` at the quadrature points.
pub fn default_test_field(gd: &GradientDiscretisation) -> Vec<f64> {
    let bbox = gd.mesh().bbox();
    let ext = bbox.extent();
    let dim = gd.dim();
    let f = |x: Point| -> f64 { (0..dim).map(|d| (std::f64::consts::PI * (x[d] - bbox.min[d]) / ext[d]).sin()).product() };
    gd.quad_points().iter().map(|q| f(q.x)).collect()
}

/// Summary of one trajectory.
pub fn summarize_path(stepper: &Stepper<'_>, traj: &Trajectory, cfg: &EstimatorConfig, dn: Option<&DualNorm<'_>>, phi: &[f64]) -> Result<PathSample> {
    let gd = &stepper.sgd().gd;
    let p = stepper.flux().p();
    let (max_l2_sq, grad_lp_p, increment_sum) = path_energy(gd, p, traj);
    let moments = cfg.moments.iter().map(|&q| max_l2_sq.powf(2f64.powi(q as i32 - 1))).collect();
    let translates = cfg.ells.iter().map(|&l| path_translate(gd, traj, l)).collect::<Result<Vec<_>>>()?;
    let mut dual_increments = Vec::new();
    if !cfg.dual_r.is_empty() {
        let dn = dn.ok_or_else(|| invalid("dual-norm estimator needs a dual-norm evaluator"))?;
        let per_ell = cfg.ells.iter().map(|&l| path_dual_increments(dn, traj, l)).collect::<Result<Vec<_>>>()?;
        for &r in &cfg.dual_r {
            dual_increments.push(per_ell.iter().map(|v| v.iter().map(|x| x.powi(r as i32)).sum::<f64>() / v.len() as f64).collect());
        }
    }
    let martingale = if cfg.martingale { Some(path_martingale(gd, traj, cfg.beta, cfg.martingale_r, phi)?) } else { None };
    Ok(PathSample {
        max_l2_sq,
        grad_lp_p,
        increment_sum,
        moments,
        translates,
        dual_increments,
        martingale,
        identity_residual: stepper.energy_identity_residual(traj),
        max_step_residual: traj.residuals.iter().copied().fold(0.0, f64::max),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LagRow {
    pub ell: usize,
    pub t_ell: f64,
    pub value: MeanSe,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualRow {
    pub ell: usize,
    pub r: u32,
    pub t_ell: f64,
    pub value: MeanSe,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MartingaleStats {
    pub beta: f64,
    pub r: u32,
    pub hbeta_sq: MeanSe,
    pub sup_r: MeanSe,
    /// `E ||M^(n)||^2`, `n = 0..N-1`.
    pub norms_sq: Vec<MeanSe>,
    /// Per-sample average over `n` of the increment pairings.
    pub increment_mean: MeanSe,
    /// Largest `|z|` of the per-step increment means.
    pub max_step_z: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorReport {
    pub n_samples: usize,
    pub p: f64,
    pub dt: f64,
    pub alpha: f64,
    pub beta: f64,
    pub energy_max_l2_sq: MeanSe,
    pub grad_lp_p: MeanSe,
    pub increment_sum: MeanSe,
    /// Sum of the three energy terms, per sample.
    pub apriori_total: MeanSe,
    pub higher_moments: Vec<(u32, MeanSe)>,
    pub translate_table: Vec<LagRow>,
    pub translate_slope: Option<f64>,
    pub dual_increment_table: Vec<DualRow>,
    /// `(r, slope)` of the dual increments against `t_ell`.
    pub dual_slopes: Vec<(u32, f64)>,
    pub martingale_stats: Option<MartingaleStats>,
    pub max_identity_residual: f64,
    pub max_step_residual: f64,
}

fn column(samples: &[PathSample], f: impl Fn(&PathSample) -> f64) -> MeanSe {
    let xs: Vec<f64> = samples.iter().map(f).collect();
    MeanSe::from_samples(&xs)
}

fn slope_of(rows: impl Iterator<Item = (f64, f64)>) -> Option<f64> {
    let (x, y): (Vec<f64>, Vec<f64>) = rows.unzip();
    loglog_slope(&x, &y).ok()
}

/// Aggregates path summaries (in the given order).
pub fn aggregate(samples: &[PathSample], cfg: &EstimatorConfig, p: f64, dt: f64) -> Result<EstimatorReport> {
    if samples.is_empty() {
        return Err(invalid("no sample paths"));
    }
    let t_ell = |l: usize| l as f64 * dt;
    let translate_table: Vec<LagRow> =
        cfg.ells.iter().enumerate().map(|(j, &l)| LagRow { ell: l, t_ell: t_ell(l), value: column(samples, |s| s.translates[j]) }).collect();
    let mut dual_increment_table = Vec::new();
    let mut dual_slopes = Vec::new();
    for (i, &r) in cfg.dual_r.iter().enumerate() {
        let rows: Vec<DualRow> = cfg
            .ells
            .iter()
            .enumerate()
            .map(|(j, &l)| DualRow { ell: l, r, t_ell: t_ell(l), value: column(samples, |s| s.dual_increments[i][j]) })
            .collect();
        if let Some(s) = slope_of(rows.iter().map(|r| (r.t_ell, r.value.mean))) {
            dual_slopes.push((r, s));
        }
        dual_increment_table.extend(rows);
    }
    let martingale_stats = if cfg.martingale {
        let ms: Vec<&MartingaleSample> = samples.iter().map(|s| s.martingale.as_ref().ok_or_else(|| invalid("sample lacks martingale data"))).collect::<Result<_>>()?;
        let n = ms[0].norms_sq.len();
        let per_step = |f: &dyn Fn(&MartingaleSample) -> f64| -> MeanSe { MeanSe::from_samples(&ms.iter().map(|m| f(m)).collect::<Vec<_>>()) };
        let max_step_z = (0..n).map(|k| per_step(&|m| m.pairings[k]).z_score(0.0).abs()).fold(0.0, f64::max);
        Some(MartingaleStats {
            beta: cfg.beta,
            r: cfg.martingale_r,
            hbeta_sq: per_step(&|m| m.hbeta_sq),
            sup_r: per_step(&|m| m.sup_r),
            norms_sq: (0..n).map(|k| per_step(&|m| m.norms_sq[k])).collect(),
            increment_mean: per_step(&|m| m.pairings.iter().sum::<f64>() / n as f64),
            max_step_z,
        })
    } else {
        None
    };
    Ok(EstimatorReport {
        n_samples: samples.len(),
        p,
        dt,
        alpha: (1.0 / p).min(0.5),
        beta: cfg.beta,
        energy_max_l2_sq: column(samples, |s| s.max_l2_sq),
        grad_lp_p: column(samples, |s| s.grad_lp_p),
        increment_sum: column(samples, |s| s.increment_sum),
        apriori_total: column(samples, |s| s.max_l2_sq + s.grad_lp_p + s.increment_sum),
        higher_moments: cfg.moments.iter().enumerate().map(|(i, &q)| (q, column(samples, |s| s.moments[i]))).collect(),
        translate_slope: slope_of(translate_table.iter().map(|r| (r.t_ell, r.value.mean))),
        translate_table,
        dual_increment_table,
        dual_slopes,
        martingale_stats,
        max_identity_residual: samples.iter().map(|s| s.identity_residual).fold(0.0, f64::max),
        max_step_residual: samples.iter().map(|s| s.max_step_residual).fold(0.0, f64::max),
    })
}

/// Runs `n_samples` paths of `stepper` from `I_D u0` and summarises each.
pub fn simulate_ensemble(
    stepper: &Stepper<'_>,
    u0: &DiscreteVector,
    master_seed: u64,
    n_samples: u64,
    workers: usize,
    cfg: &EstimatorConfig,
) -> Result<(EstimatorReport, Vec<PathSample>)> {
    if n_samples == 0 {
        return Err(invalid("n_samples must be at least 1"));
    }
    let sgd = stepper.sgd();
    cfg.validate(sgd.n_steps())?;
    let dn = if cfg.dual_r.is_empty() { None } else { Some(DualNorm::new(&sgd.gd, stepper.flux().p(), cfg.dual)?) };
    let phi = default_test_field(&sgd.gd);
    let samples = run_ensemble(workers, n_samples, |s| {
        let traj = stepper.run_trajectory(u0, RunSpec::new(master_seed, s))?;
        summarize_path(stepper, &traj, cfg, dn.as_ref(), &phi)
    })?;
    let report = aggregate(&samples, cfg, stepper.flux().p(), sgd.dt())?;
    Ok((report, samples))
}

/// Energy estimators over stored paths.
pub fn energy_estimators(gd: &GradientDiscretisation, p: f64, paths: &[Trajectory]) -> Result<[MeanSe; 3]> {
    if paths.is_empty() {
        return Err(invalid("no sample paths"));
    }
    let e: Vec<(f64, f64, f64)> = paths.iter().map(|t| path_energy(gd, p, t)).collect();
    Ok([
        MeanSe::from_samples(&e.iter().map(|x| x.0).collect::<Vec<_>>()),
        MeanSe::from_samples(&e.iter().map(|x| x.1).collect::<Vec<_>>()),
        MeanSe::from_samples(&e.iter().map(|x| x.2).collect::<Vec<_>>()),
    ])
}

/// Time-translate table over stored paths.
pub fn time_translate_estimator(gd: &GradientDiscretisation, paths: &[Trajectory], ells: &[usize]) -> Result<Vec<LagRow>> {
    if paths.is_empty() {
        return Err(invalid("no sample paths"));
    }
    ells.iter()
        .map(|&l| {
            let xs = paths.iter().map(|t| path_translate(gd, t, l)).collect::<Result<Vec<_>>>()?;
            Ok(LagRow { ell: l, t_ell: l as f64 * paths[0].dt, value: MeanSe::from_samples(&xs) })
        })
        .collect()
}

/// Dual-norm increment table over stored paths, with its log-log slope.
pub fn dual_increment_estimator(dn: &DualNorm<'_>, paths: &[Trajectory], ells: &[usize], r: u32) -> Result<(Vec<DualRow>, Option<f64>)> {
    if !r.is_power_of_two() {
        return Err(invalid(format!("exponent r = {r} must be a power of two")));
    }
    if paths.is_empty() {
        return Err(invalid("no sample paths"));
    }
    let rows = ells
        .iter()
        .map(|&l| {
            let xs = paths
                .iter()
                .map(|t| {
                    let v = path_dual_increments(dn, t, l)?;
                    Ok(v.iter().map(|x| x.powi(r as i32)).sum::<f64>() / v.len() as f64)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(DualRow { ell: l, r, t_ell: l as f64 * paths[0].dt, value: MeanSe::from_samples(&xs) })
        })
        .collect::<Result<Vec<_>>>()?;
    let slope = slope_of(rows.iter().map(|r| (r.t_ell, r.value.mean)));
    Ok((rows, slope))
}

/// Martingale statistics over stored paths.
pub fn martingale_stats(gd: &GradientDiscretisation, paths: &[Trajectory], beta: f64, r: u32, phi: &[f64]) -> Result<MartingaleStats> {
    if paths.is_empty() {
        return Err(invalid("no sample paths"));
    }
    let samples = paths
        .iter()
        .map(|t| {
            Ok(PathSample {
                max_l2_sq: 0.0,
                grad_lp_p: 0.0,
                increment_sum: 0.0,
                moments: vec![],
                translates: vec![],
                dual_increments: vec![],
                martingale: Some(path_martingale(gd, t, beta, r, phi)?),
                identity_residual: 0.0,
                max_step_residual: 0.0,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let cfg = EstimatorConfig { ells: vec![], dual_r: vec![], moments: vec![], beta, martingale_r: r, ..EstimatorConfig::default() };
    Ok(aggregate(&samples, &cfg, 2.0, paths[0].dt)?.martingale_stats.expect("martingale enabled"))
}
