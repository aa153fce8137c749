//! Leray-Lions flux functions `a(x, y)`, where `x` is the value of the
//! unknown and `y` its gradient.

use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::geometry::Point;

pub type Matrix2 = [[f64; 2]; 2];

/// User-supplied flux `(x, y) -> a(x, y)`.
pub type FluxFn = Arc<dyn Fn(f64, Point) -> Point + Send + Sync>;

#[derive(Clone)]
pub enum FluxKind {
    /// `|y|^(p-2) y`.
    PLaplace,
    /// `(1 + |y|)^(p-2) y`.
    RegularizedPLaplace,
    /// `y`.
    LinearDiffusion,
    Custom(FluxFn),
}

impl fmt::Debug for FluxKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FluxKind {
    pub fn name(&self) -> &'static str {
        match self {
            FluxKind::PLaplace => "p-laplace",
            FluxKind::RegularizedPLaplace => "regularized-p-laplace",
            FluxKind::LinearDiffusion => "linear-diffusion",
            FluxKind::Custom(_) => "custom",
        }
    }
}

#[derive(Debug, Clone)]
pub struct FluxModel {
    kind: FluxKind,
    p: f64,
    c1: f64,
    c2: f64,
    newton_epsilon: f64,
}

fn default_epsilon(p: f64) -> f64 {
    if p < 2.0 {
        1e-6
    } else {
        0.0
    }
}

impl FluxModel {
    pub fn new(kind: FluxKind, p: f64, c1: f64, c2: f64, newton_epsilon: f64) -> Result<Self> {
        if !(p > 1.0) || !p.is_finite() {
            return Err(invalid(format!("flux exponent p must lie in (1, inf) (got {p})")));
        }
        if !(c1 > 0.0 && c2 > 0.0) || !c1.is_finite() || !c2.is_finite() {
            return Err(invalid(format!("structure constants must be positive (c1 = {c1}, c2 = {c2})")));
        }
        if !(newton_epsilon >= 0.0) || !newton_epsilon.is_finite() {
            return Err(invalid(format!("newton epsilon must be >= 0 (got {newton_epsilon})")));
        }
        if matches!(kind, FluxKind::LinearDiffusion) && p != 2.0 {
            return Err(invalid(format!("linear diffusion requires p = 2 (got {p})")));
        }
        Ok(FluxModel { kind, p, c1, c2, newton_epsilon })
    }

    pub fn p_laplace(p: f64) -> Result<Self> {
        Self::new(FluxKind::PLaplace, p, 1.0, 1.0, default_epsilon(p))
    }

    /// Structure constants `c1 = 1` (valid for `p >= 2`) and
    /// `c2 = 2^max(p-2, 0)`.
    pub fn regularized_p_laplace(p: f64) -> Result<Self> {
        let c1 = if p >= 2.0 { 1.0 } else { 2f64.powf(p - 2.0) };
        Self::new(FluxKind::RegularizedPLaplace, p, c1, 2f64.powf((p - 2.0).max(0.0)), default_epsilon(p))
    }

    pub fn linear_diffusion() -> Self {
        FluxModel { kind: FluxKind::LinearDiffusion, p: 2.0, c1: 1.0, c2: 1.0, newton_epsilon: 0.0 }
    }

    pub fn custom(f: FluxFn, p: f64, c1: f64, c2: f64) -> Result<Self> {
        Self::new(FluxKind::Custom(f), p, c1, c2, default_epsilon(p))
    }

    pub fn with_epsilon(mut self, eps: f64) -> Result<Self> {
        if !(eps >= 0.0) || !eps.is_finite() {
            return Err(invalid(format!("newton epsilon must be >= 0 (got {eps})")));
        }
        self.newton_epsilon = eps;
        Ok(self)
    }

    pub fn with_constants(self, c1: f64, c2: f64) -> Result<Self> {
        Self::new(self.kind, self.p, c1, c2, self.newton_epsilon)
    }

    pub fn kind(&self) -> &FluxKind {
        &self.kind
    }

    pub fn p(&self) -> f64 {
        self.p
    }

    /// Conjugate exponent `p' = p / (p - 1)`.
    pub fn p_conjugate(&self) -> f64 {
        self.p / (self.p - 1.0)
    }

    /// `max(2, p')`.
    pub fn p_hat(&self) -> f64 {
        self.p_conjugate().max(2.0)
    }

    pub fn c1(&self) -> f64 {
        self.c1
    }

    pub fn c2(&self) -> f64 {
        self.c2
    }

    pub fn newton_epsilon(&self) -> f64 {
        self.newton_epsilon
    }

    pub fn is_linear(&self) -> bool {
        matches!(self.kind, FluxKind::LinearDiffusion)
            || (matches!(self.kind, FluxKind::PLaplace | FluxKind::RegularizedPLaplace) && self.p == 2.0)
    }

    /// Whether `a` ignores its first argument.
    pub fn is_autonomous(&self) -> bool {
        !matches!(self.kind, FluxKind::Custom(_))
    }

    /// `a(x, y)`; rejects non-finite input.
    pub fn eval_flux(&self, x: f64, y: Point) -> Result<Point> {
        if !x.is_finite() || !y[0].is_finite() || !y[1].is_finite() {
            return Err(Error::NonFinite(format!("flux argument ({x}, [{}, {}])", y[0], y[1])));
        }
        Ok(self.flux(x, y))
    }

    #[inline]
    pub fn flux(&self, x: f64, y: Point) -> Point {
        match &self.kind {
            FluxKind::LinearDiffusion => y,
            FluxKind::PLaplace => {
                let r2 = y[0] * y[0] + y[1] * y[1];
                if r2 == 0.0 {
                    return [0.0, 0.0];
                }
                let s = r2.powf(0.5 * (self.p - 2.0));
                [s * y[0], s * y[1]]
            }
            FluxKind::RegularizedPLaplace => {
                let r = (y[0] * y[0] + y[1] * y[1]).sqrt();
                let s = (1.0 + r).powf(self.p - 2.0);
                [s * y[0], s * y[1]]
            }
            FluxKind::Custom(f) => f(x, y),
        }
    }

    /// Jacobian in `y` of the smoothed flux used by Newton's method. For the
    /// p-Laplacian this is the derivative of `(eps^2 + |y|^2)^((p-2)/2) y`.
    pub fn eval_flux_jacobian(&self, x: f64, y: Point) -> Matrix2 {
        match &self.kind {
            FluxKind::LinearDiffusion => IDENTITY,
            FluxKind::PLaplace => {
                if self.p == 2.0 {
                    return IDENTITY;
                }
                let e2 = self.newton_epsilon * self.newton_epsilon;
                let r2 = e2 + y[0] * y[0] + y[1] * y[1];
                if r2 == 0.0 {
                    return if self.p > 2.0 { [[0.0; 2]; 2] } else { scaled(f64::MAX.sqrt()) };
                }
                let s = r2.powf(0.5 * (self.p - 2.0));
                let t = (self.p - 2.0) * s / r2;
                rank_one(s, t, y)
            }
            FluxKind::RegularizedPLaplace => {
                let r = (y[0] * y[0] + y[1] * y[1]).sqrt();
                let s = (1.0 + r).powf(self.p - 2.0);
                if r == 0.0 {
                    return scaled(s);
                }
                let t = (self.p - 2.0) * (1.0 + r).powf(self.p - 3.0) / r;
                rank_one(s, t, y)
            }
            FluxKind::Custom(f) => {
                let mut j = [[0.0; 2]; 2];
                for k in 0..2 {
                    let h = 1e-7 * y[k].abs().max(1.0);
                    let mut yp = y;
                    let mut ym = y;
                    yp[k] += h;
                    ym[k] -= h;
                    let (ap, am) = (f(x, yp), f(x, ym));
                    for i in 0..2 {
                        j[i][k] = (ap[i] - am[i]) / (2.0 * h);
                    }
                }
                j
            }
        }
    }

    /// Frozen-coefficient weight `w(y)` with `a(y) ≈ w(y) y`, used by the
    /// fixed-point fallback.
    pub fn secant_weight(&self, x: f64, y: Point) -> f64 {
        match &self.kind {
            FluxKind::LinearDiffusion => 1.0,
            FluxKind::PLaplace => {
                let e2 = self.newton_epsilon.max(1e-12).powi(2);
                (e2 + y[0] * y[0] + y[1] * y[1]).powf(0.5 * (self.p - 2.0))
            }
            FluxKind::RegularizedPLaplace => {
                (1.0 + (y[0] * y[0] + y[1] * y[1]).sqrt()).powf(self.p - 2.0)
            }
            FluxKind::Custom(f) => {
                let r2 = y[0] * y[0] + y[1] * y[1];
                if r2 < 1e-24 {
                    let j = self.eval_flux_jacobian(x, y);
                    return (0.5 * (j[0][0] + j[1][1])).max(1e-12);
                }
                let a = f(x, y);
                ((a[0] * y[0] + a[1] * y[1]) / r2).max(1e-12)
            }
        }
    }

    /// Randomised check of coercivity (a1), growth (a2) and monotonicity (a3).
    pub fn probe_assumptions(&self, cfg: &ProbeConfig) -> Result<ProbeReport> {
        if cfg.n_samples == 0 {
            return Err(invalid("probe needs at least one sample"));
        }
        if cfg.dim != 1 && cfg.dim != 2 {
            return Err(invalid(format!("probe dimension must be 1 or 2 (got {})", cfg.dim)));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let p = self.p;
        let mut report = ProbeReport {
            n_samples: cfg.n_samples,
            coercivity_violations: 0,
            growth_violations: 0,
            monotonicity_violations: 0,
            tight_c1: f64::INFINITY,
            tight_c2: 0.0,
            declared_c1: self.c1,
            declared_c2: self.c2,
            pass: false,
        };
        let slack = |m: f64| 1e-12 * m.max(1.0);
        let vec = |rng: &mut ChaCha8Rng| -> Point {
            let g = cfg.grad_range;
            let a = rng.random_range(-g..=g);
            let b = if cfg.dim == 2 { rng.random_range(-g..=g) } else { 0.0 };
            [a, b]
        };
        for _ in 0..cfg.n_samples {
            let x = rng.random_range(-cfg.value_range..=cfg.value_range);
            let y = vec(&mut rng);
            let z = vec(&mut rng);
            let ay = self.eval_flux(x, y)?;
            let az = self.eval_flux(x, z)?;
            let ny = (y[0] * y[0] + y[1] * y[1]).sqrt();

            let lhs = ay[0] * y[0] + ay[1] * y[1];
            let bound = self.c1 * ny.powf(p);
            if lhs < bound - slack(bound.abs().max(lhs.abs())) {
                report.coercivity_violations += 1;
            }
            if ny > 0.0 {
                report.tight_c1 = report.tight_c1.min(lhs / ny.powf(p));
            }

            let na = (ay[0] * ay[0] + ay[1] * ay[1]).sqrt();
            let cap = self.c2 * (1.0 + ny.powf(p - 1.0));
            if na > cap + slack(cap) {
                report.growth_violations += 1;
            }
            report.tight_c2 = report.tight_c2.max(na / (1.0 + ny.powf(p - 1.0)));

            let d = [ay[0] - az[0], ay[1] - az[1]];
            let mono = d[0] * (y[0] - z[0]) + d[1] * (y[1] - z[1]);
            let scale = (d[0].abs() + d[1].abs()) * ((y[0] - z[0]).abs() + (y[1] - z[1]).abs());
            if mono < -slack(scale) {
                report.monotonicity_violations += 1;
            }
        }
        if !report.tight_c1.is_finite() {
            report.tight_c1 = 0.0;
        }
        report.pass = report.coercivity_violations == 0
            && report.growth_violations == 0
            && report.monotonicity_violations == 0;
        Ok(report)
    }
}

const IDENTITY: Matrix2 = [[1.0, 0.0], [0.0, 1.0]];

fn scaled(s: f64) -> Matrix2 {
    [[s, 0.0], [0.0, s]]
}

/// `s I + t y y^T`.
fn rank_one(s: f64, t: f64, y: Point) -> Matrix2 {
    [
        [s + t * y[0] * y[0], t * y[0] * y[1]],
        [t * y[1] * y[0], s + t * y[1] * y[1]],
    ]
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub n_samples: usize,
    pub value_range: f64,
    pub grad_range: f64,
    pub dim: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig { n_samples: 100_000, value_range: 10.0, grad_range: 3.0, dim: 2, seed: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub n_samples: usize,
    pub coercivity_violations: usize,
    pub growth_violations: usize,
    pub monotonicity_violations: usize,
    /// `min a(x,y).y / |y|^p` over the samples.
    pub tight_c1: f64,
    /// `max |a(x,y)| / (1 + |y|^(p-1))` over the samples.
    pub tight_c2: f64,
    pub declared_c1: f64,
    pub declared_c2: f64,
    pub pass: bool,
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{any, prop_assert, proptest};

    fn probe(n: usize, grad_range: f64) -> ProbeConfig {
        ProbeConfig { n_samples: n, grad_range, ..ProbeConfig::default() }
    }

    #[test]
    fn flux_examples() {
        let lin = FluxModel::linear_diffusion();
        assert_eq!(lin.eval_flux(0.0, [3.0, -1.0]).unwrap(), [3.0, -1.0]);
        let p4 = FluxModel::p_laplace(4.0).unwrap();
        assert_eq!(p4.eval_flux(0.0, [1.0, 0.0]).unwrap(), [1.0, 0.0]);
        let p3 = FluxModel::p_laplace(3.0).unwrap();
        assert_eq!(p3.eval_flux(0.0, [2.0, 0.0]).unwrap(), [4.0, 0.0]);
        assert_eq!(p3.eval_flux(0.0, [0.0, 0.0]).unwrap(), [0.0, 0.0]);
        let p15 = FluxModel::p_laplace(1.5).unwrap();
        assert_eq!(p15.eval_flux(0.0, [0.0, 0.0]).unwrap(), [0.0, 0.0]);
        assert!(p3.eval_flux(f64::NAN, [0.0, 0.0]).is_err());
        assert!(p3.eval_flux(0.0, [f64::NAN, 0.0]).is_err());
    }

    #[test]
    fn invalid_models_are_rejected() {
        assert!(FluxModel::p_laplace(1.0).is_err());
        assert!(FluxModel::p_laplace(f64::NAN).is_err());
        assert!(FluxModel::p_laplace(3.0).unwrap().with_constants(0.0, 1.0).is_err());
        assert!(FluxModel::new(FluxKind::LinearDiffusion, 3.0, 1.0, 1.0, 0.0).is_err());
        assert!(FluxModel::p_laplace(3.0).unwrap().with_epsilon(-1.0).is_err());
    }

    #[test]
    fn exponents() {
        let m = FluxModel::p_laplace(3.0).unwrap();
        assert!((m.p_conjugate() - 1.5).abs() < 1e-15);
        assert_eq!(m.p_hat(), 2.0);
        let m = FluxModel::p_laplace(1.5).unwrap();
        assert!((m.p_hat() - 3.0).abs() < 1e-14);
        assert_eq!(m.newton_epsilon(), 1e-6);
        assert_eq!(FluxModel::p_laplace(3.0).unwrap().newton_epsilon(), 0.0);
    }

    #[test]
    fn jacobian_examples() {
        let id = [[1.0, 0.0], [0.0, 1.0]];
        assert_eq!(FluxModel::linear_diffusion().eval_flux_jacobian(0.0, [0.3, 2.0]), id);
        assert_eq!(FluxModel::p_laplace(2.0).unwrap().eval_flux_jacobian(0.0, [0.3, 2.0]), id);
    }

    fn finite_difference(m: &FluxModel, y: Point) -> Matrix2 {
        let mut j = [[0.0; 2]; 2];
        let h = 1e-6;
        for k in 0..2 {
            let mut yp = y;
            let mut ym = y;
            yp[k] += h;
            ym[k] -= h;
            let (a, b) = (m.flux(0.0, yp), m.flux(0.0, ym));
            for i in 0..2 {
                j[i][k] = (a[i] - b[i]) / (2.0 * h);
            }
        }
        j
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let m = FluxModel::p_laplace(3.0).unwrap();
        let j = m.eval_flux_jacobian(0.0, [1.0, 0.0]);
        let fd = finite_difference(&m, [1.0, 0.0]);
        for i in 0..2 {
            for k in 0..2 {
                assert!((j[i][k] - fd[i][k]).abs() < 1e-6);
            }
        }
        for m in [
            FluxModel::p_laplace(4.5).unwrap(),
            FluxModel::p_laplace(1.6).unwrap().with_epsilon(0.0).unwrap(),
            FluxModel::regularized_p_laplace(2.5).unwrap(),
            FluxModel::regularized_p_laplace(1.5).unwrap(),
        ] {
            for y in [[0.7, -1.2], [-2.0, 0.1], [0.3, 0.0]] {
                let j = m.eval_flux_jacobian(0.0, y);
                let fd = finite_difference(&m, y);
                for i in 0..2 {
                    for k in 0..2 {
                        assert!((j[i][k] - fd[i][k]).abs() < 1e-6, "{m:?} {y:?}");
                    }
                }
            }
        }
    }

    #[test]
    fn custom_jacobian_by_differences() {
        let f: FluxFn = Arc::new(|x, y| [(1.0 + x * x) * y[0] + y[1], y[0] + 2.0 * y[1]]);
        let m = FluxModel::custom(f, 2.0, 1.0, 3.0).unwrap();
        let j = m.eval_flux_jacobian(1.0, [0.5, 0.5]);
        assert!((j[0][0] - 2.0).abs() < 1e-7 && (j[0][1] - 1.0).abs() < 1e-7);
        assert!((j[1][0] - 1.0).abs() < 1e-7 && (j[1][1] - 2.0).abs() < 1e-7);
        assert!(!m.is_autonomous());
    }

    #[test]
    fn p_laplace_probes_are_clean() {
        for p in [1.3, 2.0, 3.0, 4.5] {
            let r = FluxModel::p_laplace(p).unwrap().probe_assumptions(&probe(100_000, 3.0)).unwrap();
            assert!(r.pass, "{r:?}");
            assert!(r.tight_c1 >= 1.0 - 1e-9);
        }
    }

    #[test]
    fn anti_monotone_flux_is_detected() {
        let f: FluxFn = Arc::new(|_, y| [-y[0], -y[1]]);
        let r = FluxModel::custom(f, 2.0, 1.0, 1.0).unwrap().probe_assumptions(&probe(1000, 3.0)).unwrap();
        assert!(r.monotonicity_violations > 0);
        assert!(!r.pass);
    }

    #[test]
    fn regularized_growth_constant() {
        let unit = FluxModel::regularized_p_laplace(2.5).unwrap().with_constants(1.0, 1.0).unwrap();
        let r = unit.probe_assumptions(&probe(100_000, 3.0)).unwrap();
        assert!(r.pass, "{r:?}");
        // with c2 = 1 the growth bound eventually fails for large gradients
        let r = unit.probe_assumptions(&probe(100_000, 30.0)).unwrap();
        assert!(r.growth_violations > 0 && r.tight_c2 > 1.0);
        let default = FluxModel::regularized_p_laplace(2.5).unwrap();
        let r = default.probe_assumptions(&probe(100_000, 1000.0)).unwrap();
        assert!(r.pass, "{r:?}");
    }

    #[test]
    fn continuity_of_p_laplace() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for p in [2.0, 3.0, 1.5] {
            let m = FluxModel::p_laplace(p).unwrap().with_epsilon(0.0).unwrap();
            for _ in 0..10_000 {
                let y: Point = [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)];
                if p < 2.0 && (y[0] * y[0] + y[1] * y[1]).sqrt() < 0.1 {
                    continue;
                }
                let th: f64 = rng.random_range(0.0..std::f64::consts::TAU);
                let d = [1e-8 * th.cos(), 1e-8 * th.sin()];
                let a = m.flux(0.0, y);
                let b = m.flux(0.0, [y[0] + d[0], y[1] + d[1]]);
                let j = m.eval_flux_jacobian(0.0, y);
                let jn = j.iter().flatten().map(|v| v * v).sum::<f64>().sqrt();
                let diff = ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
                assert!(diff <= 10.0 * jn * 1e-8 + 1e-10);
            }
        }
    }

    proptest! {
        #[test]
        fn jacobian_is_symmetric(p in 1.2f64..6.0, y0 in -5.0f64..5.0, y1 in -5.0f64..5.0, reg in any::<bool>()) {
            let m = if reg { FluxModel::regularized_p_laplace(p).unwrap() } else { FluxModel::p_laplace(p).unwrap() };
            let j = m.eval_flux_jacobian(0.0, [y0, y1]);
            prop_assert!((j[0][1] - j[1][0]).abs() <= 1e-12 * (1.0 + j[0][1].abs()));
        }

        #[test]
        fn builtin_fluxes_are_monotone(p in 1.2f64..6.0, y0 in -5.0f64..5.0, y1 in -5.0f64..5.0,
                                       z0 in -5.0f64..5.0, z1 in -5.0f64..5.0, reg in any::<bool>()) {
            let m = if reg { FluxModel::regularized_p_laplace(p).unwrap() } else { FluxModel::p_laplace(p).unwrap() };
            let a = m.flux(0.0, [y0, y1]);
            let b = m.flux(0.0, [z0, z1]);
            let mono = (a[0] - b[0]) * (y0 - z0) + (a[1] - b[1]) * (y1 - z1);
            prop_assert!(mono >= -1e-12 * (1.0 + a[0].abs() + a[1].abs() + b[0].abs() + b[1].abs()) * 10.0);
        }
    }
}
