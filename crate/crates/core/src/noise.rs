//! Truncated Karhunen-Loève Q-Wiener increments and the Nemytskii noise
//! operator `[f(v) k](x) = f0(v(x)) k(x)`.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::gd::{DiscreteVector, GradientDiscretisation};
use crate::geometry::Point;
use crate::mesh::BoundingBox;

pub type ScalarFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;
pub type FieldFn = Arc<dyn Fn(Point) -> f64 + Send + Sync>;

/// Scalar multiplier `f0` of the Nemytskii operator.
#[derive(Clone)]
pub enum Multiplier {
    Zero,
    Constant(f64),
    Identity,
    Tanh,
    Square,
    /// Piecewise-linear interpolation of sorted nodes, constant beyond them.
    Table { xs: Vec<f64>, ys: Vec<f64> },
    /// User function with a declared bound on `|f0|` (`None` if unbounded).
    Custom { f: ScalarFn, bound: Option<f64> },
}

impl fmt::Debug for Multiplier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Multiplier::Zero => f.write_str("zero"),
            Multiplier::Constant(c) => write!(f, "constant({c})"),
            Multiplier::Identity => f.write_str("identity"),
            Multiplier::Tanh => f.write_str("tanh"),
            Multiplier::Square => f.write_str("square"),
            Multiplier::Table { xs, .. } => write!(f, "table({} nodes)", xs.len()),
            Multiplier::Custom { bound, .. } => write!(f, "custom(bound {bound:?})"),
        }
    }
}

impl Multiplier {
    pub fn table(xs: Vec<f64>, ys: Vec<f64>) -> Result<Self> {
        if xs.is_empty() || xs.len() != ys.len() {
            return Err(invalid("table needs matching, non-empty node and value lists"));
        }
        if xs.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(invalid("table nodes must be strictly increasing"));
        }
        if xs.iter().chain(&ys).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("table entry".into()));
        }
        Ok(Multiplier::Table { xs, ys })
    }

    #[inline]
    pub fn eval(&self, s: f64) -> f64 {
        match self {
            Multiplier::Zero => 0.0,
            Multiplier::Constant(c) => *c,
            Multiplier::Identity => s,
            Multiplier::Tanh => s.tanh(),
            Multiplier::Square => s * s,
            Multiplier::Table { xs, ys } => {
                let k = xs.partition_point(|&x| x <= s);
                if k == 0 {
                    ys[0]
                } else if k == xs.len() {
                    ys[k - 1]
                } else {
                    let t = (s - xs[k - 1]) / (xs[k] - xs[k - 1]);
                    ys[k - 1] + t * (ys[k] - ys[k - 1])
                }
            }
            Multiplier::Custom { f, .. } => f(s),
        }
    }

    /// `sup |f0|`, or `None` when unbounded.
    pub fn bound(&self) -> Option<f64> {
        match self {
            Multiplier::Zero => Some(0.0),
            Multiplier::Constant(c) => Some(c.abs()),
            Multiplier::Identity | Multiplier::Square => None,
            Multiplier::Tanh => Some(1.0),
            Multiplier::Table { ys, .. } => Some(ys.iter().fold(0.0, |m, y| m.max(y.abs()))),
            Multiplier::Custom { bound, .. } => *bound,
        }
    }

    pub fn is_zero(&self) -> bool {
        match self {
            Multiplier::Zero => true,
            Multiplier::Constant(c) => *c == 0.0,
            Multiplier::Table { ys, .. } => ys.iter().all(|&y| y == 0.0),
            _ => false,
        }
    }
}

/// Spatial modes `e_k` of the expansion.
#[derive(Clone)]
pub enum SpectralBasis {
    /// Dirichlet sine modes of the bounding box, orthonormal in `L^2` of the
    /// box. Two-dimensional modes are ordered by increasing
    /// `(k1/Lx)^2 + (k2/Ly)^2`, ties broken by `k1`.
    Sine { bbox: BoundingBox, dim: usize, modes: Vec<[usize; 2]> },
    Custom { functions: Vec<FieldFn>, sup: Vec<f64> },
}

impl fmt::Debug for SpectralBasis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SpectralBasis::Sine { dim, modes, .. } => write!(f, "sine(dim {dim}, {} modes)", modes.len()),
            SpectralBasis::Custom { functions, .. } => write!(f, "custom({} modes)", functions.len()),
        }
    }
}

impl SpectralBasis {
    pub fn sine(bbox: BoundingBox, dim: usize, k_max: usize) -> Result<Self> {
        let ext = bbox.extent();
        if !(ext[0] > 0.0) || (dim == 2 && !(ext[1] > 0.0)) {
            return Err(invalid("sine basis needs a non-degenerate bounding box"));
        }
        let modes = match dim {
            1 => (1..=k_max).map(|k| [k, 0]).collect(),
            2 => {
                let mut all = Vec::with_capacity(k_max * k_max);
                for k1 in 1..=k_max {
                    for k2 in 1..=k_max {
                        all.push([k1, k2]);
                    }
                }
                let key = |m: &[usize; 2]| (m[0] as f64 / ext[0]).powi(2) + (m[1] as f64 / ext[1]).powi(2);
                all.sort_by(|a, b| key(a).total_cmp(&key(b)).then(a[0].cmp(&b[0])));
                all.truncate(k_max);
                all
            }
            _ => return Err(invalid(format!("dimension must be 1 or 2 (got {dim})"))),
        };
        Ok(SpectralBasis::Sine { bbox, dim, modes })
    }

    pub fn len(&self) -> usize {
        match self {
            SpectralBasis::Sine { modes, .. } => modes.len(),
            SpectralBasis::Custom { functions, .. } => functions.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn eval(&self, k: usize, x: Point) -> f64 {
        match self {
            SpectralBasis::Sine { bbox, dim, modes } => {
                let ext = bbox.extent();
                let m = modes[k];
                let sx = (m[0] as f64 * PI * (x[0] - bbox.min[0]) / ext[0]).sin();
                if *dim == 1 {
                    (2.0 / ext[0]).sqrt() * sx
                } else {
                    let sy = (m[1] as f64 * PI * (x[1] - bbox.min[1]) / ext[1]).sin();
                    2.0 / (ext[0] * ext[1]).sqrt() * sx * sy
                }
            }
            SpectralBasis::Custom { functions, .. } => functions[k](x),
        }
    }

    /// `sup |e_k|`.
    pub fn sup(&self, k: usize) -> f64 {
        match self {
            SpectralBasis::Sine { bbox, dim, .. } => {
                let ext = bbox.extent();
                if *dim == 1 {
                    (2.0 / ext[0]).sqrt()
                } else {
                    2.0 / (ext[0] * ext[1]).sqrt()
                }
            }
            SpectralBasis::Custom { sup, .. } => sup[k],
        }
    }
}

/// Constants of the growth bound `||f(v)||^2 <= F1 ||v||^2 + F2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GrowthConstants {
    pub f1: f64,
    pub f2: f64,
}

#[derive(Debug, Clone)]
pub struct NoiseModel {
    q: Vec<f64>,
    basis: SpectralBasis,
    f0: Multiplier,
    growth: GrowthConstants,
}

impl NoiseModel {
    /// Growth constants default to `F1 = 0, F2 = sup|f0|^2` for bounded
    /// multipliers and `F1 = sum_k sup|e_k|^2, F2 = 0` otherwise (exact for
    /// `|f0(s)| <= |s|`).
    pub fn new(q: Vec<f64>, basis: SpectralBasis, f0: Multiplier) -> Result<Self> {
        if q.len() != basis.len() {
            return Err(Error::DimensionMismatch { expected: basis.len(), got: q.len() });
        }
        if q.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(invalid("spectral coefficients must be finite and non-negative"));
        }
        let growth = match f0.bound() {
            Some(b) => GrowthConstants { f1: 0.0, f2: b * b },
            None => GrowthConstants { f1: (0..basis.len()).map(|k| basis.sup(k).powi(2)).sum(), f2: 0.0 },
        };
        Ok(NoiseModel { q, basis, f0, growth })
    }

    /// Sine basis with `q_k = k^(-s)`.
    pub fn sine(bbox: BoundingBox, dim: usize, k_max: usize, s: f64, f0: Multiplier) -> Result<Self> {
        let q = (1..=k_max).map(|k| (k as f64).powf(-s)).collect();
        Self::new(q, SpectralBasis::sine(bbox, dim, k_max)?, f0)
    }

    pub fn with_growth(mut self, growth: GrowthConstants) -> Result<Self> {
        if !(growth.f1 >= 0.0 && growth.f2 >= 0.0) {
            return Err(invalid("growth constants must be >= 0"));
        }
        self.growth = growth;
        Ok(self)
    }

    pub fn with_q(mut self, q: Vec<f64>) -> Result<Self> {
        if q.len() != self.q.len() {
            return Err(Error::DimensionMismatch { expected: self.q.len(), got: q.len() });
        }
        self.q = q;
        Ok(self)
    }

    pub fn k_max(&self) -> usize {
        self.q.len()
    }

    pub fn q(&self) -> &[f64] {
        &self.q
    }

    pub fn basis(&self) -> &SpectralBasis {
        &self.basis
    }

    pub fn f0(&self) -> &Multiplier {
        &self.f0
    }

    pub fn growth(&self) -> GrowthConstants {
        self.growth
    }

    /// `sum_k q_k^2`.
    pub fn trace(&self) -> f64 {
        self.q.iter().map(|q| q * q).sum()
    }

    pub fn is_silent(&self) -> bool {
        self.f0.is_zero() || self.q.iter().all(|&q| q == 0.0)
    }

    /// `q_k sqrt(dt) xi_k` with independent standard normals `xi_k`.
    pub fn sample_increment(&self, stream: RngStream, dt: f64) -> Result<NoiseIncrement> {
        if !(dt > 0.0) || !dt.is_finite() {
            return Err(invalid(format!("time step must be positive (got {dt})")));
        }
        let mut rng = stream.rng();
        let sd = dt.sqrt();
        let coeffs = self.q.iter().map(|&q| q * sd * rng.sample::<f64, _>(StandardNormal)).collect();
        Ok(NoiseIncrement { coeffs, dt })
    }

    /// Increment over coarse step `n` formed by summing the `substeps` fine
    /// increments of streams `(sample, n * substeps + i)`.
    pub fn sample_coupled(
        &self,
        master_seed: u64,
        sample: u64,
        n: u64,
        substeps: u64,
        dt_fine: f64,
    ) -> Result<NoiseIncrement> {
        if substeps == 0 {
            return Err(invalid("substeps must be positive"));
        }
        let mut total = NoiseIncrement { coeffs: vec![0.0; self.k_max()], dt: 0.0 };
        for i in 0..substeps {
            let inc = self.sample_increment(RngStream::new(master_seed, sample, n * substeps + i), dt_fine)?;
            for (t, c) in total.coeffs.iter_mut().zip(&inc.coeffs) {
                *t += c;
            }
            total.dt += dt_fine;
        }
        Ok(total)
    }

    /// Noise field `x -> f0(Pi_D v(x)) sum_k coeffs_k e_k(x)` at the
    /// quadrature points of `gd`.
    pub fn apply_noise(&self, gd: &GradientDiscretisation, v: &DiscreteVector, inc: &NoiseIncrement) -> Result<Vec<f64>> {
        NoiseOnGd::new(self, gd).apply(v, inc)
    }

    /// Randomised check of `||f(v) k||^2 <= F1 ||Pi_D v||^2 + F2` for unit
    /// `k` in the span of the modes (unit in the quadrature `L^2` norm).
    pub fn growth_check(&self, gd: &GradientDiscretisation, cfg: &GrowthCheckConfig) -> Result<GrowthReport> {
        let on = NoiseOnGd::new(self, gd);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let n = gd.n_dofs();
        let qp = gd.quad_points();
        let mut violations = 0;
        let mut worst: f64 = 0.0;
        let lmax = cfg.max_amplitude.max(1e-2).log10();
        for _ in 0..cfg.trials {
            let amp = 10f64.powf(rng.random_range(-2.0..=lmax));
            let v = DVector::from_fn(n, |_, _| amp * rng.sample::<f64, _>(StandardNormal));
            let c = DVector::from_fn(self.k_max(), |_, _| rng.sample::<f64, _>(StandardNormal));
            let k: Vec<f64> = (0..qp.len()).map(|i| on.modes.row(i).dot(&c.transpose())).collect();
            let kk: f64 = qp.iter().zip(&k).map(|(q, kv)| q.weight * kv * kv).sum();
            if !(kk > 0.0) {
                continue;
            }
            let lhs: f64 = qp
                .iter()
                .zip(&k)
                .map(|(q, kv)| q.weight * (self.f0.eval(q.eval(&v)) * kv).powi(2))
                .sum::<f64>()
                / kk;
            let vv = gd.mass_matrix().bilinear(&v, &v);
            let rhs = self.growth.f1 * vv + self.growth.f2;
            if lhs > rhs + 1e-10 {
                violations += 1;
            }
            if rhs > 0.0 {
                worst = worst.max(lhs / rhs);
            } else if lhs > 0.0 {
                worst = f64::INFINITY;
            }
        }
        Ok(GrowthReport { trials: cfg.trials, violations, worst_ratio: worst, growth: self.growth, pass: violations == 0 })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GrowthCheckConfig {
    pub trials: usize,
    /// Upper end of the log-uniform amplitude sweep of the random `v`.
    pub max_amplitude: f64,
    pub seed: u64,
}

impl Default for GrowthCheckConfig {
    fn default() -> Self {
        GrowthCheckConfig { trials: 10_000, max_amplitude: 100.0, seed: 7 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrowthReport {
    pub trials: usize,
    pub violations: usize,
    /// `max lhs / rhs` over the trials.
    pub worst_ratio: f64,
    pub growth: GrowthConstants,
    pub pass: bool,
}

/// Sampled Wiener increment `q_k (W_k(t + dt) - W_k(t))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseIncrement {
    pub coeffs: Vec<f64>,
    pub dt: f64,
}

impl NoiseIncrement {
    pub fn zero(k_max: usize, dt: f64) -> Self {
        NoiseIncrement { coeffs: vec![0.0; k_max], dt }
    }

    /// `sum_k coeffs_k^2`, the squared `K`-norm.
    pub fn norm_sq(&self) -> f64 {
        self.coeffs.iter().map(|c| c * c).sum()
    }
}

/// Identifier of an independent random stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RngStream {
    pub master_seed: u64,
    pub sample: u64,
    pub time: u64,
}

impl RngStream {
    pub fn new(master_seed: u64, sample: u64, time: u64) -> Self {
        RngStream { master_seed, sample, time }
    }

    /// ChaCha generator keyed by the master seed, with the stream number
    /// `(sample << 32) | time`.
    pub fn rng(&self) -> ChaCha8Rng {
        debug_assert!(self.sample < 1 << 32 && self.time < 1 << 32);
        let mut rng = ChaCha8Rng::seed_from_u64(self.master_seed);
        rng.set_stream((self.sample << 32) | (self.time & 0xffff_ffff));
        rng
    }
}

/// Modes evaluated at the quadrature points of a discretisation.
#[derive(Debug, Clone)]
pub struct NoiseOnGd<'a> {
    noise: &'a NoiseModel,
    gd: &'a GradientDiscretisation,
    /// `modes[(q, k)] = e_k(x_q)`.
    modes: DMatrix<f64>,
}

impl<'a> NoiseOnGd<'a> {
    pub fn new(noise: &'a NoiseModel, gd: &'a GradientDiscretisation) -> Self {
        let qp = gd.quad_points();
        let modes = DMatrix::from_fn(qp.len(), noise.k_max(), |i, k| noise.basis.eval(k, qp[i].x));
        NoiseOnGd { noise, gd, modes }
    }

    pub fn noise(&self) -> &NoiseModel {
        self.noise
    }

    /// `sum_k coeffs_k e_k` at the quadrature points.
    pub fn increment_field(&self, inc: &NoiseIncrement) -> Result<Vec<f64>> {
        if inc.coeffs.len() != self.noise.k_max() {
            return Err(Error::DimensionMismatch { expected: self.noise.k_max(), got: inc.coeffs.len() });
        }
        let c = DVector::from_column_slice(&inc.coeffs);
        Ok((&self.modes * c).data.into())
    }

    pub fn apply(&self, v: &DiscreteVector, inc: &NoiseIncrement) -> Result<Vec<f64>> {
        self.gd.check_len(v)?;
        let field = self.increment_field(inc)?;
        Ok(self
            .gd
            .quad_points()
            .iter()
            .zip(field)
            .map(|(q, w)| if w == 0.0 { 0.0 } else { self.noise.f0.eval(q.eval(v)) * w })
            .collect())
    }

    /// `b_i = <f(Pi_D v) dW, Pi_D e_i>` from a field at the quadrature points.
    pub fn load_vector(&self, field: &[f64]) -> DiscreteVector {
        let mut b = self.gd.zeros();
        for (q, &g) in self.gd.quad_points().iter().zip(field) {
            if g != 0.0 {
                for &(i, bi) in &q.basis {
                    b[i] += q.weight * g * bi;
                }
            }
        }
        b
    }

    /// Gram matrix of the modes under the quadrature.
    pub fn gram(&self) -> DMatrix<f64> {
        let w = DVector::from_iterator(self.modes.nrows(), self.gd.quad_points().iter().map(|q| q.weight));
        let weighted = DMatrix::from_fn(self.modes.nrows(), self.modes.ncols(), |i, k| w[i] * self.modes[(i, k)]);
        self.modes.transpose() * weighted
    }
}
