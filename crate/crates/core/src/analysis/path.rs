//! Paths that are piecewise constant on a uniform time grid:
//! `g(t) = g_n` for `t` in `(n dt, (n+1) dt]`, `n = 0..N-1`.

use nalgebra::DMatrix;

use crate::error::{invalid, Result};
use crate::gd::{DiscreteVector, GradientDiscretisation};

/// A piecewise-constant path known through its pairwise distances
/// `d(n, m) = ||g_n - g_m||`.
#[derive(Debug, Clone, PartialEq)]
pub struct PiecewiseConstantPath {
    dt: f64,
    dist: DMatrix<f64>,
}

impl PiecewiseConstantPath {
    pub fn from_distances(dt: f64, dist: DMatrix<f64>) -> Result<Self> {
        if !(dt > 0.0) || !dt.is_finite() {
            return Err(invalid(format!("time step must be positive (got {dt})")));
        }
        if dist.nrows() != dist.ncols() || dist.nrows() == 0 {
            return Err(invalid("distance matrix must be square and non-empty"));
        }
        Ok(PiecewiseConstantPath { dt, dist })
    }

    /// Values `Pi_D v_n` measured in `L^2`.
    pub fn from_dof_vectors(gd: &GradientDiscretisation, dt: f64, values: &[DiscreteVector]) -> Result<Self> {
        for v in values {
            gd.check_len(v)?;
        }
        let mass = gd.mass_matrix();
        let n = values.len();
        let mut dist = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in i + 1..n {
                let d = &values[i] - &values[j];
                let v = mass.bilinear(&d, &d).max(0.0).sqrt();
                dist[(i, j)] = v;
                dist[(j, i)] = v;
            }
        }
        Self::from_distances(dt, dist)
    }

    /// Values given at quadrature points with `weights`, measured in `L^2`.
    pub fn from_fields(weights: &[f64], dt: f64, values: &[Vec<f64>]) -> Result<Self> {
        if values.iter().any(|v| v.len() != weights.len()) {
            return Err(invalid("field length differs from the number of quadrature weights"));
        }
        let n = values.len();
        let mut dist = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in i + 1..n {
                let s: f64 = weights.iter().zip(&values[i]).zip(&values[j]).map(|((w, a), b)| w * (a - b) * (a - b)).sum();
                dist[(i, j)] = s.sqrt();
                dist[(j, i)] = s.sqrt();
            }
        }
        Self::from_distances(dt, dist)
    }

    pub fn n_intervals(&self) -> usize {
        self.dist.nrows()
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn t_final(&self) -> f64 {
        self.dt * self.n_intervals() as f64
    }

    pub fn distance(&self, n: usize, m: usize) -> f64 {
        self.dist[(n, m)]
    }

    /// The path multiplied by `lambda`.
    pub fn scaled(&self, lambda: f64) -> Self {
        PiecewiseConstantPath { dt: self.dt, dist: self.dist.scale(lambda.abs()) }
    }

    /// `sum_{n=0}^{N-1-ell} d(n, n+ell)^q` (zero when `ell >= N`).
    pub fn lag_sum(&self, ell: usize, q: f64) -> f64 {
        let n = self.n_intervals();
        if ell == 0 || ell >= n {
            return 0.0;
        }
        (0..n - ell).map(|i| self.dist[(i, i + ell)].powf(q)).sum()
    }

    /// `phi(rho) = ∫_0^{T-rho} ||g(t+rho) - g(t)||^q dt` in closed form:
    /// with `rho = ell dt + eps`, `0 <= eps < dt`,
    /// `phi = (dt - eps) A_ell + eps A_{ell+1}` where `A_ell` is the lag sum.
    pub fn translate_pow(&self, rho: f64, q: f64) -> Result<f64> {
        let t = self.t_final();
        if !(rho > 0.0 && rho < t) {
            return Err(invalid(format!("shift must lie in (0, {t}) (got {rho})")));
        }
        let ell = ((rho / self.dt).floor() as usize).min(self.n_intervals() - 1);
        let eps = (rho - ell as f64 * self.dt).clamp(0.0, self.dt);
        Ok((self.dt - eps) * self.lag_sum(ell, q) + eps * self.lag_sum(ell + 1, q))
    }

    /// `∫_0^{T-rho} ||g(t+rho) - g(t)||^2 dt`.
    pub fn continuous_translate(&self, rho: f64) -> Result<f64> {
        self.translate_pow(rho, 2.0)
    }

    /// `∫_0^T phi(rho) rho^{-(1+beta q)} drho` with `phi` the `q`-th power
    /// translate function, which is piecewise linear in `rho` with nodes at
    /// multiples of `dt`.
    pub fn fractional_norm(&self, beta: f64, q: f64) -> Result<f64> {
        if !(beta > 0.0 && beta < 0.5) {
            return Err(invalid(format!("beta must lie in (0, 1/2) (got {beta})")));
        }
        if !(q >= 1.0) || !q.is_finite() {
            return Err(invalid(format!("exponent must be at least 1 (got {q})")));
        }
        if beta * q >= 1.0 {
            return Err(invalid(format!("beta * q must be below 1 for a finite integral (got {})", beta * q)));
        }
        let n = self.n_intervals();
        let dt = self.dt;
        let gamma = 1.0 + beta * q;
        let (e0, e1) = (1.0 - gamma, 2.0 - gamma);
        let phi: Vec<f64> = (0..=n).map(|l| dt * self.lag_sum(l, q)).collect();
        let mut total = phi[1] * dt.powf(e1) / e1 / dt;
        for l in 1..n {
            let (a, b) = (l as f64 * dt, (l + 1) as f64 * dt);
            let i0 = (b.powf(e0) - a.powf(e0)) / e0;
            let i1 = (b.powf(e1) - a.powf(e1)) / e1;
            total += (phi[l] * (b * i0 - i1) + phi[l + 1] * (i1 - a * i0)) / dt;
        }
        Ok(total)
    }

    /// `∫_0^T ||g(t)||^2 dt` given the norms of the values.
    pub fn l2_in_time(&self, norms_sq: &[f64]) -> Result<f64> {
        if norms_sq.len() != self.n_intervals() {
            return Err(invalid("one norm per interval expected"));
        }
        Ok(self.dt * norms_sq.iter().sum::<f64>())
    }
}
