//! Sample statistics with a fixed summation order.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Sample mean with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanSe {
    pub mean: f64,
    pub se: f64,
    pub n: usize,
}

impl MeanSe {
    pub fn from_samples(xs: &[f64]) -> Self {
        let n = xs.len();
        if n == 0 {
            return MeanSe { mean: f64::NAN, se: f64::NAN, n };
        }
        // anchored at the first sample so that equal samples reproduce it exactly
        let a = xs[0];
        let mean = a + xs.iter().map(|x| x - a).sum::<f64>() / n as f64;
        if n == 1 {
            return MeanSe { mean, se: 0.0, n };
        }
        let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64;
        MeanSe { mean, se: (var / n as f64).sqrt(), n }
    }

    /// `|mean - target| <= k * se`.
    pub fn within(&self, target: f64, k: f64) -> bool {
        (self.mean - target).abs() <= k * self.se
    }

    /// Distance to `target` in standard errors.
    pub fn z_score(&self, target: f64) -> f64 {
        let d = self.mean - target;
        if d == 0.0 {
            0.0
        } else {
            d / self.se
        }
    }
}

/// Unbiased sample variance and its standard error
/// `sqrt((m4 - s^4 (n-3)/(n-1)) / n)`.
pub fn variance_with_se(xs: &[f64]) -> MeanSe {
    let n = xs.len();
    if n < 4 {
        return MeanSe { mean: f64::NAN, se: f64::NAN, n };
    }
    let nf = n as f64;
    let mean = xs.iter().sum::<f64>() / nf;
    let m2 = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / nf;
    let m4 = xs.iter().map(|x| (x - mean).powi(4)).sum::<f64>() / nf;
    let var = m2 * nf / (nf - 1.0);
    let se = ((m4 - var * var * (nf - 3.0) / (nf - 1.0)) / nf).max(0.0).sqrt();
    MeanSe { mean: var, se, n }
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(invalid("slope fit needs at least two matching points"));
    }
    if x.iter().chain(y).any(|&v| !(v > 0.0) || !v.is_finite()) {
        return Err(invalid("slope fit needs positive finite values"));
    }
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx) * (a - mx)).sum();
    if sxx == 0.0 {
        return Err(invalid("slope fit needs distinct abscissae"));
    }
    Ok(sxy / sxx)
}

/// `log2(e_k / e_{k+1}) / log2(h_k / h_{k+1})` for successive levels.
pub fn empirical_orders(h: &[f64], err: &[f64]) -> Vec<f64> {
    h.windows(2).zip(err.windows(2)).map(|(h, e)| (e[0] / e[1]).ln() / (h[0] / h[1]).ln()).collect()
}
