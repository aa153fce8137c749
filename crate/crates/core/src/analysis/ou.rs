//! Exact moments of the scheme on a single-DOF space with linear flux and
//! additive one-mode noise, where each step is the Gaussian recursion
//! `u^{n+1} = (m u^n + f0 q1 b dW) / (m + dt k)`.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OuParams {
    /// `k = <grad e_1, grad e_1>`.
    pub stiffness: f64,
    /// `m = <Pi e_1, Pi e_1>`.
    pub mass: f64,
    pub q1: f64,
    pub f0: f64,
    /// `b = <e_1 mode, Pi e_1>`.
    pub b: f64,
    pub dt: f64,
    pub n_steps: usize,
    pub mean0: f64,
    pub var0: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OuMoments {
    /// `mean[n]`, `n = 0..=N`.
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

pub fn ou_oracle(p: &OuParams) -> Result<OuMoments> {
    if !(p.mass > 0.0) || !(p.stiffness >= 0.0) || !(p.dt > 0.0) || !(p.var0 >= 0.0) {
        return Err(invalid("mass and time step must be positive, stiffness and variance nonnegative"));
    }
    let den = p.mass + p.dt * p.stiffness;
    let a = p.mass / den;
    let s = p.f0 * p.q1 * p.b / den;
    let mut mean = Vec::with_capacity(p.n_steps + 1);
    let mut var = Vec::with_capacity(p.n_steps + 1);
    mean.push(p.mean0);
    var.push(p.var0);
    for n in 0..p.n_steps {
        mean.push(mean[n] * a);
        var.push(var[n] * a * a + s * s * p.dt);
    }
    Ok(OuMoments { mean, var })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analysis::stats::{variance_with_se, MeanSe};
    use crate::flux::FluxModel;
    use crate::gd::{GdKind, GradientDiscretisation, SpaceTimeGd};
    use crate::mesh::{BoundingBox, Mesh};
    use crate::noise::{Multiplier, NoiseModel};
    use crate::scheme::{RunSpec, SolverConfig, Stepper};
    use std::f64::consts::PI;

    fn params() -> OuParams {
        OuParams { stiffness: 4.0, mass: 1.0 / 3.0, q1: 1.0, f0: 0.5, b: 4.0 * 2f64.sqrt() / (PI * PI), dt: 1.0 / 16.0, n_steps: 16, mean0: 1.0, var0: 0.0 }
    }

    #[test]
    fn no_noise_is_geometric_decay() {
        let p = OuParams { q1: 0.0, ..params() };
        let m = ou_oracle(&p).unwrap();
        let a = p.mass / (p.mass + p.dt * p.stiffness);
        for n in 0..=16 {
            assert!((m.mean[n] - a.powi(n as i32)).abs() < 1e-14);
            assert_eq!(m.var[n], 0.0);
        }
    }

    #[test]
    fn no_stiffness_is_a_random_walk() {
        let p = OuParams { stiffness: 0.0, ..params() };
        let m = ou_oracle(&p).unwrap();
        let expected = 16.0 * p.dt * (p.f0 * p.q1 * p.b / p.mass).powi(2);
        assert!((m.var[16] - expected).abs() < 1e-14);
    }

    #[test]
    fn matches_simulated_scheme() {
        let p = params();
        let gd = GradientDiscretisation::new(&Mesh::uniform_interval(2, 0.0, 1.0).unwrap(), GdKind::P1Conforming).unwrap();
        let sgd = SpaceTimeGd::new(gd, 1.0, 16).unwrap();
        let flux = FluxModel::linear_diffusion();
        let noise = NoiseModel::sine(BoundingBox::new([0.0, 0.0], [1.0, 0.0]), 1, 1, 1.5, Multiplier::Constant(p.f0)).unwrap();
        let st = Stepper::new(&sgd, &flux, &noise, SolverConfig::default()).unwrap();
        let u0 = sgd.gd.interpolate(|x| (PI * x[0]).sin());
        let samples = 20_000;
        let mut values = vec![Vec::with_capacity(samples); 17];
        for s in 0..samples as u64 {
            let t = st.run_trajectory(&u0, RunSpec::new(11, s)).unwrap();
            for (n, u) in t.u.iter().enumerate() {
                values[n].push(u[0]);
            }
        }
        let exact = ou_oracle(&p).unwrap();
        for n in 1..=16 {
            let mean = MeanSe::from_samples(&values[n]);
            let var = variance_with_se(&values[n]);
            assert!(mean.within(exact.mean[n], 4.0), "n = {n}: {mean:?} vs {}", exact.mean[n]);
            assert!(var.within(exact.var[n], 4.0), "n = {n}: {var:?} vs {}", exact.var[n]);
        }
    }
}
