//! The discrete dual norm
//! `|v|_{*,D} = sup { <v, Pi_D phi> : ||Pi_D phi||_2 + ||grad_D phi||_p <= 1 }`.
//!
//! Computed as `1 / min { N(phi) : c . phi = 1 }` with `c_i = <v, Pi_D e_i>` and
//! `N(phi) = ||Pi_D phi||_2 + ||grad_D phi||_p`, a convex problem solved by
//! projected BFGS.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::gd::{DiscreteVector, GradientDiscretisation};
use crate::linalg::spd_solve;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DualNormOptions {
    pub restarts: usize,
    pub max_iter: usize,
    /// Relative stationarity tolerance.
    pub tol: f64,
    pub seed: u64,
    /// Run the oracle when the space has at most this many DOFs.
    pub oracle_max_dofs: usize,
    pub oracle_samples: usize,
}

impl Default for DualNormOptions {
    fn default() -> Self {
        DualNormOptions { restarts: 10, max_iter: 500, tol: 1e-13, seed: 0, oracle_max_dofs: 20, oracle_samples: 4000 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DualNormResult {
    /// Best ratio found; a lower bound for the supremum.
    pub value: f64,
    pub oracle: Option<f64>,
    /// `oracle - value` when the oracle ran.
    pub gap: Option<f64>,
    pub iterations: usize,
}

/// Dual-norm evaluator for one discretisation and exponent.
pub struct DualNorm<'a> {
    gd: &'a GradientDiscretisation,
    p: f64,
    opts: DualNormOptions,
    /// Generalised eigenpairs of `(K, M)` as `(mu_j, M-orthonormal v_j)`,
    /// for the `p = 2` oracle.
    eigen: Option<(DVector<f64>, DMatrix<f64>)>,
}

impl<'a> DualNorm<'a> {
    pub fn new(gd: &'a GradientDiscretisation, p: f64, opts: DualNormOptions) -> Result<Self> {
        if !(p > 1.0) || !p.is_finite() {
            return Err(invalid(format!("exponent must exceed 1 (got {p})")));
        }
        if opts.restarts == 0 {
            return Err(invalid("at least one start is required"));
        }
        let n = gd.n_dofs();
        let eigen = if p == 2.0 && n > 0 && n <= opts.oracle_max_dofs {
            let m = gd.mass_matrix().to_dense();
            let k = gd.stiffness_matrix().to_dense();
            let l = m.clone().cholesky().ok_or(Error::NotPositiveDefinite { pivot: 0, value: 0.0 })?;
            let linv = l.l().try_inverse().ok_or_else(|| invalid("singular mass factor"))?;
            let sym = &linv * k * linv.transpose();
            let sym = 0.5 * (&sym + sym.transpose());
            let e = sym.symmetric_eigen();
            Some((e.eigenvalues, linv.transpose() * e.eigenvectors))
        } else {
            None
        };
        Ok(DualNorm { gd, p, opts, eigen })
    }

    /// `|Pi_D w|_{*,D}` for a DOF vector `w`.
    pub fn of_dofs(&self, w: &DiscreteVector) -> Result<DualNormResult> {
        self.gd.check_len(w)?;
        self.of_load(&self.gd.mass_matrix().mul_vec(w))
    }

    /// Dual norm of an `L^2` function given at the quadrature points; it must
    /// lie in the range of `Pi_D`.
    pub fn of_field(&self, field: &[f64]) -> Result<DualNormResult> {
        let qp = self.gd.quad_points();
        if field.len() != qp.len() {
            return Err(Error::DimensionMismatch { expected: qp.len(), got: field.len() });
        }
        let mut c = self.gd.zeros();
        for (q, &g) in qp.iter().zip(field) {
            for &(i, b) in &q.basis {
                c[i] += q.weight * g * b;
            }
        }
        let w = if self.gd.n_dofs() > 0 { spd_solve(self.gd.mass_matrix(), &c)? } else { c.clone() };
        let norm_sq: f64 = qp.iter().zip(field).map(|(q, g)| q.weight * g * g).sum();
        let defect: f64 = qp.iter().zip(field).map(|(q, g)| q.weight * (g - q.eval(&w)).powi(2)).sum();
        if defect > 1e-18 * norm_sq.max(1e-300) && defect > 1e-24 {
            return Err(invalid(format!("function is not in the range of the reconstruction (defect {:.3e})", defect.sqrt())));
        }
        self.of_load(&c)
    }

    /// Dual norm of the functional `phi -> c . phi`.
    pub fn of_load(&self, c: &DVector<f64>) -> Result<DualNormResult> {
        self.gd.check_len(c)?;
        let cc = c.norm_squared();
        if cc == 0.0 {
            return Ok(DualNormResult { value: 0.0, oracle: Some(0.0), gap: Some(0.0), iterations: 0 });
        }
        let n = c.len();
        let mut rng = ChaCha8Rng::seed_from_u64(self.opts.seed);
        let base = c / cc;
        let mut best = f64::INFINITY;
        let mut iterations = 0;
        for r in 0..self.opts.restarts {
            let mut start = base.clone();
            if r > 0 {
                let z = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
                let z = project(c, cc, &z);
                let zn = z.norm();
                if zn > 0.0 {
                    start += z * (base.norm() / zn);
                }
            }
            let (f, it) = self.bfgs(c, cc, start);
            iterations += it;
            best = best.min(f);
        }
        let value = 1.0 / best;
        let oracle = if n <= self.opts.oracle_max_dofs { Some(self.oracle(c)?) } else { None };
        Ok(DualNormResult { value, oracle, gap: oracle.map(|o| o - value), iterations })
    }

    /// `N(phi)` and its gradient.
    fn objective(&self, phi: &DVector<f64>) -> (f64, DVector<f64>) {
        let gd = self.gd;
        let mphi = gd.mass_matrix().mul_vec(phi);
        let a = phi.dot(&mphi).max(0.0).sqrt();
        let mut grad = if a > 0.0 { mphi / a } else { DVector::zeros(phi.len()) };
        if self.p == 2.0 {
            let kphi = gd.stiffness_matrix().mul_vec(phi);
            let b = phi.dot(&kphi).max(0.0).sqrt();
            if b > 0.0 {
                grad += kphi / b;
            }
            return (a + b, grad);
        }
        let p = self.p;
        let ncell = gd.mesh().n_cells();
        let mut s = 0.0;
        let mut cell_terms = Vec::with_capacity(ncell);
        for c in 0..ncell {
            let g = gd.cell_gradient(phi, c);
            let r = (g[0] * g[0] + g[1] * g[1]).sqrt();
            let m = gd.cell_measure(c);
            s += m * r.powf(p);
            cell_terms.push((g, r, m));
        }
        let b = s.powf(1.0 / p);
        if b > 0.0 {
            let scale = b.powf(1.0 - p);
            for (c, &(g, r, m)) in cell_terms.iter().enumerate() {
                if r == 0.0 {
                    continue;
                }
                let w = scale * m * r.powf(p - 2.0);
                for &(i, gi) in gd.cell_gradient_row(c) {
                    grad[i] += w * (g[0] * gi[0] + g[1] * gi[1]);
                }
            }
        }
        (a + b, grad)
    }

    fn value(&self, phi: &DVector<f64>) -> f64 {
        self.objective(phi).0
    }

    /// Minimises `N` on the hyperplane `c . phi = 1` from `phi` (on the plane).
    fn bfgs(&self, c: &DVector<f64>, cc: f64, mut phi: DVector<f64>) -> (f64, usize) {
        let n = phi.len();
        let (mut f, g) = self.objective(&phi);
        let mut gp = project(c, cc, &g);
        let mut h = DMatrix::<f64>::identity(n, n);
        let mut first = true;
        let mut stalls = 0;
        let mut it = 0;
        while it < self.opts.max_iter {
            if gp.norm() * phi.norm() <= self.opts.tol * f {
                break;
            }
            it += 1;
            let mut d = project(c, cc, &(-(&h * &gp)));
            let mut slope = d.dot(&gp);
            if !(slope < 0.0) {
                h = DMatrix::identity(n, n);
                d = -gp.clone();
                slope = d.dot(&gp);
            }
            let mut alpha = if first { (phi.norm() / d.norm()).min(1.0) } else { 1.0 };
            first = false;
            let mut accepted = None;
            for _ in 0..60 {
                let trial = &phi + alpha * &d;
                let ft = self.value(&trial);
                if ft <= f + 1e-4 * alpha * slope {
                    accepted = Some((trial, ft));
                    break;
                }
                alpha *= 0.5;
            }
            let Some((next, fnext)) = accepted else { break };
            let (_, gnext) = self.objective(&next);
            let gpn = project(c, cc, &gnext);
            let s = &next - &phi;
            let y = &gpn - &gp;
            let sy = s.dot(&y);
            if sy > 1e-16 * s.norm() * y.norm() {
                let rho = 1.0 / sy;
                let hy = &h * &y;
                let yhy = y.dot(&hy);
                h += (rho * rho * yhy + rho) * (&s * s.transpose()) - rho * (&hy * s.transpose() + &s * hy.transpose());
            }
            if f - fnext <= 1e-16 * f {
                stalls += 1;
                if stalls >= 3 {
                    f = fnext;
                    break;
                }
            } else {
                stalls = 0;
            }
            phi = next;
            f = fnext;
            gp = gpn;
        }
        (f, it)
    }

    /// Independent evaluation for small spaces: for `p = 2`, the exact
    /// `max_t sqrt(c^T (M/t + K/(1-t))^{-1} c)` (concave in `t`, golden
    /// section); otherwise dense random sampling of the ratio and a compass
    /// search polish.
    pub fn oracle(&self, c: &DVector<f64>) -> Result<f64> {
        self.gd.check_len(c)?;
        if c.norm_squared() == 0.0 {
            return Ok(0.0);
        }
        if let Some((mu, v)) = &self.eigen {
            let gamma2: Vec<f64> = (v.transpose() * c).iter().map(|x| x * x).collect();
            let h = |t: f64| -> f64 {
                mu.iter().zip(&gamma2).map(|(m, g)| g * t * (1.0 - t) / ((1.0 - t) + m * t)).sum()
            };
            let golden = 0.5 * (5f64.sqrt() - 1.0);
            let (mut a, mut b) = (0.0, 1.0);
            let mut x1 = b - golden * (b - a);
            let mut x2 = a + golden * (b - a);
            let (mut f1, mut f2) = (h(x1), h(x2));
            for _ in 0..200 {
                if f1 < f2 {
                    a = x1;
                    x1 = x2;
                    f1 = f2;
                    x2 = a + golden * (b - a);
                    f2 = h(x2);
                } else {
                    b = x2;
                    x2 = x1;
                    f2 = f1;
                    x1 = b - golden * (b - a);
                    f1 = h(x1);
                }
                if b - a < 1e-15 {
                    break;
                }
            }
            return Ok(f1.max(f2).sqrt());
        }
        let n = c.len();
        let mut rng = ChaCha8Rng::seed_from_u64(self.opts.seed ^ 0x5eed);
        let ratio = |phi: &DVector<f64>| c.dot(phi).abs() / self.value(phi);
        let mut best = c.clone();
        let mut best_r = ratio(&best);
        for _ in 0..self.opts.oracle_samples {
            let z = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
            let r = ratio(&z);
            if r > best_r {
                best_r = r;
                best = z;
            }
        }
        let cb = c.dot(&best);
        let mut phi = best / cb;
        let mut f = self.value(&phi);
        let cc = c.norm_squared();
        let dirs: Vec<DVector<f64>> = (0..n)
            .map(|i| {
                let e = project(c, cc, &DVector::from_fn(n, |j, _| if i == j { 1.0 } else { 0.0 }));
                let norm = e.norm();
                if norm > 0.0 {
                    e / norm
                } else {
                    e
                }
            })
            .collect();
        let mut step = phi.norm();
        while step > 1e-13 * phi.norm() {
            let mut improved = false;
            for d in &dirs {
                for sign in [1.0, -1.0] {
                    let trial = &phi + (sign * step) * d;
                    let ft = self.value(&trial);
                    if ft < f {
                        phi = trial;
                        f = ft;
                        improved = true;
                    }
                }
            }
            if !improved {
                step *= 0.5;
            }
        }
        Ok(1.0 / f)
    }
}

fn project(c: &DVector<f64>, cc: f64, x: &DVector<f64>) -> DVector<f64> {
    x - c * (c.dot(x) / cc)
}

/// One-shot `|Pi_D w|_{*,D}`.
pub fn dual_norm(gd: &GradientDiscretisation, w: &DiscreteVector, p: f64, opts: DualNormOptions) -> Result<DualNormResult> {
    DualNorm::new(gd, p, opts)?.of_dofs(w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gd::GdKind;
    use crate::mesh::{BoundingBox, Mesh};

    fn gd1(n: usize, kind: GdKind) -> GradientDiscretisation {
        GradientDiscretisation::new(&Mesh::uniform_interval(n, 0.0, 1.0).unwrap(), kind).unwrap()
    }

    fn random_dofs(n: usize, seed: u64) -> DVector<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn zero_has_zero_norm() {
        let gd = gd1(6, GdKind::P1Conforming);
        assert_eq!(dual_norm(&gd, &gd.zeros(), 2.0, DualNormOptions::default()).unwrap().value, 0.0);
    }

    #[test]
    fn single_dof_closed_form() {
        let gd = gd1(2, GdKind::P1Conforming);
        for p in [1.5, 2.0, 3.0] {
            let w = DVector::from_vec(vec![0.7]);
            let r = dual_norm(&gd, &w, p, DualNormOptions::default()).unwrap();
            let e = DVector::from_vec(vec![1.0]);
            let pairing = gd.l2_inner(&w, &e).unwrap();
            let closed = pairing / (gd.lp_norm(&e, 2.0).unwrap() + gd.grad_lp_norm(&e, p).unwrap());
            assert!((r.value - closed).abs() < 1e-13, "p = {p}");
        }
    }

    #[test]
    fn p2_matches_exact_oracle() {
        let gd = gd1(6, GdKind::P1Conforming);
        assert_eq!(gd.n_dofs(), 5);
        for seed in 0..10 {
            let w = random_dofs(5, seed);
            let r = dual_norm(&gd, &w, 2.0, DualNormOptions::default()).unwrap();
            assert!(r.gap.unwrap().abs() < 1e-6, "{r:?}");
            assert!(r.value <= gd.lp_norm(&w, 2.0).unwrap() + 1e-12);
        }
    }

    #[test]
    fn other_exponents_match_sampling_oracle() {
        for (p, kind) in [(3.0, GdKind::P1Conforming), (1.5, GdKind::P1MassLumped)] {
            let gd = gd1(8, kind);
            for seed in 0..3 {
                let w = random_dofs(gd.n_dofs(), seed);
                let r = dual_norm(&gd, &w, p, DualNormOptions::default()).unwrap();
                let gap = r.gap.unwrap();
                assert!(gap.abs() < 1e-6 * r.value.max(1.0), "p = {p}: {r:?}");
                assert!(r.value <= gd.lp_norm(&w, 2.0).unwrap() + 1e-12);
            }
        }
    }

    #[test]
    fn p2_oracle_is_a_supremum() {
        // no sampled test function beats the oracle value
        let gd = gd1(6, GdKind::P1Conforming);
        let w = random_dofs(5, 42);
        let dn = DualNorm::new(&gd, 2.0, DualNormOptions::default()).unwrap();
        let c = gd.mass_matrix().mul_vec(&w);
        let o = dn.oracle(&c).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20000 {
            let phi = DVector::from_fn(5, |_, _| rng.sample::<f64, _>(StandardNormal));
            let nrm = gd.lp_norm(&phi, 2.0).unwrap() + gd.grad_lp_norm(&phi, 2.0).unwrap();
            assert!(c.dot(&phi).abs() / nrm <= o * (1.0 + 1e-12));
        }
    }

    #[test]
    fn range_check_on_fields() {
        let gd = gd1(6, GdKind::P1Conforming);
        let dn = DualNorm::new(&gd, 2.0, DualNormOptions::default()).unwrap();
        let w = random_dofs(5, 3);
        let field: Vec<f64> = gd.quad_points().iter().map(|q| q.eval(&w)).collect();
        let a = dn.of_field(&field).unwrap().value;
        let b = dn.of_dofs(&w).unwrap().value;
        assert!((a - b).abs() < 1e-10);
        let rough: Vec<f64> = gd.quad_points().iter().map(|q| (20.0 * q.x[0]).sin()).collect();
        assert!(dn.of_field(&rough).is_err());
    }

    #[test]
    fn two_dimensional_spaces() {
        let m = Mesh::uniform_rectangle(2, 2, BoundingBox::unit_square()).unwrap();
        let gd = GradientDiscretisation::new(&m, GdKind::CrouzeixRaviart).unwrap();
        let w = random_dofs(gd.n_dofs(), 5);
        let r = dual_norm(&gd, &w, 2.0, DualNormOptions::default()).unwrap();
        assert!(r.gap.unwrap().abs() < 1e-6);
    }
}
