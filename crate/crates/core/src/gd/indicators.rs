//! Quality indicators of a gradient discretisation: the best interpolation
//! `P_D` with its consistency value, limit-conformity, translate compactness
//! and the discrete Poincaré constant.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::translate::{add_outer, TranslateOverlay};
use super::{check_exponent, GradientDiscretisation};
use crate::error::{invalid, Result};
use crate::geometry::Point;
use crate::linalg::{max_generalized_eigen, SparseCholesky};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IrlsOptions {
    pub max_iter: usize,
    /// Relative change of the objective below which iteration stops.
    pub tol: f64,
    /// Weight update `w <- (1 - damping) w_old + damping w_new`.
    pub damping: f64,
    /// Random trial directions used to strengthen the lower bound.
    pub random_directions: usize,
    pub seed: u64,
}

impl Default for IrlsOptions {
    fn default() -> Self {
        IrlsOptions { max_iter: 50, tol: 1e-9, damping: 0.5, random_directions: 32, seed: 0x5eed }
    }
}

/// Value of a supremum-type indicator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IndicatorValue {
    pub value: f64,
    /// Largest ratio attained by an explicit vector.
    pub lower_bound: f64,
    pub iterations: usize,
    pub converged: bool,
}

impl IndicatorValue {
    fn exact(value: f64) -> Self {
        IndicatorValue { value, lower_bound: value, iterations: 0, converged: true }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BestInterpolation {
    pub w: DVector<f64>,
    /// `||Pi_D w - phi||_{L^phat} + ||grad_D w - grad phi||_{L^p}` at `w`.
    pub value: f64,
    pub iterations: usize,
    pub converged: bool,
}

fn require_dofs(gd: &GradientDiscretisation) -> Result<()> {
    if gd.n_dofs() == 0 {
        return Err(invalid("the discrete space has no degrees of freedom"));
    }
    Ok(())
}

/// True objective of the consistency problem at `w`.
fn consistency_objective(
    gd: &GradientDiscretisation,
    w: &DVector<f64>,
    vals: &[f64],
    grads: &[Point],
    p: f64,
    phat: f64,
) -> f64 {
    let (mut s0, mut s1) = (0.0, 0.0);
    for (k, q) in gd.quad_points().iter().enumerate() {
        let g = gd.cell_gradient(w, q.cell);
        let d = [g[0] - grads[k][0], g[1] - grads[k][1]];
        s0 += q.weight * (q.eval(w) - vals[k]).abs().powf(phat);
        s1 += q.weight * (d[0] * d[0] + d[1] * d[1]).powf(0.5 * p);
    }
    s0.powf(1.0 / phat) + s1.powf(1.0 / p)
}

/// Minimiser `P_D phi` of `||Pi_D w - phi||_{L^phat} + ||grad_D w - grad phi||_{L^p}`
/// computed through the power-sum surrogate
/// `||Pi_D w - phi||^phat + ||grad_D w - grad phi||^p`.
pub fn interpolate_best(
    gd: &GradientDiscretisation,
    phi: impl Fn(Point) -> f64,
    grad_phi: impl Fn(Point) -> Point,
    p: f64,
    phat: f64,
    opts: &IrlsOptions,
) -> Result<BestInterpolation> {
    check_exponent(p)?;
    check_exponent(phat)?;
    let n = gd.n_dofs();
    let qp = gd.quad_points();
    let vals: Vec<f64> = qp.iter().map(|q| phi(q.x)).collect();
    let grads: Vec<Point> = qp.iter().map(|q| grad_phi(q.x)).collect();
    if n == 0 {
        let w = DVector::zeros(0);
        let value = consistency_objective(gd, &w, &vals, &grads, p, phat);
        return Ok(BestInterpolation { w, value, iterations: 0, converged: true });
    }

    // weighted normal equations: (M_a + K_b) w = rhs
    let solve = |wf: &[f64], wg: &[f64]| -> Result<DVector<f64>> {
        let mut t = crate::linalg::Triplets::new(n);
        let mut rhs = DVector::zeros(n);
        for (k, q) in qp.iter().enumerate() {
            let a = q.weight * wf[k];
            let b = q.weight * wg[k];
            let rows = gd.cell_gradient_row(q.cell);
            for &(i, bi) in &q.basis {
                rhs[i] += a * vals[k] * bi;
                for &(j, bj) in &q.basis {
                    t.push(i, j, a * bi * bj);
                }
            }
            for &(i, gi) in rows {
                rhs[i] += b * (gi[0] * grads[k][0] + gi[1] * grads[k][1]);
                for &(j, gj) in rows {
                    t.push(i, j, b * (gi[0] * gj[0] + gi[1] * gj[1]));
                }
            }
        }
        Ok(SparseCholesky::factor(&t.into_csr())?.solve(&rhs))
    };

    let ones = vec![1.0; qp.len()];
    let w = solve(&ones, &ones)?;
    let mut best_value = consistency_objective(gd, &w, &vals, &grads, p, phat);
    if p == 2.0 && phat == 2.0 {
        return Ok(BestInterpolation { w, value: best_value, iterations: 1, converged: true });
    }

    let surrogate = |w: &DVector<f64>| -> (f64, Vec<f64>, Vec<f64>) {
        let mut s = 0.0;
        let mut rf = Vec::with_capacity(qp.len());
        let mut rg = Vec::with_capacity(qp.len());
        for (k, q) in qp.iter().enumerate() {
            let g = gd.cell_gradient(w, q.cell);
            let r0 = (q.eval(w) - vals[k]).abs();
            let r1 = ((g[0] - grads[k][0]).powi(2) + (g[1] - grads[k][1]).powi(2)).sqrt();
            s += q.weight * (r0.powf(phat) + r1.powf(p));
            rf.push(r0);
            rg.push(r1);
        }
        (s, rf, rg)
    };
    let weights = |r: &[f64], e: f64| -> Vec<f64> {
        let floor = 1e-8 * r.iter().cloned().fold(0.0, f64::max).max(f64::MIN_POSITIVE);
        r.iter().map(|&x| 0.5 * e * x.max(floor).powf(e - 2.0)).collect()
    };

    let mut best_w = w.clone();
    let (mut obj, rf, rg) = surrogate(&w);
    let mut wf = weights(&rf, phat);
    let mut wg = weights(&rg, p);
    let mut converged = false;
    let mut iterations = 1;
    for it in 0..opts.max_iter {
        iterations = it + 2;
        let next = solve(&wf, &wg)?;
        let (new_obj, rf, rg) = surrogate(&next);
        let value = consistency_objective(gd, &next, &vals, &grads, p, phat);
        if value < best_value {
            best_value = value;
            best_w = next;
        }
        let change = (obj - new_obj).abs() / obj.abs().max(f64::MIN_POSITIVE);
        obj = new_obj;
        if change < opts.tol {
            converged = true;
            break;
        }
        for (old, new) in wf.iter_mut().zip(weights(&rf, phat)) {
            *old = (1.0 - opts.damping) * *old + opts.damping * new;
        }
        for (old, new) in wg.iter_mut().zip(weights(&rg, p)) {
            *old = (1.0 - opts.damping) * *old + opts.damping * new;
        }
    }
    Ok(BestInterpolation { w: best_w, value: best_value, iterations, converged })
}

/// Linear functional `c_i = ∫ grad_D e_i . phi + Pi_D e_i div phi`.
pub fn conformity_functional(
    gd: &GradientDiscretisation,
    phi: impl Fn(Point) -> Point,
    div_phi: impl Fn(Point) -> f64,
) -> DVector<f64> {
    let mut c = gd.zeros();
    for q in gd.quad_points() {
        let f = phi(q.x);
        let d = div_phi(q.x);
        for &(i, b) in &q.basis {
            c[i] += q.weight * d * b;
        }
        for &(i, g) in gd.cell_gradient_row(q.cell) {
            c[i] += q.weight * (g[0] * f[0] + g[1] * f[1]);
        }
    }
    c
}

/// Limit-conformity defect `W_D(phi) = sup |c . v| / ||grad_D v||_{L^p}`.
pub fn indicator_w(
    gd: &GradientDiscretisation,
    phi: impl Fn(Point) -> Point,
    div_phi: impl Fn(Point) -> f64,
    p: f64,
    opts: &IrlsOptions,
) -> Result<IndicatorValue> {
    check_exponent(p)?;
    require_dofs(gd)?;
    let c = conformity_functional(gd, phi, div_phi);
    let chol = SparseCholesky::factor(gd.stiffness_matrix())?;
    let v2 = chol.solve(&c);
    let cv = c.dot(&v2);
    if p == 2.0 {
        return Ok(IndicatorValue::exact(cv.max(0.0).sqrt()));
    }
    let ratio = |v: &DVector<f64>| {
        let den = gd.grad_lp_pow(v, p).powf(1.0 / p);
        if den > 0.0 {
            c.dot(v).abs() / den
        } else {
            0.0
        }
    };
    let mut best = ratio(&v2);
    let mut v = v2;
    let n = gd.n_dofs();
    let mut weights = cell_weights(gd, &v, p);
    let mut converged = false;
    let mut iterations = 0;
    let mut last = best;
    for it in 0..opts.max_iter {
        iterations = it + 1;
        let kw = weighted_stiffness(gd, &weights);
        let next = SparseCholesky::factor(&kw)?.solve(&c);
        let r = ratio(&next);
        best = best.max(r);
        v = next;
        if (r - last).abs() <= opts.tol * r.abs().max(f64::MIN_POSITIVE) {
            converged = true;
            break;
        }
        last = r;
        let fresh = cell_weights(gd, &v, p);
        for (w, f) in weights.iter_mut().zip(fresh) {
            *w = (1.0 - opts.damping) * *w + opts.damping * f;
        }
    }
    let value = best;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    for _ in 0..opts.random_directions {
        let d = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
        best = best.max(ratio(&d));
    }
    Ok(IndicatorValue { value: value.max(best), lower_bound: best, iterations, converged })
}

fn cell_weights(gd: &GradientDiscretisation, v: &DVector<f64>, p: f64) -> Vec<f64> {
    let norms: Vec<f64> = (0..gd.mesh().n_cells())
        .map(|c| {
            let g = gd.cell_gradient(v, c);
            (g[0] * g[0] + g[1] * g[1]).sqrt()
        })
        .collect();
    let floor = 1e-8 * norms.iter().cloned().fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    norms.iter().map(|&g| g.max(floor).powf(p - 2.0)).collect()
}

fn weighted_stiffness(gd: &GradientDiscretisation, weights: &[f64]) -> crate::linalg::CsrMatrix {
    let mut t = crate::linalg::Triplets::new(gd.n_dofs());
    for (c, &w) in weights.iter().enumerate() {
        let rows = gd.cell_gradient_row(c);
        let m = gd.cell_measure(c) * w;
        for &(i, gi) in rows {
            for &(j, gj) in rows {
                t.push(i, j, m * (gi[0] * gj[0] + gi[1] * gj[1]));
            }
        }
    }
    t.into_csr()
}

fn dense_weighted_stiffness(gd: &GradientDiscretisation, weights: &[f64]) -> DMatrix<f64> {
    weighted_stiffness(gd, weights).to_dense()
}

/// Maximises `num(v) / den(v)` for `p`-homogeneous functionals by
/// reweighted generalised eigenproblems.
fn rayleigh_irls(
    gd: &GradientDiscretisation,
    p: f64,
    start: DVector<f64>,
    num_pow: &dyn Fn(&DVector<f64>) -> f64,
    num_form: &dyn Fn(&DVector<f64>, f64) -> DMatrix<f64>,
    opts: &IrlsOptions,
) -> Result<IndicatorValue> {
    let n = gd.n_dofs();
    let ratio = |v: &DVector<f64>| {
        let den = gd.grad_lp_pow(v, p);
        if den > 0.0 {
            (num_pow(v) / den).max(0.0).powf(1.0 / p)
        } else {
            0.0
        }
    };
    let mut v = start;
    let mut best = ratio(&v);
    let mut last = best;
    let mut num_w = num_form(&v, 1e-8 * v.amax());
    let mut den_w = dense_weighted_stiffness(gd, &cell_weights(gd, &v, p));
    let mut converged = false;
    let mut iterations = 0;
    for it in 0..opts.max_iter {
        iterations = it + 1;
        let sym = 0.5 * (&num_w + num_w.transpose());
        let (_, next) = max_generalized_eigen(&sym, &den_w)?;
        let r = ratio(&next);
        if r > best {
            best = r;
        }
        v = next;
        if (r - last).abs() <= opts.tol * r.abs().max(f64::MIN_POSITIVE) {
            converged = true;
            break;
        }
        last = r;
        let fresh_num = num_form(&v, 1e-8 * v.amax());
        let fresh_den = dense_weighted_stiffness(gd, &cell_weights(gd, &v, p));
        num_w = (1.0 - opts.damping) * num_w + opts.damping * fresh_num;
        den_w = (1.0 - opts.damping) * den_w + opts.damping * fresh_den;
    }
    let value = best;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    for _ in 0..opts.random_directions {
        let d = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
        best = best.max(ratio(&d));
    }
    Ok(IndicatorValue { value: value.max(best), lower_bound: best, iterations, converged })
}

/// Translate compactness `T_D(xi) = sup ||Pi_D v(. + xi) - Pi_D v||_{L^p(R^d)} / ||grad_D v||_{L^p}`
/// with `Pi_D v` extended by zero outside the domain.
pub fn indicator_t(
    gd: &GradientDiscretisation,
    xi: Point,
    p: f64,
    opts: &IrlsOptions,
) -> Result<IndicatorValue> {
    check_exponent(p)?;
    require_dofs(gd)?;
    if xi == [0.0, 0.0] {
        return Ok(IndicatorValue::exact(0.0));
    }
    let overlay = TranslateOverlay::new(gd, xi);
    let s = overlay.cross_matrix().to_dense();
    let m = gd.mass_matrix().to_dense();
    let a = 2.0 * &m - &s - s.transpose();
    let k = gd.stiffness_matrix().to_dense();
    let (lambda, v2) = max_generalized_eigen(&a, &k)?;
    if p == 2.0 {
        return Ok(IndicatorValue::exact(lambda.max(0.0).sqrt()));
    }
    rayleigh_irls(
        gd,
        p,
        v2,
        &|v| overlay.difference_pow(gd, v, p),
        &|v, floor| overlay.weighted_form(gd, v, p, floor),
        opts,
    )
}

/// Discrete Poincaré constant `C_p = sup ||Pi_D v||_{L^p} / ||grad_D v||_{L^p}`.
pub fn poincare_constant(gd: &GradientDiscretisation, p: f64, opts: &IrlsOptions) -> Result<IndicatorValue> {
    check_exponent(p)?;
    require_dofs(gd)?;
    let m = gd.mass_matrix().to_dense();
    let k = gd.stiffness_matrix().to_dense();
    let (lambda, v2) = max_generalized_eigen(&m, &k)?;
    if p == 2.0 {
        return Ok(IndicatorValue::exact(lambda.max(0.0).sqrt()));
    }
    let num_pow = |v: &DVector<f64>| gd.lp_pow(v, p);
    let num_form = |v: &DVector<f64>, floor: f64| {
        let n = gd.n_dofs();
        let mut a = DMatrix::zeros(n, n);
        for q in &gd.sign_split_quadrature(v) {
            let w = q.weight * q.eval(v).abs().max(floor).powf(p - 2.0);
            add_outer(&mut a, &q.basis, &q.basis, w);
        }
        a
    };
    rayleigh_irls(gd, p, v2, &num_pow, &num_form, opts)
}
