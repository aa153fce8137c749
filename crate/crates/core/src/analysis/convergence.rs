//! Refinement studies: errors against exact solutions and pathwise
//! differences between successive levels driven by one noise path.

use serde::{Deserialize, Serialize};

use crate::analysis::ensemble::run_ensemble;
use crate::analysis::stats::{empirical_orders, MeanSe};
use crate::error::{invalid, Result};
use crate::gd::{DiscreteVector, GradientDiscretisation};
use crate::geometry::{Point, Region};
use crate::scheme::{RunSpec, Stepper, Trajectory};

/// Intersections of the pieces of two discretisations of one domain.
#[derive(Debug, Clone)]
pub struct Overlay {
    cells: Vec<(Region, usize, usize)>,
}

impl Overlay {
    pub fn new(a: &GradientDiscretisation, b: &GradientDiscretisation) -> Self {
        let boxes = |gd: &GradientDiscretisation| -> Vec<(Point, Point)> { gd.pieces().iter().map(|p| p.region.bbox()).collect() };
        let (ba, bb) = (boxes(a), boxes(b));
        let mut order: Vec<usize> = (0..bb.len()).collect();
        order.sort_by(|&i, &j| bb[i].0[0].total_cmp(&bb[j].0[0]));
        let starts: Vec<f64> = order.iter().map(|&i| bb[i].0[0]).collect();
        let tol = 1e-12;
        let mut cells = Vec::new();
        for (ia, pa) in a.pieces().iter().enumerate() {
            let (lo, hi) = ba[ia];
            let end = starts.partition_point(|&x| x < hi[0] - tol);
            for &ib in &order[..end] {
                let (blo, bhi) = bb[ib];
                if bhi[0] <= lo[0] + tol || bhi[1] < lo[1] - tol || blo[1] > hi[1] + tol {
                    continue;
                }
                if let Some(r) = pa.region.intersect(&b.pieces()[ib].region) {
                    if r.measure() > 0.0 {
                        cells.push((r, ia, ib));
                    }
                }
            }
        }
        Overlay { cells }
    }

    /// Total measure covered, for sanity checks.
    pub fn measure(&self) -> f64 {
        self.cells.iter().map(|(r, _, _)| r.measure()).sum()
    }

    /// `∫ |Pi_a va - Pi_b vb|^p`, exact for integer `p <= 4`.
    pub fn difference_pow(&self, a: &GradientDiscretisation, va: &DiscreteVector, b: &GradientDiscretisation, vb: &DiscreteVector, p: f64) -> f64 {
        let mut buf = Vec::new();
        let mut total = 0.0;
        for (region, ia, ib) in &self.cells {
            let fa = a.piece_affine(*ia, va);
            let fb = b.piece_affine(*ib, vb);
            let mut d = fa;
            d.value -= fb.value;
            d.slope[0] -= fb.slope[0];
            d.slope[1] -= fb.slope[1];
            let mut add = |r: &Region| {
                buf.clear();
                r.quadrature_into(&mut buf);
                total += buf.iter().map(|&(x, w)| w * d.eval(x).abs().powf(p)).sum::<f64>();
            };
            if p == 2.0 || p == 4.0 {
                add(region);
            } else {
                let (pos, neg) = region.split_by_sign(&d);
                for r in [pos, neg].iter().flatten() {
                    add(r);
                }
            }
        }
        total
    }
}

/// `||Pi u_coarse - Pi u_fine||_{L^p(0,T; L^p)}` for paths that are
/// piecewise constant in time (`u^{n+1}` on `(t_n, t_{n+1}]`), the fine time
/// grid refining the coarse one.
pub fn space_time_difference(
    coarse: (&GradientDiscretisation, &Trajectory),
    fine: (&GradientDiscretisation, &Trajectory),
    overlay: &Overlay,
    p: f64,
) -> Result<f64> {
    let (gc, tc) = coarse;
    let (gf, tf) = fine;
    let (nc, nf) = (tc.n_steps(), tf.n_steps());
    if nc == 0 || nf % nc != 0 {
        return Err(invalid(format!("fine step count {nf} is not a multiple of coarse step count {nc}")));
    }
    if ((nc as f64 * tc.dt) - (nf as f64 * tf.dt)).abs() > 1e-12 * (nc as f64 * tc.dt) {
        return Err(invalid("final times differ"));
    }
    let r = nf / nc;
    let mut s = 0.0;
    for j in 0..nf {
        s += tf.dt * overlay.difference_pow(gc, &tc.u[j / r + 1], gf, &tf.u[j + 1], p);
    }
    Ok(s.powf(1.0 / p))
}

/// `max_n ||Pi u^n - u(t_n)||_{L^2}`.
pub fn max_l2_error(gd: &GradientDiscretisation, traj: &Trajectory, exact: impl Fn(f64, Point) -> f64) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for (n, u) in traj.u.iter().enumerate() {
        let t = n as f64 * traj.dt;
        worst = worst.max(gd.lp_error(u, |x| exact(t, x), 2.0)?);
    }
    Ok(worst)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceRow {
    pub level: usize,
    pub h: f64,
    pub dt: f64,
    pub n_dofs: usize,
    pub error: Option<f64>,
    pub order: Option<f64>,
    /// Mean difference to the next finer level.
    pub difference: Option<MeanSe>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub rows: Vec<ConvergenceRow>,
}

impl ConvergenceReport {
    /// Rows with errors against an exact solution and their orders in `h`.
    pub fn from_errors(h: &[f64], dt: &[f64], n_dofs: &[usize], errors: &[f64]) -> Self {
        let orders = empirical_orders(h, errors);
        let rows = (0..h.len())
            .map(|l| ConvergenceRow {
                level: l,
                h: h[l],
                dt: dt[l],
                n_dofs: n_dofs[l],
                error: Some(errors[l]),
                order: if l == 0 { None } else { Some(orders[l - 1]) },
                difference: None,
            })
            .collect();
        ConvergenceReport { rows }
    }

    pub fn differences(&self) -> Vec<f64> {
        self.rows.iter().filter_map(|r| r.difference.map(|d| d.mean)).collect()
    }

    pub fn strictly_decreasing(&self) -> bool {
        let d = self.differences();
        d.len() >= 2 && d.windows(2).all(|w| w[1] < w[0])
    }
}

/// Coupled refinement study: every level is driven by the finest level's
/// Wiener increments summed over each coarse step, and the pathwise
/// `L^p(0,T;L^p)` differences between successive levels are averaged over
/// samples.
pub fn coupled_refinement_study(
    levels: &[Stepper<'_>],
    u0: &(dyn Fn(Point) -> f64 + Sync),
    master_seed: u64,
    n_samples: u64,
    p: f64,
    workers: usize,
) -> Result<(ConvergenceReport, Vec<Vec<f64>>)> {
    if levels.len() < 2 {
        return Err(invalid("a refinement study needs at least two levels"));
    }
    if n_samples == 0 {
        return Err(invalid("n_samples must be at least 1"));
    }
    let finest = levels.last().unwrap().sgd();
    let t = finest.t_final();
    let nf = finest.n_steps();
    let mut substeps = Vec::with_capacity(levels.len());
    for (l, st) in levels.iter().enumerate() {
        let sgd = st.sgd();
        if (sgd.t_final() - t).abs() > 1e-12 * t {
            return Err(invalid(format!("level {l} has final time {} instead of {t}", sgd.t_final())));
        }
        if !nf.is_multiple_of(sgd.n_steps()) {
            return Err(invalid(format!("level {l} step count {} does not divide the finest count {nf}", sgd.n_steps())));
        }
        if l > 0 && sgd.n_steps() % levels[l - 1].sgd().n_steps() != 0 {
            return Err(invalid(format!("level {l} does not refine level {} in time", l - 1)));
        }
        if st.noise().k_max() != levels[0].noise().k_max() || st.noise().q() != levels[0].noise().q() {
            return Err(invalid(format!("level {l} has a different noise spectrum")));
        }
        substeps.push((nf / sgd.n_steps()) as u64);
    }
    let overlays: Vec<Overlay> = levels.windows(2).map(|w| Overlay::new(&w[0].sgd().gd, &w[1].sgd().gd)).collect();
    let per_sample = run_ensemble(workers, n_samples, |s| {
        let mut trajs = Vec::with_capacity(levels.len());
        for (st, &sub) in levels.iter().zip(&substeps) {
            let u = st.sgd().gd.interpolate(u0);
            trajs.push(st.run_trajectory(&u, RunSpec::new(master_seed, s).with_substeps(sub))?);
        }
        (0..levels.len() - 1)
            .map(|l| {
                space_time_difference(
                    (&levels[l].sgd().gd, &trajs[l]),
                    (&levels[l + 1].sgd().gd, &trajs[l + 1]),
                    &overlays[l],
                    p,
                )
            })
            .collect::<Result<Vec<f64>>>()
    })?;
    let rows = levels
        .iter()
        .enumerate()
        .map(|(l, st)| {
            let sgd = st.sgd();
            let difference = (l + 1 < levels.len()).then(|| {
                let xs: Vec<f64> = per_sample.iter().map(|d| d[l]).collect();
                MeanSe::from_samples(&xs)
            });
            ConvergenceRow {
                level: l,
                h: sgd.gd.mesh().max_diameter(),
                dt: sgd.dt(),
                n_dofs: sgd.gd.n_dofs(),
                error: None,
                order: None,
                difference,
            }
        })
        .collect();
    Ok((ConvergenceReport { rows }, per_sample))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flux::FluxModel;
    use crate::gd::{GdKind, SpaceTimeGd};
    use crate::mesh::{BoundingBox, Mesh};
    use crate::noise::{Multiplier, NoiseModel};
    use crate::scheme::SolverConfig;
    use std::f64::consts::PI;

    #[test]
    fn overlay_difference_matches_fine_quadrature() {
        let m = Mesh::uniform_rectangle(2, 2, BoundingBox::unit_square()).unwrap();
        let fine = m.refine();
        for kind in [GdKind::P1Conforming, GdKind::P1MassLumped, GdKind::CrouzeixRaviart] {
            let a = GradientDiscretisation::new(&m, kind).unwrap();
            let b = GradientDiscretisation::new(&fine, kind).unwrap();
            let ov = Overlay::new(&a, &b);
            assert!((ov.measure() - 1.0).abs() < 1e-12, "{kind}");
            let f = |x: Point| (PI * x[0]).sin() * (PI * x[1]).sin() + 0.3 * x[0];
            let (va, vb) = (a.interpolate(f), b.interpolate(f));
            // brute force: midpoint sampling on a fine grid
            let n = 1500;
            let mut brute = 0.0;
            for i in 0..n {
                for j in 0..n {
                    let x = [(i as f64 + 0.5) / n as f64, (j as f64 + 0.5) / n as f64 + 1e-9];
                    let d = a.reconstruct_at(&va, x).unwrap() - b.reconstruct_at(&vb, x).unwrap();
                    brute += d.abs().powi(3) / (n * n) as f64;
                }
            }
            let exact = ov.difference_pow(&a, &va, &b, &vb, 3.0);
            assert!((exact - brute).abs() < 2e-3 * exact.max(1e-3), "{kind}: {exact} vs {brute}");
        }
    }

    #[test]
    fn identical_levels_have_zero_difference() {
        let gd = GradientDiscretisation::new(&Mesh::uniform_interval(8, 0.0, 1.0).unwrap(), GdKind::P1Conforming).unwrap();
        let sgd = SpaceTimeGd::new(gd, 0.1, 8).unwrap();
        let flux = FluxModel::p_laplace(3.0).unwrap();
        let noise = NoiseModel::sine(BoundingBox::new([0.0, 0.0], [1.0, 0.0]), 1, 4, 1.5, Multiplier::Tanh).unwrap();
        let a = Stepper::new(&sgd, &flux, &noise, SolverConfig::default()).unwrap();
        let b = Stepper::new(&sgd, &flux, &noise, SolverConfig::default()).unwrap();
        let u0 = |x: Point| (PI * x[0]).sin();
        let (rep, _) = coupled_refinement_study(&[a, b], &u0, 3, 4, 3.0, 2).unwrap();
        assert_eq!(rep.rows[0].difference.unwrap().mean, 0.0);
    }

    #[test]
    fn deterministic_p3_self_convergence() {
        let base = Mesh::uniform_interval(4, 0.0, 1.0).unwrap();
        let meshes = [base.clone(), base.refine(), base.refine().refine()];
        let flux = FluxModel::p_laplace(3.0).unwrap();
        let noise = NoiseModel::sine(BoundingBox::new([0.0, 0.0], [1.0, 0.0]), 1, 2, 1.5, Multiplier::Zero).unwrap();
        let sgds: Vec<SpaceTimeGd> = meshes
            .iter()
            .enumerate()
            .map(|(l, m)| SpaceTimeGd::new(GradientDiscretisation::new(m, GdKind::P1Conforming).unwrap(), 0.1, 4 << (2 * l)).unwrap())
            .collect();
        let steppers: Vec<Stepper> = sgds.iter().map(|s| Stepper::new(s, &flux, &noise, SolverConfig::default()).unwrap()).collect();
        let u0 = |x: Point| 4.0 * x[0] * (1.0 - x[0]);
        let (rep, _) = coupled_refinement_study(&steppers, &u0, 0, 1, 3.0, 1).unwrap();
        assert!(rep.strictly_decreasing(), "{:?}", rep.differences());
    }

    #[test]
    fn mismatched_levels_are_rejected() {
        let gd = GradientDiscretisation::new(&Mesh::uniform_interval(4, 0.0, 1.0).unwrap(), GdKind::P1Conforming).unwrap();
        let (s1, s2) = (SpaceTimeGd::new(gd.clone(), 0.1, 4).unwrap(), SpaceTimeGd::new(gd, 0.2, 8).unwrap());
        let flux = FluxModel::linear_diffusion();
        let noise = NoiseModel::sine(BoundingBox::new([0.0, 0.0], [1.0, 0.0]), 1, 2, 1.5, Multiplier::Zero).unwrap();
        let a = Stepper::new(&s1, &flux, &noise, SolverConfig::default()).unwrap();
        let b = Stepper::new(&s2, &flux, &noise, SolverConfig::default()).unwrap();
        assert!(coupled_refinement_study(&[a, b], &|_| 0.0, 0, 1, 2.0, 1).is_err());
    }

    #[test]
    fn heat_error_orders() {
        let mut h = Vec::new();
        let mut err = Vec::new();
        for n in [8usize, 16, 32] {
            let gd = GradientDiscretisation::new(&Mesh::uniform_interval(n, 0.0, 1.0).unwrap(), GdKind::P1Conforming).unwrap();
            let hh = 1.0 / n as f64;
            let sgd = SpaceTimeGd::new(gd, 0.1, (0.1 / (hh * hh)).round() as usize).unwrap();
            let flux = FluxModel::linear_diffusion();
            let noise = NoiseModel::sine(BoundingBox::new([0.0, 0.0], [1.0, 0.0]), 1, 1, 1.5, Multiplier::Zero).unwrap();
            let st = Stepper::new(&sgd, &flux, &noise, SolverConfig::default()).unwrap();
            let traj = st.run_deterministic(&sgd.gd.interpolate(|x| (PI * x[0]).sin())).unwrap();
            h.push(hh);
            err.push(max_l2_error(&sgd.gd, &traj, |t, x| (-PI * PI * t).exp() * (PI * x[0]).sin()).unwrap());
        }
        let rep = ConvergenceReport::from_errors(&h, &[0.0; 3], &[7, 15, 31], &err);
        assert!(rep.rows[1..].iter().all(|r| r.order.unwrap() > 1.8), "{rep:?}");
    }
}
