use nalgebra::{DMatrix, DVector};

use super::{affine_combination, GradientDiscretisation, LocalRow, Piece};
use crate::geometry::{Affine, Point, Region};
use crate::linalg::{CsrMatrix, Triplets};

/// Quadrature point of the overlap `(Theta - xi) ∩ Theta`, carrying the rows
/// of `Pi_D v(x + xi)` and of `Pi_D v(x)`.
#[derive(Debug, Clone)]
pub struct OverlapPoint {
    pub weight: f64,
    pub shifted: LocalRow<f64>,
    pub fixed: LocalRow<f64>,
}

/// Overlay of the piece partition with its translate by `-xi`.
#[derive(Debug, Clone)]
pub struct TranslateOverlay {
    xi: Point,
    n_dofs: usize,
    /// `(region, source piece, destination piece)`.
    overlaps: Vec<(Region, usize, usize)>,
    points: Vec<OverlapPoint>,
}

impl TranslateOverlay {
    pub fn new(gd: &GradientDiscretisation, xi: Point) -> Self {
        let pieces = gd.pieces();
        let mut order: Vec<usize> = (0..pieces.len()).collect();
        let boxes: Vec<(Point, Point)> = pieces.iter().map(|p| p.region.bbox()).collect();
        order.sort_by(|&a, &b| boxes[a].0[0].total_cmp(&boxes[b].0[0]));
        let xmins: Vec<f64> = order.iter().map(|&i| boxes[i].0[0]).collect();
        let max_width = boxes.iter().map(|(lo, hi)| hi[0] - lo[0]).fold(0.0, f64::max);
        let tol = 1e-12 * gd.mesh().bbox().diameter();

        let mut overlaps = Vec::new();
        let mut points = Vec::new();
        let mut buf = Vec::new();
        for (si, src) in pieces.iter().enumerate() {
            let moved: Region = src.region.translated([-xi[0], -xi[1]]);
            let (lo, hi) = moved.bbox();
            let start = xmins.partition_point(|&x| x < lo[0] - max_width - tol);
            let end = xmins.partition_point(|&x| x <= hi[0] + tol);
            for &d in &order[start..end] {
                let (dlo, dhi) = boxes[d];
                if dhi[0] < lo[0] - tol || dlo[1] > hi[1] + tol || dhi[1] < lo[1] - tol {
                    continue;
                }
                let dst = &pieces[d];
                if src.basis.is_empty() && dst.basis.is_empty() {
                    continue;
                }
                let Some(overlap) = moved.intersect(&dst.region) else { continue };
                push_points(&overlap, src, dst, xi, &mut buf, &mut points);
                overlaps.push((overlap, si, d));
            }
        }
        TranslateOverlay { xi, n_dofs: gd.n_dofs(), overlaps, points }
    }

    /// Overlap quadrature with every region cut along the zero sets of
    /// `Pi v(. + xi)`, `Pi v` and their difference.
    fn split_points(&self, gd: &GradientDiscretisation, v: &DVector<f64>) -> Vec<OverlapPoint> {
        let pieces = gd.pieces();
        let mut out = Vec::with_capacity(self.points.len());
        let mut buf = Vec::new();
        let mut stack = Vec::new();
        for (region, si, di) in &self.overlaps {
            let (src, dst) = (&pieces[*si], &pieces[*di]);
            let a = affine_combination(&src.basis, v, self.xi);
            let b = affine_combination(&dst.basis, v, [0.0, 0.0]);
            let d = Affine {
                value: a.value - b.value,
                slope: [a.slope[0] - b.slope[0], a.slope[1] - b.slope[1]],
            };
            stack.clear();
            stack.push(region.clone());
            for f in [a, b, d] {
                let mut next = Vec::with_capacity(2 * stack.len());
                for r in stack.drain(..) {
                    let (pos, neg) = r.split_by_sign(&f);
                    next.extend(pos);
                    next.extend(neg);
                }
                stack = next;
            }
            for r in &stack {
                push_points(r, src, dst, self.xi, &mut buf, &mut out);
            }
        }
        out
    }

    pub fn xi(&self) -> Point {
        self.xi
    }

    pub fn points(&self) -> &[OverlapPoint] {
        &self.points
    }

    /// `S_ij = ∫ Pi e_i(x + xi) Pi e_j(x) dx`.
    pub fn cross_matrix(&self) -> CsrMatrix {
        let mut t = Triplets::new(self.n_dofs);
        for q in &self.points {
            for &(i, a) in &q.shifted {
                for &(j, b) in &q.fixed {
                    t.push(i, j, q.weight * a * b);
                }
            }
        }
        t.into_csr()
    }

    /// `∫_{R^d} |Pi v(x + xi) - Pi v(x)|^p dx` with `Pi v` extended by zero.
    pub fn difference_pow(&self, gd: &GradientDiscretisation, v: &DVector<f64>, p: f64) -> f64 {
        let inside = gd.lp_pow(v, p);
        let split;
        let points = if p == 2.0 {
            &self.points
        } else {
            split = self.split_points(gd, v);
            &split
        };
        let overlap: f64 = points
            .iter()
            .map(|q| {
                let a = row_eval(&q.shifted, v);
                let b = row_eval(&q.fixed, v);
                q.weight * ((a - b).abs().powf(p) - a.abs().powf(p) - b.abs().powf(p))
            })
            .sum();
        (2.0 * inside + overlap).max(0.0)
    }

    /// Quadratic form whose value at `v` equals [`Self::difference_pow`]
    /// when the weights are `|.|^(p-2)` evaluated at `v`.
    pub(crate) fn weighted_form(
        &self,
        gd: &GradientDiscretisation,
        v: &DVector<f64>,
        p: f64,
        floor: f64,
    ) -> DMatrix<f64> {
        let n = self.n_dofs;
        let mut a = DMatrix::zeros(n, n);
        let wt = |s: f64| s.abs().max(floor).powf(p - 2.0);
        for q in &gd.sign_split_quadrature(v) {
            let w = 2.0 * q.weight * wt(q.eval(v));
            add_outer(&mut a, &q.basis, &q.basis, w);
        }
        for q in &self.split_points(gd, v) {
            let s = row_eval(&q.shifted, v);
            let f = row_eval(&q.fixed, v);
            let wd = q.weight * wt(s - f);
            add_outer(&mut a, &q.shifted, &q.shifted, wd - q.weight * wt(s));
            add_outer(&mut a, &q.fixed, &q.fixed, wd - q.weight * wt(f));
            add_outer(&mut a, &q.shifted, &q.fixed, -wd);
            add_outer(&mut a, &q.fixed, &q.shifted, -wd);
        }
        a
    }
}

fn push_points(
    region: &Region,
    src: &Piece,
    dst: &Piece,
    xi: Point,
    buf: &mut Vec<(Point, f64)>,
    out: &mut Vec<OverlapPoint>,
) {
    buf.clear();
    region.quadrature_into(buf);
    for &(x, w) in buf.iter() {
        let shifted = src.row_at([x[0] + xi[0], x[1] + xi[1]]);
        let fixed = dst.row_at(x);
        out.push(OverlapPoint { weight: w, shifted, fixed });
    }
}

#[inline]
pub(crate) fn row_eval(row: &LocalRow<f64>, v: &DVector<f64>) -> f64 {
    row.iter().map(|(i, b)| v[*i] * b).sum()
}

pub(crate) fn add_outer(a: &mut DMatrix<f64>, r: &LocalRow<f64>, s: &LocalRow<f64>, w: f64) {
    for &(i, bi) in r {
        for &(j, bj) in s {
            a[(i, j)] += w * bi * bj;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gd::GdKind;
    use crate::mesh::{BoundingBox, Mesh};

    fn brute_difference(gd: &GradientDiscretisation, v: &DVector<f64>, xi: Point, p: f64) -> f64 {
        // midpoint rule on a fine grid over the enlarged box, pointwise
        // reconstruction with zero extension
        let eval = |x: Point| gd.reconstruct_at(v, x).unwrap_or(0.0);
        let n = 200_000;
        let (a, b) = (-2.0, 2.0);
        let h = (b - a) / n as f64;
        (0..n)
            .map(|k| {
                let x = a + (k as f64 + 0.5) * h;
                h * (eval([x + xi[0], 0.0]) - eval([x, 0.0])).abs().powf(p)
            })
            .sum()
    }

    #[test]
    fn one_dimensional_difference_matches_fine_sampling() {
        let m = Mesh::uniform_interval(5, 0.0, 1.0).unwrap();
        for kind in [GdKind::P1Conforming, GdKind::P1MassLumped] {
            let gd = GradientDiscretisation::new(&m, kind).unwrap();
            let v = DVector::from_vec(vec![0.3, -1.0, 0.7, 0.2]);
            for xi in [0.03, 0.2, 0.55, 1.4] {
                let ov = TranslateOverlay::new(&gd, [xi, 0.0]);
                for p in [2.0, 3.0] {
                    let exact = ov.difference_pow(&gd, &v, p);
                    let brute = brute_difference(&gd, &v, [xi, 0.0], p);
                    assert!((exact - brute).abs() < 1e-4 * (1.0 + brute), "{kind} {xi} {p} {exact} {brute}");
                }
            }
        }
    }

    #[test]
    fn quadratic_form_reproduces_l2_difference() {
        let m = Mesh::uniform_rectangle(3, 3, BoundingBox::unit_square()).unwrap();
        for kind in [GdKind::P1Conforming, GdKind::P1MassLumped, GdKind::CrouzeixRaviart] {
            let gd = GradientDiscretisation::new(&m, kind).unwrap();
            let xi = [0.13, -0.07];
            let ov = TranslateOverlay::new(&gd, xi);
            let v = DVector::from_fn(gd.n_dofs(), |i, _| ((i * 7 + 3) as f64).sin());
            let s = ov.cross_matrix();
            let quad = 2.0 * gd.mass_matrix().bilinear(&v, &v) - 2.0 * s.bilinear(&v, &v);
            let direct = ov.difference_pow(&gd, &v, 2.0);
            assert!((quad - direct).abs() < 1e-12, "{kind}");
            let form = ov.weighted_form(&gd, &v, 3.0, 0.0);
            let via_form = v.dot(&(&form * &v));
            assert!((via_form - ov.difference_pow(&gd, &v, 3.0)).abs() < 1e-12, "{kind}");
        }
    }

    #[test]
    fn zero_shift_has_no_difference() {
        let m = Mesh::uniform_rectangle(2, 3, BoundingBox::unit_square()).unwrap();
        let gd = GradientDiscretisation::new(&m, GdKind::P1Conforming).unwrap();
        let ov = TranslateOverlay::new(&gd, [0.0, 0.0]);
        let v = DVector::from_fn(gd.n_dofs(), |i, _| i as f64 - 0.5);
        assert!(ov.difference_pow(&gd, &v, 2.0).abs() < 1e-13);
    }

    fn v_far() -> DVector<f64> {
        DVector::from_vec(vec![1.0, 2.0, -1.0])
    }

    #[test]
    fn far_shift_doubles_the_norm() {
        let m = Mesh::uniform_interval(4, 0.0, 1.0).unwrap();
        let gd = GradientDiscretisation::new(&m, GdKind::P1Conforming).unwrap();
        let ov = TranslateOverlay::new(&gd, [3.0, 0.0]);
        assert!(ov.points().is_empty());
        assert!(ov.difference_pow(&gd, &v_far(), 3.0) > 0.0);
        let v = DVector::from_vec(vec![1.0, 2.0, -1.0]);
        let l2 = gd.lp_norm(&v, 2.0).unwrap();
        assert!((ov.difference_pow(&gd, &v, 2.0) - 2.0 * l2 * l2).abs() < 1e-13);
    }
}
