//! Gradient discretisations: a discrete space with homogeneous Dirichlet
//! conditions, a function reconstruction, a piecewise-constant gradient
//! reconstruction and an interpolation operator.
//!
//! Every reconstruction is described by *pieces*: convex sub-regions of a
//! cell on which the reconstructed function is affine in `x`. All integrals
//! are computed by a degree-4 rule on the pieces, which is exact for products
//! of two reconstructions.

mod indicators;
mod translate;

pub use indicators::{
    indicator_t, indicator_w, interpolate_best, poincare_constant, BestInterpolation,
    IndicatorValue, IrlsOptions,
};
pub use translate::TranslateOverlay;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use smallvec::SmallVec;

use crate::error::{invalid, Error, Result};
use crate::geometry::{Affine, Point, Region};
use crate::linalg::{CsrMatrix, Triplets};
use crate::mesh::Mesh;

/// Element of the discrete space `X_{D,0}`: one coefficient per DOF.
pub type DiscreteVector = DVector<f64>;

/// Sparse row `(dof, coefficient)` with at most `dim + 1` entries.
pub type LocalRow<T> = SmallVec<[(usize, T); 3]>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GdKind {
    /// Nodal hat functions.
    P1Conforming,
    /// Nodal gradients with a piecewise-constant reconstruction on the dual
    /// cells around each vertex.
    P1MassLumped,
    /// Edge-midpoint DOFs with broken linear reconstruction and gradient.
    CrouzeixRaviart,
}

impl std::fmt::Display for GdKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            GdKind::P1Conforming => "p1-conforming",
            GdKind::P1MassLumped => "p1-mass-lumped",
            GdKind::CrouzeixRaviart => "crouzeix-raviart",
        })
    }
}

/// Part of a cell on which the function reconstruction is affine.
#[derive(Debug, Clone)]
pub struct Piece {
    pub cell: usize,
    pub region: Region,
    pub basis: LocalRow<Affine>,
}

impl Piece {
    #[inline]
    pub fn eval(&self, v: &DiscreteVector, x: Point) -> f64 {
        self.basis.iter().map(|(i, a)| v[*i] * a.eval(x)).sum()
    }

    pub fn row_at(&self, x: Point) -> LocalRow<f64> {
        self.basis.iter().map(|(i, a)| (*i, a.eval(x))).collect()
    }
}

/// Quadrature point carrying the reconstruction row at that point.
#[derive(Debug, Clone)]
pub struct QuadPoint {
    pub x: Point,
    pub weight: f64,
    pub cell: usize,
    pub basis: LocalRow<f64>,
}

impl QuadPoint {
    #[inline]
    pub fn eval(&self, v: &DiscreteVector) -> f64 {
        self.basis.iter().map(|(i, b)| v[*i] * b).sum()
    }
}

#[derive(Debug, Clone)]
pub struct GradientDiscretisation {
    mesh: Mesh,
    kind: GdKind,
    n_dofs: usize,
    dof_points: Vec<Point>,
    cell_measure: Vec<f64>,
    cell_grads: Vec<LocalRow<Point>>,
    pieces: Vec<Piece>,
    quad: Vec<QuadPoint>,
    cell_quad: Vec<std::ops::Range<usize>>,
    mass: CsrMatrix,
    stiffness: CsrMatrix,
}

impl GradientDiscretisation {
    pub fn new(mesh: &Mesh, kind: GdKind) -> Result<Self> {
        let dim = mesh.dim();
        let nc = mesh.n_cells();
        let mut dof_points = Vec::new();
        let mut cell_grads = Vec::with_capacity(nc);
        let mut pieces = Vec::with_capacity(nc);

        let use_edges = kind == GdKind::CrouzeixRaviart && dim == 2;
        let dof_of: Vec<Option<usize>> = if use_edges {
            let mut next = 0;
            mesh.edges()
                .iter()
                .enumerate()
                .map(|(e, &[a, b])| {
                    (!mesh.is_boundary_edge(e)).then(|| {
                        let (pa, pb) = (mesh.vertices()[a], mesh.vertices()[b]);
                        dof_points.push([0.5 * (pa[0] + pb[0]), 0.5 * (pa[1] + pb[1])]);
                        next += 1;
                        next - 1
                    })
                })
                .collect()
        } else {
            let mut next = 0;
            (0..mesh.n_vertices())
                .map(|v| {
                    (!mesh.is_boundary_vertex(v)).then(|| {
                        dof_points.push(mesh.vertices()[v]);
                        next += 1;
                        next - 1
                    })
                })
                .collect()
        };
        let n_dofs = dof_points.len();

        for c in 0..nc {
            let pts = mesh.cell_points(c);
            let bary = barycentric(dim, &pts);
            let verts = mesh.cell(c);
            let mut grads = LocalRow::new();
            let mut basis = LocalRow::new();
            if use_edges {
                let edges = mesh.cell_edges(c);
                for i in 0..3 {
                    if let Some(d) = dof_of[edges[i]] {
                        let l = bary[i];
                        grads.push((d, [-2.0 * l.slope[0], -2.0 * l.slope[1]]));
                        basis.push((d, Affine { value: 1.0 - 2.0 * l.value, slope: [-2.0 * l.slope[0], -2.0 * l.slope[1]] }));
                    }
                }
            } else {
                for (i, &v) in verts.iter().enumerate() {
                    if let Some(d) = dof_of[v] {
                        grads.push((d, bary[i].slope));
                        basis.push((d, bary[i]));
                    }
                }
            }
            cell_grads.push(grads);

            if kind == GdKind::P1MassLumped {
                for (i, &v) in verts.iter().enumerate() {
                    let region = dual_piece(dim, &pts, i);
                    let basis = dof_of[v].map(|d| (d, Affine::constant(1.0))).into_iter().collect();
                    pieces.push(Piece { cell: c, region, basis });
                }
            } else {
                pieces.push(Piece { cell: c, region: mesh.cell_region(c), basis });
            }
        }

        let mut quad = Vec::new();
        let mut cell_quad = vec![0..0; nc];
        let mut buf = Vec::new();
        for piece in &pieces {
            let start = quad.len();
            buf.clear();
            piece.region.quadrature_into(&mut buf);
            for &(x, w) in &buf {
                quad.push(QuadPoint { x, weight: w, cell: piece.cell, basis: piece.row_at(x) });
            }
            let r = &mut cell_quad[piece.cell];
            if r.start == r.end {
                *r = start..quad.len();
            } else {
                r.end = quad.len();
            }
        }

        let cell_measure: Vec<f64> = (0..nc).map(|c| mesh.cell_measure(c)).collect();
        let mut mt = Triplets::new(n_dofs);
        for q in &quad {
            for &(i, bi) in &q.basis {
                for &(j, bj) in &q.basis {
                    mt.push(i, j, q.weight * bi * bj);
                }
            }
        }
        let mut kt = Triplets::new(n_dofs);
        for (c, grads) in cell_grads.iter().enumerate() {
            for &(i, gi) in grads {
                for &(j, gj) in grads {
                    kt.push(i, j, cell_measure[c] * (gi[0] * gj[0] + gi[1] * gj[1]));
                }
            }
        }

        Ok(GradientDiscretisation {
            mesh: mesh.clone(),
            kind,
            n_dofs,
            dof_points,
            cell_measure,
            cell_grads,
            pieces,
            quad,
            cell_quad,
            mass: mt.into_csr(),
            stiffness: kt.into_csr(),
        })
    }

    pub fn mesh(&self) -> &Mesh {
        &self.mesh
    }

    pub fn kind(&self) -> GdKind {
        self.kind
    }

    pub fn dim(&self) -> usize {
        self.mesh.dim()
    }

    pub fn n_dofs(&self) -> usize {
        self.n_dofs
    }

    /// Location of each DOF (interior vertex or interior edge midpoint).
    pub fn dof_points(&self) -> &[Point] {
        &self.dof_points
    }

    pub fn pieces(&self) -> &[Piece] {
        &self.pieces
    }

    pub fn quad_points(&self) -> &[QuadPoint] {
        &self.quad
    }

    pub fn cell_quad_points(&self, c: usize) -> &[QuadPoint] {
        &self.quad[self.cell_quad[c].clone()]
    }

    pub fn cell_measure(&self, c: usize) -> f64 {
        self.cell_measure[c]
    }

    /// Gradient of each DOF's basis function on cell `c`.
    pub fn cell_gradient_row(&self, c: usize) -> &LocalRow<Point> {
        &self.cell_grads[c]
    }

    /// `M_ij = <Pi e_i, Pi e_j>_{L^2}`.
    pub fn mass_matrix(&self) -> &CsrMatrix {
        &self.mass
    }

    /// `K_ij = <grad e_i, grad e_j>_{L^2}`.
    pub fn stiffness_matrix(&self) -> &CsrMatrix {
        &self.stiffness
    }

    pub fn zeros(&self) -> DiscreteVector {
        DVector::zeros(self.n_dofs)
    }

    pub fn check_len(&self, v: &DiscreteVector) -> Result<()> {
        if v.len() != self.n_dofs {
            return Err(Error::DimensionMismatch { expected: self.n_dofs, got: v.len() });
        }
        Ok(())
    }

    /// Evaluates `Pi_D v` at a point of the domain.
    pub fn reconstruct_at(&self, v: &DiscreteVector, x: Point) -> Result<f64> {
        self.check_len(v)?;
        let piece = self.locate(x).ok_or(Error::OutsideDomain { x: x[0], y: x[1] })?;
        Ok(self.pieces[piece].eval(v, x))
    }

    /// Index of a piece containing `x`.
    pub fn locate(&self, x: Point) -> Option<usize> {
        let tol = 1e-12 * self.mesh.bbox().diameter().max(1.0);
        self.pieces.iter().position(|p| p.region.contains(x, tol))
    }

    /// `Pi_D v` at every quadrature point.
    pub fn reconstruct_at_quadrature(&self, v: &DiscreteVector) -> Result<Vec<f64>> {
        self.check_len(v)?;
        Ok(self.quad.iter().map(|q| q.eval(v)).collect())
    }

    /// `grad_D v` on every cell.
    pub fn reconstruct_gradient(&self, v: &DiscreteVector) -> Result<Vec<Point>> {
        self.check_len(v)?;
        Ok((0..self.mesh.n_cells()).map(|c| self.cell_gradient(v, c)).collect())
    }

    #[inline]
    pub fn cell_gradient(&self, v: &DiscreteVector, c: usize) -> Point {
        let mut g = [0.0; 2];
        for &(i, gi) in &self.cell_grads[c] {
            g[0] += v[i] * gi[0];
            g[1] += v[i] * gi[1];
        }
        g
    }

    /// `I_D u0`: samples at vertices (P1 kinds) or edge midpoints
    /// (Crouzeix-Raviart).
    pub fn interpolate(&self, u0: impl Fn(Point) -> f64) -> DiscreteVector {
        DVector::from_iterator(self.n_dofs, self.dof_points.iter().map(|&x| u0(x)))
    }

    /// `||Pi_D v||_{L^p}`.
    pub fn lp_norm(&self, v: &DiscreteVector, p: f64) -> Result<f64> {
        check_exponent(p)?;
        self.check_len(v)?;
        if p == 2.0 {
            return Ok(self.mass.bilinear(v, v).max(0.0).sqrt());
        }
        Ok(self.lp_pow(v, p).powf(1.0 / p))
    }

    /// `||Pi_D v||_{L^p}^p`, integrated on the pieces split along the zero
    /// set of `Pi_D v` (exact for integer `p <= 4`).
    pub fn lp_pow(&self, v: &DiscreteVector, p: f64) -> f64 {
        if p == 2.0 || p == 4.0 {
            return self.quad.iter().map(|q| q.weight * q.eval(v).abs().powf(p)).sum();
        }
        self.sign_split_quadrature(v).iter().map(|q| q.weight * q.eval(v).abs().powf(p)).sum()
    }

    /// `Pi_D v` restricted to a piece.
    pub fn piece_affine(&self, piece: usize, v: &DiscreteVector) -> Affine {
        affine_combination(&self.pieces[piece].basis, v, [0.0, 0.0])
    }

    /// Quadrature points of the pieces cut along the zero set of `Pi_D v`.
    pub fn sign_split_quadrature(&self, v: &DiscreteVector) -> Vec<QuadPoint> {
        let mut out = Vec::with_capacity(self.quad.len());
        let mut buf = Vec::new();
        for (k, piece) in self.pieces.iter().enumerate() {
            let f = self.piece_affine(k, v);
            let (pos, neg) = piece.region.split_by_sign(&f);
            for region in [pos, neg].into_iter().flatten() {
                buf.clear();
                region.quadrature_into(&mut buf);
                for &(x, w) in &buf {
                    out.push(QuadPoint { x, weight: w, cell: piece.cell, basis: piece.row_at(x) });
                }
            }
        }
        out
    }

    /// `||grad_D v||_{L^p}` (exact, the gradient being piecewise constant).
    pub fn grad_lp_norm(&self, v: &DiscreteVector, p: f64) -> Result<f64> {
        check_exponent(p)?;
        self.check_len(v)?;
        Ok(self.grad_lp_pow(v, p).powf(1.0 / p))
    }

    /// `||grad_D v||_{L^p}^p`.
    pub fn grad_lp_pow(&self, v: &DiscreteVector, p: f64) -> f64 {
        (0..self.mesh.n_cells())
            .map(|c| {
                let g = self.cell_gradient(v, c);
                self.cell_measure[c] * (g[0] * g[0] + g[1] * g[1]).powf(0.5 * p)
            })
            .sum()
    }

    /// `<Pi_D v, Pi_D w>_{L^2}`.
    pub fn l2_inner(&self, v: &DiscreteVector, w: &DiscreteVector) -> Result<f64> {
        self.check_len(v)?;
        self.check_len(w)?;
        Ok(0.5 * (self.mass.bilinear(v, w) + self.mass.bilinear(w, v)))
    }

    /// `||Pi_D v - f||_{L^p}` by quadrature.
    pub fn lp_error(&self, v: &DiscreteVector, f: impl Fn(Point) -> f64, p: f64) -> Result<f64> {
        check_exponent(p)?;
        self.check_len(v)?;
        let s: f64 = self.quad.iter().map(|q| q.weight * (q.eval(v) - f(q.x)).abs().powf(p)).sum();
        Ok(s.powf(1.0 / p))
    }

    /// `<f, Pi_D e_i>_{L^2}` for every DOF.
    pub fn load_vector(&self, f: impl Fn(Point) -> f64) -> DiscreteVector {
        let mut b = self.zeros();
        for q in &self.quad {
            let fx = f(q.x);
            for &(i, bi) in &q.basis {
                b[i] += q.weight * fx * bi;
            }
        }
        b
    }
}

/// `x -> sum_i v_i b_i(x + shift)` as an affine function of `x`.
pub(crate) fn affine_combination(basis: &LocalRow<Affine>, v: &DiscreteVector, shift: Point) -> Affine {
    let mut out = Affine::constant(0.0);
    for (i, b) in basis {
        out.value += v[*i] * b.eval(shift);
        out.slope[0] += v[*i] * b.slope[0];
        out.slope[1] += v[*i] * b.slope[1];
    }
    out
}

pub(crate) fn check_exponent(p: f64) -> Result<()> {
    if !(p >= 1.0) || !p.is_finite() {
        return Err(invalid(format!("exponent must be a finite real >= 1 (got {p})")));
    }
    Ok(())
}

/// Barycentric coordinates of a simplex as affine functions.
fn barycentric(dim: usize, pts: &[Point]) -> Vec<Affine> {
    match dim {
        1 => {
            let (a, b) = (pts[0][0], pts[1][0]);
            let h = b - a;
            vec![
                Affine { value: b / h, slope: [-1.0 / h, 0.0] },
                Affine { value: -a / h, slope: [1.0 / h, 0.0] },
            ]
        }
        _ => {
            let twice_area = crate::geometry::cross(pts[0], pts[1], pts[2]);
            (0..3)
                .map(|i| {
                    let p = pts[(i + 1) % 3];
                    let q = pts[(i + 2) % 3];
                    // lambda_i(x) = cross(p, q, x) / (2 |T|)
                    let slope = [(p[1] - q[1]) / twice_area, (q[0] - p[0]) / twice_area];
                    let value = (p[0] * q[1] - q[0] * p[1]) / twice_area;
                    Affine { value, slope }
                })
                .collect()
        }
    }
}

/// Part of a simplex closest (in the barycentric sense) to local vertex `i`.
fn dual_piece(dim: usize, pts: &[Point], i: usize) -> Region {
    match dim {
        1 => {
            let m = 0.5 * (pts[0][0] + pts[1][0]);
            if i == 0 {
                Region::Interval(pts[0][0], m)
            } else {
                Region::Interval(m, pts[1][0])
            }
        }
        _ => {
            let v = pts[i];
            let a = pts[(i + 1) % 3];
            let b = pts[(i + 2) % 3];
            let mid = |p: Point, q: Point| [0.5 * (p[0] + q[0]), 0.5 * (p[1] + q[1])];
            let g = [(v[0] + a[0] + b[0]) / 3.0, (v[1] + a[1] + b[1]) / 3.0];
            Region::Polygon(vec![v, mid(v, a), g, mid(v, b)])
        }
    }
}

/// A gradient discretisation together with a uniform time grid.
#[derive(Debug, Clone)]
pub struct SpaceTimeGd {
    pub gd: GradientDiscretisation,
    t_final: f64,
    n_steps: usize,
}

impl SpaceTimeGd {
    pub fn new(gd: GradientDiscretisation, t_final: f64, n_steps: usize) -> Result<Self> {
        if n_steps == 0 {
            return Err(invalid("number of time steps must be positive"));
        }
        if !(t_final > 0.0) || !t_final.is_finite() {
            return Err(invalid(format!("final time must be positive (got {t_final})")));
        }
        Ok(SpaceTimeGd { gd, t_final, n_steps })
    }

    pub fn t_final(&self) -> f64 {
        self.t_final
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn dt(&self) -> f64 {
        self.t_final / self.n_steps as f64
    }

    /// `t^(n) = n * dt` for `n = 0..=N`.
    pub fn time(&self, n: usize) -> f64 {
        if n == self.n_steps {
            self.t_final
        } else {
            n as f64 * self.dt()
        }
    }
}
