//! Sparse assembly and direct solvers for the symmetric positive definite
//! systems arising from the gradient discretisations, plus dense
//! generalized eigen helpers for the small indicator problems.
//!
//! The sparse factorisation is an envelope (profile) Cholesky applied after
//! a reverse Cuthill-McKee reordering.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Coordinate-format accumulator; duplicates are summed on conversion.
#[derive(Debug, Clone, Default)]
pub struct Triplets {
    n: usize,
    entries: Vec<(usize, usize, f64)>,
}

impl Triplets {
    pub fn new(n: usize) -> Self {
        Triplets { n, entries: Vec::new() }
    }

    #[inline]
    pub fn push(&mut self, i: usize, j: usize, v: f64) {
        debug_assert!(i < self.n && j < self.n);
        self.entries.push((i, j, v));
    }

    pub fn into_csr(mut self) -> CsrMatrix {
        self.entries.sort_unstable_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        let mut row_ptr = vec![0usize; self.n + 1];
        let mut cols = Vec::with_capacity(self.entries.len());
        let mut vals: Vec<f64> = Vec::with_capacity(self.entries.len());
        let mut last: Option<(usize, usize)> = None;
        for (i, j, v) in self.entries {
            if last == Some((i, j)) {
                *vals.last_mut().unwrap() += v;
            } else {
                cols.push(j);
                vals.push(v);
                row_ptr[i + 1] += 1;
                last = Some((i, j));
            }
        }
        for i in 0..self.n {
            row_ptr[i + 1] += row_ptr[i];
        }
        CsrMatrix { n: self.n, row_ptr, cols, vals }
    }
}

/// Square compressed-row matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    n: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
}

impl CsrMatrix {
    pub fn zeros(n: usize) -> Self {
        Triplets::new(n).into_csr()
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Triplets::new(n);
        for i in 0..n {
            t.push(i, i, 1.0);
        }
        t.into_csr()
    }

    pub fn nrows(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        self.cols[r.clone()].iter().copied().zip(self.vals[r].iter().copied())
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.row(i).find(|&(c, _)| c == j).map_or(0.0, |(_, v)| v)
    }

    pub fn mul_vec(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(self.n, (0..self.n).map(|i| self.row(i).map(|(j, v)| v * x[j]).sum()))
    }

    /// `x^T A y`.
    pub fn bilinear(&self, x: &DVector<f64>, y: &DVector<f64>) -> f64 {
        (0..self.n).map(|i| x[i] * self.row(i).map(|(j, v)| v * y[j]).sum::<f64>()).sum()
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.n, self.n);
        for i in 0..self.n {
            for (j, v) in self.row(i) {
                m[(i, j)] += v;
            }
        }
        m
    }

    /// `alpha * self + beta * other` on the union pattern.
    pub fn add_scaled(&self, alpha: f64, other: &CsrMatrix, beta: f64) -> CsrMatrix {
        assert_eq!(self.n, other.n);
        let mut t = Triplets::new(self.n);
        for i in 0..self.n {
            for (j, v) in self.row(i) {
                t.push(i, j, alpha * v);
            }
            for (j, v) in other.row(i) {
                t.push(i, j, beta * v);
            }
        }
        t.into_csr()
    }

    /// Storage index of entry `(i, j)` if it is in the pattern.
    pub fn position(&self, i: usize, j: usize) -> Option<usize> {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        self.cols[r.clone()].binary_search(&j).ok().map(|k| r.start + k)
    }

    pub fn values(&self) -> &[f64] {
        &self.vals
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.vals
    }

    pub fn diagonal(&self) -> DVector<f64> {
        DVector::from_iterator(self.n, (0..self.n).map(|i| self.get(i, i)))
    }
}

/// Envelope Cholesky factor `P A P^T = L L^T` of a symmetric positive
/// definite matrix.
#[derive(Debug, Clone)]
pub struct SparseCholesky {
    n: usize,
    /// new index -> old index
    perm: Vec<usize>,
    inv: Vec<usize>,
    /// first column stored in each (permuted) row
    first: Vec<usize>,
    /// row offsets into `data`; row i holds columns first[i]..=i
    offset: Vec<usize>,
    data: Vec<f64>,
}

impl SparseCholesky {
    pub fn factor(a: &CsrMatrix) -> Result<Self> {
        let n = a.nrows();
        let perm = reverse_cuthill_mckee(a);
        let mut inv = vec![0usize; n];
        for (new, &old) in perm.iter().enumerate() {
            inv[old] = new;
        }
        let mut first: Vec<usize> = (0..n).collect();
        for old in 0..n {
            let i = inv[old];
            for (c, _) in a.row(old) {
                let j = inv[c];
                if j < i {
                    first[i] = first[i].min(j);
                }
            }
        }
        let mut offset = vec![0usize; n + 1];
        for i in 0..n {
            offset[i + 1] = offset[i] + (i - first[i] + 1);
        }
        let mut chol = SparseCholesky { n, perm, inv, first, offset, data: Vec::new() };
        chol.numeric(a)?;
        Ok(chol)
    }

    /// Refactors a matrix whose pattern fits the envelope of the original
    /// ordering; falls back to a fresh symbolic analysis otherwise.
    pub fn refactor(&mut self, a: &CsrMatrix) -> Result<()> {
        if a.nrows() != self.n || !self.fits(a) {
            *self = Self::factor(a)?;
            return Ok(());
        }
        self.numeric(a)
    }

    fn fits(&self, a: &CsrMatrix) -> bool {
        (0..self.n).all(|old| {
            let i = self.inv[old];
            a.row(old).all(|(c, _)| {
                let j = self.inv[c];
                j > i || j >= self.first[i]
            })
        })
    }

    fn numeric(&mut self, a: &CsrMatrix) -> Result<()> {
        let n = self.n;
        let (perm, inv, first, offset) = (&self.perm, &self.inv, &self.first, &self.offset);
        let data = &mut self.data;
        data.clear();
        data.resize(offset[n], 0.0);
        for old in 0..n {
            let i = inv[old];
            for (c, v) in a.row(old) {
                let j = inv[c];
                if j <= i {
                    data[offset[i] + j - first[i]] += v;
                }
            }
        }

        for i in 0..n {
            let fi = first[i];
            for j in fi..=i {
                let fj = first[j];
                let k0 = fi.max(fj);
                let mut s = data[offset[i] + j - fi];
                let ri = offset[i] - fi;
                let rj = offset[j] - fj;
                for k in k0..j {
                    s -= data[ri + k] * data[rj + k];
                }
                if j < i {
                    data[ri + j] = s / data[rj + j];
                } else {
                    if !(s > 0.0) || !s.is_finite() {
                        return Err(Error::NotPositiveDefinite { pivot: perm[i], value: s });
                    }
                    data[ri + i] = s.sqrt();
                }
            }
        }
        Ok(())
    }

    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        let n = self.n;
        let mut y: Vec<f64> = self.perm.iter().map(|&old| b[old]).collect();
        for i in 0..n {
            let fi = self.first[i];
            let r = self.offset[i] - fi;
            let mut s = y[i];
            for k in fi..i {
                s -= self.data[r + k] * y[k];
            }
            y[i] = s / self.data[r + i];
        }
        for i in (0..n).rev() {
            let fi = self.first[i];
            let r = self.offset[i] - fi;
            y[i] /= self.data[r + i];
            let yi = y[i];
            for k in fi..i {
                y[k] -= self.data[r + k] * yi;
            }
        }
        let mut x = DVector::zeros(n);
        for (new, &old) in self.perm.iter().enumerate() {
            x[old] = y[new];
        }
        x
    }
}

/// Solves `A x = b` for symmetric positive definite `A`.
pub fn spd_solve(a: &CsrMatrix, b: &DVector<f64>) -> Result<DVector<f64>> {
    Ok(SparseCholesky::factor(a)?.solve(b))
}

fn reverse_cuthill_mckee(a: &CsrMatrix) -> Vec<usize> {
    let n = a.nrows();
    let degree: Vec<usize> = (0..n).map(|i| a.row(i).filter(|&(j, _)| j != i).count()).collect();
    let mut visited = vec![false; n];
    let mut order = Vec::with_capacity(n);
    let mut nodes: Vec<usize> = (0..n).collect();
    nodes.sort_by_key(|&i| (degree[i], i));
    for &start in &nodes {
        if visited[start] {
            continue;
        }
        let root = pseudo_peripheral(a, start, &degree);
        let mut queue = VecDeque::from([root]);
        visited[root] = true;
        while let Some(v) = queue.pop_front() {
            order.push(v);
            let mut nbrs: Vec<usize> = a.row(v).map(|(j, _)| j).filter(|&j| !visited[j]).collect();
            nbrs.sort_by_key(|&j| (degree[j], j));
            for j in nbrs {
                if !visited[j] {
                    visited[j] = true;
                    queue.push_back(j);
                }
            }
        }
    }
    order.reverse();
    order
}

fn pseudo_peripheral(a: &CsrMatrix, start: usize, degree: &[usize]) -> usize {
    let mut root = start;
    let mut ecc = 0;
    for _ in 0..4 {
        let levels = bfs_levels(a, root);
        let max_level = levels.iter().filter_map(|l| *l).max().unwrap_or(0);
        if max_level <= ecc && ecc > 0 {
            break;
        }
        ecc = max_level;
        let candidate = (0..a.nrows())
            .filter(|&i| levels[i] == Some(max_level))
            .min_by_key(|&i| (degree[i], i))
            .unwrap_or(root);
        if candidate == root {
            break;
        }
        root = candidate;
    }
    root
}

fn bfs_levels(a: &CsrMatrix, root: usize) -> Vec<Option<usize>> {
    let mut level = vec![None; a.nrows()];
    level[root] = Some(0);
    let mut queue = VecDeque::from([root]);
    while let Some(v) = queue.pop_front() {
        let lv = level[v].unwrap();
        for (j, _) in a.row(v) {
            if level[j].is_none() {
                level[j] = Some(lv + 1);
                queue.push_back(j);
            }
        }
    }
    level
}

/// Largest eigenpair of the symmetric-definite pencil `A v = lambda B v`
/// (`A` symmetric, `B` symmetric positive definite).
pub fn max_generalized_eigen(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<(f64, DVector<f64>)> {
    let n = a.nrows();
    let chol = nalgebra::Cholesky::new(b.clone()).ok_or(Error::NotPositiveDefinite {
        pivot: 0,
        value: f64::NAN,
    })?;
    let l = chol.l();
    // C = L^{-1} A L^{-T}
    let linv_a = l
        .solve_lower_triangular(a)
        .expect("Cholesky factor is invertible");
    let c = l
        .solve_lower_triangular(&linv_a.transpose())
        .expect("Cholesky factor is invertible");
    let c = 0.5 * (&c + c.transpose());
    let eig = nalgebra::SymmetricEigen::new(c);
    let (k, &lambda) = eig
        .eigenvalues
        .iter()
        .enumerate()
        .max_by(|x, y| x.1.total_cmp(y.1))
        .expect("non-empty pencil");
    let y = eig.eigenvectors.column(k).into_owned();
    let v = l
        .transpose()
        .solve_upper_triangular(&y)
        .expect("Cholesky factor is invertible");
    debug_assert_eq!(v.len(), n);
    Ok((lambda, v))
}
