//! Implicit-Euler gradient scheme: for every test vector `phi`,
//! `<Pi(u^{n+1} - u^n), Pi phi> + dt <a(Pi u^{n+1}, grad u^{n+1}), grad phi>
//!   = <f(Pi u^n) dW^{n+1}, Pi phi>`.

use std::io::Write as _;
use std::path::Path;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::flux::FluxModel;
use crate::gd::{DiscreteVector, SpaceTimeGd};
use crate::linalg::{CsrMatrix, SparseCholesky};
use crate::noise::{NoiseIncrement, NoiseModel, NoiseOnGd};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    /// Euclidean norm of the residual vector at which a step is accepted.
    pub newton_tol: f64,
    pub max_newton: usize,
    pub max_fixed_point: usize,
    pub line_search_shrink: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig { newton_tol: 1e-10, max_newton: 30, max_fixed_point: 200, line_search_shrink: 0.5 }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.newton_tol > 0.0) {
            return Err(invalid("solver.newton_tol must be positive"));
        }
        if self.max_newton == 0 && self.max_fixed_point == 0 {
            return Err(invalid("solver needs at least one Newton or fixed-point iteration"));
        }
        if !(self.line_search_shrink > 0.0 && self.line_search_shrink < 1.0) {
            return Err(invalid("solver.line_search_shrink must lie in (0, 1)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub u: DiscreteVector,
    pub residual: f64,
    pub iterations: usize,
    /// Whether the fixed-point fallback was needed.
    pub fallback: bool,
}

/// How the Wiener increments of a trajectory are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunSpec {
    pub master_seed: u64,
    pub sample: u64,
    /// Fine increments summed per step (1 = no coupling).
    pub substeps: u64,
}

impl RunSpec {
    pub fn new(master_seed: u64, sample: u64) -> Self {
        RunSpec { master_seed, sample, substeps: 1 }
    }

    pub fn with_substeps(mut self, substeps: u64) -> Self {
        self.substeps = substeps;
        self
    }
}

/// One sample path `u^(0..N)` with the partial sums of the noise term.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub u: Vec<DiscreteVector>,
    /// `m_partial[n] = sum_{i <= n} f(Pi u^i) dW^{i+1}` at the quadrature
    /// points, `n = 0..N-1`.
    pub m_partial: Vec<Vec<f64>>,
    pub increments: Vec<NoiseIncrement>,
    pub residuals: Vec<f64>,
    pub newton_iters: Vec<usize>,
    pub spec: Option<RunSpec>,
    pub dt: f64,
}

impl Trajectory {
    pub fn n_steps(&self) -> usize {
        self.u.len() - 1
    }

    /// `f(Pi u^n) dW^{n+1}` at the quadrature points.
    pub fn noise_term(&self, n: usize) -> Vec<f64> {
        match n {
            0 => self.m_partial[0].clone(),
            _ => self.m_partial[n].iter().zip(&self.m_partial[n - 1]).map(|(a, b)| a - b).collect(),
        }
    }
}

/// Per-step solver bound to a space-time discretisation, a flux and a noise
/// model.
pub struct Stepper<'a> {
    sgd: &'a SpaceTimeGd,
    flux: &'a FluxModel,
    noise: NoiseOnGd<'a>,
    cfg: SolverConfig,
    /// Union pattern of the mass and stiffness matrices.
    pattern: CsrMatrix,
    mass_in_pattern: Vec<f64>,
    /// Storage positions of the local pairs `(i, j)` of each cell.
    cell_pos: Vec<Vec<usize>>,
    linear: Option<SparseCholesky>,
}

impl<'a> Stepper<'a> {
    pub fn new(sgd: &'a SpaceTimeGd, flux: &'a FluxModel, noise: &'a NoiseModel, cfg: SolverConfig) -> Result<Self> {
        cfg.validate()?;
        let gd = &sgd.gd;
        if let crate::noise::SpectralBasis::Sine { dim, .. } = noise.basis() {
            if *dim != gd.dim() {
                return Err(invalid(format!("noise basis dimension {dim} differs from mesh dimension {}", gd.dim())));
            }
        }
        let mass = gd.mass_matrix();
        let pattern = mass.add_scaled(0.0, gd.stiffness_matrix(), 0.0);
        let mut mass_in_pattern = vec![0.0; pattern.nnz()];
        for i in 0..mass.nrows() {
            for (j, v) in mass.row(i) {
                mass_in_pattern[pattern.position(i, j).expect("mass entry in pattern")] += v;
            }
        }
        let cell_pos = (0..gd.mesh().n_cells())
            .map(|c| {
                let rows = gd.cell_gradient_row(c);
                let mut pos = Vec::with_capacity(rows.len() * rows.len());
                for &(i, _) in rows {
                    for &(j, _) in rows {
                        pos.push(pattern.position(i, j).expect("stiffness entry in pattern"));
                    }
                }
                pos
            })
            .collect();
        let mut stepper = Stepper {
            sgd,
            flux,
            noise: NoiseOnGd::new(noise, gd),
            cfg,
            pattern,
            mass_in_pattern,
            cell_pos,
            linear: None,
        };
        if flux.is_linear() && gd.n_dofs() > 0 {
            let zero = gd.zeros();
            stepper.linear = Some(SparseCholesky::factor(&stepper.jacobian(&zero))?);
        }
        Ok(stepper)
    }

    pub fn sgd(&self) -> &SpaceTimeGd {
        self.sgd
    }

    pub fn flux(&self) -> &FluxModel {
        self.flux
    }

    pub fn noise(&self) -> &NoiseModel {
        self.noise.noise()
    }

    pub fn noise_on_gd(&self) -> &NoiseOnGd<'a> {
        &self.noise
    }

    pub fn config(&self) -> &SolverConfig {
        &self.cfg
    }

    fn dt(&self) -> f64 {
        self.sgd.dt()
    }

    /// `F_i(u) = <a(Pi u, grad u), grad e_i>`.
    pub fn flux_vector(&self, u: &DiscreteVector) -> DiscreteVector {
        let gd = &self.sgd.gd;
        let mut f = gd.zeros();
        for c in 0..gd.mesh().n_cells() {
            let a = self.cell_flux(u, c);
            for &(i, gi) in gd.cell_gradient_row(c) {
                f[i] += a[0] * gi[0] + a[1] * gi[1];
            }
        }
        f
    }

    /// `∫_c a(Pi u, grad u)`.
    fn cell_flux(&self, u: &DiscreteVector, c: usize) -> [f64; 2] {
        let gd = &self.sgd.gd;
        let g = gd.cell_gradient(u, c);
        if self.flux.is_autonomous() {
            let a = self.flux.flux(0.0, g);
            let m = gd.cell_measure(c);
            [m * a[0], m * a[1]]
        } else {
            let mut s = [0.0; 2];
            for q in gd.cell_quad_points(c) {
                let a = self.flux.flux(q.eval(u), g);
                s[0] += q.weight * a[0];
                s[1] += q.weight * a[1];
            }
            s
        }
    }

    /// `<a(Pi u, grad u), grad u>`.
    pub fn flux_pairing(&self, u: &DiscreteVector) -> f64 {
        let gd = &self.sgd.gd;
        (0..gd.mesh().n_cells())
            .map(|c| {
                let a = self.cell_flux(u, c);
                let g = gd.cell_gradient(u, c);
                a[0] * g[0] + a[1] * g[1]
            })
            .sum()
    }

    /// `R(u) = M (u - u_n) + dt F(u) - b`.
    pub fn residual(&self, u: &DiscreteVector, u_n: &DiscreteVector, b: &DiscreteVector) -> DiscreteVector {
        let mass = self.sgd.gd.mass_matrix();
        mass.mul_vec(&(u - u_n)) + self.dt() * self.flux_vector(u) - b
    }

    fn fill_cells(&self, u: &DiscreteVector, weight: impl Fn(usize, [f64; 2]) -> [[f64; 2]; 2]) -> CsrMatrix {
        let gd = &self.sgd.gd;
        let dt = self.dt();
        let mut m = self.pattern.clone();
        let vals = m.values_mut();
        vals.copy_from_slice(&self.mass_in_pattern);
        for c in 0..gd.mesh().n_cells() {
            let rows = gd.cell_gradient_row(c);
            let j = weight(c, gd.cell_gradient(u, c));
            let pos = &self.cell_pos[c];
            let mut k = 0;
            for &(_, gi) in rows {
                let jg = [j[0][0] * gi[0] + j[1][0] * gi[1], j[0][1] * gi[0] + j[1][1] * gi[1]];
                for &(_, gj) in rows {
                    vals[pos[k]] += dt * (jg[0] * gj[0] + jg[1] * gj[1]);
                    k += 1;
                }
            }
        }
        m
    }

    /// `M + dt * sum_c grad e_i^T (∫_c J_a) grad e_j` with the smoothed flux
    /// Jacobian.
    pub fn jacobian(&self, u: &DiscreteVector) -> CsrMatrix {
        let gd = &self.sgd.gd;
        self.fill_cells(u, |c, g| {
            if self.flux.is_autonomous() {
                let j = self.flux.eval_flux_jacobian(0.0, g);
                let m = gd.cell_measure(c);
                [[m * j[0][0], m * j[0][1]], [m * j[1][0], m * j[1][1]]]
            } else {
                let mut s = [[0.0; 2]; 2];
                for q in gd.cell_quad_points(c) {
                    let j = self.flux.eval_flux_jacobian(q.eval(u), g);
                    for r in 0..2 {
                        for t in 0..2 {
                            s[r][t] += q.weight * j[r][t];
                        }
                    }
                }
                s
            }
        })
    }

    /// `M + dt K_w(u)` with frozen secant weights.
    fn frozen_matrix(&self, u: &DiscreteVector) -> CsrMatrix {
        let gd = &self.sgd.gd;
        self.fill_cells(u, |c, g| {
            let w = if self.flux.is_autonomous() {
                gd.cell_measure(c) * self.flux.secant_weight(0.0, g)
            } else {
                gd.cell_quad_points(c).iter().map(|q| q.weight * self.flux.secant_weight(q.eval(u), g)).sum()
            };
            [[w, 0.0], [0.0, w]]
        })
    }

    /// Noise field `f(Pi u_n) dW` at the quadrature points and its load vector.
    pub fn noise_rhs(&self, u_n: &DiscreteVector, inc: &NoiseIncrement) -> Result<(Vec<f64>, DiscreteVector)> {
        if self.noise.noise().f0().is_zero() {
            let nq = self.sgd.gd.quad_points().len();
            return Ok((vec![0.0; nq], self.sgd.gd.zeros()));
        }
        let field = self.noise.apply(u_n, inc)?;
        let b = self.noise.load_vector(&field);
        Ok((field, b))
    }

    pub fn solve_step(&self, u_n: &DiscreteVector, inc: &NoiseIncrement) -> Result<StepOutcome> {
        self.sgd.gd.check_len(u_n)?;
        let (_, b) = self.noise_rhs(u_n, inc)?;
        self.solve_with_rhs(u_n, &b, 0)
    }

    /// Solves `R(u) = 0` for a given noise load vector `b`.
    pub fn solve_with_rhs(&self, u_n: &DiscreteVector, b: &DiscreteVector, step: usize) -> Result<StepOutcome> {
        let gd = &self.sgd.gd;
        let tol = self.cfg.newton_tol;
        if gd.n_dofs() == 0 {
            return Ok(StepOutcome { u: gd.zeros(), residual: 0.0, iterations: 0, fallback: false });
        }
        let mut start = u_n.clone();
        let mut iterations = 0;
        if let Some(chol) = &self.linear {
            let rhs = gd.mass_matrix().mul_vec(u_n) + b;
            start = chol.solve(&rhs);
            iterations = 1;
            let r = self.residual(&start, u_n, b).norm();
            if r <= tol {
                return Ok(StepOutcome { u: start, residual: r, iterations, fallback: false });
            }
        }
        let newton = self.newton(start, u_n, b, self.cfg.max_newton)?;
        iterations += newton.iterations;
        if newton.residual <= tol {
            return Ok(StepOutcome { iterations, ..newton });
        }

        let rhs = gd.mass_matrix().mul_vec(u_n) + b;
        let mut best = newton;
        let mut u = best.u.clone();
        let mut chol: Option<SparseCholesky> = None;
        let mut current = best.residual;
        for k in 0..self.cfg.max_fixed_point {
            iterations += 1;
            let a = self.frozen_matrix(&u);
            match chol.as_mut() {
                Some(c) => c.refactor(&a)?,
                None => chol = Some(SparseCholesky::factor(&a)?),
            }
            let target = chol.as_ref().unwrap().solve(&rhs);
            let mut theta = 1.0;
            let mut r = f64::INFINITY;
            let mut next = target.clone();
            for _ in 0..20 {
                next = &u + theta * (&target - &u);
                r = self.residual(&next, u_n, b).norm();
                if r < current {
                    break;
                }
                theta *= self.cfg.line_search_shrink;
            }
            u = next;
            current = r;
            if r < best.residual {
                best = StepOutcome { u: u.clone(), residual: r, iterations, fallback: true };
            }
            if r <= tol {
                return Ok(StepOutcome { u, residual: r, iterations, fallback: true });
            }
            if (k + 1) % 5 == 0 {
                let polished = self.newton(u.clone(), u_n, b, self.cfg.max_newton)?;
                iterations += polished.iterations;
                if polished.residual <= tol {
                    return Ok(StepOutcome { iterations, fallback: true, ..polished });
                }
                if polished.residual < current {
                    u = polished.u;
                    current = polished.residual;
                }
            }
        }
        Err(Error::StepFailure { step, residual: best.residual, iterations })
    }

    /// Damped Newton iteration; stops at the tolerance or on stagnation of
    /// the line search.
    fn newton(&self, mut u: DiscreteVector, u_n: &DiscreteVector, b: &DiscreteVector, max_iter: usize) -> Result<StepOutcome> {
        let tol = self.cfg.newton_tol;
        let mut r = self.residual(&u, u_n, b);
        let mut rn = r.norm();
        let mut chol: Option<SparseCholesky> = None;
        let mut iterations = 0;
        while rn > tol && iterations < max_iter {
            iterations += 1;
            let j = self.jacobian(&u);
            let factored = match chol.as_mut() {
                Some(c) => c.refactor(&j).map(|_| ()),
                None => SparseCholesky::factor(&j).map(|c| chol = Some(c)),
            };
            if factored.is_err() {
                break;
            }
            let d = -chol.as_ref().unwrap().solve(&r);
            let mut alpha = 1.0;
            let mut accepted = false;
            for _ in 0..40 {
                let trial = &u + alpha * &d;
                let rt = self.residual(&trial, u_n, b);
                let rtn = rt.norm();
                if rtn.is_finite() && rtn < (1.0 - 1e-4 * alpha) * rn {
                    u = trial;
                    r = rt;
                    rn = rtn;
                    accepted = true;
                    break;
                }
                alpha *= self.cfg.line_search_shrink;
            }
            if !accepted {
                break;
            }
        }
        if !rn.is_finite() {
            return Err(Error::NonFinite("residual during Newton iteration".into()));
        }
        Ok(StepOutcome { u, residual: rn, iterations, fallback: false })
    }

    /// Full path driven by the increments of `spec`.
    pub fn run_trajectory(&self, u0: &DiscreteVector, spec: RunSpec) -> Result<Trajectory> {
        if spec.substeps == 0 {
            return Err(invalid("substeps must be positive"));
        }
        let noise = self.noise.noise();
        let n_steps = self.sgd.n_steps();
        let dt_fine = self.dt() / spec.substeps as f64;
        let silent = noise.is_silent();
        let mut traj = self.start(u0, Some(spec))?;
        for n in 0..n_steps {
            let inc = if silent {
                NoiseIncrement::zero(noise.k_max(), self.dt())
            } else {
                noise.sample_coupled(spec.master_seed, spec.sample, n as u64, spec.substeps, dt_fine)?
            };
            self.advance(&mut traj, inc)?;
        }
        Ok(traj)
    }

    /// Path driven by prescribed increments (one per step).
    pub fn run_with_increments(&self, u0: &DiscreteVector, increments: &[NoiseIncrement]) -> Result<Trajectory> {
        if increments.len() != self.sgd.n_steps() {
            return Err(Error::DimensionMismatch { expected: self.sgd.n_steps(), got: increments.len() });
        }
        let mut traj = self.start(u0, None)?;
        for inc in increments {
            self.advance(&mut traj, inc.clone())?;
        }
        Ok(traj)
    }

    /// Path without noise.
    pub fn run_deterministic(&self, u0: &DiscreteVector) -> Result<Trajectory> {
        let zero = NoiseIncrement::zero(self.noise.noise().k_max(), self.dt());
        self.run_with_increments(u0, &vec![zero; self.sgd.n_steps()])
    }

    fn start(&self, u0: &DiscreteVector, spec: Option<RunSpec>) -> Result<Trajectory> {
        self.sgd.gd.check_len(u0)?;
        let n = self.sgd.n_steps();
        let mut u = Vec::with_capacity(n + 1);
        u.push(u0.clone());
        Ok(Trajectory {
            u,
            m_partial: Vec::with_capacity(n),
            increments: Vec::with_capacity(n),
            residuals: Vec::with_capacity(n),
            newton_iters: Vec::with_capacity(n),
            spec,
            dt: self.dt(),
        })
    }

    fn advance(&self, traj: &mut Trajectory, inc: NoiseIncrement) -> Result<()> {
        let step = traj.residuals.len();
        let u_n = traj.u.last().expect("initial state");
        let (field, b) = self.noise_rhs(u_n, &inc)?;
        let out = self.solve_with_rhs(u_n, &b, step)?;
        let m = match traj.m_partial.last() {
            Some(prev) => prev.iter().zip(&field).map(|(a, f)| a + f).collect(),
            None => field,
        };
        traj.m_partial.push(m);
        traj.increments.push(inc);
        traj.residuals.push(out.residual);
        traj.newton_iters.push(out.iterations);
        traj.u.push(out.u);
        Ok(())
    }

    /// `max_n |LHS - RHS|` of the identity obtained by testing the scheme
    /// with `u^{n+1}`:
    /// `½|u^{n+1}|² + ½|u^{n+1}-u^n|² + dt<a, grad u^{n+1}> = ½|u^n|² + <f dW, Pi u^{n+1}>`.
    pub fn energy_identity_residual(&self, traj: &Trajectory) -> f64 {
        let gd = &self.sgd.gd;
        let mass = gd.mass_matrix();
        let dt = traj.dt;
        let mut worst: f64 = 0.0;
        for n in 0..traj.n_steps() {
            let (a, b) = (&traj.u[n + 1], &traj.u[n]);
            let d = a - b;
            let lhs = 0.5 * mass.bilinear(a, a) + 0.5 * mass.bilinear(&d, &d) + dt * self.flux_pairing(a);
            let term = traj.noise_term(n);
            let forcing: f64 = gd.quad_points().iter().zip(&term).map(|(q, g)| q.weight * g * q.eval(a)).sum();
            let rhs = 0.5 * mass.bilinear(b, b) + forcing;
            worst = worst.max((lhs - rhs).abs());
        }
        worst
    }

    /// Largest violation over `k` of the pathwise energy inequality
    /// `½|u^{k+1}|² + ¼Σ|u^{n+1}-u^n|² + c1 Σ dt |grad u^{n+1}|_p^p
    ///   <= ½|u^0|² + Σ|f(Pi u^n) dW|² + Σ <f(Pi u^n) dW, Pi u^n>`
    /// (negative when it holds with room).
    pub fn energy_inequality_gap(&self, traj: &Trajectory) -> f64 {
        let gd = &self.sgd.gd;
        let mass = gd.mass_matrix();
        let (p, c1, dt) = (self.flux.p(), self.flux.c1(), traj.dt);
        let mut lhs_sum = 0.0;
        let mut rhs = 0.5 * mass.bilinear(&traj.u[0], &traj.u[0]);
        let mut worst = f64::NEG_INFINITY;
        for n in 0..traj.n_steps() {
            let (a, b) = (&traj.u[n + 1], &traj.u[n]);
            let d = a - b;
            lhs_sum += 0.25 * mass.bilinear(&d, &d) + c1 * dt * gd.grad_lp_pow(a, p);
            let term = traj.noise_term(n);
            for (q, g) in gd.quad_points().iter().zip(&term) {
                rhs += q.weight * (g * g + g * q.eval(b));
            }
            worst = worst.max(0.5 * mass.bilinear(a, a) + lhs_sum - rhs);
        }
        worst
    }
}

/// Writes `step,dof,value` rows.
pub fn write_trajectory_csv(traj: &Trajectory, path: impl AsRef<Path>) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "step,dof,value")?;
    for (n, u) in traj.u.iter().enumerate() {
        for (i, v) in u.iter().enumerate() {
            writeln!(out, "{n},{i},{v:e}")?;
        }
    }
    out.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySidecar {
    pub spec: Option<RunSpec>,
    pub n_steps: usize,
    pub dt: f64,
    pub residuals: Vec<f64>,
    pub newton_iters: Vec<usize>,
    pub config_hash: String,
}

pub fn write_trajectory_sidecar(traj: &Trajectory, config_hash: &str, path: impl AsRef<Path>) -> Result<()> {
    let side = TrajectorySidecar {
        spec: traj.spec,
        n_steps: traj.n_steps(),
        dt: traj.dt,
        residuals: traj.residuals.clone(),
        newton_iters: traj.newton_iters.clone(),
        config_hash: config_hash.to_string(),
    };
    let text = serde_json::to_string_pretty(&side).map_err(|e| invalid(e.to_string()))?;
    std::fs::write(path, text + "\n")?;
    Ok(())
}

/// Convenience: `I_D u0` for the discretisation of a stepper.
pub fn initial_state(sgd: &SpaceTimeGd, u0: impl Fn([f64; 2]) -> f64) -> DVector<f64> {
    sgd.gd.interpolate(u0)
}
