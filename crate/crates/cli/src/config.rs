//! Experiment configuration (TOML). Every field has a default, so an empty
//! file is a valid configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sgdm_core::analysis::EstimatorConfig;
use sgdm_core::flux::{FluxFn, FluxModel, ProbeConfig};
use sgdm_core::gd::IrlsOptions;
use sgdm_core::gd::{GdKind, GradientDiscretisation, SpaceTimeGd};
use sgdm_core::geometry::Point;
use sgdm_core::mesh::{BoundingBox, Mesh};
use sgdm_core::noise::{GrowthCheckConfig, GrowthConstants, Multiplier, NoiseModel};
use sgdm_core::scheme::SolverConfig;
use std::sync::Arc;

use crate::error::CliError;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub mesh: MeshConfig,
    pub gd: GdConfig,
    pub flux: FluxConfig,
    pub time: TimeConfig,
    pub noise: NoiseConfig,
    pub initial: InitialConfig,
    pub run: RunConfig,
    pub solver: SolverConfig,
    pub estimators: EstimatorConfig,
    pub checks: ChecksConfig,
    pub indicators: IndicatorConfig,
    pub probe: ProbeSection,
    pub oracle: OracleConfig,
    pub output: OutputConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MeshGenerator {
    Interval,
    Rectangle,
    File,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MeshConfig {
    pub generator: MeshGenerator,
    /// Cells of the interval generator.
    pub cells: usize,
    pub nx: usize,
    pub ny: usize,
    pub min: [f64; 2],
    pub max: [f64; 2],
    #[serde(skip_serializing_if = "Option::is_none")]
    pub file: Option<PathBuf>,
}

impl Default for MeshConfig {
    fn default() -> Self {
        MeshConfig { generator: MeshGenerator::Interval, cells: 16, nx: 8, ny: 8, min: [0.0, 0.0], max: [1.0, 1.0], file: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GdConfig {
    pub kind: GdKind,
    /// Number of uniformly refined levels (level 0 is the configured mesh).
    pub levels: usize,
}

impl Default for GdConfig {
    fn default() -> Self {
        GdConfig { kind: GdKind::P1Conforming, levels: 1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FluxChoice {
    PLaplace,
    RegularizedPLaplace,
    Linear,
    /// `a(y) = -y`, violating coercivity and monotonicity (probe target).
    AntiMonotone,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FluxConfig {
    pub kind: FluxChoice,
    pub p: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub c1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub c2: Option<f64>,
}

impl Default for FluxConfig {
    fn default() -> Self {
        FluxConfig { kind: FluxChoice::PLaplace, p: 3.0, epsilon: None, c1: None, c2: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TimeConfig {
    pub t_final: f64,
    /// Steps on level 0.
    pub n_steps: usize,
    /// Step-count multiplier per level (2: dt ~ h, 4: dt ~ h^2).
    pub level_factor: usize,
}

impl Default for TimeConfig {
    fn default() -> Self {
        TimeConfig { t_final: 0.1, n_steps: 32, level_factor: 2 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum F0Choice {
    Zero,
    Constant,
    Identity,
    Tanh,
    Square,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseConfig {
    pub k_max: usize,
    /// Spectrum `q_k = k^{-s}`.
    pub s: f64,
    pub f0: F0Choice,
    /// Value of the constant multiplier.
    pub f0_constant: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub f1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub f2: Option<f64>,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig { k_max: 8, s: 1.5, f0: F0Choice::Tanh, f0_constant: 1.0, f1: None, f2: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitialChoice {
    Zero,
    Sine,
    Bump,
    File,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InitialConfig {
    pub kind: InitialChoice,
    pub amplitude: f64,
    /// Whitespace-separated values at the vertices of the level-0 mesh.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub file: Option<PathBuf>,
}

impl Default for InitialConfig {
    fn default() -> Self {
        InitialConfig { kind: InitialChoice::Sine, amplitude: 1.0, file: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub n_samples: u64,
    pub master_seed: u64,
    /// Worker threads (0 = all cores).
    pub workers: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig { n_samples: 100, master_seed: 0, workers: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChecksConfig {
    /// Pathwise energy identity residual bound.
    pub identity_tol: f64,
    /// Level-to-coarsest ratio allowed for the energy, moment and
    /// martingale estimators.
    pub bounded_factor: f64,
    /// Require translate and dual-increment slopes of at least
    /// `slope_fraction` times their nominal values.
    pub slopes: bool,
    pub slope_fraction: f64,
    /// Compare `E ||M^(n)||^2` with the additive-noise identity (constant
    /// multiplier only).
    pub martingale_identity: bool,
    pub increment_mean: bool,
    /// Multiple of the standard error used by statistical checks.
    pub se_factor: f64,
}

impl Default for ChecksConfig {
    fn default() -> Self {
        ChecksConfig {
            identity_tol: 1e-8,
            bounded_factor: 2.0,
            slopes: false,
            slope_fraction: 0.8,
            martingale_identity: false,
            increment_mean: true,
            se_factor: 3.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IndicatorConfig {
    /// Exponent of the function reconstruction in the consistency measure.
    pub phat: f64,
    /// Translate lengths (along the first axis).
    pub shifts: Vec<f64>,
    /// Slack on the translate constant fitted on the coarsest level.
    pub shift_slack: f64,
    pub irls: IrlsOptions,
}

impl Default for IndicatorConfig {
    fn default() -> Self {
        IndicatorConfig { phat: 2.0, shifts: vec![0.05, 0.1, 0.2], shift_slack: 1.5, irls: IrlsOptions::default() }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeSection {
    pub flux: ProbeConfig,
    pub growth: GrowthCheckConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleConfig {
    pub n_samples: u64,
    pub n_steps: usize,
    pub t_final: f64,
    pub f0_constant: f64,
    /// Random loads checked against the dual-norm oracle.
    pub dual_trials: usize,
    pub dual_tol: f64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        OracleConfig { n_samples: 100_000, n_steps: 16, t_final: 1.0, f0_constant: 1.0, dual_trials: 10, dual_tol: 1e-6 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig { dir: PathBuf::from("out") }
    }
}

fn bad(key: &str, msg: impl std::fmt::Display) -> CliError {
    CliError::Config { key: key.to_string(), message: msg.to_string() }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Parse(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        let cfg = Self::from_toml(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String, CliError> {
        toml::to_string(self).map_err(|e| CliError::Parse(e.to_string()))
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let m = &self.mesh;
        match m.generator {
            MeshGenerator::Interval if m.cells == 0 => return Err(bad("mesh.cells", "must be at least 1")),
            MeshGenerator::Rectangle if m.nx == 0 || m.ny == 0 => return Err(bad("mesh.nx", "nx and ny must be at least 1")),
            MeshGenerator::File => match &m.file {
                None => return Err(bad("mesh.file", "required by the file generator")),
                Some(f) if !f.exists() => return Err(bad("mesh.file", format!("{} does not exist", f.display()))),
                _ => {}
            },
            _ => {}
        }
        if m.generator != MeshGenerator::File && !(m.max[0] > m.min[0]) {
            return Err(bad("mesh.max", "must exceed mesh.min"));
        }
        if m.generator == MeshGenerator::Rectangle && !(m.max[1] > m.min[1]) {
            return Err(bad("mesh.max", "must exceed mesh.min in both coordinates"));
        }
        if self.gd.levels == 0 {
            return Err(bad("gd.levels", "must be at least 1"));
        }
        if !(self.flux.p > 1.0) || !self.flux.p.is_finite() {
            return Err(bad("flux.p", "must exceed 1"));
        }
        if self.flux.kind == FluxChoice::Linear && self.flux.p != 2.0 {
            return Err(bad("flux.p", "the linear flux requires p = 2"));
        }
        if !(self.time.t_final > 0.0) || !self.time.t_final.is_finite() {
            return Err(bad("time.t_final", "must be positive"));
        }
        if self.time.n_steps == 0 {
            return Err(bad("time.n_steps", "must be at least 1"));
        }
        if self.time.level_factor == 0 {
            return Err(bad("time.level_factor", "must be at least 1"));
        }
        if self.noise.k_max == 0 {
            return Err(bad("noise.k_max", "must be at least 1"));
        }
        if !self.noise.s.is_finite() {
            return Err(bad("noise.s", "must be finite"));
        }
        if self.initial.kind == InitialChoice::File {
            match &self.initial.file {
                None => return Err(bad("initial.file", "required by the file initial condition")),
                Some(f) if !f.exists() => return Err(bad("initial.file", format!("{} does not exist", f.display()))),
                _ => {}
            }
        }
        if self.run.n_samples == 0 {
            return Err(bad("run.n_samples", "must be at least 1"));
        }
        if self.run.master_seed > i64::MAX as u64 {
            return Err(bad("run.master_seed", "must be below 2^63"));
        }
        self.solver.validate().map_err(|e| bad("solver", e))?;
        self.estimators.validate(self.time.n_steps).map_err(|e| bad("estimators", e))?;
        if !(self.indicators.phat > 1.0) {
            return Err(bad("indicators.phat", "must exceed 1"));
        }
        if self.oracle.n_samples < 4 {
            return Err(bad("oracle.n_samples", "must be at least 4"));
        }
        if self.oracle.n_steps == 0 {
            return Err(bad("oracle.n_steps", "must be at least 1"));
        }
        Ok(())
    }

    pub fn base_mesh(&self) -> Result<Mesh, CliError> {
        let m = &self.mesh;
        Ok(match m.generator {
            MeshGenerator::Interval => Mesh::uniform_interval(m.cells, m.min[0], m.max[0])?,
            MeshGenerator::Rectangle => Mesh::uniform_rectangle(m.nx, m.ny, BoundingBox::new(m.min, m.max))?,
            MeshGenerator::File => Mesh::load(m.file.as_ref().expect("validated"))?,
        })
    }

    /// Meshes of all levels, each the uniform refinement of the previous.
    pub fn meshes(&self) -> Result<Vec<Mesh>, CliError> {
        let mut out = vec![self.base_mesh()?];
        for _ in 1..self.gd.levels {
            let next = out.last().unwrap().refine();
            out.push(next);
        }
        Ok(out)
    }

    pub fn space_time(&self) -> Result<Vec<SpaceTimeGd>, CliError> {
        self.meshes()?
            .iter()
            .enumerate()
            .map(|(l, m)| {
                let gd = GradientDiscretisation::new(m, self.gd.kind)?;
                let n = self.time.n_steps * self.time.level_factor.pow(l as u32);
                Ok(SpaceTimeGd::new(gd, self.time.t_final, n)?)
            })
            .collect()
    }

    pub fn flux_model(&self) -> Result<FluxModel, CliError> {
        let f = &self.flux;
        let mut model = match f.kind {
            FluxChoice::PLaplace => FluxModel::p_laplace(f.p)?,
            FluxChoice::RegularizedPLaplace => FluxModel::regularized_p_laplace(f.p)?,
            FluxChoice::Linear => FluxModel::linear_diffusion(),
            FluxChoice::AntiMonotone => {
                let a: FluxFn = Arc::new(|_, y| [-y[0], -y[1]]);
                FluxModel::custom(a, f.p, 1.0, 1.0)?
            }
        };
        if let Some(eps) = f.epsilon {
            model = model.with_epsilon(eps)?;
        }
        if f.c1.is_some() || f.c2.is_some() {
            model = model.clone().with_constants(f.c1.unwrap_or(model.c1()), f.c2.unwrap_or(model.c2()))?;
        }
        Ok(model)
    }

    pub fn multiplier(&self) -> Multiplier {
        match self.noise.f0 {
            F0Choice::Zero => Multiplier::Zero,
            F0Choice::Constant => Multiplier::Constant(self.noise.f0_constant),
            F0Choice::Identity => Multiplier::Identity,
            F0Choice::Tanh => Multiplier::Tanh,
            F0Choice::Square => Multiplier::Square,
        }
    }

    pub fn noise_model(&self, mesh: &Mesh) -> Result<NoiseModel, CliError> {
        let n = &self.noise;
        let mut model = NoiseModel::sine(mesh.bbox(), mesh.dim(), n.k_max, n.s, self.multiplier())?;
        if n.f1.is_some() || n.f2.is_some() {
            let g = model.growth();
            model = model.with_growth(GrowthConstants { f1: n.f1.unwrap_or(g.f1), f2: n.f2.unwrap_or(g.f2) })?;
        }
        Ok(model)
    }

    /// The initial condition as a function on the domain.
    pub fn initial_function(&self) -> Result<Arc<dyn Fn(Point) -> f64 + Send + Sync>, CliError> {
        let mesh = self.base_mesh()?;
        let bbox = mesh.bbox();
        let dim = mesh.dim();
        let a = self.initial.amplitude;
        Ok(match self.initial.kind {
            InitialChoice::Zero => Arc::new(|_| 0.0),
            InitialChoice::Sine => Arc::new(move |x| a * sine_product(bbox, dim, x)),
            InitialChoice::Bump => Arc::new(move |x| {
                let ext = bbox.extent();
                let r2: f64 = (0..dim)
                    .map(|d| {
                        let c = 0.5 * (bbox.min[d] + bbox.max[d]);
                        ((x[d] - c) / (0.4 * ext[d])).powi(2)
                    })
                    .sum();
                if r2 < 1.0 {
                    a * (1.0 - 1.0 / (1.0 - r2)).exp()
                } else {
                    0.0
                }
            }),
            InitialChoice::File => {
                let path = self.initial.file.as_ref().expect("validated");
                let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
                let values = text
                    .split_whitespace()
                    .map(|t| t.parse::<f64>())
                    .collect::<Result<Vec<_>, _>>()
                    .map_err(|e| bad("initial.file", e))?;
                if values.len() != mesh.n_vertices() {
                    return Err(bad("initial.file", format!("{} values for {} vertices", values.len(), mesh.n_vertices())));
                }
                let gd = GradientDiscretisation::new(&mesh, GdKind::P1Conforming)?;
                let mut v = gd.zeros();
                for (i, p) in gd.dof_points().iter().enumerate() {
                    let k = mesh.vertices().iter().position(|q| q == p).expect("P1 DOFs sit at vertices");
                    v[i] = a * values[k];
                }
                Arc::new(move |x| gd.reconstruct_at(&v, x).unwrap_or(0.0))
            }
        })
    }
}

/// `prod_d sin(pi (x_d - min_d) / len_d)`.
pub fn sine_product(bbox: BoundingBox, dim: usize, x: Point) -> f64 {
    let ext = bbox.extent();
    (0..dim).map(|d| (std::f64::consts::PI * (x[d] - bbox.min[d]) / ext[d]).sin()).product()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_the_default() {
        let cfg = ExperimentConfig::from_toml("").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        cfg.validate().unwrap();
    }

    #[test]
    fn round_trip() {
        let mut cfg = ExperimentConfig::default();
        cfg.flux.epsilon = Some(1e-7);
        cfg.estimators.ells = vec![1, 3];
        cfg.run.master_seed = 123456789;
        let text = cfg.to_toml().unwrap();
        assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), cfg);
    }

    #[test]
    fn errors_name_the_key() {
        let cfg = ExperimentConfig::from_toml("[run]\nn_samples = 0\n").unwrap();
        let e = cfg.validate().unwrap_err().to_string();
        assert!(e.contains("run.n_samples"), "{e}");
        let e = ExperimentConfig::from_toml("[run]\nsamples = 3\n").unwrap_err().to_string();
        assert!(e.contains("samples"), "{e}");
        let cfg = ExperimentConfig::from_toml("[mesh]\ngenerator = \"file\"\nfile = \"/nonexistent/mesh.txt\"\n").unwrap();
        assert!(cfg.validate().unwrap_err().to_string().contains("mesh.file"));
        let cfg = ExperimentConfig::from_toml("[flux]\nkind = \"linear\"\np = 3.0\n").unwrap();
        assert!(cfg.validate().unwrap_err().to_string().contains("flux.p"));
    }

    #[test]
    fn levels_refine_space_and_time() {
        let cfg = ExperimentConfig::from_toml("[gd]\nlevels = 3\n[time]\nn_steps = 4\nlevel_factor = 4\n").unwrap();
        let st = cfg.space_time().unwrap();
        assert_eq!(st.iter().map(|s| s.n_steps()).collect::<Vec<_>>(), vec![4, 16, 64]);
        assert_eq!(st.iter().map(|s| s.gd.n_dofs()).collect::<Vec<_>>(), vec![15, 31, 63]);
    }

    #[test]
    fn initial_from_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("u0.txt");
        std::fs::write(&path, "0 0.5 1 0.5 0").unwrap();
        let text = format!("[mesh]\ncells = 4\n[initial]\nkind = \"file\"\nfile = \"{}\"\n", path.display());
        let cfg = ExperimentConfig::from_toml(&text).unwrap();
        cfg.validate().unwrap();
        let f = cfg.initial_function().unwrap();
        assert!((f([0.5, 0.0]) - 1.0).abs() < 1e-14);
        assert!((f([0.375, 0.0]) - 0.75).abs() < 1e-14);
    }
}
