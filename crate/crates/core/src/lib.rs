//! Implicit-Euler gradient schemes for stochastic Leray-Lions evolution
//! equations, with Monte Carlo estimators for their a priori bounds.

// `!(x > 0.0)` is used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod error;
pub mod flux;
pub mod gd;
pub mod geometry;
pub mod linalg;
pub mod mesh;
pub mod noise;
pub mod scheme;

pub use error::{Error, Result};
pub use flux::{FluxKind, FluxModel};
pub use gd::{DiscreteVector, GdKind, GradientDiscretisation, SpaceTimeGd};
pub use mesh::{BoundingBox, Mesh};
pub use noise::{Multiplier, NoiseIncrement, NoiseModel, RngStream, SpectralBasis};
pub use scheme::{RunSpec, SolverConfig, StepOutcome, Stepper, Trajectory};
