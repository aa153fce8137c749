//! Monte Carlo estimators, path norms and oracles.

pub mod convergence;
pub mod dual;
pub mod ensemble;
pub mod estimators;
pub mod ou;
pub mod path;
pub mod stats;

pub use convergence::{coupled_refinement_study, max_l2_error, ConvergenceReport, ConvergenceRow, Overlay};
pub use dual::{dual_norm, DualNorm, DualNormOptions, DualNormResult};
pub use ensemble::run_ensemble;
pub use estimators::{
    aggregate, dual_increment_estimator, energy_estimators, martingale_stats, simulate_ensemble, summarize_path,
    time_translate_estimator, EstimatorConfig, EstimatorReport, MartingaleStats, PathSample,
};
pub use ou::{ou_oracle, OuMoments, OuParams};
pub use path::PiecewiseConstantPath;
pub use stats::{empirical_orders, loglog_slope, variance_with_se, MeanSe};
