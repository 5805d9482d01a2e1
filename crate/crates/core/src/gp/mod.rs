//! Exact Gaussian-process regression with additive stationary kernels.

pub mod kernel;
pub mod likelihood;
pub mod model;
pub mod optimize;
pub mod posterior;

pub use kernel::{kernel_eval, KernelKind, KernelSpec};
pub use likelihood::{gram_matrix, joint_lml, log_marginal_likelihood, Factor};
pub use model::{GpModel, HyperPrior, Inputs, LogNormalPrior};
pub use optimize::{map_estimate, FittedModel, OptimizerOptions, OptimizerReport};
pub use posterior::{decomposition_error, posterior, sample_prior, PosteriorSummary, Predictor};
