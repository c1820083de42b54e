//! Factored policies: the diagonal Gaussian used for control and the tabular
//! softmax used by the exact oracle.

mod categorical;
mod gaussian;

pub use categorical::{softmax, FactoredCategoricalPolicy, ParamSharing};
pub use gaussian::{normal_log_pdf, ActionSample, GaussianPolicy, ScoreGeometry, LOG_STD_BOUNDS};
