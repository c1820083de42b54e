//! Off-policy policy-gradient estimation with action-dependent baselines.
//!
//! The crate is organised bottom-up:
//!
//! - [`autodiff`]: tape-based reverse mode, MLPs and Adam over flat parameter vectors.
//! - [`envs`]: toy continuous-control environments and finite tabular MDPs.
//! - [`policy`]: factored diagonal-Gaussian policy and its categorical counterpart.
//! - [`critic`]: action-value network, target network and its update rules.
//! - [`replay`]: ring buffer of transitions that keep the behaviour distribution.
//! - [`estimator`]: importance ratios, the four baselines and gradient assembly.
//! - [`oracle`]: exact enumeration of expectations and variances on finite MDPs.
//! - [`checkpoint`]: the binary container shared by policy, critic and replay dumps.

pub mod autodiff;
pub mod checkpoint;
pub mod critic;
pub mod envs;
pub mod error;
pub mod estimator;
pub mod oracle;
pub mod policy;
pub mod replay;

pub use error::{Error, Result};
