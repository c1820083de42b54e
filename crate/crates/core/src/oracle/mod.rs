//! Exact enumeration over small factored MDPs, used to check the sampled
//! estimator and its baselines against closed forms.

mod context;
pub mod suite;
mod theorems;

pub use context::{
    flat_factor_instance, random_instance, random_instance_with, BaselineTable, ExactContext, MAX_ACTIONS_PER_DIM,
    MAX_GAMMA, MAX_STATES, MIXING,
};
pub use theorems::{
    approx_baseline_table, check_cross_term, check_unbiasedness, check_unbiasedness_fn, check_variance_difference,
    exact_optimal_baseline, exact_oppg, exact_oppg_joint, exact_variance, exact_variance_paths, grid_search_baseline,
    optimal_baseline_table, optimal_state_baseline_table, FactorEnumeration, VariancePaths, VARIANCE_PATH_RTOL,
};
