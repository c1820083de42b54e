//! Toy continuous-control tasks and finite tabular MDPs.

mod continuous;
mod mdp;
mod mdp_format;

pub use continuous::{
    make_env, ContinuousEnv, ContinuousEnvState, DoubleIntegrator1d, EnvSpec, PointMass2d,
    StepOutcome, DT, HORIZON,
};
pub use mdp::{bellman_residual, mdp_exact_q, mdp_stationary_distribution, FiniteMdp};
pub use mdp_format::{parse_mdp, write_mdp};
