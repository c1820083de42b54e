use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Euler step used by every shipped continuous environment.
pub const DT: f64 = 0.05;
/// Episode length cap.
pub const HORIZON: usize = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub state_dim: usize,
    pub action_dim: usize,
    pub action_low: Vec<f64>,
    pub action_high: Vec<f64>,
    pub horizon: usize,
    pub gamma: f64,
}

impl EnvSpec {
    pub fn validate(&self) -> Result<()> {
        if self.action_low.len() != self.action_dim || self.action_high.len() != self.action_dim {
            return Err(Error::Config("action bounds do not match action_dim".into()));
        }
        if self
            .action_low
            .iter()
            .zip(&self.action_high)
            .any(|(lo, hi)| lo >= hi)
        {
            return Err(Error::Config("action_low must be below action_high".into()));
        }
        if self.horizon == 0 {
            return Err(Error::Config("horizon must be at least 1".into()));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::Config(format!("gamma {} outside (0, 1)", self.gamma)));
        }
        Ok(())
    }

    pub fn clip(&self, action: &[f64]) -> Vec<f64> {
        action
            .iter()
            .zip(self.action_low.iter().zip(&self.action_high))
            .map(|(a, (lo, hi))| a.clamp(*lo, *hi))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContinuousEnvState {
    pub observation: Vec<f64>,
    pub steps_elapsed: usize,
    pub rng: ChaCha8Rng,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub state: ContinuousEnvState,
    pub reward: f64,
    pub done: bool,
}

/// Deterministic-dynamics continuous-control task.
pub trait ContinuousEnv {
    fn name(&self) -> &'static str;
    fn spec(&self) -> &EnvSpec;
    /// Largest possible `|reward|`.
    fn reward_bound(&self) -> f64;
    fn reset(&self, seed: u64) -> ContinuousEnvState;
    /// Dynamics applied to an already clipped action.
    fn transition(&self, observation: &[f64], action: &[f64]) -> (Vec<f64>, f64);

    /// Clips the action to the box, advances the dynamics, and ends the
    /// episode at the horizon. There are no early-termination predicates.
    fn step(&self, state: &ContinuousEnvState, action: &[f64]) -> Result<StepOutcome> {
        let spec = self.spec();
        if action.len() != spec.action_dim {
            return Err(Error::input(
                "action",
                format!("length {} but env expects {}", action.len(), spec.action_dim),
            ));
        }
        if action.iter().any(|a| !a.is_finite()) {
            return Err(Error::input("action", "non-finite entry"));
        }
        let clipped = spec.clip(action);
        let (observation, reward) = self.transition(&state.observation, &clipped);
        let steps_elapsed = state.steps_elapsed + 1;
        Ok(StepOutcome {
            state: ContinuousEnvState {
                observation,
                steps_elapsed,
                rng: state.rng.clone(),
            },
            reward,
            done: steps_elapsed >= spec.horizon,
        })
    }
}

/// Planar point mass driven towards the origin.
///
/// State `[px, py, vx, vy]`, action `[ax, ay]` in `[-1, 1]^2`.
/// Semi-implicit Euler: `v' = v + dt a`, `p' = p + dt v'`. Positions are
/// confined to `[-2, 2]^2` (the velocity component into a wall is zeroed) and
/// speeds to `[-2, 2]` per axis.
///
/// Reward `-|p - goal|^2 - 0.01 |a|^2` with the goal at the origin, so
/// `|r| <= 8.02`. Reset draws the position from `U[-1, 1]^2` at rest.
#[derive(Debug, Clone)]
pub struct PointMass2d {
    spec: EnvSpec,
    pub goal: [f64; 2],
}

pub const ARENA: f64 = 2.0;
pub const MAX_SPEED: f64 = 2.0;
pub const CONTROL_COST: f64 = 0.01;

impl PointMass2d {
    pub fn new(gamma: f64) -> Self {
        Self {
            spec: EnvSpec {
                state_dim: 4,
                action_dim: 2,
                action_low: vec![-1.0; 2],
                action_high: vec![1.0; 2],
                horizon: HORIZON,
                gamma,
            },
            goal: [0.0, 0.0],
        }
    }

    pub fn with_horizon(mut self, horizon: usize) -> Self {
        self.spec.horizon = horizon;
        self
    }
}

impl ContinuousEnv for PointMass2d {
    fn name(&self) -> &'static str {
        "point-mass-2d"
    }

    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reward_bound(&self) -> f64 {
        2.0 * ARENA * ARENA + CONTROL_COST * 2.0
    }

    fn reset(&self, seed: u64) -> ContinuousEnvState {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let px = rng.random_range(-1.0..1.0);
        let py = rng.random_range(-1.0..1.0);
        ContinuousEnvState {
            observation: vec![px, py, 0.0, 0.0],
            steps_elapsed: 0,
            rng,
        }
    }

    fn transition(&self, obs: &[f64], a: &[f64]) -> (Vec<f64>, f64) {
        let mut next = vec![0.0; 4];
        for axis in 0..2 {
            let mut v = (obs[2 + axis] + DT * a[axis]).clamp(-MAX_SPEED, MAX_SPEED);
            let mut p = obs[axis] + DT * v;
            if p.abs() > ARENA {
                p = p.clamp(-ARENA, ARENA);
                v = 0.0;
            }
            next[axis] = p;
            next[2 + axis] = v;
        }
        let dist2: f64 = (0..2).map(|k| (next[k] - self.goal[k]).powi(2)).sum();
        let ctrl: f64 = a.iter().map(|x| x * x).sum();
        (next, -dist2 - CONTROL_COST * ctrl)
    }
}

/// One-dimensional double integrator.
///
/// State `[pos, vel]`, action `[a]` in `[-1, 1]`, update `vel' = vel + dt a`,
/// `pos' = pos + dt vel'` with both coordinates confined to `[-2, 2]`.
/// Reward `-pos^2 - 0.01 a^2`, so `|r| <= 4.01`. Reset draws from `U[-1, 1]^2`.
#[derive(Debug, Clone)]
pub struct DoubleIntegrator1d {
    spec: EnvSpec,
}

impl DoubleIntegrator1d {
    pub fn new(gamma: f64) -> Self {
        Self {
            spec: EnvSpec {
                state_dim: 2,
                action_dim: 1,
                action_low: vec![-1.0],
                action_high: vec![1.0],
                horizon: HORIZON,
                gamma,
            },
        }
    }
}

impl ContinuousEnv for DoubleIntegrator1d {
    fn name(&self) -> &'static str {
        "double-integrator-1d"
    }

    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reward_bound(&self) -> f64 {
        ARENA * ARENA + CONTROL_COST
    }

    fn reset(&self, seed: u64) -> ContinuousEnvState {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pos = rng.random_range(-1.0..1.0);
        let vel = rng.random_range(-1.0..1.0);
        ContinuousEnvState {
            observation: vec![pos, vel],
            steps_elapsed: 0,
            rng,
        }
    }

    fn transition(&self, obs: &[f64], a: &[f64]) -> (Vec<f64>, f64) {
        let mut vel = (obs[1] + DT * a[0]).clamp(-MAX_SPEED, MAX_SPEED);
        let mut pos = obs[0] + DT * vel;
        if pos.abs() > ARENA {
            pos = pos.clamp(-ARENA, ARENA);
            vel = 0.0;
        }
        (vec![pos, vel], -pos * pos - CONTROL_COST * a[0] * a[0])
    }
}

/// Looks an environment up by its CLI name.
pub fn make_env(name: &str, gamma: f64) -> Result<Box<dyn ContinuousEnv + Send + Sync>> {
    match name {
        "point-mass-2d" => Ok(Box::new(PointMass2d::new(gamma))),
        "double-integrator-1d" => Ok(Box::new(DoubleIntegrator1d::new(gamma))),
        other => Err(Error::input("env", format!("unknown environment `{other}`"))),
    }
}
