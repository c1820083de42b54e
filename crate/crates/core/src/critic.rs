//! Action-value network `Q_w(s, a)` with a blended target copy `Q_wbar`.
//!
//! The network input is the concatenation `[s, a]`.

use rand::Rng;

use crate::autodiff::{grad_scalar, AdamState, MlpLayout, ParamVector};
use crate::error::{Error, Result};
use crate::policy::GaussianPolicy;
use crate::replay::Transition;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CriticSettings {
    pub gamma: f64,
    pub tau: f64,
    pub sync_interval: u64,
    /// Policy draws used for the bootstrap max.
    pub k_samples: usize,
}

impl Default for CriticSettings {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            tau: 0.004,
            sync_interval: 1,
            k_samples: 10,
        }
    }
}

impl CriticSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(Error::Config(format!("tau must lie in (0, 1], got {}", self.tau)));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::Config(format!("gamma must lie in (0, 1), got {}", self.gamma)));
        }
        if self.k_samples == 0 || self.sync_interval == 0 {
            return Err(Error::Config("k_samples and sync_interval must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Critic {
    layout: MlpLayout,
    state_dim: usize,
    params: ParamVector,
    target: ParamVector,
    settings: CriticSettings,
    adam: AdamState,
}

impl Critic {
    /// Fresh network with the target initialised to an exact copy.
    pub fn new<R: Rng + ?Sized>(
        state_dim: usize,
        action_dim: usize,
        hidden: Vec<usize>,
        settings: CriticSettings,
        rng: &mut R,
    ) -> Result<Self> {
        let layout = MlpLayout::new(state_dim + action_dim, hidden, 1);
        let mut params = ParamVector::zeros(&[("q_net", layout.param_count())])?;
        layout.init(params.slice_mut("q_net")?, rng)?;
        let target = params.clone();
        Self::from_parts(layout, state_dim, params, target, settings)
    }

    pub fn from_parts(
        layout: MlpLayout,
        state_dim: usize,
        params: ParamVector,
        target: ParamVector,
        settings: CriticSettings,
    ) -> Result<Self> {
        settings.validate()?;
        if layout.output_dim != 1 || state_dim > layout.input_dim {
            return Err(Error::Config("critic layout must map [s, a] to one output".into()));
        }
        layout.check_segment(params.len())?;
        if !params.same_layout(&target) {
            return Err(Error::Config("target layout differs from the online network".into()));
        }
        let adam = AdamState::new(params.len());
        Ok(Self {
            layout,
            state_dim,
            params,
            target,
            settings,
            adam,
        })
    }

    pub fn layout(&self) -> &MlpLayout {
        &self.layout
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn action_dim(&self) -> usize {
        self.layout.input_dim - self.state_dim
    }

    pub fn settings(&self) -> &CriticSettings {
        &self.settings
    }

    pub fn params(&self) -> &ParamVector {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamVector {
        &mut self.params
    }

    pub fn target_params(&self) -> &ParamVector {
        &self.target
    }

    pub fn target_params_mut(&mut self) -> &mut ParamVector {
        &mut self.target
    }

    pub fn reset_optimizer(&mut self) {
        self.adam = AdamState::new(self.params.len());
    }

    fn weights(&self, use_target: bool) -> &[f64] {
        if use_target {
            self.target.values()
        } else {
            self.params.values()
        }
    }

    pub fn q_value(&self, s: &[f64], a: &[f64], use_target: bool) -> Result<f64> {
        if s.len() != self.state_dim || a.len() != self.action_dim() {
            return Err(Error::Config(format!(
                "critic expects state/action lengths {}/{}, got {}/{}",
                self.state_dim,
                self.action_dim(),
                s.len(),
                a.len()
            )));
        }
        let mut x = Vec::with_capacity(self.layout.input_dim);
        x.extend_from_slice(s);
        x.extend_from_slice(a);
        Ok(self.layout.forward_batch(self.weights(use_target), &x, 1)?[0])
    }

    /// Q for `rows` packed `[s, a]` inputs.
    pub fn q_batch(&self, inputs: &[f64], rows: usize, use_target: bool) -> Result<Vec<f64>> {
        self.layout.forward_batch(self.weights(use_target), inputs, rows)
    }

    /// `y = r` when `done`, else `r + gamma * max_k Q_wbar(s', a'_k)` with
    /// `a'_k ~ pi(.|s')`.
    pub fn critic_target<R: Rng + ?Sized>(
        &self,
        policy: &GaussianPolicy,
        r: f64,
        s_next: &[f64],
        done: bool,
        rng: &mut R,
    ) -> Result<f64> {
        if !r.is_finite() {
            return Err(Error::input("r", "non-finite reward"));
        }
        if done {
            return Ok(r);
        }
        let best = self.bootstrap_max(policy, s_next, 1, rng)?[0];
        Ok(r + self.settings.gamma * best)
    }

    /// Sampled max of the target network at each of `rows` packed states.
    pub fn bootstrap_max<R: Rng + ?Sized>(
        &self,
        policy: &GaussianPolicy,
        states: &[f64],
        rows: usize,
        rng: &mut R,
    ) -> Result<Vec<f64>> {
        sampled_max(
            |x, n| self.q_batch(x, n, true),
            policy,
            states,
            rows,
            self.settings.k_samples,
            rng,
        )
    }

    /// Targets for a batch; terminal transitions do not bootstrap.
    pub fn batch_targets<R: Rng + ?Sized>(
        &self,
        batch: &[&Transition],
        policy: &GaussianPolicy,
        rng: &mut R,
    ) -> Result<Vec<f64>> {
        let live: Vec<&Transition> = batch.iter().copied().filter(|t| !t.done).collect();
        let next: Vec<f64> = live.iter().flat_map(|t| t.s_next.iter().copied()).collect();
        let mut boot = self.bootstrap_max(policy, &next, live.len(), rng)?.into_iter();
        Ok(batch
            .iter()
            .map(|t| {
                if t.done {
                    t.r
                } else {
                    t.r + self.settings.gamma * boot.next().expect("one value per live row")
                }
            })
            .collect())
    }

    /// One Adam step on the mean squared temporal-difference error.
    /// Returns the loss before the step. The target network is read only.
    pub fn critic_update<R: Rng + ?Sized>(
        &mut self,
        batch: &[&Transition],
        policy: &GaussianPolicy,
        lr: f64,
        rng: &mut R,
    ) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::input("batch", "critic update needs at least one transition"));
        }
        let y = self.batch_targets(batch, policy, rng)?;
        let inputs: Vec<f64> = batch
            .iter()
            .flat_map(|t| t.s.iter().chain(t.a.iter()).copied())
            .collect();
        self.regress(&inputs, &y, lr)
    }

    /// Mean squared error of the online network against fixed `targets`,
    /// with its gradient.
    pub fn loss_and_grad(&self, inputs: &[f64], targets: &[f64]) -> Result<(f64, Vec<f64>)> {
        let rows = targets.len();
        let q = self.q_batch(inputs, rows, false)?;
        for (j, (qj, yj)) in q.iter().zip(targets).enumerate() {
            if !(qj - yj).is_finite() {
                return Err(Error::numeric(
                    format!("critic batch index {j}"),
                    format!("non-finite residual (q = {qj}, y = {yj})"),
                ));
            }
        }
        grad_scalar(self.params.values(), |t| {
            let x = t.constant(rows, self.layout.input_dim, inputs.to_vec());
            let y = t.constant(rows, 1, targets.to_vec());
            let q = self.layout.record(t, 0, x);
            let d = t.sub(y, q);
            let d2 = t.square(d);
            t.mean(d2)
        })
    }

    /// Adam step toward fixed targets; returns the pre-step loss.
    pub fn regress(&mut self, inputs: &[f64], targets: &[f64], lr: f64) -> Result<f64> {
        let (loss, grad) = self.loss_and_grad(inputs, targets)?;
        self.adam.step(&mut self.params, &grad, lr)?;
        Ok(loss)
    }

    /// `wbar <- tau * w + (1 - tau) * wbar` when `step` is a multiple of the
    /// sync interval. Returns whether the blend ran.
    pub fn target_sync(&mut self, step: u64) -> Result<bool> {
        if step == 0 {
            return Err(Error::input("step", "target sync steps start at 1"));
        }
        if step % self.settings.sync_interval != 0 {
            return Ok(false);
        }
        let tau = self.settings.tau;
        let w = self.params.values();
        let before = max_gap(w, self.target.values());
        if tau == 1.0 {
            self.target.set_values(w)?;
            return Ok(true);
        }
        let blended: Vec<f64> = w
            .iter()
            .zip(self.target.values())
            .map(|(wi, ti)| tau * wi + (1.0 - tau) * ti)
            .collect();
        let after = max_gap(w, &blended);
        let want = (1.0 - tau) * before;
        if (after - want).abs() > 1e-9 * before + 1e-12 {
            return Err(Error::Inconsistent(format!(
                "target blend is not a contraction: gap {after:e}, expected {want:e}"
            )));
        }
        self.target.set_values(&blended)?;
        Ok(true)
    }
}

/// Anything that maps packed `[s, a]` rows to action values.
pub trait ActionValue {
    fn evaluate(&self, inputs: &[f64], rows: usize) -> Result<Vec<f64>>;
}

/// The online network.
impl ActionValue for Critic {
    fn evaluate(&self, inputs: &[f64], rows: usize) -> Result<Vec<f64>> {
        self.q_batch(inputs, rows, false)
    }
}

fn max_gap(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// For each of `rows` packed states, the largest of `eval` over `k` actions
/// drawn from `policy`. `eval` maps packed `[s, a]` rows to values.
pub fn sampled_max<F, R>(
    eval: F,
    policy: &GaussianPolicy,
    states: &[f64],
    rows: usize,
    k: usize,
    rng: &mut R,
) -> Result<Vec<f64>>
where
    F: Fn(&[f64], usize) -> Result<Vec<f64>>,
    R: Rng + ?Sized,
{
    if rows == 0 {
        return Ok(Vec::new());
    }
    let sd = policy.state_dim();
    let m = policy.action_dim();
    let means = policy.mean_batch(states, rows)?;
    let std = policy.std();
    let mut inputs = Vec::with_capacity(rows * k * (sd + m));
    for j in 0..rows {
        for _ in 0..k {
            inputs.extend_from_slice(&states[j * sd..(j + 1) * sd]);
            for i in 0..m {
                let z: f64 = rng.sample(rand_distr::StandardNormal);
                inputs.push(means[j * m + i] + std[i] * z);
            }
        }
    }
    let q = eval(&inputs, rows * k)?;
    Ok(q.chunks(k)
        .map(|c| c.iter().cloned().fold(f64::NEG_INFINITY, f64::max))
        .collect())
}
