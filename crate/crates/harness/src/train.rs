//! The collect/update loop.
//!
//! Each iteration takes `env_steps_per_iteration` environment steps under
//! the behaviour policy, then (after warmup) runs
//! `gradient_steps_per_iteration` updates. Each update draws one minibatch
//! and uses it for a critic step, a target sync and a policy ascent step.
//! The behaviour policy is a snapshot of the target policy with widened
//! standard deviations, refreshed every `behavior_refresh` steps.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use offoab_core::autodiff::AdamState;
use offoab_core::checkpoint;
use offoab_core::critic::Critic;
use offoab_core::envs::{make_env, ContinuousEnv};
use offoab_core::estimator::{assemble_gradient, EstimatorCounters};
use offoab_core::policy::GaussianPolicy;
use offoab_core::replay::{ReplayBuffer, Transition};
use offoab_core::{Error, Result};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::metrics::{write_metrics, MetricsRow};

/// Generator streams carved out of the run seed.
mod stream {
    pub const EPISODES: u64 = 0;
    pub const ACTIONS: u64 = 1;
    pub const UPDATES: u64 = 2;
    pub const POLICY_INIT: u64 = 3;
    pub const CRITIC_INIT: u64 = 4;
    pub const EVAL: u64 = 5;
}

pub fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct AnomalyCounters {
    pub ratio_saturations: u64,
    pub ratio_clips: u64,
    pub baseline_fallbacks: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AbortInfo {
    pub timestep: u64,
    pub cause: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: RunConfig,
    pub code_version: String,
    pub seed: u64,
    pub started_unix_secs: u64,
    pub finished_unix_secs: u64,
    pub metrics: Vec<MetricsRow>,
    pub checkpoint_timesteps: Vec<u64>,
    pub anomalies: AnomalyCounters,
    pub policy_updates: u64,
    /// Largest stored-vs-recomputed log-density gap over the final buffer.
    pub replay_audit_worst: f64,
    pub replay_len: usize,
    pub variance_lab: Vec<crate::variance_lab::VarianceRow>,
    pub abort: Option<AbortInfo>,
}

/// Weights captured at an evaluation point.
#[derive(Debug, Clone)]
pub struct Snapshot {
    pub timestep: u64,
    pub policy: GaussianPolicy,
    pub critic: Critic,
}

pub struct TrainOutput {
    pub manifest: RunManifest,
    pub snapshots: Vec<Snapshot>,
    pub policy: GaussianPolicy,
    pub critic: Critic,
    pub buffer: ReplayBuffer,
}

pub fn unix_secs() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

pub fn checkpoint_dir(run_dir: &Path, timestep: u64) -> PathBuf {
    run_dir.join("checkpoints").join(format!("{timestep:09}"))
}

/// Mean and population std of undiscounted returns of the deterministic
/// mean policy over `episodes` fixed start states.
pub fn evaluate(env: &dyn ContinuousEnv, policy: &GaussianPolicy, seed: u64, episodes: usize) -> Result<(f64, f64)> {
    let mut starts = rng_for(seed, stream::EVAL);
    let mut returns = Vec::with_capacity(episodes);
    for _ in 0..episodes {
        let mut state = env.reset(starts.next_u64());
        let mut total = 0.0;
        loop {
            let a = policy.mean(&state.observation)?;
            let out = env.step(&state, &a)?;
            total += out.reward;
            state = out.state;
            if out.done {
                break;
            }
        }
        returns.push(total);
    }
    let n = returns.len() as f64;
    let mean = returns.iter().sum::<f64>() / n;
    let var = returns.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    Ok((mean, var.sqrt()))
}

struct Loop<'a> {
    cfg: &'a RunConfig,
    env: Box<dyn ContinuousEnv + Send + Sync>,
    policy: GaussianPolicy,
    behavior: GaussianPolicy,
    critic: Critic,
    policy_adam: AdamState,
    buffer: ReplayBuffer,
    episode_rng: ChaCha8Rng,
    action_rng: ChaCha8Rng,
    update_rng: ChaCha8Rng,
    gradient_steps: u64,
    policy_updates: u64,
    window_loss: (f64, u64),
    window_counters: EstimatorCounters,
    anomalies: AnomalyCounters,
}

impl Loop<'_> {
    fn update(&mut self) -> Result<()> {
        let cfg = self.cfg;
        let batch = self.buffer.sample_batch(cfg.batch_size, &mut self.update_rng)?;
        let loss = self.critic.critic_update(&batch, &self.policy, cfg.lr_q, &mut self.update_rng)?;
        self.gradient_steps += 1;
        self.critic.target_sync(self.gradient_steps)?;
        self.window_loss.0 += loss;
        self.window_loss.1 += 1;
        let g = assemble_gradient(
            &self.policy,
            &self.critic,
            &batch,
            &cfg.baseline_kind(),
            cfg.ratio_clip,
            &mut self.update_rng,
        )?;
        self.window_counters.merge(&g.counters);
        self.anomalies.ratio_saturations += g.counters.ratio_saturations;
        self.anomalies.ratio_clips += g.counters.ratio_clips;
        self.anomalies.baseline_fallbacks += g.counters.baseline_fallbacks;
        let descent: Vec<f64> = g.grad.iter().map(|x| -x).collect();
        self.policy_adam.step(self.policy.params_mut(), &descent, cfg.lr_pi)?;
        self.policy.clamp_log_std();
        self.policy_updates += 1;
        Ok(())
    }

    fn metrics_row(&mut self, timestep: u64) -> Result<MetricsRow> {
        let (mean, std) = evaluate(self.env.as_ref(), &self.policy, self.cfg.seed, self.cfg.eval_episodes)?;
        let (loss_sum, n) = std::mem::take(&mut self.window_loss);
        let c = std::mem::take(&mut self.window_counters);
        Ok(MetricsRow {
            timestep,
            eval_mean_return: mean,
            eval_std_return: std,
            critic_loss: if n == 0 { f64::NAN } else { loss_sum / n as f64 },
            mean_ratio: if c.ratio_count == 0 { f64::NAN } else { c.mean_ratio() },
            ratio_clip_count: c.ratio_clips,
        })
    }
}

/// Runs one configuration to completion. With `out_dir`, writes
/// `config.txt`, `metrics.csv`, `manifest.json`, per-evaluation
/// checkpoints and (if enabled) the final replay buffer.
///
/// A numeric failure stops the run; the manifest written to `out_dir`
/// records the step and cause, and the error is returned.
pub fn train(cfg: &RunConfig, out_dir: Option<&Path>) -> Result<TrainOutput> {
    cfg.validate()?;
    let started = unix_secs();
    let env = make_env(&cfg.env, cfg.gamma)?;
    let spec = env.spec().clone();
    let policy = GaussianPolicy::new(
        spec.state_dim,
        spec.action_dim,
        cfg.hidden.clone(),
        cfg.init_log_std,
        &mut rng_for(cfg.seed, stream::POLICY_INIT),
    )?;
    let critic = Critic::new(
        spec.state_dim,
        spec.action_dim,
        cfg.hidden.clone(),
        cfg.critic_settings(),
        &mut rng_for(cfg.seed, stream::CRITIC_INIT),
    )?;
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("config.txt"), cfg.to_text())?;
    }
    let mut lp = Loop {
        cfg,
        behavior: policy.with_std_scale(cfg.exploration_std_scale),
        policy_adam: AdamState::new(policy.num_params()),
        policy,
        critic,
        env,
        buffer: ReplayBuffer::new(cfg.buffer_capacity)?,
        episode_rng: rng_for(cfg.seed, stream::EPISODES),
        action_rng: rng_for(cfg.seed, stream::ACTIONS),
        update_rng: rng_for(cfg.seed, stream::UPDATES),
        gradient_steps: 0,
        policy_updates: 0,
        window_loss: (0.0, 0),
        window_counters: EstimatorCounters::default(),
        anomalies: AnomalyCounters::default(),
    };
    let mut metrics = Vec::new();
    let mut snapshots = Vec::new();
    let mut abort = None;

    let mut state = lp.env.reset(lp.episode_rng.next_u64());
    let mut t = 0u64;
    let result: Result<()> = (|| {
        while t < cfg.total_timesteps {
            t += 1;
            let sample = lp.behavior.sample_action(&state.observation, &mut lp.action_rng)?;
            let out = lp.env.step(&state, &sample.action)?;
            lp.buffer.push(Transition::from_sample(
                state.observation.clone(),
                &sample,
                out.reward,
                out.state.observation.clone(),
                false,
            ))?;
            // Episodes end only at the horizon, which is a time limit rather
            // than a terminal state, so the bootstrap is kept.
            state = if out.done { lp.env.reset(lp.episode_rng.next_u64()) } else { out.state };
            if t % cfg.behavior_refresh == 0 {
                lp.behavior = lp.policy.with_std_scale(cfg.exploration_std_scale);
            }
            if t > cfg.warmup_timesteps && t % cfg.env_steps_per_iteration == 0 {
                for _ in 0..cfg.gradient_steps_per_iteration {
                    lp.update()?;
                }
            }
            if t % cfg.eval_every == 0 {
                metrics.push(lp.metrics_row(t)?);
                snapshots.push(Snapshot { timestep: t, policy: lp.policy.clone(), critic: lp.critic.clone() });
                if let Some(dir) = out_dir {
                    let ck = checkpoint_dir(dir, t);
                    std::fs::create_dir_all(&ck)?;
                    checkpoint::save_policy(&ck.join("policy.bin"), &lp.policy)?;
                    checkpoint::save_critic(&ck.join("critic.bin"), &lp.critic)?;
                }
            }
        }
        Ok(())
    })();
    if let Err(e) = &result {
        log::error!("run aborted at timestep {t}: {e}");
        abort = Some(AbortInfo { timestep: t, cause: e.to_string() });
    }

    let replay_audit_worst = if abort.is_none() { lp.buffer.audit()? } else { f64::NAN };
    let manifest = RunManifest {
        config: cfg.clone(),
        code_version: env!("CARGO_PKG_VERSION").to_string(),
        seed: cfg.seed,
        started_unix_secs: started,
        finished_unix_secs: unix_secs(),
        checkpoint_timesteps: snapshots.iter().map(|s| s.timestep).collect(),
        metrics,
        anomalies: lp.anomalies,
        policy_updates: lp.policy_updates,
        replay_audit_worst,
        replay_len: lp.buffer.len(),
        variance_lab: Vec::new(),
        abort,
    };
    if let Some(dir) = out_dir {
        write_metrics(&dir.join("metrics.csv"), &manifest.metrics)?;
        write_manifest(&dir.join("manifest.json"), &manifest)?;
        if cfg.save_replay && manifest.abort.is_none() {
            checkpoint::save_replay(&dir.join("replay.bin"), &lp.buffer)?;
        }
    }
    result?;
    Ok(TrainOutput {
        manifest,
        snapshots,
        policy: lp.policy,
        critic: lp.critic,
        buffer: lp.buffer,
    })
}

pub fn write_manifest(path: &Path, m: &RunManifest) -> Result<()> {
    let text = serde_json::to_string_pretty(m).map_err(|e| Error::Io(e.to_string()))?;
    std::fs::write(path, text + "\n")?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<RunManifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse { line: e.line(), detail: e.to_string() })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> RunConfig {
        let mut c = RunConfig::desk();
        c.env = "double-integrator-1d".into();
        c.total_timesteps = 600;
        c.warmup_timesteps = 200;
        c.eval_every = 200;
        c.eval_episodes = 2;
        c.batch_size = 16;
        c.hidden = vec![8];
        c.mc_samples = 3;
        c.k_samples = 3;
        c
    }

    #[test]
    fn zero_timesteps_is_a_valid_empty_run() {
        let mut c = tiny();
        c.total_timesteps = 0;
        let out = train(&c, None).unwrap();
        assert!(out.manifest.metrics.is_empty());
        assert_eq!(out.manifest.replay_len, 0);
        assert!(out.manifest.abort.is_none());
    }

    #[test]
    fn updates_start_after_warmup() {
        let c = tiny();
        let out = train(&c, None).unwrap();
        assert_eq!(out.manifest.policy_updates, (600 - 200) / c.env_steps_per_iteration);
        assert!(out.manifest.metrics[0].critic_loss.is_nan());
        assert!(out.manifest.metrics[1].critic_loss.is_finite());
        assert_eq!(out.manifest.checkpoint_timesteps, vec![200, 400, 600]);
    }

    #[test]
    fn frozen_actor_keeps_its_return() {
        let mut c = tiny();
        c.lr_pi = 0.0;
        let out = train(&c, None).unwrap();
        let env = make_env(&c.env, c.gamma).unwrap();
        let initial = GaussianPolicy::new(2, 1, c.hidden.clone(), c.init_log_std, &mut rng_for(c.seed, stream::POLICY_INIT)).unwrap();
        let (r0, _) = evaluate(env.as_ref(), &initial, c.seed, c.eval_episodes).unwrap();
        assert_eq!(out.manifest.metrics.last().unwrap().eval_mean_return, r0);
        assert_ne!(out.critic.params(), Critic::new(2, 1, c.hidden.clone(), c.critic_settings(), &mut rng_for(c.seed, stream::CRITIC_INIT)).unwrap().params());
    }

    #[test]
    fn manifest_round_trips_through_json() {
        let dir = tempfile::tempdir().unwrap();
        let out = train(&tiny(), Some(dir.path())).unwrap();
        let back = read_manifest(&dir.path().join("manifest.json")).unwrap();
        assert!(back.metrics[0].critic_loss.is_nan());
        assert_eq!(back.metrics.len(), out.manifest.metrics.len());
        assert_eq!(back.metrics.last(), out.manifest.metrics.last());
    }

    #[test]
    fn same_seed_same_metrics() {
        let a = train(&tiny(), None).unwrap().manifest.metrics;
        let b = train(&tiny(), None).unwrap().manifest.metrics;
        let bits = |m: &[MetricsRow]| m.iter().map(|r| (r.eval_mean_return.to_bits(), r.critic_loss.to_bits())).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
        let mut other = tiny();
        other.seed = 1;
        assert_ne!(bits(&a), bits(&train(&other, None).unwrap().manifest.metrics));
    }
}
