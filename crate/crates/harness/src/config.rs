//! Run configuration: two named profiles and a `key=value` text format.
//!
//! ```text
//! # comments and blank lines are ignored
//! profile=desk            # optional, must come first; desk or paper
//! env=point-mass-2d
//! baseline=approx_action
//! hidden=64,64
//! ratio_clip=none
//! ```
//!
//! Keys not mentioned keep the profile value. `--set key=value` overrides
//! go through the same parser after the file.

use std::fmt::Write as _;
use std::str::FromStr;

use offoab_core::critic::CriticSettings;
use offoab_core::estimator::{BaselineKind, BaselineVariant};
use offoab_core::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub profile: String,
    pub env: String,
    pub seed: u64,
    pub total_timesteps: u64,
    pub batch_size: usize,
    pub buffer_capacity: usize,
    pub gamma: f64,
    pub lr_q: f64,
    pub lr_pi: f64,
    pub tau: f64,
    pub sync_interval: u64,
    /// Policy draws for the bootstrap max.
    pub k_samples: usize,
    pub warmup_timesteps: u64,
    pub eval_every: u64,
    pub eval_episodes: usize,
    pub baseline: BaselineVariant,
    /// Monte Carlo draws per baseline evaluation.
    pub mc_samples: usize,
    /// Environment steps between behaviour snapshots.
    pub behavior_refresh: u64,
    pub exploration_std_scale: f64,
    pub ratio_clip: Option<f64>,
    pub env_steps_per_iteration: u64,
    pub gradient_steps_per_iteration: usize,
    pub hidden: Vec<usize>,
    pub init_log_std: f64,
    /// Gradient estimates per variance reading.
    pub variance_repeats: usize,
    pub save_replay: bool,
}

impl RunConfig {
    /// Full-length settings with the large networks.
    pub fn paper() -> Self {
        Self {
            profile: "paper".into(),
            env: "point-mass-2d".into(),
            seed: 0,
            total_timesteps: 1_000_000,
            batch_size: 256,
            buffer_capacity: 1_000_000,
            gamma: 0.99,
            lr_q: 3e-4,
            lr_pi: 3e-4,
            tau: 0.004,
            sync_interval: 250,
            k_samples: 10,
            warmup_timesteps: 25_000,
            eval_every: 10_000,
            eval_episodes: 10,
            baseline: BaselineVariant::ApproxAction,
            mc_samples: 10,
            behavior_refresh: 1000,
            exploration_std_scale: 1.2,
            ratio_clip: None,
            env_steps_per_iteration: 1,
            gradient_steps_per_iteration: 1,
            hidden: vec![256, 256],
            init_log_std: -0.5,
            variance_repeats: 10,
            save_replay: true,
        }
    }

    /// Sized for a single CPU core: shorter runs, narrower networks,
    /// smaller batches and one update per four environment steps.
    pub fn desk() -> Self {
        Self {
            profile: "desk".into(),
            total_timesteps: 100_000,
            batch_size: 64,
            warmup_timesteps: 10_000,
            sync_interval: 1,
            env_steps_per_iteration: 4,
            hidden: vec![32, 32],
            lr_q: 1e-3,
            lr_pi: 3e-4,
            ..Self::paper()
        }
    }

    pub fn profile(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "paper" => Ok(Self::paper()),
            other => Err(Error::Config(format!("unknown profile `{other}` (expected desk or paper)"))),
        }
    }

    pub fn baseline_kind(&self) -> BaselineKind {
        BaselineKind::new(self.baseline, self.mc_samples)
    }

    pub fn critic_settings(&self) -> CriticSettings {
        CriticSettings {
            gamma: self.gamma,
            tau: self.tau,
            sync_interval: self.sync_interval,
            k_samples: self.k_samples,
        }
    }

    /// Sets one key from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "profile" => {
                return Err(Error::input("profile", "profile must be the first key of a config file"));
            }
            "env" => self.env = v.to_string(),
            "seed" => self.seed = num(key, v)?,
            "total_timesteps" => self.total_timesteps = num(key, v)?,
            "batch_size" => self.batch_size = num(key, v)?,
            "buffer_capacity" => self.buffer_capacity = num(key, v)?,
            "gamma" => self.gamma = num(key, v)?,
            "lr_q" => self.lr_q = num(key, v)?,
            "lr_pi" => self.lr_pi = num(key, v)?,
            "tau" => self.tau = num(key, v)?,
            "sync_interval" => self.sync_interval = num(key, v)?,
            "k_samples" => self.k_samples = num(key, v)?,
            "warmup_timesteps" => self.warmup_timesteps = num(key, v)?,
            "eval_every" => self.eval_every = num(key, v)?,
            "eval_episodes" => self.eval_episodes = num(key, v)?,
            "baseline" => {
                self.baseline = BaselineVariant::from_str(v).map_err(|_| {
                    Error::input("baseline", format!("`{v}` is not one of none, state_value, optimal_action, approx_action"))
                })?
            }
            "mc_samples" => self.mc_samples = num(key, v)?,
            "behavior_refresh" => self.behavior_refresh = num(key, v)?,
            "exploration_std_scale" => self.exploration_std_scale = num(key, v)?,
            "ratio_clip" => {
                self.ratio_clip = if v.eq_ignore_ascii_case("none") { None } else { Some(num(key, v)?) }
            }
            "env_steps_per_iteration" => self.env_steps_per_iteration = num(key, v)?,
            "gradient_steps_per_iteration" => self.gradient_steps_per_iteration = num(key, v)?,
            "hidden" => {
                self.hidden = if v.is_empty() {
                    Vec::new()
                } else {
                    v.split(',').map(|x| num(key, x.trim())).collect::<Result<_>>()?
                }
            }
            "init_log_std" => self.init_log_std = num(key, v)?,
            "variance_repeats" => self.variance_repeats = num(key, v)?,
            "save_replay" => self.save_replay = num(key, v)?,
            other => return Err(Error::input(other, "unknown configuration key")),
        }
        Ok(())
    }

    /// Parses a `key=value` override.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| Error::input("--set", format!("expected key=value, got `{assignment}`")))?;
        self.set(k, v)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg: Option<RunConfig> = None;
        for (k, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let wrap = |e: Error| Error::Parse { line: k + 1, detail: e.to_string() };
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: k + 1,
                detail: format!("expected key=value, got `{line}`"),
            })?;
            match (&mut cfg, key.trim()) {
                (None, "profile") => cfg = Some(Self::profile(value.trim()).map_err(wrap)?),
                (Some(_), "profile") => {
                    return Err(Error::Parse { line: k + 1, detail: "profile must be the first key".into() })
                }
                (c, _) => c.get_or_insert_with(Self::desk).set(key, value).map_err(wrap)?,
            }
        }
        let cfg = cfg.unwrap_or_else(Self::desk);
        cfg.validate()?;
        Ok(cfg)
    }

    /// Canonical text form; parsing it gives back an equal config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let hidden: Vec<String> = self.hidden.iter().map(|h| h.to_string()).collect();
        let clip = self.ratio_clip.map_or("none".to_string(), |c| c.to_string());
        let _ = writeln!(s, "profile={}", self.profile);
        for (k, v) in [
            ("env", self.env.clone()),
            ("seed", self.seed.to_string()),
            ("total_timesteps", self.total_timesteps.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("buffer_capacity", self.buffer_capacity.to_string()),
            ("gamma", self.gamma.to_string()),
            ("lr_q", self.lr_q.to_string()),
            ("lr_pi", self.lr_pi.to_string()),
            ("tau", self.tau.to_string()),
            ("sync_interval", self.sync_interval.to_string()),
            ("k_samples", self.k_samples.to_string()),
            ("warmup_timesteps", self.warmup_timesteps.to_string()),
            ("eval_every", self.eval_every.to_string()),
            ("eval_episodes", self.eval_episodes.to_string()),
            ("baseline", self.baseline.name().to_string()),
            ("mc_samples", self.mc_samples.to_string()),
            ("behavior_refresh", self.behavior_refresh.to_string()),
            ("exploration_std_scale", self.exploration_std_scale.to_string()),
            ("ratio_clip", clip),
            ("env_steps_per_iteration", self.env_steps_per_iteration.to_string()),
            ("gradient_steps_per_iteration", self.gradient_steps_per_iteration.to_string()),
            ("hidden", hidden.join(",")),
            ("init_log_std", self.init_log_std.to_string()),
            ("variance_repeats", self.variance_repeats.to_string()),
            ("save_replay", self.save_replay.to_string()),
        ] {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("batch_size", self.batch_size as u64),
            ("buffer_capacity", self.buffer_capacity as u64),
            ("sync_interval", self.sync_interval),
            ("k_samples", self.k_samples as u64),
            ("eval_every", self.eval_every),
            ("eval_episodes", self.eval_episodes as u64),
            ("mc_samples", self.mc_samples as u64),
            ("behavior_refresh", self.behavior_refresh),
            ("env_steps_per_iteration", self.env_steps_per_iteration),
            ("gradient_steps_per_iteration", self.gradient_steps_per_iteration as u64),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::input(name, "must be positive"));
            }
        }
        if self.variance_repeats < 2 {
            return Err(Error::input("variance_repeats", "needs at least two repeats"));
        }
        if self.total_timesteps > 0 && self.eval_every > self.total_timesteps {
            return Err(Error::input("eval_every", "must not exceed total_timesteps"));
        }
        if !(self.lr_q >= 0.0 && self.lr_q.is_finite()) {
            return Err(Error::input("lr_q", "must be finite and >= 0"));
        }
        if !(self.lr_pi >= 0.0 && self.lr_pi.is_finite()) {
            return Err(Error::input("lr_pi", "must be finite and >= 0"));
        }
        if !(self.exploration_std_scale > 0.0 && self.exploration_std_scale.is_finite()) {
            return Err(Error::input("exploration_std_scale", "must be finite and > 0"));
        }
        if let Some(c) = self.ratio_clip {
            if !(c > 0.0) {
                return Err(Error::input("ratio_clip", "must be > 0"));
            }
        }
        if !self.init_log_std.is_finite() {
            return Err(Error::input("init_log_std", "must be finite"));
        }
        if self.hidden.contains(&0) {
            return Err(Error::input("hidden", "layer widths must be positive"));
        }
        self.critic_settings().validate()?;
        self.baseline_kind().validate()?;
        offoab_core::envs::make_env(&self.env, self.gamma)?;
        Ok(())
    }
}

fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::input(key.trim(), format!("cannot parse `{v}`")))
}
