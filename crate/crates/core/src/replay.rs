//! Fixed-capacity FIFO replay of transitions.
//!
//! Each record keeps the behaviour policy's per-dimension mean and standard
//! deviation, not just its density at the taken action, so the behaviour
//! distribution can be resampled at update time.

use rand::Rng;

use crate::error::{Error, Result};
use crate::policy::{normal_log_pdf, ActionSample};

const AUDIT_TOL: f64 = 1e-10;
/// Every `AUDIT_PERIOD`-th push recomputes the stored log densities.
const AUDIT_PERIOD: u64 = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub s: Vec<f64>,
    pub a: Vec<f64>,
    pub r: f64,
    pub s_next: Vec<f64>,
    pub done: bool,
    pub behavior_mean: Vec<f64>,
    pub behavior_std: Vec<f64>,
    pub behavior_logp_per_dim: Vec<f64>,
}

impl Transition {
    /// Builds a record from a behaviour-policy draw.
    pub fn from_sample(s: Vec<f64>, sample: &ActionSample, r: f64, s_next: Vec<f64>, done: bool) -> Self {
        Self {
            s,
            a: sample.action.clone(),
            r,
            s_next,
            done,
            behavior_mean: sample.mean.clone(),
            behavior_std: sample.std.clone(),
            behavior_logp_per_dim: sample.log_density.clone(),
        }
    }

    pub fn action_dim(&self) -> usize {
        self.a.len()
    }

    pub fn behavior_log_prob(&self) -> f64 {
        self.behavior_logp_per_dim.iter().sum()
    }

    /// Structural checks: lengths, finiteness, positive std.
    pub fn validate(&self) -> Result<()> {
        let m = self.a.len();
        for (name, len) in [
            ("behavior_mean", self.behavior_mean.len()),
            ("behavior_std", self.behavior_std.len()),
            ("behavior_logp_per_dim", self.behavior_logp_per_dim.len()),
        ] {
            if len != m {
                return Err(Error::input(name, format!("length {len}, action has {m}")));
            }
        }
        if self.s.len() != self.s_next.len() {
            return Err(Error::input("s_next", "length differs from s"));
        }
        for (name, v) in [
            ("s", &self.s),
            ("a", &self.a),
            ("s_next", &self.s_next),
            ("behavior_mean", &self.behavior_mean),
            ("behavior_logp_per_dim", &self.behavior_logp_per_dim),
        ] {
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::input(name, "non-finite entry"));
            }
        }
        if !self.r.is_finite() {
            return Err(Error::input("r", "non-finite reward"));
        }
        if self.behavior_std.iter().any(|x| !(x.is_finite() && *x > 0.0)) {
            return Err(Error::input("behavior_std", "entries must be finite and > 0"));
        }
        Ok(())
    }

    /// Largest gap between stored and recomputed per-dimension log densities.
    pub fn density_error(&self) -> f64 {
        (0..self.a.len())
            .map(|i| {
                let lp = normal_log_pdf(self.a[i], self.behavior_mean[i], self.behavior_std[i]);
                (lp - self.behavior_logp_per_dim[i]).abs()
            })
            .fold(0.0, f64::max)
    }

    pub fn audit(&self) -> Result<()> {
        let err = self.density_error();
        if err > AUDIT_TOL {
            return Err(Error::input(
                "behavior_logp_per_dim",
                format!("stored log density off by {err:e}"),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    items: Vec<Transition>,
    write_cursor: usize,
    pushes: u64,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Config("replay capacity must be positive".into()));
        }
        Ok(Self {
            capacity,
            items: Vec::new(),
            write_cursor: 0,
            pushes: 0,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn total_pushes(&self) -> u64 {
        self.pushes
    }

    pub fn push(&mut self, t: Transition) -> Result<()> {
        t.validate()?;
        if self.pushes % AUDIT_PERIOD == 0 {
            t.audit()?;
        }
        if self.items.len() < self.capacity {
            self.items.push(t);
        } else {
            self.items[self.write_cursor] = t;
        }
        self.write_cursor = (self.write_cursor + 1) % self.capacity;
        self.pushes += 1;
        Ok(())
    }

    /// `n` uniform draws with replacement.
    pub fn sample_batch<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Vec<&Transition>> {
        if self.items.is_empty() {
            return Err(Error::State("cannot sample from an empty replay buffer".into()));
        }
        Ok((0..n)
            .map(|_| &self.items[rng.random_range(0..self.items.len())])
            .collect())
    }

    /// Stored transitions from oldest to newest.
    pub fn iter_oldest_first(&self) -> impl Iterator<Item = &Transition> {
        let split = if self.items.len() < self.capacity { 0 } else { self.write_cursor };
        self.items[split..].iter().chain(self.items[..split].iter())
    }

    /// Full density audit; returns the worst error seen.
    pub fn audit(&self) -> Result<f64> {
        let mut worst: f64 = 0.0;
        for t in &self.items {
            t.audit()?;
            worst = worst.max(t.density_error());
        }
        Ok(worst)
    }

    /// New buffer holding at most the `limit` most recent transitions.
    pub fn most_recent(&self, limit: usize) -> Result<ReplayBuffer> {
        let keep = self.len().min(limit);
        let mut out = ReplayBuffer::new(limit.max(1))?;
        for t in self.iter_oldest_first().skip(self.len() - keep) {
            out.items.push(t.clone());
        }
        out.write_cursor = out.items.len() % out.capacity;
        out.pushes = out.items.len() as u64;
        Ok(out)
    }
}
