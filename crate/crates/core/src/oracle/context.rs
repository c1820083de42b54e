use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::envs::{mdp_exact_q, mdp_stationary_distribution, FiniteMdp};
use crate::error::{Error, Result};
use crate::policy::{FactoredCategoricalPolicy, ParamSharing};

/// Everything the exact checks enumerate over, precomputed once.
///
/// Tables indexed by `(s, a)` use the MDP's joint action index and are laid
/// out `s * n_joint + a`.
#[derive(Debug, Clone)]
pub struct ExactContext {
    pub mdp: FiniteMdp,
    pub pi: FactoredCategoricalPolicy,
    pub mu: FactoredCategoricalPolicy,
    pub d_mu: Vec<f64>,
    pub q_pi: Vec<f64>,
    pub pi_table: Vec<f64>,
    pub mu_table: Vec<f64>,
    pub rho: Vec<f64>,
    /// `scores[i][s * n_joint + a] = grad log pi(a^i | s)`.
    pub scores: Vec<Vec<Vec<f64>>>,
    components: Vec<Vec<usize>>,
}

impl ExactContext {
    pub fn new(mdp: FiniteMdp, pi: FactoredCategoricalPolicy, mu: FactoredCategoricalPolicy) -> Result<Self> {
        mdp.validate()?;
        if pi.num_params() != mu.num_params() || pi.sharing() != mu.sharing() {
            return Err(Error::Config("target and behaviour policies must share a layout".into()));
        }
        let pi_table = pi.joint_table(&mdp)?;
        let mu_table = mu.joint_table(&mdp)?;
        for (k, (p, m)) in pi_table.iter().zip(&mu_table).enumerate() {
            if *p > 0.0 && !(*m > 0.0) {
                return Err(Error::Model(format!(
                    "behaviour policy gives zero probability where the target does not (state {}, action {})",
                    k / mdp.n_joint(),
                    k % mdp.n_joint()
                )));
            }
        }
        let d_mu = mdp_stationary_distribution(&mdp, &mu_table)?;
        let q_pi = mdp_exact_q(&mdp, &pi_table)?;
        let rho: Vec<f64> = pi_table.iter().zip(&mu_table).map(|(p, m)| p / m).collect();
        let na = mdp.n_joint();
        let components: Vec<Vec<usize>> = (0..na).map(|a| mdp.decode(a)).collect();
        let scores = (0..mdp.n_dims())
            .map(|i| {
                (0..mdp.n_states * na)
                    .map(|k| pi.grad_log_prob_factor(k / na, i, components[k % na][i]))
                    .collect()
            })
            .collect();
        Ok(Self {
            mdp,
            pi,
            mu,
            d_mu,
            q_pi,
            pi_table,
            mu_table,
            rho,
            scores,
            components,
        })
    }

    pub fn n_states(&self) -> usize {
        self.mdp.n_states
    }

    pub fn n_joint(&self) -> usize {
        self.mdp.n_joint()
    }

    pub fn n_dims(&self) -> usize {
        self.mdp.n_dims()
    }

    pub fn num_params(&self) -> usize {
        self.pi.num_params()
    }

    pub fn components(&self, a: usize) -> &[usize] {
        &self.components[a]
    }

    /// Number of `a^{-i}` configurations.
    pub fn n_rest(&self, i: usize) -> usize {
        self.n_joint() / self.mdp.action_dims[i]
    }

    /// Row-major index of `a^{-i}` over the remaining dimensions.
    pub fn rest_index(&self, a: usize, i: usize) -> usize {
        let comps = &self.components[a];
        let mut idx = 0;
        for (j, (&c, &d)) in comps.iter().zip(&self.mdp.action_dims).enumerate() {
            if j != i {
                idx = idx * d + c;
            }
        }
        idx
    }

    /// `mu(a^i | s)` for the `i`-th component of joint action `a`.
    pub fn mu_factor(&self, s: usize, i: usize, a: usize) -> f64 {
        self.mu.prob_factor(s, i, self.components[a][i])
    }

    /// `d_mu(s) * prod_{j != i} mu(a^j | s)` for the `a^{-i}` part of `a`.
    pub fn rest_weight(&self, s: usize, i: usize, a: usize) -> f64 {
        let k = s * self.n_joint() + a;
        self.d_mu[s] * self.mu_table[k] / self.mu_factor(s, i, a)
    }

    /// `z_i(s, a) = rho(s, a) grad log pi(a^i | s)`.
    pub fn z(&self, i: usize, s: usize, a: usize) -> Vec<f64> {
        let k = s * self.n_joint() + a;
        self.scores[i][k].iter().map(|g| self.rho[k] * g).collect()
    }

    /// `|z_i(s, a)|^2`.
    pub fn z_norm_sq(&self, i: usize, s: usize, a: usize) -> f64 {
        let k = s * self.n_joint() + a;
        self.rho[k] * self.rho[k] * self.scores[i][k].iter().map(|g| g * g).sum::<f64>()
    }
}

/// Per-dimension baseline values `b_i(s, a^{-i})`, stored
/// `tables[i][s * n_rest(i) + rest]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BaselineTable {
    pub tables: Vec<Vec<f64>>,
}

impl BaselineTable {
    pub fn from_fn(ctx: &ExactContext, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let tables = (0..ctx.n_dims())
            .map(|i| {
                let nr = ctx.n_rest(i);
                (0..ctx.n_states() * nr).map(|k| f(i, k / nr, k % nr)).collect()
            })
            .collect();
        Self { tables }
    }

    pub fn zeros(ctx: &ExactContext) -> Self {
        Self::from_fn(ctx, |_, _, _| 0.0)
    }

    /// Entries drawn from `U[-scale, scale]`.
    pub fn random<R: Rng + ?Sized>(ctx: &ExactContext, rng: &mut R, scale: f64) -> Self {
        Self::from_fn(ctx, |_, _, _| rng.random_range(-scale..scale))
    }

    /// Value for dimension `i` at state `s` and joint action `a`.
    pub fn at(&self, ctx: &ExactContext, i: usize, s: usize, a: usize) -> f64 {
        self.tables[i][s * ctx.n_rest(i) + ctx.rest_index(a, i)]
    }

    /// Entrywise `self + other`.
    pub fn plus(&self, other: &BaselineTable) -> Self {
        Self {
            tables: self
                .tables
                .iter()
                .zip(&other.tables)
                .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x + y).collect())
                .collect(),
        }
    }

    pub fn max_abs_diff(&self, other: &BaselineTable) -> f64 {
        self.tables
            .iter()
            .zip(&other.tables)
            .flat_map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).abs()))
            .fold(0.0, f64::max)
    }
}

/// Shape limits for randomized instances.
pub const MAX_STATES: usize = 5;
pub const MAX_ACTIONS_PER_DIM: usize = 4;
pub const MAX_GAMMA: f64 = 0.95;
pub const MIXING: f64 = 0.01;

/// A reproducible small instance: 2 to 5 states, two action dimensions of 2
/// to 4 choices, `gamma` in `[0.5, 0.95]`, rewards in `[-1, 1]`, disjoint
/// logits in `[-1, 1]` for both policies.
pub fn random_instance(seed: u64) -> Result<ExactContext> {
    random_instance_with(seed, ParamSharing::Disjoint)
}

pub fn random_instance_with(seed: u64, sharing: ParamSharing) -> Result<ExactContext> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_states = rng.random_range(2..=MAX_STATES);
    let dims = match sharing {
        ParamSharing::Disjoint => vec![
            rng.random_range(2..=MAX_ACTIONS_PER_DIM),
            rng.random_range(2..=MAX_ACTIONS_PER_DIM),
        ],
        ParamSharing::Tied => {
            let d = rng.random_range(2..=MAX_ACTIONS_PER_DIM);
            vec![d, d]
        }
    };
    let gamma = rng.random_range(0.5..=MAX_GAMMA);
    let mdp = FiniteMdp::random(&mut rng, n_states, &dims, gamma, MIXING);
    let pi = FactoredCategoricalPolicy::random(&mut rng, n_states, &dims, sharing, 1.0)?;
    let mu = FactoredCategoricalPolicy::random(&mut rng, n_states, &dims, sharing, 1.0)?;
    ExactContext::new(mdp, pi, mu)
}

/// An instance where dimension `i` is uniform under both policies at every
/// state, so `|z_i|^2` does not depend on `a^i`.
pub fn flat_factor_instance(seed: u64, i: usize) -> Result<ExactContext> {
    let base = random_instance(seed)?;
    let (mut pi, mut mu) = (base.pi.clone(), base.mu.clone());
    for s in 0..base.n_states() {
        pi.logits_mut(i, s).fill(0.0);
        mu.logits_mut(i, s).fill(0.0);
    }
    ExactContext::new(base.mdp, pi, mu)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn random_instances_respect_limits() {
        for seed in 0..20 {
            let ctx = random_instance(seed).unwrap();
            assert!(ctx.n_states() <= MAX_STATES);
            assert_eq!(ctx.n_dims(), 2);
            assert!(ctx.mdp.action_dims.iter().all(|d| *d <= MAX_ACTIONS_PER_DIM));
            assert!(ctx.mdp.gamma <= MAX_GAMMA);
            assert!((ctx.d_mu.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn rest_index_enumerates_other_dimensions() {
        let ctx = random_instance(3).unwrap();
        for i in 0..2 {
            let mut seen = vec![0usize; ctx.n_rest(i)];
            for a in 0..ctx.n_joint() {
                seen[ctx.rest_index(a, i)] += 1;
            }
            assert!(seen.iter().all(|c| *c == ctx.mdp.action_dims[i]));
        }
    }

    #[test]
    fn rest_weights_marginalise_to_state_distribution() {
        let ctx = random_instance(4).unwrap();
        for i in 0..2 {
            for s in 0..ctx.n_states() {
                let total: f64 = (0..ctx.n_joint())
                    .filter(|a| ctx.components(*a)[i] == 0)
                    .map(|a| ctx.rest_weight(s, i, a))
                    .sum();
                assert!((total - ctx.d_mu[s]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn flat_factor_has_constant_score_weight() {
        let ctx = flat_factor_instance(5, 0).unwrap();
        for s in 0..ctx.n_states() {
            for a in 0..ctx.n_joint() {
                // Same a^{-i}, different a^i.
                let mut c = ctx.components(a).to_vec();
                c[0] = (c[0] + 1) % ctx.mdp.action_dims[0];
                let b = ctx.mdp.encode(&c);
                assert!((ctx.z_norm_sq(0, s, a) - ctx.z_norm_sq(0, s, b)).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn zero_behaviour_probability_is_a_coverage_error() {
        let base = random_instance(6).unwrap();
        let mut mu = base.mu.clone();
        mu.logits_mut(0, 0)[0] = -1e6;
        assert!(matches!(ExactContext::new(base.mdp, base.pi, mu), Err(Error::Model(_))));
    }
}
