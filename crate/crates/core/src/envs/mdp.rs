use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const STOCHASTIC_TOL: f64 = 1e-12;

/// Finite MDP whose action is a tuple of per-dimension categorical choices.
///
/// Joint actions are indexed row-major over `action_dims` (the first
/// dimension is the most significant digit).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FiniteMdp {
    pub n_states: usize,
    pub action_dims: Vec<usize>,
    /// `P[s][a][s']`, flattened.
    pub transition: Vec<f64>,
    /// `r[s][a]`, flattened.
    pub reward: Vec<f64>,
    pub initial: Vec<f64>,
    pub gamma: f64,
}

impl FiniteMdp {
    pub fn n_joint(&self) -> usize {
        self.action_dims.iter().product()
    }

    pub fn n_dims(&self) -> usize {
        self.action_dims.len()
    }

    pub fn p(&self, s: usize, a: usize, s_next: usize) -> f64 {
        self.transition[(s * self.n_joint() + a) * self.n_states + s_next]
    }

    pub fn p_row(&self, s: usize, a: usize) -> &[f64] {
        let off = (s * self.n_joint() + a) * self.n_states;
        &self.transition[off..off + self.n_states]
    }

    pub fn r(&self, s: usize, a: usize) -> f64 {
        self.reward[s * self.n_joint() + a]
    }

    pub fn encode(&self, components: &[usize]) -> usize {
        components
            .iter()
            .zip(&self.action_dims)
            .fold(0, |acc, (c, d)| acc * d + c)
    }

    pub fn decode(&self, mut joint: usize) -> Vec<usize> {
        let mut out = vec![0; self.action_dims.len()];
        for (k, d) in self.action_dims.iter().enumerate().rev() {
            out[k] = joint % d;
            joint /= d;
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_states == 0 || self.action_dims.is_empty() || self.action_dims.contains(&0) {
            return Err(Error::Model("need at least one state and one action per dimension".into()));
        }
        let na = self.n_joint();
        if self.transition.len() != self.n_states * na * self.n_states {
            return Err(Error::Model("transition tensor has the wrong size".into()));
        }
        if self.reward.len() != self.n_states * na || self.initial.len() != self.n_states {
            return Err(Error::Model("reward or initial distribution has the wrong size".into()));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::Model(format!("gamma {} outside (0, 1)", self.gamma)));
        }
        for s in 0..self.n_states {
            for a in 0..na {
                check_distribution(self.p_row(s, a), &format!("transition row (s={s}, a={a})"))?;
            }
        }
        if self.reward.iter().any(|r| !r.is_finite()) {
            return Err(Error::Model("non-finite reward".into()));
        }
        check_distribution(&self.initial, "initial distribution")
    }

    /// Random instance: rewards `U[-1, 1]`, transition rows from normalised
    /// `U(0, 1)` weights blended with `mixing` of the uniform row.
    pub fn random<R: Rng + ?Sized>(
        rng: &mut R,
        n_states: usize,
        action_dims: &[usize],
        gamma: f64,
        mixing: f64,
    ) -> Self {
        let na: usize = action_dims.iter().product();
        let mut transition = Vec::with_capacity(n_states * na * n_states);
        for _ in 0..n_states * na {
            let w: Vec<f64> = (0..n_states).map(|_| rng.random_range(1e-3..1.0)).collect();
            let total: f64 = w.iter().sum();
            transition.extend(
                w.iter()
                    .map(|x| (1.0 - mixing) * x / total + mixing / n_states as f64),
            );
        }
        let reward = (0..n_states * na).map(|_| rng.random_range(-1.0..1.0)).collect();
        let w: Vec<f64> = (0..n_states).map(|_| rng.random_range(0.1..1.0)).collect();
        let total: f64 = w.iter().sum();
        Self {
            n_states,
            action_dims: action_dims.to_vec(),
            transition,
            reward,
            initial: w.iter().map(|x| x / total).collect(),
            gamma,
        }
    }

    /// State-to-state chain `M[s][s'] = sum_a pi(a|s) P(s'|s,a)`.
    pub fn induced_chain(&self, policy: &[f64]) -> Result<Vec<f64>> {
        self.check_policy(policy)?;
        let (ns, na) = (self.n_states, self.n_joint());
        let mut m = vec![0.0; ns * ns];
        for s in 0..ns {
            for a in 0..na {
                let w = policy[s * na + a];
                if w == 0.0 {
                    continue;
                }
                for (t, p) in self.p_row(s, a).iter().enumerate() {
                    m[s * ns + t] += w * p;
                }
            }
        }
        Ok(m)
    }

    pub fn check_policy(&self, policy: &[f64]) -> Result<()> {
        let na = self.n_joint();
        if policy.len() != self.n_states * na {
            return Err(Error::input(
                "policy",
                format!("expected {}x{na} table, got {} entries", self.n_states, policy.len()),
            ));
        }
        for s in 0..self.n_states {
            check_distribution(&policy[s * na..(s + 1) * na], &format!("policy row s={s}"))
                .map_err(|e| Error::input("policy", e.to_string()))?;
        }
        Ok(())
    }
}

fn check_distribution(row: &[f64], what: &str) -> Result<()> {
    if row.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err(Error::Model(format!("{what} has a negative or non-finite entry")));
    }
    let total: f64 = row.iter().sum();
    if (total - 1.0).abs() > STOCHASTIC_TOL {
        return Err(Error::Model(format!("{what} sums to {total}, not 1")));
    }
    Ok(())
}

/// Irreducible and aperiodic, judged from the support of `chain`.
fn check_ergodic(chain: &[f64], n: usize) -> Result<()> {
    let edges = |u: usize| (0..n).filter(move |&v| chain[u * n + v] > 0.0);
    // Forward BFS levels from state 0.
    let mut level = vec![usize::MAX; n];
    level[0] = 0;
    let mut queue = std::collections::VecDeque::from([0]);
    while let Some(u) = queue.pop_front() {
        for v in edges(u) {
            if level[v] == usize::MAX {
                level[v] = level[u] + 1;
                queue.push_back(v);
            }
        }
    }
    // Backward reachability to state 0.
    let mut back = vec![false; n];
    back[0] = true;
    let mut stack = vec![0];
    while let Some(v) = stack.pop() {
        for u in 0..n {
            if !back[u] && chain[u * n + v] > 0.0 {
                back[u] = true;
                stack.push(u);
            }
        }
    }
    let reducible = level.iter().any(|l| *l == usize::MAX) || back.iter().any(|b| !b);
    // Period = gcd over edges of level(u) + 1 - level(v).
    let mut period = 0usize;
    if !reducible {
        for u in 0..n {
            for v in edges(u) {
                let d = (level[u] as i64 + 1 - level[v] as i64).unsigned_abs() as usize;
                period = gcd(period, d);
            }
        }
    }
    if reducible || period != 1 {
        let why = if reducible { "reducible" } else { "periodic" };
        return Err(Error::Model(format!(
            "policy-induced chain is {why}; add uniform mixing to the transitions (e.g. 0.01) \
             so the limiting state distribution exists"
        )));
    }
    Ok(())
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Limiting state distribution of the chain induced by `policy`
/// (a joint-action table `policy[s][a]`).
pub fn mdp_stationary_distribution(mdp: &FiniteMdp, policy: &[f64]) -> Result<Vec<f64>> {
    let n = mdp.n_states;
    let chain = mdp.induced_chain(policy)?;
    check_ergodic(&chain, n)?;
    // (M^T - I) d = 0 with the last equation replaced by sum(d) = 1.
    let mut a = DMatrix::<f64>::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            a[(i, j)] = chain[j * n + i] - if i == j { 1.0 } else { 0.0 };
        }
    }
    let mut rhs = DVector::<f64>::zeros(n);
    for j in 0..n {
        a[(n - 1, j)] = 1.0;
    }
    rhs[n - 1] = 1.0;
    let d = a
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::Model("stationary system is singular".into()))?;
    let d: Vec<f64> = d.iter().map(|x| x.max(0.0)).collect();
    let total: f64 = d.iter().sum();
    let d: Vec<f64> = d.iter().map(|x| x / total).collect();
    for t in 0..n {
        let back: f64 = (0..n).map(|s| d[s] * chain[s * n + t]).sum();
        if (back - d[t]).abs() > 1e-10 {
            return Err(Error::Inconsistent(format!(
                "stationary residual {} at state {t}",
                (back - d[t]).abs()
            )));
        }
    }
    Ok(d)
}

/// Exact action values of `policy`: solves `(I - gamma P_pi) V = r_pi` and
/// returns `Q[s][a] = r + gamma P V`, flattened.
pub fn mdp_exact_q(mdp: &FiniteMdp, policy: &[f64]) -> Result<Vec<f64>> {
    let (ns, na) = (mdp.n_states, mdp.n_joint());
    let chain = mdp.induced_chain(policy)?;
    let mut a = DMatrix::<f64>::identity(ns, ns);
    let mut r_pi = DVector::<f64>::zeros(ns);
    for s in 0..ns {
        for t in 0..ns {
            a[(s, t)] -= mdp.gamma * chain[s * ns + t];
        }
        r_pi[s] = (0..na).map(|k| policy[s * na + k] * mdp.r(s, k)).sum();
    }
    let v = a
        .lu()
        .solve(&r_pi)
        .ok_or_else(|| Error::Inconsistent("policy evaluation system is singular".into()))?;
    let mut q = vec![0.0; ns * na];
    for s in 0..ns {
        for k in 0..na {
            let ev: f64 = mdp.p_row(s, k).iter().zip(v.iter()).map(|(p, v)| p * v).sum();
            q[s * na + k] = mdp.r(s, k) + mdp.gamma * ev;
        }
    }
    let residual = bellman_residual(mdp, policy, &q);
    if residual > 1e-9 {
        return Err(Error::Inconsistent(format!("Bellman residual {residual}")));
    }
    Ok(q)
}

/// `max |Q - (r + gamma P pi Q)|` over all entries.
pub fn bellman_residual(mdp: &FiniteMdp, policy: &[f64], q: &[f64]) -> f64 {
    let (ns, na) = (mdp.n_states, mdp.n_joint());
    let v: Vec<f64> = (0..ns)
        .map(|s| (0..na).map(|k| policy[s * na + k] * q[s * na + k]).sum())
        .collect();
    let mut worst: f64 = 0.0;
    for s in 0..ns {
        for k in 0..na {
            let ev: f64 = mdp.p_row(s, k).iter().zip(&v).map(|(p, v)| p * v).sum();
            worst = worst.max((q[s * na + k] - mdp.r(s, k) - mdp.gamma * ev).abs());
        }
    }
    worst
}
