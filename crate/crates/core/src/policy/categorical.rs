use rand::Rng;

use crate::autodiff::{grad_scalar, ParamVector};
use crate::envs::FiniteMdp;
use crate::error::{Error, Result};

/// How per-dimension logit tables map onto parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamSharing {
    /// One table per dimension, each in its own segment.
    Disjoint,
    /// Every dimension reads the same table. Requires equal action counts.
    /// Exists to build deliberate counterexamples to score orthogonality.
    Tied,
}

/// Tabular factored softmax policy `pi(a|s) = prod_i softmax(logits[i][s])[a^i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FactoredCategoricalPolicy {
    n_states: usize,
    action_dims: Vec<usize>,
    sharing: ParamSharing,
    params: ParamVector,
}

impl FactoredCategoricalPolicy {
    pub fn zeros(n_states: usize, action_dims: &[usize], sharing: ParamSharing) -> Result<Self> {
        let params = match sharing {
            ParamSharing::Disjoint => {
                let names: Vec<String> = (0..action_dims.len()).map(|i| format!("logits_dim{i}")).collect();
                let layout: Vec<(&str, usize)> = names
                    .iter()
                    .zip(action_dims)
                    .map(|(n, d)| (n.as_str(), n_states * d))
                    .collect();
                ParamVector::zeros(&layout)?
            }
            ParamSharing::Tied => {
                let d = action_dims[0];
                if action_dims.iter().any(|x| *x != d) {
                    return Err(Error::Config("tied logits need equal action counts".into()));
                }
                ParamVector::zeros(&[("logits_shared", n_states * d)])?
            }
        };
        Ok(Self {
            n_states,
            action_dims: action_dims.to_vec(),
            sharing,
            params,
        })
    }

    /// Logits drawn from `U[-scale, scale]`.
    pub fn random<R: Rng + ?Sized>(
        rng: &mut R,
        n_states: usize,
        action_dims: &[usize],
        sharing: ParamSharing,
        scale: f64,
    ) -> Result<Self> {
        let mut p = Self::zeros(n_states, action_dims, sharing)?;
        p.params.update(|v| v.iter_mut().for_each(|x| *x = rng.random_range(-scale..scale)))?;
        Ok(p)
    }

    pub fn params(&self) -> &ParamVector {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamVector {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn action_dims(&self) -> &[usize] {
        &self.action_dims
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn sharing(&self) -> ParamSharing {
        self.sharing
    }

    /// Offset of the logit row for `(i, s)`.
    pub fn row_offset(&self, i: usize, s: usize) -> usize {
        match self.sharing {
            ParamSharing::Disjoint => {
                let seg: usize = self.action_dims[..i].iter().map(|d| d * self.n_states).sum();
                seg + s * self.action_dims[i]
            }
            ParamSharing::Tied => s * self.action_dims[0],
        }
    }

    pub fn logits(&self, i: usize, s: usize) -> &[f64] {
        let off = self.row_offset(i, s);
        &self.params.values()[off..off + self.action_dims[i]]
    }

    /// Mutable logit row; writes go to the shared table under `Tied`.
    pub fn logits_mut(&mut self, i: usize, s: usize) -> &mut [f64] {
        let off = self.row_offset(i, s);
        let d = self.action_dims[i];
        // Segment-free access is fine here: rows never straddle segments.
        let name = match self.sharing {
            ParamSharing::Disjoint => format!("logits_dim{i}"),
            ParamSharing::Tied => "logits_shared".to_string(),
        };
        let seg_off = self.params.segment(&name).map(|s| s.offset).unwrap_or(0);
        &mut self.params.slice_mut(&name).expect("segment exists")[off - seg_off..off - seg_off + d]
    }

    /// `softmax(logits[i][s])`.
    pub fn probs(&self, i: usize, s: usize) -> Vec<f64> {
        softmax(self.logits(i, s))
    }

    pub fn prob_factor(&self, s: usize, i: usize, a_i: usize) -> f64 {
        self.probs(i, s)[a_i]
    }

    pub fn prob(&self, s: usize, components: &[usize]) -> f64 {
        components
            .iter()
            .enumerate()
            .map(|(i, &a)| self.prob_factor(s, i, a))
            .product()
    }

    pub fn log_prob_factor(&self, s: usize, i: usize, a_i: usize) -> f64 {
        let l = self.logits(i, s);
        l[a_i] - log_sum_exp(l)
    }

    /// Analytic `grad log pi(a^i|s)`: `e_{a^i} - softmax` on the `(i, s)`
    /// logit row, zero elsewhere.
    pub fn grad_log_prob_factor(&self, s: usize, i: usize, a_i: usize) -> Vec<f64> {
        let mut g = vec![0.0; self.num_params()];
        let off = self.row_offset(i, s);
        for (k, p) in self.probs(i, s).iter().enumerate() {
            g[off + k] = if k == a_i { 1.0 - p } else { -p };
        }
        g
    }

    /// Gradient of the joint `log pi(a|s)`, recorded on a tape as
    /// `sum_i (logit[a^i] - log sum exp(logits))`.
    pub fn grad_log_prob_joint_tape(&self, s: usize, components: &[usize]) -> Result<Vec<f64>> {
        let (_, g) = grad_scalar(self.params.values(), |t| {
            let mut total = t.scalar_constant(0.0);
            for (i, &a) in components.iter().enumerate() {
                let row = t.param(self.row_offset(i, s), self.action_dims[i]);
                let e = t.exp(row);
                let z = t.sum(e);
                let lse = t.log(z);
                let pick = t.slice_cols(row, a, 1);
                let lp = t.sub(pick, lse);
                total = t.add(total, lp);
            }
            total
        })?;
        Ok(g)
    }

    /// Joint-action table `pi[s][a]` in the MDP's joint indexing.
    pub fn joint_table(&self, mdp: &FiniteMdp) -> Result<Vec<f64>> {
        if mdp.n_states != self.n_states || mdp.action_dims != self.action_dims {
            return Err(Error::Config("policy shape does not match the MDP".into()));
        }
        let na = mdp.n_joint();
        let mut out = Vec::with_capacity(self.n_states * na);
        for s in 0..self.n_states {
            let probs: Vec<Vec<f64>> = (0..self.action_dims.len()).map(|i| self.probs(i, s)).collect();
            for j in 0..na {
                let comps = mdp.decode(j);
                out.push(comps.iter().enumerate().map(|(i, &a)| probs[i][a]).product());
            }
        }
        Ok(out)
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|x| x / z).collect()
}

fn log_sum_exp(logits: &[f64]) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn pol(sharing: ParamSharing) -> FactoredCategoricalPolicy {
        FactoredCategoricalPolicy::random(&mut ChaCha8Rng::seed_from_u64(0), 3, &[3, 3], sharing, 1.0).unwrap()
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let p = pol(ParamSharing::Disjoint);
        for s in 0..3 {
            for i in 0..2 {
                assert!((p.probs(i, s).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn expected_score_is_zero() {
        let p = pol(ParamSharing::Disjoint);
        for s in 0..3 {
            for i in 0..2 {
                let probs = p.probs(i, s);
                let mut acc = vec![0.0; p.num_params()];
                for (a, pr) in probs.iter().enumerate() {
                    for (x, g) in acc.iter_mut().zip(p.grad_log_prob_factor(s, i, a)) {
                        *x += pr * g;
                    }
                }
                assert!(acc.iter().all(|x| x.abs() < 1e-15));
            }
        }
    }

    #[test]
    fn disjoint_scores_are_orthogonal() {
        let p = pol(ParamSharing::Disjoint);
        for s in 0..3 {
            for a in 0..3 {
                for b in 0..3 {
                    let gi = p.grad_log_prob_factor(s, 0, a);
                    let gj = p.grad_log_prob_factor(s, 1, b);
                    assert_eq!(gi.iter().zip(&gj).map(|(x, y)| x * y).sum::<f64>(), 0.0);
                    assert!(gi.iter().zip(&gj).all(|(x, y)| *x == 0.0 || *y == 0.0));
                }
            }
        }
    }

    #[test]
    fn tied_scores_overlap() {
        let p = pol(ParamSharing::Tied);
        let gi = p.grad_log_prob_factor(1, 0, 0);
        let gj = p.grad_log_prob_factor(1, 1, 0);
        assert!(gi.iter().zip(&gj).map(|(x, y)| x * y).sum::<f64>() > 0.0);
    }

    #[test]
    fn tape_joint_gradient_is_sum_of_factors() {
        for sharing in [ParamSharing::Disjoint, ParamSharing::Tied] {
            let p = pol(sharing);
            let tape = p.grad_log_prob_joint_tape(2, &[1, 2]).unwrap();
            let g0 = p.grad_log_prob_factor(2, 0, 1);
            let g1 = p.grad_log_prob_factor(2, 1, 2);
            for k in 0..p.num_params() {
                assert!((tape[k] - g0[k] - g1[k]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn log_prob_consistent_with_probs() {
        let p = pol(ParamSharing::Disjoint);
        assert!((p.log_prob_factor(1, 1, 2).exp() - p.prob_factor(1, 1, 2)).abs() < 1e-15);
        let joint = p.prob(1, &[0, 2]);
        assert!((joint - p.prob_factor(1, 0, 0) * p.prob_factor(1, 1, 2)).abs() < 1e-16);
    }

    #[test]
    fn logits_mut_targets_the_right_row() {
        let mut p = pol(ParamSharing::Disjoint);
        p.logits_mut(1, 2).fill(0.0);
        assert_eq!(p.logits(1, 2), &[0.0; 3]);
        assert_ne!(p.logits(0, 2), &[0.0; 3]);
    }
}
