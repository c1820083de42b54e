use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{grad_scalar, MlpLayout, ParamVector, Tape, Var};
use crate::error::{Error, Result};

pub const LOG_STD_BOUNDS: (f64, f64) = (-5.0, 2.0);
const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// `log N(x; mean, std^2)`.
pub fn normal_log_pdf(x: f64, mean: f64, std: f64) -> f64 {
    let z = (x - mean) / std;
    -0.5 * z * z - std.ln() - HALF_LN_2PI
}

/// One draw from a policy plus everything a replay record needs.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionSample {
    pub action: Vec<f64>,
    /// Per-dimension density `pi(a^i | s)`.
    pub density: Vec<f64>,
    pub log_density: Vec<f64>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Factored diagonal Gaussian: an MLP produces the per-dimension means and a
/// state-independent vector holds the per-dimension log standard deviations.
///
/// Parameter segments are `mean_net` followed by `log_std`. Action
/// dimensions are indexed from 0.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPolicy {
    params: ParamVector,
    layout: MlpLayout,
    log_std_bounds: (f64, f64),
}

impl GaussianPolicy {
    pub fn new<R: Rng + ?Sized>(
        state_dim: usize,
        action_dim: usize,
        hidden: Vec<usize>,
        init_log_std: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let layout = MlpLayout::new(state_dim, hidden, action_dim);
        let mut params =
            ParamVector::zeros(&[("mean_net", layout.param_count()), ("log_std", action_dim)])?;
        layout.init(params.slice_mut("mean_net")?, rng)?;
        params.slice_mut("log_std")?.fill(init_log_std);
        let mut policy = Self {
            params,
            layout,
            log_std_bounds: LOG_STD_BOUNDS,
        };
        policy.clamp_log_std();
        Ok(policy)
    }

    pub fn from_parts(layout: MlpLayout, params: ParamVector) -> Result<Self> {
        layout.check_segment(params.segment("mean_net")?.len)?;
        if params.segment("log_std")?.len != layout.output_dim {
            return Err(Error::Config("log_std segment does not match action_dim".into()));
        }
        Ok(Self {
            params,
            layout,
            log_std_bounds: LOG_STD_BOUNDS,
        })
    }

    pub fn layout(&self) -> &MlpLayout {
        &self.layout
    }

    pub fn params(&self) -> &ParamVector {
        &self.params
    }

    /// Mutable access for optimisers. Call [`Self::clamp_log_std`] afterwards.
    pub fn params_mut(&mut self) -> &mut ParamVector {
        &mut self.params
    }

    pub fn state_dim(&self) -> usize {
        self.layout.input_dim
    }

    pub fn action_dim(&self) -> usize {
        self.layout.output_dim
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    fn mean_offset(&self) -> usize {
        0
    }

    fn log_std_offset(&self) -> usize {
        self.layout.param_count()
    }

    pub fn log_std(&self) -> &[f64] {
        &self.params.values()[self.log_std_offset()..]
    }

    pub fn std(&self) -> Vec<f64> {
        self.log_std().iter().map(|l| l.exp()).collect()
    }

    pub fn clamp_log_std(&mut self) {
        let (lo, hi) = self.log_std_bounds;
        if let Ok(ls) = self.params.slice_mut("log_std") {
            ls.iter_mut().for_each(|l| *l = l.clamp(lo, hi));
        }
    }

    /// Snapshot with every standard deviation multiplied by `scale`.
    ///
    /// The widened log-stds are not re-clamped; the snapshot is a fixed
    /// behaviour distribution, not an updated policy.
    pub fn with_std_scale(&self, scale: f64) -> Self {
        let mut out = self.clone();
        let shift = scale.ln();
        let off = out.log_std_offset();
        out.params
            .update(|p| p[off..].iter_mut().for_each(|l| *l += shift))
            .expect("finite scale");
        out
    }

    pub fn mean(&self, s: &[f64]) -> Result<Vec<f64>> {
        self.mean_batch(s, 1)
    }

    /// Means for `rows` states packed row-major.
    pub fn mean_batch(&self, states: &[f64], rows: usize) -> Result<Vec<f64>> {
        let w = &self.params.values()[..self.log_std_offset()];
        self.layout.forward_batch(w, states, rows)
    }

    pub fn sample_action<R: Rng + ?Sized>(&self, s: &[f64], rng: &mut R) -> Result<ActionSample> {
        if s.iter().any(|x| !x.is_finite()) {
            return Err(Error::input("state", "non-finite entry"));
        }
        let mean = self.mean(s)?;
        let std = self.std();
        let action: Vec<f64> = mean
            .iter()
            .zip(&std)
            .map(|(m, sd)| {
                let z: f64 = StandardNormal.sample(rng);
                m + sd * z
            })
            .collect();
        let log_density: Vec<f64> = (0..action.len())
            .map(|i| normal_log_pdf(action[i], mean[i], std[i]))
            .collect();
        Ok(ActionSample {
            density: log_density.iter().map(|l| l.exp()).collect(),
            log_density,
            action,
            mean,
            std,
        })
    }

    fn check_index(&self, i: usize) -> Result<()> {
        if i >= self.action_dim() {
            return Err(Error::input(
                "i",
                format!("action dimension {i} out of range 0..{}", self.action_dim()),
            ));
        }
        Ok(())
    }

    /// `log pi(a^i | s)`.
    pub fn log_prob_factor(&self, s: &[f64], a: &[f64], i: usize) -> Result<f64> {
        self.check_index(i)?;
        let mean = self.mean(s)?;
        Ok(normal_log_pdf(a[i], mean[i], self.log_std()[i].exp()))
    }

    /// `log pi(a | s)`, the sum of the per-dimension factors.
    pub fn log_prob(&self, s: &[f64], a: &[f64]) -> Result<f64> {
        let mean = self.mean(s)?;
        let std = self.std();
        Ok((0..a.len()).map(|i| normal_log_pdf(a[i], mean[i], std[i])).sum())
    }

    /// Records the `rows x m` matrix of per-dimension log densities.
    fn record_log_probs(&self, tape: &mut Tape<'_>, states: Var, actions: Var) -> Var {
        let m = self.action_dim();
        let mean = self.layout.record(tape, self.mean_offset(), states);
        let log_std = tape.param(self.log_std_offset(), m);
        let diff = tape.sub(actions, mean);
        let neg_ls = tape.neg(log_std);
        let inv_std = tape.exp(neg_ls);
        let z = tape.mul(diff, inv_std);
        let z2 = tape.square(z);
        let quad = tape.scale(z2, -0.5);
        let lp = tape.sub(quad, log_std);
        tape.shift(lp, -HALF_LN_2PI)
    }

    fn check_pair(&self, s: &[f64], a: &[f64]) -> Result<()> {
        if s.len() != self.state_dim() || a.len() != self.action_dim() {
            return Err(Error::Config(format!(
                "state/action lengths {}/{} do not match policy {}/{}",
                s.len(),
                a.len(),
                self.state_dim(),
                self.action_dim()
            )));
        }
        Ok(())
    }

    /// Reverse-mode gradient of `log pi(a^i | s)` over all policy parameters.
    pub fn grad_log_prob_factor(&self, s: &[f64], a: &[f64], i: usize) -> Result<Vec<f64>> {
        self.check_index(i)?;
        self.check_pair(s, a)?;
        let (_, g) = grad_scalar(self.params.values(), |t| {
            let sv = t.constant(1, s.len(), s.to_vec());
            let av = t.constant(1, a.len(), a.to_vec());
            let lp = self.record_log_probs(t, sv, av);
            let f = t.slice_cols(lp, i, 1);
            t.sum(f)
        })?;
        Ok(g)
    }

    /// Reverse-mode gradient of the joint `log pi(a | s)`.
    pub fn grad_log_prob(&self, s: &[f64], a: &[f64]) -> Result<Vec<f64>> {
        self.check_pair(s, a)?;
        let (_, g) = grad_scalar(self.params.values(), |t| {
            let sv = t.constant(1, s.len(), s.to_vec());
            let av = t.constant(1, a.len(), a.to_vec());
            let lp = self.record_log_probs(t, sv, av);
            t.sum(lp)
        })?;
        Ok(g)
    }

    /// Gradient of `sum_j sum_i coeffs[j][i] * log pi(a_j^i | s_j)` with the
    /// coefficients held constant. All three inputs are packed row-major.
    pub fn weighted_log_prob_gradient(
        &self,
        states: &[f64],
        actions: &[f64],
        coeffs: &[f64],
        rows: usize,
    ) -> Result<Vec<f64>> {
        let m = self.action_dim();
        if states.len() != rows * self.state_dim() || actions.len() != rows * m || coeffs.len() != rows * m {
            return Err(Error::Config("batch shapes do not match the policy".into()));
        }
        let (_, g) = grad_scalar(self.params.values(), |t| {
            let sv = t.constant(rows, self.state_dim(), states.to_vec());
            let av = t.constant(rows, m, actions.to_vec());
            let cv = t.constant(rows, m, coeffs.to_vec());
            let lp = self.record_log_probs(t, sv, av);
            let w = t.mul(lp, cv);
            t.sum(w)
        })?;
        Ok(g)
    }

    /// Per-state quantities that make `|grad log pi(a^i|s)|^2` cheap to
    /// evaluate for many values of `a^i`.
    pub fn score_geometry(&self, s: &[f64]) -> Result<ScoreGeometry> {
        let m = self.action_dim();
        let mut mean_grad_norm_sq = Vec::with_capacity(m);
        let mut mean = vec![0.0; m];
        for i in 0..m {
            let (v, g) = grad_scalar(&self.params.values()[..self.log_std_offset()], |t| {
                let sv = t.constant(1, s.len(), s.to_vec());
                let out = self.layout.record(t, 0, sv);
                let o = t.slice_cols(out, i, 1);
                t.sum(o)
            })?;
            mean[i] = v;
            mean_grad_norm_sq.push(g.iter().map(|x| x * x).sum());
        }
        Ok(ScoreGeometry {
            mean,
            std: self.std(),
            mean_grad_norm_sq,
        })
    }
}

/// See [`GaussianPolicy::score_geometry`].
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreGeometry {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// `|d mean_i / d theta|^2` per dimension.
    pub mean_grad_norm_sq: Vec<f64>,
}

impl ScoreGeometry {
    /// `|grad_theta log pi(a^i|s)|^2`. The mean-net and log-std parts of the
    /// score live in disjoint segments, so the two squared terms add.
    pub fn factor_score_norm_sq(&self, i: usize, a_i: f64) -> f64 {
        let var = self.std[i] * self.std[i];
        let d = a_i - self.mean[i];
        let mean_part = d / var;
        let std_part = d * d / var - 1.0;
        mean_part * mean_part * self.mean_grad_norm_sq[i] + std_part * std_part
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn policy(seed: u64) -> GaussianPolicy {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = GaussianPolicy::new(3, 2, vec![8, 8], -0.3, &mut rng).unwrap();
        let off = p.log_std_offset();
        p.params_mut().update(|v| { v[off] = 0.2; v[off + 1] = -0.6; }).unwrap();
        p
    }

    #[test]
    fn standard_normal_at_mean() {
        assert!((normal_log_pdf(0.0, 0.0, 1.0) + 0.918_938_533_204_672_7).abs() < 1e-15);
        let mut p = policy(0);
        p.params_mut().slice_mut("log_std").unwrap().fill(0.0);
        let s = [0.1, 0.2, 0.3];
        let mean = p.mean(&s).unwrap();
        for i in 0..2 {
            assert!((p.log_prob_factor(&s, &mean, i).unwrap() + 0.918_938_533_204_672_7).abs() < 1e-14);
        }
    }

    #[test]
    fn joint_is_sum_of_factors() {
        let p = policy(1);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let s: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
            let a: Vec<f64> = (0..2).map(|_| rng.random_range(-2.0..2.0)).collect();
            let joint = p.log_prob(&s, &a).unwrap();
            let sum: f64 = (0..2).map(|i| p.log_prob_factor(&s, &a, i).unwrap()).sum();
            assert!((joint - sum).abs() < 1e-12);
        }
    }

    #[test]
    fn log_prob_matches_direct_pdf() {
        let p = policy(2);
        let s = [0.5, -0.5, 1.0];
        let a = [0.3, -1.1];
        let mean = p.mean(&s).unwrap();
        let std = p.std();
        for i in 0..2 {
            let pdf = (-(a[i] - mean[i]).powi(2) / (2.0 * std[i] * std[i])).exp()
                / (std[i] * (2.0 * std::f64::consts::PI).sqrt());
            assert!((p.log_prob_factor(&s, &a, i).unwrap() - pdf.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn sample_densities_are_consistent() {
        let mut p = policy(3);
        p.params_mut().slice_mut("log_std").unwrap().fill(0.0);
        let s = [0.0, 0.0, 0.0];
        let smp = p.sample_action(&s, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        for i in 0..2 {
            let lp = p.log_prob_factor(&s, &smp.action, i).unwrap();
            assert!((smp.density[i] - lp.exp()).abs() < 1e-12);
        }
    }

    #[test]
    fn degenerate_std_concentrates_at_mean() {
        let mut p = policy(4);
        p.params_mut().slice_mut("log_std").unwrap().fill(-50.0);
        p.clamp_log_std();
        assert_eq!(p.log_std(), &[-5.0, -5.0]);
        let s = [0.3, 0.3, 0.3];
        let mean = p.mean(&s).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let a = p.sample_action(&s, &mut rng).unwrap().action;
            for i in 0..2 {
                assert!((a[i] - mean[i]).abs() < 6.0 * (-5.0f64).exp());
            }
        }
    }

    #[test]
    fn empirical_mean_within_clt_bound() {
        let p = policy(5);
        let s = [1.0, -1.0, 0.5];
        let mean = p.mean(&s).unwrap();
        let std = p.std();
        let n = 100_000;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut acc = [0.0; 2];
        for _ in 0..n {
            let a = p.sample_action(&s, &mut rng).unwrap().action;
            acc[0] += a[0];
            acc[1] += a[1];
        }
        for i in 0..2 {
            assert!((acc[i] / n as f64 - mean[i]).abs() <= 3.0 * std[i] / (n as f64).sqrt());
        }
    }

    #[test]
    fn score_vanishes_for_mean_at_the_mean() {
        let p = policy(6);
        let s = [0.2, 0.1, -0.4];
        let a = p.mean(&s).unwrap();
        let g = p.grad_log_prob_factor(&s, &a, 1).unwrap();
        let mean_len = p.layout().param_count();
        assert!(g[..mean_len].iter().all(|x| x.abs() < 1e-12));
        // d/dlog_std at the mean is -1 for its own dimension, 0 for the other.
        assert!((g[mean_len + 1] + 1.0).abs() < 1e-12);
        assert_eq!(g[mean_len], 0.0);
    }

    #[test]
    fn factor_gradient_matches_finite_differences() {
        let p = policy(7);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let h = 1e-5;
        for _ in 0..50 {
            let s: Vec<f64> = (0..3).map(|_| rng.random_range(-1.5..1.5)).collect();
            let a: Vec<f64> = (0..2).map(|_| rng.random_range(-1.5..1.5)).collect();
            let i = rng.random_range(0..2);
            let g = p.grad_log_prob_factor(&s, &a, i).unwrap();
            let mut q = p.clone();
            for k in 0..p.num_params() {
                let base = p.params().values()[k];
                q.params_mut().update(|v| v[k] = base + h).unwrap();
                let fp = q.log_prob_factor(&s, &a, i).unwrap();
                q.params_mut().update(|v| v[k] = base - h).unwrap();
                let fm = q.log_prob_factor(&s, &a, i).unwrap();
                q.params_mut().update(|v| v[k] = base).unwrap();
                let fd = (fp - fm) / (2.0 * h);
                assert!(
                    (g[k] - fd).abs() <= 1e-4 * fd.abs().max(1e-3),
                    "param {k}: {} vs {fd}",
                    g[k]
                );
            }
        }
    }

    #[test]
    fn score_norm_shortcut_matches_tape() {
        let p = policy(8);
        let s = [0.4, -0.2, 0.9];
        let geom = p.score_geometry(&s).unwrap();
        for a0 in [-1.0, 0.0, 0.7] {
            let a = [a0, 0.3];
            for i in 0..2 {
                let g = p.grad_log_prob_factor(&s, &a, i).unwrap();
                let n2: f64 = g.iter().map(|x| x * x).sum();
                let fast = geom.factor_score_norm_sq(i, a[i]);
                assert!((n2 - fast).abs() <= 1e-10 * n2.max(1.0));
            }
        }
    }

    #[test]
    fn behaviour_snapshot_widens_std() {
        let p = policy(9);
        let b = p.with_std_scale(1.2);
        for (x, y) in p.std().iter().zip(b.std()) {
            assert!((y / x - 1.2).abs() < 1e-12);
        }
        assert_eq!(p.mean(&[0.0; 3]).unwrap(), b.mean(&[0.0; 3]).unwrap());
    }

    #[test]
    fn bad_dimension_index() {
        let p = policy(10);
        assert!(p.log_prob_factor(&[0.0; 3], &[0.0; 2], 2).is_err());
    }
}
