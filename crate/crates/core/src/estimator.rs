//! Off-policy policy-gradient estimation with per-dimension baselines.
//!
//! For a batch of replayed transitions the estimate is
//!
//! ```text
//! g = (1/N) sum_j sum_i rho_j * grad log pi(a_j^i | s_j) * (Q(s_j, a_j) - b_i(s_j, a_j^{-i}))
//! ```
//!
//! with `rho = pi(a|s) / mu(a|s)`. The whole sum is differentiated as one
//! surrogate `sum_j sum_i c_ji log pi(a_j^i|s_j)` with constant coefficients
//! `c_ji = rho_j (Q_j - b_ji) / N`, which yields the same vector as summing
//! the factors one by one.
//!
//! All baselines that integrate over an action coordinate resample it from the
//! behaviour distribution stored with the transition.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::critic::ActionValue;
use crate::error::{Error, Result};
use crate::policy::{normal_log_pdf, GaussianPolicy, ScoreGeometry};
use crate::replay::{ReplayBuffer, Transition};

/// `|log rho|` beyond this saturates.
pub const LOG_RATIO_LIMIT: f64 = 50.0;
/// Optimal-baseline denominators at or below this fall back to the
/// behaviour-mean baseline.
pub const DEGENERATE_WEIGHT: f64 = 1e-12;
pub const DEFAULT_REPEATS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineVariant {
    None,
    StateValue,
    OptimalAction,
    ApproxAction,
}

impl BaselineVariant {
    pub const ALL: [BaselineVariant; 4] = [
        BaselineVariant::None,
        BaselineVariant::StateValue,
        BaselineVariant::OptimalAction,
        BaselineVariant::ApproxAction,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BaselineVariant::None => "none",
            BaselineVariant::StateValue => "state_value",
            BaselineVariant::OptimalAction => "optimal_action",
            BaselineVariant::ApproxAction => "approx_action",
        }
    }
}

impl fmt::Display for BaselineVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BaselineVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown baseline `{s}` (none, state_value, optimal_action, approx_action)")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BaselineKind {
    pub variant: BaselineVariant,
    /// Draws of the resampled coordinate for the action-dependent baselines.
    pub mc_samples: usize,
    /// Full-action draws for the state baseline.
    pub state_value_samples: usize,
}

impl BaselineKind {
    pub fn new(variant: BaselineVariant, mc_samples: usize) -> Self {
        Self {
            variant,
            mc_samples,
            state_value_samples: mc_samples,
        }
    }

    pub fn none() -> Self {
        Self::new(BaselineVariant::None, 1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.mc_samples == 0 || self.state_value_samples == 0 {
            return Err(Error::Config("baseline sample counts must be at least 1".into()));
        }
        Ok(())
    }
}

/// An importance ratio with what happened on the way to it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ratio {
    pub value: f64,
    pub saturated: bool,
    pub clipped: bool,
}

/// `exp(log_ratio)` with the exponent held to `[-LOG_RATIO_LIMIT, LOG_RATIO_LIMIT]`
/// and an optional upper clip.
pub fn ratio_from_log(log_ratio: f64, clip: Option<f64>) -> Ratio {
    let saturated = !(log_ratio.abs() <= LOG_RATIO_LIMIT);
    let lr = if log_ratio.is_nan() {
        LOG_RATIO_LIMIT
    } else {
        log_ratio.clamp(-LOG_RATIO_LIMIT, LOG_RATIO_LIMIT)
    };
    if saturated {
        log::warn!("log importance ratio {log_ratio} saturated to {lr}");
    }
    let raw = lr.exp();
    match clip {
        Some(c) if raw > c => Ratio {
            value: c,
            saturated,
            clipped: true,
        },
        _ => Ratio {
            value: raw,
            saturated,
            clipped: false,
        },
    }
}

/// `rho = pi(a|s) / mu(a|s)` against the transition's stored behaviour densities.
pub fn importance_ratio(policy: &GaussianPolicy, t: &Transition, clip: Option<f64>) -> Result<Ratio> {
    let lp = policy.log_prob(&t.s, &t.a)?;
    Ok(ratio_from_log(lp - t.behavior_log_prob(), clip))
}

/// Counts of estimator anomalies, summed over everything a sample covers.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct EstimatorCounters {
    pub ratio_saturations: u64,
    pub ratio_clips: u64,
    pub baseline_fallbacks: u64,
    pub ratio_sum: f64,
    pub ratio_count: u64,
}

impl EstimatorCounters {
    pub fn mean_ratio(&self) -> f64 {
        if self.ratio_count == 0 {
            f64::NAN
        } else {
            self.ratio_sum / self.ratio_count as f64
        }
    }

    pub fn merge(&mut self, other: &EstimatorCounters) {
        self.ratio_saturations += other.ratio_saturations;
        self.ratio_clips += other.ratio_clips;
        self.baseline_fallbacks += other.baseline_fallbacks;
        self.ratio_sum += other.ratio_sum;
        self.ratio_count += other.ratio_count;
    }

    fn record(&mut self, r: &Ratio) {
        self.ratio_saturations += r.saturated as u64;
        self.ratio_clips += r.clipped as u64;
        self.ratio_sum += r.value;
        self.ratio_count += 1;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientSample {
    /// Ascent direction.
    pub grad: Vec<f64>,
    pub batch_size: usize,
    pub baseline: BaselineKind,
    pub counters: EstimatorCounters,
}

/// Packed `[s, a]` row.
fn push_row(out: &mut Vec<f64>, s: &[f64], a: &[f64]) {
    out.extend_from_slice(s);
    out.extend_from_slice(a);
}

fn check_batch(policy: &GaussianPolicy, batch: &[&Transition]) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::input("batch", "estimator needs at least one transition"));
    }
    for t in batch {
        if t.s.len() != policy.state_dim() || t.a.len() != policy.action_dim() {
            return Err(Error::Config("transition shape does not match the policy".into()));
        }
    }
    Ok(())
}

/// One resampled action coordinate: the packed inputs with `a^i` replaced by
/// `M` behaviour draws, in order `(transition, dimension, draw)`.
struct Resampled {
    inputs: Vec<f64>,
    draws: Vec<f64>,
}

fn resample_coordinates<R: Rng + ?Sized>(
    batch: &[&Transition],
    dims: &[usize],
    m_samples: usize,
    rng: &mut R,
) -> Resampled {
    let width = batch[0].s.len() + batch[0].a.len();
    let rows = batch.len() * dims.len() * m_samples;
    let mut inputs = Vec::with_capacity(rows * width);
    let mut draws = Vec::with_capacity(rows);
    let mut a = Vec::new();
    for t in batch {
        for &i in dims {
            for _ in 0..m_samples {
                let z: f64 = rng.sample(StandardNormal);
                let x = t.behavior_mean[i] + t.behavior_std[i] * z;
                a.clear();
                a.extend_from_slice(&t.a);
                a[i] = x;
                push_row(&mut inputs, &t.s, &a);
                draws.push(x);
            }
        }
    }
    Resampled { inputs, draws }
}

/// `E_{a^i ~ mu}[Q]` for each `(transition, dim)` pair, row-major.
fn approx_values<Q: ActionValue + ?Sized, R: Rng + ?Sized>(
    q: &Q,
    batch: &[&Transition],
    dims: &[usize],
    m_samples: usize,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let rs = resample_coordinates(batch, dims, m_samples, rng);
    let vals = q.evaluate(&rs.inputs, rs.draws.len())?;
    Ok(vals.chunks(m_samples).map(|c| c.iter().sum::<f64>() / m_samples as f64).collect())
}

/// Monte Carlo `E_{a^i~mu}[Q(s, a)]` with `a^{-i}` fixed at the stored action.
pub fn approx_baseline<Q: ActionValue + ?Sized, R: Rng + ?Sized>(
    q: &Q,
    t: &Transition,
    i: usize,
    m_samples: usize,
    rng: &mut R,
) -> Result<f64> {
    check_dim(t, i)?;
    if m_samples == 0 {
        return Err(Error::Config("need at least one baseline sample".into()));
    }
    Ok(approx_values(q, &[t], &[i], m_samples, rng)?[0])
}

fn check_dim(t: &Transition, i: usize) -> Result<()> {
    if i >= t.a.len() {
        return Err(Error::input("i", format!("action dimension {i} out of range 0..{}", t.a.len())));
    }
    Ok(())
}

/// `sum w v / sum w`, or `None` when the mean weight is degenerate.
pub fn weighted_baseline(weights: &[f64], values: &[f64]) -> Option<f64> {
    let n = weights.len() as f64;
    let den: f64 = weights.iter().sum();
    if !(den / n > DEGENERATE_WEIGHT) {
        return None;
    }
    let num: f64 = weights.iter().zip(values).map(|(w, v)| w * v).sum();
    Some(num / den)
}

/// Outcome of a score-weighted baseline estimate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimalBaseline {
    pub value: f64,
    /// The weights were degenerate and the unweighted mean was used.
    pub fell_back: bool,
    pub saturations: u64,
}

/// `|rho grad log pi(a^i|s)|^2` for each resampled coordinate, with `rho`
/// recomputed at the resampled action.
fn score_weights(
    policy: &GaussianPolicy,
    t: &Transition,
    geo: &ScoreGeometry,
    i: usize,
    draws: &[f64],
    saturations: &mut u64,
) -> Result<Vec<f64>> {
    let lp = policy.log_prob(&t.s, &t.a)?;
    let lp_i = normal_log_pdf(t.a[i], geo.mean[i], geo.std[i]);
    let rest = (lp - lp_i) - (t.behavior_log_prob() - t.behavior_logp_per_dim[i]);
    Ok(draws
        .iter()
        .map(|&x| {
            let lr = rest + normal_log_pdf(x, geo.mean[i], geo.std[i])
                - normal_log_pdf(x, t.behavior_mean[i], t.behavior_std[i]);
            let r = ratio_from_log(lr, None);
            *saturations += r.saturated as u64;
            r.value * r.value * geo.factor_score_norm_sq(i, x)
        })
        .collect())
}

/// Score-weighted Monte Carlo baseline over `a^i ~ mu`. Degenerate weights
/// fall back to the unweighted mean of the same draws.
pub fn optimal_baseline_mc<Q: ActionValue + ?Sized, R: Rng + ?Sized>(
    policy: &GaussianPolicy,
    q: &Q,
    t: &Transition,
    i: usize,
    m_samples: usize,
    rng: &mut R,
) -> Result<OptimalBaseline> {
    check_dim(t, i)?;
    if m_samples == 0 {
        return Err(Error::Config("need at least one baseline sample".into()));
    }
    let geo = policy.score_geometry(&t.s)?;
    let rs = resample_coordinates(&[t], &[i], m_samples, rng);
    let vals = q.evaluate(&rs.inputs, m_samples)?;
    let mut saturations = 0;
    let w = score_weights(policy, t, &geo, i, &rs.draws, &mut saturations)?;
    Ok(match weighted_baseline(&w, &vals) {
        Some(value) => OptimalBaseline {
            value,
            fell_back: false,
            saturations,
        },
        None => {
            log::debug!("degenerate score weights for dimension {i}; using the behaviour mean");
            OptimalBaseline {
                value: vals.iter().sum::<f64>() / m_samples as f64,
                fell_back: true,
                saturations,
            }
        }
    })
}

fn state_values<Q: ActionValue + ?Sized, R: Rng + ?Sized>(
    q: &Q,
    policy: &GaussianPolicy,
    batch: &[&Transition],
    n_samples: usize,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let sd = policy.state_dim();
    let m = policy.action_dim();
    let states: Vec<f64> = batch.iter().flat_map(|t| t.s.iter().copied()).collect();
    let means = policy.mean_batch(&states, batch.len())?;
    let std = policy.std();
    let mut inputs = Vec::with_capacity(batch.len() * n_samples * (sd + m));
    for (j, t) in batch.iter().enumerate() {
        for _ in 0..n_samples {
            inputs.extend_from_slice(&t.s);
            for i in 0..m {
                let z: f64 = rng.sample(StandardNormal);
                inputs.push(means[j * m + i] + std[i] * z);
            }
        }
    }
    let vals = q.evaluate(&inputs, batch.len() * n_samples)?;
    Ok(vals.chunks(n_samples).map(|c| c.iter().sum::<f64>() / n_samples as f64).collect())
}

/// Monte Carlo `V(s) = E_{a~pi}[Q(s, a)]`.
pub fn state_baseline<Q: ActionValue + ?Sized, R: Rng + ?Sized>(
    q: &Q,
    policy: &GaussianPolicy,
    t: &Transition,
    n_samples: usize,
    rng: &mut R,
) -> Result<f64> {
    if n_samples == 0 {
        return Err(Error::Config("need at least one state-value sample".into()));
    }
    Ok(state_values(q, policy, &[t], n_samples, rng)?[0])
}

/// `rho * grad log pi(a^i|s) * (Q(s, a) - b)` for one transition.
pub fn oppg_factor<Q: ActionValue + ?Sized>(
    policy: &GaussianPolicy,
    q: &Q,
    t: &Transition,
    i: usize,
    baseline: f64,
) -> Result<Vec<f64>> {
    check_dim(t, i)?;
    let rho = importance_ratio(policy, t, None)?.value;
    let mut x = Vec::new();
    push_row(&mut x, &t.s, &t.a);
    let qv = q.evaluate(&x, 1)?[0];
    let coeff = rho * (qv - baseline);
    if !coeff.is_finite() {
        return Err(Error::numeric(
            format!("transition at state {:?}", t.s),
            format!("non-finite factor coefficient (rho = {rho}, q = {qv}, b = {baseline})"),
        ));
    }
    let mut g = policy.grad_log_prob_factor(&t.s, &t.a, i)?;
    g.iter_mut().for_each(|v| *v *= coeff);
    Ok(g)
}

/// Per-transition baselines `b[j][i]` for the chosen kind.
fn batch_baselines<Q: ActionValue + ?Sized, R: Rng + ?Sized>(
    policy: &GaussianPolicy,
    q: &Q,
    batch: &[&Transition],
    kind: &BaselineKind,
    counters: &mut EstimatorCounters,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let m = policy.action_dim();
    let dims: Vec<usize> = (0..m).collect();
    match kind.variant {
        BaselineVariant::None => Ok(vec![0.0; batch.len() * m]),
        BaselineVariant::ApproxAction => approx_values(q, batch, &dims, kind.mc_samples, rng),
        BaselineVariant::StateValue => {
            let v = state_values(q, policy, batch, kind.state_value_samples, rng)?;
            Ok(v.iter().flat_map(|x| std::iter::repeat_n(*x, m)).collect())
        }
        BaselineVariant::OptimalAction => {
            let ms = kind.mc_samples;
            let rs = resample_coordinates(batch, &dims, ms, rng);
            let vals = q.evaluate(&rs.inputs, rs.draws.len())?;
            let mut out = Vec::with_capacity(batch.len() * m);
            for (j, t) in batch.iter().enumerate() {
                let geo = policy.score_geometry(&t.s)?;
                for i in 0..m {
                    let k0 = (j * m + i) * ms;
                    let v = &vals[k0..k0 + ms];
                    let w = score_weights(policy, t, &geo, i, &rs.draws[k0..k0 + ms], &mut counters.ratio_saturations)?;
                    out.push(match weighted_baseline(&w, v) {
                        Some(b) => b,
                        None => {
                            counters.baseline_fallbacks += 1;
                            log::debug!("degenerate score weights at batch row {j}, dimension {i}");
                            v.iter().sum::<f64>() / ms as f64
                        }
                    });
                }
            }
            Ok(out)
        }
    }
}

/// Batch estimate `(1/N) sum_j sum_i g^i(b_j)` as an ascent direction.
pub fn assemble_gradient<Q: ActionValue + ?Sized, R: Rng + ?Sized>(
    policy: &GaussianPolicy,
    q: &Q,
    batch: &[&Transition],
    kind: &BaselineKind,
    ratio_clip: Option<f64>,
    rng: &mut R,
) -> Result<GradientSample> {
    check_batch(policy, batch)?;
    kind.validate()?;
    let n = batch.len();
    let m = policy.action_dim();
    let mut counters = EstimatorCounters::default();

    let mut inputs = Vec::with_capacity(n * (policy.state_dim() + m));
    for t in batch {
        push_row(&mut inputs, &t.s, &t.a);
    }
    let qv = q.evaluate(&inputs, n)?;
    let baselines = batch_baselines(policy, q, batch, kind, &mut counters, rng)?;

    let states: Vec<f64> = batch.iter().flat_map(|t| t.s.iter().copied()).collect();
    let actions: Vec<f64> = batch.iter().flat_map(|t| t.a.iter().copied()).collect();
    let means = policy.mean_batch(&states, n)?;
    let std = policy.std();
    let mut coeffs = Vec::with_capacity(n * m);
    for (j, t) in batch.iter().enumerate() {
        let lp: f64 = (0..m).map(|i| normal_log_pdf(t.a[i], means[j * m + i], std[i])).sum();
        let rho = ratio_from_log(lp - t.behavior_log_prob(), ratio_clip);
        counters.record(&rho);
        for i in 0..m {
            let c = rho.value * (qv[j] - baselines[j * m + i]) / n as f64;
            if !c.is_finite() {
                return Err(Error::numeric(
                    format!("batch row {j}, dimension {i}"),
                    format!("non-finite coefficient (rho = {}, q = {}, b = {})", rho.value, qv[j], baselines[j * m + i]),
                ));
            }
            coeffs.push(c);
        }
    }
    let grad = policy.weighted_log_prob_gradient(&states, &actions, &coeffs, n)?;
    Ok(GradientSample {
        grad,
        batch_size: n,
        baseline: *kind,
        counters,
    })
}

/// The unfactored estimate `(1/N) sum_j rho_j grad log pi(a_j|s_j) Q(s_j, a_j)`,
/// differentiated through the joint log density one transition at a time.
pub fn joint_estimator<Q: ActionValue + ?Sized>(
    policy: &GaussianPolicy,
    q: &Q,
    batch: &[&Transition],
    ratio_clip: Option<f64>,
) -> Result<Vec<f64>> {
    check_batch(policy, batch)?;
    let mut acc = vec![0.0; policy.num_params()];
    for t in batch {
        let rho = importance_ratio(policy, t, ratio_clip)?.value;
        let mut x = Vec::new();
        push_row(&mut x, &t.s, &t.a);
        let qv = q.evaluate(&x, 1)?[0];
        let g = policy.grad_log_prob(&t.s, &t.a)?;
        for (a, gk) in acc.iter_mut().zip(&g) {
            *a += rho * qv * gk;
        }
    }
    acc.iter_mut().for_each(|a| *a /= batch.len() as f64);
    Ok(acc)
}

/// Sum over coordinates of the unbiased sample variance across `samples`.
pub fn trace_variance(samples: &[Vec<f64>]) -> Result<f64> {
    let r = samples.len();
    if r < 2 {
        return Err(Error::Config("variance needs at least two samples".into()));
    }
    let d = samples[0].len();
    if samples.iter().any(|s| s.len() != d) {
        return Err(Error::Config("gradient samples differ in length".into()));
    }
    // Deviations from the first sample: identical samples give exactly zero.
    let mut total = 0.0;
    for k in 0..d {
        let base = samples[0][k];
        let mean = samples.iter().map(|s| s[k] - base).sum::<f64>() / r as f64;
        total += samples.iter().map(|s| (s[k] - base - mean).powi(2)).sum::<f64>();
    }
    Ok(total / (r - 1) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VarianceReading {
    /// `log10(trace)`, or `-inf` when the trace is zero.
    pub log10_variance: f64,
    pub trace: f64,
    pub zero_variance: bool,
    pub counters: EstimatorCounters,
}

/// Spread of `repeats` independent batch estimates at frozen parameters.
///
/// Each repeat derives its own generator from one draw of `rng`; batch
/// indices come from stream 0 and baseline draws from stream 1. Two calls
/// with equal generators therefore see the same batches whatever the
/// baseline kind.
#[allow(clippy::too_many_arguments)]
pub fn gradient_variance<Q: ActionValue + ?Sized, R: RngCore + ?Sized>(
    policy: &GaussianPolicy,
    q: &Q,
    buffer: &ReplayBuffer,
    kind: &BaselineKind,
    repeats: usize,
    batch_size: usize,
    ratio_clip: Option<f64>,
    rng: &mut R,
) -> Result<VarianceReading> {
    if repeats < 2 {
        return Err(Error::Config("gradient variance needs at least two repeats".into()));
    }
    let mut samples = Vec::with_capacity(repeats);
    let mut counters = EstimatorCounters::default();
    for _ in 0..repeats {
        let seed = rng.next_u64();
        let mut batch_rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw_rng = ChaCha8Rng::seed_from_u64(seed);
        draw_rng.set_stream(1);
        let batch = buffer.sample_batch(batch_size, &mut batch_rng)?;
        let g = assemble_gradient(policy, q, &batch, kind, ratio_clip, &mut draw_rng)?;
        counters.merge(&g.counters);
        samples.push(g.grad);
    }
    let trace = trace_variance(&samples)?;
    let zero = trace == 0.0;
    if zero {
        log::warn!("gradient variance is exactly zero; reporting -inf");
    }
    Ok(VarianceReading {
        log10_variance: if zero { f64::NEG_INFINITY } else { trace.log10() },
        trace,
        zero_variance: zero,
        counters,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::critic::{Critic, CriticSettings};
    use crate::policy::ActionSample;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    /// `Q(s, a) = f(a)` for a closure over the action part.
    struct Synthetic<F: Fn(&[f64]) -> f64> {
        state_dim: usize,
        action_dim: usize,
        f: F,
    }

    impl<F: Fn(&[f64]) -> f64> ActionValue for Synthetic<F> {
        fn evaluate(&self, inputs: &[f64], rows: usize) -> Result<Vec<f64>> {
            let w = self.state_dim + self.action_dim;
            assert_eq!(inputs.len(), rows * w);
            Ok(inputs.chunks(w).map(|r| (self.f)(&r[self.state_dim..])).collect())
        }
    }

    fn policy(seed: u64) -> GaussianPolicy {
        GaussianPolicy::new(3, 2, vec![8], -0.4, &mut rng(seed)).unwrap()
    }

    fn critic(seed: u64) -> Critic {
        Critic::new(3, 2, vec![8, 8], CriticSettings::default(), &mut rng(seed)).unwrap()
    }

    fn record(s: Vec<f64>, sample: &ActionSample) -> Transition {
        Transition::from_sample(s.clone(), sample, 0.0, s, false)
    }

    /// Transition whose action was drawn from `behavior` at a random state.
    fn fresh<R: Rng>(behavior: &GaussianPolicy, r: &mut R) -> Transition {
        let s: Vec<f64> = (0..3).map(|_| r.random_range(-1.0..1.0)).collect();
        let smp = behavior.sample_action(&s, r).unwrap();
        record(s, &smp)
    }

    #[test]
    fn identical_distributions_give_unit_ratio() {
        let p = policy(0);
        let t = fresh(&p, &mut rng(1));
        let r = importance_ratio(&p, &t, None).unwrap();
        assert!((r.value - 1.0).abs() < 1e-14);
    }

    #[test]
    fn doubled_density_gives_ratio_two() {
        let p = policy(0);
        let s = vec![0.1, 0.2, 0.3];
        let mean = p.mean(&s).unwrap();
        let std = p.std();
        // Behaviour doubles the first std and matches the second: at the mean
        // its density is half of pi's.
        let a = mean.clone();
        let t = Transition {
            behavior_logp_per_dim: vec![normal_log_pdf(a[0], mean[0], 2.0 * std[0]), normal_log_pdf(a[1], mean[1], std[1])],
            s: s.clone(),
            a,
            r: 0.0,
            s_next: s,
            done: false,
            behavior_mean: mean,
            behavior_std: vec![2.0 * std[0], std[1]],
        };
        t.audit().unwrap();
        assert!((importance_ratio(&p, &t, None).unwrap().value - 2.0).abs() < 1e-12);
    }

    #[test]
    fn ratio_matches_direct_pdf_quotient() {
        let pi = policy(0);
        let mu = policy(7).with_std_scale(1.3);
        let mut r = rng(2);
        let pdf = |x: f64, m: f64, s: f64| (-(x - m).powi(2) / (2.0 * s * s)).exp() / (s * (2.0 * std::f64::consts::PI).sqrt());
        for _ in 0..50 {
            let t = fresh(&mu, &mut r);
            let mp = pi.mean(&t.s).unwrap();
            let sp = pi.std();
            let num: f64 = (0..2).map(|i| pdf(t.a[i], mp[i], sp[i])).product();
            let den: f64 = (0..2).map(|i| pdf(t.a[i], t.behavior_mean[i], t.behavior_std[i])).product();
            let rho = importance_ratio(&pi, &t, None).unwrap().value;
            assert!((rho - num / den).abs() <= 1e-10 * (num / den).max(1.0));
        }
    }

    #[test]
    fn extreme_log_ratio_saturates_and_clip_caps() {
        let r = ratio_from_log(80.0, None);
        assert!(r.saturated && r.value == 50f64.exp());
        let r = ratio_from_log(-80.0, None);
        assert!(r.saturated && r.value > 0.0);
        let r = ratio_from_log(3.0, Some(10.0));
        assert!(r.clipped && r.value == 10.0);
        assert!(!ratio_from_log(1.0, Some(10.0)).clipped);
    }

    #[test]
    fn constant_q_gives_constant_baselines() {
        let p = policy(0);
        let q = Synthetic { state_dim: 3, action_dim: 2, f: |_: &[f64]| 1.5 };
        let t = fresh(&p.with_std_scale(1.2), &mut rng(3));
        let mut r = rng(4);
        for m in [1, 7, 64] {
            assert_eq!(approx_baseline(&q, &t, 1, m, &mut r).unwrap(), 1.5);
            assert_eq!(state_baseline(&q, &p, &t, m, &mut r).unwrap(), 1.5);
            let b = optimal_baseline_mc(&p, &q, &t, 0, m, &mut r).unwrap();
            assert!((b.value - 1.5).abs() < 1e-14 && !b.fell_back);
        }
    }

    #[test]
    fn approx_baseline_estimates_behaviour_mean() {
        let sigma = 0.7;
        let m = 10_000;
        let q = Synthetic { state_dim: 3, action_dim: 2, f: |a: &[f64]| a[1] };
        let t = Transition {
            s: vec![0.0; 3],
            a: vec![5.0, -2.0],
            r: 0.0,
            s_next: vec![0.0; 3],
            done: false,
            behavior_mean: vec![0.0, 0.3],
            behavior_std: vec![1.0, sigma],
            behavior_logp_per_dim: vec![normal_log_pdf(5.0, 0.0, 1.0), normal_log_pdf(-2.0, 0.3, sigma)],
        };
        let b = approx_baseline(&q, &t, 1, m, &mut rng(5)).unwrap();
        assert!((b - 0.3).abs() <= 4.0 * sigma / (m as f64).sqrt(), "{b}");
        // The other coordinate is held at the stored action.
        let q0 = Synthetic { state_dim: 3, action_dim: 2, f: |a: &[f64]| a[0] };
        assert_eq!(approx_baseline(&q0, &t, 1, 16, &mut rng(5)).unwrap(), 5.0);
    }

    #[test]
    fn state_baseline_matches_gaussian_moment() {
        // E[(a0 - 1)^2 + 2 a1] under N(mu, sd^2) = (mu0 - 1)^2 + sd0^2 + 2 mu1.
        let p = policy(2);
        let t = fresh(&p, &mut rng(6));
        let mu = p.mean(&t.s).unwrap();
        let sd = p.std();
        let q = Synthetic { state_dim: 3, action_dim: 2, f: |a: &[f64]| (a[0] - 1.0).powi(2) + 2.0 * a[1] };
        let want = (mu[0] - 1.0).powi(2) + sd[0] * sd[0] + 2.0 * mu[1];
        let n = 200_000;
        let v = state_baseline(&q, &p, &t, n, &mut rng(7)).unwrap();
        // Per-draw variance of the integrand.
        let var = 4.0 * (mu[0] - 1.0).powi(2) * sd[0].powi(2) + 2.0 * sd[0].powi(4) + 4.0 * sd[1].powi(2);
        assert!((v - want).abs() <= 4.0 * (var / n as f64).sqrt(), "{v} vs {want}");
    }

    #[test]
    fn state_baseline_collapses_at_minimum_std() {
        let mut p = policy(2);
        let off = p.num_params() - 2;
        p.params_mut().update(|v| v[off..].fill(-50.0)).unwrap();
        p.clamp_log_std();
        let t = fresh(&p, &mut rng(8));
        let q = Synthetic { state_dim: 3, action_dim: 2, f: |a: &[f64]| (a[0] - 1.0).powi(2) + a[1] };
        let mu = p.mean(&t.s).unwrap();
        let at_mean = (mu[0] - 1.0).powi(2) + mu[1];
        let v = state_baseline(&q, &p, &t, 1000, &mut rng(9)).unwrap();
        assert!((v - at_mean).abs() < 1e-3);
    }

    #[test]
    fn weighted_baseline_rules() {
        assert_eq!(weighted_baseline(&[2.0, 2.0, 2.0], &[1.0, 2.0, 6.0]), Some(3.0));
        assert_eq!(weighted_baseline(&[1.0, 3.0], &[4.0, 0.0]), Some(1.0));
        assert_eq!(weighted_baseline(&[0.0, 1e-14], &[1.0, 2.0]), None);
    }

    #[test]
    fn factor_vanishes_when_baseline_equals_q() {
        let p = policy(0);
        let c = critic(1);
        let t = fresh(&p.with_std_scale(1.2), &mut rng(10));
        let qv = c.q_value(&t.s, &t.a, false).unwrap();
        assert!(oppg_factor(&p, &c, &t, 0, qv).unwrap().iter().all(|x| *x == 0.0));
    }

    #[test]
    fn on_policy_factor_is_score_times_q() {
        let p = policy(0);
        let c = critic(1);
        let t = fresh(&p, &mut rng(11));
        let qv = c.q_value(&t.s, &t.a, false).unwrap();
        let g = oppg_factor(&p, &c, &t, 1, 0.0).unwrap();
        let score = p.grad_log_prob_factor(&t.s, &t.a, 1).unwrap();
        for (x, y) in g.iter().zip(&score) {
            assert!((x - qv * y).abs() <= 1e-12 * (1.0 + x.abs()));
        }
    }

    #[test]
    fn factor_recomposes_from_parts() {
        let p = policy(0);
        let mu = policy(3).with_std_scale(1.5);
        let c = critic(1);
        let t = fresh(&mu, &mut rng(12));
        let b = 0.37;
        let rho = importance_ratio(&p, &t, None).unwrap().value;
        let qv = c.q_value(&t.s, &t.a, false).unwrap();
        let score = p.grad_log_prob_factor(&t.s, &t.a, 0).unwrap();
        let g = oppg_factor(&p, &c, &t, 0, b).unwrap();
        for (x, s) in g.iter().zip(&score) {
            assert!((x - rho * s * (qv - b)).abs() <= 1e-12 * (1.0 + x.abs()));
        }
    }

    #[test]
    fn batched_assembly_equals_sum_of_factors() {
        let p = policy(0);
        let mu = policy(3).with_std_scale(1.5);
        let c = critic(1);
        let mut r = rng(13);
        let ts: Vec<Transition> = (0..5).map(|_| fresh(&mu, &mut r)).collect();
        let batch: Vec<&Transition> = ts.iter().collect();
        let kind = BaselineKind::new(BaselineVariant::ApproxAction, 4);
        let g = assemble_gradient(&p, &c, &batch, &kind, None, &mut rng(14)).unwrap();
        // Same draw order: transition-major, then dimension.
        let mut r2 = rng(14);
        let mut want = vec![0.0; p.num_params()];
        for t in &batch {
            for i in 0..2 {
                let b = approx_baseline(&c, t, i, 4, &mut r2).unwrap();
                for (w, f) in want.iter_mut().zip(oppg_factor(&p, &c, t, i, b).unwrap()) {
                    *w += f / 5.0;
                }
            }
        }
        for (x, y) in g.grad.iter().zip(&want) {
            assert!((x - y).abs() <= 1e-10 * (1.0 + y.abs()), "{x} vs {y}");
        }
    }

    #[test]
    fn factored_estimate_equals_joint_estimate() {
        let p = policy(0);
        let mu = policy(3).with_std_scale(1.5);
        let c = critic(1);
        let mut r = rng(15);
        for _ in 0..20 {
            let ts: Vec<Transition> = (0..8).map(|_| fresh(&mu, &mut r)).collect();
            let batch: Vec<&Transition> = ts.iter().collect();
            let g = assemble_gradient(&p, &c, &batch, &BaselineKind::none(), None, &mut r).unwrap();
            let j = joint_estimator(&p, &c, &batch, None).unwrap();
            for (x, y) in g.grad.iter().zip(&j) {
                assert!((x - y).abs() <= 1e-10, "{x} vs {y}");
            }
        }
    }

    #[test]
    fn single_transition_with_action_free_q_has_zero_gradient() {
        // Q depends only on s, so every action-dependent baseline equals Q.
        let p = policy(0);
        let q = Synthetic { state_dim: 3, action_dim: 2, f: |_: &[f64]| -3.25 };
        let t = fresh(&p.with_std_scale(1.2), &mut rng(16));
        for v in [BaselineVariant::ApproxAction, BaselineVariant::OptimalAction, BaselineVariant::StateValue] {
            let g = assemble_gradient(&p, &q, &[&t], &BaselineKind::new(v, 8), None, &mut rng(17)).unwrap();
            assert!(g.grad.iter().all(|x| x.abs() < 1e-12), "{v}");
        }
    }

    #[test]
    fn single_dimension_optimal_matches_direct_formula() {
        let p = GaussianPolicy::new(3, 1, vec![8], -0.4, &mut rng(0)).unwrap();
        let c = Critic::new(3, 1, vec![8], CriticSettings::default(), &mut rng(1)).unwrap();
        let mu = p.with_std_scale(1.3);
        let t = fresh1(&mu, &mut rng(18));
        let kind = BaselineKind::new(BaselineVariant::OptimalAction, 32);
        let g = assemble_gradient(&p, &c, &[&t], &kind, None, &mut rng(19)).unwrap();
        let b = optimal_baseline_mc(&p, &c, &t, 0, 32, &mut rng(19)).unwrap();
        let want = oppg_factor(&p, &c, &t, 0, b.value).unwrap();
        for (x, y) in g.grad.iter().zip(&want) {
            assert!((x - y).abs() <= 1e-12 * (1.0 + y.abs()));
        }
    }

    fn fresh1<R: Rng>(behavior: &GaussianPolicy, r: &mut R) -> Transition {
        let s: Vec<f64> = (0..3).map(|_| r.random_range(-1.0..1.0)).collect();
        let smp = behavior.sample_action(&s, r).unwrap();
        record(s, &smp)
    }

    /// Paired difference of the None and ApproxAction estimates on fresh
    /// behaviour data, projected on a random direction, has mean zero.
    #[test]
    fn action_baseline_leaves_the_mean_unchanged() {
        let p = policy(0);
        let mu = p.with_std_scale(1.2);
        let c = critic(1);
        let mut r = rng(20);
        let dir: Vec<f64> = (0..p.num_params()).map(|_| r.random_range(-1.0..1.0)).collect();
        let kind = BaselineKind::new(BaselineVariant::ApproxAction, 8);
        let batches = 10_000;
        let mut diffs = Vec::with_capacity(batches);
        let mut none_proj = Vec::with_capacity(batches);
        for _ in 0..batches {
            let ts: Vec<Transition> = (0..4).map(|_| fresh(&mu, &mut r)).collect();
            let batch: Vec<&Transition> = ts.iter().collect();
            let g0 = assemble_gradient(&p, &c, &batch, &BaselineKind::none(), None, &mut r).unwrap();
            let g1 = assemble_gradient(&p, &c, &batch, &kind, None, &mut r).unwrap();
            let proj = |g: &[f64]| g.iter().zip(&dir).map(|(x, d)| x * d).sum::<f64>();
            diffs.push(proj(&g0.grad) - proj(&g1.grad));
            none_proj.push(proj(&g0.grad));
        }
        let n = batches as f64;
        let mean = diffs.iter().sum::<f64>() / n;
        let se = (diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0) / n).sqrt();
        assert!(mean.abs() <= 4.0 * se, "mean difference {mean}, se {se}");
        // Individual batches do differ.
        assert!(diffs.iter().any(|d| d.abs() > 1e-6));
    }

    #[test]
    fn single_item_buffer_has_zero_variance() {
        let p = policy(0);
        let c = critic(1);
        let mut buf = ReplayBuffer::new(4).unwrap();
        buf.push(fresh(&p, &mut rng(21))).unwrap();
        let v = gradient_variance(&p, &c, &buf, &BaselineKind::none(), DEFAULT_REPEATS, 8, None, &mut rng(22)).unwrap();
        assert!(v.zero_variance);
        assert_eq!(v.log10_variance, f64::NEG_INFINITY);
    }

    #[test]
    fn iid_standard_normal_trace_is_dimension() {
        let d = 2000;
        let mut r = rng(23);
        let samples: Vec<Vec<f64>> = (0..DEFAULT_REPEATS)
            .map(|_| (0..d).map(|_| r.sample::<f64, _>(StandardNormal)).collect())
            .collect();
        let lv = trace_variance(&samples).unwrap().log10();
        // trace / d has standard deviation sqrt(2 / (9 d)) ~ 0.011.
        assert!((lv - (d as f64).log10()).abs() < 0.03, "{lv}");
    }

    #[test]
    fn variance_is_reproducible_and_shares_batches() {
        let p = policy(0);
        let mu = p.with_std_scale(1.2);
        let c = critic(1);
        let mut buf = ReplayBuffer::new(100).unwrap();
        let mut r = rng(24);
        for _ in 0..100 {
            buf.push(fresh(&mu, &mut r)).unwrap();
        }
        let kind = BaselineKind::new(BaselineVariant::ApproxAction, 8);
        let a = gradient_variance(&p, &c, &buf, &kind, 10, 16, None, &mut rng(25)).unwrap();
        let b = gradient_variance(&p, &c, &buf, &kind, 10, 16, None, &mut rng(25)).unwrap();
        assert_eq!(a, b);
        assert!(a.log10_variance.is_finite());
    }

    #[test]
    fn baseline_names_round_trip() {
        for v in BaselineVariant::ALL {
            assert_eq!(v.name().parse::<BaselineVariant>().unwrap(), v);
        }
        assert!("bogus".parse::<BaselineVariant>().is_err());
    }
}
