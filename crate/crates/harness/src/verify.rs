//! Checks on the sampled-model side that complement the exact oracle:
//! derivatives against central differences, and the factored estimator
//! against the unfactored one.

use std::time::Instant;

use offoab_core::critic::{Critic, CriticSettings};
use offoab_core::estimator::{assemble_gradient, joint_estimator, BaselineKind};
use offoab_core::oracle::suite::{self, CheckOutcome};
use offoab_core::policy::{FactoredCategoricalPolicy, GaussianPolicy, ParamSharing};
use offoab_core::replay::{ReplayBuffer, Transition};
use offoab_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-6;
pub const FD_RTOL: f64 = 1e-4;
/// Denominator floor for the per-coordinate relative error, so exactly
/// or nearly flat coordinates are judged on an absolute scale.
pub const FD_FLOOR: f64 = 1e-5;
pub const FACTORIZATION_TOL: f64 = 1e-10;

/// Worst per-coordinate relative error of `analytic` against central
/// differences of `f` around `x`.
pub fn fd_relative_error(f: impl Fn(&[f64]) -> f64, x: &[f64], analytic: &[f64]) -> f64 {
    let mut xp = x.to_vec();
    let mut worst: f64 = 0.0;
    for k in 0..x.len() {
        xp[k] = x[k] + FD_STEP;
        let up = f(&xp);
        xp[k] = x[k] - FD_STEP;
        let down = f(&xp);
        xp[k] = x[k];
        let fd = (up - down) / (2.0 * FD_STEP);
        let rel = (fd - analytic[k]).abs() / fd.abs().max(analytic[k].abs()).max(FD_FLOOR);
        if rel.is_nan() || rel > worst {
            worst = rel;
        }
    }
    worst
}

struct Tracker {
    worst: f64,
    at: usize,
}

impl Tracker {
    fn see(&mut self, v: f64, point: usize) {
        if v.is_nan() || v > self.worst {
            self.worst = v;
            self.at = point;
        }
    }
}

fn outcome(name: &str, t: Tracker, tol: f64, seed: u64, detail: String, t0: Instant) -> CheckOutcome {
    CheckOutcome {
        name: name.into(),
        passed: t.worst <= tol,
        worst: t.worst,
        tolerance: tol,
        instance_seeds: vec![seed],
        worst_seed: seed,
        detail,
        elapsed_secs: t0.elapsed().as_secs_f64(),
    }
}

fn uniform(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Gaussian factor log densities: fresh weights, state, action and
/// dimension at every point.
pub fn gaussian_log_prob_gradients(points: usize, seed: u64) -> Result<CheckOutcome> {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tr = Tracker { worst: 0.0, at: 0 };
    for p in 0..points {
        let log_std = rng.random_range(-1.0..0.5);
        let policy = GaussianPolicy::new(4, 2, vec![16, 16], log_std, &mut rng)?;
        let s = uniform(&mut rng, 4);
        let a = policy.sample_action(&s, &mut rng)?.action;
        let i = rng.random_range(0..2);
        let analytic = policy.grad_log_prob_factor(&s, &a, i)?;
        let probe = std::cell::RefCell::new(policy.clone());
        let f = |theta: &[f64]| {
            let mut q = probe.borrow_mut();
            q.params_mut().set_values(theta).expect("same length");
            q.log_prob_factor(&s, &a, i).expect("finite")
        };
        tr.see(fd_relative_error(f, policy.params().values(), &analytic), p);
    }
    let detail = format!("{points} points, worst relative error {:.3e} at point {}", tr.worst, tr.at);
    Ok(outcome("gaussian_log_prob_gradient", tr, FD_RTOL, seed, detail, t0))
}

/// Categorical factor log probabilities, both sharing modes.
pub fn categorical_log_prob_gradients(points: usize, seed: u64) -> Result<CheckOutcome> {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tr = Tracker { worst: 0.0, at: 0 };
    for p in 0..points {
        let sharing = if p % 2 == 0 { ParamSharing::Disjoint } else { ParamSharing::Tied };
        let policy = FactoredCategoricalPolicy::random(&mut rng, 3, &[3, 3], sharing, 1.0)?;
        let (s, i, ai) = (rng.random_range(0..3), rng.random_range(0..2), rng.random_range(0..3));
        let analytic = policy.grad_log_prob_factor(s, i, ai);
        let probe = std::cell::RefCell::new(policy.clone());
        let f = |theta: &[f64]| {
            let mut q = probe.borrow_mut();
            q.params_mut().set_values(theta).expect("same length");
            q.log_prob_factor(s, i, ai)
        };
        tr.see(fd_relative_error(f, policy.params().values(), &analytic), p);
    }
    let detail = format!("{points} points, worst relative error {:.3e} at point {}", tr.worst, tr.at);
    Ok(outcome("categorical_log_prob_gradient", tr, FD_RTOL, seed, detail, t0))
}

/// Critic mean-squared loss; the differenced loss uses the plain forward
/// pass, not the tape.
pub fn critic_loss_gradients(points: usize, seed: u64) -> Result<CheckOutcome> {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tr = Tracker { worst: 0.0, at: 0 };
    let rows = 8;
    for p in 0..points {
        let critic = Critic::new(4, 2, vec![16, 16], CriticSettings::default(), &mut rng)?;
        let inputs = uniform(&mut rng, rows * 6);
        let targets = uniform(&mut rng, rows);
        let (_, analytic) = critic.loss_and_grad(&inputs, &targets)?;
        let probe = std::cell::RefCell::new(critic.clone());
        let f = |theta: &[f64]| {
            let mut c = probe.borrow_mut();
            c.params_mut().set_values(theta).expect("same length");
            let q = c.q_batch(&inputs, rows, false).expect("finite");
            q.iter().zip(&targets).map(|(q, y)| (y - q).powi(2)).sum::<f64>() / rows as f64
        };
        tr.see(fd_relative_error(f, critic.params().values(), &analytic), p);
    }
    let detail = format!("{points} points, worst relative error {:.3e} at point {}", tr.worst, tr.at);
    Ok(outcome("critic_loss_gradient", tr, FD_RTOL, seed, detail, t0))
}

/// Batched factored estimate without a baseline against the per-sample
/// joint-score estimate, on off-policy Gaussian data.
pub fn gaussian_factorization(batches: usize, seed: u64) -> Result<CheckOutcome> {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tr = Tracker { worst: 0.0, at: 0 };
    for k in 0..batches {
        let policy = GaussianPolicy::new(4, 3, vec![16], -0.3, &mut rng)?;
        let behavior = GaussianPolicy::new(4, 3, vec![16], -0.2, &mut rng)?;
        let critic = Critic::new(4, 3, vec![16], CriticSettings::default(), &mut rng)?;
        let mut buffer = ReplayBuffer::new(64)?;
        for _ in 0..64 {
            let s = uniform(&mut rng, 4);
            let sample = behavior.sample_action(&s, &mut rng)?;
            buffer.push(Transition::from_sample(s.clone(), &sample, 0.0, s, false))?;
        }
        let batch = buffer.sample_batch(32, &mut rng)?;
        let factored = assemble_gradient(&policy, &critic, &batch, &BaselineKind::none(), None, &mut rng)?.grad;
        let joint = joint_estimator(&policy, &critic, &batch, None)?;
        let gap = factored.iter().zip(&joint).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        tr.see(gap, k);
    }
    let detail = format!("{batches} batches, worst coordinate gap {:.3e} at batch {}", tr.worst, tr.at);
    Ok(outcome("gaussian_factorization", tr, FACTORIZATION_TOL, seed, detail, t0))
}

/// Every exact-oracle check plus the sampled-model checks.
pub fn run_all(n_instances: u64, points: usize, seed: u64) -> Result<Vec<CheckOutcome>> {
    let mut out = suite::run_all(n_instances)?;
    out.push(gaussian_log_prob_gradients(points, seed)?);
    out.push(categorical_log_prob_gradients(points, seed)?);
    out.push(critic_loss_gradients(points, seed)?);
    out.push(gaussian_factorization(points, seed)?);
    Ok(out)
}

/// Fixed-width pass/fail table.
pub fn render_table(outcomes: &[CheckOutcome]) -> String {
    let mut s = format!("{:<32} {:<6} {:>12} {:>12}  detail\n", "check", "result", "worst", "tolerance");
    for o in outcomes {
        s.push_str(&format!(
            "{:<32} {:<6} {:>12.3e} {:>12.3e}  {}\n",
            o.name,
            if o.passed { "PASS" } else { "FAIL" },
            o.worst,
            o.tolerance,
            o.detail
        ));
    }
    s
}
