//! Exact expectations under `s ~ d_mu`, `a ~ mu` by enumeration.
//!
//! For dimension `i` write `z_i = rho(s, a) grad log pi(a^i|s)` and
//! `g^i(b) = z_i (Q_pi(s, a) - b_i(s, a^{-i}))`. With
//! `W(s, a^{-i}) = E_{a^i~mu} |z_i|^2` and `U(s, a^{-i}) = E_{a^i~mu} |z_i|^2 Q`:
//!
//! ```text
//! Var g^i(b)  = E_{s, a^{-i}} [b^2 W - 2 b U] + E |z_i|^2 Q^2 - |E z_i Q|^2
//! b*_i        = U / W
//! Var(b) - Var(b*) = E_{s, a^{-i}} [(b - b*)^2 W]
//! ```

use super::context::{BaselineTable, ExactContext};
use crate::error::{Error, Result};

/// Relative agreement demanded between the two variance paths.
pub const VARIANCE_PATH_RTOL: f64 = 1e-9;

fn axpy(acc: &mut [f64], c: f64, x: &[f64]) {
    acc.iter_mut().zip(x).for_each(|(a, v)| *a += c * v);
}

fn norm_sq(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum()
}

/// Flattened per-`(s, a)` quantities for one dimension.
pub struct FactorEnumeration {
    pub i: usize,
    /// `d_mu(s) mu(a|s)`.
    pub weight: Vec<f64>,
    pub z: Vec<Vec<f64>>,
    pub q: Vec<f64>,
    /// Baseline table slot `s * n_rest + rest` for each `(s, a)`.
    pub slot: Vec<usize>,
    /// `d_mu(s) mu(a^{-i}|s)` per slot.
    pub slot_weight: Vec<f64>,
    /// `W` per slot.
    pub w: Vec<f64>,
    /// `U` per slot.
    pub u: Vec<f64>,
}

impl FactorEnumeration {
    pub fn new(ctx: &ExactContext, i: usize) -> Self {
        let (ns, na, nr) = (ctx.n_states(), ctx.n_joint(), ctx.n_rest(i));
        let mut out = Self {
            i,
            weight: Vec::with_capacity(ns * na),
            z: Vec::with_capacity(ns * na),
            q: Vec::with_capacity(ns * na),
            slot: Vec::with_capacity(ns * na),
            slot_weight: vec![0.0; ns * nr],
            w: vec![0.0; ns * nr],
            u: vec![0.0; ns * nr],
        };
        for s in 0..ns {
            for a in 0..na {
                let k = s * na + a;
                let slot = s * nr + ctx.rest_index(a, i);
                let mu_i = ctx.mu_factor(s, i, a);
                let zn = ctx.z_norm_sq(i, s, a);
                out.weight.push(ctx.d_mu[s] * ctx.mu_table[k]);
                out.z.push(ctx.z(i, s, a));
                out.q.push(ctx.q_pi[k]);
                out.slot.push(slot);
                out.slot_weight[slot] = ctx.rest_weight(s, i, a);
                out.w[slot] += mu_i * zn;
                out.u[slot] += mu_i * zn * ctx.q_pi[k];
            }
        }
        out
    }

    /// `E[g^i(b)]`.
    pub fn mean(&self, table: &[f64]) -> Vec<f64> {
        let mut m = vec![0.0; self.z[0].len()];
        for k in 0..self.z.len() {
            axpy(&mut m, self.weight[k] * (self.q[k] - table[self.slot[k]]), &self.z[k]);
        }
        m
    }

    /// `E|g^i(b)|^2 - |E g^i(b)|^2` summed term by term.
    pub fn variance_direct(&self, table: &[f64]) -> f64 {
        let mut second = 0.0;
        for k in 0..self.z.len() {
            let adv = self.q[k] - table[self.slot[k]];
            second += self.weight[k] * norm_sq(&self.z[k]) * adv * adv;
        }
        second - norm_sq(&self.mean(table))
    }

    /// The baseline-free constant `E|z|^2 Q^2 - |E z Q|^2`.
    pub fn constant(&self) -> f64 {
        let mut second = 0.0;
        let mut m = vec![0.0; self.z[0].len()];
        for k in 0..self.z.len() {
            second += self.weight[k] * norm_sq(&self.z[k]) * self.q[k] * self.q[k];
            axpy(&mut m, self.weight[k] * self.q[k], &self.z[k]);
        }
        second - norm_sq(&m)
    }

    /// `E_{s, a^{-i}}[b^2 W - 2 b U] + constant`.
    pub fn variance_closed_form(&self, table: &[f64]) -> f64 {
        let quad: f64 = (0..self.w.len())
            .map(|e| self.slot_weight[e] * (table[e] * table[e] * self.w[e] - 2.0 * table[e] * self.u[e]))
            .sum();
        quad + self.constant()
    }

    /// Magnitude of the summed terms; sets the rounding floor for comparisons.
    pub fn scale(&self, table: &[f64]) -> f64 {
        let mut s = 0.0;
        for k in 0..self.z.len() {
            let adv = self.q[k] - table[self.slot[k]];
            s += self.weight[k] * norm_sq(&self.z[k]) * (adv * adv + self.q[k] * self.q[k]);
        }
        s
    }

    /// `E_{s, a^{-i}}[(b - c)^2 W]`.
    pub fn weighted_gap(&self, b: &[f64], c: &[f64]) -> f64 {
        (0..self.w.len())
            .map(|e| self.slot_weight[e] * (b[e] - c[e]).powi(2) * self.w[e])
            .sum()
    }

    /// `U / W` per slot.
    pub fn optimal(&self) -> Result<Vec<f64>> {
        self.w
            .iter()
            .zip(&self.u)
            .enumerate()
            .map(|(e, (w, u))| {
                if *w > 0.0 {
                    Ok(u / w)
                } else {
                    Err(Error::Model(format!(
                        "degenerate score weight for dimension {} at table slot {e}",
                        self.i
                    )))
                }
            })
            .collect()
    }
}

/// `E_{s~d_mu, a~mu}[sum_i g^i(b)]`.
pub fn exact_oppg(ctx: &ExactContext, b: &BaselineTable) -> Vec<f64> {
    let mut g = vec![0.0; ctx.num_params()];
    for i in 0..ctx.n_dims() {
        let m = FactorEnumeration::new(ctx, i).mean(&b.tables[i]);
        axpy(&mut g, 1.0, &m);
    }
    g
}

/// `E_{s~d_mu, a~mu}[rho grad log pi(a|s) Q]`, differentiating the joint
/// log density on a tape rather than summing factor scores.
pub fn exact_oppg_joint(ctx: &ExactContext) -> Result<Vec<f64>> {
    let mut g = vec![0.0; ctx.num_params()];
    let na = ctx.n_joint();
    for s in 0..ctx.n_states() {
        for a in 0..na {
            let k = s * na + a;
            let score = ctx.pi.grad_log_prob_joint_tape(s, ctx.components(a))?;
            axpy(&mut g, ctx.d_mu[s] * ctx.mu_table[k] * ctx.rho[k] * ctx.q_pi[k], &score);
        }
    }
    Ok(g)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VariancePaths {
    pub direct: f64,
    pub closed_form: f64,
    /// Rounding floor used when comparing the two.
    pub floor: f64,
}

impl VariancePaths {
    pub fn agree(&self) -> bool {
        let tol = VARIANCE_PATH_RTOL * self.direct.abs().max(self.closed_form.abs()) + self.floor;
        (self.direct - self.closed_form).abs() <= tol
    }

    pub fn relative_gap(&self) -> f64 {
        (self.direct - self.closed_form).abs() / self.direct.abs().max(self.closed_form.abs()).max(f64::MIN_POSITIVE)
    }
}

pub fn exact_variance_paths(ctx: &ExactContext, b: &BaselineTable, i: usize) -> VariancePaths {
    let f = FactorEnumeration::new(ctx, i);
    let t = &b.tables[i];
    VariancePaths {
        direct: f.variance_direct(t),
        closed_form: f.variance_closed_form(t),
        floor: 64.0 * f64::EPSILON * f.scale(t),
    }
}

/// `Var[g^i(b)]`, computed by direct enumeration and by the closed form.
/// Disagreement is an internal consistency failure.
pub fn exact_variance(ctx: &ExactContext, b: &BaselineTable, i: usize) -> Result<f64> {
    let p = exact_variance_paths(ctx, b, i);
    if !p.agree() {
        return Err(Error::Inconsistent(format!(
            "variance paths disagree for dimension {i}: direct {:e}, closed form {:e}",
            p.direct, p.closed_form
        )));
    }
    Ok(p.direct)
}

/// `b*_i(s, a^{-i}) = E_{a^i~mu}[|z_i|^2 Q] / E_{a^i~mu}[|z_i|^2]`.
pub fn exact_optimal_baseline(ctx: &ExactContext, i: usize) -> Result<Vec<f64>> {
    FactorEnumeration::new(ctx, i).optimal()
}

pub fn optimal_baseline_table(ctx: &ExactContext) -> Result<BaselineTable> {
    Ok(BaselineTable {
        tables: (0..ctx.n_dims()).map(|i| exact_optimal_baseline(ctx, i)).collect::<Result<_>>()?,
    })
}

/// `b_i(s, a^{-i}) = E_{a^i~mu}[Q_pi(s, a)]`.
pub fn approx_baseline_table(ctx: &ExactContext) -> BaselineTable {
    let na = ctx.n_joint();
    let mut out = BaselineTable::zeros(ctx);
    for i in 0..ctx.n_dims() {
        let nr = ctx.n_rest(i);
        for s in 0..ctx.n_states() {
            for a in 0..na {
                out.tables[i][s * nr + ctx.rest_index(a, i)] += ctx.mu_factor(s, i, a) * ctx.q_pi[s * na + a];
            }
        }
    }
    out
}

/// Best state-only baseline for each factor:
/// `b*(s) = E_{a~mu}[|z_i|^2 Q] / E_{a~mu}[|z_i|^2]`, broadcast over `a^{-i}`.
pub fn optimal_state_baseline_table(ctx: &ExactContext) -> Result<BaselineTable> {
    let na = ctx.n_joint();
    let mut per_state = Vec::with_capacity(ctx.n_dims());
    for i in 0..ctx.n_dims() {
        let mut v = Vec::with_capacity(ctx.n_states());
        for s in 0..ctx.n_states() {
            let (mut num, mut den) = (0.0, 0.0);
            for a in 0..na {
                let w = ctx.mu_table[s * na + a] * ctx.z_norm_sq(i, s, a);
                num += w * ctx.q_pi[s * na + a];
                den += w;
            }
            if !(den > 0.0) {
                return Err(Error::Model(format!("degenerate score weight for dimension {i} at state {s}")));
            }
            v.push(num / den);
        }
        per_state.push(v);
    }
    Ok(BaselineTable::from_fn(ctx, |i, s, _| per_state[i][s]))
}

/// `(Var(b) - Var(b*), E[(b - b*)^2 W])` for dimension `i`.
pub fn check_variance_difference(ctx: &ExactContext, b: &BaselineTable, i: usize) -> Result<(f64, f64)> {
    let f = FactorEnumeration::new(ctx, i);
    let best = f.optimal()?;
    let mut star = b.clone();
    star.tables[i] = best.clone();
    let lhs = exact_variance(ctx, b, i)? - exact_variance(ctx, &star, i)?;
    let rhs = f.weighted_gap(&b.tables[i], &best);
    Ok((lhs, rhs))
}

/// `max_s |E_{a~mu}[f(s, a) rho grad log pi(a^i|s)]|` for an arbitrary
/// per-`(s, a)` function. Zero whenever `f` ignores `a^i`.
pub fn check_unbiasedness_fn(ctx: &ExactContext, i: usize, f: impl Fn(usize, usize) -> f64) -> f64 {
    let na = ctx.n_joint();
    let mut worst: f64 = 0.0;
    for s in 0..ctx.n_states() {
        let mut acc = vec![0.0; ctx.num_params()];
        for a in 0..na {
            let k = s * na + a;
            axpy(&mut acc, ctx.mu_table[k] * ctx.rho[k] * f(s, a), &ctx.scores[i][k]);
        }
        worst = worst.max(norm_sq(&acc).sqrt());
    }
    worst
}

/// `max_s |E_{a~mu}[rho grad log pi(a^i|s) b_i(s, a^{-i})]|`.
pub fn check_unbiasedness(ctx: &ExactContext, b: &BaselineTable, i: usize) -> f64 {
    check_unbiasedness_fn(ctx, i, |s, a| b.at(ctx, i, s, a))
}

/// `E_{s~d_mu, a~mu}[g^i(b)^T g^j(b)]`.
pub fn check_cross_term(ctx: &ExactContext, b: &BaselineTable, i: usize, j: usize) -> f64 {
    let na = ctx.n_joint();
    let mut total = 0.0;
    for s in 0..ctx.n_states() {
        for a in 0..na {
            let k = s * na + a;
            let ci = ctx.q_pi[k] - b.at(ctx, i, s, a);
            let cj = ctx.q_pi[k] - b.at(ctx, j, s, a);
            let dot: f64 = ctx.scores[i][k].iter().zip(&ctx.scores[j][k]).map(|(x, y)| x * y).sum();
            total += ctx.d_mu[s] * ctx.mu_table[k] * ctx.rho[k] * ctx.rho[k] * ci * cj * dot;
        }
    }
    total
}

/// Coarse-to-fine grid minimisation of the directly enumerated variance,
/// one table entry at a time. Returns the table and the final grid step.
///
/// The variance is a sum of independent quadratics in the entries, so
/// entrywise minimisation reaches the joint minimiser.
pub fn grid_search_baseline(ctx: &ExactContext, i: usize, resolution: f64) -> (Vec<f64>, f64) {
    const POINTS: usize = 11;
    let f = FactorEnumeration::new(ctx, i);
    let lo = f.q.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = f.q.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut table = vec![0.0; f.w.len()];
    let mut final_step = 0.0;
    for e in 0..table.len() {
        let (mut a, mut b) = (lo - 1.0, hi + 1.0);
        loop {
            let step = (b - a) / (POINTS - 1) as f64;
            let mut best = (f64::INFINITY, a);
            for k in 0..POINTS {
                let v = a + step * k as f64;
                table[e] = v;
                let val = f.variance_direct(&table);
                if val < best.0 {
                    best = (val, v);
                }
            }
            table[e] = best.1;
            (a, b) = (best.1 - step, best.1 + step);
            if step <= resolution {
                final_step = step;
                break;
            }
        }
    }
    (table, final_step)
}
