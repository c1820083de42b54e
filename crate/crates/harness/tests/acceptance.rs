//! Acceptance gate. Runs every acceptance check at its stated tolerance and
//! runtime budget, prints one PASS/FAIL line per check and exits non-zero
//! if any fails. Artifacts land in `$CARGO_TARGET_TMPDIR/acceptance`.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use offoab_core::envs::{parse_mdp, write_mdp};
use offoab_core::estimator::BaselineVariant;
use offoab_core::oracle::suite::{self, CheckOutcome};
use offoab_harness::metrics::{first_crossing, median_steps, metrics_to_string, MetricsRow};
use offoab_harness::train::{train, TrainOutput};
use offoab_harness::variance_lab::{variance_csv, variance_lab, VarianceRow};
use offoab_harness::{plot, verify, RunConfig};

const INSTANCES: u64 = 50;
const FD_POINTS: usize = 100;
const FACTORIZATION_BATCHES: usize = 100;
const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
const VARIANCE_CHECKPOINTS: [u64; 5] = [20_000, 40_000, 60_000, 80_000, 100_000];
const AUDIT_TOL: f64 = 1e-10;

struct Line {
    name: &'static str,
    passed: bool,
    summary: String,
}

fn say(line: &Line) {
    println!("[{}] {:<24} {}", if line.passed { "PASS" } else { "FAIL" }, line.name, line.summary);
}

fn within(elapsed: Duration, budget_secs: u64) -> bool {
    elapsed <= Duration::from_secs(budget_secs)
}

/// Joins several outcomes into one line under a runtime budget.
fn combine(name: &'static str, outcomes: Vec<CheckOutcome>, t0: Instant, budget_secs: u64) -> Line {
    let elapsed = t0.elapsed();
    let mut passed = within(elapsed, budget_secs);
    let mut parts = Vec::new();
    for o in &outcomes {
        passed &= o.passed;
        parts.push(format!(
            "{} {} worst {:.2e} (tol {:.0e}, seed {}): {}",
            o.name,
            if o.passed { "ok" } else { "FAILED" },
            o.worst,
            o.tolerance,
            o.worst_seed,
            o.detail
        ));
    }
    parts.push(format!("{:.1}s of {budget_secs}s", elapsed.as_secs_f64()));
    Line { name, passed, summary: parts.join("; ") }
}

fn failed(name: &'static str, e: impl std::fmt::Display) -> Line {
    Line { name, passed: false, summary: format!("error: {e}") }
}

fn exact_checks(seeds: &[u64]) -> Vec<Line> {
    let mut lines = Vec::new();
    let t0 = Instant::now();
    lines.push(match suite::unbiasedness(seeds, 10) {
        Ok(o) => combine("unbiasedness", vec![o], t0, 30),
        Err(e) => failed("unbiasedness", e),
    });
    let t0 = Instant::now();
    lines.push(match (suite::optimality_perturbation(seeds, 100), suite::optimality_grid(seeds)) {
        (Ok(a), Ok(b)) => combine("optimal-baseline", vec![a, b], t0, 60),
        (Err(e), _) | (_, Err(e)) => failed("optimal-baseline", e),
    });
    let t0 = Instant::now();
    lines.push(match suite::variance_difference(seeds, 10) {
        Ok(o) => combine("variance-identities", vec![o], t0, 60),
        Err(e) => failed("variance-identities", e),
    });
    let t0 = Instant::now();
    lines.push(match suite::flat_weight_regime(seeds) {
        Ok(o) => combine("flat-weight-regime", vec![o], t0, 60),
        Err(e) => failed("flat-weight-regime", e),
    });
    lines
}

fn derivative_checks() -> Vec<Line> {
    let t0 = Instant::now();
    let fd = (|| {
        Ok::<_, offoab_core::Error>(vec![
            verify::gaussian_log_prob_gradients(FD_POINTS, 0)?,
            verify::categorical_log_prob_gradients(FD_POINTS, 0)?,
            verify::critic_loss_gradients(FD_POINTS, 0)?,
        ])
    })();
    let first = match fd {
        Ok(o) => combine("finite-differences", o, t0, 120),
        Err(e) => failed("finite-differences", e),
    };
    let t0 = Instant::now();
    let second = match verify::gaussian_factorization(FACTORIZATION_BATCHES, 0) {
        Ok(o) => combine("factorization", vec![o], t0, 60),
        Err(e) => failed("factorization", e),
    };
    vec![first, second]
}

struct Sweep {
    approx: Vec<(TrainOutput, Duration)>,
    none: Vec<(TrainOutput, Duration)>,
}

fn desk_config(baseline: BaselineVariant, seed: u64) -> RunConfig {
    let mut c = RunConfig::desk();
    c.env = "point-mass-2d".into();
    c.baseline = baseline;
    c.seed = seed;
    c
}

fn run_sweep(artifacts: &Path) -> offoab_core::Result<Sweep> {
    let mut sweep = Sweep { approx: Vec::new(), none: Vec::new() };
    for &seed in &SEEDS {
        for variant in [BaselineVariant::ApproxAction, BaselineVariant::None] {
            let t0 = Instant::now();
            let out = train(&desk_config(variant, seed), None)?;
            let dt = t0.elapsed();
            let last = out.manifest.metrics.last().map_or(f64::NAN, |m| m.eval_mean_return);
            eprintln!("  trained {:<13} seed {seed}: final return {last:>10.2} in {:.0}s", variant.name(), dt.as_secs_f64());
            std::fs::write(
                artifacts.join(format!("metrics_{}_{seed}.csv", variant.name())),
                metrics_to_string(&out.manifest.metrics)?,
            )?;
            match variant {
                BaselineVariant::None => sweep.none.push((out, dt)),
                _ => sweep.approx.push((out, dt)),
            }
        }
    }
    Ok(sweep)
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn variance_check(sweep: &Sweep, artifacts: &Path) -> offoab_core::Result<Line> {
    let t0 = Instant::now();
    let mut rows: Vec<VarianceRow> = Vec::new();
    for (out, _) in &sweep.approx {
        let cfg = &out.manifest.config;
        let snaps: Vec<_> =
            out.snapshots.iter().filter(|s| VARIANCE_CHECKPOINTS.contains(&s.timestep)).cloned().collect();
        rows.extend(variance_lab(cfg, &snaps, &out.buffer, cfg.total_timesteps, cfg.seed)?);
    }
    std::fs::write(artifacts.join("variance.csv"), variance_csv(&rows)?)?;
    std::fs::write(artifacts.join("variance.svg"), plot::variance_plot(&rows)?)?;
    let training: Duration = sweep.approx.iter().map(|(_, d)| *d).sum();
    let elapsed = training + t0.elapsed();

    let med = |t: u64, b: BaselineVariant| {
        median(rows.iter().filter(|r| r.timestep == t && r.baseline == b).map(|r| r.log10_variance).collect())
    };
    let mut wins = 0;
    let mut cells = Vec::new();
    for t in VARIANCE_CHECKPOINTS {
        let (a, n, s) = (med(t, BaselineVariant::ApproxAction), med(t, BaselineVariant::None), med(t, BaselineVariant::StateValue));
        wins += (a < n) as usize;
        cells.push(format!("{}k: approx {a:.2} / state {s:.2} / none {n:.2}", t / 1000));
    }
    Ok(Line {
        name: "variance-reduction",
        passed: wins >= 4 && within(elapsed, 20 * 60),
        summary: format!(
            "approx < none at {wins}/5 checkpoints (need 4); median log10 variance {}; {:.0}s of 1200s",
            cells.join(", "),
            elapsed.as_secs_f64()
        ),
    })
}

fn learning_check(sweep: &Sweep, artifacts: &Path) -> offoab_core::Result<Line> {
    let t0 = Instant::now();
    let final_return = |m: &[MetricsRow]| m.last().map_or(f64::NAN, |r| r.eval_mean_return);
    let threshold = median(sweep.none.iter().map(|(o, _)| final_return(&o.manifest.metrics)).collect());
    let hits = |runs: &[(TrainOutput, Duration)]| -> Vec<Option<u64>> {
        runs.iter().map(|(o, _)| first_crossing(&o.manifest.metrics, threshold)).collect()
    };
    let (ha, hn) = (hits(&sweep.approx), hits(&sweep.none));
    let (ma, mn) = (median_steps(&ha).unwrap_or(f64::NAN), median_steps(&hn).unwrap_or(f64::NAN));
    let groups = vec![
        ("approx_action".to_string(), sweep.approx.iter().map(|(o, _)| o.manifest.metrics.clone()).collect()),
        ("none".to_string(), sweep.none.iter().map(|(o, _)| o.manifest.metrics.clone()).collect()),
    ];
    std::fs::write(artifacts.join("returns.svg"), plot::returns_plot(&groups)?)?;
    let training: Duration = sweep.approx.iter().chain(&sweep.none).map(|(_, d)| *d).sum();
    let elapsed = training + t0.elapsed();
    let show = |v: &[Option<u64>]| v.iter().map(|h| h.map_or("never".into(), |t| t.to_string())).collect::<Vec<_>>().join(",");
    let finals = |runs: &[(TrainOutput, Duration)]| {
        runs.iter().map(|(o, _)| format!("{:.1}", final_return(&o.manifest.metrics))).collect::<Vec<_>>().join(",")
    };
    Ok(Line {
        name: "learning-speed",
        passed: ma < mn && within(elapsed, 30 * 60),
        summary: format!(
            "threshold {threshold:.2}; steps to threshold approx [{}] median {ma} vs none [{}] median {mn}; final returns approx [{}] none [{}]; {:.0}s of 1800s",
            show(&ha),
            show(&hn),
            finals(&sweep.approx),
            finals(&sweep.none),
            elapsed.as_secs_f64()
        ),
    })
}

fn determinism_check(sweep: &Sweep, artifacts: &Path) -> offoab_core::Result<Line> {
    let mut notes = Vec::new();
    let mut passed = true;

    let mut cfg = desk_config(BaselineVariant::ApproxAction, 11);
    cfg.total_timesteps = 30_000;
    let (a, b) = (artifacts.join("repeat_a"), artifacts.join("repeat_b"));
    train(&cfg, Some(&a))?;
    train(&cfg, Some(&b))?;
    let same = std::fs::read(a.join("metrics.csv"))? == std::fs::read(b.join("metrics.csv"))?;
    passed &= same;
    notes.push(format!("repeated run metrics.csv {}", if same { "bit-identical" } else { "DIFFERS" }));

    let worst = sweep
        .approx
        .iter()
        .chain(&sweep.none)
        .map(|(o, _)| o.manifest.replay_audit_worst)
        .fold(0.0, |w: f64, x| if x.is_nan() { f64::NAN } else { w.max(x) });
    let audited = worst <= AUDIT_TOL;
    passed &= audited;
    notes.push(format!("replay density audit worst {worst:.2e} over 10 full runs (tol {AUDIT_TOL:.0e})"));

    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../core/fixtures");
    let mut count = 0;
    for entry in std::fs::read_dir(&dir)? {
        let path = entry?.path();
        if path.extension().is_none_or(|x| x != "mdp") {
            continue;
        }
        count += 1;
        let mdp = parse_mdp(&std::fs::read_to_string(&path)?)?;
        let ok = parse_mdp(&write_mdp(&mdp)).is_ok_and(|m| m == mdp);
        if !ok {
            notes.push(format!("{} does not round-trip", path.display()));
        }
        passed &= ok;
    }
    passed &= count > 0;
    notes.push(format!("{count} MDP fixtures parsed and round-tripped"));
    Ok(Line { name: "determinism-and-formats", passed, summary: notes.join("; ") })
}

fn main() -> ExitCode {
    let artifacts = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    if let Err(e) = std::fs::create_dir_all(&artifacts) {
        eprintln!("cannot create {}: {e}", artifacts.display());
        return ExitCode::FAILURE;
    }
    let seeds: Vec<u64> = (0..INSTANCES).collect();
    let mut lines = Vec::new();
    for l in exact_checks(&seeds).into_iter().chain(derivative_checks()) {
        say(&l);
        lines.push(l);
    }

    eprintln!("training {} point-mass runs (desk profile)...", 2 * SEEDS.len());
    match run_sweep(&artifacts) {
        Ok(sweep) => {
            for l in [
                variance_check(&sweep, &artifacts).unwrap_or_else(|e| failed("variance-reduction", e)),
                learning_check(&sweep, &artifacts).unwrap_or_else(|e| failed("learning-speed", e)),
                determinism_check(&sweep, &artifacts).unwrap_or_else(|e| failed("determinism-and-formats", e)),
            ] {
                say(&l);
                lines.push(l);
            }
        }
        Err(e) => {
            for name in ["variance-reduction", "learning-speed", "determinism-and-formats"] {
                let l = failed(name, &e);
                say(&l);
                lines.push(l);
            }
        }
    }

    let n_pass = lines.iter().filter(|l| l.passed).count();
    println!("acceptance: {n_pass}/{} checks passed; artifacts in {}", lines.len(), artifacts.display());
    if n_pass == lines.len() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
