//! Gradient-variance measurements at saved checkpoints.
//!
//! For each checkpoint the replay buffer is cut back to what it held at
//! that timestep, and every baseline kind is measured against the same
//! sequence of minibatches.

use std::path::Path;

use offoab_core::checkpoint;
use offoab_core::estimator::{gradient_variance, BaselineKind, BaselineVariant};
use offoab_core::replay::ReplayBuffer;
use offoab_core::{Error, Result};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::train::{checkpoint_dir, rng_for, Snapshot};

pub const LAB_BASELINES: [BaselineVariant; 3] =
    [BaselineVariant::None, BaselineVariant::StateValue, BaselineVariant::ApproxAction];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceRow {
    pub seed: u64,
    pub timestep: u64,
    pub baseline: BaselineVariant,
    pub log10_variance: f64,
    pub trace: f64,
    pub repeats: usize,
    pub batch_size: usize,
    pub buffer_len: usize,
    pub ratio_saturations: u64,
    pub baseline_fallbacks: u64,
    pub mean_ratio: f64,
}

/// The buffer as it stood after `timestep` pushes, given the final buffer
/// and the total number of pushes that produced it.
pub fn buffer_at(full: &ReplayBuffer, total_pushes: u64, timestep: u64) -> Result<ReplayBuffer> {
    let Some(first) = total_pushes.checked_sub(full.len() as u64) else {
        return Err(Error::input("total_pushes", "fewer pushes than stored transitions"));
    };
    let window_start = timestep.saturating_sub(full.capacity() as u64);
    if timestep > total_pushes || first > window_start {
        return Err(Error::input(
            "checkpoint",
            format!("buffer no longer holds the transitions seen up to timestep {timestep}"),
        ));
    }
    let mut out = ReplayBuffer::new(full.capacity())?;
    let skip = (window_start - first) as usize;
    let take = (timestep - window_start) as usize;
    for t in full.iter_oldest_first().skip(skip).take(take) {
        out.push(t.clone())?;
    }
    Ok(out)
}

/// Variance readings for every snapshot and each of the three lab baselines.
pub fn variance_lab(
    cfg: &RunConfig,
    snapshots: &[Snapshot],
    full: &ReplayBuffer,
    total_pushes: u64,
    lab_seed: u64,
) -> Result<Vec<VarianceRow>> {
    let mut rows = Vec::new();
    for snap in snapshots {
        let buffer = buffer_at(full, total_pushes, snap.timestep)?;
        for variant in LAB_BASELINES {
            // Same generator for every kind: identical minibatches.
            let mut rng = rng_for(lab_seed, snap.timestep);
            let kind = BaselineKind::new(variant, cfg.mc_samples);
            let r = gradient_variance(
                &snap.policy,
                &snap.critic,
                &buffer,
                &kind,
                cfg.variance_repeats,
                cfg.batch_size,
                cfg.ratio_clip,
                &mut rng,
            )?;
            rows.push(VarianceRow {
                seed: cfg.seed,
                timestep: snap.timestep,
                baseline: variant,
                log10_variance: r.log10_variance,
                trace: r.trace,
                repeats: cfg.variance_repeats,
                batch_size: cfg.batch_size,
                buffer_len: buffer.len(),
                ratio_saturations: r.counters.ratio_saturations,
                baseline_fallbacks: r.counters.baseline_fallbacks,
                mean_ratio: r.counters.mean_ratio(),
            });
        }
    }
    Ok(rows)
}

/// Loads a run directory written by training and measures the requested
/// checkpoints (all of them when `timesteps` is `None`).
pub fn variance_lab_from_dir(run_dir: &Path, timesteps: Option<&[u64]>, lab_seed: u64) -> Result<Vec<VarianceRow>> {
    let cfg_text = std::fs::read_to_string(run_dir.join("config.txt"))
        .map_err(|e| Error::input("run_dir", format!("{}: {e}", run_dir.display())))?;
    let cfg = RunConfig::from_text(&cfg_text)?;
    let manifest = crate::train::read_manifest(&run_dir.join("manifest.json"))?;
    let wanted: Vec<u64> = timesteps.map_or_else(|| manifest.checkpoint_timesteps.clone(), <[u64]>::to_vec);
    let mut snapshots = Vec::with_capacity(wanted.len());
    for &t in &wanted {
        let dir = checkpoint_dir(run_dir, t);
        if !dir.join("policy.bin").is_file() || !dir.join("critic.bin").is_file() {
            return Err(Error::input("checkpoint", format!("no checkpoint for timestep {t} in {}", run_dir.display())));
        }
        snapshots.push(Snapshot {
            timestep: t,
            policy: checkpoint::load_policy(&dir.join("policy.bin"))?,
            critic: checkpoint::load_critic(&dir.join("critic.bin"))?,
        });
    }
    let replay_path = run_dir.join("replay.bin");
    if !replay_path.is_file() {
        return Err(Error::input("replay", format!("{} is missing; train with save_replay=true", replay_path.display())));
    }
    let full = checkpoint::load_replay(&replay_path)?;
    variance_lab(&cfg, &snapshots, &full, manifest.config.total_timesteps, lab_seed)
}

pub fn variance_csv(rows: &[VarianceRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::Io(e.to_string()))?;
    }
    if rows.is_empty() {
        w.write_record([
            "seed", "timestep", "baseline", "log10_variance", "trace", "repeats", "batch_size", "buffer_len",
            "ratio_saturations", "baseline_fallbacks", "mean_ratio",
        ])
        .map_err(|e| Error::Io(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("ascii"))
}

pub fn parse_variance_csv(text: &str) -> Result<Vec<VarianceRow>> {
    csv::Reader::from_reader(text.as_bytes())
        .deserialize()
        .collect::<std::result::Result<_, _>>()
        .map_err(|e: csv::Error| Error::Parse {
            line: e.position().map_or(0, |p| p.line() as usize),
            detail: e.to_string(),
        })
}
