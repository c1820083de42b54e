use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use offoab_harness::metrics::{median_steps, read_metrics, threshold_report};
use offoab_harness::variance_lab::{parse_variance_csv, variance_csv, variance_lab_from_dir};
use offoab_harness::{plot, train, verify, RunConfig};

#[derive(Parser)]
#[command(name = "offoab", version, about = "Off-policy policy gradients with action-dependent baselines")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one configuration and write metrics, manifest and checkpoints.
    Train {
        /// key=value config file; the desk profile is used when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Start from a named profile (desk or paper) instead of a file.
        #[arg(long, conflicts_with = "config")]
        profile: Option<String>,
        /// Override one key, e.g. --set seed=3. Repeatable.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Measure gradient variance at a run's checkpoints.
    VarianceLab {
        /// Run directory written by `train`.
        #[arg(long)]
        run: PathBuf,
        /// Comma-separated checkpoint timesteps; all when omitted.
        #[arg(long, value_delimiter = ',')]
        timesteps: Option<Vec<u64>>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// CSV destination; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the exact-enumeration and derivative checks.
    OracleVerify {
        #[arg(long, default_value_t = 50)]
        instances: u64,
        #[arg(long, default_value_t = 100)]
        points: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// JSON report destination.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// First evaluation timestep at which each run reaches a return.
    ThresholdReport {
        /// Fixed threshold.
        #[arg(long, conflicts_with = "median_final_of", allow_negative_numbers = true)]
        threshold: Option<f64>,
        /// Use the median final return of these metrics files as the threshold.
        #[arg(long, value_delimiter = ',')]
        median_final_of: Option<Vec<PathBuf>>,
        /// metrics.csv files to report on.
        #[arg(required = true)]
        metrics: Vec<PathBuf>,
    },
    /// Render return and variance charts as SVG.
    Plot {
        /// LABEL=path1,path2,... groups of metrics.csv files. Repeatable.
        #[arg(long = "returns", value_name = "LABEL=FILES")]
        returns: Vec<String>,
        /// Variance-lab CSV files to merge into one chart.
        #[arg(long = "variance")]
        variance: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Train { config, profile, overrides, out } => {
            let mut cfg = match (config, profile) {
                (Some(path), _) => {
                    let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
                    RunConfig::from_text(&text)?
                }
                (None, Some(p)) => RunConfig::profile(&p)?,
                (None, None) => RunConfig::desk(),
            };
            for o in &overrides {
                cfg.apply_override(o)?;
            }
            cfg.validate()?;
            let result = train(&cfg, Some(&out))?;
            let last = result.manifest.metrics.last();
            println!(
                "trained {} steps, {} policy updates; final eval return {}",
                cfg.total_timesteps,
                result.manifest.policy_updates,
                last.map_or("n/a".to_string(), |m| format!("{:.3}", m.eval_mean_return))
            );
            println!("wrote {}", out.display());
        }
        Command::VarianceLab { run, timesteps, seed, out } => {
            let rows = variance_lab_from_dir(&run, timesteps.as_deref(), seed)?;
            let csv = variance_csv(&rows)?;
            match out {
                Some(p) => std::fs::write(&p, csv).with_context(|| format!("writing {}", p.display()))?,
                None => print!("{csv}"),
            }
        }
        Command::OracleVerify { instances, points, seed, json } => {
            let outcomes = verify::run_all(instances, points, seed)?;
            print!("{}", verify::render_table(&outcomes));
            if let Some(p) = json {
                std::fs::write(&p, serde_json::to_string_pretty(&outcomes)? + "\n")?;
            }
            if outcomes.iter().any(|o| !o.passed) {
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::ThresholdReport { threshold, median_final_of, metrics } => {
            let threshold = match (threshold, median_final_of) {
                (Some(t), _) => t,
                (None, Some(files)) => {
                    let finals = files
                        .iter()
                        .map(|f| {
                            let rows = read_metrics(f)?;
                            rows.last()
                                .map(|r| r.eval_mean_return)
                                .with_context(|| format!("{} has no rows", f.display()))
                        })
                        .collect::<Result<Vec<f64>>>()?;
                    median(finals)
                }
                (None, None) => bail!("give --threshold or --median-final-of"),
            };
            let runs = metrics
                .iter()
                .map(|p| Ok((p.display().to_string(), read_metrics(p)?)))
                .collect::<Result<Vec<_>>>()?;
            let (hits, table) = threshold_report(&runs, threshold);
            print!("{table}");
            let steps: Vec<Option<u64>> = hits.iter().map(|h| h.1).collect();
            if let Some(m) = median_steps(&steps) {
                println!("median timesteps {m}");
            }
        }
        Command::Plot { returns, variance, out } => {
            if returns.is_empty() && variance.is_empty() {
                bail!("nothing to plot: give --returns and/or --variance");
            }
            std::fs::create_dir_all(&out)?;
            if !returns.is_empty() {
                let groups = returns
                    .iter()
                    .map(|g| {
                        let (label, files) = g.split_once('=').context("--returns expects LABEL=FILES")?;
                        let runs = files
                            .split(',')
                            .map(|f| read_metrics(&PathBuf::from(f)).map_err(anyhow::Error::from))
                            .collect::<Result<Vec<_>>>()?;
                        Ok((label.to_string(), runs))
                    })
                    .collect::<Result<Vec<_>>>()?;
                std::fs::write(out.join("returns.svg"), plot::returns_plot(&groups)?)?;
            }
            if !variance.is_empty() {
                let mut rows = Vec::new();
                for f in &variance {
                    let text = std::fs::read_to_string(f).with_context(|| format!("reading {}", f.display()))?;
                    rows.extend(parse_variance_csv(&text)?);
                }
                std::fs::write(out.join("variance.svg"), plot::variance_plot(&rows)?)?;
            }
            println!("wrote {}", out.display());
        }
    }
    Ok(ExitCode::SUCCESS)
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
