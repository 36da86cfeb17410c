//! Command-line entry point: run one experiment, sweep a parameter, or probe
//! random-policy success rates on a map.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use hetrl::config::ExperimentConfig;
use hetrl::env;
use hetrl::metrics::{self, episodes_to_threshold, steps_summary, success_rate_window, MetricsLog};
use hetrl::skills::default_profiles;
use hetrl::trainer::{self, probe_random};

#[derive(Parser)]
#[command(name = "hetrl", about = "Collaborative training of heterogeneous RL agents \
with count-based curiosity on a door-gated gridworld")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and export metrics CSVs to the output directory.
    Run {
        /// TOML experiment config.
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory.
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Run the experiment once per value of a swept parameter
    /// (only `beta` is sweepable), exporting to `<out>/<param>_<value>/`.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// Parameter to sweep.
        #[arg(long)]
        param: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Estimate uniform-random success rates of the skilled and non-skilled
    /// default profiles on a map.
    ProbeRandom {
        #[arg(long)]
        map: PathBuf,
        #[arg(long, default_value_t = 10_000)]
        episodes: usize,
        #[arg(long, default_value_t = 600)]
        max_steps: u32,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn print_summary(log: &MetricsLog) {
    for agent in log.agent_ids() {
        let sr = match success_rate_window(log, agent, 100, false) {
            Ok(series) => series,
            Err(_) => continue,
        };
        let sr_corr = success_rate_window(log, agent, 100, true).unwrap_or_default();
        let final_sr = sr.last().copied().unwrap_or(0.0);
        let final_corr = sr_corr.last().copied().unwrap_or(0.0);
        let to90 = episodes_to_threshold(&sr, 0.9)
            .map(|e| e.to_string())
            .unwrap_or_else(|| "never".into());
        let to80c = episodes_to_threshold(&sr_corr, 0.8)
            .map(|e| e.to_string())
            .unwrap_or_else(|| "never".into());
        let steps = match steps_summary(log, agent, 100) {
            Ok((mean, std)) => format!("{mean:.1} +- {std:.1}"),
            Err(_) => "no successes".into(),
        };
        println!(
            "agent {agent}: final SR {final_sr:.3} (corridor {final_corr:.3}), \
             90% SR at episode {to90}, corridor 80% SR at {to80c}, steps {steps}"
        );
    }
}

fn run_one(config: &ExperimentConfig, out: &Path) -> Result<()> {
    let resolved = config
        .resolve(Some(Path::new(".")))
        .context("config validation failed")?;
    println!(
        "running {} on {} ({} episodes per agent, seed {})",
        resolved.config.mode.name(),
        resolved.config.map_path.display(),
        resolved.config.episodes,
        resolved.config.seed
    );
    let (log, state) = trainer::run_experiment(&resolved)?;
    let written = metrics::export(&log, out)?;
    trainer::export_artifacts(&state, &resolved, out)?;
    print_summary(&log);
    println!("wrote {} metric files to {}", written.len(), out.display());
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Run { config, seed, out } => {
            let mut config = ExperimentConfig::load(&config)?;
            if let Some(seed) = seed {
                config.seed = seed;
            }
            run_one(&config, &out)?;
        }
        Command::Sweep {
            config,
            param,
            values,
            seed,
            out,
        } => {
            if param != "beta" {
                bail!("unsupported sweep parameter `{param}` (only `beta` is sweepable)");
            }
            if values.is_empty() {
                bail!("no sweep values given");
            }
            let mut base = ExperimentConfig::load(&config)?;
            if let Some(seed) = seed {
                base.seed = seed;
            }
            for &value in &values {
                let mut config = base.clone();
                config.beta = value;
                let sub = out.join(format!("beta_{value}"));
                println!("=== beta = {value} ===");
                run_one(&config, &sub)?;
            }
        }
        Command::ProbeRandom {
            map,
            episodes,
            max_steps,
            seed,
        } => {
            let text = std::fs::read_to_string(&map)
                .with_context(|| format!("cannot read map {}", map.display()))?;
            let map = env::parse_map(&text)?;
            let profiles = default_profiles();
            for profile in &profiles {
                let stats = probe_random(&map, profile, episodes, max_steps, seed);
                let corridor_share = if stats.successes > 0 {
                    stats.corridor_successes as f64 / stats.successes as f64
                } else {
                    0.0
                };
                println!(
                    "agent {} ({} actions): success {:.2}% ({}/{}), {:.1}% of successes via corridor",
                    profile.agent_id,
                    profile.len(),
                    100.0 * stats.success_rate(),
                    stats.successes,
                    stats.episodes,
                    100.0 * corridor_share
                );
            }
        }
    }
    Ok(())
}
