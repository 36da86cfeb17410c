//! Per-episode metrics, sliding success-rate windows, steps-to-goal
//! summaries, advantage-dominance maps and CSV/SVG export.
//!
//! All CSV schemas are fixed and documented in the README. Floats are written
//! as `{:.16e}` (17 significant digits) so every exported table parses back
//! to bit-identical values.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::ppo::DominanceSample;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("no records for agent {0}")]
    UnknownAgent(usize),
    #[error("no successful episodes in the requested window")]
    NoSuccessfulEpisodes,
    #[error("window must be >= 1")]
    EmptyWindow,
    #[error("export failed: {0}")]
    Io(#[from] std::io::Error),
    #[error("cannot parse csv: {0}")]
    Parse(String),
}

/// Outcome of one finished episode.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeRecord {
    pub agent_id: usize,
    pub episode_index: usize,
    pub success: bool,
    /// Whether the trajectory touched a corridor cell; meaningful on
    /// failures too.
    pub via_corridor: bool,
    pub steps: u32,
    pub return_ext: f64,
}

/// One row of training diagnostics, appended per rollout update.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagnosticsRow {
    pub update_index: usize,
    pub agent_id: usize,
    pub episode_index: usize,
    pub beta: f64,
    pub mean_ratio: f64,
    pub clip_fraction: f64,
    pub mean_entropy: f64,
    pub policy_loss: f64,
    pub critic_loss: f64,
    pub mean_abs_adv_ext: f64,
    pub mean_abs_adv_int_scaled: f64,
}

/// Everything an experiment emits: episode records, dominance-map
/// accumulators bucketed by training stage, and per-update diagnostics.
#[derive(Debug, Clone, Default)]
pub struct MetricsLog {
    pub records: Vec<EpisodeRecord>,
    pub diagnostics: Vec<DiagnosticsRow>,
    /// bucket index -> bin -> (extrinsic-dominant, intrinsic-dominant) counts.
    dominance: BTreeMap<usize, BTreeMap<(usize, usize), (u64, u64)>>,
    pub dominance_bucket_episodes: usize,
}

impl MetricsLog {
    pub fn new(dominance_bucket_episodes: usize) -> Self {
        MetricsLog {
            dominance_bucket_episodes,
            ..MetricsLog::default()
        }
    }

    pub fn push_record(&mut self, record: EpisodeRecord) {
        self.records.push(record);
    }

    pub fn push_diagnostics(&mut self, row: DiagnosticsRow) {
        self.diagnostics.push(row);
    }

    /// Accumulates per-step dominance flags into the bucket of the episode
    /// each step belonged to.
    pub fn record_dominance(&mut self, samples: &[DominanceSample]) {
        let width = self.dominance_bucket_episodes.max(1);
        for sample in samples {
            let bucket = sample.episode_index / width;
            let cell = self
                .dominance
                .entry(bucket)
                .or_default()
                .entry(sample.bin)
                .or_insert((0, 0));
            if sample.ext_dominant {
                cell.0 += 1;
            } else {
                cell.1 += 1;
            }
        }
    }

    pub fn dominance_buckets(&self) -> &BTreeMap<usize, BTreeMap<(usize, usize), (u64, u64)>> {
        &self.dominance
    }

    /// Records of one agent in episode order.
    pub fn records_for(&self, agent_id: usize) -> Vec<&EpisodeRecord> {
        let mut records: Vec<&EpisodeRecord> =
            self.records.iter().filter(|r| r.agent_id == agent_id).collect();
        records.sort_by_key(|r| r.episode_index);
        records
    }

    pub fn agent_ids(&self) -> Vec<usize> {
        let mut ids: Vec<usize> = self.records.iter().map(|r| r.agent_id).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }
}

/// Trailing-window success rate per episode. Before the window fills, the
/// partial prefix mean is used. With `corridor_only`, successes count only
/// when the episode also went through the corridor.
pub fn success_rate_window(
    log: &MetricsLog,
    agent_id: usize,
    window: usize,
    corridor_only: bool,
) -> Result<Vec<f64>, MetricsError> {
    if window == 0 {
        return Err(MetricsError::EmptyWindow);
    }
    let records = log.records_for(agent_id);
    if records.is_empty() {
        return Err(MetricsError::UnknownAgent(agent_id));
    }
    let hits: Vec<f64> = records
        .iter()
        .map(|r| {
            let hit = r.success && (!corridor_only || r.via_corridor);
            if hit {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    let mut series = Vec::with_capacity(hits.len());
    let mut running = 0.0;
    for i in 0..hits.len() {
        running += hits[i];
        if i >= window {
            running -= hits[i - window];
        }
        let len = (i + 1).min(window) as f64;
        series.push(running / len);
    }
    Ok(series)
}

/// First episode index at which the series reaches `threshold`, if ever.
pub fn episodes_to_threshold(series: &[f64], threshold: f64) -> Option<usize> {
    series.iter().position(|&v| v >= threshold)
}

/// Mean and population std of steps over successful episodes among the last
/// `last_k` records of the agent.
pub fn steps_summary(
    log: &MetricsLog,
    agent_id: usize,
    last_k: usize,
) -> Result<(f64, f64), MetricsError> {
    let records = log.records_for(agent_id);
    if records.is_empty() {
        return Err(MetricsError::UnknownAgent(agent_id));
    }
    let tail = &records[records.len().saturating_sub(last_k)..];
    let steps: Vec<f64> = tail.iter().filter(|r| r.success).map(|r| r.steps as f64).collect();
    if steps.is_empty() {
        return Err(MetricsError::NoSuccessfulEpisodes);
    }
    let n = steps.len() as f64;
    let mean = steps.iter().sum::<f64>() / n;
    let var = steps.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / n;
    Ok((mean, var.sqrt()))
}

fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

pub const EPISODES_HEADER: &str = "agent_id,episode_index,success,via_corridor,steps,return_ext";
pub const SR_CURVES_HEADER: &str = "agent_id,episode_index,sr,sr_corridor";
pub const DOMINANCE_HEADER: &str = "x,y,ext,int";
pub const DIAGNOSTICS_HEADER: &str = "update_index,agent_id,episode_index,beta,mean_ratio,\
clip_fraction,mean_entropy,policy_loss,critic_loss,mean_abs_adv_ext,mean_abs_adv_int_scaled";

pub fn episodes_csv(log: &MetricsLog) -> String {
    let mut out = String::new();
    out.push_str(EPISODES_HEADER);
    out.push('\n');
    for r in &log.records {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.agent_id,
            r.episode_index,
            r.success,
            r.via_corridor,
            r.steps,
            fmt_f64(r.return_ext)
        );
    }
    out
}

/// Parses text produced by `episodes_csv` back into records.
pub fn parse_episodes_csv(text: &str) -> Result<Vec<EpisodeRecord>, MetricsError> {
    let mut lines = text.lines();
    match lines.next() {
        Some(header) if header == EPISODES_HEADER => {}
        _ => return Err(MetricsError::Parse("missing episodes header".into())),
    }
    let mut records = Vec::new();
    for (i, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 6 {
            return Err(MetricsError::Parse(format!("row {i}: expected 6 fields")));
        }
        let parse_err = |what: &str| MetricsError::Parse(format!("row {i}: bad {what}"));
        records.push(EpisodeRecord {
            agent_id: fields[0].parse().map_err(|_| parse_err("agent_id"))?,
            episode_index: fields[1].parse().map_err(|_| parse_err("episode_index"))?,
            success: fields[2].parse().map_err(|_| parse_err("success"))?,
            via_corridor: fields[3].parse().map_err(|_| parse_err("via_corridor"))?,
            steps: fields[4].parse().map_err(|_| parse_err("steps"))?,
            return_ext: fields[5].parse().map_err(|_| parse_err("return_ext"))?,
        });
    }
    Ok(records)
}

fn sr_curves_csv(log: &MetricsLog) -> String {
    let mut out = String::new();
    out.push_str(SR_CURVES_HEADER);
    out.push('\n');
    for agent in log.agent_ids() {
        let sr = success_rate_window(log, agent, 100, false).unwrap_or_default();
        let sr_corridor = success_rate_window(log, agent, 100, true).unwrap_or_default();
        for (i, (a, c)) in sr.iter().zip(sr_corridor.iter()).enumerate() {
            let _ = writeln!(out, "{},{},{},{}", agent, i, fmt_f64(*a), fmt_f64(*c));
        }
    }
    out
}

fn diagnostics_csv(log: &MetricsLog) -> String {
    let mut out = String::new();
    out.push_str(DIAGNOSTICS_HEADER);
    out.push('\n');
    for d in &log.diagnostics {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{}",
            d.update_index,
            d.agent_id,
            d.episode_index,
            fmt_f64(d.beta),
            fmt_f64(d.mean_ratio),
            fmt_f64(d.clip_fraction),
            fmt_f64(d.mean_entropy),
            fmt_f64(d.policy_loss),
            fmt_f64(d.critic_loss),
            fmt_f64(d.mean_abs_adv_ext),
            fmt_f64(d.mean_abs_adv_int_scaled)
        );
    }
    out
}

fn dominance_csv(bins: &BTreeMap<(usize, usize), (u64, u64)>) -> String {
    let mut out = String::new();
    out.push_str(DOMINANCE_HEADER);
    out.push('\n');
    for (&(x, y), &(ext, int)) in bins {
        let _ = writeln!(out, "{x},{y},{ext},{int}");
    }
    out
}

/// Static SVG line chart of the window-100 success rates, one solid line per
/// agent plus a dashed corridor-success line.
fn sr_curve_svg(log: &MetricsLog) -> String {
    const W: f64 = 720.0;
    const H: f64 = 400.0;
    const M: f64 = 40.0;
    let colors = ["#d62728", "#1f77b4", "#2ca02c", "#9467bd"];
    let agents = log.agent_ids();
    let max_len = agents
        .iter()
        .map(|&a| log.records_for(a).len())
        .max()
        .unwrap_or(0)
        .max(2);

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\">"
    );
    let _ = writeln!(svg, "<rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>");
    let _ = writeln!(
        svg,
        "<line x1=\"{M}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>",
        H - M,
        W - M,
        H - M
    );
    let _ = writeln!(
        svg,
        "<line x1=\"{M}\" y1=\"{M}\" x2=\"{M}\" y2=\"{}\" stroke=\"black\"/>",
        H - M
    );
    let _ = writeln!(
        svg,
        "<text x=\"{}\" y=\"{}\" font-size=\"12\">episode</text>",
        W / 2.0,
        H - 10.0
    );
    let _ = writeln!(svg, "<text x=\"6\" y=\"{M}\" font-size=\"12\">1.0</text>");
    let _ = writeln!(svg, "<text x=\"6\" y=\"{}\" font-size=\"12\">0.0</text>", H - M);

    let to_xy = |i: usize, v: f64| {
        let x = M + (W - 2.0 * M) * i as f64 / (max_len - 1) as f64;
        let y = (H - M) - (H - 2.0 * M) * v;
        (x, y)
    };
    for (k, &agent) in agents.iter().enumerate() {
        let color = colors[k % colors.len()];
        for (corridor, dash) in [(false, ""), (true, " stroke-dasharray=\"6 3\"")] {
            if let Ok(series) = success_rate_window(log, agent, 100, corridor) {
                let points: Vec<String> = series
                    .iter()
                    .enumerate()
                    .map(|(i, &v)| {
                        let (x, y) = to_xy(i, v);
                        format!("{x:.1},{y:.1}")
                    })
                    .collect();
                let _ = writeln!(
                    svg,
                    "<polyline fill=\"none\" stroke=\"{color}\"{dash} points=\"{}\"/>",
                    points.join(" ")
                );
            }
        }
        let _ = writeln!(
            svg,
            "<text x=\"{}\" y=\"{}\" font-size=\"12\" fill=\"{color}\">agent {agent}</text>",
            W - M - 70.0,
            M + 16.0 * k as f64
        );
    }
    svg.push_str("</svg>\n");
    svg
}

/// Writes every export file into `out_dir` and returns their paths:
/// `episodes.csv`, `sr_curves.csv`, `diagnostics.csv`, one
/// `dominance_<bucket>.csv` per stage bucket, and `sr_curve.svg`.
pub fn export(log: &MetricsLog, out_dir: &Path) -> Result<Vec<PathBuf>, MetricsError> {
    std::fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();
    let write = |name: String, content: String| -> Result<PathBuf, MetricsError> {
        let path = out_dir.join(name);
        let mut file = std::fs::File::create(&path)?;
        file.write_all(content.as_bytes())?;
        Ok(path)
    };
    written.push(write("episodes.csv".into(), episodes_csv(log))?);
    written.push(write("sr_curves.csv".into(), sr_curves_csv(log))?);
    written.push(write("diagnostics.csv".into(), diagnostics_csv(log))?);
    for (bucket, bins) in &log.dominance {
        written.push(write(format!("dominance_{bucket}.csv"), dominance_csv(bins))?);
    }
    written.push(write("sr_curve.svg".into(), sr_curve_svg(log))?);
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn record(agent: usize, idx: usize, success: bool, via: bool, steps: u32) -> EpisodeRecord {
        EpisodeRecord {
            agent_id: agent,
            episode_index: idx,
            success,
            via_corridor: via,
            steps,
            return_ext: if success { 1.0 } else { 0.0 },
        }
    }

    fn log_with(records: Vec<EpisodeRecord>) -> MetricsLog {
        let mut log = MetricsLog::new(500);
        for r in records {
            log.push_record(r);
        }
        log
    }

    #[test]
    fn hundred_successes_give_unit_rate() {
        let log = log_with((0..100).map(|i| record(0, i, true, false, 10)).collect());
        let sr = success_rate_window(&log, 0, 100, false).unwrap();
        assert_eq!(sr[99], 1.0);
    }

    #[test]
    fn alternating_outcomes_settle_at_one_half() {
        let log = log_with((0..200).map(|i| record(0, i, i % 2 == 0, false, 10)).collect());
        let sr = success_rate_window(&log, 0, 100, false).unwrap();
        assert_eq!(sr[199], 0.5);
    }

    #[test]
    fn prefix_uses_partial_mean() {
        let log = log_with(vec![
            record(0, 0, true, false, 5),
            record(0, 1, false, false, 5),
            record(0, 2, true, false, 5),
        ]);
        let sr = success_rate_window(&log, 0, 100, false).unwrap();
        assert_eq!(sr, vec![1.0, 0.5, 2.0 / 3.0]);
    }

    #[test]
    fn corridor_only_counts_corridor_successes() {
        let log = log_with(vec![
            record(0, 0, true, false, 5),
            record(0, 1, true, true, 5),
        ]);
        let sr = success_rate_window(&log, 0, 2, true).unwrap();
        assert_eq!(sr[1], 0.5);
    }

    #[test]
    fn unknown_agent_is_an_error() {
        let log = log_with(vec![record(0, 0, true, false, 5)]);
        assert!(matches!(
            success_rate_window(&log, 7, 100, false),
            Err(MetricsError::UnknownAgent(7))
        ));
    }

    #[test]
    fn threshold_scan_finds_first_crossing() {
        let series: Vec<f64> = (0..200).map(|i| i as f64 / 199.0).collect();
        let idx = episodes_to_threshold(&series, 0.9).unwrap();
        assert!(series[idx] >= 0.9);
        assert!(series[idx - 1] < 0.9);
        assert_eq!(episodes_to_threshold(&[0.0, 0.5, 0.8], 0.9), None);
        assert_eq!(episodes_to_threshold(&[0.3, 0.5], 0.0), Some(0));
    }

    #[test]
    fn steps_summary_uses_only_successes() {
        let log = log_with(vec![
            record(0, 0, true, false, 40),
            record(0, 1, false, false, 600),
            record(0, 2, true, false, 40),
        ]);
        let (mean, std) = steps_summary(&log, 0, 100).unwrap();
        assert_eq!(mean, 40.0);
        assert_eq!(std, 0.0);
    }

    #[test]
    fn steps_summary_without_successes_is_an_error() {
        let log = log_with(vec![record(0, 0, false, false, 600)]);
        assert!(matches!(
            steps_summary(&log, 0, 100),
            Err(MetricsError::NoSuccessfulEpisodes)
        ));
    }

    #[test]
    fn steps_summary_matches_hand_filter() {
        let log = log_with(vec![
            record(0, 0, true, false, 10),
            record(0, 1, true, false, 20),
            record(0, 2, false, false, 99),
            record(0, 3, true, false, 30),
        ]);
        let (mean, std) = steps_summary(&log, 0, 3).unwrap();
        // Last 3 records: steps 20 and 30 succeed.
        assert_eq!(mean, 25.0);
        assert_eq!(std, 5.0);
    }

    #[test]
    fn dominance_counters_match_a_recount() {
        let mut log = MetricsLog::new(500);
        let samples = vec![
            DominanceSample { bin: (1, 2), episode_index: 10, ext_dominant: true },
            DominanceSample { bin: (1, 2), episode_index: 20, ext_dominant: false },
            DominanceSample { bin: (1, 2), episode_index: 600, ext_dominant: true },
            DominanceSample { bin: (3, 3), episode_index: 20, ext_dominant: true },
        ];
        log.record_dominance(&samples);
        let b0 = &log.dominance_buckets()[&0];
        assert_eq!(b0[&(1, 2)], (1, 1));
        assert_eq!(b0[&(3, 3)], (1, 0));
        let b1 = &log.dominance_buckets()[&1];
        assert_eq!(b1[&(1, 2)], (1, 0));
    }

    #[test]
    fn empty_log_exports_header_only_csvs() {
        let dir = tempfile::tempdir().unwrap();
        let log = MetricsLog::new(500);
        export(&log, dir.path()).unwrap();
        let episodes = std::fs::read_to_string(dir.path().join("episodes.csv")).unwrap();
        assert_eq!(episodes, format!("{EPISODES_HEADER}\n"));
        let diag = std::fs::read_to_string(dir.path().join("diagnostics.csv")).unwrap();
        assert_eq!(diag, format!("{DIAGNOSTICS_HEADER}\n"));
    }

    #[test]
    fn episodes_csv_round_trips() {
        let log = log_with(vec![
            record(0, 0, true, false, 40),
            record(1, 0, false, false, 600),
            record(0, 1, true, true, 30),
        ]);
        let text = episodes_csv(&log);
        let parsed = parse_episodes_csv(&text).unwrap();
        assert_eq!(parsed, log.records);
    }

    #[test]
    fn episodes_csv_matches_golden_bytes() {
        let log = log_with(vec![
            record(0, 0, true, false, 40),
            record(1, 0, false, false, 600),
            record(0, 1, true, true, 30),
        ]);
        let expected = "agent_id,episode_index,success,via_corridor,steps,return_ext\n\
                        0,0,true,false,40,1.0000000000000000e0\n\
                        1,0,false,false,600,0.0000000000000000e0\n\
                        0,1,true,true,30,1.0000000000000000e0\n";
        assert_eq!(episodes_csv(&log), expected);
    }

    #[test]
    fn svg_contains_a_polyline_per_agent() {
        let mut records = Vec::new();
        for i in 0..50 {
            records.push(record(0, i, i % 2 == 0, false, 10));
            records.push(record(1, i, i % 3 == 0, false, 10));
        }
        let log = log_with(records);
        let svg = sr_curve_svg(&log);
        assert!(svg.starts_with("<svg"));
        assert!(svg.matches("<polyline").count() >= 2);
        assert!(svg.contains("agent 0"));
        assert!(svg.contains("agent 1"));
    }

    proptest! {
        #[test]
        fn window_matches_naive_recomputation(
            outcomes in proptest::collection::vec(proptest::bool::ANY, 1..300),
            window in 1usize..120,
        ) {
            let log = log_with(
                outcomes
                    .iter()
                    .enumerate()
                    .map(|(i, &s)| record(0, i, s, false, 10))
                    .collect(),
            );
            let sr = success_rate_window(&log, 0, window, false).unwrap();
            for i in 0..outcomes.len() {
                let from = (i + 1).saturating_sub(window);
                let slice = &outcomes[from..=i];
                let naive =
                    slice.iter().filter(|&&s| s).count() as f64 / slice.len() as f64;
                prop_assert!((sr[i] - naive).abs() < 1e-12);
            }
        }

        #[test]
        fn csv_round_trip_identity(
            n in 1usize..40,
            seed in 0u64..1000,
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut log = MetricsLog::new(500);
            for i in 0..n {
                log.push_record(EpisodeRecord {
                    agent_id: rng.random_range(0..2),
                    episode_index: i,
                    success: rng.random(),
                    via_corridor: rng.random(),
                    steps: rng.random_range(1..=600),
                    return_ext: rng.random::<f64>(),
                });
            }
            let parsed = parse_episodes_csv(&episodes_csv(&log)).unwrap();
            prop_assert_eq!(parsed, log.records);
        }
    }
}
