//! Experiment orchestration: runner scheduling, rollout collection, count
//! updates, curiosity schedules and the full training loop.
//!
//! Execution is single-threaded and fully deterministic for a given
//! (config, seed): runners are scheduled round-robin (interleaving the
//! agents), each collected rollout updates the count tables, normalizes its
//! intrinsic rewards and trains the collector's actor plus the (shared or
//! per-agent) critic before the next runner collects. All mutation happens in
//! this serialized update phase; collection itself only reads frozen
//! parameter and table snapshots, so runners could collect concurrently.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use ndarray::Array1;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::config::ResolvedExperiment;
use crate::curiosity::{
    intrinsic_reward, normalize_intrinsic, update_counts, CountTable, CuriosityError, Experience,
    IntrinsicNormalizer, KeyMode,
};
use crate::env::{self, EnvState, GridMap, StepError};
use crate::metrics::{DiagnosticsRow, EpisodeRecord, MetricsLog};
use crate::nn::{forward_critic, forward_policy, save_checkpoint, AdamState, Mlp, NnError};
use crate::ppo::{train_on_rollout, value_from_q, PpoError, Rollout, RolloutStep};
use crate::skills::SkillProfile;

/// Fixed on-policy segment length.
pub const ROLLOUT_LEN: usize = 50;

const ACTOR_HIDDEN: [usize; 2] = [64, 64];

#[derive(Debug, Error)]
pub enum TrainerError {
    #[error(transparent)]
    Ppo(#[from] PpoError),
    #[error(transparent)]
    Curiosity(#[from] CuriosityError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Env(#[from] StepError),
    #[error("artifact export failed: {0}")]
    Io(#[from] std::io::Error),
}

/// One environment instance owned by a single agent.
#[derive(Debug, Clone)]
pub struct Runner {
    /// Position of the owning agent in the profile list.
    pub agent_pos: usize,
    state: EnvState,
    obs: Array1<f64>,
    rng: ChaCha8Rng,
    return_ext: f64,
}

/// All mutable experiment state: one actor per agent, one critic per agent or
/// one shared critic, per-agent count tables and normalizers, and the
/// runners.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub actors: Vec<Mlp>,
    pub actor_opts: Vec<AdamState>,
    pub critics: Vec<Mlp>,
    pub critic_opts: Vec<AdamState>,
    pub tables: Vec<CountTable>,
    pub normalizers: Vec<IntrinsicNormalizer>,
    pub runners: Vec<Runner>,
    /// Completed episodes per agent, pooled over that agent's runners.
    pub episodes_done: Vec<usize>,
    pub total_env_steps: Vec<u64>,
    pub completed_episode_steps: Vec<u64>,
    pub update_count: usize,
}

fn derive_seed(seed: u64, stream: u64) -> u64 {
    seed.wrapping_add(stream.wrapping_mul(0x9E3779B97F4A7C15))
}

/// Builds seeded networks, empty tables and reset runners for the configured
/// mode.
pub fn build_experiment(resolved: &ResolvedExperiment) -> Result<TrainState, TrainerError> {
    let cfg = &resolved.config;
    let map = &resolved.map;
    let n_agents = resolved.profiles.len();
    let obs_dim = map.width() + map.height() + 5;
    let critic_in = obs_dim + n_agents;
    let critic_out = 2 * resolved.universe.len();

    let mut actors = Vec::with_capacity(n_agents);
    let mut actor_opts = Vec::with_capacity(n_agents);
    for (i, profile) in resolved.profiles.iter().enumerate() {
        let sizes = [obs_dim, ACTOR_HIDDEN[0], ACTOR_HIDDEN[1], profile.len()];
        let actor = Mlp::orthogonal(&sizes, derive_seed(cfg.seed, 1000 + i as u64))?;
        actor_opts.push(AdamState::new(&actor, cfg.ppo.lr));
        actors.push(actor);
    }

    let critic_count = if cfg.mode.centralized_critic() { 1 } else { n_agents };
    let mut critics = Vec::with_capacity(critic_count);
    let mut critic_opts = Vec::with_capacity(critic_count);
    for j in 0..critic_count {
        let sizes = [critic_in, ACTOR_HIDDEN[0], ACTOR_HIDDEN[1], critic_out];
        let critic = Mlp::orthogonal(&sizes, derive_seed(cfg.seed, 2000 + j as u64))?;
        critic_opts.push(AdamState::new(&critic, cfg.ppo.lr));
        critics.push(critic);
    }

    let tables = resolved.profiles.iter().map(|p| CountTable::new(p.agent_id)).collect();
    let normalizers = (0..n_agents).map(|_| IntrinsicNormalizer::new(cfg.ppo.gamma)).collect();

    // Interleave agents so their experience reaches the shared critic at a
    // fixed ratio: a0r0, a1r0, ..., a0r1, a1r1, ...
    let mut runners = Vec::with_capacity(n_agents * cfg.runners_per_agent);
    for slot in 0..cfg.runners_per_agent {
        for agent_pos in 0..n_agents {
            let (state, obs) = env::reset(map);
            runners.push(Runner {
                agent_pos,
                state,
                obs,
                rng: ChaCha8Rng::seed_from_u64(derive_seed(
                    cfg.seed,
                    3000 + (slot * n_agents + agent_pos) as u64,
                )),
                return_ext: 0.0,
            });
        }
    }

    Ok(TrainState {
        actors,
        actor_opts,
        critics,
        critic_opts,
        tables,
        normalizers,
        runners,
        episodes_done: vec![0; n_agents],
        total_env_steps: vec![0; n_agents],
        completed_episode_steps: vec![0; n_agents],
        update_count: 0,
    })
}

fn sample_index(probs: &Array1<f64>, rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

struct CollectArgs<'a> {
    actor: &'a Mlp,
    critic: &'a Mlp,
    table: &'a CountTable,
    profile: &'a SkillProfile,
    map: &'a GridMap,
    skill_onehot: Array1<f64>,
    key_mode: KeyMode,
    max_steps: u32,
    episode_base: usize,
}

/// Collects exactly `ROLLOUT_LEN` steps with frozen actor/critic/table
/// snapshots. Episodes continue across rollouts; finished episodes reset
/// inline and are returned as records. Raw intrinsic rewards come from the
/// collector's table as it stood before this rollout.
fn collect_rollout(
    runner: &mut Runner,
    universe: &crate::skills::ActionUniverse,
    args: &CollectArgs,
) -> Result<(Rollout, Vec<EpisodeRecord>), TrainerError> {
    let mut steps = Vec::with_capacity(ROLLOUT_LEN);
    let mut records = Vec::new();
    let mut completed = 0usize;
    for _ in 0..ROLLOUT_LEN {
        let obs = runner.obs.clone();
        let policy = forward_policy(args.actor, obs.view())?;
        let action_idx = sample_index(&policy.probs, &mut runner.rng);
        let action = args.profile.actions()[action_idx];
        let critic_out = forward_critic(args.critic, obs.view(), args.skill_onehot.view())?;
        let outcome = env::step(&mut runner.state, args.map, action, args.max_steps)?;
        runner.return_ext += outcome.reward_ext;

        let experience = Experience {
            bin: outcome.info.bin,
            action,
        };
        let reward_int = intrinsic_reward(args.table, &experience.key(args.key_mode));

        steps.push(RolloutStep {
            obs,
            action,
            action_idx,
            log_prob_old: policy.probs[action_idx].ln(),
            reward_ext: outcome.reward_ext,
            reward_int,
            q_ext_row: critic_out.q_ext,
            q_int_row: critic_out.q_int,
            policy_probs: policy.probs,
            done: outcome.done,
            bin: outcome.info.bin,
            episode_index: args.episode_base + completed,
        });

        if outcome.done {
            records.push(EpisodeRecord {
                agent_id: args.profile.agent_id,
                episode_index: args.episode_base + completed,
                success: outcome.reward_ext > 0.0,
                via_corridor: outcome.info.via_corridor_so_far,
                steps: runner.state.step_count,
                return_ext: runner.return_ext,
            });
            completed += 1;
            let (state, obs) = env::reset(args.map);
            runner.state = state;
            runner.obs = obs;
            runner.return_ext = 0.0;
        } else {
            runner.obs = outcome.observation;
        }
    }

    // Bootstrap values of the state after the last step, per Eq.-9 reduction.
    let policy = forward_policy(args.actor, runner.obs.view())?;
    let critic_out = forward_critic(args.critic, runner.obs.view(), args.skill_onehot.view())?;
    let bootstrap_ext =
        value_from_q(policy.probs.view(), critic_out.q_ext.view(), args.profile, universe)?;
    let bootstrap_int =
        value_from_q(policy.probs.view(), critic_out.q_int.view(), args.profile, universe)?;

    Ok((
        Rollout {
            agent_id: args.profile.agent_id,
            skill_onehot: args.skill_onehot.clone(),
            steps,
            bootstrap_ext,
            bootstrap_int,
        },
        records,
    ))
}

/// Runs the configured experiment to its episode budget and returns the
/// metrics log plus the final state (networks and count tables).
pub fn run_experiment(resolved: &ResolvedExperiment) -> Result<(MetricsLog, TrainState), TrainerError> {
    let mut state = build_experiment(resolved)?;
    let log = run_to_budget(resolved, &mut state)?;
    Ok((log, state))
}

/// The training loop on an already-built state.
pub fn run_to_budget(
    resolved: &ResolvedExperiment,
    state: &mut TrainState,
) -> Result<MetricsLog, TrainerError> {
    let cfg = &resolved.config;
    let n_agents = resolved.profiles.len();
    let mut log = MetricsLog::new(cfg.dominance_bucket_episodes);

    loop {
        let mut progressed = false;
        for r_idx in 0..state.runners.len() {
            let agent_pos = state.runners[r_idx].agent_pos;
            if state.episodes_done[agent_pos] >= cfg.episodes {
                continue;
            }
            progressed = true;

            let profile = &resolved.profiles[agent_pos];
            let critic_idx = if cfg.mode.centralized_critic() { 0 } else { agent_pos };
            let episode_base = state.episodes_done[agent_pos];
            let mut skill_onehot = Array1::zeros(n_agents);
            skill_onehot[agent_pos] = 1.0;

            let (mut rollout, records) = {
                let args = CollectArgs {
                    actor: &state.actors[agent_pos],
                    critic: &state.critics[critic_idx],
                    table: &state.tables[agent_pos],
                    profile,
                    map: &resolved.map,
                    skill_onehot,
                    key_mode: resolved.curiosity.key_mode,
                    max_steps: cfg.max_steps_per_episode,
                    episode_base,
                };
                collect_rollout(&mut state.runners[r_idx], &resolved.universe, &args)?
            };

            state.total_env_steps[agent_pos] += ROLLOUT_LEN as u64;
            state.episodes_done[agent_pos] += records.len();
            for record in &records {
                state.completed_episode_steps[agent_pos] += record.steps as u64;
                log.push_record(record.clone());
            }

            let experiences: Vec<Experience> = rollout
                .steps
                .iter()
                .map(|s| Experience {
                    bin: s.bin,
                    action: s.action,
                })
                .collect();
            update_counts(
                &experiences,
                profile,
                &resolved.mutual,
                &mut state.tables,
                &resolved.curiosity,
            )?;

            if resolved.curiosity.normalize {
                let raw: Vec<f64> = rollout.steps.iter().map(|s| s.reward_int).collect();
                let normalized = normalize_intrinsic(&raw, &mut state.normalizers[agent_pos]);
                for (step, r) in rollout.steps.iter_mut().zip(normalized) {
                    step.reward_int = r;
                }
            }

            let beta = match cfg.curiosity_cutoff_episode {
                Some(cutoff) if episode_base >= cutoff => 0.0,
                _ => cfg.beta,
            };

            let diag = train_on_rollout(
                &rollout,
                &mut state.actors[agent_pos],
                &mut state.actor_opts[agent_pos],
                &mut state.critics[critic_idx],
                &mut state.critic_opts[critic_idx],
                profile,
                &resolved.universe,
                &cfg.ppo,
                beta,
            )?;
            log.record_dominance(&diag.dominance);
            log.push_diagnostics(DiagnosticsRow {
                update_index: state.update_count,
                agent_id: profile.agent_id,
                episode_index: episode_base,
                beta,
                mean_ratio: diag.mean_ratio,
                clip_fraction: diag.clip_fraction,
                mean_entropy: diag.mean_entropy,
                policy_loss: diag.policy_loss,
                critic_loss: diag.critic_loss,
                mean_abs_adv_ext: diag.mean_abs_adv_ext,
                mean_abs_adv_int_scaled: diag.mean_abs_adv_int_scaled,
            });
            state.update_count += 1;
        }
        if !progressed {
            break;
        }
    }
    Ok(log)
}

/// Success statistics of a uniform-random policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ProbeStats {
    pub episodes: usize,
    pub successes: usize,
    pub corridor_successes: usize,
}

impl ProbeStats {
    pub fn success_rate(&self) -> f64 {
        self.successes as f64 / self.episodes as f64
    }
}

/// Runs `episodes` uniform-random episodes with the profile's action set.
pub fn probe_random(
    map: &GridMap,
    profile: &SkillProfile,
    episodes: usize,
    max_steps: u32,
    seed: u64,
) -> ProbeStats {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut successes = 0;
    let mut corridor_successes = 0;
    for _ in 0..episodes {
        let (mut state, _) = env::reset(map);
        loop {
            let action = profile.actions()[rng.random_range(0..profile.len())];
            let outcome = env::step(&mut state, map, action, max_steps)
                .expect("probe never steps a finished episode");
            if outcome.done {
                if outcome.reward_ext > 0.0 {
                    successes += 1;
                    if outcome.info.via_corridor_so_far {
                        corridor_successes += 1;
                    }
                }
                break;
            }
        }
    }
    ProbeStats {
        episodes,
        successes,
        corridor_successes,
    }
}

/// Writes final actor/critic checkpoints and per-agent count tables.
pub fn export_artifacts(
    state: &TrainState,
    resolved: &ResolvedExperiment,
    out_dir: &Path,
) -> Result<Vec<PathBuf>, TrainerError> {
    std::fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();
    for (i, profile) in resolved.profiles.iter().enumerate() {
        let path = out_dir.join(format!("actor_{}.mlp", profile.agent_id));
        let mut file = std::fs::File::create(&path)?;
        save_checkpoint(&state.actors[i], &mut file)?;
        written.push(path);

        let path = out_dir.join(format!("counts_agent{}.csv", profile.agent_id));
        let mut file = std::fs::File::create(&path)?;
        state.tables[i].write_csv(&mut file)?;
        written.push(path);
    }
    for (j, critic) in state.critics.iter().enumerate() {
        let path = out_dir.join(format!("critic_{j}.mlp"));
        let mut file = std::fs::File::create(&path)?;
        save_checkpoint(critic, &mut file)?;
        written.push(path);
    }
    let mut summary = std::fs::File::create(out_dir.join("run_summary.txt"))?;
    writeln!(summary, "mode {}", resolved.config.mode.name())?;
    writeln!(summary, "seed {}", resolved.config.seed)?;
    for (i, profile) in resolved.profiles.iter().enumerate() {
        writeln!(
            summary,
            "agent {} episodes {} env_steps {}",
            profile.agent_id, state.episodes_done[i], state.total_env_steps[i]
        )?;
    }
    written.push(out_dir.join("run_summary.txt"));
    Ok(written)
}
