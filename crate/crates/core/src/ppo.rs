//! On-policy optimization: per-stream GAE, advantage mixing, the clipped
//! surrogate with entropy bonus, and the Q-to-V reduction for the
//! skill-conditioned critic.
//!
//! The critic predicts `Q(s,a)` over the union action space in two heads
//! (extrinsic / intrinsic). State values are recovered per agent as
//! `V_x(s) = sum over a in A_x of pi_x(a|s) * Q(s,a)`, so entries for actions
//! outside an agent's set never contribute. Advantages are estimated per
//! stream with GAE and combined as `A_ext + beta * A_int`.

use ndarray::{Array1, ArrayView1};
use serde::Deserialize;
use thiserror::Error;

use crate::nn::{softmax, AdamState, Mlp, MlpGrads, NnError};
use crate::skills::{Action, ActionUniverse, SkillProfile};

#[derive(Debug, Error, PartialEq)]
pub enum PpoError {
    #[error("policy/critic output width does not match the action indexing")]
    IndexMismatch,
    #[error("input sequences have mismatched lengths")]
    LengthMismatch,
    #[error("non-finite value in loss computation")]
    NonFinite,
    #[error(transparent)]
    Nn(#[from] NnError),
}

fn default_clip_eps() -> f64 {
    0.2
}
fn default_entropy_coef() -> f64 {
    0.01
}
fn default_epochs() -> usize {
    4
}
fn default_gamma() -> f64 {
    0.99
}
fn default_gae_lambda() -> f64 {
    0.95
}
fn default_lr() -> f64 {
    1e-4
}
fn default_true() -> bool {
    true
}

/// PPO hyperparameters. Defaults: clip 0.2, entropy 0.01, 4 epochs,
/// gamma 0.99 for both streams, GAE lambda 0.95, lr 1e-4.
#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PpoConfig {
    pub clip_eps: f64,
    pub entropy_coef: f64,
    pub epochs: usize,
    pub gamma: f64,
    pub gae_lambda: f64,
    pub lr: f64,
    /// Mean/std-normalize each advantage stream per rollout before mixing.
    pub normalize_advantages: bool,
    /// Ignore episode boundaries in the intrinsic stream (off: intrinsic is
    /// episodic like the extrinsic stream).
    pub nonepisodic_intrinsic: bool,
    /// Global-norm gradient clipping; `None` disables it.
    pub max_grad_norm: Option<f64>,
}

impl Default for PpoConfig {
    fn default() -> Self {
        PpoConfig {
            clip_eps: default_clip_eps(),
            entropy_coef: default_entropy_coef(),
            epochs: default_epochs(),
            gamma: default_gamma(),
            gae_lambda: default_gae_lambda(),
            lr: default_lr(),
            normalize_advantages: default_true(),
            nonepisodic_intrinsic: false,
            max_grad_norm: None,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            return Err(format!("clip_eps must be in (0,1), got {}", self.clip_eps));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(format!("gamma must be in (0,1], got {}", self.gamma));
        }
        if self.epochs == 0 {
            return Err("epochs must be at least 1".into());
        }
        Ok(())
    }
}

/// One step of a fixed-length on-policy segment, with everything the update
/// needs frozen at collection time.
#[derive(Debug, Clone)]
pub struct RolloutStep {
    pub obs: Array1<f64>,
    pub action: Action,
    /// Index of `action` within the collector's profile ordering.
    pub action_idx: usize,
    pub log_prob_old: f64,
    pub reward_ext: f64,
    pub reward_int: f64,
    pub q_ext_row: Array1<f64>,
    pub q_int_row: Array1<f64>,
    /// Behavior-policy probabilities over the collector's action set.
    pub policy_probs: Array1<f64>,
    pub done: bool,
    /// Position bin after this transition; key for counting and dominance.
    pub bin: (usize, usize),
    /// Global episode index of the collector when this step was taken.
    pub episode_index: usize,
}

/// Fixed-length trajectory segment collected by one runner. Episodes may end
/// and restart inside a rollout; `done` flags mark the boundaries.
#[derive(Debug, Clone)]
pub struct Rollout {
    pub agent_id: usize,
    pub skill_onehot: Array1<f64>,
    pub steps: Vec<RolloutStep>,
    /// Eq.-9-style state values of the state after the last step, used for
    /// bootstrapping when the rollout ends mid-episode.
    pub bootstrap_ext: f64,
    pub bootstrap_int: f64,
}

/// `V_x(s)`: expected Q under the agent's own policy, iterating only over the
/// actions available to this agent.
pub fn value_from_q(
    policy_probs: ArrayView1<f64>,
    q_row: ArrayView1<f64>,
    profile: &SkillProfile,
    universe: &ActionUniverse,
) -> Result<f64, PpoError> {
    if policy_probs.len() != profile.len() || q_row.len() != universe.len() {
        return Err(PpoError::IndexMismatch);
    }
    let mut v = 0.0;
    for (i, &action) in profile.actions().iter().enumerate() {
        let u = universe.index_of(action).ok_or(PpoError::IndexMismatch)?;
        v += policy_probs[i] * q_row[u];
    }
    Ok(v)
}

/// Generalized advantage estimation with terminal masking.
///
/// `values` holds `T+1` entries including the bootstrap value of the state
/// after the last step. Done flags cut both the TD bootstrap and the
/// `(gamma*lambda)` recursion. Returns advantages and value targets (`A + V`).
pub fn gae(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    gamma: f64,
    lambda: f64,
) -> Result<(Vec<f64>, Vec<f64>), PpoError> {
    let t_len = rewards.len();
    if values.len() != t_len + 1 || dones.len() != t_len {
        return Err(PpoError::LengthMismatch);
    }
    let mut advantages = vec![0.0; t_len];
    let mut running = 0.0;
    for t in (0..t_len).rev() {
        let cont = if dones[t] { 0.0 } else { 1.0 };
        let delta = rewards[t] + gamma * values[t + 1] * cont - values[t];
        running = delta + gamma * lambda * cont * running;
        advantages[t] = running;
    }
    let targets = advantages.iter().zip(values.iter()).map(|(a, v)| a + v).collect();
    Ok((advantages, targets))
}

fn normalize_stream(xs: &[f64]) -> Vec<f64> {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let std = var.sqrt() + 1e-8;
    xs.iter().map(|x| (x - mean) / std).collect()
}

/// The streams that entered the mix (normalized when requested) and the
/// combined advantage `ext + beta * int`.
#[derive(Debug, Clone)]
pub struct MixedAdvantages {
    pub adv_ext: Vec<f64>,
    pub adv_int: Vec<f64>,
    pub adv_total: Vec<f64>,
}

pub fn mix_advantages(
    adv_ext: &[f64],
    adv_int: &[f64],
    beta: f64,
    normalize: bool,
) -> Result<MixedAdvantages, PpoError> {
    if adv_ext.len() != adv_int.len() {
        return Err(PpoError::LengthMismatch);
    }
    let (ext, int) = if normalize {
        (normalize_stream(adv_ext), normalize_stream(adv_int))
    } else {
        (adv_ext.to_vec(), adv_int.to_vec())
    };
    let total = ext.iter().zip(int.iter()).map(|(e, i)| e + beta * i).collect();
    Ok(MixedAdvantages {
        adv_ext: ext,
        adv_int: int,
        adv_total: total,
    })
}

/// Per-step flags recording which stream dominated the total advantage.
/// Ties count as extrinsic, so `beta = 0` is always extrinsic-dominant.
pub fn dominance_flags(mixed: &MixedAdvantages, beta: f64) -> Vec<bool> {
    mixed
        .adv_ext
        .iter()
        .zip(mixed.adv_int.iter())
        .map(|(e, i)| e.abs() >= (beta * i).abs())
        .collect()
}

/// Advantages, value targets and dominance flags for one rollout, computed
/// from the values frozen at collection time. Value targets always use the
/// raw (unnormalized) advantages so they stay on the Q scale.
#[derive(Debug, Clone)]
pub struct AdvantageBundle {
    pub adv_ext: Vec<f64>,
    pub adv_int: Vec<f64>,
    pub adv_total: Vec<f64>,
    pub v_targets_ext: Vec<f64>,
    pub v_targets_int: Vec<f64>,
    pub ext_dominant: Vec<bool>,
}

pub fn compute_advantages(
    rollout: &Rollout,
    profile: &SkillProfile,
    universe: &ActionUniverse,
    config: &PpoConfig,
    beta: f64,
) -> Result<AdvantageBundle, PpoError> {
    let t_len = rollout.steps.len();
    let mut values_ext = Vec::with_capacity(t_len + 1);
    let mut values_int = Vec::with_capacity(t_len + 1);
    for step in &rollout.steps {
        values_ext.push(value_from_q(
            step.policy_probs.view(),
            step.q_ext_row.view(),
            profile,
            universe,
        )?);
        values_int.push(value_from_q(
            step.policy_probs.view(),
            step.q_int_row.view(),
            profile,
            universe,
        )?);
    }
    values_ext.push(rollout.bootstrap_ext);
    values_int.push(rollout.bootstrap_int);

    let rewards_ext: Vec<f64> = rollout.steps.iter().map(|s| s.reward_ext).collect();
    let rewards_int: Vec<f64> = rollout.steps.iter().map(|s| s.reward_int).collect();
    let dones: Vec<bool> = rollout.steps.iter().map(|s| s.done).collect();
    let dones_int: Vec<bool> = if config.nonepisodic_intrinsic {
        vec![false; t_len]
    } else {
        dones.clone()
    };

    let (adv_ext, v_targets_ext) =
        gae(&rewards_ext, &values_ext, &dones, config.gamma, config.gae_lambda)?;
    let (adv_int, v_targets_int) =
        gae(&rewards_int, &values_int, &dones_int, config.gamma, config.gae_lambda)?;

    let mixed = mix_advantages(&adv_ext, &adv_int, beta, config.normalize_advantages)?;
    let ext_dominant = dominance_flags(&mixed, beta);
    Ok(AdvantageBundle {
        adv_ext: mixed.adv_ext,
        adv_int: mixed.adv_int,
        adv_total: mixed.adv_total,
        v_targets_ext,
        v_targets_int,
        ext_dominant,
    })
}

#[derive(Debug, Clone, Copy)]
pub struct PolicyLossStats {
    pub loss: f64,
    pub mean_ratio: f64,
    pub clip_fraction: f64,
    pub mean_entropy: f64,
}

fn clipped_surrogate(ratio: f64, adv: f64, clip_eps: f64) -> f64 {
    let unclipped = ratio * adv;
    let clipped = ratio.clamp(1.0 - clip_eps, 1.0 + clip_eps) * adv;
    unclipped.min(clipped)
}

/// Clipped-surrogate policy loss with entropy bonus:
/// `-mean(min(r*A, clip(r)*A)) - entropy_coef * mean(H)`.
pub fn ppo_policy_loss(
    log_prob_new: &[f64],
    log_prob_old: &[f64],
    adv_total: &[f64],
    clip_eps: f64,
    entropy: &[f64],
    entropy_coef: f64,
) -> Result<PolicyLossStats, PpoError> {
    let t_len = log_prob_new.len();
    if log_prob_old.len() != t_len || adv_total.len() != t_len || entropy.len() != t_len {
        return Err(PpoError::LengthMismatch);
    }
    let mut surrogate = 0.0;
    let mut ratio_sum = 0.0;
    let mut clipped_count = 0usize;
    for t in 0..t_len {
        let ratio = (log_prob_new[t] - log_prob_old[t]).exp();
        surrogate += clipped_surrogate(ratio, adv_total[t], clip_eps);
        ratio_sum += ratio;
        if (ratio - 1.0).abs() > clip_eps {
            clipped_count += 1;
        }
    }
    let n = t_len as f64;
    let mean_entropy = entropy.iter().sum::<f64>() / n;
    let loss = -surrogate / n - entropy_coef * mean_entropy;
    if !loss.is_finite() {
        return Err(PpoError::NonFinite);
    }
    Ok(PolicyLossStats {
        loss,
        mean_ratio: ratio_sum / n,
        clip_fraction: clipped_count as f64 / n,
        mean_entropy,
    })
}

/// MSE of both critic heads at the taken actions only; all other head entries
/// carry no gradient.
pub fn critic_loss(
    q_ext_rows: &[Array1<f64>],
    q_int_rows: &[Array1<f64>],
    actions_taken: &[usize],
    v_targets_ext: &[f64],
    v_targets_int: &[f64],
) -> Result<f64, PpoError> {
    let t_len = actions_taken.len();
    if q_ext_rows.len() != t_len
        || q_int_rows.len() != t_len
        || v_targets_ext.len() != t_len
        || v_targets_int.len() != t_len
    {
        return Err(PpoError::LengthMismatch);
    }
    let mut loss = 0.0;
    for t in 0..t_len {
        let a = actions_taken[t];
        if a >= q_ext_rows[t].len() || a >= q_int_rows[t].len() {
            return Err(PpoError::IndexMismatch);
        }
        let de = q_ext_rows[t][a] - v_targets_ext[t];
        let di = q_int_rows[t][a] - v_targets_int[t];
        loss += de * de + di * di;
    }
    let loss = loss / t_len as f64;
    if !loss.is_finite() {
        return Err(PpoError::NonFinite);
    }
    Ok(loss)
}

/// One per-step sample for the advantage-dominance maps.
#[derive(Debug, Clone, Copy)]
pub struct DominanceSample {
    pub bin: (usize, usize),
    pub episode_index: usize,
    pub ext_dominant: bool,
}

/// Diagnostics of one `train_on_rollout` call. Ratio/clip/entropy values come
/// from the last optimization epoch.
#[derive(Debug, Clone)]
pub struct TrainDiagnostics {
    pub mean_ratio: f64,
    pub clip_fraction: f64,
    pub mean_entropy: f64,
    pub policy_loss: f64,
    pub critic_loss: f64,
    pub mean_abs_adv_ext: f64,
    pub mean_abs_adv_int_scaled: f64,
    pub dominance: Vec<DominanceSample>,
}

fn clip_gradients(grads: &mut MlpGrads, max_norm: Option<f64>) {
    if let Some(max) = max_norm {
        let norm = grads.global_norm();
        if norm > max {
            grads.scale(max / norm);
        }
    }
}

/// Runs the fixed number of full-batch PPO epochs on one rollout, updating
/// the collector's actor and the (possibly shared) critic in place.
/// Advantages and value targets are computed once from the collection-time
/// snapshot; intrinsic rewards are expected to be normalized already.
#[allow(clippy::too_many_arguments)]
pub fn train_on_rollout(
    rollout: &Rollout,
    actor: &mut Mlp,
    actor_opt: &mut AdamState,
    critic: &mut Mlp,
    critic_opt: &mut AdamState,
    profile: &SkillProfile,
    universe: &ActionUniverse,
    config: &PpoConfig,
    beta: f64,
) -> Result<TrainDiagnostics, PpoError> {
    let t_len = rollout.steps.len();
    if t_len == 0 {
        return Err(PpoError::LengthMismatch);
    }
    let bundle = compute_advantages(rollout, profile, universe, config, beta)?;

    let taken_union: Vec<usize> = rollout
        .steps
        .iter()
        .map(|s| universe.index_of(s.action).ok_or(PpoError::IndexMismatch))
        .collect::<Result<_, _>>()?;
    let log_prob_old: Vec<f64> = rollout.steps.iter().map(|s| s.log_prob_old).collect();
    let union_width = universe.len();
    let critic_inputs: Vec<Array1<f64>> = rollout
        .steps
        .iter()
        .map(|s| {
            let mut input = Array1::zeros(s.obs.len() + rollout.skill_onehot.len());
            input.slice_mut(ndarray::s![..s.obs.len()]).assign(&s.obs);
            input
                .slice_mut(ndarray::s![s.obs.len()..])
                .assign(&rollout.skill_onehot);
            input
        })
        .collect();

    let n = t_len as f64;
    let mut actor_grads = MlpGrads::zeros_like(actor);
    let mut critic_grads = MlpGrads::zeros_like(critic);
    let mut policy_stats = PolicyLossStats {
        loss: 0.0,
        mean_ratio: 1.0,
        clip_fraction: 0.0,
        mean_entropy: 0.0,
    };
    let mut critic_loss_value = 0.0;

    for _epoch in 0..config.epochs {
        // Actor pass.
        actor_grads.fill_zero();
        let mut log_prob_new = Vec::with_capacity(t_len);
        let mut entropies = Vec::with_capacity(t_len);
        let mut traces = Vec::with_capacity(t_len);
        let mut probs_all = Vec::with_capacity(t_len);
        for step in &rollout.steps {
            let (logits, trace) = actor.forward_trace(step.obs.view())?;
            let probs = softmax(logits.view());
            let lp = probs[step.action_idx].ln();
            let entropy = -probs.iter().map(|&p| p * p.ln()).sum::<f64>();
            log_prob_new.push(lp);
            entropies.push(entropy);
            traces.push(trace);
            probs_all.push(probs);
        }
        policy_stats = ppo_policy_loss(
            &log_prob_new,
            &log_prob_old,
            &bundle.adv_total,
            config.clip_eps,
            &entropies,
            config.entropy_coef,
        )?;

        for t in 0..t_len {
            let ratio = (log_prob_new[t] - log_prob_old[t]).exp();
            let adv = bundle.adv_total[t];
            let unclipped = ratio * adv;
            let clipped = ratio.clamp(1.0 - config.clip_eps, 1.0 + config.clip_eps) * adv;
            // The surrogate only carries gradient on the unclipped branch.
            let dsurr_dlp = if unclipped <= clipped { ratio * adv } else { 0.0 };
            let probs = &probs_all[t];
            let entropy = entropies[t];
            let a_idx = rollout.steps[t].action_idx;
            let mut grad_logits = Array1::zeros(probs.len());
            for j in 0..probs.len() {
                let indicator = if j == a_idx { 1.0 } else { 0.0 };
                let dlogp = indicator - probs[j];
                let dentropy = -probs[j] * (probs[j].ln() + entropy);
                grad_logits[j] = -(dsurr_dlp * dlogp) / n - config.entropy_coef * dentropy / n;
            }
            actor.backward(&traces[t], grad_logits.view(), &mut actor_grads)?;
        }
        clip_gradients(&mut actor_grads, config.max_grad_norm);
        actor_opt.step(actor, &actor_grads)?;

        // Critic pass.
        critic_grads.fill_zero();
        let mut q_ext_rows = Vec::with_capacity(t_len);
        let mut q_int_rows = Vec::with_capacity(t_len);
        let mut critic_traces = Vec::with_capacity(t_len);
        for input in &critic_inputs {
            let (out, trace) = critic.forward_trace(input.view())?;
            if out.len() != 2 * union_width {
                return Err(PpoError::IndexMismatch);
            }
            q_ext_rows.push(out.slice(ndarray::s![..union_width]).to_owned());
            q_int_rows.push(out.slice(ndarray::s![union_width..]).to_owned());
            critic_traces.push(trace);
        }
        critic_loss_value = critic_loss(
            &q_ext_rows,
            &q_int_rows,
            &taken_union,
            &bundle.v_targets_ext,
            &bundle.v_targets_int,
        )?;
        for t in 0..t_len {
            let a = taken_union[t];
            let mut grad_out = Array1::zeros(2 * union_width);
            grad_out[a] = 2.0 * (q_ext_rows[t][a] - bundle.v_targets_ext[t]) / n;
            grad_out[union_width + a] = 2.0 * (q_int_rows[t][a] - bundle.v_targets_int[t]) / n;
            critic.backward(&critic_traces[t], grad_out.view(), &mut critic_grads)?;
        }
        clip_gradients(&mut critic_grads, config.max_grad_norm);
        critic_opt.step(critic, &critic_grads)?;
    }

    let dominance = rollout
        .steps
        .iter()
        .zip(bundle.ext_dominant.iter())
        .map(|(s, &ext_dominant)| DominanceSample {
            bin: s.bin,
            episode_index: s.episode_index,
            ext_dominant,
        })
        .collect();
    let mean_abs_adv_ext = bundle.adv_ext.iter().map(|a| a.abs()).sum::<f64>() / n;
    let mean_abs_adv_int_scaled =
        bundle.adv_int.iter().map(|a| (beta * a).abs()).sum::<f64>() / n;

    Ok(TrainDiagnostics {
        mean_ratio: policy_stats.mean_ratio,
        clip_fraction: policy_stats.clip_fraction,
        mean_entropy: policy_stats.mean_entropy,
        policy_loss: policy_stats.loss,
        critic_loss: critic_loss_value,
        mean_abs_adv_ext,
        mean_abs_adv_int_scaled,
        dominance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::skills::default_profiles;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn two_agent_setup() -> (Vec<SkillProfile>, ActionUniverse) {
        let profiles = default_profiles();
        let universe = ActionUniverse::from_profiles(&profiles).unwrap();
        (profiles, universe)
    }

    #[test]
    fn value_from_q_averages_under_the_policy() {
        let profile = SkillProfile::new(0, &[Action::Forward, Action::TurnLeft]).unwrap();
        let universe = ActionUniverse::from_profiles(std::slice::from_ref(&profile)).unwrap();
        let probs = array![0.5, 0.5];
        let q = array![1.0, 3.0];
        assert_eq!(value_from_q(probs.view(), q.view(), &profile, &universe).unwrap(), 2.0);

        let deterministic = array![0.0, 1.0];
        assert_eq!(
            value_from_q(deterministic.view(), q.view(), &profile, &universe).unwrap(),
            3.0
        );
    }

    #[test]
    fn value_from_q_ignores_actions_outside_the_profile() {
        let (profiles, universe) = two_agent_setup();
        let w1 = &profiles[1];
        let probs = array![0.4, 0.3, 0.2, 0.1];
        let mut q = array![0.5, -0.25, 1.5, 2.0, 0.0];
        let base = value_from_q(probs.view(), q.view(), w1, &universe).unwrap();
        q[universe.index_of(Action::Open).unwrap()] = 1e9;
        let poisoned = value_from_q(probs.view(), q.view(), w1, &universe).unwrap();
        assert_eq!(base, poisoned);
    }

    #[test]
    fn value_from_q_is_linear_in_q() {
        let (profiles, universe) = two_agent_setup();
        let probs = array![0.25, 0.25, 0.25, 0.25];
        let q = array![1.0, 2.0, 3.0, 4.0, 5.0];
        let v = value_from_q(probs.view(), q.view(), &profiles[1], &universe).unwrap();
        let scaled = q.mapv(|x| 2.0 * x);
        let v2 = value_from_q(probs.view(), scaled.view(), &profiles[1], &universe).unwrap();
        assert_abs_diff_eq!(v2, 2.0 * v, epsilon = 1e-12);
    }

    #[test]
    fn value_from_q_rejects_mismatched_widths() {
        let (profiles, universe) = two_agent_setup();
        let probs = array![0.5, 0.5];
        let q = array![1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(
            value_from_q(probs.view(), q.view(), &profiles[1], &universe),
            Err(PpoError::IndexMismatch)
        );
    }

    #[test]
    fn gae_on_single_terminal_step() {
        let (adv, targets) = gae(&[1.0], &[0.0, 0.0], &[true], 0.99, 0.95).unwrap();
        assert_eq!(adv, vec![1.0]);
        assert_eq!(targets, vec![1.0]);
    }

    #[test]
    fn gae_matches_hand_computed_two_step_example() {
        let (adv, _) = gae(&[0.0, 1.0], &[0.0, 0.0, 0.0], &[false, true], 0.99, 0.95).unwrap();
        assert_abs_diff_eq!(adv[1], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(adv[0], 0.99 * 0.95, epsilon = 1e-12);
    }

    /// O(T^2) GAE definition: truncated sum of discounted TD errors.
    fn gae_oracle(
        rewards: &[f64],
        values: &[f64],
        dones: &[bool],
        gamma: f64,
        lambda: f64,
    ) -> Vec<f64> {
        let t_len = rewards.len();
        let delta: Vec<f64> = (0..t_len)
            .map(|t| {
                let cont = if dones[t] { 0.0 } else { 1.0 };
                rewards[t] + gamma * values[t + 1] * cont - values[t]
            })
            .collect();
        (0..t_len)
            .map(|t| {
                let mut acc = 0.0;
                let mut weight = 1.0;
                for l in t..t_len {
                    acc += weight * delta[l];
                    if dones[l] {
                        break;
                    }
                    weight *= gamma * lambda;
                }
                acc
            })
            .collect()
    }

    #[test]
    fn gae_rejects_mismatched_lengths() {
        assert_eq!(
            gae(&[1.0, 2.0], &[0.0, 0.0], &[false, false], 0.99, 0.95),
            Err(PpoError::LengthMismatch)
        );
    }

    #[test]
    fn mix_without_normalization_is_plain_weighted_sum() {
        let mixed = mix_advantages(&[0.6], &[0.3], 1.0 / 3.0, false).unwrap();
        assert_abs_diff_eq!(mixed.adv_total[0], 0.7, epsilon = 1e-12);
    }

    #[test]
    fn mix_with_beta_zero_reduces_to_extrinsic() {
        let ext = vec![0.4, -0.2, 1.0];
        let int = vec![5.0, -3.0, 2.0];
        let mixed = mix_advantages(&ext, &int, 0.0, false).unwrap();
        assert_eq!(mixed.adv_total, ext);
    }

    #[test]
    fn dominance_flags_match_a_recomputation_and_ties_go_extrinsic() {
        let mixed = mix_advantages(&[0.5, -0.1, 0.0], &[0.3, 0.9, 0.0], 1.0 / 3.0, false).unwrap();
        let flags = dominance_flags(&mixed, 1.0 / 3.0);
        let expected: Vec<bool> = mixed
            .adv_ext
            .iter()
            .zip(mixed.adv_int.iter())
            .map(|(e, i)| e.abs() >= (i / 3.0).abs())
            .collect();
        assert_eq!(flags, expected);
        assert!(flags[2], "tie at zero counts as extrinsic");
        let zero_beta = mix_advantages(&[0.0, 0.0], &[4.0, -4.0], 0.0, false).unwrap();
        assert!(dominance_flags(&zero_beta, 0.0).iter().all(|&f| f));
    }

    #[test]
    fn surrogate_matches_worked_examples() {
        assert_abs_diff_eq!(clipped_surrogate(1.5, 1.0, 0.2), 1.2, epsilon = 1e-12);
        assert_abs_diff_eq!(clipped_surrogate(0.5, -1.0, 0.2), -0.8, epsilon = 1e-12);
        assert_abs_diff_eq!(clipped_surrogate(1.0, 0.7, 0.2), 0.7, epsilon = 1e-12);
    }

    #[test]
    fn unit_ratio_gives_mean_advantage_surrogate() {
        let lp = vec![-0.5, -1.0, -0.2];
        let adv = vec![0.3, -0.4, 1.1];
        let ent = vec![0.0, 0.0, 0.0];
        let stats = ppo_policy_loss(&lp, &lp, &adv, 0.2, &ent, 0.0).unwrap();
        let mean_adv = adv.iter().sum::<f64>() / 3.0;
        assert_abs_diff_eq!(stats.loss, -mean_adv, epsilon = 1e-12);
        assert_abs_diff_eq!(stats.mean_ratio, 1.0, epsilon = 1e-12);
        assert_eq!(stats.clip_fraction, 0.0);
    }

    #[test]
    fn non_finite_losses_are_rejected() {
        let stats = ppo_policy_loss(&[f64::NAN], &[0.0], &[1.0], 0.2, &[0.0], 0.01);
        assert_eq!(stats.unwrap_err(), PpoError::NonFinite);
    }

    #[test]
    fn critic_loss_is_zero_at_exact_targets() {
        let q_ext = vec![array![1.0, 2.0, 3.0, 4.0, 5.0]];
        let q_int = vec![array![0.1, 0.2, 0.3, 0.4, 0.5]];
        let loss = critic_loss(&q_ext, &q_int, &[2], &[3.0], &[0.3]).unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn critic_loss_ignores_non_taken_entries() {
        let q_ext_a = vec![array![1.0, 2.0, 3.0]];
        let q_ext_b = vec![array![-9.0, 2.0, 99.0]];
        let q_int = vec![array![0.0, 0.0, 0.0]];
        let a = critic_loss(&q_ext_a, &q_int, &[1], &[1.0], &[0.0]).unwrap();
        let b = critic_loss(&q_ext_b, &q_int, &[1], &[1.0], &[0.0]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn critic_loss_matches_direct_recomputation() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let t_len = 12;
        let mut q_ext = Vec::new();
        let mut q_int = Vec::new();
        let mut taken = Vec::new();
        let mut te = Vec::new();
        let mut ti = Vec::new();
        for _ in 0..t_len {
            q_ext.push(Array1::from_iter((0..5).map(|_| rng.random::<f64>())));
            q_int.push(Array1::from_iter((0..5).map(|_| rng.random::<f64>())));
            taken.push(rng.random_range(0..5));
            te.push(rng.random::<f64>());
            ti.push(rng.random::<f64>());
        }
        let loss = critic_loss(&q_ext, &q_int, &taken, &te, &ti).unwrap();
        let mut expected = 0.0;
        for t in 0..t_len {
            expected +=
                (q_ext[t][taken[t]] - te[t]).powi(2) + (q_int[t][taken[t]] - ti[t]).powi(2);
        }
        expected /= t_len as f64;
        assert_abs_diff_eq!(loss, expected, epsilon = 1e-12);
    }

    fn synthetic_rollout(
        profile: &SkillProfile,
        universe: &ActionUniverse,
        obs_dim: usize,
        t_len: usize,
        seed: u64,
    ) -> Rollout {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let actor = Mlp::orthogonal(&[obs_dim, 16, profile.len()], seed ^ 0xA).unwrap();
        let mut steps = Vec::with_capacity(t_len);
        for t in 0..t_len {
            let obs = Array1::from_iter((0..obs_dim).map(|_| rng.random::<f64>()));
            let pol = crate::nn::forward_policy(&actor, obs.view()).unwrap();
            let action_idx = rng.random_range(0..profile.len());
            let action = profile.actions()[action_idx];
            steps.push(RolloutStep {
                obs,
                action,
                action_idx,
                log_prob_old: pol.probs[action_idx].ln(),
                reward_ext: if t % 7 == 6 { 1.0 } else { 0.0 },
                reward_int: rng.random::<f64>(),
                q_ext_row: Array1::from_iter((0..universe.len()).map(|_| rng.random::<f64>())),
                q_int_row: Array1::from_iter((0..universe.len()).map(|_| rng.random::<f64>())),
                policy_probs: pol.probs.clone(),
                done: t % 7 == 6,
                bin: (t % 5, t % 3),
                episode_index: t / 7,
            });
        }
        Rollout {
            agent_id: profile.agent_id,
            skill_onehot: array![1.0, 0.0],
            steps,
            bootstrap_ext: 0.1,
            bootstrap_int: 0.2,
        }
    }

    #[test]
    fn training_reduces_critic_loss_on_a_frozen_rollout() {
        let (profiles, universe) = two_agent_setup();
        let profile = &profiles[0];
        let obs_dim = 10;
        let rollout = synthetic_rollout(profile, &universe, obs_dim, 50, 3);
        let mut actor = Mlp::orthogonal(&[obs_dim, 16, profile.len()], 21).unwrap();
        let mut critic = Mlp::orthogonal(&[obs_dim + 2, 16, 2 * universe.len()], 22).unwrap();
        let mut actor_opt = AdamState::new(&actor, 1e-3);
        let mut critic_opt = AdamState::new(&critic, 1e-2);
        let config = PpoConfig {
            epochs: 1,
            ..PpoConfig::default()
        };
        let mut losses = Vec::new();
        for _ in 0..30 {
            let diag = train_on_rollout(
                &rollout,
                &mut actor,
                &mut actor_opt,
                &mut critic,
                &mut critic_opt,
                profile,
                &universe,
                &config,
                1.0 / 3.0,
            )
            .unwrap();
            losses.push(diag.critic_loss);
        }
        assert!(
            losses.last().unwrap() < losses.first().unwrap(),
            "critic loss should fall: {losses:?}"
        );
    }

    #[test]
    fn beta_zero_actor_updates_ignore_the_intrinsic_stream() {
        let (profiles, universe) = two_agent_setup();
        let profile = &profiles[0];
        let obs_dim = 10;
        let rollout = synthetic_rollout(profile, &universe, obs_dim, 30, 9);
        let mut scrambled = rollout.clone();
        for (i, step) in scrambled.steps.iter_mut().enumerate() {
            step.reward_int = (i as f64).sin() * 100.0;
            step.q_int_row = step.q_int_row.mapv(|v| v * -3.0 + 7.0);
        }
        scrambled.bootstrap_int = -55.0;

        let config = PpoConfig::default();
        let run = |r: &Rollout| {
            let mut actor = Mlp::orthogonal(&[obs_dim, 16, profile.len()], 31).unwrap();
            let mut critic = Mlp::orthogonal(&[obs_dim + 2, 16, 2 * universe.len()], 32).unwrap();
            let mut actor_opt = AdamState::new(&actor, 1e-3);
            let mut critic_opt = AdamState::new(&critic, 1e-3);
            train_on_rollout(
                r,
                &mut actor,
                &mut actor_opt,
                &mut critic,
                &mut critic_opt,
                profile,
                &universe,
                &config,
                0.0,
            )
            .unwrap();
            actor
        };
        let a = run(&rollout);
        let b = run(&scrambled);
        for (la, lb) in a.layers().iter().zip(b.layers()) {
            assert_eq!(la.weight, lb.weight, "actor must be bit-identical at beta=0");
            assert_eq!(la.bias, lb.bias);
        }
    }

    #[test]
    fn policy_gradient_matches_finite_differences_through_the_loss() {
        let (profiles, universe) = two_agent_setup();
        let profile = &profiles[0];
        let obs_dim = 6;
        let rollout = synthetic_rollout(profile, &universe, obs_dim, 8, 77);
        let config = PpoConfig::default();
        let bundle = compute_advantages(&rollout, profile, &universe, &config, 0.5).unwrap();
        let actor = Mlp::orthogonal(&[obs_dim, 8, profile.len()], 40).unwrap();

        let loss_of = |m: &Mlp| {
            let mut lp = Vec::new();
            let mut ent = Vec::new();
            for step in &rollout.steps {
                let pol = crate::nn::forward_policy(m, step.obs.view()).unwrap();
                lp.push(pol.probs[step.action_idx].ln());
                ent.push(-pol.probs.iter().map(|&p| p * p.ln()).sum::<f64>());
            }
            let old: Vec<f64> = rollout.steps.iter().map(|s| s.log_prob_old).collect();
            ppo_policy_loss(
                &lp,
                &old,
                &bundle.adv_total,
                config.clip_eps,
                &ent,
                config.entropy_coef,
            )
            .unwrap()
            .loss
        };

        // Analytic gradient, assembled the same way train_on_rollout does.
        let n = rollout.steps.len() as f64;
        let mut grads = MlpGrads::zeros_like(&actor);
        for (t, step) in rollout.steps.iter().enumerate() {
            let (logits, trace) = actor.forward_trace(step.obs.view()).unwrap();
            let probs = softmax(logits.view());
            let lp = probs[step.action_idx].ln();
            let entropy = -probs.iter().map(|&p| p * p.ln()).sum::<f64>();
            let ratio = (lp - step.log_prob_old).exp();
            let adv = bundle.adv_total[t];
            let unclipped = ratio * adv;
            let clipped = ratio.clamp(0.8, 1.2) * adv;
            let dsurr_dlp = if unclipped <= clipped { ratio * adv } else { 0.0 };
            let mut grad_logits = Array1::zeros(probs.len());
            for j in 0..probs.len() {
                let indicator = if j == step.action_idx { 1.0 } else { 0.0 };
                let dlogp = indicator - probs[j];
                let dentropy = -probs[j] * (probs[j].ln() + entropy);
                grad_logits[j] = -(dsurr_dlp * dlogp) / n - config.entropy_coef * dentropy / n;
            }
            actor.backward(&trace, grad_logits.view(), &mut grads).unwrap();
        }

        let h = 1e-6;
        for li in 0..actor.layers().len() {
            let (rows, cols) = actor.layers()[li].weight.dim();
            for r in 0..rows.min(3) {
                for c in 0..cols.min(3) {
                    let mut plus = actor.clone();
                    plus.layers_mut()[li].weight[(r, c)] += h;
                    let mut minus = actor.clone();
                    minus.layers_mut()[li].weight[(r, c)] -= h;
                    let numeric = (loss_of(&plus) - loss_of(&minus)) / (2.0 * h);
                    let analytic = grads.layers[li].0[(r, c)];
                    let denom = numeric.abs().max(1e-5);
                    assert!(
                        ((analytic - numeric) / denom).abs() < 1e-4,
                        "layer {li} ({r},{c}): analytic {analytic} vs numeric {numeric}"
                    );
                }
            }
        }
    }

    proptest! {
        #[test]
        fn gae_matches_quadratic_oracle(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let t_len = 50;
            let rewards: Vec<f64> = (0..t_len).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
            let values: Vec<f64> = (0..=t_len).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
            let dones: Vec<bool> = (0..t_len).map(|_| rng.random::<f64>() < 0.1).collect();
            let (adv, targets) = gae(&rewards, &values, &dones, 0.99, 0.95).unwrap();
            let oracle = gae_oracle(&rewards, &values, &dones, 0.99, 0.95);
            for (a, o) in adv.iter().zip(oracle.iter()) {
                prop_assert!((a - o).abs() < 1e-12);
            }
            for t in 0..t_len {
                prop_assert!((targets[t] - (adv[t] + values[t])).abs() < 1e-12);
            }
        }

        #[test]
        fn surrogate_never_exceeds_upper_clip_bound(
            ratio in 0.0f64..5.0,
            adv in -3.0f64..3.0,
        ) {
            let eps = 0.2;
            let s = clipped_surrogate(ratio, adv, eps);
            prop_assert!(s <= (1.0 + eps) * adv.abs() + 1e-12);
            if adv > 0.0 {
                prop_assert!(s.abs() <= (1.0 + eps) * adv.abs() + 1e-12);
            }
        }
    }
}
