//! Desk-scale laboratory for collaborative training of heterogeneous RL agents
//! under sparse rewards.
//!
//! Two agents with different action sets (only one of them can `OPEN` doors)
//! learn the same door-gated gridworld in independent environment copies. The
//! crate provides the environment, per-agent PPO actors, a skill-conditioned
//! two-head Q-critic, count-based curiosity in four sharing modes (including
//! action-keyed novelty and trajectory-prefix tree filtering), and an ablation
//! harness that emits success-rate / steps-to-goal / advantage-dominance
//! metrics as CSV.

pub mod config;
pub mod curiosity;
pub mod env;
pub mod metrics;
pub mod nn;
pub mod ppo;
pub mod skills;
pub mod trainer;
