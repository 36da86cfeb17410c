//! Heterogeneous action sets, the mutual action space and reproducibility
//! checks used by curiosity filtering.
//!
//! The union action space is fixed: the skilled agent (`W0` in the default
//! two-agent setup) owns all five actions, the non-skilled agent (`W1`) lacks
//! `OPEN`. Profiles are immutable once an experiment starts.

use thiserror::Error;

/// Union action space of the gridworld. The enum order is the canonical,
/// experiment-constant index order used by the critic heads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Action {
    Forward,
    TurnLeft,
    TurnRight,
    Noop,
    Open,
}

impl Action {
    pub const ALL: [Action; 5] = [
        Action::Forward,
        Action::TurnLeft,
        Action::TurnRight,
        Action::Noop,
        Action::Open,
    ];

    /// Canonical index inside the union ordering.
    pub fn index(self) -> usize {
        match self {
            Action::Forward => 0,
            Action::TurnLeft => 1,
            Action::TurnRight => 2,
            Action::Noop => 3,
            Action::Open => 4,
        }
    }

    pub fn from_index(idx: usize) -> Result<Action, SkillError> {
        Action::ALL
            .get(idx)
            .copied()
            .ok_or_else(|| SkillError::UnknownAction(idx.to_string()))
    }

    pub fn name(self) -> &'static str {
        match self {
            Action::Forward => "FORWARD",
            Action::TurnLeft => "TURN_LEFT",
            Action::TurnRight => "TURN_RIGHT",
            Action::Noop => "NOOP",
            Action::Open => "OPEN",
        }
    }

    pub fn from_name(name: &str) -> Result<Action, SkillError> {
        Action::ALL
            .iter()
            .copied()
            .find(|a| a.name() == name)
            .ok_or_else(|| SkillError::UnknownAction(name.to_string()))
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SkillError {
    #[error("unknown action `{0}`")]
    UnknownAction(String),
    #[error("profile list is empty")]
    EmptyProfileList,
    #[error("skill profile of agent {0} has no actions")]
    EmptyProfile(usize),
    #[error("duplicate agent id {0}")]
    DuplicateAgentId(usize),
}

/// An agent's identity plus the ordered set of actions it can execute.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SkillProfile {
    pub agent_id: usize,
    actions: Vec<Action>,
}

impl SkillProfile {
    /// Builds a profile. Actions are stored deduplicated in canonical order,
    /// so the index of an action within a profile is stable.
    pub fn new(agent_id: usize, actions: &[Action]) -> Result<Self, SkillError> {
        let mut set = [false; Action::ALL.len()];
        for a in actions {
            set[a.index()] = true;
        }
        let actions: Vec<Action> = Action::ALL.iter().copied().filter(|a| set[a.index()]).collect();
        if actions.is_empty() {
            return Err(SkillError::EmptyProfile(agent_id));
        }
        Ok(SkillProfile { agent_id, actions })
    }

    pub fn actions(&self) -> &[Action] {
        &self.actions
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn contains(&self, action: Action) -> bool {
        self.actions.contains(&action)
    }

    /// Index of `action` within this profile's ordering (the actor's softmax
    /// head is indexed this way).
    pub fn index_of(&self, action: Action) -> Option<usize> {
        self.actions.iter().position(|&a| a == action)
    }
}

/// Union of all profiles' action sets, in canonical order. Its width equals
/// the width of each critic head.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActionUniverse {
    union_actions: Vec<Action>,
}

impl ActionUniverse {
    pub fn from_profiles(profiles: &[SkillProfile]) -> Result<Self, SkillError> {
        if profiles.is_empty() {
            return Err(SkillError::EmptyProfileList);
        }
        let mut seen = std::collections::HashSet::new();
        for p in profiles {
            if !seen.insert(p.agent_id) {
                return Err(SkillError::DuplicateAgentId(p.agent_id));
            }
        }
        let mut set = [false; Action::ALL.len()];
        for p in profiles {
            for a in p.actions() {
                set[a.index()] = true;
            }
        }
        let union_actions = Action::ALL.iter().copied().filter(|a| set[a.index()]).collect();
        Ok(ActionUniverse { union_actions })
    }

    pub fn actions(&self) -> &[Action] {
        &self.union_actions
    }

    pub fn len(&self) -> usize {
        self.union_actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.union_actions.is_empty()
    }

    pub fn index_of(&self, action: Action) -> Option<usize> {
        self.union_actions.iter().position(|&a| a == action)
    }
}

/// Intersection of all profiles' action sets.
pub fn mutual_action_space(profiles: &[SkillProfile]) -> Result<Vec<Action>, SkillError> {
    if profiles.is_empty() {
        return Err(SkillError::EmptyProfileList);
    }
    Ok(Action::ALL
        .iter()
        .copied()
        .filter(|&a| profiles.iter().all(|p| p.contains(a)))
        .collect())
}

/// True iff `profile` could have executed `action` itself. This is the oracle
/// used by trajectory tree filtering; on-line estimation of reproducibility is
/// out of scope.
pub fn is_reproducible(action: Action, profile: &SkillProfile) -> bool {
    profile.contains(action)
}

/// The default two-agent setup: agent 0 owns every action, agent 1 lacks OPEN.
pub fn default_profiles() -> Vec<SkillProfile> {
    vec![
        SkillProfile::new(0, &Action::ALL).unwrap(),
        SkillProfile::new(
            1,
            &[Action::Forward, Action::TurnLeft, Action::TurnRight, Action::Noop],
        )
        .unwrap(),
    ]
}
