use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::env::{Action, Env, State};

/// Time-indexed states `s_0..s_H`, optionally with the actions `a_0..a_{H-1}`
/// that produced them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub states: Vec<State>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub actions: Option<Vec<Action>>,
}

impl Trajectory {
    pub fn from_states(states: Vec<State>) -> Self {
        Self { states, actions: None }
    }

    pub fn horizon(&self) -> usize {
        self.states.len().saturating_sub(1)
    }

    pub fn initial_state(&self) -> &State {
        &self.states[0]
    }

    /// Check lengths against `env` (any horizon ≥ 1).
    pub fn check_shape(&self, env: &Env) -> Result<()> {
        if self.states.len() < 2 {
            return Err(Error::Mismatch("trajectory needs at least two states".into()));
        }
        if self.states.iter().any(|s| s.len() != env.n_states()) {
            return Err(Error::Mismatch(format!(
                "state dimension differs from env `{}` ({})",
                env.name(),
                env.n_states()
            )));
        }
        if let Some(actions) = &self.actions {
            if actions.len() != self.horizon() {
                return Err(Error::Mismatch(format!(
                    "{} actions for horizon {}",
                    actions.len(),
                    self.horizon()
                )));
            }
            if actions.iter().any(|a| a.len() != env.n_actions()) {
                return Err(Error::Mismatch("action dimension differs from env".into()));
            }
        }
        Ok(())
    }

    /// First step whose re-simulated successor differs from the stored one,
    /// with the deviation norm. `Ok(None)` means bit-exact reproduction.
    pub fn resimulation_mismatch(&self, env: &Env) -> Result<Option<(usize, f64)>> {
        self.check_shape(env)?;
        let actions = self
            .actions
            .as_ref()
            .ok_or_else(|| Error::Config("re-simulation needs actions".into()))?;
        for (t, a) in actions.iter().enumerate() {
            let next = env.step(&self.states[t], a)?;
            if next != self.states[t + 1] {
                return Ok(Some((t, crate::linalg::dist(&next, &self.states[t + 1]))));
            }
        }
        Ok(None)
    }

    pub fn is_exactly_admissible(&self, env: &Env) -> bool {
        matches!(self.resimulation_mismatch(env), Ok(None))
    }
}
