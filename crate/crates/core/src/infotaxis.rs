//! Greedy information-gain navigation.

use crate::env::{Action, BeliefState, Environment, EpisodeRng};
use crate::error::Result;
use crate::policy::{break_tie, tied_minimizers, Policy};

/// `Σ_{s'} Pr(s'|s,a) H(s')` by exact enumeration of hit outcomes.
pub fn expected_entropy(env: &Environment, state: &BeliefState, action: Action) -> Result<f64> {
    Ok(env
        .successors(state, action)?
        .iter()
        .map(|s| s.prob * s.state.entropy())
        .sum())
}

/// `G(s,a) = H(s) - Σ_{s'} Pr(s'|s,a) H(s')`.
pub fn expected_information_gain(env: &Environment, state: &BeliefState, action: Action) -> Result<f64> {
    Ok(state.entropy() - expected_entropy(env, state, action)?)
}

/// Expected successor entropy of every feasible action.
pub fn entropy_scores(env: &Environment, state: &BeliefState) -> Result<Vec<(Action, f64)>> {
    env.feasible_actions(state.pos)
        .into_iter()
        .map(|a| Ok((a, expected_entropy(env, state, a)?)))
        .collect()
}

/// Feasible actions minimizing expected entropy, before tie-breaking.
pub fn tied_actions(env: &Environment, state: &BeliefState) -> Result<Vec<Action>> {
    Ok(tied_minimizers(&entropy_scores(env, state)?))
}

pub fn infotaxis_action(env: &Environment, state: &BeliefState, rng: &mut EpisodeRng) -> Result<Action> {
    Ok(break_tie(&tied_actions(env, state)?, rng))
}

#[derive(Clone, Copy, Debug, Default)]
pub struct Infotaxis;

impl Policy for Infotaxis {
    fn name(&self) -> &str {
        "infotaxis"
    }

    fn choose(&self, env: &Environment, state: &BeliefState, rng: &mut EpisodeRng) -> Result<Action> {
        infotaxis_action(env, state, rng)
    }
}
