//! The state-to-action interface shared by every navigation strategy.

use rand::Rng;

use crate::env::{Action, BeliefState, Environment, EpisodeRng};
use crate::error::Result;

/// Actions whose scores are within this distance of the best are tied.
pub const TIE_TOLERANCE: f64 = 1e-12;

pub trait Policy: Sync {
    fn name(&self) -> &str;

    fn choose(&self, env: &Environment, state: &BeliefState, rng: &mut EpisodeRng) -> Result<Action>;
}

/// Uniformly random feasible action.
#[derive(Clone, Copy, Debug, Default)]
pub struct RandomPolicy;

impl Policy for RandomPolicy {
    fn name(&self) -> &str {
        "random"
    }

    fn choose(&self, env: &Environment, state: &BeliefState, rng: &mut EpisodeRng) -> Result<Action> {
        let actions = env.feasible_actions(state.pos);
        Ok(actions[rng.gen_range(0..actions.len())])
    }
}

/// Never moves.
#[derive(Clone, Copy, Debug, Default)]
pub struct StayPolicy;

impl Policy for StayPolicy {
    fn name(&self) -> &str {
        "stay"
    }

    fn choose(&self, _: &Environment, _: &BeliefState, _: &mut EpisodeRng) -> Result<Action> {
        Ok(Action::Stay)
    }
}

/// Actions attaining the minimum score within [`TIE_TOLERANCE`], in input order.
pub fn tied_minimizers(scores: &[(Action, f64)]) -> Vec<Action> {
    let best = scores.iter().map(|s| s.1).fold(f64::INFINITY, f64::min);
    scores
        .iter()
        .filter(|s| s.1 <= best + TIE_TOLERANCE)
        .map(|s| s.0)
        .collect()
}

/// Uniform pick among tied actions.
pub fn break_tie<R: Rng + ?Sized>(tied: &[Action], rng: &mut R) -> Action {
    if tied.len() == 1 {
        tied[0]
    } else {
        tied[rng.gen_range(0..tied.len())]
    }
}
