//! The belief-MDP: grid motion, sampled observations, belief updates and
//! exact enumeration of successor belief states.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::belief::{Belief, ObservationModel};
use crate::error::{Error, Result};
use crate::plume::{sample_hits, EnvParams, GridPos, SourceTerm};

pub const DEFAULT_HORIZON: usize = 20;

/// Per-episode random stream.
pub type EpisodeRng = ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Action {
    Right,
    Left,
    /// Towards negative `y`, i.e. downwind.
    Down,
    Up,
    Stay,
}

impl Action {
    pub const ALL: [Action; 5] = [
        Action::Right,
        Action::Left,
        Action::Down,
        Action::Up,
        Action::Stay,
    ];

    pub fn offset(self) -> (isize, isize) {
        match self {
            Action::Right => (1, 0),
            Action::Left => (-1, 0),
            Action::Down => (0, -1),
            Action::Up => (0, 1),
            Action::Stay => (0, 0),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Action::Right => "right",
            Action::Left => "left",
            Action::Down => "down",
            Action::Up => "up",
            Action::Stay => "stay",
        }
    }

    /// Destination cell, or `None` when the move leaves the grid.
    pub fn apply(self, pos: GridPos, params: &EnvParams) -> Option<GridPos> {
        let (dx, dy) = self.offset();
        let x = pos.x.checked_add_signed(dx)?;
        let y = pos.y.checked_add_signed(dy)?;
        let next = GridPos::new(x, y);
        params.contains(next).then_some(next)
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Action {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Action::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown action {s:?}")))
    }
}

/// Moves that keep the agent on the grid; `Stay` is always included.
pub fn feasible_actions(pos: GridPos, params: &EnvParams) -> Vec<Action> {
    Action::ALL
        .into_iter()
        .filter(|a| a.apply(pos, params).is_some())
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BeliefState {
    pub pos: GridPos,
    pub belief: Belief,
    /// Actions taken so far.
    pub step: usize,
    pub horizon: usize,
}

impl BeliefState {
    pub fn is_terminal(&self) -> bool {
        self.step >= self.horizon
    }

    pub fn entropy(&self) -> f64 {
        self.belief.entropy()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Scenario {
    pub truth: SourceTerm,
    pub seed: u64,
}

impl Scenario {
    pub fn rng(&self) -> EpisodeRng {
        EpisodeRng::seed_from_u64(self.seed)
    }
}

#[derive(Clone, Debug)]
pub struct Transition {
    pub state: BeliefState,
    pub hits: usize,
    pub reward: f64,
}

/// One possible outcome of an action: the hit count, its predictive probability
/// and the resulting belief state.
#[derive(Clone, Debug)]
pub struct Successor {
    pub prob: f64,
    pub hits: usize,
    pub state: BeliefState,
}

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed of episode `index` under `master`: `mix64(master ^ index)`.
pub fn episode_seed(master: u64, index: u64) -> u64 {
    mix64(master ^ index)
}

/// Shared, read-only environment dynamics.
#[derive(Clone, Debug)]
pub struct Environment {
    model: Arc<ObservationModel>,
    horizon: usize,
}

impl Environment {
    pub fn new(params: EnvParams, horizon: usize) -> Result<Self> {
        if horizon == 0 {
            return Err(Error::Config("horizon must be positive".into()));
        }
        Ok(Self {
            model: Arc::new(ObservationModel::new(params)?),
            horizon,
        })
    }

    pub fn with_model(model: Arc<ObservationModel>, horizon: usize) -> Self {
        Self { model, horizon }
    }

    pub fn params(&self) -> &EnvParams {
        self.model.params()
    }

    pub fn model(&self) -> &ObservationModel {
        &self.model
    }

    pub fn shared_model(&self) -> Arc<ObservationModel> {
        Arc::clone(&self.model)
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn feasible_actions(&self, pos: GridPos) -> Vec<Action> {
        feasible_actions(pos, self.params())
    }

    /// Draws an observation at `pos` under the true source.
    pub fn observe<R: Rng + ?Sized>(&self, truth: SourceTerm, pos: GridPos, rng: &mut R) -> usize {
        let mu = self.model.plume().mean_hits(truth, pos);
        sample_hits(mu, self.params().h_max, rng)
    }

    /// Start state: center cell, uniform prior updated with one observation there.
    pub fn reset<R: Rng + ?Sized>(&self, truth: SourceTerm, rng: &mut R) -> Result<(BeliefState, usize)> {
        self.reset_with_prior(truth, Belief::uniform(self.params()), rng)
    }

    pub fn reset_with_prior<R: Rng + ?Sized>(
        &self,
        truth: SourceTerm,
        prior: Belief,
        rng: &mut R,
    ) -> Result<(BeliefState, usize)> {
        truth.validate(self.params())?;
        let pos = self.params().center();
        let hits = self.observe(truth, pos, rng);
        let (belief, _) = self.model.update(&prior, pos, hits)?;
        Ok((
            BeliefState {
                pos,
                belief,
                step: 0,
                horizon: self.horizon,
            },
            hits,
        ))
    }

    fn destination(&self, state: &BeliefState, action: Action) -> Result<GridPos> {
        action.apply(state.pos, self.params()).ok_or_else(|| {
            Error::Contract(format!(
                "action {action} is infeasible at ({}, {})",
                state.pos.x, state.pos.y
            ))
        })
    }

    pub fn step<R: Rng + ?Sized>(
        &self,
        state: &BeliefState,
        action: Action,
        truth: SourceTerm,
        rng: &mut R,
    ) -> Result<Transition> {
        if state.is_terminal() {
            return Err(Error::EpisodeOver {
                step: state.step,
                horizon: state.horizon,
            });
        }
        let pos = self.destination(state, action)?;
        let hits = self.observe(truth, pos, rng);
        let (belief, _) = self.model.update(&state.belief, pos, hits)?;
        let reward = -belief.entropy();
        Ok(Transition {
            state: BeliefState {
                pos,
                belief,
                step: state.step + 1,
                horizon: state.horizon,
            },
            hits,
            reward,
        })
    }

    /// All outcomes of `action`, one per hit count, weighted by the agent's
    /// own predictive distribution.
    pub fn successors(&self, state: &BeliefState, action: Action) -> Result<Vec<Successor>> {
        let pos = self.destination(state, action)?;
        Ok(self
            .model
            .branch(&state.belief, pos)
            .into_iter()
            .enumerate()
            .map(|(hits, (prob, belief))| Successor {
                prob,
                hits,
                state: BeliefState {
                    pos,
                    belief,
                    step: state.step + 1,
                    horizon: state.horizon,
                },
            })
            .collect())
    }

    pub fn ego_geometry(&self) -> EgoGeometry {
        EgoGeometry::for_params(self.params())
    }
}

/// Shape of the agent-centered belief tensor: `channels x height x width`
/// with `width = 2 nx - 1`, `height = 2 ny - 1`, one channel per flux.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EgoGeometry {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
}

impl EgoGeometry {
    pub fn for_params(params: &EnvParams) -> Self {
        Self {
            width: 2 * params.nx - 1,
            height: 2 * params.ny - 1,
            channels: params.n_phi(),
        }
    }

    pub fn len(&self) -> usize {
        self.width * self.height * self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Flat offset of `(column, row, channel)`.
    pub fn offset(&self, col: usize, row: usize, channel: usize) -> usize {
        (channel * self.height + row) * self.width + col
    }
}

/// Re-indexes the belief relative to the agent: hypothesis `(xs, ys, φ)` lands at
/// column `xs - x + nx - 1`, row `ys - y + ny - 1`; cells outside the domain stay zero.
pub fn egocentric_tensor(state: &BeliefState) -> Vec<f64> {
    let (nx, ny, n_phi) = state.belief.shape();
    let mut out = vec![0.0; (2 * nx - 1) * (2 * ny - 1) * n_phi];
    write_egocentric(&state.belief, state.pos, &mut out);
    out
}

/// Writes the agent-centered tensor into `out`, which must be zero outside the belief block.
pub fn write_egocentric(belief: &Belief, pos: GridPos, out: &mut [f64]) {
    let (nx, ny, n_phi) = belief.shape();
    let width = 2 * nx - 1;
    let height = 2 * ny - 1;
    debug_assert_eq!(out.len(), width * height * n_phi);
    let probs = belief.probs();
    let col0 = nx - 1 - pos.x;
    let row0 = ny - 1 - pos.y;
    for c in 0..n_phi {
        for ys in 0..ny {
            let src = (c * ny + ys) * nx;
            let dst = (c * height + row0 + ys) * width + col0;
            out[dst..dst + nx].copy_from_slice(&probs[src..src + nx]);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn env() -> Environment {
        Environment::new(EnvParams::default(), DEFAULT_HORIZON).unwrap()
    }

    #[test]
    fn feasible_action_sets() {
        let p = EnvParams::default();
        assert_eq!(feasible_actions(GridPos::new(5, 5), &p).len(), 5);
        assert_eq!(
            feasible_actions(GridPos::new(0, 0), &p),
            vec![Action::Right, Action::Up, Action::Stay]
        );
        assert_eq!(
            feasible_actions(GridPos::new(10, 10), &p),
            vec![Action::Left, Action::Down, Action::Stay]
        );
        let tiny = EnvParams {
            nx: 1,
            ny: 1,
            ..p
        };
        assert_eq!(feasible_actions(GridPos::new(0, 0), &tiny), vec![Action::Stay]);
    }

    #[test]
    fn action_names_roundtrip() {
        for a in Action::ALL {
            assert_eq!(a.name().parse::<Action>().unwrap(), a);
        }
        assert!("north".parse::<Action>().is_err());
    }

    #[test]
    fn reset_starts_in_center() {
        let env = env();
        let truth = SourceTerm::new(9, 1, 1);
        let mut rng = EpisodeRng::seed_from_u64(7);
        let (state, _) = env.reset(truth, &mut rng).unwrap();
        assert_eq!(state.pos, GridPos::new(5, 5));
        assert_eq!(state.step, 0);
        let total: f64 = state.belief.probs().iter().sum();
        assert!((total - 1.0).abs() < 1e-12);

        let mut rng2 = EpisodeRng::seed_from_u64(7);
        let (again, h) = env.reset(truth, &mut rng2).unwrap();
        assert_eq!(again, state);
        let mut rng3 = EpisodeRng::seed_from_u64(7);
        assert_eq!(env.reset(truth, &mut rng3).unwrap().1, h);
    }

    #[test]
    fn step_errors() {
        let env = env();
        let truth = SourceTerm::new(0, 0, 0);
        let mut rng = EpisodeRng::seed_from_u64(1);
        let mut state = env.reset(truth, &mut rng).unwrap().0;
        state.pos = GridPos::new(0, 0);
        assert!(matches!(
            env.step(&state, Action::Left, truth, &mut rng),
            Err(Error::Contract(_))
        ));
        state.step = DEFAULT_HORIZON;
        assert!(matches!(
            env.step(&state, Action::Stay, truth, &mut rng),
            Err(Error::EpisodeOver { .. })
        ));
    }

    #[test]
    fn point_mass_reward_is_zero() {
        let env = env();
        let p = env.params().clone();
        let truth = SourceTerm::new(3, 3, 2);
        let mut rng = EpisodeRng::seed_from_u64(2);
        let (mut state, _) = env
            .reset_with_prior(truth, Belief::point_mass(&p, truth), &mut rng)
            .unwrap();
        for a in [Action::Up, Action::Left, Action::Stay] {
            let t = env.step(&state, a, truth, &mut rng).unwrap();
            assert_eq!(t.reward, 0.0);
            state = t.state;
        }
    }

    #[test]
    fn seeded_replay_is_identical() {
        let env = env();
        let truth = SourceTerm::new(9, 1, 1);
        let run = || {
            let mut rng = EpisodeRng::seed_from_u64(99);
            let (mut s, _) = env.reset(truth, &mut rng).unwrap();
            let mut out = Vec::new();
            for i in 0..DEFAULT_HORIZON {
                let acts = env.feasible_actions(s.pos);
                let t = env.step(&s, acts[i % acts.len()], truth, &mut rng).unwrap();
                assert!(t.reward <= 0.0 && t.reward >= -(605f64.ln()) - 1e-12);
                out.push((t.hits, t.reward));
                s = t.state;
            }
            out
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn successors_enumerate_hit_bins() {
        let env = env();
        let mut rng = EpisodeRng::seed_from_u64(4);
        let (state, _) = env.reset(SourceTerm::new(2, 2, 0), &mut rng).unwrap();
        for a in env.feasible_actions(state.pos) {
            let succ = env.successors(&state, a).unwrap();
            assert_eq!(succ.len(), 4);
            let total: f64 = succ.iter().map(|s| s.prob).sum();
            assert!((total - 1.0).abs() < 1e-10);
            assert!(succ.iter().all(|s| s.state.step == 1));
        }
        let p = env.params().clone();
        let delta = BeliefState {
            belief: Belief::point_mass(&p, SourceTerm::new(1, 1, 1)),
            ..state
        };
        for s in env.successors(&delta, Action::Down).unwrap() {
            assert_eq!(s.state.belief, delta.belief);
        }
    }

    #[test]
    fn egocentric_centered_and_corner() {
        let env = env();
        let mut rng = EpisodeRng::seed_from_u64(8);
        let (mut state, _) = env.reset(SourceTerm::new(9, 1, 1), &mut rng).unwrap();
        let geo = env.ego_geometry();
        assert_eq!((geo.width, geo.height, geo.channels), (21, 21, 5));
        let t = egocentric_tensor(&state);
        assert!((t.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for c in 0..5 {
            for row in 0..21 {
                for col in 0..21 {
                    let v = t[geo.offset(col, row, c)];
                    let inside = (5..16).contains(&col) && (5..16).contains(&row);
                    if inside {
                        let theta = SourceTerm::new(col - 5, row - 5, c);
                        assert_eq!(v, state.belief.get(theta));
                    } else {
                        assert_eq!(v, 0.0);
                    }
                }
            }
        }
        state.pos = GridPos::new(0, 0);
        let t = egocentric_tensor(&state);
        for c in 0..5 {
            for row in 0..21 {
                for col in 0..21 {
                    let v = t[geo.offset(col, row, c)];
                    if col < 10 || row < 10 {
                        assert_eq!(v, 0.0);
                    } else {
                        assert_eq!(v, state.belief.get(SourceTerm::new(col - 10, row - 10, c)));
                    }
                }
            }
        }
    }

    #[test]
    fn episode_seeds_differ() {
        assert_ne!(episode_seed(1, 0), episode_seed(1, 1));
        assert_eq!(episode_seed(42, 7), mix64(42 ^ 7));
    }
}
