//! Model-based value learning on the belief MDP.
//!
//! Targets come from exact successor enumeration rather than sampled
//! transitions, so the replay buffer stores whole belief states and targets are
//! recomputed against whichever target network is current.

use std::collections::VecDeque;
use std::io::Write;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::env::{episode_seed, mix64, write_egocentric, Action, BeliefState, Environment, EpisodeRng};
use crate::error::{Error, Result};
use crate::net::{Architecture, InputGeometry, NetworkWeights, Optimizer, OptimizerKind, TrainingMeta};
use crate::plume::EnvParams;
use crate::policy::{break_tie, tied_minimizers, Policy};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub architecture: Architecture,
    /// Total episodes of the run; the epsilon schedule is laid out over this.
    pub episodes: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    /// Heavy-ball momentum; SGD only.
    pub momentum: f64,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    /// Fraction of `episodes` over which epsilon decays linearly.
    pub epsilon_decay_fraction: f64,
    pub replay_capacity: usize,
    /// Gradient steps between target-network refreshes.
    pub target_sync_interval: usize,
    /// Environment steps per gradient step.
    pub train_interval: usize,
    /// Stored states required before the first gradient step.
    pub warmup_states: usize,
    pub horizon: usize,
    /// Append a constant `(horizon - step) / horizon` plane to the network input.
    pub time_channel: bool,
    /// Feed the belief multiplied by the number of hypotheses.
    pub scaled_belief: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            architecture: Architecture::Fc,
            episodes: 20_000,
            batch_size: 128,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::Sgd,
            momentum: 0.0,
            epsilon_start: 1.0,
            epsilon_end: 0.05,
            epsilon_decay_fraction: 0.5,
            replay_capacity: 10_000,
            target_sync_interval: 1_000,
            train_interval: 1,
            warmup_states: 128,
            horizon: crate::env::DEFAULT_HORIZON,
            time_channel: false,
            scaled_belief: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("batch_size", self.batch_size),
            ("replay_capacity", self.replay_capacity),
            ("target_sync_interval", self.target_sync_interval),
            ("train_interval", self.train_interval),
            ("horizon", self.horizon),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("momentum must lie in [0, 1)".into()));
        }
        for (name, e) in [
            ("epsilon_start", self.epsilon_start),
            ("epsilon_end", self.epsilon_end),
            ("epsilon_decay_fraction", self.epsilon_decay_fraction),
        ] {
            if !(0.0..=1.0).contains(&e) {
                return Err(Error::Config(format!("{name} must lie in [0, 1]")));
            }
        }
        if self.batch_size > self.replay_capacity {
            return Err(Error::Config("batch_size exceeds replay_capacity".into()));
        }
        Ok(())
    }

    /// Exploration rate of episode `episode` (0-based).
    pub fn epsilon(&self, episode: usize) -> f64 {
        let span = self.epsilon_decay_fraction * self.episodes as f64;
        let t = if span > 0.0 { (episode as f64 / span).min(1.0) } else { 1.0 };
        self.epsilon_start + (self.epsilon_end - self.epsilon_start) * t
    }
}

/// Network input shape for a domain.
pub fn input_geometry(params: &EnvParams, time_channel: bool, scaled_belief: bool) -> InputGeometry {
    InputGeometry {
        width: 2 * params.nx - 1,
        height: 2 * params.ny - 1,
        flux_channels: params.n_phi(),
        time_channel,
        scaled_belief,
    }
}

/// Writes the network input for `state`; `out` must be zeroed.
pub fn encode_state(state: &BeliefState, geometry: InputGeometry, out: &mut [f64]) {
    let ego = geometry.flux_channels * geometry.width * geometry.height;
    write_egocentric(&state.belief, state.pos, &mut out[..ego]);
    if geometry.scaled_belief {
        let n = state.belief.len() as f64;
        out[..ego].iter_mut().for_each(|v| *v *= n);
    }
    if geometry.time_channel {
        let togo = (state.horizon - state.step.min(state.horizon)) as f64 / state.horizon as f64;
        out[ego..].fill(togo);
    }
}

fn encode_batch(states: &[&BeliefState], geometry: InputGeometry) -> Vec<f64> {
    let d = geometry.len();
    let mut inputs = vec![0.0; states.len() * d];
    for (s, chunk) in states.iter().zip(inputs.chunks_mut(d)) {
        encode_state(s, geometry, chunk);
    }
    inputs
}

/// `v̂` of each state; terminal states are worth exactly zero.
pub fn state_values(net: &NetworkWeights, states: &[&BeliefState]) -> Result<Vec<f64>> {
    let live: Vec<&BeliefState> = states.iter().copied().filter(|s| !s.is_terminal()).collect();
    let mut live_values = net.forward_batch(&encode_batch(&live, net.env_geometry), live.len())?.into_iter();
    Ok(states
        .iter()
        .map(|s| if s.is_terminal() { 0.0 } else { live_values.next().unwrap_or(0.0) })
        .collect())
}

/// One-step lookahead of a state.
#[derive(Clone, Debug, PartialEq)]
pub struct Backup {
    /// `min_a Σ Pr(s'|s,a) [H(s') + v(s')]`.
    pub value: f64,
    /// Score of every feasible action.
    pub scores: Vec<(Action, f64)>,
}

impl Backup {
    pub fn tied_actions(&self) -> Vec<Action> {
        tied_minimizers(&self.scores)
    }
}

/// Backups of many states with successor values from `values`, which receives
/// every reachable successor of every state in one call.
pub fn backups_with<F>(env: &Environment, states: &[&BeliefState], values: F) -> Result<Vec<Backup>>
where
    F: FnOnce(&[&BeliefState]) -> Result<Vec<f64>>,
{
    let mut expanded = Vec::with_capacity(states.len());
    for state in states {
        if state.is_terminal() {
            return Err(Error::EpisodeOver {
                step: state.step,
                horizon: state.horizon,
            });
        }
        let per_action = env
            .feasible_actions(state.pos)
            .into_iter()
            .map(|a| Ok((a, env.successors(state, a)?)))
            .collect::<Result<Vec<_>>>()?;
        expanded.push(per_action);
    }
    let reachable: Vec<&BeliefState> = expanded
        .iter()
        .flatten()
        .flat_map(|(_, succ)| succ.iter().filter(|s| s.prob > 0.0).map(|s| &s.state))
        .collect();
    let mut future = values(&reachable)?.into_iter();
    Ok(expanded
        .iter()
        .map(|per_action| {
            let scores: Vec<(Action, f64)> = per_action
                .iter()
                .map(|(a, succ)| {
                    let total = succ
                        .iter()
                        .map(|s| {
                            let v = if s.prob > 0.0 { future.next().unwrap_or(0.0) } else { 0.0 };
                            s.prob * (s.state.entropy() + v)
                        })
                        .sum();
                    (*a, total)
                })
                .collect();
            Backup {
                value: scores.iter().map(|s| s.1).fold(f64::INFINITY, f64::min),
                scores,
            }
        })
        .collect())
}

pub fn bellman_backups(env: &Environment, states: &[&BeliefState], net: &NetworkWeights) -> Result<Vec<Backup>> {
    backups_with(env, states, |succ| state_values(net, succ))
}

/// `min_a Σ Pr(s'|s,a) [H(s') + v̂(s', w)]` with `v̂ = 0` at the horizon.
pub fn bellman_backup(env: &Environment, state: &BeliefState, net: &NetworkWeights) -> Result<Backup> {
    Ok(bellman_backups(env, &[state], net)?.remove(0))
}

/// Mean squared Bellman residual of `net` against backups under `target`.
pub fn bellman_loss(
    env: &Environment,
    batch: &[&BeliefState],
    net: &NetworkWeights,
    target: &NetworkWeights,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    let targets = bellman_backups(env, batch, target)?;
    let values = net.forward_batch(&encode_batch(batch, net.env_geometry), batch.len())?;
    Ok(targets
        .iter()
        .zip(&values)
        .map(|(t, v)| (t.value - v) * (t.value - v))
        .sum::<f64>()
        / batch.len() as f64)
}

/// Greedy action with respect to the backed-up value; ties broken uniformly.
pub fn drl_action(env: &Environment, state: &BeliefState, net: &NetworkWeights, rng: &mut EpisodeRng) -> Result<Action> {
    Ok(break_tie(&bellman_backup(env, state, net)?.tied_actions(), rng))
}

/// Policy acting greedily on a trained value network.
#[derive(Clone, Debug)]
pub struct DrlPolicy {
    name: String,
    net: NetworkWeights,
}

impl DrlPolicy {
    pub fn new(net: NetworkWeights, params: &EnvParams) -> Result<Self> {
        let g = net.env_geometry;
        let expected = input_geometry(params, g.time_channel, g.scaled_belief);
        if net.env_geometry != expected {
            return Err(Error::Checkpoint(format!(
                "network expects input {:?}, domain gives {expected:?}",
                net.env_geometry
            )));
        }
        Ok(Self {
            name: format!("drl-{}", net.architecture),
            net,
        })
    }

    pub fn weights(&self) -> &NetworkWeights {
        &self.net
    }
}

impl Policy for DrlPolicy {
    fn name(&self) -> &str {
        &self.name
    }

    fn choose(&self, env: &Environment, state: &BeliefState, rng: &mut EpisodeRng) -> Result<Action> {
        drl_action(env, state, &self.net, rng)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct ReplayEntry {
    state: BeliefState,
    /// Backed-up value under target network `.0`.
    #[serde(skip)]
    target: Option<(u64, f64)>,
}

/// Bounded FIFO of visited, non-terminal belief states.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ReplayBuffer {
    capacity: usize,
    entries: VecDeque<ReplayEntry>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            entries: VecDeque::with_capacity(capacity),
        }
    }

    pub fn push(&mut self, state: BeliefState) {
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back(ReplayEntry { state, target: None });
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn get(&self, i: usize) -> Option<&BeliefState> {
        self.entries.get(i).map(|e| &e.state)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub episode: usize,
    /// Mean Bellman loss over the episode's gradient steps; NaN before warmup ends.
    #[serde(deserialize_with = "nan_if_null")]
    pub loss: f64,
    pub cumulative_entropy: f64,
    pub epsilon: f64,
}

fn nan_if_null<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
}

pub fn write_history<W: Write>(rows: &[HistoryRow], mut out: W) -> std::io::Result<()> {
    writeln!(out, "episode,loss,cumulative_entropy,epsilon")?;
    for r in rows {
        writeln!(out, "{},{},{},{}", r.episode, r.loss, r.cumulative_entropy, r.epsilon)?;
    }
    Ok(())
}

/// Complete, resumable training state.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Trainer {
    pub config: TrainConfig,
    pub params: EnvParams,
    online: NetworkWeights,
    target: NetworkWeights,
    optimizer: Optimizer,
    buffer: ReplayBuffer,
    env_steps: u64,
    grad_steps: u64,
    target_version: u64,
    next_episode: usize,
    history: Vec<HistoryRow>,
    #[serde(skip)]
    env: Option<Environment>,
}

impl Trainer {
    pub fn new(config: TrainConfig, params: EnvParams) -> Result<Self> {
        config.validate()?;
        let geometry = input_geometry(&params, config.time_channel, config.scaled_belief);
        let mut init_rng = EpisodeRng::seed_from_u64(mix64(config.seed));
        let online = NetworkWeights::initialize(config.architecture, geometry, &mut init_rng)?;
        let env = Environment::new(params.clone(), config.horizon)?;
        Ok(Self {
            target: online.clone(),
            online,
            optimizer: Optimizer::new(config.optimizer, config.learning_rate, config.momentum),
            buffer: ReplayBuffer::new(config.replay_capacity),
            env_steps: 0,
            grad_steps: 0,
            target_version: 0,
            next_episode: 0,
            history: Vec::new(),
            env: Some(env),
            config,
            params,
        })
    }

    fn env(&mut self) -> Result<Environment> {
        if self.env.is_none() {
            self.env = Some(Environment::new(self.params.clone(), self.config.horizon)?);
        }
        Ok(self.env.clone().expect("environment initialized"))
    }

    pub fn episodes_done(&self) -> usize {
        self.next_episode
    }

    pub fn is_finished(&self) -> bool {
        self.next_episode >= self.config.episodes
    }

    pub fn history(&self) -> &[HistoryRow] {
        &self.history
    }

    pub fn buffer(&self) -> &ReplayBuffer {
        &self.buffer
    }

    /// Online weights tagged with progress metadata.
    pub fn weights(&self) -> NetworkWeights {
        let mut w = self.online.clone();
        w.training_meta = TrainingMeta {
            episodes: self.next_episode,
            seed: self.config.seed,
        };
        w
    }

    /// Extends the run to `episodes` total, keeping the schedule and state.
    pub fn extend_to(&mut self, episodes: usize) {
        self.config.episodes = self.config.episodes.max(episodes);
    }

    /// Plays and learns from the next episode.
    pub fn run_episode(&mut self) -> Result<HistoryRow> {
        let env = self.env()?;
        let episode = self.next_episode;
        let epsilon = self.config.epsilon(episode);
        let mut rng = EpisodeRng::seed_from_u64(episode_seed(self.config.seed, episode as u64));
        let truth = self.params.hypothesis(rng.gen_range(0..self.params.n_hypotheses()));
        let (mut state, _) = env.reset(truth, &mut rng)?;
        self.buffer.push(state.clone());
        let mut cumulative_entropy = 0.0;
        let mut losses = Vec::new();
        while !state.is_terminal() {
            let action = if rng.gen::<f64>() < epsilon {
                let actions = env.feasible_actions(state.pos);
                actions[rng.gen_range(0..actions.len())]
            } else {
                drl_action(&env, &state, &self.online, &mut rng)?
            };
            let t = env.step(&state, action, truth, &mut rng)?;
            cumulative_entropy -= t.reward;
            state = t.state;
            if !state.is_terminal() {
                self.buffer.push(state.clone());
            }
            self.env_steps += 1;
            let ready = self.buffer.len() >= self.config.warmup_states.max(self.config.batch_size);
            if ready && self.env_steps.is_multiple_of(self.config.train_interval as u64) {
                losses.push(self.gradient_step(&env, episode, &mut rng)?);
            }
        }
        self.next_episode += 1;
        let row = HistoryRow {
            episode,
            loss: if losses.is_empty() {
                f64::NAN
            } else {
                losses.iter().sum::<f64>() / losses.len() as f64
            },
            cumulative_entropy,
            epsilon,
        };
        self.history.push(row.clone());
        Ok(row)
    }

    fn gradient_step(&mut self, env: &Environment, episode: usize, rng: &mut EpisodeRng) -> Result<f64> {
        let picks = index::sample(rng, self.buffer.len(), self.config.batch_size).into_vec();
        let version = self.target_version;
        let stale: Vec<usize> = picks
            .iter()
            .copied()
            .filter(|&i| !matches!(self.buffer.entries[i].target, Some((v, _)) if v == version))
            .collect();
        if !stale.is_empty() {
            let states: Vec<&BeliefState> = stale.iter().map(|&i| &self.buffer.entries[i].state).collect();
            let fresh = bellman_backups(env, &states, &self.target)?;
            for (&i, b) in stale.iter().zip(fresh) {
                self.buffer.entries[i].target = Some((version, b.value));
            }
        }
        let states: Vec<&BeliefState> = picks.iter().map(|&i| &self.buffer.entries[i].state).collect();
        let targets: Vec<f64> = picks
            .iter()
            .map(|&i| self.buffer.entries[i].target.map_or(0.0, |t| t.1))
            .collect();
        let inputs = encode_batch(&states, self.online.env_geometry);
        let (grad, loss) = self.online.batch_gradient(&inputs, &targets)?;
        if !loss.is_finite() || !grad.is_finite() {
            return Err(Error::Divergence {
                episode,
                reason: format!("non-finite loss {loss} after {} gradient steps", self.grad_steps),
            });
        }
        self.optimizer.step(&mut self.online, &grad);
        self.grad_steps += 1;
        if self.grad_steps.is_multiple_of(self.config.target_sync_interval as u64) {
            self.target = self.online.clone();
            self.target_version += 1;
        }
        Ok(loss)
    }

    /// Runs episodes until `episodes` are done (capped at the configured total),
    /// calling `after` once per finished episode.
    pub fn run_until<F>(&mut self, episodes: usize, mut after: F) -> Result<()>
    where
        F: FnMut(&Trainer, &HistoryRow) -> Result<()>,
    {
        while self.next_episode < episodes.min(self.config.episodes) {
            let row = self.run_episode()?;
            after(self, &row)?;
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let file = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer(file, self)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        let mut trainer: Trainer = serde_json::from_reader(std::io::BufReader::new(file))
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        trainer.config.validate()?;
        trainer.online.validate()?;
        trainer.target.validate()?;
        trainer.env = Some(Environment::new(trainer.params.clone(), trainer.config.horizon)?);
        Ok(trainer)
    }
}

/// Trains from scratch for `config.episodes` episodes.
pub fn train(config: TrainConfig, params: EnvParams) -> Result<(NetworkWeights, Vec<HistoryRow>)> {
    let mut trainer = Trainer::new(config, params)?;
    trainer.run_until(usize::MAX, |_, _| Ok(()))?;
    Ok((trainer.weights(), trainer.history))
}
