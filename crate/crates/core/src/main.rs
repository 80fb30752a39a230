use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use plume_ste::belief::Belief;
use plume_ste::env::{episode_seed, BeliefState, Environment, EpisodeRng, Scenario};
use plume_ste::evaluation::{
    evaluate, exhaustive_oracle, load_or_train, metric_rows, policy_tree_value, run_episode, scenario_for,
    sensitivity_sweep, write_location_csv, write_metrics_csv, EvalConfig, ScenarioMix,
};
use plume_ste::infotaxis::{tied_actions, Infotaxis};
use plume_ste::net::{Architecture, NetworkWeights, OptimizerKind};
use plume_ste::plume::{EnvParams, GridPos, PlumeModel, SourceTerm};
use plume_ste::policy::{Policy, RandomPolicy};
use plume_ste::training::{bellman_backup, write_history, DrlPolicy, TrainConfig, Trainer};
use plume_ste::Error;

#[derive(Parser, Debug)]
#[command(name = "plume-ste", version, about = "Gas source term estimation with infotaxis and learned value functions")]
struct Cli {
    /// JSON run configuration; flags override its keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Worker threads for episode evaluation (never changes results).
    #[arg(long, global = true, env = "PLUME_STE_THREADS")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Roll out episodes and write per-episode trajectories.
    Simulate(SimulateArgs),
    /// Train a value network.
    Train(TrainArgs),
    /// Evaluate a policy over many episodes.
    Eval(EvalArgs),
    /// Relative-DRPS sensitivity over wind speed and diffusivity.
    Sweep(SweepArgs),
    /// Exhaustive expectimin checks on a small domain.
    Oracle(OracleArgs),
}

#[derive(Args, Debug, Default)]
struct Common {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    nx: Option<usize>,
    #[arg(long)]
    ny: Option<usize>,
    /// Flux values, comma separated.
    #[arg(long, value_delimiter = ',')]
    fluxes: Option<Vec<f64>>,
    #[arg(long)]
    wind_speed: Option<f64>,
    #[arg(long)]
    diffusivity: Option<f64>,
    #[arg(long)]
    h_max: Option<usize>,
    #[arg(long)]
    horizon: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum PolicyKind {
    Infotaxis,
    Checkpoint,
    Random,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, value_enum)]
    policy: Option<PolicyKind>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Fixed true source as `x,y,flux`.
    #[arg(long)]
    truth: Option<String>,
    #[arg(long)]
    episodes: Option<usize>,
    /// Also write the mean hit map of each episode's true source.
    #[arg(long)]
    emit_field: bool,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, value_parser = parse_arch)]
    arch: Option<Architecture>,
    /// Total episodes of the run.
    #[arg(long)]
    episodes: Option<usize>,
    /// Stop after this many episodes in total (resume later with --resume).
    #[arg(long)]
    until: Option<usize>,
    /// Continue from a saved trainer state.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Write a checkpoint every N episodes.
    #[arg(long)]
    checkpoint_every: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    /// sgd or adam.
    #[arg(long)]
    optimizer: Option<OptimizerKind>,
    /// Gradient steps between target-network refreshes.
    #[arg(long)]
    target_sync: Option<usize>,
    /// Environment steps per gradient step.
    #[arg(long)]
    train_interval: Option<usize>,
    /// Append a constant time-to-go plane to the network input.
    #[arg(long)]
    time_channel: bool,
    /// Multiply the network's belief input by the number of hypotheses.
    #[arg(long)]
    scaled_belief: bool,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, value_enum)]
    policy: Option<PolicyKind>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    episodes: Option<usize>,
    /// Stratify scenarios by flux: `episodes` per flux value.
    #[arg(long)]
    per_flux: bool,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, value_delimiter = ',')]
    v_values: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    d_values: Option<Vec<f64>>,
    /// Network architectures to evaluate besides infotaxis.
    #[arg(long, value_delimiter = ',', value_parser = parse_arch)]
    archs: Option<Vec<Architecture>>,
    #[arg(long)]
    checkpoint_dir: Option<PathBuf>,
    /// Train cells whose checkpoint is missing instead of failing.
    #[arg(long)]
    train_missing: bool,
    #[arg(long)]
    episodes: Option<usize>,
}

#[derive(Args, Debug)]
struct OracleArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    depth: Option<usize>,
    /// Random start beliefs to check.
    #[arg(long)]
    states: Option<usize>,
    /// Also compare a trained network's greedy policy.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

fn parse_arch(s: &str) -> Result<Architecture, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct EvalBlock {
    episodes: usize,
    policy: PolicyKind,
    checkpoint: Option<PathBuf>,
    mix: ScenarioMix,
}

impl Default for EvalBlock {
    fn default() -> Self {
        Self {
            episodes: 5000,
            policy: PolicyKind::Infotaxis,
            checkpoint: None,
            mix: ScenarioMix::Uniform,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct SweepBlock {
    v_values: Vec<f64>,
    d_values: Vec<f64>,
    architectures: Vec<Architecture>,
    checkpoint_dir: Option<PathBuf>,
    train_missing: bool,
    episodes: usize,
}

impl Default for SweepBlock {
    fn default() -> Self {
        Self {
            v_values: vec![0.0, 2.0],
            d_values: vec![1.0, 2.0],
            architectures: vec![Architecture::Fc],
            checkpoint_dir: None,
            train_missing: false,
            episodes: 1000,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct SimulateBlock {
    episodes: usize,
    truth: Option<SourceTerm>,
    emit_field: bool,
}

impl Default for SimulateBlock {
    fn default() -> Self {
        Self {
            episodes: 1,
            truth: None,
            emit_field: false,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct OracleBlock {
    depth: usize,
    states: usize,
    checkpoint: Option<PathBuf>,
}

impl Default for OracleBlock {
    fn default() -> Self {
        Self {
            depth: 2,
            states: 100,
            checkpoint: None,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RunConfig {
    env: EnvParams,
    horizon: usize,
    seed: u64,
    output_dir: PathBuf,
    train: TrainConfig,
    eval: EvalBlock,
    simulate: SimulateBlock,
    sweep: SweepBlock,
    oracle: OracleBlock,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            env: EnvParams::default(),
            horizon: plume_ste::env::DEFAULT_HORIZON,
            seed: 0,
            output_dir: PathBuf::from("out"),
            train: TrainConfig::default(),
            eval: EvalBlock::default(),
            simulate: SimulateBlock::default(),
            sweep: SweepBlock::default(),
            oracle: OracleBlock::default(),
        }
    }
}

impl RunConfig {
    fn load(path: Option<&Path>) -> Result<Self, Error> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = fs::read_to_string(p)
                    .map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?;
                serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))
            }
        }
    }

    fn apply(&mut self, c: &Common) {
        macro_rules! set {
            ($dst:expr, $src:expr) => {
                if let Some(v) = $src.clone() {
                    $dst = v;
                }
            };
        }
        set!(self.seed, c.seed);
        set!(self.output_dir, c.out);
        set!(self.env.nx, c.nx);
        set!(self.env.ny, c.ny);
        set!(self.env.fluxes, c.fluxes);
        set!(self.env.wind_speed, c.wind_speed);
        set!(self.env.diffusivity, c.diffusivity);
        set!(self.env.h_max, c.h_max);
        set!(self.horizon, c.horizon);
    }

    /// Folds shared keys into the blocks and checks everything.
    fn finish(&mut self) -> Result<(), Error> {
        self.train.horizon = self.horizon;
        self.train.seed = self.seed;
        self.env.validate()?;
        self.train.validate()?;
        if self.horizon == 0 {
            return Err(Error::Config("horizon must be positive".into()));
        }
        Ok(())
    }

    fn hash(&self) -> String {
        let mut value = serde_json::to_value(self).expect("config serializes");
        // Where results land does not change them.
        value.as_object_mut().expect("config is an object").remove("output_dir");
        let json = value.to_string();
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    fn header(&self) -> String {
        format!("# plume-ste config_sha256={} seed={}", self.hash(), self.seed)
    }

    /// Creates the output directory and writes the resolved config into it.
    fn prepare_output(&self) -> anyhow::Result<()> {
        fs::create_dir_all(&self.output_dir)
            .with_context(|| format!("creating {}", self.output_dir.display()))?;
        let path = self.output_dir.join("config.json");
        fs::write(&path, serde_json::to_string_pretty(self)? + "\n")
            .with_context(|| format!("writing {}", path.display()))?;
        Ok(())
    }

    fn create(&self, name: &str) -> anyhow::Result<BufWriter<File>> {
        let path = self.output_dir.join(name);
        let mut out = BufWriter::new(File::create(&path).with_context(|| format!("creating {}", path.display()))?);
        writeln!(out, "{}", self.header())?;
        Ok(out)
    }
}

fn parse_truth(s: &str, params: &EnvParams) -> Result<SourceTerm, Error> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    let bad = || Error::Config(format!("--truth expects x,y,flux, got {s:?}"));
    if parts.len() != 3 {
        return Err(bad());
    }
    let x: usize = parts[0].parse().map_err(|_| bad())?;
    let y: usize = parts[1].parse().map_err(|_| bad())?;
    let phi: f64 = parts[2].parse().map_err(|_| bad())?;
    let phi_index = params
        .flux_index(phi)
        .ok_or_else(|| Error::Config(format!("flux {phi} is not one of {:?}", params.fluxes)))?;
    let truth = SourceTerm::new(x, y, phi_index);
    truth.validate(params).map_err(|e| Error::Config(e.to_string()))?;
    Ok(truth)
}

fn build_policy(kind: PolicyKind, checkpoint: Option<&Path>, params: &EnvParams) -> Result<Box<dyn Policy>, Error> {
    Ok(match kind {
        PolicyKind::Infotaxis => Box::new(Infotaxis),
        PolicyKind::Random => Box::new(RandomPolicy),
        PolicyKind::Checkpoint => {
            let path = checkpoint.ok_or_else(|| Error::Config("--policy checkpoint needs --checkpoint".into()))?;
            Box::new(DrlPolicy::new(NetworkWeights::load_checkpoint(path)?, params)?)
        }
    })
}

fn simulate(mut cfg: RunConfig, args: SimulateArgs) -> anyhow::Result<()> {
    cfg.apply(&args.common);
    if let Some(p) = args.policy {
        cfg.eval.policy = p;
    }
    if args.checkpoint.is_some() {
        cfg.eval.checkpoint = args.checkpoint.clone();
    }
    if let Some(n) = args.episodes {
        cfg.simulate.episodes = n;
    }
    if let Some(t) = &args.truth {
        cfg.simulate.truth = Some(parse_truth(t, &cfg.env)?);
    }
    cfg.simulate.emit_field |= args.emit_field;
    cfg.finish()?;
    let policy = build_policy(cfg.eval.policy, cfg.eval.checkpoint.as_deref(), &cfg.env)?;
    cfg.prepare_output()?;
    let env = Environment::new(cfg.env.clone(), cfg.horizon)?;
    let plume = PlumeModel::new(cfg.env.clone())?;
    for i in 0..cfg.simulate.episodes {
        let scenario = match cfg.simulate.truth {
            Some(truth) => Scenario {
                truth,
                seed: episode_seed(cfg.seed, i as u64),
            },
            None => scenario_for(&env, ScenarioMix::Uniform, cfg.seed, i),
        };
        let record = run_episode(policy.as_ref(), &env, scenario)?;
        let mut out = cfg.create(&format!("trajectory_{i}.csv"))?;
        let t = scenario.truth;
        writeln!(
            out,
            "# truth={},{},{} initial_hits={} estimate={},{},{} estimate_prob={} success={} cumulative_entropy={}",
            t.xs,
            t.ys,
            t.phi(&cfg.env),
            record.initial_hits,
            record.estimate.xs,
            record.estimate.ys,
            record.estimate.phi(&cfg.env),
            record.estimate_prob,
            record.success,
            record.cumulative_entropy
        )?;
        record.write_csv(&mut out)?;
        out.flush()?;
        if cfg.simulate.emit_field {
            let mut f = cfg.create(&format!("field_{i}.csv"))?;
            plume.mean_hit_map(scenario.truth).write_csv(&mut f)?;
            f.flush()?;
        }
        println!(
            "episode {i}: truth ({},{},{}) -> estimate ({},{},{}) p={:.3} success={} H_cum={:.3}",
            t.xs,
            t.ys,
            t.phi(&cfg.env),
            record.estimate.xs,
            record.estimate.ys,
            record.estimate.phi(&cfg.env),
            record.estimate_prob,
            record.success,
            record.cumulative_entropy
        );
    }
    Ok(())
}

fn train(mut cfg: RunConfig, args: TrainArgs) -> anyhow::Result<()> {
    let mut trainer = match &args.resume {
        Some(path) => {
            let trainer = Trainer::load(path)?;
            cfg.env = trainer.params.clone();
            cfg.train = trainer.config.clone();
            cfg.horizon = trainer.config.horizon;
            cfg.seed = trainer.config.seed;
            if let Some(out) = &args.common.out {
                cfg.output_dir = out.clone();
            }
            Some(trainer)
        }
        None => {
            cfg.apply(&args.common);
            None
        }
    };
    if let Some(a) = args.arch {
        cfg.train.architecture = a;
    }
    if let Some(n) = args.episodes {
        cfg.train.episodes = n;
    }
    if let Some(b) = args.batch_size {
        cfg.train.batch_size = b;
    }
    if let Some(lr) = args.learning_rate {
        cfg.train.learning_rate = lr;
    }
    if let Some(o) = args.optimizer {
        cfg.train.optimizer = o;
    }
    if let Some(n) = args.target_sync {
        cfg.train.target_sync_interval = n;
    }
    if let Some(k) = args.train_interval {
        cfg.train.train_interval = k;
    }
    cfg.train.time_channel |= args.time_channel;
    cfg.train.scaled_belief |= args.scaled_belief;
    cfg.finish()?;
    let mut trainer = match trainer.take() {
        Some(mut t) => {
            if t.config.architecture != cfg.train.architecture {
                return Err(Error::Checkpoint(format!(
                    "trainer state holds a {} network, --arch asks for {}",
                    t.config.architecture, cfg.train.architecture
                ))
                .into());
            }
            t.extend_to(cfg.train.episodes);
            t
        }
        None => Trainer::new(cfg.train.clone(), cfg.env.clone())?,
    };
    cfg.prepare_output()?;
    let arch = cfg.train.architecture;
    let every = args.checkpoint_every.unwrap_or(0);
    let until = args.until.unwrap_or(cfg.train.episodes);
    let dir = cfg.output_dir.clone();
    let report = (cfg.train.episodes / 100).max(1);
    let result = trainer.run_until(until, |t, row| {
        let done = t.episodes_done();
        if every > 0 && done % every == 0 {
            t.weights().save_checkpoint(dir.join(format!("{arch}_ep{done}.json")))?;
        }
        if done % report == 0 {
            let recent = &t.history()[t.history().len().saturating_sub(report)..];
            let losses: Vec<f64> = recent.iter().map(|r| r.loss).filter(|l| l.is_finite()).collect();
            eprintln!(
                "episode {done}/{}: loss {:.5} cumulative entropy {:.3} epsilon {:.3}",
                t.config.episodes,
                losses.iter().sum::<f64>() / losses.len().max(1) as f64,
                recent.iter().map(|r| r.cumulative_entropy).sum::<f64>() / recent.len() as f64,
                row.epsilon
            );
        }
        Ok(())
    });
    // Persist whatever was reached, even on divergence.
    let mut history = cfg.create("history.csv")?;
    write_history(trainer.history(), &mut history)?;
    history.flush()?;
    result?;
    trainer.weights().save_checkpoint(dir.join(format!("{arch}.json")))?;
    trainer.save(dir.join("trainer_state.json"))?;
    println!(
        "trained {} episodes of {}; checkpoint {}",
        trainer.episodes_done(),
        trainer.config.episodes,
        dir.join(format!("{arch}.json")).display()
    );
    Ok(())
}

fn eval(mut cfg: RunConfig, args: EvalArgs) -> anyhow::Result<()> {
    cfg.apply(&args.common);
    if let Some(p) = args.policy {
        cfg.eval.policy = p;
    }
    if args.checkpoint.is_some() {
        cfg.eval.checkpoint = args.checkpoint.clone();
    }
    if let Some(n) = args.episodes {
        cfg.eval.episodes = n;
    }
    if args.per_flux {
        cfg.eval.mix = ScenarioMix::PerFlux {
            episodes_per_flux: cfg.eval.episodes,
        };
    }
    cfg.finish()?;
    let policy = build_policy(cfg.eval.policy, cfg.eval.checkpoint.as_deref(), &cfg.env)?;
    cfg.prepare_output()?;
    let env = Environment::new(cfg.env.clone(), cfg.horizon)?;
    let episodes = match cfg.eval.mix {
        ScenarioMix::Uniform => cfg.eval.episodes,
        ScenarioMix::PerFlux { episodes_per_flux } => episodes_per_flux * cfg.env.n_phi(),
    };
    let config = EvalConfig {
        episodes,
        master_seed: cfg.seed,
        mix: cfg.eval.mix,
    };
    let summary = evaluate(policy.as_ref(), &env, &config)?;
    let mut metrics = cfg.create("metrics.csv")?;
    write_metrics_csv(&metric_rows(&summary, &cfg.env), &mut metrics)?;
    metrics.flush()?;
    let mut loc = cfg.create("per_location.csv")?;
    write_location_csv(&summary, &cfg.env, &mut loc)?;
    loc.flush()?;
    if args.per_flux {
        let mut f = cfg.create("per_flux.csv")?;
        writeln!(f, "flux,episodes,successes,success_rate")?;
        for (phi, t) in cfg.env.fluxes.iter().zip(&summary.per_flux) {
            writeln!(f, "{phi},{},{},{}", t.episodes, t.successes, t.rate())?;
        }
        f.flush()?;
    }
    let json = serde_json::json!({
        "config_sha256": cfg.hash(),
        "seed": cfg.seed,
        "summary": summary,
    });
    fs::write(cfg.output_dir.join("summary.json"), serde_json::to_string_pretty(&json)? + "\n")?;
    println!(
        "{}: {} episodes, success {:.2}%, mean cumulative entropy {:.3}",
        summary.policy,
        summary.episodes,
        100.0 * summary.success_rate,
        summary.mean_cumulative_entropy
    );
    for (phi, t) in cfg.env.fluxes.iter().zip(&summary.per_flux) {
        println!("  flux {phi}: {:.2}% of {}", 100.0 * t.rate(), t.episodes);
    }
    Ok(())
}

fn sweep(mut cfg: RunConfig, args: SweepArgs) -> anyhow::Result<()> {
    cfg.apply(&args.common);
    if let Some(v) = &args.v_values {
        cfg.sweep.v_values = v.clone();
    }
    if let Some(d) = &args.d_values {
        cfg.sweep.d_values = d.clone();
    }
    if let Some(a) = &args.archs {
        cfg.sweep.architectures = a.clone();
    }
    if args.checkpoint_dir.is_some() {
        cfg.sweep.checkpoint_dir = args.checkpoint_dir.clone();
    }
    cfg.sweep.train_missing |= args.train_missing;
    if let Some(n) = args.episodes {
        cfg.sweep.episodes = n;
    }
    cfg.finish()?;
    cfg.prepare_output()?;
    let ckpt_dir = cfg
        .sweep
        .checkpoint_dir
        .clone()
        .unwrap_or_else(|| cfg.output_dir.join("checkpoints"));
    let train_cfg = cfg.sweep.train_missing.then(|| cfg.train.clone());
    let config = EvalConfig {
        episodes: cfg.sweep.episodes,
        master_seed: cfg.seed,
        mix: ScenarioMix::Uniform,
    };
    let archs = cfg.sweep.architectures.clone();
    let cells = sensitivity_sweep(
        &cfg.env,
        cfg.horizon,
        &cfg.sweep.v_values,
        &cfg.sweep.d_values,
        &config,
        |params| {
            let mut policies: Vec<Box<dyn Policy>> = vec![Box::new(Infotaxis)];
            for &arch in &archs {
                let net = load_or_train(&ckpt_dir, arch, params, train_cfg.as_ref())?;
                policies.push(Box::new(DrlPolicy::new(net, params)?));
            }
            Ok(policies)
        },
    )?;
    let mut out = cfg.create("sweep.csv")?;
    let mut rows = Vec::new();
    for cell in &cells {
        let params = EnvParams {
            wind_speed: cell.wind_speed,
            diffusivity: cell.diffusivity,
            ..cfg.env.clone()
        };
        for s in &cell.summaries {
            rows.extend(metric_rows(s, &params).into_iter().filter(|r| r.metric.starts_with("relative_drps")));
            println!(
                "V={} D={} {}: relative DRPS median x={:.3} y={:.3} phi={:.3}",
                cell.wind_speed,
                cell.diffusivity,
                s.policy,
                s.relative_drps[0].median,
                s.relative_drps[1].median,
                s.relative_drps[2].median
            );
        }
    }
    write_metrics_csv(&rows, &mut out)?;
    out.flush()?;
    let json = serde_json::json!({ "config_sha256": cfg.hash(), "seed": cfg.seed, "cells": cells });
    fs::write(cfg.output_dir.join("sweep.json"), serde_json::to_string_pretty(&json)? + "\n")?;
    Ok(())
}

fn oracle(mut cfg: RunConfig, args: OracleArgs) -> anyhow::Result<()> {
    // Small-instance defaults unless overridden.
    if args.common.nx.is_none() && cfg.env.nx == EnvParams::default().nx {
        cfg.env = EnvParams {
            nx: 3,
            ny: 3,
            fluxes: vec![1.0],
            h_max: 2,
            ..cfg.env
        };
        cfg.horizon = 2;
    }
    cfg.apply(&args.common);
    if let Some(d) = args.depth {
        cfg.oracle.depth = d;
    }
    if let Some(n) = args.states {
        cfg.oracle.states = n;
    }
    if args.checkpoint.is_some() {
        cfg.oracle.checkpoint = args.checkpoint.clone();
    }
    cfg.finish()?;
    let depth = cfg.oracle.depth;
    let env = Environment::new(cfg.env.clone(), depth.max(1))?;
    let net = cfg
        .oracle
        .checkpoint
        .as_deref()
        .map(NetworkWeights::load_checkpoint)
        .transpose()?;
    if let Some(n) = &net {
        DrlPolicy::new(n.clone(), &cfg.env)?;
    }
    println!("{}", cfg.header());
    let mut rng = EpisodeRng::seed_from_u64(cfg.seed);
    let (mut agree, mut bounded, mut drl_gap) = (0, 0, 0.0f64);
    for i in 0..cfg.oracle.states {
        let state = random_state(&env, &mut rng)?;
        let opt = exhaustive_oracle(&env, &state, depth)?;
        let depth1 = exhaustive_oracle(&env, &state, 1)?;
        let info = tied_actions(&env, &state)?;
        agree += (depth1.best_actions == info) as usize;
        let greedy = policy_tree_value(&env, &state, depth, &|s: &BeliefState| tied_actions(&env, s))?;
        bounded += (opt.value <= greedy + 1e-12) as usize;
        let mut line = format!(
            "state {i}: optimal {:.9} infotaxis {:.9} best {:?}",
            opt.value,
            greedy,
            opt.best_actions.iter().map(|a| a.name()).collect::<Vec<_>>()
        );
        if let Some(n) = &net {
            let drl = policy_tree_value(&env, &state, depth, &|s: &BeliefState| {
                Ok(bellman_backup(&env, s, n)?.tied_actions())
            })?;
            let gap = if opt.value > 0.0 { drl / opt.value - 1.0 } else { 0.0 };
            drl_gap = drl_gap.max(gap);
            line.push_str(&format!(" drl {drl:.9} gap {:.4}%", 100.0 * gap));
        }
        println!("{line}");
    }
    println!(
        "depth-1 agreement with infotaxis: {agree}/{n}; optimal <= infotaxis: {bounded}/{n}",
        n = cfg.oracle.states
    );
    if net.is_some() {
        println!("worst greedy-network gap to optimal: {:.4}%", 100.0 * drl_gap);
    }
    Ok(())
}

/// A random position and a random belief, at step 0 of the oracle horizon.
fn random_state(env: &Environment, rng: &mut EpisodeRng) -> Result<BeliefState, Error> {
    use rand::Rng;
    let p = env.params();
    let weights = (0..p.n_hypotheses()).map(|_| rng.gen::<f64>().powi(3)).collect();
    Ok(BeliefState {
        pos: GridPos::new(rng.gen_range(0..p.nx), rng.gen_range(0..p.ny)),
        belief: Belief::from_weights(p, weights)?,
        step: 0,
        horizon: env.horizon(),
    })
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::Checkpoint(_)) => 2,
        Some(Error::Divergence { .. }) => 3,
        Some(Error::OracleGuard { .. }) => 4,
        _ => 1,
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    let cfg = RunConfig::load(cli.config.as_deref())?;
    match cli.command {
        Command::Simulate(a) => simulate(cfg, a),
        Command::Train(a) => train(cfg, a),
        Command::Eval(a) => eval(cfg, a),
        Command::Sweep(a) => sweep(cfg, a),
        Command::Oracle(a) => oracle(cfg, a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
