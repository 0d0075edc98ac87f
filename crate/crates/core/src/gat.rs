//! Grounded action transformation.
//!
//! A forward model learns how the deployment world responds to an action; an
//! inverse model, trained in the simulator, finds the simulator action that
//! produces a given next state. Chaining them replaces each policy action in
//! simulation with one whose simulated outcome mimics the deployment world.
//! In the prompted variant the forward model also sees per-lane dynamics
//! estimates from an [`Oracle`], passed through a shared fusion layer.

use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dqn::{evaluate_episode, train_episode, DqnAgent, EpisodeRecord, Grounding, NoGrounding};
use crate::env::{EpisodeStats, Observation, TrafficEnv, OBS_DIM};
use crate::error::{Error, Result};
use crate::metrics::{GapReport, SeedResult};
use crate::neural::{argmax, cross_entropy_loss, mse_loss, Adam, Gradients, Mlp, MlpSpec, OutputActivation};
use crate::oracle::{DynamicsEstimate, Oracle};
use crate::rng::{stream_rng, Stream};
use crate::scenario::{DomainContext, ExperimentConfig, GatParams, Setting, NUM_LANES, NUM_PHASES};

/// Width of the per-lane fusion input.
pub const LANE_FEATURES: usize = 11;

/// One decision step of a rollout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionRecord {
    pub s: Observation,
    pub a: usize,
    pub s_next: Observation,
    pub r: f64,
    pub ctx: DomainContext,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lane_estimates: Option<Vec<DynamicsEstimate>>,
}

impl TransitionRecord {
    pub fn validate(&self) -> Result<()> {
        if self.a >= NUM_PHASES {
            return Err(Error::PhaseOutOfRange(self.a));
        }
        match &self.lane_estimates {
            Some(e) if e.len() != NUM_LANES => Err(Error::DimensionMismatch { expected: NUM_LANES, actual: e.len() }),
            _ => Ok(()),
        }
    }
}

/// Append-only transition collection; saved as one JSON record per line.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub records: Vec<TransitionRecord>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn extend(&mut self, records: Vec<TransitionRecord>) {
        self.records.extend(records);
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        for r in &self.records {
            let line = serde_json::to_string(r).expect("plain data");
            writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let r: TransitionRecord =
                serde_json::from_str(line).map_err(|e| Error::format("dataset", path, format!("line {}: {e}", i + 1)))?;
            r.validate().map_err(|e| Error::format("dataset", path, format!("line {}: {e}", i + 1)))?;
            records.push(r);
        }
        Ok(Dataset { records })
    }
}

/// Fusion input for one lane: scaled count, scaled estimate, context one-hots.
pub fn lane_features(count: u32, est: &DynamicsEstimate, ctx: DomainContext) -> [f64; LANE_FEATURES] {
    let base = Setting::V0.profile();
    let mut x = [0.0; LANE_FEATURES];
    x[0] = f64::from(count) / 20.0;
    x[1] = est.ac / base.accel;
    x[2] = est.ad / base.decel;
    x[3] = est.aed / base.e_decel;
    x[4] = est.adl / base.startup_delay.max(1.0);
    x[5 + ctx.weather.index()] = 1.0;
    x[8 + ctx.road_type.index()] = 1.0;
    x
}

/// Concatenated per-lane fusion outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedFeatures(pub Vec<f64>);

struct FusionTrace {
    pre: Vec<Vec<f64>>,
    caches: Vec<crate::neural::ForwardCache>,
}

/// `ReLU(fusion(x_l))` for every lane, in lane order, with one shared layer.
pub fn fuse_features(
    fusion: &Mlp,
    s: &Observation,
    ctx: DomainContext,
    estimates: &[DynamicsEstimate],
) -> Result<FusedFeatures> {
    Ok(FusedFeatures(fuse_traced(fusion, s, ctx, estimates)?.0))
}

fn fuse_traced(
    fusion: &Mlp,
    s: &Observation,
    ctx: DomainContext,
    estimates: &[DynamicsEstimate],
) -> Result<(Vec<f64>, FusionTrace)> {
    if estimates.len() != NUM_LANES {
        return Err(Error::DimensionMismatch { expected: NUM_LANES, actual: estimates.len() });
    }
    let width = fusion.spec().output_dim();
    let mut out = Vec::with_capacity(NUM_LANES * width);
    let mut trace = FusionTrace { pre: Vec::with_capacity(NUM_LANES), caches: Vec::with_capacity(NUM_LANES) };
    for (count, est) in s.lane_counts.iter().zip(estimates) {
        let (pre, cache) = fusion.forward(&lane_features(*count, est, ctx))?;
        out.extend(pre.iter().map(|v| v.max(0.0)));
        trace.pre.push(pre);
        trace.caches.push(cache);
    }
    Ok((out, trace))
}

fn one_hot(a: usize) -> [f64; NUM_PHASES] {
    let mut v = [0.0; NUM_PHASES];
    v[a] = 1.0;
    v
}

/// Predicts the deployment world's next observation from `(s, a, X)`.
#[derive(Debug, Clone)]
pub struct ForwardModel {
    fusion: Mlp,
    trunk: Mlp,
    fusion_opt: Adam,
    trunk_opt: Adam,
    grad_clip: f64,
    fused: bool,
}

impl ForwardModel {
    /// `fused = false` feeds zeros in place of the fusion features.
    pub fn new(p: &GatParams, fused: bool, rng: &mut impl Rng) -> Result<Self> {
        let fusion = Mlp::new(MlpSpec::new(vec![LANE_FEATURES, p.fusion_width], OutputActivation::Identity)?, rng);
        let mut widths = vec![OBS_DIM + NUM_PHASES + NUM_LANES * p.fusion_width];
        widths.extend(&p.forward_hidden);
        widths.push(OBS_DIM);
        let trunk = Mlp::new(MlpSpec::new(widths, OutputActivation::Identity)?, rng);
        Self::from_parts(fusion, trunk, fused, p.forward_lr, p.grad_clip)
    }

    pub fn from_parts(fusion: Mlp, trunk: Mlp, fused: bool, lr: f64, grad_clip: f64) -> Result<Self> {
        if fusion.spec().input_dim() != LANE_FEATURES {
            return Err(Error::DimensionMismatch { expected: LANE_FEATURES, actual: fusion.spec().input_dim() });
        }
        let want = OBS_DIM + NUM_PHASES + NUM_LANES * fusion.spec().output_dim();
        if trunk.spec().input_dim() != want || trunk.spec().output_dim() != OBS_DIM {
            return Err(Error::DimensionMismatch { expected: want, actual: trunk.spec().input_dim() });
        }
        // Clipping is applied jointly across both networks in `train`.
        Ok(ForwardModel {
            fusion,
            trunk,
            fusion_opt: Adam::new(lr, f64::INFINITY)?,
            trunk_opt: Adam::new(lr, f64::INFINITY)?,
            grad_clip: grad_clip,
            fused,
        })
    }

    pub fn fused(&self) -> bool {
        self.fused
    }

    pub fn fusion(&self) -> &Mlp {
        &self.fusion
    }

    pub fn trunk(&self) -> &Mlp {
        &self.trunk
    }

    pub fn features_len(&self) -> usize {
        NUM_LANES * self.fusion.spec().output_dim()
    }

    /// Fusion features for a state, or zeros when the model is not fused.
    pub fn features(&self, s: &Observation, ctx: DomainContext, estimates: Option<&[DynamicsEstimate]>) -> Result<Vec<f64>> {
        if !self.fused {
            return Ok(vec![0.0; self.features_len()]);
        }
        let est = estimates.ok_or_else(|| Error::config("lane_estimates", "a fused forward model needs lane estimates"))?;
        Ok(fuse_features(&self.fusion, s, ctx, est)?.0)
    }

    /// Raw next-observation vector (not rounded).
    pub fn predict(&self, s: &Observation, a: usize, x: &[f64]) -> Result<Vec<f64>> {
        self.trunk.predict(&self.trunk_input(s, a, x)?)
    }

    pub fn predict_record(&self, r: &TransitionRecord) -> Result<Vec<f64>> {
        let x = self.features(&r.s, r.ctx, r.lane_estimates.as_deref())?;
        self.predict(&r.s, r.a, &x)
    }

    fn trunk_input(&self, s: &Observation, a: usize, x: &[f64]) -> Result<Vec<f64>> {
        if a >= NUM_PHASES {
            return Err(Error::PhaseOutOfRange(a));
        }
        if x.len() != self.features_len() {
            return Err(Error::DimensionMismatch { expected: self.features_len(), actual: x.len() });
        }
        let mut input = s.to_vec();
        input.extend(one_hot(a));
        input.extend_from_slice(x);
        Ok(input)
    }

    /// Loss and gradients of one record.
    fn record_grads(&self, r: &TransitionRecord) -> Result<(f64, Gradients, Option<Gradients>)> {
        let (x, trace) = if self.fused {
            let est = r.lane_estimates.as_deref().ok_or_else(|| Error::config("lane_estimates", "missing on a record"))?;
            let (x, t) = fuse_traced(&self.fusion, &r.s, r.ctx, est)?;
            (x, Some(t))
        } else {
            (vec![0.0; self.features_len()], None)
        };
        let (out, cache) = self.trunk.forward(&self.trunk_input(&r.s, r.a, &x)?)?;
        let (loss, grad) = mse_loss(&out, &r.s_next.to_vec())?;
        let (tg, gin) = self.trunk.backward(&cache, &grad)?;
        let fg = match trace {
            None => None,
            Some(t) => {
                let width = self.fusion.spec().output_dim();
                let mut acc = Gradients::zeros_like(&self.fusion);
                let offset = OBS_DIM + NUM_PHASES;
                for (l, (pre, c)) in t.pre.iter().zip(&t.caches).enumerate() {
                    let block = &gin[offset + l * width..offset + (l + 1) * width];
                    let gpre: Vec<f64> = block.iter().zip(pre).map(|(g, z)| if *z > 0.0 { *g } else { 0.0 }).collect();
                    let (g, _) = self.fusion.backward(c, &gpre)?;
                    acc.add_assign(&g);
                }
                Some(acc)
            }
        };
        Ok((loss, tg, fg))
    }

    /// Minibatch Adam epochs on MSE to the next observation. Returns the
    /// mean loss of the last epoch.
    pub fn train(&mut self, data: &[TransitionRecord], epochs: u32, batch: usize, rng: &mut impl Rng) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut last = 0.0;
        for _ in 0..epochs {
            order.shuffle(rng);
            let mut total = 0.0;
            for chunk in order.chunks(batch.max(1)) {
                let mut tg = Gradients::zeros_like(&self.trunk);
                let mut fg = Gradients::zeros_like(&self.fusion);
                for &i in chunk {
                    let (loss, t, f) = self.record_grads(&data[i])?;
                    total += loss;
                    tg.add_assign(&t);
                    if let Some(f) = f {
                        fg.add_assign(&f);
                    }
                }
                let k = 1.0 / chunk.len() as f64;
                tg.scale(k);
                fg.scale(k);
                let norm = (tg.sum_squares() + fg.sum_squares()).sqrt();
                if norm > self.grad_clip {
                    tg.scale(self.grad_clip / norm);
                    fg.scale(self.grad_clip / norm);
                }
                self.trunk_opt.step(&mut self.trunk, &tg);
                if self.fused {
                    self.fusion_opt.step(&mut self.fusion, &fg);
                }
            }
            last = total / data.len() as f64;
        }
        Ok(last)
    }

    /// Mean MSE over `data` without training.
    pub fn evaluate(&self, data: &[TransitionRecord]) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let mut total = 0.0;
        for r in data {
            total += mse_loss(&self.predict_record(r)?, &r.s_next.to_vec())?.0;
        }
        Ok(total / data.len() as f64)
    }
}

/// Predicts which simulator action leads from `s` to a target next state.
#[derive(Debug, Clone)]
pub struct InverseModel {
    net: Mlp,
    opt: Adam,
}

impl InverseModel {
    pub fn new(p: &GatParams, rng: &mut impl Rng) -> Result<Self> {
        let mut widths = vec![2 * OBS_DIM];
        widths.extend(&p.inverse_hidden);
        widths.push(NUM_PHASES);
        let net = Mlp::new(MlpSpec::new(widths, OutputActivation::SoftmaxCe)?, rng);
        Self::from_net(net, p.inverse_lr, p.grad_clip)
    }

    pub fn from_net(net: Mlp, lr: f64, grad_clip: f64) -> Result<Self> {
        if net.spec().input_dim() != 2 * OBS_DIM || net.spec().output_dim() != NUM_PHASES {
            return Err(Error::DimensionMismatch { expected: 2 * OBS_DIM, actual: net.spec().input_dim() });
        }
        Ok(InverseModel { net, opt: Adam::new(lr, grad_clip)? })
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    pub fn logits(&self, s_next: &[f64], s: &[f64]) -> Result<Vec<f64>> {
        if s_next.len() != OBS_DIM || s.len() != OBS_DIM {
            return Err(Error::DimensionMismatch { expected: OBS_DIM, actual: s_next.len().max(s.len()) });
        }
        self.net.predict(&[s_next, s].concat())
    }

    pub fn predict(&self, s_next: &[f64], s: &[f64]) -> Result<usize> {
        Ok(argmax(&self.logits(s_next, s)?))
    }

    /// Minibatch cross-entropy epochs on `(s_next, s) -> a`. Returns the
    /// mean loss of the last epoch.
    pub fn train(&mut self, data: &[TransitionRecord], epochs: u32, batch: usize, rng: &mut impl Rng) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let inputs: Vec<Vec<f64>> = data.iter().map(|r| [r.s_next.to_vec(), r.s.to_vec()].concat()).collect();
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut last = 0.0;
        for _ in 0..epochs {
            order.shuffle(rng);
            let mut total = 0.0;
            for chunk in order.chunks(batch.max(1)) {
                let mut grads = Gradients::zeros_like(&self.net);
                for &i in chunk {
                    let (logits, cache) = self.net.forward(&inputs[i])?;
                    let (loss, g) = cross_entropy_loss(&logits, data[i].a)?;
                    total += loss;
                    grads.add_assign(&self.net.backward(&cache, &g)?.0);
                }
                grads.scale(1.0 / chunk.len() as f64);
                self.opt.step(&mut self.net, &grads);
            }
            last = total / data.len() as f64;
        }
        Ok(last)
    }

    /// Fraction of records whose action is the argmax prediction.
    pub fn accuracy(&self, data: &[TransitionRecord]) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let mut hits = 0usize;
        for r in data {
            if self.predict(&r.s_next.to_vec(), &r.s.to_vec())? == r.a {
                hits += 1;
            }
        }
        Ok(hits as f64 / data.len() as f64)
    }
}

/// `argmax inverse(forward(s, a, X), s)`, with `X` built from oracle
/// estimates when the forward model is fused.
pub fn ground_action(
    s: &Observation,
    a: usize,
    forward: &ForwardModel,
    inverse: &InverseModel,
    oracle: Option<&Oracle>,
    ctx: DomainContext,
) -> Result<usize> {
    let estimates = if forward.fused() {
        let oracle = oracle.ok_or_else(|| Error::OracleConfig("a fused forward model needs an oracle".into()))?;
        Some(oracle.query_lanes(ctx, &s.lane_counts)?)
    } else {
        None
    };
    let x = forward.features(s, ctx, estimates.as_ref().map(|e| e.as_slice()))?;
    let predicted = forward.predict(s, a, &x)?;
    inverse.predict(&predicted, &s.to_vec())
}

/// [`Grounding`] through a trained forward/inverse pair.
pub struct Grounder<'a> {
    pub forward: &'a ForwardModel,
    pub inverse: &'a InverseModel,
    pub oracle: Option<&'a Oracle>,
    pub ctx: DomainContext,
    /// Actions grounded so far.
    pub calls: u64,
    /// How many of them were changed.
    pub changed: u64,
}

impl Grounding for Grounder<'_> {
    fn ground(&mut self, obs: &Observation, action: usize) -> Result<usize> {
        let g = ground_action(obs, action, self.forward, self.inverse, self.oracle, self.ctx)?;
        self.calls += 1;
        if g != action {
            self.changed += 1;
        }
        Ok(g)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GatMode {
    Direct,
    VanillaGat,
    PromptGat,
}

impl GatMode {
    pub const ALL: [GatMode; 3] = [GatMode::Direct, GatMode::VanillaGat, GatMode::PromptGat];

    pub fn as_str(self) -> &'static str {
        match self {
            GatMode::Direct => "direct",
            GatMode::VanillaGat => "vanilla_gat",
            GatMode::PromptGat => "prompt_gat",
        }
    }
}

impl std::fmt::Display for GatMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for GatMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "direct" => Ok(GatMode::Direct),
            "vanilla" | "vanilla_gat" => Ok(GatMode::VanillaGat),
            "prompt" | "prompt_gat" => Ok(GatMode::PromptGat),
            other => Err(Error::config("mode", format!("unknown mode `{other}` (direct|vanilla|prompt)"))),
        }
    }
}

/// DQN training in the simulator with its own exploration, replay and
/// arrival streams. Episode `k` always sees arrival stream `k`.
#[derive(Debug, Clone)]
pub struct PolicyTrainer {
    pub agent: DqnAgent,
    env: TrafficEnv,
    explore: ChaCha8Rng,
    replay: ChaCha8Rng,
    seed: u64,
    pub curve: Vec<EpisodeRecord>,
    /// Per-episode step logs, collected once [`enable_episode_logs`](Self::enable_episode_logs) is called.
    pub episode_logs: Vec<(u64, String)>,
}

impl PolicyTrainer {
    pub fn new(cfg: &ExperimentConfig, seed: u64) -> Result<Self> {
        let agent = DqnAgent::new(&cfg.dqn, &cfg.trainer, &mut stream_rng(seed, Stream::Init, 0))?;
        Self::with_agent(cfg, seed, agent)
    }

    /// Continue training an existing agent (e.g. from a checkpoint).
    pub fn with_agent(cfg: &ExperimentConfig, seed: u64, agent: DqnAgent) -> Result<Self> {
        Ok(PolicyTrainer {
            agent,
            env: TrafficEnv::from_config(cfg, cfg.scenario.sim_profile)?,
            explore: stream_rng(seed, Stream::Exploration, 0),
            replay: stream_rng(seed, Stream::Replay, 0),
            seed,
            curve: Vec::new(),
            episode_logs: Vec::new(),
        })
    }

    pub fn env_mut(&mut self) -> &mut TrafficEnv {
        &mut self.env
    }

    pub fn enable_episode_logs(&mut self) {
        self.env.enable_log();
    }

    pub fn train_episodes(&mut self, n: u32, grounding: &mut dyn Grounding) -> Result<()> {
        for _ in 0..n {
            let episode = self.agent.episodes();
            self.env.reset_with_rng(stream_rng(self.seed, Stream::Arrivals, episode));
            let rec = train_episode(&mut self.agent, &mut self.env, grounding, &mut self.explore, &mut self.replay)?;
            self.curve.push(rec);
            if self.env.log().is_some() {
                self.episode_logs.push((episode, self.env.log_csv()));
            }
        }
        Ok(())
    }
}

/// Epsilon-greedy rollout without learning. Lane estimates are attached
/// when an oracle is given.
pub fn rollout(
    agent: &DqnAgent,
    env: &mut TrafficEnv,
    epsilon: f64,
    explore: &mut impl Rng,
    ctx: DomainContext,
    oracle: Option<&Oracle>,
) -> Result<Vec<TransitionRecord>> {
    let mut out = Vec::new();
    let mut s = env.observe();
    while !env.is_done() {
        let a = agent.act(&s.to_vec(), epsilon, explore)?;
        let lane_estimates = match oracle {
            Some(o) => Some(o.query_lanes(ctx, &s.lane_counts)?.to_vec()),
            None => None,
        };
        let step = env.step(a)?;
        out.push(TransitionRecord { s, a, s_next: step.next_obs, r: step.reward, ctx, lane_estimates });
        s = step.next_obs;
    }
    Ok(out)
}

/// Per-iteration diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationLog {
    pub iteration: u32,
    pub d_sim: usize,
    pub d_real: usize,
    pub forward_loss: Option<f64>,
    pub inverse_loss: Option<f64>,
    pub grounded: u64,
    pub grounded_changed: u64,
}

/// Everything a run produces.
pub struct GatOutcome {
    pub mode: GatMode,
    pub seed: u64,
    pub agent: DqnAgent,
    pub forward: Option<ForwardModel>,
    pub inverse: Option<InverseModel>,
    pub d_sim: Dataset,
    pub d_real: Dataset,
    pub curve: Vec<EpisodeRecord>,
    pub episode_logs: Vec<(u64, String)>,
    pub iterations: Vec<IterationLog>,
    pub result: SeedResult,
}

impl GatOutcome {
    pub fn report(&self, setting: &str) -> Result<GapReport> {
        GapReport::aggregate(self.mode.as_str(), setting, std::slice::from_ref(&self.result))
    }
}

/// Optional knobs for [`run_prompt_gat_with`].
#[derive(Default)]
pub struct RunOptions {
    /// Start from this policy instead of pre-training one.
    pub pretrained: Option<PolicyTrainer>,
    /// Relabel actions in the deployment world.
    pub real_action_map: Option<[usize; NUM_PHASES]>,
    /// Keep a step log of every policy-training episode.
    pub log_episodes: bool,
}

pub fn run_prompt_gat(cfg: &ExperimentConfig, mode: GatMode, seed: u64, oracle: Option<&Oracle>) -> Result<GatOutcome> {
    run_prompt_gat_with(cfg, mode, seed, oracle, RunOptions::default())
}

/// Pre-train (unless given a trainer), then alternate rollouts, model
/// fitting and grounded policy training; finally evaluate greedily in both
/// worlds.
pub fn run_prompt_gat_with(
    cfg: &ExperimentConfig,
    mode: GatMode,
    seed: u64,
    oracle: Option<&Oracle>,
    opts: RunOptions,
) -> Result<GatOutcome> {
    cfg.validate()?;
    if mode == GatMode::PromptGat && oracle.is_none() {
        return Err(Error::OracleConfig("prompt_gat mode needs an oracle".into()));
    }
    let g = &cfg.gat;
    let ctx = cfg.scenario.real_context;
    let sim_ctx = DomainContext::default();
    let mut trainer = match opts.pretrained {
        Some(mut t) => {
            if opts.log_episodes {
                t.enable_episode_logs();
            }
            t
        }
        None => {
            let mut t = PolicyTrainer::new(cfg, seed)?;
            if opts.log_episodes {
                t.enable_episode_logs();
            }
            t.train_episodes(g.pretrain_episodes, &mut NoGrounding)?;
            t
        }
    };
    let mut sim_env = TrafficEnv::from_config(cfg, cfg.scenario.sim_profile)?;
    let mut real_env = TrafficEnv::from_config(cfg, cfg.scenario.real_profile)?;
    real_env.set_action_map(opts.real_action_map)?;

    let (mut forward, mut inverse) = match mode {
        GatMode::Direct => (None, None),
        _ => (
            Some(ForwardModel::new(g, mode == GatMode::PromptGat, &mut stream_rng(seed, Stream::Init, 1))?),
            Some(InverseModel::new(g, &mut stream_rng(seed, Stream::Init, 2))?),
        ),
    };
    let fusion_oracle = if mode == GatMode::PromptGat { oracle } else { None };
    let mut d_sim = Dataset::default();
    let mut d_real = Dataset::default();
    let mut iterations = Vec::new();
    for i in 0..cfg.trainer.episodes {
        let mut log = IterationLog {
            iteration: i,
            d_sim: 0,
            d_real: 0,
            forward_loss: None,
            inverse_loss: None,
            grounded: 0,
            grounded_changed: 0,
        };
        if let (Some(fwd), Some(inv)) = (forward.as_mut(), inverse.as_mut()) {
            let eps = trainer.agent.epsilon.epsilon;
            for k in 0..g.rollout_episodes {
                let idx = u64::from(i) * u64::from(g.rollout_episodes) + u64::from(k);
                sim_env.reset_with_rng(stream_rng(seed, Stream::Rollout, 4 * idx));
                let mut explore = stream_rng(seed, Stream::Rollout, 4 * idx + 1);
                d_sim.extend(rollout(&trainer.agent, &mut sim_env, eps, &mut explore, sim_ctx, None)?);
                real_env.reset_with_rng(stream_rng(seed, Stream::Rollout, 4 * idx + 2));
                let mut explore = stream_rng(seed, Stream::Rollout, 4 * idx + 3);
                d_real.extend(rollout(&trainer.agent, &mut real_env, eps, &mut explore, ctx, fusion_oracle)?);
            }
            let mut shuffle = stream_rng(seed, Stream::ModelShuffle, 2 * u64::from(i));
            log.forward_loss = Some(fwd.train(&d_real.records, g.forward_epochs, g.batch_size, &mut shuffle)?);
            let mut shuffle = stream_rng(seed, Stream::ModelShuffle, 2 * u64::from(i) + 1);
            log.inverse_loss = Some(inv.train(&d_sim.records, g.inverse_epochs, g.batch_size, &mut shuffle)?);
            let mut grounder = Grounder { forward: fwd, inverse: inv, oracle: fusion_oracle, ctx, calls: 0, changed: 0 };
            trainer.train_episodes(g.policy_epochs, &mut grounder)?;
            log.grounded = grounder.calls;
            log.grounded_changed = grounder.changed;
        } else {
            trainer.train_episodes(g.policy_epochs, &mut NoGrounding)?;
        }
        log.d_sim = d_sim.len();
        log.d_real = d_real.len();
        iterations.push(log);
    }

    let (sim, real, held_out) = evaluate_pair(cfg, &trainer.agent, seed, ctx, fusion_oracle, opts.real_action_map)?;
    let forward_mse = match &forward {
        Some(f) => Some(f.evaluate(&held_out)?),
        None => None,
    };
    Ok(GatOutcome {
        mode,
        seed,
        agent: trainer.agent,
        forward,
        inverse,
        d_sim,
        d_real,
        curve: trainer.curve,
        episode_logs: trainer.episode_logs,
        iterations,
        result: SeedResult { seed, sim, real, forward_mse },
    })
}

fn mean_stats(all: &[EpisodeStats]) -> EpisodeStats {
    let n = all.len() as f64;
    let sum = |f: fn(&EpisodeStats) -> f64| all.iter().map(f).sum::<f64>() / n;
    EpisodeStats {
        att: sum(|s| s.att),
        tp: sum(|s| s.tp),
        reward_mean: sum(|s| s.reward_mean),
        queue_mean: sum(|s| s.queue_mean),
        delay: sum(|s| s.delay),
    }
}

/// Greedy evaluation in both worlds on identical arrival streams. Also
/// returns the deployment-world transitions (with estimates when an oracle
/// is given) as held-out data for the forward model.
pub fn evaluate_pair(
    cfg: &ExperimentConfig,
    agent: &DqnAgent,
    seed: u64,
    ctx: DomainContext,
    oracle: Option<&Oracle>,
    real_action_map: Option<[usize; NUM_PHASES]>,
) -> Result<(EpisodeStats, EpisodeStats, Vec<TransitionRecord>)> {
    let mut sim_env = TrafficEnv::from_config(cfg, cfg.scenario.sim_profile)?;
    let mut real_env = TrafficEnv::from_config(cfg, cfg.scenario.real_profile)?;
    real_env.set_action_map(real_action_map)?;
    let (mut sims, mut reals, mut held_out) = (Vec::new(), Vec::new(), Vec::new());
    for j in 0..u64::from(cfg.gat.eval_episodes) {
        sim_env.reset_with_rng(stream_rng(seed, Stream::Evaluation, j));
        sims.push(evaluate_episode(agent, &mut sim_env)?);
        real_env.reset_with_rng(stream_rng(seed, Stream::Evaluation, j));
        // Greedy, so the exploration stream is never drawn from.
        let mut unused = stream_rng(seed, Stream::Evaluation, u64::MAX);
        held_out.extend(rollout(agent, &mut real_env, 0.0, &mut unused, ctx, oracle)?);
        reals.push(real_env.episode_stats()?);
    }
    Ok((mean_stats(&sims), mean_stats(&reals), held_out))
}
