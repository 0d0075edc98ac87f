//! The traffic-signal MDP on top of [`Engine`]: one decision every
//! `action_interval` seconds, reward `-Σ queue`, and episode metrics.

use std::fmt::Write as _;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};
use crate::scenario::{DynamicsProfile, ExperimentConfig, FlowSpec, RoadNetwork, NUM_LANES, NUM_PHASES};
use crate::sim::Engine;

/// Length of the observation vector: 12 lane counts + 4 phase bits.
pub const OBS_DIM: usize = NUM_LANES + NUM_PHASES;

/// Per-lane vehicle counts plus the one-hot phase.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Observation {
    pub lane_counts: [u32; NUM_LANES],
    /// Index of the hot phase bit.
    pub phase: usize,
}

impl Observation {
    pub fn new(lane_counts: [u32; NUM_LANES], phase: usize) -> Result<Self> {
        if phase >= NUM_PHASES {
            return Err(Error::PhaseOutOfRange(phase));
        }
        Ok(Observation { lane_counts, phase })
    }

    pub fn empty(phase: usize) -> Self {
        Observation { lane_counts: [0; NUM_LANES], phase }
    }

    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(OBS_DIM);
        v.extend(self.lane_counts.iter().map(|&c| f64::from(c)));
        v.extend((0..NUM_PHASES).map(|p| if p == self.phase { 1.0 } else { 0.0 }));
        v
    }

    pub fn total_vehicles(&self) -> u32 {
        self.lane_counts.iter().sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub next_obs: Observation,
    pub reward: f64,
    pub done: bool,
    /// Per-lane queue lengths at the end of the interval.
    pub queues: [usize; NUM_LANES],
}

/// Aggregate metrics of a finished episode.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EpisodeStats {
    /// Average travel time of completed trips, seconds.
    pub att: f64,
    /// Completed trips.
    pub tp: f64,
    pub reward_mean: f64,
    pub queue_mean: f64,
    /// Mean normalized slowdown `1 - speed / limit`, in [0, 1].
    pub delay: f64,
}

pub const LOG_HEADER: &str = "step,action,grounded_action,reward,total_queue";

/// One row of the optional episode log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpisodeLogRow {
    pub step: usize,
    pub action: usize,
    pub grounded_action: usize,
    pub reward: f64,
    pub total_queue: usize,
}

/// Environment parameters pulled out of an [`ExperimentConfig`].
#[derive(Debug, Clone)]
pub struct EnvParams {
    pub network: RoadNetwork,
    pub flow: FlowSpec,
    pub steps: u32,
    pub action_interval: u32,
    pub yellow_length: u32,
}

impl EnvParams {
    pub fn from_config(cfg: &ExperimentConfig) -> Result<Self> {
        Ok(EnvParams {
            network: cfg.network,
            flow: cfg.flow_spec()?,
            steps: cfg.trainer.steps,
            action_interval: cfg.trainer.action_interval,
            yellow_length: cfg.trainer.yellow_length,
        })
    }
}

#[derive(Debug, Clone)]
pub struct TrafficEnv {
    params: EnvParams,
    profile: DynamicsProfile,
    engine: Engine,
    step_count: usize,
    rewards: Vec<f64>,
    total_queues: Vec<usize>,
    log: Option<Vec<EpisodeLogRow>>,
    action_map: Option<[usize; NUM_PHASES]>,
}

impl TrafficEnv {
    /// Build an environment; call [`reset`](Self::reset) before stepping.
    pub fn new(params: EnvParams, profile: DynamicsProfile) -> Self {
        let engine = Engine::new(
            params.network,
            profile,
            params.flow.clone(),
            params.yellow_length,
            stream_rng(0, Stream::Arrivals, 0),
        );
        TrafficEnv { params, profile, engine, step_count: 0, rewards: Vec::new(), total_queues: Vec::new(), log: None, action_map: None }
    }

    pub fn from_config(cfg: &ExperimentConfig, profile: DynamicsProfile) -> Result<Self> {
        Ok(TrafficEnv::new(EnvParams::from_config(cfg)?, profile))
    }

    /// Fresh episode with arrivals drawn from `seed`.
    pub fn reset(&mut self, seed: u64) -> Observation {
        self.reset_with_rng(stream_rng(seed, Stream::Arrivals, 0))
    }

    pub fn reset_with_rng(&mut self, arrivals: ChaCha8Rng) -> Observation {
        self.engine = Engine::new(
            self.params.network,
            self.profile,
            self.params.flow.clone(),
            self.params.yellow_length,
            arrivals,
        );
        self.step_count = 0;
        self.rewards.clear();
        self.total_queues.clear();
        if let Some(log) = &mut self.log {
            log.clear();
        }
        self.observe()
    }

    /// Relabel actions: requesting phase `a` shows phase `map[a]`. Used to
    /// build worlds whose only difference is the meaning of each action.
    pub fn set_action_map(&mut self, map: Option<[usize; NUM_PHASES]>) -> Result<()> {
        if let Some(m) = map {
            if let Some(&bad) = m.iter().find(|&&p| p >= NUM_PHASES) {
                return Err(Error::PhaseOutOfRange(bad));
            }
        }
        self.action_map = map;
        Ok(())
    }

    pub fn enable_log(&mut self) {
        self.log = Some(Vec::new());
    }

    pub fn log(&self) -> Option<&[EpisodeLogRow]> {
        self.log.as_deref()
    }

    /// Log rows under [`LOG_HEADER`].
    pub fn log_csv(&self) -> String {
        let mut out = format!("{LOG_HEADER}\n");
        for r in self.log.iter().flatten() {
            let _ = writeln!(out, "{},{},{},{},{}", r.step, r.action, r.grounded_action, r.reward, r.total_queue);
        }
        out
    }

    pub fn engine(&self) -> &Engine {
        &self.engine
    }

    pub fn engine_mut(&mut self) -> &mut Engine {
        &mut self.engine
    }

    pub fn profile(&self) -> &DynamicsProfile {
        &self.profile
    }

    pub fn params(&self) -> &EnvParams {
        &self.params
    }

    pub fn observe(&self) -> Observation {
        let counts = self.engine.lane_counts();
        Observation {
            lane_counts: counts.map(|c| c as u32),
            phase: self.engine.state().controller.committed_phase(),
        }
    }

    pub fn is_done(&self) -> bool {
        self.engine.clock() >= u64::from(self.params.steps)
    }

    pub fn decision_steps(&self) -> usize {
        self.step_count
    }

    pub fn step(&mut self, action: usize) -> Result<StepResult> {
        self.step_grounded(action, action)
    }

    /// Execute `executed` while logging `policy_action` as the agent's choice.
    pub fn step_grounded(&mut self, policy_action: usize, executed: usize) -> Result<StepResult> {
        if self.is_done() {
            return Err(Error::EpisodeDone);
        }
        if policy_action >= NUM_PHASES {
            return Err(Error::PhaseOutOfRange(policy_action));
        }
        let executed = self.action_map.map_or(executed, |m| m.get(executed).copied().unwrap_or(executed));
        self.engine.set_phase(executed)?;
        for _ in 0..self.params.action_interval {
            self.engine.step();
        }
        let queues = self.engine.queue_lengths();
        let total: usize = queues.iter().sum();
        let reward = -(total as f64);
        self.rewards.push(reward);
        self.total_queues.push(total);
        if let Some(log) = &mut self.log {
            log.push(EpisodeLogRow {
                step: self.step_count,
                action: policy_action,
                grounded_action: executed,
                reward,
                total_queue: total,
            });
        }
        self.step_count += 1;
        Ok(StepResult { next_obs: self.observe(), reward, done: self.is_done(), queues })
    }

    pub fn episode_stats(&self) -> Result<EpisodeStats> {
        if !self.is_done() {
            return Err(Error::EpisodeNotDone);
        }
        Ok(self.current_stats())
    }

    /// Metrics accumulated so far, whether or not the episode has ended.
    pub fn current_stats(&self) -> EpisodeStats {
        let s = self.engine.state();
        let tp = s.exited.len();
        let att = if tp == 0 {
            0.0
        } else {
            s.exited.iter().map(|e| e.exited_at - e.entered_at).sum::<f64>() / tp as f64
        };
        let n = self.rewards.len();
        let mean = |xs: &mut dyn Iterator<Item = f64>| if n == 0 { 0.0 } else { xs.sum::<f64>() / n as f64 };
        let reward_mean = mean(&mut self.rewards.iter().copied());
        let queue_mean = mean(&mut self.total_queues.iter().map(|&q| q as f64));
        let delay = if s.delay_ticks == 0 { 0.0 } else { s.delay_sum / s.delay_ticks as f64 };
        EpisodeStats { att, tp: tp as f64, reward_mean, queue_mean, delay }
    }
}

/// Phase shown at decision `k` by a round-robin plan holding each phase for
/// `cycle` seconds.
pub fn fixed_time_action(k: usize, action_interval: u32, cycle: u32) -> usize {
    (k * action_interval as usize / cycle as usize) % NUM_PHASES
}

/// Run one episode of the round-robin fixed-time plan.
pub fn run_fixed_time(cfg: &ExperimentConfig, profile: DynamicsProfile, cycle: u32, seed: u64) -> Result<EpisodeStats> {
    if cycle < cfg.trainer.action_interval {
        return Err(Error::config("trainer.fixed_time_cycle", "cycle must be >= action_interval"));
    }
    let mut env = TrafficEnv::from_config(cfg, profile)?;
    env.reset_with_rng(stream_rng(seed, Stream::Evaluation, 0));
    let mut k = 0;
    while !env.is_done() {
        env.step(fixed_time_action(k, cfg.trainer.action_interval, cycle))?;
        k += 1;
    }
    env.episode_stats()
}
