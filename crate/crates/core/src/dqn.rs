//! DQN signal controller: replay buffer, target network, epsilon-greedy
//! exploration, and the episode loop that trains it in an environment.

use std::collections::VecDeque;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::{EpisodeStats, Observation, TrafficEnv, OBS_DIM};
use crate::error::{Error, Result};
use crate::neural::{argmax, mse_loss, Adam, Gradients, Mlp, MlpSpec, OutputActivation};
use crate::scenario::{DqnParams, TrainerParams, NUM_PHASES};

/// One decision step as stored for replay.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: usize,
    pub reward: f64,
    pub next_state: Vec<f64>,
    pub done: bool,
}

/// Fixed-capacity FIFO of transitions.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    items: VecDeque<Transition>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        ReplayBuffer { capacity: capacity.max(1), items: VecDeque::with_capacity(capacity.max(1)) }
    }

    pub fn push(&mut self, t: Transition) {
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(t);
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.items.iter()
    }

    /// Uniform sample with replacement.
    pub fn sample<'a>(&'a self, n: usize, rng: &mut impl Rng) -> Vec<&'a Transition> {
        (0..n).map(|_| &self.items[rng.random_range(0..self.items.len())]).collect()
    }
}

/// Multiplicative per-episode decay with a floor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpsilonSchedule {
    pub epsilon: f64,
    pub decay: f64,
    pub floor: f64,
}

impl EpsilonSchedule {
    pub fn new(epsilon: f64, decay: f64, floor: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&floor) || !(floor..=1.0).contains(&epsilon) {
            return Err(Error::config("dqn.epsilon", "need 0 <= epsilon_min <= epsilon <= 1"));
        }
        if !(0.0..=1.0).contains(&decay) {
            return Err(Error::config("dqn.epsilon_decay", "must lie in [0, 1]"));
        }
        Ok(EpsilonSchedule { epsilon, decay, floor })
    }

    pub fn end_episode(&mut self) {
        self.epsilon = (self.epsilon * self.decay).max(self.floor);
    }
}

/// Counters and exploration state saved next to the weight file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentMeta {
    pub epsilon: EpsilonSchedule,
    pub env_steps: u64,
    pub updates: u64,
    pub episodes: u64,
}

#[derive(Debug, Clone)]
pub struct DqnAgent {
    online: Mlp,
    target: Mlp,
    optimizer: Adam,
    pub buffer: ReplayBuffer,
    pub epsilon: EpsilonSchedule,
    gamma: f64,
    batch_size: usize,
    learning_start: usize,
    update_model_rate: u32,
    update_target_rate: u32,
    env_steps: u64,
    updates: u64,
    episodes: u64,
}

impl DqnAgent {
    pub fn new(dqn: &DqnParams, trainer: &TrainerParams, rng: &mut impl Rng) -> Result<Self> {
        let mut widths = vec![OBS_DIM];
        widths.extend(&dqn.hidden);
        widths.push(NUM_PHASES);
        let online = Mlp::new(MlpSpec::new(widths, OutputActivation::Identity)?, rng);
        Self::with_network(online, dqn, trainer)
    }

    /// Wrap an existing Q-network (input and output widths must match the task).
    pub fn with_network(online: Mlp, dqn: &DqnParams, trainer: &TrainerParams) -> Result<Self> {
        if !(0.0..=1.0).contains(&dqn.gamma) {
            return Err(Error::config("dqn.gamma", "must lie in [0, 1]"));
        }
        if dqn.batch_size == 0 {
            return Err(Error::config("dqn.batch_size", "must be >= 1"));
        }
        if trainer.update_target_rate == 0 || trainer.update_model_rate == 0 {
            return Err(Error::config("trainer.update_target_rate", "update rates must be >= 1"));
        }
        Ok(DqnAgent {
            target: online.clone(),
            online,
            optimizer: Adam::new(dqn.learning_rate, dqn.grad_clip)?,
            buffer: ReplayBuffer::new(trainer.buffer_size),
            epsilon: EpsilonSchedule::new(dqn.epsilon, dqn.epsilon_decay, dqn.epsilon_min)?,
            gamma: dqn.gamma,
            batch_size: dqn.batch_size,
            learning_start: trainer.learning_start,
            update_model_rate: trainer.update_model_rate,
            update_target_rate: trainer.update_target_rate,
            env_steps: 0,
            updates: 0,
            episodes: 0,
        })
    }

    pub fn online(&self) -> &Mlp {
        &self.online
    }

    pub fn target(&self) -> &Mlp {
        &self.target
    }

    pub fn updates(&self) -> u64 {
        self.updates
    }

    pub fn env_steps(&self) -> u64 {
        self.env_steps
    }

    pub fn episodes(&self) -> u64 {
        self.episodes
    }

    pub fn q_values(&self, obs: &[f64]) -> Result<Vec<f64>> {
        self.online.predict(obs)
    }

    pub fn greedy(&self, obs: &[f64]) -> Result<usize> {
        Ok(argmax(&self.q_values(obs)?))
    }

    /// Epsilon-greedy choice. The random draw happens only when `epsilon > 0`,
    /// so a greedy policy leaves `rng` untouched.
    pub fn act(&self, obs: &[f64], epsilon: f64, rng: &mut impl Rng) -> Result<usize> {
        if epsilon > 0.0 && rng.random::<f64>() < epsilon {
            return Ok(rng.random_range(0..NUM_PHASES));
        }
        self.greedy(obs)
    }

    /// One Adam step on a uniformly sampled minibatch; returns the mean TD loss.
    pub fn train_batch(&mut self, rng: &mut impl Rng) -> Result<f64> {
        if self.buffer.len() < self.batch_size {
            return Err(Error::InsufficientBuffer { have: self.buffer.len(), need: self.batch_size });
        }
        let batch = self.buffer.sample(self.batch_size, rng);
        let mut grads = Gradients::zeros_like(&self.online);
        let mut total = 0.0;
        for t in &batch {
            let y = if t.done {
                t.reward
            } else {
                let next = self.target.predict(&t.next_state)?;
                t.reward + self.gamma * next.iter().copied().fold(f64::NEG_INFINITY, f64::max)
            };
            let (q, cache) = self.online.forward(&t.state)?;
            let (loss, dq) = mse_loss(&q[t.action..=t.action], &[y])?;
            let mut out_grad = vec![0.0; q.len()];
            out_grad[t.action] = dq[0];
            let (g, _) = self.online.backward(&cache, &out_grad)?;
            grads.add_assign(&g);
            total += loss;
        }
        let n = batch.len() as f64;
        grads.scale(1.0 / n);
        self.optimizer.step(&mut self.online, &grads);
        self.updates += 1;
        if self.updates % self.update_target_rate as u64 == 0 {
            self.sync_target();
        }
        Ok(total / n)
    }

    pub fn sync_target(&mut self) {
        self.target = self.online.clone();
    }

    /// Store a transition and run the scheduled update, if any.
    pub fn observe(&mut self, t: Transition, replay_rng: &mut impl Rng) -> Result<Option<f64>> {
        self.buffer.push(t);
        self.env_steps += 1;
        let ready = self.env_steps >= self.learning_start as u64 && self.buffer.len() >= self.batch_size;
        if ready && self.env_steps % self.update_model_rate as u64 == 0 {
            return self.train_batch(replay_rng).map(Some);
        }
        Ok(None)
    }

    pub fn end_episode(&mut self) {
        self.episodes += 1;
        self.epsilon.end_episode();
    }

    pub fn meta(&self) -> AgentMeta {
        AgentMeta { epsilon: self.epsilon, env_steps: self.env_steps, updates: self.updates, episodes: self.episodes }
    }

    /// Writes `<path>` (weights) and `<path>.meta.toml` (counters).
    pub fn save(&self, path: &Path) -> Result<()> {
        self.online.save(path)?;
        let meta = toml::to_string(&self.meta()).map_err(|e| Error::format("checkpoint", path, e.to_string()))?;
        let meta_path = meta_path(path);
        std::fs::write(&meta_path, meta).map_err(|e| Error::io(&meta_path, e))
    }

    /// Restore weights and counters. The replay buffer and optimizer
    /// moments start empty.
    pub fn load(path: &Path, dqn: &DqnParams, trainer: &TrainerParams) -> Result<Self> {
        let online = Mlp::load(path)?;
        let mut agent = Self::with_network(online, dqn, trainer)?;
        let meta_path = meta_path(path);
        if meta_path.exists() {
            let text = std::fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
            let meta: AgentMeta = toml::from_str(&text).map_err(|e| Error::format("checkpoint", &meta_path, e.to_string()))?;
            agent.epsilon = meta.epsilon;
            agent.env_steps = meta.env_steps;
            agent.updates = meta.updates;
            agent.episodes = meta.episodes;
        }
        Ok(agent)
    }
}

pub fn meta_path(weights: &Path) -> std::path::PathBuf {
    let mut p = weights.as_os_str().to_owned();
    p.push(".meta.toml");
    p.into()
}

/// Per-episode training summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub episode: u64,
    pub epsilon: f64,
    pub mean_loss: f64,
    pub stats: EpisodeStats,
}

/// Maps the policy's action to the action actually executed.
pub trait Grounding {
    fn ground(&mut self, obs: &Observation, action: usize) -> Result<usize>;
}

/// Executes the policy's action unchanged.
pub struct NoGrounding;

impl Grounding for NoGrounding {
    fn ground(&mut self, _obs: &Observation, action: usize) -> Result<usize> {
        Ok(action)
    }
}

/// Run one training episode: act, optionally ground, store, learn. The
/// environment must already be reset.
pub fn train_episode(
    agent: &mut DqnAgent,
    env: &mut TrafficEnv,
    grounding: &mut dyn Grounding,
    explore_rng: &mut impl Rng,
    replay_rng: &mut impl Rng,
) -> Result<EpisodeRecord> {
    let mut obs = env.observe();
    let (mut loss_sum, mut loss_n) = (0.0, 0usize);
    while !env.is_done() {
        let s = obs.to_vec();
        let action = agent.act(&s, agent.epsilon.epsilon, explore_rng)?;
        let executed = grounding.ground(&obs, action)?;
        let step = env.step_grounded(action, executed)?;
        let t = Transition { state: s, action, reward: step.reward, next_state: step.next_obs.to_vec(), done: step.done };
        if let Some(loss) = agent.observe(t, replay_rng)? {
            loss_sum += loss;
            loss_n += 1;
        }
        obs = step.next_obs;
    }
    let record = EpisodeRecord {
        episode: agent.episodes,
        epsilon: agent.epsilon.epsilon,
        mean_loss: if loss_n == 0 { 0.0 } else { loss_sum / loss_n as f64 },
        stats: env.episode_stats()?,
    };
    agent.end_episode();
    Ok(record)
}

/// Greedy rollout with no learning; the environment must already be reset.
pub fn evaluate_episode(agent: &DqnAgent, env: &mut TrafficEnv) -> Result<EpisodeStats> {
    while !env.is_done() {
        let a = agent.greedy(&env.observe().to_vec())?;
        env.step(a)?;
    }
    env.episode_stats()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream_rng, Stream};

    fn agent(gamma: f64, target_rate: u32) -> DqnAgent {
        let dqn = DqnParams { gamma, ..DqnParams::default() };
        let trainer = TrainerParams { update_target_rate: target_rate, ..TrainerParams::default() };
        DqnAgent::new(&dqn, &trainer, &mut stream_rng(0, Stream::Init, 0)).unwrap()
    }

    fn dummy(i: usize) -> Transition {
        Transition { state: vec![i as f64; OBS_DIM], action: i % 4, reward: -5.0, next_state: vec![0.0; OBS_DIM], done: false }
    }

    #[test]
    fn fifo_eviction() {
        let mut b = ReplayBuffer::new(3);
        for i in 0..5 {
            b.push(dummy(i));
        }
        let firsts: Vec<f64> = b.iter().map(|t| t.state[0]).collect();
        assert_eq!(firsts, vec![2.0, 3.0, 4.0]);
    }

    #[test]
    fn act_examples() {
        let layers = {
            let mut a = Mlp::zeros(MlpSpec::new(vec![OBS_DIM, NUM_PHASES], OutputActivation::Identity).unwrap());
            a.layers_mut()[0].bias.copy_from_slice(&[1.0, 5.0, 2.0, 0.0]);
            a
        };
        let ag = DqnAgent::with_network(layers, &DqnParams::default(), &TrainerParams::default()).unwrap();
        let mut rng = stream_rng(0, Stream::Exploration, 0);
        assert_eq!(ag.act(&[0.0; OBS_DIM], 0.0, &mut rng).unwrap(), 1);
        let mut tied = Mlp::zeros(MlpSpec::new(vec![OBS_DIM, NUM_PHASES], OutputActivation::Identity).unwrap());
        tied.layers_mut()[0].bias.copy_from_slice(&[3.0, 3.0, 0.0, 0.0]);
        let ag = DqnAgent::with_network(tied, &DqnParams::default(), &TrainerParams::default()).unwrap();
        assert_eq!(ag.act(&[0.0; OBS_DIM], 0.0, &mut rng).unwrap(), 0);
    }

    #[test]
    fn gamma_zero_targets_are_rewards() {
        // Q starts at zero, so with gamma 0 every target is the reward and
        // the first loss is reward^2.
        let zero = Mlp::zeros(MlpSpec::new(vec![OBS_DIM, 8, NUM_PHASES], OutputActivation::Identity).unwrap());
        let dqn = DqnParams { gamma: 0.0, ..DqnParams::default() };
        let mut ag = DqnAgent::with_network(zero, &dqn, &TrainerParams::default()).unwrap();
        for i in 0..64 {
            ag.buffer.push(dummy(i));
        }
        let loss = ag.train_batch(&mut stream_rng(0, Stream::Replay, 0)).unwrap();
        assert_eq!(loss, 25.0);
    }

    #[test]
    fn terminal_target_is_reward() {
        let mut big = Mlp::zeros(MlpSpec::new(vec![OBS_DIM, NUM_PHASES], OutputActivation::Identity).unwrap());
        big.layers_mut()[0].bias.copy_from_slice(&[100.0; 4]);
        let mut ag = DqnAgent::with_network(big, &DqnParams::default(), &TrainerParams::default()).unwrap();
        for i in 0..64 {
            ag.buffer.push(Transition { done: true, reward: 1.0, ..dummy(i) });
        }
        // Q(s,a) = 100, target exactly 1 despite the target net predicting 100.
        let loss = ag.train_batch(&mut stream_rng(0, Stream::Replay, 0)).unwrap();
        assert_eq!(loss, 99.0 * 99.0);
    }

    #[test]
    fn insufficient_buffer() {
        let mut ag = agent(0.98, 5);
        ag.buffer.push(dummy(0));
        assert!(matches!(ag.train_batch(&mut stream_rng(0, Stream::Replay, 0)), Err(Error::InsufficientBuffer { .. })));
    }

    #[test]
    fn target_sync_cadence() {
        let mut ag = agent(0.98, 5);
        for i in 0..64 {
            ag.buffer.push(dummy(i));
        }
        let initial = ag.target().clone();
        let mut rng = stream_rng(0, Stream::Replay, 0);
        for _ in 0..4 {
            ag.train_batch(&mut rng).unwrap();
        }
        assert_eq!(ag.target().params(), initial.params());
        assert_ne!(ag.online().params(), initial.params());
        ag.train_batch(&mut rng).unwrap();
        assert_eq!(ag.target().params(), ag.online().params());

        let mut every = agent(0.98, 1);
        for i in 0..64 {
            every.buffer.push(dummy(i));
        }
        for _ in 0..3 {
            every.train_batch(&mut rng).unwrap();
            assert_eq!(every.target().params(), every.online().params());
        }
    }

    #[test]
    fn epsilon_decays_to_floor() {
        let mut e = EpsilonSchedule::new(0.1, 0.5, 0.01).unwrap();
        for _ in 0..10 {
            e.end_episode();
        }
        assert_eq!(e.epsilon, 0.01);
        assert!(EpsilonSchedule::new(0.005, 0.9, 0.01).is_err());
    }
}
