//! DQN against a two-state deterministic MDP whose optimal Q-values are
//! known from value iteration.

use groundsim::dqn::{DqnAgent, Transition};
use groundsim::env::OBS_DIM;
use groundsim::rng::{stream_rng, Stream};
use groundsim::scenario::ExperimentConfig;
use rand::Rng;

const GAMMA: f64 = 0.5;
/// Reward for taking action `a` in state `s`.
const REWARD: [[f64; 4]; 2] = [[0.0, 0.5, -0.5, 0.0], [1.0, 0.0, 0.5, -1.0]];

/// Even actions stay, odd actions switch state.
fn next(s: usize, a: usize) -> usize {
    if a % 2 == 1 {
        1 - s
    } else {
        s
    }
}

fn encode(s: usize) -> Vec<f64> {
    let mut v = vec![0.0; OBS_DIM];
    v[s] = 1.0;
    v
}

fn value_iteration() -> [[f64; 4]; 2] {
    let mut q = [[0.0; 4]; 2];
    for _ in 0..2000 {
        let v = [0, 1].map(|s: usize| q[s].iter().copied().fold(f64::NEG_INFINITY, f64::max));
        for s in 0..2 {
            for a in 0..4 {
                q[s][a] = REWARD[s][a] + GAMMA * v[next(s, a)];
            }
        }
    }
    q
}

#[test]
fn q_values_approach_value_iteration_fixed_point() {
    let mut cfg = ExperimentConfig::default();
    cfg.dqn.gamma = GAMMA;
    cfg.trainer.learning_start = 64;
    let mut agent = DqnAgent::new(&cfg.dqn, &cfg.trainer, &mut stream_rng(3, Stream::Init, 0)).unwrap();
    let mut explore = stream_rng(3, Stream::Exploration, 0);
    let mut replay = stream_rng(3, Stream::Replay, 0);
    let mut s = 0;
    let mut updates = 0;
    while updates < 2000 {
        let a = explore.random_range(0..4);
        let s2 = next(s, a);
        let t = Transition { state: encode(s), action: a, reward: REWARD[s][a], next_state: encode(s2), done: false };
        if agent.observe(t, &mut replay).unwrap().is_some() {
            updates += 1;
        }
        s = s2;
    }
    let want = value_iteration();
    for s in 0..2 {
        let q = agent.q_values(&encode(s)).unwrap();
        for a in 0..4 {
            assert!((q[a] - want[s][a]).abs() < 0.05, "Q({s},{a}) = {} vs {}", q[a], want[s][a]);
        }
        let best = (0..4).fold(0, |b, a| if want[s][a] > want[s][b] { a } else { b });
        assert_eq!(agent.greedy(&encode(s)).unwrap(), best, "greedy action in state {s}");
    }
}
