//! Train a signal policy in the simulator and compare it with the
//! fixed-time baseline.
//!
//! cargo run --release --example train_dqn

use groundsim::dqn::{evaluate_episode, NoGrounding};
use groundsim::env::{run_fixed_time, TrafficEnv};
use groundsim::gat::PolicyTrainer;
use groundsim::scenario::ExperimentConfig;

fn main() -> groundsim::Result<()> {
    let mut cfg = ExperimentConfig::default();
    cfg.trainer.steps = 600;
    cfg.trainer.learning_start = 200;

    let mut trainer = PolicyTrainer::new(&cfg, 0)?;
    trainer.train_episodes(30, &mut NoGrounding)?;
    for r in trainer.curve.iter().step_by(5) {
        println!("episode {:2}  eps {:.3}  loss {:8.3}  att {:6.1}  queue {:5.2}", r.episode, r.epsilon, r.mean_loss, r.stats.att, r.stats.queue_mean);
    }

    let mut env = TrafficEnv::from_config(&cfg, cfg.scenario.sim_profile)?;
    env.reset(1000);
    let learned = evaluate_episode(&trainer.agent, &mut env)?;
    let fixed = run_fixed_time(&cfg, cfg.scenario.sim_profile, cfg.trainer.fixed_time_cycle, 1000)?;
    println!("greedy policy: att {:.1}  queue {:.2}", learned.att, learned.queue_mean);
    println!("fixed time:    att {:.1}  queue {:.2}", fixed.att, fixed.queue_mean);
    Ok(())
}
