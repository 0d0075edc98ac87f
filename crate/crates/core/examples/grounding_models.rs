//! Collect transitions in both worlds, fit the forward and inverse models,
//! and look at how often grounding changes the policy's action.
//!
//! cargo run --release --example grounding_models

use groundsim::dqn::NoGrounding;
use groundsim::env::TrafficEnv;
use groundsim::gat::{ground_action, rollout, ForwardModel, InverseModel, PolicyTrainer};
use groundsim::oracle::Oracle;
use groundsim::rng::{stream_rng, Stream};
use groundsim::scenario::{ExperimentConfig, Setting};

fn main() -> groundsim::Result<()> {
    let mut cfg = ExperimentConfig::default().with_setting(Setting::V4);
    cfg.trainer.steps = 600;
    cfg.trainer.learning_start = 200;
    let ctx = cfg.scenario.real_context;
    let oracle = Oracle::rule();

    let mut trainer = PolicyTrainer::new(&cfg, 0)?;
    trainer.train_episodes(5, &mut NoGrounding)?;
    let agent = &trainer.agent;

    let mut sim = TrafficEnv::from_config(&cfg, cfg.scenario.sim_profile)?;
    let mut real = TrafficEnv::from_config(&cfg, cfg.scenario.real_profile)?;
    let mut explore = stream_rng(0, Stream::Rollout, 0);
    let (mut d_sim, mut d_real) = (Vec::new(), Vec::new());
    for ep in 0..6 {
        sim.reset(ep);
        d_sim.extend(rollout(agent, &mut sim, 0.2, &mut explore, ctx, None)?);
        real.reset(ep);
        d_real.extend(rollout(agent, &mut real, 0.2, &mut explore, ctx, Some(&oracle))?);
    }
    let held_out = d_real.split_off(d_real.len() - d_real.len() / 6);
    println!("{} sim and {} real transitions, {} held out", d_sim.len(), d_real.len(), held_out.len());

    for fused in [false, true] {
        let mut f = ForwardModel::new(&cfg.gat, fused, &mut stream_rng(0, Stream::Init, 1))?;
        let before = f.evaluate(&held_out)?;
        f.train(&d_real, 50, cfg.gat.batch_size, &mut stream_rng(0, Stream::ModelShuffle, 0))?;
        println!("forward (fused={fused}): held-out mse {before:.2} -> {:.2}", f.evaluate(&held_out)?);
    }

    cfg.gat.inverse_lr = 1e-3;
    let mut inv = InverseModel::new(&cfg.gat, &mut stream_rng(0, Stream::Init, 2))?;
    inv.train(&d_sim, 50, cfg.gat.batch_size, &mut stream_rng(0, Stream::ModelShuffle, 1))?;
    println!("inverse accuracy on sim data: {:.3}", inv.accuracy(&d_sim)?);

    let mut forward = ForwardModel::new(&cfg.gat, true, &mut stream_rng(0, Stream::Init, 1))?;
    forward.train(&d_real, 50, cfg.gat.batch_size, &mut stream_rng(0, Stream::ModelShuffle, 2))?;
    let changed = held_out
        .iter()
        .filter(|r| ground_action(&r.s, r.a, &forward, &inv, Some(&oracle), ctx).map(|g| g != r.a).unwrap_or(false))
        .count();
    println!("grounding replaced {changed} of {} actions", held_out.len());
    Ok(())
}
