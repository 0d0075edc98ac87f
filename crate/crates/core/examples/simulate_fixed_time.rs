//! Run the fixed-time controller in the simulator world and in every
//! deployment setting, on the same arrival stream.
//!
//! cargo run --release --example simulate_fixed_time

use groundsim::env::run_fixed_time;
use groundsim::scenario::{ExperimentConfig, Setting};

fn main() -> groundsim::Result<()> {
    let cfg = ExperimentConfig::default();
    let cycle = cfg.trainer.fixed_time_cycle;
    let sim = run_fixed_time(&cfg, cfg.scenario.sim_profile, cycle, 0)?;
    println!("world     att      tp   queue  delay");
    println!("sim   {:7.1} {:7.0} {:7.2} {:6.3}", sim.att, sim.tp, sim.queue_mean, sim.delay);
    for setting in Setting::ALL {
        let s = run_fixed_time(&cfg, setting.profile(), cycle, 0)?;
        println!("{:<5} {:7.1} {:7.0} {:7.2} {:6.3}", setting.as_str(), s.att, s.tp, s.queue_mean, s.delay);
    }
    Ok(())
}
