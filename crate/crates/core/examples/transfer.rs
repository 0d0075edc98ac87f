//! Compare the three training modes on one deployment setting and print
//! the resulting gap report.
//!
//! cargo run --release --example transfer -- V3

use groundsim::gat::{run_prompt_gat, GatMode};
use groundsim::metrics::{report_csv, GapReport};
use groundsim::oracle::Oracle;
use groundsim::scenario::{ExperimentConfig, Setting};

fn main() -> groundsim::Result<()> {
    let name = std::env::args().nth(1).unwrap_or_else(|| "V4".into());
    let setting: Setting = name.parse()?;
    let mut cfg = ExperimentConfig::default().with_setting(setting);
    cfg.trainer.steps = 600;
    cfg.trainer.episodes = 10;
    cfg.trainer.learning_start = 200;
    cfg.gat.pretrain_episodes = 10;

    let oracle = Oracle::rule();
    let mut reports = Vec::new();
    for mode in GatMode::ALL {
        let runs: Vec<_> = (0..2)
            .map(|seed| run_prompt_gat(&cfg, mode, seed, Some(&oracle)).map(|o| o.result))
            .collect::<groundsim::Result<_>>()?;
        reports.push(GapReport::aggregate(mode.as_str(), setting.as_str(), &runs)?);
    }
    print!("{}", report_csv(&reports));
    println!("oracle backend calls: {}", oracle.calls());
    Ok(())
}
