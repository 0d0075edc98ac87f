use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use groundsim::gat::GatMode;
use groundsim::harness::{cmd_compare, cmd_oracle, cmd_simulate, cmd_train_sim, cmd_transfer, TrainSimOptions, TransferOptions};
use groundsim::metrics::report_csv;
use groundsim::scenario::{load_config, DomainContext, ExperimentConfig, OracleKind, RoadType, Setting, Weather};
use groundsim::{Error, Result};

#[derive(Parser)]
#[command(name = "groundsim", version, about = "Sim-to-real traffic signal control experiments")]
struct Cli {
    /// Experiment config (TOML); built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Deployment setting V0..V4.
    #[arg(long, global = true, value_parser = parse_setting)]
    setting: Option<Setting>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Seeds to run concurrently.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    /// Oracle backend, overriding the config.
    #[arg(long, global = true, value_parser = parse_oracle)]
    oracle: Option<OracleKind>,
    /// Write a step log for every episode.
    #[arg(long, global = true)]
    log_episodes: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct SeedArgs {
    /// Run N seeds starting at the config seed.
    #[arg(long, conflicts_with = "seed_list")]
    seeds: Option<u64>,
    /// Explicit comma-separated seeds.
    #[arg(long, value_delimiter = ',')]
    seed_list: Option<Vec<u64>>,
}

impl SeedArgs {
    fn resolve(&self, cfg: &ExperimentConfig) -> Vec<u64> {
        match (&self.seed_list, self.seeds) {
            (Some(list), _) => list.clone(),
            (None, Some(n)) => (0..n).map(|i| cfg.seed + i).collect(),
            (None, None) => vec![cfg.seed],
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train a policy in the simulator.
    TrainSim {
        #[arg(long)]
        seed: Option<u64>,
        /// Continue from the checkpoint in --out.
        #[arg(long)]
        resume: bool,
    },
    /// Transfer a policy to a deployment setting with one method.
    Transfer {
        #[arg(long, default_value = "direct", value_parser = parse_mode)]
        mode: GatMode,
        /// Start from this checkpoint instead of pre-training per seed.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[command(flatten)]
        seeds: SeedArgs,
    },
    /// Gap improvements and correlations across report files.
    Compare {
        #[arg(required = true)]
        reports: Vec<PathBuf>,
    },
    /// Fixed-time baseline in both worlds.
    Simulate {
        #[command(flatten)]
        seeds: SeedArgs,
    },
    /// Send one prompt to the oracle and print the parsed answer.
    Oracle {
        #[arg(long, default_value = "sunny", value_parser = parse_weather)]
        weather: Weather,
        #[arg(long, default_value = "normal", value_parser = parse_road)]
        road: RoadType,
        #[arg(long, default_value_t = 0)]
        vehicles: u32,
    },
}

fn parse_setting(s: &str) -> Result<Setting, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_oracle(s: &str) -> Result<OracleKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_mode(s: &str) -> Result<GatMode, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_weather(s: &str) -> Result<Weather, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_road(s: &str) -> Result<RoadType, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => load_config(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(k) = cli.oracle {
        cfg.oracle.backend = k;
    }
    match cli.command {
        Command::TrainSim { seed, resume } => {
            let opts = TrainSimOptions {
                seed: seed.unwrap_or(cfg.seed),
                out: cli.out,
                log_episodes: cli.log_episodes,
                resume,
                config_path: cli.config,
            };
            let o = cmd_train_sim(&cfg, &opts)?;
            println!("trained {} episodes; checkpoint {}", o.episodes, o.checkpoint.display());
        }
        Command::Transfer { mode, checkpoint, seeds } => {
            let setting = cli.setting.ok_or_else(|| Error::Config { field: "setting".into(), reason: "--setting is required".into() })?;
            let opts = TransferOptions {
                setting,
                mode,
                seeds: seeds.resolve(&cfg),
                checkpoint,
                out: cli.out,
                jobs: cli.jobs,
                log_episodes: cli.log_episodes,
                oracle: cli.oracle,
                config_path: cli.config,
            };
            let o = cmd_transfer(&cfg, &opts)?;
            print!("{}", report_csv(std::slice::from_ref(&o.report)));
        }
        Command::Compare { reports } => {
            let o = cmd_compare(&reports, &cli.out)?;
            for rec in &o.improvements {
                println!("{} vs {}: {} settings{}", rec.method_a, rec.method_b, rec.settings.len(), rec.note.as_ref().map(|n| format!(" ({n})")).unwrap_or_default());
            }
        }
        Command::Simulate { seeds } => {
            let setting = cli.setting.unwrap_or(Setting::V0);
            let rows = cmd_simulate(&cfg, setting, &seeds.resolve(&cfg), &cli.out, cli.log_episodes)?;
            for r in rows {
                let s = r.stats;
                println!("{} seed {}: att {:.2} tp {} reward {:.3} queue {:.3} delay {:.3}", r.world, r.seed, s.att, s.tp, s.reward_mean, s.queue_mean, s.delay);
            }
        }
        Command::Oracle { weather, road, vehicles } => {
            let (prompt, est) = cmd_oracle(&cfg, cli.oracle, DomainContext::new(weather, road), vehicles)?;
            println!("{prompt}");
            println!("{}", serde_json::to_string(&est).expect("plain data"));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
