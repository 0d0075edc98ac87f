//! Experiment pipelines behind the command-line tool.
//!
//! Each `cmd_*` function takes an already-parsed config plus options, writes
//! its artifacts under an output directory and returns what it produced.
//! Every run also writes a `manifest.json` that lists the files it created.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::dqn::{meta_path, DqnAgent, EpisodeRecord, NoGrounding};
use crate::env::{fixed_time_action, EpisodeStats, TrafficEnv};
use crate::error::{Error, Result};
use crate::gat::{run_prompt_gat_with, GatMode, GatOutcome, PolicyTrainer, RunOptions};
use crate::metrics::{gap_improvement, pearson, read_reports, write_report, GapReport, ImprovementRecord, Metric, SeedResult};
use crate::oracle::{build_prompt, Oracle, PromptContext};
use crate::rng::{stream_rng, Stream};
use crate::scenario::{DomainContext, ExperimentConfig, OracleKind, Setting};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const CHECKPOINT_FILE: &str = "policy.weights";
pub const CURVE_HEADER: &str = "episode,epsilon,mean_loss,att,tp,reward,queue,delay";

/// What a command wrote and under which inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub mode: Option<String>,
    pub setting: Option<String>,
    pub seeds: Vec<u64>,
    pub config_path: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub started_unix_ms: u128,
    pub finished_unix_ms: u128,
    /// Paths relative to `out_dir`, sorted, including the manifest itself.
    pub artifacts: Vec<PathBuf>,
}

fn now_ms() -> u128 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis()).unwrap_or(0)
}

/// Collects written files and finally writes the manifest.
struct Artifacts {
    out: PathBuf,
    started: u128,
    files: Vec<PathBuf>,
}

impl Artifacts {
    fn new(out: &Path) -> Result<Self> {
        fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        Ok(Artifacts { out: out.to_path_buf(), started: now_ms(), files: Vec::new() })
    }

    fn write(&mut self, rel: impl AsRef<Path>, contents: impl AsRef<[u8]>) -> Result<PathBuf> {
        let path = self.out.join(rel.as_ref());
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(&path, contents).map_err(|e| Error::io(&path, e))?;
        self.track(&path);
        Ok(path)
    }

    /// Record a file written by someone else.
    fn track(&mut self, path: &Path) {
        let rel = path.strip_prefix(&self.out).unwrap_or(path).to_path_buf();
        if !self.files.contains(&rel) {
            self.files.push(rel);
        }
    }

    fn finish(mut self, command: &str, mode: Option<String>, setting: Option<String>, seeds: Vec<u64>, config_path: Option<&Path>) -> Result<RunManifest> {
        self.files.push(PathBuf::from(MANIFEST_FILE));
        self.files.sort();
        self.files.dedup();
        let manifest = RunManifest {
            command: command.to_string(),
            mode,
            setting,
            seeds,
            config_path: config_path.map(Path::to_path_buf),
            out_dir: self.out.clone(),
            started_unix_ms: self.started,
            finished_unix_ms: now_ms(),
            artifacts: self.files,
        };
        let path = self.out.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(&manifest).expect("plain data") + "\n";
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(manifest)
    }
}

pub fn curve_csv(curve: &[EpisodeRecord]) -> String {
    let mut out = String::from(CURVE_HEADER);
    out.push('\n');
    for r in curve {
        let s = &r.stats;
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.episode, r.epsilon, r.mean_loss, s.att, s.tp, s.reward_mean, s.queue_mean, s.delay
        );
    }
    out
}

fn parse_curve(path: &Path) -> Result<Vec<EpisodeRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1).filter(|(_, l)| !l.trim().is_empty()) {
        let bad = |what: &str| Error::format("curve", path, format!("line {}: {what}", i + 1));
        let v: Vec<&str> = line.split(',').collect();
        if v.len() != 8 {
            return Err(bad("expected 8 columns"));
        }
        let f = |j: usize| v[j].parse::<f64>().map_err(|_| bad("not a number"));
        out.push(EpisodeRecord {
            episode: v[0].parse().map_err(|_| bad("episode"))?,
            epsilon: f(1)?,
            mean_loss: f(2)?,
            stats: EpisodeStats { att: f(3)?, tp: f(4)?, reward_mean: f(5)?, queue_mean: f(6)?, delay: f(7)? },
        });
    }
    Ok(out)
}

pub struct TrainSimOptions {
    pub seed: u64,
    pub out: PathBuf,
    pub log_episodes: bool,
    /// Continue from a checkpoint already in `out` instead of starting over.
    pub resume: bool,
    pub config_path: Option<PathBuf>,
}

#[derive(Debug)]
pub struct TrainSimOutput {
    pub checkpoint: PathBuf,
    pub curve: PathBuf,
    pub episodes: u64,
    pub manifest: RunManifest,
}

/// Train a policy in the simulator for `trainer.episodes` episodes. The
/// checkpoint and curve are rewritten after every episode, so an
/// interrupted run can be picked up with `resume`.
pub fn cmd_train_sim(cfg: &ExperimentConfig, opts: &TrainSimOptions) -> Result<TrainSimOutput> {
    cfg.validate()?;
    let mut art = Artifacts::new(&opts.out)?;
    let ckpt = opts.out.join(CHECKPOINT_FILE);
    let curve_path = opts.out.join("curve.csv");
    let mut trainer = if opts.resume && ckpt.exists() {
        let agent = DqnAgent::load(&ckpt, &cfg.dqn, &cfg.trainer)?;
        let mut t = PolicyTrainer::with_agent(cfg, opts.seed, agent)?;
        if curve_path.exists() {
            t.curve = parse_curve(&curve_path)?;
        }
        t
    } else {
        PolicyTrainer::new(cfg, opts.seed)?
    };
    if opts.log_episodes {
        trainer.enable_episode_logs();
    }
    while trainer.agent.episodes() < u64::from(cfg.trainer.episodes) {
        trainer.train_episodes(1, &mut NoGrounding)?;
        trainer.agent.save(&ckpt)?;
        art.write("curve.csv", curve_csv(&trainer.curve))?;
        for (k, log) in trainer.episode_logs.drain(..) {
            art.write(format!("episodes/episode_{k:04}.csv"), log)?;
        }
    }
    if !ckpt.exists() {
        // Nothing left to train (e.g. zero episodes): still leave a checkpoint.
        trainer.agent.save(&ckpt)?;
        art.write("curve.csv", curve_csv(&trainer.curve))?;
    }
    art.track(&ckpt);
    art.track(&meta_path(&ckpt));
    art.track(&curve_path);
    if opts.log_episodes {
        // Logs from an earlier, interrupted invocation are still ours.
        let dir = opts.out.join("episodes");
        if let Ok(entries) = fs::read_dir(&dir) {
            for e in entries.flatten() {
                art.track(&e.path());
            }
        }
    }
    let episodes = trainer.agent.episodes();
    let manifest = art.finish("train-sim", None, Some(Setting::V0.as_str().to_string()), vec![opts.seed], opts.config_path.as_deref())?;
    Ok(TrainSimOutput { checkpoint: ckpt, curve: curve_path, episodes, manifest })
}

pub struct TransferOptions {
    pub setting: Setting,
    pub mode: GatMode,
    pub seeds: Vec<u64>,
    /// Start every seed from this policy instead of pre-training one.
    pub checkpoint: Option<PathBuf>,
    pub out: PathBuf,
    pub jobs: usize,
    pub log_episodes: bool,
    /// Overrides `oracle.backend` from the config.
    pub oracle: Option<OracleKind>,
    pub config_path: Option<PathBuf>,
}

#[derive(Debug)]
pub struct TransferOutput {
    pub report: GapReport,
    pub manifest: RunManifest,
    /// Distinct oracle backend calls made (0 unless prompting).
    pub oracle_calls: u64,
}

/// Build the oracle a prompting run needs. Called before any episode so a
/// misconfiguration (e.g. a missing credential) fails fast.
pub fn oracle_for(cfg: &ExperimentConfig, kind: Option<OracleKind>) -> Result<Oracle> {
    let mut p = cfg.oracle.clone();
    if let Some(k) = kind {
        p.backend = k;
    }
    Oracle::from_params(&p)
}

/// Run one method in one setting for every seed, then aggregate.
pub fn cmd_transfer(cfg: &ExperimentConfig, opts: &TransferOptions) -> Result<TransferOutput> {
    let cfg = cfg.clone().with_setting(opts.setting);
    cfg.validate()?;
    if opts.seeds.is_empty() {
        return Err(Error::config("seeds", "at least one seed is required"));
    }
    let base_agent = match &opts.checkpoint {
        Some(p) if !p.exists() => {
            return Err(Error::config("checkpoint", format!("{} does not exist", p.display())));
        }
        Some(p) => Some(DqnAgent::load(p, &cfg.dqn, &cfg.trainer)?),
        None => None,
    };
    let oracle = match opts.mode {
        GatMode::PromptGat => Some(oracle_for(&cfg, opts.oracle)?),
        _ => None,
    };
    let mut art = Artifacts::new(&opts.out)?;

    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<GatOutcome>>>> = Mutex::new((0..opts.seeds.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..opts.jobs.clamp(1, opts.seeds.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(&seed) = opts.seeds.get(i) else { break };
                let run = || -> Result<GatOutcome> {
                    let pretrained = match &base_agent {
                        Some(a) => Some(PolicyTrainer::with_agent(&cfg, seed, a.clone())?),
                        None => None,
                    };
                    let ro = RunOptions { pretrained, real_action_map: None, log_episodes: opts.log_episodes };
                    run_prompt_gat_with(&cfg, opts.mode, seed, oracle.as_ref(), ro)
                };
                let outcome = run();
                slots.lock().expect("result slots")[i] = Some(outcome);
            });
        }
    });

    let mut results: Vec<SeedResult> = Vec::new();
    for outcome in slots.into_inner().expect("result slots") {
        let o = outcome.expect("every seed ran")?;
        let dir = format!("seed_{}", o.seed);
        let w = art.out.join(&dir).join(CHECKPOINT_FILE);
        fs::create_dir_all(art.out.join(&dir)).map_err(|e| Error::io(&dir, e))?;
        o.agent.save(&w)?;
        art.track(&w);
        art.track(&meta_path(&w));
        art.write(format!("{dir}/curve.csv"), curve_csv(&o.curve))?;
        let iters = serde_json::to_string_pretty(&o.iterations).expect("plain data") + "\n";
        art.write(format!("{dir}/iterations.json"), iters)?;
        for (name, data) in [("d_sim.jsonl", &o.d_sim), ("d_real.jsonl", &o.d_real)] {
            if !data.is_empty() {
                let p = art.out.join(&dir).join(name);
                data.save(&p)?;
                art.track(&p);
            }
        }
        for (k, log) in &o.episode_logs {
            art.write(format!("{dir}/episodes/episode_{k:04}.csv"), log)?;
        }
        results.push(o.result);
    }
    let report = GapReport::aggregate(opts.mode.as_str(), opts.setting.as_str(), &results)?;
    for p in write_report(std::slice::from_ref(&report), &opts.out)? {
        art.track(&p);
    }
    let manifest = art.finish(
        "transfer",
        Some(opts.mode.as_str().to_string()),
        Some(opts.setting.as_str().to_string()),
        opts.seeds.clone(),
        opts.config_path.as_deref(),
    )?;
    let oracle_calls = oracle.as_ref().map_or(0, Oracle::calls);
    Ok(TransferOutput { report, manifest, oracle_calls })
}

/// One cell of the correlation matrix; `r` and `p` are absent when the
/// correlation is undefined, with the reason in `note`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationCell {
    pub method_a: String,
    pub method_b: String,
    pub x: String,
    pub y: String,
    pub r: Option<f64>,
    pub p: Option<f64>,
    pub n: usize,
    pub note: Option<String>,
}

#[derive(Debug)]
pub struct CompareOutput {
    pub improvements: Vec<ImprovementRecord>,
    pub correlations: Vec<CorrelationCell>,
    pub manifest: RunManifest,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

/// Improvement series across settings, named like the metrics plus
/// `accuracy` when both methods trained a forward model.
fn improvement_series(rec: &ImprovementRecord) -> Vec<(String, Vec<f64>)> {
    let mut out: Vec<(String, Vec<f64>)> =
        Metric::ALL.iter().enumerate().map(|(m, metric)| (metric.as_str().to_string(), rec.raw.iter().map(|r| r[m]).collect())).collect();
    if let Some(acc) = &rec.accuracy_raw {
        out.insert(0, ("accuracy".to_string(), acc.clone()));
    }
    out
}

/// Gap improvements and their correlations for every pair of methods found
/// in the given report files.
pub fn cmd_compare(reports: &[PathBuf], out: &Path) -> Result<CompareOutput> {
    let mut by_method: BTreeMap<String, Vec<GapReport>> = BTreeMap::new();
    for path in reports {
        for r in read_reports(path)? {
            r.check()?;
            let list = by_method.entry(r.method.clone()).or_default();
            if list.iter().any(|x| x.setting == r.setting) {
                return Err(Error::config("reports", format!("{} / {} appears more than once", r.method, r.setting)));
            }
            list.push(r);
        }
    }
    if by_method.len() < 2 {
        return Err(Error::config("reports", "need reports from at least 2 methods"));
    }
    let mut settings_of = by_method.values_mut().map(|list| {
        list.sort_by(|a, b| a.setting.cmp(&b.setting));
        list.iter().map(|r| r.setting.clone()).collect::<Vec<_>>()
    });
    let first = settings_of.next().expect("two methods");
    if settings_of.any(|s| s != first) {
        return Err(Error::config("reports", "methods cover different settings"));
    }

    let mut art = Artifacts::new(out)?;
    let methods: Vec<&String> = by_method.keys().collect();
    let mut improvements = Vec::new();
    let mut correlations = Vec::new();
    for (i, a) in methods.iter().enumerate() {
        for b in &methods[i + 1..] {
            let rec = gap_improvement(&by_method[*a], &by_method[*b])?;
            let series = improvement_series(&rec);
            for (x, xs) in &series {
                for (y, ys) in &series {
                    let (r, p, note) = match pearson(xs, ys) {
                        Ok((r, p)) => (Some(r), Some(p), None),
                        Err(e) => (None, None, Some(e.to_string())),
                    };
                    correlations.push(CorrelationCell {
                        method_a: rec.method_a.clone(),
                        method_b: rec.method_b.clone(),
                        x: x.clone(),
                        y: y.clone(),
                        r,
                        p,
                        n: xs.len(),
                        note,
                    });
                }
            }
            improvements.push(rec);
        }
    }

    let mut csv = String::from("method_a,method_b,setting,metric,raw,normalized,note\n");
    for rec in &improvements {
        for (k, setting) in rec.settings.iter().enumerate() {
            let note = rec.note.as_deref().unwrap_or("");
            if let Some(acc) = &rec.accuracy_raw {
                let norm = rec.accuracy_normalized.as_ref().map(|v| v[k]);
                let _ = writeln!(csv, "{},{},{setting},accuracy,{:.6},{},{note}", rec.method_a, rec.method_b, acc[k], fmt_opt(norm));
            }
            for (m, metric) in Metric::ALL.iter().enumerate() {
                let norm = rec.normalized.as_ref().map(|v| v[k][m]);
                let _ = writeln!(
                    csv,
                    "{},{},{setting},{},{:.6},{},{note}",
                    rec.method_a,
                    rec.method_b,
                    metric.as_str(),
                    rec.raw[k][m],
                    fmt_opt(norm)
                );
            }
        }
    }
    art.write("improvement.csv", csv)?;
    art.write("improvement.json", serde_json::to_string_pretty(&improvements).expect("plain data") + "\n")?;

    let mut csv = String::from("method_a,method_b,x,y,r,p,n,note\n");
    for c in &correlations {
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{},{}",
            c.method_a,
            c.method_b,
            c.x,
            c.y,
            fmt_opt(c.r),
            c.p.map(|p| format!("{p:.6e}")).unwrap_or_default(),
            c.n,
            c.note.as_deref().unwrap_or("").replace(',', ";")
        );
    }
    art.write("correlation.csv", csv)?;
    let manifest = art.finish("compare", None, None, Vec::new(), None)?;
    Ok(CompareOutput { improvements, correlations, manifest })
}

/// Fixed-time baseline of one seed in one world.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineRow {
    pub world: String,
    pub seed: u64,
    pub stats: EpisodeStats,
}

/// Run the round-robin fixed-time plan in the simulator and in the
/// setting's deployment world, one evaluation episode per seed.
pub fn cmd_simulate(cfg: &ExperimentConfig, setting: Setting, seeds: &[u64], out: &Path, log_episodes: bool) -> Result<Vec<BaselineRow>> {
    let cfg = cfg.clone().with_setting(setting);
    cfg.validate()?;
    let cycle = cfg.trainer.fixed_time_cycle;
    if cycle < cfg.trainer.action_interval {
        return Err(Error::config("trainer.fixed_time_cycle", "cycle must be >= action_interval"));
    }
    let mut art = Artifacts::new(out)?;
    let mut rows = Vec::new();
    for (world, profile) in [("sim", cfg.scenario.sim_profile), ("real", cfg.scenario.real_profile)] {
        for &seed in seeds {
            let mut env = TrafficEnv::from_config(&cfg, profile)?;
            if log_episodes {
                env.enable_log();
            }
            env.reset_with_rng(stream_rng(seed, Stream::Evaluation, 0));
            let mut k = 0;
            while !env.is_done() {
                env.step(fixed_time_action(k, cfg.trainer.action_interval, cycle))?;
                k += 1;
            }
            if log_episodes {
                art.write(format!("episodes/{world}_seed_{seed}.csv"), env.log_csv())?;
            }
            rows.push(BaselineRow { world: world.to_string(), seed, stats: env.episode_stats()? });
        }
    }
    let mut csv = String::from("world,seed,att,tp,reward,queue,delay\n");
    for r in &rows {
        let s = &r.stats;
        let _ = writeln!(csv, "{},{},{:.4},{:.4},{:.4},{:.4},{:.4}", r.world, r.seed, s.att, s.tp, s.reward_mean, s.queue_mean, s.delay);
    }
    art.write("fixed_time.csv", csv)?;
    art.finish("simulate", None, Some(setting.as_str().to_string()), seeds.to_vec(), None)?;
    Ok(rows)
}

/// Prompt text and the oracle's parsed answer for one context.
pub fn cmd_oracle(cfg: &ExperimentConfig, kind: Option<OracleKind>, context: DomainContext, vehicles: u32) -> Result<(String, crate::oracle::DynamicsEstimate)> {
    let oracle = oracle_for(cfg, kind)?;
    let ctx = PromptContext::new(context, vehicles);
    let est = oracle.query(&ctx)?;
    Ok((build_prompt(&ctx), est))
}
