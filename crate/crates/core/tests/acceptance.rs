//! End-to-end acceptance checks. Each test prints one PASS/FAIL line
//! straight to stdout (bypassing libtest's capture) and then asserts.
//!
//! Experiment checks run at desk scale: 600 s episodes, short training.

use std::collections::{HashMap, HashSet};
use std::io::Write;
use std::path::PathBuf;
use std::time::{Duration, Instant};

use groundsim::dqn::NoGrounding;
use groundsim::env::{fixed_time_action, EpisodeStats, TrafficEnv};
use groundsim::gat::{
    ground_action, run_prompt_gat_with, ForwardModel, GatMode, InverseModel, PolicyTrainer, RunOptions, TransitionRecord,
};
use groundsim::metrics::{gap, improvement, pearson};
use groundsim::neural::{cross_entropy_loss, mse_loss, Mlp, MlpSpec, OutputActivation};
use groundsim::oracle::{
    build_prompt, context_sentence, parse_response, Backend, DynamicsEstimate, Oracle, PromptContext, RuleBackend,
};
use groundsim::rng::{stream_rng, Stream};
use groundsim::scenario::{
    builtin_profile, DomainContext, ExperimentConfig, FlowSpec, RoadNetwork, RoadType, Setting, Weather,
};
use groundsim::sim::Engine;
use rand::Rng;

fn verdict(id: u32, name: &str, pass: bool, detail: &str) {
    let line = format!("criterion {id:>2} [{}] {name}: {detail}\n", if pass { "PASS" } else { "FAIL" });
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(line.as_bytes());
    let _ = out.flush();
    assert!(pass, "{}", line.trim_end());
}

fn desk(steps: u32) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.trainer.steps = steps;
    cfg.trainer.learning_start = 200;
    cfg
}

fn secs(d: Duration) -> String {
    format!("{:.1}s", d.as_secs_f64())
}

// ---------------------------------------------------------------- 1

/// Conservation and no-overlap, checked from the outside: vehicle ids are
/// tracked tick to tick and every disappearance must be an exit. Ids are
/// handed out below `spawned`, so per-id state lives in plain vectors.
fn fuzz_engine(seed: u64, ticks: u64) -> Result<(), String> {
    const NEVER: u64 = u64::MAX;
    let mut pick = stream_rng(seed, Stream::Exploration, 1);
    let setting = Setting::ALL[pick.random_range(0..5)];
    let rate = pick.random_range(0.05..0.4);
    let net = RoadNetwork::default();
    let flow = FlowSpec::poisson(rate, ticks as f64).map_err(|e| e.to_string())?;
    let mut engine = Engine::new(net, setting.profile(), flow, 5, stream_rng(seed, Stream::Arrivals, 0));
    // Tick at which each id was last seen in the network or exited, and its position then.
    let (mut seen, mut exited_at, mut pos): (Vec<u64>, Vec<u64>, Vec<f64>) = (Vec::new(), Vec::new(), Vec::new());
    let (mut prev, mut now): (Vec<u64>, Vec<u64>) = (Vec::new(), Vec::new());
    for t in 0..ticks {
        if engine.state().controller.yellow_remaining == 0 && pick.random_bool(0.1) {
            engine.set_phase(pick.random_range(0..4)).map_err(|e| e.to_string())?;
        }
        let exited_before = engine.state().exited.len();
        engine.step();
        let s = engine.state();
        let known = s.spawned as usize;
        seen.resize(known, NEVER);
        exited_at.resize(known, NEVER);
        pos.resize(known, 0.0);
        now.clear();
        for lane in &s.lanes {
            for pair in lane.vehicles.windows(2) {
                if pair[0].position - pair[1].position < net.vehicle_length - 1e-9 {
                    return Err(format!("tick {t}: overlap between {} and {}", pair[0].id, pair[1].id));
                }
            }
            for v in &lane.vehicles {
                let i = v.id as usize;
                if i >= known {
                    return Err(format!("tick {t}: vehicle {} was never spawned", v.id));
                }
                if seen[i] == t {
                    return Err(format!("tick {t}: vehicle {} on two lanes", v.id));
                }
                if v.speed < 0.0 || v.speed > net.speed_limit + 1e-9 {
                    return Err(format!("tick {t}: vehicle {} speed {}", v.id, v.speed));
                }
                if t > 0 && seen[i] == t - 1 && v.position < pos[i] - 1e-12 {
                    return Err(format!("tick {t}: vehicle {} moved backwards", v.id));
                }
                seen[i] = t;
                pos[i] = v.position;
                now.push(v.id);
            }
        }
        for e in &s.exited[exited_before..] {
            if let Some(slot) = exited_at.get_mut(e.id as usize) {
                *slot = t;
            }
        }
        for &id in &prev {
            let i = id as usize;
            if seen[i] != t && exited_at[i] != t {
                return Err(format!("tick {t}: vehicle {id} vanished without exiting"));
            }
        }
        if s.spawned != (now.len() + s.exited.len()) as u64 {
            return Err(format!("tick {t}: spawned {} != {} present + {} exited", s.spawned, now.len(), s.exited.len()));
        }
        std::mem::swap(&mut prev, &mut now);
    }
    Ok(())
}

#[test]
fn c01_simulator_invariants() {
    let start = Instant::now();
    let failures: Vec<String> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..50u64).map(|seed| scope.spawn(move || fuzz_engine(seed, 10_000).err().map(|e| format!("seed {seed}: {e}")))).collect();
        handles.into_iter().filter_map(|h| h.join().expect("fuzz thread")).collect()
    });
    let took = start.elapsed();
    let pass = failures.is_empty() && took < Duration::from_secs(30);
    let detail = match failures.first() {
        Some(f) => format!("{} of 50 seeds failed, first: {f}", failures.len()),
        None => format!("50 seeds x 10^4 ticks clean in {}", secs(took)),
    };
    verdict(1, "simulator invariants", pass, &detail);
}

// ---------------------------------------------------------------- 2

#[test]
fn c02_dynamics_profiles() {
    let want = [
        ("V0", 2.60, 4.50, 9.00, 0.00),
        ("V1", 1.00, 2.50, 6.00, 0.50),
        ("V2", 1.00, 2.50, 6.00, 0.75),
        ("V3", 0.75, 3.50, 6.00, 0.25),
        ("V4", 0.50, 1.50, 2.00, 0.50),
    ];
    let mut bad = Vec::new();
    for (name, a, d, e, s) in want {
        let p = builtin_profile(name).unwrap();
        let got = [p.accel, p.decel, p.e_decel, p.startup_delay].map(f64::to_bits);
        if got != [a, d, e, s].map(f64::to_bits) {
            bad.push(name);
        }
    }
    verdict(2, "dynamics profiles", bad.is_empty(), &format!("5 rows checked, mismatched: {bad:?}"));
}

// ---------------------------------------------------------------- 3

/// Pre-activations of every layer, recomputed from the raw weights.
fn pre_activations(mlp: &Mlp, x: &[f64]) -> Vec<Vec<f64>> {
    let mut h = x.to_vec();
    let mut out = Vec::new();
    let n = mlp.layers().len();
    for (i, layer) in mlp.layers().iter().enumerate() {
        let z: Vec<f64> = layer.weights.matvec(&h).iter().zip(&layer.bias).map(|(a, b)| a + b).collect();
        h = if i + 1 < n { z.iter().map(|v| v.max(0.0)).collect() } else { z.clone() };
        out.push(z);
    }
    out
}

fn rel_err(a: f64, n: f64) -> f64 {
    let scale = a.abs() + n.abs();
    if scale == 0.0 {
        0.0
    } else {
        (a - n).abs() / scale
    }
}

#[test]
fn c03_gradient_check() {
    let start = Instant::now();
    let h = 1e-5;
    let mut worst = 0.0f64;
    let mut resampled = 0;
    for k in 0..100u64 {
        let mut rng = stream_rng(k, Stream::Init, 77);
        let depth = rng.random_range(1..=3);
        let mut widths = vec![rng.random_range(1..=6)];
        for _ in 0..depth {
            widths.push(rng.random_range(1..=8));
        }
        let classify = k % 2 == 1;
        let out_dim = if classify { rng.random_range(2..=5) } else { rng.random_range(1..=4) };
        widths.push(out_dim);
        let act = if classify { OutputActivation::SoftmaxCe } else { OutputActivation::Identity };
        let mut mlp = Mlp::new(MlpSpec::new(widths.clone(), act).unwrap(), &mut rng);
        // Finite differences are meaningless at a ReLU kink; draw inputs
        // that keep every hidden pre-activation clear of zero. Biases are
        // randomized too, since with zero biases a unit fed only by dead
        // units sits on its kink for every input. Redraw the whole net if
        // inputs keep failing.
        let margin = 1e-3;
        let x = 'net: loop {
            let p: Vec<f64> = (0..mlp.num_params()).map(|_| rng.random_range(-1.0..1.0)).collect();
            mlp.set_params(&p).unwrap();
            for _ in 0..1000 {
                let x: Vec<f64> = (0..widths[0]).map(|_| rng.random_range(-2.0..2.0)).collect();
                let pre = pre_activations(&mlp, &x);
                if pre[..pre.len() - 1].iter().flatten().all(|z| z.abs() > margin) {
                    break 'net x;
                }
                resampled += 1;
            }
        };
        let target: Vec<f64> = (0..out_dim).map(|_| rng.random_range(-2.0..2.0)).collect();
        let class = rng.random_range(0..out_dim);
        let loss = |m: &Mlp, x: &[f64]| {
            let y = m.predict(x).unwrap();
            if classify { cross_entropy_loss(&y, class).unwrap().0 } else { mse_loss(&y, &target).unwrap().0 }
        };
        let (y, cache) = mlp.forward(&x).unwrap();
        let g_out = if classify { cross_entropy_loss(&y, class).unwrap().1 } else { mse_loss(&y, &target).unwrap().1 };
        let (grads, g_in) = mlp.backward(&cache, &g_out).unwrap();
        let analytic = grads.flatten();
        let params = mlp.params();
        let mut probe = mlp.clone();
        for i in 0..params.len() {
            let mut p = params.clone();
            p[i] += h;
            probe.set_params(&p).unwrap();
            let up = loss(&probe, &x);
            p[i] -= 2.0 * h;
            probe.set_params(&p).unwrap();
            let down = loss(&probe, &x);
            worst = worst.max(rel_err(analytic[i], (up - down) / (2.0 * h)));
        }
        for j in 0..x.len() {
            let mut xp = x.clone();
            xp[j] += h;
            let up = loss(&mlp, &xp);
            xp[j] -= 2.0 * h;
            let down = loss(&mlp, &xp);
            worst = worst.max(rel_err(g_in[j], (up - down) / (2.0 * h)));
        }
    }
    let took = start.elapsed();
    let pass = worst < 1e-4 && took < Duration::from_secs(10);
    verdict(
        3,
        "gradient check",
        pass,
        &format!("100 nets, worst relative error {worst:.2e} (h=1e-5, {resampled} inputs redrawn off kinks) in {}", secs(took)),
    );
}

// ---------------------------------------------------------------- 4

#[test]
fn c04_fixed_time_gap_direction() {
    let start = Instant::now();
    let cfg = ExperimentConfig::default();
    let run = |s: Setting, seed: u64| groundsim::env::run_fixed_time(&cfg, s.profile(), cfg.trainer.fixed_time_cycle, seed).unwrap();
    let mut ok = 0;
    let mut rows = Vec::new();
    for seed in 0..5 {
        let (v0, v3, v4) = (run(Setting::V0, seed), run(Setting::V3, seed), run(Setting::V4, seed));
        if v4.att > v3.att && v3.att > v0.att && v4.tp <= v0.tp {
            ok += 1;
        }
        rows.push(format!("{:.0}/{:.0}/{:.0} tp {}/{}", v0.att, v3.att, v4.att, v0.tp, v4.tp));
    }
    let took = start.elapsed();
    let pass = ok == 5 && took < Duration::from_secs(60);
    verdict(4, "fixed-time gap direction", pass, &format!("{ok}/5 seeds ordered, ATT V0/V3/V4 and TP V0/V4: {} in {}", rows.join(" "), secs(took)));
}

// ---------------------------------------------------------------- 5

fn fixed_time_episode(cfg: &ExperimentConfig, env: &mut TrafficEnv) -> EpisodeStats {
    let mut k = 0;
    while !env.is_done() {
        env.step(fixed_time_action(k, cfg.trainer.action_interval, cfg.trainer.fixed_time_cycle)).unwrap();
        k += 1;
    }
    env.episode_stats().unwrap()
}

#[test]
fn c05_dqn_beats_fixed_time() {
    let start = Instant::now();
    let cfg = desk(600);
    let results: Vec<(f64, f64, f64, f64)> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..3u64)
            .map(|seed| {
                let cfg = &cfg;
                scope.spawn(move || {
                    let mut t = PolicyTrainer::new(cfg, seed).unwrap();
                    t.train_episodes(30, &mut NoGrounding).unwrap();
                    let mut env = TrafficEnv::from_config(cfg, Setting::V0.profile()).unwrap();
                    let (mut r, mut q, mut fr, mut fq) = (0.0, 0.0, 0.0, 0.0);
                    for j in 0..5 {
                        env.reset_with_rng(stream_rng(seed, Stream::Evaluation, j));
                        let s = groundsim::dqn::evaluate_episode(&t.agent, &mut env).unwrap();
                        env.reset_with_rng(stream_rng(seed, Stream::Evaluation, j));
                        let f = fixed_time_episode(cfg, &mut env);
                        r += s.reward_mean / 5.0;
                        q += s.queue_mean / 5.0;
                        fr += f.reward_mean / 5.0;
                        fq += f.queue_mean / 5.0;
                    }
                    (r, q, fr, fq)
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("training thread")).collect()
    });
    let ok = results.iter().filter(|(r, q, fr, fq)| r >= fr && *q <= 0.9 * fq).count();
    let shown: Vec<String> = results.iter().map(|(_, q, _, fq)| format!("{q:.1} vs {fq:.1}")).collect();
    let took = start.elapsed();
    let pass = ok == 3 && took < Duration::from_secs(300);
    verdict(5, "DQN learning sanity", pass, &format!("{ok}/3 seeds, queue DQN vs fixed {} in {}", shown.join(", "), secs(took)));
}

// ---------------------------------------------------------------- 6

fn random_policy_records(cfg: &ExperimentConfig, setting: Setting, seed: u64, episode: u64, switch: f64, oracle: Option<&Oracle>) -> Vec<TransitionRecord> {
    let mut env = TrafficEnv::from_config(cfg, setting.profile()).unwrap();
    env.reset_with_rng(stream_rng(seed, Stream::Rollout, 100 * setting as u64 + episode));
    let mut pick = stream_rng(seed, Stream::Exploration, 100 * setting as u64 + episode);
    let ctx = setting.default_context();
    let mut out = Vec::new();
    let mut a = 0;
    let mut s = env.observe();
    while !env.is_done() {
        if pick.random_bool(switch) {
            a = pick.random_range(0..4);
        }
        let lane_estimates = oracle.map(|o| o.query_lanes(ctx, &s.lane_counts).unwrap().to_vec());
        let step = env.step(a).unwrap();
        out.push(TransitionRecord { s, a, s_next: step.next_obs, r: step.reward, ctx, lane_estimates });
        s = step.next_obs;
    }
    out
}

#[test]
fn c06_inverse_separability() {
    let start = Instant::now();
    let mut cfg = desk(600);
    cfg.gat.inverse_lr = 1e-3;
    cfg.gat.inverse_epochs = 100;
    let mut train = Vec::new();
    for ep in 0..10 {
        train.extend(random_policy_records(&cfg, Setting::V0, 0, ep, 1.0, None));
    }
    let held_out = random_policy_records(&cfg, Setting::V0, 0, 10, 1.0, None);
    // Brute-force baseline: the action is recoverable from s' alone when
    // every action leads to a distinct next state.
    let by_next: HashMap<Vec<u64>, HashSet<usize>> = train.iter().chain(&held_out).fold(HashMap::new(), |mut m, r| {
        let key = r.s.to_vec().into_iter().chain(r.s_next.to_vec()).map(f64::to_bits).collect();
        m.entry(key).or_default().insert(r.a);
        m
    });
    let distinct = by_next.values().all(|acts| acts.len() == 1);
    let mut inv = InverseModel::new(&cfg.gat, &mut stream_rng(0, Stream::Init, 2)).unwrap();
    inv.train(&train, cfg.gat.inverse_epochs, cfg.gat.batch_size, &mut stream_rng(0, Stream::ModelShuffle, 1)).unwrap();
    let acc = inv.accuracy(&held_out).unwrap();
    let took = start.elapsed();
    let pass = distinct && acc >= 0.7 && took < Duration::from_secs(60);
    verdict(
        6,
        "inverse separability",
        pass,
        &format!("held-out accuracy {acc:.3} on {} records (actions distinct: {distinct}) in {}", held_out.len(), secs(took)),
    );
}

// ---------------------------------------------------------------- 7

#[test]
fn c07_permutation_recovery() {
    let start = Instant::now();
    let mut cfg = desk(600).with_setting(Setting::V0);
    cfg.trainer.episodes = 10;
    cfg.gat.pretrain_episodes = 30;
    cfg.gat.forward_lr = 1e-3;
    cfg.gat.inverse_lr = 1e-3;
    // Constant full exploration so every action is seen in every world.
    cfg.dqn.epsilon = 1.0;
    cfg.dqn.epsilon_decay = 1.0;
    let map = [1, 2, 3, 0];
    let accs: Vec<f64> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..5u64)
            .map(|seed| {
                let cfg = &cfg;
                scope.spawn(move || {
                    let opts = RunOptions { real_action_map: Some(map), ..Default::default() };
                    let o = run_prompt_gat_with(cfg, GatMode::VanillaGat, seed, None, opts).unwrap();
                    let (f, i) = (o.forward.as_ref().unwrap(), o.inverse.as_ref().unwrap());
                    let mut env = TrafficEnv::from_config(cfg, cfg.scenario.sim_profile).unwrap();
                    env.reset_with_rng(stream_rng(seed, Stream::Evaluation, 99));
                    let (mut hit, mut n) = (0, 0);
                    while !env.is_done() {
                        let s = env.observe();
                        for a in 0..4 {
                            n += 1;
                            if ground_action(&s, a, f, i, None, cfg.scenario.real_context).unwrap() == map[a] {
                                hit += 1;
                            }
                        }
                        env.step(o.agent.greedy(&s.to_vec()).unwrap()).unwrap();
                    }
                    hit as f64 / n as f64
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("gat thread")).collect()
    });
    let ok = accs.iter().filter(|&&a| a >= 0.8).count();
    let took = start.elapsed();
    let pass = ok >= 3 && took < Duration::from_secs(600);
    let shown: Vec<String> = accs.iter().map(|a| format!("{a:.3}")).collect();
    verdict(7, "permutation recovery", pass, &format!("{ok}/5 seeds >= 0.8, accuracy {} in {}", shown.join(" "), secs(took)));
}

// ---------------------------------------------------------------- 8

#[test]
fn c08_fusion_benefit() {
    let start = Instant::now();
    let cfg = desk(600);
    let oracle = Oracle::rule();
    let pairs: Vec<(f64, f64)> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..5u64)
            .map(|seed| {
                let (cfg, oracle) = (&cfg, &oracle);
                scope.spawn(move || {
                    let (mut train, mut test) = (Vec::new(), Vec::new());
                    for s in [Setting::V0, Setting::V3, Setting::V4] {
                        for ep in 0..5 {
                            let recs = random_policy_records(cfg, s, seed, ep, 0.3, Some(oracle));
                            if ep < 4 { train.extend(recs) } else { test.extend(recs) }
                        }
                    }
                    let g = &cfg.gat;
                    let mut fused = ForwardModel::new(g, true, &mut stream_rng(seed, Stream::Init, 1)).unwrap();
                    let mut plain = ForwardModel::new(g, false, &mut stream_rng(seed, Stream::Init, 1)).unwrap();
                    fused.train(&train, g.forward_epochs, g.batch_size, &mut stream_rng(seed, Stream::ModelShuffle, 0)).unwrap();
                    plain.train(&train, g.forward_epochs, g.batch_size, &mut stream_rng(seed, Stream::ModelShuffle, 0)).unwrap();
                    (fused.evaluate(&test).unwrap(), plain.evaluate(&test).unwrap())
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("fusion thread")).collect()
    });
    let fused = pairs.iter().map(|p| p.0).sum::<f64>() / 5.0;
    let plain = pairs.iter().map(|p| p.1).sum::<f64>() / 5.0;
    let took = start.elapsed();
    let pass = fused < plain && took < Duration::from_secs(300);
    verdict(8, "fusion benefit", pass, &format!("mean held-out MSE fused {fused:.3} vs plain {plain:.3} in {}", secs(took)));
}

// ---------------------------------------------------------------- 9

#[test]
fn c09_gap_mitigation() {
    let start = Instant::now();
    let mut cfg = desk(600).with_setting(Setting::V4);
    cfg.trainer.episodes = 10;
    let oracle = Oracle::rule();
    let rows: Vec<(f64, f64)> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..5u64)
            .map(|seed| {
                let (cfg, oracle) = (&cfg, &oracle);
                scope.spawn(move || {
                    let mut pre = PolicyTrainer::new(cfg, seed).unwrap();
                    pre.train_episodes(cfg.gat.pretrain_episodes, &mut NoGrounding).unwrap();
                    let run = |mode| {
                        let opts = RunOptions { pretrained: Some(pre.clone()), ..Default::default() };
                        run_prompt_gat_with(cfg, mode, seed, Some(oracle), opts).unwrap().result
                    };
                    let (d, p) = (run(GatMode::Direct), run(GatMode::PromptGat));
                    (gap(d.sim.att, d.real.att).unwrap(), gap(p.sim.att, p.real.att).unwrap())
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("transfer thread")).collect()
    });
    let ok = rows.iter().filter(|(d, p)| p.abs() <= d.abs()).count();
    let took = start.elapsed();
    let pass = ok >= 3 && took < Duration::from_secs(900);
    let shown: Vec<String> = rows.iter().map(|(d, p)| format!("{:.1}->{:.1}", d.abs(), p.abs())).collect();
    verdict(9, "gap mitigation", pass, &format!("{ok}/5 seeds, |ATT gap| direct->prompt {} in {}", shown.join(" "), secs(took)));
}

// ---------------------------------------------------------------- 10

struct ResultRow {
    setting: String,
    method: String,
    values: [f64; 5],
    deltas: [Option<f64>; 5],
}

fn load_results() -> Vec<ResultRow> {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/transfer_results.csv");
    let text = std::fs::read_to_string(path).unwrap();
    text.lines()
        .skip(1)
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            let mut values = [0.0; 5];
            let mut deltas = [None; 5];
            for m in 0..5 {
                values[m] = f[2 + 2 * m].parse().unwrap();
                deltas[m] = f[3 + 2 * m].parse().ok();
            }
            ResultRow { setting: f[0].to_string(), method: f[1].to_string(), values, deltas }
        })
        .collect()
}

#[test]
fn c10_reported_gaps_recompute() {
    let rows = load_results();
    let sim = rows.iter().find(|r| r.method == "simulator").unwrap();
    let names = ["att", "tp", "reward", "queue", "delay"];
    let mut cells = 0;
    let mut off = Vec::new();
    for r in rows.iter().filter(|r| r.method != "simulator") {
        for m in 0..5 {
            let printed = r.deltas[m].unwrap();
            let err = (gap(sim.values[m], r.values[m]).unwrap() - printed).abs();
            cells += 1;
            if err > 0.02 + 1e-9 {
                off.push(format!("{} {} {} off by {err:.2}", r.setting, r.method, names[m]));
            }
        }
    }
    // Gap improvements from printed gaps against recomputed ones.
    let mut imp_off = 0;
    for r in rows.iter().filter(|r| r.method == "prompt_gat") {
        let d = rows.iter().find(|x| x.setting == r.setting && x.method == "direct").unwrap();
        for m in 0..5 {
            let printed = improvement(d.deltas[m].unwrap(), r.deltas[m].unwrap());
            let recomputed = (d.values[m] - r.values[m]).abs();
            if (printed - recomputed).abs() > 0.02 + 1e-9 {
                imp_off += 1;
            }
        }
    }
    let pass = cells == 60 && off.is_empty();
    verdict(
        10,
        "reported gaps recompute from means",
        pass,
        &format!("{}/{cells} cells within 0.02, {imp_off}/20 improvements off; outside: {}", cells - off.len(), off.join("; ")),
    );
}

// ---------------------------------------------------------------- 11

/// Two-pass covariance formula.
fn brute_r(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    sxy / (sxx * syy).sqrt()
}

/// Gamma at positive multiples of 1/2 by recurrence from Gamma(1/2) and Gamma(1).
fn half_gamma(x2: u32) -> f64 {
    let (mut g, mut k) = if x2 % 2 == 0 { (1.0, 2) } else { (std::f64::consts::PI.sqrt(), 1) };
    while k < x2 {
        g *= k as f64 / 2.0;
        k += 2;
    }
    g
}

/// Two-sided p-value by Simpson integration of the Student-t density.
fn brute_p(r: f64, n: usize) -> f64 {
    let df = (n - 2) as u32;
    let t = (r * ((n as f64 - 2.0) / (1.0 - r * r)).sqrt()).abs();
    let nu = df as f64;
    let c = half_gamma(df + 1) / ((nu * std::f64::consts::PI).sqrt() * half_gamma(df));
    let dens = |u: f64| c * (1.0 + u * u / nu).powf(-(nu + 1.0) / 2.0);
    let steps = 200_000;
    let hstep = t / steps as f64;
    let mut s = dens(0.0) + dens(t);
    for i in 1..steps {
        s += dens(i as f64 * hstep) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    (1.0 - 2.0 * s * hstep / 3.0).max(0.0)
}

#[test]
fn c11_pearson_against_brute_force() {
    let mut worst_r = 0.0f64;
    let mut worst_p = 0.0f64;
    for k in 0..20u64 {
        let mut rng = stream_rng(k, Stream::Evaluation, 11);
        let n = rng.random_range(5..40);
        let slope = rng.random_range(-2.0..2.0);
        let noise = rng.random_range(0.1..3.0);
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(-10.0..10.0)).collect();
        let y: Vec<f64> = x.iter().map(|v| slope * v + noise * rng.random_range(-5.0..5.0)).collect();
        let (r, p) = pearson(&x, &y).unwrap();
        let br = brute_r(&x, &y);
        worst_r = worst_r.max((r - br).abs());
        worst_p = worst_p.max((p - brute_p(br, n)).abs());
    }
    let x: Vec<f64> = (0..10).map(|i| i as f64 * 0.7 - 3.0).collect();
    let y: Vec<f64> = x.iter().map(|v| 2.0 * v + 1.0).collect();
    let (r_lin, _) = pearson(&x, &y).unwrap();
    let pass = worst_r <= 1e-12 && worst_p <= 1e-6 && (r_lin - 1.0).abs() <= 1e-12;
    verdict(
        11,
        "pearson r and p",
        pass,
        &format!("20 datasets, max |dr| {worst_r:.1e}, max |dp| {worst_p:.1e}, r(x,2x+1)-1 = {:.1e}", r_lin - 1.0),
    );
}

// ---------------------------------------------------------------- 12

const TASK: &str = "The indicators describing the traffic dynamics include the average acceleration (AC) of the vehicles (m/s²), the average deceleration (AD) (m/s²), the average emergency deceleration (AED) (m/s²) and the average startup delay (ADL) describing the average time needed for the waiting vehicles to start moving with the unit (s), and the above might vary based on weather or road type. Please assume the above indicators based on the traffic perceptive information below:";
const RESTRICTION: &str = "Please answer by replacing {value} in the format below:\n[average acceleration: {value}],\n[average deceleration: {value}],\n[average emergency deceleration: {value}],\n[average startup delay: {value}].";

fn fuzzed_response(rng: &mut impl Rng, est: &DynamicsEstimate) -> String {
    let preambles = ["", "Sure! ", "Considering the snow, vehicles move cautiously.\n\n", "Here is my estimate:\n"];
    let fields = ["average acceleration", "average deceleration", "average emergency deceleration", "average startup delay"];
    let units = ["m/s²", "m/s²", "m/s²", "s"];
    let vals = [est.ac, est.ad, est.aed, est.adl];
    let mut out = preambles[rng.random_range(0..preambles.len())].to_string();
    for i in 0..4 {
        let mut label = fields[i].to_string();
        if rng.random_bool(0.3) {
            label = label.to_uppercase();
        }
        let gap = [" ", "", "  "][rng.random_range(0..3)];
        let unit = if rng.random_bool(0.5) { format!(" {}", units[i]) } else { String::new() };
        let sep = [",\n", ", ", "\n", ",  "][rng.random_range(0..4)];
        out.push_str(&format!("[{label}:{gap}{}{unit}]{sep}", vals[i]));
    }
    if rng.random_bool(0.5) {
        out.push_str("\nThese are rough values; actual behaviour varies.");
    }
    out
}

#[test]
fn c12_prompt_protocol() {
    let mut problems = Vec::new();
    let cases = [
        (Weather::Sunny, RoadType::LightIndustry, 8, "In sunny day, on a light industry road with 8 vehicles"),
        (Weather::Sunny, RoadType::HeavyIndustry, 5, "In sunny day, on a heavy industry truck road, 5 vehicles"),
        (Weather::Rainy, RoadType::Normal, 10, "In rainy day, on a normal road with 10 vehicles"),
        (Weather::Snowy, RoadType::Normal, 7, "In snowy day, on a normal road with 7 vehicles"),
    ];
    for (w, r, n, want) in cases {
        let ctx = PromptContext::new(DomainContext::new(w, r), n);
        if context_sentence(&ctx) != want {
            problems.push(format!("sentence `{}`", context_sentence(&ctx)));
        }
        if build_prompt(&ctx) != format!("{TASK}\n{want}.\n{RESTRICTION}") {
            problems.push(format!("prompt for `{want}`"));
        }
    }
    let mut rng = stream_rng(12, Stream::Evaluation, 0);
    let mut parsed = 0;
    for _ in 0..50 {
        let round = |v: f64| (v * 100.0).round() / 100.0;
        let est = DynamicsEstimate {
            ac: round(rng.random_range(0.1..3.0)),
            ad: round(rng.random_range(0.5..5.0)),
            aed: round(rng.random_range(1.0..10.0)),
            adl: round(rng.random_range(0.0..2.0)),
        };
        let text = fuzzed_response(&mut rng, &est);
        match parse_response(&text) {
            Ok(got) if got == est => parsed += 1,
            other => problems.push(format!("parse {other:?} from {text:?}")),
        }
    }
    let rule = RuleBackend::builtin();
    let mut monotone = 0;
    for road in RoadType::ALL {
        for n in 0..=50 {
            let e = |w| rule.estimate(&PromptContext::new(DomainContext::new(w, road), n)).unwrap();
            let (sunny, rainy, snowy) = (e(Weather::Sunny), e(Weather::Rainy), e(Weather::Snowy));
            if snowy.adl >= rainy.adl && rainy.adl >= sunny.adl && snowy.ac <= sunny.ac {
                monotone += 1;
            } else {
                problems.push(format!("monotonicity {road:?} N={n}"));
            }
        }
    }
    let pass = problems.is_empty();
    verdict(
        12,
        "prompt protocol",
        pass,
        &format!("4 sentences, {parsed}/50 fuzzed parses, {monotone}/153 monotone cells; problems: {problems:?}"),
    );
}

// ---------------------------------------------------------------- 13

#[test]
fn c13_transfer_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let config = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("configs/desk.toml");
    let run = |name: &str| {
        let out = dir.path().join(name);
        let status = std::process::Command::new(env!("CARGO_BIN_EXE_groundsim"))
            .arg("--config")
            .arg(&config)
            .args(["transfer", "--setting", "V4", "--mode", "direct", "--seed-list", "7", "--out"])
            .arg(&out)
            .output()
            .unwrap();
        assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
        ["report.csv", "report.json"].map(|f| std::fs::read(out.join(f)).unwrap())
    };
    let (a, b) = (run("a"), run("b"));
    let pass = a == b;
    verdict(13, "transfer determinism", pass, &format!("report.csv {} bytes, report.json {} bytes, identical: {pass}", a[0].len(), a[1].len()));
}
