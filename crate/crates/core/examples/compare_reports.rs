//! Gap improvement and its correlation across settings, computed from
//! hand-made reports.
//!
//! cargo run --example compare_reports

use groundsim::env::EpisodeStats;
use groundsim::metrics::{gap_improvement, pearson, GapReport, Metric, SeedResult};

fn stats(att: f64, tp: f64) -> EpisodeStats {
    EpisodeStats { att, tp, reward_mean: -att / 30.0, queue_mean: att / 4.0, delay: att / 300.0 }
}

fn report(method: &str, setting: &str, real_att: f64, real_tp: f64) -> groundsim::Result<GapReport> {
    let run = SeedResult { seed: 0, sim: stats(60.0, 2100.0), real: stats(real_att, real_tp), forward_mse: None };
    GapReport::aggregate(method, setting, &[run])
}

fn main() -> groundsim::Result<()> {
    let rows = [("V1", 95.0, 2060.0, 80.0, 2080.0), ("V2", 110.0, 2040.0, 85.0, 2075.0), ("V3", 85.0, 2070.0, 70.0, 2080.0), ("V4", 160.0, 1950.0, 100.0, 2040.0)];
    let mut direct = Vec::new();
    let mut grounded = Vec::new();
    for (s, a_att, a_tp, b_att, b_tp) in rows {
        direct.push(report("direct", s, a_att, a_tp)?);
        grounded.push(report("prompt_gat", s, b_att, b_tp)?);
    }
    let imp = gap_improvement(&direct, &grounded)?;
    let norm = imp.normalized.as_ref().expect("four settings");
    println!("setting  att raw  att norm  tp raw  tp norm");
    for (i, s) in imp.settings.iter().enumerate() {
        println!("{s:<8} {:7.1} {:9.3} {:7.1} {:8.3}", imp.raw[i][0], norm[i][0], imp.raw[i][1], norm[i][1]);
    }
    let col = |m: Metric| -> Vec<f64> {
        let k = Metric::ALL.iter().position(|x| *x == m).unwrap();
        imp.raw.iter().map(|r| r[k]).collect()
    };
    let (r, p) = pearson(&col(Metric::Att), &col(Metric::Tp))?;
    println!("att vs tp improvement: r = {r:.3}, p = {p:.3}");
    Ok(())
}
