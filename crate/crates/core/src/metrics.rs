//! Sim-to-real gaps, gap improvements between methods, correlation analysis
//! and report files.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::env::EpisodeStats;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Att,
    Tp,
    Reward,
    Queue,
    Delay,
}

impl Metric {
    pub const ALL: [Metric; 5] = [Metric::Att, Metric::Tp, Metric::Reward, Metric::Queue, Metric::Delay];

    pub fn as_str(self) -> &'static str {
        match self {
            Metric::Att => "att",
            Metric::Tp => "tp",
            Metric::Reward => "reward",
            Metric::Queue => "queue",
            Metric::Delay => "delay",
        }
    }

    pub fn of(self, s: &EpisodeStats) -> f64 {
        match self {
            Metric::Att => s.att,
            Metric::Tp => s.tp,
            Metric::Reward => s.reward_mean,
            Metric::Queue => s.queue_mean,
            Metric::Delay => s.delay,
        }
    }
}

/// `real - sim`.
pub fn gap(sim: f64, real: f64) -> Result<f64> {
    if !sim.is_finite() || !real.is_finite() {
        return Err(Error::NonFinite("gap"));
    }
    Ok(real - sim)
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_sd(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// One metric across seeds: means in both worlds, their gap, and the
/// per-seed spread of the deployment-world value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GapEntry {
    pub sim: f64,
    pub real: f64,
    pub delta: f64,
    pub sim_sd: f64,
    pub real_sd: f64,
}

/// Paired evaluation of one seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub sim: EpisodeStats,
    pub real: EpisodeStats,
    /// Held-out forward-model MSE on deployment-world transitions, when a
    /// forward model was trained.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub forward_mse: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapReport {
    pub method: String,
    pub setting: String,
    pub seeds: usize,
    pub att: GapEntry,
    pub tp: GapEntry,
    pub reward: GapEntry,
    pub queue: GapEntry,
    pub delay: GapEntry,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub forward_mse: Option<f64>,
    pub per_seed: Vec<SeedResult>,
}

impl GapReport {
    pub fn aggregate(method: &str, setting: &str, runs: &[SeedResult]) -> Result<Self> {
        if runs.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let entry = |m: Metric| -> Result<GapEntry> {
            let sims: Vec<f64> = runs.iter().map(|r| m.of(&r.sim)).collect();
            let reals: Vec<f64> = runs.iter().map(|r| m.of(&r.real)).collect();
            let (sim, sim_sd) = mean_sd(&sims);
            let (real, real_sd) = mean_sd(&reals);
            Ok(GapEntry { sim, real, delta: gap(sim, real)?, sim_sd, real_sd })
        };
        let mses: Vec<f64> = runs.iter().filter_map(|r| r.forward_mse).collect();
        Ok(GapReport {
            method: method.to_string(),
            setting: setting.to_string(),
            seeds: runs.len(),
            att: entry(Metric::Att)?,
            tp: entry(Metric::Tp)?,
            reward: entry(Metric::Reward)?,
            queue: entry(Metric::Queue)?,
            delay: entry(Metric::Delay)?,
            forward_mse: (mses.len() == runs.len()).then(|| mean_sd(&mses).0),
            per_seed: runs.to_vec(),
        })
    }

    pub fn entry(&self, m: Metric) -> &GapEntry {
        match m {
            Metric::Att => &self.att,
            Metric::Tp => &self.tp,
            Metric::Reward => &self.reward,
            Metric::Queue => &self.queue,
            Metric::Delay => &self.delay,
        }
    }

    /// Recompute every delta from its means.
    pub fn check(&self) -> Result<()> {
        for m in Metric::ALL {
            let e = self.entry(m);
            if gap(e.sim, e.real)? != e.delta {
                return Err(Error::Statistics(format!("{} delta does not equal real - sim", m.as_str())));
            }
        }
        Ok(())
    }
}

/// Absolute gap reduction between two methods.
pub fn improvement(delta_a: f64, delta_b: f64) -> f64 {
    (delta_a - delta_b).abs()
}

/// `(v - min) / (max - min)`; all zeros when every value is equal.
pub fn normalize_max_min(values: &[f64]) -> Result<Vec<f64>> {
    if values.len() < 2 {
        return Err(Error::Statistics("max-min normalization needs at least 2 values".into()));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("normalize_max_min"));
    }
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == min {
        return Ok(vec![0.0; values.len()]);
    }
    Ok(values.iter().map(|v| (v - min) / (max - min)).collect())
}

/// Gap improvements of method `b` over method `a`, one row per shared setting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImprovementRecord {
    pub method_a: String,
    pub method_b: String,
    pub settings: Vec<String>,
    /// `raw[i][m]` for setting `i` and metric `m` in [`Metric::ALL`] order.
    pub raw: Vec<[f64; 5]>,
    /// Per-metric max-min normalization across settings.
    pub normalized: Option<Vec<[f64; 5]>>,
    /// Forward-model accuracy improvement per setting, when both methods report it.
    pub accuracy_raw: Option<Vec<f64>>,
    pub accuracy_normalized: Option<Vec<f64>>,
    /// Why normalization was skipped, if it was.
    pub note: Option<String>,
}

pub fn gap_improvement(a: &[GapReport], b: &[GapReport]) -> Result<ImprovementRecord> {
    let (Some(first_a), Some(first_b)) = (a.first(), b.first()) else {
        return Err(Error::Statistics("need at least one report per method".into()));
    };
    let mut settings = Vec::new();
    let mut raw = Vec::new();
    let mut acc = Vec::new();
    for ra in a {
        let rb = b
            .iter()
            .find(|r| r.setting == ra.setting)
            .ok_or_else(|| Error::Statistics(format!("setting {} missing for {}", ra.setting, first_b.method)))?;
        settings.push(ra.setting.clone());
        let mut row = [0.0; 5];
        for (slot, m) in row.iter_mut().zip(Metric::ALL) {
            *slot = improvement(ra.entry(m).delta, rb.entry(m).delta);
        }
        raw.push(row);
        acc.push(ra.forward_mse.zip(rb.forward_mse).map(|(x, y)| improvement(x, y)));
    }
    if b.len() != a.len() {
        return Err(Error::Statistics("methods cover different settings".into()));
    }
    let accuracy_raw: Option<Vec<f64>> = acc.into_iter().collect();
    let (normalized, accuracy_normalized, note) = if raw.len() < 2 {
        (None, None, Some("fewer than 2 settings: normalization skipped".to_string()))
    } else {
        let mut norm = vec![[0.0; 5]; raw.len()];
        for m in 0..5 {
            let col: Vec<f64> = raw.iter().map(|r| r[m]).collect();
            for (row, v) in norm.iter_mut().zip(normalize_max_min(&col)?) {
                row[m] = v;
            }
        }
        let acc_norm = accuracy_raw.as_deref().map(normalize_max_min).transpose()?;
        (Some(norm), acc_norm, None)
    };
    Ok(ImprovementRecord {
        method_a: first_a.method.clone(),
        method_b: first_b.method.clone(),
        settings,
        raw,
        normalized,
        accuracy_raw,
        accuracy_normalized,
        note,
    })
}

/// Sample Pearson correlation and the two-sided p-value of the t-test for
/// zero correlation.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<(f64, f64)> {
    if x.len() != y.len() {
        return Err(Error::DimensionMismatch { expected: x.len(), actual: y.len() });
    }
    if x.len() < 3 {
        return Err(Error::Statistics(format!("pearson needs at least 3 points, got {}", x.len())));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("pearson"));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Statistics("zero variance".into()));
    }
    let r = (sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0);
    let df = n - 2.0;
    let p = if r.abs() == 1.0 {
        0.0
    } else {
        let t = r * (df / (1.0 - r * r)).sqrt();
        student_t_two_sided(t, df)
    };
    Ok((r, p))
}

/// `P(|T| >= |t|)` for Student's t with `df` degrees of freedom.
pub fn student_t_two_sided(t: f64, df: f64) -> f64 {
    if !t.is_finite() {
        return 0.0;
    }
    regularized_incomplete_beta(df / 2.0, 0.5, df / (df + t * t))
}

/// `ln Γ(x)` for `x > 0` (Lanczos, g = 7, n = 9).
pub fn ln_gamma(x: f64) -> f64 {
    const G: f64 = 7.0;
    const COEF: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        // Reflection.
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = COEF[0];
    let t = x + G + 0.5;
    for (i, c) in COEF.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// `I_x(a, b)` by the continued fraction (modified Lentz), using the
/// symmetry `I_x(a,b) = 1 - I_{1-x}(b,a)` where it converges faster.
pub fn regularized_incomplete_beta(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    if x < (a + 1.0) / (a + b + 2.0) {
        ln_front.exp() * beta_cf(a, b, x) / a
    } else {
        1.0 - ln_front.exp() * beta_cf(b, a, 1.0 - x) / b
    }
}

fn beta_cf(a: f64, b: f64, x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    const EPS: f64 = 1e-16;
    let (qab, qap, qam) = (a + b, a + 1.0, a - 1.0);
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=500 {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

pub const REPORT_HEADER: &str =
    "method,setting,att,att_delta,tp,tp_delta,reward,reward_delta,queue,queue_delta,delay,delay_delta,seeds,att_sd,tp_sd,reward_sd,queue_sd,delay_sd";

/// Table rows ordered by (setting, method). Metric columns hold the
/// deployment-world mean, its gap to the simulator, and its spread.
pub fn report_csv(reports: &[GapReport]) -> String {
    let mut sorted: Vec<&GapReport> = reports.iter().collect();
    sorted.sort_by(|a, b| (&a.setting, &a.method).cmp(&(&b.setting, &b.method)));
    let mut out = String::from(REPORT_HEADER);
    out.push('\n');
    for r in sorted {
        let _ = write!(out, "{},{}", r.method, r.setting);
        for m in Metric::ALL {
            let e = r.entry(m);
            let _ = write!(out, ",{:.4},{:.4}", e.real, e.delta);
        }
        let _ = write!(out, ",{}", r.seeds);
        for m in Metric::ALL {
            let _ = write!(out, ",{:.4}", r.entry(m).real_sd);
        }
        out.push('\n');
    }
    out
}

/// Writes `report.csv` and `report.json` under `dir`; returns their paths.
pub fn write_report(reports: &[GapReport], dir: &Path) -> Result<Vec<PathBuf>> {
    if reports.is_empty() {
        return Err(Error::EmptyDataset);
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut sorted = reports.to_vec();
    sorted.sort_by(|a, b| (&a.setting, &a.method).cmp(&(&b.setting, &b.method)));
    let csv = dir.join("report.csv");
    fs::write(&csv, report_csv(&sorted)).map_err(|e| Error::io(&csv, e))?;
    let json = dir.join("report.json");
    let text = serde_json::to_string_pretty(&sorted).expect("plain data") + "\n";
    fs::write(&json, text).map_err(|e| Error::io(&json, e))?;
    Ok(vec![csv, json])
}

pub fn read_reports(path: &Path) -> Result<Vec<GapReport>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format("report", path, e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gap_examples() {
        assert!((gap(111.23, 158.93).unwrap() - 47.70).abs() < 1e-9);
        assert_eq!(gap(3.5, 3.5).unwrap(), 0.0);
        assert_eq!(gap(5.0, 3.0).unwrap(), -2.0);
        assert!(gap(f64::NAN, 1.0).is_err());
    }

    #[test]
    fn improvement_examples() {
        assert!((improvement(47.69, 43.74) - 3.95).abs() < 1e-9);
        assert_eq!(normalize_max_min(&[2.0, 6.0]).unwrap(), vec![0.0, 1.0]);
        assert_eq!(normalize_max_min(&[4.0, 4.0, 4.0]).unwrap(), vec![0.0; 3]);
        assert!(normalize_max_min(&[1.0]).is_err());
    }

    #[test]
    fn pearson_exact_lines() {
        let x: Vec<f64> = (0..10).map(|i| i as f64 * 0.7 - 2.0).collect();
        let y: Vec<f64> = x.iter().map(|v| 2.0 * v + 1.0).collect();
        let (r, p) = pearson(&x, &y).unwrap();
        assert!((r - 1.0).abs() < 1e-12 && p < 1e-12);
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        assert!((pearson(&x, &neg).unwrap().0 + 1.0).abs() < 1e-12);
        assert!(pearson(&x, &[1.0; 10]).is_err());
        assert!(pearson(&x[..2], &y[..2]).is_err());
    }

    #[test]
    fn t_tail_known_values() {
        // df = 1 is Cauchy: P(|T| >= 1) = 1/2.
        assert!((student_t_two_sided(1.0, 1.0) - 0.5).abs() < 1e-12);
        // df = 2 has the closed form 1 - t / sqrt(2 + t^2).
        let t: f64 = 1.7;
        assert!((student_t_two_sided(t, 2.0) - (1.0 - t / (2.0 + t * t).sqrt())).abs() < 1e-12);
        assert_eq!(student_t_two_sided(0.0, 5.0), 1.0);
    }

    #[test]
    fn ln_gamma_known_values() {
        assert!(ln_gamma(1.0).abs() < 1e-13);
        assert!((ln_gamma(0.5) - std::f64::consts::PI.sqrt().ln()).abs() < 1e-13);
        assert!((ln_gamma(10.0) - 362_880f64.ln()).abs() < 1e-12);
    }

    fn stats(att: f64) -> EpisodeStats {
        EpisodeStats { att, tp: 100.0, reward_mean: -5.0, queue_mean: 5.0, delay: 0.3 }
    }

    #[test]
    fn aggregate_and_csv() {
        let runs = vec![
            SeedResult { seed: 0, sim: stats(100.0), real: stats(140.0), forward_mse: None },
            SeedResult { seed: 1, sim: stats(110.0), real: stats(160.0), forward_mse: None },
        ];
        let r = GapReport::aggregate("direct", "V4", &runs).unwrap();
        r.check().unwrap();
        assert_eq!((r.att.sim, r.att.real, r.att.delta), (105.0, 150.0, 45.0));
        assert!((r.att.real_sd - 200f64.sqrt()).abs() < 1e-12);
        let csv = report_csv(&[r]);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], REPORT_HEADER);
        assert_eq!(lines.len(), 2);
        assert!(lines[1].starts_with("direct,V4,150.0000,45.0000,100.0000,0.0000"));
    }

    #[test]
    fn improvements_between_identical_methods_are_zero() {
        let runs = vec![SeedResult { seed: 0, sim: stats(100.0), real: stats(140.0), forward_mse: None }];
        let a: Vec<GapReport> =
            ["V1", "V2"].iter().map(|s| GapReport::aggregate("vanilla", s, &runs).unwrap()).collect();
        let rec = gap_improvement(&a, &a).unwrap();
        assert!(rec.raw.iter().flatten().all(|v| *v == 0.0));
        assert_eq!(rec.normalized.unwrap(), vec![[0.0; 5]; 2]);
        let single = gap_improvement(&a[..1], &a[..1]).unwrap();
        assert!(single.normalized.is_none() && single.note.is_some());
    }
}
