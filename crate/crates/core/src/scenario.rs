//! Scenario definitions: vehicle dynamics profiles, domain contexts, the
//! intersection geometry, arrival flows and the experiment configuration.
//!
//! Every tunable constant of an experiment lives in [`ExperimentConfig`],
//! which is read from a sectioned key/value (TOML) file. See
//! `docs/config.md` for the schema.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Kinematic parameters of one world.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DynamicsProfile {
    /// Maximum acceleration, m/s².
    pub accel: f64,
    /// Comfortable deceleration, m/s².
    pub decel: f64,
    /// Emergency deceleration bound, m/s².
    pub e_decel: f64,
    /// Reaction lag of a stopped vehicle once it may move again, seconds.
    pub startup_delay: f64,
}

impl DynamicsProfile {
    pub fn new(accel: f64, decel: f64, e_decel: f64, startup_delay: f64) -> Result<Self> {
        let p = DynamicsProfile { accel, decel, e_decel, startup_delay };
        p.validate("profile")?;
        Ok(p)
    }

    pub(crate) fn validate(&self, field: &str) -> Result<()> {
        let all = [self.accel, self.decel, self.e_decel, self.startup_delay];
        if all.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::config(field, "all dynamics values must be finite and >= 0"));
        }
        if self.accel <= 0.0 {
            return Err(Error::config(format!("{field}.accel"), "must be > 0"));
        }
        if self.decel <= 0.0 {
            return Err(Error::config(format!("{field}.decel"), "must be > 0"));
        }
        if self.e_decel < self.decel {
            return Err(Error::config(format!("{field}.e_decel"), "must be >= decel"));
        }
        Ok(())
    }
}

/// The five built-in dynamics settings. `V0` is the simulator default;
/// `V1`..`V4` are the perturbed deployment worlds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Setting {
    V0,
    V1,
    V2,
    V3,
    V4,
}

impl Setting {
    pub const ALL: [Setting; 5] = [Setting::V0, Setting::V1, Setting::V2, Setting::V3, Setting::V4];

    pub fn profile(self) -> DynamicsProfile {
        let (accel, decel, e_decel, startup_delay) = match self {
            Setting::V0 => (2.60, 4.50, 9.00, 0.00),
            Setting::V1 => (1.00, 2.50, 6.00, 0.50),
            Setting::V2 => (1.00, 2.50, 6.00, 0.75),
            Setting::V3 => (0.75, 3.50, 6.00, 0.25),
            Setting::V4 => (0.50, 1.50, 2.00, 0.50),
        };
        DynamicsProfile { accel, decel, e_decel, startup_delay }
    }

    pub fn default_context(self) -> DomainContext {
        let (weather, road_type) = match self {
            Setting::V0 => (Weather::Sunny, RoadType::Normal),
            Setting::V1 => (Weather::Sunny, RoadType::LightIndustry),
            Setting::V2 => (Weather::Sunny, RoadType::HeavyIndustry),
            Setting::V3 => (Weather::Rainy, RoadType::Normal),
            Setting::V4 => (Weather::Snowy, RoadType::Normal),
        };
        DomainContext { weather, road_type }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Setting::V0 => "V0",
            Setting::V1 => "V1",
            Setting::V2 => "V2",
            Setting::V3 => "V3",
            Setting::V4 => "V4",
        }
    }
}

impl fmt::Display for Setting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Setting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "V0" => Ok(Setting::V0),
            "V1" => Ok(Setting::V1),
            "V2" => Ok(Setting::V2),
            "V3" => Ok(Setting::V3),
            "V4" => Ok(Setting::V4),
            _ => Err(Error::UnknownSetting(s.to_string())),
        }
    }
}

/// Look up a built-in profile by its setting name (`"V0"`..`"V4"`).
pub fn builtin_profile(name: &str) -> Result<DynamicsProfile> {
    Ok(name.parse::<Setting>()?.profile())
}

pub fn default_context_for(setting: Setting) -> DomainContext {
    setting.default_context()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weather {
    Sunny,
    Rainy,
    Snowy,
}

impl Weather {
    pub const ALL: [Weather; 3] = [Weather::Sunny, Weather::Rainy, Weather::Snowy];

    pub fn as_str(self) -> &'static str {
        match self {
            Weather::Sunny => "sunny",
            Weather::Rainy => "rainy",
            Weather::Snowy => "snowy",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl FromStr for Weather {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Weather::ALL
            .into_iter()
            .find(|w| w.as_str() == s.trim())
            .ok_or_else(|| Error::config("weather", format!("unknown weather `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoadType {
    Normal,
    LightIndustry,
    HeavyIndustry,
}

impl RoadType {
    pub const ALL: [RoadType; 3] = [RoadType::Normal, RoadType::LightIndustry, RoadType::HeavyIndustry];

    pub fn as_str(self) -> &'static str {
        match self {
            RoadType::Normal => "normal",
            RoadType::LightIndustry => "light_industry",
            RoadType::HeavyIndustry => "heavy_industry",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl FromStr for RoadType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        RoadType::ALL
            .into_iter()
            .find(|r| r.as_str() == s.trim())
            .ok_or_else(|| Error::config("road_type", format!("unknown road type `{s}`")))
    }
}

/// Weather and road descriptors of a world, fed to the dynamics oracle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainContext {
    pub weather: Weather,
    pub road_type: RoadType,
}

impl DomainContext {
    pub fn new(weather: Weather, road_type: RoadType) -> Self {
        DomainContext { weather, road_type }
    }
}

impl Default for DomainContext {
    fn default() -> Self {
        Setting::V0.default_context()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Approach {
    North,
    East,
    South,
    West,
}

impl Approach {
    pub const ALL: [Approach; 4] = [Approach::North, Approach::East, Approach::South, Approach::West];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn letter(self) -> char {
        ['N', 'E', 'S', 'W'][self.index()]
    }

    pub fn from_token(s: &str) -> Option<Approach> {
        match s.trim() {
            "N" | "n" | "0" => Some(Approach::North),
            "E" | "e" | "1" => Some(Approach::East),
            "S" | "s" | "2" => Some(Approach::South),
            "W" | "w" | "3" => Some(Approach::West),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Movement {
    Left,
    Through,
    Right,
}

impl Movement {
    pub const ALL: [Movement; 3] = [Movement::Left, Movement::Through, Movement::Right];
}

/// Number of approaches at the intersection.
pub const NUM_APPROACHES: usize = 4;
/// Lanes per approach (left, through, right).
pub const LANES_PER_APPROACH: usize = 3;
/// Incoming lanes in the network; lane `i` is approach `i / 3`, movement `i % 3`.
pub const NUM_LANES: usize = NUM_APPROACHES * LANES_PER_APPROACH;
/// Signal phases, which are also the agent's actions.
pub const NUM_PHASES: usize = 4;

/// Index of an incoming lane in the fixed N,E,S,W × left,through,right order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct LaneId(pub usize);

impl LaneId {
    pub fn new(approach: Approach, movement: Movement) -> Self {
        LaneId(approach.index() * LANES_PER_APPROACH + movement as usize)
    }

    pub fn approach(self) -> Approach {
        Approach::ALL[self.0 / LANES_PER_APPROACH]
    }

    pub fn movement(self) -> Movement {
        Movement::ALL[self.0 % LANES_PER_APPROACH]
    }

    pub fn all() -> impl Iterator<Item = LaneId> {
        (0..NUM_LANES).map(LaneId)
    }
}

/// Geometry of the single signalized intersection.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RoadNetwork {
    pub lanes_per_approach: usize,
    pub lane_length: f64,
    pub speed_limit: f64,
    pub vehicle_length: f64,
    pub min_gap: f64,
}

impl Default for RoadNetwork {
    fn default() -> Self {
        RoadNetwork {
            lanes_per_approach: LANES_PER_APPROACH,
            lane_length: 300.0,
            speed_limit: 13.89,
            vehicle_length: 5.0,
            min_gap: 2.5,
        }
    }
}

impl RoadNetwork {
    pub fn validate(&self) -> Result<()> {
        if self.lanes_per_approach != LANES_PER_APPROACH {
            return Err(Error::config("network.lanes_per_approach", "only 3 lanes per approach are supported"));
        }
        if !(self.speed_limit.is_finite() && self.speed_limit > 0.0) {
            return Err(Error::config("network.speed_limit", "must be > 0"));
        }
        if !(self.vehicle_length > 0.0 && self.min_gap >= 0.0) {
            return Err(Error::config("network.vehicle_length", "vehicle_length must be > 0 and min_gap >= 0"));
        }
        if !(self.lane_length > 10.0 * (self.vehicle_length + self.min_gap)) {
            return Err(Error::config("network.lane_length", "must exceed 10 * (vehicle_length + min_gap)"));
        }
        Ok(())
    }
}

/// One scheduled arrival.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Arrival {
    pub time: f64,
    pub approach: Approach,
    pub lane_index: usize,
}

impl Arrival {
    pub fn lane(&self) -> LaneId {
        LaneId(self.approach.index() * LANES_PER_APPROACH + self.lane_index)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ArrivalProcess {
    /// Poisson arrivals per approach (vehicles/second); each arrival picks a
    /// lane of its approach uniformly.
    Poisson { rates: [f64; NUM_APPROACHES] },
    /// Explicit arrivals, sorted by time.
    Schedule(Vec<Arrival>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowSpec {
    pub process: ArrivalProcess,
    pub horizon: f64,
}

impl FlowSpec {
    pub fn poisson(rate_per_approach: f64, horizon: f64) -> Result<Self> {
        FlowSpec::poisson_rates([rate_per_approach; NUM_APPROACHES], horizon)
    }

    pub fn poisson_rates(rates: [f64; NUM_APPROACHES], horizon: f64) -> Result<Self> {
        if rates.iter().any(|r| !r.is_finite() || *r < 0.0) {
            return Err(Error::config("flow.rate", "rates must be finite and >= 0"));
        }
        Ok(FlowSpec { process: ArrivalProcess::Poisson { rates }, horizon })
    }

    pub fn schedule(mut arrivals: Vec<Arrival>, horizon: f64) -> Result<Self> {
        for a in &arrivals {
            if !(a.time >= 0.0 && a.time < horizon) {
                return Err(Error::config("flow.schedule", format!("arrival time {} outside [0, {horizon})", a.time)));
            }
            if a.lane_index >= LANES_PER_APPROACH {
                return Err(Error::config("flow.schedule", format!("lane index {} out of range", a.lane_index)));
            }
        }
        arrivals.sort_by(|a, b| a.time.total_cmp(&b.time));
        Ok(FlowSpec { process: ArrivalProcess::Schedule(arrivals), horizon })
    }

    /// A flow with no arrivals at all.
    pub fn empty(horizon: f64) -> Self {
        FlowSpec { process: ArrivalProcess::Schedule(Vec::new()), horizon }
    }

    /// Parse a schedule file: one `time_s,approach,lane_index` per line.
    pub fn load_schedule(path: &Path, horizon: f64) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut arrivals = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let bad = |why: &str| Error::format("flow schedule", path, format!("line {}: {why}", lineno + 1));
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() != 3 {
                return Err(bad("expected time_s,approach,lane_index"));
            }
            let time: f64 = cols[0].trim().parse().map_err(|_| bad("bad time"))?;
            let approach = Approach::from_token(cols[1]).ok_or_else(|| bad("bad approach"))?;
            let lane_index: usize = cols[2].trim().parse().map_err(|_| bad("bad lane index"))?;
            arrivals.push(Arrival { time, approach, lane_index });
        }
        FlowSpec::schedule(arrivals, horizon)
    }

    pub fn write_schedule(arrivals: &[Arrival]) -> String {
        let mut out = String::new();
        for a in arrivals {
            out.push_str(&format!("{},{},{}\n", a.time, a.approach.letter(), a.lane_index));
        }
        out
    }
}

/// `[scenario]` section: which worlds are simulated and the deployment context.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioParams {
    pub sim_profile: DynamicsProfile,
    pub real_profile: DynamicsProfile,
    pub real_context: DomainContext,
}

impl Default for ScenarioParams {
    fn default() -> Self {
        ScenarioParams {
            sim_profile: Setting::V0.profile(),
            real_profile: Setting::V0.profile(),
            real_context: Setting::V0.default_context(),
        }
    }
}

impl ScenarioParams {
    pub fn for_setting(setting: Setting) -> Self {
        ScenarioParams {
            sim_profile: Setting::V0.profile(),
            real_profile: setting.profile(),
            real_context: setting.default_context(),
        }
    }
}

/// `[flow]` section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowParams {
    /// Poisson arrival rate per approach, vehicles/second.
    pub rate: f64,
    /// Optional explicit schedule file; overrides `rate` when set.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub schedule: Option<PathBuf>,
}

impl Default for FlowParams {
    fn default() -> Self {
        FlowParams { rate: 0.15, schedule: None }
    }
}

/// `[trainer]` section.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainerParams {
    /// Episode horizon T in seconds.
    pub steps: u32,
    /// Outer iterations I.
    pub episodes: u32,
    pub action_interval: u32,
    pub yellow_length: u32,
    /// Environment decision steps before DQN updates begin.
    pub learning_start: usize,
    pub buffer_size: usize,
    pub update_model_rate: u32,
    pub update_target_rate: u32,
    /// Fixed-time baseline: seconds each phase is held.
    pub fixed_time_cycle: u32,
}

impl Default for TrainerParams {
    fn default() -> Self {
        TrainerParams {
            steps: 3600,
            episodes: 300,
            action_interval: 10,
            yellow_length: 5,
            learning_start: 5000,
            buffer_size: 5000,
            update_model_rate: 1,
            update_target_rate: 5,
            fixed_time_cycle: 30,
        }
    }
}

impl TrainerParams {
    pub fn decisions_per_episode(&self) -> usize {
        (self.steps / self.action_interval) as usize
    }
}

/// `[dqn]` section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DqnParams {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub gamma: f64,
    pub epsilon: f64,
    pub epsilon_decay: f64,
    pub epsilon_min: f64,
    pub grad_clip: f64,
    pub hidden: Vec<usize>,
}

impl Default for DqnParams {
    fn default() -> Self {
        DqnParams {
            learning_rate: 0.001,
            batch_size: 64,
            gamma: 0.98,
            epsilon: 0.1,
            epsilon_decay: 0.99,
            epsilon_min: 0.01,
            grad_clip: 0.5,
            hidden: vec![64, 64],
        }
    }
}

/// `[gat]` section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GatParams {
    /// Policy pre-training episodes in the simulator before grounding starts.
    pub pretrain_episodes: u32,
    /// Grounded policy-training episodes per outer iteration.
    pub policy_epochs: u32,
    pub forward_epochs: u32,
    pub inverse_epochs: u32,
    pub forward_lr: f64,
    pub inverse_lr: f64,
    pub batch_size: usize,
    pub grad_clip: f64,
    /// Output width of the per-lane fusion layer.
    pub fusion_width: usize,
    pub forward_hidden: Vec<usize>,
    pub inverse_hidden: Vec<usize>,
    /// Episodes rolled out in each world per outer iteration.
    pub rollout_episodes: u32,
    /// Greedy evaluation episodes per world at the end of a run.
    pub eval_episodes: u32,
}

impl Default for GatParams {
    fn default() -> Self {
        GatParams {
            pretrain_episodes: 100,
            policy_epochs: 1,
            forward_epochs: 20,
            inverse_epochs: 20,
            forward_lr: 1e-4,
            inverse_lr: 1e-5,
            batch_size: 64,
            grad_clip: 0.5,
            fusion_width: 8,
            forward_hidden: vec![128, 64],
            inverse_hidden: vec![64, 64],
            rollout_episodes: 1,
            eval_episodes: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OracleKind {
    Rule,
    Replay,
    Remote,
}

impl FromStr for OracleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "rule" | "rule_table" => Ok(OracleKind::Rule),
            "replay" | "replay_file" => Ok(OracleKind::Replay),
            "remote" => Ok(OracleKind::Remote),
            other => Err(Error::config("oracle.backend", format!("unknown backend `{other}`"))),
        }
    }
}

/// `[oracle]` section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleParams {
    pub backend: OracleKind,
    /// Rule table override; the bundled table is used when unset.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub table: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub replay: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub endpoint: Option<String>,
    pub model: String,
    pub timeout_s: f64,
    /// Persistent cache file; in-memory only when unset.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cache: Option<PathBuf>,
}

impl Default for OracleParams {
    fn default() -> Self {
        OracleParams {
            backend: OracleKind::Rule,
            table: None,
            replay: None,
            endpoint: None,
            model: "gpt-4".to_string(),
            timeout_s: 60.0,
            cache: None,
        }
    }
}

/// Complete configuration of an experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub scenario: ScenarioParams,
    pub network: RoadNetwork,
    pub flow: FlowParams,
    pub trainer: TrainerParams,
    pub dqn: DqnParams,
    pub gat: GatParams,
    pub oracle: OracleParams,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            scenario: ScenarioParams::default(),
            network: RoadNetwork::default(),
            flow: FlowParams::default(),
            trainer: TrainerParams::default(),
            dqn: DqnParams::default(),
            gat: GatParams::default(),
            oracle: OracleParams::default(),
        }
    }
}

impl ExperimentConfig {
    /// Parse the config text format. A `profile = "Vn"` key in
    /// `[scenario]` expands to that setting's real profile and context;
    /// explicit `real_profile` / `real_context` tables take precedence.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let mut table: toml::Table =
            text.parse().map_err(|e: toml::de::Error| Error::config(describe_toml_key(&e), e.message().to_string()))?;
        if let Some(toml::Value::Table(scenario)) = table.get_mut("scenario") {
            if let Some(profile) = scenario.remove("profile") {
                let name = profile
                    .as_str()
                    .ok_or_else(|| Error::config("scenario.profile", "must be a string like \"V3\""))?;
                let setting: Setting = name.parse().map_err(|_| {
                    Error::config("scenario.profile", format!("unknown setting `{name}`"))
                })?;
                let expanded = toml::Table::try_from(ScenarioParams::for_setting(setting))
                    .expect("scenario params serialize");
                for key in ["real_profile", "real_context"] {
                    if !scenario.contains_key(key) {
                        scenario.insert(key.to_string(), expanded[key].clone());
                    }
                }
            }
        }
        let cfg: ExperimentConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::config(describe_toml_key(&e), e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.scenario.sim_profile.validate("scenario.sim_profile")?;
        self.scenario.real_profile.validate("scenario.real_profile")?;
        self.network.validate()?;
        if !(self.flow.rate.is_finite() && self.flow.rate >= 0.0) {
            return Err(Error::config("flow.rate", "must be >= 0"));
        }
        let t = &self.trainer;
        if t.action_interval == 0 {
            return Err(Error::config("trainer.action_interval", "must be > 0"));
        }
        if t.steps == 0 || t.steps % t.action_interval != 0 {
            return Err(Error::config("trainer.steps", "T not divisible by action_interval"));
        }
        if t.yellow_length >= t.action_interval {
            return Err(Error::config("trainer.yellow_length", "must be < action_interval"));
        }
        if t.buffer_size == 0 {
            return Err(Error::config("trainer.buffer_size", "must be > 0"));
        }
        if t.update_model_rate == 0 || t.update_target_rate == 0 {
            return Err(Error::config("trainer.update_target_rate", "update rates must be > 0"));
        }
        if t.fixed_time_cycle < t.action_interval {
            return Err(Error::config("trainer.fixed_time_cycle", "must be >= action_interval"));
        }
        let d = &self.dqn;
        positive("dqn.learning_rate", d.learning_rate)?;
        positive("dqn.grad_clip", d.grad_clip)?;
        if d.batch_size == 0 {
            return Err(Error::config("dqn.batch_size", "must be > 0"));
        }
        if !(0.0..=1.0).contains(&d.gamma) {
            return Err(Error::config("dqn.gamma", "must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&d.epsilon_min) || !(d.epsilon_min..=1.0).contains(&d.epsilon) {
            return Err(Error::config("dqn.epsilon", "need 0 <= epsilon_min <= epsilon <= 1"));
        }
        if !(d.epsilon_decay > 0.0 && d.epsilon_decay <= 1.0) {
            return Err(Error::config("dqn.epsilon_decay", "must lie in (0, 1]"));
        }
        if d.hidden.iter().any(|w| *w == 0) {
            return Err(Error::config("dqn.hidden", "widths must be >= 1"));
        }
        let g = &self.gat;
        positive("gat.forward_lr", g.forward_lr)?;
        positive("gat.inverse_lr", g.inverse_lr)?;
        positive("gat.grad_clip", g.grad_clip)?;
        if g.batch_size == 0 || g.fusion_width == 0 {
            return Err(Error::config("gat.batch_size", "batch_size and fusion_width must be > 0"));
        }
        if g.forward_hidden.iter().chain(&g.inverse_hidden).any(|w| *w == 0) {
            return Err(Error::config("gat.forward_hidden", "widths must be >= 1"));
        }
        if g.rollout_episodes == 0 {
            return Err(Error::config("gat.rollout_episodes", "must be >= 1"));
        }
        if g.eval_episodes == 0 {
            return Err(Error::config("gat.eval_episodes", "must be >= 1"));
        }
        positive("oracle.timeout_s", self.oracle.timeout_s)?;
        Ok(())
    }

    /// Arrival flow for one episode of this config.
    pub fn flow_spec(&self) -> Result<FlowSpec> {
        let horizon = f64::from(self.trainer.steps);
        match &self.flow.schedule {
            Some(path) => FlowSpec::load_schedule(path, horizon),
            None => FlowSpec::poisson(self.flow.rate, horizon),
        }
    }

    /// Point the deployment world at a built-in setting.
    pub fn with_setting(mut self, setting: Setting) -> Self {
        self.scenario.real_profile = setting.profile();
        self.scenario.real_context = setting.default_context();
        self
    }
}

fn positive(field: &str, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(Error::config(field, "must be > 0"))
    }
}

fn describe_toml_key(e: &toml::de::Error) -> String {
    // toml reports the offending key inside its message; keep the whole text
    // when no key path is available.
    let msg = e.message();
    msg.split('`').nth(1).map(str::to_string).unwrap_or_else(|| "config".to_string())
}

/// Read and validate a config file.
pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    ExperimentConfig::from_toml_str(&text)
}
