//! Per-lane dynamics estimates obtained by prompting an oracle.
//!
//! A prompt describes the weather, the road type and the number of vehicles
//! on a lane; the answer names four kinematic indicators. Three backends
//! answer it: a bundled rule table (offline, deterministic), a file of
//! recorded responses, and a remote chat-completion endpoint. Answers are
//! cached by (weather, road, vehicle-count bucket).

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scenario::{DomainContext, LaneId, OracleKind, OracleParams, RoadType, Weather, NUM_LANES};

pub const CREDENTIAL_ENV: &str = "GROUNDSIM_LLM_KEY";

/// Width of the vehicle-count buckets used as cache keys.
pub const BUCKET_WIDTH: u32 = 5;

const TASK_TEXT: &str = "The indicators describing the traffic dynamics include the average acceleration (AC) of the vehicles (m/s²), the average deceleration (AD) (m/s²), the average emergency deceleration (AED) (m/s²) and the average startup delay (ADL) describing the average time needed for the waiting vehicles to start moving with the unit (s), and the above might vary based on weather or road type. Please assume the above indicators based on the traffic perceptive information below:";

const OUTPUT_RESTRICTION: &str = "Please answer by replacing {value} in the format below:
[average acceleration: {value}],
[average deceleration: {value}],
[average emergency deceleration: {value}],
[average startup delay: {value}].";

const BUILTIN_TABLE: &str = include_str!("../data/rule_table.csv");

/// What the oracle is asked about.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PromptContext {
    pub context: DomainContext,
    pub vehicle_count: u32,
    /// Lane the count was taken from; not part of the prompt.
    pub lane: Option<LaneId>,
}

impl PromptContext {
    pub fn new(context: DomainContext, vehicle_count: u32) -> Self {
        PromptContext { context, vehicle_count, lane: None }
    }
}

/// Average acceleration, deceleration, emergency deceleration (m/s²) and
/// startup delay (s).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DynamicsEstimate {
    pub ac: f64,
    pub ad: f64,
    pub aed: f64,
    pub adl: f64,
}

impl DynamicsEstimate {
    pub fn validate(&self) -> Result<()> {
        let all = [self.ac, self.ad, self.aed, self.adl];
        if all.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::EstimateRejected(format!("{self:?}: values must be finite and >= 0")));
        }
        if self.aed < self.ad {
            return Err(Error::EstimateRejected(format!("{self:?}: emergency deceleration below deceleration")));
        }
        Ok(())
    }
}

fn road_phrase(road: RoadType, n: u32) -> String {
    match road {
        RoadType::Normal => format!("on a normal road with {n} vehicles"),
        RoadType::LightIndustry => format!("on a light industry road with {n} vehicles"),
        RoadType::HeavyIndustry => format!("on a heavy industry truck road, {n} vehicles"),
    }
}

/// The context sentence, without trailing punctuation.
pub fn context_sentence(ctx: &PromptContext) -> String {
    format!("In {} day, {}", ctx.context.weather.as_str(), road_phrase(ctx.context.road_type, ctx.vehicle_count))
}

pub fn build_prompt(ctx: &PromptContext) -> String {
    format!("{TASK_TEXT}\n{}.\n{OUTPUT_RESTRICTION}", context_sentence(ctx))
}

const FIELDS: [&str; 4] =
    ["average acceleration", "average deceleration", "average emergency deceleration", "average startup delay"];

/// Pull the four bracketed fields out of free text.
pub fn parse_response(text: &str) -> Result<DynamicsEstimate> {
    let lower = text.to_lowercase();
    let mut vals = [0.0; 4];
    for (slot, field) in vals.iter_mut().zip(FIELDS) {
        *slot = find_field(&lower, field).ok_or(Error::ResponseParse { field })?;
    }
    Ok(DynamicsEstimate { ac: vals[0], ad: vals[1], aed: vals[2], adl: vals[3] })
}

/// First `label` occurrence followed by `:` and a number.
fn find_field(text: &str, label: &str) -> Option<f64> {
    let mut from = 0;
    while let Some(off) = text[from..].find(label) {
        let after = &text[from + off + label.len()..];
        from += off + label.len();
        let rest = after.trim_start();
        let Some(rest) = rest.strip_prefix(':').or_else(|| rest.strip_prefix('=')) else { continue };
        if let Some(v) = leading_number(rest.trim_start()) {
            return Some(v);
        }
    }
    None
}

fn leading_number(s: &str) -> Option<f64> {
    let bytes = s.as_bytes();
    let mut end = 0;
    if end < bytes.len() && (bytes[end] == b'-' || bytes[end] == b'+') {
        end += 1;
    }
    let digits_start = end;
    while end < bytes.len() && (bytes[end].is_ascii_digit() || bytes[end] == b'.') {
        end += 1;
    }
    if end == digits_start {
        return None;
    }
    // Optional exponent, only if digits follow it.
    if end < bytes.len() && (bytes[end] == b'e' || bytes[end] == b'E') {
        let mut k = end + 1;
        if k < bytes.len() && (bytes[k] == b'-' || bytes[k] == b'+') {
            k += 1;
        }
        if k < bytes.len() && bytes[k].is_ascii_digit() {
            while k < bytes.len() && bytes[k].is_ascii_digit() {
                k += 1;
            }
            end = k;
        }
    }
    // A trailing sentence period is not part of the number.
    let mut num = &s[..end];
    if num.ends_with('.') && num.len() > 1 {
        num = &num[..num.len() - 1];
    }
    num.parse().ok().filter(|v: &f64| v.is_finite())
}

/// Cache key: context plus the vehicle-count bucket index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CacheKey {
    pub weather: Weather,
    pub road: RoadType,
    pub bucket: u32,
}

impl CacheKey {
    pub fn of(ctx: &PromptContext) -> Self {
        CacheKey { weather: ctx.context.weather, road: ctx.context.road_type, bucket: ctx.vehicle_count / BUCKET_WIDTH }
    }

    /// The representative context sent to the backend: the bucket's lower bound.
    pub fn representative(&self) -> PromptContext {
        PromptContext::new(DomainContext { weather: self.weather, road_type: self.road }, self.bucket * BUCKET_WIDTH)
    }
}

pub trait Backend: Send + Sync {
    fn estimate(&self, ctx: &PromptContext) -> Result<DynamicsEstimate>;
    fn kind(&self) -> OracleKind;
}

/// Table lookup by (weather, road) with a congestion adjustment.
#[derive(Debug, Clone)]
pub struct RuleBackend {
    table: BTreeMap<(Weather, RoadType), DynamicsEstimate>,
}

impl RuleBackend {
    pub fn builtin() -> Self {
        Self::parse(BUILTIN_TABLE).expect("bundled rule table is valid")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|reason| Error::format("rule table", path, reason))
    }

    pub fn parse(text: &str) -> std::result::Result<Self, String> {
        let mut table = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') || (i == 0 && line.starts_with("weather")) {
                continue;
            }
            let cols: Vec<&str> = line.split(',').map(str::trim).collect();
            if cols.len() != 6 {
                return Err(format!("line {}: expected 6 columns", i + 1));
            }
            let weather: Weather = cols[0].parse().map_err(|e| format!("line {}: {e}", i + 1))?;
            let road: RoadType = cols[1].parse().map_err(|e| format!("line {}: {e}", i + 1))?;
            let mut v = [0.0; 4];
            for (slot, c) in v.iter_mut().zip(&cols[2..]) {
                *slot = c.parse().map_err(|_| format!("line {}: bad number `{c}`", i + 1))?;
            }
            let est = DynamicsEstimate { ac: v[0], ad: v[1], aed: v[2], adl: v[3] };
            est.validate().map_err(|e| format!("line {}: {e}", i + 1))?;
            table.insert((weather, road), est);
        }
        for w in [Weather::Sunny, Weather::Rainy, Weather::Snowy] {
            for r in [RoadType::Normal, RoadType::LightIndustry, RoadType::HeavyIndustry] {
                if !table.contains_key(&(w, r)) {
                    return Err(format!("missing row for ({}, {})", w.as_str(), r.as_str()));
                }
            }
        }
        Ok(RuleBackend { table })
    }

    pub fn base(&self, context: DomainContext) -> DynamicsEstimate {
        self.table[&(context.weather, context.road_type)]
    }
}

impl Backend for RuleBackend {
    fn estimate(&self, ctx: &PromptContext) -> Result<DynamicsEstimate> {
        let base = self.base(ctx.context);
        let n = ctx.vehicle_count as f64;
        Ok(DynamicsEstimate { ac: base.ac * (1.0 - 0.02 * n).max(0.5), adl: base.adl + 0.01 * n, ..base })
    }

    fn kind(&self) -> OracleKind {
        OracleKind::Rule
    }
}

/// One line of a replay file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayRecord {
    #[serde(flatten)]
    pub key: CacheKey,
    pub response: String,
}

/// Recorded raw responses keyed like the cache.
#[derive(Debug, Clone)]
pub struct ReplayBackend {
    responses: HashMap<CacheKey, String>,
}

impl ReplayBackend {
    pub fn new(records: impl IntoIterator<Item = ReplayRecord>) -> Self {
        ReplayBackend { responses: records.into_iter().map(|r| (r.key, r.response)).collect() }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let r: ReplayRecord =
                serde_json::from_str(line).map_err(|e| Error::format("replay", path, format!("line {}: {e}", i + 1)))?;
            records.push(r);
        }
        Ok(Self::new(records))
    }
}

impl Backend for ReplayBackend {
    fn estimate(&self, ctx: &PromptContext) -> Result<DynamicsEstimate> {
        let key = CacheKey::of(ctx);
        let text = self.responses.get(&key).ok_or_else(|| Error::Backend {
            attempts: 1,
            detail: format!("no recorded response for {} / {} / bucket {}", key.weather.as_str(), key.road.as_str(), key.bucket),
        })?;
        parse_response(text)
    }

    fn kind(&self) -> OracleKind {
        OracleKind::Replay
    }
}

#[derive(Serialize)]
struct ChatMessage<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: [ChatMessage<'a>; 1],
    temperature: f64,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatReply,
}

#[derive(Deserialize)]
struct ChatReply {
    content: String,
}

/// Chat-completion endpoint.
pub struct RemoteBackend {
    endpoint: String,
    model: String,
    key: String,
    agent: ureq::Agent,
    pub max_attempts: u32,
    /// Delay before the second attempt; doubles each time.
    pub backoff: Duration,
}

impl RemoteBackend {
    /// Reads the credential from the environment.
    pub fn from_env(endpoint: &str, model: &str, timeout: Duration) -> Result<Self> {
        let key = std::env::var(CREDENTIAL_ENV)
            .ok()
            .filter(|k| !k.is_empty())
            .ok_or_else(|| Error::OracleConfig(format!("remote backend needs the {CREDENTIAL_ENV} environment variable")))?;
        Self::new(endpoint, model, &key, timeout)
    }

    pub fn new(endpoint: &str, model: &str, key: &str, timeout: Duration) -> Result<Self> {
        if endpoint.is_empty() {
            return Err(Error::OracleConfig("remote backend needs an endpoint URL".into()));
        }
        let agent = ureq::Agent::config_builder().timeout_global(Some(timeout)).http_status_as_error(false).build().into();
        Ok(RemoteBackend {
            endpoint: endpoint.to_string(),
            model: model.to_string(),
            key: key.to_string(),
            agent,
            max_attempts: 3,
            backoff: Duration::from_millis(500),
        })
    }

    /// Send the prompt and return the assistant text.
    pub fn complete(&self, prompt: &str) -> Result<String> {
        let body = ChatRequest { model: &self.model, messages: [ChatMessage { role: "user", content: prompt }], temperature: 0.0 };
        let mut last = String::new();
        for attempt in 1..=self.max_attempts {
            if attempt > 1 {
                std::thread::sleep(self.backoff * 2u32.pow(attempt - 2));
            }
            let sent = self
                .agent
                .post(&self.endpoint)
                .header("Authorization", &format!("Bearer {}", self.key))
                .send_json(&body);
            let mut resp = match sent {
                Ok(r) => r,
                Err(e) => {
                    last = format!("transport: {e}");
                    continue;
                }
            };
            let status = resp.status().as_u16();
            if status == 429 || status >= 500 {
                last = format!("HTTP {status}");
                continue;
            }
            if !(200..300).contains(&status) {
                let text = resp.body_mut().read_to_string().unwrap_or_default();
                return Err(Error::Backend { attempts: attempt, detail: format!("HTTP {status}: {text}") });
            }
            let parsed: ChatResponse = resp
                .body_mut()
                .read_json()
                .map_err(|e| Error::Backend { attempts: attempt, detail: format!("malformed response body: {e}") })?;
            return parsed
                .choices
                .into_iter()
                .next()
                .map(|c| c.message.content)
                .ok_or_else(|| Error::Backend { attempts: attempt, detail: "response has no choices".into() });
        }
        Err(Error::Backend { attempts: self.max_attempts, detail: last })
    }
}

impl Backend for RemoteBackend {
    fn estimate(&self, ctx: &PromptContext) -> Result<DynamicsEstimate> {
        parse_response(&self.complete(&build_prompt(ctx))?)
    }

    fn kind(&self) -> OracleKind {
        OracleKind::Remote
    }
}

/// One line of a persisted cache file.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct CacheLine {
    #[serde(flatten)]
    key: CacheKey,
    estimate: DynamicsEstimate,
}

/// Bucketed estimate cache, optionally persisted as JSON lines.
#[derive(Debug, Default)]
pub struct OracleCache {
    map: RwLock<BTreeMap<CacheKey, DynamicsEstimate>>,
    path: Option<PathBuf>,
}

impl OracleCache {
    pub fn in_memory() -> Self {
        OracleCache::default()
    }

    /// Open (or start) a cache file at `path`.
    pub fn open(path: &Path) -> Result<Self> {
        let mut map = BTreeMap::new();
        if path.exists() {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
                let l: CacheLine =
                    serde_json::from_str(line).map_err(|e| Error::format("cache", path, format!("line {}: {e}", i + 1)))?;
                map.insert(l.key, l.estimate);
            }
        }
        Ok(OracleCache { map: RwLock::new(map), path: Some(path.to_path_buf()) })
    }

    pub fn get(&self, key: &CacheKey) -> Option<DynamicsEstimate> {
        self.map.read().expect("cache lock").get(key).copied()
    }

    pub fn insert(&self, key: CacheKey, value: DynamicsEstimate) -> Result<()> {
        let mut map = self.map.write().expect("cache lock");
        map.insert(key, value);
        if let Some(path) = &self.path {
            Self::write(path, &map)?;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.map.read().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn snapshot(&self) -> BTreeMap<CacheKey, DynamicsEstimate> {
        self.map.read().expect("cache lock").clone()
    }

    fn write(path: &Path, map: &BTreeMap<CacheKey, DynamicsEstimate>) -> Result<()> {
        let mut out = String::new();
        for (key, estimate) in map {
            out.push_str(&serde_json::to_string(&CacheLine { key: *key, estimate: *estimate }).expect("plain data"));
            out.push('\n');
        }
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, out).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }
}

/// Cached, deduplicated access to a backend.
pub struct Oracle {
    backend: Box<dyn Backend>,
    cache: OracleCache,
    inflight: Mutex<HashMap<CacheKey, Arc<Mutex<()>>>>,
    calls: AtomicU64,
}

impl Oracle {
    pub fn new(backend: Box<dyn Backend>, cache: OracleCache) -> Self {
        Oracle { backend, cache, inflight: Mutex::new(HashMap::new()), calls: AtomicU64::new(0) }
    }

    pub fn rule() -> Self {
        Oracle::new(Box::new(RuleBackend::builtin()), OracleCache::in_memory())
    }

    /// Build the configured backend. Fails before any network traffic when
    /// the remote backend lacks its endpoint or credential.
    pub fn from_params(p: &OracleParams) -> Result<Self> {
        let backend: Box<dyn Backend> = match p.backend {
            OracleKind::Rule => match &p.table {
                Some(path) => Box::new(RuleBackend::load(path)?),
                None => Box::new(RuleBackend::builtin()),
            },
            OracleKind::Replay => {
                let path = p.replay.as_ref().ok_or_else(|| Error::OracleConfig("replay backend needs `oracle.replay`".into()))?;
                Box::new(ReplayBackend::load(path)?)
            }
            OracleKind::Remote => {
                let endpoint =
                    p.endpoint.as_deref().ok_or_else(|| Error::OracleConfig("remote backend needs `oracle.endpoint`".into()))?;
                Box::new(RemoteBackend::from_env(endpoint, &p.model, Duration::from_secs_f64(p.timeout_s))?)
            }
        };
        let cache = match &p.cache {
            Some(path) => OracleCache::open(path)?,
            None => OracleCache::in_memory(),
        };
        Ok(Oracle::new(backend, cache))
    }

    pub fn kind(&self) -> OracleKind {
        self.backend.kind()
    }

    /// Number of backend calls made so far.
    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn cache(&self) -> &OracleCache {
        &self.cache
    }

    pub fn query(&self, ctx: &PromptContext) -> Result<DynamicsEstimate> {
        let key = CacheKey::of(ctx);
        if let Some(hit) = self.cache.get(&key) {
            return Ok(hit);
        }
        let slot = self.inflight.lock().expect("inflight lock").entry(key).or_default().clone();
        let _guard = slot.lock().expect("inflight slot");
        // Another caller may have filled the key while we waited.
        if let Some(hit) = self.cache.get(&key) {
            return Ok(hit);
        }
        self.calls.fetch_add(1, Ordering::SeqCst);
        let est = self.backend.estimate(&key.representative())?;
        est.validate()?;
        self.cache.insert(key, est)?;
        Ok(est)
    }

    /// One estimate per lane for the given lane counts.
    pub fn query_lanes(&self, context: DomainContext, counts: &[u32; NUM_LANES]) -> Result<[DynamicsEstimate; NUM_LANES]> {
        let mut out = [DynamicsEstimate { ac: 0.0, ad: 0.0, aed: 0.0, adl: 0.0 }; NUM_LANES];
        for (lane, (slot, &n)) in out.iter_mut().zip(counts).enumerate() {
            *slot = self.query(&PromptContext { context, vehicle_count: n, lane: Some(LaneId(lane)) })?;
        }
        Ok(out)
    }
}
