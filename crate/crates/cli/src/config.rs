//! Scenario and grid files.
//!
//! A scenario file is TOML with these sections. Durations are strings with
//! a unit suffix (`ns`, `us`, `ms`, `s`); bare numbers are rejected.
//!
//! ```toml
//! seed = 7                  # optional, default 0
//! step_size = "100ms"
//! n_steps = 50
//! injected_delay = "100ms"  # optional, default 0
//! clock = "virtual"         # or "wallclock"; default virtual
//! epoch = 0                 # optional: integer nanos or ISO-8601 string
//!
//! [bridge]
//! maxage = "2s"
//! lookahead = 1
//! timeout = "1s"
//! policy = "v2"             # v1 | v2
//! ingest_mode = "threaded"  # threaded | unthreaded
//! queue_capacity = 100000
//! routing_key_in = "bridge.in"
//! routing_key_out = "bridge.out"
//! variables = [ { name = "seq", kind = "integer", direction = "output" } ]
//!
//! [replay]
//! source = "synthetic"      # synthetic | inline | csv
//! wall_period = "100ms"
//! data_spacing = "100ms"
//! count = 100
//! reals = 0                 # synthetic only
//! integers = 0              # synthetic only
//! ramps = [ { name = "x_r", start = 0.0, slope = 0.1 } ]
//! records = [ { seq = 1 } ] # inline only
//! path = "log.csv"          # csv only, relative to the scenario file
//! gap = { every_n = 1, extra = "400ms" }
//!
//! [monitor]                 # optional
//! threshold = 1.0
//!
//! [grid]                    # experiment files only
//! cap = 256
//! maxage = ["200ms", "2s"]
//! lookahead = [1, 50]
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use cosim_bridge::bridge::{BridgeConfig, Policy};
use cosim_bridge::clock::ClockMode;
use cosim_bridge::ingress::IngestMode;
use cosim_bridge::orchestrator::Scenario;
use cosim_bridge::scenario::{GapModel, MonitorConfig, Ramp, ReplaySchedule, ReplaySource, SyntheticSpec};
use cosim_bridge::timebase::{parse_timestamp, Duration, Value, VariableDecl};
use serde::Deserialize;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{0}")]
    Parse(#[from] toml::de::Error),
    #[error("{key}: {message}")]
    Key { key: String, message: String },
}

fn key_err(key: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Key {
        key: key.to_string(),
        message: message.into(),
    }
}

fn duration(key: &str, text: &str) -> Result<Duration, ConfigError> {
    text.parse::<Duration>()
        .map_err(|e| key_err(key, format!("invalid duration {text:?}: {e}")))
}

fn positive(key: &str, text: &str) -> Result<Duration, ConfigError> {
    let d = duration(key, text)?;
    if d.is_zero() {
        return Err(key_err(key, "must be positive"));
    }
    Ok(d)
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum EpochSpec {
    Nanos(i64),
    Text(String),
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    pub seed: Option<u64>,
    pub step_size: String,
    pub n_steps: u64,
    pub injected_delay: Option<String>,
    pub clock: Option<ClockMode>,
    pub epoch: Option<EpochSpec>,
    pub bridge: BridgeSection,
    pub replay: ReplaySection,
    pub monitor: Option<MonitorSection>,
    pub grid: Option<GridSection>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BridgeSection {
    pub maxage: Option<String>,
    pub lookahead: Option<i64>,
    pub timeout: Option<String>,
    pub policy: Option<Policy>,
    pub ingest_mode: Option<IngestMode>,
    pub queue_capacity: Option<i64>,
    pub routing_key_in: Option<String>,
    pub routing_key_out: Option<String>,
    #[serde(default)]
    pub variables: Vec<VariableDecl>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SourceKind {
    Synthetic,
    Inline,
    Csv,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum RawValue {
    Integer(i64),
    Real(f64),
    Boolean(bool),
}

impl From<&RawValue> for Value {
    fn from(v: &RawValue) -> Value {
        match *v {
            RawValue::Integer(i) => Value::Integer(i),
            RawValue::Real(r) => Value::Real(r),
            RawValue::Boolean(b) => Value::Boolean(b),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GapSection {
    pub every_n: u64,
    pub extra: String,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RampSection {
    pub name: String,
    pub start: f64,
    pub slope: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReplaySection {
    pub source: Option<SourceKind>,
    pub wall_period: String,
    pub data_spacing: Option<String>,
    pub count: Option<u64>,
    pub reals: Option<usize>,
    pub integers: Option<usize>,
    #[serde(default)]
    pub ramps: Vec<RampSection>,
    pub records: Option<Vec<BTreeMap<String, RawValue>>>,
    pub path: Option<PathBuf>,
    pub gap: Option<GapSection>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MonitorSection {
    pub threshold: f64,
    pub x_r: Option<String>,
    pub y_r: Option<String>,
    pub x_o: Option<String>,
    pub y_o: Option<String>,
    pub distance: Option<String>,
    pub stop: Option<String>,
}

/// Value lists to sweep. Each present list becomes one grid axis.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    pub cap: Option<usize>,
    pub maxage: Option<Vec<String>>,
    pub lookahead: Option<Vec<i64>>,
    pub policy: Option<Vec<Policy>>,
    pub ingest_mode: Option<Vec<IngestMode>>,
    pub step_size: Option<Vec<String>>,
    pub injected_delay: Option<Vec<String>>,
    pub data_spacing: Option<Vec<String>>,
    pub wall_period: Option<Vec<String>>,
}

/// A parsed scenario plus the optional grid it came with.
#[derive(Debug, Clone)]
pub struct Loaded {
    pub scenario: Scenario,
    pub grid: Option<GridSection>,
}

pub fn load(path: &Path) -> Result<Loaded, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
        path: path.to_path_buf(),
        source,
    })?;
    parse(&text, path.parent())
}

/// Parses scenario text. Relative CSV paths resolve against `base_dir`.
pub fn parse(text: &str, base_dir: Option<&Path>) -> Result<Loaded, ConfigError> {
    let file: ScenarioFile = toml::from_str(text)?;
    let grid = file.grid.clone();
    let scenario = file.into_scenario(base_dir)?;
    Ok(Loaded { scenario, grid })
}

impl ScenarioFile {
    pub fn into_scenario(self, base_dir: Option<&Path>) -> Result<Scenario, ConfigError> {
        let step_size = positive("step_size", &self.step_size)?;
        if self.n_steps == 0 {
            return Err(key_err("n_steps", "must be at least 1"));
        }
        let injected_delay = match &self.injected_delay {
            Some(t) => duration("injected_delay", t)?,
            None => Duration::ZERO,
        };
        let epoch = match &self.epoch {
            None => None,
            Some(EpochSpec::Nanos(n)) => Some(*n),
            Some(EpochSpec::Text(t)) => {
                Some(parse_timestamp(t).map_err(|e| key_err("epoch", format!("{t:?}: {e}")))?)
            }
        };
        let bridge = self.bridge.into_config()?;
        let replay = self.replay.into_schedule(base_dir)?;
        let monitor = self.monitor.map(MonitorSection::into_config).transpose()?;
        let scenario = Scenario {
            step_size,
            n_steps: self.n_steps,
            injected_delay,
            clock_mode: self.clock.unwrap_or(ClockMode::Virtual),
            bridge,
            replay,
            monitor,
            seed: self.seed.unwrap_or(0),
            epoch,
        };
        scenario.validate().map_err(|e| key_err("scenario", e.to_string()))?;
        Ok(scenario)
    }
}

impl BridgeSection {
    fn into_config(self) -> Result<BridgeConfig, ConfigError> {
        let mut c = BridgeConfig::default();
        if let Some(t) = &self.maxage {
            c.maxage = duration("bridge.maxage", t)?;
        }
        if let Some(la) = self.lookahead {
            if la < 1 {
                return Err(key_err("bridge.lookahead", format!("must be at least 1, got {la}")));
            }
            c.lookahead = la as usize;
        }
        if let Some(t) = &self.timeout {
            c.timeout = duration("bridge.timeout", t)?;
        }
        if let Some(p) = self.policy {
            c.policy = p;
        }
        if let Some(m) = self.ingest_mode {
            c.ingest_mode = m;
        }
        if let Some(cap) = self.queue_capacity {
            if cap < 1 {
                return Err(key_err("bridge.queue_capacity", format!("must be at least 1, got {cap}")));
            }
            c.queue_capacity = cap as usize;
        }
        if let Some(k) = self.routing_key_in {
            c.routing_key_in = k;
        }
        if let Some(k) = self.routing_key_out {
            c.routing_key_out = k;
        }
        c.variables = self.variables;
        c.validate().map_err(|e| key_err("bridge", e.to_string()))?;
        Ok(c)
    }
}

impl ReplaySection {
    fn into_schedule(self, base_dir: Option<&Path>) -> Result<ReplaySchedule, ConfigError> {
        let wall_period = positive("replay.wall_period", &self.wall_period)?;
        let data_spacing = match &self.data_spacing {
            Some(t) => positive("replay.data_spacing", t)?,
            None => wall_period,
        };
        let gap = match &self.gap {
            Some(g) => {
                if g.every_n == 0 {
                    return Err(key_err("replay.gap.every_n", "must be at least 1"));
                }
                Some(GapModel {
                    every_n: g.every_n,
                    extra: duration("replay.gap.extra", &g.extra)?,
                })
            }
            None => None,
        };
        let kind = self.source.unwrap_or(SourceKind::Synthetic);
        let only = |present: bool, key: &str, for_kind: &str| {
            if present {
                Err(key_err(key, format!("only valid with source = \"{for_kind}\"")))
            } else {
                Ok(())
            }
        };
        if kind != SourceKind::Synthetic {
            only(self.reals.is_some(), "replay.reals", "synthetic")?;
            only(self.integers.is_some(), "replay.integers", "synthetic")?;
            only(!self.ramps.is_empty(), "replay.ramps", "synthetic")?;
        }
        if kind != SourceKind::Inline {
            only(self.records.is_some(), "replay.records", "inline")?;
        }
        if kind != SourceKind::Csv {
            only(self.path.is_some(), "replay.path", "csv")?;
        }
        let source = match kind {
            SourceKind::Synthetic => {
                if self.count.is_none() {
                    return Err(key_err("replay.count", "required for a synthetic source"));
                }
                ReplaySource::Synthetic(SyntheticSpec {
                    reals: self.reals.unwrap_or(0),
                    integers: self.integers.unwrap_or(0),
                    ramps: self
                        .ramps
                        .into_iter()
                        .map(|r| Ramp {
                            name: r.name,
                            start: r.start,
                            slope: r.slope,
                        })
                        .collect(),
                })
            }
            SourceKind::Inline => {
                let records = self
                    .records
                    .ok_or_else(|| key_err("replay.records", "required for an inline source"))?;
                ReplaySource::Inline(
                    records
                        .iter()
                        .map(|r| r.iter().map(|(k, v)| (k.clone(), Value::from(v))).collect())
                        .collect(),
                )
            }
            SourceKind::Csv => {
                let path = self
                    .path
                    .ok_or_else(|| key_err("replay.path", "required for a csv source"))?;
                let path = match base_dir {
                    Some(dir) if path.is_relative() => dir.join(path),
                    _ => path,
                };
                ReplaySource::Csv(path)
            }
        };
        let schedule = ReplaySchedule {
            source,
            wall_period,
            data_spacing,
            gap,
            count: self.count,
        };
        schedule.validate().map_err(|e| key_err("replay", e.to_string()))?;
        Ok(schedule)
    }
}

impl MonitorSection {
    fn into_config(self) -> Result<MonitorConfig, ConfigError> {
        if !(self.threshold.is_finite() && self.threshold > 0.0) {
            return Err(key_err("monitor.threshold", format!("must be positive, got {}", self.threshold)));
        }
        let mut c = MonitorConfig::new(self.threshold);
        let set = |slot: &mut String, v: Option<String>| {
            if let Some(v) = v {
                *slot = v;
            }
        };
        set(&mut c.x_r, self.x_r);
        set(&mut c.y_r, self.y_r);
        set(&mut c.x_o, self.x_o);
        set(&mut c.y_o, self.y_o);
        set(&mut c.distance, self.distance);
        set(&mut c.stop, self.stop);
        c.validate().map_err(|e| key_err("monitor", e.to_string()))?;
        Ok(c)
    }
}
