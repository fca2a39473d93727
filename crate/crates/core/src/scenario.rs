//! Replay sources, the distance monitor, and a brute-force reference for the
//! bridge's per-step outputs.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::Instant;

use log::{debug, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bridge::Policy;
use crate::clock::VirtualClock;
use crate::timebase::{parse_timestamp, Duration, SimTime, TimeError, Value, ValueKind, VariableDecl};
use crate::transport::{BrokerHandle, Envelope, TimestampedRecord, TransportError};

#[derive(Debug, thiserror::Error)]
pub enum ReplayError {
    #[error("invalid replay schedule: {0}")]
    Invalid(String),
    #[error("{path}: line {line}: {message}")]
    Csv {
        path: String,
        line: u64,
        message: String,
    },
    #[error("inline record {row}: {message}")]
    Row { row: usize, message: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Transport(#[from] TransportError),
}

/// Extra timestamp spacing inserted after every `every_n` records.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GapModel {
    pub every_n: u64,
    pub extra: Duration,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ramp {
    pub name: String,
    pub start: f64,
    pub slope: f64,
}

/// Generated record contents. Every record carries `seq` (its sequence
/// number); `reals` and `integers` add random columns `r0..`, `i0..`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SyntheticSpec {
    #[serde(default)]
    pub reals: usize,
    #[serde(default)]
    pub integers: usize,
    #[serde(default)]
    pub ramps: Vec<Ramp>,
}

impl SyntheticSpec {
    /// Same column shape as the UR robot log: 107 reals and 10 integers.
    pub fn robot_log() -> Self {
        SyntheticSpec {
            reals: 107,
            integers: 10,
            ramps: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ReplaySource {
    Synthetic(SyntheticSpec),
    Inline(Vec<BTreeMap<String, Value>>),
    Csv(PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplaySchedule {
    pub source: ReplaySource,
    /// Spacing of publication instants.
    pub wall_period: Duration,
    /// Spacing of data timestamps for generated and inline sources.
    pub data_spacing: Duration,
    pub gap: Option<GapModel>,
    /// Number of records. Required for synthetic sources; otherwise a
    /// prefix of the source.
    pub count: Option<u64>,
}

/// Records ready for publication plus the epoch their timestamps are
/// relative to.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplayData {
    pub records: Vec<TimestampedRecord>,
    pub epoch: i64,
}

impl ReplaySchedule {
    pub fn synthetic(count: u64, wall_period: Duration, data_spacing: Duration) -> Self {
        ReplaySchedule {
            source: ReplaySource::Synthetic(SyntheticSpec::default()),
            wall_period,
            data_spacing,
            gap: None,
            count: Some(count),
        }
    }

    pub fn validate(&self) -> Result<(), ReplayError> {
        if self.wall_period.is_zero() {
            return Err(ReplayError::Invalid("wall_period must be positive".into()));
        }
        if self.data_spacing.is_zero() {
            return Err(ReplayError::Invalid("data_spacing must be positive".into()));
        }
        if let Some(g) = self.gap {
            if g.every_n == 0 {
                return Err(ReplayError::Invalid("gap.every_n must be at least 1".into()));
            }
        }
        if matches!(self.source, ReplaySource::Synthetic(_)) && self.count.is_none() {
            return Err(ReplayError::Invalid("synthetic source needs a count".into()));
        }
        Ok(())
    }

    /// Timestamp offset of record `k` (1-based) from the epoch.
    pub fn data_offset(&self, k: u64) -> Duration {
        let base = self.data_spacing.as_nanos().saturating_mul(k);
        let extras = match self.gap {
            Some(g) => g.extra.as_nanos().saturating_mul((k.saturating_sub(1)) / g.every_n),
            None => 0,
        };
        Duration::from_nanos(base.saturating_add(extras))
    }

    /// Publication instant of record `k` (1-based) relative to replay start.
    pub fn publish_instant(&self, k: u64) -> Duration {
        Duration::from_nanos(self.wall_period.as_nanos().saturating_mul(k))
    }

    /// Builds the records. Generated and inline sources are stamped
    /// `epoch + data_offset(k)` with epoch defaulting to 0; CSV sources keep
    /// their own stamps and default the epoch to the first row.
    pub fn materialize(
        &self,
        outputs: &[VariableDecl],
        seed: u64,
        epoch: Option<i64>,
    ) -> Result<ReplayData, ReplayError> {
        self.validate()?;
        match &self.source {
            ReplaySource::Synthetic(spec) => {
                let epoch = epoch.unwrap_or(0);
                let count = self.count.unwrap_or(0);
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let mut records = Vec::with_capacity(count as usize);
                for k in 1..=count {
                    let mut values = BTreeMap::new();
                    values.insert("seq".to_string(), Value::Integer(k as i64));
                    for i in 0..spec.reals {
                        values.insert(format!("r{i}"), Value::Real(rng.gen_range(-1.0..1.0)));
                    }
                    for i in 0..spec.integers {
                        values.insert(format!("i{i}"), Value::Integer(rng.gen_range(-1000..1000)));
                    }
                    for ramp in &spec.ramps {
                        values.insert(ramp.name.clone(), Value::Real(ramp.start + ramp.slope * k as f64));
                    }
                    for decl in outputs {
                        match values.get(&decl.name) {
                            Some(v) if v.kind() != decl.kind => {
                                return Err(ReplayError::Invalid(format!(
                                    "generated column {} is {} but the output is declared {}",
                                    decl.name,
                                    v.kind(),
                                    decl.kind
                                )))
                            }
                            Some(_) => {}
                            None => {
                                let v = filler(decl.kind, k, &mut rng);
                                values.insert(decl.name.clone(), v);
                            }
                        }
                    }
                    records.push(TimestampedRecord {
                        data_ts: stamp(epoch, self.data_offset(k))?,
                        seqno: k,
                        values,
                    });
                }
                Ok(ReplayData { records, epoch })
            }
            ReplaySource::Inline(rows) => {
                let epoch = epoch.unwrap_or(0);
                let n = self.take_count(rows.len())?;
                let mut records = Vec::with_capacity(n);
                for (i, values) in rows.iter().take(n).enumerate() {
                    check_row(values, outputs).map_err(|message| ReplayError::Row { row: i + 1, message })?;
                    let k = i as u64 + 1;
                    records.push(TimestampedRecord {
                        data_ts: stamp(epoch, self.data_offset(k))?,
                        seqno: k,
                        values: values.clone(),
                    });
                }
                Ok(ReplayData { records, epoch })
            }
            ReplaySource::Csv(path) => {
                let mut records = read_csv(path, outputs)?;
                let n = self.take_count(records.len())?;
                records.truncate(n);
                let epoch = epoch
                    .or_else(|| records.first().map(|r| r.data_ts))
                    .unwrap_or(0);
                if let Some(r) = records.iter().find(|r| r.data_ts < epoch) {
                    return Err(ReplayError::Invalid(format!(
                        "record {} at {} ns precedes the epoch {} ns",
                        r.seqno, r.data_ts, epoch
                    )));
                }
                Ok(ReplayData { records, epoch })
            }
        }
    }

    fn take_count(&self, available: usize) -> Result<usize, ReplayError> {
        match self.count {
            None => Ok(available),
            Some(c) if c as usize <= available => Ok(c as usize),
            Some(c) => Err(ReplayError::Invalid(format!(
                "count {c} exceeds the {available} records in the source"
            ))),
        }
    }
}

fn stamp(epoch: i64, offset: Duration) -> Result<i64, ReplayError> {
    i64::try_from(offset.as_nanos())
        .ok()
        .and_then(|o| epoch.checked_add(o))
        .ok_or_else(|| ReplayError::Invalid("data timestamp overflows".into()))
}

fn filler(kind: ValueKind, k: u64, rng: &mut ChaCha8Rng) -> Value {
    match kind {
        ValueKind::Integer => Value::Integer(k as i64),
        ValueKind::Real => Value::Real(rng.gen_range(-1.0..1.0)),
        ValueKind::Boolean => Value::Boolean(k % 2 == 0),
        ValueKind::Text => Value::Text(format!("rec-{k}")),
    }
}

fn check_row(values: &BTreeMap<String, Value>, outputs: &[VariableDecl]) -> Result<(), String> {
    if values.is_empty() {
        return Err("no values".into());
    }
    for decl in outputs {
        match values.get(&decl.name) {
            None => return Err(format!("missing output {}", decl.name)),
            Some(v) if v.kind() != decl.kind => {
                return Err(format!("{} is {} but declared {}", decl.name, v.kind(), decl.kind))
            }
            Some(_) => {}
        }
    }
    Ok(())
}

fn parse_cell(text: &str, kind: Option<ValueKind>) -> Result<Value, String> {
    let bad = |k: &str| format!("{text:?} is not a valid {k}");
    match kind {
        Some(ValueKind::Integer) => text.parse().map(Value::Integer).map_err(|_| bad("integer")),
        Some(ValueKind::Real) => match text.parse::<f64>() {
            Ok(v) if v.is_finite() => Ok(Value::Real(v)),
            _ => Err(bad("finite real")),
        },
        Some(ValueKind::Boolean) => match text {
            "true" => Ok(Value::Boolean(true)),
            "false" => Ok(Value::Boolean(false)),
            _ => Err(bad("boolean")),
        },
        Some(ValueKind::Text) => Ok(Value::Text(text.to_string())),
        None => {
            if let Ok(i) = text.parse::<i64>() {
                Ok(Value::Integer(i))
            } else if let Ok(r) = text.parse::<f64>() {
                if r.is_finite() {
                    Ok(Value::Real(r))
                } else {
                    Ok(Value::Text(text.to_string()))
                }
            } else if text == "true" || text == "false" {
                Ok(Value::Boolean(text == "true"))
            } else {
                Ok(Value::Text(text.to_string()))
            }
        }
    }
}

fn is_integer_nanos(text: &str) -> bool {
    let digits = text.strip_prefix('-').unwrap_or(text);
    !digits.is_empty() && digits.bytes().all(|b| b.is_ascii_digit())
}

/// Reads `seqno,timestamp,<var>...` rows. The timestamp column is either
/// ISO-8601 or integer nanoseconds, decided by the first row. Columns named
/// after a declared output are parsed as that kind; others are inferred.
pub fn read_csv(path: &std::path::Path, outputs: &[VariableDecl]) -> Result<Vec<TimestampedRecord>, ReplayError> {
    let shown = path.display().to_string();
    let err = |line: u64, message: String| ReplayError::Csv {
        path: shown.clone(),
        line,
        message,
    };
    let file = std::fs::File::open(path).map_err(|source| ReplayError::Io {
        path: shown.clone(),
        source,
    })?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(file);
    let headers = reader
        .headers()
        .map_err(|e| err(1, e.to_string()))?
        .clone();
    if headers.len() < 3 || &headers[0] != "seqno" || &headers[1] != "timestamp" {
        return Err(err(
            1,
            "header must start with seqno,timestamp followed by at least one variable".into(),
        ));
    }
    let kinds: Vec<Option<ValueKind>> = headers
        .iter()
        .skip(2)
        .map(|h| outputs.iter().find(|d| d.name == h).map(|d| d.kind))
        .collect();
    for decl in outputs {
        if !headers.iter().skip(2).any(|h| h == decl.name) {
            return Err(err(1, format!("no column for declared output {}", decl.name)));
        }
    }

    let mut nanos_mode = None;
    let mut records: Vec<TimestampedRecord> = Vec::new();
    for row in reader.records() {
        let row = row.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            err(line, e.to_string())
        })?;
        let line = row.position().map_or(0, |p| p.line());
        let seqno: u64 = row[0]
            .parse()
            .map_err(|_| err(line, format!("seqno {:?} is not a non-negative integer", &row[0])))?;
        let ts_text = &row[1];
        let nanos = *nanos_mode.get_or_insert_with(|| is_integer_nanos(ts_text));
        let data_ts = if nanos {
            ts_text
                .parse::<i64>()
                .map_err(|_| err(line, format!("timestamp {ts_text:?} is not integer nanoseconds")))?
        } else {
            parse_timestamp(ts_text).map_err(|e: TimeError| err(line, e.to_string()))?
        };
        let mut values = BTreeMap::new();
        for ((name, cell), kind) in headers.iter().skip(2).zip(row.iter().skip(2)).zip(&kinds) {
            let v = parse_cell(cell, *kind).map_err(|m| err(line, format!("column {name}: {m}")))?;
            values.insert(name.to_string(), v);
        }
        if let Some(prev) = records.last() {
            if seqno <= prev.seqno {
                return Err(err(line, format!("seqno {seqno} does not increase")));
            }
            if data_ts <= prev.data_ts {
                return Err(err(line, format!("timestamp {ts_text} does not increase")));
            }
        }
        records.push(TimestampedRecord { data_ts, seqno, values });
    }
    if records.is_empty() {
        return Err(err(1, "no data rows".into()));
    }
    Ok(records)
}

/// Schedules every record on the logical clock, record `k` at
/// `schedule.publish_instant(k)` after `start`.
pub fn schedule_virtual(
    clock: &VirtualClock,
    broker: Arc<dyn BrokerHandle>,
    routing_key: &str,
    schedule: &ReplaySchedule,
    records: &[TimestampedRecord],
    start: Duration,
) -> Result<(), ReplayError> {
    for (i, rec) in records.iter().enumerate() {
        let env = Envelope::record(routing_key, rec)?;
        clock.schedule(start + schedule.publish_instant(i as u64 + 1), Arc::clone(&broker), env);
    }
    Ok(())
}

/// Wall-clock replayer running on its own thread.
pub struct Replayer {
    stop: Arc<AtomicBool>,
    thread: Option<JoinHandle<Result<u64, ReplayError>>>,
}

impl Replayer {
    /// Publishes record `k` at `start + wall_period * k`.
    pub fn spawn(
        broker: Arc<dyn BrokerHandle>,
        routing_key: &str,
        wall_period: Duration,
        records: Vec<TimestampedRecord>,
        start: Instant,
    ) -> Result<Replayer, ReplayError> {
        let envelopes = records
            .iter()
            .map(|r| Envelope::record(routing_key, r))
            .collect::<Result<Vec<_>, _>>()?;
        let stop = Arc::new(AtomicBool::new(false));
        let flag = Arc::clone(&stop);
        let thread = thread::Builder::new()
            .name("replayer".into())
            .spawn(move || {
                let mut sent = 0u64;
                for (i, env) in envelopes.into_iter().enumerate() {
                    let due = start + wall_period.to_std() * (i as u32 + 1);
                    loop {
                        if flag.load(Ordering::SeqCst) {
                            return Ok(sent);
                        }
                        let now = Instant::now();
                        if now >= due {
                            break;
                        }
                        thread::sleep((due - now).min(std::time::Duration::from_millis(50)));
                    }
                    match broker.publish(env) {
                        Ok(()) => sent += 1,
                        Err(TransportError::Closed) if flag.load(Ordering::SeqCst) => return Ok(sent),
                        Err(e) => return Err(e.into()),
                    }
                }
                debug!("replayer finished after {sent} records");
                Ok(sent)
            })
            .map_err(|e| ReplayError::Io {
                path: "replayer thread".into(),
                source: e,
            })?;
        Ok(Replayer {
            stop,
            thread: Some(thread),
        })
    }

    /// Waits for the replay to finish and returns the number published.
    pub fn join(mut self) -> Result<u64, ReplayError> {
        self.thread
            .take()
            .map(|t| t.join().unwrap_or_else(|_| Err(ReplayError::Invalid("replayer panicked".into()))))
            .unwrap_or(Ok(0))
    }

    /// Stops early and returns the number published so far.
    pub fn stop(mut self) -> Result<u64, ReplayError> {
        self.stop.store(true, Ordering::SeqCst);
        self.thread
            .take()
            .map(|t| t.join().unwrap_or_else(|_| Err(ReplayError::Invalid("replayer panicked".into()))))
            .unwrap_or(Ok(0))
    }
}

impl Drop for Replayer {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        if let Some(t) = self.thread.take() {
            if let Ok(Err(e)) = t.join() {
                warn!("replayer: {e}");
            }
        }
    }
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum MonitorError {
    #[error("monitor input {name} is not finite: {value}")]
    NonFinite { name: &'static str, value: f64 },
    #[error("unknown monitor input {0}")]
    UnknownInput(String),
    #[error("monitor input {0} must be numeric")]
    NotNumeric(String),
    #[error("monitor threshold must be positive and finite")]
    BadThreshold,
}

/// Distance monitor wiring. The four input names refer to bridge outputs;
/// `distance` and `stop` are the names the monitor's outputs are forwarded
/// under when the bridge declares inputs with those names.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonitorConfig {
    pub threshold: f64,
    #[serde(default = "names::x_r")]
    pub x_r: String,
    #[serde(default = "names::y_r")]
    pub y_r: String,
    #[serde(default = "names::x_o")]
    pub x_o: String,
    #[serde(default = "names::y_o")]
    pub y_o: String,
    #[serde(default = "names::distance")]
    pub distance: String,
    #[serde(default = "names::stop")]
    pub stop: String,
}

mod names {
    pub fn x_r() -> String {
        "x_r".into()
    }
    pub fn y_r() -> String {
        "y_r".into()
    }
    pub fn x_o() -> String {
        "x_o".into()
    }
    pub fn y_o() -> String {
        "y_o".into()
    }
    pub fn distance() -> String {
        "distance".into()
    }
    pub fn stop() -> String {
        "stop".into()
    }
}

impl MonitorConfig {
    pub fn new(threshold: f64) -> Self {
        MonitorConfig {
            threshold,
            x_r: names::x_r(),
            y_r: names::y_r(),
            x_o: names::x_o(),
            y_o: names::y_o(),
            distance: names::distance(),
            stop: names::stop(),
        }
    }

    pub fn validate(&self) -> Result<(), MonitorError> {
        if !(self.threshold.is_finite() && self.threshold > 0.0) {
            return Err(MonitorError::BadThreshold);
        }
        Ok(())
    }

    pub fn input_names(&self) -> [&str; 4] {
        [&self.x_r, &self.y_r, &self.x_o, &self.y_o]
    }
}

/// Euclidean robot-obstacle distance and whether it is below `threshold`.
pub fn monitor_step(x_r: f64, y_r: f64, x_o: f64, y_o: f64, threshold: f64) -> Result<(f64, bool), MonitorError> {
    for (name, value) in [("x_r", x_r), ("y_r", y_r), ("x_o", x_o), ("y_o", y_o), ("threshold", threshold)] {
        if !value.is_finite() {
            return Err(MonitorError::NonFinite { name, value });
        }
    }
    let distance = (x_r - x_o).hypot(y_r - y_o);
    Ok((distance, distance < threshold))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MonitorSample {
    pub step: u64,
    pub distance: f64,
    pub stop: bool,
}

/// The monitor as a co-simulation unit. Until all four inputs have been set
/// it produces nothing and `stop` reads false.
#[derive(Debug, Clone)]
pub struct MonitorUnit {
    config: MonitorConfig,
    inputs: [Option<f64>; 4],
    distance: Option<f64>,
    stop: bool,
}

impl MonitorUnit {
    pub fn new(config: MonitorConfig) -> Result<Self, MonitorError> {
        config.validate()?;
        Ok(MonitorUnit {
            config,
            inputs: [None; 4],
            distance: None,
            stop: false,
        })
    }

    pub fn config(&self) -> &MonitorConfig {
        &self.config
    }

    pub fn set_input(&mut self, name: &str, value: &Value) -> Result<(), MonitorError> {
        let idx = self
            .config
            .input_names()
            .iter()
            .position(|n| *n == name)
            .ok_or_else(|| MonitorError::UnknownInput(name.to_string()))?;
        let v = value.as_real().ok_or_else(|| MonitorError::NotNumeric(name.to_string()))?;
        self.inputs[idx] = Some(v);
        Ok(())
    }

    pub fn do_step(&mut self) -> Result<Option<(f64, bool)>, MonitorError> {
        let [Some(xr), Some(yr), Some(xo), Some(yo)] = self.inputs else {
            return Ok(None);
        };
        let (d, stop) = monitor_step(xr, yr, xo, yo, self.config.threshold)?;
        self.distance = Some(d);
        self.stop = stop;
        Ok(Some((d, stop)))
    }

    pub fn stop(&self) -> bool {
        self.stop
    }

    pub fn distance(&self) -> Option<f64> {
        self.distance
    }

    /// Current outputs as (name, value) pairs; distance only once computed.
    pub fn outputs(&self) -> Vec<(String, Value)> {
        let mut out = vec![(self.config.stop.clone(), Value::Boolean(self.stop))];
        if let Some(d) = self.distance {
            out.push((self.config.distance.clone(), Value::Real(d)));
        }
        out
    }
}

/// One record as the reference sees it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OracleRecord {
    pub seqno: u64,
    /// Data time relative to the scenario epoch.
    pub time: SimTime,
    /// Logical publication instant.
    pub published_at: Duration,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OracleParams {
    pub step_size: Duration,
    pub n_steps: u64,
    pub injected_delay: Duration,
    pub timeout: Duration,
    pub policy: Policy,
    pub maxage: Duration,
    pub lookahead: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OracleStep {
    Advanced { seqno: u64, time: SimTime, consumed: usize },
    Held { seqno: u64, time: SimTime },
    /// Nothing eligible yet but later data is already queued; the output
    /// (if any) is left as it was.
    Starved { current: Option<(u64, SimTime)> },
    Timeout,
}

impl OracleStep {
    pub fn out_seqno(&self) -> Option<u64> {
        match *self {
            OracleStep::Advanced { seqno, .. } | OracleStep::Held { seqno, .. } => Some(seqno),
            OracleStep::Starved { current } => current.map(|c| c.0),
            OracleStep::Timeout => None,
        }
    }
}

/// Literal per-step application of the policy definitions with no queues or
/// threads. Step `j` (0-based) ends at `(j+1)·step_size`. A logical clock
/// advances by `injected_delay` before each step; a record is visible once
/// its publication instant is reached. When nothing is visible and nothing
/// can be held, the clock jumps to the next publication if that falls within
/// the timeout, otherwise the run ends with `Timeout`.
pub fn oracle_outputs(records: &[OracleRecord], params: &OracleParams) -> Vec<OracleStep> {
    let n = records.len();
    let mut taken = vec![false; n];
    let mut current: Option<usize> = None;
    let mut clock: u64 = 0;
    let mut out = Vec::new();
    let h = params.step_size.as_nanos();

    for j in 0..params.n_steps {
        let end = h * (j + 1);
        clock += params.injected_delay.as_nanos();
        let deadline = clock + params.timeout.as_nanos();
        loop {
            let visible: Vec<usize> = (0..n)
                .filter(|&i| !taken[i] && records[i].published_at.as_nanos() <= clock)
                .collect();
            let eligible: Vec<usize> = visible
                .iter()
                .copied()
                .filter(|&i| records[i].time.as_nanos() <= end)
                .collect();
            let fresh = current
                .map(|c| records[c].time.as_nanos() + params.maxage.as_nanos() >= end)
                .unwrap_or(false);

            let hold = match params.policy {
                Policy::V1Conservative => fresh,
                Policy::V2MoveToLatest => eligible.is_empty() && fresh,
            };
            if hold {
                let c = current.expect("fresh implies current");
                out.push(OracleStep::Held {
                    seqno: records[c].seqno,
                    time: records[c].time,
                });
                break;
            }
            if !eligible.is_empty() {
                let m = eligible.len().min(params.lookahead);
                for &i in &eligible[..m] {
                    taken[i] = true;
                }
                let chosen = eligible[m - 1];
                current = Some(chosen);
                out.push(OracleStep::Advanced {
                    seqno: records[chosen].seqno,
                    time: records[chosen].time,
                    consumed: m,
                });
                break;
            }
            if !visible.is_empty() {
                out.push(OracleStep::Starved {
                    current: current.map(|c| (records[c].seqno, records[c].time)),
                });
                break;
            }
            let next = (0..n)
                .filter(|&i| !taken[i] && records[i].published_at.as_nanos() > clock)
                .map(|i| records[i].published_at.as_nanos())
                .min();
            match next {
                Some(p) if p <= deadline => clock = p,
                _ => {
                    out.push(OracleStep::Timeout);
                    return out;
                }
            }
        }
    }
    out
}
