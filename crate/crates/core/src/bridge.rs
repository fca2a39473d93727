//! The bridge unit: lifecycle, publish-on-change of inputs, and output
//! selection under `maxage` and `lookahead`.
//!
//! Two selection policies exist. `V1Conservative` keeps the current output
//! for as long as it is within `maxage` of the step end, even when newer
//! data is queued. `V2MoveToLatest` moves to queued data whenever any is
//! eligible and only falls back to holding when nothing is.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use log::{debug, trace};
use serde::{Deserialize, Serialize};

use crate::clock::Clock;
use crate::ingress::{
    fill_unthreaded, ConsumerHandle, IncomingQueue, IngestError, IngestMode, QueueStats, RecordSchema,
    DEFAULT_QUEUE_CAPACITY,
};
use crate::timebase::{Direction, Duration, SimTime, Value, ValueKind, VariableDecl};
use crate::transport::{validate_routing_key, BrokerHandle, Envelope, Subscription, TimestampedRecord, TransportError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Policy {
    #[serde(rename = "v1")]
    V1Conservative,
    #[serde(rename = "v2")]
    V2MoveToLatest,
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Policy::V1Conservative => "v1",
            Policy::V2MoveToLatest => "v2",
        })
    }
}

impl FromStr for Policy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "v1" | "conservative" => Ok(Policy::V1Conservative),
            "v2" | "move-to-latest" | "latest" => Ok(Policy::V2MoveToLatest),
            _ => Err(format!("unknown policy {s:?} (expected v1 or v2)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SelectParams {
    pub policy: Policy,
    pub maxage: Duration,
    pub lookahead: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decision {
    Hold,
    /// Take the record at `index` (0-based) and consume `consumed = index + 1`
    /// records from the front.
    Advance { index: usize, consumed: usize },
    NeedData,
}

/// Chooses the output for a step ending at `horizon`.
///
/// `available` must be sorted by time. Only the eligible prefix (time at or
/// before `horizon`) is inspected, and at most `lookahead` of it.
pub fn select_output<I>(available: I, current: Option<SimTime>, horizon: SimTime, params: &SelectParams) -> Decision
where
    I: IntoIterator<Item = SimTime>,
{
    let fresh = current.is_some_and(|c| c + params.maxage >= horizon);
    if params.policy == Policy::V1Conservative && fresh {
        return Decision::Hold;
    }
    let take = available
        .into_iter()
        .take_while(|t| *t <= horizon)
        .take(params.lookahead)
        .count();
    if take > 0 {
        return Decision::Advance {
            index: take - 1,
            consumed: take,
        };
    }
    if fresh {
        Decision::Hold
    } else {
        Decision::NeedData
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BridgeConfig {
    pub maxage: Duration,
    pub lookahead: usize,
    pub timeout: Duration,
    pub policy: Policy,
    pub ingest_mode: IngestMode,
    pub queue_capacity: usize,
    pub routing_key_in: String,
    pub routing_key_out: String,
    pub variables: Vec<VariableDecl>,
}

impl Default for BridgeConfig {
    fn default() -> Self {
        BridgeConfig {
            maxage: Duration::from_secs(1),
            lookahead: 1,
            timeout: Duration::from_secs(1),
            policy: Policy::V2MoveToLatest,
            ingest_mode: IngestMode::Threaded,
            queue_capacity: DEFAULT_QUEUE_CAPACITY,
            routing_key_in: "bridge.in".into(),
            routing_key_out: "bridge.out".into(),
            variables: Vec::new(),
        }
    }
}

impl BridgeConfig {
    pub fn validate(&self) -> Result<(), BridgeError> {
        let bad = |m: String| Err(BridgeError::Config(m));
        if self.lookahead == 0 {
            return bad("lookahead must be at least 1".into());
        }
        if self.timeout.is_zero() {
            return bad("timeout must be positive".into());
        }
        if self.queue_capacity == 0 {
            return bad("queue_capacity must be positive".into());
        }
        for (name, key) in [("routing_key_in", &self.routing_key_in), ("routing_key_out", &self.routing_key_out)] {
            if validate_routing_key(key).is_err() {
                return bad(format!("{name} {key:?} is empty or contains control characters"));
            }
        }
        let mut seen = HashSet::new();
        for v in &self.variables {
            if v.name.is_empty() {
                return bad("variable names must be non-empty".into());
            }
            if !seen.insert(v.name.as_str()) {
                return bad(format!("variable {} is declared twice", v.name));
            }
        }
        Ok(())
    }

    pub fn select_params(&self) -> SelectParams {
        SelectParams {
            policy: self.policy,
            maxage: self.maxage,
            lookahead: self.lookahead,
        }
    }

    pub fn outputs(&self) -> impl Iterator<Item = &VariableDecl> {
        self.variables.iter().filter(|v| v.direction == Direction::Output)
    }

    pub fn inputs(&self) -> impl Iterator<Item = &VariableDecl> {
        self.variables.iter().filter(|v| v.direction == Direction::Input)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Lifecycle {
    Configured,
    Initialized,
    Stepping,
    Terminated,
}

impl fmt::Display for Lifecycle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Lifecycle::Configured => "configured",
            Lifecycle::Initialized => "initialized",
            Lifecycle::Stepping => "stepping",
            Lifecycle::Terminated => "terminated",
        })
    }
}

#[derive(Debug, thiserror::Error)]
pub enum BridgeError {
    #[error("invalid bridge configuration: {0}")]
    Config(String),
    #[error("{op} is not allowed while the unit is {state}")]
    Lifecycle { op: &'static str, state: Lifecycle },
    #[error("unknown {direction} variable {name}")]
    UnknownVariable { name: String, direction: &'static str },
    #[error("variable {name} is declared {expected} but was given {actual}")]
    KindMismatch {
        name: String,
        expected: ValueKind,
        actual: ValueKind,
    },
    #[error("output {0} has no value yet; no record has been selected")]
    NotYetStepped(String),
    #[error("step must start at {expected} but was called at {actual}")]
    StepMismatch { expected: SimTime, actual: SimTime },
    #[error("step size must be positive")]
    ZeroStep,
    #[error(
        "no data for the step ending at {t_end} within {timeout} (queue length {}, offered {}, dropped {}, rejected {})",
        stats.len, stats.offered, stats.dropped, stats.rejected
    )]
    StepTimeout {
        t_end: SimTime,
        timeout: Duration,
        stats: QueueStats,
    },
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Transport(#[from] TransportError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum StepOutcome {
    Advanced,
    Held,
    /// Nothing eligible, but the queue already holds later data, so nothing
    /// eligible can still arrive. The output is left unchanged.
    Starved,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct StepReport {
    /// 1-based.
    pub step_index: u64,
    pub sim_time_end: SimTime,
    pub wall_duration: Duration,
    pub consumed: usize,
    pub queue_len_exit: usize,
    pub out_seqno: Option<u64>,
    pub out_ts: Option<SimTime>,
    pub held: bool,
    /// Records published on the outbound key during this step (0 or 1).
    pub published: usize,
    pub dropped_so_far: u64,
    pub outcome: StepOutcome,
}

pub struct BridgeUnit {
    config: BridgeConfig,
    params: SelectParams,
    broker: Arc<dyn BrokerHandle>,
    clock: Arc<dyn Clock>,
    epoch: i64,
    schema: RecordSchema,
    queue: Arc<IncomingQueue>,
    subscription: Option<Box<dyn Subscription>>,
    consumer: Option<ConsumerHandle>,
    lifecycle: Lifecycle,
    current: Option<(TimestampedRecord, SimTime)>,
    inputs: BTreeMap<String, Value>,
    last_published: BTreeMap<String, Value>,
    publish_seq: u64,
    steps: u64,
    next_t: SimTime,
}

const MAX_WAIT_SLICE: Duration = Duration::from_millis(10);

impl BridgeUnit {
    /// Validates `config` and subscribes to the inbound key, so anything
    /// published from now on reaches the unit.
    pub fn setup(
        config: BridgeConfig,
        broker: Arc<dyn BrokerHandle>,
        clock: Arc<dyn Clock>,
        epoch: i64,
    ) -> Result<BridgeUnit, BridgeError> {
        config.validate()?;
        let subscription = broker.subscribe(&config.routing_key_in)?;
        Ok(BridgeUnit {
            params: config.select_params(),
            schema: RecordSchema::new(&config.variables, epoch),
            queue: Arc::new(IncomingQueue::new(config.queue_capacity)),
            subscription: Some(subscription),
            consumer: None,
            lifecycle: Lifecycle::Configured,
            current: None,
            inputs: BTreeMap::new(),
            last_published: BTreeMap::new(),
            publish_seq: 0,
            steps: 0,
            next_t: SimTime::ZERO,
            config,
            broker,
            clock,
            epoch,
        })
    }

    /// Starts the consumer in threaded mode.
    pub fn initialize(&mut self) -> Result<(), BridgeError> {
        if self.lifecycle != Lifecycle::Configured {
            return Err(self.lifecycle_error("initialize"));
        }
        if self.config.ingest_mode == IngestMode::Threaded {
            let sub = self.subscription.take().expect("subscription present until initialized");
            let handle = self
                .clock
                .start_consumer(Arc::clone(&self.queue), sub, self.schema.clone())?;
            self.consumer = Some(handle);
        }
        self.lifecycle = Lifecycle::Initialized;
        Ok(())
    }

    pub fn config(&self) -> &BridgeConfig {
        &self.config
    }

    pub fn lifecycle(&self) -> Lifecycle {
        self.lifecycle
    }

    pub fn epoch(&self) -> i64 {
        self.epoch
    }

    pub fn queue(&self) -> &Arc<IncomingQueue> {
        &self.queue
    }

    pub fn current_output(&self) -> Option<(&TimestampedRecord, SimTime)> {
        self.current.as_ref().map(|(r, t)| (r, *t))
    }

    fn lifecycle_error(&self, op: &'static str) -> BridgeError {
        BridgeError::Lifecycle {
            op,
            state: self.lifecycle,
        }
    }

    fn declared(&self, name: &str, direction: Direction) -> Result<&VariableDecl, BridgeError> {
        self.config
            .variables
            .iter()
            .find(|v| v.name == name && v.direction == direction)
            .ok_or_else(|| BridgeError::UnknownVariable {
                name: name.to_string(),
                direction: match direction {
                    Direction::Input => "input",
                    Direction::Output => "output",
                },
            })
    }

    pub fn set_input(&mut self, name: &str, value: Value) -> Result<(), BridgeError> {
        if self.lifecycle == Lifecycle::Terminated {
            return Err(self.lifecycle_error("set_input"));
        }
        let decl = self.declared(name, Direction::Input)?;
        if decl.kind != value.kind() {
            return Err(BridgeError::KindMismatch {
                name: name.to_string(),
                expected: decl.kind,
                actual: value.kind(),
            });
        }
        self.inputs.insert(name.to_string(), value);
        Ok(())
    }

    pub fn get_output(&self, name: &str) -> Result<Value, BridgeError> {
        self.declared(name, Direction::Output)?;
        let (rec, _) = self
            .current
            .as_ref()
            .ok_or_else(|| BridgeError::NotYetStepped(name.to_string()))?;
        rec.values
            .get(name)
            .cloned()
            .ok_or_else(|| BridgeError::NotYetStepped(name.to_string()))
    }

    /// Publishes the inputs that differ from the last published values as
    /// one record stamped `epoch + t_cur`. Returns the number of records
    /// published.
    pub fn publish_changed_inputs(&mut self, t_cur: SimTime) -> Result<usize, BridgeError> {
        if !matches!(self.lifecycle, Lifecycle::Initialized | Lifecycle::Stepping) {
            return Err(self.lifecycle_error("publish_changed_inputs"));
        }
        let changed: BTreeMap<String, Value> = self
            .inputs
            .iter()
            .filter(|(k, v)| self.last_published.get(*k) != Some(*v))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        if changed.is_empty() {
            return Ok(0);
        }
        let data_ts = self.epoch.saturating_add(t_cur.as_nanos() as i64);
        let rec = TimestampedRecord {
            data_ts,
            seqno: self.publish_seq + 1,
            values: changed,
        };
        self.broker.publish(Envelope::record(&self.config.routing_key_out, &rec)?)?;
        self.publish_seq += 1;
        debug!("published {} changed inputs at {t_cur} ns", rec.values.len());
        self.last_published.extend(rec.values);
        Ok(1)
    }

    fn sim_time(&self, rec: &TimestampedRecord) -> SimTime {
        SimTime::from_nanos(rec.data_ts.saturating_sub(self.epoch).max(0) as u64)
    }

    fn check_consumer(&self) -> Result<(), BridgeError> {
        if let Some(c) = &self.consumer {
            if let Some(e) = c.try_error() {
                return Err(e.into());
            }
        }
        Ok(())
    }

    /// Unthreaded only: pull from the transport without waiting until the
    /// queue holds `lookahead` eligible records or a later one.
    fn drain_unthreaded(&mut self, horizon: SimTime) -> Result<(), BridgeError> {
        let Some(sub) = self.subscription.as_mut() else {
            return Ok(());
        };
        let epoch = self.epoch;
        let la = self.params.lookahead;
        let to_time = move |r: &TimestampedRecord| SimTime::from_nanos(r.data_ts.saturating_sub(epoch).max(0) as u64);
        let enough = move |q: &IncomingQueue| {
            q.with_view(|v| {
                let recs = v.records();
                recs.back().is_some_and(|r| to_time(r) > horizon)
                    || recs.iter().take_while(|r| to_time(r) <= horizon).take(la).count() >= la
            })
        };
        let now = self.clock.now();
        fill_unthreaded(&self.queue, sub.as_mut(), &self.schema, self.clock.as_ref(), &enough, now, now)?;
        Ok(())
    }

    /// Unthreaded only: wait until anything arrives or `deadline`.
    fn block_unthreaded(&mut self, deadline: Duration, slice: Duration) -> Result<(), BridgeError> {
        let Some(sub) = self.subscription.as_mut() else {
            return Ok(());
        };
        fill_unthreaded(
            &self.queue,
            sub.as_mut(),
            &self.schema,
            self.clock.as_ref(),
            &|q| !q.is_empty(),
            deadline,
            slice,
        )?;
        Ok(())
    }

    /// Advances from `t_cur` to `t_cur + h`.
    pub fn do_step(&mut self, t_cur: SimTime, h: Duration) -> Result<StepReport, BridgeError> {
        if !matches!(self.lifecycle, Lifecycle::Initialized | Lifecycle::Stepping) {
            return Err(self.lifecycle_error("do_step"));
        }
        if h.is_zero() {
            return Err(BridgeError::ZeroStep);
        }
        if self.steps > 0 && t_cur != self.next_t {
            return Err(BridgeError::StepMismatch {
                expected: self.next_t,
                actual: t_cur,
            });
        }
        let start = self.clock.now();
        let published = self.publish_changed_inputs(t_cur)?;
        self.lifecycle = Lifecycle::Stepping;

        let horizon = t_cur + h;
        let timeout = self.config.timeout;
        let deadline = self.clock.now() + timeout;
        let slice = Duration::from_nanos((timeout.as_nanos() / 10).max(1)).min(MAX_WAIT_SLICE);
        let threaded = self.config.ingest_mode == IngestMode::Threaded;

        let (outcome, consumed) = loop {
            self.check_consumer()?;
            let current_time = self.current.as_ref().map(|c| c.1);
            let v1_hold = self.params.policy == Policy::V1Conservative
                && current_time.is_some_and(|c| c + self.params.maxage >= horizon);
            if !threaded && !v1_hold {
                self.drain_unthreaded(horizon)?;
            }

            let epoch = self.epoch;
            let params = self.params;
            let (decision, chosen) = self.queue.with_view(|v| {
                let times = v
                    .records()
                    .iter()
                    .map(|r| SimTime::from_nanos(r.data_ts.saturating_sub(epoch).max(0) as u64));
                let d = select_output(times, current_time, horizon, &params);
                let chosen = match d {
                    Decision::Advance { consumed, .. } => v.consume_front(consumed),
                    _ => None,
                };
                (d, chosen)
            });

            match decision {
                Decision::Hold => break (StepOutcome::Held, 0),
                Decision::Advance { consumed, .. } => {
                    let rec = chosen.expect("advance removes at least one record");
                    let t = self.sim_time(&rec);
                    self.current = Some((rec, t));
                    break (StepOutcome::Advanced, consumed);
                }
                Decision::NeedData => {
                    if !self.queue.is_empty() {
                        break (StepOutcome::Starved, 0);
                    }
                    let now = self.clock.now();
                    if now >= deadline {
                        let stats = self.queue.stats();
                        return Err(BridgeError::StepTimeout {
                            t_end: horizon,
                            timeout,
                            stats,
                        });
                    }
                    if threaded {
                        let seen = self.queue.stats().offered;
                        self.clock
                            .wait_for_offer(&self.queue, seen, slice.min(deadline.saturating_sub(now)));
                    } else {
                        self.block_unthreaded(deadline, slice)?;
                    }
                }
            }
        };

        self.steps += 1;
        self.next_t = horizon;
        let stats = self.queue.stats();
        let report = StepReport {
            step_index: self.steps,
            sim_time_end: horizon,
            wall_duration: self.clock.now().saturating_sub(start),
            consumed,
            queue_len_exit: stats.len,
            out_seqno: self.current.as_ref().map(|c| c.0.seqno),
            out_ts: self.current.as_ref().map(|c| c.1),
            held: outcome == StepOutcome::Held,
            published,
            dropped_so_far: stats.dropped,
            outcome,
        };
        trace!("{report:?}");
        Ok(report)
    }

    /// Stops the consumer and releases the subscription. Idempotent.
    pub fn terminate(&mut self) {
        if self.lifecycle == Lifecycle::Terminated {
            return;
        }
        if let Some(mut c) = self.consumer.take() {
            c.shutdown();
        }
        self.subscription = None;
        self.lifecycle = Lifecycle::Terminated;
    }
}

impl Drop for BridgeUnit {
    fn drop(&mut self) {
        self.terminate();
    }
}
