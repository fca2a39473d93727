//! Fixed-step Jacobi master driving the bridge unit and the optional
//! distance monitor.
//!
//! Each step at time `t`: read every unit's outputs, set every unit's
//! inputs from them, step the monitor, spend the injected delay, step the
//! bridge, then advance `t` by the step size. Units therefore always see
//! the outputs of the previous communication point.

use std::io::Write;
use std::sync::Arc;
use std::time::Instant;

use log::{info, warn};
use serde::Serialize;

use crate::bridge::{BridgeConfig, BridgeError, BridgeUnit, StepReport};
use crate::clock::{Clock, ClockMode, VirtualClock, WallClock};
use crate::scenario::{
    oracle_outputs, schedule_virtual, MonitorConfig, MonitorError, MonitorSample, MonitorUnit, OracleParams,
    OracleRecord, OracleStep, ReplayError, ReplaySchedule, Replayer,
};
use crate::timebase::{Direction, Duration, SimTime, ValueKind};
use crate::transport::{BrokerConfig, BrokerHandle, MemoryBroker, TimestampedRecord, TransportError, DEFAULT_RETENTION_CAP};

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub step_size: Duration,
    pub n_steps: u64,
    /// Artificial per-step work, spent before the bridge steps.
    pub injected_delay: Duration,
    pub clock_mode: ClockMode,
    pub bridge: BridgeConfig,
    pub replay: ReplaySchedule,
    pub monitor: Option<MonitorConfig>,
    pub seed: u64,
    /// Overrides the replay source's default epoch.
    pub epoch: Option<i64>,
}

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error(transparent)]
    Replay(#[from] ReplayError),
    #[error(transparent)]
    Bridge(#[from] BridgeError),
    #[error(transparent)]
    Monitor(#[from] MonitorError),
    #[error(transparent)]
    Transport(#[from] TransportError),
}

impl Scenario {
    pub fn validate(&self) -> Result<(), RunError> {
        if self.n_steps == 0 {
            return Err(RunError::Invalid("n_steps must be at least 1".into()));
        }
        if self.step_size.is_zero() {
            return Err(RunError::Invalid("step_size must be positive".into()));
        }
        self.bridge.validate()?;
        self.replay.validate()?;
        if let Some(m) = &self.monitor {
            m.validate()?;
            for name in m.input_names() {
                let ok = self.bridge.variables.iter().any(|v| {
                    v.name == name
                        && v.direction == Direction::Output
                        && matches!(v.kind, ValueKind::Real | ValueKind::Integer)
                });
                if !ok {
                    return Err(RunError::Invalid(format!(
                        "monitor input {name} is not a numeric bridge output"
                    )));
                }
            }
        }
        Ok(())
    }

    /// The reference outputs for this scenario under the logical clock.
    pub fn oracle(&self) -> Result<Vec<OracleStep>, RunError> {
        self.validate()?;
        let outputs: Vec<_> = self.bridge.outputs().cloned().collect();
        let data = self.replay.materialize(&outputs, self.seed, self.epoch)?;
        let records: Vec<OracleRecord> = data
            .records
            .iter()
            .enumerate()
            .map(|(i, r)| OracleRecord {
                seqno: r.seqno,
                time: SimTime::from_nanos((r.data_ts - data.epoch) as u64),
                published_at: self.replay.publish_instant(i as u64 + 1),
            })
            .collect();
        Ok(oracle_outputs(
            &records,
            &OracleParams {
                step_size: self.step_size,
                n_steps: self.n_steps,
                injected_delay: self.injected_delay,
                timeout: self.bridge.timeout,
                policy: self.bridge.policy,
                maxage: self.bridge.maxage,
                lookahead: self.bridge.lookahead,
            },
        ))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum RunOutcome {
    Completed,
    /// The bridge gave up waiting for data on `step` (1-based); the trace
    /// holds the steps before it.
    TimedOut { step: u64, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub steps: usize,
    pub mean_wall_us: f64,
    pub p50_wall_us: f64,
    pub p99_wall_us: f64,
    pub max_wall_us: f64,
    pub total_consumed: u64,
    pub total_published: u64,
    pub final_queue_len: usize,
    pub final_dropped: u64,
    pub last_out_seqno: Option<u64>,
}

fn micros(nanos: u64) -> f64 {
    nanos as f64 / 1_000.0
}

/// Nearest-rank percentile of sorted values.
fn percentile(sorted: &[u64], p: f64) -> u64 {
    if sorted.is_empty() {
        return 0;
    }
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

impl Summary {
    pub fn from_reports(reports: &[StepReport]) -> Summary {
        let mut walls: Vec<u64> = reports.iter().map(|r| r.wall_duration.as_nanos()).collect();
        walls.sort_unstable();
        let total: u128 = walls.iter().map(|&w| w as u128).sum();
        let mean = if walls.is_empty() {
            0.0
        } else {
            total as f64 / walls.len() as f64 / 1_000.0
        };
        let last = reports.last();
        Summary {
            steps: reports.len(),
            mean_wall_us: mean,
            p50_wall_us: micros(percentile(&walls, 50.0)),
            p99_wall_us: micros(percentile(&walls, 99.0)),
            max_wall_us: micros(walls.last().copied().unwrap_or(0)),
            total_consumed: reports.iter().map(|r| r.consumed as u64).sum(),
            total_published: reports.iter().map(|r| r.published as u64).sum(),
            final_queue_len: last.map_or(0, |r| r.queue_len_exit),
            final_dropped: last.map_or(0, |r| r.dropped_so_far),
            last_out_seqno: last.and_then(|r| r.out_seqno),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunTrace {
    pub reports: Vec<StepReport>,
    pub outcome: RunOutcome,
    /// Records the bridge published on its outbound key, in order.
    pub outbound: Vec<TimestampedRecord>,
    pub monitor: Vec<MonitorSample>,
    pub summary: Summary,
    pub epoch: i64,
}

impl RunTrace {
    fn new(epoch: i64) -> Self {
        RunTrace {
            reports: Vec::new(),
            outcome: RunOutcome::Completed,
            outbound: Vec::new(),
            monitor: Vec::new(),
            summary: Summary::from_reports(&[]),
            epoch,
        }
    }

    pub fn timed_out(&self) -> bool {
        matches!(self.outcome, RunOutcome::TimedOut { .. })
    }
}

/// A run that stopped on an error other than a step timeout.
#[derive(Debug, thiserror::Error)]
#[error("run aborted after {} steps: {error}", trace.reports.len())]
pub struct RunFailure {
    #[source]
    pub error: RunError,
    pub trace: Box<RunTrace>,
}

impl From<RunError> for RunFailure {
    fn from(error: RunError) -> Self {
        RunFailure {
            error,
            trace: Box::new(RunTrace::new(0)),
        }
    }
}

pub fn run(scenario: &Scenario) -> Result<RunTrace, RunFailure> {
    run_with(scenario, None)
}

/// Runs `scenario`, on `broker` if given (wall-clock mode only) or on a
/// private in-memory broker.
pub fn run_with(scenario: &Scenario, broker: Option<Arc<dyn BrokerHandle>>) -> Result<RunTrace, RunFailure> {
    scenario.validate()?;
    if broker.is_some() && scenario.clock_mode == ClockMode::Virtual {
        return Err(RunError::Invalid(
            "an external broker delivers asynchronously; use wallclock mode with it".into(),
        )
        .into());
    }
    let outputs: Vec<_> = scenario.bridge.outputs().cloned().collect();
    let data = scenario
        .replay
        .materialize(&outputs, scenario.seed, scenario.epoch)
        .map_err(RunError::from)?;
    let epoch = data.epoch;
    let own_broker = broker.is_none();
    let broker: Arc<dyn BrokerHandle> = broker.unwrap_or_else(|| {
        Arc::new(MemoryBroker::new(BrokerConfig {
            retention_cap: DEFAULT_RETENTION_CAP.max(data.records.len() + 1),
            ..BrokerConfig::default()
        }))
    });

    let mut trace = RunTrace::new(epoch);
    let result = drive(scenario, data.records, epoch, &broker, &mut trace);
    if own_broker {
        broker.close();
    }
    trace.summary = Summary::from_reports(&trace.reports);
    match result {
        Ok(()) => Ok(trace),
        Err(error) => Err(RunFailure {
            error,
            trace: Box::new(trace),
        }),
    }
}

fn drive(
    scenario: &Scenario,
    records: Vec<TimestampedRecord>,
    epoch: i64,
    broker: &Arc<dyn BrokerHandle>,
    trace: &mut RunTrace,
) -> Result<(), RunError> {
    let virtual_clock = match scenario.clock_mode {
        ClockMode::Virtual => Some(Arc::new(VirtualClock::new())),
        ClockMode::Wallclock => None,
    };
    let clock: Arc<dyn Clock> = match &virtual_clock {
        Some(vc) => Arc::clone(vc) as Arc<dyn Clock>,
        None => Arc::new(WallClock::new()),
    };
    let cfg = &scenario.bridge;

    let mut bridge = BridgeUnit::setup(cfg.clone(), Arc::clone(broker), Arc::clone(&clock), epoch)?;
    let mut observer = broker.subscribe(&cfg.routing_key_out)?;

    let mut replayer = None;
    match &virtual_clock {
        Some(vc) => schedule_virtual(
            vc,
            Arc::clone(broker),
            &cfg.routing_key_in,
            &scenario.replay,
            &records,
            Duration::ZERO,
        )?,
        None => {
            replayer = Some(Replayer::spawn(
                Arc::clone(broker),
                &cfg.routing_key_in,
                scenario.replay.wall_period,
                records,
                Instant::now(),
            )?)
        }
    }

    bridge.initialize()?;
    let mut monitor = scenario.monitor.clone().map(MonitorUnit::new).transpose()?;
    let h = scenario.step_size;
    let mut drain = |trace: &mut RunTrace, wait: Duration| -> Result<(), RunError> {
        loop {
            let batch = observer.poll(1024, wait)?;
            if batch.is_empty() {
                return Ok(());
            }
            for env in batch {
                match env.decode() {
                    Ok(rec) => trace.outbound.push(rec),
                    Err(e) => warn!("undecodable outbound record: {e}"),
                }
            }
        }
    };

    let mut result = Ok(());
    for j in 0..scenario.n_steps {
        let t = SimTime::from_nanos(h.as_nanos() * j);

        // Exchange values captured at t.
        if let Some(m) = monitor.as_mut() {
            let names: Vec<String> = m.config().input_names().iter().map(|s| s.to_string()).collect();
            for name in names {
                if let Ok(v) = bridge.get_output(&name) {
                    m.set_input(&name, &v)?;
                }
            }
            for (name, value) in m.outputs() {
                let declared = cfg
                    .inputs()
                    .any(|v| v.name == name && v.kind == value.kind());
                if declared {
                    bridge.set_input(&name, value)?;
                }
            }
        }

        if let Some(m) = monitor.as_mut() {
            if let Some((distance, stop)) = m.do_step()? {
                trace.monitor.push(MonitorSample {
                    step: j + 1,
                    distance,
                    stop,
                });
            }
        }
        clock.spend(scenario.injected_delay);
        match bridge.do_step(t, h) {
            Ok(report) => trace.reports.push(report),
            Err(e @ BridgeError::StepTimeout { .. }) => {
                info!("step {} timed out: {e}", j + 1);
                trace.outcome = RunOutcome::TimedOut {
                    step: j + 1,
                    message: e.to_string(),
                };
                break;
            }
            Err(e) => {
                result = Err(e.into());
                break;
            }
        }
        if let Err(e) = drain(trace, Duration::ZERO) {
            result = Err(e);
            break;
        }
    }

    bridge.terminate();
    if let Some(r) = replayer {
        if let Err(e) = r.stop() {
            warn!("replayer: {e}");
        }
    }
    // Over a network broker the last outbound frames may still be in flight.
    let settle = if virtual_clock.is_some() {
        Duration::ZERO
    } else {
        Duration::from_millis(50)
    };
    if let Err(e) = drain(trace, settle) {
        warn!("collecting outbound records: {e}");
    }
    result
}

pub const TRACE_HEADER: [&str; 10] = [
    "step",
    "sim_time_ns",
    "wall_us",
    "consumed",
    "queue_exit",
    "out_seqno",
    "out_ts_ns",
    "held",
    "published",
    "dropped",
];

/// Microseconds with nanosecond precision, e.g. `1234.567`.
pub fn format_wall_us(d: Duration) -> String {
    let n = d.as_nanos();
    format!("{}.{:03}", n / 1_000, n % 1_000)
}

/// Writes one row per step under [`TRACE_HEADER`]. Absent outputs are
/// empty cells.
pub fn write_trace_csv<W: Write>(reports: &[StepReport], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(TRACE_HEADER)?;
    for r in reports {
        w.write_record([
            r.step_index.to_string(),
            r.sim_time_end.as_nanos().to_string(),
            format_wall_us(r.wall_duration),
            r.consumed.to_string(),
            r.queue_len_exit.to_string(),
            r.out_seqno.map(|s| s.to_string()).unwrap_or_default(),
            r.out_ts.map(|t| t.as_nanos().to_string()).unwrap_or_default(),
            r.held.to_string(),
            r.published.to_string(),
            r.dropped_so_far.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bridge::Policy;
    use crate::ingress::IngestMode;
    use crate::timebase::VariableDecl;

    fn ms(v: u64) -> Duration {
        Duration::from_millis(v)
    }

    fn gapless(policy: Policy, mode: IngestMode) -> Scenario {
        Scenario {
            step_size: ms(100),
            n_steps: 20,
            injected_delay: ms(100),
            clock_mode: ClockMode::Virtual,
            bridge: BridgeConfig {
                maxage: ms(2000),
                lookahead: 1,
                timeout: ms(1000),
                policy,
                ingest_mode: mode,
                variables: vec![VariableDecl::output("seq", ValueKind::Integer)],
                ..BridgeConfig::default()
            },
            replay: ReplaySchedule::synthetic(100, ms(100), ms(100)),
            monitor: None,
            seed: 1,
            epoch: None,
        }
    }

    #[test]
    fn gapless_runs_match_the_reference() {
        for policy in [Policy::V1Conservative, Policy::V2MoveToLatest] {
            for mode in [IngestMode::Threaded, IngestMode::Unthreaded] {
                let s = gapless(policy, mode);
                let trace = run(&s).unwrap();
                assert_eq!(trace.reports.len(), 20);
                let expected: Vec<_> = s.oracle().unwrap().iter().map(|o| o.out_seqno()).collect();
                let got: Vec<_> = trace.reports.iter().map(|r| r.out_seqno).collect();
                assert_eq!(got, expected, "{policy} {mode}");
            }
        }
    }

    #[test]
    fn empty_source_times_out() {
        let mut s = gapless(Policy::V2MoveToLatest, IngestMode::Unthreaded);
        s.replay.source = crate::scenario::ReplaySource::Inline(Vec::new());
        s.replay.count = None;
        let trace = run(&s).unwrap();
        assert!(trace.timed_out());
        assert!(trace.reports.is_empty());
    }

    #[test]
    fn percentiles_are_nearest_rank() {
        let v: Vec<u64> = (1..=100).collect();
        assert_eq!(percentile(&v, 50.0), 50);
        assert_eq!(percentile(&v, 99.0), 99);
        assert_eq!(percentile(&[7], 99.0), 7);
        assert_eq!(percentile(&[], 50.0), 0);
    }

    #[test]
    fn trace_csv_shape() {
        let s = gapless(Policy::V2MoveToLatest, IngestMode::Threaded);
        let trace = run(&s).unwrap();
        let mut buf = Vec::new();
        write_trace_csv(&trace.reports, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines.len(), 21);
        assert_eq!(
            lines[0],
            "step,sim_time_ns,wall_us,consumed,queue_exit,out_seqno,out_ts_ns,held,published,dropped"
        );
        assert_eq!(lines[1], "1,100000000,0.000,1,0,1,100000000,false,0,0");
    }

    #[test]
    fn virtual_with_external_broker_is_rejected() {
        let s = gapless(Policy::V2MoveToLatest, IngestMode::Threaded);
        let b: Arc<dyn BrokerHandle> = Arc::new(MemoryBroker::default());
        assert!(run_with(&s, Some(b)).is_err());
    }
}
