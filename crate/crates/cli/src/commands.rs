use std::fs::File;
use std::io::{BufWriter, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use cosim_bridge::clock::ClockMode;
use cosim_bridge::orchestrator::{run_with, write_trace_csv, RunError, RunOutcome, RunTrace, Scenario, Summary};
use cosim_bridge::scenario::{OracleStep, ReplayError, Replayer};
use cosim_bridge::transport::tcp::{TcpBroker, TcpBrokerClient};
use cosim_bridge::transport::{BrokerConfig, BrokerHandle, TransportError};
use log::info;

use crate::config::{self, ConfigError};
use crate::grid::{write_summary_csv, ExperimentGrid, SummaryRow};
use crate::lint::validate_config;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_ENVIRONMENT: i32 = 2;
pub const EXIT_TIMEOUT: i32 = 3;
/// `oracle --against` found a difference.
pub const EXIT_MISMATCH: i32 = 4;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Environment(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(ConfigError::Read { .. }) => EXIT_ENVIRONMENT,
            CliError::Config(_) | CliError::Usage(_) | CliError::Data(_) => EXIT_USAGE,
            CliError::Environment(_) => EXIT_ENVIRONMENT,
        }
    }
}

fn io_err(what: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Environment(format!("{}: {e}", what.display()))
}

fn replay_err(e: ReplayError) -> CliError {
    match e {
        ReplayError::Io { .. } | ReplayError::Transport(_) => CliError::Environment(e.to_string()),
        _ => CliError::Data(e.to_string()),
    }
}

fn run_err(e: RunError) -> CliError {
    match e {
        RunError::Replay(r) => replay_err(r),
        RunError::Transport(_) => CliError::Environment(e.to_string()),
        RunError::Invalid(_) | RunError::Bridge(_) | RunError::Monitor(_) => CliError::Data(e.to_string()),
    }
}

/// Overrides shared by the scenario-driven commands.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub mode: Option<ClockMode>,
    pub seed: Option<u64>,
    pub broker: Option<String>,
}

impl Overrides {
    fn apply(&self, s: &mut Scenario) {
        if let Some(m) = self.mode {
            s.clock_mode = m;
        }
        if let Some(seed) = self.seed {
            s.seed = seed;
        }
    }
}

pub fn load_scenario(path: &Path, o: &Overrides) -> Result<(Scenario, Option<config::GridSection>), CliError> {
    let loaded = config::load(path)?;
    let mut s = loaded.scenario;
    o.apply(&mut s);
    Ok((s, loaded.grid))
}

fn connect(addr: &str) -> Result<TcpBrokerClient, CliError> {
    TcpBrokerClient::connect(addr).map_err(|e| CliError::Environment(format!("connecting to broker {addr}: {e}")))
}

/// Binds the broker and serves until the process is interrupted.
pub fn cmd_serve(host: &str, port: u16, out: &mut dyn Write) -> Result<i32, CliError> {
    let broker = TcpBroker::bind((host, port), BrokerConfig::default())
        .map_err(|e| CliError::Environment(format!("binding {host}:{port}: {e}")))?;
    let addr: SocketAddr = broker
        .local_addr()
        .map_err(|e| CliError::Environment(e.to_string()))?;
    writeln!(out, "listening on {addr}").and_then(|_| out.flush()).ok();
    broker
        .serve()
        .map_err(|e| CliError::Environment(format!("serving on {addr}: {e}")))?;
    Ok(EXIT_OK)
}

/// Publishes the scenario's replay data to a TCP broker on the wall clock.
pub fn cmd_replay(path: &Path, o: &Overrides, out: &mut dyn Write) -> Result<i32, CliError> {
    if o.mode == Some(ClockMode::Virtual) {
        return Err(CliError::Usage(
            "replay publishes over TCP on the wall clock; --mode virtual is not available".into(),
        ));
    }
    let addr = o
        .broker
        .as_deref()
        .ok_or_else(|| CliError::Usage("replay needs --broker host:port".into()))?;
    let (s, _) = load_scenario(path, o)?;
    let outputs: Vec<_> = s.bridge.outputs().cloned().collect();
    let data = s
        .replay
        .materialize(&outputs, s.seed, s.epoch)
        .map_err(replay_err)?;
    let client = connect(addr)?;
    let n = data.records.len();
    info!("replaying {n} records every {}", s.replay.wall_period);
    let replayer = Replayer::spawn(
        Arc::new(client),
        &s.bridge.routing_key_in,
        s.replay.wall_period,
        data.records,
        Instant::now(),
    )
    .map_err(replay_err)?;
    let sent = replayer.join().map_err(replay_err)?;
    writeln!(out, "published {sent} records to {addr} on {}", s.bridge.routing_key_in).ok();
    Ok(EXIT_OK)
}

pub fn write_summary(out: &mut dyn Write, outcome: &RunOutcome, s: &Summary) -> std::io::Result<()> {
    match outcome {
        RunOutcome::Completed => writeln!(out, "outcome: completed")?,
        RunOutcome::TimedOut { step, message } => writeln!(out, "outcome: timeout at step {step}: {message}")?,
    }
    writeln!(out, "steps: {}", s.steps)?;
    writeln!(out, "mean_wall_us: {:.3}", s.mean_wall_us)?;
    writeln!(out, "p50_wall_us: {:.3}", s.p50_wall_us)?;
    writeln!(out, "p99_wall_us: {:.3}", s.p99_wall_us)?;
    writeln!(out, "max_wall_us: {:.3}", s.max_wall_us)?;
    writeln!(out, "consumed: {}", s.total_consumed)?;
    writeln!(out, "published: {}", s.total_published)?;
    writeln!(out, "final_queue: {}", s.final_queue_len)?;
    writeln!(out, "dropped: {}", s.final_dropped)?;
    match s.last_out_seqno {
        Some(v) => writeln!(out, "last_out_seqno: {v}"),
        None => writeln!(out, "last_out_seqno: none"),
    }
}

fn write_trace_file(path: &Path, trace: &RunTrace) -> Result<(), CliError> {
    let f = File::create(path).map_err(|e| io_err(path, e))?;
    write_trace_csv(&trace.reports, BufWriter::new(f)).map_err(|e| io_err(path, e))
}

/// Runs a scenario once. Returns the trace even when the run aborted, so
/// partial rows are still written.
fn execute(s: &Scenario, o: &Overrides) -> Result<(RunTrace, Option<CliError>), CliError> {
    let broker: Option<Arc<dyn BrokerHandle>> = match &o.broker {
        Some(addr) => {
            if s.clock_mode == ClockMode::Virtual {
                return Err(CliError::Usage(
                    "--broker needs --mode wallclock; virtual runs use an in-process broker".into(),
                ));
            }
            Some(Arc::new(connect(addr)?))
        }
        None => None,
    };
    match run_with(s, broker) {
        Ok(trace) => Ok((trace, None)),
        Err(f) => Ok((*f.trace, Some(run_err(f.error)))),
    }
}

pub fn cmd_run(path: &Path, trace_out: Option<&Path>, o: &Overrides, out: &mut dyn Write) -> Result<i32, CliError> {
    let (s, grid) = load_scenario(path, o)?;
    if grid.is_some() {
        return Err(CliError::Usage("this file has a [grid] section; use `experiment`".into()));
    }
    for w in validate_config(&s) {
        eprintln!("{w}");
    }
    let (trace, failure) = execute(&s, o)?;
    if let Some(p) = trace_out {
        write_trace_file(p, &trace)?;
    }
    if let Some(e) = failure {
        return Err(e);
    }
    write_summary(out, &trace.outcome, &trace.summary).map_err(|e| CliError::Environment(e.to_string()))?;
    Ok(if trace.timed_out() { EXIT_TIMEOUT } else { EXIT_OK })
}

pub fn cmd_experiment(path: &Path, dir: &Path, o: &Overrides, out: &mut dyn Write) -> Result<i32, CliError> {
    let (s, grid) = load_scenario(path, o)?;
    let grid = ExperimentGrid::from_section(s, &grid.unwrap_or_default())?;
    let cells = grid.cells()?;
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let mut traces = Vec::with_capacity(cells.len());
    for cell in &cells {
        let (trace, failure) = execute(&cell.scenario, o)?;
        let file: PathBuf = dir.join(format!("{}.csv", cell.name()));
        write_trace_file(&file, &trace)?;
        if let Some(e) = failure {
            return Err(CliError::Data(format!("{}: {e}", cell.name())));
        }
        writeln!(
            out,
            "{}: {} steps, mean {:.3} us, last out_seqno {}",
            cell.name(),
            trace.summary.steps,
            trace.summary.mean_wall_us,
            trace.summary.last_out_seqno.map_or("none".to_string(), |v| v.to_string())
        )
        .ok();
        traces.push(trace);
    }
    let rows: Vec<SummaryRow<'_>> = cells
        .iter()
        .zip(&traces)
        .map(|(cell, t)| SummaryRow {
            cell,
            outcome: &t.outcome,
            summary: &t.summary,
        })
        .collect();
    let summary = dir.join("summary.csv");
    let f = File::create(&summary).map_err(|e| io_err(&summary, e))?;
    write_summary_csv(&rows, BufWriter::new(f)).map_err(|e| io_err(&summary, e))?;
    Ok(EXIT_OK)
}

/// One oracle row in the projection shared with trace files.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExpectedRow {
    pub step: u64,
    pub out_seqno: Option<u64>,
    pub out_ts_ns: Option<u64>,
    pub held: bool,
    pub consumed: usize,
}

/// Expected rows plus whether the oracle times out after them.
pub fn expected_rows(steps: &[OracleStep]) -> (Vec<ExpectedRow>, bool) {
    let mut rows = Vec::new();
    for (i, st) in steps.iter().enumerate() {
        let step = i as u64 + 1;
        let row = match *st {
            OracleStep::Advanced { seqno, time, consumed } => ExpectedRow {
                step,
                out_seqno: Some(seqno),
                out_ts_ns: Some(time.as_nanos()),
                held: false,
                consumed,
            },
            OracleStep::Held { seqno, time } => ExpectedRow {
                step,
                out_seqno: Some(seqno),
                out_ts_ns: Some(time.as_nanos()),
                held: true,
                consumed: 0,
            },
            OracleStep::Starved { current } => ExpectedRow {
                step,
                out_seqno: current.map(|c| c.0),
                out_ts_ns: current.map(|c| c.1.as_nanos()),
                held: false,
                consumed: 0,
            },
            OracleStep::Timeout => return (rows, true),
        };
        rows.push(row);
    }
    (rows, false)
}

fn opt(v: Option<u64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn read_trace_rows(path: &Path) -> Result<Vec<ExpectedRow>, CliError> {
    let mut r = csv::Reader::from_path(path).map_err(|e| io_err(path, e))?;
    let bad = |line: usize, what: &str| CliError::Data(format!("{}: line {line}: bad {what}", path.display()));
    let mut rows = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        let field = |idx: usize| rec.get(idx).unwrap_or("");
        let num = |idx: usize, what: &str| -> Result<Option<u64>, CliError> {
            match field(idx) {
                "" => Ok(None),
                t => t.parse().map(Some).map_err(|_| bad(line, what)),
            }
        };
        rows.push(ExpectedRow {
            step: num(0, "step")?.ok_or_else(|| bad(line, "step"))?,
            consumed: num(3, "consumed")?.ok_or_else(|| bad(line, "consumed"))? as usize,
            out_seqno: num(5, "out_seqno")?,
            out_ts_ns: num(6, "out_ts_ns")?,
            held: match field(7) {
                "true" => true,
                "false" => false,
                _ => return Err(bad(line, "held")),
            },
        });
    }
    Ok(rows)
}

/// Prints the oracle's expectation, or compares it with a trace file.
pub fn cmd_oracle(path: &Path, against: Option<&Path>, o: &Overrides, out: &mut dyn Write) -> Result<i32, CliError> {
    let (s, _) = load_scenario(path, o)?;
    let steps = s.oracle().map_err(run_err)?;
    let (rows, timeout) = expected_rows(&steps);
    let Some(trace) = against else {
        let mut w = csv::Writer::from_writer(out);
        let werr = |e: csv::Error| CliError::Environment(e.to_string());
        w.write_record(["step", "out_seqno", "out_ts_ns", "held", "consumed"]).map_err(werr)?;
        for r in &rows {
            w.write_record([
                r.step.to_string(),
                opt(r.out_seqno),
                opt(r.out_ts_ns),
                r.held.to_string(),
                r.consumed.to_string(),
            ])
            .map_err(werr)?;
        }
        if timeout {
            w.write_record([(rows.len() + 1).to_string(), "timeout".into(), String::new(), String::new(), String::new()])
                .map_err(werr)?;
        }
        w.flush().map_err(|e| CliError::Environment(e.to_string()))?;
        return Ok(EXIT_OK);
    };
    let got = read_trace_rows(trace)?;
    let mut diffs = 0;
    for (e, g) in rows.iter().zip(&got) {
        if e != g {
            diffs += 1;
            writeln!(out, "step {}: expected {e:?}, trace has {g:?}", e.step).ok();
        }
    }
    if got.len() != rows.len() {
        diffs += 1;
        writeln!(
            out,
            "expected {} rows{}, trace has {}",
            rows.len(),
            if timeout { " then a timeout" } else { "" },
            got.len()
        )
        .ok();
    }
    if diffs == 0 {
        writeln!(out, "trace matches the oracle ({} steps)", rows.len()).ok();
        Ok(EXIT_OK)
    } else {
        Ok(EXIT_MISMATCH)
    }
}

pub fn cmd_lint(path: &Path, o: &Overrides, out: &mut dyn Write) -> Result<i32, CliError> {
    let (s, _) = load_scenario(path, o)?;
    let warnings = validate_config(&s);
    if warnings.is_empty() {
        writeln!(out, "no warnings").ok();
    }
    for w in warnings {
        writeln!(out, "{w}").ok();
    }
    Ok(EXIT_OK)
}

impl From<TransportError> for CliError {
    fn from(e: TransportError) -> Self {
        CliError::Environment(e.to_string())
    }
}
