//! Parameter sweeps over a base scenario.

use std::io::Write;

use cosim_bridge::bridge::Policy;
use cosim_bridge::ingress::IngestMode;
use cosim_bridge::orchestrator::{RunOutcome, Scenario, Summary};
use cosim_bridge::timebase::Duration;

use crate::config::{ConfigError, GridSection};

pub const DEFAULT_GRID_CAP: usize = 256;

/// Axis order of the cross product, also the parameter column order of
/// `summary.csv`.
pub const PARAM_COLUMNS: [&str; 8] = [
    "maxage",
    "lookahead",
    "policy",
    "ingest_mode",
    "step_size",
    "injected_delay",
    "data_spacing",
    "wall_period",
];

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Param {
    Maxage(Duration),
    Lookahead(usize),
    Policy(Policy),
    IngestMode(IngestMode),
    StepSize(Duration),
    InjectedDelay(Duration),
    DataSpacing(Duration),
    WallPeriod(Duration),
}

impl Param {
    pub fn apply(self, s: &mut Scenario) {
        match self {
            Param::Maxage(d) => s.bridge.maxage = d,
            Param::Lookahead(n) => s.bridge.lookahead = n,
            Param::Policy(p) => s.bridge.policy = p,
            Param::IngestMode(m) => s.bridge.ingest_mode = m,
            Param::StepSize(d) => s.step_size = d,
            Param::InjectedDelay(d) => s.injected_delay = d,
            Param::DataSpacing(d) => s.replay.data_spacing = d,
            Param::WallPeriod(d) => s.replay.wall_period = d,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentGrid {
    pub base: Scenario,
    pub axes: Vec<Vec<Param>>,
    pub cap: usize,
}

#[derive(Debug, Clone)]
pub struct Cell {
    pub index: usize,
    pub scenario: Scenario,
}

impl Cell {
    pub fn name(&self) -> String {
        format!("cell-{:03}", self.index)
    }
}

fn durations(key: &str, values: &[String]) -> Result<Vec<Duration>, ConfigError> {
    values
        .iter()
        .map(|t| {
            t.parse::<Duration>().map_err(|e| ConfigError::Key {
                key: format!("grid.{key}"),
                message: format!("invalid duration {t:?}: {e}"),
            })
        })
        .collect()
}

impl ExperimentGrid {
    pub fn from_section(base: Scenario, g: &GridSection) -> Result<Self, ConfigError> {
        let mut axes = Vec::new();
        let mut push = |key: &str, values: Vec<Param>| -> Result<(), ConfigError> {
            if values.is_empty() {
                return Err(ConfigError::Key {
                    key: format!("grid.{key}"),
                    message: "empty value list".into(),
                });
            }
            axes.push(values);
            Ok(())
        };
        if let Some(v) = &g.maxage {
            push("maxage", durations("maxage", v)?.into_iter().map(Param::Maxage).collect())?;
        }
        if let Some(v) = &g.lookahead {
            let mut out = Vec::new();
            for &la in v {
                if la < 1 {
                    return Err(ConfigError::Key {
                        key: "grid.lookahead".into(),
                        message: format!("must be at least 1, got {la}"),
                    });
                }
                out.push(Param::Lookahead(la as usize));
            }
            push("lookahead", out)?;
        }
        if let Some(v) = &g.policy {
            push("policy", v.iter().copied().map(Param::Policy).collect())?;
        }
        if let Some(v) = &g.ingest_mode {
            push("ingest_mode", v.iter().copied().map(Param::IngestMode).collect())?;
        }
        if let Some(v) = &g.step_size {
            push("step_size", durations("step_size", v)?.into_iter().map(Param::StepSize).collect())?;
        }
        if let Some(v) = &g.injected_delay {
            push(
                "injected_delay",
                durations("injected_delay", v)?.into_iter().map(Param::InjectedDelay).collect(),
            )?;
        }
        if let Some(v) = &g.data_spacing {
            push(
                "data_spacing",
                durations("data_spacing", v)?.into_iter().map(Param::DataSpacing).collect(),
            )?;
        }
        if let Some(v) = &g.wall_period {
            push("wall_period", durations("wall_period", v)?.into_iter().map(Param::WallPeriod).collect())?;
        }
        Ok(ExperimentGrid {
            base,
            axes,
            cap: g.cap.unwrap_or(DEFAULT_GRID_CAP),
        })
    }

    pub fn len(&self) -> usize {
        self.axes.iter().map(Vec::len).product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Enumerates cells with the last axis varying fastest.
    pub fn cells(&self) -> Result<Vec<Cell>, ConfigError> {
        let n = self.len();
        if n > self.cap {
            return Err(ConfigError::Key {
                key: "grid.cap".into(),
                message: format!("grid has {n} cells, above the cap of {}", self.cap),
            });
        }
        let mut cells = Vec::with_capacity(n);
        for index in 0..n {
            let mut s = self.base.clone();
            let mut rest = index;
            for axis in self.axes.iter().rev() {
                axis[rest % axis.len()].apply(&mut s);
                rest /= axis.len();
            }
            s.validate().map_err(|e| ConfigError::Key {
                key: "grid".into(),
                message: format!("cell-{index:03}: {e}"),
            })?;
            cells.push(Cell { index, scenario: s });
        }
        Ok(cells)
    }
}

pub fn param_values(s: &Scenario) -> [String; 8] {
    [
        s.bridge.maxage.to_string(),
        s.bridge.lookahead.to_string(),
        s.bridge.policy.to_string(),
        match s.bridge.ingest_mode {
            IngestMode::Threaded => "threaded".to_string(),
            IngestMode::Unthreaded => "unthreaded".to_string(),
        },
        s.step_size.to_string(),
        s.injected_delay.to_string(),
        s.replay.data_spacing.to_string(),
        s.replay.wall_period.to_string(),
    ]
}

pub const SUMMARY_METRICS: [&str; 7] = [
    "steps",
    "outcome",
    "mean_wall_us",
    "max_wall_us",
    "p99_wall_us",
    "final_queue",
    "last_out_seqno",
];

pub struct SummaryRow<'a> {
    pub cell: &'a Cell,
    pub outcome: &'a RunOutcome,
    pub summary: &'a Summary,
}

pub fn write_summary_csv<W: Write>(rows: &[SummaryRow<'_>], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let header: Vec<&str> = std::iter::once("cell")
        .chain(PARAM_COLUMNS)
        .chain(SUMMARY_METRICS)
        .collect();
    w.write_record(&header)?;
    for r in rows {
        let s = r.summary;
        let mut rec: Vec<String> = vec![r.cell.name()];
        rec.extend(param_values(&r.cell.scenario));
        rec.push(s.steps.to_string());
        rec.push(
            match r.outcome {
                RunOutcome::Completed => "completed",
                RunOutcome::TimedOut { .. } => "timeout",
            }
            .to_string(),
        );
        rec.push(format!("{:.3}", s.mean_wall_us));
        rec.push(format!("{:.3}", s.max_wall_us));
        rec.push(format!("{:.3}", s.p99_wall_us));
        rec.push(s.final_queue_len.to_string());
        rec.push(s.last_out_seqno.map(|v| v.to_string()).unwrap_or_default());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::parse;

    const BASE: &str = r#"
step_size = "100ms"
n_steps = 5
[bridge]
variables = [{ name = "seq", kind = "integer", direction = "output" }]
[replay]
wall_period = "100ms"
count = 10
"#;

    fn grid(extra: &str) -> Result<ExperimentGrid, ConfigError> {
        let loaded = parse(&format!("{BASE}[grid]\n{extra}"), None)?;
        ExperimentGrid::from_section(loaded.scenario, loaded.grid.as_ref().unwrap())
    }

    #[test]
    fn cross_product_order() {
        let g = grid("maxage = [\"200ms\", \"2s\"]\nlookahead = [1, 2, 5]\n").unwrap();
        let cells = g.cells().unwrap();
        assert_eq!(cells.len(), 6);
        let got: Vec<_> = cells
            .iter()
            .map(|c| (c.scenario.bridge.maxage.as_nanos() / 1_000_000, c.scenario.bridge.lookahead))
            .collect();
        assert_eq!(got, vec![(200, 1), (200, 2), (200, 5), (2000, 1), (2000, 2), (2000, 5)]);
    }

    #[test]
    fn empty_grid_is_one_cell() {
        let g = grid("").unwrap();
        assert_eq!(g.cells().unwrap().len(), 1);
    }

    #[test]
    fn cap_is_enforced() {
        let g = grid("cap = 3\nlookahead = [1, 2]\npolicy = [\"v1\", \"v2\"]\n").unwrap();
        let e = g.cells().unwrap_err().to_string();
        assert!(e.starts_with("grid.cap:"), "{e}");
        let e = grid("lookahead = [0]\n").unwrap_err().to_string();
        assert!(e.starts_with("grid.lookahead:"), "{e}");
        let e = grid("wall_period = [\"5\"]\n").unwrap_err().to_string();
        assert!(e.starts_with("grid.wall_period:"), "{e}");
    }
}
