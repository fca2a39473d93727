//! Configuration lints for common step/data rate mismatches.

use std::fmt;

use cosim_bridge::orchestrator::Scenario;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LintRule {
    /// Step size differs from the publication period.
    StepRate,
    /// Lookahead far below the number of records arriving per step.
    Lookahead,
    /// maxage too short to hold an output across one missing record.
    GapCoverage,
}

impl LintRule {
    pub fn name(self) -> &'static str {
        match self {
            LintRule::StepRate => "step-rate",
            LintRule::Lookahead => "lookahead",
            LintRule::GapCoverage => "gap-coverage",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Warning {
    pub rule: LintRule,
    pub message: String,
}

impl fmt::Display for Warning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "warning[{}]: {}", self.rule.name(), self.message)
    }
}

pub fn validate_config(s: &Scenario) -> Vec<Warning> {
    let mut out = Vec::new();
    let step = s.step_size.as_nanos();
    let wall = s.replay.wall_period.as_nanos();
    let spacing = s.replay.data_spacing.as_nanos();

    if step != wall {
        out.push(Warning {
            rule: LintRule::StepRate,
            message: format!(
                "step_size {} differs from replay.wall_period {}; steps and data arrivals drift apart",
                s.step_size, s.replay.wall_period
            ),
        });
    }

    // la < step / (4 * wall), kept in integers.
    let la = s.bridge.lookahead as u128;
    if wall > 0 && la * 4 * (wall as u128) < step as u128 {
        let expected = (step as f64 / wall as f64).round() as u64;
        out.push(Warning {
            rule: LintRule::Lookahead,
            message: format!(
                "bridge.lookahead {} is far below the ~{} records expected per step; the output will fall behind the data",
                s.bridge.lookahead, expected
            ),
        });
    }

    if (s.bridge.maxage.as_nanos() as u128) < 2 * spacing as u128 {
        out.push(Warning {
            rule: LintRule::GapCoverage,
            message: format!(
                "bridge.maxage {} is below twice replay.data_spacing ({}); a single missing record exhausts it",
                s.bridge.maxage, s.replay.data_spacing
            ),
        });
    }
    out
}
