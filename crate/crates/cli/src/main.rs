use std::io::Write;
use std::path::PathBuf;

use clap::{Parser, Subcommand};
use cosim_bridge::clock::ClockMode;
use cosim_bridge_cli::commands::{self, Overrides, EXIT_OK, EXIT_USAGE};

#[derive(Parser)]
#[command(name = "cosim-bridge", version, about = "Bridge timestamped data streams into fixed-step co-simulation")]
struct Cli {
    /// TCP broker address, host:port.
    #[arg(long, global = true, value_name = "HOST:PORT")]
    broker: Option<String>,
    /// Clock mode, overriding the scenario file.
    #[arg(long, global = true, value_parser = parse_mode)]
    mode: Option<ClockMode>,
    /// Seed for generated data, overriding the scenario file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a TCP broker until interrupted.
    Serve {
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        #[arg(long, default_value_t = 5673)]
        port: u16,
    },
    /// Publish a scenario's replay data to a TCP broker.
    Replay { scenario: PathBuf },
    /// Run a scenario and write its per-step trace.
    Run {
        scenario: PathBuf,
        #[arg(long, value_name = "TRACE_CSV")]
        out: Option<PathBuf>,
    },
    /// Run every cell of a scenario's [grid] section.
    Experiment {
        scenario: PathBuf,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Print the reference per-step outputs, or compare them with a trace.
    Oracle {
        scenario: PathBuf,
        #[arg(long, value_name = "TRACE_CSV")]
        against: Option<PathBuf>,
    },
    /// Check a scenario for step/data rate mismatches.
    Lint { scenario: PathBuf },
}

fn parse_mode(s: &str) -> Result<ClockMode, String> {
    match s {
        "virtual" => Ok(ClockMode::Virtual),
        "wallclock" => Ok(ClockMode::Wallclock),
        _ => Err(format!("expected virtual or wallclock, got {s:?}")),
    }
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("COSIM_BRIDGE_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            std::process::exit(if e.use_stderr() { EXIT_USAGE } else { EXIT_OK });
        }
    };
    let o = Overrides {
        mode: cli.mode,
        seed: cli.seed,
        broker: cli.broker,
    };
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    let result = match &cli.command {
        Command::Serve { host, port } => commands::cmd_serve(host, *port, &mut out),
        Command::Replay { scenario } => commands::cmd_replay(scenario, &o, &mut out),
        Command::Run { scenario, out: trace } => commands::cmd_run(scenario, trace.as_deref(), &o, &mut out),
        Command::Experiment { scenario, out: dir } => commands::cmd_experiment(scenario, dir, &o, &mut out),
        Command::Oracle { scenario, against } => commands::cmd_oracle(scenario, against.as_deref(), &o, &mut out),
        Command::Lint { scenario } => commands::cmd_lint(scenario, &o, &mut out),
    };
    let _ = out.flush();
    let code = match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    };
    std::process::exit(code);
}
