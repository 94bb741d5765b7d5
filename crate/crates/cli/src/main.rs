//! `ctxflow`: validate scenarios, run them to a trace, and compare traces.
//!
//! Exit codes: 0 ok, 1 traces differ, 2 validation violations, 3 unreadable
//! or malformed input, 4 run did not finish (truncated or stalled), 64 bad
//! command line.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ctxflow_core::scenario::{CompileError, ScenarioError};
use ctxflow_core::trace::replay_verify;
use ctxflow_core::{run, RunStatus, Scenario, Trace};

const OK: u8 = 0;
const DIVERGED: u8 = 1;
const VIOLATIONS: u8 = 2;
const PARSE: u8 = 3;
const UNFINISHED: u8 = 4;
const USAGE: u8 = 64;

#[derive(Parser)]
#[command(
    name = "ctxflow",
    version,
    about = "Context-aware process execution simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check a scenario file and list every violation.
    Validate { file: PathBuf },
    /// Run a scenario and write its trace (stdout unless --trace-out).
    Run {
        file: PathBuf,
        #[arg(long, value_name = "F")]
        trace_out: Option<PathBuf>,
        /// Overrides the scenario seed.
        #[arg(long, value_name = "N")]
        seed: Option<u64>,
        /// Overrides the scenario step budget.
        #[arg(long, value_name = "N")]
        max_steps: Option<u64>,
    },
    /// Compare two traces byte for byte and report the first divergence.
    Replay { a: PathBuf, b: PathBuf },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { USAGE } else { OK });
        }
    };
    let code = match cli.command {
        Command::Validate { file } => validate(&file),
        Command::Run {
            file,
            trace_out,
            seed,
            max_steps,
        } => run_file(&file, trace_out.as_deref(), seed, max_steps),
        Command::Replay { a, b } => replay(&a, &b),
    };
    ExitCode::from(code)
}

fn load(path: &Path) -> Result<Scenario, u8> {
    Scenario::load(path).map_err(|e| parse_failure(path, &e))
}

fn parse_failure(path: &Path, e: &ScenarioError) -> u8 {
    eprintln!("{}: {e}", path.display());
    PARSE
}

fn validate(path: &Path) -> u8 {
    let scenario = match load(path) {
        Ok(s) => s,
        Err(code) => return code,
    };
    match scenario.validate() {
        Err(e) => parse_failure(path, &e),
        Ok(v) if v.is_empty() => {
            println!("{}: ok ({})", path.display(), scenario.name);
            OK
        }
        Ok(v) => {
            for violation in &v {
                println!("{violation}");
            }
            eprintln!("{}: {} violation(s)", path.display(), v.len());
            VIOLATIONS
        }
    }
}

fn run_file(
    path: &Path,
    trace_out: Option<&Path>,
    seed: Option<u64>,
    max_steps: Option<u64>,
) -> u8 {
    let mut scenario = match load(path) {
        Ok(s) => s,
        Err(code) => return code,
    };
    if let Some(seed) = seed {
        scenario.seed = seed;
    }
    if let Some(n) = max_steps {
        scenario.limits.max_steps = n;
    }
    let outcome = match run(&scenario) {
        Ok(o) => o,
        Err(CompileError::Parse(e)) => return parse_failure(path, &e),
        Err(CompileError::Invalid(v)) => {
            for violation in &v {
                println!("{violation}");
            }
            eprintln!("{}: {} violation(s)", path.display(), v.len());
            return VIOLATIONS;
        }
    };
    let text = outcome.trace().to_jsonl();
    let written = match trace_out {
        Some(out) => fs::write(out, &text).map_err(|e| format!("{}: {e}", out.display())),
        None => io::stdout()
            .lock()
            .write_all(text.as_bytes())
            .map_err(|e| e.to_string()),
    };
    if let Err(e) = written {
        eprintln!("cannot write trace: {e}");
        return PARSE;
    }
    eprintln!(
        "{}: {} after {} steps, final tick {}, {} trace records",
        scenario.name,
        serde_status(outcome.status),
        outcome.steps,
        outcome.final_tick,
        outcome.trace().len()
    );
    match outcome.status {
        RunStatus::Completed => OK,
        RunStatus::Truncated | RunStatus::Stalled => UNFINISHED,
    }
}

fn serde_status(s: RunStatus) -> &'static str {
    match s {
        RunStatus::Completed => "completed",
        RunStatus::Truncated => "truncated",
        RunStatus::Stalled => "stalled",
    }
}

fn replay(a: &Path, b: &Path) -> u8 {
    let mut texts = Vec::with_capacity(2);
    for path in [a, b] {
        let text = match fs::read_to_string(path) {
            Ok(t) => t,
            Err(e) => {
                eprintln!("cannot read {}: {e}", path.display());
                return PARSE;
            }
        };
        if let Err(e) = Trace::parse(&text) {
            eprintln!("{}: not a trace: {e}", path.display());
            return PARSE;
        }
        texts.push(text);
    }
    match replay_verify(&texts[0], &texts[1]) {
        Ok(()) => {
            println!("identical ({} bytes)", texts[0].len());
            OK
        }
        Err(d) => {
            println!("{d}");
            DIVERGED
        }
    }
}
