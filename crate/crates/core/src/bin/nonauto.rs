use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand};
use serde::Serialize;

use nonauto::scenario::{
    self, describe, lookup_check, RunError, RunOptions, BUNDLED, EXIT_INTERNAL, EXIT_INVALID_INPUT, EXIT_PASS,
};

/// Scenario runner for non-autonomous propagators.
///
/// Exit codes: 0 every check holds, 2 a check failed, 3 invalid input,
/// 4 internal error.
#[derive(Parser)]
#[command(name = "nonauto", version)]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true, env = "NONAUTO_THREADS")]
    threads: Option<usize>,
    /// Replace the scenario's propagation tolerance.
    #[arg(long, global = true)]
    tolerance_override: Option<f64>,
    /// Directory for reports; defaults to the scenario's `output_dir`, then
    /// `out/<scenario name>`.
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
    /// Replace the scenario's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario file (or a bundled scenario by name).
    Run { file: String },
    /// List the bundled scenarios.
    ListScenarios,
    /// Show the bound a check verifies.
    Describe { check: String },
    /// Write the kernel Gamma(t, s) of a scenario's model as CSV.
    ExportKernel {
        file: String,
        #[arg(long)]
        t: f64,
        #[arg(long)]
        s: f64,
    },
}

#[derive(Serialize)]
struct Metadata<'a> {
    scenario: &'a str,
    source: &'a str,
    version: &'a str,
    started_unix_seconds: f64,
    finished_unix_seconds: f64,
    elapsed_seconds: f64,
    runtime_budget_seconds: f64,
    within_budget: bool,
    threads: usize,
    exit_code: i32,
}

fn unix_now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

fn fail(e: RunError) -> i32 {
    eprintln!("error: {e}");
    e.exit_code()
}

fn options(cli: &Cli) -> RunOptions {
    RunOptions { tolerance_override: cli.tolerance_override, seed_override: cli.seed }
}

fn run(cli: &Cli, file: &str) -> i32 {
    let loaded = match scenario::load(file) {
        Ok(l) => l,
        Err(e) => return fail(e),
    };
    let started = unix_now();
    let clock = Instant::now();
    let out = match scenario::run(&loaded, &options(cli)) {
        Ok(o) => o,
        Err(e) => return fail(e),
    };
    let elapsed = clock.elapsed().as_secs_f64();
    let dir = cli
        .output_dir
        .clone()
        .or_else(|| loaded.scenario.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("out").join(&out.report.scenario));
    let code = out.exit_code();
    let meta = Metadata {
        scenario: &out.report.scenario,
        source: &loaded.source,
        version: env!("CARGO_PKG_VERSION"),
        started_unix_seconds: started,
        finished_unix_seconds: unix_now(),
        elapsed_seconds: elapsed,
        runtime_budget_seconds: loaded.scenario.runtime_budget_seconds,
        within_budget: elapsed <= loaded.scenario.runtime_budget_seconds,
        threads: rayon::current_num_threads(),
        exit_code: code,
    };
    let written = out.write(&dir).and_then(|_| {
        let json = serde_json::to_string_pretty(&meta)? + "\n";
        std::fs::write(dir.join("metadata.json"), json)?;
        Ok(())
    });
    if let Err(e) = written {
        eprintln!("error: writing {}: {e}", dir.display());
        return EXIT_INTERNAL;
    }
    print!("{}", out.summary());
    println!("reports written to {}", dir.display());
    code
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be positive");
            return ExitCode::from(EXIT_INVALID_INPUT as u8);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: thread pool: {e}");
            return ExitCode::from(EXIT_INTERNAL as u8);
        }
    }
    let code = match &cli.command {
        Command::Run { file } => run(&cli, file),
        Command::ListScenarios => {
            for (name, text) in BUNDLED {
                match scenario::parse(text, None, *name) {
                    Ok(l) => println!(
                        "{name:<24} {:<14} budget {:>4}s  {}",
                        l.scenario.model.kind(),
                        l.scenario.runtime_budget_seconds,
                        l.scenario.description
                    ),
                    Err(e) => println!("{name:<24} unreadable: {e}"),
                }
            }
            EXIT_PASS
        }
        Command::Describe { check } => match lookup_check(check) {
            Ok(info) => {
                print!("{}", describe(info));
                EXIT_PASS
            }
            Err(close) => {
                eprintln!("error: unknown check '{check}'; did you mean: {}?", close.join(", "));
                EXIT_INVALID_INPUT
            }
        },
        Command::ExportKernel { file, t, s } => {
            let loaded = match scenario::load(file) {
                Ok(l) => l,
                Err(e) => return ExitCode::from(fail(e) as u8),
            };
            let dir = cli
                .output_dir
                .clone()
                .or_else(|| loaded.scenario.output_dir.clone())
                .unwrap_or_else(|| PathBuf::from("out").join(&loaded.scenario.name));
            if let Err(e) = std::fs::create_dir_all(&dir) {
                eprintln!("error: {}: {e}", dir.display());
                return ExitCode::from(EXIT_INTERNAL as u8);
            }
            let target = dir.join(format!("kernel_t{t}_s{s}.csv"));
            match scenario::export_kernel(&loaded, &options(&cli), *t, *s, &target) {
                Ok(()) => {
                    println!("kernel written to {}", target.display());
                    EXIT_PASS
                }
                Err(e) => fail(e),
            }
        }
    };
    ExitCode::from(code as u8)
}
