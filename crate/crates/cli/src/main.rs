use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use g2flow_cli::{load_config, report, resume, run, verify, Outcome, RunConfig, RunError};

/// Laplacian flow of closed G2-structures on the flat 7-torus.
#[derive(Parser)]
#[command(
    version,
    about,
    after_help = "Threads: set G2FLOW_THREADS (default: all cores).\n\
Exit codes: 0 all checks pass, 1 a check failed, 2 configuration error, 3 runtime error."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the flow and every enabled check.
    Run {
        config: PathBuf,
        /// Write into this directory instead of `output.dir`.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Run only the checks that need no flow.
    Verify {
        config: PathBuf,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Continue a run from one of its snapshots.
    Resume {
        snapshot: PathBuf,
        config: PathBuf,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Summarise a run directory and redraw its plots.
    Report { run_dir: PathBuf },
}

fn config(path: &Path, output: Option<PathBuf>) -> Result<RunConfig, RunError> {
    let mut cfg = load_config(path)?;
    if let Some(dir) = output {
        cfg.output.dir = dir;
    }
    Ok(cfg)
}

fn threads() -> Result<(), String> {
    let Ok(v) = std::env::var("G2FLOW_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .map_err(|_| format!("G2FLOW_THREADS must be a positive integer, got {v:?}"))?;
    if n == 0 {
        return Err("G2FLOW_THREADS must be positive".into());
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| e.to_string())
}

fn print_outcome(o: &Outcome) {
    for c in &o.verification.checks {
        println!("[{}] {}", if c.passed { "pass" } else { "FAIL" }, c.name);
    }
    println!(
        "{} ({})",
        if o.exit_code == 0 {
            "all checks passed"
        } else {
            "checks failed"
        },
        o.dir.display()
    );
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = threads() {
        eprintln!("error: {e}");
        return ExitCode::from(2);
    }
    let result = match cli.command {
        Command::Run { config: c, output } => {
            config(&c, output).and_then(|cfg| run(&cfg)).map(|o| {
                print_outcome(&o);
                o.exit_code
            })
        }
        Command::Verify { config: c, output } => {
            config(&c, output).and_then(|cfg| verify(&cfg)).map(|o| {
                print_outcome(&o);
                o.exit_code
            })
        }
        Command::Resume {
            snapshot,
            config: c,
            output,
        } => config(&c, output)
            .and_then(|cfg| resume(&snapshot, &cfg))
            .map(|o| {
                print_outcome(&o);
                o.exit_code
            }),
        Command::Report { run_dir } => report::summarize(&run_dir).map(|(text, code)| {
            print!("{text}");
            code
        }),
    };
    match result {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!(
                "{}",
                serde_json::to_string(&e.record()).expect("plain json")
            );
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
