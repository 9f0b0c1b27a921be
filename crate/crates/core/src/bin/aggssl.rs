use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use aggssl::aggregator::{replay_selection, write_trace_csv, ReplayTables};
use aggssl::error::{Error, Result};
use aggssl::harness::{emit_report, run_config, run_experiment, ExperimentConfig, RunManifest, OUTPUT_ROOT_ENV};

#[derive(Parser)]
#[command(name = "aggssl", version, about = "Similarity-guided aggregation of self-supervised proxy tasks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a config file.
    Run { config: PathBuf },
    /// Replay the greedy selection over a recorded table and print the trace.
    Replay {
        fixture: PathBuf,
        /// Also write trace.csv and a manifest into this directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print a summary table of a run manifest.
    Report { manifest: PathBuf },
    /// Check every file listed in a manifest against its hash.
    Verify { manifest: PathBuf },
}

fn output_root() -> Option<PathBuf> {
    std::env::var_os(OUTPUT_ROOT_ENV).filter(|v| !v.is_empty()).map(PathBuf::from)
}

fn manifest_base(path: &Path) -> &Path {
    path.parent().unwrap_or(Path::new("."))
}

fn replay(fixture: &Path, out: Option<&Path>) -> Result<()> {
    let state = match out {
        Some(dir) => {
            let fixture = std::fs::canonicalize(fixture).map_err(|e| Error::io(fixture, e))?;
            let text = format!(
                "[experiment]\nkind = \"replay\"\noutput_dir = {:?}\nfixture = {:?}\n",
                dir.display().to_string(),
                fixture.display().to_string()
            );
            let cfg = ExperimentConfig::parse(&text)?;
            let dir = cfg.output_dir(output_root().as_deref());
            run_config(&cfg, &text, Path::new("."), &dir)?;
            log::info!("wrote {}", dir.display());
            replay_selection(&ReplayTables::load(&fixture)?)?
        }
        None => replay_selection(&ReplayTables::load(fixture)?)?,
    };
    write_trace_csv(&state.trace, std::io::stdout().lock())?;
    println!("# selected pool: {}", state.pool_a.join(", "));
    println!("# best acc: {}", state.best_acc);
    Ok(())
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Run { config } => {
            let m = run_experiment(&config, output_root().as_deref())?;
            println!("{} run finished, {} files, {} metrics", m.kind, m.files.len(), m.metrics.len());
            Ok(())
        }
        Command::Replay { fixture, out } => replay(&fixture, out.as_deref()),
        Command::Report { manifest } => {
            let m = RunManifest::load(&manifest)?;
            print!("{}", emit_report(&m, manifest_base(&manifest)));
            Ok(())
        }
        Command::Verify { manifest } => {
            let m = RunManifest::load(&manifest)?;
            let base = manifest_base(&manifest);
            for (path, status) in m.check_files(base) {
                println!("{path}: {}", status.label());
            }
            m.verify(base)?;
            println!("ok");
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}
