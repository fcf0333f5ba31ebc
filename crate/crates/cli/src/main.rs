use std::io::{BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mode_cli::config::ExperimentConfig;
use mode_cli::error::{CliError, Result};
use mode_cli::{pipeline, report, stream};
use mode_core::layer::param_count;

#[derive(Parser)]
#[command(name = "mode-ctta", version, about = "Continual test-time adaptation with mixture-of-domain low-rank experts")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the source model, run initialization and write checkpoints.
    Init {
        #[arg(short, long)]
        config: PathBuf,
    },
    /// Adapt initialized checkpoints over the configured stream.
    Adapt {
        #[arg(short, long)]
        config: PathBuf,
        /// Init checkpoint to use instead of the default location (single seed only).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Summarize metrics files (summary JSON or metrics CSV).
    Report {
        #[arg(required = true, num_args = 1..=2)]
        files: Vec<PathBuf>,
        /// Print per-cell differences of the second file against the first.
        #[arg(long)]
        compare: bool,
    },
    /// Write a stream as JSON Lines.
    ScenarioGen {
        #[arg(short, long)]
        config: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(short, long)]
        out: PathBuf,
        /// Dump the labeled evaluation split instead of the adaptation stream.
        #[arg(long)]
        eval: bool,
    },
    /// Count MoDE parameters over a staged backbone.
    ParamCount {
        #[arg(long, value_delimiter = ',', required = true)]
        dims: Vec<usize>,
        #[arg(long, value_delimiter = ',', required = true)]
        blocks: Vec<usize>,
        #[arg(long, value_delimiter = ',', required = true)]
        ranks: Vec<usize>,
        #[arg(long)]
        experts: usize,
        #[arg(long, default_value_t = 4)]
        domains: usize,
    },
}

fn run(cli: Cli) -> Result<()> {
    let mut out = std::io::stdout().lock();
    let io = |e: std::io::Error| CliError::Data(e.to_string());
    match cli.command {
        Command::Init { config } => {
            let cfg = ExperimentConfig::load(&config)?;
            for (seed, count) in pipeline::cmd_init(&cfg)? {
                writeln!(out, "seed {seed}: param_count {count}").map_err(io)?;
                writeln!(out, "  checkpoint {}", pipeline::init_checkpoint_path(&cfg, seed).display()).map_err(io)?;
            }
        }
        Command::Adapt { config, checkpoint } => {
            let cfg = ExperimentConfig::load(&config)?;
            let runs = pipeline::cmd_adapt(&cfg, checkpoint.as_deref())?;
            for r in &runs {
                let delta = r.delta.map_or("-".to_string(), |d| format!("{d:.4}"));
                writeln!(out, "{}: round-{} mean {:.4}, delta {}", r.run_id, r.a.len(), r.mean[r.a.len() - 1], delta)
                    .map_err(io)?;
            }
            writeln!(out, "metrics {}", pipeline::metrics_path(&cfg).display()).map_err(io)?;
        }
        Command::Report { files, compare } => {
            let first = report::load_runs(&files[0])?;
            let text = match (compare, files.get(1)) {
                (true, Some(second)) => report::render_compare(&first, &report::load_runs(second)?)?,
                (true, None) => return Err(CliError::Config("--compare needs two files".into())),
                (false, None) => report::render_table(&first),
                (false, Some(_)) => return Err(CliError::Config("two files need --compare".into())),
            };
            out.write_all(text.as_bytes()).map_err(io)?;
        }
        Command::ScenarioGen { config, seed, out: path, eval } => {
            let cfg = ExperimentConfig::load(&config)?;
            let sc = pipeline::scenario(&cfg, seed)?;
            let s = if eval { sc.eval_stream() } else { sc.stream() };
            let names: Vec<String> = cfg.target_domains.iter().map(|d| d.name.clone()).collect();
            if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
            }
            let file = std::fs::File::create(&path).map_err(|e| CliError::io(&path, e))?;
            let mut w = BufWriter::new(file);
            stream::write_stream(&mut w, &s, &names)?;
            w.flush().map_err(|e| CliError::io(&path, e))?;
            writeln!(out, "{} records -> {}", s.records.len(), path.display()).map_err(io)?;
        }
        Command::ParamCount { dims, blocks, ranks, experts, domains } => {
            let n = param_count(&dims, &ranks, &blocks, experts, domains)?;
            writeln!(out, "{n}").map_err(io)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
