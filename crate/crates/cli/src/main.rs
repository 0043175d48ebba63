use std::io::{BufReader, Write};
use std::net::SocketAddr;
use std::path::PathBuf;

use anyhow::Context;
use clap::{Parser, Subcommand};
use ghostline_cli::bench::{run_bench, BenchConfig, DEFAULT_LENGTHS};
use ghostline_cli::config::ServiceConfig;
use ghostline_cli::dataset::{gen_dataset, read_dataset, write_dataset, DatasetCounts};
use ghostline_cli::eval::eval_pipeline;
use ghostline_cli::runtime::replay;
use ghostline_cli::score::score_lines;
use ghostline_core::model::fixture::write_fixture;
use ghostline_core::model::{ModelConfig, ReferenceModel};
use ghostline_core::orchestrator::Engine;

#[derive(Parser)]
#[command(name = "ghostline", version, about = "Predictive-text engine with KV reuse and tiered memory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Throughput, TTFC and KV-size profile across context lengths.
    Bench {
        #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_LENGTHS)]
        lengths: Vec<usize>,
        #[arg(long, default_value_t = 3)]
        repetitions: usize,
        /// Use the small test model instead of the benchmark shape.
        #[arg(long)]
        tiny: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Line-delimited plot data.
        #[arg(long)]
        plot: Option<PathBuf>,
    },
    /// Writes the synthetic evaluation dataset.
    GenDataset {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 343)]
        trigger: usize,
        #[arg(long, default_value_t = 100)]
        trigger_negative: usize,
        #[arg(long, default_value_t = 169)]
        normal: usize,
        #[arg(long, default_value_t = 122)]
        refusal: usize,
    },
    /// Memory-pipeline report on the template backend.
    Eval {
        /// Dataset directory; generated from `--seed` when absent.
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write the report as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Scores `{"class", "output"}` lines from a file or stdin.
    Score { input: Option<PathBuf> },
    /// Runs the local protocol server.
    Serve {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides the file and the GHOSTLINE_BIND variable.
        #[arg(long)]
        bind: Option<SocketAddr>,
    },
    /// Replays a recorded transcript against a fresh engine.
    Replay {
        transcript: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Writes the tiny reference model's weights as a text fixture.
    Fixture {
        #[arg(long, default_value_t = 7)]
        weight_seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> anyhow::Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()))
        .with_writer(std::io::stderr)
        .init();
    match Cli::parse().command {
        Command::Bench { lengths, repetitions, tiny, seed, plot } => {
            let mut config = BenchConfig { lengths, repetitions, seed, ..BenchConfig::default() };
            if tiny {
                config.model = ModelConfig::tiny_with_controls(7);
            }
            let report = run_bench(&config)?;
            println!("{report}");
            if let Some(p) = plot {
                report
                    .write_plot_data(std::fs::File::create(&p).with_context(|| format!("creating {}", p.display()))?)?;
            }
        }
        Command::GenDataset { seed, out, trigger, trigger_negative, normal, refusal } => {
            let ds = gen_dataset(seed, DatasetCounts { trigger, trigger_negative, normal, refusal });
            write_dataset(&ds, &out)?;
            println!("wrote {} cases to {}", ds.case_count(), out.display());
        }
        Command::Eval { dataset, seed, json } => {
            let ds = match dataset {
                Some(dir) => read_dataset(&dir)?,
                None => gen_dataset(seed, DatasetCounts::default()),
            };
            let report = eval_pipeline(&ds)?;
            println!("{report}");
            if let Some(p) = json {
                std::fs::write(&p, serde_json::to_string_pretty(&report)? + "\n")?;
            }
        }
        Command::Score { input } => {
            let stdout = std::io::stdout().lock();
            match input {
                Some(p) => score_lines(BufReader::new(std::fs::File::open(&p)?), stdout)?,
                None => score_lines(std::io::stdin().lock(), stdout)?,
            };
        }
        Command::Serve { config, bind } => {
            let config = ServiceConfig::resolve(config.as_deref(), bind)?;
            tokio::runtime::Runtime::new()?.block_on(ghostline_cli::server::serve(config))?;
        }
        Command::Replay { transcript, config } => {
            let config = ServiceConfig::resolve(config.as_deref(), None)?;
            let mut engine = Engine::new(config.engine_config()?)?;
            let text = std::fs::read_to_string(&transcript)?;
            let mut out = std::io::stdout().lock();
            for env in replay(&mut engine, &text) {
                writeln!(out, "{}", serde_json::to_string(&env)?)?;
            }
        }
        Command::Fixture { weight_seed, out } => {
            let model = ReferenceModel::new(ModelConfig::tiny(weight_seed))?;
            std::fs::write(&out, write_fixture(&model)?)?;
        }
    }
    Ok(())
}
