use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use fedtox::config::load_config;
use fedtox::pipeline::{self, PipelineError, Workspace};

#[derive(Parser)]
#[command(
    name = "fedtox",
    version,
    about = "Federated toxicity-moderation pipeline over decentralized conversation graphs"
)]
struct Cli {
    /// Config file; falls back to $FEDTOX_CONFIG, then ./fedtox.toml, then
    /// built-in defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run directory, overriding the config's out_dir.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multi-instance corpus with planted labels.
    Synth,
    /// Parse, validate, and filter the raw corpus.
    Ingest,
    /// Apply the threshold policy to produce conversation labels.
    Label,
    /// Build one participant-sharing graph per instance.
    Graph,
    /// Keep only statistically significant graph edges.
    Backbone,
    /// Embed conversations and assemble feature matrices.
    Features,
    /// Simulate federated training over the instance graphs.
    Train,
    /// Sweep one experiment axis across seeds.
    Grid {
        /// train-size | conv-length | clients-per-round | toxicity-threshold
        /// | ablation
        #[arg(long)]
        axis: String,
        /// Comma-separated axis values; each axis has defaults.
        #[arg(long)]
        values: Option<String>,
    },
    /// Run the few-shot LLM moderation baseline against an endpoint.
    LlmEval,
    /// Render the Markdown run summary.
    Report,
}

fn run(cli: Cli) -> Result<(), PipelineError> {
    let mut config = load_config(cli.config.as_deref())?;
    if let Some(out_dir) = cli.out_dir {
        config.out_dir = out_dir;
    }
    let ws = Workspace::new(config)?;
    match cli.command {
        Command::Synth => pipeline::stage_synth(&ws),
        Command::Ingest => pipeline::stage_ingest(&ws),
        Command::Label => pipeline::stage_label(&ws),
        Command::Graph => pipeline::stage_graph(&ws),
        Command::Backbone => pipeline::stage_backbone(&ws),
        Command::Features => pipeline::stage_features(&ws),
        Command::Train => pipeline::stage_train(&ws),
        Command::Grid { axis, values } => {
            pipeline::stage_grid(&ws, &axis, values.as_deref()).map(|_| ())
        }
        Command::LlmEval => pipeline::stage_llm_eval(&ws),
        Command::Report => pipeline::stage_report(&ws),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
