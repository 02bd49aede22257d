mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mammo_core::enhance::EnhancementKind;
use mammo_core::models::ModelKind;

use config::RunConfig;

#[derive(Parser)]
#[command(name = "mammo", version, about = "Synthetic mammography classification, attribution and ensembling")]
struct Cli {
    /// TOML run configuration; unknown keys are rejected.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct DataArg {
    /// Dataset directory written by `gen-data`; regenerated from the config
    /// when omitted.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset: images plus manifest.csv.
    GenData {
        #[arg(long)]
        out: PathBuf,
        /// Images per class.
        #[arg(long)]
        per_class: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Apply one enhancement to an image or a directory of images.
    Enhance {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_parser = parse_enhancement)]
        kind: EnhancementKind,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one model on one enhancement.
    Train {
        #[arg(long, value_parser = parse_model)]
        model: ModelKind,
        #[arg(long = "enhance", value_parser = parse_enhancement, default_value = "original")]
        enhancement: EnhancementKind,
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train every model on every enhancement and write the comparison report.
    Grid {
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated subset of models.
        #[arg(long, value_delimiter = ',', value_parser = parse_model)]
        models: Option<Vec<ModelKind>>,
        /// Comma-separated subset of enhancements.
        #[arg(long, value_delimiter = ',', value_parser = parse_enhancement)]
        enhancements: Option<Vec<EnhancementKind>>,
    },
    /// Attribution maps and overlays for one image.
    Explain {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// `all` or a comma-separated list of methods.
        #[arg(long, default_value = "all")]
        methods: String,
        /// Class to explain; defaults to the config's target class.
        #[arg(long)]
        target: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the tiered ensemble over a directory of images.
    Ensemble {
        /// Images, either flat or under benign/ and malignant/.
        #[arg(long)]
        input: PathBuf,
        /// Directory holding `<model>_<enhancement>.ckpt` files.
        #[arg(long)]
        checkpoints: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Re-render the grid report from a saved grid.json.
    Report {
        #[arg(long)]
        grid: PathBuf,
        /// Defaults to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_model(s: &str) -> Result<ModelKind, String> {
    s.parse()
}

fn parse_enhancement(s: &str) -> Result<EnhancementKind, String> {
    s.parse().map_err(|e: mammo_core::enhance::EnhanceError| e.to_string())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let cfg = RunConfig::load(cli.config.as_deref())?;
    match cli.command {
        Command::GenData { out, per_class, seed } => commands::gen_data(cfg, &out, per_class, seed),
        Command::Enhance { input, kind, out } => commands::enhance(&cfg, &input, kind, &out),
        Command::Train {
            model,
            enhancement,
            data,
            out,
        } => commands::train(&cfg, model, enhancement, data.data.as_deref(), &out),
        Command::Grid {
            data,
            out,
            models,
            enhancements,
        } => commands::grid(&cfg, data.data.as_deref(), &out, models, enhancements),
        Command::Explain {
            checkpoint,
            image,
            methods,
            target,
            out,
        } => commands::explain(cfg, &checkpoint, &image, &methods, target, &out),
        Command::Ensemble {
            input,
            checkpoints,
            out,
        } => commands::ensemble(&cfg, &input, &checkpoints, &out),
        Command::Report { grid, out } => commands::report(&grid, out.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            // sources are often already embedded in the message above them
            let mut msg = String::new();
            for cause in e.chain().map(|c| c.to_string()) {
                if !msg.contains(&cause) {
                    if !msg.is_empty() {
                        msg.push_str(": ");
                    }
                    msg.push_str(&cause);
                }
            }
            eprintln!("error: {msg}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
