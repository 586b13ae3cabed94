mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use speechemb_core::retrieval::Method;
use speechemb_core::train::Ablation;

/// Speech-text embedding toolkit.
#[derive(Parser, Debug)]
#[command(name = "speechemb", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic corpus.
    GenData {
        #[arg(long)]
        docs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run VAD, quality and duration filters over a corpus.
    Filter {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Filter report path; defaults to `<out>.report.json`.
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 3.0)]
        quality_threshold: f64,
        #[arg(long, default_value_t = 0.0)]
        energy_threshold: f64,
        #[arg(long, default_value_t = 1.5)]
        iqr_multiplier: f64,
    },
    /// Train checkpoints.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = StageArg::All)]
        stage: StageArg,
        #[arg(long, value_enum, default_value_t = AblateArg::None)]
        ablate: AblateArg,
    },
    /// Evaluate one method on the held-out queries.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, value_enum)]
        method: MethodArg,
        #[arg(long)]
        wer: Option<f64>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Also write the document index for this method.
        #[arg(long)]
        save_index: Option<PathBuf>,
    },
    /// Time every method.
    Bench {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, value_parser = parse_repeats)]
        repeats: Option<usize>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_repeats(s: &str) -> Result<usize, String> {
    let r: usize = s.parse().map_err(|e| format!("{e}"))?;
    if r < speechemb_core::retrieval::MIN_REPEATS {
        return Err(format!("repeats must be >= {}", speechemb_core::retrieval::MIN_REPEATS));
    }
    Ok(r)
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum StageArg {
    Pre,
    Fine,
    All,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
#[value(rename_all = "snake_case")]
enum AblateArg {
    None,
    Only1,
    Only2,
}

impl From<AblateArg> for Ablation {
    fn from(a: AblateArg) -> Self {
        match a {
            AblateArg::None => Ablation::None,
            AblateArg::Only1 => Ablation::Only1,
            AblateArg::Only2 => Ablation::Only2,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
#[value(rename_all = "snake_case")]
enum MethodArg {
    Ours,
    AsrPipeline,
    TextOnly,
    ProjectToText,
    CtcAlign,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Ours => Method::Ours,
            MethodArg::AsrPipeline => Method::AsrPipeline,
            MethodArg::TextOnly => Method::TextOnly,
            MethodArg::ProjectToText => Method::ProjectToText,
            MethodArg::CtcAlign => Method::CtcAlign,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData { docs, seed, config, out } => commands::gen_data(config.as_deref(), docs, seed, &out),
        Command::Filter {
            corpus,
            out,
            report,
            config,
            quality_threshold,
            energy_threshold,
            iqr_multiplier,
        } => commands::filter(
            &corpus,
            &out,
            report.as_deref(),
            config.as_deref(),
            quality_threshold,
            energy_threshold,
            iqr_multiplier,
        ),
        Command::Train { config, corpus, out, stage, ablate } => {
            let stage = match stage {
                StageArg::Pre => commands::Stage::Pre,
                StageArg::Fine => commands::Stage::Fine,
                StageArg::All => commands::Stage::All,
            };
            commands::train(config.as_deref(), &corpus, &out, stage, ablate.into())
        }
        Command::Eval { checkpoint, corpus, method, wer, config, out, save_index } => commands::eval(
            &checkpoint,
            &corpus,
            method.into(),
            wer,
            config.as_deref(),
            &out,
            save_index.as_deref(),
        ),
        Command::Bench { checkpoint, corpus, repeats, config, out } => {
            commands::bench(&checkpoint, &corpus, repeats, config.as_deref(), out.as_deref())
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
