mod commands;
mod picture;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgGroup, Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use wordalign::{Error, ErrorClass};

/// Word alignment with contextual embeddings and adapter fine-tuning.
#[derive(Debug, Parser)]
#[command(name = "wordalign", version)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Align every pair of a corpus and write Pharaoh lines.
    Extract(ExtractArgs),
    /// Fine-tune the adapters of a model on a corpus.
    Train(TrainArgs),
    /// Score predicted alignments against gold ones.
    Eval(EvalArgs),
    /// Layer sweep, representation analysis and similarity heatmaps.
    Analyze(AnalyzeArgs),
    /// Write a randomly initialized model (for experiments and tests).
    Init(InitArgs),
}

#[derive(Debug, Args)]
#[group(skip)]
pub struct Common {
    /// key=value file supplying defaults for any long flag of this command.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Output directory, created if missing.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Worker threads over sentence pairs (0 = all cores).
    #[arg(long, default_value_t = 0)]
    pub workers: usize,
}

#[derive(Debug, Args)]
#[group(skip)]
pub struct Source {
    /// Encoder weights (ACWT container).
    #[arg(long, value_name = "FILE")]
    pub model: Option<PathBuf>,
    /// Adapter weights replacing those stored in --model.
    #[arg(long, value_name = "FILE", requires = "model")]
    pub adapters: Option<PathBuf>,
    /// Precomputed per-layer embeddings (ACWT container).
    #[arg(long, value_name = "FILE")]
    pub embeddings: Option<PathBuf>,
}

#[derive(Debug, Args)]
#[group(skip)]
#[command(group(ArgGroup::new("source").required(true).args(["model", "embeddings"])))]
pub struct ExtractArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub source: Source,
    /// Corpus in JSONL.
    #[arg(long, value_name = "FILE")]
    pub corpus: PathBuf,
    /// Layer to align at (0 = embeddings). Defaults to the model's extraction layer, or 6.
    #[arg(long)]
    pub layer: Option<usize>,
    /// Probability threshold.
    #[arg(long, default_value_t = wordalign::DEFAULT_THRESHOLD)]
    pub threshold: f32,
    /// Skip malformed or unalignable records (written as empty lines) instead of failing.
    #[arg(long)]
    pub skip_bad: bool,
}

#[derive(Debug, Args)]
#[group(skip)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    /// Encoder weights (ACWT container).
    #[arg(long, value_name = "FILE")]
    pub model: PathBuf,
    /// Adapter weights to start from instead of the fresh initialization.
    #[arg(long, value_name = "FILE")]
    pub adapters: Option<PathBuf>,
    /// Training corpus in JSONL.
    #[arg(long, value_name = "FILE")]
    pub corpus: PathBuf,
    /// Validation corpus in JSONL (with gold).
    #[arg(long, value_name = "FILE")]
    pub valid: Option<PathBuf>,
    /// supervised or self_supervised.
    #[arg(long, default_value = "supervised")]
    pub mode: wordalign::trainer::TrainMode,
    /// Seed for the adapter initialization and batch order.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Layer the objective is applied at. Defaults to the model's extraction layer.
    #[arg(long)]
    pub layer: Option<usize>,
    /// Threshold for pseudo-labels and validation alignments.
    #[arg(long, default_value_t = wordalign::DEFAULT_THRESHOLD)]
    pub threshold: f32,
    /// AdamW learning rate.
    #[arg(long, default_value_t = 1e-4)]
    pub lr: f64,
    /// Sentence pairs per optimizer step.
    #[arg(long, default_value_t = 40)]
    pub batch_size: usize,
    /// Number of optimizer steps.
    #[arg(long, default_value_t = 1500)]
    pub steps: usize,
    /// Validate every N steps.
    #[arg(long, value_name = "N", requires = "valid")]
    pub validate_every: Option<usize>,
    /// Keep the adapters with the lowest validation AER.
    #[arg(long, requires = "valid")]
    pub keep_best: bool,
    /// Skip malformed corpus records instead of failing.
    #[arg(long)]
    pub skip_bad: bool,
}

#[derive(Debug, Args)]
#[group(skip)]
#[command(group(ArgGroup::new("reference").required(true).args(["gold", "corpus"])))]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    /// Predicted alignments (Pharaoh, 0-based).
    #[arg(long, value_name = "FILE")]
    pub pred: PathBuf,
    /// Gold alignments (Pharaoh).
    #[arg(long, value_name = "FILE")]
    pub gold: Option<PathBuf>,
    /// Corpus whose records carry the gold alignments.
    #[arg(long, value_name = "FILE")]
    pub corpus: Option<PathBuf>,
    /// Index base of the --gold file (0 or 1).
    #[arg(long, default_value_t = 0, value_parser = clap::value_parser!(u8).range(0..=1))]
    pub gold_index_base: u8,
}

#[derive(Debug, Args)]
#[group(skip)]
#[command(group(ArgGroup::new("source").required(true).args(["model", "embeddings"])))]
pub struct AnalyzeArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub source: Source,
    /// Corpus in JSONL with gold alignments.
    #[arg(long, value_name = "FILE")]
    pub corpus: PathBuf,
    /// Layer for the heatmaps. Defaults to the model's extraction layer, or 6.
    #[arg(long)]
    pub layer: Option<usize>,
    /// Probability threshold for the layer sweep.
    #[arg(long, default_value_t = wordalign::DEFAULT_THRESHOLD)]
    pub threshold: f32,
    /// Seed for the sentence permutations.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Write similarity heatmaps for the first N pairs.
    #[arg(long, value_name = "N", default_value_t = 0)]
    pub heatmaps: usize,
}

#[derive(Debug, Args)]
#[group(skip)]
pub struct InitArgs {
    #[command(flatten)]
    pub common: Common,
    /// Seed for the random weights.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Transformer layers.
    #[arg(long, default_value_t = 2)]
    pub layers: usize,
    /// Hidden size.
    #[arg(long, default_value_t = 16)]
    pub hidden: usize,
    /// Attention heads; must divide --hidden.
    #[arg(long, default_value_t = 2)]
    pub heads: usize,
    /// Feed-forward inner size.
    #[arg(long, default_value_t = 32)]
    pub ffn: usize,
    /// Adapter bottleneck size, below --hidden.
    #[arg(long, default_value_t = 4)]
    pub adapter_dim: usize,
    /// Vocabulary size. Ids 1 and 2 become the boundary tokens when it exceeds 2.
    #[arg(long, default_value_t = 32)]
    pub vocab: usize,
    /// Longest input sequence, boundary tokens included.
    #[arg(long, default_value_t = 64)]
    pub max_positions: usize,
    /// Extraction layer stored in the model. Defaults to the last layer.
    #[arg(long)]
    pub extract_layer: Option<usize>,
}

fn exit_code(class: ErrorClass) -> u8 {
    match class {
        ErrorClass::Usage => 2,
        ErrorClass::Data => 3,
        ErrorClass::Format => 4,
        ErrorClass::Numeric => 5,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let argv: Vec<_> = std::env::args_os().collect();
    let matches = match settings::parse(Cli::command(), argv) {
        Ok(m) => m,
        Err(settings::ParseError::Clap(e)) => e.exit(),
        Err(settings::ParseError::Core(e)) => return fail(&e),
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    match commands::run(cli, &matches) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(&e),
    }
}

fn fail(e: &Error) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(exit_code(e.class()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_flag_is_documented() {
        let cmd = Cli::command();
        cmd.clone().debug_assert();
        for sub in cmd.get_subcommands() {
            for arg in sub.get_arguments() {
                if arg.get_long().is_some() {
                    assert!(arg.get_help().is_some(), "{} --{}", sub.get_name(), arg.get_id());
                }
            }
        }
    }
}
