mod commands;
mod resolve;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use clip_decoder::trainer::EvalMode;

use resolve::parse_assignment;

/// Zero-shot multi-label classification experiments.
#[derive(Debug, Parser)]
#[command(name = "clip-decoder", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a seeded synthetic dataset and query bank.
    GenSynth(GenSynthArgs),
    /// Train a head on the seen classes of a dataset.
    Train(TrainArgs),
    /// Evaluate a checkpoint under a zero-shot protocol.
    Eval(EvalArgs),
    /// Rank the classes of one record.
    Predict(PredictArgs),
    /// Paired runs with and without the alignment loss over several seeds.
    Ablate(AblateArgs),
    /// List or render prompt templates.
    #[command(subcommand)]
    Prompts(PromptsCommand),
    /// Compare tape and finite-difference gradients of the full objective.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
struct GenSynthArgs {
    /// Output directory; created if missing.
    #[arg(long)]
    out: PathBuf,
    /// Generator seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Key=value file with generator settings.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one generator setting (repeatable), e.g. `--set classes=20`.
    #[arg(long = "set", value_name = "KEY=VALUE", value_parser = parse_assignment)]
    set: Vec<(String, String)>,
}

/// Training settings shared by `train` and `ablate`.
#[derive(Debug, Args)]
struct TrainSettings {
    /// Key=value file with training settings.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one training setting (repeatable), e.g. `--set alpha=0`.
    #[arg(long = "set", value_name = "KEY=VALUE", value_parser = parse_assignment)]
    set: Vec<(String, String)>,
    /// Number of passes over the training set.
    #[arg(long)]
    epochs: Option<usize>,
    /// Records per optimizer step.
    #[arg(long)]
    batch_size: Option<usize>,
    /// Adam step size.
    #[arg(long)]
    lr: Option<f64>,
}

impl TrainSettings {
    fn flags(&self, seed: Option<u64>) -> Vec<(&str, String)> {
        let mut out = Vec::new();
        for (k, v) in &self.set {
            out.push((k.as_str(), v.clone()));
        }
        if let Some(v) = self.epochs {
            out.push(("epochs", v.to_string()));
        }
        if let Some(v) = self.batch_size {
            out.push(("batch_size", v.to_string()));
        }
        if let Some(v) = self.lr {
            out.push(("learning_rate", v.to_string()));
        }
        if let Some(v) = seed {
            out.push(("seed", v.to_string()));
        }
        out
    }
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Training samples file (seen labels only).
    #[arg(long)]
    train: PathBuf,
    /// Query bank file.
    #[arg(long)]
    bank: PathBuf,
    /// Checkpoint output path.
    #[arg(long)]
    out: PathBuf,
    /// JSON-lines training log output path.
    #[arg(long)]
    log: Option<PathBuf>,
    /// Initialization and shuffling seed.
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    settings: TrainSettings,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Checkpoint written by `train`.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Test samples file.
    #[arg(long)]
    test: PathBuf,
    /// Query bank file covering every class.
    #[arg(long)]
    bank: PathBuf,
    /// Protocol: zsl, gzsl or seen.
    #[arg(long, default_value = "zsl")]
    mode: EvalMode,
    /// Seen-class score multiplier in gzsl mode (default: checkpoint value).
    #[arg(long)]
    gamma: Option<f64>,
    /// Comma-separated top-k cut-offs (default: checkpoint value).
    #[arg(long, value_delimiter = ',')]
    ks: Option<Vec<usize>>,
    /// MetricsReport JSON output path.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct PredictArgs {
    /// Checkpoint written by `train`.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Samples file holding the record.
    #[arg(long)]
    data: PathBuf,
    /// Query bank file.
    #[arg(long)]
    bank: PathBuf,
    /// Record index within the samples file.
    #[arg(long, default_value_t = 0)]
    index: usize,
    /// Number of ranked labels to print.
    #[arg(long, default_value_t = 5)]
    top: usize,
    /// Candidate classes: zsl (unseen), gzsl (all) or seen.
    #[arg(long, default_value = "gzsl")]
    mode: EvalMode,
    /// Seen-class score multiplier (default: checkpoint value).
    #[arg(long)]
    gamma: Option<f64>,
}

#[derive(Debug, Args)]
struct AblateArgs {
    /// Training samples file.
    #[arg(long)]
    train: PathBuf,
    /// Test samples file.
    #[arg(long)]
    test: PathBuf,
    /// Query bank file.
    #[arg(long)]
    bank: PathBuf,
    /// Comma-separated seeds; one paired run per seed.
    #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
    seeds: Vec<u64>,
    /// Protocol used to score both runs.
    #[arg(long, default_value = "zsl")]
    mode: EvalMode,
    /// JSON output path for all paired reports.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    settings: TrainSettings,
}

#[derive(Debug, Subcommand)]
enum PromptsCommand {
    /// Print every builtin template.
    List,
    /// Render a prompt from labels, or one prompt per class of a query bank.
    Render(RenderArgs),
}

#[derive(Debug, Args)]
struct RenderArgs {
    /// Builtin template id.
    #[arg(long, default_value = "photo")]
    template: String,
    /// Custom pattern containing `{labels}`; overrides --template.
    #[arg(long)]
    pattern: Option<String>,
    /// Render one single-label prompt per class of this query bank.
    #[arg(long, conflicts_with = "labels")]
    bank: Option<PathBuf>,
    /// Comma-separated labels to join into one prompt.
    #[arg(long, value_delimiter = ',', required_unless_present = "bank")]
    labels: Vec<String>,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    /// Number of random instances.
    #[arg(long, default_value_t = 10)]
    seeds: u64,
    /// Largest acceptable relative error.
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
