mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Instruction-aware embedding and reranking recipe at desk scale.
#[derive(Debug, Parser)]
#[command(name = "qembed", version)]
pub struct Cli {
    /// Worker thread cap; 1 runs everything serially.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic query/passage pairs from a corpus.
    Synth(SynthArgs),
    /// Keep pairs whose query/positive cosine is above the threshold.
    Filter(FilterArgs),
    /// Append nearest-neighbour hard negatives from a corpus.
    Mine(MineArgs),
    /// Train the embedding model (weak stage, then supervised stage).
    TrainEmbed(TrainEmbedArgs),
    /// Fine-tune the yes/no reranker on labeled pairs.
    TrainRerank(TrainRerankArgs),
    /// Slerp-merge two or more checkpoints.
    Merge(MergeArgs),
    /// Evaluate retrieval, optionally followed by reranking.
    Eval(EvalArgs),
    /// Train and evaluate every ablation setting.
    Ablate(AblateArgs),
    /// Write the generated toy benchmark and its training data.
    GenToybench(GenToybenchArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Synth(_) => "synth",
            Command::Filter(_) => "filter",
            Command::Mine(_) => "mine",
            Command::TrainEmbed(_) => "train-embed",
            Command::TrainRerank(_) => "train-rerank",
            Command::Merge(_) => "merge",
            Command::Eval(_) => "eval",
            Command::Ablate(_) => "ablate",
            Command::GenToybench(_) => "gen-toybench",
        }
    }
}

#[derive(Debug, Args)]
pub struct ConfigArg {
    /// Run configuration (JSON); defaults are used when omitted.
    #[arg(long, short)]
    config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[command(flatten)]
    cfg: ConfigArg,
    /// Passages, one JSON object with a "text" field per line.
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Persona library, one {"id", "description"} object per line.
    #[arg(long)]
    personas: Option<PathBuf>,
    /// Output pair file.
    #[arg(long)]
    out: PathBuf,
    /// Also write the stage-one configuration chosen for every passage.
    #[arg(long)]
    configs_out: Option<PathBuf>,
    /// Encoder checkpoint used for persona selection (else the seeded init).
    #[arg(long)]
    model: Option<PathBuf>,
    /// HTTP generator endpoint; the offline mock is used when omitted.
    #[arg(long)]
    remote_endpoint: Option<String>,
    /// Per-request timeout for the remote generator.
    #[arg(long, default_value_t = 60)]
    timeout_secs: u64,
}

#[derive(Debug, Args)]
pub struct FilterArgs {
    #[command(flatten)]
    cfg: ConfigArg,
    /// Input pair file.
    #[arg(long = "in")]
    input: PathBuf,
    /// Output pair file.
    #[arg(long)]
    out: PathBuf,
    /// Overrides filter.threshold.
    #[arg(long, allow_negative_numbers = true)]
    threshold: Option<f64>,
    /// Scoring encoder checkpoint (else the seeded init).
    #[arg(long)]
    model: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct MineArgs {
    #[command(flatten)]
    cfg: ConfigArg,
    /// Input pair file.
    #[arg(long = "in")]
    input: PathBuf,
    /// Candidate texts, one JSON object with a "text" field per line.
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Negatives to add per record; overrides mine_k.
    #[arg(long)]
    k: Option<usize>,
    /// Output pair file.
    #[arg(long)]
    out: PathBuf,
    /// Mining encoder checkpoint (else the seeded init).
    #[arg(long)]
    model: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainEmbedArgs {
    #[command(flatten)]
    cfg: ConfigArg,
    /// Weak-supervision (synthetic) pair file.
    #[arg(long)]
    stage1: Option<PathBuf>,
    /// Supervised pair file.
    #[arg(long)]
    stage2: Option<PathBuf>,
    /// Skip the weak-supervision stage.
    #[arg(long)]
    skip_stage1: bool,
    /// Start from this encoder checkpoint instead of the seeded init.
    #[arg(long)]
    init: Option<PathBuf>,
    /// Directory for the checkpoint series.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainRerankArgs {
    #[command(flatten)]
    cfg: ConfigArg,
    /// Labeled pair file; positives become "yes", negatives "no".
    #[arg(long)]
    data: PathBuf,
    /// Encoder checkpoint the reranker starts from (else the seeded init).
    #[arg(long)]
    encoder: Option<PathBuf>,
    /// Directory for the checkpoint series.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct MergeArgs {
    #[command(flatten)]
    cfg: ConfigArg,
    /// Checkpoints to merge, in order (at least two).
    #[arg(long, num_args = 1.., required = true)]
    inputs: Vec<PathBuf>,
    /// Output checkpoint.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    cfg: ConfigArg,
    /// Embedding checkpoint.
    #[arg(long)]
    model: PathBuf,
    /// Directory with queries.jsonl, corpus.jsonl and qrels.jsonl.
    #[arg(long)]
    task_dir: Option<PathBuf>,
    /// Report file (JSON).
    #[arg(long)]
    out: PathBuf,
    /// Reranker checkpoint applied to the retrieved candidates.
    #[arg(long)]
    rerank: Option<PathBuf>,
    /// Candidates retrieved before reranking; overrides eval.k_retrieve.
    #[arg(long)]
    topk: Option<usize>,
    /// Metric cutoff; overrides eval.k_metric.
    #[arg(long)]
    k: Option<usize>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    cfg: ConfigArg,
    /// Synthetic (stage-one) and labeled (stage-two) pair files.
    #[arg(long, num_args = 2, value_names = ["STAGE1", "STAGE2"])]
    data: Vec<PathBuf>,
    /// Directory with the evaluation task.
    #[arg(long)]
    task_dir: Option<PathBuf>,
    /// Comma-separated subset of full,no_merge,no_synthetic,only_synthetic.
    #[arg(long, value_delimiter = ',')]
    settings: Vec<String>,
    /// Directory for one report and one model per setting.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GenToybenchArgs {
    /// Generator settings (JSON); defaults when omitted.
    #[arg(long)]
    toy_config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out_dir: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("qembed: error: {msg}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
