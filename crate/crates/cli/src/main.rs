//! `medna`: batch runner for training, evaluation, attribution and perturbation.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// Environment variable naming the default output directory.
pub const OUT_DIR_ENV: &str = "MEDNA_OUT_DIR";

#[derive(Parser, Debug)]
#[command(name = "medna", version, about = "Dual-view DNA methylation classifier with contrastive attribution")]
struct Cli {
    /// Output directory (default: $MEDNA_OUT_DIR, else ./medna-out).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a planted-motif dataset.
    Synth(SynthArgs),
    /// Train a model and write a checkpoint.
    Train(TrainArgs),
    /// Score a split and write metrics and predictions.
    Eval(EvalArgs),
    /// Attention-based motif effect sizes.
    Cad(CadArgs),
    /// Effect-size weighted token attributions.
    Cwga(CwgaArgs),
    /// In-silico mutagenesis of positives.
    Mutate(MutateArgs),
    /// Cross-dataset transfer matrix.
    Transfer(TransferArgs),
    /// Export per-sample representations at a network stage.
    Embed(EmbedArgs),
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum Split {
    Train,
    Test,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum Dtype {
    F32,
    F64,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// JSON dataset spec; missing fields take defaults.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Dataset directory with train and test files.
    #[arg(long)]
    data: PathBuf,
    /// JSON file `{ "model": {...}, "train": {...} }`.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    flood_level: Option<f64>,
    #[arg(long)]
    fgm_epsilon: Option<f64>,
    /// Disable the adversarial pass.
    #[arg(long)]
    no_adversarial: bool,
    /// Warm up each encoder on a linear probe first.
    #[arg(long)]
    fine_tune_init: bool,
    #[arg(long, value_enum, default_value_t = Dtype::F64)]
    dtype: Dtype,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value_t = Split::Test)]
    split: Split,
    /// Fail unless the checkpoint was built from this config's model section.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum ViewArg {
    Kmer,
    Bpe,
}

#[derive(Args, Debug)]
pub struct CadArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value_t = ViewArg::Kmer)]
    view: ViewArg,
    #[arg(long, default_value_t = 0.9)]
    threshold: f64,
    #[arg(long, value_enum, default_value_t = Split::Test)]
    split: Split,
    /// Group by token and offset instead of token alone.
    #[arg(long)]
    positional: bool,
    /// Average repeated occurrences within a sequence.
    #[arg(long)]
    per_sequence: bool,
    /// Export windows around the top N motifs to motifs.fasta.
    #[arg(long, default_value_t = 0)]
    fasta_top: usize,
    #[arg(long, default_value_t = 5)]
    flank: usize,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum BaselineArg {
    Zero,
    Pad,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum RouteArg {
    Fused,
    PerDimension,
}

#[derive(Args, Debug)]
pub struct CwgaArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 100)]
    n_samples: usize,
    #[arg(long, default_value_t = 40)]
    top_dims: usize,
    #[arg(long, default_value_t = 64)]
    ig_steps: usize,
    #[arg(long, default_value_t = 0.9)]
    threshold: f64,
    #[arg(long, value_enum, default_value_t = BaselineArg::Zero)]
    baseline: BaselineArg,
    #[arg(long, value_enum, default_value_t = RouteArg::Fused)]
    route: RouteArg,
    #[arg(long)]
    positional: bool,
    #[arg(long, value_enum, default_value_t = Split::Test)]
    split: Split,
    /// Export windows around the top N tokens of each view to cwga_<view>.fasta.
    #[arg(long, default_value_t = 0)]
    fasta_top: usize,
    #[arg(long, default_value_t = 5)]
    flank: usize,
}

#[derive(Args, Debug)]
pub struct MutateArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// JSON rules: a list of rules (one condition each) or a list of `{name, rules}` sets.
    /// Defaults to the core-motif and A-tract knockouts.
    #[arg(long)]
    rules: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Split::Test)]
    split: Split,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum MetricArg {
    Acc,
    Auc,
}

#[derive(Args, Debug)]
pub struct TransferArgs {
    /// Checkpoints, one per dataset, in matching order.
    #[arg(long, value_delimiter = ',', required = true)]
    ckpts: Vec<PathBuf>,
    #[arg(long, value_delimiter = ',', required = true)]
    datasets: Vec<PathBuf>,
    #[arg(long, value_enum, default_value_t = MetricArg::Acc)]
    metric: MetricArg,
    #[arg(long, value_enum, default_value_t = Split::Test)]
    split: Split,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum StageArg {
    Raw,
    PostEncoder,
    PostFilm,
    PostMoe,
}

#[derive(Args, Debug)]
pub struct EmbedArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum)]
    stage: StageArg,
    #[arg(long, value_enum, default_value_t = Split::Test)]
    split: Split,
}

fn out_dir(flag: Option<PathBuf>) -> PathBuf {
    flag.or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("medna-out"))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            eprintln!("error: --jobs must be at least 1");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    let out = out_dir(cli.out);
    let result = std::fs::create_dir_all(&out)
        .map_err(anyhow::Error::from)
        .and_then(|_| commands::run(cli.command, &out));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
