//! `steervec`: experiment recipes for language steering on toy and loaded
//! models. Exit codes: 0 on success, 1 on usage errors, 2 on runtime errors.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, Parser, Subcommand};
use serde::Serialize;
use steervec::steering::{SteeringConfig, SteeringMode};

#[derive(Debug, Parser)]
#[command(
    name = "steervec",
    version,
    about = "Language steering vectors: build, steer, train and evaluate"
)]
pub struct Cli {
    /// Worker threads for parallel sections.
    #[arg(long, global = true, env = "STEERVEC_THREADS")]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic multi-parallel token corpus and its generator spec.
    GenSynth(GenSynthArgs),
    /// Train the toy transformer on a token corpus.
    Pretrain(PretrainArgs),
    /// Build a language vector bank from a model and a parallel corpus.
    BuildVectors(BuildVectorsArgs),
    /// Add one language to an existing bank.
    AddLang(AddLangArgs),
    /// Generate once from a prompt with steering applied.
    Steer(SteerArgs),
    /// Train the low-rank learned steering parameters.
    TrainSteer(TrainSteerArgs),
    /// Evaluate pass rates over held-out prompts.
    Eval(EvalArgs),
    /// Steering-only evaluation over a sweep of strengths.
    SteerOnlyEval(SteerOnlyEvalArgs),
    /// Leave-one-layer-out ablation table.
    Ablate(EvalArgs),
    /// Average-linkage clustering of language representations.
    Cluster(ClusterArgs),
    /// Build probe masks and shifts for the LSI baseline.
    LsiBuild(LsiBuildArgs),
    /// Per-cell differences between two evaluation reports.
    ReportDiff(ReportDiffArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct GenSynthArgs {
    /// Corpus output (JSONL).
    #[arg(long)]
    pub out: PathBuf,
    /// Generator spec output; defaults to `<out>.synth.json`.
    #[arg(long)]
    pub spec_out: Option<PathBuf>,
    #[arg(long, default_value_t = 6)]
    pub languages: usize,
    #[arg(long, default_value_t = 2)]
    pub families: usize,
    #[arg(long, default_value_t = 32)]
    pub alphabet: u32,
    #[arg(long, default_value_t = 2000)]
    pub samples: usize,
    #[arg(long, default_value_t = 8)]
    pub min_len: usize,
    #[arg(long, default_value_t = 16)]
    pub max_len: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args, Serialize)]
pub struct CorpusArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, default_value = "jsonl", value_parser = ["jsonl", "tsv"])]
    pub format: String,
}

#[derive(Debug, Args, Serialize)]
pub struct PretrainArgs {
    #[command(flatten)]
    pub corpus: CorpusArgs,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 64)]
    pub d_model: usize,
    #[arg(long, default_value_t = 4)]
    pub n_layers: usize,
    #[arg(long, default_value_t = 4)]
    pub heads: usize,
    #[arg(long, default_value_t = 64)]
    pub max_seq_len: usize,
    #[arg(long, default_value_t = 2)]
    pub epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 32)]
    pub batch: usize,
    #[arg(long, default_value_t = 0.0)]
    pub weight_decay: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args, Serialize)]
pub struct BuildVectorsArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub corpus: CorpusArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct AddLangArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub bank: PathBuf,
    /// Corpus holding the new language.
    #[command(flatten)]
    pub corpus: CorpusArgs,
    #[arg(long)]
    pub lang: String,
    #[arg(long)]
    pub out: PathBuf,
}

/// Steering flags, named after the configuration fields.
#[derive(Debug, Clone, Args, Serialize)]
pub struct SteeringArgs {
    /// mono | cross | steer-only
    #[arg(long, value_parser = parse_mode)]
    pub mode: Option<SteeringMode>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub norm_restore: bool,
    /// Comma-separated 1-based layers, `all` or `none`.
    #[arg(long)]
    pub layers: Option<String>,
    /// Also steer the first position.
    #[arg(long)]
    pub include_first_token: bool,
}

fn parse_mode(s: &str) -> Result<SteeringMode, String> {
    s.parse().map_err(|e: steervec::Error| e.to_string())
}

impl SteeringArgs {
    pub fn config(&self, default_mode: SteeringMode) -> anyhow::Result<SteeringConfig> {
        let mut c = SteeringConfig {
            mode: self.mode.unwrap_or(default_mode),
            norm_restore: self.norm_restore,
            exclude_first_token: !self.include_first_token,
            ..Default::default()
        };
        if let Some(a) = self.alpha {
            c.alpha = a;
        }
        if let Some(b) = self.beta {
            c.beta = b;
        }
        c.active_layers = match self.layers.as_deref() {
            None | Some("all") => None,
            Some("none") | Some("") => Some(Default::default()),
            Some(list) => Some(
                list.split(',')
                    .map(|s| s.trim().parse::<usize>())
                    .collect::<Result<_, _>>()
                    .map_err(|e| anyhow::anyhow!("--layers: {e}"))?,
            ),
        };
        Ok(c)
    }
}

/// Where steering directions come from. At most one of `--bank` (unless
/// combined with `--learned`) and `--lsi`.
#[derive(Debug, Clone, Args, Serialize)]
pub struct ArtifactArgs {
    #[arg(long)]
    pub bank: Option<PathBuf>,
    /// Learned parameters; requires `--bank`.
    #[arg(long, requires = "bank")]
    pub learned: Option<PathBuf>,
    #[arg(long, conflicts_with_all = ["bank", "learned"])]
    pub lsi: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct SteerArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub artifact: ArtifactArgs,
    #[command(flatten)]
    pub steering: SteeringArgs,
    #[arg(long)]
    pub target: String,
    #[arg(long)]
    pub source: Option<String>,
    /// Prompt token ids, comma-separated.
    #[arg(long, value_delimiter = ',', required = true)]
    pub prompt: Vec<u32>,
    #[arg(long, default_value_t = 16)]
    pub max_new: usize,
    /// Also write the generation as JSON.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainSteerArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub bank: PathBuf,
    #[command(flatten)]
    pub corpus: CorpusArgs,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub steering: SteeringArgs,
    #[arg(long, default_value_t = 500)]
    pub items: usize,
    #[arg(long, default_value_t = 0.5)]
    pub mono_fraction: f64,
    /// Languages excluded from training, comma-separated.
    #[arg(long, value_delimiter = ',')]
    pub deny: Vec<String>,
    #[arg(long, default_value_t = 1)]
    pub epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.2)]
    pub dropout: f64,
    #[arg(long, default_value_t = 32)]
    pub rank: usize,
    #[arg(long, default_value_t = 8)]
    pub batch: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Loss curve (JSONL); defaults to `<out>.loss.jsonl`.
    #[arg(long)]
    pub loss_log: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct PromptArgs {
    /// Synthetic generator spec written by `gen-synth`.
    #[arg(long)]
    pub synth: Option<PathBuf>,
    /// Prompts as JSONL `{"source", "target", "tokens"}` records.
    #[arg(long, conflicts_with = "synth")]
    pub prompts: Option<PathBuf>,
    /// `all` or comma-separated `source:target` pairs.
    #[arg(long, default_value = "all")]
    pub pairs: String,
    /// Prompts per pair.
    #[arg(long, default_value_t = 200)]
    pub n: usize,
    #[arg(long, default_value_t = 8)]
    pub prompt_len: usize,
    #[arg(long, default_value_t = 8)]
    pub max_new: usize,
    /// Selects the held-out prompt stream.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub artifact: ArtifactArgs,
    #[command(flatten)]
    pub steering: SteeringArgs,
    #[command(flatten)]
    pub prompts: PromptArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct SteerOnlyEvalArgs {
    #[command(flatten)]
    pub eval: EvalArgs,
    #[arg(long, value_delimiter = ',', default_value = "0.5,1,2,4")]
    pub alphas: Vec<f64>,
}

#[derive(Debug, Args, Serialize)]
pub struct ClusterArgs {
    #[arg(long)]
    pub bank: PathBuf,
    /// 1-based layer or `last`.
    #[arg(long, default_value = "last")]
    pub layer: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct LsiBuildArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub synth: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0.06)]
    pub tau: f64,
    #[arg(long, default_value_t = 0.6)]
    pub gamma: f64,
    /// Probe samples per language.
    #[arg(long, default_value_t = 100)]
    pub probe_samples: usize,
    /// Contrast pairs per language.
    #[arg(long, default_value_t = 16)]
    pub contrast: usize,
    #[arg(long, default_value_t = 8)]
    pub contrast_len: usize,
    /// Language of the instruction part; defaults to the first language.
    #[arg(long)]
    pub instruction_lang: Option<String>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args, Serialize)]
pub struct ReportDiffArgs {
    pub a: PathBuf,
    pub b: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn usage_error(err: clap::Error) -> ExitCode {
    use clap::error::ErrorKind;
    if matches!(err.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
        let _ = err.print();
        return ExitCode::SUCCESS;
    }
    eprintln!("{}", err.render());
    let sub = std::env::args().nth(1);
    let mut cmd = Cli::command();
    let help = match sub.as_deref().and_then(|s| cmd.find_subcommand_mut(s)) {
        Some(c) => c.render_help(),
        None => cmd.render_help(),
    };
    eprintln!("{help}");
    ExitCode::from(1)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => return usage_error(e),
    };
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
