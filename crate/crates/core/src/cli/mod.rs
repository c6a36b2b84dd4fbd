//! Command-line front end: argument and config-file handling plus the five
//! commands (`explain`, `evaluate`, `pairs`, `align`, `counts`).
//!
//! Settings come from built-in defaults, then an optional TOML config file,
//! then flags. Flags win.

use std::path::PathBuf;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::attribution::Method;
use crate::deptree::{FilterConfig, LengthUnit, DEFAULT_MAX_TOKENS, DEFAULT_PUNCTUATION};
use crate::metrics::MetricConfig;
use crate::oracle::{remote_oracle, toy_hash_lm, Strategy, ValueOracle};

mod commands;
pub mod format;
pub mod input;

pub use commands::{
    cmd_align, cmd_counts, cmd_evaluate, cmd_explain, cmd_pairs, explanation_path, file_stem, AlignRun, AlignSummary,
    CountRow, EvaluateSummary, ExplainSummary, MeanVariance, MethodSummary, PairsRun, PairsSummary,
};

#[derive(Debug, Parser)]
#[command(name = "syntaxshap", version, about = "Dependency-tree constrained Shapley explanations for next-token prediction")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Explain every sentence with each method and seed.
    Explain(CommonArgs),
    /// Score explanations with fidelity, div@K and acc@K.
    Evaluate {
        #[command(flatten)]
        common: CommonArgs,
        /// Directory of explanation JSON files from `explain`; computed inline if absent.
        #[arg(long)]
        explanations: Option<PathBuf>,
    },
    /// Coherency of rank vectors across negation pairs.
    Pairs {
        #[command(flatten)]
        common: CommonArgs,
        /// JSONL with {"id", "sentence_a", "sentence_b", "negation_token"}.
        #[arg(long)]
        pairs: Option<PathBuf>,
    },
    /// Importance rank of negation tokens.
    Align {
        #[command(flatten)]
        common: CommonArgs,
        /// JSONL with {"id", "sentence", "negation_token"}.
        #[arg(long)]
        align: Option<PathBuf>,
    },
    /// Predicted and observed oracle call counts per sentence.
    Counts(CommonArgs),
}

#[derive(Debug, Clone, Default, Args)]
pub struct CommonArgs {
    /// TOML file with defaults for any of the options below.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// JSONL dataset of {"id", "sentence"} records.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// CoNLL-U parses of the sentences.
    #[arg(long)]
    pub conllu: Option<PathBuf>,
    /// `toy`, `toy:<model seed>` or the base URL of a scoring server.
    #[arg(long)]
    pub oracle: Option<String>,
    /// Comma-separated: syntaxshap, syntaxshap_w, exact_shapley, random.
    #[arg(long, value_delimiter = ',')]
    pub methods: Option<Vec<Method>>,
    /// Comma-separated run seeds.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    /// Fraction of top-ranked tokens kept when scoring.
    #[arg(long)]
    pub t: Option<f64>,
    /// Number of top next tokens for div@K and acc@K.
    #[arg(long)]
    pub k: Option<usize>,
    /// How dropped tokens are hidden: zero_attention or random_replace.
    #[arg(long)]
    pub strategy: Option<Strategy>,
    /// Longer sentences are rejected (default 15).
    #[arg(long)]
    pub max_tokens: Option<usize>,
    /// Shorter sentences are rejected (default 1).
    #[arg(long)]
    pub min_tokens: Option<usize>,
    /// Count sentence length in `tokens` or `words`.
    #[arg(long)]
    pub length_unit: Option<String>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Worker threads; all cores if absent.
    #[arg(long)]
    pub workers: Option<usize>,
    /// Vocabulary size of the toy model.
    #[arg(long)]
    pub vocab_size: Option<u32>,
    /// Remote oracle timeout in seconds.
    #[arg(long)]
    pub timeout: Option<u64>,
    /// Retries after transport errors, 429 and 5xx responses.
    #[arg(long)]
    pub retries: Option<u32>,
}

/// Optional settings read from a TOML file.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub dataset: Option<PathBuf>,
    pub conllu: Option<PathBuf>,
    pub pairs: Option<PathBuf>,
    pub align: Option<PathBuf>,
    pub explanations: Option<PathBuf>,
    pub oracle: Option<String>,
    pub methods: Option<Vec<String>>,
    pub seeds: Option<Vec<u64>>,
    pub t: Option<f64>,
    pub k: Option<usize>,
    pub strategy: Option<String>,
    pub max_tokens: Option<usize>,
    pub min_tokens: Option<usize>,
    pub length_unit: Option<String>,
    pub punctuation: Option<String>,
    pub out: Option<PathBuf>,
    pub workers: Option<usize>,
    pub vocab_size: Option<u32>,
    pub timeout: Option<u64>,
    pub retries: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum OracleChoice {
    Toy { model_seed: u64, vocab_size: u32 },
    Remote { url: String, timeout_secs: u64, retries: u32 },
}

impl OracleChoice {
    pub fn is_toy(&self) -> bool {
        matches!(self, OracleChoice::Toy { .. })
    }

    pub fn connect(&self) -> Result<Box<dyn ValueOracle>> {
        Ok(match self {
            OracleChoice::Toy { model_seed, vocab_size } => Box::new(toy_hash_lm(*model_seed, *vocab_size)),
            OracleChoice::Remote { url, timeout_secs, retries } => Box::new(
                remote_oracle(url, Duration::from_secs(*timeout_secs), *retries)
                    .with_context(|| format!("connecting to oracle at {url}"))?,
            ),
        })
    }
}

/// Fully resolved settings for one command.
#[derive(Debug, Clone, Serialize)]
pub struct RunConfig {
    pub dataset: Option<PathBuf>,
    pub conllu: Option<PathBuf>,
    pub pairs: Option<PathBuf>,
    pub align: Option<PathBuf>,
    pub explanations: Option<PathBuf>,
    pub oracle: OracleChoice,
    pub methods: Vec<Method>,
    pub seeds: Vec<u64>,
    pub t: f64,
    pub k: usize,
    pub strategy: Strategy,
    pub filter: FilterConfig,
    pub out: PathBuf,
    pub workers: usize,
}

pub const DEFAULT_TOY_VOCAB: u32 = 256;

impl RunConfig {
    pub fn metric_config(&self, seed: u64) -> MetricConfig {
        MetricConfig { t: self.t, k: self.k, strategy: self.strategy, seed }
    }

    /// Merges defaults, the config file named by `--config`, and flags.
    pub fn resolve(args: &CommonArgs) -> Result<Self> {
        let file = match &args.config {
            Some(path) => {
                let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
                toml::from_str::<FileConfig>(&text).with_context(|| format!("parsing config {}", path.display()))?
            }
            None => FileConfig::default(),
        };
        Self::merge(args, file)
    }

    pub fn merge(args: &CommonArgs, file: FileConfig) -> Result<Self> {
        let methods = match (&args.methods, &file.methods) {
            (Some(m), _) => m.clone(),
            (None, Some(m)) => m.iter().map(|s| s.parse::<Method>().map_err(anyhow::Error::msg)).collect::<Result<_>>()?,
            (None, None) => vec![Method::Syntaxshap, Method::SyntaxshapW, Method::Random],
        };
        let strategy = match (&args.strategy, &file.strategy) {
            (Some(s), _) => *s,
            (None, Some(s)) => s.parse().map_err(anyhow::Error::msg)?,
            (None, None) => Strategy::ZeroAttention,
        };
        let length_unit = match args.length_unit.as_deref().or(file.length_unit.as_deref()) {
            None | Some("tokens") => LengthUnit::Tokens,
            Some("words") => LengthUnit::Words,
            Some(other) => bail!("length unit must be `tokens` or `words`, got {other:?}"),
        };
        let vocab_size = args.vocab_size.or(file.vocab_size).unwrap_or(DEFAULT_TOY_VOCAB);
        let oracle_spec = args.oracle.clone().or(file.oracle).unwrap_or_else(|| "toy".into());
        let oracle = parse_oracle(
            &oracle_spec,
            vocab_size,
            args.timeout.or(file.timeout).unwrap_or(30),
            args.retries.or(file.retries).unwrap_or(3),
        )?;
        let workers = args
            .workers
            .or(file.workers)
            .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1));

        let config = RunConfig {
            dataset: args.dataset.clone().or(file.dataset),
            conllu: args.conllu.clone().or(file.conllu),
            pairs: file.pairs,
            align: file.align,
            explanations: file.explanations,
            oracle,
            methods,
            seeds: args.seeds.clone().or(file.seeds).unwrap_or_else(|| vec![0, 1, 2, 3]),
            t: args.t.or(file.t).unwrap_or(0.5),
            k: args.k.or(file.k).unwrap_or(10),
            strategy,
            filter: FilterConfig {
                max_tokens: args.max_tokens.or(file.max_tokens).unwrap_or(DEFAULT_MAX_TOKENS),
                min_tokens: args.min_tokens.or(file.min_tokens).unwrap_or(1),
                punctuation: file.punctuation.unwrap_or_else(|| DEFAULT_PUNCTUATION.to_string()),
                length_unit,
            },
            out: args.out.clone().or(file.out).unwrap_or_else(|| PathBuf::from("out")),
            workers: workers.max(1),
        };
        config.validate()?;
        Ok(config)
    }

    fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            bail!("at least one seed is required");
        }
        if self.methods.is_empty() {
            bail!("at least one method is required");
        }
        self.metric_config(0).validate()?;
        for path in [&self.dataset, &self.conllu, &self.pairs, &self.align, &self.explanations].into_iter().flatten() {
            if !path.exists() {
                bail!("{} does not exist", path.display());
            }
        }
        Ok(())
    }

    /// Sets a path given on the command line for one specific command.
    pub fn with_path(mut self, slot: PathSlot, path: Option<PathBuf>) -> Result<Self> {
        if let Some(p) = path {
            if !p.exists() {
                bail!("{} does not exist", p.display());
            }
            match slot {
                PathSlot::Pairs => self.pairs = Some(p),
                PathSlot::Align => self.align = Some(p),
                PathSlot::Explanations => self.explanations = Some(p),
            }
        }
        Ok(self)
    }

    pub fn thread_pool(&self) -> Result<rayon::ThreadPool> {
        Ok(rayon::ThreadPoolBuilder::new().num_threads(self.workers).build()?)
    }
}

#[derive(Debug, Clone, Copy)]
pub enum PathSlot {
    Pairs,
    Align,
    Explanations,
}

fn parse_oracle(spec: &str, vocab_size: u32, timeout_secs: u64, retries: u32) -> Result<OracleChoice> {
    if spec == "toy" {
        return Ok(OracleChoice::Toy { model_seed: 0, vocab_size });
    }
    if let Some(seed) = spec.strip_prefix("toy:") {
        let model_seed = seed.parse().with_context(|| format!("bad toy model seed {seed:?}"))?;
        return Ok(OracleChoice::Toy { model_seed, vocab_size });
    }
    if spec.starts_with("http://") || spec.starts_with("https://") {
        return Ok(OracleChoice::Remote { url: spec.to_string(), timeout_secs, retries });
    }
    bail!("--oracle must be `toy`, `toy:<seed>` or an http(s) URL, got {spec:?}")
}

/// Dispatches a parsed command line.
pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Explain(common) => cmd_explain(&RunConfig::resolve(&common)?).map(|_| ()),
        Command::Evaluate { common, explanations } => {
            let config = RunConfig::resolve(&common)?.with_path(PathSlot::Explanations, explanations)?;
            cmd_evaluate(&config).map(|_| ())
        }
        Command::Pairs { common, pairs } => {
            let config = RunConfig::resolve(&common)?.with_path(PathSlot::Pairs, pairs)?;
            cmd_pairs(&config).map(|_| ())
        }
        Command::Align { common, align } => {
            let config = RunConfig::resolve(&common)?.with_path(PathSlot::Align, align)?;
            cmd_align(&config).map(|_| ())
        }
        Command::Counts(common) => cmd_counts(&RunConfig::resolve(&common)?).map(|_| ()),
    }
}
