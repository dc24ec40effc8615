use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// Synthetic multimodal trust corpora: generation, parsing, classification,
/// explanation, timing and rating statistics.
#[derive(Debug, Parser)]
#[command(name = "mmtrust", version)]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Global {
    /// JSON file with default settings; flags take precedence.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// Behavior lexicon document replacing the built-in one.
    #[arg(long, global = true, value_name = "FILE")]
    pub lexicon: Option<PathBuf>,

    /// Seed for every randomized step [default: 0].
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Treat tags missing from the lexicon as errors.
    #[arg(long, global = true)]
    pub strict_tags: bool,

    /// Output path (a directory for `timeline` over several turns).
    /// Standard output when omitted.
    #[arg(long, global = true, value_name = "PATH")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build a labeled corpus for a preset.
    Gen(GenArgs),
    /// Validate a corpus or a one-turn-per-line file and report unknown tags.
    Parse(InputArgs),
    /// Write the per-turn feature count table.
    Featurize(InputArgs),
    /// Run the repeated hold-out evaluation of the random forest.
    Train(TrainArgs),
    /// Rank features by mean absolute SHAP value per class.
    Explain(ExplainArgs),
    /// Classify a corpus with a saved forest.
    Apply(ApplyArgs),
    /// Rank tag pairs by phi coefficient of co-occurrence.
    Cooc(CoocArgs),
    /// Compile turns into timed behavior schedules.
    Timeline(TimelineArgs),
    /// Score table and repeated-measures ANOVA for questionnaire ratings.
    Stats(StatsArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Generator {
    Offline,
    Remote,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Text,
    Json,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TableFormat {
    Text,
    Tsv,
    Json,
}

#[derive(Debug, Args)]
pub struct GenArgs {
    /// neutral-ability, neutral-benevolence, gender-ability,
    /// gender-benevolence or control.
    #[arg(long)]
    pub preset: Option<String>,

    /// Shorthand for the neutral preset of a trait (ability, benevolence, none).
    #[arg(long = "trait", value_name = "TRAIT")]
    pub trait_: Option<String>,

    #[arg(long, value_enum)]
    pub generator: Option<Generator>,

    /// Number of turns; the preset size when omitted.
    #[arg(long)]
    pub size: Option<usize>,

    /// Base URL of a chat-completion endpoint.
    #[arg(long)]
    pub endpoint: Option<String>,

    #[arg(long)]
    pub model: Option<String>,

    /// Environment variable holding the API key; empty disables auth
    /// [default: OPENAI_API_KEY].
    #[arg(long)]
    pub api_key_env: Option<String>,

    /// Concurrent remote requests.
    #[arg(long)]
    pub parallelism: Option<usize>,

    /// Keep the turns already present in the output file.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Debug, Args)]
pub struct InputArgs {
    /// Corpus JSONL, or plain text with one turn per line.
    pub input: PathBuf,
}

#[derive(Debug, Args)]
pub struct ForestArgs {
    /// level or gender [default: level].
    #[arg(long)]
    pub target: Option<String>,

    /// Trees per forest [default: 100].
    #[arg(long)]
    pub trees: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    pub input: PathBuf,

    #[command(flatten)]
    pub forest: ForestArgs,

    /// Hold-out repetitions [default: 20].
    #[arg(long)]
    pub seeds: Option<usize>,

    /// Also fit one forest on the whole corpus and save it here.
    #[arg(long, value_name = "FILE")]
    pub save_model: Option<PathBuf>,

    #[arg(long, value_enum, default_value_t = Format::Text)]
    pub format: Format,
}

#[derive(Debug, Args)]
pub struct ExplainArgs {
    pub input: PathBuf,

    /// Saved forest; explains every turn against the whole corpus. Without
    /// it a forest is trained on an 80/20 split and the held-out turns are
    /// explained.
    #[arg(long, value_name = "FILE")]
    pub forest: Option<PathBuf>,

    #[command(flatten)]
    pub train: ForestArgs,

    /// path-dependent or interventional.
    #[arg(long, default_value = "path-dependent")]
    pub method: String,

    /// Features listed per class.
    #[arg(long, default_value_t = 10)]
    pub top: usize,

    #[arg(long, value_enum, default_value_t = TableFormat::Text)]
    pub format: TableFormat,
}

#[derive(Debug, Args)]
pub struct ApplyArgs {
    pub input: PathBuf,

    #[arg(long, value_name = "FILE")]
    pub forest: PathBuf,

    /// Classifier name in the report; the model file stem by default.
    #[arg(long)]
    pub name: Option<String>,

    #[arg(long, value_enum, default_value_t = Format::Text)]
    pub format: Format,
}

#[derive(Debug, Args)]
pub struct CoocArgs {
    pub input: PathBuf,

    /// Pairs seen together fewer times are not ranked.
    #[arg(long, default_value_t = 5)]
    pub min_count: usize,

    #[arg(long, default_value_t = 20)]
    pub top: usize,

    #[arg(long, value_enum, default_value_t = Format::Text)]
    pub format: Format,
}

#[derive(Debug, Args)]
pub struct TimelineArgs {
    /// Corpus or one-turn-per-line file.
    #[arg(required_unless_present = "turn", conflicts_with = "turn")]
    pub input: Option<PathBuf>,

    /// A single turn given inline.
    #[arg(long)]
    pub turn: Option<String>,

    /// Compile only the turn with this id.
    #[arg(long, requires = "input")]
    pub id: Option<String>,

    /// Speaking rate in words per minute [default: 160].
    #[arg(long)]
    pub rate: Option<f64>,

    /// Length of a pause tag in milliseconds [default: 400].
    #[arg(long)]
    pub pause_ms: Option<i64>,

    /// queue, cut-previous or drop-new [default: queue].
    #[arg(long)]
    pub overlap_policy: Option<String>,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    /// Ratings with columns participant, condition, item, response and an
    /// optional block.
    pub input: PathBuf,

    /// Field delimiter; tab for .tsv files, comma otherwise.
    #[arg(long)]
    pub delimiter: Option<char>,

    #[arg(long, value_enum, default_value_t = Format::Text)]
    pub format: Format,
}
