use std::path::PathBuf;

use thiserror::Error;

use crate::lexicon::Channel;

#[derive(Debug, Error)]
pub enum LexiconError {
    #[error("cannot read lexicon {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed lexicon document: {0}")]
    Json(#[from] serde_json::Error),
    #[error("unsupported lexicon document version {0}")]
    Version(u32),
    #[error("{channel} registry must hold exactly {expected} entries, found {found}")]
    Cardinality {
        channel: Channel,
        expected: usize,
        found: usize,
    },
    #[error("duplicate {channel} name `{name}`")]
    DuplicateName { channel: Channel, name: String },
    #[error("gesture `{name}` has non-positive duration {duration}")]
    NonPositiveDuration { name: String, duration: f64 },
    #[error("empty {0} name")]
    EmptyName(Channel),
}

/// Transcript grammar violations. Offsets are byte offsets into the source.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseError {
    #[error("unbalanced `{delimiter}` at offset {offset}")]
    Unbalanced { offset: usize, delimiter: char },
    #[error("tag at offset {offset} lacks an `f:` or `g:` prefix: `{content}`")]
    UnknownTagShape { offset: usize, content: String },
    #[error("nested tag at offset {offset}")]
    Nested { offset: usize },
    #[error("empty tag at offset {offset}")]
    EmptyTag { offset: usize },
}

impl ParseError {
    pub fn offset(&self) -> usize {
        match self {
            ParseError::Unbalanced { offset, .. }
            | ParseError::UnknownTagShape { offset, .. }
            | ParseError::Nested { offset }
            | ParseError::EmptyTag { offset } => *offset,
        }
    }
}

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot access corpus {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: malformed record: {message}")]
    Malformed { line: usize, message: String },
    #[error("line {line}: invalid {field} label `{value}`")]
    Label {
        line: usize,
        field: &'static str,
        value: String,
    },
    #[error("line {line}: duplicate turn id `{turn_id}`")]
    DuplicateTurn { line: usize, turn_id: String },
    #[error("line {line}: turn `{turn_id}` does not parse: {source}")]
    Parse {
        line: usize,
        turn_id: String,
        #[source]
        source: ParseError,
    },
    #[error("line {line}: {message}")]
    Inconsistent { line: usize, message: String },
}

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("synthesis profile has no class for {0}")]
    MissingClass(String),
    #[error("endpoint returned status {status}: {body}")]
    Status { status: u16, body: String },
    #[error("transport failure after {attempts} attempts: {message}")]
    Transport { attempts: u32, message: String },
    #[error("endpoint returned an empty completion")]
    EmptyCompletion,
    #[error("malformed completion response: {0}")]
    Response(String),
    #[error("API key variable `{0}` is not set")]
    MissingApiKey(String),
    #[error("{} turn(s) failed, first at turn {}: {}", .0.len(), .0[0].0, .0[0].1)]
    Turns(Vec<(usize, String)>),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
}

#[derive(Debug, Error)]
pub enum ForestError {
    #[error("no training samples")]
    Empty,
    #[error("training data holds a single class `{0}`")]
    SingleClass(String),
    #[error("feature vector has length {found}, expected {expected}")]
    Dimension { expected: usize, found: usize },
    #[error("sample `{0}` has no label for the requested target")]
    MissingLabel(String),
    #[error("model file: {0}")]
    Model(String),
    #[error("cannot stratify: {0}")]
    Stratify(String),
    #[error("cannot access model {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Error)]
pub enum ExplainError {
    #[error("feature vector has length {found}, expected {expected}")]
    Dimension { expected: usize, found: usize },
    #[error("{count} active features exceed the brute-force limit of {max}")]
    TooManyFeatures { count: usize, max: usize },
    #[error("background set is empty")]
    EmptyBackground,
}

#[derive(Debug, Error)]
pub enum AnalyzeError {
    #[error("model vocabulary {model} does not match corpus vocabulary {corpus}")]
    VocabularyMismatch { model: String, corpus: String },
    #[error("corpus is empty")]
    EmptyCorpus,
}

#[derive(Debug, Error)]
pub enum TimelineError {
    #[error("unknown {channel} tag `{name}` at offset {offset}")]
    UnknownTag {
        channel: Channel,
        name: String,
        offset: usize,
    },
    #[error("invalid timing configuration: {0}")]
    Config(String),
    #[error("timeline document: {0}")]
    Document(String),
    #[error("cannot access timeline {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Error)]
pub enum StatsError {
    #[error("no ratings for condition {condition}, item {item}")]
    EmptyCell { condition: String, item: String },
    #[error("incomplete design: {0}")]
    IncompleteDesign(String),
    #[error("line {line}: {message}")]
    Record { line: usize, message: String },
    #[error("need at least {needed} subjects, found {found}")]
    TooFewSubjects { needed: usize, found: usize },
    #[error("ratings file: {0}")]
    Csv(#[from] csv::Error),
}

/// Whether a failure stems from bad input or from the run itself.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Input,
    Runtime,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Lexicon(#[from] LexiconError),
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Forest(#[from] ForestError),
    #[error(transparent)]
    Explain(#[from] ExplainError),
    #[error(transparent)]
    Analyze(#[from] AnalyzeError),
    #[error(transparent)]
    Timeline(#[from] TimelineError),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error("cannot write {path}: {source}")]
    Write {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Synth(SynthError::Corpus(_)) => ErrorKind::Input,
            Error::Synth(_) | Error::Write { .. } => ErrorKind::Runtime,
            Error::Corpus(CorpusError::Io { path, .. }) if !path.exists() => ErrorKind::Input,
            Error::Corpus(CorpusError::Io { .. }) => ErrorKind::Runtime,
            Error::Timeline(TimelineError::Io { .. }) => ErrorKind::Runtime,
            _ => ErrorKind::Input,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
