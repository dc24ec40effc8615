//! Generation, parsing, classification and explanation of tag-augmented
//! multimodal transcripts for virtual agents, plus the behavior timeline
//! compiler and the perception-study statistics.

pub mod analyze;
pub mod error;
pub mod explain;
pub mod featurize;
pub mod forest;
pub mod lexicon;
pub mod stats;
pub mod synth;
pub mod timeline;
pub mod transcript;

pub use error::{Error, ErrorKind, Result};
pub use featurize::{Corpus, CorpusMeta, FeatureVector, Gender, LabeledSample, Level, Trait};
pub use lexicon::{BehaviorLexicon, Channel, FEATURE_DIM};
pub use transcript::AugmentedTranscript;
