//! Count vectors, labeled samples and the corpus file format.
//!
//! A corpus file is UTF-8 JSON Lines. The first line is a header object:
//!
//! ```text
//! {"format":"mmtrust-corpus","version":1,"trait":"Ability","gendered":false,
//!  "provenance":"offline-synth","created_unix":0,"preset":"NeutralAbility","size":2000}
//! ```
//!
//! Every following line is one speech turn with the fields `turn_id`,
//! `trait` (`Ability`, `Benevolence` or `None`), `level` (`Low`, `Medium`,
//! `High` or null), `gender` (`Male`, `Female` or null) and `raw`.

use std::collections::HashSet;
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::CorpusError;
use crate::lexicon::{BehaviorLexicon, Channel, FEATURE_DIM};
use crate::transcript::AugmentedTranscript;

pub const CORPUS_FORMAT: &str = "mmtrust-corpus";
pub const CORPUS_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FeatureVector(Vec<u32>);

impl FeatureVector {
    pub fn zeros() -> Self {
        FeatureVector(vec![0; FEATURE_DIM])
    }

    pub fn from_counts(counts: Vec<u32>) -> Option<Self> {
        (counts.len() == FEATURE_DIM).then_some(FeatureVector(counts))
    }

    pub fn counts(&self) -> &[u32] {
        &self.0
    }

    pub fn get(&self, index: usize) -> u32 {
        self.0[index]
    }

    pub fn increment(&mut self, index: usize) {
        self.0[index] += 1;
    }

    pub fn l1(&self) -> u64 {
        self.0.iter().map(|&c| c as u64).sum()
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.0.iter().map(|&c| c as f64).collect()
    }
}

impl Default for FeatureVector {
    fn default() -> Self {
        Self::zeros()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnknownTag {
    pub channel: Channel,
    pub name: String,
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Featurized {
    pub vector: FeatureVector,
    pub unknown: Vec<UnknownTag>,
}

/// Counts resolved tag occurrences per feature; unknown names go to the
/// side report. Emphasis markers carry no weight.
pub fn featurize(t: &AugmentedTranscript, lex: &BehaviorLexicon) -> Featurized {
    let mut vector = FeatureVector::zeros();
    let mut unknown = Vec::new();
    for seg in t.tags() {
        let channel = seg.kind.channel().expect("tag segment");
        match lex.resolve(&seg.payload, channel) {
            Some(idx) => vector.increment(idx),
            None => unknown.push(UnknownTag {
                channel,
                name: seg.payload.clone(),
                offset: seg.offset,
            }),
        }
    }
    Featurized { vector, unknown }
}

macro_rules! label_enum {
    ($name:ident, $field:literal, [$($variant:ident),+]) => {
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        pub enum $name {
            $($variant),+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];
            pub const FIELD: &'static str = $field;

            pub fn as_str(self) -> &'static str {
                match self {
                    $($name::$variant => stringify!($variant)),+
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $name {
            type Err = String;

            fn from_str(s: &str) -> Result<Self, Self::Err> {
                $(if s.eq_ignore_ascii_case(stringify!($variant)) {
                    return Ok($name::$variant);
                })+
                Err(format!("invalid {} `{}`", $field, s))
            }
        }
    };
}

label_enum!(Level, "level", [Low, Medium, High]);
label_enum!(Gender, "gender", [Male, Female]);
label_enum!(Trait, "trait", [Ability, Benevolence, None]);

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledSample {
    pub turn_id: String,
    pub trait_: Trait,
    pub level: Option<Level>,
    pub gender: Option<Gender>,
    pub raw: String,
    pub features: FeatureVector,
    pub unknown: Vec<UnknownTag>,
}

impl LabeledSample {
    /// Parses and featurizes `raw`.
    pub fn new(
        turn_id: impl Into<String>,
        trait_: Trait,
        level: Option<Level>,
        gender: Option<Gender>,
        raw: impl Into<String>,
        lex: &BehaviorLexicon,
    ) -> Result<Self, crate::error::ParseError> {
        let raw = raw.into();
        let t = AugmentedTranscript::parse(&raw)?;
        let Featurized { vector, unknown } = featurize(&t, lex);
        Ok(LabeledSample {
            turn_id: turn_id.into(),
            trait_,
            level,
            gender,
            raw,
            features: vector,
            unknown,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusMeta {
    #[serde(rename = "trait")]
    pub trait_: Trait,
    pub gendered: bool,
    pub provenance: String,
    pub created_unix: u64,
    #[serde(default)]
    pub preset: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    pub meta: CorpusMeta,
    pub samples: Vec<LabeledSample>,
    pub vocabulary: String,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    #[serde(flatten)]
    meta: CorpusMeta,
    size: usize,
}

#[derive(Serialize)]
struct RecordOut<'a> {
    turn_id: &'a str,
    #[serde(rename = "trait")]
    trait_: Trait,
    level: Option<Level>,
    gender: Option<Gender>,
    raw: &'a str,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordIn {
    turn_id: String,
    #[serde(rename = "trait")]
    trait_: String,
    #[serde(default)]
    level: Option<String>,
    #[serde(default)]
    gender: Option<String>,
    raw: String,
}

fn parse_label<T: FromStr>(
    line: usize,
    field: &'static str,
    value: Option<String>,
) -> Result<Option<T>, CorpusError> {
    match value {
        None => Ok(None),
        Some(v) => v
            .parse()
            .map(Some)
            .map_err(|_| CorpusError::Label { line, field, value: v }),
    }
}

impl Corpus {
    pub fn new(meta: CorpusMeta, lex: &BehaviorLexicon) -> Self {
        Corpus {
            meta,
            samples: Vec::new(),
            vocabulary: lex.vocabulary().fingerprint(),
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn vectors(&self) -> Vec<&FeatureVector> {
        self.samples.iter().map(|s| &s.features).collect()
    }

    pub fn unknown_tags(&self) -> impl Iterator<Item = (&str, &UnknownTag)> {
        self.samples
            .iter()
            .flat_map(|s| s.unknown.iter().map(move |u| (s.turn_id.as_str(), u)))
    }

    pub fn to_jsonl(&self) -> String {
        let header = Header {
            format: CORPUS_FORMAT.into(),
            version: CORPUS_VERSION,
            meta: self.meta.clone(),
            size: self.samples.len(),
        };
        let mut out = serde_json::to_string(&header).expect("header serializes");
        out.push('\n');
        for s in &self.samples {
            let rec = RecordOut {
                turn_id: &s.turn_id,
                trait_: s.trait_,
                level: s.level,
                gender: s.gender,
                raw: &s.raw,
            };
            out.push_str(&serde_json::to_string(&rec).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str, lex: &BehaviorLexicon) -> Result<Self, CorpusError> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        let (_, first) = lines.next().ok_or(CorpusError::Malformed {
            line: 1,
            message: "missing header".into(),
        })?;
        let header: Header = serde_json::from_str(first).map_err(|e| CorpusError::Malformed {
            line: 1,
            message: format!("bad header: {e}"),
        })?;
        if header.format != CORPUS_FORMAT || header.version != CORPUS_VERSION {
            return Err(CorpusError::Malformed {
                line: 1,
                message: format!(
                    "unsupported format {} v{}",
                    header.format, header.version
                ),
            });
        }

        let mut corpus = Corpus::new(header.meta, lex);
        let mut seen = HashSet::new();
        for (line, text) in lines {
            if text.trim().is_empty() {
                continue;
            }
            let rec: RecordIn = serde_json::from_str(text).map_err(|e| CorpusError::Malformed {
                line,
                message: e.to_string(),
            })?;
            let trait_: Trait = parse_label(line, Trait::FIELD, Some(rec.trait_))?.unwrap();
            let level: Option<Level> = parse_label(line, Level::FIELD, rec.level)?;
            let gender: Option<Gender> = parse_label(line, Gender::FIELD, rec.gender)?;
            if trait_ != corpus.meta.trait_ {
                return Err(CorpusError::Inconsistent {
                    line,
                    message: format!(
                        "turn trait {trait_} differs from corpus trait {}",
                        corpus.meta.trait_
                    ),
                });
            }
            if level.is_some() != (trait_ != Trait::None) {
                return Err(CorpusError::Inconsistent {
                    line,
                    message: "level must be present exactly when the trait is set".into(),
                });
            }
            if !seen.insert(rec.turn_id.clone()) {
                return Err(CorpusError::DuplicateTurn {
                    line,
                    turn_id: rec.turn_id,
                });
            }
            let sample = LabeledSample::new(rec.turn_id.clone(), trait_, level, gender, rec.raw, lex)
                .map_err(|source| CorpusError::Parse {
                    line,
                    turn_id: rec.turn_id,
                    source,
                })?;
            corpus.samples.push(sample);
        }
        if corpus.samples.len() != header.size {
            return Err(CorpusError::Malformed {
                line: 1,
                message: format!(
                    "header declares {} turns, file holds {}",
                    header.size,
                    corpus.samples.len()
                ),
            });
        }
        Ok(corpus)
    }

    pub fn load(path: &Path, lex: &BehaviorLexicon) -> Result<Self, CorpusError> {
        let text = std::fs::read_to_string(path).map_err(|source| CorpusError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_jsonl(&text, lex)
    }

    /// Writes through a temporary sibling file so a partial write never
    /// replaces a good corpus.
    pub fn save(&self, path: &Path) -> Result<(), CorpusError> {
        let io = |source| CorpusError::Io {
            path: path.to_path_buf(),
            source,
        };
        let tmp = path.with_extension("tmp");
        let mut f = std::fs::File::create(&tmp).map_err(io)?;
        f.write_all(self.to_jsonl().as_bytes()).map_err(io)?;
        f.sync_all().map_err(io)?;
        std::fs::rename(&tmp, path).map_err(io)
    }

    /// Tab-separated feature matrix with a header row of feature names.
    pub fn feature_table(&self, lex: &BehaviorLexicon) -> String {
        let mut out = String::from("turn_id\tlevel\tgender");
        for e in lex.vocabulary().entries() {
            out.push('\t');
            out.push_str(&e.name);
        }
        out.push('\n');
        for s in &self.samples {
            out.push_str(&s.turn_id);
            out.push('\t');
            out.push_str(s.level.map(Level::as_str).unwrap_or("-"));
            out.push('\t');
            out.push_str(s.gender.map(Gender::as_str).unwrap_or("-"));
            for c in s.features.counts() {
                out.push('\t');
                out.push_str(&c.to_string());
            }
            out.push('\n');
        }
        out
    }
}
