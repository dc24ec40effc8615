//! Behavior registries (gestures, facial expressions, audio tags) and the
//! fixed feature vocabulary derived from them.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::LexiconError;

pub const GESTURE_COUNT: usize = 72;
pub const FACIAL_COUNT: usize = 12;
pub const AUDIO_COUNT: usize = 10;
/// Length of every feature vector.
pub const FEATURE_DIM: usize = GESTURE_COUNT + FACIAL_COUNT + AUDIO_COUNT;

const DEFAULT_LEXICON: &str = include_str!("../data/lexicon.json");
const DOCUMENT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Channel {
    Gesture,
    Facial,
    Audio,
}

impl Channel {
    pub const ALL: [Channel; 3] = [Channel::Gesture, Channel::Facial, Channel::Audio];

    pub fn as_str(self) -> &'static str {
        match self {
            Channel::Gesture => "gesture",
            Channel::Facial => "facial",
            Channel::Audio => "audio",
        }
    }
}

impl fmt::Display for Channel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Channel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "gesture" | "g" => Ok(Channel::Gesture),
            "facial" | "face" | "f" => Ok(Channel::Facial),
            "audio" | "voice" => Ok(Channel::Audio),
            other => Err(format!("unknown channel `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GestureSpec {
    pub name: String,
    pub description: String,
    /// Animation length in seconds.
    pub duration: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub aliases: Vec<String>,
}

impl GestureSpec {
    /// Duration rounded to whole milliseconds.
    pub fn duration_ms(&self) -> u64 {
        (self.duration * 1000.0).round() as u64
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FacialExpression {
    pub name: String,
    #[serde(default)]
    pub aliases: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AudioTag {
    pub name: String,
    #[serde(default)]
    pub aliases: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabEntry {
    pub index: usize,
    pub channel: Channel,
    pub name: String,
}

/// Ordered feature vocabulary: gestures in registry order, then facial
/// expressions and audio tags, each of those two blocks sorted by name.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeatureVocabulary {
    entries: Vec<VocabEntry>,
}

impl FeatureVocabulary {
    pub fn entries(&self) -> &[VocabEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, index: usize) -> Option<&VocabEntry> {
        self.entries.get(index)
    }

    pub fn name(&self, index: usize) -> &str {
        &self.entries[index].name
    }

    /// Index of a canonical name on a channel (exact match).
    pub fn index_of(&self, channel: Channel, name: &str) -> Option<usize> {
        self.entries
            .iter()
            .find(|e| e.channel == channel && e.name == name)
            .map(|e| e.index)
    }

    /// Hex SHA-256 over `channel:name` lines; identifies the feature layout
    /// a model or corpus was built against.
    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        for e in &self.entries {
            hasher.update(e.channel.as_str().as_bytes());
            hasher.update(b":");
            hasher.update(e.name.as_bytes());
            hasher.update(b"\n");
        }
        hasher
            .finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

/// On-disk lexicon layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LexiconDocument {
    #[serde(default = "default_version")]
    pub version: u32,
    pub gestures: Vec<GestureSpec>,
    pub facial: Vec<FacialExpression>,
    pub audio: Vec<AudioTag>,
}

fn default_version() -> u32 {
    DOCUMENT_VERSION
}

#[derive(Debug, Clone)]
pub struct BehaviorLexicon {
    gestures: Vec<GestureSpec>,
    facial: Vec<FacialExpression>,
    audio: Vec<AudioTag>,
    vocabulary: FeatureVocabulary,
    lookup: HashMap<(Channel, String), usize>,
}

/// Lower-cases and collapses internal whitespace.
pub fn normalize_name(raw: &str) -> String {
    raw.split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
}

impl BehaviorLexicon {
    /// The embedded default lexicon.
    pub fn builtin() -> &'static BehaviorLexicon {
        static LEXICON: OnceLock<BehaviorLexicon> = OnceLock::new();
        LEXICON.get_or_init(|| {
            BehaviorLexicon::from_json(DEFAULT_LEXICON).expect("embedded lexicon is valid")
        })
    }

    pub fn from_json(source: &str) -> Result<Self, LexiconError> {
        let doc: LexiconDocument = serde_json::from_str(source)?;
        Self::from_document(doc)
    }

    pub fn load(path: &Path) -> Result<Self, LexiconError> {
        let text = std::fs::read_to_string(path).map_err(|source| LexiconError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json(&text)
    }

    pub fn from_document(doc: LexiconDocument) -> Result<Self, LexiconError> {
        if doc.version != DOCUMENT_VERSION {
            return Err(LexiconError::Version(doc.version));
        }
        check_count(Channel::Gesture, doc.gestures.len(), GESTURE_COUNT)?;
        check_count(Channel::Facial, doc.facial.len(), FACIAL_COUNT)?;
        check_count(Channel::Audio, doc.audio.len(), AUDIO_COUNT)?;
        for g in &doc.gestures {
            if g.name.trim().is_empty() {
                return Err(LexiconError::EmptyName(Channel::Gesture));
            }
            if !(g.duration > 0.0 && g.duration.is_finite()) {
                return Err(LexiconError::NonPositiveDuration {
                    name: g.name.clone(),
                    duration: g.duration,
                });
            }
        }

        let mut entries = Vec::with_capacity(FEATURE_DIM);
        for g in &doc.gestures {
            entries.push((Channel::Gesture, g.name.clone()));
        }
        let mut facial: Vec<&str> = doc.facial.iter().map(|f| f.name.as_str()).collect();
        facial.sort_unstable();
        entries.extend(facial.into_iter().map(|n| (Channel::Facial, n.to_string())));
        let mut audio: Vec<&str> = doc.audio.iter().map(|a| a.name.as_str()).collect();
        audio.sort_unstable();
        entries.extend(audio.into_iter().map(|n| (Channel::Audio, n.to_string())));
        let entries: Vec<VocabEntry> = entries
            .into_iter()
            .enumerate()
            .map(|(index, (channel, name))| VocabEntry {
                index,
                channel,
                name,
            })
            .collect();

        // Canonical names first so an alias can never shadow one.
        let mut lookup = HashMap::new();
        for e in &entries {
            let key = (e.channel, normalize_name(&e.name));
            if key.1.is_empty() {
                return Err(LexiconError::EmptyName(e.channel));
            }
            if lookup.insert(key, e.index).is_some() {
                return Err(LexiconError::DuplicateName {
                    channel: e.channel,
                    name: e.name.clone(),
                });
            }
        }
        let index_of = |channel: Channel, name: &str| {
            entries
                .iter()
                .find(|e| e.channel == channel && e.name == name)
                .map(|e| e.index)
                .expect("entry exists")
        };
        let alias_sets = doc
            .gestures
            .iter()
            .map(|g| (Channel::Gesture, &g.name, &g.aliases))
            .chain(doc.facial.iter().map(|f| (Channel::Facial, &f.name, &f.aliases)))
            .chain(doc.audio.iter().map(|a| (Channel::Audio, &a.name, &a.aliases)));
        for (channel, name, aliases) in alias_sets {
            let target = index_of(channel, name);
            for alias in aliases {
                let key = (channel, normalize_name(alias));
                match lookup.get(&key) {
                    Some(&existing) if existing == target => {}
                    Some(_) => {
                        return Err(LexiconError::DuplicateName {
                            channel,
                            name: alias.clone(),
                        })
                    }
                    None => {
                        lookup.insert(key, target);
                    }
                }
            }
        }

        Ok(BehaviorLexicon {
            gestures: doc.gestures,
            facial: doc.facial,
            audio: doc.audio,
            vocabulary: FeatureVocabulary { entries },
            lookup,
        })
    }

    pub fn to_document(&self) -> LexiconDocument {
        LexiconDocument {
            version: DOCUMENT_VERSION,
            gestures: self.gestures.clone(),
            facial: self.facial.clone(),
            audio: self.audio.clone(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_document()).expect("lexicon serializes")
    }

    pub fn gestures(&self) -> &[GestureSpec] {
        &self.gestures
    }

    pub fn facial(&self) -> &[FacialExpression] {
        &self.facial
    }

    pub fn audio(&self) -> &[AudioTag] {
        &self.audio
    }

    pub fn vocabulary(&self) -> &FeatureVocabulary {
        &self.vocabulary
    }

    pub fn gesture(&self, name: &str) -> Option<&GestureSpec> {
        let idx = self.resolve(name, Channel::Gesture)?;
        self.gestures.iter().find(|g| g.name == self.vocabulary.name(idx))
    }

    /// Case-insensitive, alias-aware lookup on one channel. `None` marks an
    /// unknown name.
    pub fn resolve(&self, raw_name: &str, channel: Channel) -> Option<usize> {
        self.lookup.get(&(channel, normalize_name(raw_name))).copied()
    }

    /// Canonical vocabulary index of a gesture's feature.
    pub fn feature_index(&self, channel: Channel, canonical: &str) -> Option<usize> {
        self.vocabulary.index_of(channel, canonical)
    }
}

impl Default for BehaviorLexicon {
    fn default() -> Self {
        BehaviorLexicon::builtin().clone()
    }
}

fn check_count(channel: Channel, found: usize, expected: usize) -> Result<(), LexiconError> {
    if found == expected {
        Ok(())
    } else {
        Err(LexiconError::Cardinality {
            channel,
            expected,
            found,
        })
    }
}
