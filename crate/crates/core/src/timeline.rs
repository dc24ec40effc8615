//! Compiles a tag-augmented transcript into a timed behavior schedule.
//!
//! Speech is timed with a constant-rate word model. All times are integer
//! milliseconds.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::TimelineError;
use crate::lexicon::{BehaviorLexicon, Channel};
use crate::transcript::{AugmentedTranscript, SegmentKind};

pub const DOCUMENT_FORMAT: &str = "mmtrust-timeline";
pub const DOCUMENT_VERSION: u32 = 1;
pub const PAUSE_TAG: &str = "pause";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OverlapPolicy {
    /// A gesture waits until the previous one ends.
    #[default]
    Queue,
    /// A gesture interrupts the previous one.
    CutPrevious,
    /// A gesture that would overlap is dropped.
    DropNew,
}

impl fmt::Display for OverlapPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OverlapPolicy::Queue => "queue",
            OverlapPolicy::CutPrevious => "cut-previous",
            OverlapPolicy::DropNew => "drop-new",
        })
    }
}

impl FromStr for OverlapPolicy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "queue" => Ok(OverlapPolicy::Queue),
            "cut-previous" => Ok(OverlapPolicy::CutPrevious),
            "drop-new" => Ok(OverlapPolicy::DropNew),
            _ => Err(format!(
                "unknown overlap policy `{s}` (expected queue, cut-previous or drop-new)"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingConfig {
    pub words_per_minute: f64,
    pub pause_ms: i64,
    pub overlap: OverlapPolicy,
    /// Unknown tags are errors instead of recorded drops.
    pub strict: bool,
}

impl Default for TimingConfig {
    fn default() -> Self {
        TimingConfig {
            words_per_minute: 160.0,
            pause_ms: 400,
            overlap: OverlapPolicy::Queue,
            strict: false,
        }
    }
}

impl TimingConfig {
    fn validate(&self) -> Result<(u64, u64), TimelineError> {
        if !(self.words_per_minute.is_finite() && self.words_per_minute > 0.0) {
            return Err(TimelineError::Config(format!(
                "speaking rate must be positive, got {}",
                self.words_per_minute
            )));
        }
        if self.pause_ms < 0 {
            return Err(TimelineError::Config(format!(
                "pause length must be non-negative, got {} ms",
                self.pause_ms
            )));
        }
        let word_ms = (60_000.0 / self.words_per_minute).round() as u64;
        if word_ms == 0 {
            return Err(TimelineError::Config("speaking rate too high".into()));
        }
        Ok((word_ms, self.pause_ms as u64))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EventChannel {
    Gesture,
    Face,
    Voice,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimelineEvent {
    pub channel: EventChannel,
    pub name: String,
    pub start_ms: u64,
    pub duration_ms: u64,
}

impl TimelineEvent {
    pub fn end_ms(&self) -> u64 {
        self.start_ms + self.duration_ms
    }

    pub fn start(&self) -> f64 {
        self.start_ms as f64 / 1000.0
    }

    pub fn duration(&self) -> f64 {
        self.duration_ms as f64 / 1000.0
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpeechInterval {
    pub word: String,
    pub start_ms: u64,
    pub end_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DroppedTag {
    pub channel: Channel,
    pub name: String,
    pub offset: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct BehaviorTimeline {
    pub total_ms: u64,
    pub events: Vec<TimelineEvent>,
    pub speech: Vec<SpeechInterval>,
    pub drops: Vec<DroppedTag>,
}

#[derive(Serialize, Deserialize)]
struct Document {
    format: String,
    version: u32,
    #[serde(flatten)]
    timeline: BehaviorTimeline,
}

impl BehaviorTimeline {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(&Document {
            format: DOCUMENT_FORMAT.into(),
            version: DOCUMENT_VERSION,
            timeline: self.clone(),
        })
        .expect("timeline serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self, TimelineError> {
        let doc: Document =
            serde_json::from_str(text).map_err(|e| TimelineError::Document(e.to_string()))?;
        if doc.format != DOCUMENT_FORMAT || doc.version != DOCUMENT_VERSION {
            return Err(TimelineError::Document(format!(
                "unsupported document {} v{}",
                doc.format, doc.version
            )));
        }
        Ok(doc.timeline)
    }

    pub fn export(&self, path: &Path) -> Result<(), TimelineError> {
        std::fs::write(path, self.to_json()).map_err(|source| TimelineError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn import(path: &Path) -> Result<Self, TimelineError> {
        let text = std::fs::read_to_string(path).map_err(|source| TimelineError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json(&text)
    }

    pub fn total(&self) -> f64 {
        self.total_ms as f64 / 1000.0
    }

    pub fn count(&self, channel: EventChannel) -> usize {
        self.events.iter().filter(|e| e.channel == channel).count()
    }
}

fn is_word(token: &str) -> bool {
    token.chars().any(char::is_alphanumeric)
}

fn has_ellipsis(token: &str) -> bool {
    token.contains("...") || token.contains('\u{2026}')
}

struct Pending {
    event: TimelineEvent,
    offset: usize,
    /// Voice events waiting for the next spoken segment.
    open_voice: bool,
}

pub fn compile(
    t: &AugmentedTranscript,
    lex: &BehaviorLexicon,
    config: &TimingConfig,
) -> Result<BehaviorTimeline, TimelineError> {
    let (word_ms, pause_ms) = config.validate()?;
    let vocab = lex.vocabulary();
    let mut cursor = 0u64;
    let mut speech = Vec::new();
    let mut pending: Vec<Option<Pending>> = Vec::new();
    let mut drops = Vec::new();
    let mut last_gesture: Option<usize> = None;

    let drop = |drops: &mut Vec<DroppedTag>, channel, name: &str, offset, reason: String| {
        drops.push(DroppedTag {
            channel,
            name: name.to_string(),
            offset,
            reason,
        })
    };

    for seg in t.segments() {
        let channel = match seg.kind {
            SegmentKind::Text => {
                let before = speech.len();
                for token in seg.payload.split_whitespace() {
                    if is_word(token) {
                        speech.push(SpeechInterval {
                            word: token.to_string(),
                            start_ms: cursor,
                            end_ms: cursor + word_ms,
                        });
                        cursor += word_ms;
                    }
                    if has_ellipsis(token) {
                        cursor += pause_ms;
                    }
                }
                if speech.len() > before {
                    let end = speech.last().map_or(cursor, |w: &SpeechInterval| w.end_ms);
                    for p in pending.iter_mut().flatten().filter(|p| p.open_voice) {
                        p.event.duration_ms = end - p.event.start_ms;
                        p.open_voice = false;
                    }
                }
                continue;
            }
            kind => kind.channel().expect("tag segment"),
        };
        let Some(idx) = lex.resolve(&seg.payload, channel) else {
            if config.strict {
                return Err(TimelineError::UnknownTag {
                    channel,
                    name: seg.payload.clone(),
                    offset: seg.offset,
                });
            }
            drop(&mut drops, channel, &seg.payload, seg.offset, format!("unknown {channel} tag"));
            continue;
        };
        let name = vocab.name(idx).to_string();
        match channel {
            Channel::Gesture => {
                let duration = lex.gestures()[idx].duration_ms();
                let mut start = cursor;
                if let Some(prev) = last_gesture.and_then(|i| pending[i].as_mut()) {
                    let prev_end = prev.event.end_ms();
                    if prev_end > cursor {
                        match config.overlap {
                            OverlapPolicy::Queue => start = prev_end,
                            OverlapPolicy::DropNew => {
                                let reason = format!("overlaps {} (drop-new policy)", prev.event.name);
                                drop(&mut drops, channel, &name, seg.offset, reason);
                                continue;
                            }
                            OverlapPolicy::CutPrevious => {
                                prev.event.duration_ms = cursor - prev.event.start_ms;
                                if prev.event.duration_ms == 0 {
                                    let cut = pending[last_gesture.unwrap()].take().unwrap();
                                    let reason = format!("cut to zero length by {name}");
                                    drop(&mut drops, channel, &cut.event.name, cut.offset, reason);
                                }
                            }
                        }
                    }
                }
                last_gesture = Some(pending.len());
                pending.push(Some(Pending {
                    event: TimelineEvent {
                        channel: EventChannel::Gesture,
                        name,
                        start_ms: start,
                        duration_ms: duration,
                    },
                    offset: seg.offset,
                    open_voice: false,
                }));
            }
            Channel::Facial => pending.push(Some(Pending {
                event: TimelineEvent {
                    channel: EventChannel::Face,
                    name,
                    start_ms: cursor,
                    duration_ms: 0,
                },
                offset: seg.offset,
                open_voice: false,
            })),
            Channel::Audio if name == PAUSE_TAG => {
                pending.push(Some(Pending {
                    event: TimelineEvent {
                        channel: EventChannel::Voice,
                        name,
                        start_ms: cursor,
                        duration_ms: pause_ms,
                    },
                    offset: seg.offset,
                    open_voice: false,
                }));
                cursor += pause_ms;
            }
            Channel::Audio => pending.push(Some(Pending {
                event: TimelineEvent {
                    channel: EventChannel::Voice,
                    name,
                    start_ms: cursor,
                    duration_ms: 0,
                },
                offset: seg.offset,
                open_voice: true,
            })),
        }
    }

    let mut kept = Vec::new();
    for p in pending.into_iter().flatten() {
        if p.open_voice {
            drop(&mut drops, Channel::Audio, &p.event.name, p.offset, "no speech follows".into());
        } else if p.event.channel == EventChannel::Voice && p.event.duration_ms == 0 {
            drop(&mut drops, Channel::Audio, &p.event.name, p.offset, "zero-length pause".into());
        } else {
            kept.push(p);
        }
    }

    let speech_end = speech.last().map_or(0, |w| w.end_ms);
    let total_ms = kept
        .iter()
        .filter(|p| p.event.channel != EventChannel::Face)
        .map(|p| p.event.end_ms())
        .fold(speech_end, u64::max);

    // Each face holds until the next face starts, the last one until the end.
    let face_starts: Vec<u64> = kept
        .iter()
        .filter(|p| p.event.channel == EventChannel::Face)
        .map(|p| p.event.start_ms)
        .collect();
    let mut face = 0;
    let mut events = Vec::new();
    for mut p in kept {
        if p.event.channel == EventChannel::Face {
            face += 1;
            let end = face_starts.get(face).copied().unwrap_or(total_ms);
            if end <= p.event.start_ms {
                let reason = if face < face_starts.len() {
                    "superseded by a face tag at the same instant"
                } else {
                    "no time left in the turn"
                };
                drop(&mut drops, Channel::Facial, &p.event.name, p.offset, reason.into());
                continue;
            }
            p.event.duration_ms = end - p.event.start_ms;
        }
        events.push(p.event);
    }
    events.sort_by_key(|e| e.start_ms);
    drops.sort_by_key(|d| d.offset);

    Ok(BehaviorTimeline {
        total_ms,
        events,
        speech,
        drops,
    })
}
