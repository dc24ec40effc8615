//! Tag-augmented transcripts.
//!
//! A speech turn interleaves spoken text with three tag shapes:
//! `{f: expression}`, `{g: gesture}` and `[audio tag]`. Parsing is lossless:
//! every segment keeps its exact source bytes, so serializing a parsed
//! transcript reproduces the input.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::ParseError;
use crate::lexicon::Channel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SegmentKind {
    Text,
    FacialTag,
    GestureTag,
    AudioTag,
}

impl SegmentKind {
    pub fn channel(self) -> Option<Channel> {
        match self {
            SegmentKind::Text => None,
            SegmentKind::FacialTag => Some(Channel::Facial),
            SegmentKind::GestureTag => Some(Channel::Gesture),
            SegmentKind::AudioTag => Some(Channel::Audio),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub kind: SegmentKind,
    /// Text content, or the trimmed tag name.
    pub payload: String,
    /// Byte offset of the segment in the source.
    pub offset: usize,
    raw: String,
}

impl Segment {
    /// Exact source bytes, delimiters included.
    pub fn raw(&self) -> &str {
        &self.raw
    }

    pub fn is_tag(&self) -> bool {
        self.kind != SegmentKind::Text
    }

    pub fn span(&self) -> Range<usize> {
        self.offset..self.offset + self.raw.len()
    }
}

/// Segment description used to assemble a transcript programmatically.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Piece {
    Text(String),
    Facial(String),
    Gesture(String),
    Audio(String),
}

impl Piece {
    fn render(&self, out: &mut String) {
        match self {
            Piece::Text(t) => out.push_str(t),
            Piece::Facial(n) => {
                out.push_str("{f: ");
                out.push_str(n);
                out.push('}');
            }
            Piece::Gesture(n) => {
                out.push_str("{g: ");
                out.push_str(n);
                out.push('}');
            }
            Piece::Audio(n) => {
                out.push('[');
                out.push_str(n);
                out.push(']');
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AugmentedTranscript {
    source: String,
    segments: Vec<Segment>,
}

impl AugmentedTranscript {
    pub fn parse(source: &str) -> Result<Self, ParseError> {
        let bytes = source.as_bytes();
        let mut segments = Vec::new();
        let mut text_start = 0;
        let mut i = 0;

        let flush = |segments: &mut Vec<Segment>, start: usize, end: usize| {
            if end > start {
                segments.push(Segment {
                    kind: SegmentKind::Text,
                    payload: source[start..end].to_string(),
                    offset: start,
                    raw: source[start..end].to_string(),
                });
            }
        };

        // Delimiters are ASCII, so byte scanning never splits a code point.
        while i < bytes.len() {
            match bytes[i] {
                open @ (b'{' | b'[') => {
                    flush(&mut segments, text_start, i);
                    let close = if open == b'{' { b'}' } else { b']' };
                    let mut j = i + 1;
                    loop {
                        match bytes.get(j) {
                            None => {
                                return Err(ParseError::Unbalanced {
                                    offset: i,
                                    delimiter: open as char,
                                })
                            }
                            Some(&b) if b == close => break,
                            Some(b'{' | b'[') => return Err(ParseError::Nested { offset: j }),
                            Some(b'}' | b']') => {
                                return Err(ParseError::Unbalanced {
                                    offset: i,
                                    delimiter: open as char,
                                })
                            }
                            Some(_) => j += 1,
                        }
                    }
                    let inner = &source[i + 1..j];
                    let (kind, name) = if open == b'{' {
                        classify_brace(inner, i)?
                    } else {
                        (SegmentKind::AudioTag, inner.trim())
                    };
                    if name.is_empty() {
                        return Err(ParseError::EmptyTag { offset: i });
                    }
                    segments.push(Segment {
                        kind,
                        payload: name.to_string(),
                        offset: i,
                        raw: source[i..=j].to_string(),
                    });
                    i = j + 1;
                    text_start = i;
                }
                close @ (b'}' | b']') => {
                    return Err(ParseError::Unbalanced {
                        offset: i,
                        delimiter: close as char,
                    })
                }
                _ => i += 1,
            }
        }
        flush(&mut segments, text_start, bytes.len());

        Ok(AugmentedTranscript {
            source: source.to_string(),
            segments,
        })
    }

    /// Renders pieces in canonical tag form and parses the result.
    pub fn from_pieces(pieces: &[Piece]) -> Result<Self, ParseError> {
        let mut out = String::new();
        for p in pieces {
            p.render(&mut out);
        }
        Self::parse(&out)
    }

    pub fn serialize(&self) -> String {
        self.segments.iter().map(|s| s.raw.as_str()).collect()
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    pub fn tags(&self) -> impl Iterator<Item = &Segment> {
        self.segments.iter().filter(|s| s.is_tag())
    }

    /// Spoken text with tags removed.
    pub fn plain_text(&self) -> String {
        self.segments
            .iter()
            .filter(|s| s.kind == SegmentKind::Text)
            .map(|s| s.payload.as_str())
            .collect()
    }
}

fn classify_brace(inner: &str, offset: usize) -> Result<(SegmentKind, &str), ParseError> {
    let trimmed = inner.trim_start();
    let mut chars = trimmed.chars();
    let kind = match (chars.next(), chars.next()) {
        (Some('f' | 'F'), Some(':')) => SegmentKind::FacialTag,
        (Some('g' | 'G'), Some(':')) => SegmentKind::GestureTag,
        _ => {
            return Err(ParseError::UnknownTagShape {
                offset,
                content: inner.to_string(),
            })
        }
    };
    Ok((kind, trimmed[2..].trim()))
}

/// Parses a line-delimited file of speech turns; blank lines are skipped.
/// Line numbers are 1-based.
pub fn parse_lines(text: &str) -> Vec<(usize, Result<AugmentedTranscript, ParseError>)> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| (n + 1, AugmentedTranscript::parse(l)))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EmphasisKind {
    Caps,
    Ellipsis,
    ExclamationOrQuestion,
    /// Immediately doubled word ("yeah, yeah"); heuristic.
    Repetition,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmphasisAnnotation {
    /// Byte range in the transcript source.
    pub span: Range<usize>,
    pub kind: EmphasisKind,
}

/// Emphasis markers found in the text segments of a transcript.
pub fn detect_emphasis(t: &AugmentedTranscript) -> Vec<EmphasisAnnotation> {
    let mut out = Vec::new();
    for seg in t.segments.iter().filter(|s| s.kind == SegmentKind::Text) {
        scan_text(&seg.payload, seg.offset, &mut out);
    }
    out.sort_by_key(|a| (a.span.start, a.kind));
    out
}

fn scan_text(text: &str, base: usize, out: &mut Vec<EmphasisAnnotation>) {
    let push = |out: &mut Vec<EmphasisAnnotation>, r: Range<usize>, kind| {
        out.push(EmphasisAnnotation {
            span: base + r.start..base + r.end,
            kind,
        })
    };

    for (range, word) in alpha_runs(text) {
        if word.chars().count() >= 2 && word.chars().all(char::is_uppercase) {
            push(out, range, EmphasisKind::Caps);
        }
    }

    let mut dots: Option<usize> = None;
    for (i, c) in text.char_indices().chain(std::iter::once((text.len(), '\0'))) {
        match (c, dots) {
            ('.', None) => dots = Some(i),
            ('.', Some(_)) => {}
            (_, Some(start)) => {
                if i - start >= 3 {
                    push(out, start..i, EmphasisKind::Ellipsis);
                }
                dots = None;
            }
            _ => {}
        }
        match c {
            '\u{2026}' => push(out, i..i + c.len_utf8(), EmphasisKind::Ellipsis),
            '!' | '?' => push(out, i..i + 1, EmphasisKind::ExclamationOrQuestion),
            _ => {}
        }
    }

    let words = word_runs(text);
    for pair in words.windows(2) {
        let ((r1, w1), (r2, w2)) = (&pair[0], &pair[1]);
        let between = &text[r1.end..r2.start];
        if w1.to_lowercase() == w2.to_lowercase()
            && between.chars().all(|c| c.is_whitespace() || c == ',')
        {
            push(out, r1.start..r2.end, EmphasisKind::Repetition);
        }
    }
}

fn runs(text: &str, keep: impl Fn(char) -> bool) -> Vec<(Range<usize>, &str)> {
    let mut out = Vec::new();
    let mut start = None;
    for (i, c) in text.char_indices().chain(std::iter::once((text.len(), ' '))) {
        match (keep(c) && i < text.len(), start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                out.push((s..i, &text[s..i]));
                start = None;
            }
            _ => {}
        }
    }
    out
}

fn alpha_runs(text: &str) -> Vec<(Range<usize>, &str)> {
    runs(text, char::is_alphabetic)
}

fn word_runs(text: &str) -> Vec<(Range<usize>, &str)> {
    runs(text, |c| c.is_alphanumeric() || c == '\'' || c == '\u{2019}')
}
