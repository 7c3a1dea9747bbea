//! Inline markup for named-entity annotations.
//!
//! Entities are written into transcripts with one open symbol per tag and a
//! shared close symbol, each separated from its neighbours by a single space:
//!
//! ```text
//! i saw §P john §E in §L paris §E
//! ```
//!
//! The same markup is used for decoder targets and for scoring generations,
//! so decoding has a strict mode (training data, manifests) and a lenient
//! mode that never fails on malformed model output.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::CodecError;
use crate::metrics::normalize_text;

/// First character of every reserved marker.
pub const MARKER_LEAD: char = '§';

/// Shared close marker.
pub const CLOSE_MARKER: &str = "§E";

/// Separates the transcript from the sentiment label in SA targets.
pub const SENTIMENT_MARKER: &str = "§SENT";

/// Open marker per tag, in reporting order.
pub const OPEN_MARKERS: [(EntityTag, &str); 7] = [
    (EntityTag::Person, "§P"),
    (EntityTag::Place, "§L"),
    (EntityTag::When, "§W"),
    (EntityTag::Norp, "§N"),
    (EntityTag::Org, "§O"),
    (EntityTag::Quant, "§Q"),
    (EntityTag::Law, "§X"),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum EntityTag {
    Person,
    Place,
    When,
    Norp,
    Org,
    Quant,
    Law,
}

impl EntityTag {
    pub const ALL: [EntityTag; 7] = [
        EntityTag::Person,
        EntityTag::Place,
        EntityTag::When,
        EntityTag::Norp,
        EntityTag::Org,
        EntityTag::Quant,
        EntityTag::Law,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<EntityTag> {
        Self::ALL.get(i).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            EntityTag::Person => "PERSON",
            EntityTag::Place => "PLACE",
            EntityTag::When => "WHEN",
            EntityTag::Norp => "NORP",
            EntityTag::Org => "ORG",
            EntityTag::Quant => "QUANT",
            EntityTag::Law => "LAW",
        }
    }

    pub fn open_marker(self) -> &'static str {
        OPEN_MARKERS[self.index()].1
    }

    pub fn from_open_marker(marker: &str) -> Option<EntityTag> {
        OPEN_MARKERS
            .iter()
            .find(|(_, m)| *m == marker)
            .map(|(t, _)| *t)
    }
}

impl fmt::Display for EntityTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EntityTag {
    type Err = CodecError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        EntityTag::ALL
            .iter()
            .copied()
            .find(|t| t.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| CodecError::UnknownTag(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EntitySpan {
    pub tag: EntityTag,
    pub phrase: String,
    pub order_index: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaggedTranscript {
    pub plain_text: String,
    pub spans: Vec<EntitySpan>,
}

impl TaggedTranscript {
    pub fn new(plain_text: impl Into<String>, spans: Vec<(EntityTag, &str)>) -> Self {
        TaggedTranscript {
            plain_text: plain_text.into(),
            spans: spans
                .into_iter()
                .enumerate()
                .map(|(i, (tag, phrase))| EntitySpan {
                    tag,
                    phrase: phrase.to_string(),
                    order_index: i,
                })
                .collect(),
        }
    }

    pub fn untagged(plain_text: impl Into<String>) -> Self {
        TaggedTranscript {
            plain_text: plain_text.into(),
            spans: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecodeMode {
    Strict,
    Lenient,
}

/// True if `s` contains any reserved marker character.
pub fn has_reserved(s: &str) -> bool {
    s.contains(MARKER_LEAD)
}

/// Wraps every span of `t` in its inline markers.
///
/// Spans are located left to right in `plain_text`, each starting after the
/// previous one ends, at whitespace boundaries.
pub fn encode_tagged(t: &TaggedTranscript) -> Result<String, CodecError> {
    let plain = t.plain_text.as_str();
    let mut out = String::with_capacity(plain.len() + 6 * t.spans.len());
    let mut cursor = 0usize;
    for span in &t.spans {
        if span.phrase.is_empty() {
            return Err(CodecError::EmptySpan {
                position: span.order_index,
            });
        }
        if has_reserved(&span.phrase) {
            return Err(CodecError::ReservedInPhrase {
                phrase: span.phrase.clone(),
            });
        }
        let start = find_word_aligned(plain, &span.phrase, cursor).ok_or_else(|| {
            CodecError::PhraseNotFound {
                phrase: span.phrase.clone(),
                offset: cursor,
            }
        })?;
        let end = start + span.phrase.len();
        out.push_str(&plain[cursor..start]);
        out.push_str(span.tag.open_marker());
        out.push(' ');
        out.push_str(&span.phrase);
        out.push(' ');
        out.push_str(CLOSE_MARKER);
        cursor = end;
    }
    out.push_str(&plain[cursor..]);
    Ok(out)
}

fn find_word_aligned(haystack: &str, needle: &str, from: usize) -> Option<usize> {
    let mut search = from;
    while search <= haystack.len() {
        let rel = haystack[search..].find(needle)?;
        let start = search + rel;
        let end = start + needle.len();
        let left_ok = start == 0
            || haystack[..start]
                .chars()
                .next_back()
                .is_some_and(char::is_whitespace);
        let right_ok = end == haystack.len()
            || haystack[end..]
                .chars()
                .next()
                .is_some_and(char::is_whitespace);
        if left_ok && right_ok {
            return Some(start);
        }
        search = start + haystack[start..].chars().next().map_or(1, char::len_utf8);
    }
    None
}

enum Token<'a> {
    Open(EntityTag, &'a str),
    Close,
    Reserved(&'a str),
    Word(&'a str),
}

fn all_markers() -> impl Iterator<Item = &'static str> {
    // Longest first so "§SENT" is not split as "§S" + "ENT" by a shorter match.
    std::iter::once(SENTIMENT_MARKER)
        .chain(OPEN_MARKERS.iter().map(|(_, m)| *m))
        .chain(std::iter::once(CLOSE_MARKER))
}

/// Splits text into whitespace-separated words, also breaking markers that
/// were glued onto neighbouring text by a generator.
fn tokenize(s: &str) -> Vec<Token<'_>> {
    let mut out = Vec::new();
    for raw in s.split_whitespace() {
        let mut rest = raw;
        while !rest.is_empty() {
            match rest.find(MARKER_LEAD) {
                None => {
                    out.push(Token::Word(rest));
                    rest = "";
                }
                Some(0) => {
                    if let Some(m) = all_markers().find(|m| rest.starts_with(m)) {
                        let tok = &rest[..m.len()];
                        out.push(if m == CLOSE_MARKER {
                            Token::Close
                        } else if let Some(tag) = EntityTag::from_open_marker(m) {
                            Token::Open(tag, tok)
                        } else {
                            Token::Reserved(tok)
                        });
                        rest = &rest[m.len()..];
                    } else {
                        let n = MARKER_LEAD.len_utf8();
                        out.push(Token::Reserved(&rest[..n]));
                        rest = &rest[n..];
                    }
                }
                Some(i) => {
                    out.push(Token::Word(&rest[..i]));
                    rest = &rest[i..];
                }
            }
        }
    }
    out
}

/// Parses inline markup back into plain text and spans.
///
/// Whitespace in the returned plain text is normalised to single spaces.
/// Strict mode rejects unbalanced, nested, empty and unknown markers. Lenient
/// mode drops unmatched or nested markers (keeping their words) and never
/// fails.
pub fn decode_tagged(s: &str, mode: DecodeMode) -> Result<TaggedTranscript, CodecError> {
    let strict = mode == DecodeMode::Strict;
    let mut words: Vec<&str> = Vec::new();
    let mut spans = Vec::new();
    // (tag, marker text, token position, index of first word in span)
    let mut open: Option<(EntityTag, &str, usize, usize)> = None;

    for (pos, tok) in tokenize(s).into_iter().enumerate() {
        match tok {
            Token::Word(w) => words.push(w),
            Token::Open(tag, marker) => {
                if let Some((_, _, _, _)) = open {
                    if strict {
                        return Err(CodecError::Nested {
                            marker: marker.to_string(),
                            position: pos,
                        });
                    }
                } else {
                    open = Some((tag, marker, pos, words.len()));
                }
            }
            Token::Close => match open.take() {
                Some((tag, _, _, first)) => {
                    if first == words.len() {
                        if strict {
                            return Err(CodecError::EmptySpan { position: pos });
                        }
                        continue;
                    }
                    let order_index = spans.len();
                    spans.push(EntitySpan {
                        tag,
                        phrase: words[first..].join(" "),
                        order_index,
                    });
                }
                None => {
                    if strict {
                        return Err(CodecError::Unbalanced {
                            marker: CLOSE_MARKER.to_string(),
                            position: pos,
                        });
                    }
                }
            },
            Token::Reserved(r) => {
                if strict {
                    return Err(CodecError::UnknownMarker {
                        token: r.to_string(),
                    });
                }
            }
        }
    }
    if let Some((_, marker, pos, _)) = open {
        if strict {
            return Err(CodecError::Unbalanced {
                marker: marker.to_string(),
                position: pos,
            });
        }
    }
    Ok(TaggedTranscript {
        plain_text: words.join(" "),
        spans,
    })
}

/// Removes every reserved marker and normalises whitespace.
pub fn strip_markers(s: &str) -> String {
    tokenize(s)
        .into_iter()
        .filter_map(|t| match t {
            Token::Word(w) => Some(w),
            _ => None,
        })
        .collect::<Vec<_>>()
        .join(" ")
}

pub type PairMultiset = BTreeMap<(EntityTag, String), usize>;

/// Multiset of `(tag, normalised phrase)` pairs. Phrases that normalise to
/// nothing are skipped.
pub fn extract_pairs(t: &TaggedTranscript) -> PairMultiset {
    let mut out = PairMultiset::new();
    for span in &t.spans {
        let phrase = normalize_text(&span.phrase).join(" ");
        if phrase.is_empty() {
            continue;
        }
        *out.entry((span.tag, phrase)).or_insert(0) += 1;
    }
    out
}
