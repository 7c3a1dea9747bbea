//! Character-level vocabulary with single-token markers, roles and prompts.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::codec::{encode_tagged, CLOSE_MARKER, OPEN_MARKERS, SENTIMENT_MARKER};
use crate::data::Utterance;
use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const EOS: usize = 1;
pub const UNK: usize = 2;
pub const USER: usize = 3;
pub const ASSISTANT: usize = 4;

pub const USER_TEXT: &str = "USER:";
pub const ASSISTANT_TEXT: &str = "ASSISTANT:";

const CHARS: &str = " abcdefghijklmnopqrstuvwxyz0123456789'.,-?!";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Task {
    Asr,
    Ner,
    Sa,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::Asr, Task::Ner, Task::Sa];

    pub fn prompt_text(self) -> &'static str {
        match self {
            Task::Asr => "Transcribe the speech.",
            Task::Ner => "Transcribe the speech and mark named entities.",
            Task::Sa => "Transcribe the speech and state the sentiment.",
        }
    }

    /// Response text for an utterance, or `None` when it lacks the labels.
    pub fn target_text(self, u: &Utterance) -> Result<Option<String>> {
        Ok(match self {
            Task::Asr => Some(u.transcript.clone()),
            Task::Ner => match &u.tagged {
                Some(t) => Some(encode_tagged(t)?),
                None => None,
            },
            Task::Sa => u
                .sentiment
                .map(|s| format!("{} {SENTIMENT_MARKER} {s}", u.transcript)),
        })
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Asr => "ASR",
            Task::Ner => "NER",
            Task::Sa => "SA",
        })
    }
}

impl FromStr for Task {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "ASR" => Ok(Task::Asr),
            "NER" => Ok(Task::Ner),
            "SA" => Ok(Task::Sa),
            _ => Err(Error::Config(format!("unknown task {s:?}"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Tokenizer {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    /// Marker strings, longest first, for greedy matching.
    markers: Vec<(String, usize)>,
}

impl Default for Tokenizer {
    fn default() -> Self {
        Self::new()
    }
}

impl Tokenizer {
    pub fn new() -> Self {
        let mut tokens: Vec<String> = ["<pad>", "<eos>", "<unk>", USER_TEXT, ASSISTANT_TEXT]
            .iter()
            .map(|s| s.to_string())
            .collect();
        tokens.extend(Task::ALL.iter().map(|t| t.prompt_text().to_string()));
        let first_marker = tokens.len();
        tokens.extend(OPEN_MARKERS.iter().map(|(_, m)| m.to_string()));
        tokens.push(CLOSE_MARKER.to_string());
        tokens.push(SENTIMENT_MARKER.to_string());
        let end_marker = tokens.len();
        tokens.extend(CHARS.chars().map(String::from));
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        let mut markers: Vec<(String, usize)> = (first_marker..end_marker)
            .map(|i| (tokens[i].clone(), i))
            .collect();
        markers.sort_by_key(|(m, _)| std::cmp::Reverse(m.len()));
        Tokenizer {
            tokens,
            index,
            markers,
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.tokens.len()
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn prompt_id(&self, task: Task) -> usize {
        self.index[task.prompt_text()]
    }

    /// Markers become one token each; other characters map one-to-one,
    /// unknown ones to `UNK`. Text is lowercased first.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        let mut out = Vec::new();
        let mut rest = text;
        'outer: while let Some(c) = rest.chars().next() {
            if c == crate::codec::MARKER_LEAD {
                for (m, id) in &self.markers {
                    if rest.starts_with(m.as_str()) {
                        out.push(*id);
                        rest = &rest[m.len()..];
                        continue 'outer;
                    }
                }
            }
            let lower: String = c.to_lowercase().collect();
            out.push(self.index.get(&lower).copied().unwrap_or(UNK));
            rest = &rest[c.len_utf8()..];
        }
        out
    }

    /// Concatenates token strings up to the first `EOS`, skipping `PAD`.
    pub fn decode(&self, ids: &[usize]) -> String {
        let mut s = String::new();
        for &id in ids {
            match id {
                EOS => break,
                PAD => {}
                _ => s.push_str(self.tokens.get(id).map(String::as_str).unwrap_or("<unk>")),
            }
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::{decode_tagged, DecodeMode};
    use proptest::prelude::*;

    #[test]
    fn vocab_has_markers_roles_and_prompts() {
        let t = Tokenizer::new();
        assert_eq!(t.token(USER), "USER:");
        assert_eq!(t.token(ASSISTANT), "ASSISTANT:");
        for (_, m) in OPEN_MARKERS {
            assert_eq!(t.encode(m).len(), 1);
        }
        assert_eq!(t.encode("§SENT").len(), 1);
        assert_eq!(t.encode("§E").len(), 1);
        for task in Task::ALL {
            assert_eq!(t.token(t.prompt_id(task)), task.prompt_text());
        }
        let mut seen = std::collections::HashSet::new();
        assert!(t.tokens.iter().all(|s| seen.insert(s)));
    }

    #[test]
    fn encode_decode_examples() {
        let t = Tokenizer::new();
        let ids = t.encode("§P john §E went");
        assert_eq!(ids.len(), 1 + 6 + 1 + 5);
        assert_eq!(t.decode(&ids), "§P john §E went");
        assert_eq!(t.encode("A~"), vec![t.encode("a")[0], UNK]);
        assert_eq!(t.decode(&[t.encode("a")[0], EOS, t.encode("b")[0]]), "a");
    }

    #[test]
    fn target_texts() {
        let mut u = Utterance::new("u", "good day");
        assert_eq!(Task::Asr.target_text(&u).unwrap().unwrap(), "good day");
        assert!(Task::Ner.target_text(&u).unwrap().is_none());
        u.sentiment = Some(crate::metrics::Sentiment::Positive);
        assert_eq!(
            Task::Sa.target_text(&u).unwrap().unwrap(),
            "good day §SENT positive"
        );
    }

    proptest! {
        #[test]
        fn tagged_round_trip_through_tokens(t in crate::codec::tests::arb_transcript()) {
            let tok = Tokenizer::new();
            let s = encode_tagged(&t).unwrap();
            let back = tok.decode(&tok.encode(&s));
            prop_assert_eq!(decode_tagged(&back, DecodeMode::Strict).unwrap(), t);
        }
    }
}
