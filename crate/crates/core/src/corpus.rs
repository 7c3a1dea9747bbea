//! Synthetic desk corpus: short templated sentences with entity tags and
//! word-driven sentiment, paired with pseudo-mel features.

use std::path::{Path, PathBuf};

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{EntityTag, TaggedTranscript};
use crate::data::{write_manifest, Utterance};
use crate::error::{Error, Result};
use crate::metrics::Sentiment;
use crate::params::seeded_rng;

fn lexicon(tag: EntityTag) -> &'static [&'static str] {
    match tag {
        EntityTag::Person => &[
            "john", "mary", "anna", "peter", "lucy", "omar", "david", "sara",
        ],
        EntityTag::Place => &[
            "paris", "rome", "texas", "london", "berlin", "ohio", "cairo",
        ],
        EntityTag::When => &["monday", "today", "june", "friday", "tonight"],
        EntityTag::Norp => &["french", "german", "dutch", "greek", "irish"],
        EntityTag::Org => &["nasa", "google", "unesco", "fifa", "nato"],
        EntityTag::Quant => &["two", "ten", "five", "six", "nine"],
        EntityTag::Law => &["gdpr", "the charter", "title ix"],
    }
}

const POSITIVE: [&str; 4] = ["great", "good", "happy", "nice"];
const NEGATIVE: [&str; 4] = ["bad", "sad", "awful", "poor"];
const NEUTRAL: [&str; 4] = ["long", "busy", "quiet", "plain"];

const TEMPLATES: [&str; 22] = [
    "{PERSON} went to {PLACE}",
    "{PERSON} met {PERSON} {WHEN}",
    "the {NORP} team won",
    "{PERSON} works at {ORG}",
    "{QUANT} men from {PLACE}",
    "{ORG} cited {LAW}",
    "we saw {PERSON} on {WHEN}",
    "{NORP} fans in {PLACE}",
    "{ORG} hired {QUANT} people",
    "{PERSON} read {LAW}",
    "it rained in {PLACE} {WHEN}",
    "{PERSON} had a {ADJ} day",
    "a {ADJ} trip to {PLACE}",
    "{ORG} had a {ADJ} year",
    "the {NORP} food was {ADJ}",
    "{PERSON} felt {ADJ} {WHEN}",
    "that was {ADJ}",
    "the cat sat down",
    "we ate some bread",
    "it was a {ADJ} show",
    "call me {WHEN}",
    "{QUANT} of them left",
];

/// Sizes of the generated splits.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub seed: u64,
    pub asr_train: usize,
    pub asr_dev: usize,
    pub ner_train: usize,
    pub ner_dev: usize,
    pub ft_train: usize,
    pub ft_dev: usize,
    pub ft_test: usize,
    pub max_chars: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            seed: 7,
            asr_train: 400,
            asr_dev: 50,
            ner_train: 400,
            ner_dev: 50,
            ft_train: 200,
            ft_dev: 50,
            ft_test: 50,
            max_chars: 32,
        }
    }
}

/// One generated sentence with its labels.
pub fn sample_sentence<R: Rng + ?Sized>(
    rng: &mut R,
    max_chars: usize,
) -> (TaggedTranscript, Sentiment) {
    loop {
        let template = TEMPLATES.choose(rng).expect("templates");
        let mut words = Vec::new();
        let mut spans: Vec<(EntityTag, &str)> = Vec::new();
        let mut sentiment = Sentiment::Neutral;
        for piece in template.split(' ') {
            if let Some(slot) = piece.strip_prefix('{').and_then(|p| p.strip_suffix('}')) {
                if slot == "ADJ" {
                    let (class, pool) = match rng.random_range(0..3) {
                        0 => (Sentiment::Positive, &POSITIVE),
                        1 => (Sentiment::Negative, &NEGATIVE),
                        _ => (Sentiment::Neutral, &NEUTRAL),
                    };
                    sentiment = class;
                    words.push(*pool.choose(rng).expect("pool"));
                } else {
                    let tag: EntityTag = slot.parse().expect("template tag");
                    let phrase = *lexicon(tag).choose(rng).expect("lexicon");
                    words.push(phrase);
                    spans.push((tag, phrase));
                }
            } else {
                words.push(piece);
            }
        }
        let text = words.join(" ");
        if text.chars().count() <= max_chars {
            return (TaggedTranscript::new(text, spans), sentiment);
        }
    }
}

fn split(prefix: &str, n: usize, stream: u64, cfg: &CorpusConfig, labels: bool) -> Vec<Utterance> {
    let mut rng = seeded_rng(cfg.seed.wrapping_mul(1_000_003).wrapping_add(stream));
    (0..n)
        .map(|i| {
            let (tagged, sentiment) = sample_sentence(&mut rng, cfg.max_chars);
            let mut u = Utterance::new(format!("{prefix}-{i:04}"), tagged.plain_text.clone());
            u.feature_seed = Some(rng.random());
            if labels {
                u.tagged = Some(tagged);
                u.sentiment = Some(sentiment);
            }
            u
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub asr_train: Vec<Utterance>,
    pub asr_dev: Vec<Utterance>,
    pub ner_train: Vec<Utterance>,
    pub ner_dev: Vec<Utterance>,
    pub ft_train: Vec<Utterance>,
    pub ft_dev: Vec<Utterance>,
    pub ft_test: Vec<Utterance>,
}

/// Manifest file names inside a corpus directory.
pub const SPLITS: [&str; 7] = [
    "asr_train",
    "asr_dev",
    "ner_train",
    "ner_dev",
    "ft_train",
    "ft_dev",
    "ft_test",
];

pub fn manifest_path(dir: &Path, split: &str) -> PathBuf {
    dir.join(format!("{split}.jsonl"))
}

impl Corpus {
    pub fn generate(cfg: &CorpusConfig) -> Result<Corpus> {
        if cfg.max_chars < 12 {
            return Err(Error::Config("max_chars must be at least 12".into()));
        }
        Ok(Corpus {
            asr_train: split("asr-train", cfg.asr_train, 1, cfg, false),
            asr_dev: split("asr-dev", cfg.asr_dev, 2, cfg, false),
            ner_train: split("ner-train", cfg.ner_train, 3, cfg, true),
            ner_dev: split("ner-dev", cfg.ner_dev, 4, cfg, true),
            ft_train: split("ft-train", cfg.ft_train, 5, cfg, true),
            ft_dev: split("ft-dev", cfg.ft_dev, 6, cfg, true),
            ft_test: split("ft-test", cfg.ft_test, 7, cfg, true),
        })
    }

    fn parts(&self) -> [&Vec<Utterance>; 7] {
        [
            &self.asr_train,
            &self.asr_dev,
            &self.ner_train,
            &self.ner_dev,
            &self.ft_train,
            &self.ft_dev,
            &self.ft_test,
        ]
    }

    /// Writes one manifest per split into `dir`.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut out = Vec::new();
        for (name, utts) in SPLITS.iter().zip(self.parts()) {
            let p = manifest_path(dir, name);
            write_manifest(utts, &p)?;
            out.push(p);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::{decode_tagged, encode_tagged, DecodeMode};
    use crate::data::load_manifest;

    #[test]
    fn sentences_are_short_valid_and_cover_every_tag() {
        let c = Corpus::generate(&CorpusConfig::default()).unwrap();
        let mut seen = std::collections::BTreeSet::new();
        let mut classes = std::collections::BTreeSet::new();
        for u in c.ft_train.iter().chain(&c.ner_train) {
            assert!(u.transcript.chars().count() <= 32);
            let t = u.tagged.as_ref().unwrap();
            let s = encode_tagged(t).unwrap();
            assert_eq!(&decode_tagged(&s, DecodeMode::Strict).unwrap(), t);
            seen.extend(t.spans.iter().map(|s| s.tag));
            classes.insert(u.sentiment.unwrap());
        }
        assert_eq!(seen.len(), 7);
        assert_eq!(classes.len(), 3);
        assert!(c.asr_train.iter().all(|u| u.tagged.is_none()));
    }

    #[test]
    fn generation_is_seeded() {
        let cfg = CorpusConfig::default();
        assert_eq!(
            Corpus::generate(&cfg).unwrap(),
            Corpus::generate(&cfg).unwrap()
        );
        let other = CorpusConfig {
            seed: 8,
            ..cfg.clone()
        };
        assert_ne!(
            Corpus::generate(&cfg).unwrap().ft_train,
            Corpus::generate(&other).unwrap().ft_train
        );
    }

    #[test]
    fn manifests_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = CorpusConfig {
            asr_train: 5,
            ner_train: 5,
            ft_train: 5,
            ..Default::default()
        };
        let c = Corpus::generate(&cfg).unwrap();
        c.write(dir.path()).unwrap();
        assert_eq!(
            load_manifest(&manifest_path(dir.path(), "ft_train")).unwrap(),
            c.ft_train
        );
        assert_eq!(
            load_manifest(&manifest_path(dir.path(), "asr_dev")).unwrap(),
            c.asr_dev
        );
    }
}
