//! Synthetic NER annotation: balanced few-shot prompts, a pluggable
//! annotator, hallucination filtering, entity re-verification and scoring
//! against a gold set.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::codec::{
    decode_tagged, encode_tagged, extract_pairs, DecodeMode, EntityTag, TaggedTranscript,
};
use crate::data::Utterance;
use crate::error::{Error, Result};
use crate::metrics::{edit_distance, ner_micro_f1, normalize_text, Prf};
use crate::params::seeded_rng;

const INSTRUCTION: &str = "Mark every named entity in the transcript. Use only these categories, \
wrapping each entity as '<open marker> phrase §E'. Copy the transcript otherwise unchanged.";

/// Instruction plus few-shot examples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptSpec {
    pub instruction: String,
    pub categories: Vec<EntityTag>,
    /// `(transcript, tagged text)` pairs.
    pub examples: Vec<(String, String)>,
}

impl PromptSpec {
    pub fn zero_shot() -> Self {
        PromptSpec {
            instruction: INSTRUCTION.to_string(),
            categories: EntityTag::ALL.to_vec(),
            examples: Vec::new(),
        }
    }

    pub fn few_shot(examples: &[TaggedTranscript]) -> Result<Self> {
        let examples = examples
            .iter()
            .map(|t| Ok((t.plain_text.clone(), encode_tagged(t)?)))
            .collect::<Result<_>>()?;
        let spec = PromptSpec {
            examples,
            ..Self::zero_shot()
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn n_shots(&self) -> usize {
        self.examples.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.categories != EntityTag::ALL {
            return Err(Error::Config(
                "prompt categories must be the seven entity tags".into(),
            ));
        }
        for (plain, tagged) in &self.examples {
            let t = decode_tagged(tagged, DecodeMode::Strict)?;
            if t.plain_text != plain.split_whitespace().collect::<Vec<_>>().join(" ") {
                return Err(Error::Config(format!(
                    "few-shot example {tagged:?} does not match {plain:?}"
                )));
            }
        }
        Ok(())
    }

    /// Prompt text sent alongside each transcript.
    pub fn render(&self) -> String {
        let mut s = self.instruction.clone();
        s.push('\n');
        for tag in &self.categories {
            s.push_str(&format!("{} = {}\n", tag.open_marker(), tag));
        }
        for (plain, tagged) in &self.examples {
            s.push_str(&format!("Input: {plain}\nOutput: {tagged}\n"));
        }
        s
    }
}

/// Selected-example coverage per tag.
fn coverage<'a>(items: impl IntoIterator<Item = &'a TaggedTranscript>) -> [usize; 7] {
    let mut c = [0; 7];
    for t in items {
        let tags: BTreeSet<EntityTag> = t.spans.iter().map(|s| s.tag).collect();
        for tag in tags {
            c[tag.index()] += 1;
        }
    }
    c
}

/// Smallest per-tag coverage count of a selection.
pub fn min_coverage(items: &[TaggedTranscript]) -> usize {
    coverage(items).into_iter().min().unwrap_or(0)
}

/// Greedy tag-balanced selection of `n` examples from `pool`. Each pick
/// raises the least-covered tag when any remaining example can.
pub fn balanced_fewshot(
    pool: &[TaggedTranscript],
    n: usize,
    seed: u64,
) -> Result<Vec<TaggedTranscript>> {
    if n > pool.len() {
        return Err(Error::Config(format!(
            "asked for {n} few-shot examples from a pool of {}",
            pool.len()
        )));
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    let pool_cov = coverage(pool);
    if let Some(t) = EntityTag::ALL.iter().find(|t| pool_cov[t.index()] == 0) {
        return Err(Error::Config(format!("few-shot pool has no {t} example")));
    }
    let mut order: Vec<usize> = (0..pool.len()).collect();
    order.shuffle(&mut seeded_rng(seed));
    let tags_of: Vec<BTreeSet<EntityTag>> = pool
        .iter()
        .map(|t| t.spans.iter().map(|s| s.tag).collect())
        .collect();
    let mut counts = [0usize; 7];
    let mut picked = Vec::with_capacity(n);
    for _ in 0..n {
        // raise the minimum, then shrink the set of tags at the minimum, then
        // keep the maximum low; shuffled order breaks what remains
        let key = |i: usize| {
            let mut after = counts;
            let mut load = 0;
            for t in &tags_of[i] {
                load += counts[t.index()];
                after[t.index()] += 1;
            }
            let min = *after.iter().min().expect("seven tags");
            let at_min = after.iter().filter(|c| **c == min).count();
            let max = *after.iter().max().expect("seven tags");
            (
                min,
                std::cmp::Reverse(at_min),
                std::cmp::Reverse(max),
                std::cmp::Reverse(load),
            )
        };
        let (k, _) = order
            .iter()
            .enumerate()
            .max_by(|(ka, a), (kb, b)| key(**a).cmp(&key(**b)).then(kb.cmp(ka)))
            .expect("n <= pool size");
        let i = order.remove(k);
        for t in &tags_of[i] {
            counts[t.index()] += 1;
        }
        picked.push(pool[i].clone());
    }
    Ok(picked)
}

/// Remote or mock annotator.
pub trait AnnotatorClient: Sync {
    /// Returns the transcript with inline entity markup.
    fn annotate(&self, prompt: &str, transcript: &str) -> Result<String>;
}

/// Keep/drop judge for unique `(tag, phrase)` pairs.
pub trait Verifier: Sync {
    /// One verdict per pair, `true` meaning keep.
    fn verify(&self, pairs: &[(EntityTag, String)]) -> Result<Vec<bool>>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RetryPolicy {
    pub attempts: usize,
    /// Delay before the second attempt; doubles after each failure.
    pub base_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            attempts: 3,
            base_delay_ms: 200,
        }
    }
}

impl RetryPolicy {
    /// Runs `f` until it succeeds or attempts run out. Returns the result
    /// and the number of attempts made.
    pub fn run<T>(&self, mut f: impl FnMut() -> Result<T>) -> (Result<T>, usize) {
        let attempts = self.attempts.max(1);
        let mut last = None;
        for k in 0..attempts {
            if k > 0 && self.base_delay_ms > 0 {
                std::thread::sleep(Duration::from_millis(self.base_delay_ms << (k - 1)));
            }
            match f() {
                Ok(v) => return (Ok(v), k + 1),
                Err(e) => {
                    log::warn!("attempt {} of {attempts} failed: {e}", k + 1);
                    last = Some(e);
                }
            }
        }
        (Err(last.expect("at least one attempt")), attempts)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnnotateOptions {
    /// Requests in flight at once.
    pub parallelism: usize,
    pub retry: RetryPolicy,
}

impl Default for AnnotateOptions {
    fn default() -> Self {
        AnnotateOptions {
            parallelism: 4,
            retry: RetryPolicy::default(),
        }
    }
}

/// One annotated transcript.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotatedItem {
    pub id: String,
    pub transcript: String,
    /// Raw client response.
    pub raw: Option<String>,
    /// Lenient decode of `raw`; empty spans when the call failed.
    pub tagged: TaggedTranscript,
    pub attempts: usize,
    pub error: Option<String>,
}

impl AnnotatedItem {
    pub fn failed(&self) -> bool {
        self.error.is_some()
    }

    /// Manifest entry carrying the original transcript and the annotation.
    pub fn to_utterance(&self) -> Utterance {
        let mut u = Utterance::new(self.id.clone(), self.transcript.clone());
        u.tagged = Some(self.tagged.clone());
        u
    }
}

/// Calls `client` once per utterance (plus retries) with at most
/// `opts.parallelism` requests in flight. Output follows input order;
/// failures are flagged, never dropped.
pub fn annotate_corpus(
    utts: &[Utterance],
    client: &dyn AnnotatorClient,
    spec: &PromptSpec,
    opts: &AnnotateOptions,
) -> Vec<AnnotatedItem> {
    let prompt = spec.render();
    let one = |u: &Utterance| -> AnnotatedItem {
        let (res, attempts) = opts.retry.run(|| client.annotate(&prompt, &u.transcript));
        match res {
            Ok(raw) => AnnotatedItem {
                id: u.id.clone(),
                transcript: u.transcript.clone(),
                tagged: decode_tagged(&raw, DecodeMode::Lenient).unwrap_or_default(),
                raw: Some(raw),
                attempts,
                error: None,
            },
            Err(e) => AnnotatedItem {
                id: u.id.clone(),
                transcript: u.transcript.clone(),
                raw: None,
                tagged: TaggedTranscript::untagged(u.transcript.clone()),
                attempts,
                error: Some(e.to_string()),
            },
        }
    };
    let workers = opts.parallelism.clamp(1, utts.len().max(1));
    let slots: Vec<Mutex<Option<AnnotatedItem>>> = utts.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= utts.len() {
                    break;
                }
                let item = one(&utts[i]);
                *slots[i].lock().expect("slot lock") = Some(item);
            });
        }
    });
    slots
        .into_iter()
        .map(|m| {
            m.into_inner()
                .expect("slot lock")
                .expect("every slot filled")
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FilterConfig {
    /// Largest word-level edit distance, relative to the transcript length,
    /// between the marker-free annotation and the transcript.
    pub max_edit_distance: f64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig {
            max_edit_distance: 0.05,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DroppedItems {
    pub count: usize,
    pub ids: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DroppedPairs {
    pub count: usize,
    pub pairs: Vec<(EntityTag, String)>,
    /// Spans removed across all items.
    pub spans_removed: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FilterReport {
    pub input: usize,
    pub dropped_hallucination: DroppedItems,
    pub dropped_reverify: DroppedPairs,
    pub output: usize,
}

impl FilterReport {
    /// Items in equal items out plus items dropped.
    pub fn reconciles(&self) -> bool {
        self.input == self.output + self.dropped_hallucination.count
            && self.dropped_hallucination.count == self.dropped_hallucination.ids.len()
            && self.dropped_reverify.count == self.dropped_reverify.pairs.len()
    }

    /// Report for the hallucination filter followed by re-verification.
    pub fn chain(first: &FilterReport, second: &FilterReport) -> FilterReport {
        FilterReport {
            input: first.input,
            dropped_hallucination: first.dropped_hallucination.clone(),
            dropped_reverify: second.dropped_reverify.clone(),
            output: second.output,
        }
    }
}

/// Why an annotation was judged hallucinated.
#[derive(Debug, Clone, PartialEq)]
pub enum Hallucination {
    /// A span phrase absent from the transcript.
    UnsupportedSpan(String),
    /// Normalised edit distance above the limit.
    TextDrift(f64),
}

/// Word-level edit distance between marker-free annotation and transcript,
/// over the transcript's word count.
pub fn text_drift(transcript: &str, annotated_plain: &str) -> f64 {
    let r = normalize_text(transcript);
    let h = normalize_text(annotated_plain);
    let d = edit_distance(&r, &h);
    if r.is_empty() {
        return if h.is_empty() { 0.0 } else { 1.0 };
    }
    d as f64 / r.len() as f64
}

pub fn check_hallucination(item: &AnnotatedItem, cfg: &FilterConfig) -> Option<Hallucination> {
    let haystack = item.transcript.to_lowercase();
    if let Some(s) = item
        .tagged
        .spans
        .iter()
        .find(|s| !haystack.contains(&s.phrase.to_lowercase()))
    {
        return Some(Hallucination::UnsupportedSpan(s.phrase.clone()));
    }
    let d = text_drift(&item.transcript, &item.tagged.plain_text);
    (d > cfg.max_edit_distance).then_some(Hallucination::TextDrift(d))
}

/// Drops items whose annotation invents entities or rewrites the text.
/// Failed items carry no annotation and pass through.
pub fn hallucination_filter(
    items: &[AnnotatedItem],
    cfg: &FilterConfig,
) -> (Vec<AnnotatedItem>, FilterReport) {
    let mut kept = Vec::new();
    let mut dropped = DroppedItems::default();
    for item in items {
        match (item.failed(), check_hallucination(item, cfg)) {
            (false, Some(h)) => {
                log::debug!("dropping {}: {h:?}", item.id);
                dropped.count += 1;
                dropped.ids.push(item.id.clone());
            }
            _ => kept.push(item.clone()),
        }
    }
    let report = FilterReport {
        input: items.len(),
        output: kept.len(),
        dropped_hallucination: dropped,
        dropped_reverify: DroppedPairs::default(),
    };
    (kept, report)
}

/// Sends every unique `(tag, phrase)` pair to `verifier` in batches and
/// strips rejected pairs from all items. A failed batch keeps its pairs.
pub fn reverify_entities(
    items: &[AnnotatedItem],
    verifier: &dyn Verifier,
    batch_size: usize,
) -> (Vec<AnnotatedItem>, FilterReport) {
    let unique: Vec<(EntityTag, String)> = items
        .iter()
        .flat_map(|i| i.tagged.spans.iter().map(|s| (s.tag, s.phrase.clone())))
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let mut rejected = BTreeSet::new();
    for batch in unique.chunks(batch_size.max(1)) {
        match verifier.verify(batch) {
            Ok(v) if v.len() == batch.len() => {
                rejected.extend(
                    batch
                        .iter()
                        .zip(v)
                        .filter(|(_, keep)| !keep)
                        .map(|(p, _)| p.clone()),
                );
            }
            Ok(v) => log::warn!(
                "verifier returned {} verdicts for {} pairs; keeping the batch",
                v.len(),
                batch.len()
            ),
            Err(e) => log::warn!("verification batch failed, keeping its pairs: {e}"),
        }
    }
    let mut removed = 0;
    let kept: Vec<AnnotatedItem> = items
        .iter()
        .map(|item| {
            let mut item = item.clone();
            let before = item.tagged.spans.len();
            item.tagged
                .spans
                .retain(|s| !rejected.contains(&(s.tag, s.phrase.clone())));
            for (k, s) in item.tagged.spans.iter_mut().enumerate() {
                s.order_index = k;
            }
            removed += before - item.tagged.spans.len();
            item
        })
        .collect();
    let pairs: Vec<_> = rejected.into_iter().collect();
    let report = FilterReport {
        input: items.len(),
        output: kept.len(),
        dropped_hallucination: DroppedItems::default(),
        dropped_reverify: DroppedPairs {
            count: pairs.len(),
            pairs,
            spans_removed: removed,
        },
    };
    (kept, report)
}

/// Pair-level micro P/R/F1 of annotations against aligned gold.
pub fn eval_annotator(pred: &[TaggedTranscript], gold: &[TaggedTranscript]) -> Result<Prf> {
    let p: Vec<_> = pred.iter().map(extract_pairs).collect();
    let g: Vec<_> = gold.iter().map(extract_pairs).collect();
    ner_micro_f1(&g, &p)
}

/// Span counts per tag, every tag present.
pub fn tag_counts<'a>(
    items: impl IntoIterator<Item = &'a TaggedTranscript>,
) -> BTreeMap<EntityTag, usize> {
    let mut c: BTreeMap<EntityTag, usize> = EntityTag::ALL.iter().map(|t| (*t, 0)).collect();
    for t in items {
        for s in &t.spans {
            *c.entry(s.tag).or_insert(0) += 1;
        }
    }
    c
}

/// Per-split span counts per tag.
pub fn dataset_stats(
    splits: &BTreeMap<String, Vec<Utterance>>,
) -> BTreeMap<String, BTreeMap<EntityTag, usize>> {
    splits
        .iter()
        .map(|(name, utts)| {
            (
                name.clone(),
                tag_counts(utts.iter().filter_map(|u| u.tagged.as_ref())),
            )
        })
        .collect()
}

/// Blocking HTTP JSON annotator: POSTs `{prompt, transcript}` and reads
/// `{tagged}`. Verification reuses the endpoint with one `TAG<TAB>phrase`
/// line per pair as the transcript and expects one `keep`/`drop` line back.
pub struct HttpClient {
    endpoint: String,
    token: Option<String>,
    agent: ureq::Agent,
}

#[derive(Serialize)]
struct HttpRequest<'a> {
    prompt: &'a str,
    transcript: &'a str,
}

#[derive(Deserialize)]
struct HttpResponse {
    tagged: String,
}

pub const VERIFY_PROMPT: &str = "For each line 'TAG<TAB>phrase', answer 'keep' if the phrase is a \
meaningful entity of that category and 'drop' otherwise, one answer per line.";

impl HttpClient {
    pub fn new(endpoint: impl Into<String>, token: Option<String>, timeout: Duration) -> Self {
        let agent = ureq::Agent::new_with_config(
            ureq::Agent::config_builder()
                .timeout_global(Some(timeout))
                .build(),
        );
        HttpClient {
            endpoint: endpoint.into(),
            token,
            agent,
        }
    }

    fn call(&self, prompt: &str, transcript: &str) -> Result<String> {
        let mut req = self.agent.post(&self.endpoint);
        if let Some(t) = &self.token {
            req = req.header("Authorization", &format!("Bearer {t}"));
        }
        let mut resp = req
            .send_json(HttpRequest { prompt, transcript })
            .map_err(|e| Error::Annotator(format!("{}: {e}", self.endpoint)))?;
        let body: HttpResponse = resp
            .body_mut()
            .read_json()
            .map_err(|e| Error::Annotator(format!("{}: bad response: {e}", self.endpoint)))?;
        Ok(body.tagged)
    }
}

impl AnnotatorClient for HttpClient {
    fn annotate(&self, prompt: &str, transcript: &str) -> Result<String> {
        self.call(prompt, transcript)
    }
}

impl Verifier for HttpClient {
    fn verify(&self, pairs: &[(EntityTag, String)]) -> Result<Vec<bool>> {
        let lines: Vec<String> = pairs.iter().map(|(t, p)| format!("{t}\t{p}")).collect();
        let answer = self.call(VERIFY_PROMPT, &lines.join("\n"))?;
        answer
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| match l.trim().to_ascii_lowercase().as_str() {
                "keep" => Ok(true),
                "drop" => Ok(false),
                other => Err(Error::Annotator(format!("unexpected verdict {other:?}"))),
            })
            .collect()
    }
}

/// Deterministic clients and verifiers for tests and offline runs.
pub mod mock {
    use super::*;
    use std::collections::HashMap;

    /// Returns the gold annotation for known transcripts, the bare
    /// transcript otherwise.
    #[derive(Debug, Clone, Default)]
    pub struct EchoClient {
        gold: HashMap<String, String>,
    }

    impl EchoClient {
        pub fn from_utterances(utts: &[Utterance]) -> Result<Self> {
            let mut gold = HashMap::new();
            for u in utts {
                if let Some(t) = &u.tagged {
                    gold.insert(u.transcript.clone(), encode_tagged(t)?);
                }
            }
            Ok(EchoClient { gold })
        }
    }

    impl AnnotatorClient for EchoClient {
        fn annotate(&self, _prompt: &str, transcript: &str) -> Result<String> {
            Ok(self
                .gold
                .get(transcript)
                .cloned()
                .unwrap_or_else(|| transcript.to_string()))
        }
    }

    /// Tags every whole-word occurrence of a lexicon phrase, longest first.
    #[derive(Debug, Clone, Default)]
    pub struct LexiconClient {
        entries: Vec<(String, EntityTag)>,
    }

    impl LexiconClient {
        pub fn new(entries: impl IntoIterator<Item = (String, EntityTag)>) -> Self {
            let mut entries: Vec<_> = entries
                .into_iter()
                .map(|(p, t)| (p.to_lowercase(), t))
                .collect();
            entries.sort_by(|a, b| {
                b.0.split(' ')
                    .count()
                    .cmp(&a.0.split(' ').count())
                    .then(a.cmp(b))
            });
            entries.dedup_by(|a, b| a.0 == b.0);
            LexiconClient { entries }
        }

        /// Lexicon built from the gold spans of `utts`.
        pub fn from_utterances(utts: &[Utterance]) -> Self {
            Self::new(
                utts.iter()
                    .filter_map(|u| u.tagged.as_ref())
                    .flat_map(|t| t.spans.iter().map(|s| (s.phrase.clone(), s.tag))),
            )
        }

        pub fn tag(&self, transcript: &str) -> TaggedTranscript {
            let words: Vec<&str> = transcript.split_whitespace().collect();
            let lower: Vec<String> = words.iter().map(|w| w.to_lowercase()).collect();
            let mut spans = Vec::new();
            let mut i = 0;
            'outer: while i < words.len() {
                for (phrase, tag) in &self.entries {
                    let n = phrase.split(' ').count();
                    if i + n <= words.len() && lower[i..i + n].join(" ") == *phrase {
                        spans.push((*tag, words[i..i + n].join(" ")));
                        i += n;
                        continue 'outer;
                    }
                }
                i += 1;
            }
            let plain = words.join(" ");
            TaggedTranscript {
                spans: spans
                    .into_iter()
                    .enumerate()
                    .map(|(k, (tag, phrase))| crate::codec::EntitySpan {
                        tag,
                        phrase,
                        order_index: k,
                    })
                    .collect(),
                plain_text: plain,
            }
        }
    }

    impl AnnotatorClient for LexiconClient {
        fn annotate(&self, _prompt: &str, transcript: &str) -> Result<String> {
            Ok(encode_tagged(&self.tag(transcript))?)
        }
    }

    /// Returns marker-free noise derived from the transcript and seed.
    #[derive(Debug, Clone, Copy)]
    pub struct GarbageClient {
        pub seed: u64,
    }

    impl AnnotatorClient for GarbageClient {
        fn annotate(&self, _prompt: &str, transcript: &str) -> Result<String> {
            use rand::Rng;
            use sha2::{Digest, Sha256};
            let h = Sha256::digest(transcript.as_bytes());
            let mut rng =
                seeded_rng(self.seed ^ u64::from_le_bytes(h[..8].try_into().expect("8 bytes")));
            let n = rng.random_range(1..6);
            Ok((0..n)
                .map(|_| {
                    (0..rng.random_range(2..7))
                        .map(|_| rng.random_range(b'a'..=b'z') as char)
                        .collect::<String>()
                })
                .collect::<Vec<_>>()
                .join(" "))
        }
    }

    /// Fails every call for the listed transcripts and counts calls.
    pub struct FailingClient<C> {
        pub inner: C,
        pub fail_on: BTreeSet<String>,
        pub calls: AtomicUsize,
    }

    impl<C> FailingClient<C> {
        pub fn new(inner: C, fail_on: impl IntoIterator<Item = String>) -> Self {
            FailingClient {
                inner,
                fail_on: fail_on.into_iter().collect(),
                calls: AtomicUsize::new(0),
            }
        }
    }

    impl<C: AnnotatorClient> AnnotatorClient for FailingClient<C> {
        fn annotate(&self, prompt: &str, transcript: &str) -> Result<String> {
            self.calls.fetch_add(1, Ordering::Relaxed);
            if self.fail_on.contains(transcript) {
                return Err(Error::Annotator("injected failure".into()));
            }
            self.inner.annotate(prompt, transcript)
        }
    }

    /// Appends an invented entity to the listed transcripts' annotations.
    pub struct HallucinatingClient<C> {
        pub inner: C,
        pub targets: BTreeSet<String>,
        pub invented: (EntityTag, String),
    }

    impl<C: AnnotatorClient> AnnotatorClient for HallucinatingClient<C> {
        fn annotate(&self, prompt: &str, transcript: &str) -> Result<String> {
            let out = self.inner.annotate(prompt, transcript)?;
            if !self.targets.contains(transcript) {
                return Ok(out);
            }
            let (tag, phrase) = &self.invented;
            Ok(format!("{out} {} {phrase} §E", tag.open_marker()))
        }
    }

    /// Keeps everything.
    #[derive(Debug, Clone, Copy, Default)]
    pub struct ApproveAll;

    impl Verifier for ApproveAll {
        fn verify(&self, pairs: &[(EntityTag, String)]) -> Result<Vec<bool>> {
            Ok(vec![true; pairs.len()])
        }
    }

    /// Drops the listed pairs.
    #[derive(Debug, Clone, Default)]
    pub struct DenyPairs(pub BTreeSet<(EntityTag, String)>);

    impl Verifier for DenyPairs {
        fn verify(&self, pairs: &[(EntityTag, String)]) -> Result<Vec<bool>> {
            Ok(pairs.iter().map(|p| !self.0.contains(p)).collect())
        }
    }

    /// Drops phrases of at most `max_len` characters.
    #[derive(Debug, Clone, Copy)]
    pub struct ShortPhraseVerifier {
        pub max_len: usize,
    }

    impl Verifier for ShortPhraseVerifier {
        fn verify(&self, pairs: &[(EntityTag, String)]) -> Result<Vec<bool>> {
            Ok(pairs
                .iter()
                .map(|(_, p)| p.chars().count() > self.max_len)
                .collect())
        }
    }

    /// Always errors.
    #[derive(Debug, Clone, Copy, Default)]
    pub struct BrokenVerifier;

    impl Verifier for BrokenVerifier {
        fn verify(&self, _pairs: &[(EntityTag, String)]) -> Result<Vec<bool>> {
            Err(Error::Annotator("verifier offline".into()))
        }
    }
}
