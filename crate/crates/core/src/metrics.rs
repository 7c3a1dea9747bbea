//! Evaluation metrics: WER, entity micro-F1 and label-F1, sentiment macro-F1
//! and the SLUE composite score.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::codec::{EntityTag, PairMultiset};
use crate::error::{Error, Result};

/// Lowercases, deletes every character that is neither alphanumeric nor
/// whitespace, then splits on whitespace.
pub fn normalize_text(s: &str) -> Vec<String> {
    let cleaned: String = s
        .chars()
        .filter(|c| c.is_alphanumeric() || c.is_whitespace())
        .flat_map(char::to_lowercase)
        .collect();
    cleaned.split_whitespace().map(str::to_string).collect()
}

/// Unit-cost Levenshtein distance over arbitrary token slices.
pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    if a.is_empty() {
        return b.len();
    }
    if b.is_empty() {
        return a.len();
    }
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut curr = vec![0usize; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        curr[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            curr[j + 1] = sub.min(prev[j + 1] + 1).min(curr[j] + 1);
        }
        std::mem::swap(&mut prev, &mut curr);
    }
    prev[b.len()]
}

/// Word error rate in percent for a single reference.
pub fn wer<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::Metric("WER undefined for an empty reference".into()));
    }
    Ok(100.0 * edit_distance(reference, hypothesis) as f64 / reference.len() as f64)
}

/// Corpus WER in percent: total edits over total reference words.
pub fn corpus_wer<T: PartialEq>(pairs: &[(Vec<T>, Vec<T>)]) -> Result<f64> {
    let (mut edits, mut words) = (0usize, 0usize);
    for (r, h) in pairs {
        edits += edit_distance(r, h);
        words += r.len();
    }
    if words == 0 {
        return Err(Error::Metric("WER undefined: no reference words".into()));
    }
    Ok(100.0 * edits as f64 / words as f64)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub pred: usize,
    pub gold: usize,
}

impl Counts {
    pub fn prf(&self) -> Prf {
        Prf::from_counts(self.tp, self.pred, self.gold)
    }
}

impl std::ops::AddAssign for Counts {
    fn add_assign(&mut self, o: Counts) {
        self.tp += o.tp;
        self.pred += o.pred;
        self.gold += o.gold;
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Prf {
    pub fn from_counts(tp: usize, pred: usize, gold: usize) -> Prf {
        let ratio = |n: usize, d: usize| if d == 0 { 0.0 } else { n as f64 / d as f64 };
        Prf::new(ratio(tp, pred), ratio(tp, gold))
    }

    pub fn new(precision: f64, recall: f64) -> Prf {
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Prf {
            precision,
            recall,
            f1,
        }
    }
}

fn intersect_count<K: Ord>(a: &BTreeMap<K, usize>, b: &BTreeMap<K, usize>) -> usize {
    a.iter()
        .map(|(k, n)| b.get(k).map_or(0, |m| (*n).min(*m)))
        .sum()
}

fn check_aligned(gold: usize, pred: usize) -> Result<()> {
    if gold != pred {
        return Err(Error::Metric(format!(
            "gold has {gold} utterances but prediction has {pred}"
        )));
    }
    Ok(())
}

/// Corpus counts of `(tag, phrase)` pair matches, overall and per tag.
pub fn ner_pair_counts(
    gold: &[PairMultiset],
    pred: &[PairMultiset],
) -> Result<(Counts, BTreeMap<EntityTag, Counts>)> {
    check_aligned(gold.len(), pred.len())?;
    let mut total = Counts::default();
    let mut per_tag: BTreeMap<EntityTag, Counts> = BTreeMap::new();
    for (g, p) in gold.iter().zip(pred) {
        total += Counts {
            tp: intersect_count(g, p),
            pred: p.values().sum(),
            gold: g.values().sum(),
        };
        for tag in EntityTag::ALL {
            let gt: BTreeMap<_, _> = g
                .iter()
                .filter(|((t, _), _)| *t == tag)
                .map(|(k, v)| (k.clone(), *v))
                .collect();
            let pt: BTreeMap<_, _> = p
                .iter()
                .filter(|((t, _), _)| *t == tag)
                .map(|(k, v)| (k.clone(), *v))
                .collect();
            if gt.is_empty() && pt.is_empty() {
                continue;
            }
            *per_tag.entry(tag).or_default() += Counts {
                tp: intersect_count(&gt, &pt),
                pred: pt.values().sum(),
                gold: gt.values().sum(),
            };
        }
    }
    Ok((total, per_tag))
}

/// Micro-averaged F1 over `(tag, phrase)` pairs.
pub fn ner_micro_f1(gold: &[PairMultiset], pred: &[PairMultiset]) -> Result<Prf> {
    Ok(ner_pair_counts(gold, pred)?.0.prf())
}

fn tag_multiset(p: &PairMultiset) -> BTreeMap<EntityTag, usize> {
    let mut out = BTreeMap::new();
    for ((tag, _), n) in p {
        *out.entry(*tag).or_insert(0) += n;
    }
    out
}

pub fn ner_label_counts(gold: &[PairMultiset], pred: &[PairMultiset]) -> Result<Counts> {
    check_aligned(gold.len(), pred.len())?;
    let mut total = Counts::default();
    for (g, p) in gold.iter().zip(pred) {
        let (g, p) = (tag_multiset(g), tag_multiset(p));
        total += Counts {
            tp: intersect_count(&g, &p),
            pred: p.values().sum(),
            gold: g.values().sum(),
        };
    }
    Ok(total)
}

/// Micro-averaged F1 over tags only; phrase transcription errors are ignored.
pub fn ner_label_f1(gold: &[PairMultiset], pred: &[PairMultiset]) -> Result<Prf> {
    Ok(ner_label_counts(gold, pred)?.prf())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sentiment {
    Positive,
    Negative,
    Neutral,
}

impl Sentiment {
    pub const ALL: [Sentiment; 3] = [Sentiment::Positive, Sentiment::Negative, Sentiment::Neutral];

    pub fn as_str(self) -> &'static str {
        match self {
            Sentiment::Positive => "positive",
            Sentiment::Negative => "negative",
            Sentiment::Neutral => "neutral",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Sentiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Sentiment {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Sentiment::ALL
            .iter()
            .copied()
            .find(|c| c.as_str().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::Metric(format!("unknown sentiment class {s:?}")))
    }
}

/// Per-class precision/recall/F1 for sentiment. A missing prediction counts
/// against recall of the gold class only.
pub fn sa_per_class(
    gold: &[Sentiment],
    pred: &[Option<Sentiment>],
) -> Result<BTreeMap<Sentiment, Prf>> {
    check_aligned(gold.len(), pred.len())?;
    let mut counts = [Counts::default(); 3];
    for (g, p) in gold.iter().zip(pred) {
        counts[g.index()].gold += 1;
        if let Some(p) = p {
            counts[p.index()].pred += 1;
            if p == g {
                counts[g.index()].tp += 1;
            }
        }
    }
    Ok(Sentiment::ALL
        .iter()
        .map(|c| (*c, counts[c.index()].prf()))
        .collect())
}

/// Unweighted mean of the three per-class F1 scores; a class absent from both
/// sides scores 0, so the denominator is always 3.
pub fn sa_macro_f1_partial(gold: &[Sentiment], pred: &[Option<Sentiment>]) -> Result<f64> {
    let per = sa_per_class(gold, pred)?;
    Ok(per.values().map(|p| p.f1).sum::<f64>() / Sentiment::ALL.len() as f64)
}

pub fn sa_macro_f1(gold: &[Sentiment], pred: &[Sentiment]) -> Result<f64> {
    let pred: Vec<_> = pred.iter().copied().map(Some).collect();
    sa_macro_f1_partial(gold, &pred)
}

/// Parses class labels, rejecting anything outside the three classes.
pub fn parse_sentiments<S: AsRef<str>>(labels: &[S]) -> Result<Vec<Sentiment>> {
    labels.iter().map(|s| s.as_ref().parse()).collect()
}

/// Inputs to the composite score, all in percent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlueInputs {
    pub wer_asr_vp: f64,
    pub wer_asr_vc: f64,
    pub f1_ner_vp: f64,
    pub f1_sa_vc: f64,
}

/// `(1/3) * ((100 - mean WER) + NER F1 + SA F1)`, unrounded.
pub fn slue_score(x: &SlueInputs) -> f64 {
    ((100.0 - (x.wer_asr_vp + x.wer_asr_vc) / 2.0) + x.f1_ner_vp + x.f1_sa_vc) / 3.0
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsReport {
    /// Corpus WER in percent.
    pub wer: Option<f64>,
    pub ner: Option<Prf>,
    pub ner_label: Option<Prf>,
    /// Ratio in [0, 1].
    pub sa_macro_f1: Option<f64>,
    pub per_class: BTreeMap<String, Prf>,
    pub slue: Option<f64>,
    pub utterances: usize,
}

impl MetricsReport {
    /// JSON with every real number printed in fixed 4-decimal notation, so
    /// identical runs produce identical bytes.
    pub fn to_json(&self) -> String {
        fn num(x: f64) -> String {
            if x.is_finite() {
                format!("{x:.4}")
            } else {
                "null".into()
            }
        }
        fn prf(p: &Prf) -> String {
            format!(
                "{{\"precision\": {}, \"recall\": {}, \"f1\": {}}}",
                num(p.precision),
                num(p.recall),
                num(p.f1)
            )
        }
        let opt = |x: Option<f64>| x.map_or("null".to_string(), num);
        let mut s = String::from("{\n");
        let _ = writeln!(s, "  \"utterances\": {},", self.utterances);
        let _ = writeln!(s, "  \"wer\": {},", opt(self.wer));
        let _ = writeln!(
            s,
            "  \"ner\": {},",
            self.ner.as_ref().map_or("null".into(), prf)
        );
        let _ = writeln!(
            s,
            "  \"ner_label\": {},",
            self.ner_label.as_ref().map_or("null".into(), prf)
        );
        let _ = writeln!(s, "  \"sa_macro_f1\": {},", opt(self.sa_macro_f1));
        s.push_str("  \"per_class\": {");
        for (i, (k, v)) in self.per_class.iter().enumerate() {
            if i > 0 {
                s.push(',');
            }
            let _ = write!(
                s,
                "\n    {}: {}",
                serde_json::Value::from(k.as_str()),
                prf(v)
            );
        }
        if !self.per_class.is_empty() {
            s.push_str("\n  ");
        }
        s.push_str("},\n");
        let _ = writeln!(s, "  \"slue\": {}", opt(self.slue));
        s.push_str("}\n");
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::{extract_pairs, TaggedTranscript};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn pairs(items: &[(EntityTag, &str)]) -> PairMultiset {
        let mut m = PairMultiset::new();
        for (t, p) in items {
            *m.entry((*t, p.to_string())).or_insert(0) += 1;
        }
        m
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(normalize_text("Hello, World!"), vec!["hello", "world"]);
        assert!(normalize_text("").is_empty());
        assert_eq!(normalize_text("it's  A--test"), vec!["its", "atest"]);
    }

    #[test]
    fn wer_examples() {
        let r = ["the", "cat", "sat"];
        assert_eq!(wer(&r, &r).unwrap(), 0.0);
        assert_abs_diff_eq!(
            wer(&r, &["the", "cat"]).unwrap(),
            100.0 / 3.0,
            epsilon = 1e-12
        );
        assert!(wer::<&str>(&[], &["x"]).is_err());
        // insertions can push WER above 100
        assert_eq!(wer(&["a"], &["b", "c", "d"]).unwrap(), 300.0);
    }

    #[test]
    fn corpus_wer_pools_counts() {
        let p = vec![
            (vec!["a", "b"], vec!["a", "b"]),
            (vec!["c", "d", "e", "f"], vec!["c"]),
        ];
        assert_abs_diff_eq!(corpus_wer(&p).unwrap(), 50.0, epsilon = 1e-12);
    }

    #[test]
    fn micro_f1_examples() {
        let gold = vec![pairs(&[(EntityTag::Person, "john")])];
        let pred = vec![pairs(&[(EntityTag::Person, "jon")])];
        assert_eq!(ner_pair_counts(&gold, &pred).unwrap().0.tp, 0);
        assert_eq!(ner_label_counts(&gold, &pred).unwrap().tp, 1);
        assert_eq!(ner_micro_f1(&gold, &gold).unwrap(), Prf::new(1.0, 1.0));

        let gold = vec![pairs(&[
            (EntityTag::Person, "john"),
            (EntityTag::Place, "paris"),
        ])];
        let pred = vec![pairs(&[(EntityTag::Person, "john")])];
        let prf = ner_micro_f1(&gold, &pred).unwrap();
        assert_eq!(prf.precision, 1.0);
        assert_eq!(prf.recall, 0.5);
        assert_abs_diff_eq!(prf.f1, 2.0 / 3.0, epsilon = 1e-12);

        assert!(ner_micro_f1(&gold, &[]).is_err());
        assert!(ner_label_f1(&gold, &[]).is_err());
    }

    #[test]
    fn label_f1_ignores_phrase_errors() {
        let gold = vec![pairs(&[
            (EntityTag::Person, "john"),
            (EntityTag::Law, "gdpr"),
        ])];
        let pred = vec![pairs(&[
            (EntityTag::Person, "jon"),
            (EntityTag::Law, "gdp"),
        ])];
        assert_eq!(ner_label_f1(&gold, &pred).unwrap().f1, 1.0);
        assert_eq!(ner_micro_f1(&gold, &pred).unwrap().f1, 0.0);
    }

    #[test]
    fn micro_f1_through_codec() {
        let g = TaggedTranscript::new("John went", vec![(EntityTag::Person, "John")]);
        let p = TaggedTranscript::new("john went", vec![(EntityTag::Person, "john")]);
        let f = ner_micro_f1(&[extract_pairs(&g)], &[extract_pairs(&p)]).unwrap();
        assert_eq!(f.f1, 1.0);
    }

    #[test]
    fn macro_f1_examples() {
        use Sentiment::*;
        let g = [Positive, Negative, Neutral];
        assert_eq!(sa_macro_f1(&g, &g).unwrap(), 1.0);
        let per = sa_per_class(&g, &[Some(Positive); 3]).unwrap();
        assert_abs_diff_eq!(per[&Positive].f1, 0.5, epsilon = 1e-12);
        assert_eq!(per[&Negative].f1, 0.0);
        assert_eq!(per[&Neutral].f1, 0.0);
        assert_abs_diff_eq!(
            sa_macro_f1(&g, &[Positive; 3]).unwrap(),
            0.5 / 3.0,
            epsilon = 1e-12
        );
        // a single-class corpus predicted perfectly still divides by 3
        assert_abs_diff_eq!(
            sa_macro_f1(&[Neutral; 4], &[Neutral; 4]).unwrap(),
            1.0 / 3.0,
            epsilon = 1e-12
        );
        assert!(parse_sentiments(&["positive", "mixed"]).is_err());
        assert_eq!(parse_sentiments(&["Neutral"]).unwrap(), vec![Neutral]);
        assert!(sa_macro_f1(&g, &[Positive]).is_err());
    }

    #[test]
    fn slue_examples() {
        let s = slue_score(&SlueInputs {
            wer_asr_vp: 10.6,
            wer_asr_vc: 11.5,
            f1_ner_vp: 68.9,
            f1_sa_vc: 65.9,
        });
        assert_abs_diff_eq!(s, 74.583_333_333, epsilon = 1e-6);
        let s = slue_score(&SlueInputs {
            wer_asr_vp: 14.7,
            wer_asr_vc: 16.0,
            f1_ner_vp: 59.3,
            f1_sa_vc: 60.9,
        });
        assert_abs_diff_eq!(s, 68.283_333_333, epsilon = 1e-6);
        let s = slue_score(&SlueInputs {
            wer_asr_vp: 0.0,
            wer_asr_vc: 0.0,
            f1_ner_vp: 100.0,
            f1_sa_vc: 100.0,
        });
        assert_eq!(s, 100.0);
    }

    #[test]
    fn report_json_is_fixed_point() {
        let mut r = MetricsReport {
            wer: Some(12.5),
            ner: Some(Prf::new(1.0, 0.5)),
            utterances: 3,
            ..Default::default()
        };
        r.per_class.insert("PERSON".into(), Prf::new(1.0, 1.0));
        let s = r.to_json();
        assert!(s.contains("\"wer\": 12.5000"));
        assert!(s.contains("\"f1\": 0.6667"));
        let v: serde_json::Value = serde_json::from_str(&s).unwrap();
        assert_eq!(v["per_class"]["PERSON"]["f1"], 1.0);
        assert!(v["slue"].is_null());
    }

    proptest! {
        #[test]
        fn edit_distance_triangle(
            a in proptest::collection::vec(0u8..4, 0..7),
            b in proptest::collection::vec(0u8..4, 0..7),
            c in proptest::collection::vec(0u8..4, 0..7),
        ) {
            prop_assert_eq!(edit_distance(&a, &a), 0);
            prop_assert_eq!(edit_distance(&a, &b), edit_distance(&b, &a));
            prop_assert!(edit_distance(&a, &c) <= edit_distance(&a, &b) + edit_distance(&b, &c));
        }

        #[test]
        fn slue_wer_sensitivity(
            vp in 0.0f64..50.0, vc in 0.0f64..50.0, n in 0.0f64..100.0, s in 0.0f64..100.0,
            d in 0.0f64..10.0,
        ) {
            let base = slue_score(&SlueInputs { wer_asr_vp: vp, wer_asr_vc: vc, f1_ner_vp: n, f1_sa_vc: s });
            let bumped = slue_score(&SlueInputs { wer_asr_vp: vp + d, wer_asr_vc: vc, f1_ner_vp: n, f1_sa_vc: s });
            prop_assert!((base - bumped - d / 6.0).abs() < 1e-9);
        }
    }
}
