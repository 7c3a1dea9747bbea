//! Staged training: per-stage configs, optimizer, schedule, dev-based
//! checkpoint selection, curricula and evaluation.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::beam::DecodeConfig;
use crate::checkpoint;
use crate::codec::{
    decode_tagged, extract_pairs, strip_markers, DecodeMode, EntityTag, SENTIMENT_MARKER,
};
use crate::corpus::manifest_path;
use crate::data::{augment, load_manifest, AugmentConfig, MelFeature, Utterance};
use crate::error::{Error, Result};
use crate::graph::{Graph, Tensor};
use crate::metrics::{
    corpus_wer, ner_label_f1, ner_micro_f1, normalize_text, sa_macro_f1_partial, sa_per_class,
    MetricsReport, Prf, Sentiment,
};
use crate::model::{assemble_input, lm_loss, AssembledInput, LoraConfig, Model, ModelConfig};
use crate::params::{seeded_rng, Bindings, Init, ParamGroup, ParamStore};
use crate::regularizer::{
    classifier_graph, classifier_loss, init_classifier, mix_loss_graph, ner_targets, pos_weights,
    sa_targets, ClassTargets, ClassifierConfig, ClassifierTask, LossMixConfig,
};
use crate::tokenizer::{Task, Tokenizer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMetric {
    Wer,
    MicroF1,
    MacroF1,
}

impl SelectionMetric {
    /// Strictly better; ties keep the earlier epoch.
    pub fn better(self, candidate: f64, incumbent: f64) -> bool {
        match self {
            SelectionMetric::Wer => candidate < incumbent,
            _ => candidate > incumbent,
        }
    }

    /// Reads the metric off a report.
    pub fn value(self, r: &MetricsReport) -> Option<f64> {
        match self {
            SelectionMetric::Wer => r.wer,
            SelectionMetric::MicroF1 => r.ner.map(|p| p.f1),
            SelectionMetric::MacroF1 => r.sa_macro_f1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegularizerConfig {
    pub alpha: f64,
    pub task: ClassifierTask,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FreezeConfig {
    pub encoder: bool,
    pub decoder: bool,
}

impl Default for FreezeConfig {
    fn default() -> Self {
        FreezeConfig {
            encoder: true,
            decoder: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub name: String,
    pub train_manifest: PathBuf,
    pub dev_manifest: PathBuf,
    pub tasks: Vec<Task>,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub warmup_steps: usize,
    #[serde(default)]
    pub regularizer: Option<RegularizerConfig>,
    #[serde(default)]
    pub lora: Option<LoraConfig>,
    #[serde(default)]
    pub freeze: FreezeConfig,
    #[serde(default)]
    pub augmentation: bool,
    pub selection_metric: SelectionMetric,
    pub seed: u64,
}

impl StageConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("stage {}: {m}", self.name)));
        if self.epochs == 0 {
            return bad("epochs must be >= 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if self.tasks.is_empty() {
            return bad("no tasks");
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad("lr must be positive");
        }
        match self.selection_metric {
            SelectionMetric::MicroF1 if !self.tasks.contains(&Task::Ner) => {
                return bad("micro-F1 selection needs the NER task")
            }
            SelectionMetric::MacroF1 if !self.tasks.contains(&Task::Sa) => {
                return bad("macro-F1 selection needs the SA task")
            }
            _ => {}
        }
        if let Some(r) = &self.regularizer {
            LossMixConfig { alpha: r.alpha }.validate()?;
            let need = match r.task {
                ClassifierTask::Ner => Task::Ner,
                ClassifierTask::Sa => Task::Sa,
            };
            if !self.tasks.contains(&need) {
                return bad("regularizer task is not among the stage tasks");
            }
        }
        if let Some(l) = &self.lora {
            if l.rank == 0 {
                return bad("LoRA rank must be >= 1");
            }
        }
        Ok(())
    }

    /// Parameter groups the optimizer may touch.
    pub fn trainable_groups(&self) -> BTreeSet<ParamGroup> {
        let mut g = BTreeSet::from([ParamGroup::Adapter]);
        if !self.freeze.encoder {
            g.insert(ParamGroup::Encoder);
        }
        if !self.freeze.decoder {
            g.insert(ParamGroup::Decoder);
        }
        if self.lora.is_some() {
            g.insert(ParamGroup::Lora);
        }
        if self.regularizer.is_some() {
            g.insert(ParamGroup::Classifier);
        }
        g
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            grad_clip: Some(1.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Curriculum {
    pub name: String,
    #[serde(default)]
    pub model: ModelConfig,
    pub model_seed: u64,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub decode: DecodeConfig,
    #[serde(default)]
    pub augment: AugmentConfig,
    pub test_manifest: PathBuf,
    pub stages: Vec<StageConfig>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PresetScale {
    Desk,
    Full,
}

pub const PRESETS: [&str; 3] = ["random", "ls-asr", "ls-asr+ner"];

impl Curriculum {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.decode.validate()?;
        if self.stages.is_empty() {
            return Err(Error::Config("curriculum has no stages".into()));
        }
        self.stages.iter().try_for_each(StageConfig::validate)
    }

    pub fn from_json(s: &str) -> Result<Curriculum> {
        let c: Curriculum = serde_json::from_str(s)?;
        c.validate()?;
        Ok(c)
    }

    /// Named presets over a corpus directory holding the split manifests.
    /// Desk values are sized for a CPU run of a few minutes; full values
    /// mirror the published schedule and are kept for reference.
    pub fn preset(
        name: &str,
        data_dir: &Path,
        scale: PresetScale,
        seed: u64,
    ) -> Result<Curriculum> {
        let m = |s: &str| manifest_path(data_dir, s);
        let desk = scale == PresetScale::Desk;
        let stage = |name: &str,
                     split: &str,
                     tasks: Vec<Task>,
                     metric,
                     epochs,
                     lr,
                     batch,
                     warmup,
                     k: u64| {
            StageConfig {
                name: name.into(),
                train_manifest: m(&format!("{split}_train")),
                dev_manifest: m(&format!("{split}_dev")),
                tasks,
                epochs,
                lr,
                batch_size: batch,
                warmup_steps: warmup,
                regularizer: None,
                lora: None,
                freeze: FreezeConfig {
                    encoder: true,
                    // no pretrained language model exists at desk scale
                    decoder: !desk,
                },
                augmentation: !desk,
                selection_metric: metric,
                seed: seed.wrapping_add(k),
            }
        };
        let asr = if desk {
            stage(
                "asr-pretrain",
                "asr",
                vec![Task::Asr],
                SelectionMetric::Wer,
                8,
                2e-3,
                8,
                40,
                1,
            )
        } else {
            stage(
                "asr-pretrain",
                "asr",
                vec![Task::Asr],
                SelectionMetric::Wer,
                20,
                1e-4,
                4,
                1000,
                1,
            )
        };
        let ner = if desk {
            stage(
                "ner-pretrain",
                "ner",
                vec![Task::Ner],
                SelectionMetric::MicroF1,
                5,
                1e-3,
                8,
                20,
                2,
            )
        } else {
            stage(
                "ner-pretrain",
                "ner",
                vec![Task::Ner],
                SelectionMetric::MicroF1,
                10,
                1e-4,
                48,
                1000,
                2,
            )
        };
        let ft = if desk {
            stage(
                "finetune",
                "ft",
                vec![Task::Ner],
                SelectionMetric::MicroF1,
                6,
                1e-3,
                8,
                10,
                3,
            )
        } else {
            stage(
                "finetune",
                "ft",
                vec![Task::Ner],
                SelectionMetric::MicroF1,
                200,
                1e-3,
                16,
                2000,
                3,
            )
        };
        let stages = match name {
            "random" => vec![ft],
            "ls-asr" => vec![asr, ft],
            "ls-asr+ner" => vec![asr, ner, ft],
            _ => {
                return Err(Error::Config(format!(
                    "unknown preset {name:?}; expected one of {PRESETS:?}"
                )))
            }
        };
        let c = Curriculum {
            name: name.into(),
            model: ModelConfig::default(),
            model_seed: seed,
            optimizer: OptimizerConfig::default(),
            decode: if desk {
                // characters repeat inside words; penalising them breaks spelling
                DecodeConfig {
                    repetition_penalty: 1.0,
                    ..Default::default()
                }
            } else {
                DecodeConfig::default()
            },
            augment: AugmentConfig::default(),
            test_manifest: m("ft_test"),
            stages,
        };
        c.validate()?;
        Ok(c)
    }
}

/// 1-based epoch holding the best value; ties go to the earlier epoch.
pub fn select_epoch(metric: SelectionMetric, values: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, v) in values.iter().enumerate() {
        if best.is_none_or(|(_, b)| metric.better(*v, b)) {
            best = Some((i + 1, *v));
        }
    }
    best.map(|(e, _)| e)
}

/// Linear warmup to `base` over `warmup` steps, then linear decay to zero at
/// `total`. `step` is 1-based.
pub fn lr_at(step: usize, total: usize, warmup: usize, base: f64) -> f64 {
    if warmup > 0 && step <= warmup {
        return base * step as f64 / warmup as f64;
    }
    if total <= warmup {
        return base;
    }
    base * (total.saturating_sub(step)) as f64 / (total - warmup) as f64
}

/// Adaptive-moment optimizer with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    cfg: OptimizerConfig,
    t: i32,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(cfg: OptimizerConfig) -> Self {
        Adam {
            cfg,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// Clips `grads` to the global norm limit, then updates the named
    /// parameters. Returns the pre-clip norm.
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        grads: &mut BTreeMap<String, Tensor>,
        lr: f64,
    ) -> f64 {
        let norm = grads
            .values()
            .map(|g| g.iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt();
        if let Some(c) = self.cfg.grad_clip {
            if norm > c {
                let k = c / norm;
                grads.values_mut().for_each(|g| *g *= k);
            }
        }
        self.t += 1;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        for (name, g) in grads.iter() {
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.raw_dim()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.raw_dim()));
            let w = store
                .value_mut(name)
                .expect("gradient for a stored parameter");
            ndarray::Zip::from(w)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|w, m, v, g| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    *w -= lr * (*m / c1) / ((*v / c2).sqrt() + self.cfg.eps);
                });
        }
        norm
    }
}

/// One training example: an utterance under one task prompt.
#[derive(Debug, Clone)]
pub struct Example {
    pub utt: usize,
    pub task: Task,
    pub input: AssembledInput,
    pub class_target: Option<ClassTargets>,
}

pub fn build_examples(
    model: &Model,
    utts: &[Utterance],
    stage: &StageConfig,
    tok: &Tokenizer,
) -> Result<Vec<Example>> {
    let mut out = Vec::new();
    for (i, u) in utts.iter().enumerate() {
        for task in &stage.tasks {
            let Some(text) = task.target_text(u)? else {
                continue;
            };
            let input = assemble_input(
                &u.id,
                model.config.adapter.pool_len,
                &[tok.prompt_id(*task)],
                Some(&tok.encode(&text)),
                model.config.decoder.max_seq,
            )?;
            let class_target = match stage.regularizer.as_ref().map(|r| r.task) {
                Some(ClassifierTask::Ner) => u.tagged.as_ref().map(ner_targets),
                Some(ClassifierTask::Sa) => u.sentiment.map(sa_targets),
                None => None,
            };
            out.push(Example {
                utt: i,
                task: *task,
                input,
                class_target,
            });
        }
    }
    if out.is_empty() {
        return Err(Error::Config(format!(
            "stage {}: no training examples carry labels for {:?}",
            stage.name, stage.tasks
        )));
    }
    Ok(out)
}

/// Everything a training step needs besides the batch.
pub struct StepContext<'a> {
    pub stage: &'a StageConfig,
    pub trainable: BTreeSet<ParamGroup>,
    pub class_weights: Option<[f64; 7]>,
    pub augment: &'a AugmentConfig,
}

/// Where each utterance's encoder input comes from.
pub enum SpeechSource<'a> {
    /// Precomputed encoder outputs (frozen encoder, no augmentation).
    Encoded(&'a [Tensor]),
    /// Raw padded features, encoded in the step.
    Features(&'a [MelFeature]),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub llm: f64,
    pub cls: Option<f64>,
    pub grad_norm: f64,
}

/// Forward and backward over a batch, then one optimizer update on the
/// trainable groups only.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    model: &mut Model,
    opt: &mut Adam,
    batch: &[&Example],
    speech: &SpeechSource<'_>,
    ids: &[String],
    ctx: &StepContext<'_>,
    step: usize,
    lr: f64,
) -> Result<LossBreakdown> {
    let mut grads: BTreeMap<String, Tensor> = BTreeMap::new();
    let (mut total, mut llm, mut cls, mut n_cls) = (0.0, 0.0, 0.0, 0usize);
    let cls_cfg = ctx.stage.regularizer.as_ref().map(|r| {
        (
            ClassifierConfig {
                task: r.task,
                height: model.config.adapter.pool_len,
                width: model.config.adapter.out_dim,
            },
            LossMixConfig { alpha: r.alpha },
        )
    });
    for (k, ex) in batch.iter().enumerate() {
        let mut g = Graph::new();
        let mut b = Bindings::new(&model.params, &ctx.trainable);
        let enc = match speech {
            SpeechSource::Encoded(e) => g.constant(e[ex.utt].clone()),
            SpeechSource::Features(f) => {
                let mut x = f[ex.utt].clone();
                if ctx.stage.augmentation {
                    let mut rng = seeded_rng(
                        ctx.stage
                            .seed
                            .wrapping_mul(0x9E37_79B9)
                            .wrapping_add((step * 4096 + k) as u64),
                    );
                    x = model.prepare_features(&augment(&x, &mut rng, ctx.augment)?);
                }
                let xv = g.constant(x.frames);
                model.encoder_graph(&mut g, &mut b, xv)?
            }
        };
        let (logits, adapted) = model.forward_graph(&mut g, &mut b, enc, &ex.input)?;
        let (targets, mask) = ex.input.shifted_targets();
        let l_llm = lm_loss(&mut g, logits, &targets, &mask)?;
        llm += g.scalar(l_llm);
        let root = match (&cls_cfg, &ex.class_target) {
            (Some((cc, mix)), Some(t)) => {
                let cl = classifier_graph(&mut g, &mut b, adapted, cc)?;
                let w = ctx.class_weights.as_ref().map(|w| &w[..]);
                let w = if cc.task == ClassifierTask::Ner {
                    w
                } else {
                    None
                };
                let l_cls = classifier_loss(&mut g, cl, t, w)?;
                cls += g.scalar(l_cls);
                n_cls += 1;
                mix_loss_graph(&mut g, l_llm, l_cls, mix)
            }
            _ => l_llm,
        };
        let value = g.scalar(root);
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss {
                stage: ctx.stage.name.clone(),
                step,
                ids: ids.to_vec(),
            });
        }
        total += value;
        let mut gr = g.backward(root);
        let vars = b.into_vars();
        for (name, var) in vars {
            let group = model.params.get(&name).expect("bound parameter").group;
            if !ctx.trainable.contains(&group) {
                continue;
            }
            if let Some(t) = gr.take(var) {
                match grads.get_mut(&name) {
                    Some(acc) => *acc += &t,
                    None => {
                        grads.insert(name, t);
                    }
                }
            }
        }
    }
    let n = batch.len() as f64;
    grads.values_mut().for_each(|g| *g /= n);
    let grad_norm = opt.step(&mut model.params, &mut grads, lr);
    Ok(LossBreakdown {
        total: total / n,
        llm: llm / n,
        cls: (n_cls > 0).then(|| cls / n_cls as f64),
        grad_norm,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub stage: String,
    pub epoch: usize,
    pub metric: SelectionMetric,
    pub dev_metric: f64,
    pub digest: String,
    pub rng_seed: u64,
    pub steps: usize,
    pub optimizer: OptimizerConfig,
}

/// One decoded utterance under one task; a line of a predictions file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Prediction {
    pub id: String,
    pub task: Task,
    pub text: String,
    #[serde(default)]
    pub truncated: bool,
}

/// Splits an SA response into transcript and class.
pub fn parse_sa_output(text: &str) -> (String, Option<Sentiment>) {
    match text.split_once(SENTIMENT_MARKER) {
        Some((t, rest)) => (
            t.trim().to_string(),
            rest.split_whitespace().next().and_then(|w| w.parse().ok()),
        ),
        None => (strip_markers(text).trim().to_string(), None),
    }
}

fn transcript_of(task: Task, text: &str) -> String {
    match task {
        Task::Asr => text.to_string(),
        Task::Ner => strip_markers(text),
        Task::Sa => parse_sa_output(text).0,
    }
}

/// Decodes every utterance with `model`, preserving input order. Work is
/// split across `threads` scoped threads.
pub fn decode_all(
    model: &Model,
    utts: &[Utterance],
    encoded: &[Tensor],
    task: Task,
    cfg: &DecodeConfig,
    threads: usize,
) -> Result<Vec<Prediction>> {
    let tok = Tokenizer::new();
    let prompt = [tok.prompt_id(task)];
    let one = |i: usize| -> Result<Prediction> {
        let g = model.generate(&encoded[i], &prompt, cfg)?;
        Ok(Prediction {
            id: utts[i].id.clone(),
            task,
            text: tok.decode(&g.tokens),
            truncated: g.truncated,
        })
    };
    let threads = threads.clamp(1, utts.len().max(1));
    if threads == 1 {
        return (0..utts.len()).map(one).collect();
    }
    let chunk = utts.len().div_ceil(threads);
    let parts: Vec<Result<Vec<Prediction>>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..threads)
            .map(|t| {
                let one = &one;
                s.spawn(move || {
                    (t * chunk..((t + 1) * chunk).min(utts.len()))
                        .map(one)
                        .collect::<Result<Vec<_>>>()
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("decode worker"))
            .collect()
    });
    let mut out = Vec::with_capacity(utts.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// Corpus WER of `preds` (read as `task` outputs) against the transcripts.
pub fn score_wer(utts: &[Utterance], task: Task, preds: &[Prediction]) -> Result<f64> {
    let pairs: Vec<_> = utts
        .iter()
        .zip(preds)
        .map(|(u, p)| {
            (
                normalize_text(&u.transcript),
                normalize_text(&transcript_of(task, &p.text)),
            )
        })
        .collect();
    corpus_wer(&pairs)
}

/// Pair micro-F1 and label-F1, decoding the outputs leniently.
pub fn score_ner(utts: &[Utterance], preds: &[Prediction]) -> Result<(Prf, Prf)> {
    let gold: Vec<_> = utts
        .iter()
        .map(|u| u.tagged.as_ref().map(extract_pairs).unwrap_or_default())
        .collect();
    let hyp: Vec<_> = preds
        .iter()
        .map(|p| {
            decode_tagged(&p.text, DecodeMode::Lenient)
                .map(|t| extract_pairs(&t))
                .unwrap_or_default()
        })
        .collect();
    Ok((ner_micro_f1(&gold, &hyp)?, ner_label_f1(&gold, &hyp)?))
}

/// Macro-F1 and per-class scores over utterances carrying a sentiment;
/// `None` when none do.
pub fn score_sa(
    utts: &[Utterance],
    preds: &[Prediction],
) -> Result<Option<(f64, BTreeMap<String, Prf>)>> {
    let mut gold = Vec::new();
    let mut hyp = Vec::new();
    for (u, p) in utts.iter().zip(preds) {
        if let Some(s) = u.sentiment {
            gold.push(s);
            hyp.push(parse_sa_output(&p.text).1);
        }
    }
    if gold.is_empty() {
        return Ok(None);
    }
    let per_class = sa_per_class(&gold, &hyp)?
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
    Ok(Some((sa_macro_f1_partial(&gold, &hyp)?, per_class)))
}

/// Scores predictions for the given tasks against the utterances' labels.
/// WER comes from the first task in ASR, NER, SA order.
pub fn score_predictions(
    utts: &[Utterance],
    preds: &BTreeMap<Task, Vec<Prediction>>,
) -> Result<MetricsReport> {
    let mut r = MetricsReport {
        utterances: utts.len(),
        ..Default::default()
    };
    if let Some((task, p)) = preds.iter().next() {
        r.wer = Some(score_wer(utts, *task, p)?);
    }
    if let Some(p) = preds.get(&Task::Ner) {
        let (pair, label) = score_ner(utts, p)?;
        r.ner = Some(pair);
        r.ner_label = Some(label);
    }
    if let Some(p) = preds.get(&Task::Sa) {
        if let Some((f1, per_class)) = score_sa(utts, p)? {
            r.sa_macro_f1 = Some(f1);
            r.per_class = per_class;
        }
    }
    Ok(r)
}

fn worker_threads() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

/// Encoder outputs for utterances under the model's feature config.
pub fn encode_all(model: &Model, utts: &[Utterance]) -> Result<Vec<Tensor>> {
    utts.iter()
        .map(|u| model.encode_speech(&model.prepare_features(&u.feature(&model.config.features)?)))
        .collect()
}

/// Decodes and scores `utts` under each task.
pub fn evaluate(
    model: &Model,
    utts: &[Utterance],
    tasks: &[Task],
    cfg: &DecodeConfig,
) -> Result<(MetricsReport, BTreeMap<Task, Vec<Prediction>>)> {
    if utts.is_empty() {
        return Err(Error::Config("evaluation set is empty".into()));
    }
    let encoded = encode_all(model, utts)?;
    let mut preds = BTreeMap::new();
    for task in tasks.iter().collect::<BTreeSet<_>>() {
        preds.insert(
            *task,
            decode_all(model, utts, &encoded, *task, cfg, worker_threads())?,
        );
    }
    Ok((score_predictions(utts, &preds)?, preds))
}

/// Per-epoch record appended to the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub stage: String,
    pub epoch: usize,
    pub steps: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_llm_loss: f64,
    pub train_cls_loss: Option<f64>,
    pub metric: SelectionMetric,
    pub dev_metric: f64,
    pub selected: bool,
}

/// Training-log sink; `None` path keeps records in memory only.
#[derive(Debug, Default)]
pub struct TrainingLog {
    pub path: Option<PathBuf>,
    pub records: Vec<EpochLog>,
}

impl TrainingLog {
    pub fn to_file(path: PathBuf) -> Self {
        TrainingLog {
            path: Some(path),
            records: Vec::new(),
        }
    }

    fn push(&mut self, rec: EpochLog) -> Result<()> {
        if let Some(p) = &self.path {
            let mut f = std::fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(p)
                .map_err(|e| Error::io(p, e))?;
            writeln!(f, "{}", serde_json::to_string(&rec)?).map_err(|e| Error::io(p, e))?;
        }
        self.records.push(rec);
        Ok(())
    }
}

fn tag_counts(utts: &[Utterance]) -> BTreeMap<EntityTag, usize> {
    let mut c = BTreeMap::new();
    for t in utts.iter().filter_map(|u| u.tagged.as_ref()) {
        for s in &t.spans {
            *c.entry(s.tag).or_insert(0) += 1;
        }
    }
    c
}

/// Adds LoRA factors and a classifier head when the stage asks for them.
fn prepare_model(model: &mut Model, stage: &StageConfig) -> Result<()> {
    if let Some(l) = &stage.lora {
        match &model.lora {
            None => model.enable_lora(l.clone(), stage.seed ^ 0x10_7A)?,
            Some(existing) if existing != l => {
                return Err(Error::Config(format!(
                    "stage {} asks for LoRA {l:?} but the model carries {existing:?}",
                    stage.name
                )))
            }
            _ => {}
        }
    }
    if let Some(r) = &stage.regularizer {
        let cfg = ClassifierConfig {
            task: r.task,
            height: model.config.adapter.pool_len,
            width: model.config.adapter.out_dim,
        };
        let fits = model
            .params
            .get("classifier.fc.b")
            .is_some_and(|p| p.value.ncols() == cfg.n_classes());
        if !fits {
            model.params.remove_group(ParamGroup::Classifier);
            let mut rng = seeded_rng(stage.seed ^ 0xC1A5);
            init_classifier(&cfg, &mut model.params, &mut Init { rng: &mut rng });
        }
    }
    Ok(())
}

/// Trains one stage from `model` and returns the dev-selected model.
pub fn run_stage(
    mut model: Model,
    stage: &StageConfig,
    opt_cfg: &OptimizerConfig,
    decode: &DecodeConfig,
    augment_cfg: &AugmentConfig,
    log: &mut TrainingLog,
) -> Result<(Model, CheckpointMeta)> {
    stage.validate()?;
    let train = load_manifest(&stage.train_manifest)?;
    let dev = load_manifest(&stage.dev_manifest)?;
    if dev.is_empty() {
        return Err(Error::Config(format!(
            "stage {}: dev set is empty",
            stage.name
        )));
    }
    prepare_model(&mut model, stage)?;
    let tok = Tokenizer::new();
    let examples = build_examples(&model, &train, stage, &tok)?;
    let class_weights = match &stage.regularizer {
        Some(r) if r.task == ClassifierTask::Ner => Some(pos_weights(&tag_counts(&train))?),
        _ => None,
    };
    let ctx = StepContext {
        stage,
        trainable: stage.trainable_groups(),
        class_weights,
        augment: augment_cfg,
    };
    let features: Vec<MelFeature> = train
        .iter()
        .map(|u| Ok(model.prepare_features(&u.feature(&model.config.features)?)))
        .collect::<Result<_>>()?;
    let cached = if stage.freeze.encoder && !stage.augmentation {
        Some(
            features
                .iter()
                .map(|f| model.encode_speech(f))
                .collect::<Result<Vec<_>>>()?,
        )
    } else {
        None
    };
    let steps_per_epoch = examples.len().div_ceil(stage.batch_size);
    let total = steps_per_epoch * stage.epochs;
    let mut opt = Adam::new(opt_cfg.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(stage.seed);
    let eval_task = match stage.selection_metric {
        SelectionMetric::Wer => *stage.tasks.iter().min().expect("non-empty tasks"),
        SelectionMetric::MicroF1 => Task::Ner,
        SelectionMetric::MacroF1 => Task::Sa,
    };
    let mut best: Option<(Model, CheckpointMeta)> = None;
    let mut step = 0;
    for epoch in 1..=stage.epochs {
        let mut order: Vec<usize> = (0..examples.len()).collect();
        order.shuffle(&mut rng);
        let (mut sum, mut sum_llm, mut sum_cls, mut n_cls) = (0.0, 0.0, 0.0, 0usize);
        let mut lr = 0.0;
        for chunk in order.chunks(stage.batch_size) {
            step += 1;
            lr = lr_at(step, total, stage.warmup_steps, stage.lr);
            let batch: Vec<&Example> = chunk.iter().map(|i| &examples[*i]).collect();
            let ids: Vec<String> = batch.iter().map(|e| train[e.utt].id.clone()).collect();
            let source = match &cached {
                Some(c) => SpeechSource::Encoded(c),
                None => SpeechSource::Features(&features),
            };
            let l = train_step(&mut model, &mut opt, &batch, &source, &ids, &ctx, step, lr)?;
            sum += l.total;
            sum_llm += l.llm;
            if let Some(c) = l.cls {
                sum_cls += c;
                n_cls += 1;
            }
        }
        let mut snapshot = model.clone();
        snapshot.params.round_to_f32();
        let (report, _) = evaluate(&snapshot, &dev, &[eval_task], decode)?;
        let value = stage.selection_metric.value(&report).ok_or_else(|| {
            Error::Metric(format!("stage {}: dev metric unavailable", stage.name))
        })?;
        let selected = best
            .as_ref()
            .is_none_or(|(_, m)| stage.selection_metric.better(value, m.dev_metric));
        log.push(EpochLog {
            stage: stage.name.clone(),
            epoch,
            steps: step,
            lr,
            train_loss: sum / steps_per_epoch as f64,
            train_llm_loss: sum_llm / steps_per_epoch as f64,
            train_cls_loss: (n_cls > 0).then(|| sum_cls / n_cls as f64),
            metric: stage.selection_metric,
            dev_metric: value,
            selected,
        })?;
        log::info!(
            "stage {} epoch {epoch}: loss {:.4} dev {:?} {value:.4}",
            stage.name,
            sum / steps_per_epoch as f64,
            stage.selection_metric
        );
        if selected {
            let meta = CheckpointMeta {
                stage: stage.name.clone(),
                epoch,
                metric: stage.selection_metric,
                dev_metric: value,
                digest: snapshot.params.digest_all(),
                rng_seed: stage.seed,
                steps: step,
                optimizer: opt_cfg.clone(),
            };
            best = Some((snapshot, meta));
        }
    }
    Ok(best.expect("at least one epoch"))
}

/// Result of a full curriculum run.
#[derive(Debug)]
pub struct CurriculumRun {
    pub metas: Vec<CheckpointMeta>,
    pub report: MetricsReport,
    pub model: Model,
    pub log: TrainingLog,
    /// Files written under the run directory, if one was given.
    pub files: Vec<PathBuf>,
}

/// Chains the stages, each starting from the previous selection, then scores
/// the final model on the test manifest with the last stage's tasks. With
/// `out_dir`, writes per-stage checkpoints, the training log, the final
/// metrics and a manifest of produced files.
pub fn run_curriculum(c: &Curriculum, out_dir: Option<&Path>) -> Result<CurriculumRun> {
    c.validate()?;
    let mut files = Vec::new();
    let mut log = match out_dir {
        Some(d) => {
            std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
            let p = d.join("training_log.jsonl");
            if p.exists() {
                std::fs::remove_file(&p).map_err(|e| Error::io(&p, e))?;
            }
            files.push(p.clone());
            TrainingLog::to_file(p)
        }
        None => TrainingLog::default(),
    };
    let mut model = Model::new(c.model.clone(), c.model_seed)?;
    let mut metas = Vec::new();
    for stage in &c.stages {
        let (selected, meta) =
            run_stage(model, stage, &c.optimizer, &c.decode, &c.augment, &mut log)?;
        model = selected;
        metas.push(meta);
        if let Some(d) = out_dir {
            let p = d.join(format!("{}.ckpt", stage.name));
            checkpoint::save(&p, &model, &metas)?;
            files.push(p);
        }
    }
    let test = load_manifest(&c.test_manifest)?;
    let last = c.stages.last().expect("validated non-empty");
    let (mut report, preds) = evaluate(&model, &test, &last.tasks, &c.decode)?;
    report.utterances = test.len();
    if let Some(d) = out_dir {
        let p = d.join("metrics.json");
        std::fs::write(&p, report.to_json()).map_err(|e| Error::io(&p, e))?;
        files.push(p);
        let p = d.join("predictions.jsonl");
        let mut s = String::new();
        for pr in preds.values().flatten() {
            s.push_str(&serde_json::to_string(pr)?);
            s.push('\n');
        }
        std::fs::write(&p, s).map_err(|e| Error::io(&p, e))?;
        files.push(p);
        let p = d.join("curriculum.json");
        std::fs::write(&p, serde_json::to_string_pretty(c)?).map_err(|e| Error::io(&p, e))?;
        files.push(p);
        let p = d.join("files.txt");
        let mut listing: String = files
            .iter()
            .filter_map(|f| {
                f.file_name()
                    .map(|n| n.to_string_lossy().into_owned() + "\n")
            })
            .collect();
        listing.push_str("files.txt\n");
        std::fs::write(&p, listing).map_err(|e| Error::io(&p, e))?;
        files.push(p);
    }
    Ok(CurriculumRun {
        metas,
        report,
        model,
        log,
        files,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapter::AdapterConfig;
    use crate::corpus::{Corpus, CorpusConfig};
    use crate::data::FeatureConfig;
    use crate::model::{DecoderConfig, EncoderConfig};
    use crate::regularizer::ClassifierTask;

    fn tiny_model() -> ModelConfig {
        ModelConfig {
            features: FeatureConfig {
                n_mels: 6,
                max_frames: 12,
                ..Default::default()
            },
            encoder: EncoderConfig {
                layers: 1,
                dim: 8,
                heads: 2,
            },
            adapter: AdapterConfig {
                pool_len: 4,
                in_dim: 8,
                out_dim: 8,
            },
            decoder: DecoderConfig {
                layers: 1,
                dim: 8,
                heads: 2,
                max_seq: 48,
                ..Default::default()
            },
        }
    }

    fn tiny_corpus(dir: &Path) {
        let cfg = CorpusConfig {
            seed: 3,
            asr_train: 6,
            asr_dev: 3,
            ner_train: 6,
            ner_dev: 3,
            ft_train: 8,
            ft_dev: 3,
            ft_test: 3,
            max_chars: 16,
        };
        Corpus::generate(&cfg).unwrap().write(dir).unwrap();
    }

    fn tiny_stage(dir: &Path) -> StageConfig {
        StageConfig {
            name: "t".into(),
            train_manifest: manifest_path(dir, "ft_train"),
            dev_manifest: manifest_path(dir, "ft_dev"),
            tasks: vec![Task::Ner],
            epochs: 2,
            lr: 1e-2,
            batch_size: 4,
            warmup_steps: 1,
            regularizer: None,
            lora: None,
            freeze: FreezeConfig::default(),
            augmentation: false,
            selection_metric: SelectionMetric::MicroF1,
            seed: 5,
        }
    }

    fn quick_decode() -> DecodeConfig {
        DecodeConfig {
            beam: 2,
            max_new_tokens: 8,
            ..Default::default()
        }
    }

    /// Runs `steps` optimizer updates on the stage's first batch and returns
    /// the model plus per-step losses.
    fn run_steps(stage: &StageConfig, steps: usize) -> (Model, Vec<LossBreakdown>) {
        let mut model = Model::new(tiny_model(), 11).unwrap();
        prepare_model(&mut model, stage).unwrap();
        let train = load_manifest(&stage.train_manifest).unwrap();
        let examples = build_examples(&model, &train, stage, &Tokenizer::new()).unwrap();
        let feats: Vec<MelFeature> = train
            .iter()
            .map(|u| model.prepare_features(&u.feature(&model.config.features).unwrap()))
            .collect();
        let augment_cfg = AugmentConfig::default();
        let ctx = StepContext {
            stage,
            trainable: stage.trainable_groups(),
            class_weights: Some([1.0; 7]),
            augment: &augment_cfg,
        };
        let mut opt = Adam::new(OptimizerConfig::default());
        let batch: Vec<&Example> = examples.iter().take(stage.batch_size).collect();
        let ids: Vec<String> = batch.iter().map(|e| train[e.utt].id.clone()).collect();
        let mut out = Vec::new();
        for s in 1..=steps {
            let l = train_step(
                &mut model,
                &mut opt,
                &batch,
                &SpeechSource::Features(&feats),
                &ids,
                &ctx,
                s,
                stage.lr,
            )
            .unwrap();
            out.push(l);
        }
        (model, out)
    }

    #[test]
    fn lr_schedule_warms_up_then_decays_to_zero() {
        assert!((lr_at(5, 100, 10, 1.0) - 0.5).abs() < 1e-12);
        assert!((lr_at(10, 100, 10, 1.0) - 1.0).abs() < 1e-12);
        assert!((lr_at(11, 100, 10, 1.0) - 89.0 / 90.0).abs() < 1e-12);
        assert_eq!(lr_at(100, 100, 10, 1.0), 0.0);
        assert!((lr_at(1, 10, 0, 2.0) - 1.8).abs() < 1e-12);
        let mut prev = f64::INFINITY;
        for s in 10..=100 {
            let lr = lr_at(s, 100, 10, 1.0);
            assert!(lr <= prev);
            prev = lr;
        }
    }

    #[test]
    fn selection_picks_best_and_keeps_earliest_on_ties() {
        assert_eq!(
            select_epoch(SelectionMetric::Wer, &[12.0, 9.0, 10.0]),
            Some(2)
        );
        assert_eq!(
            select_epoch(SelectionMetric::MicroF1, &[0.5, 0.7, 0.7]),
            Some(2)
        );
        assert_eq!(select_epoch(SelectionMetric::Wer, &[3.0]), Some(1));
        assert_eq!(select_epoch(SelectionMetric::MacroF1, &[]), None);
    }

    #[test]
    fn adam_first_step_moves_by_lr_times_sign() {
        let mut store = ParamStore::new();
        store.insert("w", ParamGroup::Adapter, Tensor::from_elem((1, 2), 1.0));
        let mut opt = Adam::new(OptimizerConfig::default());
        let mut grads = BTreeMap::from([("w".to_string(), ndarray::array![[0.3, -0.2]])]);
        let norm = opt.step(&mut store, &mut grads, 0.1);
        assert!((norm - (0.13f64).sqrt()).abs() < 1e-12);
        let w = store.value("w");
        assert!((w[[0, 0]] - 0.9).abs() < 1e-6);
        assert!((w[[0, 1]] - 1.1).abs() < 1e-6);
    }

    #[test]
    fn gradients_are_clipped_to_global_norm() {
        let mut store = ParamStore::new();
        store.insert("w", ParamGroup::Adapter, Tensor::zeros((1, 2)));
        let mut opt = Adam::new(OptimizerConfig::default());
        let mut grads = BTreeMap::from([("w".to_string(), ndarray::array![[30.0, 40.0]])]);
        assert_eq!(opt.step(&mut store, &mut grads, 0.1), 50.0);
        let g = &grads["w"];
        assert!((g[[0, 0]] - 0.6).abs() < 1e-12 && (g[[0, 1]] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn frozen_groups_keep_their_digest() {
        let dir = tempfile::tempdir().unwrap();
        tiny_corpus(dir.path());
        let mut stage = tiny_stage(dir.path());
        stage.lora = Some(LoraConfig::default());
        stage.regularizer = Some(RegularizerConfig {
            alpha: 0.2,
            task: ClassifierTask::Ner,
        });
        let mut before = Model::new(tiny_model(), 11).unwrap();
        prepare_model(&mut before, &stage).unwrap();
        let (after, _) = run_steps(&stage, 2);
        let (d0, d1) = (before.params.digests(), after.params.digests());
        for g in ParamGroup::ALL {
            let touched = stage.trainable_groups().contains(&g);
            assert_eq!(d0[&g] != d1[&g], touched, "{g:?}");
        }

        let mut open = tiny_stage(dir.path());
        open.freeze = FreezeConfig {
            encoder: false,
            decoder: false,
        };
        let before = Model::new(tiny_model(), 11).unwrap().params.digests();
        let (after, _) = run_steps(&open, 1);
        let after = after.params.digests();
        for g in [
            ParamGroup::Encoder,
            ParamGroup::Adapter,
            ParamGroup::Decoder,
        ] {
            assert_ne!(before[&g], after[&g], "{g:?}");
        }
    }

    #[test]
    fn without_regularizer_total_is_llm_loss() {
        let dir = tempfile::tempdir().unwrap();
        tiny_corpus(dir.path());
        let (_, losses) = run_steps(&tiny_stage(dir.path()), 1);
        assert!(losses[0].cls.is_none());
        assert_eq!(losses[0].total, losses[0].llm);

        let mut stage = tiny_stage(dir.path());
        stage.regularizer = Some(RegularizerConfig {
            alpha: 0.25,
            task: ClassifierTask::Ner,
        });
        let (_, losses) = run_steps(&stage, 1);
        let l = losses[0];
        assert!((l.total - (0.75 * l.llm + 0.25 * l.cls.unwrap())).abs() < 1e-9);
    }

    #[test]
    fn loss_trajectories_are_reproducible() {
        let dir = tempfile::tempdir().unwrap();
        tiny_corpus(dir.path());
        let mut stage = tiny_stage(dir.path());
        stage.augmentation = true;
        stage.freeze.encoder = false;
        let (a, la) = run_steps(&stage, 50);
        let (b, lb) = run_steps(&stage, 50);
        assert_eq!(la, lb);
        assert_eq!(a.params.digest_all(), b.params.digest_all());
        assert!(la[49].llm < la[0].llm);
    }

    #[test]
    fn non_finite_loss_names_stage_step_and_ids() {
        let dir = tempfile::tempdir().unwrap();
        tiny_corpus(dir.path());
        let stage = tiny_stage(dir.path());
        let mut model = Model::new(tiny_model(), 1).unwrap();
        model
            .params
            .value_mut("adapter.proj_b")
            .unwrap()
            .fill(f64::NAN);
        let train = load_manifest(&stage.train_manifest).unwrap();
        let examples = build_examples(&model, &train, &stage, &Tokenizer::new()).unwrap();
        let enc = encode_all(&model, &train).unwrap();
        let augment_cfg = AugmentConfig::default();
        let ctx = StepContext {
            stage: &stage,
            trainable: stage.trainable_groups(),
            class_weights: None,
            augment: &augment_cfg,
        };
        let ids = vec![train[0].id.clone()];
        let err = train_step(
            &mut model,
            &mut Adam::new(OptimizerConfig::default()),
            &[&examples[0]],
            &SpeechSource::Encoded(&enc),
            &ids,
            &ctx,
            7,
            0.1,
        )
        .unwrap_err();
        match err {
            Error::NonFiniteLoss {
                stage,
                step,
                ids: got,
            } => {
                assert_eq!((stage.as_str(), step), ("t", 7));
                assert_eq!(got, ids);
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn stage_selects_best_dev_epoch_and_logs_each_epoch() {
        let dir = tempfile::tempdir().unwrap();
        tiny_corpus(dir.path());
        let mut stage = tiny_stage(dir.path());
        stage.epochs = 3;
        stage.selection_metric = SelectionMetric::Wer;
        let mut log = TrainingLog::default();
        let model = Model::new(tiny_model(), 2).unwrap();
        let (best, meta) = run_stage(
            model,
            &stage,
            &OptimizerConfig::default(),
            &quick_decode(),
            &AugmentConfig::default(),
            &mut log,
        )
        .unwrap();
        assert_eq!(log.records.len(), 3);
        let values: Vec<f64> = log.records.iter().map(|r| r.dev_metric).collect();
        assert_eq!(
            Some(meta.epoch),
            select_epoch(SelectionMetric::Wer, &values)
        );
        assert_eq!(meta.digest, best.params.digest_all());
        assert_eq!(meta.steps, log.records[meta.epoch - 1].steps);
        assert!(log.records[0].selected);
    }

    #[test]
    fn empty_dev_set_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        tiny_corpus(dir.path());
        let mut stage = tiny_stage(dir.path());
        let empty = dir.path().join("empty.jsonl");
        std::fs::write(&empty, "").unwrap();
        stage.dev_manifest = empty;
        let err = run_stage(
            Model::new(tiny_model(), 2).unwrap(),
            &stage,
            &OptimizerConfig::default(),
            &quick_decode(),
            &AugmentConfig::default(),
            &mut TrainingLog::default(),
        )
        .unwrap_err();
        assert!(err.to_string().contains("dev set is empty"), "{err}");
    }

    #[test]
    fn checkpoints_round_trip_byte_for_byte() {
        let dir = tempfile::tempdir().unwrap();
        tiny_corpus(dir.path());
        let mut stage = tiny_stage(dir.path());
        stage.lora = Some(LoraConfig::default());
        stage.regularizer = Some(RegularizerConfig {
            alpha: 0.2,
            task: ClassifierTask::Ner,
        });
        let (model, _) = run_steps(&stage, 2);
        let meta = CheckpointMeta {
            stage: "t".into(),
            epoch: 1,
            metric: SelectionMetric::MicroF1,
            dev_metric: 0.5,
            digest: model.params.digest_all(),
            rng_seed: 5,
            steps: 2,
            optimizer: OptimizerConfig::default(),
        };
        let p = dir.path().join("a.ckpt");
        checkpoint::save(&p, &model, std::slice::from_ref(&meta)).unwrap();
        let (back, metas) = checkpoint::load(&p, false).unwrap();
        assert_eq!(metas, vec![meta.clone()]);
        let again = checkpoint::to_bytes(&back, &metas).unwrap();
        assert_eq!(again, std::fs::read(&p).unwrap());

        let (lean, _) = checkpoint::load(&p, true).unwrap();
        assert!(!lean.params.has_group(ParamGroup::Classifier));
        assert!(lean.params.has_group(ParamGroup::Lora));
        let enc = encode_all(&back, &load_manifest(&stage.dev_manifest).unwrap()).unwrap();
        let prompt = [Tokenizer::new().prompt_id(Task::Ner)];
        assert_eq!(
            back.generate(&enc[0], &prompt, &quick_decode()).unwrap(),
            lean.generate(&enc[0], &prompt, &quick_decode()).unwrap()
        );

        let mut bytes = std::fs::read(&p).unwrap();
        bytes[8] = 2;
        let err = checkpoint::from_bytes(&bytes, false).unwrap_err();
        assert!(err.to_string().contains("version 2"), "{err}");
        assert!(checkpoint::from_bytes(b"garbage", false).is_err());
    }

    #[test]
    fn presets_have_expected_stages() {
        let d = Path::new("data");
        let names = |p: &str| -> Vec<String> {
            Curriculum::preset(p, d, PresetScale::Desk, 1)
                .unwrap()
                .stages
                .into_iter()
                .map(|s| s.name)
                .collect()
        };
        assert_eq!(names("random"), ["finetune"]);
        assert_eq!(names("ls-asr"), ["asr-pretrain", "finetune"]);
        assert_eq!(
            names("ls-asr+ner"),
            ["asr-pretrain", "ner-pretrain", "finetune"]
        );
        assert!(Curriculum::preset("bogus", d, PresetScale::Desk, 1).is_err());

        let full = Curriculum::preset("ls-asr+ner", d, PresetScale::Full, 1).unwrap();
        let s: Vec<_> = full
            .stages
            .iter()
            .map(|s| (s.epochs, s.lr, s.batch_size, s.warmup_steps))
            .collect();
        assert_eq!(
            s,
            [
                (20, 1e-4, 4, 1000),
                (10, 1e-4, 48, 1000),
                (200, 1e-3, 16, 2000)
            ]
        );
        assert!(full
            .stages
            .iter()
            .all(|s| s.freeze.encoder && s.freeze.decoder));
        assert_eq!(full.decode, DecodeConfig::default());
    }

    #[test]
    fn curriculum_json_rejects_unknown_fields_and_bad_stages() {
        let c = Curriculum::preset("random", Path::new("d"), PresetScale::Desk, 1).unwrap();
        let json = serde_json::to_string(&c).unwrap();
        assert_eq!(Curriculum::from_json(&json).unwrap(), c);

        let mut v: serde_json::Value = serde_json::from_str(&json).unwrap();
        v["stages"][0]["learning_rate"] = 1.0.into();
        assert!(Curriculum::from_json(&v.to_string()).is_err());

        let mut bad = c.clone();
        bad.stages[0].selection_metric = SelectionMetric::MacroF1;
        assert!(bad.validate().is_err());
        bad.stages[0].selection_metric = SelectionMetric::MicroF1;
        bad.stages[0].regularizer = Some(RegularizerConfig {
            alpha: 0.2,
            task: ClassifierTask::Sa,
        });
        assert!(bad.validate().is_err());
        bad.stages[0].regularizer = None;
        bad.stages[0].epochs = 0;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn mixed_gradient_on_adapter_is_the_weighted_sum() {
        let dir = tempfile::tempdir().unwrap();
        tiny_corpus(dir.path());
        let mut stage = tiny_stage(dir.path());
        let alpha = 0.3;
        stage.regularizer = Some(RegularizerConfig {
            alpha,
            task: ClassifierTask::Ner,
        });
        let mut model = Model::new(tiny_model(), 9).unwrap();
        prepare_model(&mut model, &stage).unwrap();
        let train = load_manifest(&stage.train_manifest).unwrap();
        let ex = &build_examples(&model, &train, &stage, &Tokenizer::new()).unwrap()[0];
        let enc = encode_all(&model, &train).unwrap();
        let cc = ClassifierConfig {
            task: ClassifierTask::Ner,
            height: 4,
            width: 8,
        };
        let trainable = stage.trainable_groups();
        // 0: llm only, 1: classifier only, 2: mixed
        let grads = |which: u8| -> BTreeMap<String, Tensor> {
            let mut g = Graph::new();
            let mut b = Bindings::new(&model.params, &trainable);
            let e = g.constant(enc[ex.utt].clone());
            let (logits, adapted) = model.forward_graph(&mut g, &mut b, e, &ex.input).unwrap();
            let (t, m) = ex.input.shifted_targets();
            let l_llm = lm_loss(&mut g, logits, &t, &m).unwrap();
            let cl = classifier_graph(&mut g, &mut b, adapted, &cc).unwrap();
            let l_cls = classifier_loss(
                &mut g,
                cl,
                ex.class_target.as_ref().unwrap(),
                Some(&[1.5; 7]),
            )
            .unwrap();
            let root = match which {
                0 => l_llm,
                1 => l_cls,
                _ => mix_loss_graph(&mut g, l_llm, l_cls, &LossMixConfig { alpha }),
            };
            let mut gr = g.backward(root);
            b.into_vars()
                .into_iter()
                .filter(|(n, _)| n.starts_with("adapter."))
                .map(|(n, v)| (n, gr.take(v).unwrap()))
                .collect()
        };
        let (a, c, mixed) = (grads(0), grads(1), grads(2));
        assert_eq!(mixed.len(), 4);
        for (name, m) in &mixed {
            let want = &a[name] * (1.0 - alpha) + &c[name] * alpha;
            let err = (m - &want).iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
            assert!(err < 1e-12, "{name}: {err}");
        }
    }

    #[test]
    fn classifier_head_does_not_change_generation() {
        let dir = tempfile::tempdir().unwrap();
        tiny_corpus(dir.path());
        let mut stage = tiny_stage(dir.path());
        stage.regularizer = Some(RegularizerConfig {
            alpha: 0.5,
            task: ClassifierTask::Ner,
        });
        let (with_head, _) = run_steps(&stage, 3);
        let mut without = with_head.clone();
        without.params.remove_group(ParamGroup::Classifier);
        let dev = load_manifest(&stage.dev_manifest).unwrap();
        let enc = encode_all(&with_head, &dev).unwrap();
        let prompt = [Tokenizer::new().prompt_id(Task::Ner)];
        for e in &enc {
            assert_eq!(
                with_head.generate(e, &prompt, &quick_decode()).unwrap(),
                without.generate(e, &prompt, &quick_decode()).unwrap()
            );
        }
    }

    #[test]
    fn sa_outputs_parse() {
        assert_eq!(
            parse_sa_output("a good day §SENT positive"),
            ("a good day".to_string(), Some(Sentiment::Positive))
        );
        assert_eq!(
            parse_sa_output("a day §SENT maybe"),
            ("a day".to_string(), None)
        );
        assert_eq!(parse_sa_output("no class"), ("no class".to_string(), None));
    }

    #[test]
    fn curriculum_writes_its_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        tiny_corpus(dir.path());
        let mut c = Curriculum::preset("ls-asr", dir.path(), PresetScale::Desk, 4).unwrap();
        c.model = tiny_model();
        c.decode = quick_decode();
        for s in &mut c.stages {
            s.epochs = 1;
        }
        let out = dir.path().join("run");
        let run = run_curriculum(&c, Some(&out)).unwrap();
        assert_eq!(run.metas.len(), 2);
        for name in [
            "training_log.jsonl",
            "asr-pretrain.ckpt",
            "finetune.ckpt",
            "metrics.json",
            "predictions.jsonl",
            "curriculum.json",
            "files.txt",
        ] {
            assert!(out.join(name).exists(), "{name}");
        }
        let (m, metas) = checkpoint::load(&out.join("finetune.ckpt"), true).unwrap();
        assert_eq!(metas, run.metas);
        assert_eq!(m.params.digest_all(), run.metas[1].digest);
        let metrics = std::fs::read_to_string(out.join("metrics.json")).unwrap();
        assert_eq!(metrics, run.report.to_json());
        assert_eq!(run.report.utterances, 3);
    }
}
