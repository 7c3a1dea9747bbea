//! Auxiliary classifier over adapter output, used only during training.
//!
//! A three-stage strided 2-D CNN reads the adapter output as a one-channel
//! image and predicts entity-class presence (NER, multi-label) or the
//! sentiment class (SA). Its loss is mixed with the language-model loss as
//! `(1 - alpha) * lm + alpha * cls`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::codec::{EntityTag, TaggedTranscript};
use crate::error::{Error, Result};
use crate::graph::{ConvGeom, Graph, Tensor, Var};
use crate::metrics::Sentiment;
use crate::params::{Bindings, Init, ParamGroup, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassifierTask {
    Ner,
    Sa,
}

impl ClassifierTask {
    pub fn n_classes(self) -> usize {
        match self {
            ClassifierTask::Ner => EntityTag::ALL.len(),
            ClassifierTask::Sa => Sentiment::ALL.len(),
        }
    }
}

pub const CONV_CHANNELS: [usize; 3] = [8, 16, 32];
const KERNEL: usize = 3;
const STRIDE: usize = 2;
const PAD: usize = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ClassifierConfig {
    pub task: ClassifierTask,
    /// Height of the input map (adapter pool length).
    pub height: usize,
    /// Width of the input map (adapter output width).
    pub width: usize,
}

impl ClassifierConfig {
    pub fn n_classes(&self) -> usize {
        self.task.n_classes()
    }

    fn geoms(&self) -> [ConvGeom; 3] {
        let mut h = self.height;
        let mut w = self.width;
        let mut in_ch = 1;
        CONV_CHANNELS.map(|out_ch| {
            let g = ConvGeom {
                in_ch,
                out_ch,
                height: h,
                width: w,
                kernel: KERNEL,
                stride: STRIDE,
                pad: PAD,
            };
            h = g.out_height();
            w = g.out_width();
            in_ch = out_ch;
            g
        })
    }
}

fn conv_names(i: usize) -> (String, String) {
    (
        format!("classifier.conv{i}.w"),
        format!("classifier.conv{i}.b"),
    )
}

pub fn init_classifier(cfg: &ClassifierConfig, store: &mut ParamStore, init: &mut Init<'_>) {
    for (i, g) in cfg.geoms().iter().enumerate() {
        let (w, b) = conv_names(i);
        let fan_in = g.in_ch * KERNEL * KERNEL;
        store.insert(
            w,
            ParamGroup::Classifier,
            init.uniform((g.out_ch, fan_in), (6.0 / fan_in as f64).sqrt()),
        );
        store.insert(b, ParamGroup::Classifier, Tensor::zeros((g.out_ch, 1)));
    }
    let last = CONV_CHANNELS[2];
    store.insert(
        "classifier.fc.w",
        ParamGroup::Classifier,
        init.linear(last, cfg.n_classes()),
    );
    store.insert(
        "classifier.fc.b",
        ParamGroup::Classifier,
        Tensor::zeros((1, cfg.n_classes())),
    );
}

/// Logits (`1 x n_classes`) for an adapter output `a` of shape
/// `height x width`.
pub fn classifier_graph(
    g: &mut Graph,
    b: &mut Bindings<'_>,
    a: Var,
    cfg: &ClassifierConfig,
) -> Result<Var> {
    if g.value(a).dim() != (cfg.height, cfg.width) {
        return Err(Error::shape(
            "classifier_forward",
            format!(
                "input {:?}, expected ({}, {})",
                g.value(a).dim(),
                cfg.height,
                cfg.width
            ),
        ));
    }
    let mut x = g.reshape(a, (1, cfg.height * cfg.width));
    for (i, geom) in cfg.geoms().into_iter().enumerate() {
        let (wn, bn) = conv_names(i);
        let (w, bias) = (b.var(g, &wn), b.var(g, &bn));
        let y = g.conv2d(x, w, bias, geom);
        x = g.relu(y);
    }
    let pooled = g.mean_cols(x);
    let w = b.var(g, "classifier.fc.w");
    let logits = g.matmul(pooled, w);
    let fb = b.var(g, "classifier.fc.b");
    Ok(g.add_row(logits, fb))
}

/// Forward-only convenience wrapper.
pub fn classifier_forward(
    a: &Tensor,
    store: &ParamStore,
    cfg: &ClassifierConfig,
) -> Result<Vec<f64>> {
    let none = Default::default();
    let mut g = Graph::new();
    let mut b = Bindings::new(store, &none);
    let av = g.constant(a.clone());
    let out = classifier_graph(&mut g, &mut b, av, cfg)?;
    Ok(g.value(out).iter().copied().collect())
}

#[derive(Debug, Clone, PartialEq)]
pub enum ClassTargets {
    /// Presence of each tag, in reporting order.
    Ner([f64; 7]),
    /// One-hot sentiment.
    Sa([f64; 3]),
}

impl ClassTargets {
    pub fn as_slice(&self) -> &[f64] {
        match self {
            ClassTargets::Ner(v) => v,
            ClassTargets::Sa(v) => v,
        }
    }
}

pub fn ner_targets(t: &TaggedTranscript) -> ClassTargets {
    let mut v = [0.0; 7];
    for s in &t.spans {
        v[s.tag.index()] = 1.0;
    }
    ClassTargets::Ner(v)
}

pub fn sa_targets(s: Sentiment) -> ClassTargets {
    let mut v = [0.0; 3];
    v[s.index()] = 1.0;
    ClassTargets::Sa(v)
}

/// `w_k = total / count_k` over the seven tags.
pub fn pos_weights(counts: &BTreeMap<EntityTag, usize>) -> Result<[f64; 7]> {
    let total: usize = EntityTag::ALL
        .iter()
        .map(|t| counts.get(t).copied().unwrap_or(0))
        .sum();
    let mut w = [0.0; 7];
    for tag in EntityTag::ALL {
        let c = counts.get(&tag).copied().unwrap_or(0);
        if c == 0 {
            return Err(Error::Config(format!(
                "pos_weight undefined: tag {tag} has zero training count"
            )));
        }
        w[tag.index()] = total as f64 / c as f64;
    }
    Ok(w)
}

/// NER: mean weighted BCE-with-logits. SA: softmax cross-entropy.
pub fn classifier_loss(
    g: &mut Graph,
    logits: Var,
    targets: &ClassTargets,
    weights: Option<&[f64]>,
) -> Result<Var> {
    if g.value(logits).iter().any(|v| !v.is_finite()) {
        return Err(Error::Metric("non-finite classifier logits".into()));
    }
    match (targets, weights) {
        (ClassTargets::Ner(t), Some(w)) if w.len() == t.len() => {
            Ok(g.bce_with_logits(logits, t, w))
        }
        (ClassTargets::Sa(t), None) => {
            let class = t
                .iter()
                .position(|v| *v == 1.0)
                .ok_or_else(|| Error::Config("sentiment target is not one-hot".into()))?;
            Ok(g.softmax_xent(logits, &[(0, class)]))
        }
        _ => Err(Error::Config(
            "class weights must be given for NER (7 values) and omitted for SA".into(),
        )),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossMixConfig {
    pub alpha: f64,
}

impl Default for LossMixConfig {
    fn default() -> Self {
        LossMixConfig { alpha: 0.2 }
    }
}

impl LossMixConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!(
                "alpha {} outside [0, 1]",
                self.alpha
            )));
        }
        Ok(())
    }
}

/// `(1 - alpha) * l_llm + alpha * l_cls`.
pub fn mix_loss(l_llm: f64, l_cls: f64, mix: &LossMixConfig) -> f64 {
    (1.0 - mix.alpha) * l_llm + mix.alpha * l_cls
}

pub fn mix_loss_graph(g: &mut Graph, l_llm: Var, l_cls: Var, mix: &LossMixConfig) -> Var {
    let a = g.scale(l_llm, 1.0 - mix.alpha);
    let b = g.scale(l_cls, mix.alpha);
    g.add(a, b)
}
