//! Speech encoder, decoder LM, prompt assembly, LoRA and generation.
//!
//! Both networks are pre-LN transformers with sinusoidal positions. Training
//! runs through the autodiff [`Graph`]; generation uses a plain forward with
//! a per-layer key/value cache and must agree with the graph path.

use ndarray::{concatenate, s, Axis};
use serde::{Deserialize, Serialize};

use crate::adapter::{adapter_forward, adapter_graph, AdapterConfig, AdapterParams};
use crate::beam::{beam_search, DecodeConfig, Generation, StepModel};
use crate::data::{FeatureConfig, MelFeature};
use crate::error::{Error, Result};
use crate::graph::{self, Graph, Tensor, Var};
use crate::params::{seeded_rng, Bindings, Init, ParamGroup, ParamStore};
use crate::tokenizer::{Tokenizer, ASSISTANT, EOS, USER};

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub layers: usize,
    pub dim: usize,
    pub heads: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            layers: 2,
            dim: 64,
            heads: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoderConfig {
    pub layers: usize,
    pub dim: usize,
    pub heads: usize,
    pub vocab: usize,
    pub max_seq: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            layers: 2,
            dim: 128,
            heads: 4,
            vocab: Tokenizer::new().vocab_size(),
            max_seq: 128,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoraConfig {
    pub rank: usize,
    pub scale_alpha: f64,
}

impl Default for LoraConfig {
    fn default() -> Self {
        LoraConfig {
            rank: 4,
            scale_alpha: 4.0,
        }
    }
}

impl LoraConfig {
    pub fn scale(&self) -> f64 {
        self.scale_alpha / self.rank as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub features: FeatureConfig,
    pub encoder: EncoderConfig,
    pub adapter: AdapterConfig,
    pub decoder: DecoderConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let e = &self.encoder;
        let d = &self.decoder;
        let bad = |m: String| Err(Error::Config(m));
        if e.layers == 0 || e.heads == 0 || !e.dim.is_multiple_of(e.heads) {
            return bad(format!(
                "encoder width {} not divisible by heads {}",
                e.dim, e.heads
            ));
        }
        if d.layers == 0 || d.heads == 0 || !d.dim.is_multiple_of(d.heads) {
            return bad(format!(
                "decoder width {} not divisible by heads {}",
                d.dim, d.heads
            ));
        }
        if d.vocab != Tokenizer::new().vocab_size() {
            return bad(format!(
                "decoder vocab {} does not match tokenizer",
                d.vocab
            ));
        }
        self.adapter.validate()?;
        if self.adapter.in_dim != e.dim || self.adapter.out_dim != d.dim {
            return bad("adapter dimensions do not match encoder/decoder widths".into());
        }
        if self.adapter.pool_len + 4 > d.max_seq {
            return bad("max_seq too short for the speech block".into());
        }
        Ok(())
    }
}

/// `pe[p, 2i] = sin(p / 10000^(2i/d))`, `pe[p, 2i+1] = cos(..)`.
pub fn sinusoidal_positions(len: usize, dim: usize) -> Tensor {
    Tensor::from_shape_fn((len, dim), |(p, j)| {
        let i = (j / 2) as f64;
        let angle = p as f64 / 10000f64.powf(2.0 * i / dim as f64);
        if j % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

/// `W + (scale_alpha / rank) * B A` with `A: rank x d_in`, `B: d_out x rank`.
pub fn lora_apply(base: &Tensor, a: &Tensor, b: &Tensor, cfg: &LoraConfig) -> Result<Tensor> {
    let (rows, cols) = base.dim();
    if cfg.rank == 0 || cfg.rank > rows.min(cols) {
        return Err(Error::Config(format!(
            "LoRA rank {} invalid for a {rows}x{cols} matrix",
            cfg.rank
        )));
    }
    if a.dim() != (cfg.rank, cols) || b.dim() != (rows, cfg.rank) {
        return Err(Error::shape(
            "lora_apply",
            format!("A {:?}, B {:?}, base {:?}", a.dim(), b.dim(), base.dim()),
        ));
    }
    Ok(base + &(b.dot(a) * cfg.scale()))
}

const BLOCK_TENSORS: [&str; 13] = [
    "ln1_g", "ln1_b", "wq", "wk", "wv", "wo", "bo", "ln2_g", "ln2_b", "ff1_w", "ff1_b", "ff2_w",
    "ff2_b",
];
const LORA_TARGETS: [&str; 3] = ["wq", "wk", "wv"];

fn init_block(
    store: &mut ParamStore,
    prefix: &str,
    d: usize,
    group: ParamGroup,
    init: &mut Init<'_>,
) {
    let ff = 4 * d;
    for name in BLOCK_TENSORS {
        let t = match name {
            "ln1_g" | "ln2_g" => Tensor::ones((1, d)),
            "ln1_b" | "ln2_b" | "bo" => Tensor::zeros((1, d)),
            "ff1_b" => Tensor::zeros((1, ff)),
            "ff2_b" => Tensor::zeros((1, d)),
            "ff1_w" => init.linear(d, ff),
            "ff2_w" => init.linear(ff, d),
            _ => init.linear(d, d),
        };
        store.insert(format!("{prefix}.{name}"), group, t);
    }
}

fn lora_names(layer: usize, target: &str) -> (String, String) {
    (
        format!("lora.l{layer}.{target}.a"),
        format!("lora.l{layer}.{target}.b"),
    )
}

/// One pre-LN transformer block on the graph.
fn block_graph(
    g: &mut Graph,
    b: &mut Bindings<'_>,
    prefix: &str,
    lora: Option<(usize, &LoraConfig)>,
    x: Var,
    heads: usize,
    causal: bool,
) -> Var {
    let mut p = |g: &mut Graph, n: &str| b.var(g, &format!("{prefix}.{n}"));
    let (g1, b1) = (p(g, "ln1_g"), p(g, "ln1_b"));
    let h = g.layer_norm(x, g1, b1, LN_EPS);
    let mut proj = [h; 3];
    for (i, target) in LORA_TARGETS.iter().enumerate() {
        let mut w = b.var(g, &format!("{prefix}.{target}"));
        if let Some((layer, cfg)) = lora {
            let (an, bn) = lora_names(layer, target);
            let (av, bv) = (b.var(g, &an), b.var(g, &bn));
            let ba = g.matmul(bv, av);
            let delta = g.scale(ba, cfg.scale());
            w = g.add(w, delta);
        }
        proj[i] = g.matmul(h, w);
    }
    let att = g.attention(proj[0], proj[1], proj[2], heads, causal);
    let mut p = |g: &mut Graph, n: &str| b.var(g, &format!("{prefix}.{n}"));
    let wo = p(g, "wo");
    let o = g.matmul(att, wo);
    let bo = p(g, "bo");
    let o = g.add_row(o, bo);
    let x = g.add(x, o);
    let (g2, b2) = (p(g, "ln2_g"), p(g, "ln2_b"));
    let h = g.layer_norm(x, g2, b2, LN_EPS);
    let w1 = p(g, "ff1_w");
    let f = g.matmul(h, w1);
    let fb1 = p(g, "ff1_b");
    let f = g.add_row(f, fb1);
    let f = g.gelu(f);
    let w2 = p(g, "ff2_w");
    let f = g.matmul(f, w2);
    let fb2 = p(g, "ff2_b");
    let f = g.add_row(f, fb2);
    g.add(x, f)
}

/// Block weights for the plain forward, LoRA already folded in.
#[derive(Debug, Clone)]
struct BlockWeights {
    t: Vec<Tensor>,
}

impl BlockWeights {
    fn load(store: &ParamStore, prefix: &str, lora: Option<(usize, &LoraConfig)>) -> Result<Self> {
        let mut t = Vec::with_capacity(BLOCK_TENSORS.len());
        for name in BLOCK_TENSORS {
            let base = store.value(&format!("{prefix}.{name}"));
            let w = match lora {
                Some((layer, cfg)) if LORA_TARGETS.contains(&name) => {
                    let (an, bn) = lora_names(layer, name);
                    lora_apply(base, store.value(&an), store.value(&bn), cfg)?
                }
                _ => base.clone(),
            };
            t.push(w);
        }
        Ok(BlockWeights { t })
    }

    fn w(&self, name: &str) -> &Tensor {
        &self.t[BLOCK_TENSORS
            .iter()
            .position(|n| *n == name)
            .expect("block tensor")]
    }

    /// Runs `x` (new rows) through the block. With a cache, new rows attend
    /// to cached keys/values too and the cache grows by `x.nrows()`.
    fn forward(
        &self,
        x: &Tensor,
        heads: usize,
        causal: bool,
        cache: Option<&mut (Tensor, Tensor)>,
    ) -> Tensor {
        let ln = |x: &Tensor, g: &str, b: &str| {
            graph::layer_norm_forward(x.view(), self.w(g).view(), self.w(b).view(), LN_EPS).0
        };
        let h = ln(x, "ln1_g", "ln1_b");
        let q = h.dot(self.w("wq"));
        let k = h.dot(self.w("wk"));
        let v = h.dot(self.w("wv"));
        let att = match cache {
            Some((ck, cv)) => {
                *ck = concatenate![Axis(0), ck.view(), k.view()];
                *cv = concatenate![Axis(0), cv.view(), v.view()];
                graph::attention_forward(q.view(), ck.view(), cv.view(), heads, causal).0
            }
            None => graph::attention_forward(q.view(), k.view(), v.view(), heads, causal).0,
        };
        let x = x + &(att.dot(self.w("wo")) + self.w("bo").row(0));
        let h = ln(&x, "ln2_g", "ln2_b");
        let mut f = h.dot(self.w("ff1_w")) + self.w("ff1_b").row(0);
        f.mapv_inplace(graph::gelu);
        x + &(f.dot(self.w("ff2_w")) + self.w("ff2_b").row(0))
    }
}

/// `[USER, speech x pool_len, prompt.., ASSISTANT, target.., EOS]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AssembledInput {
    pub speech_len: usize,
    /// Token ids after the speech block.
    pub suffix: Vec<usize>,
    /// Per position: is a response target (ground truth or final `EOS`).
    pub loss_mask: Vec<bool>,
}

impl AssembledInput {
    pub fn len(&self) -> usize {
        1 + self.speech_len + self.suffix.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Token id at every position; speech positions hold `None`.
    pub fn tokens(&self) -> Vec<Option<usize>> {
        let mut v = vec![Some(USER)];
        v.extend(std::iter::repeat_n(None, self.speech_len));
        v.extend(self.suffix.iter().map(|t| Some(*t)));
        v
    }

    /// Next-token targets aligned with logit rows: row `p` predicts the
    /// token at `p + 1`. Returns `(targets, mask)`.
    pub fn shifted_targets(&self) -> (Vec<usize>, Vec<bool>) {
        let toks = self.tokens();
        let n = toks.len();
        let mut targets = vec![0; n];
        let mut mask = vec![false; n];
        for p in 0..n - 1 {
            if self.loss_mask[p + 1] {
                targets[p] = toks[p + 1].expect("masked positions hold tokens");
                mask[p] = true;
            }
        }
        (targets, mask)
    }
}

pub fn assemble_input(
    id: &str,
    speech_len: usize,
    prompt: &[usize],
    target: Option<&[usize]>,
    max_seq: usize,
) -> Result<AssembledInput> {
    let mut suffix = prompt.to_vec();
    suffix.push(ASSISTANT);
    let response_start = 1 + speech_len + suffix.len();
    if let Some(t) = target {
        suffix.extend_from_slice(t);
        suffix.push(EOS);
    }
    let len = 1 + speech_len + suffix.len();
    if len > max_seq {
        return Err(Error::SequenceOverflow {
            id: id.to_string(),
            len,
            max: max_seq,
        });
    }
    let loss_mask = (0..len)
        .map(|p| target.is_some() && p >= response_start)
        .collect();
    Ok(AssembledInput {
        speech_len,
        suffix,
        loss_mask,
    })
}

/// Mean cross-entropy over rows where `mask` is set; row `i` of `logits` is
/// scored against `targets[i]`.
pub fn lm_loss(g: &mut Graph, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
    let rows: Vec<(usize, usize)> = mask
        .iter()
        .enumerate()
        .filter(|(_, m)| **m)
        .map(|(i, _)| (i, targets[i]))
        .collect();
    if rows.is_empty() {
        return Err(Error::Config("lm_loss over an empty mask".into()));
    }
    if targets.len() != g.value(logits).nrows() || mask.len() != targets.len() {
        return Err(Error::shape(
            "lm_loss",
            "logits, targets and mask must align",
        ));
    }
    Ok(g.softmax_xent(logits, &rows))
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub lora: Option<LoraConfig>,
    pub params: ParamStore,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Model> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut rng = seeded_rng(seed);
        let mut init = Init { rng: &mut rng };
        let e = &config.encoder;
        params.insert(
            "encoder.in_w",
            ParamGroup::Encoder,
            init.linear(config.features.n_mels, e.dim),
        );
        params.insert(
            "encoder.in_b",
            ParamGroup::Encoder,
            Tensor::zeros((1, e.dim)),
        );
        for l in 0..e.layers {
            init_block(
                &mut params,
                &format!("encoder.l{l}"),
                e.dim,
                ParamGroup::Encoder,
                &mut init,
            );
        }
        params.insert(
            "encoder.ln_g",
            ParamGroup::Encoder,
            Tensor::ones((1, e.dim)),
        );
        params.insert(
            "encoder.ln_b",
            ParamGroup::Encoder,
            Tensor::zeros((1, e.dim)),
        );

        AdapterParams::init(&config.adapter, &mut init).insert_into(&mut params);

        let d = &config.decoder;
        params.insert(
            "decoder.tok_emb",
            ParamGroup::Decoder,
            init.normal((d.vocab, d.dim), 0.5),
        );
        for l in 0..d.layers {
            init_block(
                &mut params,
                &format!("decoder.l{l}"),
                d.dim,
                ParamGroup::Decoder,
                &mut init,
            );
        }
        params.insert(
            "decoder.ln_g",
            ParamGroup::Decoder,
            Tensor::ones((1, d.dim)),
        );
        params.insert(
            "decoder.ln_b",
            ParamGroup::Decoder,
            Tensor::zeros((1, d.dim)),
        );
        params.insert(
            "decoder.head_w",
            ParamGroup::Decoder,
            init.linear(d.dim, d.vocab),
        );
        params.insert(
            "decoder.head_b",
            ParamGroup::Decoder,
            Tensor::zeros((1, d.vocab)),
        );
        Ok(Model {
            config,
            lora: None,
            params,
        })
    }

    /// Adds LoRA factors on decoder query/key/value: `A` seeded random,
    /// `B` zero, so the model output is unchanged.
    pub fn enable_lora(&mut self, cfg: LoraConfig, seed: u64) -> Result<()> {
        let d = self.config.decoder.dim;
        if cfg.rank == 0 || cfg.rank > d {
            return Err(Error::Config(format!(
                "LoRA rank {} invalid for width {d}",
                cfg.rank
            )));
        }
        let mut rng = seeded_rng(seed);
        let mut init = Init { rng: &mut rng };
        for l in 0..self.config.decoder.layers {
            for t in LORA_TARGETS {
                let (an, bn) = lora_names(l, t);
                self.params.insert(
                    an,
                    ParamGroup::Lora,
                    init.linear(d, cfg.rank).reversed_axes(),
                );
                self.params
                    .insert(bn, ParamGroup::Lora, Tensor::zeros((d, cfg.rank)));
            }
        }
        self.lora = Some(cfg);
        Ok(())
    }

    /// Folds the LoRA update into the base weights and drops the factors.
    pub fn merge_lora(&mut self) -> Result<()> {
        let Some(cfg) = self.lora.take() else {
            return Ok(());
        };
        for l in 0..self.config.decoder.layers {
            for t in LORA_TARGETS {
                let (an, bn) = lora_names(l, t);
                let name = format!("decoder.l{l}.{t}");
                let merged = lora_apply(
                    self.params.value(&name),
                    self.params.value(&an),
                    self.params.value(&bn),
                    &cfg,
                )?;
                *self.params.value_mut(&name).expect("base weight") = merged;
            }
        }
        self.params.remove_group(ParamGroup::Lora);
        Ok(())
    }

    fn lora_for(&self, layer: usize) -> Option<(usize, &LoraConfig)> {
        self.lora.as_ref().map(|c| (layer, c))
    }

    /// Pads or trims to the configured frame count.
    pub fn prepare_features(&self, x: &MelFeature) -> MelFeature {
        x.pad_or_trim(self.config.features.max_frames)
    }

    fn check_mel(&self, dim: (usize, usize)) -> Result<()> {
        if dim.1 != self.config.features.n_mels || dim.0 == 0 {
            return Err(Error::shape(
                "encode_speech",
                format!(
                    "features {dim:?}, expected {} bands",
                    self.config.features.n_mels
                ),
            ));
        }
        Ok(())
    }

    /// Encoder output `T x dim` for `T` input frames.
    pub fn encode_speech(&self, x: &MelFeature) -> Result<Tensor> {
        self.check_mel(x.frames.dim())?;
        let e = &self.config.encoder;
        let p = &self.params;
        let t = x.frames.nrows();
        let mut h = x.frames.dot(p.value("encoder.in_w")) + p.value("encoder.in_b").row(0);
        h += &sinusoidal_positions(t, e.dim);
        for l in 0..e.layers {
            let w = BlockWeights::load(p, &format!("encoder.l{l}"), None)?;
            h = w.forward(&h, e.heads, false, None);
        }
        Ok(graph::layer_norm_forward(
            h.view(),
            p.value("encoder.ln_g").view(),
            p.value("encoder.ln_b").view(),
            LN_EPS,
        )
        .0)
    }

    pub fn encoder_graph(&self, g: &mut Graph, b: &mut Bindings<'_>, x: Var) -> Result<Var> {
        self.check_mel(g.value(x).dim())?;
        let e = &self.config.encoder;
        let t = g.value(x).nrows();
        let w = b.var(g, "encoder.in_w");
        let h = g.matmul(x, w);
        let bias = b.var(g, "encoder.in_b");
        let h = g.add_row(h, bias);
        let pe = g.constant(sinusoidal_positions(t, e.dim));
        let mut h = g.add(h, pe);
        for l in 0..e.layers {
            h = block_graph(g, b, &format!("encoder.l{l}"), None, h, e.heads, false);
        }
        let (lg, lb) = (b.var(g, "encoder.ln_g"), b.var(g, "encoder.ln_b"));
        Ok(g.layer_norm(h, lg, lb, LN_EPS))
    }

    /// Adapter output for an encoder output.
    pub fn adapt(&self, enc: &Tensor) -> Result<Tensor> {
        adapter_forward(
            enc.view(),
            &AdapterParams::from_store(&self.params),
            &self.config.adapter,
        )
    }

    /// Decoder logits for every position of `asm`, plus the adapter output.
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        b: &mut Bindings<'_>,
        enc: Var,
        asm: &AssembledInput,
    ) -> Result<(Var, Var)> {
        let speech = adapter_graph(g, b, enc, &self.config.adapter)?;
        if asm.speech_len != self.config.adapter.pool_len {
            return Err(Error::shape("forward", "speech block length mismatch"));
        }
        let d = &self.config.decoder;
        let emb = b.var(g, "decoder.tok_emb");
        let user = g.gather(emb, &[USER]);
        let rest = g.gather(emb, &asm.suffix);
        let x = g.concat_rows(&[user, speech, rest]);
        let pe = g.constant(sinusoidal_positions(asm.len(), d.dim));
        let mut h = g.add(x, pe);
        for l in 0..d.layers {
            h = block_graph(
                g,
                b,
                &format!("decoder.l{l}"),
                self.lora_for(l),
                h,
                d.heads,
                true,
            );
        }
        let (lg, lb) = (b.var(g, "decoder.ln_g"), b.var(g, "decoder.ln_b"));
        let h = g.layer_norm(h, lg, lb, LN_EPS);
        let hw = b.var(g, "decoder.head_w");
        let logits = g.matmul(h, hw);
        let hb = b.var(g, "decoder.head_b");
        Ok((g.add_row(logits, hb), speech))
    }

    pub fn decoder(&self) -> Result<DecoderRunner<'_>> {
        let d = &self.config.decoder;
        let blocks = (0..d.layers)
            .map(|l| BlockWeights::load(&self.params, &format!("decoder.l{l}"), self.lora_for(l)))
            .collect::<Result<Vec<_>>>()?;
        Ok(DecoderRunner {
            model: self,
            blocks,
            pe: sinusoidal_positions(d.max_seq, d.dim),
        })
    }

    /// Beam-search response tokens for one encoder output.
    pub fn generate(
        &self,
        enc: &Tensor,
        prompt: &[usize],
        cfg: &DecodeConfig,
    ) -> Result<Generation> {
        let runner = self.decoder()?;
        let speech = self.adapt(enc)?;
        let asm = assemble_input(
            "",
            speech.nrows(),
            prompt,
            None,
            self.config.decoder.max_seq,
        )?;
        let room = self.config.decoder.max_seq - asm.len();
        let mut cfg = cfg.clone();
        cfg.max_new_tokens = cfg.max_new_tokens.min(room.max(1));
        let (state, logits) = runner.prefill(&speech, &asm)?;
        beam_search(&runner, state, logits, &cfg)
    }
}

/// Plain decoder with LoRA merged in and a key/value cache.
pub struct DecoderRunner<'m> {
    model: &'m Model,
    blocks: Vec<BlockWeights>,
    pe: Tensor,
}

#[derive(Debug, Clone)]
pub struct KvCache {
    layers: Vec<(Tensor, Tensor)>,
}

impl KvCache {
    pub fn len(&self) -> usize {
        self.layers[0].0.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl DecoderRunner<'_> {
    /// Appends rows `x` (embeddings) to the cache and returns last-row logits.
    fn run(&self, x: Tensor, cache: &mut KvCache) -> Result<Vec<f64>> {
        let d = &self.model.config.decoder;
        let start = cache.len();
        let end = start + x.nrows();
        if end > d.max_seq {
            return Err(Error::SequenceOverflow {
                id: "<generate>".into(),
                len: end,
                max: d.max_seq,
            });
        }
        let mut h = x + self.pe.slice(s![start..end, ..]);
        for (w, kv) in self.blocks.iter().zip(cache.layers.iter_mut()) {
            h = w.forward(&h, d.heads, true, Some(kv));
        }
        let p = &self.model.params;
        let last = h.slice(s![h.nrows() - 1.., ..]);
        let n = graph::layer_norm_forward(
            last,
            p.value("decoder.ln_g").view(),
            p.value("decoder.ln_b").view(),
            LN_EPS,
        )
        .0;
        let logits = n.dot(p.value("decoder.head_w")) + p.value("decoder.head_b");
        Ok(logits.row(0).to_vec())
    }

    fn empty_cache(&self) -> KvCache {
        let d = self.model.config.decoder.dim;
        KvCache {
            layers: vec![(Tensor::zeros((0, d)), Tensor::zeros((0, d))); self.blocks.len()],
        }
    }

    /// Runs the prompt prefix `[USER, speech, prompt.., ASSISTANT]` and returns
    /// the cache with the logits for the first response token.
    pub fn prefill(&self, speech: &Tensor, asm: &AssembledInput) -> Result<(KvCache, Vec<f64>)> {
        let emb = self.model.params.value("decoder.tok_emb");
        let user = emb.select(Axis(0), &[USER]);
        let rest = emb.select(Axis(0), &asm.suffix);
        let x = concatenate![Axis(0), user.view(), speech.view(), rest.view()];
        let mut cache = self.empty_cache();
        let logits = self.run(x, &mut cache)?;
        Ok((cache, logits))
    }

    /// Logits at every position of `x` by feeding one row at a time.
    pub fn logits_incremental(&self, speech: &Tensor, asm: &AssembledInput) -> Result<Tensor> {
        let emb = self.model.params.value("decoder.tok_emb");
        let user = emb.select(Axis(0), &[USER]);
        let rest = emb.select(Axis(0), &asm.suffix);
        let x = concatenate![Axis(0), user.view(), speech.view(), rest.view()];
        let mut cache = self.empty_cache();
        let mut out = Tensor::zeros((x.nrows(), self.model.config.decoder.vocab));
        for r in 0..x.nrows() {
            let l = self.run(x.slice(s![r..r + 1, ..]).to_owned(), &mut cache)?;
            out.row_mut(r).assign(&ndarray::ArrayView1::from(&l));
        }
        Ok(out)
    }
}

impl StepModel for DecoderRunner<'_> {
    type State = KvCache;

    fn eos(&self) -> usize {
        EOS
    }

    fn step(&self, state: &KvCache, token: usize) -> Result<(KvCache, Vec<f64>)> {
        let mut cache = state.clone();
        let x = self
            .model
            .params
            .value("decoder.tok_emb")
            .select(Axis(0), &[token]);
        let logits = self.run(x, &mut cache)?;
        Ok((cache, logits))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::gradcheck::random;
    use crate::params::gradcheck_store;
    use crate::tokenizer::Task;
    use std::collections::{BTreeSet, HashMap};

    fn tiny() -> ModelConfig {
        ModelConfig {
            features: FeatureConfig {
                n_mels: 6,
                max_frames: 8,
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
                max_seq: 32,
                ..Default::default()
            },
        }
    }

    fn all_groups() -> BTreeSet<ParamGroup> {
        ParamGroup::ALL.into_iter().collect()
    }

    fn fixture(model: &Model) -> (Tensor, AssembledInput) {
        let tok = Tokenizer::new();
        let mel = random((8, 6), 42);
        let target = tok.encode("ab §P c §E");
        let asm = assemble_input(
            "u1",
            model.config.adapter.pool_len,
            &[tok.prompt_id(Task::Ner)],
            Some(&target),
            model.config.decoder.max_seq,
        )
        .unwrap();
        (mel, asm)
    }

    fn graph_loss(
        model: &Model,
        store: &ParamStore,
        mel: &Tensor,
        asm: &AssembledInput,
    ) -> (Graph, Var, HashMap<String, Var>) {
        let groups = all_groups();
        let mut g = Graph::new();
        let mut b = Bindings::new(store, &groups);
        let x = g.constant(mel.clone());
        let enc = model.encoder_graph(&mut g, &mut b, x).unwrap();
        let (logits, _) = model.forward_graph(&mut g, &mut b, enc, asm).unwrap();
        let (t, m) = asm.shifted_targets();
        let l = lm_loss(&mut g, logits, &t, &m).unwrap();
        (g, l, b.into_vars())
    }

    fn graph_logits(model: &Model, enc: &Tensor, asm: &AssembledInput) -> Tensor {
        let none = BTreeSet::new();
        let mut g = Graph::new();
        let mut b = Bindings::new(&model.params, &none);
        let e = g.constant(enc.clone());
        let (logits, _) = model.forward_graph(&mut g, &mut b, e, asm).unwrap();
        g.value(logits).clone()
    }

    fn max_diff(a: &Tensor, b: &Tensor) -> f64 {
        (a - b).iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    #[test]
    fn encoder_shape_and_position_sensitivity() {
        let m = Model::new(ModelConfig::default(), 1).unwrap();
        for t in [1, 37, 128] {
            let x = MelFeature::new(random((t, 40), t as u64));
            assert_eq!(m.encode_speech(&x).unwrap().dim(), (t, 64));
        }
        let x = random((10, 40), 3);
        let mut perm = x.clone();
        perm.row_mut(0).assign(&x.row(9));
        perm.row_mut(9).assign(&x.row(0));
        let a = m.encode_speech(&MelFeature::new(x)).unwrap();
        let b = m.encode_speech(&MelFeature::new(perm)).unwrap();
        // an order-blind encoder would give rows 0 and 9 swapped
        assert!((a.row(0).to_owned() - b.row(9))
            .iter()
            .any(|d| d.abs() > 1e-6));
        assert!(m
            .encode_speech(&MelFeature::new(random((4, 39), 1)))
            .is_err());
    }

    #[test]
    fn plain_encoder_matches_graph() {
        let m = Model::new(ModelConfig::default(), 2).unwrap();
        let x = random((20, 40), 5);
        let plain = m.encode_speech(&MelFeature::new(x.clone())).unwrap();
        let none = BTreeSet::new();
        let mut g = Graph::new();
        let mut b = Bindings::new(&m.params, &none);
        let xv = g.constant(x);
        let e = m.encoder_graph(&mut g, &mut b, xv).unwrap();
        assert!(max_diff(&plain, g.value(e)) < 1e-10);
    }

    #[test]
    fn cached_decoding_matches_graph_logits() {
        let mut m = Model::new(ModelConfig::default(), 3).unwrap();
        m.enable_lora(LoraConfig::default(), 4).unwrap();
        for (name, p) in m.params.clone().iter() {
            if p.group == ParamGroup::Lora {
                *m.params.value_mut(name).unwrap() = random(p.value.dim(), 9) * 0.1;
            }
        }
        let tok = Tokenizer::new();
        let enc = random((128, 64), 6);
        let target = tok.encode("hello world");
        let asm = assemble_input("x", 32, &[tok.prompt_id(Task::Asr)], Some(&target), 128).unwrap();
        let full = graph_logits(&m, &enc, &asm);
        let runner = m.decoder().unwrap();
        let speech = m.adapt(&enc).unwrap();
        let inc = runner.logits_incremental(&speech, &asm).unwrap();
        assert!(max_diff(&full, &inc) < 1e-9);

        let prefix = assemble_input("x", 32, &[tok.prompt_id(Task::Asr)], None, 128).unwrap();
        let (cache, first) = runner.prefill(&speech, &prefix).unwrap();
        assert_eq!(cache.len(), prefix.len());
        let row = full.row(prefix.len() - 1);
        assert!(first.iter().zip(row).all(|(a, b)| (a - b).abs() < 1e-9));
        let (_, next) = runner.step(&cache, target[0]).unwrap();
        let row = full.row(prefix.len());
        assert!(next.iter().zip(row).all(|(a, b)| (a - b).abs() < 1e-9));
    }

    #[test]
    fn gradients_through_encoder_and_decoder_layers() {
        let model = Model::new(tiny(), 7).unwrap();
        let mut store = model.params.clone();
        // move LN gains/biases off their init so their gradients are generic
        for (name, p) in model.params.iter() {
            if name.contains("ln") {
                *store.value_mut(name).unwrap() = &p.value + &(random(p.value.dim(), 11) * 0.3);
            }
        }
        let (mel, asm) = fixture(&model);
        let err = gradcheck_store(
            &store,
            &[
                ParamGroup::Encoder,
                ParamGroup::Adapter,
                ParamGroup::Decoder,
            ],
            110,
            3,
            |s| graph_loss(&model, s, &mel, &asm),
        );
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn lora_gradients() {
        let mut model = Model::new(tiny(), 8).unwrap();
        model
            .enable_lora(
                LoraConfig {
                    rank: 2,
                    scale_alpha: 4.0,
                },
                1,
            )
            .unwrap();
        let mut store = model.params.clone();
        for (name, p) in model.params.iter() {
            if p.group == ParamGroup::Lora {
                *store.value_mut(name).unwrap() = random(p.value.dim(), 13) * 0.5;
            }
        }
        let (mel, asm) = fixture(&model);
        let err = gradcheck_store(&store, &[ParamGroup::Lora], 100, 4, |s| {
            graph_loss(&model, s, &mel, &asm)
        });
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn lora_zero_init_merge_and_representability() {
        let base = Model::new(ModelConfig::default(), 10).unwrap();
        let mut lora = base.clone();
        lora.enable_lora(LoraConfig::default(), 11).unwrap();
        let tok = Tokenizer::new();
        let enc = random((128, 64), 12);
        let asm = assemble_input(
            "x",
            32,
            &[tok.prompt_id(Task::Asr)],
            Some(&tok.encode("abc")),
            128,
        )
        .unwrap();
        assert!(
            max_diff(
                &graph_logits(&base, &enc, &asm),
                &graph_logits(&lora, &enc, &asm)
            ) <= 1e-6
        );

        for (name, p) in lora.params.clone().iter() {
            if name.ends_with(".b") && p.group == ParamGroup::Lora {
                *lora.params.value_mut(name).unwrap() = random(p.value.dim(), 14) * 0.2;
            }
        }
        let unmerged = graph_logits(&lora, &enc, &asm);
        assert!(max_diff(&unmerged, &graph_logits(&base, &enc, &asm)) > 1e-3);
        let mut merged = lora.clone();
        merged.merge_lora().unwrap();
        assert!(!merged.params.has_group(ParamGroup::Lora));
        assert!(max_diff(&unmerged, &graph_logits(&merged, &enc, &asm)) <= 1e-5);

        // rank = min(dims): A = I, B = dW * rank / alpha gives W + dW exactly
        let cfg = LoraConfig {
            rank: 4,
            scale_alpha: 32.0,
        };
        let w = random((4, 4), 15);
        let dw = random((4, 4), 16);
        let b = &dw * (cfg.rank as f64 / cfg.scale_alpha);
        let eff = lora_apply(&w, &Tensor::eye(4), &b, &cfg).unwrap();
        assert!(max_diff(&eff, &(&w + &dw)) < 1e-12);
        let too_big = LoraConfig {
            rank: 5,
            scale_alpha: 1.0,
        };
        assert!(lora_apply(&w, &Tensor::zeros((5, 4)), &Tensor::zeros((4, 5)), &too_big).is_err());
    }

    #[test]
    fn assembly_examples() {
        let a = assemble_input("u", 32, &[5], None, 128).unwrap();
        assert!(a.loss_mask.iter().all(|m| !m));
        assert_eq!(a.len(), 1 + 32 + 1 + 1);
        let a = assemble_input("u", 32, &[5], Some(&[20, 21, 22]), 128).unwrap();
        assert_eq!(a.loss_mask.iter().filter(|m| **m).count(), 4);
        // USER + 32 speech rows + prompt + ASSISTANT + 3 targets + EOS
        assert_eq!(a.len(), 32 + 1 + 2 + 3 + 1);
        assert!(a.loss_mask[35..].iter().all(|m| *m));
        let (t, m) = a.shifted_targets();
        assert_eq!(&t[34..38], &[20, 21, 22, EOS]);
        assert_eq!(m.iter().filter(|v| **v).count(), 4);
        match assemble_input("long-one", 32, &[5], Some(&[20; 100]), 128) {
            Err(Error::SequenceOverflow { id, .. }) => assert_eq!(id, "long-one"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn lm_loss_examples() {
        let v = 59;
        let mut g = Graph::new();
        let flat = g.constant(Tensor::zeros((3, v)));
        let l = lm_loss(&mut g, flat, &[1, 2, 3], &[true, false, true]).unwrap();
        assert!((g.scalar(l) - (v as f64).ln()).abs() < 1e-12);
        assert!(lm_loss(&mut g, flat, &[1, 2, 3], &[false; 3]).is_err());

        let mut sharp = Tensor::zeros((2, v));
        sharp[[0, 4]] = 30.0;
        sharp[[1, 7]] = 30.0;
        let s = g.constant(sharp);
        let l = lm_loss(&mut g, s, &[4, 7], &[true, true]).unwrap();
        assert!(g.scalar(l) <= 1e-8);

        let x = random((4, v), 20);
        let doubled = concatenate![Axis(0), x.view(), x.view()];
        let targets = [3, 9, 0, 5];
        let mask = [true, true, false, true];
        let xv = g.constant(x);
        let dv = g.constant(doubled);
        let a = lm_loss(&mut g, xv, &targets, &mask).unwrap();
        let t2: Vec<usize> = targets.iter().chain(&targets).copied().collect();
        let m2: Vec<bool> = mask.iter().chain(&mask).copied().collect();
        let b = lm_loss(&mut g, dv, &t2, &m2).unwrap();
        assert!((g.scalar(a) - g.scalar(b)).abs() < 1e-12);
    }

    #[test]
    fn lm_loss_gradient_is_softmax_minus_onehot() {
        let x = random((4, 10), 21) * 3.0;
        let targets = [3, 9, 0, 5];
        let mask = [true, false, true, true];
        let mut g = Graph::new();
        let xv = g.param(x.clone());
        let l = lm_loss(&mut g, xv, &targets, &mask).unwrap();
        let grad = g.backward(l).take(xv).unwrap();
        let mut p = x.clone();
        graph::softmax_rows_inplace(&mut p);
        for r in 0..4 {
            for c in 0..10 {
                let want = if mask[r] {
                    (p[[r, c]] - f64::from(c == targets[r])) / 3.0
                } else {
                    0.0
                };
                assert!((grad[[r, c]] - want).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn generation_is_deterministic_and_beam_one_is_greedy() {
        let m = Model::new(ModelConfig::default(), 30).unwrap();
        let enc = random((128, 64), 31);
        let prompt = [Tokenizer::new().prompt_id(Task::Asr)];
        let cfg = DecodeConfig {
            max_new_tokens: 12,
            ..Default::default()
        };
        let a = m.generate(&enc, &prompt, &cfg).unwrap();
        assert_eq!(a, m.generate(&enc, &prompt, &cfg).unwrap());

        let greedy_cfg = DecodeConfig {
            beam: 1,
            ..cfg.clone()
        };
        let g = m.generate(&enc, &prompt, &greedy_cfg).unwrap();
        let runner = m.decoder().unwrap();
        let speech = m.adapt(&enc).unwrap();
        let asm = assemble_input("", 32, &prompt, None, 128).unwrap();
        let (mut cache, mut logits) = runner.prefill(&speech, &asm).unwrap();
        let mut seq = Vec::new();
        for _ in 0..greedy_cfg.max_new_tokens {
            let s = crate::beam::step_scores(&logits, &seq, &greedy_cfg);
            let v = (0..s.len()).fold(0, |best, i| if s[i] > s[best] { i } else { best });
            if v == EOS {
                break;
            }
            seq.push(v);
            (cache, logits) = runner.step(&cache, v).unwrap();
        }
        assert_eq!(g.tokens, seq);
    }
}
