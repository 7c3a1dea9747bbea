//! Beam search with repetition and length penalties over any step model.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeConfig {
    pub beam: usize,
    pub temperature: f64,
    pub repetition_penalty: f64,
    pub length_penalty: f64,
    pub max_new_tokens: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            beam: 5,
            temperature: 1.0,
            repetition_penalty: 2.0,
            length_penalty: 0.5,
            max_new_tokens: 64,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.beam >= 1
            && self.temperature > 0.0
            && self.repetition_penalty >= 1.0
            && self.length_penalty >= 0.0
            && self.max_new_tokens >= 1;
        if !ok {
            return Err(Error::Config(format!("invalid decode config {self:?}")));
        }
        Ok(())
    }
}

/// Autoregressive model seen one token at a time.
pub trait StepModel {
    type State;

    fn eos(&self) -> usize;

    /// Feeds `token` after `state`, returning the new state and the logits
    /// for the following position.
    fn step(&self, state: &Self::State, token: usize) -> Result<(Self::State, Vec<f64>)>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    /// Generated tokens without the final `EOS`.
    pub tokens: Vec<usize>,
    /// Sum of per-step log-probabilities, `EOS` included.
    pub logprob: f64,
    /// `logprob / len^length_penalty`.
    pub score: f64,
    /// Hit `max_new_tokens` before `EOS`.
    pub truncated: bool,
}

/// Log-probabilities for the next token after applying the repetition
/// penalty to every token in `history` and then the temperature.
pub fn step_scores(logits: &[f64], history: &[usize], cfg: &DecodeConfig) -> Vec<f64> {
    let mut z = logits.to_vec();
    if cfg.repetition_penalty != 1.0 {
        let mut seen = vec![false; z.len()];
        for &t in history {
            if t < z.len() && !seen[t] {
                seen[t] = true;
                z[t] = if z[t] > 0.0 {
                    z[t] / cfg.repetition_penalty
                } else {
                    z[t] * cfg.repetition_penalty
                };
            }
        }
    }
    if cfg.temperature != 1.0 {
        z.iter_mut().for_each(|v| *v /= cfg.temperature);
    }
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    z.iter().map(|v| v - lse).collect()
}

pub fn normalized_score(logprob: f64, len: usize, length_penalty: f64) -> f64 {
    if length_penalty == 0.0 {
        return logprob;
    }
    logprob / (len as f64).powf(length_penalty)
}

/// Higher score first, then the lexicographically lower token sequence.
fn rank(a: (f64, &[usize]), b: (f64, &[usize])) -> Ordering {
    b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1))
}

struct Live<S> {
    tokens: Vec<usize>,
    logprob: f64,
    state: S,
    logits: Vec<f64>,
}

struct Finished {
    tokens: Vec<usize>,
    logprob: f64,
    truncated: bool,
}

/// Beam search from `state`, whose next-token logits are `logits`.
///
/// Each step keeps the `beam` best extensions of all live hypotheses.
/// Extensions ending in `EOS` retire to the finished pool. Search stops once
/// `beam` hypotheses have finished, no live hypothesis remains, or
/// `max_new_tokens` is reached (survivors are then marked truncated).
pub fn beam_search<M: StepModel>(
    model: &M,
    state: M::State,
    logits: Vec<f64>,
    cfg: &DecodeConfig,
) -> Result<Generation> {
    cfg.validate()?;
    let eos = model.eos();
    let mut live = vec![Live {
        tokens: Vec::new(),
        logprob: 0.0,
        state,
        logits,
    }];
    let mut finished: Vec<Finished> = Vec::new();
    for step in 0..cfg.max_new_tokens {
        let mut cands: Vec<(f64, usize, usize, Vec<usize>)> = Vec::new();
        for (i, h) in live.iter().enumerate() {
            let scores = step_scores(&h.logits, &h.tokens, cfg);
            for (v, s) in scores.into_iter().enumerate() {
                let mut seq = h.tokens.clone();
                seq.push(v);
                cands.push((h.logprob + s, i, v, seq));
            }
        }
        cands.sort_by(|a, b| rank((a.0, &a.3), (b.0, &b.3)));
        cands.truncate(cfg.beam);
        let last = step + 1 == cfg.max_new_tokens;
        let mut next = Vec::new();
        for (logprob, parent, v, seq) in cands {
            if v == eos {
                finished.push(Finished {
                    tokens: seq,
                    logprob,
                    truncated: false,
                });
            } else if last {
                finished.push(Finished {
                    tokens: seq,
                    logprob,
                    truncated: true,
                });
            } else {
                let (state, logits) = model.step(&live[parent].state, v)?;
                next.push(Live {
                    tokens: seq,
                    logprob,
                    state,
                    logits,
                });
            }
        }
        live = next;
        if live.is_empty() || finished.len() >= cfg.beam {
            break;
        }
    }
    let best = finished
        .into_iter()
        .map(|f| {
            let score = normalized_score(f.logprob, f.tokens.len(), cfg.length_penalty);
            (score, f)
        })
        .min_by(|a, b| rank((a.0, &a.1.tokens), (b.0, &b.1.tokens)))
        .expect("at least one hypothesis finishes");
    let (score, mut f) = best;
    if !f.truncated {
        f.tokens.pop();
    }
    Ok(Generation {
        tokens: f.tokens,
        logprob: f.logprob,
        score,
        truncated: f.truncated,
    })
}
