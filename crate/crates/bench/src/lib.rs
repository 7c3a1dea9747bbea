//! Fixtures shared by the benchmarks.

use ndarray::Array2;
use rand::Rng;
use speechllm_core::beam::StepModel;
use speechllm_core::params::seeded_rng;
use speechllm_core::Result;

/// Reference/hypothesis word lists with about 10% substitutions.
pub fn wer_pairs(n: usize, len: usize, seed: u64) -> Vec<(Vec<String>, Vec<String>)> {
    let mut rng = seeded_rng(seed);
    (0..n)
        .map(|_| {
            let r: Vec<String> = (0..len)
                .map(|_| format!("w{}", rng.random_range(0..50)))
                .collect();
            let h = r
                .iter()
                .map(|w| {
                    if rng.random_bool(0.1) {
                        "x".to_string()
                    } else {
                        w.clone()
                    }
                })
                .collect();
            (r, h)
        })
        .collect()
}

pub fn random_frames(t: usize, d: usize, seed: u64) -> Array2<f64> {
    let mut rng = seeded_rng(seed);
    Array2::from_shape_fn((t, d), |_| rng.random_range(-1.0..1.0))
}

/// Bigram table LM; state is the last token.
pub struct BigramLm {
    pub logits: Vec<Vec<f64>>,
}

impl BigramLm {
    pub fn new(vocab: usize, seed: u64) -> Self {
        let mut rng = seeded_rng(seed);
        let logits = (0..vocab)
            .map(|_| (0..vocab).map(|_| rng.random_range(-3.0..3.0)).collect())
            .collect();
        BigramLm { logits }
    }
}

impl StepModel for BigramLm {
    type State = usize;

    fn eos(&self) -> usize {
        0
    }

    fn step(&self, _state: &usize, token: usize) -> Result<(usize, Vec<f64>)> {
        Ok((token, self.logits[token].clone()))
    }
}
