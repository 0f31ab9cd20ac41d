//! Skip-gram with negative sampling, used to build a "pretrained" diffusion
//! space from the training corpus itself.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embedding::EmbeddingMatrix;
use crate::error::{Result, SedError};
use crate::tensor::Matrix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SkipGramConfig {
    pub window: usize,
    pub negatives: usize,
    pub steps: usize,
    pub learning_rate: f64,
}

impl Default for SkipGramConfig {
    fn default() -> Self {
        Self {
            window: 3,
            negatives: 5,
            steps: 200_000,
            learning_rate: 0.025,
        }
    }
}

const TABLE_SIZE: usize = 1 << 20;

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Trains on `tokens` and returns the summed word and context vectors
/// rescaled to norm `√D`.
/// With `steps == 0` this is the random initialisation, renormalised.
pub fn train_skipgram(
    tokens: &[usize],
    vocab_size: usize,
    dim: usize,
    config: &SkipGramConfig,
    seed: u64,
) -> Result<EmbeddingMatrix> {
    if config.window == 0 || config.negatives == 0 {
        return Err(SedError::InvalidArgument(
            "skip-gram window and negatives must be positive".into(),
        ));
    }
    if tokens.len() <= config.window {
        return Err(SedError::CorpusTooShort {
            len: tokens.len(),
            window: config.window,
        });
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t >= vocab_size) {
        return Err(SedError::TokenOutOfRange {
            id: bad,
            vocab: vocab_size,
        });
    }

    let init = EmbeddingMatrix::random(vocab_size, dim, seed)?;
    let scale = 0.5 / (dim as f64);
    let mut input = init.values().scale(scale);
    let mut output = Matrix::<f64>::zeros(vocab_size, dim);

    // noise distribution ∝ count^0.75
    let mut counts = vec![0f64; vocab_size];
    for &t in tokens {
        counts[t] += 1.0;
    }
    let weights: Vec<f64> = counts.iter().map(|c| c.powf(0.75)).collect();
    let total: f64 = weights.iter().sum();
    let mut table = Vec::with_capacity(TABLE_SIZE);
    let mut acc = 0.0;
    let mut tok = 0;
    for i in 0..TABLE_SIZE {
        let frac = (i as f64 + 0.5) / TABLE_SIZE as f64;
        while tok + 1 < vocab_size && acc + weights[tok] / total < frac {
            acc += weights[tok] / total;
            tok += 1;
        }
        table.push(tok);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_5eed);
    let mut grad_in = vec![0f64; dim];
    let window = config.window as i64;
    for step in 0..config.steps {
        let lr = config.learning_rate * (1.0 - step as f64 / config.steps as f64).max(1e-4);
        let pos = rng.random_range(0..tokens.len()) as i64;
        let mut offset = 0;
        while offset == 0 {
            offset = rng.random_range(-window..=window);
        }
        let ctx = pos + offset;
        if ctx < 0 || ctx >= tokens.len() as i64 {
            continue;
        }
        let center = tokens[pos as usize];
        let context = tokens[ctx as usize];

        grad_in.iter_mut().for_each(|g| *g = 0.0);
        for n in 0..=config.negatives {
            let (target, label) = if n == 0 {
                (context, 1.0)
            } else {
                let t = table[rng.random_range(0..TABLE_SIZE)];
                if t == context {
                    continue;
                }
                (t, 0.0)
            };
            let dot: f64 = input
                .row(center)
                .iter()
                .zip(output.row(target))
                .map(|(a, b)| a * b)
                .sum();
            let g = lr * (label - sigmoid(dot));
            let out_row = output.row(target).to_vec();
            for (gi, o) in grad_in.iter_mut().zip(&out_row) {
                *gi += g * o;
            }
            let in_row = input.row(center).to_vec();
            for (o, i) in output.row_mut(target).iter_mut().zip(&in_row) {
                *o += g * i;
            }
        }
        for (i, g) in input.row_mut(center).iter_mut().zip(&grad_in) {
            *i += g;
        }
    }
    // word and context vectors are summed so that tokens appearing in each
    // other's context end up close, not only tokens sharing contexts
    input.add_assign(&output);
    EmbeddingMatrix::from_rows_normalized(input)
}
