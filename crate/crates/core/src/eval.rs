//! Sample-quality metrics: unigram entropy and proxy NLL under an n-gram
//! scorer, with a validation-data reference row.
//!
//! Pads are removed before either metric is computed. Proxy NLL values are
//! only comparable within one scorer; they say nothing about any other
//! language model.

use std::collections::HashMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{TokenSeq, PAD_ID};
use crate::error::{Result, SedError};

/// Shannon entropy in nats of the pooled non-pad tokens.
pub fn unigram_entropy(samples: &[TokenSeq]) -> Result<f64> {
    let mut counts: HashMap<usize, u64> = HashMap::new();
    let mut total = 0u64;
    for &id in samples.iter().flat_map(|s| s.ids()).filter(|&&id| id != PAD_ID) {
        *counts.entry(id).or_default() += 1;
        total += 1;
    }
    if total == 0 {
        return Err(SedError::InvalidArgument("no non-pad tokens to measure".into()));
    }
    let n = total as f64;
    let mut ids: Vec<_> = counts.into_iter().collect();
    ids.sort_unstable();
    Ok(ids
        .into_iter()
        .map(|(_, c)| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum::<f64>()
        .max(0.0))
}

#[derive(Clone, Debug, Default)]
struct ContextCounts {
    total: u64,
    next: HashMap<usize, u64>,
}

/// Interpolated add-k n-gram model over the non-pad ids `1..vocab_size`.
///
/// Each order smooths with `k` pseudo-counts per token spread according to
/// the next-lower order; the bottom of the chain is uniform, so every token
/// has nonzero probability in every context.
#[derive(Clone, Debug)]
pub struct NGramScorer {
    order: usize,
    k: f64,
    vocab_size: usize,
    /// `tables[n]` maps histories of length `n` to next-token counts.
    tables: Vec<HashMap<Vec<usize>, ContextCounts>>,
    fingerprint: String,
}

impl NGramScorer {
    /// Counts every n-gram of each training sequence, pads removed.
    pub fn train(corpus: &[TokenSeq], vocab_size: usize, order: usize, k: f64) -> Result<Self> {
        if order == 0 {
            return Err(SedError::InvalidArgument("scorer order must be at least 1".into()));
        }
        if !(k > 0.0 && k.is_finite()) {
            return Err(SedError::InvalidArgument(format!("add-k constant {k} must be positive")));
        }
        if vocab_size < 2 {
            return Err(SedError::InvalidArgument("scorer needs at least one non-pad token".into()));
        }
        let mut tables = vec![HashMap::<Vec<usize>, ContextCounts>::new(); order];
        let mut hasher = Sha256::new();
        hasher.update(format!("order={order} k={k} V={vocab_size}\n"));
        for seq in corpus {
            seq.check_range(vocab_size)?;
            let ids: Vec<usize> = seq.ids().iter().copied().filter(|&id| id != PAD_ID).collect();
            for &id in &ids {
                hasher.update((id as u64).to_le_bytes());
            }
            hasher.update(u64::MAX.to_le_bytes());
            for (i, &w) in ids.iter().enumerate() {
                for (n, table) in tables.iter_mut().enumerate().take(i + 1) {
                    let entry = table.entry(ids[i - n..i].to_vec()).or_default();
                    entry.total += 1;
                    *entry.next.entry(w).or_default() += 1;
                }
            }
        }
        let fingerprint = hasher.finalize().iter().map(|b| format!("{b:02x}")).collect();
        Ok(Self {
            order,
            k,
            vocab_size,
            tables,
            fingerprint,
        })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    /// Number of tokens carrying probability mass (every id except PAD).
    pub fn support(&self) -> usize {
        self.vocab_size - 1
    }

    /// SHA-256 of the training data and hyperparameters.
    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    /// `P(token | history)`, using at most the last `order - 1` history
    /// tokens. PAD has probability zero.
    pub fn prob(&self, history: &[usize], token: usize) -> f64 {
        if token == PAD_ID || token >= self.vocab_size {
            return 0.0;
        }
        let s = self.support() as f64;
        let keep = history.len().min(self.order - 1);
        let history = &history[history.len() - keep..];
        let mut p = 1.0 / s;
        for n in 0..=keep {
            let ctx = &history[keep - n..];
            if let Some(c) = self.tables[n].get(ctx) {
                let hits = c.next.get(&token).copied().unwrap_or(0) as f64;
                p = (hits + self.k * s * p) / (c.total as f64 + self.k * s);
            }
        }
        p
    }

    /// Total negative log probability and token count of one sequence.
    fn score(&self, seq: &TokenSeq) -> (f64, usize) {
        let ids: Vec<usize> = seq.ids().iter().copied().filter(|&id| id != PAD_ID).collect();
        let nll = (0..ids.len()).map(|i| -self.prob(&ids[..i], ids[i]).ln()).sum();
        (nll, ids.len())
    }
}

/// Mean per-token NLL with the standard error of the per-sequence means.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NllEstimate {
    pub mean: f64,
    pub std_error: f64,
    pub tokens: usize,
    pub sequences: usize,
}

/// Mean negative log probability per non-pad token.
pub fn proxy_nll(samples: &[TokenSeq], scorer: &NGramScorer) -> Result<NllEstimate> {
    let mut total = 0.0;
    let mut tokens = 0;
    let mut per_seq = Vec::new();
    for s in samples {
        let (nll, n) = scorer.score(s);
        total += nll;
        tokens += n;
        if n > 0 {
            per_seq.push(nll / n as f64);
        }
    }
    if tokens == 0 {
        return Err(SedError::InvalidArgument("no non-pad tokens to score".into()));
    }
    Ok(NllEstimate {
        mean: total / tokens as f64,
        std_error: standard_error(&per_seq),
        tokens,
        sequences: per_seq.len(),
    })
}

fn standard_error(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (var / n).sqrt()
}

/// Entropy with a standard error taken from equal-sized chunks.
fn entropy_with_error(samples: &[TokenSeq]) -> Result<(f64, f64)> {
    let h = unigram_entropy(samples)?;
    let chunks = samples.len().min(8);
    if chunks < 2 {
        return Ok((h, 0.0));
    }
    let size = samples.len() / chunks;
    let parts: Vec<f64> = (0..chunks)
        .filter_map(|i| unigram_entropy(&samples[i * size..(i + 1) * size]).ok())
        .collect();
    // chunk entropies are biased low, so only their spread is used
    Ok((h, standard_error(&parts)))
}

/// One row of the report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub label: String,
    pub space: String,
    pub self_condition: bool,
    pub scale: Option<f64>,
    pub unigram_entropy: f64,
    pub entropy_std_error: f64,
    pub proxy_nll: f64,
    pub nll_std_error: f64,
    pub samples: usize,
    pub tokens: usize,
}

impl MetricRow {
    pub fn measure(
        label: impl Into<String>,
        space: impl Into<String>,
        self_condition: bool,
        scale: Option<f64>,
        samples: &[TokenSeq],
        scorer: &NGramScorer,
    ) -> Result<Self> {
        let (h, h_se) = entropy_with_error(samples)?;
        let nll = proxy_nll(samples, scorer)?;
        Ok(Self {
            label: label.into(),
            space: space.into(),
            self_condition,
            scale,
            unigram_entropy: h,
            entropy_std_error: h_se,
            proxy_nll: nll.mean,
            nll_std_error: nll.std_error,
            samples: samples.len(),
            tokens: nll.tokens,
        })
    }
}

/// Rows for each guidance scale plus the validation-data reference.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub task: String,
    pub checkpoint: String,
    pub config_fingerprint: String,
    pub scorer_fingerprint: String,
    pub scorer_order: usize,
    pub vocab_size: usize,
    pub reference: MetricRow,
    pub rows: Vec<MetricRow>,
}

impl MetricReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }

    /// Fixed-width table with the data reference row first.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<10} {:<8} {:>9} {:>6} {:>15} {:>15} {:>7}",
            "space", "self-c", "scale", "n", "entropy", "proxy nll", "tokens"
        );
        for row in std::iter::once(&self.reference).chain(&self.rows) {
            let scale = row.scale.map_or_else(|| row.label.clone(), |s| format!("{s}"));
            let _ = writeln!(
                out,
                "{:<10} {:<8} {:>9} {:>6} {:>8.3} ± {:<4.2} {:>8.3} ± {:<4.2} {:>7}",
                row.space,
                if row.self_condition { "yes" } else { "no" },
                scale,
                row.samples,
                row.unigram_entropy,
                row.entropy_std_error,
                row.proxy_nll,
                row.nll_std_error,
                row.tokens,
            );
        }
        out
    }
}
