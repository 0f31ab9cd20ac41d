//! Forward-process nearest-neighbor traces.
//!
//! A token sequence is embedded, then corrupted one forward step at a time.
//! At recorded steps each position's iterate is decoded to its nearest
//! embedding row and ranked within the `K` nearest neighbors of the
//! original token (rank `K` means "not among them").

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::corpus::Vocab;
use crate::embedding::{nearest_tokens, nn_ranks, EmbeddingMatrix};
use crate::error::{Result, SedError};
use crate::sampler::{trace_csv, TraceRecord};
use crate::schedule::{forward_step, NoiseSchedule};
use crate::tensor::Matrix;

/// Default neighborhood size.
pub const DEFAULT_K: usize = 128;

#[derive(Clone, Debug, PartialEq)]
pub struct ForwardTrace {
    pub tokens: Vec<usize>,
    pub k: usize,
    /// Recorded steps, increasing, starting at 0.
    pub steps: Vec<usize>,
    /// `nearest[i][p]`: nearest token at `steps[i]`, position `p`.
    pub nearest: Vec<Vec<usize>>,
    pub ranks: Vec<Vec<usize>>,
}

/// Steps `0, stride, 2·stride, …` plus the final step.
pub fn recorded_steps(total: usize, stride: usize) -> Vec<usize> {
    let stride = stride.max(1);
    let mut steps: Vec<usize> = (0..=total).step_by(stride).collect();
    if steps.last() != Some(&total) {
        steps.push(total);
    }
    steps
}

/// Runs the forward chain from the clean embeddings of `tokens`.
pub fn forward_trace(
    tokens: &[usize],
    embedding: &EmbeddingMatrix,
    schedule: &NoiseSchedule,
    stride: usize,
    k: usize,
    seed: u64,
) -> Result<ForwardTrace> {
    if tokens.is_empty() {
        return Err(SedError::InvalidArgument("nothing to trace".into()));
    }
    if k == 0 || k > embedding.vocab_size() {
        return Err(SedError::InvalidArgument(format!(
            "K = {k} must lie in [1, {}]",
            embedding.vocab_size()
        )));
    }
    crate::corpus::TokenSeq(tokens.to_vec()).check_range(embedding.vocab_size())?;
    let steps = recorded_steps(schedule.steps(), stride);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x: Matrix<f64> = embedding.lookup(tokens);
    let mut trace = ForwardTrace {
        tokens: tokens.to_vec(),
        k,
        steps: steps.clone(),
        nearest: Vec::with_capacity(steps.len()),
        ranks: Vec::with_capacity(steps.len()),
    };
    let mut next = steps.iter().peekable();
    for t in 0..=schedule.steps() {
        if t > 0 {
            let eps = Matrix::from_fn(x.rows(), x.cols(), |_, _| StandardNormal.sample(&mut rng));
            x = forward_step(&x, t, &eps, schedule);
        }
        if next.peek() == Some(&&t) {
            next.next();
            trace.nearest.push(nearest_tokens(&x, embedding));
            trace.ranks.push(nn_ranks(&x, tokens, embedding, k)?);
        }
    }
    Ok(trace)
}

impl ForwardTrace {
    pub fn records(&self) -> Vec<TraceRecord> {
        let mut out = Vec::new();
        for (i, &t) in self.steps.iter().enumerate() {
            for (p, (&token_id, &rank)) in self.nearest[i].iter().zip(&self.ranks[i]).enumerate() {
                out.push(TraceRecord {
                    step: t,
                    position: p,
                    token_id,
                    rank,
                });
            }
        }
        out
    }

    pub fn to_csv(&self, vocab: Option<&Vocab>) -> String {
        trace_csv(&self.records(), vocab)
    }

    /// Mean over positions of the number of recorded steps whose rank lies
    /// strictly between 0 and `K`.
    pub fn mean_intermediate_steps(&self) -> f64 {
        let n = self.tokens.len();
        let count: usize = self
            .ranks
            .iter()
            .flatten()
            .filter(|&&r| r > 0 && r < self.k)
            .count();
        count as f64 / n as f64
    }

    /// A table with one row per recorded step, cells shaded from green
    /// (rank 0) to red (rank `K`).
    pub fn to_html(&self, vocab: Option<&Vocab>) -> String {
        let label = |id: usize| match vocab.and_then(|v| v.unit(id)) {
            Some(u) => html_escape(&display_unit(u)),
            None => id.to_string(),
        };
        let mut out = String::from(
            "<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\"><title>forward process</title>\n\
             <style>table{border-collapse:collapse;font-family:monospace}\
             td,th{padding:2px 4px;border:1px solid #ddd;text-align:center}</style></head><body>\n",
        );
        let _ = writeln!(out, "<p>K = {}</p>\n<table>", self.k);
        out.push_str("<tr><th>t</th>");
        for &id in &self.tokens {
            let _ = write!(out, "<th>{}</th>", label(id));
        }
        out.push_str("</tr>\n");
        for (i, &t) in self.steps.iter().enumerate() {
            let _ = write!(out, "<tr><th>{t}</th>");
            for (&id, &rank) in self.nearest[i].iter().zip(&self.ranks[i]) {
                let _ = write!(
                    out,
                    "<td style=\"background:{}\" title=\"rank {rank}\">{}</td>",
                    rank_color(rank, self.k),
                    label(id)
                );
            }
            out.push_str("</tr>\n");
        }
        out.push_str("</table>\n</body></html>\n");
        out
    }
}

/// Linear ramp from green at rank 0 to red at rank `k`.
pub fn rank_color(rank: usize, k: usize) -> String {
    let f = (rank as f64 / k.max(1) as f64).clamp(0.0, 1.0);
    let r = (255.0 * f).round() as u8;
    let g = (200.0 * (1.0 - f)).round() as u8;
    format!("#{r:02x}{g:02x}00")
}

fn display_unit(u: &str) -> String {
    match u {
        " " => "␣".into(),
        "\n" => "⏎".into(),
        other => other.into(),
    }
}

fn html_escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            other => out.push(other),
        }
    }
    out
}
