//! The reverse process with self-conditioning and classifier-free guidance.
//!
//! Chains start from `N(0, I)` on infill positions with conditioning
//! positions clamped to their exact embedding rows. At every step the
//! guided estimate of `x0` sets the posterior mean, is fed back as the
//! self-conditioning input of the next step, and the conditioning positions
//! of the new iterate are clamped again.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::corpus::{TokenSeq, Vocab};
use crate::denoiser::{DenoiserInput, DenoiserParameters};
use crate::embedding::{decode_argmax, nn_ranks, EmbeddingMatrix};
use crate::error::{Result, SedError};
use crate::masking::{apply_conditioning, null_conditioning, ConditioningMask};
use crate::real::Real;
use crate::schedule::{posterior, NoiseSchedule};
use crate::tensor::Matrix;

pub const MAX_GUIDANCE_SCALE: f64 = 8.0;

/// Anything that estimates `x0` from a stacked denoiser input.
pub trait Estimator<T> {
    fn estimate(&self, input: &DenoiserInput<'_, T>) -> Result<Matrix<T>>;
}

impl<T: Real> Estimator<T> for DenoiserParameters<T> {
    fn estimate(&self, input: &DenoiserInput<'_, T>) -> Result<Matrix<T>> {
        self.forward(input)
    }
}

/// `uncond + s·(cond − uncond)`
pub fn guidance_combine<T: Real>(uncond: &Matrix<T>, cond: &Matrix<T>, s: f64) -> Matrix<T> {
    assert_eq!(uncond.shape(), cond.shape(), "guidance shape mismatch");
    if s == 1.0 {
        return cond.clone();
    }
    if s == 0.0 {
        return uncond.clone();
    }
    let s = T::from_f64(s);
    uncond.zip_map(cond, |u, c| u + s * (c - u))
}

/// What to generate: conditioning tokens on the positions the mask marks,
/// the rest is infilled.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleRequest {
    pub mask: ConditioningMask,
    /// One id per position; only conditioning positions are read.
    pub tokens: Vec<usize>,
    pub scale: f64,
    pub count: usize,
    pub seed: u64,
}

impl SampleRequest {
    pub fn unconditional(length: usize, count: usize, seed: u64) -> Self {
        Self {
            mask: ConditioningMask::unconditional(length),
            tokens: vec![0; length],
            scale: 1.0,
            count,
            seed,
        }
    }

    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }

    fn validate(&self, vocab_size: usize) -> Result<()> {
        if self.tokens.len() != self.mask.len() || self.mask.is_empty() {
            return Err(SedError::InvalidArgument(format!(
                "request has {} tokens for a mask of length {}",
                self.tokens.len(),
                self.mask.len()
            )));
        }
        if !(0.0..=MAX_GUIDANCE_SCALE).contains(&self.scale) {
            return Err(SedError::InvalidArgument(format!(
                "guidance scale {} outside [0, {MAX_GUIDANCE_SCALE}]",
                self.scale
            )));
        }
        if self.count == 0 {
            return Err(SedError::InvalidArgument("sample count must be positive".into()));
        }
        for (i, &t) in self.tokens.iter().enumerate() {
            if self.mask.is_conditioning(i) && t >= vocab_size {
                return Err(SedError::TokenOutOfRange {
                    id: t,
                    vocab: vocab_size,
                });
            }
        }
        Ok(())
    }
}

/// One row of the reverse-process trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub step: usize,
    pub position: usize,
    /// Argmax decoding of the guided estimate at this step.
    pub token_id: usize,
    /// Rank of the iterate's nearest embedding among the `K` neighbours of
    /// the final token, `K` when absent.
    pub rank: usize,
}

/// Renders trace records as CSV with a header row.
pub fn trace_csv(records: &[TraceRecord], vocab: Option<&Vocab>) -> String {
    let mut out = String::from("t,position,token_id,token_str,rank\n");
    for r in records {
        let s = vocab
            .and_then(|v| v.unit(r.token_id))
            .map(csv_field)
            .unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.step, r.position, r.token_id, s, r.rank
        ));
    }
    out
}

/// Quotes a field when it contains a delimiter, quote or line break.
pub fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n', '\r']) || s.trim() != s {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Output of [`Sampler::sample`].
#[derive(Clone, Debug, PartialEq)]
pub struct SampleOutput {
    pub samples: Vec<TokenSeq>,
    /// Records for the first chain, in decreasing step order.
    pub trace: Vec<TraceRecord>,
}

/// Trace settings: which steps to record and the neighbourhood size.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraceOptions {
    pub every: usize,
    pub k: usize,
}

/// A model bound to its diffusion space and schedule.
pub struct Sampler<'a, T, E> {
    pub estimator: &'a E,
    pub readout: &'a Matrix<T>,
    pub embedding: &'a EmbeddingMatrix,
    /// Possibly respaced reverse schedule.
    pub schedule: NoiseSchedule,
    /// Network step for each schedule step.
    pub timesteps: Vec<usize>,
}

impl<'a, T: Real, E: Estimator<T>> Sampler<'a, T, E> {
    /// `steps` respaces the training schedule; `None` keeps all of it.
    pub fn new(
        estimator: &'a E,
        readout: &'a Matrix<T>,
        embedding: &'a EmbeddingMatrix,
        schedule: &NoiseSchedule,
        steps: Option<usize>,
    ) -> Result<Self> {
        let (schedule, timesteps) = schedule.respaced(steps.unwrap_or(schedule.steps()))?;
        Ok(Self {
            estimator,
            readout,
            embedding,
            schedule,
            timesteps,
        })
    }

    /// One reverse step for `count` stacked chains sharing `mask`. Returns
    /// `x_{t−1}` and the guided estimate.
    #[allow(clippy::too_many_arguments)]
    pub fn reverse_step<R: Rng + ?Sized>(
        &self,
        x_t: &Matrix<T>,
        x0_prev: &Matrix<T>,
        cond_clean: &Matrix<T>,
        mask: &StackedMask<T>,
        t: usize,
        scale: f64,
        rng: &mut R,
    ) -> Result<(Matrix<T>, Matrix<T>)> {
        let n_seq = mask.n_seq;
        let steps = vec![self.timesteps[t - 1]; n_seq];
        let x_in = apply_conditioning(x_t, cond_clean, &mask.mask);
        let cond = self.estimator.estimate(&DenoiserInput {
            x_t: &x_in,
            self_cond: x0_prev,
            mask: &mask.channel,
            steps: &steps,
            seq_len: mask.seq_len,
        })?;
        let estimate = if mask.guided.iter().any(|&g| g) {
            let x_null = null_conditioning(x_t, &mask.mask);
            let zeros = Matrix::zeros(x_t.rows(), x_t.cols());
            let no_mask = vec![T::ZERO; x_t.rows()];
            let uncond = self.estimator.estimate(&DenoiserInput {
                x_t: &x_null,
                self_cond: &zeros,
                mask: &no_mask,
                steps: &steps,
                seq_len: mask.seq_len,
            })?;
            let mut combined = guidance_combine(&uncond, &cond, scale);
            let rows = mask.seq_len;
            for (c, _) in mask.guided.iter().enumerate().filter(|(_, g)| !**g) {
                for r in c * rows..(c + 1) * rows {
                    combined.row_mut(r).copy_from_slice(cond.row(r));
                }
            }
            combined
        } else {
            cond
        };
        let (mu, var) = posterior(&estimate, x_t, t, &self.schedule)?;
        let mut next = mu;
        if var > 0.0 {
            let sd = T::from_f64(var.sqrt());
            for v in next.as_mut_slice() {
                *v += sd * T::from_f64(rng.sample(StandardNormal));
            }
        }
        Ok((apply_conditioning(&next, cond_clean, &mask.mask), estimate))
    }

    pub fn sample(&self, request: &SampleRequest) -> Result<SampleOutput> {
        self.run(&self.chains_of(request)?, request.scale, request.seed, None)
    }

    pub fn sample_with_trace(
        &self,
        request: &SampleRequest,
        trace: TraceOptions,
    ) -> Result<SampleOutput> {
        self.run(&self.chains_of(request)?, request.scale, request.seed, Some(trace))
    }

    /// One chain per entry, each with its own mask and conditioning tokens,
    /// all of the same length and run together from one seed.
    pub fn sample_chains(&self, chains: &[ChainSpec], scale: f64, seed: u64) -> Result<SampleOutput> {
        for c in chains {
            c.to_request(scale, seed).validate(self.embedding.vocab_size())?;
        }
        if chains.is_empty() {
            return Err(SedError::InvalidArgument("no chains to sample".into()));
        }
        if chains.iter().any(|c| c.mask.len() != chains[0].mask.len()) {
            return Err(SedError::InvalidArgument("chains differ in length".into()));
        }
        self.run(chains, scale, seed, None)
    }

    fn chains_of(&self, request: &SampleRequest) -> Result<Vec<ChainSpec>> {
        request.validate(self.embedding.vocab_size())?;
        let one = ChainSpec {
            mask: request.mask.clone(),
            tokens: request.tokens.clone(),
        };
        Ok(vec![one; request.count])
    }

    fn run(
        &self,
        chains: &[ChainSpec],
        scale: f64,
        seed: u64,
        trace: Option<TraceOptions>,
    ) -> Result<SampleOutput> {
        let len = chains[0].mask.len();
        let d = self.embedding.dim();
        let n = chains.len();
        let mask = StackedMask::from_masks(chains.iter().map(|c| &c.mask));
        let all_tokens: Vec<usize> = chains.iter().flat_map(|c| c.tokens.iter().copied()).collect();
        let cond_clean: Matrix<T> = self.embedding.lookup(&all_tokens);

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Matrix::from_fn(n * len, d, |_, _| T::from_f64(rng.sample(StandardNormal)));
        let mut x = apply_conditioning(&noise, &cond_clean, &mask.mask);
        let mut x0 = Matrix::zeros(n * len, d);
        let mut snapshots: Vec<(usize, Matrix<T>, Matrix<T>)> = Vec::new();
        let steps = self.schedule.steps();
        for t in (1..=steps).rev() {
            let (next, est) = self.reverse_step(&x, &x0, &cond_clean, &mask, t, scale, &mut rng)?;
            x = next;
            x0 = est;
            if let Some(opts) = trace {
                if t == 1 || t == steps || t % opts.every.max(1) == 0 {
                    snapshots.push((t, x0.slice_rows(0, len), x.slice_rows(0, len)));
                }
            }
        }

        let mut samples = Vec::with_capacity(n);
        for (s, chain) in chains.iter().enumerate() {
            let mut ids = decode_argmax(&x0.slice_rows(s * len, len), self.readout).0;
            for (i, id) in ids.iter_mut().enumerate() {
                if chain.mask.is_conditioning(i) {
                    *id = chain.tokens[i];
                }
            }
            samples.push(TokenSeq(ids));
        }

        let mut records = Vec::new();
        if let Some(opts) = trace {
            let first = &chains[0];
            let final_tokens = &samples[0];
            let k = opts.k.min(self.embedding.vocab_size());
            for (t, est, iterate) in &snapshots {
                let decoded = decode_argmax(est, self.readout);
                let ranks = nn_ranks(iterate, &final_tokens.0, self.embedding, k)?;
                for i in 0..len {
                    records.push(TraceRecord {
                        step: *t,
                        position: i,
                        token_id: if first.mask.is_conditioning(i) {
                            first.tokens[i]
                        } else {
                            decoded.0[i]
                        },
                        rank: ranks[i],
                    });
                }
            }
        }
        Ok(SampleOutput {
            samples,
            trace: records,
        })
    }
}

/// Mask and conditioning tokens of a single chain.
#[derive(Clone, Debug, PartialEq)]
pub struct ChainSpec {
    pub mask: ConditioningMask,
    pub tokens: Vec<usize>,
}

impl ChainSpec {
    fn to_request(&self, scale: f64, seed: u64) -> SampleRequest {
        SampleRequest {
            mask: self.mask.clone(),
            tokens: self.tokens.clone(),
            scale,
            count: 1,
            seed,
        }
    }
}

/// Masks of stacked chains with their model-input channel.
#[derive(Clone, Debug)]
pub struct StackedMask<T> {
    pub mask: ConditioningMask,
    pub channel: Vec<T>,
    pub n_seq: usize,
    pub seq_len: usize,
    /// Per chain: whether the unconditional branch applies (the chain
    /// conditions on something).
    pub guided: Vec<bool>,
}

impl<T: Real> StackedMask<T> {
    /// `mask` repeated for `n_seq` chains.
    pub fn new(mask: &ConditioningMask, n_seq: usize) -> Self {
        Self::from_masks(std::iter::repeat_n(mask, n_seq))
    }

    pub fn from_masks<'m>(masks: impl IntoIterator<Item = &'m ConditioningMask>) -> Self {
        let mut bits = Vec::new();
        let mut guided = Vec::new();
        let mut seq_len = 0;
        for m in masks {
            seq_len = m.len();
            bits.extend_from_slice(&m.0);
            guided.push(m.any_conditioning());
        }
        let mask_all = ConditioningMask(bits);
        Self {
            channel: mask_all.as_channel(),
            mask: mask_all,
            n_seq: guided.len(),
            seq_len,
            guided,
        }
    }
}
