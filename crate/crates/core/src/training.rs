//! The training objective and loop.
//!
//! Each sequence gets its own span mask, diffusion step and noise. The
//! network sees `x_t` on infill positions and the sampled `x0` on
//! conditioning positions. A first pass runs with a zero self-conditioning
//! input; a second pass receives the first estimate as a constant. The two
//! diffusion losses are averaged and the readout cross-entropy is added.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::corpus::{make_training_sequence, TokenSeq, TokenStream};
use crate::denoiser::{DenoiserConfig, DenoiserInput, DenoiserParameters, Weights};
use crate::embedding::{embed_tokens, EmbeddingMatrix};
use crate::error::{Result, SedError};
use crate::masking::{apply_conditioning, null_conditioning, sample_mask, ConditioningMask};
use crate::optim::{AdamW, OptimConfig, ParamSlot};
use crate::real::Real;
use crate::schedule::{forward_marginal, NoiseSchedule};
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegressionTarget {
    /// The sampled `x0`, embedding plus `σ0` noise.
    Sampled,
    /// The exact embedding row.
    Clean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub seq_len: usize,
    pub batch_tokens: usize,
    pub max_spans: usize,
    pub cfg_drop_prob: f64,
    pub pad_rate: f64,
    pub target: RegressionTarget,
    pub seed: u64,
    pub log_every: usize,
    /// 0 writes only the final checkpoint.
    pub checkpoint_every: usize,
    pub optimizer: OptimConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 5000,
            seq_len: 64,
            batch_tokens: 1024,
            max_spans: 5,
            cfg_drop_prob: 0.1,
            pad_rate: 0.1,
            target: RegressionTarget::Sampled,
            seed: 0,
            log_every: 50,
            checkpoint_every: 1000,
            optimizer: OptimConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(SedError::Config(m));
        if self.seq_len == 0 || self.batch_tokens == 0 || self.batch_tokens % self.seq_len != 0 {
            return fail(format!(
                "batch_tokens {} must be a positive multiple of seq_len {}",
                self.batch_tokens, self.seq_len
            ));
        }
        if self.max_spans == 0 || self.max_spans > self.seq_len {
            return fail(format!(
                "max_spans {} must lie in [1, seq_len]",
                self.max_spans
            ));
        }
        if !(0.0..1.0).contains(&self.cfg_drop_prob) {
            return fail(format!("cfg_drop_prob {} outside [0, 1)", self.cfg_drop_prob));
        }
        if !(0.0..1.0).contains(&self.pad_rate) {
            return fail(format!("pad_rate {} outside [0, 1)", self.pad_rate));
        }
        if self.log_every == 0 {
            return fail("log_every must be positive".into());
        }
        self.optimizer.validate()
    }

    pub fn batch_size(&self) -> usize {
        self.batch_tokens / self.seq_len
    }
}

/// The denoiser together with the readout `R`.
#[derive(Clone, Debug, PartialEq)]
pub struct SedModel<T> {
    pub denoiser: DenoiserParameters<T>,
    pub readout: Matrix<T>,
}

impl<T: Real> SedModel<T> {
    /// Fresh denoiser and `R = E`.
    pub fn init(config: &DenoiserConfig, embedding: &EmbeddingMatrix, seed: u64) -> Result<Self> {
        if config.d_embed != embedding.dim() {
            return Err(SedError::Config(format!(
                "denoiser d_embed {} differs from embedding dimension {}",
                config.d_embed,
                embedding.dim()
            )));
        }
        Ok(Self {
            denoiser: DenoiserParameters::init(config, seed)?,
            readout: embedding.cast(),
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.denoiser.config
    }

    pub fn cast<U: Real>(&self) -> SedModel<U> {
        SedModel {
            denoiser: self.denoiser.cast(),
            readout: self.readout.cast(),
        }
    }

    pub fn names(&self) -> Vec<String> {
        let mut n = self.denoiser.names();
        n.push("readout".into());
        n
    }

    pub fn tensors(&self) -> Vec<&Matrix<T>> {
        self.denoiser
            .weights
            .iter()
            .chain(std::iter::once(&self.readout))
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix<T>> {
        self.denoiser
            .weights
            .iter_mut()
            .chain(std::iter::once(&mut self.readout))
            .collect()
    }

    pub fn shapes(&self) -> Vec<(usize, usize)> {
        self.tensors().iter().map(|m| m.shape()).collect()
    }

    /// Weight decay applies to projection matrices only.
    pub fn decay_mask(&self) -> Vec<bool> {
        self.names()
            .iter()
            .map(|n| n.rsplit('.').next().is_some_and(|last| last.starts_with('w')))
            .collect()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|m| m.all_finite())
    }
}

/// Network inputs and targets for one stacked batch.
#[derive(Clone, Debug)]
pub struct PreparedBatch<T> {
    pub seq_len: usize,
    /// Stacked token ids, one per row.
    pub tokens: Vec<usize>,
    pub masks: Vec<ConditioningMask>,
    pub steps: Vec<usize>,
    /// Sequences whose conditioning was dropped for guidance training.
    pub dropped: Vec<bool>,
    /// Sampled `x0`.
    pub x0: Matrix<T>,
    pub target: Matrix<T>,
    /// Network input: `x_t` on infill rows, `x0` (or zero when dropped) on
    /// conditioning rows.
    pub x_t: Matrix<T>,
    pub mask_channel: Vec<T>,
    /// Rows that enter the diffusion loss.
    pub infill: Vec<bool>,
}

impl<T: Real> PreparedBatch<T> {
    pub fn n_seq(&self) -> usize {
        self.steps.len()
    }

    pub fn input<'a>(&'a self, self_cond: &'a Matrix<T>) -> DenoiserInput<'a, T> {
        DenoiserInput {
            x_t: &self.x_t,
            self_cond,
            mask: &self.mask_channel,
            steps: &self.steps,
            seq_len: self.seq_len,
        }
    }
}

/// Draws masks, steps and noise for every sequence of `seqs`.
pub fn prepare_batch<T: Real, R: Rng + ?Sized>(
    seqs: &[TokenSeq],
    embedding: &EmbeddingMatrix,
    sched: &NoiseSchedule,
    config: &TrainConfig,
    rng: &mut R,
) -> Result<PreparedBatch<T>> {
    let len = seqs.first().map(TokenSeq::len).unwrap_or(0);
    if len == 0 || seqs.iter().any(|s| s.len() != len) {
        return Err(SedError::InvalidArgument(
            "training batch needs equal, nonzero sequence lengths".into(),
        ));
    }
    let d = embedding.dim();
    let mut out = PreparedBatch {
        seq_len: len,
        tokens: Vec::with_capacity(seqs.len() * len),
        masks: Vec::with_capacity(seqs.len()),
        steps: Vec::with_capacity(seqs.len()),
        dropped: Vec::with_capacity(seqs.len()),
        x0: Matrix::zeros(0, d),
        target: Matrix::zeros(0, d),
        x_t: Matrix::zeros(0, d),
        mask_channel: Vec::with_capacity(seqs.len() * len),
        infill: Vec::with_capacity(seqs.len() * len),
    };
    let (mut x0s, mut targets, mut xts) = (Vec::new(), Vec::new(), Vec::new());
    for seq in seqs {
        seq.check_range(embedding.vocab_size())?;
        let mask = sample_mask(len, config.max_spans.min(len), rng)?;
        let t = rng.random_range(1..=sched.steps());
        let x0: Matrix<T> = embed_tokens(seq.ids(), embedding, sched.sigma0(), rng);
        let eps = Matrix::from_fn(len, d, |_, _| T::from_f64(rng.sample(StandardNormal)));
        let dropped = config.cfg_drop_prob > 0.0 && rng.random_bool(config.cfg_drop_prob);

        let mut x_t = apply_conditioning(&forward_marginal(&x0, t, &eps, sched), &x0, &mask);
        if dropped {
            x_t = null_conditioning(&x_t, &mask);
        }
        let target = match config.target {
            RegressionTarget::Sampled => x0.clone(),
            RegressionTarget::Clean => embedding.lookup(seq.ids()),
        };
        out.tokens.extend_from_slice(seq.ids());
        out.infill.extend(mask.0.iter().map(|&c| !c));
        if dropped {
            out.mask_channel.extend(std::iter::repeat_n(T::ZERO, len));
        } else {
            out.mask_channel.extend(mask.as_channel::<T>());
        }
        out.masks.push(mask);
        out.steps.push(t);
        out.dropped.push(dropped);
        x0s.push(x0);
        targets.push(target);
        xts.push(x_t);
    }
    out.x0 = Matrix::vstack(&x0s);
    out.target = Matrix::vstack(&targets);
    out.x_t = Matrix::vstack(&xts);
    Ok(out)
}

/// Mean of `(x0 − x̂0)²` over infill positions and coordinates; zero when
/// every position is conditioning.
pub fn diffusion_loss<T: Real>(x0: &Matrix<T>, x0_hat: &Matrix<T>, mask: &ConditioningMask) -> f64 {
    assert_eq!(x0.shape(), x0_hat.shape(), "loss shape mismatch");
    assert_eq!(mask.len(), x0.rows(), "mask length mismatch");
    let rows: Vec<usize> = (0..mask.len()).filter(|&i| !mask.is_conditioning(i)).collect();
    if rows.is_empty() {
        return 0.0;
    }
    let total: f64 = rows
        .iter()
        .flat_map(|&r| x0.row(r).iter().zip(x0_hat.row(r)))
        .map(|(&a, &b)| (a.to_f64() - b.to_f64()).powi(2))
        .sum();
    total / (rows.len() * x0.cols()) as f64
}

/// Mean cross-entropy of `softmax(x0·Rᵀ)` against `tokens`.
pub fn recon_loss<T: Real>(tokens: &[usize], x0: &Matrix<T>, readout: &Matrix<T>) -> f64 {
    let mut tape = Tape::new();
    let x = tape.constant(x0.clone());
    let r = tape.constant(readout.clone());
    let logits = tape.matmul_t(x, r);
    let loss = tape.cross_entropy(logits, tokens.to_vec());
    tape.scalar(loss).to_f64()
}

/// Relative weights of the loss terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub pass1: f64,
    pub pass2: f64,
    pub recon: f64,
}

impl LossWeights {
    /// Both passes averaged when self-conditioning is on; the single pass
    /// alone otherwise.
    pub fn standard(self_condition: bool) -> Self {
        if self_condition {
            Self {
                pass1: 0.5,
                pass2: 0.5,
                recon: 1.0,
            }
        } else {
            Self {
                pass1: 1.0,
                pass2: 0.0,
                recon: 1.0,
            }
        }
    }
}

/// Loss nodes recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct LossNodes {
    pub total: Var,
    pub diffusion: Var,
    pub pass1: Var,
    pub pass2: Option<Var>,
    pub recon: Var,
    pub estimate: Var,
}

/// Records both passes and the loss on `tape`. `w` and `readout` are the
/// model's tensors registered on the same tape.
pub fn record_loss<T: Real>(
    tape: &mut Tape<T>,
    model: &SedModel<T>,
    w: &Weights<Var>,
    readout: Var,
    batch: &PreparedBatch<T>,
    weights: LossWeights,
) -> Result<LossNodes> {
    let sc_on = model.config().self_condition;
    let zeros = Matrix::zeros(batch.x_t.rows(), batch.x_t.cols());
    let out1 = model.denoiser.forward_on_tape(tape, w, &batch.input(&zeros))?;
    let pass1 = tape.masked_mse(out1, batch.target.clone(), batch.infill.clone());

    let (pass2, estimate) = if sc_on {
        // copying the first estimate into a new input is the stop-gradient
        let mut sc = tape.value(out1).clone();
        let n = batch.seq_len;
        for (s, _) in batch.dropped.iter().enumerate().filter(|(_, &d)| d) {
            for r in s * n..(s + 1) * n {
                sc.row_mut(r).iter_mut().for_each(|v| *v = T::ZERO);
            }
        }
        let out2 = model.denoiser.forward_on_tape(tape, w, &batch.input(&sc))?;
        let p2 = tape.masked_mse(out2, batch.target.clone(), batch.infill.clone());
        (Some(p2), out2)
    } else {
        (None, out1)
    };

    let mut terms = vec![(pass1, T::from_f64(weights.pass1))];
    if let Some(p2) = pass2 {
        terms.push((p2, T::from_f64(weights.pass2)));
    }
    let diffusion = tape.combine(&terms);

    let x0 = tape.constant(batch.x0.clone());
    let logits = tape.matmul_t(x0, readout);
    let recon = tape.cross_entropy(logits, batch.tokens.clone());
    let total = tape.combine(&[(diffusion, T::ONE), (recon, T::from_f64(weights.recon))]);
    Ok(LossNodes {
        total,
        diffusion,
        pass1,
        pass2,
        recon,
        estimate,
    })
}

/// Scalar loss values and gradients for every model tensor.
pub struct LossAndGradients<T> {
    pub total: f64,
    pub diffusion: f64,
    pub pass1: f64,
    pub pass2: Option<f64>,
    pub recon: f64,
    /// Same order as [`SedModel::tensors`].
    pub gradients: Vec<Matrix<T>>,
}

pub fn loss_and_gradients<T: Real>(
    model: &SedModel<T>,
    batch: &PreparedBatch<T>,
    weights: LossWeights,
) -> Result<LossAndGradients<T>> {
    let mut tape = Tape::new();
    let w = model.denoiser.register(&mut tape, true);
    let readout = tape.param(model.readout.clone());
    let nodes = record_loss(&mut tape, model, &w, readout, batch, weights)?;
    let mut grads = tape.backward(nodes.total);
    let mut gradients: Vec<Matrix<T>> = w
        .iter()
        .zip(model.denoiser.weights.iter())
        .map(|(&v, m)| grads.take(v).unwrap_or_else(|| Matrix::zeros(m.rows(), m.cols())))
        .collect();
    gradients.push(
        grads
            .take(readout)
            .unwrap_or_else(|| Matrix::zeros(model.readout.rows(), model.readout.cols())),
    );
    Ok(LossAndGradients {
        total: tape.scalar(nodes.total).to_f64(),
        diffusion: tape.scalar(nodes.diffusion).to_f64(),
        pass1: tape.scalar(nodes.pass1).to_f64(),
        pass2: nodes.pass2.map(|v| tape.scalar(v).to_f64()),
        recon: tape.scalar(nodes.recon).to_f64(),
        gradients,
    })
}

/// ChaCha state as stored in checkpoints.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    /// Hex-encoded 32-byte seed.
    pub seed: String,
    pub stream: u64,
    /// Word position, decimal (it is a 128-bit value).
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed().iter().map(|b| format!("{b:02x}")).collect(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let bad = |detail: String| SedError::Format {
            what: "rng state",
            detail,
        };
        if self.seed.len() != 64 {
            return Err(bad(format!("seed has {} hex digits", self.seed.len())));
        }
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&self.seed[2 * i..2 * i + 2], 16)
                .map_err(|e| bad(e.to_string()))?;
        }
        let pos: u128 = self.word_pos.parse().map_err(|e| bad(format!("{e}")))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

pub const T_HISTOGRAM_BINS: usize = 10;

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub loss: f64,
    pub diffusion: f64,
    pub diffusion_pass1: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub diffusion_pass2: Option<f64>,
    pub recon: f64,
    pub learning_rate: f64,
    pub grad_norm: f64,
    /// Counts of sampled steps in equal-width bins over `[1, T]`.
    pub t_histogram: Vec<usize>,
    pub dropped: usize,
    /// Omitted in determinism mode.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub tokens_per_sec: Option<f64>,
}

/// Optimisation state at 32-bit precision.
pub struct Trainer {
    pub config: TrainConfig,
    pub embedding: EmbeddingMatrix,
    pub schedule: NoiseSchedule,
    pub stream: TokenStream,
    pub model: SedModel<f32>,
    pub optimizer: AdamW<f32>,
    pub step: usize,
    pub rng: ChaCha8Rng,
    pub deterministic: bool,
}

impl Trainer {
    pub fn new(
        config: TrainConfig,
        model: SedModel<f32>,
        embedding: EmbeddingMatrix,
        schedule: NoiseSchedule,
        stream: TokenStream,
    ) -> Result<Self> {
        config.validate()?;
        if config.seq_len > model.config().max_len {
            return Err(SedError::SequenceTooLong {
                len: config.seq_len,
                max: model.config().max_len,
            });
        }
        let optimizer = AdamW::new(&model.shapes());
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        Ok(Self {
            config,
            embedding,
            schedule,
            stream,
            model,
            optimizer,
            step: 0,
            rng,
            deterministic: false,
        })
    }

    pub fn next_batch(&mut self) -> Result<Vec<TokenSeq>> {
        (0..self.config.batch_size())
            .map(|_| {
                make_training_sequence(
                    &mut self.stream,
                    self.config.seq_len,
                    self.config.pad_rate,
                    &mut self.rng,
                )
            })
            .collect()
    }

    /// Draws the next batch from the stream and trains on it.
    pub fn step(&mut self) -> Result<StepMetrics> {
        let batch = self.next_batch()?;
        self.train_on(&batch)
    }

    /// One optimizer update on `seqs`.
    pub fn train_on(&mut self, seqs: &[TokenSeq]) -> Result<StepMetrics> {
        let started = Instant::now();
        let batch: PreparedBatch<f32> = prepare_batch(
            seqs,
            &self.embedding,
            &self.schedule,
            &self.config,
            &mut self.rng,
        )?;
        let weights = LossWeights::standard(self.model.config().self_condition);
        let out = loss_and_gradients(&self.model, &batch, weights)?;
        if !out.total.is_finite() || out.gradients.iter().any(|g| !g.all_finite()) {
            return Err(SedError::NonFiniteLoss {
                step: self.step as u64,
                detail: format!(
                    "loss {} (diffusion {}, pass1 {}, pass2 {:?}, recon {}), steps {:?}, dropped {:?}",
                    out.total, out.diffusion, out.pass1, out.pass2, out.recon, batch.steps, batch.dropped
                ),
            });
        }
        let lr = self
            .config
            .optimizer
            .learning_rate_at(self.step, self.config.steps);
        let decay = self.model.decay_mask();
        let grad_norm = {
            let mut slots: Vec<ParamSlot<'_, f32>> = self
                .model
                .tensors_mut()
                .into_iter()
                .zip(&out.gradients)
                .zip(decay)
                .map(|((value, grad), decay)| ParamSlot { value, grad, decay })
                .collect();
            self.optimizer.update(&self.config.optimizer, lr, &mut slots)
        };
        let mut hist = vec![0; T_HISTOGRAM_BINS];
        let steps = self.schedule.steps();
        for &t in &batch.steps {
            hist[((t - 1) * T_HISTOGRAM_BINS / steps).min(T_HISTOGRAM_BINS - 1)] += 1;
        }
        let elapsed = started.elapsed().as_secs_f64();
        let metrics = StepMetrics {
            step: self.step,
            loss: out.total,
            diffusion: out.diffusion,
            diffusion_pass1: out.pass1,
            diffusion_pass2: out.pass2,
            recon: out.recon,
            learning_rate: lr,
            grad_norm,
            t_histogram: hist,
            dropped: batch.dropped.iter().filter(|&&d| d).count(),
            tokens_per_sec: (!self.deterministic && elapsed > 0.0)
                .then(|| batch.tokens.len() as f64 / elapsed),
        };
        self.step += 1;
        Ok(metrics)
    }
}
