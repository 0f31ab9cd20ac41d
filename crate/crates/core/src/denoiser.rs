//! The x0-estimator: a non-causal pre-norm transformer.
//!
//! Inputs per position are the noisy embedding `x_t`, the self-conditioning
//! estimate and (optionally) a conditioning-mask scalar, concatenated on the
//! feature axis and projected to `d_model`. A sinusoidal embedding of the
//! diffusion step goes through a `d_model × d_model` linear layer and is
//! added to every position. Attention is bidirectional with a bucketed
//! relative-position bias shared by all layers. A final linear layer maps
//! back to the embedding dimension.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AttentionLayout, Tape, Var};
use crate::error::{Result, SedError};
use crate::real::Real;
use crate::tensor::Matrix;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiserConfig {
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub head_size: usize,
    /// Embedding dimension `D`. Overridden by the diffusion space when the
    /// model is built for training.
    pub d_embed: usize,
    pub max_len: usize,
    pub ffw_multiplier: usize,
    pub use_mask_channel: bool,
    pub self_condition: bool,
    pub rel_buckets: usize,
    pub rel_max_distance: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            d_model: 128,
            heads: 4,
            head_size: 32,
            d_embed: 32,
            max_len: 128,
            ffw_multiplier: 4,
            use_mask_channel: true,
            self_condition: true,
            rel_buckets: 32,
            rel_max_distance: 128,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(SedError::Config(m));
        if self.layers == 0 || self.d_model == 0 || self.heads == 0 || self.head_size == 0 {
            return fail("layers, d_model, heads and head_size must be positive".into());
        }
        if self.d_embed == 0 || self.d_embed > self.d_model {
            return fail(format!(
                "d_embed {} must lie in [1, d_model = {}]",
                self.d_embed, self.d_model
            ));
        }
        if self.max_len == 0 || self.ffw_multiplier == 0 {
            return fail("max_len and ffw_multiplier must be positive".into());
        }
        if self.rel_buckets < 4 || self.rel_max_distance < self.rel_buckets / 2 {
            return fail("rel_buckets must be >= 4 and rel_max_distance >= rel_buckets / 2".into());
        }
        Ok(())
    }

    /// Width of the concatenated per-position input.
    pub fn input_width(&self) -> usize {
        let sc = if self.self_condition { self.d_embed } else { 0 };
        self.d_embed + sc + usize::from(self.use_mask_channel)
    }

    pub fn attention_width(&self) -> usize {
        self.heads * self.head_size
    }
}

/// The weight layout, generic over what is stored per tensor: matrices for
/// the parameters themselves, tape handles during a forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct Weights<M> {
    pub input_w: M,
    pub input_b: M,
    pub time_w: M,
    pub time_b: M,
    /// `rel_buckets × heads`
    pub rel_bias: M,
    pub layers: Vec<LayerWeights<M>>,
    pub final_gain: M,
    pub final_bias: M,
    pub output_w: M,
    pub output_b: M,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerWeights<M> {
    pub ln1_gain: M,
    pub ln1_bias: M,
    pub wq: M,
    pub bq: M,
    pub wk: M,
    pub bk: M,
    pub wv: M,
    pub bv: M,
    pub wo: M,
    pub bo: M,
    pub ln2_gain: M,
    pub ln2_bias: M,
    pub w1: M,
    pub b1: M,
    pub w2: M,
    pub b2: M,
}

impl<M> LayerWeights<M> {
    fn iter(&self) -> impl Iterator<Item = &M> {
        [
            &self.ln1_gain,
            &self.ln1_bias,
            &self.wq,
            &self.bq,
            &self.wk,
            &self.bk,
            &self.wv,
            &self.bv,
            &self.wo,
            &self.bo,
            &self.ln2_gain,
            &self.ln2_bias,
            &self.w1,
            &self.b1,
            &self.w2,
            &self.b2,
        ]
        .into_iter()
    }

    fn iter_mut(&mut self) -> impl Iterator<Item = &mut M> {
        [
            &mut self.ln1_gain,
            &mut self.ln1_bias,
            &mut self.wq,
            &mut self.bq,
            &mut self.wk,
            &mut self.bk,
            &mut self.wv,
            &mut self.bv,
            &mut self.wo,
            &mut self.bo,
            &mut self.ln2_gain,
            &mut self.ln2_bias,
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
        ]
        .into_iter()
    }

    fn map<N>(&self, f: &mut impl FnMut(&M) -> N) -> LayerWeights<N> {
        LayerWeights {
            ln1_gain: f(&self.ln1_gain),
            ln1_bias: f(&self.ln1_bias),
            wq: f(&self.wq),
            bq: f(&self.bq),
            wk: f(&self.wk),
            bk: f(&self.bk),
            wv: f(&self.wv),
            bv: f(&self.bv),
            wo: f(&self.wo),
            bo: f(&self.bo),
            ln2_gain: f(&self.ln2_gain),
            ln2_bias: f(&self.ln2_bias),
            w1: f(&self.w1),
            b1: f(&self.b1),
            w2: f(&self.w2),
            b2: f(&self.b2),
        }
    }
}

const LAYER_TENSOR_NAMES: [&str; 16] = [
    "ln1.gain", "ln1.bias", "attn.wq", "attn.bq", "attn.wk", "attn.bk", "attn.wv", "attn.bv",
    "attn.wo", "attn.bo", "ln2.gain", "ln2.bias", "ffw.w1", "ffw.b1", "ffw.w2", "ffw.b2",
];

impl<M> Weights<M> {
    /// All tensors in canonical order.
    pub fn iter(&self) -> impl Iterator<Item = &M> {
        [&self.input_w, &self.input_b, &self.time_w, &self.time_b, &self.rel_bias]
            .into_iter()
            .chain(self.layers.iter().flat_map(LayerWeights::iter))
            .chain([
                &self.final_gain,
                &self.final_bias,
                &self.output_w,
                &self.output_b,
            ])
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut M> {
        [
            &mut self.input_w,
            &mut self.input_b,
            &mut self.time_w,
            &mut self.time_b,
            &mut self.rel_bias,
        ]
        .into_iter()
        .chain(self.layers.iter_mut().flat_map(LayerWeights::iter_mut))
        .chain([
            &mut self.final_gain,
            &mut self.final_bias,
            &mut self.output_w,
            &mut self.output_b,
        ])
    }

    pub fn map<N>(&self, mut f: impl FnMut(&M) -> N) -> Weights<N> {
        Weights {
            input_w: f(&self.input_w),
            input_b: f(&self.input_b),
            time_w: f(&self.time_w),
            time_b: f(&self.time_b),
            rel_bias: f(&self.rel_bias),
            layers: self.layers.iter().map(|l| l.map(&mut f)).collect(),
            final_gain: f(&self.final_gain),
            final_bias: f(&self.final_bias),
            output_w: f(&self.output_w),
            output_b: f(&self.output_b),
        }
    }

    /// Tensor names in canonical order.
    pub fn names(&self) -> Vec<String> {
        let mut names: Vec<String> = ["input.w", "input.b", "time.w", "time.b", "rel_bias"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        for l in 0..self.layers.len() {
            names.extend(LAYER_TENSOR_NAMES.iter().map(|n| format!("layer{l}.{n}")));
        }
        names.extend(
            ["final.gain", "final.bias", "output.w", "output.b"]
                .iter()
                .map(|s| s.to_string()),
        );
        names
    }
}

/// Trainable tensors of the estimator.
#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserParameters<T> {
    pub config: DenoiserConfig,
    pub weights: Weights<Matrix<T>>,
}

/// One batch of stacked sequences for a forward pass.
#[derive(Clone, Copy, Debug)]
pub struct DenoiserInput<'a, T> {
    /// `(n_seq·seq_len) × D`
    pub x_t: &'a Matrix<T>,
    /// Same shape as `x_t`; ignored when self-conditioning is disabled.
    pub self_cond: &'a Matrix<T>,
    /// One value per row; ignored without the mask channel.
    pub mask: &'a [T],
    /// Diffusion step of each sequence.
    pub steps: &'a [usize],
    pub seq_len: usize,
}

/// Sinusoidal features of a scalar step: `sin(t·ω_i)` in the first half,
/// `cos(t·ω_i)` in the second, `ω_i = 10000^(−i/half)`.
pub fn time_features(t: f64, d_model: usize) -> Vec<f64> {
    let half = d_model / 2;
    let mut out = vec![0.0; d_model];
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        out[i] = (t * freq).sin();
        out[half + i] = (t * freq).cos();
    }
    out
}

/// Bidirectional bucketing of a relative offset `j − i`: exact buckets for
/// small offsets, logarithmic ones up to `max_distance`, with separate
/// halves for each direction.
pub fn relative_bucket(offset: isize, buckets: usize, max_distance: usize) -> usize {
    let half = buckets / 2;
    let base = if offset > 0 { half } else { 0 };
    let n = offset.unsigned_abs();
    let exact = half / 2;
    if n < exact {
        return base + n;
    }
    let log_ratio = (n as f64 / exact as f64).ln() / (max_distance as f64 / exact as f64).ln();
    let large = exact + (log_ratio * (half - exact) as f64) as usize;
    base + large.min(half - 1)
}

pub fn bucket_grid(seq_len: usize, buckets: usize, max_distance: usize) -> Vec<usize> {
    let mut grid = Vec::with_capacity(seq_len * seq_len);
    for i in 0..seq_len {
        for j in 0..seq_len {
            grid.push(relative_bucket(j as isize - i as isize, buckets, max_distance));
        }
    }
    grid
}

fn gaussian<T: Real>(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Matrix<T> {
    Matrix::from_fn(rows, cols, |_, _| {
        let z: f64 = rng.sample(StandardNormal);
        T::from_f64(z * std)
    })
}

impl<T: Real> DenoiserParameters<T> {
    /// Weights `N(0, 1/fan_in)`, biases zero, norm gains one, relative bias
    /// zero.
    pub fn init(config: &DenoiserConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d_model;
        let aw = config.attention_width();
        let ff = config.ffw_multiplier * d;
        let inv = |n: usize| 1.0 / (n as f64).sqrt();
        let zeros = |c: usize| Matrix::<T>::zeros(1, c);
        let ones = |c: usize| Matrix::<T>::filled(1, c, T::ONE);

        let input_w = gaussian(&mut rng, config.input_width(), d, inv(config.input_width()));
        let time_w = gaussian(&mut rng, d, d, inv(d));
        let layers = (0..config.layers)
            .map(|_| LayerWeights {
                ln1_gain: ones(d),
                ln1_bias: zeros(d),
                wq: gaussian(&mut rng, d, aw, inv(d)),
                bq: zeros(aw),
                wk: gaussian(&mut rng, d, aw, inv(d)),
                bk: zeros(aw),
                wv: gaussian(&mut rng, d, aw, inv(d)),
                bv: zeros(aw),
                wo: gaussian(&mut rng, aw, d, inv(aw)),
                bo: zeros(d),
                ln2_gain: ones(d),
                ln2_bias: zeros(d),
                w1: gaussian(&mut rng, d, ff, inv(d)),
                b1: zeros(ff),
                w2: gaussian(&mut rng, ff, d, inv(ff)),
                b2: zeros(d),
            })
            .collect();
        let output_w = gaussian(&mut rng, d, config.d_embed, inv(d));
        Ok(Self {
            config: config.clone(),
            weights: Weights {
                input_w,
                input_b: zeros(d),
                time_w,
                time_b: zeros(d),
                rel_bias: Matrix::zeros(config.rel_buckets, config.heads),
                layers,
                final_gain: ones(d),
                final_bias: zeros(d),
                output_w,
                output_b: zeros(config.d_embed),
            },
        })
    }

    pub fn parameter_count(&self) -> usize {
        self.weights.iter().map(Matrix::len).sum()
    }

    pub fn names(&self) -> Vec<String> {
        self.weights.names()
    }

    pub fn all_finite(&self) -> bool {
        self.weights.iter().all(Matrix::all_finite)
    }

    pub fn cast<U: Real>(&self) -> DenoiserParameters<U> {
        DenoiserParameters {
            config: self.config.clone(),
            weights: self.weights.map(Matrix::cast),
        }
    }

    /// Places every tensor on the tape, as trainable leaves or constants.
    pub fn register(&self, tape: &mut Tape<T>, trainable: bool) -> Weights<Var> {
        self.weights.map(|m| {
            if trainable {
                tape.param(m.clone())
            } else {
                tape.constant(m.clone())
            }
        })
    }

    /// Builds the concatenated input rows `[x_t | self_cond | mask]`.
    fn input_matrix(&self, input: &DenoiserInput<'_, T>) -> Result<Matrix<T>> {
        let cfg = &self.config;
        let rows = input.x_t.rows();
        if input.x_t.cols() != cfg.d_embed {
            return Err(SedError::Shape(format!(
                "x_t has {} columns, model expects D = {}",
                input.x_t.cols(),
                cfg.d_embed
            )));
        }
        if cfg.self_condition && input.self_cond.shape() != input.x_t.shape() {
            return Err(SedError::Shape(format!(
                "self-conditioning input {:?} vs x_t {:?}",
                input.self_cond.shape(),
                input.x_t.shape()
            )));
        }
        if cfg.use_mask_channel && input.mask.len() != rows {
            return Err(SedError::Shape(format!(
                "mask channel has {} entries for {rows} rows",
                input.mask.len()
            )));
        }
        let width = cfg.input_width();
        let mut m = Matrix::zeros(rows, width);
        for r in 0..rows {
            let out = m.row_mut(r);
            out[..cfg.d_embed].copy_from_slice(input.x_t.row(r));
            let mut c = cfg.d_embed;
            if cfg.self_condition {
                out[c..c + cfg.d_embed].copy_from_slice(input.self_cond.row(r));
                c += cfg.d_embed;
            }
            if cfg.use_mask_channel {
                out[c] = input.mask[r];
            }
        }
        Ok(m)
    }

    /// Records the forward pass on `tape` using the weight handles `w`
    /// (obtained from [`Self::register`]) and returns the estimate node.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape<T>,
        w: &Weights<Var>,
        input: &DenoiserInput<'_, T>,
    ) -> Result<Var> {
        let cfg = &self.config;
        let n = input.seq_len;
        if n == 0 {
            return Err(SedError::InvalidArgument("empty sequence".into()));
        }
        if n > cfg.max_len {
            return Err(SedError::SequenceTooLong {
                len: n,
                max: cfg.max_len,
            });
        }
        let rows = input.x_t.rows();
        if rows % n != 0 || rows / n != input.steps.len() {
            return Err(SedError::Shape(format!(
                "{rows} rows do not split into {} sequences of length {n}",
                input.steps.len()
            )));
        }
        let n_seq = input.steps.len();

        let x = tape.constant(self.input_matrix(input)?);
        let mut h = tape.linear(x, w.input_w, w.input_b);

        // time embedding, one row per sequence, then broadcast over positions
        let feats = Matrix::from_rows(
            &input
                .steps
                .iter()
                .map(|&t| {
                    time_features(t as f64, cfg.d_model)
                        .into_iter()
                        .map(T::from_f64)
                        .collect()
                })
                .collect::<Vec<Vec<T>>>(),
        );
        let feats = tape.constant(feats);
        let temb = tape.linear(feats, w.time_w, w.time_b);
        let spread = tape.constant(Matrix::from_fn(rows, n_seq, |r, s| {
            if r / n == s {
                T::ONE
            } else {
                T::ZERO
            }
        }));
        let temb = tape.matmul(spread, temb);
        h = tape.add(h, temb);

        let layout = AttentionLayout {
            n_seq,
            seq_len: n,
            heads: cfg.heads,
            head_size: cfg.head_size,
            buckets: Arc::new(bucket_grid(n, cfg.rel_buckets, cfg.rel_max_distance)),
        };
        for lw in &w.layers {
            let a = tape.layer_norm(h, lw.ln1_gain, lw.ln1_bias);
            let q = tape.linear(a, lw.wq, lw.bq);
            let k = tape.linear(a, lw.wk, lw.bk);
            let v = tape.linear(a, lw.wv, lw.bv);
            let att = tape.attention(q, k, v, w.rel_bias, layout.clone());
            let o = tape.linear(att, lw.wo, lw.bo);
            h = tape.add(h, o);

            let b = tape.layer_norm(h, lw.ln2_gain, lw.ln2_bias);
            let f = tape.linear(b, lw.w1, lw.b1);
            let f = tape.gelu(f);
            let f = tape.linear(f, lw.w2, lw.b2);
            h = tape.add(h, f);
        }
        let y = tape.layer_norm(h, w.final_gain, w.final_bias);
        Ok(tape.linear(y, w.output_w, w.output_b))
    }

    /// Inference-only forward pass.
    pub fn forward(&self, input: &DenoiserInput<'_, T>) -> Result<Matrix<T>> {
        let mut tape = Tape::new();
        let w = self.register(&mut tape, false);
        let out = self.forward_on_tape(&mut tape, &w, input)?;
        Ok(tape.value(out).clone())
    }
}
