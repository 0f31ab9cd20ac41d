//! Criterion checks shared by the acceptance target and the integration
//! tests. Each returns whether it passed and a one-line summary.
#![allow(dead_code)]

use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use sed_core::autodiff::Tape;
use sed_core::checkpoint::Checkpoint;
use sed_core::config::{EvalTask, RunConfig};
use sed_core::corpus::{TokenSeq, TokenizerMode, Vocab, PAD_ID};
use sed_core::denoiser::{DenoiserConfig, DenoiserInput};
use sed_core::embedding::{decode_argmax, embed_tokens, EmbeddingMatrix};
use sed_core::error::Result;
use sed_core::eval::proxy_nll;
use sed_core::masking::{sample_span_draw, ConditioningMask};
use sed_core::oracle;
use sed_core::pipeline::{self, EvalSetup, RunOptions};
use sed_core::sampler::{guidance_combine, Estimator, SampleRequest, Sampler, StackedMask};
use sed_core::schedule::{forward_marginal, forward_step, posterior, NoiseSchedule, DEFAULT_COSINE_OFFSET};
use sed_core::skipgram::{train_skipgram, SkipGramConfig};
use sed_core::synthetic::desk_corpus;
use sed_core::tensor::Matrix;
use sed_core::training::{
    loss_and_gradients, prepare_batch, recon_loss, LossWeights, PreparedBatch, SedModel,
    TrainConfig, Trainer,
};
use sed_core::viz::{forward_trace, DEFAULT_K};

pub struct Check {
    pub pass: bool,
    pub detail: String,
}

impl Check {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }

    fn fail(detail: impl Into<String>) -> Self {
        Self::new(false, detail)
    }
}

fn cosine_1000() -> NoiseSchedule {
    NoiseSchedule::cosine(1000, DEFAULT_COSINE_OFFSET, 1e-2).unwrap()
}

fn normal_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix<f64> {
    Matrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

// ---------------------------------------------------------------- 1

pub fn schedule_correctness() -> Check {
    let start = Instant::now();
    let s = cosine_1000();
    let ab = s.alpha_bars();
    let starts_at_one = ab[0] == 1.0;
    let decreasing = ab.windows(2).all(|w| w[1] < w[0]);
    let end = ab[1000];
    let max_err = (0..=1000)
        .map(|t| (ab[t] - oracle::alpha_bar_product(s.betas(), t)).abs())
        .fold(0.0, f64::max);
    let secs = start.elapsed().as_secs_f64();
    Check::new(
        starts_at_one && decreasing && end < 1e-3 && max_err <= 1e-12 && secs < 1.0,
        format!(
            "alpha_bar_0 = {}, strictly decreasing = {decreasing}, alpha_bar_T = {end:.3e}, \
             max |product error| = {max_err:.1e}, {secs:.3}s",
            ab[0]
        ),
    )
}

// ---------------------------------------------------------------- 2

/// Composes `forward_step` over `chains` chains from three random `x0` and
/// compares moments at t = 10, 500, 1000 with the closed-form marginal.
pub fn marginal_chain_consistency(chains: usize) -> Check {
    let start = Instant::now();
    let s = cosine_1000();
    let d = 3;
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst: f64 = 0.0;
    for _ in 0..3 {
        let x0: Vec<f64> = (0..d).map(|_| rng.random_range(-3.0..3.0)).collect();
        let x0_row = Matrix::from_vec(1, d, x0.clone());
        let mut x = Matrix::from_fn(chains, d, |_, j| x0[j]);
        let mut done = 0;
        for t in [10, 500, 1000] {
            while done < t {
                done += 1;
                let eps = normal_matrix(chains, d, &mut rng);
                x = forward_step(&x, done, &eps, &s);
            }
            let mean = forward_marginal(&x0_row, t, &Matrix::zeros(1, d), &s);
            for j in 0..d {
                let col: Vec<f64> = (0..chains).map(|r| x.row(r)[j]).collect();
                let n = chains as f64;
                let m = col.iter().sum::<f64>() / n;
                let v = col.iter().map(|c| (c - m).powi(2)).sum::<f64>() / (n - 1.0);
                let expect_var = s.one_minus_alpha_bar(t);
                let z_mean = (m - mean.row(0)[j]).abs() / (v / n).sqrt();
                let z_var = (v - expect_var).abs() / (expect_var * (2.0 / (n - 1.0)).sqrt());
                worst = worst.max(z_mean).max(z_var);
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    Check::new(
        worst < 4.0 && secs < 60.0,
        format!("{chains} chains, largest deviation {worst:.2} standard errors, {secs:.1}s"),
    )
}

// ---------------------------------------------------------------- 3

pub fn posterior_correctness() -> Check {
    let s = cosine_1000();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let t = rng.random_range(2..=1000);
        let x0: f64 = rng.random_range(-3.0..3.0);
        let x_t = s.alpha_bar(t).sqrt() * x0
            + s.one_minus_alpha_bar(t).sqrt() * rng.sample::<f64, _>(StandardNormal);
        let (mu, var) = posterior(
            &Matrix::from_vec(1, 1, vec![x0]),
            &Matrix::from_vec(1, 1, vec![x_t]),
            t,
            &s,
        )
        .unwrap();
        let grid = oracle::grid_posterior(x0, x_t, t, s.betas(), 20_001);
        worst = worst
            .max((mu.row(0)[0] - grid.mean[0]).abs())
            .max((var - grid.variance[0]).abs());
    }
    let mut boundary_exact = true;
    for _ in 0..20 {
        let x0: f64 = rng.random_range(-3.0..3.0);
        let x1: f64 = rng.random_range(-3.0..3.0);
        let (mu, var) = posterior(
            &Matrix::from_vec(1, 1, vec![x0]),
            &Matrix::from_vec(1, 1, vec![x1]),
            1,
            &s,
        )
        .unwrap();
        boundary_exact &= mu.row(0)[0] == x0 && var == 0.0;
    }
    Check::new(
        worst < 1e-6 && boundary_exact,
        format!("20 cases, max |error| vs quadrature {worst:.1e}; t = 1 exact: {boundary_exact}"),
    )
}

// ---------------------------------------------------------------- 4

pub fn tiny_denoiser(d_embed: usize, max_len: usize) -> DenoiserConfig {
    DenoiserConfig {
        layers: 2,
        d_model: 16,
        heads: 2,
        head_size: 8,
        d_embed,
        max_len,
        ..DenoiserConfig::default()
    }
}

fn flatten(model: &SedModel<f64>) -> Vec<f64> {
    model.tensors().iter().flat_map(|m| m.as_slice().to_vec()).collect()
}

fn unflatten(model: &mut SedModel<f64>, flat: &[f64]) {
    let mut at = 0;
    for m in model.tensors_mut() {
        let n = m.as_slice().len();
        m.as_mut_slice().copy_from_slice(&flat[at..at + n]);
        at += n;
    }
}

fn masked_mean_sq(est: &Matrix<f64>, batch: &PreparedBatch<f64>) -> f64 {
    let rows: Vec<usize> = (0..est.rows()).filter(|&r| batch.infill[r]).collect();
    if rows.is_empty() {
        return 0.0;
    }
    let total: f64 = rows
        .iter()
        .flat_map(|&r| est.row(r).iter().zip(batch.target.row(r)))
        .map(|(a, b)| (a - b).powi(2))
        .sum();
    total / (rows.len() * est.cols()) as f64
}

/// The first-pass estimate with dropped sequences zeroed: the constant
/// self-conditioning input of the second pass.
fn frozen_self_condition(model: &SedModel<f64>, batch: &PreparedBatch<f64>) -> Matrix<f64> {
    let zeros = Matrix::zeros(batch.x_t.rows(), batch.x_t.cols());
    let mut tape = Tape::new();
    let w = model.denoiser.register(&mut tape, true);
    let out = model.denoiser.forward_on_tape(&mut tape, &w, &batch.input(&zeros)).unwrap();
    let mut sc = tape.value(out).clone();
    let n = batch.seq_len;
    for (s, _) in batch.dropped.iter().enumerate().filter(|(_, d)| **d) {
        for r in s * n..(s + 1) * n {
            sc.row_mut(r).iter_mut().for_each(|v| *v = 0.0);
        }
    }
    sc
}

fn gradient_fixture() -> (SedModel<f64>, PreparedBatch<f64>) {
    let e = EmbeddingMatrix::random(12, 4, 3).unwrap();
    let sched = NoiseSchedule::cosine(50, DEFAULT_COSINE_OFFSET, 1e-2).unwrap();
    let mut model: SedModel<f64> = SedModel::init(&tiny_denoiser(4, 8), &e, 7).unwrap();
    // move every tensor off its structured initial value
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for m in model.tensors_mut() {
        for v in m.as_mut_slice() {
            *v += 0.05 * rng.sample::<f64, _>(StandardNormal);
        }
    }
    let cfg = TrainConfig {
        seq_len: 8,
        batch_tokens: 24,
        max_spans: 3,
        cfg_drop_prob: 0.3,
        ..TrainConfig::default()
    };
    let seqs: Vec<TokenSeq> = (0..3)
        .map(|_| TokenSeq((0..8).map(|_| rng.random_range(0..12)).collect()))
        .collect();
    let mut brng = ChaCha8Rng::seed_from_u64(5);
    let batch = prepare_batch(&seqs, &e, &sched, &cfg, &mut brng).unwrap();
    (model, batch)
}

/// Reverse-mode gradients of the training loss against central differences
/// over coordinates drawn from every tensor.
pub fn gradient_correctness() -> Check {
    let start = Instant::now();
    let (model, batch) = gradient_fixture();
    let weights = LossWeights::standard(true);
    let analytic = loss_and_gradients(&model, &batch, weights).unwrap();
    let flat_grad: Vec<f64> = analytic.gradients.iter().flat_map(|g| g.as_slice().to_vec()).collect();
    let sc = frozen_self_condition(&model, &batch);
    let zeros = Matrix::zeros(batch.x_t.rows(), batch.x_t.cols());
    let loss = |p: &[f64]| {
        let mut m = model.clone();
        unflatten(&mut m, p);
        let out1 = m.denoiser.forward(&batch.input(&zeros)).unwrap();
        let out2 = m.denoiser.forward(&batch.input(&sc)).unwrap();
        weights.pass1 * masked_mean_sq(&out1, &batch)
            + weights.pass2 * masked_mean_sq(&out2, &batch)
            + weights.recon * recon_loss(&batch.tokens, &batch.x0, &m.readout)
    };
    let params = flatten(&model);
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut coords = Vec::new();
    let mut at = 0;
    let tensors = model.tensors();
    let per_tensor = 8.max(200usize.div_ceil(tensors.len()));
    for m in &tensors {
        let n = m.as_slice().len();
        for _ in 0..n.min(per_tensor) {
            coords.push(at + rng.random_range(0..n));
        }
        at += n;
    }
    let numeric = oracle::fd_gradient(loss, &params, &coords, 1e-5);
    let mut worst: f64 = 0.0;
    for (&c, &fd) in coords.iter().zip(&numeric) {
        let a = flat_grad[c];
        let scale = a.abs().max(fd.abs());
        // one ulp of the loss over 2h is ~4e-11, so gradients near zero are
        // compared on an absolute floor
        let err = (a - fd).abs() / scale.max(1e-6);
        worst = worst.max(err);
    }
    let secs = start.elapsed().as_secs_f64();
    Check::new(
        worst < 1e-4 && coords.len() >= 200 && secs < 300.0,
        format!(
            "{} coordinates over {} tensors, max relative error {worst:.1e}, {secs:.1}s",
            coords.len(),
            tensors.len()
        ),
    )
}

// ---------------------------------------------------------------- 5

fn tape_gradients(
    model: &SedModel<f64>,
    batch: &PreparedBatch<f64>,
    self_cond: &Matrix<f64>,
    with_recon: bool,
) -> Vec<Matrix<f64>> {
    let mut tape = Tape::new();
    let w = model.denoiser.register(&mut tape, true);
    let readout = tape.param(model.readout.clone());
    let out = model.denoiser.forward_on_tape(&mut tape, &w, &batch.input(self_cond)).unwrap();
    let mse = tape.masked_mse(out, batch.target.clone(), batch.infill.clone());
    let diffusion = tape.combine(&[(mse, 1.0)]);
    let x0 = tape.constant(batch.x0.clone());
    let logits = tape.matmul_t(x0, readout);
    let recon = tape.cross_entropy(logits, batch.tokens.clone());
    let total = tape.combine(&[(diffusion, 1.0), (recon, if with_recon { 1.0 } else { 0.0 })]);
    let mut grads = tape.backward(total);
    let mut out: Vec<Matrix<f64>> = w
        .iter()
        .zip(model.denoiser.weights.iter())
        .map(|(&v, m)| grads.take(v).unwrap_or_else(|| Matrix::zeros(m.rows(), m.cols())))
        .collect();
    out.push(grads.take(readout).unwrap_or_else(|| Matrix::zeros(model.readout.rows(), model.readout.cols())));
    out
}

/// Pass-1-only weights reproduce a single-pass run exactly, and pass-2-only
/// weights reproduce a single pass fed the frozen first estimate.
pub fn stop_gradient_exact() -> Check {
    let (model, batch) = gradient_fixture();
    let zeros = Matrix::zeros(batch.x_t.rows(), batch.x_t.cols());
    let only = |pass1, pass2| {
        loss_and_gradients(&model, &batch, LossWeights { pass1, pass2, recon: 1.0 })
            .unwrap()
            .gradients
    };
    let first = only(1.0, 0.0) == tape_gradients(&model, &batch, &zeros, true);
    let sc = frozen_self_condition(&model, &batch);
    let second = only(0.0, 1.0) == tape_gradients(&model, &batch, &sc, true);
    Check::new(
        first && second,
        format!("pass-1-only matches single pass: {first}; pass-2-only matches frozen-input pass: {second}"),
    )
}

/// Trains the default tiny model for `steps` steps, then measures how much
/// the second-pass output moves between two random self-conditioning inputs.
pub fn self_condition_liveness(steps: usize) -> Check {
    let text = desk_corpus(600, 1);
    let vocab = Vocab::build(&text, 256, TokenizerMode::Char).unwrap();
    let e = EmbeddingMatrix::random(vocab.size(), 32, 0).unwrap().round_to_f32();
    let sched = cosine_1000();
    let cfg = TrainConfig {
        steps,
        seq_len: 32,
        batch_tokens: 128,
        ..TrainConfig::default()
    };
    let model = SedModel::init(&DenoiserConfig::default(), &e, 0).unwrap();
    let stream = sed_core::corpus::TokenStream::new(vocab.encode(&text).0).unwrap();
    let mut trainer = Trainer::new(cfg, model, e.clone(), sched.clone(), stream).unwrap();
    let (mut p1, mut p2) = (0.0, 0.0);
    for i in 0..steps {
        let m = trainer.step().unwrap();
        if i >= steps.saturating_sub(100) {
            p1 += m.diffusion_pass1;
            p2 += m.diffusion_pass2.unwrap_or(f64::NAN);
        }
    }
    let tail = steps.min(100) as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let batch_seqs = trainer.next_batch().unwrap();
    let batch: PreparedBatch<f32> =
        prepare_batch(&batch_seqs, &e, &sched, &trainer.config, &mut rng).unwrap();
    let rows = batch.x_t.rows();
    let a = Matrix::from_fn(rows, 32, |_, _| rng.sample::<f32, _>(StandardNormal));
    let b = Matrix::from_fn(rows, 32, |_, _| rng.sample::<f32, _>(StandardNormal));
    let fa = trainer.model.denoiser.forward(&batch.input(&a)).unwrap();
    let fb = trainer.model.denoiser.forward(&batch.input(&b)).unwrap();
    let diff: f64 = fa.as_slice().iter().zip(fb.as_slice()).map(|(x, y)| ((x - y) as f64).powi(2)).sum();
    let norm: f64 = fa.as_slice().iter().map(|x| (*x as f64).powi(2)).sum();
    let rel = (diff / norm).sqrt();
    Check::new(
        rel > 1e-3,
        format!(
            "after {steps} steps relative output change {rel:.3}; last-100 mean loss pass 1 {:.4}, pass 2 {:.4}",
            p1 / tail,
            p2 / tail
        ),
    )
}

// ---------------------------------------------------------------- 6

struct FixedBranches {
    cond: Matrix<f64>,
    uncond: Matrix<f64>,
}

impl Estimator<f64> for FixedBranches {
    fn estimate(&self, input: &DenoiserInput<'_, f64>) -> Result<Matrix<f64>> {
        let conditioned = input.mask.iter().any(|&m| m != 0.0);
        Ok(if conditioned { self.cond.clone() } else { self.uncond.clone() })
    }
}

pub fn guidance_identities() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let u = normal_matrix(8, 5, &mut rng);
    let c = normal_matrix(8, 5, &mut rng);
    let bits = |m: &Matrix<f64>| m.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    let s1 = bits(&guidance_combine(&u, &c, 1.0)) == bits(&c);
    let s0 = bits(&guidance_combine(&u, &c, 0.0)) == bits(&u);
    let uf: Matrix<f32> = u.cast();
    let cf: Matrix<f32> = c.cast();
    let f32_ok = guidance_combine(&uf, &cf, 1.0).as_slice() == cf.as_slice()
        && guidance_combine(&uf, &cf, 0.0).as_slice() == uf.as_slice();
    let ex = guidance_combine(
        &Matrix::from_vec(1, 2, vec![0.0, 0.0]),
        &Matrix::from_vec(1, 2, vec![1.0, 2.0]),
        2.0,
    );
    let example = ex.as_slice() == [2.0, 4.0];

    // inside a reverse step, s = 1 carries the conditional estimate
    let e = EmbeddingMatrix::random(6, 5, 1).unwrap();
    let sched = NoiseSchedule::cosine(10, DEFAULT_COSINE_OFFSET, 1e-2).unwrap();
    let est = FixedBranches { cond: c.clone(), uncond: u.clone() };
    let readout: Matrix<f64> = e.cast();
    let sampler = Sampler::new(&est, &readout, &e, &sched, None).unwrap();
    let mask = ConditioningMask(vec![true, false, false, true, false, false, false, false]);
    let stacked = StackedMask::new(&mask, 1);
    let x_t = normal_matrix(8, 5, &mut rng);
    let clean = normal_matrix(8, 5, &mut rng);
    let mut step = |s: f64| {
        sampler
            .reverse_step(&x_t, &Matrix::zeros(8, 5), &clean, &stacked, 5, s, &mut rng)
            .unwrap()
            .1
    };
    let in_step = bits(&step(1.0)) == bits(&c) && bits(&step(0.0)) == bits(&u);
    Check::new(
        s1 && s0 && f32_ok && example && in_step,
        format!(
            "s = 1 exact: {s1}; s = 0 exact: {s0}; f32: {f32_ok}; (0,0)/(1,2)/s=2 -> {:?}; reverse step: {in_step}",
            ex.as_slice()
        ),
    )
}

// ---------------------------------------------------------------- 7

pub fn mask_statistics(draws: usize) -> Check {
    let (len, max_spans) = (64, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    // sums[n][k], sums of squares, counts
    let mut sums = vec![vec![0.0f64; max_spans]; max_spans + 1];
    let mut sq = vec![vec![0.0f64; max_spans]; max_spans + 1];
    let mut counts = vec![0usize; max_spans + 1];
    let (mut flips, mut multi) = (0usize, 0usize);
    let mut single_unconditional = true;
    for _ in 0..draws {
        let d = sample_span_draw(len, max_spans, &mut rng).unwrap();
        counts[d.spans] += 1;
        if d.spans == 1 {
            single_unconditional &= !d.mask.any_conditioning();
            continue;
        }
        multi += 1;
        flips += usize::from(d.flipped);
        for (k, &i) in d.starts.iter().enumerate() {
            sums[d.spans][k] += i as f64;
            sq[d.spans][k] += (i as f64).powi(2);
        }
    }
    let mut worst: f64 = 0.0;
    for n in 2..=max_spans {
        let c = counts[n] as f64;
        for k in 1..n {
            let mean = sums[n][k - 1] / c;
            let var = (sq[n][k - 1] / c - mean * mean) * c / (c - 1.0);
            let expect = k as f64 / n as f64 * len as f64;
            worst = worst.max((mean - expect).abs() / (var / c).sqrt());
        }
    }
    let m1 = (0..1000).all(|_| !sample_span_draw(len, 1, &mut rng).unwrap().mask.any_conditioning());
    let rate = flips as f64 / multi as f64;
    let z_flip = (rate - 0.5).abs() / (0.25 / multi as f64).sqrt();
    Check::new(
        worst < 3.0 && single_unconditional && m1 && z_flip < 3.0,
        format!(
            "{draws} draws: largest E[i_k|n] deviation {worst:.2} SE; n = 1 unconditional: {}; \
             flip rate {rate:.4} ({z_flip:.2} SE)",
            single_unconditional && m1
        ),
    )
}

// ---------------------------------------------------------------- 8

fn roundtrip_fraction(e: &EmbeddingMatrix, ids: &[usize], sigma0: f64, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x: Matrix<f64> = embed_tokens(ids, e, sigma0, &mut rng);
    let readout: Matrix<f64> = e.cast();
    let back = decode_argmax(&x, &readout);
    back.0.iter().zip(ids).filter(|(a, b)| a == b).count() as f64 / ids.len() as f64
}

pub fn decode_roundtrips() -> Check {
    let all = |v: usize| (0..v).collect::<Vec<usize>>();
    let random = EmbeddingMatrix::random(256, 32, 11).unwrap();
    let text = desk_corpus(200, 2);
    let vocab = Vocab::build(&text, 256, TokenizerMode::Char).unwrap();
    let skip_cfg = SkipGramConfig {
        steps: 20_000,
        ..SkipGramConfig::default()
    };
    let pretrained = train_skipgram(&vocab.encode(&text).0, vocab.size(), 32, &skip_cfg, 4).unwrap();
    let exact_random = roundtrip_fraction(&random, &all(256), 0.0, 0) == 1.0;
    let exact_pretrained = roundtrip_fraction(&pretrained, &all(vocab.size()), 0.0, 0) == 1.0;
    let exact_bits = [2usize, 3, 41, 255, 256, 257, 1000]
        .iter()
        .all(|&v| roundtrip_fraction(&EmbeddingMatrix::bits(v).unwrap(), &all(v), 0.0, 0) == 1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let ids: Vec<usize> = (0..100_000).map(|_| rng.random_range(0..256)).collect();
    let noisy = roundtrip_fraction(&random, &ids, 1e-2, 1);
    Check::new(
        exact_random && exact_pretrained && exact_bits && noisy > 0.999,
        format!(
            "sigma0 = 0 exact: random {exact_random}, pretrained {exact_pretrained}, bits (exhaustive) {exact_bits}; \
             sigma0 = 1e-2 recovery {noisy:.5} over {} tokens",
            ids.len()
        ),
    )
}

// ---------------------------------------------------------------- 9

/// Returns the clean embeddings of one fixed target for every chain.
pub struct PerfectEstimator {
    pub clean: Matrix<f64>,
}

impl Estimator<f64> for PerfectEstimator {
    fn estimate(&self, input: &DenoiserInput<'_, f64>) -> Result<Matrix<f64>> {
        let copies: Vec<Matrix<f64>> = (0..input.steps.len()).map(|_| self.clean.clone()).collect();
        Ok(Matrix::vstack(&copies))
    }
}

pub fn oracle_denoiser_sampling(seeds: u64) -> Check {
    let (v, d, len) = (64, 32, 16);
    let e = EmbeddingMatrix::random(v, d, 21).unwrap();
    let sched = cosine_1000();
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let target: Vec<usize> = (0..len).map(|_| rng.random_range(1..v)).collect();
    let est = PerfectEstimator { clean: e.lookup(&target) };
    let readout: Matrix<f64> = e.cast();
    let sampler = Sampler::new(&est, &readout, &e, &sched, None).unwrap();
    let (mut hits, mut oracle_hits, mut total) = (0usize, 0usize, 0usize);
    let rows: Vec<Vec<f64>> = (0..v).map(|k| e.row(k).to_vec()).collect();
    let no_mask = vec![false; len];
    for seed in 0..seeds {
        let out = sampler.sample(&SampleRequest::unconditional(len, 1, seed)).unwrap();
        hits += out.samples[0].0.iter().zip(&target).filter(|(a, b)| a == b).count();
        let sim = oracle::perfect_denoiser_sim(&target, &no_mask, &rows, sched.betas(), 1.0, seed);
        oracle_hits += sim.iter().zip(&target).filter(|(a, b)| a == b).count();
        total += len;
    }
    let freq = hits as f64 / total as f64;
    let oracle_freq = oracle_hits as f64 / total as f64;

    // full conditioning echoes through a real (untrained) network
    let cfg = tiny_denoiser(8, 12);
    let e8 = EmbeddingMatrix::random(20, 8, 3).unwrap();
    let model: SedModel<f64> = SedModel::init(&cfg, &e8, 4).unwrap();
    let small = NoiseSchedule::cosine(30, DEFAULT_COSINE_OFFSET, 1e-2).unwrap();
    let net = Sampler::new(&model.denoiser, &model.readout, &e8, &small, None).unwrap();
    let tokens: Vec<usize> = (0..12).map(|i| (i * 7 + 3) % 20).collect();
    let mut echo = true;
    for seed in 0..5 {
        let req = SampleRequest {
            mask: ConditioningMask(vec![true; 12]),
            tokens: tokens.clone(),
            scale: 2.0,
            count: 2,
            seed,
        };
        echo &= net.sample(&req).unwrap().samples.iter().all(|s| s.0 == tokens);
    }
    Check::new(
        freq > 0.99 && oracle_freq > 0.99 && echo,
        format!(
            "{seeds} seeds: sampler recovery {freq:.4}, independent oracle chain {oracle_freq:.4}; \
             fully conditioned echo exact: {echo}"
        ),
    )
}

// ---------------------------------------------------------------- 10

/// The desk-scale training configuration used end to end.
pub fn desk_config(steps: usize, self_condition: bool, seed: u64) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.deterministic = true;
    cfg.train.steps = steps;
    cfg.train.seq_len = 32;
    cfg.train.batch_tokens = 256;
    cfg.train.log_every = 100;
    cfg.train.checkpoint_every = 0;
    cfg.train.seed = seed;
    cfg.denoiser.self_condition = self_condition;
    cfg
}

/// Repeatedly trains on one fixed batch and tracks the loss of that batch
/// under a fixed set of noise draws.
pub fn overfit_one_batch(max_steps: usize) -> Check {
    let cfg = desk_config(max_steps, true, 0);
    let data = pipeline::load_corpus(&cfg.corpus, None).unwrap();
    let e = pipeline::build_space(&cfg, &data).unwrap();
    let sched = cfg.schedule.build().unwrap();
    let mut dcfg = cfg.denoiser.clone();
    dcfg.d_embed = e.dim();
    let model = SedModel::init(&dcfg, &e, 0).unwrap();
    let stream = sed_core::corpus::TokenStream::new(data.train.clone()).unwrap();
    let mut trainer = Trainer::new(cfg.train.clone(), model, e.clone(), sched.clone(), stream).unwrap();
    let batch = trainer.next_batch().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let probes: Vec<PreparedBatch<f32>> = (0..8)
        .map(|_| prepare_batch(&batch, &e, &sched, &cfg.train, &mut rng).unwrap())
        .collect();
    let weights = LossWeights::standard(true);
    let probe_loss = |model: &SedModel<f32>| {
        probes
            .iter()
            .map(|p| loss_and_gradients(model, p, weights).unwrap().diffusion)
            .sum::<f64>()
            / probes.len() as f64
    };
    let initial = probe_loss(&trainer.model);
    let mut reached = None;
    let mut last = initial;
    for step in 1..=max_steps {
        trainer.train_on(&batch).unwrap();
        if step % 100 == 0 {
            last = probe_loss(&trainer.model);
            if last < 0.9 * initial {
                reached = Some(step);
                break;
            }
        }
    }
    Check::new(
        reached.is_some(),
        match reached {
            Some(s) => format!("fixed-batch loss {initial:.4} -> {last:.4} (< 0.9x) at step {s}"),
            None => format!("fixed-batch loss {initial:.4} -> {last:.4} after {max_steps} steps"),
        },
    )
}

/// Mean proxy NLL of uniformly random non-pad token strings.
pub fn uniform_random_nll(setup: &EvalSetup, vocab_size: usize, n: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let seqs: Vec<TokenSeq> = (0..n)
        .map(|_| TokenSeq((0..setup.length).map(|_| rng.random_range(1..vocab_size)).collect()))
        .collect();
    proxy_nll(&seqs, &setup.scorer).unwrap().mean
}

pub struct EndToEnd {
    pub train_secs: f64,
    pub sample_entropy: f64,
    pub data_entropy: f64,
    pub sample_nll: f64,
    pub data_nll: f64,
    pub random_nll: f64,
    pub log_support: f64,
    pub examples: Vec<String>,
}

pub fn end_to_end(dir: &Path, steps: usize, samples: usize, sample_steps: Option<usize>) -> EndToEnd {
    let cfg = desk_config(steps, true, 0);
    let start = Instant::now();
    pipeline::train_run(&cfg, dir, RunOptions::default(), &mut |_| {}).unwrap();
    let train_secs = start.elapsed().as_secs_f64();
    let ck = Checkpoint::load(&dir.join(pipeline::CHECKPOINT_DIR)).unwrap();
    let setup = EvalSetup::for_checkpoint(&ck).unwrap();
    let report = pipeline::eval_report(&ck, &setup, EvalTask::Unconditional, samples, &[1.0], sample_steps, 0).unwrap();
    let row = &report.rows[0];
    let out = pipeline::sample_checkpoint(&ck, &SampleRequest::unconditional(setup.length, 3, 1), sample_steps, None).unwrap();
    EndToEnd {
        train_secs,
        sample_entropy: row.unigram_entropy,
        data_entropy: report.reference.unigram_entropy,
        sample_nll: row.proxy_nll,
        data_nll: report.reference.proxy_nll,
        random_nll: uniform_random_nll(&setup, ck.vocab.size(), 64, 9),
        log_support: ((ck.vocab.size() - 1) as f64).ln(),
        examples: out.samples.iter().map(|s| ck.vocab.decode(&s.0, true)).collect(),
    }
}

// ---------------------------------------------------------------- 11

/// Proxy NLL at s = 1 after a short run with the given self-conditioning.
pub fn ablation_nll(dir: &Path, steps: usize, self_condition: bool, seed: u64) -> f64 {
    let mut cfg = desk_config(steps, self_condition, seed);
    cfg.train.batch_tokens = 128;
    pipeline::train_run(&cfg, dir, RunOptions::default(), &mut |_| {}).unwrap();
    let ck = Checkpoint::load(&dir.join(pipeline::CHECKPOINT_DIR)).unwrap();
    let setup = EvalSetup::for_checkpoint(&ck).unwrap();
    let report =
        pipeline::eval_report(&ck, &setup, EvalTask::Unconditional, 16, &[1.0], Some(200), seed).unwrap();
    report.rows[0].proxy_nll
}

// ---------------------------------------------------------------- 12

/// Mean intermediate-rank step count over `seeds` forward traces of the
/// same word-level text in random spaces of dimension `dim`.
pub fn intermediate_rank_steps(dim: usize, seeds: u64) -> (f64, usize) {
    let text = desk_corpus(3000, 0);
    let vocab = Vocab::build(&text, 4096, TokenizerMode::Word).unwrap();
    let passage = vocab.encode(text.lines().last().unwrap()).0;
    let tokens: Vec<usize> = passage.into_iter().filter(|&t| t != PAD_ID).take(48).collect();
    let sched = cosine_1000();
    let k = DEFAULT_K.min(vocab.size());
    let total: f64 = (0..seeds)
        .map(|seed| {
            let e = EmbeddingMatrix::random(vocab.size(), dim, seed).unwrap();
            forward_trace(&tokens, &e, &sched, 1, k, seed).unwrap().mean_intermediate_steps()
        })
        .sum();
    (total / seeds as f64, vocab.size())
}

pub fn intermediate_rank_statistic(seeds: u64) -> Check {
    let (low, v) = intermediate_rank_steps(32, seeds);
    let (high, _) = intermediate_rank_steps(256, seeds);
    let (higher, _) = intermediate_rank_steps(896, seeds);
    Check::new(
        v > DEFAULT_K && low > high && low > higher,
        format!(
            "V = {v}, K = {DEFAULT_K}, {seeds} seeds: mean steps with 0 < rank < K: D=32 {low:.1}, D=256 {high:.1}, D=896 {higher:.1}"
        ),
    )
}
