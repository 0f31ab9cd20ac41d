//! Brute-force reference computations for the test suite.
//!
//! Everything here works on plain `f64` slices and recomputes what it needs
//! from the raw `β` sequence. None of it calls into the schedule, tensor,
//! embedding or sampler code it is used to check.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Output of an oracle together with its own error bound.
#[derive(Clone, Debug, PartialEq)]
pub struct OracleResult {
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
    /// Standard error of each `mean` entry; zero for deterministic oracles.
    pub mean_std_error: Vec<f64>,
    /// Standard error of each `variance` entry; zero for deterministic oracles.
    pub variance_std_error: Vec<f64>,
    /// Documented absolute error bound of deterministic results.
    pub tolerance: f64,
    /// Chains, grid points or coordinates used.
    pub resolution: usize,
}

/// Standard normal pair by Box–Muller.
fn normal_pair(rng: &mut ChaCha8Rng) -> (f64, f64) {
    let u1: f64 = 1.0 - rng.random::<f64>();
    let u2: f64 = rng.random::<f64>();
    let r = (-2.0 * u1.ln()).sqrt();
    let a = std::f64::consts::TAU * u2;
    (r * a.cos(), r * a.sin())
}

fn normals(rng: &mut ChaCha8Rng, out: &mut [f64]) {
    let mut i = 0;
    while i < out.len() {
        let (a, b) = normal_pair(rng);
        out[i] = a;
        if i + 1 < out.len() {
            out[i + 1] = b;
        }
        i += 2;
    }
}

/// `ᾱ_t` as an explicit product over `betas[0..t]` (`betas[s-1]` is `β_s`).
pub fn alpha_bar_product(betas: &[f64], t: usize) -> f64 {
    betas[..t].iter().fold(1.0, |acc, b| acc * (1.0 - b))
}

/// Empirical mean and variance per coordinate of `x_t` after composing `t`
/// single forward steps from `x0`, over `n_chains` independent chains.
pub fn mc_chain_marginal(x0: &[f64], t: usize, betas: &[f64], n_chains: usize, seed: u64) -> OracleResult {
    assert!(t <= betas.len(), "step {t} beyond the schedule");
    assert!(n_chains >= 2, "need at least two chains");
    let d = x0.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sum = vec![0.0; d];
    let mut sum_sq = vec![0.0; d];
    let mut x = vec![0.0; d];
    let mut eps = vec![0.0; d];
    let coefs: Vec<(f64, f64)> = betas[..t].iter().map(|b| ((1.0 - b).sqrt(), b.sqrt())).collect();
    for _ in 0..n_chains {
        x.copy_from_slice(x0);
        for &(keep, noise) in &coefs {
            normals(&mut rng, &mut eps);
            for (xi, e) in x.iter_mut().zip(&eps) {
                *xi = keep * *xi + noise * e;
            }
        }
        for i in 0..d {
            sum[i] += x[i];
            sum_sq[i] += x[i] * x[i];
        }
    }
    let n = n_chains as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let variance: Vec<f64> = (0..d)
        .map(|i| ((sum_sq[i] - n * mean[i] * mean[i]) / (n - 1.0)).max(0.0))
        .collect();
    OracleResult {
        mean_std_error: variance.iter().map(|v| (v / n).sqrt()).collect(),
        variance_std_error: variance.iter().map(|v| v * (2.0 / (n - 1.0)).sqrt()).collect(),
        mean,
        variance,
        tolerance: 0.0,
        resolution: n_chains,
    }
}

/// Mean and variance of `x_{t-1}` given scalar `x0` and `x_t`, by
/// trapezoidal quadrature of the unnormalised Bayes posterior
/// `N(x_{t-1}; √ᾱ_{t-1}·x0, 1-ᾱ_{t-1}) · N(x_t; √α_t·x_{t-1}, β_t)`.
///
/// The grid spans `±8` standard deviations of the prior and of the
/// likelihood viewed as a density in `x_{t-1}`, restricted to where both
/// overlap. At `t = 1` the prior is a point mass and `(x0, 0)` is returned.
pub fn grid_posterior(x0: f64, x_t: f64, t: usize, betas: &[f64], grid: usize) -> OracleResult {
    assert!(t >= 1 && t <= betas.len(), "posterior step {t} out of range");
    assert!(grid >= 3, "grid too coarse");
    let prior_var = 1.0 - alpha_bar_product(betas, t - 1);
    let point = |mean: f64, var: f64| OracleResult {
        mean: vec![mean],
        variance: vec![var],
        mean_std_error: vec![0.0],
        variance_std_error: vec![0.0],
        tolerance: 0.0,
        resolution: 1,
    };
    if prior_var == 0.0 {
        return point(x0, 0.0);
    }
    let prior_mean = alpha_bar_product(betas, t - 1).sqrt() * x0;
    let beta = betas[t - 1];
    let alpha = 1.0 - beta;
    let lik_mean = x_t / alpha.sqrt();
    let lik_var = beta / alpha;
    let (ps, ls) = (8.0 * prior_var.sqrt(), 8.0 * lik_var.sqrt());
    let mut lo = (prior_mean - ps).max(lik_mean - ls);
    let mut hi = (prior_mean + ps).min(lik_mean + ls);
    if lo >= hi {
        lo = (prior_mean - ps).min(lik_mean - ls);
        hi = (prior_mean + ps).max(lik_mean + ls);
    }
    let h = (hi - lo) / (grid - 1) as f64;
    let log_density = |x: f64| {
        -0.5 * (x - prior_mean).powi(2) / prior_var - 0.5 * (x_t - alpha.sqrt() * x).powi(2) / beta
    };
    let xs: Vec<f64> = (0..grid).map(|i| lo + h * i as f64).collect();
    let logs: Vec<f64> = xs.iter().map(|&x| log_density(x)).collect();
    let top = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let (mut z, mut m1, mut m2) = (0.0, 0.0, 0.0);
    for (i, (&x, &l)) in xs.iter().zip(&logs).enumerate() {
        let w = if i == 0 || i == grid - 1 { 0.5 } else { 1.0 };
        let p = w * (l - top).exp();
        z += p;
        m1 += p * x;
    }
    let mean = m1 / z;
    for (i, (&x, &l)) in xs.iter().zip(&logs).enumerate() {
        let w = if i == 0 || i == grid - 1 { 0.5 } else { 1.0 };
        m2 += w * (l - top).exp() * (x - mean).powi(2);
    }
    OracleResult {
        mean: vec![mean],
        variance: vec![m2 / z],
        mean_std_error: vec![0.0],
        variance_std_error: vec![0.0],
        tolerance: 1e-6,
        resolution: grid,
    }
}

/// Central differences `(f(p + h e_i) - f(p - h e_i)) / 2h` at `coords`.
pub fn fd_gradient(loss: impl Fn(&[f64]) -> f64, params: &[f64], coords: &[usize], h: f64) -> Vec<f64> {
    let mut p = params.to_vec();
    coords
        .iter()
        .map(|&i| {
            let orig = p[i];
            p[i] = orig + h;
            let up = loss(&p);
            p[i] = orig - h;
            let down = loss(&p);
            p[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Reverse chain driven by a denoiser that always returns the true clean
/// embeddings, followed by nearest-row decoding.
///
/// `embedding[k]` is the row of token `k`. Positions with `mask[i]` set are
/// clamped to their clean row at every step. Both guidance branches return
/// the same estimate, so `scale` only enters through the combination
/// arithmetic.
pub fn perfect_denoiser_sim(
    target: &[usize],
    mask: &[bool],
    embedding: &[Vec<f64>],
    betas: &[f64],
    scale: f64,
    seed: u64,
) -> Vec<usize> {
    assert_eq!(target.len(), mask.len(), "mask length");
    let d = embedding[0].len();
    let clean: Vec<f64> = target.iter().flat_map(|&w| embedding[w].iter().copied()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = vec![0.0; clean.len()];
    normals(&mut rng, &mut x);
    let clamp = |x: &mut [f64]| {
        for (i, &m) in mask.iter().enumerate() {
            if m {
                x[i * d..(i + 1) * d].copy_from_slice(&clean[i * d..(i + 1) * d]);
            }
        }
    };
    clamp(&mut x);
    let mut eps = vec![0.0; clean.len()];
    let mut estimate = clean.clone();
    for t in (1..=betas.len()).rev() {
        let cond = &clean;
        let uncond = &clean;
        for ((e, c), u) in estimate.iter_mut().zip(cond).zip(uncond) {
            *e = u + scale * (c - u);
        }
        let ab_t = alpha_bar_product(betas, t);
        let ab_prev = alpha_bar_product(betas, t - 1);
        let beta = betas[t - 1];
        let c0 = ab_prev.sqrt() * beta / (1.0 - ab_t);
        let ct = (1.0 - beta).sqrt() * (1.0 - ab_prev) / (1.0 - ab_t);
        let sd = ((1.0 - ab_prev) / (1.0 - ab_t) * beta).sqrt();
        normals(&mut rng, &mut eps);
        for i in 0..x.len() {
            x[i] = c0 * estimate[i] + ct * x[i] + if t > 1 { sd * eps[i] } else { 0.0 };
        }
        clamp(&mut x);
    }
    (0..target.len())
        .map(|i| {
            let xi = &x[i * d..(i + 1) * d];
            let mut best = (0, f64::INFINITY);
            for (k, row) in embedding.iter().enumerate() {
                let dist: f64 = row.iter().zip(xi).map(|(a, b)| (a - b) * (a - b)).sum();
                if dist < best.1 {
                    best = (k, dist);
                }
            }
            best.0
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn linear_betas(t: usize) -> Vec<f64> {
        (0..t).map(|i| 1e-3 + (0.2 - 1e-3) * i as f64 / (t - 1) as f64).collect()
    }

    #[test]
    fn chain_at_t0_is_exact() {
        let r = mc_chain_marginal(&[1.5, -2.0], 0, &linear_betas(10), 10, 0);
        assert_eq!(r.mean, vec![1.5, -2.0]);
        assert_eq!(r.variance, vec![0.0, 0.0]);
    }

    #[test]
    fn chain_single_step_moments() {
        let betas = [0.36];
        let r = mc_chain_marginal(&[2.0], 1, &betas, 200_000, 1);
        assert!((r.mean[0] - 1.6).abs() < 4.0 * r.mean_std_error[0]);
        assert!((r.variance[0] - 0.36).abs() < 4.0 * r.variance_std_error[0]);
    }

    #[test]
    fn grid_matches_conjugate_gaussian() {
        // prior N(0, 1), likelihood N(y; x, 1): posterior N(y/2, 1/2)
        let betas = [0.5, 0.5];
        let prior_var: f64 = 1.0 - 0.5;
        assert_eq!(1.0 - alpha_bar_product(&betas, 1), prior_var);
        let r = grid_posterior(0.0, 0.3, 2, &betas, 10_000);
        // likelihood N(x_t; √0.5 x, 0.5) and prior N(0, 0.5): precision 1/0.5 + 0.5/0.5 = 3
        let var = 1.0 / 3.0;
        let mean = var * (0.3 * 0.5f64.sqrt() / 0.5);
        assert!((r.mean[0] - mean).abs() < 1e-9, "{} vs {mean}", r.mean[0]);
        assert!((r.variance[0] - var).abs() < 1e-9);
    }

    #[test]
    fn grid_boundary_and_symmetry() {
        let betas = linear_betas(20);
        assert_eq!(grid_posterior(0.7, 3.0, 1, &betas, 100).mean, vec![0.7]);
        let a = grid_posterior(0.4, -0.2, 9, &betas, 4001);
        let b = grid_posterior(-0.4, 0.2, 9, &betas, 4001);
        assert!((a.mean[0] + b.mean[0]).abs() < 1e-12);
        assert!((a.variance[0] - b.variance[0]).abs() < 1e-12);
    }

    #[test]
    fn fd_on_quadratic_and_constant() {
        let f = |p: &[f64]| 3.0 * p[0] * p[0] + p[0] * p[1] - 2.0 * p[1];
        let g = fd_gradient(f, &[0.5, -1.0], &[0, 1], 1e-4);
        assert!((g[0] - 2.0).abs() < 1e-8 && (g[1] + 1.5).abs() < 1e-8);
        assert_eq!(fd_gradient(|_| 4.0, &[1.0, 2.0], &[0, 1], 1e-3), vec![0.0, 0.0]);
    }

    #[test]
    fn fd_error_shrinks_quadratically() {
        let f = |p: &[f64]| p[0].sin() * p[0].exp();
        let exact = 0.3f64.exp() * (0.3f64.sin() + 0.3f64.cos());
        let e1 = (fd_gradient(f, &[0.3], &[0], 1e-3)[0] - exact).abs();
        let e2 = (fd_gradient(f, &[0.3], &[0], 1e-4)[0] - exact).abs();
        let ratio = e1 / e2;
        assert!((80.0..120.0).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn perfect_denoiser_recovers_and_echoes() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let e: Vec<Vec<f64>> = (0..12)
            .map(|_| {
                let mut r = vec![0.0; 8];
                normals(&mut rng, &mut r);
                let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
                r.iter().map(|v| v / n * 8f64.sqrt()).collect()
            })
            .collect();
        let betas = linear_betas(100);
        let target = [3, 1, 4, 1, 5, 9];
        let free = [false; 6];
        assert_eq!(perfect_denoiser_sim(&target, &free, &e, &betas, 1.0, 0), target);
        assert_eq!(perfect_denoiser_sim(&target, &[true; 6], &e, &betas, 2.0, 0), target);
        assert_eq!(
            perfect_denoiser_sim(&target, &free, &e, &betas, 1.0, 4),
            perfect_denoiser_sim(&target, &free, &e, &betas, 2.0, 4)
        );
    }
}
