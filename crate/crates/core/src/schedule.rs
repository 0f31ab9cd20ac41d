//! Noise schedules and the closed-form Gaussian quantities of the diffusion
//! chain: the one-step forward kernel, the marginal `q(x_t | x_0)`, and the
//! reverse posterior `q(x_{t-1} | x_t, x_0)`.
//!
//! Steps are 1-indexed; index 0 of `alpha_bar` is the data boundary with
//! `alpha_bar[0] = 1`. All arrays are held in `f64`.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SedError};
use crate::real::Real;
use crate::tensor::Matrix;

/// Default offset of the squared-cosine schedule.
pub const DEFAULT_COSINE_OFFSET: f64 = 0.008;
pub const MAX_BETA: f64 = 0.999;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    steps: usize,
    /// `beta[t]` for `t in 1..=T`; index 0 is unused and holds 0.
    beta: Vec<f64>,
    alpha_bar: Vec<f64>,
    /// `1 − alpha_bar[t]`, accumulated without cancellation so that
    /// `one_minus_alpha_bar[1] == beta[1]` exactly.
    one_minus_alpha_bar: Vec<f64>,
    sigma0: f64,
}

fn cosine_f(t: f64, steps: f64, offset: f64) -> f64 {
    let angle = ((t / steps + offset) / (1.0 + offset)) * std::f64::consts::FRAC_PI_2;
    angle.cos().powi(2)
}

impl NoiseSchedule {
    /// Builds a schedule from per-step variances `betas[0..T]` (for steps
    /// `1..=T`).
    pub fn from_betas(betas: &[f64], sigma0: f64) -> Result<Self> {
        if betas.is_empty() {
            return Err(SedError::InvalidArgument("schedule needs T >= 1".into()));
        }
        if let Some(b) = betas.iter().find(|&&b| !(b > 0.0 && b < 1.0)) {
            return Err(SedError::InvalidArgument(format!(
                "beta {b} outside (0, 1)"
            )));
        }
        if !(sigma0 >= 0.0 && sigma0.is_finite()) {
            return Err(SedError::InvalidArgument(format!("sigma0 {sigma0} < 0")));
        }
        let steps = betas.len();
        let mut beta = Vec::with_capacity(steps + 1);
        let mut alpha_bar = Vec::with_capacity(steps + 1);
        let mut one_minus = Vec::with_capacity(steps + 1);
        beta.push(0.0);
        alpha_bar.push(1.0);
        one_minus.push(0.0);
        for &b in betas {
            let prev = *alpha_bar.last().unwrap();
            beta.push(b);
            alpha_bar.push(prev * (1.0 - b));
            // 1 − ᾱ_t = (1 − ᾱ_{t−1}) + ᾱ_{t−1}·β_t
            one_minus.push(one_minus.last().unwrap() + prev * b);
        }
        Ok(Self {
            steps,
            beta,
            alpha_bar,
            one_minus_alpha_bar: one_minus,
            sigma0,
        })
    }

    /// Squared-cosine schedule: `ᾱ_t = f(t)/f(0)` with
    /// `f(t) = cos²(((t/T + offset)/(1 + offset))·π/2)`, and
    /// `β_t = 1 − ᾱ_t/ᾱ_{t−1}` clipped to `(0, 0.999]`.
    pub fn cosine(steps: usize, offset: f64, sigma0: f64) -> Result<Self> {
        Self::cosine_with_floor(steps, offset, 0.0, sigma0)
    }

    /// As [`Self::cosine`], with every `β_t` raised to at least `min_beta`.
    /// `ᾱ` is then recomputed from the clipped betas.
    pub fn cosine_with_floor(
        steps: usize,
        offset: f64,
        min_beta: f64,
        sigma0: f64,
    ) -> Result<Self> {
        if steps == 0 {
            return Err(SedError::InvalidArgument("schedule needs T >= 1".into()));
        }
        if !(0.0..MAX_BETA).contains(&min_beta) {
            return Err(SedError::InvalidArgument(format!(
                "beta floor {min_beta} outside [0, {MAX_BETA})"
            )));
        }
        if offset <= 0.0 {
            return Err(SedError::InvalidArgument(format!(
                "cosine offset {offset} must be positive"
            )));
        }
        let t_f = steps as f64;
        let f0 = cosine_f(0.0, t_f, offset);
        let betas: Vec<f64> = (1..=steps)
            .map(|t| {
                let prev = cosine_f((t - 1) as f64, t_f, offset) / f0;
                let cur = cosine_f(t as f64, t_f, offset) / f0;
                (1.0 - cur / prev).clamp(min_beta.max(f64::MIN_POSITIVE), MAX_BETA)
            })
            .collect();
        Self::from_betas(&betas, sigma0)
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn sigma0(&self) -> f64 {
        self.sigma0
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        1.0 - self.beta[t]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn one_minus_alpha_bar(&self, t: usize) -> f64 {
        self.one_minus_alpha_bar[t]
    }

    /// `β_1..β_T`
    pub fn betas(&self) -> &[f64] {
        &self.beta[1..]
    }

    /// `ᾱ_0..ᾱ_T`
    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// Coefficients `(c_x0, c_xt)` of the posterior mean and its variance.
    pub fn posterior_coefficients(&self, t: usize) -> Result<(f64, f64, f64)> {
        if t == 0 {
            return Err(SedError::NoPosteriorAtZero);
        }
        if t > self.steps {
            return Err(SedError::InvalidArgument(format!(
                "step {t} beyond T = {}",
                self.steps
            )));
        }
        let denom = self.one_minus_alpha_bar[t];
        let c_x0 = self.alpha_bar[t - 1].sqrt() * self.beta[t] / denom;
        let c_xt = self.alpha(t).sqrt() * self.one_minus_alpha_bar[t - 1] / denom;
        let var = self.one_minus_alpha_bar[t - 1] / denom * self.beta[t];
        Ok((c_x0, c_xt, var))
    }

    /// A `k`-step schedule visiting steps `τ_j = round(j·T/k)` of this one,
    /// with `ᾱ'_j = ᾱ_{τ_j}`. Returns the schedule and `τ_1..τ_k`. With
    /// `k = T` this is the schedule itself.
    pub fn respaced(&self, k: usize) -> Result<(Self, Vec<usize>)> {
        if k == 0 || k > self.steps {
            return Err(SedError::InvalidArgument(format!(
                "cannot respace {} steps to {k}",
                self.steps
            )));
        }
        if k == self.steps {
            return Ok((self.clone(), (1..=k).collect()));
        }
        let taus: Vec<usize> = (1..=k)
            .map(|j| ((j * self.steps) as f64 / k as f64).round() as usize)
            .collect();
        let mut prev = 0;
        let betas: Vec<f64> = taus
            .iter()
            .map(|&tau| {
                let b = 1.0 - self.alpha_bar[tau] / self.alpha_bar[prev];
                prev = tau;
                b
            })
            .collect();
        Ok((Self::from_betas(&betas, self.sigma0)?, taus))
    }

    /// `(t, β_t, ᾱ_t)` rows for run reports.
    pub fn table(&self) -> String {
        let mut out = String::from("t\tbeta\talpha_bar\n");
        for t in 0..=self.steps {
            out.push_str(&format!("{t}\t{:.9e}\t{:.9e}\n", self.beta[t], self.alpha_bar[t]));
        }
        out
    }
}

/// One forward step: `√(1−β_t)·x_prev + √β_t·eps`.
pub fn forward_step<T: Real>(
    x_prev: &Matrix<T>,
    t: usize,
    eps: &Matrix<T>,
    sched: &NoiseSchedule,
) -> Matrix<T> {
    assert!(t >= 1 && t <= sched.steps(), "forward step {t} out of range");
    let keep = T::from_f64(sched.alpha(t).sqrt());
    let noise = T::from_f64(sched.beta(t).sqrt());
    x_prev.zip_map(eps, |x, e| keep * x + noise * e)
}

/// Closed-form marginal: `√ᾱ_t·x0 + √(1−ᾱ_t)·eps`. Returns `x0` at t = 0.
pub fn forward_marginal<T: Real>(
    x0: &Matrix<T>,
    t: usize,
    eps: &Matrix<T>,
    sched: &NoiseSchedule,
) -> Matrix<T> {
    assert!(t <= sched.steps(), "marginal step {t} out of range");
    if t == 0 {
        return x0.clone();
    }
    let keep = T::from_f64(sched.alpha_bar(t).sqrt());
    let noise = T::from_f64(sched.one_minus_alpha_bar(t).sqrt());
    x0.zip_map(eps, |x, e| keep * x + noise * e)
}

/// Reverse posterior mean and (scalar) variance given an estimate of x0.
pub fn posterior<T: Real>(
    x0_hat: &Matrix<T>,
    x_t: &Matrix<T>,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<(Matrix<T>, f64)> {
    let (c0, ct, var) = sched.posterior_coefficients(t)?;
    if x0_hat.shape() != x_t.shape() {
        return Err(SedError::Shape(format!(
            "posterior inputs {:?} vs {:?}",
            x0_hat.shape(),
            x_t.shape()
        )));
    }
    let (c0, ct) = (T::from_f64(c0), T::from_f64(ct));
    Ok((x0_hat.zip_map(x_t, |a, b| c0 * a + ct * b), var))
}
