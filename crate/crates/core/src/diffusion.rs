//! Noise schedule, forward noising, and the ancestral sampler.
//!
//! Steps are 1-based: `t` ranges over `1..=T` and `t = 0` denotes clean data.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use ttg_tensor::rng::stream;

use crate::error::{invalid, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl ScheduleConfig {
    pub const BETA_START: f64 = 0.00085;
    pub const BETA_END: f64 = 0.012;

    /// 200 steps, the default used for training at this scale.
    pub fn desk() -> Self {
        Self {
            steps: 200,
            beta_start: Self::BETA_START,
            beta_end: Self::BETA_END,
        }
    }

    /// 1000 steps.
    pub fn full() -> Self {
        Self {
            steps: 1000,
            ..Self::desk()
        }
    }

    pub fn build(&self) -> Result<NoiseSchedule> {
        make_linear_schedule(self.steps, self.beta_start, self.beta_end)
    }
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self::desk()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

pub fn make_linear_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if steps < 2 {
        return Err(invalid("schedule needs at least 2 steps"));
    }
    if !(0.0 < beta_start && beta_start < beta_end && beta_end < 1.0) {
        return Err(invalid(format!(
            "need 0 < beta_start < beta_end < 1, got {beta_start} and {beta_end}"
        )));
    }
    let span = (steps - 1) as f64;
    let betas: Vec<f64> = (0..steps)
        .map(|i| beta_start + (beta_end - beta_start) * i as f64 / span)
        .collect();
    let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bars = Vec::with_capacity(steps);
    let mut acc = 1.0;
    for a in &alphas {
        acc *= a;
        alpha_bars.push(acc);
    }
    Ok(NoiseSchedule {
        betas,
        alphas,
        alpha_bars,
    })
}

impl NoiseSchedule {
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    /// Running product of alphas; 1 at `t = 0`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(invalid(format!("step {t} outside 1..={}", self.steps())));
        }
        Ok(())
    }
}

fn check_len(a: &[f64], b: &[f64], what: &str) -> Result<()> {
    if a.len() != b.len() {
        return Err(invalid(format!("{what}: length {} vs {}", a.len(), b.len())));
    }
    Ok(())
}

/// Closed-form draw of `x_t` given `x0` and the noise `eps`.
pub fn q_sample(x0: &[f64], t: usize, eps: &[f64], s: &NoiseSchedule) -> Result<Vec<f64>> {
    s.check_t(t)?;
    check_len(x0, eps, "q_sample")?;
    let (a, b) = (s.alpha_bar(t).sqrt(), (1.0 - s.alpha_bar(t)).sqrt());
    Ok(x0.iter().zip(eps).map(|(x, e)| a * x + b * e).collect())
}

/// One forward transition `x_{t-1} -> x_t`.
pub fn q_step(x_prev: &[f64], t: usize, noise: &[f64], s: &NoiseSchedule) -> Result<Vec<f64>> {
    s.check_t(t)?;
    check_len(x_prev, noise, "q_step")?;
    let (a, b) = (s.alpha(t).sqrt(), s.beta(t).sqrt());
    Ok(x_prev.iter().zip(noise).map(|(x, e)| a * x + b * e).collect())
}

/// Mean of the reverse transition given a noise prediction.
pub fn posterior_mean(x_t: &[f64], t: usize, eps_hat: &[f64], s: &NoiseSchedule) -> Result<Vec<f64>> {
    s.check_t(t)?;
    check_len(x_t, eps_hat, "posterior_mean")?;
    let inv = 1.0 / s.alpha(t).sqrt();
    let c = s.beta(t) / (1.0 - s.alpha_bar(t)).sqrt();
    Ok(x_t.iter().zip(eps_hat).map(|(x, e)| inv * (x - c * e)).collect())
}

/// `mu + sigma_t z` with `sigma_t^2 = beta_t`; no noise on the final step.
pub fn ddpm_step(x_t: &[f64], t: usize, eps_hat: &[f64], z: &[f64], s: &NoiseSchedule) -> Result<Vec<f64>> {
    let mut mu = posterior_mean(x_t, t, eps_hat, s)?;
    check_len(x_t, z, "ddpm_step")?;
    if t > 1 {
        let sigma = s.beta(t).sqrt();
        for (m, zi) in mu.iter_mut().zip(z) {
            *m += sigma * zi;
        }
    }
    Ok(mu)
}

/// Anything that predicts the noise in `x_t` at step `t`.
pub trait NoisePredictor {
    fn predict(&self, x_t: &[f64], t: usize) -> Result<Vec<f64>>;
}

impl<F> NoisePredictor for F
where
    F: Fn(&[f64], usize) -> Result<Vec<f64>>,
{
    fn predict(&self, x_t: &[f64], t: usize) -> Result<Vec<f64>> {
        self(x_t, t)
    }
}

pub fn normal_vec<R: Rng>(n: usize, rng: &mut R) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Ancestral sampling from `x_T ~ N(0, I)` down to `x_0`, clamped to [-1, 1].
pub fn sample<P: NoisePredictor + ?Sized>(model: &P, numel: usize, s: &NoiseSchedule, seed: u64) -> Result<Vec<f64>> {
    let mut rng = stream(seed, 0x73616d);
    let mut x = normal_vec(numel, &mut rng);
    for t in (1..=s.steps()).rev() {
        let eps = model.predict(&x, t)?;
        let z = if t > 1 { normal_vec(numel, &mut rng) } else { vec![0.0; numel] };
        x = ddpm_step(&x, t, &eps, &z, s)?;
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Diverged { step: t });
        }
    }
    for v in &mut x {
        *v = v.clamp(-1.0, 1.0);
    }
    Ok(x)
}
