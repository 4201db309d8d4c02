//! Linear variance schedule and the closed-form forward/reverse algebra of a
//! DDPM. Timesteps are 1-indexed in the public API (`t = 0` means clean data)
//! and map to 0-indexed storage internally.

use ndarray::{Array2, ArrayView2, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_same_shape, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffusionConfig {
    /// Number of diffusion steps `T`.
    pub timesteps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    /// Fixed step used for single-shot reconstruction at test time.
    pub t_test: usize,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            timesteps: 1000,
            beta_min: 1e-4,
            beta_max: 2e-2,
            t_test: 500,
        }
    }
}

impl DiffusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.timesteps == 0 {
            return Err(Error::Config("diffusion.timesteps must be >= 1".into()));
        }
        if !(self.beta_min > 0.0 && self.beta_min <= self.beta_max && self.beta_max < 1.0) {
            return Err(Error::Config(format!(
                "diffusion betas must satisfy 0 < beta_min <= beta_max < 1 (got {} / {})",
                self.beta_min, self.beta_max
            )));
        }
        if self.t_test == 0 || self.t_test > self.timesteps {
            return Err(Error::Config(format!(
                "diffusion.t_test must lie in 1..={} (got {})",
                self.timesteps, self.t_test
            )));
        }
        Ok(())
    }
}

/// Precomputed `beta_t`, `alpha_t = 1 - beta_t` and `alpha_bar_t = prod_{s<=t} alpha_s`,
/// all in double precision.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// Linear schedule from `beta_min` at `t = 1` to `beta_max` at `t = T`.
    pub fn linear(cfg: &DiffusionConfig) -> Result<Self> {
        cfg.validate()?;
        let t_max = cfg.timesteps;
        let betas: Vec<f64> = if t_max == 1 {
            vec![cfg.beta_min]
        } else {
            let span = cfg.beta_max - cfg.beta_min;
            (0..t_max)
                .map(|i| cfg.beta_min + i as f64 / (t_max - 1) as f64 * span)
                .collect()
        };
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let alpha_bars = alphas
            .iter()
            .scan(1.0_f64, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        Ok(Self {
            betas,
            alphas,
            alpha_bars,
        })
    }

    /// Number of steps `T`.
    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    fn index(&self, t: usize) -> Result<usize> {
        if t == 0 || t > self.len() {
            Err(Error::Step {
                t,
                max: self.len(),
            })
        } else {
            Ok(t - 1)
        }
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        Ok(self.betas[self.index(t)?])
    }

    pub fn alpha(&self, t: usize) -> Result<f64> {
        Ok(self.alphas[self.index(t)?])
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        Ok(self.alpha_bars[self.index(t)?])
    }

    /// Fixed reverse-process variance `(1 - abar_{t-1}) / (1 - abar_t) * beta_t`.
    /// At `t = 1` the previous cumulative product is undefined and `beta_1` is returned.
    pub fn posterior_variance(&self, t: usize) -> Result<f64> {
        let i = self.index(t)?;
        if i == 0 {
            return Ok(self.betas[0]);
        }
        Ok((1.0 - self.alpha_bars[i - 1]) / (1.0 - self.alpha_bars[i]) * self.betas[i])
    }

    /// Returns `(sqrt(abar_t), sqrt(1 - abar_t))`.
    pub fn signal_noise_scales(&self, t: usize) -> Result<(f64, f64)> {
        let ab = self.alpha_bar(t)?;
        Ok((ab.sqrt(), (1.0 - ab).sqrt()))
    }
}

/// `x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps`, element-wise.
pub fn forward_diffuse(
    x0: ArrayView2<f32>,
    eps: ArrayView2<f32>,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<Array2<f32>> {
    ensure_same_shape(x0.shape(), eps.shape())?;
    let (a, b) = sched.signal_noise_scales(t)?;
    Ok(Zip::from(&x0)
        .and(&eps)
        .map_collect(|&x, &e| (a * x as f64 + b * e as f64) as f32))
}

/// One step of the forward Markov chain: `x_t = sqrt(1 - beta_t) x_{t-1} + sqrt(beta_t) z`.
pub fn forward_step(
    x_prev: ArrayView2<f32>,
    z: ArrayView2<f32>,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<Array2<f32>> {
    ensure_same_shape(x_prev.shape(), z.shape())?;
    let beta = sched.beta(t)?;
    let (a, b) = ((1.0 - beta).sqrt(), beta.sqrt());
    Ok(Zip::from(&x_prev)
        .and(&z)
        .map_collect(|&x, &e| (a * x as f64 + b * e as f64) as f32))
}

/// Reverse-process mean parameterized by the noise: `(x_t - beta_t / sqrt(1 - abar_t) eps) / sqrt(alpha_t)`.
pub fn posterior_mean(
    x_t: ArrayView2<f32>,
    eps: ArrayView2<f32>,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<Array2<f32>> {
    ensure_same_shape(x_t.shape(), eps.shape())?;
    let beta = sched.beta(t)?;
    let inv_sqrt_alpha = 1.0 / sched.alpha(t)?.sqrt();
    let eps_coef = beta / (1.0 - sched.alpha_bar(t)?).sqrt();
    Ok(Zip::from(&x_t)
        .and(&eps)
        .map_collect(|&x, &e| (inv_sqrt_alpha * (x as f64 - eps_coef * e as f64)) as f32))
}
