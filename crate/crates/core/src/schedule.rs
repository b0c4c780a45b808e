//! Cosine noise schedule and the per-step coefficients derived from it.
//!
//! Tables are built once in `f64`; callers cast to their compute precision.

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};

/// Upper bound applied to every beta.
pub const BETA_MAX: f64 = 0.99;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    steps: usize,
    offset: f64,
    /// `betas[t - 1]` is beta_t.
    betas: Vec<f64>,
    /// `alphas[t - 1] = 1 - beta_t`.
    alphas: Vec<f64>,
    /// `alpha_bars[t]` for `t = 0..=T`, with `alpha_bars[0] = 1`.
    alpha_bars: Vec<f64>,
}

/// Coefficients of one ancestral reverse step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReverseCoefficients {
    pub recip_sqrt_alpha: f64,
    pub eps_coef: f64,
    pub sigma: f64,
}

fn cosine_f(t: f64, steps: f64, s: f64) -> f64 {
    (((t / steps + s) / (1.0 + s)) * std::f64::consts::FRAC_PI_2).cos()
}

impl NoiseSchedule {
    /// Cosine schedule with offset `s`: `abar(t) = f(t) / f(0)`,
    /// `beta_t = min(1 - abar(t) / abar(t - 1), 0.99)`. The stored cumulative
    /// products are rebuilt from the clamped betas so `alpha_t * abar_{t-1} = abar_t`
    /// holds exactly for the stored tables.
    pub fn cosine(steps: usize, s: f64) -> Result<Self> {
        if steps == 0 {
            return Err(config_err("diffusion steps T must be positive"));
        }
        if !(s > 0.0 && s < 1.0) {
            return Err(config_err(format!("cosine offset s must lie in (0, 1), got {s}")));
        }
        let tf = steps as f64;
        let f0 = cosine_f(0.0, tf, s);
        let raw: Vec<f64> = (0..=steps).map(|t| cosine_f(t as f64, tf, s) / f0).collect();
        let betas: Vec<f64> = (1..=steps).map(|t| (1.0 - raw[t] / raw[t - 1]).min(BETA_MAX)).collect();
        Self::from_betas(steps, s, betas)
    }

    fn from_betas(steps: usize, offset: f64, betas: Vec<f64>) -> Result<Self> {
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(steps + 1);
        alpha_bars.push(1.0);
        for a in &alphas {
            alpha_bars.push(alpha_bars.last().unwrap() * a);
        }
        let sched = Self { steps, offset, betas, alphas, alpha_bars };
        sched.validate()?;
        Ok(sched)
    }

    /// Check the table invariants (used after deserialization too).
    pub fn validate(&self) -> Result<()> {
        let t = self.steps;
        if self.betas.len() != t || self.alphas.len() != t || self.alpha_bars.len() != t + 1 {
            return Err(config_err("schedule tables have inconsistent lengths"));
        }
        if self.alpha_bars[0] != 1.0 {
            return Err(config_err("alpha_bar_0 must be 1"));
        }
        for (i, &b) in self.betas.iter().enumerate() {
            if !(b > 0.0 && b <= BETA_MAX) {
                return Err(config_err(format!("beta_{} = {b} outside (0, {BETA_MAX}]", i + 1)));
            }
        }
        if self.alpha_bars.windows(2).any(|w| !(w[1] < w[0])) {
            return Err(config_err("alpha_bar must be strictly decreasing"));
        }
        let last = self.alpha_bars[t];
        if !(last > 0.0 && last < 1.0) {
            return Err(config_err(format!("alpha_bar_T = {last} outside (0, 1)")));
        }
        Ok(())
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn offset(&self) -> f64 {
        self.offset
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

    fn check_step(&self, t: usize, lo: usize) -> Result<()> {
        if t < lo || t > self.steps {
            return Err(Error::Index { index: t as i64, lo: lo as i64, hi: self.steps as i64 });
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        self.check_step(t, 1)?;
        Ok(self.betas[t - 1])
    }

    pub fn alpha(&self, t: usize) -> Result<f64> {
        self.check_step(t, 1)?;
        Ok(self.alphas[t - 1])
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.check_step(t, 0)?;
        Ok(self.alpha_bars[t])
    }

    /// `(sqrt(abar_t), sqrt(1 - abar_t))` of the closed-form forward kernel.
    /// `t = 0` is the noiseless endpoint `(1, 0)`.
    pub fn forward_kernel_params(&self, t: usize) -> Result<(f64, f64)> {
        let ab = self.alpha_bar(t)?;
        Ok((ab.sqrt(), (1.0 - ab).sqrt()))
    }

    /// Posterior variance `beta_t (1 - abar_{t-1}) / (1 - abar_t)`; zero at t = 1.
    pub fn posterior_variance(&self, t: usize) -> Result<f64> {
        self.check_step(t, 1)?;
        Ok(self.betas[t - 1] * (1.0 - self.alpha_bars[t - 1]) / (1.0 - self.alpha_bars[t]))
    }

    pub fn reverse_coefficients(&self, t: usize) -> Result<ReverseCoefficients> {
        self.check_step(t, 1)?;
        let beta = self.betas[t - 1];
        Ok(ReverseCoefficients {
            recip_sqrt_alpha: 1.0 / self.alphas[t - 1].sqrt(),
            eps_coef: beta / (1.0 - self.alpha_bars[t]).sqrt(),
            sigma: self.posterior_variance(t)?.sqrt(),
        })
    }
}
