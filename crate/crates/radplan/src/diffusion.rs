//! Closed-form diffusion machinery: the cosine noise schedule, forward
//! corruption, the reverse posterior step, and the retrieval interpolation
//! scheduler. All stochastic operations take an explicit RNG stream.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Beta/alpha-bar tables for an H-step schedule. `alpha_bars` has H+1 entries
/// with `alpha_bars[0] = 1` (the empty product) and is regenerated as the
/// exact cumulative product of (1 - beta) so the tables never drift apart.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::Config("noise schedule needs at least one step".into()));
        }
        for (i, b) in betas.iter().enumerate() {
            if !(0.0..1.0).contains(b) || !b.is_finite() {
                return Err(Error::Config(format!(
                    "beta[{}] = {b} outside [0, 1)",
                    i + 1
                )));
            }
        }
        let mut alpha_bars = Vec::with_capacity(betas.len() + 1);
        alpha_bars.push(1.0);
        for b in &betas {
            let prev = *alpha_bars.last().expect("seeded with 1");
            alpha_bars.push(prev * (1.0 - b));
        }
        Ok(NoiseSchedule { betas, alpha_bars })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    /// beta_h for h in 1..=H.
    pub fn beta(&self, h: usize) -> f64 {
        self.betas[h - 1]
    }

    /// alpha_bar_h for h in 0..=H (alpha_bar_0 = 1).
    pub fn alpha_bar(&self, h: usize) -> f64 {
        self.alpha_bars[h]
    }

    fn check_step(&self, h: usize) -> Result<()> {
        if h == 0 || h > self.steps() {
            return Err(Error::Config(format!(
                "diffusion step {h} outside 1..={}",
                self.steps()
            )));
        }
        Ok(())
    }

    pub fn dump(&self) -> ScheduleDump {
        ScheduleDump {
            steps: self.steps(),
            betas: self.betas.clone(),
            alpha_bars: self.alpha_bars.clone(),
        }
    }
}

/// JSON-serializable schedule tables for test fixtures.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScheduleDump {
    pub steps: usize,
    pub betas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
}

/// Cosine schedule: alpha_bar(h) = f(h)/f(0) with
/// f(h) = cos^2(((h/H + s)/(1 + s)) * pi/2), s = 0.008, and
/// beta_h = 1 - alpha_bar(h)/alpha_bar(h-1) clipped to at most 0.999.
pub fn cosine_schedule(steps: usize) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::Config("cosine schedule needs at least one step".into()));
    }
    let s = 0.008;
    let f = |h: f64| {
        let inner = ((h / steps as f64 + s) / (1.0 + s)) * std::f64::consts::FRAC_PI_2;
        inner.cos().powi(2)
    };
    let f0 = f(0.0);
    let mut betas = Vec::with_capacity(steps);
    let mut prev = 1.0;
    for h in 1..=steps {
        let ab = f(h as f64) / f0;
        let beta = (1.0 - ab / prev).min(0.999);
        betas.push(beta);
        prev = ab;
    }
    NoiseSchedule::from_betas(betas)
}

/// Closed-form forward corruption to step h:
/// sqrt(alpha_bar_h) * a0 + sqrt(1 - alpha_bar_h) * eps.
pub fn forward_noise(a0: &[f64], h: usize, eps: &[f64], sched: &NoiseSchedule) -> Result<Vec<f64>> {
    sched.check_step(h)?;
    if a0.len() != eps.len() {
        return Err(Error::Shape(format!(
            "noise shape {} does not match data shape {}",
            eps.len(),
            a0.len()
        )));
    }
    let ab = sched.alpha_bar(h);
    let signal = ab.sqrt();
    let noise = (1.0 - ab).sqrt();
    Ok(a0
        .iter()
        .zip(eps)
        .map(|(a, e)| signal * a + noise * e)
        .collect())
}

/// Standard-normal tensor of the given length from an explicit stream.
pub fn sample_noise(len: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..len).map(|_| rng.sample(StandardNormal)).collect()
}

/// One reverse step: the posterior mean combines the model's clean-sample
/// estimate and the current noisy sample; the variance vanishes at h = 1.
/// With alpha_bar_0 = 1 the h = 1 step reduces symbolically to the estimate
/// itself, which is returned exactly.
pub fn posterior_step(
    a_h: &[f64],
    a0_hat: &[f64],
    h: usize,
    sched: &NoiseSchedule,
    z: &[f64],
) -> Result<Vec<f64>> {
    sched.check_step(h)?;
    if a_h.len() != a0_hat.len() || a_h.len() != z.len() {
        return Err(Error::Shape(format!(
            "posterior shapes {} / {} / {} disagree",
            a_h.len(),
            a0_hat.len(),
            z.len()
        )));
    }
    if h == 1 {
        return Ok(a0_hat.to_vec());
    }
    let beta = sched.beta(h);
    let ab = sched.alpha_bar(h);
    let ab_prev = sched.alpha_bar(h - 1);
    let coef_clean = ab_prev.sqrt() * beta / (1.0 - ab);
    let coef_noisy = (1.0 - beta).sqrt() * (1.0 - ab_prev) / (1.0 - ab);
    let sigma = ((1.0 - ab_prev) / (1.0 - ab) * beta).sqrt();
    Ok(a_h
        .iter()
        .zip(a0_hat)
        .zip(z)
        .map(|((noisy, clean), zi)| coef_clean * clean + coef_noisy * noisy + sigma * zi)
        .collect())
}

/// Posterior standard deviation at step h (zero at h = 1).
pub fn posterior_sigma(h: usize, sched: &NoiseSchedule) -> Result<f64> {
    sched.check_step(h)?;
    if h == 1 {
        return Ok(0.0);
    }
    let beta = sched.beta(h);
    Ok(((1.0 - sched.alpha_bar(h - 1)) / (1.0 - sched.alpha_bar(h)) * beta).sqrt())
}

/// Exponents of the sigmoid interpolation scheduler. Table 5 uses (2, 1).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LambdaSchedulerParams {
    pub n: f64,
    pub m: f64,
}

impl Default for LambdaSchedulerParams {
    fn default() -> Self {
        LambdaSchedulerParams { n: 2.0, m: 1.0 }
    }
}

impl LambdaSchedulerParams {
    pub fn new(n: f64, m: f64) -> Result<Self> {
        if n < 0.0 || m < 0.0 || (n == 0.0 && m == 0.0) {
            return Err(Error::Config(format!(
                "scheduler exponents ({n}, {m}) must be non-negative and not both zero"
            )));
        }
        Ok(LambdaSchedulerParams { n, m })
    }
}

/// x^e with the continuous extension 0^0 := 1.
fn pow0(base: f64, exp: f64) -> f64 {
    if exp == 0.0 {
        1.0
    } else {
        base.powf(exp)
    }
}

/// Interpolation coefficient on the normalized step grid
/// h_hat = (h-1)/(H-1): lambda = h_hat^n / (h_hat^n + (1-h_hat)^m).
pub fn lambda_at(h: usize, steps: usize, params: &LambdaSchedulerParams) -> Result<f64> {
    if steps < 2 {
        return Err(Error::Config(
            "interpolation scheduler needs at least two diffusion steps".into(),
        ));
    }
    if h == 0 || h > steps {
        return Err(Error::Config(format!("step {h} outside 1..={steps}")));
    }
    let h_hat = (h - 1) as f64 / (steps - 1) as f64;
    Ok(lambda_of_fraction(h_hat, params))
}

/// The scheduler evaluated directly on h_hat in [0, 1].
pub fn lambda_of_fraction(h_hat: f64, params: &LambdaSchedulerParams) -> f64 {
    let num = pow0(h_hat, params.n);
    let den = num + pow0(1.0 - h_hat, params.m);
    num / den
}
