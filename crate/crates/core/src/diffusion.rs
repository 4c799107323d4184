//! Denoising-diffusion machinery, independent of any particular network:
//! noise schedules, forward corruption, the reverse update, inpainting
//! constraint enforcement, classifier-free guidance, and the sampling loop
//! over a pluggable denoiser.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trip::{PaddedWindow, TripStats, WINDOW_LEN};

/// Normalization constants for condition entries.
pub const SPEED_NORM: f64 = 30.0;
pub const DURATION_NORM: f64 = 1000.0;
pub const MAX_SPEED_NORM: f64 = 40.0;

/// Default number of diffusion steps at full scale.
pub const DEFAULT_T_DIFF: usize = 1000;

/// Default guidance scale for the two-channel (speed+accel) engine mode.
pub const DEFAULT_GUIDANCE_UNET: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Linear,
    Cosine,
}

/// Per-step noise tables over `t = 1..=t_diff`; index 0 holds the
/// conventions `beta_0 = 0`, `alpha_bar_0 = 1`, `sigma_0 = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    pub kind: ScheduleKind,
    pub t_diff: usize,
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub alpha_bar: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl NoiseSchedule {
    fn from_betas(kind: ScheduleKind, beta: Vec<f64>) -> Self {
        let t_diff = beta.len() - 1;
        let mut alpha = vec![1.0; t_diff + 1];
        let mut alpha_bar = vec![1.0; t_diff + 1];
        let mut sigma = vec![0.0; t_diff + 1];
        for t in 1..=t_diff {
            alpha[t] = 1.0 - beta[t];
            alpha_bar[t] = alpha_bar[t - 1] * alpha[t];
            sigma[t] = ((1.0 - alpha_bar[t - 1]) / (1.0 - alpha_bar[t]) * beta[t]).sqrt();
        }
        NoiseSchedule {
            kind,
            t_diff,
            beta,
            alpha,
            alpha_bar,
            sigma,
        }
    }
}

/// Linear beta schedule from 1e-4 to 2e-2 (endpoints exact).
pub fn linear_schedule(t_diff: usize) -> Result<NoiseSchedule> {
    if t_diff < 2 {
        return Err(Error::DegenerateInput(format!(
            "schedule needs >= 2 steps, got {t_diff}"
        )));
    }
    let (b1, bt) = (1e-4, 2e-2);
    let mut beta = vec![0.0; t_diff + 1];
    for t in 1..=t_diff {
        beta[t] = b1 + (bt - b1) * (t - 1) as f64 / (t_diff - 1) as f64;
    }
    Ok(NoiseSchedule::from_betas(ScheduleKind::Linear, beta))
}

/// Cosine schedule: `alpha_bar_t = f(t)/f(0)` with
/// `f(t) = cos^2(((t/T + s)/(1 + s)) * pi/2)`; betas derived as
/// `1 - alpha_bar_t / alpha_bar_{t-1}` and clipped at 0.999.
pub fn cosine_schedule(t_diff: usize, s: f64) -> Result<NoiseSchedule> {
    if t_diff < 2 {
        return Err(Error::DegenerateInput(format!(
            "schedule needs >= 2 steps, got {t_diff}"
        )));
    }
    let f = |t: f64| {
        let arg = (t / t_diff as f64 + s) / (1.0 + s) * std::f64::consts::FRAC_PI_2;
        arg.cos().powi(2)
    };
    let f0 = f(0.0);
    let mut beta = vec![0.0; t_diff + 1];
    let mut prev = 1.0;
    for t in 1..=t_diff {
        let ab = f(t as f64) / f0;
        beta[t] = (1.0 - ab / prev).clamp(1e-12, 0.999);
        prev = ab;
    }
    Ok(NoiseSchedule::from_betas(ScheduleKind::Cosine, beta))
}

/// Builds the schedule selected by `kind` (cosine offset fixed at 0.008).
pub fn build_schedule(kind: ScheduleKind, t_diff: usize) -> Result<NoiseSchedule> {
    match kind {
        ScheduleKind::Linear => linear_schedule(t_diff),
        ScheduleKind::Cosine => cosine_schedule(t_diff, 0.008),
    }
}

/// Mutable diffusion state: `channels x WINDOW_LEN` values.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowState {
    channels: usize,
    values: Vec<f64>,
}

impl WindowState {
    pub fn zeros(channels: usize) -> Self {
        WindowState {
            channels,
            values: vec![0.0; channels * WINDOW_LEN],
        }
    }

    pub fn from_values(channels: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != channels * WINDOW_LEN {
            return Err(Error::ShapeMismatch(format!(
                "window state needs {} values, got {}",
                channels * WINDOW_LEN,
                values.len()
            )));
        }
        Ok(WindowState { channels, values })
    }

    pub fn from_window(w: &PaddedWindow) -> Self {
        WindowState {
            channels: w.channels(),
            values: w.values().to_vec(),
        }
    }

    /// Standard-normal state.
    pub fn noise<R: Rng>(channels: usize, rng: &mut R) -> Self {
        WindowState {
            channels,
            values: (0..channels * WINDOW_LEN)
                .map(|_| rng.sample::<f64, _>(StandardNormal))
                .collect(),
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        &self.values[c * WINDOW_LEN..(c + 1) * WINDOW_LEN]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        &mut self.values[c * WINDOW_LEN..(c + 1) * WINDOW_LEN]
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    fn same_shape(&self, other: &WindowState) -> Result<()> {
        if self.channels != other.channels {
            return Err(Error::ShapeMismatch(format!(
                "channel mismatch: {} vs {}",
                self.channels, other.channels
            )));
        }
        Ok(())
    }
}

/// Engine mode fixing the condition dimensionality.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditionMode {
    /// Two entries: normalized average speed and duration.
    UNet,
    /// Four entries: average speed, duration, max speed, vehicle dynamics.
    Csdi,
}

impl ConditionMode {
    pub fn dim(&self) -> usize {
        match self {
            ConditionMode::UNet => 2,
            ConditionMode::Csdi => 4,
        }
    }
}

/// Normalized trip conditioning vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionVector {
    pub mode: ConditionMode,
    pub entries: Vec<f64>,
}

impl ConditionVector {
    pub fn unet(avg_speed_mps: f64, duration_s: f64) -> Self {
        ConditionVector {
            mode: ConditionMode::UNet,
            entries: vec![avg_speed_mps / SPEED_NORM, duration_s / DURATION_NORM],
        }
    }

    pub fn csdi(avg_speed_mps: f64, duration_s: f64, max_speed_mps: f64, d_veh: f64) -> Self {
        ConditionVector {
            mode: ConditionMode::Csdi,
            entries: vec![
                avg_speed_mps / SPEED_NORM,
                duration_s / DURATION_NORM,
                max_speed_mps / MAX_SPEED_NORM,
                d_veh.clamp(0.0, 1.0),
            ],
        }
    }

    /// Vehicle-dynamics scalar derived from trip statistics: acceleration
    /// variability scaled so sportier trips land near 1.
    pub fn d_veh_from_stats(stats: &TripStats) -> f64 {
        (stats.accel_std / 0.8).clamp(0.0, 1.0)
    }

    pub fn from_stats(stats: &TripStats, mode: ConditionMode) -> Self {
        match mode {
            ConditionMode::UNet => ConditionVector::unet(stats.avg_speed_mps, stats.duration_s),
            ConditionMode::Csdi => ConditionVector::csdi(
                stats.avg_speed_mps,
                stats.duration_s,
                stats.max_speed_mps,
                Self::d_veh_from_stats(stats),
            ),
        }
    }

    /// Reserved null-condition encoding (all entries -1), used both for
    /// condition dropout during training and for the unconditional branch
    /// of classifier-free guidance.
    pub fn null_token(mode: ConditionMode) -> Self {
        ConditionVector {
            mode,
            entries: vec![-1.0; mode.dim()],
        }
    }

    pub fn is_null(&self) -> bool {
        self.entries.iter().all(|&e| e == -1.0)
    }

    pub fn avg_speed_mps(&self) -> f64 {
        self.entries[0] * SPEED_NORM
    }

    pub fn duration_s(&self) -> f64 {
        self.entries[1] * DURATION_NORM
    }

    pub fn d_veh(&self) -> Option<f64> {
        match self.mode {
            ConditionMode::Csdi => Some(self.entries[3]),
            ConditionMode::UNet => None,
        }
    }

    /// Window sample count implied by the encoded duration, capped at the
    /// window length.
    pub fn valid_len(&self) -> usize {
        let samples = self.duration_s().round() as i64 + 1;
        (samples.max(2) as usize).min(WINDOW_LEN)
    }
}

/// Classifier-free guidance settings.
#[derive(Debug, Clone, PartialEq)]
pub struct GuidanceConfig {
    /// Blend scale `w >= 0`; 0 recovers the pure conditional prediction.
    pub scale: f64,
    pub uncond_token: ConditionVector,
}

impl GuidanceConfig {
    pub fn new(scale: f64, mode: ConditionMode) -> Self {
        GuidanceConfig {
            scale,
            uncond_token: ConditionVector::null_token(mode),
        }
    }
}

/// Shape-preserving noise predictor.
pub trait Denoiser {
    fn channels(&self) -> usize;

    /// Predicts the noise in `x_t` at diffusion step `t`; `None` condition
    /// requests the unconditional branch.
    fn predict(
        &self,
        x_t: &WindowState,
        t: usize,
        c: Option<&ConditionVector>,
    ) -> Result<WindowState>;
}

/// `x_t = sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps`.
pub fn forward_sample(
    x0: &WindowState,
    t: usize,
    eps: &WindowState,
    sched: &NoiseSchedule,
) -> Result<WindowState> {
    x0.same_shape(eps)?;
    if t < 1 || t > sched.t_diff {
        return Err(Error::InvalidValue(format!(
            "step {t} outside 1..={}",
            sched.t_diff
        )));
    }
    let a = sched.alpha_bar[t].sqrt();
    let b = (1.0 - sched.alpha_bar[t]).sqrt();
    let values = x0
        .values
        .iter()
        .zip(&eps.values)
        .map(|(x, e)| a * x + b * e)
        .collect();
    Ok(WindowState {
        channels: x0.channels,
        values,
    })
}

/// One reverse update:
/// `x_{t-1} = (x_t - ((1-alpha_t)/sqrt(1-alpha_bar_t)) eps_hat) / sqrt(alpha_t) + sigma_t z`.
/// `z` is treated as zero when `stochastic` is false or `t == 1`.
pub fn reverse_step(
    x_t: &WindowState,
    t: usize,
    eps_hat: &WindowState,
    sched: &NoiseSchedule,
    z: Option<&WindowState>,
    stochastic: bool,
) -> Result<WindowState> {
    x_t.same_shape(eps_hat)?;
    if t < 1 || t > sched.t_diff {
        return Err(Error::InvalidValue(format!(
            "reverse step {t} outside 1..={}",
            sched.t_diff
        )));
    }
    let inv_sqrt_alpha = 1.0 / sched.alpha[t].sqrt();
    let coef = (1.0 - sched.alpha[t]) / (1.0 - sched.alpha_bar[t]).sqrt();
    let sigma = if stochastic && t > 1 { sched.sigma[t] } else { 0.0 };
    let mut values: Vec<f64> = x_t
        .values
        .iter()
        .zip(&eps_hat.values)
        .map(|(x, e)| inv_sqrt_alpha * (x - coef * e))
        .collect();
    if sigma > 0.0 {
        if let Some(z) = z {
            x_t.same_shape(z)?;
            for (v, n) in values.iter_mut().zip(&z.values) {
                *v += sigma * n;
            }
        }
    }
    Ok(WindowState {
        channels: x_t.channels,
        values,
    })
}

/// Overwrites masked positions with known values: `x = x(1-M) + known*M`.
pub fn apply_inpainting(values: &mut [f64], mask: &[bool], known: &[f64]) {
    for i in 0..values.len() {
        if mask[i] {
            values[i] = known[i];
        }
    }
}

/// Classifier-free guidance blend `(1+w) eps_cond - w eps_uncond`.
pub fn cfg_blend(eps_cond: &WindowState, eps_uncond: &WindowState, w: f64) -> Result<WindowState> {
    eps_cond.same_shape(eps_uncond)?;
    let values = eps_cond
        .values
        .iter()
        .zip(&eps_uncond.values)
        .map(|(c, u)| (1.0 + w) * c - w * u)
        .collect();
    Ok(WindowState {
        channels: eps_cond.channels,
        values,
    })
}

/// Positions pinned during sampling: rest boundaries at index 0 and
/// `valid_len - 1` on the speed channel, plus the whole pad region on every
/// channel.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SampleMask {
    pub valid_len: usize,
}

impl SampleMask {
    pub fn from_condition(c: &ConditionVector) -> Self {
        SampleMask {
            valid_len: c.valid_len(),
        }
    }

    /// Zeroes boundary speeds and the pad region in place.
    pub fn enforce(&self, x: &mut WindowState) {
        let t_end = self.valid_len - 1;
        for ch in 0..x.channels {
            let row = x.channel_mut(ch);
            if ch == 0 {
                row[0] = 0.0;
                row[t_end] = 0.0;
            }
            for v in row.iter_mut().skip(self.valid_len) {
                *v = 0.0;
            }
        }
    }
}

/// Full reverse loop: starts from standard-normal noise, applies the
/// (optionally guided) reverse update, and re-enforces the boundary/pad
/// constraints after every step. Returns the final state.
pub fn sample_loop<D: Denoiser + ?Sized, R: Rng>(
    denoiser: &D,
    c: &ConditionVector,
    sched: &NoiseSchedule,
    guidance: &GuidanceConfig,
    mask: &SampleMask,
    stochastic: bool,
    rng: &mut R,
) -> Result<WindowState> {
    let channels = denoiser.channels();
    let mut x = WindowState::noise(channels, rng);
    mask.enforce(&mut x);
    for t in (1..=sched.t_diff).rev() {
        let eps_cond = denoiser.predict(&x, t, Some(c))?;
        let eps = if guidance.scale > 0.0 {
            let eps_uncond = denoiser.predict(&x, t, None)?;
            cfg_blend(&eps_cond, &eps_uncond, guidance.scale)?
        } else {
            eps_cond
        };
        if !eps.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite noise prediction at step {t}"
            )));
        }
        let z = if stochastic && t > 1 {
            Some(WindowState::noise(channels, rng))
        } else {
            None
        };
        x = reverse_step(&x, t, &eps, sched, z.as_ref(), stochastic)?;
        mask.enforce(&mut x);
        if !x.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite state after reverse step {t}"
            )));
        }
    }
    Ok(x)
}

/// Closed-form x0 estimate from a noise prediction:
/// `(x_t - sqrt(1 - alpha_bar_t) eps_hat) / sqrt(alpha_bar_t)`.
pub fn predict_x0(
    x_t: &WindowState,
    eps_hat: &WindowState,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<WindowState> {
    x_t.same_shape(eps_hat)?;
    if t < 1 || t > sched.t_diff {
        return Err(Error::InvalidValue(format!(
            "step {t} outside 1..={}",
            sched.t_diff
        )));
    }
    let ab = sched.alpha_bar[t];
    let values = x_t
        .values
        .iter()
        .zip(&eps_hat.values)
        .map(|(x, e)| (x - (1.0 - ab).sqrt() * e) / ab.sqrt())
        .collect();
    Ok(WindowState {
        channels: x_t.channels,
        values,
    })
}

/// Denoiser that knows the target state and schedule: predicts exactly the
/// noise separating `x_t` from the target. Test and calibration aid.
pub struct OracleDenoiser<'a> {
    pub x0: WindowState,
    pub sched: &'a NoiseSchedule,
}

impl Denoiser for OracleDenoiser<'_> {
    fn channels(&self) -> usize {
        self.x0.channels()
    }

    fn predict(
        &self,
        x_t: &WindowState,
        t: usize,
        _c: Option<&ConditionVector>,
    ) -> Result<WindowState> {
        let ab = self.sched.alpha_bar[t];
        let values = x_t
            .values()
            .iter()
            .zip(self.x0.values())
            .map(|(x, x0)| (x - ab.sqrt() * x0) / (1.0 - ab).sqrt())
            .collect();
        WindowState::from_values(x_t.channels(), values)
    }
}
