//! Generation-side condition sampling (boost weighting) and trajectory
//! post-processing: smoothing, boundary ramps, vehicle-aware smoothing,
//! correlated noise, and target-speed rescaling.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::diffusion::{ConditionMode, ConditionVector, WindowState};
use crate::error::{Error, Result};
use crate::trip::{MicroTrip, SpeedTrajectory, TripStats};

/// Post-processing and condition-sampling constants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerationConfig {
    /// Average-speed boost exponent; 0 samples the pool uniformly.
    pub boost_speed: f64,
    /// Duration boost exponent; 0 samples the pool uniformly.
    pub boost_duration: f64,
    pub smooth_sigma: f64,
    pub smooth_kernel: usize,
    /// Endpoint speed above which a linear ramp replaces the boundary.
    pub ramp_threshold: f64,
    pub ramp_seconds: usize,
    /// `d_veh` below this cutoff gets the heavier smoothing kernel.
    pub heavy_vehicle_cutoff: f64,
    pub heavy_kernel: usize,
    /// Amplitude of the optional correlated noise; 0 disables it.
    pub corr_sigma: f64,
    /// Correlation length of the added noise, seconds.
    pub corr_length: f64,
    /// Rescale the profile so its mean matches the conditioned speed.
    pub rescale_to_target: bool,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        GenerationConfig {
            boost_speed: 0.0,
            boost_duration: 0.0,
            smooth_sigma: 1.5,
            smooth_kernel: 7,
            ramp_threshold: 0.5,
            ramp_seconds: 3,
            heavy_vehicle_cutoff: 0.4,
            heavy_kernel: 9,
            corr_sigma: 0.0,
            corr_length: 10.0,
            rescale_to_target: true,
        }
    }
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.smooth_kernel % 2 == 0 || self.heavy_kernel % 2 == 0 {
            return Err(Error::InvalidValue("smoothing kernels must be odd".into()));
        }
        if self.smooth_sigma < 0.0 || self.corr_sigma < 0.0 {
            return Err(Error::InvalidValue("sigmas must be >= 0".into()));
        }
        if !(0.0..=2.0).contains(&self.boost_speed) || !(0.0..=2.0).contains(&self.boost_duration)
        {
            return Err(Error::InvalidValue(
                "boost exponents must lie in [0, 2]".into(),
            ));
        }
        Ok(())
    }
}

/// Draws `n` generation conditions from a stats pool with replacement,
/// weighting entries by `avg_speed^boost_speed * duration^boost_duration`.
/// Non-positive weights are floored at a tiny epsilon so every entry stays
/// reachable.
pub fn sample_conditions<R: Rng>(
    pool: &[TripStats],
    mode: ConditionMode,
    boost_speed: f64,
    boost_duration: f64,
    n: usize,
    rng: &mut R,
) -> Result<Vec<ConditionVector>> {
    if pool.is_empty() {
        return Err(Error::EmptyInput("condition pool is empty".into()));
    }
    let mut weights: Vec<f64> = pool
        .iter()
        .map(|s| s.avg_speed_mps.powf(boost_speed) * s.duration_s.powf(boost_duration))
        .collect();
    for w in weights.iter_mut() {
        if !w.is_finite() || *w <= 0.0 {
            *w = 1e-12;
        }
    }
    let total: f64 = weights.iter().sum();
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let mut target = rng.random_range(0.0..total);
        let mut pick = pool.len() - 1;
        for (i, &w) in weights.iter().enumerate() {
            if target < w {
                pick = i;
                break;
            }
            target -= w;
        }
        out.push(ConditionVector::from_stats(&pool[pick], mode));
    }
    Ok(out)
}

/// Truncated, normalized Gaussian kernel of odd length `k`.
fn gaussian_kernel(sigma: f64, k: usize) -> Vec<f64> {
    let half = (k / 2) as isize;
    let mut kernel = Vec::with_capacity(k);
    for o in -half..=half {
        let w = if sigma > 0.0 {
            (-((o * o) as f64) / (2.0 * sigma * sigma)).exp()
        } else if o == 0 {
            1.0
        } else {
            0.0
        };
        kernel.push(w);
    }
    let total: f64 = kernel.iter().sum();
    for w in kernel.iter_mut() {
        *w /= total;
    }
    kernel
}

/// Index reflection for boundary handling (`d c b a | a b c d | d c b a`).
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    loop {
        if i < 0 {
            i = -i - 1;
        } else if i >= n {
            i = 2 * n - 1 - i;
        } else {
            return i as usize;
        }
    }
}

/// 1-D convolution with a normalized truncated Gaussian, reflective edges.
pub fn gaussian_smooth(v: &[f64], sigma: f64, k: usize) -> Result<Vec<f64>> {
    if k % 2 == 0 {
        return Err(Error::InvalidValue(format!(
            "kernel size must be odd, got {k}"
        )));
    }
    let kernel = gaussian_kernel(sigma, k);
    let half = (k / 2) as isize;
    let n = v.len();
    let mut out = vec![0.0; n];
    for (i, o) in out.iter_mut().enumerate() {
        let mut acc = 0.0;
        for (j, &w) in kernel.iter().enumerate() {
            let src = reflect(i as isize + j as isize - half, n);
            acc += w * v[src];
        }
        *o = acc;
    }
    Ok(out)
}

/// Enforces zero endpoints. Endpoints above `threshold` get a linear ramp
/// over `ramp_s` seconds (from zero up to the existing value at the ramp's
/// inner edge); endpoints already near zero are pinned exactly. Inputs too
/// short for a ramp are pinned only.
pub fn boundary_ramp(v: &[f64], threshold: f64, ramp_s: usize) -> Vec<f64> {
    let mut out = v.to_vec();
    let n = out.len();
    if n == 0 {
        return out;
    }
    if n > 2 * ramp_s && ramp_s > 0 {
        if out[0] > threshold {
            let anchor = out[ramp_s];
            for (i, o) in out.iter_mut().take(ramp_s).enumerate() {
                *o = anchor * i as f64 / ramp_s as f64;
            }
        }
        if out[n - 1] > threshold {
            let anchor = out[n - 1 - ramp_s];
            for i in 0..ramp_s {
                out[n - 1 - i] = anchor * i as f64 / ramp_s as f64;
            }
        }
    }
    out[0] = 0.0;
    out[n - 1] = 0.0;
    out
}

/// Applies the heavier smoothing kernel for slow-dynamics vehicles
/// (`d_veh < cutoff`, strict); identity otherwise.
pub fn vehicle_smooth(v: &[f64], d_veh: f64, cfg: &GenerationConfig) -> Result<Vec<f64>> {
    if d_veh < cfg.heavy_vehicle_cutoff {
        gaussian_smooth(v, cfg.smooth_sigma, cfg.heavy_kernel)
    } else {
        Ok(v.to_vec())
    }
}

/// Adds temporally correlated noise: white noise smoothed at the
/// correlation length, rescaled to `sigma_corr`, added, endpoints
/// re-zeroed, and the result clamped at zero. `sigma_corr == 0` is the
/// identity.
pub fn correlated_noise<R: Rng>(
    v: &[f64],
    sigma_corr: f64,
    corr_len: f64,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if sigma_corr < 0.0 {
        return Err(Error::InvalidValue("sigma_corr must be >= 0".into()));
    }
    if sigma_corr == 0.0 || v.len() < 3 {
        return Ok(v.to_vec());
    }
    let n = v.len();
    let white: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let k = (6.0 * corr_len) as usize | 1; // odd kernel spanning +-3 lengths
    let smoothed = gaussian_smooth(&white, corr_len, k)?;
    let std = crate::trip::population_std(&smoothed);
    if std <= 0.0 {
        return Ok(v.to_vec());
    }
    let gain = sigma_corr / std;
    let mut out: Vec<f64> = v
        .iter()
        .zip(&smoothed)
        .map(|(x, e)| (x + gain * e).max(0.0))
        .collect();
    out[0] = 0.0;
    out[n - 1] = 0.0;
    Ok(out)
}

/// Scales the profile so its mean matches the target; zeros stay zero.
pub fn rescale_to_target(v: &[f64], target_mean: f64) -> Result<Vec<f64>> {
    let mean = crate::util::mean(v);
    if mean <= 0.0 {
        return Err(Error::DegenerateInput(
            "cannot rescale a zero-mean profile".into(),
        ));
    }
    let gain = target_mean / mean;
    Ok(v.iter().map(|x| x * gain).collect())
}

/// Engine family selecting the post-processing recipe.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EngineMode {
    Markov,
    UNet,
    Csdi,
}

/// Turns a sampled window (physical units) into a valid micro-trip:
/// trims to the conditioned duration, applies the mode's ordered steps
/// (`Csdi`: smooth, ramps, vehicle smoothing, correlated noise;
/// `UNet`: ramps, mean rescale), clamps at zero, and re-pins the endpoints
/// last. The acceleration channel of two-channel windows is derived data
/// and is recomputed downstream from the emitted speeds.
pub fn postprocess_pipeline<R: Rng>(
    window: &WindowState,
    c: &ConditionVector,
    mode: EngineMode,
    cfg: &GenerationConfig,
    rng: &mut R,
) -> Result<MicroTrip> {
    cfg.validate()?;
    let valid = c.valid_len();
    let mut v: Vec<f64> = window.channel(0)[..valid]
        .iter()
        .map(|&x| x.max(0.0))
        .collect();
    match mode {
        EngineMode::Csdi => {
            v = gaussian_smooth(&v, cfg.smooth_sigma, cfg.smooth_kernel)?;
            v = boundary_ramp(&v, cfg.ramp_threshold, cfg.ramp_seconds);
            if let Some(d_veh) = c.d_veh() {
                v = vehicle_smooth(&v, d_veh, cfg)?;
            }
            v = correlated_noise(&v, cfg.corr_sigma, cfg.corr_length, rng)?;
        }
        EngineMode::UNet => {
            v = boundary_ramp(&v, cfg.ramp_threshold, cfg.ramp_seconds);
            if cfg.rescale_to_target {
                v = rescale_to_target(&v, c.avg_speed_mps())?;
            }
        }
        EngineMode::Markov => {}
    }
    for x in v.iter_mut() {
        *x = x.max(0.0);
    }
    let n = v.len();
    v[0] = 0.0;
    v[n - 1] = 0.0;
    MicroTrip::new(SpeedTrajectory::new(v)?)
}
