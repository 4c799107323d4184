//! Trajectory primitives: 1 Hz speed sequences, micro-trips, kinematic
//! derivations, fixed-length windows, and validity checks.
//!
//! A *micro-trip* is a stop-to-stop speed segment: it begins and ends at
//! exactly zero velocity and stays non-negative throughout. Durations follow
//! the `samples - 1` convention (a trip of `n` samples spans `n - 1` seconds),
//! and distance integrates speeds with the rectangle rule over
//! `t = 0..n-1`, consistent with the forward-difference acceleration
//! `a_t = v_{t+1} - v_t`.

use crate::error::{Error, Result};

/// Fixed window length (seconds) used by the diffusion models.
pub const WINDOW_LEN: usize = 512;

/// Speed below which a sample counts as idle/near-zero (m/s).
pub const IDLE_SPEED: f64 = 0.5;

/// A finite, non-negative speed sequence sampled at 1 Hz.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeedTrajectory {
    samples: Vec<f64>,
}

impl SpeedTrajectory {
    /// Validates finiteness, non-negativity, and minimum length 2.
    pub fn new(samples: Vec<f64>) -> Result<Self> {
        if samples.len() < 2 {
            return Err(Error::DegenerateInput(format!(
                "trajectory needs >= 2 samples, got {}",
                samples.len()
            )));
        }
        for (i, &v) in samples.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::InvalidValue(format!(
                    "non-finite speed {v} at index {i}"
                )));
            }
            if v < 0.0 {
                return Err(Error::InvalidValue(format!(
                    "negative speed {v} at index {i}"
                )));
            }
        }
        Ok(Self { samples })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        false // length >= 2 by construction
    }

    /// Trip duration in seconds (`samples - 1`).
    pub fn duration_s(&self) -> f64 {
        (self.samples.len() - 1) as f64
    }
}

/// Discrete accelerations `a_t = v_{t+1} - v_t`, one shorter than the source.
#[derive(Debug, Clone, PartialEq)]
pub struct AccelSeries {
    samples: Vec<f64>,
}

impl AccelSeries {
    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }
}

/// Per-trip summary statistics.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TripStats {
    pub duration_s: f64,
    pub distance_m: f64,
    pub avg_speed_mps: f64,
    pub max_speed_mps: f64,
    pub accel_std: f64,
}

impl TripStats {
    fn of(traj: &SpeedTrajectory) -> Self {
        let v = traj.samples();
        let duration = traj.duration_s();
        let distance: f64 = v[..v.len() - 1].iter().sum();
        let max = v.iter().cloned().fold(0.0_f64, f64::max);
        let accel: Vec<f64> = v.windows(2).map(|w| w[1] - w[0]).collect();
        TripStats {
            duration_s: duration,
            distance_m: distance,
            avg_speed_mps: distance / duration,
            max_speed_mps: max,
            accel_std: population_std(&accel),
        }
    }
}

/// Population standard deviation (`ddof = 0`); 0.0 for empty input.
pub fn population_std(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    var.sqrt()
}

/// A speed trajectory that starts and ends at rest (exact zeros).
#[derive(Debug, Clone, PartialEq)]
pub struct MicroTrip {
    trajectory: SpeedTrajectory,
    stats: TripStats,
}

impl MicroTrip {
    pub fn new(trajectory: SpeedTrajectory) -> Result<Self> {
        let v = trajectory.samples();
        let (first, last) = (v[0], v[v.len() - 1]);
        if first != 0.0 || last != 0.0 {
            return Err(Error::InvalidValue(format!(
                "micro-trip endpoints must be exactly 0 (got {first}, {last})"
            )));
        }
        let stats = TripStats::of(&trajectory);
        Ok(Self { trajectory, stats })
    }

    pub fn trajectory(&self) -> &SpeedTrajectory {
        &self.trajectory
    }

    pub fn speeds(&self) -> &[f64] {
        self.trajectory.samples()
    }

    /// Cached summary statistics.
    pub fn stats(&self) -> &TripStats {
        &self.stats
    }
}

/// Fixed 512-sample window holding 1 (speed) or 2 (speed + acceleration)
/// channels with a validity mask; the padded diffusion state.
#[derive(Debug, Clone, PartialEq)]
pub struct PaddedWindow {
    channels: usize,
    /// `channels * WINDOW_LEN`, channel-major.
    values: Vec<f64>,
    valid_mask: Vec<bool>,
}

impl PaddedWindow {
    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        &self.values[c * WINDOW_LEN..(c + 1) * WINDOW_LEN]
    }

    pub fn valid_mask(&self) -> &[bool] {
        &self.valid_mask
    }

    /// Number of leading valid (non-pad) samples.
    pub fn valid_len(&self) -> usize {
        self.valid_mask.iter().filter(|&&m| m).count()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// Forward differences of a speed trajectory.
pub fn derive_acceleration(traj: &SpeedTrajectory) -> Result<AccelSeries> {
    let v = traj.samples();
    if v.len() < 2 {
        return Err(Error::DegenerateInput("need >= 2 speed samples".into()));
    }
    Ok(AccelSeries {
        samples: v.windows(2).map(|w| w[1] - w[0]).collect(),
    })
}

/// Forward differences of an acceleration series (discrete jerk).
pub fn derive_jerk(acc: &AccelSeries) -> Result<AccelSeries> {
    let a = acc.samples();
    if a.len() < 2 {
        return Err(Error::DegenerateInput(
            "need >= 2 acceleration samples".into(),
        ));
    }
    Ok(AccelSeries {
        samples: a.windows(2).map(|w| w[1] - w[0]).collect(),
    })
}

/// Summary statistics of a micro-trip.
pub fn trip_stats(trip: &MicroTrip) -> TripStats {
    *trip.stats()
}

/// Pads (right, with zeros) or truncates (keeping the head) to exactly
/// [`WINDOW_LEN`] samples. With `channels = 2`, channel 1 carries the
/// forward-difference acceleration of the kept speeds; the final valid
/// position and the pad region of channel 1 are zero.
pub fn pad_or_truncate(traj: &SpeedTrajectory, channels: usize) -> Result<PaddedWindow> {
    if channels != 1 && channels != 2 {
        return Err(Error::ShapeMismatch(format!(
            "window channels must be 1 or 2, got {channels}"
        )));
    }
    let v = traj.samples();
    let valid = v.len().min(WINDOW_LEN);
    let mut values = vec![0.0; channels * WINDOW_LEN];
    values[..valid].copy_from_slice(&v[..valid]);
    if channels == 2 {
        for t in 0..valid.saturating_sub(1) {
            values[WINDOW_LEN + t] = v[t + 1] - v[t];
        }
    }
    let mut valid_mask = vec![false; WINDOW_LEN];
    valid_mask[..valid].fill(true);
    Ok(PaddedWindow {
        channels,
        values,
        valid_mask,
    })
}

/// One rule violation found by [`validate_micro_trip`].
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    /// Endpoint speed exceeds the boundary tolerance.
    Boundary { index: usize, value: f64 },
    NegativeSpeed { index: usize, value: f64 },
    NonFinite { index: usize },
    TooShort { len: usize },
}

/// Validity verdict with the full violation list.
#[derive(Debug, Clone, PartialEq)]
pub struct Validity {
    pub violations: Vec<Violation>,
}

impl Validity {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Checks raw samples against the micro-trip rules: endpoints within
/// `boundary_tol` of zero, all speeds finite and non-negative, length >= 2.
///
/// Construction ([`MicroTrip::new`]) demands exact zeros; the evaluation-side
/// violation metric uses a 0.1 m/s tolerance.
pub fn validate_micro_trip(samples: &[f64], boundary_tol: f64) -> Validity {
    let mut violations = Vec::new();
    if samples.len() < 2 {
        violations.push(Violation::TooShort {
            len: samples.len(),
        });
        return Validity { violations };
    }
    for (i, &v) in samples.iter().enumerate() {
        if !v.is_finite() {
            violations.push(Violation::NonFinite { index: i });
        } else if v < 0.0 {
            violations.push(Violation::NegativeSpeed { index: i, value: v });
        }
    }
    let last = samples.len() - 1;
    for idx in [0, last] {
        let v = samples[idx];
        if v.is_finite() && v.abs() > boundary_tol {
            violations.push(Violation::Boundary {
                index: idx,
                value: v,
            });
        }
    }
    Validity { violations }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn traj(v: &[f64]) -> SpeedTrajectory {
        SpeedTrajectory::new(v.to_vec()).unwrap()
    }

    #[test]
    fn acceleration_direct_differences() {
        let a = derive_acceleration(&traj(&[0.0, 1.0, 2.0, 1.0, 0.0])).unwrap();
        assert_eq!(a.samples(), &[1.0, 1.0, -1.0, -1.0]);
    }

    #[test]
    fn acceleration_constant_speed() {
        let a = derive_acceleration(&traj(&[5.0, 5.0, 5.0])).unwrap();
        assert_eq!(a.samples(), &[0.0, 0.0]);
    }

    #[test]
    fn acceleration_roundtrip_exact_on_grid() {
        // Speeds on a dyadic grid make every difference and prefix sum
        // exactly representable, so the round-trip must be bit-exact.
        let mut rng = crate::rng::seeded_rng(7);
        let grid = 1.0 / (1u64 << 20) as f64;
        let v: Vec<f64> = (0..100)
            .map(|_| (rng.random_range(0..40 << 20) as f64) * grid)
            .collect();
        let t = traj(&v);
        let a = derive_acceleration(&t).unwrap();
        let mut rebuilt = vec![v[0]];
        for &da in a.samples() {
            rebuilt.push(rebuilt.last().unwrap() + da);
        }
        assert_eq!(rebuilt, v);
    }

    #[test]
    fn jerk_direct_differences() {
        let a = AccelSeries {
            samples: vec![1.0, 1.0, -1.0, -1.0],
        };
        let j = derive_jerk(&a).unwrap();
        assert_eq!(j.samples(), &[0.0, -2.0, 0.0]);
    }

    #[test]
    fn jerk_of_linear_ramp_is_zero() {
        let t = traj(&[0.0, 2.0, 4.0, 6.0, 8.0]);
        let j = derive_jerk(&derive_acceleration(&t).unwrap()).unwrap();
        assert!(j.samples().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn jerk_needs_two_accels() {
        let a = AccelSeries { samples: vec![1.0] };
        assert!(matches!(
            derive_jerk(&a),
            Err(Error::DegenerateInput(_))
        ));
    }

    #[test]
    fn stats_hand_summation() {
        let trip = MicroTrip::new(traj(&[0.0, 10.0, 10.0, 10.0, 0.0])).unwrap();
        let s = trip_stats(&trip);
        assert_eq!(s.duration_s, 4.0);
        assert_eq!(s.distance_m, 30.0);
        assert_eq!(s.avg_speed_mps, 7.5);
        assert_eq!(s.max_speed_mps, 10.0);
    }

    #[test]
    fn stats_empty_trip() {
        let trip = MicroTrip::new(traj(&[0.0, 0.0])).unwrap();
        let s = trip.stats();
        assert_eq!(s.duration_s, 1.0);
        assert_eq!(s.distance_m, 0.0);
        assert_eq!(s.avg_speed_mps, 0.0);
        assert_eq!(s.max_speed_mps, 0.0);
    }

    #[test]
    fn stats_invariants_random() {
        let mut rng = crate::rng::seeded_rng(11);
        for _ in 0..50 {
            let n = rng.random_range(3..200);
            let mut v: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..30.0)).collect();
            v[0] = 0.0;
            *v.last_mut().unwrap() = 0.0;
            let trip = MicroTrip::new(traj(&v)).unwrap();
            let s = trip.stats();
            let rel = (s.avg_speed_mps - s.distance_m / s.duration_s).abs()
                / s.avg_speed_mps.max(1e-300);
            assert!(rel < 1e-9);
            assert!(s.max_speed_mps >= s.avg_speed_mps);
            assert!(s.avg_speed_mps >= 0.0);
        }
    }

    #[test]
    fn micro_trip_requires_exact_zero_endpoints() {
        assert!(MicroTrip::new(traj(&[0.0, 3.0, 0.0])).is_ok());
        assert!(MicroTrip::new(traj(&[1e-9, 3.0, 0.0])).is_err());
    }

    #[test]
    fn pad_short_trip() {
        let mut v = vec![0.0; 300];
        for (i, s) in v.iter_mut().enumerate() {
            *s = (i % 7) as f64;
        }
        let w = pad_or_truncate(&traj(&v), 1).unwrap();
        assert_eq!(w.valid_len(), 300);
        assert!(w.valid_mask()[..300].iter().all(|&m| m));
        assert!(w.valid_mask()[300..].iter().all(|&m| !m));
        assert!(w.channel(0)[300..].iter().all(|&x| x == 0.0));
        assert_eq!(&w.channel(0)[..300], &v[..]);
    }

    #[test]
    fn pad_identity_on_full_window() {
        let v: Vec<f64> = (0..WINDOW_LEN).map(|i| (i % 5) as f64).collect();
        let w = pad_or_truncate(&traj(&v), 1).unwrap();
        assert_eq!(w.valid_len(), WINDOW_LEN);
        assert_eq!(w.channel(0), &v[..]);
        // idempotent: re-windowing the window changes nothing
        let w2 = pad_or_truncate(&traj(w.channel(0)), 1).unwrap();
        assert_eq!(w, w2);
    }

    #[test]
    fn truncate_keeps_head() {
        let v: Vec<f64> = (0..600).map(|i| i as f64 * 0.01).collect();
        let w = pad_or_truncate(&traj(&v), 1).unwrap();
        assert_eq!(w.valid_len(), WINDOW_LEN);
        assert_eq!(&w.channel(0)[..], &v[..WINDOW_LEN]);
    }

    #[test]
    fn two_channel_window_consistency() {
        let v = [0.0, 1.0, 3.0, 2.0, 0.0];
        let w = pad_or_truncate(&traj(&v), 2).unwrap();
        assert_eq!(&w.channel(1)[..4], &[1.0, 2.0, -1.0, -2.0]);
        assert!(w.channel(1)[4..].iter().all(|&x| x == 0.0));
    }

    #[test]
    fn validate_examples() {
        assert!(validate_micro_trip(&[0.0, 3.0, 0.0], 0.0).is_valid());
        let v = validate_micro_trip(&[1.0, 3.0, 0.0], 0.0);
        assert_eq!(
            v.violations,
            vec![Violation::Boundary {
                index: 0,
                value: 1.0
            }]
        );
        let v = validate_micro_trip(&[0.0, -1.0, 0.0], 0.0);
        assert!(matches!(
            v.violations[0],
            Violation::NegativeSpeed { index: 1, .. }
        ));
    }

    #[test]
    fn validate_tolerance_band() {
        // 0.1 m/s evaluation tolerance accepts small endpoint drift
        assert!(validate_micro_trip(&[0.05, 3.0, 0.09], 0.1).is_valid());
        assert!(!validate_micro_trip(&[0.15, 3.0, 0.0], 0.1).is_valid());
    }
}
