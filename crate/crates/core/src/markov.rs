//! Second-order Markov chain baseline with exact endpoint-constrained
//! (bridge) sampling.
//!
//! Speeds are discretized into bins of width `delta_v`; the chain is
//! second-order, i.e. a first-order chain on pair-states
//! `X_t = (s_{t-1}, s_t)`. Backward messages give the probability of
//! reaching the rest bin in exactly the remaining number of steps, and the
//! bridge kernel reweights transitions by them, which pins both endpoints
//! at rest by construction.
//!
//! Messages are computed in scaled linear space per step and stored as
//! logarithms, so long horizons cannot underflow.

use std::collections::HashMap;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ArtifactKind, Error, Result};
use crate::ingest::Dataset;
use crate::trip::{derive_acceleration, MicroTrip, SpeedTrajectory};

/// Default speed bin width (m/s).
pub const DEFAULT_DELTA_V: f64 = 0.5;

/// Markov model file format version.
pub const MODEL_VERSION: u32 = 1;

/// Bin index for a non-negative speed: `floor(v / delta_v)`.
pub fn discretize(v: f64, delta_v: f64) -> Result<usize> {
    if !v.is_finite() || v < 0.0 {
        return Err(Error::InvalidValue(format!(
            "cannot discretize speed {v}"
        )));
    }
    Ok((v / delta_v).floor() as usize)
}

/// Representative speed of a bin: its center `(i + 0.5) * delta_v`.
pub fn bin_center(bin: usize, delta_v: f64) -> f64 {
    (bin as f64 + 0.5) * delta_v
}

/// Second-order transition counts and smoothed conditional probabilities.
#[derive(Debug, Clone)]
pub struct TransitionModel {
    pub delta_v: f64,
    /// Number of bins; valid indices are `0..n_bins`.
    pub n_bins: usize,
    /// Laplace smoothing mass added to every successor count.
    pub alpha: f64,
    /// `(s_{t-2}, s_{t-1}) -> successor counts over s_t`.
    rows: HashMap<(usize, usize), Vec<f64>>,
    /// Counts of the first moving bin `s_1` across trips; merged into the
    /// `(0,0)` row so the trip-initial context is always defined even when
    /// no trip contains two consecutive rest samples.
    initial_counts: Vec<f64>,
}

impl TransitionModel {
    /// Builds a model from explicit triple counts (used for toy chains).
    pub fn from_counts(
        delta_v: f64,
        n_bins: usize,
        counts: &[((usize, usize, usize), f64)],
        alpha: f64,
    ) -> Self {
        let mut rows: HashMap<(usize, usize), Vec<f64>> = HashMap::new();
        for &((a, b, c), w) in counts {
            rows.entry((a, b)).or_insert_with(|| vec![0.0; n_bins])[c] += w;
        }
        TransitionModel {
            delta_v,
            n_bins,
            alpha,
            rows,
            initial_counts: vec![0.0; n_bins],
        }
    }

    /// Raw successor counts for a context, without smoothing or the
    /// initial-context merge.
    pub fn counts(&self, a: usize, b: usize) -> Option<&[f64]> {
        self.rows.get(&(a, b)).map(|v| v.as_slice())
    }

    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn total_triples(&self) -> f64 {
        self.rows.values().map(|r| r.iter().sum::<f64>()).sum()
    }

    /// Smoothed conditional distribution over the next bin given the
    /// previous two. `None` when the context is unseen and `alpha == 0`.
    pub fn successor_probs(&self, a: usize, b: usize) -> Option<Vec<f64>> {
        let mut counts = vec![0.0; self.n_bins];
        let mut total = 0.0;
        if let Some(row) = self.rows.get(&(a, b)) {
            for (c, &w) in row.iter().enumerate() {
                counts[c] += w;
                total += w;
            }
        }
        if (a, b) == (0, 0) {
            for (c, &w) in self.initial_counts.iter().enumerate() {
                counts[c] += w;
                total += w;
            }
        }
        let denom = total + self.alpha * self.n_bins as f64;
        if denom <= 0.0 {
            return None;
        }
        Some(
            counts
                .iter()
                .map(|&w| (w + self.alpha) / denom)
                .collect(),
        )
    }
}

/// Accumulates triple counts over every consecutive bin triple of every
/// training trip, normalized with additive smoothing `alpha`.
pub fn fit_second_order(train: &Dataset, delta_v: f64, alpha: f64) -> Result<TransitionModel> {
    if train.is_empty() {
        return Err(Error::EmptyInput("markov training set is empty".into()));
    }
    let mut n_bins = 1;
    let mut trips_bins = Vec::with_capacity(train.len());
    for trip in train.trips() {
        let bins: Vec<usize> = trip
            .speeds()
            .iter()
            .map(|&v| discretize(v, delta_v))
            .collect::<Result<_>>()?;
        if let Some(&m) = bins.iter().max() {
            n_bins = n_bins.max(m + 1);
        }
        trips_bins.push(bins);
    }
    let mut rows: HashMap<(usize, usize), Vec<f64>> = HashMap::new();
    let mut initial_counts = vec![0.0; n_bins];
    for bins in &trips_bins {
        for w in bins.windows(3) {
            rows.entry((w[0], w[1])).or_insert_with(|| vec![0.0; n_bins])[w[2]] += 1.0;
        }
        if bins.len() >= 2 {
            initial_counts[bins[1]] += 1.0;
        }
    }
    // rows fitted before n_bins settled are already sized to the final value
    for row in rows.values_mut() {
        row.resize(n_bins, 0.0);
    }
    Ok(TransitionModel {
        delta_v,
        n_bins,
        alpha,
        rows,
        initial_counts,
    })
}

/// Backward bridge messages, stored as `log beta` indexed by *remaining*
/// steps. The chain is time-homogeneous, so one table computed at the
/// largest horizon serves every shorter one.
#[derive(Debug, Clone)]
pub struct BackwardTable {
    pub horizon: usize,
    pub n_bins: usize,
    /// `[remaining][a * n_bins + b] = ln beta`.
    log_beta: Vec<Vec<f64>>,
}

impl BackwardTable {
    /// `ln beta` with `r` steps remaining, for pair-state `(a, b)`.
    pub fn log_beta_remaining(&self, r: usize, a: usize, b: usize) -> f64 {
        self.log_beta[r][a * self.n_bins + b]
    }

    /// `ln beta_t` under horizon `t_end` (so `r = t_end - t`).
    pub fn log_beta_at(&self, t: usize, t_end: usize, a: usize, b: usize) -> f64 {
        self.log_beta_remaining(t_end - t, a, b)
    }

    /// Whether a bridge of duration `t` is feasible from the rest start.
    pub fn feasible(&self, t: usize) -> bool {
        t <= self.horizon && self.log_beta_remaining(t, 0, 0).is_finite()
    }
}

/// Dynamic program from the terminal condition (`beta = 1` iff the pair
/// ends in bin 0) back through `horizon` steps.
pub fn backward_messages(model: &TransitionModel, horizon: usize) -> Result<BackwardTable> {
    if horizon < 2 {
        return Err(Error::DegenerateInput(format!(
            "bridge horizon must be >= 2, got {horizon}"
        )));
    }
    let n = model.n_bins;
    let n_pairs = n * n;
    // Cache row distributions once; None marks dead-end contexts.
    let probs: Vec<Option<Vec<f64>>> = (0..n_pairs)
        .map(|p| model.successor_probs(p / n, p % n))
        .collect();

    let mut log_beta: Vec<Vec<f64>> = Vec::with_capacity(horizon + 1);
    let mut cur: Vec<f64> = (0..n_pairs)
        .map(|p| if p % n == 0 { 1.0 } else { 0.0 })
        .collect();
    let mut log_scale = 0.0;
    log_beta.push(
        cur.iter()
            .map(|&x| if x > 0.0 { 0.0 } else { f64::NEG_INFINITY })
            .collect(),
    );
    for _ in 1..=horizon {
        let mut next = vec![0.0; n_pairs];
        for a in 0..n {
            for b in 0..n {
                let Some(row) = &probs[a * n + b] else {
                    continue;
                };
                let mut acc = 0.0;
                for (c, &p) in row.iter().enumerate() {
                    if p > 0.0 {
                        acc += p * cur[b * n + c];
                    }
                }
                next[a * n + b] = acc;
            }
        }
        let max = next.iter().cloned().fold(0.0_f64, f64::max);
        if max > 0.0 {
            for x in &mut next {
                *x /= max;
            }
            log_scale += max.ln();
            log_beta.push(
                next.iter()
                    .map(|&x| {
                        if x > 0.0 {
                            x.ln() + log_scale
                        } else {
                            f64::NEG_INFINITY
                        }
                    })
                    .collect(),
            );
        } else {
            log_scale = f64::NEG_INFINITY;
            log_beta.push(vec![f64::NEG_INFINITY; n_pairs]);
        }
        cur = next;
    }
    let table = BackwardTable {
        horizon,
        n_bins: n,
        log_beta,
    };
    if !table.feasible(horizon) {
        return Err(Error::Infeasible(format!(
            "no path of duration {horizon} returns to rest from the rest start"
        )));
    }
    Ok(table)
}

/// Samples one bridge trajectory of duration `t_end` (so `t_end + 1`
/// samples): bins via the reweighted kernel, speeds via bin centers, and
/// exact zeros at both endpoints.
pub fn sample_bridge<R: Rng>(
    model: &TransitionModel,
    table: &BackwardTable,
    t_end: usize,
    rng: &mut R,
) -> Result<MicroTrip> {
    if t_end < 2 {
        return Err(Error::DegenerateInput(format!(
            "bridge duration must be >= 2, got {t_end}"
        )));
    }
    if t_end > table.horizon {
        return Err(Error::ShapeMismatch(format!(
            "table horizon {} < requested duration {t_end}",
            table.horizon
        )));
    }
    if !table.feasible(t_end) {
        return Err(Error::Infeasible(format!(
            "bridge of duration {t_end} is infeasible from the rest start"
        )));
    }
    let n = model.n_bins;
    let mut bins = Vec::with_capacity(t_end + 1);
    bins.push(0usize);
    let (mut a, mut b) = (0usize, 0usize);
    let mut weights = vec![0.0; n];
    for step in 0..t_end {
        let remaining = t_end - step - 1;
        let row = model.successor_probs(a, b).ok_or_else(|| {
            Error::Infeasible(format!("dead-end context ({a},{b}) during bridge"))
        })?;
        let mut max_log = f64::NEG_INFINITY;
        let mut logs = vec![f64::NEG_INFINITY; n];
        for (c, &p) in row.iter().enumerate() {
            if p > 0.0 {
                let lb = table.log_beta_remaining(remaining, b, c);
                if lb.is_finite() {
                    logs[c] = p.ln() + lb;
                    max_log = max_log.max(logs[c]);
                }
            }
        }
        if !max_log.is_finite() {
            return Err(Error::Infeasible(format!(
                "no feasible successor from ({a},{b}) with {remaining} steps remaining"
            )));
        }
        let mut total = 0.0;
        for c in 0..n {
            weights[c] = if logs[c].is_finite() {
                (logs[c] - max_log).exp()
            } else {
                0.0
            };
            total += weights[c];
        }
        let mut target = rng.random_range(0.0..total);
        let mut pick = n - 1;
        for (c, &w) in weights.iter().enumerate() {
            if target < w {
                pick = c;
                break;
            }
            target -= w;
        }
        bins.push(pick);
        (a, b) = (b, pick);
    }
    debug_assert_eq!(*bins.last().unwrap(), 0);

    let mut speeds: Vec<f64> = bins
        .iter()
        .map(|&s| bin_center(s, model.delta_v))
        .collect();
    speeds[0] = 0.0;
    let last = speeds.len() - 1;
    speeds[last] = 0.0;
    MicroTrip::new(SpeedTrajectory::new(speeds)?)
}

/// Reduces discretization artifacts: centered 5-point moving average over
/// the acceleration signal (windows clipped at the edges), re-integration
/// from rest, clamping at zero, and endpoint re-zeroing. Trips shorter
/// than 5 samples are returned unchanged.
pub fn smooth_markov(trip: &MicroTrip) -> MicroTrip {
    let v = trip.speeds();
    if v.len() < 5 {
        return trip.clone();
    }
    let accel = derive_acceleration(trip.trajectory())
        .expect("micro-trip has >= 2 samples")
        .samples()
        .to_vec();
    let n = accel.len();
    let mut smoothed = vec![0.0; n];
    for i in 0..n {
        let lo = i.saturating_sub(2);
        let hi = (i + 2).min(n - 1);
        let window = &accel[lo..=hi];
        smoothed[i] = window.iter().sum::<f64>() / window.len() as f64;
    }
    let mut speeds = Vec::with_capacity(v.len());
    speeds.push(0.0);
    for &a in &smoothed {
        let next = (speeds.last().unwrap() + a).max(0.0);
        speeds.push(next);
    }
    let last = speeds.len() - 1;
    speeds[last] = 0.0;
    MicroTrip::new(SpeedTrajectory::new(speeds).expect("smoothed speeds are valid"))
        .expect("endpoints pinned")
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    version: u32,
    delta_v: f64,
    n_bins: usize,
    alpha: f64,
    initial_counts: Vec<f64>,
    /// Sorted `(a, b, counts)` rows.
    rows: Vec<(usize, usize, Vec<f64>)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    config_digest: Option<String>,
}

/// Writes the model as JSON (sorted rows, bit-exact floats).
pub fn save_model(
    model: &TransitionModel,
    path: &Path,
    config_digest: Option<String>,
) -> Result<()> {
    let mut rows: Vec<(usize, usize, Vec<f64>)> = model
        .rows
        .iter()
        .map(|(&(a, b), counts)| (a, b, counts.clone()))
        .collect();
    rows.sort_by_key(|r| (r.0, r.1));
    let file = ModelFile {
        version: MODEL_VERSION,
        delta_v: model.delta_v,
        n_bins: model.n_bins,
        alpha: model.alpha,
        initial_counts: model.initial_counts.clone(),
        rows,
        config_digest,
    };
    let bytes = serde_json::to_vec(&file)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Reads a model written by [`save_model`]; returns the model and the
/// config digest it was produced under.
pub fn load_model(path: &Path) -> Result<(TransitionModel, Option<String>)> {
    let bytes = std::fs::read(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingArtifact {
                path: path.display().to_string(),
                kind: ArtifactKind::Model,
            }
        } else {
            Error::io(path.display().to_string(), e)
        }
    })?;
    model_from_bytes(&bytes)
}

/// Parses model JSON bytes, validating version and shape.
pub fn model_from_bytes(bytes: &[u8]) -> Result<(TransitionModel, Option<String>)> {
    let file: ModelFile = serde_json::from_slice(bytes)?;
    if file.version != MODEL_VERSION {
        return Err(Error::VersionMismatch {
            found: file.version,
            expected: MODEL_VERSION,
        });
    }
    if file.n_bins == 0 || file.delta_v <= 0.0 || !file.delta_v.is_finite() {
        return Err(Error::InvalidValue(
            "model needs n_bins > 0 and delta_v > 0".into(),
        ));
    }
    if file.initial_counts.len() != file.n_bins {
        return Err(Error::ShapeMismatch(
            "initial_counts length != n_bins".into(),
        ));
    }
    let mut rows = HashMap::new();
    for (a, b, counts) in file.rows {
        if a >= file.n_bins || b >= file.n_bins || counts.len() != file.n_bins {
            return Err(Error::ShapeMismatch(format!(
                "row ({a},{b}) out of range for {} bins",
                file.n_bins
            )));
        }
        if counts.iter().any(|c| !c.is_finite() || *c < 0.0) {
            return Err(Error::InvalidValue("negative or non-finite count".into()));
        }
        rows.insert((a, b), counts);
    }
    if file.initial_counts.iter().any(|c| !c.is_finite() || *c < 0.0) {
        return Err(Error::InvalidValue("negative or non-finite count".into()));
    }
    Ok((
        TransitionModel {
            delta_v: file.delta_v,
            n_bins: file.n_bins,
            alpha: file.alpha,
            rows,
            initial_counts: file.initial_counts,
        },
        file.config_digest,
    ))
}
