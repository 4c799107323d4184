//! Driving-regime analysis: per-trip feature extraction, K-means clustering
//! in z-score space, PCA projection, and cluster-stratified train/test splits.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::Dataset;
use crate::rng::seeded_rng;
use crate::trip::{derive_acceleration, population_std, MicroTrip, IDLE_SPEED};
use crate::util::mean;

pub const FEATURE_DIM: usize = 6;
pub const FEATURE_NAMES: [&str; FEATURE_DIM] = [
    "avg_speed_mps",
    "max_speed_mps",
    "speed_std_mps",
    "idle_ratio",
    "stops_per_km",
    "accel_noise_mps2",
];

/// Six kinematic features describing one micro-trip.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub avg_speed: f64,
    pub max_speed: f64,
    pub speed_std: f64,
    /// Fraction of samples with v < 0.5 m/s.
    pub idle_ratio: f64,
    /// Entries into the near-zero state (plus the initial rest) per km.
    pub stops_per_km: f64,
    /// Standard deviation of the acceleration series.
    pub accel_noise: f64,
}

impl FeatureVector {
    pub fn as_array(&self) -> [f64; FEATURE_DIM] {
        [
            self.avg_speed,
            self.max_speed,
            self.speed_std,
            self.idle_ratio,
            self.stops_per_km,
            self.accel_noise,
        ]
    }
}

/// Extracts the clustering features of a micro-trip.
///
/// Errors on zero-distance trips, for which stops-per-km is undefined.
pub fn extract_features(trip: &MicroTrip) -> Result<FeatureVector> {
    let v = trip.speeds();
    let stats = trip.stats();
    if stats.distance_m <= 0.0 {
        return Err(Error::DegenerateInput(
            "zero-distance trip: stops_per_km undefined".into(),
        ));
    }
    let idle = v.iter().filter(|&&x| x < IDLE_SPEED).count() as f64 / v.len() as f64;
    // A stop event is a v >= 0.5 -> v < 0.5 transition; the initial rest counts.
    let mut stops = if v[0] < IDLE_SPEED { 1 } else { 0 };
    for w in v.windows(2) {
        if w[0] >= IDLE_SPEED && w[1] < IDLE_SPEED {
            stops += 1;
        }
    }
    let accel = derive_acceleration(trip.trajectory())?;
    Ok(FeatureVector {
        avg_speed: stats.avg_speed_mps,
        max_speed: stats.max_speed_mps,
        speed_std: population_std(v),
        idle_ratio: idle,
        stops_per_km: stops as f64 / (stats.distance_m / 1000.0),
        accel_noise: population_std(accel.samples()),
    })
}

/// Fitted K-means model over z-scored features.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClusterModel {
    pub k: usize,
    /// Centroids in z-score space, `k x FEATURE_DIM`.
    pub centroids: Vec<[f64; FEATURE_DIM]>,
    pub feature_means: [f64; FEATURE_DIM],
    pub feature_stds: [f64; FEATURE_DIM],
    /// Per-trip cluster labels, parallel to the fitted feature list.
    pub assignments: Vec<usize>,
    /// Within-cluster sum of squares after each Lloyd iteration.
    pub wcss_history: Vec<f64>,
}

impl ClusterModel {
    /// z-scores a raw feature vector with the model's normalization.
    pub fn normalize(&self, f: &FeatureVector) -> [f64; FEATURE_DIM] {
        let x = f.as_array();
        let mut z = [0.0; FEATURE_DIM];
        for i in 0..FEATURE_DIM {
            z[i] = (x[i] - self.feature_means[i]) / self.feature_stds[i];
        }
        z
    }

    /// Index of the nearest centroid (squared Euclidean in z-space).
    pub fn assign(&self, f: &FeatureVector) -> usize {
        let z = self.normalize(f);
        nearest(&z, &self.centroids).0
    }

    /// Centroids mapped back to feature units.
    pub fn centroids_feature_space(&self) -> Vec<[f64; FEATURE_DIM]> {
        self.centroids
            .iter()
            .map(|c| {
                let mut out = [0.0; FEATURE_DIM];
                for i in 0..FEATURE_DIM {
                    out[i] = c[i] * self.feature_stds[i] + self.feature_means[i];
                }
                out
            })
            .collect()
    }
}

fn nearest(z: &[f64; FEATURE_DIM], centroids: &[[f64; FEATURE_DIM]]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, cen) in centroids.iter().enumerate() {
        let d: f64 = z.iter().zip(cen).map(|(a, b)| (a - b) * (a - b)).sum();
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

/// Lloyd's algorithm with k-means++ seeding on z-scored features.
/// Deterministic given `seed`; converges when the largest centroid shift
/// drops below 1e-8 or after 300 iterations.
pub fn kmeans_fit(features: &[FeatureVector], k: usize, seed: u64) -> Result<ClusterModel> {
    let n = features.len();
    if n < k || k == 0 {
        return Err(Error::DegenerateInput(format!(
            "kmeans needs n >= k >= 1, got n={n}, k={k}"
        )));
    }
    let mut means = [0.0; FEATURE_DIM];
    let mut stds = [0.0; FEATURE_DIM];
    let cols: Vec<Vec<f64>> = (0..FEATURE_DIM)
        .map(|i| features.iter().map(|f| f.as_array()[i]).collect())
        .collect();
    for i in 0..FEATURE_DIM {
        means[i] = mean(&cols[i]);
        let s = population_std(&cols[i]);
        stds[i] = if s > 0.0 { s } else { 1.0 }; // constant feature: stays centered at 0
    }
    let z: Vec<[f64; FEATURE_DIM]> = features
        .iter()
        .map(|f| {
            let x = f.as_array();
            let mut out = [0.0; FEATURE_DIM];
            for i in 0..FEATURE_DIM {
                out[i] = (x[i] - means[i]) / stds[i];
            }
            out
        })
        .collect();

    // k-means++: first centroid uniform, then proportional to squared distance.
    let mut rng = seeded_rng(seed);
    let mut centroids: Vec<[f64; FEATURE_DIM]> = vec![z[rng.random_range(0..n)]];
    while centroids.len() < k {
        let d2: Vec<f64> = z.iter().map(|p| nearest(p, &centroids).1).collect();
        let total: f64 = d2.iter().sum();
        let idx = if total <= 0.0 {
            rng.random_range(0..n)
        } else {
            let mut target = rng.random_range(0.0..total);
            let mut pick = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if target < d {
                    pick = i;
                    break;
                }
                target -= d;
            }
            pick
        };
        centroids.push(z[idx]);
    }

    let mut assignments = vec![0usize; n];
    let mut wcss_history = Vec::new();
    for _ in 0..300 {
        let mut wcss = 0.0;
        for (i, p) in z.iter().enumerate() {
            let (c, d) = nearest(p, &centroids);
            assignments[i] = c;
            wcss += d;
        }
        wcss_history.push(wcss);

        let mut sums = vec![[0.0; FEATURE_DIM]; k];
        let mut counts = vec![0usize; k];
        for (i, p) in z.iter().enumerate() {
            counts[assignments[i]] += 1;
            for j in 0..FEATURE_DIM {
                sums[assignments[i]][j] += p[j];
            }
        }
        let mut shift: f64 = 0.0;
        for c in 0..k {
            if counts[c] == 0 {
                // re-seed an empty cluster at the point farthest from its centroid
                let far = (0..n)
                    .max_by(|&a, &b| {
                        let da = nearest(&z[a], &centroids).1;
                        let db = nearest(&z[b], &centroids).1;
                        da.total_cmp(&db)
                    })
                    .unwrap();
                sums[c] = z[far];
                counts[c] = 1;
            }
            let mut moved = 0.0;
            for j in 0..FEATURE_DIM {
                let new = sums[c][j] / counts[c] as f64;
                moved += (new - centroids[c][j]) * (new - centroids[c][j]);
                centroids[c][j] = new;
            }
            shift = shift.max(moved.sqrt());
        }
        if shift < 1e-8 {
            break;
        }
    }
    // final assignment against the converged centroids
    let mut wcss = 0.0;
    for (i, p) in z.iter().enumerate() {
        let (c, d) = nearest(p, &centroids);
        assignments[i] = c;
        wcss += d;
    }
    wcss_history.push(wcss);

    Ok(ClusterModel {
        k,
        centroids,
        feature_means: means,
        feature_stds: stds,
        assignments,
        wcss_history,
    })
}

/// PCA of z-scored features.
#[derive(Debug, Clone, Serialize)]
pub struct PcaResult {
    /// `n x dims` projected coordinates.
    pub coords: Vec<Vec<f64>>,
    /// Fraction of total variance captured by each kept component.
    pub explained_variance_ratio: Vec<f64>,
    /// Kept components (rows), in the z-scored basis of `kept_features`.
    pub components: Vec<Vec<f64>>,
    /// All eigenvalues, descending.
    pub eigenvalues: Vec<f64>,
    /// Indices of features kept (zero-variance features are dropped).
    pub kept_features: Vec<usize>,
    pub warnings: Vec<String>,
}

/// Projects features onto the top `dims` principal components of the
/// z-scored covariance. Zero-variance features are dropped with a warning.
pub fn pca_project(features: &[FeatureVector], dims: usize) -> Result<PcaResult> {
    let n = features.len();
    if n < 2 {
        return Err(Error::DegenerateInput("pca needs >= 2 samples".into()));
    }
    let raw: Vec<[f64; FEATURE_DIM]> = features.iter().map(|f| f.as_array()).collect();
    let mut warnings = Vec::new();
    let mut kept = Vec::new();
    let mut means = Vec::new();
    let mut stds = Vec::new();
    for j in 0..FEATURE_DIM {
        let col: Vec<f64> = raw.iter().map(|r| r[j]).collect();
        let s = population_std(&col);
        if s <= 1e-12 {
            warnings.push(format!(
                "dropping zero-variance feature `{}`",
                FEATURE_NAMES[j]
            ));
        } else {
            kept.push(j);
            means.push(mean(&col));
            stds.push(s);
        }
    }
    let d = kept.len();
    if d == 0 {
        return Err(Error::DegenerateInput("all features are constant".into()));
    }
    let dims = dims.min(d);

    let z = DMatrix::from_fn(n, d, |i, j| (raw[i][kept[j]] - means[j]) / stds[j]);
    let cov = (z.transpose() * &z) / (n as f64 - 1.0);
    let eig = cov.symmetric_eigen();
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));

    let eigenvalues: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let total: f64 = eigenvalues.iter().sum();
    let components: Vec<Vec<f64>> = order[..dims]
        .iter()
        .map(|&i| eig.eigenvectors.column(i).iter().cloned().collect())
        .collect();
    let coords: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            components
                .iter()
                .map(|comp| {
                    let v = DVector::from_vec(comp.clone());
                    z.row(i).transpose().dot(&v)
                })
                .collect()
        })
        .collect();
    let explained_variance_ratio = eigenvalues[..dims]
        .iter()
        .map(|&l| if total > 0.0 { l / total } else { 0.0 })
        .collect();
    Ok(PcaResult {
        coords,
        explained_variance_ratio,
        components,
        eigenvalues,
        kept_features: kept,
        warnings,
    })
}

/// Result of a stratified split: disjoint, exhaustive trip index sets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    pub warnings: Vec<String>,
}

/// Splits trips into train/test preserving per-cluster proportions within
/// one trip. Allocation uses the largest-remainder method so the overall
/// train size is `round(train_frac * n)`; clusters with fewer than two
/// members go wholly to train with a warning.
pub fn stratified_split(
    ds: &Dataset,
    model: &ClusterModel,
    train_frac: f64,
    seed: u64,
) -> Result<Split> {
    let n = ds.len();
    if model.assignments.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "assignments cover {} trips, dataset has {n}",
            model.assignments.len()
        )));
    }
    if !(0.0..=1.0).contains(&train_frac) {
        return Err(Error::InvalidValue(format!(
            "train_frac must be in [0,1], got {train_frac}"
        )));
    }
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); model.k];
    for (i, &c) in model.assignments.iter().enumerate() {
        members[c].push(i);
    }

    let mut warnings = Vec::new();
    let mut forced_train = vec![false; model.k];
    let mut free_total = 0usize;
    for (c, m) in members.iter().enumerate() {
        if m.len() < 2 {
            if !m.is_empty() {
                warnings.push(format!(
                    "cluster {c} has {} member(s); placing wholly in train",
                    m.len()
                ));
            }
            forced_train[c] = true;
        } else {
            free_total += m.len();
        }
    }
    let target_train_free = (train_frac * free_total as f64).round() as usize;

    // Largest-remainder allocation over the non-forced clusters.
    let mut takes = vec![0usize; model.k];
    let mut remainders: Vec<(f64, usize)> = Vec::new();
    let mut floor_sum = 0usize;
    for c in 0..model.k {
        if forced_train[c] {
            takes[c] = members[c].len();
            continue;
        }
        let exact = train_frac * members[c].len() as f64;
        takes[c] = exact.floor() as usize;
        floor_sum += takes[c];
        remainders.push((exact - exact.floor(), c));
    }
    let mut leftover = target_train_free.saturating_sub(floor_sum);
    remainders.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    for &(_, c) in &remainders {
        if leftover == 0 {
            break;
        }
        if takes[c] < members[c].len() {
            takes[c] += 1;
            leftover -= 1;
        }
    }

    let mut rng = seeded_rng(seed);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for c in 0..model.k {
        let mut ids = members[c].clone();
        // Fisher-Yates with the split's RNG stream
        for i in (1..ids.len()).rev() {
            let j = rng.random_range(0..=i);
            ids.swap(i, j);
        }
        train.extend_from_slice(&ids[..takes[c]]);
        test.extend_from_slice(&ids[takes[c]..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok(Split {
        train,
        test,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trip::SpeedTrajectory;

    fn trip(v: &[f64]) -> MicroTrip {
        MicroTrip::new(SpeedTrajectory::new(v.to_vec()).unwrap()).unwrap()
    }

    #[test]
    fn idle_ratio_hand_count() {
        let f = extract_features(&trip(&[0.0, 10.0, 10.0, 10.0, 0.0])).unwrap();
        assert_eq!(f.idle_ratio, 0.4); // 2 of 5 samples below 0.5
        assert_eq!(f.stops_per_km, 2.0 / 0.03); // initial rest + final stop over 30 m
    }

    #[test]
    fn speed_std_matches_direct_formula() {
        let v = [0.0, 4.0, 8.0, 4.0, 0.0];
        let f = extract_features(&trip(&v)).unwrap();
        let m = v.iter().sum::<f64>() / v.len() as f64;
        let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64;
        assert!((f.speed_std - var.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn zero_distance_trip_errors() {
        assert!(extract_features(&trip(&[0.0, 0.0, 0.0])).is_err());
    }

    fn blob_features(seed: u64) -> (Vec<FeatureVector>, Vec<usize>) {
        // Four well-separated Gaussian-ish blobs in feature space.
        let centers = [
            [5.0, 8.0, 2.0, 0.3, 4.0, 0.8],
            [22.0, 31.0, 6.0, 0.01, 0.1, 0.4],
            [14.0, 20.0, 4.0, 0.05, 0.6, 0.5],
            [9.0, 13.0, 3.0, 0.15, 2.0, 1.2],
        ];
        let mut rng = seeded_rng(seed);
        let mut fs = Vec::new();
        let mut labels = Vec::new();
        for _ in 0..400 {
            let c = rng.random_range(0..4);
            let mut jitter = |scale: f64| (rng.random::<f64>() - 0.5) * scale;
            let base = centers[c];
            let draws = [
                jitter(1.0),
                jitter(1.5),
                jitter(0.4),
                jitter(0.02),
                jitter(0.3),
                jitter(0.1),
            ];
            fs.push(FeatureVector {
                avg_speed: base[0] + draws[0],
                max_speed: base[1] + draws[1],
                speed_std: base[2] + draws[2],
                idle_ratio: (base[3] + draws[3]).clamp(0.0, 1.0),
                stops_per_km: (base[4] + draws[4]).max(0.0),
                accel_noise: (base[5] + draws[5]).max(0.0),
            });
            labels.push(c);
        }
        (fs, labels)
    }

    fn adjusted_rand_index(a: &[usize], b: &[usize], ka: usize, kb: usize) -> f64 {
        let n = a.len();
        let mut table = vec![vec![0usize; kb]; ka];
        for i in 0..n {
            table[a[i]][b[i]] += 1;
        }
        let choose2 = |x: usize| (x * x.saturating_sub(1)) as f64 / 2.0;
        let mut sum_ij = 0.0;
        for row in &table {
            for &c in row {
                sum_ij += choose2(c);
            }
        }
        let sum_a: f64 = table.iter().map(|r| choose2(r.iter().sum())).sum();
        let sum_b: f64 = (0..kb)
            .map(|j| choose2(table.iter().map(|r| r[j]).sum()))
            .sum();
        let expected = sum_a * sum_b / choose2(n);
        let max_index = 0.5 * (sum_a + sum_b);
        (sum_ij - expected) / (max_index - expected)
    }

    #[test]
    fn kmeans_recovers_blobs() {
        let (fs, labels) = blob_features(42);
        let model = kmeans_fit(&fs, 4, 1).unwrap();
        let ari = adjusted_rand_index(&labels, &model.assignments, 4, 4);
        assert!(ari > 0.9, "ARI {ari}");
    }

    #[test]
    fn kmeans_objective_non_increasing() {
        let (fs, _) = blob_features(17);
        let model = kmeans_fit(&fs, 4, 9).unwrap();
        for w in model.wcss_history.windows(2) {
            assert!(w[1] <= w[0] + 1e-9, "wcss increased: {w:?}");
        }
    }

    #[test]
    fn kmeans_k1_centroid_is_mean() {
        let (fs, _) = blob_features(5);
        let model = kmeans_fit(&fs, 1, 0).unwrap();
        let c = model.centroids_feature_space()[0];
        for (i, name) in FEATURE_NAMES.iter().enumerate() {
            let m = mean(&fs.iter().map(|f| f.as_array()[i]).collect::<Vec<_>>());
            assert!((c[i] - m).abs() < 1e-9, "{name}: {} vs {m}", c[i]);
        }
    }

    #[test]
    fn kmeans_duplicates_zero_wcss() {
        let f = FeatureVector {
            avg_speed: 10.0,
            max_speed: 12.0,
            speed_std: 2.0,
            idle_ratio: 0.1,
            stops_per_km: 1.0,
            accel_noise: 0.5,
        };
        let mut g = f;
        g.avg_speed = 20.0;
        let fs = vec![f, f, g, g, f, g];
        let model = kmeans_fit(&fs, 2, 3).unwrap();
        assert!(model.wcss_history.last().unwrap() < &1e-18);
    }

    #[test]
    fn kmeans_deterministic() {
        let (fs, _) = blob_features(8);
        let a = kmeans_fit(&fs, 4, 77).unwrap();
        let b = kmeans_fit(&fs, 4, 77).unwrap();
        assert_eq!(a.assignments, b.assignments);
        assert_eq!(a.centroids, b.centroids);
    }

    fn fv(xs: [f64; 6]) -> FeatureVector {
        FeatureVector {
            avg_speed: xs[0],
            max_speed: xs[1],
            speed_std: xs[2],
            idle_ratio: xs[3],
            stops_per_km: xs[4],
            accel_noise: xs[5],
        }
    }

    #[test]
    fn pca_line_explains_everything() {
        // Points on a line in feature space: first component gets 100%.
        let fs: Vec<FeatureVector> = (0..40)
            .map(|i| {
                let t = i as f64 * 0.25;
                fv([t, 2.0 * t, 0.5 * t, 0.0, t, 3.0 * t])
            })
            .collect();
        // idle_ratio is constant zero -> dropped with a warning
        let pca = pca_project(&fs, 2).unwrap();
        assert_eq!(pca.warnings.len(), 1);
        assert!((pca.explained_variance_ratio[0] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn pca_isotropic_gaussian_flat_spectrum() {
        let mut rng = seeded_rng(12);
        use rand_distr::StandardNormal;
        let fs: Vec<FeatureVector> = (0..4000)
            .map(|_| {
                let mut xs = [0.0; 6];
                for x in &mut xs {
                    *x = rng.sample::<f64, _>(StandardNormal);
                }
                fv(xs)
            })
            .collect();
        let pca = pca_project(&fs, 6).unwrap();
        for r in &pca.explained_variance_ratio {
            assert!((r - 1.0 / 6.0).abs() < 0.05, "ratio {r}");
        }
    }

    #[test]
    fn pca_reconstruction_error_is_discarded_mass() {
        let (fs, _) = blob_features(23);
        let pca = pca_project(&fs, 2).unwrap();
        let d = pca.kept_features.len();
        // rebuild the z matrix exactly as pca_project does
        let n = fs.len();
        let raw: Vec<[f64; 6]> = fs.iter().map(|f| f.as_array()).collect();
        let mut zcols = Vec::new();
        for &j in &pca.kept_features {
            let col: Vec<f64> = raw.iter().map(|r| r[j]).collect();
            let m = mean(&col);
            let s = population_std(&col);
            zcols.push(col.iter().map(|x| (x - m) / s).collect::<Vec<_>>());
        }
        let mut err = 0.0;
        for i in 0..n {
            let z: Vec<f64> = (0..d).map(|j| zcols[j][i]).collect();
            let mut recon = vec![0.0; d];
            for comp in &pca.components {
                let c: f64 = comp.iter().zip(&z).map(|(a, b)| a * b).sum();
                for j in 0..d {
                    recon[j] += c * comp[j];
                }
            }
            err += z
                .iter()
                .zip(&recon)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>();
        }
        err /= n as f64 - 1.0;
        let discarded: f64 = pca.eigenvalues[2..].iter().sum();
        assert!((err - discarded).abs() < 1e-9, "{err} vs {discarded}");
    }

    #[test]
    fn pca_components_orthonormal() {
        let (fs, _) = blob_features(31);
        let pca = pca_project(&fs, 2).unwrap();
        for (i, a) in pca.components.iter().enumerate() {
            for (j, b) in pca.components.iter().enumerate() {
                let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((dot - expect).abs() < 1e-10);
            }
        }
    }

    fn dataset_of(n: usize) -> Dataset {
        Dataset::new((0..n).map(|_| trip(&[0.0, 5.0, 0.0])).collect())
    }

    fn model_with_assignments(assignments: Vec<usize>, k: usize) -> ClusterModel {
        ClusterModel {
            k,
            centroids: vec![[0.0; FEATURE_DIM]; k],
            feature_means: [0.0; FEATURE_DIM],
            feature_stds: [1.0; FEATURE_DIM],
            assignments,
            wcss_history: vec![],
        }
    }

    #[test]
    fn split_equal_clusters() {
        let assignments: Vec<usize> = (0..100).map(|i| i % 4).collect();
        let model = model_with_assignments(assignments, 4);
        let ds = dataset_of(100);
        let split = stratified_split(&ds, &model, 0.8, 4).unwrap();
        assert_eq!(split.train.len(), 80);
        for c in 0..4 {
            let in_train = split
                .train
                .iter()
                .filter(|&&i| model.assignments[i] == c)
                .count();
            assert_eq!(in_train, 20);
        }
    }

    #[test]
    fn split_sizes_match_published_protocol() {
        // 6,367 trips across clusters of 2224/1020/636/2487 -> 5094/1273.
        let mut assignments = Vec::new();
        for (c, &count) in [2224usize, 1020, 636, 2487].iter().enumerate() {
            assignments.extend(std::iter::repeat(c).take(count));
        }
        let model = model_with_assignments(assignments, 4);
        let ds = dataset_of(6367);
        let split = stratified_split(&ds, &model, 0.8, 1).unwrap();
        assert!((split.train.len() as i64 - 5094).abs() <= 1);
        assert!((split.test.len() as i64 - 1273).abs() <= 1);
        for (c, &count) in [2224usize, 1020, 636, 2487].iter().enumerate() {
            let in_train = split
                .train
                .iter()
                .filter(|&&i| model.assignments[i] == c)
                .count();
            assert!((in_train as f64 - 0.8 * count as f64).abs() <= 1.0);
        }
    }

    #[test]
    fn split_is_partition_and_deterministic() {
        let assignments: Vec<usize> = (0..103).map(|i| (i * 7) % 4).collect();
        let model = model_with_assignments(assignments, 4);
        let ds = dataset_of(103);
        let a = stratified_split(&ds, &model, 0.8, 9).unwrap();
        let b = stratified_split(&ds, &model, 0.8, 9).unwrap();
        assert_eq!(a, b);
        let mut all: Vec<usize> = a.train.iter().chain(a.test.iter()).cloned().collect();
        all.sort_unstable();
        assert_eq!(all, (0..103).collect::<Vec<_>>());
    }

    #[test]
    fn split_tiny_cluster_goes_to_train() {
        let mut assignments = vec![0; 50];
        assignments.push(1); // singleton cluster
        let model = model_with_assignments(assignments, 2);
        let ds = dataset_of(51);
        let split = stratified_split(&ds, &model, 0.8, 2).unwrap();
        assert!(!split.warnings.is_empty());
        assert!(split.train.contains(&50));
    }
}
