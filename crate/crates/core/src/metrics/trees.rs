//! Small bagged decision-tree ensembles (classification and regression),
//! deterministic given a seed. Used by the discriminative score and the
//! train-on-synthetic evaluation.

use rand::Rng;

use crate::rng::stream_rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    Classification,
    Regression,
}

#[derive(Debug, Clone, Copy)]
pub struct ForestConfig {
    pub n_trees: usize,
    pub max_depth: usize,
    pub min_leaf: usize,
    /// Consider `ceil(sqrt(d))` random features per split when true.
    pub feature_subsample: bool,
}

impl Default for ForestConfig {
    fn default() -> Self {
        ForestConfig {
            n_trees: 50,
            max_depth: 3,
            min_leaf: 24,
            feature_subsample: true,
        }
    }
}

#[derive(Debug, Clone)]
enum Node {
    Leaf(f64),
    Split {
        feature: usize,
        threshold: f64,
        left: Box<Node>,
        right: Box<Node>,
    },
}

impl Node {
    fn predict(&self, x: &[f64]) -> f64 {
        match self {
            Node::Leaf(v) => *v,
            Node::Split {
                feature,
                threshold,
                left,
                right,
            } => {
                if x[*feature] <= *threshold {
                    left.predict(x)
                } else {
                    right.predict(x)
                }
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct Forest {
    trees: Vec<Node>,
    task: Task,
}

impl Forest {
    /// Mean leaf value over the ensemble: class-1 probability for
    /// classification, value estimate for regression.
    pub fn predict_value(&self, x: &[f64]) -> f64 {
        let sum: f64 = self.trees.iter().map(|t| t.predict(x)).sum();
        sum / self.trees.len() as f64
    }

    pub fn predict_class(&self, x: &[f64]) -> bool {
        debug_assert_eq!(self.task, Task::Classification);
        self.predict_value(x) >= 0.5
    }
}

/// Impurity of a label set under the task: Gini for classification,
/// variance for regression. Both are computed from sums for O(1) updates.
fn impurity(task: Task, sum: f64, sum_sq: f64, n: f64) -> f64 {
    if n <= 0.0 {
        return 0.0;
    }
    match task {
        Task::Classification => {
            let p = sum / n;
            2.0 * p * (1.0 - p)
        }
        Task::Regression => (sum_sq / n) - (sum / n) * (sum / n),
    }
}

fn build_tree(
    xs: &[Vec<f64>],
    ys: &[f64],
    idx: &mut [usize],
    depth: usize,
    cfg: &ForestConfig,
    task: Task,
    rng: &mut impl Rng,
) -> Node {
    let n = idx.len() as f64;
    let sum: f64 = idx.iter().map(|&i| ys[i]).sum();
    let sum_sq: f64 = idx.iter().map(|&i| ys[i] * ys[i]).sum();
    let node_imp = impurity(task, sum, sum_sq, n);
    let mean = sum / n;
    if depth == 0 || idx.len() < 2 * cfg.min_leaf || node_imp <= 1e-12 {
        return Node::Leaf(mean);
    }

    let d = xs[0].len();
    let n_feats = if cfg.feature_subsample {
        (d as f64).sqrt().ceil() as usize
    } else {
        d
    };
    let mut feats: Vec<usize> = (0..d).collect();
    for i in (1..feats.len()).rev() {
        let j = rng.random_range(0..=i);
        feats.swap(i, j);
    }
    feats.truncate(n_feats.max(1));

    let mut best: Option<(f64, usize, f64)> = None; // (weighted impurity, feature, threshold)
    for &f in &feats {
        let mut order: Vec<usize> = idx.to_vec();
        order.sort_by(|&a, &b| xs[a][f].total_cmp(&xs[b][f]));
        let mut left_sum = 0.0;
        let mut left_sq = 0.0;
        for k in 0..order.len() - 1 {
            let i = order[k];
            left_sum += ys[i];
            left_sq += ys[i] * ys[i];
            let (xa, xb) = (xs[order[k]][f], xs[order[k + 1]][f]);
            if xa == xb {
                continue;
            }
            let nl = (k + 1) as f64;
            let nr = n - nl;
            if (nl as usize) < cfg.min_leaf || (nr as usize) < cfg.min_leaf {
                continue;
            }
            let imp = nl / n * impurity(task, left_sum, left_sq, nl)
                + nr / n * impurity(task, sum - left_sum, sum_sq - left_sq, nr);
            if best.map(|b| imp < b.0).unwrap_or(true) {
                best = Some((imp, f, 0.5 * (xa + xb)));
            }
        }
    }
    let Some((best_imp, feature, threshold)) = best else {
        return Node::Leaf(mean);
    };
    if best_imp >= node_imp - 1e-12 {
        return Node::Leaf(mean);
    }
    let (mut left_idx, mut right_idx): (Vec<usize>, Vec<usize>) = idx
        .iter()
        .partition(|&&i| xs[i][feature] <= threshold);
    let left = build_tree(xs, ys, &mut left_idx, depth - 1, cfg, task, rng);
    let right = build_tree(xs, ys, &mut right_idx, depth - 1, cfg, task, rng);
    Node::Split {
        feature,
        threshold,
        left: Box::new(left),
        right: Box::new(right),
    }
}

/// Fits a bagged ensemble: each tree trains on a bootstrap resample with
/// its own RNG stream (`stream = tree index`), deterministic given `seed`.
pub fn fit_forest(
    xs: &[Vec<f64>],
    ys: &[f64],
    task: Task,
    cfg: &ForestConfig,
    seed: u64,
) -> Forest {
    assert_eq!(xs.len(), ys.len());
    assert!(!xs.is_empty());
    let n = xs.len();
    let mut trees = Vec::with_capacity(cfg.n_trees);
    for t in 0..cfg.n_trees {
        let mut rng = stream_rng(seed, t as u64);
        let mut idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
        trees.push(build_tree(
            xs,
            ys,
            &mut idx,
            cfg.max_depth,
            cfg,
            task,
            &mut rng,
        ));
    }
    Forest { trees, task }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded_rng;

    #[test]
    fn separable_classes_are_learned() {
        let mut rng = seeded_rng(1);
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for i in 0..200 {
            let label = i % 2;
            let base = if label == 0 { 0.0 } else { 5.0 };
            xs.push(vec![
                base + rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            ]);
            ys.push(label as f64);
        }
        let forest = fit_forest(&xs, &ys, Task::Classification, &ForestConfig::default(), 3);
        let correct = xs
            .iter()
            .zip(&ys)
            .filter(|(x, &y)| forest.predict_class(x) == (y > 0.5))
            .count();
        assert!(correct as f64 / xs.len() as f64 > 0.95);
    }

    #[test]
    fn regression_fits_step_function() {
        let xs: Vec<Vec<f64>> = (0..100).map(|i| vec![i as f64]).collect();
        let ys: Vec<f64> = (0..100).map(|i| if i < 50 { 1.0 } else { 9.0 }).collect();
        let forest = fit_forest(&xs, &ys, Task::Regression, &ForestConfig::default(), 5);
        let lo = forest.predict_value(&[20.0]);
        let hi = forest.predict_value(&[80.0]);
        assert!((lo - 1.0).abs() < 0.5, "lo {lo}");
        assert!((hi - 9.0).abs() < 0.5, "hi {hi}");
    }

    #[test]
    fn deterministic_given_seed() {
        let mut rng = seeded_rng(2);
        let xs: Vec<Vec<f64>> = (0..60)
            .map(|_| vec![rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)])
            .collect();
        let ys: Vec<f64> = xs.iter().map(|x| x[0] + 0.3 * x[1]).collect();
        let a = fit_forest(&xs, &ys, Task::Regression, &ForestConfig::default(), 7);
        let b = fit_forest(&xs, &ys, Task::Regression, &ForestConfig::default(), 7);
        for probe in &xs {
            assert_eq!(a.predict_value(probe), b.predict_value(probe));
        }
    }
}
