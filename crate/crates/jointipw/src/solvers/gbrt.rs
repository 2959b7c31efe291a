//! Seeded histogram gradient-boosted regression trees for squared error.
//!
//! This is the default machine-learning regressor behind the flexible
//! auxiliary score model. It is deliberately small: quantile binning (64 bins),
//! depth-limited greedy trees grown on histograms, shrinkage, and Bernoulli
//! row subsampling from a caller-provided seed so that every fit is
//! reproducible. Feature binning is exposed separately so repeated fits on the
//! same design (the outer loop of the augmented estimator) bin only once.

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A fitted regression model usable for conditional-mean prediction.
pub trait RegressorModel: Send + Sync {
    fn predict(&self, features: &Array2<f64>) -> Array1<f64>;
}

/// A regression learner. Implementations must be deterministic given
/// `(features, targets, seed)`.
pub trait RegressorTrainer: Send + Sync {
    fn fit(&self, features: &Array2<f64>, targets: &Array1<f64>, seed: u64) -> Box<dyn RegressorModel>;
}

#[derive(Debug, Clone)]
pub struct GbrtConfig {
    pub n_rounds: usize,
    pub max_depth: usize,
    pub learning_rate: f64,
    pub subsample: f64,
    pub max_bins: usize,
    pub min_samples_leaf: usize,
}

impl Default for GbrtConfig {
    fn default() -> Self {
        GbrtConfig {
            n_rounds: 200,
            max_depth: 3,
            learning_rate: 0.1,
            subsample: 0.8,
            max_bins: 64,
            min_samples_leaf: 20,
        }
    }
}

/// Pre-binned training design: per-feature cut points plus per-row bin codes.
pub struct BinnedFeatures {
    pub cuts: Vec<Vec<f64>>,
    /// column-major bin codes, `codes[feature][row]`
    codes: Vec<Vec<u16>>,
    n_rows: usize,
}

impl BinnedFeatures {
    pub fn new(features: &Array2<f64>, max_bins: usize) -> BinnedFeatures {
        let n = features.nrows();
        let p = features.ncols();
        let mut cuts = Vec::with_capacity(p);
        let mut codes = Vec::with_capacity(p);
        for j in 0..p {
            let mut vals: Vec<f64> = (0..n).map(|i| features[(i, j)]).collect();
            vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
            vals.dedup();
            let mut cj: Vec<f64> = Vec::new();
            if vals.len() > 1 {
                if vals.len() <= max_bins {
                    // cut between consecutive distinct values
                    for w in vals.windows(2) {
                        cj.push(0.5 * (w[0] + w[1]));
                    }
                } else {
                    // quantile cuts over the sorted distinct values
                    for b in 1..max_bins {
                        let idx = b * (vals.len() - 1) / max_bins;
                        let cut = 0.5 * (vals[idx] + vals[idx + 1]);
                        if cj.last().map_or(true, |&l| cut > l) {
                            cj.push(cut);
                        }
                    }
                }
            }
            let col: Vec<u16> = (0..n)
                .map(|i| {
                    let v = features[(i, j)];
                    cj.partition_point(|&c| v > c) as u16
                })
                .collect();
            cuts.push(cj);
            codes.push(col);
        }
        BinnedFeatures { cuts, codes, n_rows: n }
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_features(&self) -> usize {
        self.codes.len()
    }
}

#[derive(Debug, Clone)]
enum Node {
    Leaf { value: f64 },
    /// `cut` is the raw-value threshold (rows with value <= cut go left);
    /// `bin_cut` is the equivalent bin index used during training.
    Split { feature: usize, cut: f64, bin_cut: u16, left: usize, right: usize },
}

#[derive(Debug, Clone)]
struct Tree {
    nodes: Vec<Node>,
}

impl Tree {
    fn predict_row(&self, row: &[f64]) -> f64 {
        let mut idx = 0;
        loop {
            match &self.nodes[idx] {
                Node::Leaf { value } => return *value,
                Node::Split { feature, cut, left, right, .. } => {
                    idx = if row[*feature] <= *cut { *left } else { *right };
                }
            }
        }
    }
}

pub struct GbrtModel {
    base: f64,
    learning_rate: f64,
    trees: Vec<Tree>,
}

impl RegressorModel for GbrtModel {
    fn predict(&self, features: &Array2<f64>) -> Array1<f64> {
        let n = features.nrows();
        let mut out = Array1::from_elem(n, self.base);
        let mut row = vec![0.0; features.ncols()];
        for i in 0..n {
            for j in 0..features.ncols() {
                row[j] = features[(i, j)];
            }
            for t in &self.trees {
                out[i] += self.learning_rate * t.predict_row(&row);
            }
        }
        out
    }
}

#[derive(Debug, Clone, Default)]
pub struct GbrtTrainer {
    pub config: GbrtConfig,
}

struct NodeBuild {
    rows: Vec<u32>,
    depth: usize,
    node_index: usize,
}

impl GbrtTrainer {
    pub fn new(config: GbrtConfig) -> GbrtTrainer {
        GbrtTrainer { config }
    }

    /// Fits on a pre-binned design; `targets` must have `binned.n_rows()`
    /// entries.
    pub fn fit_binned(&self, binned: &BinnedFeatures, targets: &Array1<f64>, seed: u64) -> GbrtModel {
        let cfg = &self.config;
        let n = binned.n_rows();
        assert_eq!(targets.len(), n);
        let base = if n > 0 { targets.sum() / n as f64 } else { 0.0 };
        let mut pred = Array1::from_elem(n, base);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut trees = Vec::with_capacity(cfg.n_rounds);
        let p = binned.n_features();
        for _round in 0..cfg.n_rounds {
            // residuals on the subsample
            let rows: Vec<u32> = (0..n as u32)
                .filter(|_| cfg.subsample >= 1.0 || rng.gen::<f64>() < cfg.subsample)
                .collect();
            if rows.len() < 2 * cfg.min_samples_leaf {
                trees.push(Tree { nodes: vec![Node::Leaf { value: 0.0 }] });
                continue;
            }
            let resid: Vec<f64> = (0..n).map(|i| targets[i] - pred[i]).collect();
            let mut nodes: Vec<Node> = vec![Node::Leaf { value: 0.0 }];
            let mut stack = vec![NodeBuild { rows, depth: 0, node_index: 0 }];
            let mut leaf_rows: Vec<(usize, Vec<u32>)> = Vec::new();
            while let Some(job) = stack.pop() {
                let mut split = None;
                if job.depth < cfg.max_depth {
                    split = best_split(binned, &resid, &job.rows, cfg.min_samples_leaf, p);
                }
                match split {
                    None => leaf_rows.push((job.node_index, job.rows)),
                    Some((feat, bin_cut)) => {
                        let cut = binned.cuts[feat][bin_cut];
                        let codes = &binned.codes[feat];
                        let (lrows, rrows): (Vec<u32>, Vec<u32>) =
                            job.rows.iter().partition(|&&r| (codes[r as usize] as usize) <= bin_cut);
                        let left = nodes.len();
                        nodes.push(Node::Leaf { value: 0.0 });
                        let right = nodes.len();
                        nodes.push(Node::Leaf { value: 0.0 });
                        nodes[job.node_index] = Node::Split {
                            feature: feat,
                            cut,
                            bin_cut: bin_cut as u16,
                            left,
                            right,
                        };
                        stack.push(NodeBuild { rows: lrows, depth: job.depth + 1, node_index: left });
                        stack.push(NodeBuild { rows: rrows, depth: job.depth + 1, node_index: right });
                    }
                }
            }
            for (idx, rows) in &leaf_rows {
                let s: f64 = rows.iter().map(|&r| resid[r as usize]).sum();
                let value = s / rows.len() as f64;
                nodes[*idx] = Node::Leaf { value };
            }
            let tree = Tree { nodes };
            // Update predictions for every row (not just the subsample) by
            // traversing on the binned codes.
            for i in 0..n {
                let mut idx = 0usize;
                loop {
                    match &tree.nodes[idx] {
                        Node::Leaf { value } => {
                            pred[i] += cfg.learning_rate * value;
                            break;
                        }
                        Node::Split { feature, bin_cut, left, right, .. } => {
                            let code = binned.codes[*feature][i];
                            idx = if code <= *bin_cut { *left } else { *right };
                        }
                    }
                }
            }
            trees.push(tree);
        }
        GbrtModel { base, learning_rate: cfg.learning_rate, trees }
    }
}

impl RegressorTrainer for GbrtTrainer {
    fn fit(&self, features: &Array2<f64>, targets: &Array1<f64>, seed: u64) -> Box<dyn RegressorModel> {
        let binned = BinnedFeatures::new(features, self.config.max_bins);
        Box::new(self.fit_binned(&binned, targets, seed))
    }
}

/// Best split of `rows` by squared-error gain over all features and bins.
/// Returns `(feature, bin_index)` where rows with `code <= bin_index` go left.
fn best_split(
    binned: &BinnedFeatures,
    resid: &[f64],
    rows: &[u32],
    min_leaf: usize,
    p: usize,
) -> Option<(usize, usize)> {
    if rows.len() < 2 * min_leaf {
        return None;
    }
    let total_sum: f64 = rows.iter().map(|&r| resid[r as usize]).sum();
    let total_n = rows.len() as f64;
    let parent_score = total_sum * total_sum / total_n;
    let mut best: Option<(usize, usize)> = None;
    let mut best_gain = 1e-12;
    for j in 0..p {
        let n_bins = binned.cuts[j].len() + 1;
        if n_bins < 2 {
            continue;
        }
        let codes = &binned.codes[j];
        let mut sums = vec![0.0f64; n_bins];
        let mut counts = vec![0usize; n_bins];
        for &r in rows {
            let c = codes[r as usize] as usize;
            sums[c] += resid[r as usize];
            counts[c] += 1;
        }
        let mut lsum = 0.0;
        let mut lcount = 0usize;
        for b in 0..n_bins - 1 {
            lsum += sums[b];
            lcount += counts[b];
            let rcount = rows.len() - lcount;
            if lcount < min_leaf || rcount < min_leaf {
                continue;
            }
            let rsum = total_sum - lsum;
            let gain =
                lsum * lsum / lcount as f64 + rsum * rsum / rcount as f64 - parent_score;
            if gain > best_gain {
                best_gain = gain;
                best = Some((j, b));
            }
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn friedman_like(seed: u64, n: usize) -> (Array2<f64>, Array1<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = Array2::zeros((n, 3));
        let mut y = Array1::zeros(n);
        for i in 0..n {
            for j in 0..3 {
                x[(i, j)] = rng.gen::<f64>() * 2.0 - 1.0;
            }
            y[i] = (3.0 * x[(i, 0)]).sin() + x[(i, 1)] * x[(i, 2)] + 0.1 * rng.gen::<f64>();
        }
        (x, y)
    }

    fn mse(a: &Array1<f64>, b: &Array1<f64>) -> f64 {
        a.iter().zip(b.iter()).map(|(u, v)| (u - v) * (u - v)).sum::<f64>() / a.len() as f64
    }

    #[test]
    fn beats_constant_predictor() {
        let (x, y) = friedman_like(1, 2000);
        let trainer = GbrtTrainer::default();
        let model = trainer.fit(&x, &y, 42);
        let pred = model.predict(&x);
        let mean = y.sum() / y.len() as f64;
        let const_pred = Array1::from_elem(y.len(), mean);
        assert!(mse(&pred, &y) < 0.2 * mse(&const_pred, &y));
    }

    #[test]
    fn deterministic_given_seed() {
        let (x, y) = friedman_like(2, 800);
        let trainer = GbrtTrainer::default();
        let p1 = trainer.fit(&x, &y, 7).predict(&x);
        let p2 = trainer.fit(&x, &y, 7).predict(&x);
        for i in 0..p1.len() {
            assert_eq!(p1[i], p2[i]);
        }
    }

    #[test]
    fn binned_and_raw_prediction_agree_on_training_rows() {
        // Train via fit_binned and check raw-feature prediction reproduces the
        // training-time incremental predictions.
        let (x, y) = friedman_like(3, 600);
        let trainer = GbrtTrainer::default();
        let binned = BinnedFeatures::new(&x, trainer.config.max_bins);
        let model = trainer.fit_binned(&binned, &y, 11);
        let raw_pred = model.predict(&x);
        // Internal consistency: refitting with the same seed on raw features
        // via the trait must give identical predictions.
        let model2 = trainer.fit(&x, &y, 11);
        let pred2 = model2.predict(&x);
        for i in 0..raw_pred.len() {
            assert!((raw_pred[i] - pred2[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn approximates_smooth_conditional_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 4000;
        let mut x = Array2::zeros((n, 1));
        let mut y = Array1::zeros(n);
        for i in 0..n {
            let v = rng.gen::<f64>() * 4.0 - 2.0;
            x[(i, 0)] = v;
            y[i] = v * v + 0.05 * (rng.gen::<f64>() - 0.5);
        }
        let trainer = GbrtTrainer::default();
        let model = trainer.fit(&x, &y, 99);
        let mut test = Array2::zeros((3, 1));
        test[(0, 0)] = -1.0;
        test[(1, 0)] = 0.0;
        test[(2, 0)] = 1.5;
        let pred = model.predict(&test);
        assert!((pred[0] - 1.0).abs() < 0.15);
        assert!(pred[1].abs() < 0.15);
        assert!((pred[2] - 2.25).abs() < 0.2);
    }
}
