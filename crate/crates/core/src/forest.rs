//! Random forest classifier over tag-count vectors and the repeated
//! stratified hold-out evaluation protocol.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::ForestError;
use crate::featurize::{Gender, LabeledSample, Level};

pub const MODEL_FORMAT: &str = "mmtrust-forest";
pub const MODEL_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Target {
    Level,
    Gender,
}

impl Target {
    pub fn labels(self) -> Vec<String> {
        match self {
            Target::Level => Level::ALL.iter().map(|l| l.to_string()).collect(),
            Target::Gender => Gender::ALL.iter().map(|g| g.to_string()).collect(),
        }
    }

    /// Class index of a sample under this target.
    pub fn class_of(self, s: &LabeledSample) -> Option<usize> {
        match self {
            Target::Level => s.level.map(|l| l as usize),
            Target::Gender => s.gender.map(|g| g as usize),
        }
    }
}

impl std::str::FromStr for Target {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "level" => Ok(Target::Level),
            "gender" => Ok(Target::Gender),
            _ => Err(format!("unknown target `{s}` (expected level or gender)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestConfig {
    pub n_trees: usize,
    /// Features tried per node; `None` means round(sqrt(d)).
    pub max_features: Option<usize>,
    pub bootstrap: bool,
    pub min_samples_leaf: u32,
    pub min_samples_split: u32,
    pub max_depth: Option<usize>,
    pub seed: u64,
}

impl Default for ForestConfig {
    fn default() -> Self {
        ForestConfig {
            n_trees: 100,
            max_features: None,
            bootstrap: true,
            min_samples_leaf: 1,
            min_samples_split: 2,
            max_depth: None,
            seed: 0,
        }
    }
}

impl ForestConfig {
    pub fn features_per_split(&self, n_features: usize) -> usize {
        self.max_features
            .unwrap_or_else(|| (n_features as f64).sqrt().round() as usize)
            .clamp(1, n_features.max(1))
    }
}

/// Gini impurity `1 - sum(p_i^2)` of a class histogram.
pub fn gini(counts: &[f64]) -> f64 {
    let n: f64 = counts.iter().sum();
    if n <= 0.0 {
        return 0.0;
    }
    1.0 - counts.iter().map(|c| (c / n) * (c / n)).sum::<f64>()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Node {
    /// Go left iff `x[feature] <= threshold`.
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
        /// Training weight reaching this node.
        cover: f64,
    },
    Leaf { counts: Vec<f64> },
}

/// A decision tree stored as a node arena rooted at index 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<Node>,
}

impl Tree {
    pub fn leaf(counts: Vec<f64>) -> Self {
        Tree {
            nodes: vec![Node::Leaf { counts }],
        }
    }

    pub fn leaf_index(&self, x: &[u32]) -> usize {
        let mut i = 0;
        loop {
            match &self.nodes[i] {
                Node::Leaf { .. } => return i,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                    ..
                } => {
                    i = if (x[*feature] as f64) <= *threshold {
                        *left
                    } else {
                        *right
                    }
                }
            }
        }
    }

    pub fn cover(&self, node: usize) -> f64 {
        match &self.nodes[node] {
            Node::Split { cover, .. } => *cover,
            Node::Leaf { counts } => counts.iter().sum(),
        }
    }

    /// Voted class at a leaf; ties go to the lowest class index.
    pub fn leaf_vote(&self, node: usize) -> usize {
        match &self.nodes[node] {
            Node::Leaf { counts } => argmax(counts),
            Node::Split { .. } => panic!("node {node} is not a leaf"),
        }
    }

    pub fn vote(&self, x: &[u32]) -> usize {
        self.leaf_vote(self.leaf_index(x))
    }

    pub fn depth(&self) -> usize {
        fn rec(t: &Tree, i: usize) -> usize {
            match &t.nodes[i] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => 1 + rec(t, *left).max(rec(t, *right)),
            }
        }
        rec(self, 0)
    }

    pub fn features(&self) -> impl Iterator<Item = usize> + '_ {
        self.nodes.iter().filter_map(|n| match n {
            Node::Split { feature, .. } => Some(*feature),
            Node::Leaf { .. } => None,
        })
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &c) in v.iter().enumerate() {
        if c > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Forest {
    pub labels: Vec<String>,
    pub target: Option<Target>,
    pub n_features: usize,
    /// Fingerprint of the feature vocabulary the model was trained on.
    pub vocabulary: String,
    pub config: ForestConfig,
    pub trees: Vec<Tree>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub label: usize,
    /// Share of trees voting for each class.
    pub fractions: Vec<f64>,
}

impl Forest {
    /// Assembles a forest from prebuilt trees.
    pub fn from_trees(labels: Vec<String>, n_features: usize, trees: Vec<Tree>) -> Self {
        Forest {
            labels,
            target: None,
            n_features,
            vocabulary: String::new(),
            config: ForestConfig {
                n_trees: trees.len(),
                ..Default::default()
            },
            trees,
        }
    }

    pub fn n_classes(&self) -> usize {
        self.labels.len()
    }

    pub fn vote_fractions(&self, x: &[u32]) -> Vec<f64> {
        let mut votes = vec![0.0; self.n_classes()];
        for t in &self.trees {
            votes[t.vote(x)] += 1.0;
        }
        let n = self.trees.len() as f64;
        votes.iter_mut().for_each(|v| *v /= n);
        votes
    }

    pub fn predict(&self, x: &[u32]) -> Prediction {
        let fractions = self.vote_fractions(x);
        Prediction {
            label: argmax(&fractions),
            fractions,
        }
    }

    pub fn predict_batch(&self, xs: &[&[u32]]) -> Vec<Prediction> {
        xs.par_iter().map(|x| self.predict(x)).collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&ModelFile {
            format: MODEL_FORMAT.into(),
            version: MODEL_VERSION,
            forest: self.clone(),
        })
        .expect("forest serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, ForestError> {
        let file: ModelFile =
            serde_json::from_str(text).map_err(|e| ForestError::Model(e.to_string()))?;
        if file.format != MODEL_FORMAT || file.version != MODEL_VERSION {
            return Err(ForestError::Model(format!(
                "unsupported model {} v{}",
                file.format, file.version
            )));
        }
        Ok(file.forest)
    }

    pub fn save(&self, path: &Path) -> Result<(), ForestError> {
        std::fs::write(path, self.to_json()).map_err(|source| ForestError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, ForestError> {
        let text = std::fs::read_to_string(path).map_err(|source| ForestError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json(&text)
    }
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    format: String,
    version: u32,
    forest: Forest,
}

/// Training matrix: one count vector per row plus class indices.
pub struct TrainingSet<'a> {
    pub x: Vec<&'a [u32]>,
    pub y: Vec<usize>,
    pub n_classes: usize,
}

impl<'a> TrainingSet<'a> {
    pub fn from_samples(
        samples: &[&'a LabeledSample],
        target: Target,
    ) -> Result<Self, ForestError> {
        let mut x = Vec::with_capacity(samples.len());
        let mut y = Vec::with_capacity(samples.len());
        for s in samples {
            let c = target
                .class_of(s)
                .ok_or_else(|| ForestError::MissingLabel(s.turn_id.clone()))?;
            x.push(s.features.counts());
            y.push(c);
        }
        Ok(TrainingSet {
            x,
            y,
            n_classes: target.labels().len(),
        })
    }
}

/// Trains a forest on labeled samples.
pub fn fit(
    samples: &[&LabeledSample],
    target: Target,
    config: &ForestConfig,
    vocabulary: &str,
) -> Result<Forest, ForestError> {
    let data = TrainingSet::from_samples(samples, target)?;
    let mut forest = fit_matrix(&data, target.labels(), config)?;
    forest.target = Some(target);
    forest.vocabulary = vocabulary.to_string();
    Ok(forest)
}

pub fn fit_matrix(
    data: &TrainingSet<'_>,
    labels: Vec<String>,
    config: &ForestConfig,
) -> Result<Forest, ForestError> {
    let n = data.x.len();
    if n == 0 {
        return Err(ForestError::Empty);
    }
    let d = data.x[0].len();
    if let Some(bad) = data.x.iter().find(|r| r.len() != d) {
        return Err(ForestError::Dimension {
            expected: d,
            found: bad.len(),
        });
    }
    let mut present = vec![false; data.n_classes];
    for &c in &data.y {
        present[c] = true;
    }
    if present.iter().filter(|&&p| p).count() < 2 {
        return Err(ForestError::SingleClass(labels[data.y[0]].clone()));
    }

    let columns: Vec<Vec<u32>> = (0..d).map(|f| data.x.iter().map(|r| r[f]).collect()).collect();
    let varying: Vec<usize> = (0..d)
        .filter(|&f| columns[f].iter().any(|&v| v != columns[f][0]))
        .collect();
    let mut rank = vec![usize::MAX; d];
    for (r, &f) in varying.iter().enumerate() {
        rank[f] = r;
    }
    let trees = (0..config.n_trees)
        .into_par_iter()
        .map(|t| {
            let tree_seed = splitmix(config.seed ^ splitmix(t as u64 + 1));
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            rng.set_stream(t as u64);
            let mut weights = vec![0u32; n];
            if config.bootstrap {
                for _ in 0..n {
                    weights[rng.random_range(0..n)] += 1;
                }
            } else {
                weights.iter_mut().for_each(|w| *w = 1);
            }
            TreeBuilder {
                data,
                columns: &columns,
                varying: &varying,
                rank: &rank,
                weights: &weights,
                config,
                mtry: config.features_per_split(d),
                seed: tree_seed,
                nodes: Vec::new(),
                node_counter: 0,
            }
            .build()
        })
        .collect();

    Ok(Forest {
        labels,
        target: None,
        n_features: d,
        vocabulary: String::new(),
        config: config.clone(),
        trees,
    })
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

struct TreeBuilder<'a> {
    data: &'a TrainingSet<'a>,
    columns: &'a [Vec<u32>],
    /// Features not constant over the whole training set.
    varying: &'a [usize],
    /// Position of each feature in `varying`; keys the per-node order.
    rank: &'a [usize],
    weights: &'a [u32],
    config: &'a ForestConfig,
    mtry: usize,
    seed: u64,
    nodes: Vec<Node>,
    node_counter: u64,
}

struct BestSplit {
    feature: usize,
    threshold: f64,
    score: f64,
}

impl TreeBuilder<'_> {
    fn build(mut self) -> Tree {
        let idx: Vec<usize> = (0..self.data.x.len()).filter(|&i| self.weights[i] > 0).collect();
        self.grow(idx, self.varying, 0);
        Tree { nodes: self.nodes }
    }

    fn histogram(&self, idx: &[usize]) -> Vec<f64> {
        let mut counts = vec![0.0; self.data.n_classes];
        for &i in idx {
            counts[self.data.y[i]] += self.weights[i] as f64;
        }
        counts
    }

    fn grow(&mut self, idx: Vec<usize>, candidates: &[usize], depth: usize) -> usize {
        let counts = self.histogram(&idx);
        let total: f64 = counts.iter().sum();
        let slot = self.nodes.len();
        self.nodes.push(Node::Leaf {
            counts: counts.clone(),
        });
        let node_key = self.node_counter;
        self.node_counter += 1;

        let pure = counts.iter().filter(|&&c| c > 0.0).count() <= 1;
        let depth_capped = self.config.max_depth.is_some_and(|m| depth >= m);
        if pure || depth_capped || total < self.config.min_samples_split as f64 {
            return slot;
        }
        let mut constant = Vec::new();
        let best = self.best_split(&idx, candidates, node_key, &mut constant);
        let Some(best) = best else {
            return slot;
        };
        let candidates: Vec<usize> = candidates
            .iter()
            .copied()
            .filter(|f| !constant.contains(f))
            .collect();
        let (left_idx, right_idx): (Vec<usize>, Vec<usize>) = idx
            .iter()
            .partition(|&&i| (self.columns[best.feature][i] as f64) <= best.threshold);
        let left = self.grow(left_idx, &candidates, depth + 1);
        let right = self.grow(right_idx, &candidates, depth + 1);
        self.nodes[slot] = Node::Split {
            feature: best.feature,
            threshold: best.threshold,
            left,
            right,
            cover: total,
        };
        slot
    }

    /// Features are visited in an order keyed by a hash of (tree, node,
    /// rank among varying features); constant features are skipped and do
    /// not count toward `mtry`.
    /// Features found constant here are appended to `constant`.
    fn best_split(
        &self,
        idx: &[usize],
        candidates: &[usize],
        node_key: u64,
        constant: &mut Vec<usize>,
    ) -> Option<BestSplit> {
        let node_seed = splitmix(self.seed ^ splitmix(node_key.wrapping_add(0x5bd1_e995)));
        let mut order: Vec<(u64, usize)> = candidates
            .iter()
            .map(|&f| (splitmix(node_seed ^ (self.rank[f] as u64).wrapping_mul(0x9e37_79b9)), f))
            .collect();
        order.sort_unstable();

        let k = self.data.n_classes;
        let mut best: Option<BestSplit> = None;
        let mut tried = 0;
        let mut hist: Vec<f64> = Vec::new();
        for (_, f) in order {
            if tried == self.mtry {
                break;
            }
            let col = &self.columns[f];
            let (mut lo, mut hi) = (u32::MAX, 0);
            for &i in idx {
                let v = col[i];
                lo = lo.min(v);
                hi = hi.max(v);
            }
            if lo == hi {
                constant.push(f);
                continue;
            }
            tried += 1;
            // Per-value class histogram; counts span a small integer range.
            let span = (hi - lo) as usize + 1;
            hist.clear();
            hist.resize(span * k, 0.0);
            for &i in idx {
                let v = (col[i] - lo) as usize;
                hist[v * k + self.data.y[i]] += self.weights[i] as f64;
            }
            if let Some(s) = self.scan_feature(f, lo, &hist) {
                if best.as_ref().is_none_or(|b| s.score < b.score) {
                    best = Some(s);
                }
            }
        }
        best
    }

    fn scan_feature(&self, feature: usize, lo: u32, hist: &[f64]) -> Option<BestSplit> {
        let k = self.data.n_classes;
        let mut right = vec![0.0; k];
        for (j, w) in hist.iter().enumerate() {
            right[j % k] += w;
        }
        let total: f64 = right.iter().sum();
        let mut left = vec![0.0; k];
        let mut n_left = 0.0;
        let min_leaf = self.config.min_samples_leaf as f64;
        let mut best: Option<BestSplit> = None;
        let mut prev: Option<usize> = None;
        for (v, row) in hist.chunks(k).enumerate() {
            let mass: f64 = row.iter().sum();
            if mass == 0.0 {
                continue;
            }
            if let Some(p) = prev {
                let n_right = total - n_left;
                if n_left >= min_leaf && n_right >= min_leaf {
                    let score = n_left * gini(&left) + n_right * gini(&right);
                    if best.as_ref().is_none_or(|b| score < b.score) {
                        best = Some(BestSplit {
                            feature,
                            threshold: (2 * lo as usize + p + v) as f64 / 2.0,
                            score,
                        });
                    }
                }
            }
            for (c, w) in row.iter().enumerate() {
                left[c] += w;
                right[c] -= w;
            }
            n_left += mass;
            prev = Some(v);
        }
        best
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub labels: Vec<String>,
    pub seeds: Vec<u64>,
    pub accuracies: Vec<f64>,
    pub mean: f64,
    pub std_dev: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub ci_method: String,
    /// Rows are true classes, columns predictions, summed over seeds.
    pub confusion: Vec<Vec<u64>>,
    pub n_train: usize,
    pub n_test: usize,
}

impl EvalReport {
    /// One-line summary, e.g. `mean accuracy 94.49% [95% CI: 94.10%, 94.87%]`.
    pub fn headline(&self) -> String {
        format!(
            "mean accuracy {:.2}% [95% CI: {:.2}%, {:.2}%]",
            self.mean * 100.0,
            self.ci_low * 100.0,
            self.ci_high * 100.0
        )
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{}", self.headline());
        let _ = writeln!(
            out,
            "seeds: {}  train/test: {}/{}  interval: {}",
            self.accuracies.len(),
            self.n_train,
            self.n_test,
            self.ci_method
        );
        for (s, a) in self.seeds.iter().zip(&self.accuracies) {
            let _ = writeln!(out, "  seed {s:>4}  accuracy {:.2}%", a * 100.0);
        }
        let width = self.labels.iter().map(|l| l.len()).max().unwrap_or(4).max(6);
        let _ = write!(out, "confusion (rows true, columns predicted)\n{:>width$}", "");
        for l in &self.labels {
            let _ = write!(out, " {l:>width$}");
        }
        out.push('\n');
        for (l, row) in self.labels.iter().zip(&self.confusion) {
            let _ = write!(out, "{l:>width$}");
            for c in row {
                let _ = write!(out, " {c:>width$}");
            }
            out.push('\n');
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Stratified split: `round(test_fraction * n_c)` of each class, at least
/// one per side, goes to the test set.
pub fn stratified_split(
    y: &[usize],
    n_classes: usize,
    test_fraction: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<usize>, Vec<usize>), ForestError> {
    let mut train = Vec::new();
    let mut test = Vec::new();
    for c in 0..n_classes {
        let mut members: Vec<usize> = (0..y.len()).filter(|&i| y[i] == c).collect();
        if members.is_empty() {
            continue;
        }
        if members.len() < 2 {
            return Err(ForestError::Stratify(format!(
                "class {c} has {} sample(s); need at least 2",
                members.len()
            )));
        }
        members.shuffle(rng);
        let k = ((members.len() as f64 * test_fraction).round() as usize).clamp(1, members.len() - 1);
        test.extend_from_slice(&members[..k]);
        train.extend_from_slice(&members[k..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

/// The 80/20 stratified split used for seed `seed` of the protocol.
pub fn holdout(y: &[usize], n_classes: usize, seed: u64) -> Result<(Vec<usize>, Vec<usize>), ForestError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::MAX);
    stratified_split(y, n_classes, 0.2, &mut rng)
}

pub const CI_Z: f64 = 1.96;

/// Repeated 80/20 stratified hold-out: one split and one forest per seed.
pub fn evaluate_protocol(
    samples: &[&LabeledSample],
    target: Target,
    config: &ForestConfig,
    seeds: usize,
) -> Result<EvalReport, ForestError> {
    if samples.is_empty() {
        return Err(ForestError::Empty);
    }
    let data = TrainingSet::from_samples(samples, target)?;
    let labels = target.labels();
    let k = labels.len();
    let mut confusion = vec![vec![0u64; k]; k];
    let mut accuracies = Vec::with_capacity(seeds);
    let mut seed_list = Vec::with_capacity(seeds);
    let (mut n_train, mut n_test) = (0, 0);

    for s in 0..seeds as u64 {
        let seed = config.seed.wrapping_add(s);
        seed_list.push(seed);
        let (train, test) = holdout(&data.y, k, seed)?;
        let sub = TrainingSet {
            x: train.iter().map(|&i| data.x[i]).collect(),
            y: train.iter().map(|&i| data.y[i]).collect(),
            n_classes: k,
        };
        let forest = fit_matrix(
            &sub,
            labels.clone(),
            &ForestConfig {
                seed,
                ..config.clone()
            },
        )?;
        let xs: Vec<&[u32]> = test.iter().map(|&i| data.x[i]).collect();
        let preds = forest.predict_batch(&xs);
        let mut correct = 0;
        for (&i, p) in test.iter().zip(&preds) {
            confusion[data.y[i]][p.label] += 1;
            if p.label == data.y[i] {
                correct += 1;
            }
        }
        accuracies.push(correct as f64 / test.len() as f64);
        n_train = train.len();
        n_test = test.len();
    }

    let m = accuracies.len() as f64;
    let mean = accuracies.iter().sum::<f64>() / m;
    let std_dev = if accuracies.len() > 1 {
        (accuracies.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (m - 1.0)).sqrt()
    } else {
        0.0
    };
    let half = CI_Z * std_dev / m.sqrt();
    Ok(EvalReport {
        labels,
        seeds: seed_list,
        accuracies,
        mean,
        std_dev,
        ci_low: mean - half,
        ci_high: mean + half,
        ci_method: format!("mean +/- {CI_Z} * sd / sqrt({seeds}) over seed accuracies"),
        confusion,
        n_train,
        n_test,
    })
}
