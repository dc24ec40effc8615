//! Shapley attributions for forest vote fractions: exact TreeSHAP, a
//! brute-force coalition oracle, and per-class summaries.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::ExplainError;
use crate::forest::{Forest, Node, Tree};

/// Limit on active features for coalition enumeration.
pub const BRUTE_FORCE_MAX_FEATURES: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum ShapMethod {
    /// Absent features follow each split in proportion to background cover.
    #[default]
    PathDependent,
    /// Absent features take their values from each background row in turn.
    Interventional,
}

impl std::str::FromStr for ShapMethod {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "path" | "path-dependent" => Ok(ShapMethod::PathDependent),
            "interventional" => Ok(ShapMethod::Interventional),
            _ => Err(format!("unknown SHAP method `{s}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapAttribution {
    pub sample_id: String,
    /// Mean vote fractions over the background, per class.
    pub base: Vec<f64>,
    /// `phi[class][feature]`.
    pub phi: Vec<Vec<f64>>,
}

impl ShapAttribution {
    fn zeros(sample_id: &str, base: Vec<f64>, n_features: usize) -> Self {
        ShapAttribution {
            sample_id: sample_id.to_string(),
            phi: vec![vec![0.0; n_features]; base.len()],
            base,
        }
    }

    /// `base + sum(phi)` per class; equals the explained vote fractions.
    pub fn reconstruct(&self) -> Vec<f64> {
        self.base
            .iter()
            .zip(&self.phi)
            .map(|(b, row)| b + row.iter().sum::<f64>())
            .collect()
    }
}

/// Split fractions per node: share of mass sent left and right.
type Fractions = Vec<(f64, f64)>;

pub struct Explainer<'a> {
    forest: &'a Forest,
    method: ShapMethod,
    background: Vec<Vec<u32>>,
    fractions: Vec<Fractions>,
    base: Vec<f64>,
}

impl<'a> Explainer<'a> {
    pub fn new(
        forest: &'a Forest,
        background: &[&[u32]],
        method: ShapMethod,
    ) -> Result<Self, ExplainError> {
        if background.is_empty() {
            return Err(ExplainError::EmptyBackground);
        }
        for row in background {
            check_dim(forest, row)?;
        }
        let fractions = forest
            .trees
            .iter()
            .map(|t| background_fractions(t, background))
            .collect();
        let mut base = vec![0.0; forest.n_classes()];
        for row in background {
            for (b, v) in base.iter_mut().zip(forest.vote_fractions(row)) {
                *b += v;
            }
        }
        let n = background.len() as f64;
        base.iter_mut().for_each(|b| *b /= n);
        Ok(Explainer {
            forest,
            method,
            background: background.iter().map(|r| r.to_vec()).collect(),
            fractions,
            base,
        })
    }

    pub fn base(&self) -> &[f64] {
        &self.base
    }

    pub fn method(&self) -> ShapMethod {
        self.method
    }

    pub fn explain(&self, sample_id: &str, x: &[u32]) -> Result<ShapAttribution, ExplainError> {
        check_dim(self.forest, x)?;
        let mut out = ShapAttribution::zeros(sample_id, self.base.clone(), self.forest.n_features);
        for (tree, fr) in self.forest.trees.iter().zip(&self.fractions) {
            match self.method {
                ShapMethod::PathDependent => path_tree_shap(tree, fr, x, &mut out.phi),
                ShapMethod::Interventional => {
                    let scale = 1.0 / self.background.len() as f64;
                    for r in &self.background {
                        interventional_tree_shap(tree, x, r, scale, &mut out.phi);
                    }
                }
            }
        }
        let n = self.forest.trees.len() as f64;
        for row in &mut out.phi {
            row.iter_mut().for_each(|p| *p /= n);
        }
        Ok(out)
    }

    pub fn explain_batch(
        &self,
        samples: &[(&str, &[u32])],
    ) -> Result<Vec<ShapAttribution>, ExplainError> {
        samples
            .par_iter()
            .map(|(id, x)| self.explain(id, x))
            .collect()
    }
}

fn check_dim(forest: &Forest, x: &[u32]) -> Result<(), ExplainError> {
    if x.len() != forest.n_features {
        return Err(ExplainError::Dimension {
            expected: forest.n_features,
            found: x.len(),
        });
    }
    Ok(())
}

/// Path-dependent TreeSHAP with the default method.
pub fn tree_shap(
    forest: &Forest,
    sample_id: &str,
    x: &[u32],
    background: &[&[u32]],
) -> Result<ShapAttribution, ExplainError> {
    Explainer::new(forest, background, ShapMethod::PathDependent)?.explain(sample_id, x)
}

/// Node fractions from background covers. Nodes no background row reaches
/// fall back to training covers.
fn background_fractions(tree: &Tree, background: &[&[u32]]) -> Fractions {
    let mut cover = vec![0.0; tree.nodes.len()];
    for row in background {
        let mut i = 0;
        loop {
            cover[i] += 1.0;
            match &tree.nodes[i] {
                Node::Leaf { .. } => break,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                    ..
                } => {
                    i = if (row[*feature] as f64) <= *threshold {
                        *left
                    } else {
                        *right
                    }
                }
            }
        }
    }
    tree.nodes
        .iter()
        .enumerate()
        .map(|(i, n)| match n {
            Node::Leaf { .. } => (0.0, 0.0),
            Node::Split { left, right, .. } => {
                if cover[i] > 0.0 {
                    (cover[*left] / cover[i], cover[*right] / cover[i])
                } else {
                    let total = tree.cover(i);
                    (tree.cover(*left) / total, tree.cover(*right) / total)
                }
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy)]
struct PathElement {
    feature: Option<usize>,
    zero: f64,
    one: f64,
    weight: f64,
}

fn extend_path(path: &mut Vec<PathElement>, zero: f64, one: f64, feature: Option<usize>) {
    let depth = path.len();
    path.push(PathElement {
        feature,
        zero,
        one,
        weight: if depth == 0 { 1.0 } else { 0.0 },
    });
    let d = depth as f64;
    for i in (0..depth).rev() {
        let w = path[i].weight;
        path[i + 1].weight += one * w * (i as f64 + 1.0) / (d + 1.0);
        path[i].weight = zero * w * (d - i as f64) / (d + 1.0);
    }
}

fn unwind_path(path: &mut Vec<PathElement>, index: usize) {
    let depth = path.len() - 1;
    let d = depth as f64;
    let PathElement { zero, one, .. } = path[index];
    let mut next = path[depth].weight;
    for i in (0..depth).rev() {
        if one != 0.0 {
            let tmp = path[i].weight;
            path[i].weight = next * (d + 1.0) / ((i as f64 + 1.0) * one);
            next = tmp - path[i].weight * zero * (d - i as f64) / (d + 1.0);
        } else {
            path[i].weight = path[i].weight * (d + 1.0) / (zero * (d - i as f64));
        }
    }
    for i in index..depth {
        path[i].feature = path[i + 1].feature;
        path[i].zero = path[i + 1].zero;
        path[i].one = path[i + 1].one;
    }
    path.pop();
}

fn unwound_path_sum(path: &[PathElement], index: usize) -> f64 {
    let depth = path.len() - 1;
    let d = depth as f64;
    let PathElement { zero, one, .. } = path[index];
    let mut next = path[depth].weight;
    let mut total = 0.0;
    for i in (0..depth).rev() {
        if one != 0.0 {
            let tmp = next * (d + 1.0) / ((i as f64 + 1.0) * one);
            total += tmp;
            next = path[i].weight - tmp * zero * (d - i as f64) / (d + 1.0);
        } else {
            total += path[i].weight / zero * (d + 1.0) / (d - i as f64);
        }
    }
    total
}

fn path_tree_shap(tree: &Tree, fractions: &Fractions, x: &[u32], phi: &mut [Vec<f64>]) {
    recurse(tree, fractions, x, phi, 0, Vec::new(), 1.0, 1.0, None);
}

#[allow(clippy::too_many_arguments)]
fn recurse(
    tree: &Tree,
    fractions: &Fractions,
    x: &[u32],
    phi: &mut [Vec<f64>],
    node: usize,
    mut path: Vec<PathElement>,
    zero: f64,
    one: f64,
    feature: Option<usize>,
) {
    extend_path(&mut path, zero, one, feature);
    match &tree.nodes[node] {
        Node::Leaf { .. } => {
            let class = tree.leaf_vote(node);
            for i in 1..path.len() {
                let w = unwound_path_sum(&path, i);
                let el = path[i];
                phi[class][el.feature.expect("interior path element")] += w * (el.one - el.zero);
            }
        }
        Node::Split {
            feature: split,
            threshold,
            left,
            right,
            ..
        } => {
            let (fl, fr) = fractions[node];
            let goes_left = (x[*split] as f64) <= *threshold;
            let (hot, hot_frac, cold, cold_frac) = if goes_left {
                (*left, fl, *right, fr)
            } else {
                (*right, fr, *left, fl)
            };
            let (mut in_zero, mut in_one) = (1.0, 1.0);
            if let Some(k) = path.iter().position(|e| e.feature == Some(*split)) {
                in_zero = path[k].zero;
                in_one = path[k].one;
                unwind_path(&mut path, k);
            }
            // A branch with no mass on either side contributes nothing.
            if hot_frac * in_zero != 0.0 || in_one != 0.0 {
                recurse(
                    tree,
                    fractions,
                    x,
                    phi,
                    hot,
                    path.clone(),
                    hot_frac * in_zero,
                    in_one,
                    Some(*split),
                );
            }
            if cold_frac * in_zero != 0.0 {
                recurse(
                    tree,
                    fractions,
                    x,
                    phi,
                    cold,
                    path,
                    cold_frac * in_zero,
                    0.0,
                    Some(*split),
                );
            }
        }
    }
}

fn factorial(n: usize) -> f64 {
    (1..=n).map(|i| i as f64).product()
}

/// Exact Shapley values of `f(x_S, r_rest)` for one tree and one reference.
fn interventional_tree_shap(tree: &Tree, x: &[u32], r: &[u32], scale: f64, phi: &mut [Vec<f64>]) {
    #[allow(clippy::too_many_arguments)]
    fn walk(
        tree: &Tree,
        x: &[u32],
        r: &[u32],
        node: usize,
        from_x: &mut Vec<usize>,
        from_r: &mut Vec<usize>,
        scale: f64,
        phi: &mut [Vec<f64>],
    ) {
        match &tree.nodes[node] {
            Node::Leaf { .. } => {
                let class = tree.leaf_vote(node);
                let (a, b) = (from_x.len(), from_r.len());
                if a > 0 {
                    let w = factorial(a - 1) * factorial(b) / factorial(a + b);
                    for &j in from_x.iter() {
                        phi[class][j] += scale * w;
                    }
                }
                if b > 0 {
                    let w = factorial(a) * factorial(b - 1) / factorial(a + b);
                    for &j in from_r.iter() {
                        phi[class][j] -= scale * w;
                    }
                }
            }
            Node::Split {
                feature,
                threshold,
                left,
                right,
                ..
            } => {
                let child = |v: u32| if (v as f64) <= *threshold { *left } else { *right };
                let (cx, cr) = (child(x[*feature]), child(r[*feature]));
                if cx == cr || from_x.contains(feature) {
                    walk(tree, x, r, cx, from_x, from_r, scale, phi);
                } else if from_r.contains(feature) {
                    walk(tree, x, r, cr, from_x, from_r, scale, phi);
                } else {
                    from_x.push(*feature);
                    walk(tree, x, r, cx, from_x, from_r, scale, phi);
                    from_x.pop();
                    from_r.push(*feature);
                    walk(tree, x, r, cr, from_x, from_r, scale, phi);
                    from_r.pop();
                }
            }
        }
    }
    walk(tree, x, r, 0, &mut Vec::new(), &mut Vec::new(), scale, phi);
}

/// Shapley values by enumerating every coalition of the features the forest
/// splits on.
pub fn brute_force_shapley(
    forest: &Forest,
    sample_id: &str,
    x: &[u32],
    background: &[&[u32]],
    method: ShapMethod,
) -> Result<ShapAttribution, ExplainError> {
    let explainer = Explainer::new(forest, background, method)?;
    check_dim(forest, x)?;
    let mut active: Vec<usize> = forest.trees.iter().flat_map(|t| t.features()).collect();
    active.sort_unstable();
    active.dedup();
    let m = active.len();
    if m > BRUTE_FORCE_MAX_FEATURES {
        return Err(ExplainError::TooManyFeatures {
            count: m,
            max: BRUTE_FORCE_MAX_FEATURES,
        });
    }
    let k = forest.n_classes();
    let values: Vec<Vec<f64>> = (0..1usize << m)
        .into_par_iter()
        .map(|mask| {
            let fixed: Vec<bool> = {
                let mut f = vec![false; forest.n_features];
                for (bit, &j) in active.iter().enumerate() {
                    f[j] = mask & (1 << bit) != 0;
                }
                f
            };
            coalition_value(&explainer, x, &fixed, k)
        })
        .collect();

    let mut out = ShapAttribution::zeros(sample_id, explainer.base.clone(), forest.n_features);
    let weights: Vec<f64> = (0..m)
        .map(|s| factorial(s) * factorial(m - s - 1) / factorial(m))
        .collect();
    for (bit, &j) in active.iter().enumerate() {
        for mask in 0..1usize << m {
            if mask & (1 << bit) != 0 {
                continue;
            }
            let w = weights[mask.count_ones() as usize];
            let with = &values[mask | (1 << bit)];
            let without = &values[mask];
            for c in 0..k {
                out.phi[c][j] += w * (with[c] - without[c]);
            }
        }
    }
    Ok(out)
}

/// Expected vote fractions when only the features in `fixed` are known.
fn coalition_value(explainer: &Explainer<'_>, x: &[u32], fixed: &[bool], k: usize) -> Vec<f64> {
    let forest = explainer.forest;
    let mut v = vec![0.0; k];
    for (tree, fr) in forest.trees.iter().zip(&explainer.fractions) {
        match explainer.method {
            ShapMethod::PathDependent => expected_path(tree, fr, x, fixed, 0, 1.0, &mut v),
            ShapMethod::Interventional => {
                let w = 1.0 / explainer.background.len() as f64;
                for r in &explainer.background {
                    let hybrid: Vec<u32> = (0..x.len())
                        .map(|j| if fixed[j] { x[j] } else { r[j] })
                        .collect();
                    v[tree.vote(&hybrid)] += w;
                }
            }
        }
    }
    let n = forest.trees.len() as f64;
    v.iter_mut().for_each(|e| *e /= n);
    v
}

fn expected_path(
    tree: &Tree,
    fractions: &Fractions,
    x: &[u32],
    fixed: &[bool],
    node: usize,
    mass: f64,
    out: &mut [f64],
) {
    match &tree.nodes[node] {
        Node::Leaf { .. } => out[tree.leaf_vote(node)] += mass,
        Node::Split {
            feature,
            threshold,
            left,
            right,
            ..
        } => {
            if fixed[*feature] {
                let next = if (x[*feature] as f64) <= *threshold {
                    *left
                } else {
                    *right
                };
                expected_path(tree, fractions, x, fixed, next, mass, out);
            } else {
                let (fl, fr) = fractions[node];
                if fl > 0.0 {
                    expected_path(tree, fractions, x, fixed, *left, mass * fl, out);
                }
                if fr > 0.0 {
                    expected_path(tree, fractions, x, fixed, *right, mass * fr, out);
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedFeature {
    pub index: usize,
    pub name: String,
    pub mean_abs: f64,
    /// Correlation of phi with feature presence; positive means presence
    /// pushes toward the class. `None` when either side is constant.
    pub direction: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassRanking {
    pub label: String,
    pub features: Vec<RankedFeature>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapSummary {
    pub method: ShapMethod,
    pub samples: usize,
    pub classes: Vec<ClassRanking>,
}

fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    (saa > 0.0 && sbb > 0.0).then(|| sab / (saa * sbb).sqrt())
}

/// Ranks features per class by mean |phi| over `attributions`, whose rows
/// correspond to `inputs`. Features with zero mean |phi| are left out.
pub fn summarize(
    attributions: &[ShapAttribution],
    inputs: &[&[u32]],
    labels: &[String],
    names: &[String],
    method: ShapMethod,
) -> ShapSummary {
    let n = attributions.len();
    let classes = labels
        .iter()
        .enumerate()
        .map(|(c, label)| {
            let mut features: Vec<RankedFeature> = (0..names.len())
                .filter_map(|j| {
                    let phis: Vec<f64> = attributions.iter().map(|a| a.phi[c][j]).collect();
                    let mean_abs = phis.iter().map(|p| p.abs()).sum::<f64>() / n as f64;
                    if mean_abs == 0.0 {
                        return None;
                    }
                    let presence: Vec<f64> =
                        inputs.iter().map(|x| if x[j] > 0 { 1.0 } else { 0.0 }).collect();
                    Some(RankedFeature {
                        index: j,
                        name: names[j].clone(),
                        mean_abs,
                        direction: pearson(&phis, &presence),
                    })
                })
                .collect();
            features.sort_by(|a, b| b.mean_abs.total_cmp(&a.mean_abs).then(a.index.cmp(&b.index)));
            ClassRanking {
                label: label.clone(),
                features,
            }
        })
        .collect();
    ShapSummary {
        method,
        samples: n,
        classes,
    }
}

impl ShapSummary {
    pub fn top(&self, class: usize, k: usize) -> &[RankedFeature] {
        let f = &self.classes[class].features;
        &f[..k.min(f.len())]
    }

    /// Tab-separated `class, rank, feature, mean_abs_phi, direction`.
    pub fn to_table(&self) -> String {
        let mut out = String::from("class\trank\tfeature\tmean_abs_phi\tdirection\n");
        for c in &self.classes {
            for (r, f) in c.features.iter().enumerate() {
                let dir = f.direction.map_or_else(|| "NA".to_string(), |d| format!("{d:.6}"));
                let _ = writeln!(out, "{}\t{}\t{}\t{:.9}\t{}", c.label, r + 1, f.name, f.mean_abs, dir);
            }
        }
        out
    }

    pub fn render(&self, k: usize) -> String {
        let mut out = format!("SHAP summary over {} samples ({:?})\n", self.samples, self.method);
        for (ci, c) in self.classes.iter().enumerate() {
            let _ = writeln!(out, "{}:", c.label);
            for (r, f) in self.top(ci, k).iter().enumerate() {
                let sign = match f.direction {
                    Some(d) if d > 0.0 => "presence +",
                    Some(d) if d < 0.0 => "presence -",
                    _ => "",
                };
                let _ = writeln!(out, "  {:>2}. {:<28} {:.4}  {}", r + 1, f.name, f.mean_abs, sign);
            }
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("summary serializes")
    }
}
