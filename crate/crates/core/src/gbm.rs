//! Gradient-boosted regression trees for binary classification under logloss.
//!
//! Trees are grown by exact greedy search: every feature, every midpoint
//! between consecutive distinct values. Leaves take a clamped Newton step.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;
const LEAF_CLAMP: f64 = 4.0;
const PROB_CLAMP: f64 = 1e-6;
const MIN_GAIN: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GbmParams {
    pub n_trees: usize,
    pub max_depth: usize,
    pub shrinkage: f64,
    pub min_samples_leaf: usize,
    /// Unused by the deterministic fitter; kept so configs round-trip.
    pub seed: u64,
}

impl Default for GbmParams {
    fn default() -> Self {
        Self { n_trees: 200, max_depth: 3, shrinkage: 0.1, min_samples_leaf: 5, seed: 0 }
    }
}

impl GbmParams {
    pub fn validate(&self) -> Result<()> {
        if self.n_trees == 0 || self.max_depth == 0 || self.min_samples_leaf == 0 {
            return Err(Error::invalid("n_trees, max_depth and min_samples_leaf must be positive"));
        }
        if !(self.shrinkage > 0.0 && self.shrinkage <= 1.0) {
            return Err(Error::invalid(format!("shrinkage {} not in (0, 1]", self.shrinkage)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum TreeNode {
    Split { feature: usize, threshold: f64, left: usize, right: usize },
    Leaf { value: f64 },
}

/// Nodes stored in an arena; the root is node 0 and children always follow
/// their parent.
#[derive(Clone, Debug, PartialEq)]
pub struct Tree {
    pub nodes: Vec<TreeNode>,
}

impl Tree {
    /// Raw leaf value reached by `row` (before shrinkage).
    pub fn predict_row(&self, row: &[f64]) -> f64 {
        let mut i = 0;
        loop {
            match self.nodes[i] {
                TreeNode::Split { feature, threshold, left, right } => {
                    i = if row[feature] <= threshold { left } else { right };
                }
                TreeNode::Leaf { value } => return value,
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn go(nodes: &[TreeNode], i: usize) -> usize {
            match nodes[i] {
                TreeNode::Split { left, right, .. } => 1 + go(nodes, left).max(go(nodes, right)),
                TreeNode::Leaf { .. } => 0,
            }
        }
        go(&self.nodes, 0)
    }

    pub fn root_split(&self) -> Option<(usize, f64)> {
        match self.nodes.first()? {
            TreeNode::Split { feature, threshold, .. } => Some((*feature, *threshold)),
            TreeNode::Leaf { .. } => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GbmModel {
    pub base_score: f64,
    pub trees: Vec<Tree>,
    pub shrinkage: f64,
    pub feature_count: usize,
}

/// A fitted model plus the per-round training trace.
#[derive(Clone, Debug)]
pub struct GbmFit {
    pub model: GbmModel,
    /// Training logloss before the first tree, then after each round.
    pub round_logloss: Vec<f64>,
    /// Training-set probabilities after the final round.
    pub train_probabilities: Vec<f64>,
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Per-row logloss computed from the logit for numerical stability.
#[inline]
fn row_loss(score: f64, y: f64) -> f64 {
    // -[y ln s(z) + (1-y) ln(1-s(z))] = softplus(z) - y z
    let softplus = if score > 0.0 { score + (-score).exp().ln_1p() } else { score.exp().ln_1p() };
    softplus - y * score
}

fn mean_loss(scores: &[f64], y: &[f64]) -> f64 {
    scores.iter().zip(y).map(|(&s, &t)| row_loss(s, t)).sum::<f64>() / y.len() as f64
}

/// Best split of `members` by residual squared error.
///
/// `sorted[f]` lists all rows in ascending order of feature `f`. Returns
/// `(feature, threshold, gain)` where the gain is the reduction in the sum of
/// squared residuals. Ties keep the lowest feature, then lowest threshold.
fn best_split(
    x: &[Vec<f64>],
    residual: &[f64],
    sorted: &[Vec<usize>],
    in_node: &[bool],
    n_members: usize,
    min_leaf: usize,
) -> Option<(usize, f64, f64)> {
    if n_members < 2 * min_leaf {
        return None;
    }
    let total: f64 = sorted[0].iter().filter(|&&i| in_node[i]).map(|&i| residual[i]).sum();
    let parent = total * total / n_members as f64;
    let mut best: Option<(usize, f64, f64)> = None;
    let mut rows = Vec::with_capacity(n_members);
    for (f, order) in sorted.iter().enumerate() {
        rows.clear();
        rows.extend(order.iter().copied().filter(|&i| in_node[i]));
        let mut left_sum = 0.0;
        for j in 0..n_members - 1 {
            left_sum += residual[rows[j]];
            let n_left = j + 1;
            let n_right = n_members - n_left;
            if n_left < min_leaf {
                continue;
            }
            if n_right < min_leaf {
                break;
            }
            let (a, b) = (x[rows[j]][f], x[rows[j + 1]][f]);
            if a == b {
                continue;
            }
            let right_sum = total - left_sum;
            let gain = left_sum * left_sum / n_left as f64 + right_sum * right_sum / n_right as f64 - parent;
            if gain > MIN_GAIN && best.is_none_or(|(_, _, g)| gain > g) {
                best = Some((f, midpoint(a, b), gain));
            }
        }
    }
    best
}

/// A threshold `t` with `a <= t < b`.
fn midpoint(a: f64, b: f64) -> f64 {
    let m = a + (b - a) / 2.0;
    if m < b { m } else { a }
}

struct Grower<'a> {
    x: &'a [Vec<f64>],
    y: &'a [f64],
    residual: &'a [f64],
    prob: &'a [f64],
    scores: &'a [f64],
    sorted: &'a [Vec<usize>],
    params: &'a GbmParams,
    nodes: Vec<TreeNode>,
    /// Leaf value assigned to each row in this round.
    row_value: Vec<f64>,
}

impl Grower<'_> {
    fn grow(&mut self, members: Vec<usize>, depth: usize) -> usize {
        let id = self.nodes.len();
        self.nodes.push(TreeNode::Leaf { value: 0.0 });
        if depth < self.params.max_depth {
            let mut in_node = vec![false; self.x.len()];
            for &i in &members {
                in_node[i] = true;
            }
            let split = best_split(
                self.x,
                self.residual,
                self.sorted,
                &in_node,
                members.len(),
                self.params.min_samples_leaf,
            );
            if let Some((feature, threshold, _)) = split {
                let (l, r): (Vec<usize>, Vec<usize>) =
                    members.into_iter().partition(|&i| self.x[i][feature] <= threshold);
                let left = self.grow(l, depth + 1);
                let right = self.grow(r, depth + 1);
                self.nodes[id] = TreeNode::Split { feature, threshold, left, right };
                return id;
            }
        }
        let value = self.leaf_value(&members);
        for &i in &members {
            self.row_value[i] = value;
        }
        self.nodes[id] = TreeNode::Leaf { value };
        id
    }

    /// Clamped Newton step. If the shrunken step would raise the leaf's
    /// loss it is halved until it does not.
    fn leaf_value(&self, members: &[usize]) -> f64 {
        let g: f64 = members.iter().map(|&i| self.residual[i]).sum();
        let h: f64 = members.iter().map(|&i| self.prob[i] * (1.0 - self.prob[i])).sum();
        if h <= f64::MIN_POSITIVE {
            return 0.0;
        }
        let mut value = (g / h).clamp(-LEAF_CLAMP, LEAF_CLAMP);
        let eta = self.params.shrinkage;
        let loss_at = |v: f64| -> f64 {
            members.iter().map(|&i| row_loss(self.scores[i] + eta * v, self.y[i])).sum()
        };
        let base = loss_at(0.0);
        for _ in 0..60 {
            if loss_at(value) <= base {
                break;
            }
            value *= 0.5;
        }
        value
    }
}

fn validate_xy(x: &[Vec<f64>], y: &[f64]) -> Result<usize> {
    if x.len() != y.len() {
        return Err(Error::Dimension(format!("{} rows but {} labels", x.len(), y.len())));
    }
    if x.len() < 2 {
        return Err(Error::precondition("boosting needs at least two rows"));
    }
    let width = x[0].len();
    if width == 0 {
        return Err(Error::Dimension("rows have no features".into()));
    }
    for (i, row) in x.iter().enumerate() {
        if row.len() != width {
            return Err(Error::Dimension(format!("row {i} has {} features, expected {width}", row.len())));
        }
        if let Some(f) = row.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("row {i}, feature {f}")));
        }
    }
    if y.iter().any(|&t| t != 0.0 && t != 1.0) {
        return Err(Error::invalid("labels must be 0 or 1"));
    }
    let positives = y.iter().filter(|&&t| t == 1.0).count();
    if positives == 0 || positives == y.len() {
        return Err(Error::precondition("boosting needs both classes in the labels"));
    }
    Ok(width)
}

pub fn fit_gbm(x: &[Vec<f64>], y: &[f64], params: &GbmParams) -> Result<GbmFit> {
    params.validate()?;
    let width = validate_xy(x, y)?;
    let n = x.len();

    let rate = (y.iter().sum::<f64>() / n as f64).clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    let base_score = (rate / (1.0 - rate)).ln();

    let sorted: Vec<Vec<usize>> = (0..width)
        .map(|f| {
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| x[a][f].total_cmp(&x[b][f]));
            order
        })
        .collect();

    let mut scores = vec![base_score; n];
    let mut round_logloss = vec![mean_loss(&scores, y)];
    let mut trees = Vec::with_capacity(params.n_trees);
    for _ in 0..params.n_trees {
        let prob: Vec<f64> = scores.iter().map(|&s| sigmoid(s)).collect();
        let residual: Vec<f64> = y.iter().zip(&prob).map(|(t, p)| t - p).collect();
        let mut grower = Grower {
            x,
            y,
            residual: &residual,
            prob: &prob,
            scores: &scores,
            sorted: &sorted,
            params,
            nodes: Vec::new(),
            row_value: vec![0.0; n],
        };
        grower.grow((0..n).collect(), 0);
        let Grower { nodes, row_value, .. } = grower;
        for (s, v) in scores.iter_mut().zip(&row_value) {
            *s += params.shrinkage * v;
        }
        round_logloss.push(mean_loss(&scores, y));
        trees.push(Tree { nodes });
    }

    let model = GbmModel { base_score, trees, shrinkage: params.shrinkage, feature_count: width };
    let train_probabilities = scores.iter().map(|&s| sigmoid(s)).collect();
    Ok(GbmFit { model, round_logloss, train_probabilities })
}

impl GbmModel {
    /// Logit for one row, accumulated tree by tree.
    pub fn score_row(&self, row: &[f64]) -> f64 {
        let mut s = self.base_score;
        for t in &self.trees {
            s += self.shrinkage * t.predict_row(row);
        }
        s
    }
}

pub fn predict_gbm(m: &GbmModel, x: &[Vec<f64>]) -> Result<Vec<f64>> {
    x.iter()
        .enumerate()
        .map(|(i, row)| {
            if row.len() != m.feature_count {
                return Err(Error::Dimension(format!(
                    "row {i} has {} features, model expects {}",
                    row.len(),
                    m.feature_count
                )));
            }
            Ok(sigmoid(m.score_row(row)))
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Model file
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    feature_count: usize,
    shrinkage: f64,
    base_score: f64,
}

/// One tree as parallel arrays; `feature == -1` marks a leaf.
#[derive(Serialize, Deserialize)]
struct FlatTree {
    feature: Vec<i64>,
    threshold: Vec<f64>,
    left: Vec<usize>,
    right: Vec<usize>,
    value: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    header: Header,
    trees: Vec<FlatTree>,
}

pub fn serialize_gbm(m: &GbmModel) -> Result<Vec<u8>> {
    let trees = m
        .trees
        .iter()
        .map(|t| {
            let mut flat = FlatTree {
                feature: Vec::new(),
                threshold: Vec::new(),
                left: Vec::new(),
                right: Vec::new(),
                value: Vec::new(),
            };
            for node in &t.nodes {
                match *node {
                    TreeNode::Split { feature, threshold, left, right } => {
                        flat.feature.push(feature as i64);
                        flat.threshold.push(threshold);
                        flat.left.push(left);
                        flat.right.push(right);
                        flat.value.push(0.0);
                    }
                    TreeNode::Leaf { value } => {
                        flat.feature.push(-1);
                        flat.threshold.push(0.0);
                        flat.left.push(0);
                        flat.right.push(0);
                        flat.value.push(value);
                    }
                }
            }
            flat
        })
        .collect();
    let file = ModelFile {
        header: Header {
            version: FORMAT_VERSION,
            feature_count: m.feature_count,
            shrinkage: m.shrinkage,
            base_score: m.base_score,
        },
        trees,
    };
    Ok(serde_json::to_vec(&file)?)
}

pub fn deserialize_gbm(bytes: &[u8]) -> Result<GbmModel> {
    let file: ModelFile = serde_json::from_slice(bytes)?;
    let h = file.header;
    if h.version != FORMAT_VERSION {
        return Err(Error::Format(format!("gbm model version {} (expected {FORMAT_VERSION})", h.version)));
    }
    let mut trees = Vec::with_capacity(file.trees.len());
    for (t, flat) in file.trees.into_iter().enumerate() {
        let n = flat.feature.len();
        if n == 0
            || [flat.threshold.len(), flat.left.len(), flat.right.len(), flat.value.len()]
                .iter()
                .any(|&len| len != n)
        {
            return Err(Error::Format(format!("tree {t}: ragged or empty node arrays")));
        }
        let mut nodes = Vec::with_capacity(n);
        for i in 0..n {
            let node = match flat.feature[i] {
                -1 => TreeNode::Leaf { value: flat.value[i] },
                f if f >= 0 && (f as usize) < h.feature_count => {
                    let (left, right) = (flat.left[i], flat.right[i]);
                    if left <= i || right <= i || left >= n || right >= n {
                        return Err(Error::Format(format!("tree {t}: bad child index at node {i}")));
                    }
                    TreeNode::Split { feature: f as usize, threshold: flat.threshold[i], left, right }
                }
                f => return Err(Error::Format(format!("tree {t}: feature index {f} out of range"))),
            };
            nodes.push(node);
        }
        trees.push(Tree { nodes });
    }
    Ok(GbmModel { base_score: h.base_score, trees, shrinkage: h.shrinkage, feature_count: h.feature_count })
}
