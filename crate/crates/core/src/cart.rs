//! Regression trees: sum-of-squares splitting, cost-complexity pruning with a
//! cross-validated one-SE rule, prediction, DOT and JSON export.
//!
//! Trees are stored as a preorder arena (`nodes[0]` is the root, a node's left
//! subtree immediately follows it). Rows with `value >= threshold` go right.

use std::fmt::Write as _;

use rand::seq::index::sample;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{partition, FeatureMatrix};
use crate::error::{Error, Result};

pub const TREE_FORMAT: &str = "tree/v1";

/// Relative slack under which two split reductions count as tied.
const TIE_RTOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TreeParams {
    /// A split must reduce SSE by more than `cp * root_sse`.
    pub cp: f64,
    /// A node is splittable only if it holds at least this many rows.
    pub min_split: usize,
    pub min_leaf: usize,
    pub max_depth: Option<usize>,
}

impl Default for TreeParams {
    fn default() -> Self {
        Self { cp: 0.001, min_split: 21, min_leaf: 7, max_depth: None }
    }
}

impl TreeParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.cp >= 0.0) {
            return Err(Error::InvalidParams("cp must be >= 0".into()));
        }
        if self.min_leaf < 1 {
            return Err(Error::InvalidParams("min_leaf must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitCandidate {
    pub feature: usize,
    pub threshold: f64,
    pub reduction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub feature: usize,
    pub threshold: f64,
    pub left: usize,
    pub right: usize,
    /// SSE(parent) − SSE(left) − SSE(right) on the training target.
    pub improvement: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Node {
    /// Mean training target of the rows reaching this node (the prediction
    /// when the node is a leaf).
    pub value: f64,
    pub n: usize,
    /// Share of the root's training rows.
    pub fraction: f64,
    pub sse: f64,
    pub depth: usize,
    pub split: Option<Split>,
}

impl Node {
    pub fn is_leaf(&self) -> bool {
        self.split.is_none()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "TreeRepr", try_from = "TreeRepr")]
pub struct Tree {
    feature_names: Vec<String>,
    nodes: Vec<Node>,
    root_sse: f64,
    params: TreeParams,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TreeRepr {
    format: String,
    feature_names: Vec<String>,
    root_sse: f64,
    params: TreeParams,
    nodes: Vec<Node>,
}

impl From<Tree> for TreeRepr {
    fn from(t: Tree) -> Self {
        TreeRepr {
            format: TREE_FORMAT.to_string(),
            feature_names: t.feature_names,
            root_sse: t.root_sse,
            params: t.params,
            nodes: t.nodes,
        }
    }
}

impl TryFrom<TreeRepr> for Tree {
    type Error = String;

    fn try_from(r: TreeRepr) -> std::result::Result<Self, String> {
        if r.format != TREE_FORMAT {
            return Err(format!("expected format {TREE_FORMAT}, got {}", r.format));
        }
        if r.nodes.is_empty() {
            return Err("tree has no nodes".into());
        }
        for (i, node) in r.nodes.iter().enumerate() {
            if !node.value.is_finite() {
                return Err(format!("node {i} has a non-finite value"));
            }
            if let Some(s) = &node.split {
                if s.feature >= r.feature_names.len() {
                    return Err(format!("node {i} splits on unknown feature {}", s.feature));
                }
                if s.left <= i || s.right <= i || s.left >= r.nodes.len() || s.right >= r.nodes.len() {
                    return Err(format!("node {i} has invalid children"));
                }
                if !s.threshold.is_finite() {
                    return Err(format!("node {i} has a non-finite threshold"));
                }
            }
        }
        Ok(Tree { feature_names: r.feature_names, nodes: r.nodes, root_sse: r.root_sse, params: r.params })
    }
}

/// Two-pass mean and SSE of `target` over `rows`.
fn mean_sse(target: &[f64], rows: &[usize]) -> (f64, f64) {
    let n = rows.len() as f64;
    let mean = rows.iter().map(|&i| target[i]).sum::<f64>() / n;
    let sse = rows.iter().map(|&i| (target[i] - mean).powi(2)).sum();
    (mean, sse)
}

fn is_constant(target: &[f64], rows: &[usize]) -> bool {
    let first = target[rows[0]];
    rows.iter().all(|&i| target[i] == first)
}

#[inline]
fn beats(candidate: f64, incumbent: f64) -> bool {
    candidate > incumbent + TIE_RTOL * incumbent.abs()
}

/// Best sum-of-squares split of `rows` over all features, or `None` when the
/// node is too small, the target is constant, or no split clears the cp gate.
pub fn best_split(
    x: &FeatureMatrix,
    target: &[f64],
    rows: &[usize],
    params: &TreeParams,
    root_sse: f64,
) -> Option<SplitCandidate> {
    let features: Vec<usize> = (0..x.n_cols()).collect();
    best_split_over(x, target, rows, params, root_sse, &features)
}

fn best_split_over(
    x: &FeatureMatrix,
    target: &[f64],
    rows: &[usize],
    params: &TreeParams,
    root_sse: f64,
    features: &[usize],
) -> Option<SplitCandidate> {
    let n = rows.len();
    if n == 0 || n < params.min_split || n < 2 * params.min_leaf || is_constant(target, rows) {
        return None;
    }
    let (mean, _) = mean_sse(target, rows);
    let total: f64 = rows.iter().map(|&i| target[i] - mean).sum();
    let base = total * total / n as f64;

    let mut best: Option<SplitCandidate> = None;
    let mut pairs: Vec<(f64, f64)> = Vec::with_capacity(n);
    for &j in features {
        let col = x.column(j);
        pairs.clear();
        pairs.extend(rows.iter().map(|&i| (col[i], target[i] - mean)));
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut left_sum = 0.0;
        for i in 0..n - 1 {
            left_sum += pairs[i].1;
            let n_left = i + 1;
            let n_right = n - n_left;
            if n_left < params.min_leaf {
                continue;
            }
            if n_right < params.min_leaf {
                break;
            }
            if pairs[i].0 == pairs[i + 1].0 {
                continue;
            }
            let right_sum = total - left_sum;
            let reduction =
                left_sum * left_sum / n_left as f64 + right_sum * right_sum / n_right as f64 - base;
            let threshold = 0.5 * (pairs[i].0 + pairs[i + 1].0);
            let better = match &best {
                None => true,
                Some(b) => beats(reduction, b.reduction),
            };
            if better {
                best = Some(SplitCandidate { feature: j, threshold, reduction });
            }
        }
    }
    best.filter(|b| b.reduction > 0.0 && b.reduction > params.cp * root_sse)
}

/// Per-node feature subsampling used by forests.
pub(crate) struct FeatureSampler<'a> {
    pub rng: &'a mut ChaCha8Rng,
    pub mtry: usize,
}

struct Grower<'a, 'b> {
    x: &'a FeatureMatrix,
    target: &'a [f64],
    params: &'a TreeParams,
    root_sse: f64,
    n_root: usize,
    nodes: Vec<Node>,
    sampler: Option<FeatureSampler<'b>>,
}

impl Grower<'_, '_> {
    fn build(&mut self, rows: &[usize], depth: usize) -> usize {
        let (value, sse) = mean_sse(self.target, rows);
        let id = self.nodes.len();
        self.nodes.push(Node {
            value,
            n: rows.len(),
            fraction: rows.len() as f64 / self.n_root as f64,
            sse,
            depth,
            split: None,
        });
        if self.params.max_depth.is_some_and(|d| depth >= d) {
            return id;
        }
        let p = self.x.n_cols();
        let features: Vec<usize> = match self.sampler.as_mut() {
            Some(s) if s.mtry < p => {
                let mut f = sample(s.rng, p, s.mtry).into_vec();
                f.sort_unstable();
                f
            }
            _ => (0..p).collect(),
        };
        let Some(cand) =
            best_split_over(self.x, self.target, rows, self.params, self.root_sse, &features)
        else {
            return id;
        };
        let col = self.x.column(cand.feature);
        let (left_rows, right_rows): (Vec<usize>, Vec<usize>) =
            rows.iter().partition(|&&i| col[i] < cand.threshold);
        let left = self.build(&left_rows, depth + 1);
        let right = self.build(&right_rows, depth + 1);
        self.nodes[id].split = Some(Split {
            feature: cand.feature,
            threshold: cand.threshold,
            left,
            right,
            improvement: cand.reduction,
        });
        id
    }
}

/// Grows a tree on all rows of `x`.
pub fn grow(x: &FeatureMatrix, target: &[f64], params: &TreeParams) -> Tree {
    let rows: Vec<usize> = (0..x.n_rows()).collect();
    grow_rows(x, target, &rows, params)
}

/// Grows a tree on the given rows (duplicates allowed, as in bootstrap bags).
pub fn grow_rows(x: &FeatureMatrix, target: &[f64], rows: &[usize], params: &TreeParams) -> Tree {
    grow_sampled(x, target, rows, params, None)
}

pub(crate) fn grow_sampled(
    x: &FeatureMatrix,
    target: &[f64],
    rows: &[usize],
    params: &TreeParams,
    sampler: Option<FeatureSampler<'_>>,
) -> Tree {
    assert!(!rows.is_empty(), "cannot grow a tree on zero rows");
    assert_eq!(target.len(), x.n_rows(), "target aligned with feature rows");
    let (_, root_sse) = mean_sse(target, rows);
    let mut grower = Grower {
        x,
        target,
        params,
        root_sse,
        n_root: rows.len(),
        nodes: Vec::new(),
        sampler,
    };
    grower.build(rows, 0);
    Tree {
        feature_names: x.names().to_vec(),
        nodes: grower.nodes,
        root_sse,
        params: params.clone(),
    }
}

impl Tree {
    /// A one-leaf tree, mostly useful for tests and fixtures.
    pub fn leaf(feature_names: Vec<String>, value: f64, n: usize) -> Tree {
        Tree {
            feature_names,
            nodes: vec![Node { value, n, fraction: 1.0, sse: 0.0, depth: 0, split: None }],
            root_sse: 0.0,
            params: TreeParams::default(),
        }
    }

    /// Assembles a tree from an explicit preorder node list.
    pub fn from_nodes(feature_names: Vec<String>, nodes: Vec<Node>, params: TreeParams) -> Result<Tree> {
        let root_sse = nodes.first().map(|n| n.sse).unwrap_or(0.0);
        Tree::try_from(TreeRepr {
            format: TREE_FORMAT.to_string(),
            feature_names,
            root_sse,
            params,
            nodes,
        })
        .map_err(Error::MalformedModel)
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn root_sse(&self) -> f64 {
        self.root_sse
    }

    pub fn params(&self) -> &TreeParams {
        &self.params
    }

    pub fn n_leaves(&self) -> usize {
        self.nodes.iter().filter(|n| n.is_leaf()).count()
    }

    pub fn depth(&self) -> usize {
        self.nodes.iter().map(|n| n.depth).max().unwrap_or(0)
    }

    /// Leaf node ids in preorder.
    pub fn leaf_ids(&self) -> Vec<usize> {
        (0..self.nodes.len()).filter(|&i| self.nodes[i].is_leaf()).collect()
    }

    /// Id of the leaf reached by a dense feature row.
    pub fn leaf_for(&self, row: &[f64]) -> usize {
        let mut id = 0;
        while let Some(s) = &self.nodes[id].split {
            id = if row[s.feature] >= s.threshold { s.right } else { s.left };
        }
        id
    }

    fn leaf_for_matrix(&self, x: &FeatureMatrix, row: usize) -> usize {
        let mut id = 0;
        while let Some(s) = &self.nodes[id].split {
            id = if x.get(row, s.feature) >= s.threshold { s.right } else { s.left };
        }
        id
    }

    /// Leaf ids for every row of `x` (columns must follow `feature_names`).
    pub fn leaves_for_matrix(&self, x: &FeatureMatrix) -> Vec<usize> {
        (0..x.n_rows()).map(|i| self.leaf_for_matrix(x, i)).collect()
    }

    pub fn predict_dense(&self, row: &[f64]) -> f64 {
        self.nodes[self.leaf_for(row)].value
    }

    /// Predicts a row whose values may be missing; only the values on the
    /// row's path are required.
    pub fn predict(&self, row: &[Option<f64>]) -> Result<f64> {
        let mut id = 0;
        while let Some(s) = &self.nodes[id].split {
            let v = row
                .get(s.feature)
                .copied()
                .flatten()
                .ok_or_else(|| Error::MissingSplitValue(self.feature_names[s.feature].clone()))?;
            id = if v >= s.threshold { s.right } else { s.left };
        }
        Ok(self.nodes[id].value)
    }

    pub fn predict_matrix(&self, x: &FeatureMatrix) -> Vec<f64> {
        (0..x.n_rows()).map(|i| self.nodes[self.leaf_for_matrix(x, i)].value).collect()
    }

    /// Overwrites leaf predictions, given in `leaf_ids()` order.
    pub fn set_leaf_values(&mut self, values: &[f64]) {
        let ids = self.leaf_ids();
        assert_eq!(ids.len(), values.len(), "one value per leaf");
        for (id, &v) in ids.iter().zip(values) {
            self.nodes[*id].value = v;
        }
    }

    /// Same topology, split variables and thresholds (leaf values ignored).
    pub fn same_structure(&self, other: &Tree) -> bool {
        self.feature_names == other.feature_names
            && self.nodes.len() == other.nodes.len()
            && self.nodes.iter().zip(&other.nodes).all(|(a, b)| match (&a.split, &b.split) {
                (None, None) => true,
                (Some(x), Some(y)) => {
                    x.feature == y.feature && x.threshold == y.threshold && x.left == y.left && x.right == y.right
                }
                _ => false,
            })
    }

    /// For every internal node, the absolute complexity (SSE units) at which
    /// weakest-link pruning collapses it. Leaves get `NaN`.
    pub fn collapse_alphas(&self) -> Vec<f64> {
        let n = self.nodes.len();
        let mut alpha = vec![f64::NAN; n];
        let mut active: Vec<bool> = self.nodes.iter().map(|nd| !nd.is_leaf()).collect();
        let mut last = 0.0f64;
        // (leaf sse, leaf count) of the current pruned subtree at every node
        let mut leaf_sse = vec![0.0; n];
        let mut leaf_cnt = vec![0usize; n];
        while active[0] {
            for id in (0..n).rev() {
                match &self.nodes[id].split {
                    Some(s) if active[id] => {
                        leaf_sse[id] = leaf_sse[s.left] + leaf_sse[s.right];
                        leaf_cnt[id] = leaf_cnt[s.left] + leaf_cnt[s.right];
                    }
                    _ => {
                        leaf_sse[id] = self.nodes[id].sse;
                        leaf_cnt[id] = 1;
                    }
                }
            }
            let g = |id: usize| (self.nodes[id].sse - leaf_sse[id]) / (leaf_cnt[id] - 1) as f64;
            let g_min = (0..n).filter(|&i| active[i]).map(g).fold(f64::INFINITY, f64::min);
            let cut = g_min + 1e-10 * g_min.abs();
            let level = g_min.max(last);
            let collapse: Vec<usize> = (0..n).filter(|&i| active[i] && g(i) <= cut).collect();
            for id in collapse {
                self.deactivate(id, level, &mut active, &mut alpha);
            }
            last = level;
        }
        alpha
    }

    fn deactivate(&self, id: usize, level: f64, active: &mut [bool], alpha: &mut [f64]) {
        if !active[id] {
            return;
        }
        active[id] = false;
        alpha[id] = level;
        if let Some(s) = &self.nodes[id].split {
            self.deactivate(s.left, level, active, alpha);
            self.deactivate(s.right, level, active, alpha);
        }
    }

    /// Subtree keeping only internal nodes whose collapse complexity exceeds
    /// `alpha` (absolute SSE units).
    pub fn prune_alpha(&self, alpha: f64) -> Tree {
        let alphas = self.collapse_alphas();
        self.prune_with(&alphas, alpha)
    }

    /// Subtree for a complexity parameter relative to the root SSE.
    pub fn prune_cp(&self, cp: f64) -> Tree {
        self.prune_alpha(cp * self.root_sse * (1.0 + 1e-12))
    }

    fn prune_with(&self, alphas: &[f64], alpha: f64) -> Tree {
        let mut nodes = Vec::with_capacity(self.nodes.len());
        self.copy_pruned(0, alphas, alpha, &mut nodes);
        Tree {
            feature_names: self.feature_names.clone(),
            nodes,
            root_sse: self.root_sse,
            params: self.params.clone(),
        }
    }

    fn copy_pruned(&self, id: usize, alphas: &[f64], alpha: f64, out: &mut Vec<Node>) -> usize {
        let node = &self.nodes[id];
        let new_id = out.len();
        out.push(Node { split: None, ..node.clone() });
        if let Some(s) = &node.split {
            if alphas[id] > alpha {
                let left = self.copy_pruned(s.left, alphas, alpha, out);
                let right = self.copy_pruned(s.right, alphas, alpha, out);
                out[new_id].split = Some(Split { left, right, ..s.clone() });
            }
        }
        new_id
    }

    /// Nested pruning sequence: (cp, subtree) from the full tree (cp =
    /// growth cp) up to the root-only tree, cp strictly increasing.
    pub fn pruning_sequence(&self) -> Vec<(f64, Tree)> {
        let alphas = self.collapse_alphas();
        let mut levels: Vec<f64> = alphas.iter().copied().filter(|a| !a.is_nan()).collect();
        levels.sort_by(f64::total_cmp);
        levels.dedup();
        let mut seq = vec![(self.params.cp, self.prune_with(&alphas, -1.0))];
        for &a in &levels {
            let cp = if self.root_sse > 0.0 { a / self.root_sse } else { 0.0 };
            seq.push((cp, self.prune_with(&alphas, a)));
        }
        // guard: the growth cp can only tie a collapse level if splits were
        // recorded with zero improvement
        seq.dedup_by(|b, a| b.1.n_leaves() == a.1.n_leaves());
        seq
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable")
    }

    pub fn from_json(text: &str) -> Result<Tree> {
        serde_json::from_str(text).map_err(|e| Error::MalformedModel(e.to_string()))
    }

    /// Graphviz rendering. Internal nodes read `var < threshold` (yes branch
    /// left); leaves show the mean, the row count and the share of rows.
    pub fn export_dot(&self, labels: Option<&[String]>) -> String {
        let names = labels.unwrap_or(&self.feature_names);
        let mut out = String::from("digraph tree {\n");
        out.push_str("    node [shape=box, fontname=\"Helvetica\"];\n");
        for (id, node) in self.nodes.iter().enumerate() {
            let label = match &node.split {
                Some(s) => format!(
                    "{} < {}\\nsamples = {} ({})",
                    names.get(s.feature).map(String::as_str).unwrap_or("?"),
                    fmt_num(s.threshold),
                    node.n,
                    fmt_pct(node.fraction)
                ),
                None => format!(
                    "score = {}\\nsamples = {} ({})",
                    fmt_num(node.value),
                    node.n,
                    fmt_pct(node.fraction)
                ),
            };
            let _ = writeln!(out, "    n{id} [label=\"{}\"];", escape_dot(&label));
        }
        for (id, node) in self.nodes.iter().enumerate() {
            if let Some(s) = &node.split {
                let _ = writeln!(out, "    n{id} -> n{} [label=\"yes\"];", s.left);
                let _ = writeln!(out, "    n{id} -> n{} [label=\"no\"];", s.right);
            }
        }
        out.push_str("}\n");
        out
    }
}

fn escape_dot(s: &str) -> String {
    s.replace('"', "\\\"")
}

fn fmt_num(v: f64) -> String {
    let s = format!("{v:.3}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" {
        "0".to_string()
    } else {
        s.to_string()
    }
}

fn fmt_pct(fraction: f64) -> String {
    let s = format!("{:.1}", fraction * 100.0);
    format!("{}%", s.strip_suffix(".0").unwrap_or(&s))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CpEntry {
    pub cp: f64,
    pub n_leaves: usize,
    pub cv_error_mean: f64,
    pub cv_error_se: f64,
}

/// Cost-complexity table, cp strictly decreasing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CpTable {
    pub entries: Vec<CpEntry>,
}

impl CpTable {
    /// Index chosen by the one-SE rule: the largest cp whose mean CV error is
    /// within one SE (of the minimizing entry) of the minimum.
    pub fn one_se_index(&self) -> usize {
        assert!(!self.entries.is_empty(), "empty cp table");
        let mut best = 0;
        for (i, e) in self.entries.iter().enumerate() {
            if e.cv_error_mean < self.entries[best].cv_error_mean {
                best = i;
            }
        }
        let bound = self.entries[best].cv_error_mean + self.entries[best].cv_error_se;
        self.entries
            .iter()
            .position(|e| e.cv_error_mean <= bound)
            .unwrap_or(best)
    }

    /// Entry with the smallest mean CV error (first on ties).
    pub fn min_error_index(&self) -> usize {
        let mut best = 0;
        for (i, e) in self.entries.iter().enumerate() {
            if e.cv_error_mean < self.entries[best].cv_error_mean {
                best = i;
            }
        }
        best
    }
}

/// k-fold cost-complexity table with an observation-level partition.
pub fn cp_table(tree: &Tree, x: &FeatureMatrix, target: &[f64], k: usize, seed: u64) -> Result<CpTable> {
    let n = x.n_rows();
    if k < 2 || k > n {
        return Err(Error::TooFewRows(k, n));
    }
    cp_table_with_folds(tree, x, target, &partition(n, k, seed))
}

/// Cost-complexity table for explicit per-row fold labels.
///
/// Each fold regrows a tree on its training rows with the original tree's
/// parameters, prunes it at the geometric mean of adjacent cp values, and
/// scores mean squared error on the held-out rows.
pub fn cp_table_with_folds(tree: &Tree, x: &FeatureMatrix, target: &[f64], folds: &[usize]) -> Result<CpTable> {
    let n = x.n_rows();
    if folds.len() != n || target.len() != n {
        return Err(Error::LengthMismatch(folds.len(), n));
    }
    let seq = tree.pruning_sequence();
    // descending cp
    let cps: Vec<f64> = seq.iter().rev().map(|(cp, _)| *cp).collect();
    let leaves: Vec<usize> = seq.iter().rev().map(|(_, t)| t.n_leaves()).collect();
    let cv_cps: Vec<f64> = (0..cps.len())
        .map(|j| if j == 0 { f64::INFINITY } else { (cps[j] * cps[j - 1]).sqrt() })
        .collect();

    let k = folds.iter().copied().max().map_or(0, |m| m + 1);
    let mut errors: Vec<Vec<f64>> = Vec::new();
    for f in 0..k {
        let (test, train): (Vec<usize>, Vec<usize>) = (0..n).partition(|&i| folds[i] == f);
        if test.is_empty() || train.is_empty() {
            continue;
        }
        let fold_tree = grow_rows(x, target, &train, &tree.params);
        let alphas = fold_tree.collapse_alphas();
        let fold_errors = cv_cps
            .iter()
            .map(|&cp| {
                let pruned = fold_tree.prune_with(&alphas, cp * fold_tree.root_sse * (1.0 + 1e-12));
                test.iter()
                    .map(|&i| (pruned.nodes[pruned.leaf_for_matrix(x, i)].value - target[i]).powi(2))
                    .sum::<f64>()
                    / test.len() as f64
            })
            .collect();
        errors.push(fold_errors);
    }
    if errors.is_empty() {
        return Err(Error::TooFewRows(k, n));
    }
    let kf = errors.len() as f64;
    let entries = (0..cps.len())
        .map(|j| {
            let mean = errors.iter().map(|e| e[j]).sum::<f64>() / kf;
            let se = if errors.len() > 1 {
                let var = errors.iter().map(|e| (e[j] - mean).powi(2)).sum::<f64>() / (kf - 1.0);
                (var / kf).sqrt()
            } else {
                0.0
            };
            CpEntry { cp: cps[j], n_leaves: leaves[j], cv_error_mean: mean, cv_error_se: se }
        })
        .collect();
    Ok(CpTable { entries })
}

/// Applies the one-SE rule and returns the corresponding subtree.
pub fn prune_one_se(tree: &Tree, table: &CpTable) -> Tree {
    let entry = table.entries[table.one_se_index()];
    let pruned = tree.prune_cp(entry.cp);
    debug_assert_eq!(pruned.n_leaves(), entry.n_leaves, "cp table built from this tree");
    pruned
}

/// Grow, build a k-fold cp table and prune by one-SE.
pub fn fit_pruned(x: &FeatureMatrix, target: &[f64], params: &TreeParams, folds: &[usize]) -> Result<(Tree, CpTable)> {
    let tree = grow(x, target, params);
    let table = cp_table_with_folds(&tree, x, target, folds)?;
    Ok((prune_one_se(&tree, &table), table))
}
