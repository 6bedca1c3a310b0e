//! Bagged regression forest with observation-level bootstrap, out-of-bag
//! prediction and impurity importance.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cart::{grow_sampled, FeatureSampler, Tree, TreeParams};
use crate::dataset::FeatureMatrix;
use crate::error::{Error, Result};

pub const FOREST_FORMAT: &str = "forest/v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ForestParams {
    pub n_trees: usize,
    pub max_depth: usize,
    /// Features tried per split; `None` means all of them.
    pub mtry: Option<usize>,
    pub min_leaf: usize,
    pub seed: u64,
    /// Draw a bootstrap bag per tree. Turning it off grows every tree on the
    /// full data and leaves no out-of-bag rows.
    pub bootstrap: bool,
}

impl Default for ForestParams {
    fn default() -> Self {
        Self { n_trees: 300, max_depth: 3, mtry: None, min_leaf: 5, seed: 0, bootstrap: true }
    }
}

impl ForestParams {
    pub fn tree_params(&self) -> TreeParams {
        TreeParams { cp: 0.0, min_split: 2, min_leaf: self.min_leaf, max_depth: Some(self.max_depth) }
    }

    pub fn validate(&self, p: usize) -> Result<()> {
        if self.n_trees == 0 {
            return Err(Error::InvalidParams("n_trees must be >= 1".into()));
        }
        if self.min_leaf == 0 {
            return Err(Error::InvalidParams("min_leaf must be >= 1".into()));
        }
        if let Some(m) = self.mtry {
            if m == 0 || m > p {
                return Err(Error::InvalidParams(format!("mtry must be in 1..={p}, got {m}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "ForestRepr", try_from = "ForestRepr")]
pub struct Forest {
    trees: Vec<Tree>,
    /// In-bag multiplicity of every training row, per tree.
    inbag: Vec<Vec<u32>>,
    params: ForestParams,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ForestRepr {
    format: String,
    params: ForestParams,
    trees: Vec<Tree>,
    inbag: Vec<Vec<u32>>,
}

impl From<Forest> for ForestRepr {
    fn from(f: Forest) -> Self {
        ForestRepr { format: FOREST_FORMAT.into(), params: f.params, trees: f.trees, inbag: f.inbag }
    }
}

impl TryFrom<ForestRepr> for Forest {
    type Error = String;

    fn try_from(r: ForestRepr) -> std::result::Result<Self, String> {
        if r.format != FOREST_FORMAT {
            return Err(format!("expected format {FOREST_FORMAT}, got {}", r.format));
        }
        if r.trees.is_empty() || r.trees.len() != r.inbag.len() {
            return Err("trees and inbag counts disagree".into());
        }
        Ok(Forest { trees: r.trees, inbag: r.inbag, params: r.params })
    }
}

/// Out-of-bag predictions plus the rows that had no out-of-bag tree and
/// fell back to the full forest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OobPrediction {
    pub predictions: Vec<f64>,
    pub n_oob_trees: Vec<usize>,
    pub fallback_rows: Vec<usize>,
}

fn tree_rng(seed: u64, tree: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(tree as u64);
    rng
}

pub fn fit(x: &FeatureMatrix, target: &[f64], params: &ForestParams) -> Result<Forest> {
    let n = x.n_rows();
    if n < 2 {
        return Err(Error::TooFewRows(2, n));
    }
    if target.len() != n {
        return Err(Error::LengthMismatch(target.len(), n));
    }
    params.validate(x.n_cols())?;
    let tree_params = params.tree_params();
    let mtry = params.mtry.unwrap_or(x.n_cols());
    let grown: Vec<(Tree, Vec<u32>)> = (0..params.n_trees)
        .into_par_iter()
        .map(|t| {
            let mut rng = tree_rng(params.seed, t);
            let mut counts = vec![0u32; n];
            let rows: Vec<usize> = if params.bootstrap {
                (0..n)
                    .map(|_| {
                        let i = rng.random_range(0..n);
                        counts[i] += 1;
                        i
                    })
                    .collect()
            } else {
                counts.iter_mut().for_each(|c| *c = 1);
                (0..n).collect()
            };
            let sampler = FeatureSampler { rng: &mut rng, mtry };
            let tree = grow_sampled(x, target, &rows, &tree_params, Some(sampler));
            (tree, counts)
        })
        .collect();
    let (trees, inbag) = grown.into_iter().unzip();
    Ok(Forest { trees, inbag, params: params.clone() })
}

impl Forest {
    pub fn trees(&self) -> &[Tree] {
        &self.trees
    }

    pub fn inbag(&self) -> &[Vec<u32>] {
        &self.inbag
    }

    pub fn params(&self) -> &ForestParams {
        &self.params
    }

    pub fn feature_names(&self) -> &[String] {
        self.trees[0].feature_names()
    }

    /// Mean of the per-tree predictions.
    pub fn predict(&self, row: &[Option<f64>]) -> Result<f64> {
        let mut sum = 0.0;
        for t in &self.trees {
            sum += t.predict(row)?;
        }
        Ok(sum / self.trees.len() as f64)
    }

    pub fn predict_dense(&self, row: &[f64]) -> f64 {
        self.trees.iter().map(|t| t.predict_dense(row)).sum::<f64>() / self.trees.len() as f64
    }

    pub fn predict_matrix(&self, x: &FeatureMatrix) -> Vec<f64> {
        let mut sums = vec![0.0; x.n_rows()];
        for t in &self.trees {
            for (s, p) in sums.iter_mut().zip(t.predict_matrix(x)) {
                *s += p;
            }
        }
        let k = self.trees.len() as f64;
        sums.into_iter().map(|s| s / k).collect()
    }

    /// Out-of-bag predictions on the training rows `x`.
    pub fn oob_predict(&self, x: &FeatureMatrix) -> OobPrediction {
        let n = x.n_rows();
        let mut sums = vec![0.0; n];
        let mut counts = vec![0usize; n];
        for (tree, bag) in self.trees.iter().zip(&self.inbag) {
            for i in 0..n {
                if bag.get(i).copied().unwrap_or(0) == 0 {
                    sums[i] += tree.predict_dense(&x.row(i));
                    counts[i] += 1;
                }
            }
        }
        let mut fallback_rows = Vec::new();
        let predictions = (0..n)
            .map(|i| {
                if counts[i] == 0 {
                    fallback_rows.push(i);
                    self.predict_dense(&x.row(i))
                } else {
                    sums[i] / counts[i] as f64
                }
            })
            .collect();
        OobPrediction { predictions, n_oob_trees: counts, fallback_rows }
    }

    /// Impurity importance: summed split improvements per feature,
    /// normalized to one, sorted descending (ties by feature index).
    pub fn importance(&self) -> Vec<(String, f64)> {
        let names = self.feature_names();
        let mut scores = vec![0.0; names.len()];
        for t in &self.trees {
            for node in t.nodes() {
                if let Some(s) = &node.split {
                    scores[s.feature] += s.improvement;
                }
            }
        }
        let total: f64 = scores.iter().sum();
        if total > 0.0 {
            scores.iter_mut().for_each(|s| *s /= total);
        }
        let mut ranked: Vec<(usize, f64)> = scores.into_iter().enumerate().collect();
        ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        ranked.into_iter().map(|(j, s)| (names[j].clone(), s)).collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("serializable")
    }

    pub fn from_json(text: &str) -> Result<Forest> {
        serde_json::from_str(text).map_err(|e| Error::MalformedModel(e.to_string()))
    }
}
