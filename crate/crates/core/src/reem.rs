//! RE-EM trees: a regression tree for the fixed part plus cluster random
//! effects, fitted by alternating between the two.
//!
//! Each iteration grows (and prunes) a tree on `y − Z b`, then fits a mixed
//! model whose fixed effects are the leaf indicators. That fit supplies the
//! new `b`, the variance components and the leaf means written back into
//! the tree.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::cart::{self, Tree, TreeParams};
use crate::dataset::{make_folds, FeatureMatrix, FoldMode, PanelDataset};
use crate::error::{Error, Result};
use crate::lmm::{self, Correlation, LmmDesign, LmmFit, LmmOptions, LrtResult, Prediction, RandomSpec, VarianceComponents};
use crate::model_io;

pub const REEM_FORMAT: &str = "reem/v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PruneMode {
    /// One-SE pruning inside every iteration.
    #[default]
    PerIteration,
    /// Grow unpruned trees while iterating, prune once at the end.
    Final,
    Off,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReemParams {
    pub tree: TreeParams,
    pub random: RandomSpec,
    /// Stop when the log-likelihood changes by less than this.
    pub tol: f64,
    pub max_iter: usize,
    pub prune: PruneMode,
    /// Subject-grouped folds used by the pruning cross-validation.
    pub cv_k: usize,
    pub seed: u64,
    pub lmm: LmmOptions,
}

impl Default for ReemParams {
    fn default() -> Self {
        Self {
            tree: TreeParams::default(),
            random: RandomSpec::intercept(),
            tol: 1e-6,
            max_iter: 100,
            prune: PruneMode::PerIteration,
            cv_k: 10,
            seed: 0,
            lmm: LmmOptions::default(),
        }
    }
}

impl ReemParams {
    pub fn validate(&self) -> Result<()> {
        self.tree.validate()?;
        self.random.validate()?;
        if !(self.tol > 0.0) {
            return Err(Error::InvalidParams("tol must be > 0".into()));
        }
        if self.max_iter == 0 {
            return Err(Error::InvalidParams("max_iter must be >= 1".into()));
        }
        if self.prune != PruneMode::Off && self.cv_k < 2 {
            return Err(Error::InvalidParams("cv_k must be >= 2".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReemModel {
    pub predictors: Vec<String>,
    /// Pruned tree whose leaf values are the mixed-model leaf coefficients.
    pub tree: Tree,
    pub random: RandomSpec,
    pub vc: VarianceComponents,
    pub b: BTreeMap<String, Vec<f64>>,
    pub loglik: f64,
    pub n_iter: usize,
    pub converged: bool,
    /// Log-likelihood after every iteration.
    pub trace: Vec<f64>,
    /// Largest absolute change of any random effect, per iteration.
    pub b_change: Vec<f64>,
    pub params: ReemParams,
}

/// One indicator column per leaf, in `leaf_ids()` order.
pub fn leaf_design(tree: &Tree, x: &FeatureMatrix) -> DMatrix<f64> {
    let ids = tree.leaf_ids();
    let leaves = tree.leaves_for_matrix(x);
    let mut l = DMatrix::zeros(x.n_rows(), ids.len());
    for (i, leaf) in leaves.iter().enumerate() {
        let col = ids.binary_search(leaf).expect("leaf ids are sorted");
        l[(i, col)] = 1.0;
    }
    l
}

fn leaf_names(tree: &Tree) -> Vec<String> {
    tree.leaf_ids().iter().map(|id| format!("leaf{id}")).collect()
}

fn fit_leaves(ds: &PanelDataset, x: &FeatureMatrix, tree: &Tree, random: &RandomSpec, opts: &LmmOptions) -> Result<LmmFit> {
    let design = LmmDesign::from_dataset(ds, leaf_design(tree, x));
    lmm::fit_design(&design, leaf_names(tree), random, opts)
}

fn adjusted_response(ds: &PanelDataset, random: &RandomSpec, b: &BTreeMap<String, Vec<f64>>) -> Vec<f64> {
    ds.rows()
        .iter()
        .map(|r| {
            let shift = b
                .get(&r.subject)
                .map_or(0.0, |b| random.z_row(r.wave).iter().zip(b).map(|(z, b)| z * b).sum::<f64>());
            r.response - shift
        })
        .collect()
}

fn max_change(old: &BTreeMap<String, Vec<f64>>, new: &BTreeMap<String, Vec<f64>>) -> f64 {
    new.iter()
        .flat_map(|(k, v)| {
            let prev = old.get(k);
            v.iter().enumerate().map(move |(j, x)| (x - prev.map_or(0.0, |p| p[j])).abs())
        })
        .fold(0.0, f64::max)
}

pub fn fit(ds: &PanelDataset, predictors: &[String], params: &ReemParams) -> Result<ReemModel> {
    params.validate()?;
    let m = ds.subjects().len();
    if m < 2 {
        return Err(Error::TooFewClusters(2, m));
    }
    let x = ds.features(predictors)?;
    let folds = if params.prune == PruneMode::Off {
        None
    } else {
        let assignment = make_folds(ds, params.cv_k.min(m), FoldMode::SubjectGrouped, params.seed)?;
        Some(assignment.row_folds(ds))
    };
    let grow = |target: &[f64], prune: bool| -> Result<Tree> {
        match (&folds, prune) {
            (Some(f), true) => Ok(cart::fit_pruned(&x, target, &params.tree, f)?.0),
            _ => Ok(cart::grow(&x, target, &params.tree)),
        }
    };
    let per_iter = params.prune == PruneMode::PerIteration;

    let mut b: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut trace = Vec::new();
    let mut b_change = Vec::new();
    let mut state: Option<(Tree, LmmFit)> = None;
    let mut converged = false;
    for _ in 0..params.max_iter {
        let target = adjusted_response(ds, &params.random, &b);
        let mut tree = grow(&target, per_iter)?;
        let fit = fit_leaves(ds, &x, &tree, &params.random, &params.lmm)?;
        tree.set_leaf_values(&fit.beta);
        b_change.push(max_change(&b, &fit.b));
        b = fit.b.clone();
        let frozen = state.as_ref().is_some_and(|(prev, _)| prev.same_structure(&tree));
        let small_step = trace.last().is_some_and(|&prev: &f64| (fit.loglik - prev).abs() < params.tol);
        trace.push(fit.loglik);
        state = Some((tree, fit));
        // an unchanged tree gives an unchanged mixed-model fit, so a freeze
        // also satisfies the likelihood rule
        if frozen || small_step {
            converged = true;
            break;
        }
    }
    let (mut tree, mut fit) = state.expect("max_iter >= 1");
    if params.prune == PruneMode::Final {
        let target = adjusted_response(ds, &params.random, &b);
        tree = grow(&target, true)?;
        fit = fit_leaves(ds, &x, &tree, &params.random, &params.lmm)?;
        tree.set_leaf_values(&fit.beta);
        b_change.push(max_change(&b, &fit.b));
        trace.push(fit.loglik);
    }
    if !converged {
        log::warn!("RE-EM stopped after {} iterations without converging", params.max_iter);
    }
    Ok(ReemModel {
        predictors: predictors.to_vec(),
        tree,
        random: params.random.clone(),
        vc: fit.vc.clone(),
        b: fit.b,
        loglik: fit.loglik,
        n_iter: trace.len(),
        converged,
        trace,
        b_change,
        params: params.clone(),
    })
}

/// Fits with independent errors, tests AR(1) errors on the same leaves by a
/// likelihood-ratio test (df = 1), and returns the model selected at 0.05.
/// The AR(1) model wins only on a significant gain.
pub fn loglik_test_ar1(ds: &PanelDataset, predictors: &[String], params: &ReemParams) -> Result<(ReemModel, LrtResult)> {
    let indep_params = ReemParams {
        random: params.random.clone().with_correlation(Correlation::Independent),
        ..params.clone()
    };
    let indep = fit(ds, predictors, &indep_params)?;
    let x = ds.features(predictors)?;
    let design = LmmDesign::from_dataset(ds, leaf_design(&indep.tree, &x));
    let null = lmm::fit_design(&design, leaf_names(&indep.tree), &indep.random, &params.lmm)?;
    let alt = lmm::refit_ar1(&design, &null, &params.lmm)?;
    let test = lmm::lr_test(&null, &alt, 1)?;
    if test.p < 0.05 {
        let ar1_params = ReemParams {
            random: params.random.clone().with_correlation(Correlation::Ar1),
            ..params.clone()
        };
        Ok((fit(ds, predictors, &ar1_params)?, test))
    } else {
        Ok((indep, test))
    }
}

impl ReemModel {
    fn random_part(&self, cluster: Option<&str>, wave: u32) -> Option<f64> {
        let b = self.b.get(cluster?)?;
        Some(self.random.z_row(wave).iter().zip(b).map(|(z, b)| z * b).sum())
    }

    /// Leaf mean plus the cluster's random effect when the cluster is known.
    pub fn predict_row(&self, row: &[Option<f64>], wave: u32, cluster: Option<&str>) -> Result<f64> {
        let fixed = self.tree.predict(row)?;
        Ok(fixed + self.random_part(cluster, wave).unwrap_or(0.0))
    }

    pub fn predict(&self, ds: &PanelDataset) -> Result<Prediction> {
        let mut values = Vec::with_capacity(ds.n_rows());
        let mut seen = Vec::with_capacity(ds.n_rows());
        for (i, r) in ds.rows().iter().enumerate() {
            let row = ds.row_values(i, &self.predictors)?;
            values.push(self.predict_row(&row, r.wave, Some(&r.subject))?);
            seen.push(self.b.contains_key(&r.subject));
        }
        Ok(Prediction { values, seen })
    }

    /// Marginal log-likelihood of `ds` under the fitted leaves and components.
    pub fn loglik_on(&self, ds: &PanelDataset) -> Result<f64> {
        let x = ds.features(&self.predictors)?;
        let l = leaf_design(&self.tree, &x);
        let ids = self.tree.leaf_ids();
        let beta: Vec<f64> = ids.iter().map(|&id| self.tree.nodes()[id].value).collect();
        lmm::marginal_loglik(&LmmDesign::from_dataset(ds, l), &self.random, &beta, &self.vc)
    }

    pub fn export_dot(&self) -> String {
        self.tree.export_dot(None)
    }

    pub fn to_json(&self) -> String {
        model_io::to_json(REEM_FORMAT, self)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        model_io::from_json(REEM_FORMAT, text)
    }
}
