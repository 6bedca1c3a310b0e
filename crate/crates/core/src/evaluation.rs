//! Cross-validation, scoring and model comparison.

use std::collections::HashSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::cart::{self, CpTable, Tree, TreeParams};
use crate::dataset::{make_folds, FoldAssignment, FoldMode, PanelDataset};
use crate::error::{Error, Result};
use crate::lmm::{self, FixedSpec, LmmFit, LmmOptions, Prediction, RandomSpec};
use crate::merf::{self, MerfModel, MerfParams};
use crate::model_io;
use crate::reem::{self, ReemModel, ReemParams};

/// Mean absolute error.
pub fn mae(predictions: &[f64], actual: &[f64]) -> Result<f64> {
    if predictions.len() != actual.len() || predictions.is_empty() {
        return Err(Error::LengthMismatch(predictions.len(), actual.len()));
    }
    let total: f64 = predictions.iter().zip(actual).map(|(p, a)| (p - a).abs()).sum();
    Ok(total / predictions.len() as f64)
}

fn default_cart_k() -> usize {
    10
}

/// A model family together with everything needed to fit it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "lowercase", deny_unknown_fields)]
pub enum ModelSpec {
    Lmm {
        fixed: FixedSpec,
        #[serde(default)]
        random: RandomSpec,
        #[serde(default)]
        options: LmmOptions,
    },
    /// Standalone tree, pruned by one-SE over observation-level folds.
    Cart {
        #[serde(default)]
        predictors: Vec<String>,
        #[serde(default)]
        params: TreeParams,
        #[serde(default = "default_cart_k")]
        cv_k: usize,
        #[serde(default)]
        seed: u64,
    },
    Reem {
        #[serde(default)]
        predictors: Vec<String>,
        #[serde(default)]
        params: ReemParams,
    },
    Merf {
        #[serde(default)]
        predictors: Vec<String>,
        #[serde(default)]
        params: MerfParams,
    },
}

impl ModelSpec {
    pub fn family(&self) -> &'static str {
        match self {
            ModelSpec::Lmm { .. } => "lmm",
            ModelSpec::Cart { .. } => "cart",
            ModelSpec::Reem { .. } => "reem",
            ModelSpec::Merf { .. } => "merf",
        }
    }

    /// Variables the model reads besides the response.
    pub fn variables(&self) -> Vec<String> {
        match self {
            ModelSpec::Lmm { fixed, .. } => fixed.variables(),
            ModelSpec::Cart { predictors, .. }
            | ModelSpec::Reem { predictors, .. }
            | ModelSpec::Merf { predictors, .. } => predictors.clone(),
        }
    }

    /// Uses `names` as predictors when a tree family lists none.
    pub fn with_default_predictors(mut self, names: &[String]) -> Self {
        if let ModelSpec::Cart { predictors, .. } | ModelSpec::Reem { predictors, .. } | ModelSpec::Merf { predictors, .. } =
            &mut self
        {
            if predictors.is_empty() {
                *predictors = names.to_vec();
            }
        }
        self
    }

    /// Whether fitting draws random numbers (folds, bootstrap samples).
    pub fn is_stochastic(&self) -> bool {
        !matches!(self, ModelSpec::Lmm { .. })
    }

    /// Replaces the seed of stochastic families.
    pub fn with_seed(mut self, seed: u64) -> Self {
        match &mut self {
            ModelSpec::Lmm { .. } => {}
            ModelSpec::Cart { seed: s, .. } => *s = seed,
            ModelSpec::Reem { params, .. } => params.seed = seed,
            ModelSpec::Merf { params, .. } => params.seed = seed,
        }
        self
    }

    pub fn fit(&self, ds: &PanelDataset) -> Result<FittedModel> {
        match self {
            ModelSpec::Lmm { fixed, random, options } => {
                Ok(FittedModel::Lmm(lmm::fit_ml(ds, fixed, random, options)?))
            }
            ModelSpec::Cart { predictors, params, cv_k, seed } => {
                params.validate()?;
                let x = ds.features(predictors)?;
                let y = ds.responses();
                let k = (*cv_k).min(ds.n_rows());
                let folds = make_folds(ds, k, FoldMode::ObservationLevel, *seed)?;
                let (tree, cp_table) = cart::fit_pruned(&x, &y, params, &folds.assignment)?;
                let sse: f64 = tree.predict_matrix(&x).iter().zip(&y).map(|(p, a)| (p - a).powi(2)).sum();
                Ok(FittedModel::Cart(CartModel { tree, cp_table, sigma2: sse / y.len() as f64, n_obs: y.len() }))
            }
            ModelSpec::Reem { predictors, params } => Ok(FittedModel::Reem(reem::fit(ds, predictors, params)?)),
            ModelSpec::Merf { predictors, params } => Ok(FittedModel::Merf(merf::fit(ds, predictors, params)?)),
        }
    }
}

/// Pruned standalone tree plus its plug-in residual variance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CartModel {
    pub tree: Tree,
    pub cp_table: CpTable,
    /// Training SSE / n.
    pub sigma2: f64,
    pub n_obs: usize,
}

impl CartModel {
    /// Gaussian log-likelihood with independent residuals at the plug-in
    /// variance (a pseudo-likelihood: the tree has no error model).
    pub fn pseudo_loglik(&self) -> f64 {
        let n = self.n_obs as f64;
        let s2 = self.sigma2.max(f64::MIN_POSITIVE);
        -0.5 * n * ((2.0 * std::f64::consts::PI * s2).ln() + 1.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum FittedModel {
    Lmm(LmmFit),
    Cart(CartModel),
    Reem(ReemModel),
    Merf(MerfModel),
}

pub const CART_FORMAT: &str = "cart/v1";

impl FittedModel {
    pub fn family(&self) -> &'static str {
        match self {
            FittedModel::Lmm(_) => "lmm",
            FittedModel::Cart(_) => "cart",
            FittedModel::Reem(_) => "reem",
            FittedModel::Merf(_) => "merf",
        }
    }

    /// Predictions for `ds`; rows of clusters seen in training get their
    /// random effect, the rest are population-level.
    pub fn predict(&self, ds: &PanelDataset) -> Result<Prediction> {
        match self {
            FittedModel::Lmm(f) => f.predict(ds, true),
            FittedModel::Cart(c) => {
                let names = c.tree.feature_names().to_vec();
                let values = (0..ds.n_rows())
                    .map(|i| c.tree.predict(&ds.row_values(i, &names)?))
                    .collect::<Result<Vec<f64>>>()?;
                Ok(Prediction { seen: vec![false; values.len()], values })
            }
            FittedModel::Reem(m) => m.predict(ds),
            FittedModel::Merf(m) => m.predict(ds),
        }
    }

    /// Training log-likelihood and whether it is a pseudo-likelihood.
    pub fn loglik(&self) -> (f64, bool) {
        match self {
            FittedModel::Lmm(f) => (f.loglik, false),
            FittedModel::Cart(c) => (c.pseudo_loglik(), true),
            FittedModel::Reem(m) => (m.loglik, false),
            FittedModel::Merf(m) => (m.loglik, false),
        }
    }

    /// Variables read at prediction time besides subject and wave.
    pub fn variables(&self) -> Vec<String> {
        match self {
            FittedModel::Lmm(f) => f.fixed.as_ref().map(FixedSpec::variables).unwrap_or_default(),
            FittedModel::Cart(c) => c.tree.feature_names().to_vec(),
            FittedModel::Reem(m) => m.predictors.clone(),
            FittedModel::Merf(m) => m.predictors.clone(),
        }
    }

    /// The displayable tree of tree-based families.
    pub fn tree(&self) -> Option<&Tree> {
        match self {
            FittedModel::Cart(c) => Some(&c.tree),
            FittedModel::Reem(m) => Some(&m.tree),
            _ => None,
        }
    }

    pub fn to_json(&self) -> String {
        match self {
            FittedModel::Lmm(f) => f.to_json(),
            FittedModel::Cart(c) => model_io::to_json(CART_FORMAT, c),
            FittedModel::Reem(m) => m.to_json(),
            FittedModel::Merf(m) => m.to_json(),
        }
    }

    /// Reads a model document of any family, dispatching on its format tag.
    pub fn from_json(text: &str) -> Result<Self> {
        match model_io::peek_format(text)?.as_str() {
            lmm::LMM_FORMAT => Ok(FittedModel::Lmm(LmmFit::from_json(text)?)),
            CART_FORMAT => Ok(FittedModel::Cart(model_io::from_json(CART_FORMAT, text)?)),
            cart::TREE_FORMAT => {
                let tree = Tree::from_json(text)?;
                Ok(FittedModel::Cart(CartModel {
                    tree,
                    cp_table: CpTable { entries: Vec::new() },
                    sigma2: f64::NAN,
                    n_obs: 0,
                }))
            }
            reem::REEM_FORMAT => Ok(FittedModel::Reem(ReemModel::from_json(text)?)),
            merf::MERF_FORMAT => Ok(FittedModel::Merf(MerfModel::from_json(text)?)),
            other => Err(Error::MalformedModel(format!("unknown model format `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    pub n_test: usize,
    /// `None` when the fold failed.
    pub mae: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldError {
    /// `None` for the full-data fit.
    pub fold: Option<usize>,
    pub error: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub family: String,
    pub spec: ModelSpec,
    pub mode: FoldMode,
    pub k: usize,
    pub seed: u64,
    pub dataset_fingerprint: String,
    pub folds_fingerprint: String,
    pub folds: Vec<FoldResult>,
    /// Observation-weighted mean over completed folds.
    pub mean_mae: Option<f64>,
    /// Log-likelihood of a single fit on all rows.
    pub loglik_full: Option<f64>,
    pub loglik_pseudo: bool,
    pub errors: Vec<FoldError>,
    pub complete: bool,
}

impl CvReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable")
    }
}

fn record(fold: Option<usize>, e: &Error) -> FoldError {
    FoldError { fold, error: e.name().to_string(), message: e.to_string() }
}

/// Fits on each fold's training rows and scores MAE on its test rows.
///
/// Under subject-grouped folds the test subjects were never seen, so their
/// predictions are population-level. A failing fold is recorded and the
/// remaining folds still run.
pub fn cross_validate(ds: &PanelDataset, spec: &ModelSpec, folds: &FoldAssignment) -> Result<CvReport> {
    let expected = match folds.mode {
        FoldMode::SubjectGrouped => ds.subjects().len(),
        FoldMode::ObservationLevel => ds.n_rows(),
    };
    if folds.assignment.len() != expected {
        return Err(Error::FoldMismatch);
    }
    let row_folds = folds.row_folds(ds);
    let mut results = Vec::with_capacity(folds.k);
    let mut errors = Vec::new();
    let mut weighted = 0.0;
    let mut n_scored = 0usize;
    for f in 0..folds.k {
        let (test, train): (Vec<usize>, Vec<usize>) = (0..ds.n_rows()).partition(|&i| row_folds[i] == f);
        if folds.mode == FoldMode::SubjectGrouped {
            let train_subjects: HashSet<&str> = train.iter().map(|&i| ds.rows()[i].subject.as_str()).collect();
            assert!(
                test.iter().all(|&i| !train_subjects.contains(ds.rows()[i].subject.as_str())),
                "test subject leaked into training"
            );
        }
        let test_ds = ds.select_rows(&test);
        let outcome = spec
            .fit(&ds.select_rows(&train))
            .and_then(|model| model.predict(&test_ds))
            .and_then(|pred| mae(&pred.values, &test_ds.responses()));
        match outcome {
            Ok(v) => {
                weighted += v * test.len() as f64;
                n_scored += test.len();
                results.push(FoldResult { fold: f, n_test: test.len(), mae: Some(v) });
            }
            Err(e) => {
                errors.push(record(Some(f), &e));
                results.push(FoldResult { fold: f, n_test: test.len(), mae: None });
            }
        }
    }
    let (loglik_full, loglik_pseudo) = match spec.fit(ds) {
        Ok(model) => {
            let (ll, pseudo) = model.loglik();
            (Some(ll), pseudo)
        }
        Err(e) => {
            errors.push(record(None, &e));
            (None, matches!(spec, ModelSpec::Cart { .. }))
        }
    };
    Ok(CvReport {
        family: spec.family().to_string(),
        spec: spec.clone(),
        mode: folds.mode,
        k: folds.k,
        seed: folds.seed,
        dataset_fingerprint: ds.fingerprint(),
        folds_fingerprint: folds.fingerprint(),
        folds: results,
        mean_mae: (n_scored > 0).then(|| weighted / n_scored as f64),
        loglik_full,
        loglik_pseudo,
        complete: errors.is_empty(),
        errors,
    })
}

/// Percent reduction of MAE relative to the baseline.
pub fn improvement_pct(baseline_mae: f64, model_mae: f64) -> f64 {
    100.0 * (baseline_mae - model_mae) / baseline_mae
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub family: String,
    pub mean_mae: Option<f64>,
    pub loglik: Option<f64>,
    pub improvement_pct: Option<f64>,
    pub baseline: bool,
    pub complete: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub baseline: String,
    pub rows: Vec<ComparisonRow>,
}

/// Lines the reports up against `baseline`. All reports must share the
/// dataset and the fold assignment.
pub fn compare(reports: &[CvReport], baseline: &str) -> Result<ComparisonTable> {
    let first = reports.first().ok_or_else(|| Error::InvalidParams("no reports to compare".into()))?;
    if reports
        .iter()
        .any(|r| r.folds_fingerprint != first.folds_fingerprint || r.dataset_fingerprint != first.dataset_fingerprint)
    {
        return Err(Error::FoldMismatch);
    }
    let base = reports
        .iter()
        .find(|r| r.family == baseline)
        .ok_or_else(|| Error::InvalidParams(format!("no report for baseline `{baseline}`")))?;
    let rows = reports
        .iter()
        .map(|r| {
            let is_base = std::ptr::eq(r, base);
            let improvement = match (base.mean_mae, r.mean_mae) {
                _ if is_base => Some(0.0),
                (Some(b), Some(m)) => Some(improvement_pct(b, m)),
                _ => None,
            };
            ComparisonRow {
                family: r.family.clone(),
                mean_mae: r.mean_mae,
                loglik: r.loglik_full,
                improvement_pct: improvement,
                baseline: is_base,
                complete: r.complete,
            }
        })
        .collect();
    Ok(ComparisonTable { baseline: baseline.to_string(), rows })
}

fn display_family(f: &str) -> &str {
    match f {
        "lmm" => "LMM",
        "cart" => "CART",
        "reem" => "RE-EM tree",
        "merf" => "MERF",
        other => other,
    }
}

/// Whole-percent rendering of an improvement.
pub fn format_pct(v: f64) -> String {
    let s = format!("{v:.0}%");
    if s == "-0%" {
        "0%".to_string()
    } else {
        s
    }
}

impl ComparisonTable {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable")
    }

    /// Plain-text table: one row per family, MAE, log-likelihood and the
    /// improvement over the baseline.
    pub fn to_text(&self) -> String {
        let header = ["model", "MAE", "log-likelihood", "improvement"];
        let body: Vec<[String; 4]> = self
            .rows
            .iter()
            .map(|r| {
                let mut name = display_family(&r.family).to_string();
                if !r.complete {
                    name.push_str(" (incomplete)");
                }
                [
                    name,
                    r.mean_mae.map_or("-".into(), |v| format!("{v:.2}")),
                    r.loglik.map_or("-".into(), |v| format!("{v:.2}")),
                    match (r.baseline, r.improvement_pct) {
                        (true, _) => "baseline".into(),
                        (false, Some(v)) => format_pct(v),
                        (false, None) => "-".into(),
                    },
                ]
            })
            .collect();
        let mut widths = header.map(str::len);
        for row in &body {
            for (w, cell) in widths.iter_mut().zip(row) {
                *w = (*w).max(cell.len());
            }
        }
        let mut out = String::new();
        let mut line = |cells: [&str; 4]| {
            let _ = writeln!(
                out,
                "{:<w0$}  {:>w1$}  {:>w2$}  {:>w3$}",
                cells[0],
                cells[1],
                cells[2],
                cells[3],
                w0 = widths[0],
                w1 = widths[1],
                w2 = widths[2],
                w3 = widths[3]
            );
        };
        line(header);
        for row in &body {
            line([&row[0], &row[1], &row[2], &row[3]]);
        }
        out
    }
}
