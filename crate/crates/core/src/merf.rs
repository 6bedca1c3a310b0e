//! Mixed-effects random forests.
//!
//! The loop alternates a forest fit on `y − Z b` with closed-form updates of
//! the random effects and the variance components. Parameter updates use the
//! forest's out-of-bag predictions; deployed predictions use the full forest.
//! Progress is tracked by the generalized log-likelihood
//!
//! ```text
//! GLL = Σ_i [ ε_i'ε_i / σ² + b_i' D⁻¹ b_i + log|D| + n_i log σ² ]
//! ```

use std::collections::BTreeMap;

use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::cart::Tree;
use crate::dataset::{make_folds, FeatureMatrix, FoldMode, PanelDataset};
use crate::error::{Error, Result};
use crate::evaluation::mae;
use crate::forest::{self, Forest, ForestParams};
use crate::lmm::{self, Correlation, LmmDesign, Prediction, RandomSpec, VarianceComponents};
use crate::model_io;

pub const MERF_FORMAT: &str = "merf/v1";
const D_RIDGE: f64 = 1e-8;

/// How forest seeds evolve across iterations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SeedSchedule {
    /// Every iteration reuses the master seed (common random numbers), so
    /// the forest changes only when the adjusted response does.
    #[default]
    Fixed,
    /// A fresh seed derived from the master seed at every iteration.
    PerIteration,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MerfParams {
    /// Forest settings; its `seed` is replaced by the iteration seed.
    pub forest: ForestParams,
    pub n_iter: usize,
    /// Relative GLL change that ends the loop.
    pub gll_tol: f64,
    pub random: RandomSpec,
    pub seed: u64,
    pub seed_schedule: SeedSchedule,
    /// Keep every random effect at zero (D = 0).
    pub freeze_random_effects: bool,
}

impl Default for MerfParams {
    fn default() -> Self {
        Self {
            forest: ForestParams::default(),
            n_iter: 100,
            gll_tol: 1e-4,
            random: RandomSpec::intercept(),
            seed: 0,
            seed_schedule: SeedSchedule::Fixed,
            freeze_random_effects: false,
        }
    }
}

impl MerfParams {
    pub fn validate(&self, p: usize) -> Result<()> {
        self.forest.validate(p)?;
        self.random.validate()?;
        if self.random.correlation != Correlation::Independent {
            return Err(Error::InvalidParams("MERF supports independent errors only".into()));
        }
        if self.n_iter == 0 {
            return Err(Error::InvalidParams("n_iter must be >= 1".into()));
        }
        if !(self.gll_tol > 0.0) {
            return Err(Error::InvalidParams("gll_tol must be > 0".into()));
        }
        Ok(())
    }

    fn iteration_seed(&self, r: usize) -> u64 {
        match self.seed_schedule {
            SeedSchedule::Fixed => self.seed,
            SeedSchedule::PerIteration => self.seed.wrapping_add((r as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MerfModel {
    pub predictors: Vec<String>,
    pub forest: Forest,
    pub random: RandomSpec,
    pub vc: VarianceComponents,
    pub b: BTreeMap<String, Vec<f64>>,
    pub gll_trace: Vec<f64>,
    pub n_iter_run: usize,
    pub converged: bool,
    /// Marginal Gaussian log-likelihood of `y − f̂` (out-of-bag) under the
    /// fitted covariance.
    pub loglik: f64,
    /// Iterations in which D had to be ridged to stay invertible.
    pub ridge_iterations: Vec<usize>,
    pub params: MerfParams,
}

struct ClusterData {
    rows: std::ops::Range<usize>,
    z: DMatrix<f64>,
}

fn population_variance(y: &[f64]) -> f64 {
    let n = y.len() as f64;
    let mean = y.iter().sum::<f64>() / n;
    y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n
}

/// Inverse and log-determinant of D, adding a ridge when D is singular.
fn d_inverse(d: &DMatrix<f64>) -> (DMatrix<f64>, f64, bool) {
    let q = d.nrows();
    if let Some(chol) = Cholesky::new(d.clone()) {
        let logdet = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        if logdet.is_finite() && chol.l().diagonal().iter().all(|v| *v > 1e-12) {
            return (chol.inverse(), logdet, false);
        }
    }
    let ridged = d + DMatrix::identity(q, q) * D_RIDGE;
    let chol = Cholesky::new(ridged).expect("ridged D is positive definite");
    let logdet = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    (chol.inverse(), logdet, true)
}

pub fn fit(ds: &PanelDataset, predictors: &[String], params: &MerfParams) -> Result<MerfModel> {
    let m = ds.subjects().len();
    if m < 2 {
        return Err(Error::TooFewClusters(2, m));
    }
    let x = ds.features(predictors)?;
    params.validate(x.n_cols())?;
    let y = ds.responses();
    let n = y.len();
    let waves = ds.waves();
    let q = params.random.q();
    let clusters: Vec<ClusterData> = ds
        .subject_ranges()
        .into_iter()
        .map(|rows| ClusterData { z: params.random.z_matrix(&waves[rows.clone()]), rows })
        .collect();

    let var_y = population_variance(&y);
    let floor = 1e-10 * var_y.max(1.0);
    let mut sigma2 = (var_y / 2.0).max(floor);
    let mut d = if params.freeze_random_effects {
        DMatrix::zeros(q, q)
    } else {
        DMatrix::identity(q, q) * (var_y / 2.0).max(floor)
    };
    let mut b: Vec<DVector<f64>> = vec![DVector::zeros(q); m];
    let mut gll_trace: Vec<f64> = Vec::new();
    let mut ridge_iterations = Vec::new();
    let mut converged = false;
    let mut last: Option<(Forest, Vec<f64>)> = None;

    for r in 0..params.n_iter {
        let mut target = y.clone();
        for (c, bi) in clusters.iter().zip(&b) {
            let shift = &c.z * bi;
            for (k, i) in c.rows.clone().enumerate() {
                target[i] -= shift[k];
            }
        }
        let forest_params = ForestParams { seed: params.iteration_seed(r), ..params.forest.clone() };
        let forest = forest::fit(&x, &target, &forest_params)?;
        let fhat = forest.oob_predict(&x).predictions;

        let gll = if params.freeze_random_effects {
            let sse: f64 = y.iter().zip(&fhat).map(|(a, f)| (a - f).powi(2)).sum();
            sigma2 = (sse / n as f64).max(floor);
            sse / sigma2 + n as f64 * sigma2.ln()
        } else {
            let mut new_b = Vec::with_capacity(m);
            let mut eps_all = Vec::with_capacity(m);
            let mut acc_s2 = 0.0;
            let mut acc_d = DMatrix::zeros(q, q);
            for c in &clusters {
                let ni = c.rows.len();
                let resid = DVector::from_iterator(ni, c.rows.clone().map(|i| y[i] - fhat[i]));
                let v = &c.z * &d * c.z.transpose() + DMatrix::identity(ni, ni) * sigma2;
                let v_inv = Cholesky::new(v).ok_or(Error::SingularDesign)?.inverse();
                let dzt = &d * c.z.transpose();
                let bi = &dzt * &v_inv * &resid;
                let eps = &resid - &c.z * &bi;
                acc_s2 += eps.norm_squared() + sigma2 * (ni as f64 - sigma2 * v_inv.trace());
                acc_d += &bi * bi.transpose() + &d - &dzt * &v_inv * dzt.transpose();
                new_b.push(bi);
                eps_all.push(eps);
            }
            sigma2 = (acc_s2 / n as f64).max(floor);
            d = acc_d / m as f64;
            d = (&d + d.transpose()) * 0.5;
            b = new_b;
            let (d_inv, logdet, ridged) = d_inverse(&d);
            if ridged {
                log::debug!("MERF iteration {r}: D singular, ridge {D_RIDGE} added");
                ridge_iterations.push(r);
            }
            clusters
                .iter()
                .zip(&b)
                .zip(&eps_all)
                .map(|((c, bi), eps)| {
                    eps.norm_squared() / sigma2
                        + (bi.transpose() * &d_inv * bi)[(0, 0)]
                        + logdet
                        + c.rows.len() as f64 * sigma2.ln()
                })
                .sum()
        };
        let prev = gll_trace.last().copied();
        gll_trace.push(gll);
        last = Some((forest, fhat));
        if let Some(prev) = prev {
            if (gll - prev).abs() / (1.0 + prev.abs()) < params.gll_tol {
                converged = true;
                break;
            }
        }
    }
    if !converged {
        log::warn!("MERF reached {} iterations without meeting the GLL tolerance", params.n_iter);
    }
    let (forest, fhat) = last.expect("n_iter >= 1");
    let vc = VarianceComponents {
        d: (0..q).map(|i| (0..q).map(|j| d[(i, j)]).collect()).collect(),
        sigma2,
        phi: 0.0,
    };
    let design = LmmDesign::from_dataset(ds, DMatrix::from_column_slice(n, 1, &fhat));
    let loglik = lmm::marginal_loglik(&design, &params.random, &[1.0], &vc)?;
    let b = ds
        .subjects()
        .iter()
        .cloned()
        .zip(b.iter().map(|v| v.iter().copied().collect()))
        .collect();
    Ok(MerfModel {
        predictors: predictors.to_vec(),
        forest,
        random: params.random.clone(),
        vc,
        b,
        n_iter_run: gll_trace.len(),
        gll_trace,
        converged,
        loglik,
        ridge_iterations,
        params: params.clone(),
    })
}

impl MerfModel {
    /// Full-forest prediction plus the cluster's random effect when known.
    pub fn predict_row(&self, row: &[Option<f64>], wave: u32, cluster: Option<&str>) -> Result<f64> {
        let fixed = self.forest.predict(row)?;
        let random = cluster
            .and_then(|c| self.b.get(c))
            .map_or(0.0, |b| self.random.z_row(wave).iter().zip(b).map(|(z, b)| z * b).sum::<f64>());
        Ok(fixed + random)
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

    /// Forest member whose predictions on `x` deviate least (mean absolute
    /// difference) from the full forest; the first such member on ties.
    pub fn representative_tree(&self, x: &FeatureMatrix) -> &Tree {
        let full = self.forest.predict_matrix(x);
        let mut best = (0, f64::INFINITY);
        for (t, tree) in self.forest.trees().iter().enumerate() {
            let dev = mae(&tree.predict_matrix(x), &full).unwrap_or(f64::INFINITY);
            if dev < best.1 {
                best = (t, dev);
            }
        }
        &self.forest.trees()[best.0]
    }

    pub fn to_json(&self) -> String {
        model_io::to_json(MERF_FORMAT, self)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        model_io::from_json(MERF_FORMAT, text)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MerfGrid {
    pub n_trees: Vec<usize>,
    pub max_depth: Vec<usize>,
    pub n_iter: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub n_trees: usize,
    pub max_depth: usize,
    pub n_iter: usize,
    pub mae: f64,
}

/// Subject-grouped k-fold CV over every grid cell. Test subjects are unseen,
/// so scoring uses the forest part alone. Ties go to fewer trees, then
/// smaller depth, then fewer iterations.
pub fn grid_search(
    ds: &PanelDataset,
    predictors: &[String],
    base: &MerfParams,
    grid: &MerfGrid,
    k: usize,
    seed: u64,
) -> Result<(MerfParams, Vec<GridRow>)> {
    if grid.n_trees.is_empty() || grid.max_depth.is_empty() || grid.n_iter.is_empty() {
        return Err(Error::InvalidParams("grid must be nonempty in every dimension".into()));
    }
    let folds = make_folds(ds, k, FoldMode::SubjectGrouped, seed)?.row_folds(ds);
    let mut rows = Vec::new();
    for &n_trees in &grid.n_trees {
        for &max_depth in &grid.max_depth {
            for &n_iter in &grid.n_iter {
                let params = MerfParams {
                    forest: ForestParams { n_trees, max_depth, ..base.forest.clone() },
                    n_iter,
                    ..base.clone()
                };
                let mut abs_sum = 0.0;
                for f in 0..k {
                    let (test, train): (Vec<usize>, Vec<usize>) = (0..ds.n_rows()).partition(|&i| folds[i] == f);
                    let model = fit(&ds.select_rows(&train), predictors, &params)?;
                    let test_ds = ds.select_rows(&test);
                    let pred = model.predict(&test_ds)?;
                    abs_sum += mae(&pred.values, &test_ds.responses())? * test.len() as f64;
                }
                rows.push(GridRow { n_trees, max_depth, n_iter, mae: abs_sum / ds.n_rows() as f64 });
            }
        }
    }
    let best = rows
        .iter()
        .min_by(|a, b| {
            a.mae
                .total_cmp(&b.mae)
                .then(a.n_trees.cmp(&b.n_trees))
                .then(a.max_depth.cmp(&b.max_depth))
                .then(a.n_iter.cmp(&b.n_iter))
        })
        .expect("nonempty grid");
    let params = MerfParams {
        forest: ForestParams { n_trees: best.n_trees, max_depth: best.max_depth, ..base.forest.clone() },
        n_iter: best.n_iter,
        ..base.clone()
    };
    Ok((params, rows))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthgen::{generate, preset};

    fn small(seed: u64) -> (PanelDataset, Vec<String>) {
        let spec = preset("tree-2split").unwrap().with_subjects(30).with_seed(seed);
        let (ds, _) = generate(&spec).unwrap();
        let names = ds.variable_names().to_vec();
        (ds, names)
    }

    fn quick() -> MerfParams {
        MerfParams { forest: ForestParams { n_trees: 30, ..Default::default() }, n_iter: 20, ..Default::default() }
    }

    #[test]
    fn frozen_effects_reduce_to_forest() {
        let (ds, names) = small(1);
        let params = MerfParams { n_iter: 1, freeze_random_effects: true, ..quick() };
        let model = fit(&ds, &names, &params).unwrap();
        let x = ds.features(&names).unwrap();
        let plain = forest::fit(&x, &ds.responses(), model.forest.params()).unwrap();
        assert_eq!(model.predict(&ds).unwrap().values, plain.predict_matrix(&x));
        assert!(model.b.values().all(|b| b.iter().all(|v| *v == 0.0)));
    }

    #[test]
    fn seeded_fit_repeats_and_round_trips() {
        let (ds, names) = small(2);
        let a = fit(&ds, &names, &quick()).unwrap();
        let b = fit(&ds, &names, &quick()).unwrap();
        assert_eq!(a, b);
        assert_eq!(MerfModel::from_json(&a.to_json()).unwrap(), a);
        assert_eq!(a.gll_trace.len(), a.n_iter_run);
        assert!(a.gll_trace.iter().all(|g| g.is_finite()));
    }

    #[test]
    fn predict_adds_effect() {
        let (ds, names) = small(3);
        let mut model = fit(&ds, &names, &MerfParams { n_iter: 2, ..quick() }).unwrap();
        let row: Vec<Option<f64>> = ds.row_values(0, &names).unwrap();
        let forest_part = model.forest.predict(&row).unwrap();
        model.b.insert("known".into(), vec![0.8]);
        assert!((model.predict_row(&row, 0, Some("known")).unwrap() - (forest_part + 0.8)).abs() < 1e-12);
        assert_eq!(model.predict_row(&row, 0, Some("unknown")).unwrap(), forest_part);
    }

    #[test]
    fn representative_is_minimal() {
        let (ds, names) = small(4);
        let model = fit(&ds, &names, &MerfParams { n_iter: 2, ..quick() }).unwrap();
        let x = ds.features(&names).unwrap();
        let full = model.forest.predict_matrix(&x);
        let rep = model.representative_tree(&x);
        let best = mae(&rep.predict_matrix(&x), &full).unwrap();
        for t in model.forest.trees() {
            assert!(best <= mae(&t.predict_matrix(&x), &full).unwrap());
        }
    }

    #[test]
    fn single_cell_grid() {
        let (ds, names) = small(5);
        let grid = MerfGrid { n_trees: vec![10], max_depth: vec![2], n_iter: vec![3] };
        let (best, rows) = grid_search(&ds, &names, &quick(), &grid, 3, 1).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(best.forest.n_trees, 10);
        assert_eq!(best.forest.max_depth, 2);
        assert_eq!(best.n_iter, 3);
        assert!(rows[0].mae.is_finite());
    }

    #[test]
    fn ar1_rejected() {
        let (ds, names) = small(6);
        let params = MerfParams { random: RandomSpec::intercept().with_correlation(Correlation::Ar1), ..quick() };
        assert!(matches!(fit(&ds, &names, &params), Err(Error::InvalidParams(_))));
    }
}
