//! Brute-force and closed-form oracles shared by the integration tests and
//! the acceptance run.
#![allow(dead_code)]

use mixedtrees::cart::{CpEntry, CpTable, SplitCandidate, TreeParams};
use mixedtrees::dataset::{FeatureMatrix, Observation, PanelDataset};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn sse(values: &[f64]) -> f64 {
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    values.iter().map(|v| (v - mean).powi(2)).sum()
}

/// Every (feature, midpoint) pair scored by recomputing both child SSEs.
pub fn brute_force_split(x: &FeatureMatrix, y: &[f64], params: &TreeParams, root_sse: f64) -> Option<SplitCandidate> {
    let n = y.len();
    if n < params.min_split || n < 2 * params.min_leaf || y.iter().all(|v| *v == y[0]) {
        return None;
    }
    let parent = sse(y);
    let mut best: Option<SplitCandidate> = None;
    for j in 0..x.n_cols() {
        let col = x.column(j);
        let mut distinct: Vec<f64> = col.to_vec();
        distinct.sort_by(f64::total_cmp);
        distinct.dedup();
        for w in distinct.windows(2) {
            let threshold = 0.5 * (w[0] + w[1]);
            let left: Vec<f64> = (0..n).filter(|&i| col[i] < threshold).map(|i| y[i]).collect();
            let right: Vec<f64> = (0..n).filter(|&i| col[i] >= threshold).map(|i| y[i]).collect();
            if left.len() < params.min_leaf || right.len() < params.min_leaf {
                continue;
            }
            let reduction = parent - sse(&left) - sse(&right);
            let better = match &best {
                None => true,
                Some(b) => reduction > b.reduction + 1e-12 * b.reduction.abs(),
            };
            if better {
                best = Some(SplitCandidate { feature: j, threshold, reduction });
            }
        }
    }
    best.filter(|b| b.reduction > 0.0 && b.reduction > params.cp * root_sse)
}

/// Small random regression problem; some columns are integer-valued so
/// that tied feature values occur.
pub fn random_problem(rng: &mut ChaCha8Rng, n: usize, p: usize) -> (FeatureMatrix, Vec<f64>) {
    let integer: Vec<bool> = (0..p).map(|_| rng.random_bool(0.4)).collect();
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|_| {
            (0..p)
                .map(|j| if integer[j] { rng.random_range(0..6) as f64 } else { rng.random::<f64>() * 10.0 })
                .collect()
        })
        .collect();
    let y = rows
        .iter()
        .map(|r| if r[0] > 5.0 { 3.0 } else { 0.0 } + r.iter().sum::<f64>() * 0.1 + rng.random::<f64>())
        .collect();
    let names = (1..=p).map(|j| format!("x{j}")).collect();
    (FeatureMatrix::from_rows(names, &rows), y)
}

/// One-SE choice by direct scan: smallest mean error (first on ties), then
/// the first entry (largest cp) within one SE of it.
pub fn one_se_scan(table: &CpTable) -> usize {
    let e = &table.entries;
    let mut min = 0;
    for i in 1..e.len() {
        if e[i].cv_error_mean < e[min].cv_error_mean {
            min = i;
        }
    }
    let bound = e[min].cv_error_mean + e[min].cv_error_se;
    (0..e.len()).find(|&i| e[i].cv_error_mean <= bound).unwrap()
}

pub fn random_cp_table(rng: &mut ChaCha8Rng, cps: &[f64], leaves: &[usize]) -> CpTable {
    let entries = cps
        .iter()
        .zip(leaves)
        .map(|(&cp, &n_leaves)| CpEntry {
            cp,
            n_leaves,
            // coarse values make exact ties with the bound likely
            cv_error_mean: rng.random_range(0..8) as f64 * 0.25 + 1.0,
            cv_error_se: rng.random_range(0..4) as f64 * 0.25,
        })
        .collect();
    CpTable { entries }
}

/// Balanced one-way random-effects ML estimates: (μ, σ_b², σ²).
pub fn anova_ml(groups: &[Vec<f64>]) -> (f64, f64, f64) {
    let m = groups.len() as f64;
    let n = groups[0].len() as f64;
    let means: Vec<f64> = groups.iter().map(|g| g.iter().sum::<f64>() / n).collect();
    let grand = means.iter().sum::<f64>() / m;
    let ssw: f64 = groups.iter().zip(&means).map(|(g, mu)| g.iter().map(|v| (v - mu).powi(2)).sum::<f64>()).sum();
    let ssb: f64 = n * means.iter().map(|mu| (mu - grand).powi(2)).sum::<f64>();
    let sigma2 = ssw / (m * (n - 1.0));
    let sigma_b2 = (ssb / m - sigma2) / n;
    if sigma_b2 < 0.0 {
        // boundary: the likelihood is maximized at σ_b² = 0, where all rows are iid
        (grand, 0.0, (ssw + ssb) / (m * n))
    } else {
        (grand, sigma_b2, sigma2)
    }
}

/// Scalar BLUP of a random intercept under independent errors.
pub fn blup_scalar(sigma_b2: f64, sigma2: f64, residuals: &[f64]) -> f64 {
    let n = residuals.len() as f64;
    let mean = residuals.iter().sum::<f64>() / n;
    sigma_b2 / (sigma_b2 + sigma2 / n) * mean
}

/// Panel from (subject, wave, y, predictors) tuples.
pub fn panel(rows: Vec<(String, u32, f64, Vec<f64>)>, names: &[&str]) -> PanelDataset {
    let obs = rows
        .into_iter()
        .map(|(s, w, y, x)| Observation { subject: s, wave: w, response: y, predictors: x.into_iter().map(Some).collect() })
        .collect();
    PanelDataset::new("subject", "wave", "y", names.iter().map(|s| s.to_string()).collect(), obs).unwrap()
}

pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
