mod common;

use common::*;
use mixedtrees::lmm::{self, Correlation, FixedSpec, LmmDesign, LmmFit, LmmOptions, RandomSpec};
use mixedtrees::PanelDataset;
use nalgebra::{DMatrix, DVector};
use rand::Rng;

fn unbalanced(seed: u64, m: usize, sigma_b: f64) -> PanelDataset {
    let mut r = rng(seed);
    let mut rows = Vec::new();
    for i in 0..m {
        let b = sigma_b * normal(&mut r);
        for w in 0..r.random_range(1..=6u32) {
            let x1 = normal(&mut r);
            let x2: f64 = r.random::<f64>() * 4.0;
            rows.push((format!("s{i:03}"), w, 2.0 + x1 - 0.5 * x2 + b + normal(&mut r), vec![x1, x2]));
        }
    }
    panel(rows, &["x1", "x2"])
}

fn fixed() -> FixedSpec {
    FixedSpec::parse(&["x1", "x2", "x1*x2"]).unwrap()
}

#[test]
fn em_log_likelihood_never_drops() {
    for seed in 0..15 {
        let ds = unbalanced(seed, 40, [0.0, 0.5, 2.0][seed as usize % 3]);
        for random in [RandomSpec::intercept(), RandomSpec::intercept_slope()] {
            let fit = lmm::fit_ml(&ds, &fixed(), &random, &LmmOptions::default()).unwrap();
            for w in fit.trace.windows(2) {
                assert!(w[1] >= w[0] - 1e-8, "seed {seed}: {} -> {}", w[0], w[1]);
            }
            assert!(fit.vc.is_valid());
        }
    }
}

fn ols(x: &DMatrix<f64>, y: &[f64]) -> (DVector<f64>, f64) {
    let y = DVector::from_column_slice(y);
    let beta = (x.transpose() * x).cholesky().unwrap().solve(&(x.transpose() * &y));
    let rss = (&y - x * &beta).norm_squared();
    (beta, rss)
}

#[test]
fn zero_variance_reduces_to_ols() {
    for seed in 0..10 {
        let ds = unbalanced(100 + seed, 30, 1.0);
        let opts = LmmOptions { fix_d_zero: true, ..Default::default() };
        let fit = lmm::fit_ml(&ds, &fixed(), &RandomSpec::intercept(), &opts).unwrap();
        let x = fit.design_matrix(&ds).unwrap();
        let (beta, rss) = ols(&x, &ds.responses());
        for (a, b) in fit.beta.iter().zip(beta.iter()) {
            assert!((a - b).abs() < 1e-8, "seed {seed}");
        }
        let n = ds.n_rows() as f64;
        let s2 = rss / n;
        let iid = -0.5 * n * ((2.0 * std::f64::consts::PI * s2).ln() + 1.0);
        assert!((fit.loglik - iid).abs() < 1e-8 * iid.abs());
        assert!((fit.vc.sigma2 - s2).abs() < 1e-10);
    }
}

#[test]
fn blup_matches_scalar_shrinkage() {
    for seed in 0..10 {
        let ds = unbalanced(200 + seed, 25, 1.5);
        let fit = lmm::fit_ml(&ds, &fixed(), &RandomSpec::intercept(), &LmmOptions::default()).unwrap();
        let pop = fit.predict(&ds, false).unwrap();
        for range in ds.subject_ranges() {
            let s = &ds.rows()[range.start].subject;
            let resid: Vec<f64> = range.clone().map(|i| ds.rows()[i].response - pop.values[i]).collect();
            let want = blup_scalar(fit.vc.intercept_variance(), fit.vc.sigma2, &resid);
            assert!((fit.b[s][0] - want).abs() < 1e-9);
            let sub = ds.select_rows(&range.clone().collect::<Vec<_>>());
            assert!((fit.blup(s, &sub).unwrap()[0] - want).abs() < 1e-9);
        }
    }
}

#[test]
fn random_effects_lower_training_sse() {
    for seed in 0..10 {
        let ds = unbalanced(300 + seed, 30, [0.2, 1.0, 3.0][seed as usize % 3]);
        for random in [RandomSpec::intercept(), RandomSpec::intercept_slope()] {
            let fit = lmm::fit_ml(&ds, &fixed(), &random, &LmmOptions::default()).unwrap();
            let y = ds.responses();
            let sse = |p: &[f64]| p.iter().zip(&y).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
            let with = fit.predict(&ds, true).unwrap();
            assert!(with.seen.iter().all(|s| *s));
            assert!(sse(&with.values) <= sse(&fit.predict(&ds, false).unwrap().values) + 1e-9);
        }
    }
}

#[test]
fn ar1_correlation_is_positive_definite() {
    // the correlation matrix is checked through the likelihood: finite for
    // every |phi| <= 0.99 and up to 10 waves, including gaps
    let mut r = rng(9);
    for t in 1..=10u32 {
        let mut rows = Vec::new();
        for i in 0..6 {
            let mut w = 0;
            for _ in 0..t {
                rows.push((format!("c{i}"), w, normal(&mut r), vec![0.0]));
                w += r.random_range(1..=2);
            }
        }
        let ds = panel(rows, &["x"]);
        let design = LmmDesign::from_dataset(&ds, DMatrix::from_element(ds.n_rows(), 1, 1.0));
        let random = RandomSpec::intercept().with_correlation(Correlation::Ar1);
        for phi in [-0.99, -0.5, 0.0, 0.3, 0.9, 0.99] {
            let vc = lmm::VarianceComponents { d: vec![vec![0.5]], sigma2: 1.0, phi };
            let ll = lmm::marginal_loglik(&design, &random, &[0.0], &vc).unwrap();
            assert!(ll.is_finite(), "T={t} phi={phi}");
        }
    }
}

#[test]
fn ar1_refit_is_nested_and_detects_correlation() {
    let mut spec = mixedtrees::synthgen::preset("ar1-strong").unwrap().with_seed(77);
    spec.m = 150;
    let (ds, _) = mixedtrees::synthgen::generate(&spec).unwrap();
    let opts = LmmOptions::default();
    let null = lmm::fit_ml(&ds, &FixedSpec::main_effects(&["x1".into()]), &RandomSpec::intercept(), &opts).unwrap();
    let design = LmmDesign::from_dataset(&ds, null.design_matrix(&ds).unwrap());
    let alt = lmm::refit_ar1(&design, &null, &opts).unwrap();
    assert!(alt.loglik >= null.loglik - 1e-8);
    assert!((alt.vc.phi - 0.6).abs() < 0.15, "phi {}", alt.vc.phi);
    let lrt = lmm::lr_test(&null, &alt, 1).unwrap();
    assert!(lrt.p < 1e-6);
}

#[test]
fn json_round_trip_and_wald_table() {
    let ds = unbalanced(400, 30, 1.0);
    let fit = lmm::fit_ml(&ds, &fixed(), &RandomSpec::intercept(), &LmmOptions::default()).unwrap();
    let back = LmmFit::from_json(&fit.to_json()).unwrap();
    assert_eq!(back, fit);
    assert_eq!(back.predict(&ds, true).unwrap(), fit.predict(&ds, true).unwrap());
    let table = fit.wald_table();
    assert_eq!(table.len(), 4);
    for row in &table {
        assert!((row.t - row.b / row.se).abs() < 1e-12);
        assert!((0.0..=1.0).contains(&row.p));
    }
    let csv = lmm::wald_csv(&table);
    assert!(csv.starts_with("term,b,se,t,p\n"));
    assert_eq!(csv.lines().count(), 5);
}

#[test]
fn balanced_one_way_matches_anova() {
    for seed in 0..5 {
        let mut r = rng(500 + seed);
        let mut groups = Vec::new();
        let mut rows = Vec::new();
        for i in 0..20 {
            let b = normal(&mut r);
            let g: Vec<f64> = (0..4).map(|_| 1.0 + b + normal(&mut r)).collect();
            for (w, &v) in g.iter().enumerate() {
                rows.push((format!("g{i:02}"), w as u32, v, vec![0.0]));
            }
            groups.push(g);
        }
        let ds = panel(rows, &["x"]);
        let opts = LmmOptions { tol: 1e-13, max_iter: 20_000, fix_d_zero: false };
        let fit = lmm::fit_ml(&ds, &FixedSpec::default(), &RandomSpec::intercept(), &opts).unwrap();
        let (mu, sb2, s2) = anova_ml(&groups);
        assert!((fit.beta[0] - mu).abs() < 1e-6);
        assert!((fit.vc.intercept_variance() - sb2).abs() < 1e-6);
        assert!((fit.vc.sigma2 - s2).abs() < 1e-6);
    }
}
