mod common;

use common::*;
use mixedtrees::forest::{self, Forest, ForestParams};
use rand::Rng;

#[test]
fn oob_uses_only_trees_without_the_row() {
    for seed in 0..40 {
        let mut r = rng(seed);
        let n = r.random_range(3..=20);
        let n_trees = r.random_range(1..=10);
        let (x, y) = random_problem(&mut r, n, 2);
        let params = ForestParams { n_trees, max_depth: 3, min_leaf: 1, seed, ..Default::default() };
        let f = forest::fit(&x, &y, &params).unwrap();
        let oob = f.oob_predict(&x);
        for i in 0..n {
            let users: Vec<usize> = (0..n_trees).filter(|&t| f.inbag()[t][i] == 0).collect();
            assert_eq!(oob.n_oob_trees[i], users.len());
            if users.is_empty() {
                assert!(oob.fallback_rows.contains(&i));
                assert_eq!(oob.predictions[i], f.predict_dense(&x.row(i)));
            } else {
                let manual =
                    users.iter().map(|&t| f.trees()[t].predict_dense(&x.row(i))).sum::<f64>() / users.len() as f64;
                assert!((oob.predictions[i] - manual).abs() < 1e-12, "seed {seed} row {i}");
            }
        }
        for t in 0..n_trees {
            assert_eq!(f.inbag()[t].iter().map(|&c| c as usize).sum::<usize>(), n);
        }
    }
}

#[test]
fn prediction_is_the_tree_average() {
    let mut r = rng(1);
    let (x, y) = random_problem(&mut r, 60, 3);
    let f = forest::fit(&x, &y, &ForestParams { n_trees: 3, seed: 4, ..Default::default() }).unwrap();
    for i in 0..x.n_rows() {
        let row = x.row(i);
        let t = f.trees();
        let manual = (t[0].predict_dense(&row) + t[1].predict_dense(&row) + t[2].predict_dense(&row)) / 3.0;
        assert_eq!(f.predict_dense(&row), manual);
    }
}

#[test]
fn seed_data_and_params_fix_the_forest() {
    let mut r = rng(2);
    let (x, y) = random_problem(&mut r, 150, 4);
    let params = ForestParams { n_trees: 40, mtry: Some(2), seed: 99, ..Default::default() };
    let a = forest::fit(&x, &y, &params).unwrap();
    let b = forest::fit(&x, &y, &params).unwrap();
    assert_eq!(a.to_json(), b.to_json());
    let back = Forest::from_json(&a.to_json()).unwrap();
    assert_eq!(back, a);
    assert_eq!(back.predict_matrix(&x), a.predict_matrix(&x));
    let other = forest::fit(&x, &y, &ForestParams { seed: 100, ..params }).unwrap();
    assert_ne!(other.to_json(), a.to_json());
}

#[test]
fn importance_sums_to_one() {
    let mut r = rng(3);
    let (x, y) = random_problem(&mut r, 200, 4);
    let f = forest::fit(&x, &y, &ForestParams { n_trees: 20, ..Default::default() }).unwrap();
    let imp = f.importance();
    assert!((imp.iter().map(|(_, v)| v).sum::<f64>() - 1.0).abs() < 1e-12);
    assert!(imp.windows(2).all(|w| w[0].1 >= w[1].1));
}
