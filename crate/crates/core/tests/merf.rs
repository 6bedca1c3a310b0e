use mixedtrees::forest::ForestParams;
use mixedtrees::merf::{self, MerfModel, MerfParams, SeedSchedule};
use mixedtrees::synthgen;
use mixedtrees::PanelDataset;

fn data(preset: &str, seed: u64, m: Option<usize>) -> (PanelDataset, Vec<String>) {
    let mut spec = synthgen::preset(preset).unwrap().with_seed(seed);
    if let Some(m) = m {
        spec = spec.with_subjects(m);
    }
    let (ds, _) = synthgen::generate(&spec).unwrap();
    let names = ds.variable_names().to_vec();
    (ds, names)
}

fn params(n_trees: usize, n_iter: usize) -> MerfParams {
    MerfParams { forest: ForestParams { n_trees, ..Default::default() }, n_iter, ..Default::default() }
}

#[test]
fn frozen_effects_predict_like_the_forest() {
    let (ds, names) = data("tree-2split", 1, Some(40));
    let model = merf::fit(&ds, &names, &MerfParams { freeze_random_effects: true, ..params(30, 5) }).unwrap();
    let x = ds.features(&names).unwrap();
    assert_eq!(model.predict(&ds).unwrap().values, model.forest.predict_matrix(&x));
    // and for rows of clusters the model never saw
    let (other, _) = data("tree-2split", 2, Some(10));
    let mut obs = other.rows().to_vec();
    for o in &mut obs {
        o.subject = format!("x{}", o.subject);
    }
    let other = PanelDataset::new("subject", "wave", "BDI", names.clone(), obs).unwrap();
    let pred = model.predict(&other).unwrap();
    assert!(pred.seen.iter().all(|s| !s));
    assert_eq!(pred.values, model.forest.predict_matrix(&other.features(&names).unwrap()));
    assert_eq!(model.vc.intercept_variance(), 0.0);
}

#[test]
fn random_intercepts_obey_the_shrinkage_bound() {
    for seed in 0..5 {
        let (ds, names) = data("tree-2split", 10 + seed, Some(60));
        let model = merf::fit(&ds, &names, &MerfParams { seed, ..params(40, 15) }).unwrap();
        let x = ds.features(&names).unwrap();
        let fhat = model.forest.oob_predict(&x).predictions;
        for range in ds.subject_ranges() {
            let s = &ds.rows()[range.start].subject;
            let mean = range.clone().map(|i| ds.rows()[i].response - fhat[i]).sum::<f64>() / range.len() as f64;
            assert!(model.b[s][0].abs() <= mean.abs() + 1e-12, "seed {seed} subject {s}");
        }
    }
}

#[test]
fn converged_fits_stay_stable_afterwards() {
    for seed in 0..3 {
        let (ds, names) = data("paper-shape", 40 + seed, None);
        let base = MerfParams { seed, ..MerfParams::default() };
        let model = merf::fit(&ds, &names, &base).unwrap();
        assert!(model.converged);
        assert!(model.gll_trace.iter().all(|g| g.is_finite()));
        // keep iterating five more steps past the stopping point
        let longer = MerfParams { n_iter: model.n_iter_run + 5, gll_tol: f64::MIN_POSITIVE, ..base.clone() };
        let extended = merf::fit(&ds, &names, &longer).unwrap();
        let trace = &extended.gll_trace;
        assert_eq!(&trace[..model.n_iter_run], model.gll_trace.as_slice());
        for w in trace[model.n_iter_run - 1..].windows(2) {
            let rel = (w[1] - w[0]).abs() / (1.0 + w[0].abs());
            assert!(rel < 10.0 * base.gll_tol, "seed {seed}: relative change {rel}");
        }
    }
}

#[test]
fn both_seed_schedules_are_reproducible() {
    let (ds, names) = data("tree-2split", 3, Some(40));
    for schedule in [SeedSchedule::Fixed, SeedSchedule::PerIteration] {
        let p = MerfParams { seed_schedule: schedule, seed: 9, ..params(25, 6) };
        let a = merf::fit(&ds, &names, &p).unwrap();
        let b = merf::fit(&ds, &names, &p).unwrap();
        assert_eq!(a.to_json(), b.to_json());
        assert_eq!(MerfModel::from_json(&a.to_json()).unwrap(), a);
    }
}

#[test]
fn grid_search_scores_every_cell() {
    let (ds, names) = data("tree-2split", 4, Some(30));
    let grid = merf::MerfGrid { n_trees: vec![10, 20], max_depth: vec![2, 3], n_iter: vec![3] };
    let (best, rows) = merf::grid_search(&ds, &names, &params(10, 3), &grid, 3, 1).unwrap();
    assert_eq!(rows.len(), 4);
    let min = rows.iter().map(|r| r.mae).fold(f64::INFINITY, f64::min);
    let chosen = rows
        .iter()
        .find(|r| r.n_trees == best.forest.n_trees && r.max_depth == best.forest.max_depth)
        .unwrap();
    assert_eq!(chosen.mae, min);
}

#[test]
fn representative_tree_is_a_forest_member() {
    let (ds, names) = data("tree-2split", 5, Some(30));
    let model = merf::fit(&ds, &names, &params(20, 3)).unwrap();
    let x = ds.features(&names).unwrap();
    let rep = model.representative_tree(&x);
    assert!(model.forest.trees().iter().any(|t| t == rep));
}
