use mixedtrees::dataset::write_csv;
use mixedtrees::synthgen::{self, generate, preset, DgpSpec, DgpTruth, Dropout, PRESETS};

fn csv_bytes(spec: &DgpSpec) -> Vec<u8> {
    let (ds, _) = generate(spec).unwrap();
    let mut out = Vec::new();
    write_csv(&ds, &mut out, b',').unwrap();
    out
}

#[test]
fn same_seed_same_bytes() {
    for name in PRESETS {
        let spec = preset(name).unwrap().with_seed(21);
        assert_eq!(csv_bytes(&spec), csv_bytes(&spec), "{name}");
        assert_ne!(csv_bytes(&spec), csv_bytes(&spec.clone().with_seed(22)), "{name}");
    }
}

/// Pooled lag-1 autocorrelation of the residual noise within subjects.
fn lag1(truth: &DgpTruth, subjects: &[std::ops::Range<usize>]) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for r in subjects {
        let e = &truth.noise[r.clone()];
        for t in 1..e.len() {
            num += e[t] * e[t - 1];
        }
        den += e.iter().map(|v| v * v).sum::<f64>();
    }
    num / den * (truth.noise.len() as f64 / (truth.noise.len() - subjects.len()) as f64)
}

fn autocorrelation(phi: f64) -> f64 {
    let mut spec = preset("ar1-strong").unwrap().with_seed(5);
    spec.m = 10_000;
    spec.phi = phi;
    let (ds, truth) = generate(&spec).unwrap();
    lag1(&truth, &ds.subject_ranges())
}

#[test]
fn independent_noise_has_no_lag1_correlation() {
    let r = autocorrelation(0.0);
    assert!((-0.05..=0.05).contains(&r), "{r}");
}

#[test]
fn ar1_noise_has_the_requested_correlation() {
    let r = autocorrelation(0.6);
    assert!((0.5..=0.7).contains(&r), "{r}");
}

#[test]
fn stationary_noise_keeps_its_scale() {
    let mut spec = preset("ar1-strong").unwrap().with_seed(6);
    spec.m = 4000;
    let (_, truth) = generate(&spec).unwrap();
    let n = truth.noise.len() as f64;
    let var = truth.noise.iter().map(|v| v * v).sum::<f64>() / n;
    assert!((var - spec.sigma * spec.sigma).abs() < 0.05, "{var}");
}

#[test]
fn fixed_part_and_effects_add_up() {
    let spec = preset("linear-interaction").unwrap().with_seed(8);
    let (ds, truth) = generate(&spec).unwrap();
    for (i, r) in ds.rows().iter().enumerate() {
        let e = &truth.effects[&r.subject];
        let y = truth.fixed[i] + e.intercept + e.slope * r.wave as f64 + truth.noise[i];
        assert!((y - r.response).abs() < 1e-12);
    }
    // law of large numbers on the random intercepts
    let mut big = spec.clone().with_subjects(5000);
    big.sigma_b = 2.0;
    let (_, truth) = generate(&big).unwrap();
    let b: Vec<f64> = truth.effects.values().map(|e| e.intercept).collect();
    let mean = b.iter().sum::<f64>() / b.len() as f64;
    let var = b.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / b.len() as f64;
    assert!(mean.abs() < 0.1 && (var - 4.0).abs() < 0.3, "{mean} {var}");
}

#[test]
fn retention_dropout_is_monotone() {
    let mut spec = preset("null").unwrap().with_seed(3);
    spec.dropout = Dropout::Retention(0.7);
    let (ds, _) = generate(&spec).unwrap();
    for r in ds.subject_ranges() {
        let waves: Vec<u32> = ds.rows()[r].iter().map(|o| o.wave).collect();
        assert_eq!(waves, (0..waves.len() as u32).collect::<Vec<_>>());
    }
    assert!(ds.n_rows() < spec.m * spec.waves);
}

#[test]
fn paper_shape_visit_counts() {
    let (ds, _) = generate(&preset("paper-shape").unwrap().with_seed(1)).unwrap();
    assert_eq!(ds.n_rows(), 707);
    assert_eq!(ds.variable_names().len(), 13);
    let counts: Vec<usize> = ds.wave_counts().values().copied().collect();
    assert_eq!(counts, vec![185, 150, 137, 122, 113]);
}

#[test]
fn unknown_preset_rejected() {
    assert!(matches!(synthgen::preset("nope"), Err(mixedtrees::Error::UnknownPreset(_))));
}
