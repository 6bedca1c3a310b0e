//! Simulated longitudinal panels with known truth.
//!
//! `y_it = f(x_it) + b_i + s_i·t + ε_it`, where `ε` is a stationary AR(1)
//! series per subject with marginal sd `sigma`, `b_i ~ N(0, sigma_b²)` and the
//! optional slope `s_i ~ N(0, sigma_slope²)`. Dropout is monotone: once a
//! subject misses a wave it never returns. Covariates are drawn
//! independently of each other.

use std::collections::{BTreeMap, HashSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::{Observation, PanelDataset};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dropout {
    /// Everyone observed at every wave.
    None,
    /// Number of subjects still observed at each wave (non-increasing).
    Counts(Vec<usize>),
    /// Probability that a subject present at wave t−1 is present at wave t.
    Retention(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dist {
    Normal { mean: f64, sd: f64 },
    Uniform { low: f64, high: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CovariateSpec {
    pub name: String,
    pub dist: Dist,
    #[serde(default)]
    pub clip: Option<[f64; 2]>,
    /// Redrawn each wave when true, otherwise fixed at the baseline draw.
    #[serde(default)]
    pub time_varying: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinearTerm {
    /// One variable (main effect) or two (product).
    pub vars: Vec<String>,
    pub coef: f64,
}

/// Split rules of a tree-shaped fixed part; `value >= threshold` goes right.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TreeRule {
    Leaf(f64),
    Split { var: String, threshold: f64, left: Box<TreeRule>, right: Box<TreeRule> },
}

impl TreeRule {
    fn eval(&self, lookup: &dyn Fn(&str) -> f64) -> f64 {
        match self {
            TreeRule::Leaf(v) => *v,
            TreeRule::Split { var, threshold, left, right } => {
                if lookup(var) >= *threshold {
                    right.eval(lookup)
                } else {
                    left.eval(lookup)
                }
            }
        }
    }

    pub fn leaf_values(&self) -> Vec<f64> {
        match self {
            TreeRule::Leaf(v) => vec![*v],
            TreeRule::Split { left, right, .. } => {
                let mut out = left.leaf_values();
                out.extend(right.leaf_values());
                out
            }
        }
    }

    fn vars(&self, out: &mut Vec<String>) {
        if let TreeRule::Split { var, left, right, .. } = self {
            out.push(var.clone());
            left.vars(out);
            right.vars(out);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FixedPart {
    /// `intercept + Σ coef · Π (x − center)`; variables without a center
    /// entry enter uncentered.
    Linear {
        intercept: f64,
        terms: Vec<LinearTerm>,
        #[serde(default)]
        center: BTreeMap<String, f64>,
    },
    Tree(TreeRule),
}

impl FixedPart {
    fn vars(&self) -> Vec<String> {
        let mut out = Vec::new();
        match self {
            FixedPart::Linear { terms, .. } => {
                for t in terms {
                    out.extend(t.vars.iter().cloned());
                }
            }
            FixedPart::Tree(rule) => rule.vars(&mut out),
        }
        out
    }

    fn eval(&self, lookup: &dyn Fn(&str) -> f64) -> f64 {
        match self {
            FixedPart::Linear { intercept, terms, center } => {
                intercept
                    + terms
                        .iter()
                        .map(|t| {
                            t.coef
                                * t.vars
                                    .iter()
                                    .map(|v| lookup(v) - center.get(v).copied().unwrap_or(0.0))
                                    .product::<f64>()
                        })
                        .sum::<f64>()
            }
            FixedPart::Tree(rule) => rule.eval(lookup),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DgpSpec {
    pub name: String,
    /// Number of subjects.
    pub m: usize,
    /// Maximum number of waves.
    pub waves: usize,
    pub dropout: Dropout,
    pub fixed_part: FixedPart,
    pub sigma_b: f64,
    #[serde(default)]
    pub sigma_slope: Option<f64>,
    #[serde(default)]
    pub phi: f64,
    pub sigma: f64,
    pub covariates: Vec<CovariateSpec>,
    pub response_name: String,
    pub seed: u64,
    #[serde(default)]
    pub notes: String,
}

impl DgpSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidSpec(msg));
        if self.m == 0 || self.waves == 0 {
            return bad("m and waves must be positive".into());
        }
        if !(self.sigma >= 0.0 && self.sigma_b >= 0.0) || self.sigma_slope.is_some_and(|s| !(s >= 0.0)) {
            return bad("standard deviations must be non-negative".into());
        }
        if !(self.phi.abs() < 1.0) {
            return bad("phi must lie in (-1, 1)".into());
        }
        match &self.dropout {
            Dropout::None => {}
            Dropout::Counts(c) => {
                if c.len() != self.waves {
                    return bad(format!("{} retention counts for {} waves", c.len(), self.waves));
                }
                if c[0] > self.m || c.windows(2).any(|w| w[1] > w[0]) {
                    return bad("retention counts must be non-increasing and at most m".into());
                }
            }
            Dropout::Retention(p) => {
                if !(0.0..=1.0).contains(p) {
                    return bad("retention probability must lie in [0, 1]".into());
                }
            }
        }
        let mut seen = HashSet::new();
        for c in &self.covariates {
            if !seen.insert(c.name.as_str()) {
                return bad(format!("duplicate covariate `{}`", c.name));
            }
            match c.dist {
                Dist::Normal { mean, sd } if !(mean.is_finite() && sd >= 0.0) => {
                    return bad(format!("bad normal parameters for `{}`", c.name))
                }
                Dist::Uniform { low, high } if !(low < high) => {
                    return bad(format!("bad uniform bounds for `{}`", c.name))
                }
                _ => {}
            }
            if let Some([lo, hi]) = c.clip {
                if !(lo <= hi) {
                    return bad(format!("bad clip range for `{}`", c.name));
                }
            }
        }
        if self.covariates.is_empty() {
            return bad("need at least one covariate".into());
        }
        for v in self.fixed_part.vars() {
            if !seen.contains(v.as_str()) {
                return bad(format!("fixed part references unknown covariate `{v}`"));
            }
        }
        if let FixedPart::Linear { terms, .. } = &self.fixed_part {
            if terms.iter().any(|t| t.vars.is_empty() || t.vars.len() > 2) {
                return bad("linear terms take one or two variables".into());
            }
        }
        Ok(())
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_subjects(mut self, m: usize) -> Self {
        self.m = m;
        if let Dropout::Counts(c) = &self.dropout {
            // keep the retention shape when resizing
            let scale = m as f64 / c[0].max(1) as f64;
            self.dropout = Dropout::Counts(c.iter().map(|&v| ((v as f64 * scale).round() as usize).min(m)).collect());
        }
        self
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let spec: DgpSpec = serde_json::from_str(text).map_err(|e| Error::InvalidSpec(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SubjectEffect {
    pub intercept: f64,
    pub slope: f64,
}

/// What the generator knows and the estimators must recover.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DgpTruth {
    pub effects: BTreeMap<String, SubjectEffect>,
    /// Noiseless fixed part, aligned with the dataset rows.
    pub fixed: Vec<f64>,
    /// Residual noise ε, aligned with the dataset rows.
    pub noise: Vec<f64>,
    pub spec: DgpSpec,
}

impl DgpTruth {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable")
    }
}

fn draw(rng: &mut ChaCha8Rng, c: &CovariateSpec) -> f64 {
    let v = match c.dist {
        Dist::Normal { mean, sd } => mean + sd * standard_normal(rng),
        Dist::Uniform { low, high } => rng.random_range(low..high),
    };
    match c.clip {
        Some([lo, hi]) => v.clamp(lo, hi),
        None => v,
    }
}

fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    Normal::new(0.0, 1.0).expect("unit normal").sample(rng)
}

pub fn generate(spec: &DgpSpec) -> Result<(PanelDataset, DgpTruth)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let width = spec.m.to_string().len().max(3);
    let ids: Vec<String> = (1..=spec.m).map(|i| format!("S{i:0width$}")).collect();

    // number of waves each subject is observed
    let mut n_waves = vec![spec.waves; spec.m];
    match &spec.dropout {
        Dropout::None => {}
        Dropout::Counts(counts) => {
            let mut order: Vec<usize> = (0..spec.m).collect();
            order.shuffle(&mut rng);
            for (rank, &s) in order.iter().enumerate() {
                n_waves[s] = counts.iter().take_while(|&&c| rank < c).count();
            }
        }
        Dropout::Retention(p) => {
            for nw in n_waves.iter_mut() {
                let mut t = 1;
                while t < spec.waves && rng.random::<f64>() < *p {
                    t += 1;
                }
                *nw = t;
            }
        }
    }

    let names: Vec<String> = spec.covariates.iter().map(|c| c.name.clone()).collect();
    let innovation_sd = spec.sigma * (1.0 - spec.phi * spec.phi).sqrt();
    let mut rows = Vec::new();
    let mut fixed = Vec::new();
    let mut noise = Vec::new();
    let mut effects = BTreeMap::new();
    for (s, id) in ids.iter().enumerate() {
        let intercept = spec.sigma_b * standard_normal(&mut rng);
        let slope = spec.sigma_slope.map_or(0.0, |sd| sd * standard_normal(&mut rng));
        let baseline: Vec<f64> = spec.covariates.iter().map(|c| draw(&mut rng, c)).collect();
        let mut eps = spec.sigma * standard_normal(&mut rng);
        // every wave is simulated so that dropout never changes the draws
        for t in 0..spec.waves {
            if t > 0 {
                eps = spec.phi * eps + innovation_sd * standard_normal(&mut rng);
            }
            let values: Vec<f64> = spec
                .covariates
                .iter()
                .zip(&baseline)
                .map(|(c, &b)| if c.time_varying && t > 0 { draw(&mut rng, c) } else { b })
                .collect();
            if t >= n_waves[s] {
                continue;
            }
            let lookup = |name: &str| values[names.iter().position(|n| n == name).expect("validated")];
            let f = spec.fixed_part.eval(&lookup);
            let y = f + intercept + slope * t as f64 + eps;
            fixed.push(f);
            noise.push(eps);
            rows.push(Observation {
                subject: id.clone(),
                wave: t as u32,
                response: y,
                predictors: values.iter().map(|&v| Some(v)).collect(),
            });
        }
        if n_waves[s] > 0 {
            effects.insert(id.clone(), SubjectEffect { intercept, slope });
        }
    }
    let ds = PanelDataset::new("subject", "wave", spec.response_name.clone(), names, rows)?;
    debug_assert!(ds.rows().windows(2).all(|w| (&w[0].subject, w[0].wave) < (&w[1].subject, w[1].wave)));
    Ok((ds, DgpTruth { effects, fixed, noise, spec: spec.clone() }))
}

pub const PRESETS: [&str; 5] = ["paper-shape", "tree-2split", "linear-interaction", "ar1-strong", "null"];

fn normal_cov(name: &str, mean: f64, sd: f64, range: [f64; 2], time_varying: bool) -> CovariateSpec {
    CovariateSpec { name: name.into(), dist: Dist::Normal { mean, sd }, clip: Some(range), time_varying }
}

fn std_cov(name: &str) -> CovariateSpec {
    CovariateSpec { name: name.into(), dist: Dist::Normal { mean: 0.0, sd: 1.0 }, clip: None, time_varying: true }
}

fn term(vars: &[&str], coef: f64) -> LinearTerm {
    LinearTerm { vars: vars.iter().map(|v| v.to_string()).collect(), coef }
}

/// Descriptive-table covariates: (name, range, mean, sd, time-varying).
const STUDY_COVARIATES: [(&str, [f64; 2], f64, f64, bool); 13] = [
    ("Age", [18.0, 50.0], 22.05, 5.80, false),
    ("CFIPerceivedAlternatives", [0.0, 84.0], 64.65, 10.46, false),
    ("CFIPerceivedControl", [15.0, 52.0], 37.47, 7.04, false),
    ("ProblemFocusedCopingFlexibility", [0.0, 3.0], 0.78, 0.42, false),
    ("EmotionFocusedCopingFlexibility", [0.0, 2.0], 0.47, 0.36, false),
    ("Reappraisal", [0.0, 42.0], 29.39, 7.32, false),
    ("Suppression", [0.0, 28.0], 14.68, 5.48, false),
    ("NegativeLifeEvents", [0.0, 43.0], 8.64, 6.87, true),
    ("Worry", [16.0, 80.0], 41.95, 13.62, true),
    ("Brooding", [5.0, 20.0], 10.22, 3.78, true),
    ("Pondering", [5.0, 20.0], 10.54, 4.06, true),
    ("CopingFlexibility", [0.0, 1.0], 0.54, 0.27, false),
    ("NegativeCognitiveStyles", [1.0, 6.55], 3.34, 0.92, false),
];

fn study_covariate(name: &str) -> CovariateSpec {
    let (n, range, mean, sd, tv) = *STUDY_COVARIATES.iter().find(|c| c.0 == name).expect("known study covariate");
    normal_cov(n, mean, sd, range, tv)
}

pub fn preset(name: &str) -> Result<DgpSpec> {
    let spec = match name {
        "paper-shape" => {
            let covariates: Vec<CovariateSpec> =
                STUDY_COVARIATES.iter().map(|c| normal_cov(c.0, c.2, c.3, c.1, c.4)).collect();
            let center = STUDY_COVARIATES.iter().map(|c| (c.0.to_string(), c.2)).collect();
            let terms = vec![
                term(&["Age"], 0.008),
                term(&["CFIPerceivedAlternatives"], -0.06),
                term(&["CFIPerceivedControl"], -0.1),
                term(&["ProblemFocusedCopingFlexibility"], -1.49),
                term(&["EmotionFocusedCopingFlexibility"], -0.19),
                term(&["CopingFlexibility"], -0.11),
                term(&["NegativeCognitiveStyles"], 1.41),
                term(&["Reappraisal"], -0.14),
                term(&["Suppression"], 0.12),
                term(&["NegativeLifeEvents"], 0.42),
                term(&["Worry"], 0.01),
                term(&["Brooding"], 0.26),
                term(&["Pondering"], 0.15),
                term(&["Brooding", "NegativeLifeEvents"], 0.08),
                term(&["Pondering", "NegativeLifeEvents"], -0.07),
            ];
            DgpSpec {
                name: name.into(),
                m: 185,
                waves: 5,
                dropout: Dropout::Counts(vec![185, 150, 137, 122, 113]),
                fixed_part: FixedPart::Linear { intercept: 6.90, terms, center },
                sigma_b: 4.5,
                sigma_slope: None,
                phi: 0.0,
                sigma: 3.0,
                covariates,
                response_name: "BDI".into(),
                seed: 0,
                notes: "13 study-shaped covariates, normal draws clipped to their observed ranges, \
                        drawn independently; rumination, worry and life events vary by wave"
                    .into(),
            }
        }
        "tree-2split" => {
            let split = |var: &str, threshold: f64, left: TreeRule, right: TreeRule| TreeRule::Split {
                var: var.into(),
                threshold,
                left: Box::new(left),
                right: Box::new(right),
            };
            let rule = split(
                "Brooding",
                13.0,
                split(
                    "NegativeLifeEvents",
                    14.0,
                    split("CFIPerceivedControl", 36.0, TreeRule::Leaf(7.4), TreeRule::Leaf(5.2)),
                    TreeRule::Leaf(9.6),
                ),
                split(
                    "NegativeCognitiveStyles",
                    4.0,
                    split("Worry", 26.0, TreeRule::Leaf(11.0), TreeRule::Leaf(13.5)),
                    TreeRule::Leaf(17.0),
                ),
            );
            DgpSpec {
                name: name.into(),
                m: 100,
                waves: 5,
                dropout: Dropout::None,
                fixed_part: FixedPart::Tree(rule),
                sigma_b: 2.0,
                sigma_slope: None,
                phi: 0.0,
                sigma: 1.0,
                covariates: vec![
                    study_covariate("Brooding"),
                    study_covariate("NegativeLifeEvents"),
                    study_covariate("NegativeCognitiveStyles"),
                    study_covariate("CFIPerceivedControl"),
                    study_covariate("Worry"),
                    study_covariate("Reappraisal"),
                ],
                response_name: "BDI".into(),
                seed: 0,
                notes: "six-leaf rule set with a root cut on Brooding and second- and third-level cuts; independent covariates".into(),
            }
        }
        "linear-interaction" => DgpSpec {
            name: name.into(),
            m: 100,
            waves: 5,
            dropout: Dropout::None,
            fixed_part: FixedPart::Linear {
                intercept: 2.0,
                terms: vec![term(&["x1"], 1.5), term(&["x2"], -1.0), term(&["x1", "x2"], 0.8)],
                center: BTreeMap::new(),
            },
            sigma_b: 1.0,
            sigma_slope: None,
            phi: 0.0,
            sigma: 1.0,
            covariates: vec![std_cov("x1"), std_cov("x2"), std_cov("x3")],
            response_name: "y".into(),
            seed: 0,
            notes: "independent standard normal covariates".into(),
        },
        "ar1-strong" => DgpSpec {
            name: name.into(),
            m: 100,
            waves: 5,
            dropout: Dropout::None,
            fixed_part: FixedPart::Linear { intercept: 1.0, terms: vec![term(&["x1"], 0.5)], center: BTreeMap::new() },
            sigma_b: 1.0,
            sigma_slope: None,
            phi: 0.6,
            sigma: 1.0,
            covariates: vec![std_cov("x1")],
            response_name: "y".into(),
            seed: 0,
            notes: "AR(1) residuals with phi 0.6".into(),
        },
        "null" => DgpSpec {
            name: name.into(),
            m: 100,
            waves: 5,
            dropout: Dropout::None,
            fixed_part: FixedPart::Linear { intercept: 5.0, terms: vec![], center: BTreeMap::new() },
            sigma_b: 1.0,
            sigma_slope: None,
            phi: 0.0,
            sigma: 1.0,
            covariates: vec![std_cov("x1"), std_cov("x2"), std_cov("x3")],
            response_name: "y".into(),
            seed: 0,
            notes: "constant fixed part".into(),
        },
        other => return Err(Error::UnknownPreset(other.to_string())),
    };
    Ok(spec)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_shape_wave_counts() {
        let (ds, truth) = generate(&preset("paper-shape").unwrap().with_seed(3)).unwrap();
        let counts: Vec<usize> = ds.wave_counts().values().copied().collect();
        assert_eq!(counts, vec![185, 150, 137, 122, 113]);
        assert_eq!(ds.n_rows(), 707);
        assert_eq!(ds.variable_names().len(), 13);
        assert_eq!(truth.fixed.len(), 707);
        assert_eq!(truth.effects.len(), 185);
    }

    #[test]
    fn noiseless_linear_is_exact() {
        let mut spec = preset("linear-interaction").unwrap();
        spec.sigma = 0.0;
        spec.sigma_b = 0.0;
        let (ds, truth) = generate(&spec).unwrap();
        for (row, f) in ds.rows().iter().zip(&truth.fixed) {
            assert_eq!(row.response, *f);
            let x1 = row.predictors[0].unwrap();
            let x2 = row.predictors[1].unwrap();
            assert!((f - (2.0 + 1.5 * x1 - x2 + 0.8 * x1 * x2)).abs() < 1e-12);
        }
    }

    #[test]
    fn tree_leaves_distinct() {
        let spec = preset("tree-2split").unwrap();
        let FixedPart::Tree(rule) = &spec.fixed_part else { panic!("tree preset") };
        let mut leaves = rule.leaf_values();
        let n = leaves.len();
        leaves.sort_by(f64::total_cmp);
        leaves.dedup();
        assert_eq!(leaves.len(), n);
    }

    #[test]
    fn invalid_specs() {
        let mut spec = preset("null").unwrap();
        spec.phi = 1.0;
        assert!(matches!(generate(&spec), Err(Error::InvalidSpec(_))));
        let mut spec = preset("null").unwrap();
        spec.dropout = Dropout::Counts(vec![100, 90, 95, 80, 70]);
        assert!(matches!(spec.validate(), Err(Error::InvalidSpec(_))));
        assert!(matches!(preset("nope"), Err(Error::UnknownPreset(_))));
        assert!(DgpSpec::from_json("{\"name\": 1}").is_err());
    }

    #[test]
    fn spec_json_round_trip() {
        for name in PRESETS {
            let spec = preset(name).unwrap();
            assert_eq!(DgpSpec::from_json(&spec.to_json()).unwrap(), spec);
        }
    }
}
