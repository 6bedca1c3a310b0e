//! Linear mixed models fitted by maximum likelihood.
//!
//! Model, per cluster `i`:
//!
//! ```text
//! y_i = X_i β + Z_i b_i + ε_i,   b_i ~ N(0, D),   ε_i ~ N(0, σ² R_i(φ))
//! ```
//!
//! with `R_i(φ)[s, t] = φ^|w_s − w_t|` over the wave indices `w` (identity for
//! independent errors). Each EM pass does a GLS update of β, an EM update of
//! (D, σ²) at that β, then (for AR(1) errors) a golden-section search over φ
//! with everything else held fixed. Every step is an exact or conditional
//! maximization, so the log-likelihood never decreases.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};
use statrs::function::erf::erfc;

use crate::dataset::{person_mean_center, PanelDataset};
use crate::error::{Error, Result};
use crate::model_io;

pub const LMM_FORMAT: &str = "lmm/v1";
const LN_2PI: f64 = 1.837_877_066_409_345_5;
const PHI_BOUND: f64 = 0.95;

/// A fixed-effect term: a main effect or a pairwise product.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Term {
    Main(String),
    Product(String, String),
}

impl Term {
    pub fn variables(&self) -> Vec<&str> {
        match self {
            Term::Main(a) => vec![a],
            Term::Product(a, b) => vec![a, b],
        }
    }
}

impl fmt::Display for Term {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Term::Main(a) => f.write_str(a),
            Term::Product(a, b) => write!(f, "{a} * {b}"),
        }
    }
}

impl FromStr for Term {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(['*', ':']).map(str::trim).collect();
        match parts.as_slice() {
            [a] if !a.is_empty() => Ok(Term::Main(a.to_string())),
            [a, b] if !a.is_empty() && !b.is_empty() => Ok(Term::Product(a.to_string(), b.to_string())),
            _ => Err(Error::InvalidParams(format!("cannot parse term `{s}`"))),
        }
    }
}

impl Serialize for Term {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Term {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Fixed part: intercept plus `terms`. Variables listed in `center` are
/// person-mean centered before any product is formed.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FixedSpec {
    pub terms: Vec<Term>,
    #[serde(default)]
    pub center: Vec<String>,
}

impl FixedSpec {
    pub fn main_effects(names: &[String]) -> Self {
        Self { terms: names.iter().cloned().map(Term::Main).collect(), center: Vec::new() }
    }

    pub fn parse(terms: &[&str]) -> Result<Self> {
        Ok(Self { terms: terms.iter().map(|t| t.parse()).collect::<Result<_>>()?, center: Vec::new() })
    }

    pub fn with_center(mut self, vars: Vec<String>) -> Self {
        self.center = vars;
        self
    }

    pub fn validate(&self) -> Result<()> {
        for t in &self.terms {
            if let Term::Product(a, b) = t {
                for v in [a, b] {
                    if !self.terms.contains(&Term::Main(v.clone())) {
                        return Err(Error::InvalidParams(format!(
                            "product term `{t}` references `{v}` which is not a main effect"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// Every variable the design reads.
    pub fn variables(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for t in &self.terms {
            for v in t.variables() {
                if !out.iter().any(|o| o == v) {
                    out.push(v.to_string());
                }
            }
        }
        out
    }

    pub fn term_names(&self) -> Vec<String> {
        std::iter::once("(Intercept)".to_string())
            .chain(self.terms.iter().map(Term::to_string))
            .collect()
    }

    /// Design matrix for (already centered) data.
    fn design(&self, ds: &PanelDataset) -> Result<DMatrix<f64>> {
        let n = ds.n_rows();
        let mut x = DMatrix::from_element(n, self.terms.len() + 1, 1.0);
        for (j, term) in self.terms.iter().enumerate() {
            let cols = term
                .variables()
                .iter()
                .map(|v| {
                    ds.column(v)?
                        .into_iter()
                        .map(|c| c.ok_or_else(|| Error::MissingValues(v.to_string())))
                        .collect::<Result<Vec<f64>>>()
                })
                .collect::<Result<Vec<_>>>()?;
            for i in 0..n {
                x[(i, j + 1)] = cols.iter().map(|c| c[i]).product();
            }
        }
        Ok(x)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RandomEffect {
    Intercept,
    Wave,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Correlation {
    #[default]
    Independent,
    Ar1,
}

impl FromStr for Correlation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "independent" | "none" | "iid" => Ok(Correlation::Independent),
            "ar1" | "AR1" | "ar(1)" => Ok(Correlation::Ar1),
            other => Err(Error::InvalidParams(format!("unknown correlation `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RandomSpec {
    pub effects: Vec<RandomEffect>,
    #[serde(default)]
    pub correlation: Correlation,
}

impl Default for RandomSpec {
    fn default() -> Self {
        Self::intercept()
    }
}

impl RandomSpec {
    pub fn intercept() -> Self {
        Self { effects: vec![RandomEffect::Intercept], correlation: Correlation::Independent }
    }

    pub fn intercept_slope() -> Self {
        Self { effects: vec![RandomEffect::Intercept, RandomEffect::Wave], correlation: Correlation::Independent }
    }

    pub fn with_correlation(mut self, correlation: Correlation) -> Self {
        self.correlation = correlation;
        self
    }

    pub fn q(&self) -> usize {
        self.effects.len()
    }

    pub fn validate(&self) -> Result<()> {
        match self.effects.as_slice() {
            [RandomEffect::Intercept] | [RandomEffect::Intercept, RandomEffect::Wave] => Ok(()),
            _ => Err(Error::InvalidParams(
                "random effects must be [intercept] or [intercept, wave]".into(),
            )),
        }
    }

    /// Random-effects design row for an observation at `wave`.
    pub fn z_row(&self, wave: u32) -> Vec<f64> {
        self.effects
            .iter()
            .map(|e| match e {
                RandomEffect::Intercept => 1.0,
                RandomEffect::Wave => wave as f64,
            })
            .collect()
    }

    pub fn z_matrix(&self, waves: &[u32]) -> DMatrix<f64> {
        let q = self.q();
        let mut z = DMatrix::zeros(waves.len(), q);
        for (i, &w) in waves.iter().enumerate() {
            for (j, v) in self.z_row(w).into_iter().enumerate() {
                z[(i, j)] = v;
            }
        }
        z
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceComponents {
    /// Random-effect covariance, row-major q×q.
    pub d: Vec<Vec<f64>>,
    pub sigma2: f64,
    pub phi: f64,
}

impl VarianceComponents {
    pub fn d_matrix(&self) -> DMatrix<f64> {
        let q = self.d.len();
        DMatrix::from_fn(q, q, |i, j| self.d[i][j])
    }

    fn from_parts(d: &DMatrix<f64>, sigma2: f64, phi: f64) -> Self {
        let d = (0..d.nrows()).map(|i| (0..d.ncols()).map(|j| d[(i, j)]).collect()).collect();
        Self { d, sigma2, phi }
    }

    /// Random-intercept variance (the (0,0) entry of D).
    pub fn intercept_variance(&self) -> f64 {
        self.d[0][0]
    }

    /// PSD check through a Cholesky factorization of D + εI.
    pub fn is_valid(&self) -> bool {
        let d = self.d_matrix();
        let q = d.nrows();
        let scale = d.diagonal().iter().fold(1e-300f64, |m, v| m.max(v.abs()));
        let jittered = &d + DMatrix::identity(q, q) * (scale * 1e-10);
        self.sigma2 > 0.0 && self.phi.abs() < 1.0 && Cholesky::new(jittered).is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LmmOptions {
    pub tol: f64,
    pub max_iter: usize,
    /// Hold D at zero (random effects switched off).
    pub fix_d_zero: bool,
}

impl Default for LmmOptions {
    fn default() -> Self {
        Self { tol: 1e-8, max_iter: 500, fix_d_zero: false }
    }
}

/// Raw inputs of a mixed model fit. Rows of one cluster must be contiguous
/// and in wave order.
#[derive(Debug, Clone)]
pub struct LmmDesign {
    pub y: Vec<f64>,
    pub x: DMatrix<f64>,
    pub waves: Vec<u32>,
    pub cluster_ids: Vec<String>,
    /// Cluster index (into `cluster_ids`) for every row.
    pub cluster_of: Vec<usize>,
}

impl LmmDesign {
    pub fn from_dataset(ds: &PanelDataset, x: DMatrix<f64>) -> Self {
        Self {
            y: ds.responses(),
            x,
            waves: ds.waves(),
            cluster_ids: ds.subjects().to_vec(),
            cluster_of: ds.cluster_index(),
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Cluster {
    y: DVector<f64>,
    x: DMatrix<f64>,
    z: DMatrix<f64>,
    waves: Vec<u32>,
}

#[derive(Debug, Clone)]
pub(crate) struct Problem {
    clusters: Vec<Cluster>,
    p: usize,
    q: usize,
    n: usize,
    correlation: Correlation,
}

impl Problem {
    fn new(design: &LmmDesign, random: &RandomSpec) -> Result<Self> {
        let n = design.y.len();
        if design.x.nrows() != n || design.cluster_of.len() != n || design.waves.len() != n {
            return Err(Error::LengthMismatch(design.x.nrows(), n));
        }
        let m = design.cluster_ids.len();
        let mut members: Vec<Vec<usize>> = vec![Vec::new(); m];
        for (i, &c) in design.cluster_of.iter().enumerate() {
            members[c].push(i);
        }
        let p = design.x.ncols();
        let clusters = members
            .into_iter()
            .map(|rows| {
                let waves: Vec<u32> = rows.iter().map(|&i| design.waves[i]).collect();
                Cluster {
                    y: DVector::from_iterator(rows.len(), rows.iter().map(|&i| design.y[i])),
                    x: DMatrix::from_fn(rows.len(), p, |r, c| design.x[(rows[r], c)]),
                    z: random.z_matrix(&waves),
                    waves,
                }
            })
            .collect();
        Ok(Self { clusters, p, q: random.q(), n, correlation: random.correlation })
    }
}

pub(crate) fn ar1_matrix(waves: &[u32], phi: f64) -> DMatrix<f64> {
    let k = waves.len();
    DMatrix::from_fn(k, k, |s, t| {
        if s == t {
            1.0
        } else {
            phi.powi((waves[s] as i32 - waves[t] as i32).abs())
        }
    })
}

struct Params {
    beta: DVector<f64>,
    d: DMatrix<f64>,
    sigma2: f64,
    phi: f64,
}

fn cluster_r(c: &Cluster, phi: f64) -> DMatrix<f64> {
    if phi == 0.0 {
        DMatrix::identity(c.waves.len(), c.waves.len())
    } else {
        ar1_matrix(&c.waves, phi)
    }
}

fn cluster_v_chol(c: &Cluster, d: &DMatrix<f64>, sigma2: f64, phi: f64) -> Option<Cholesky<f64, Dyn>> {
    let v = &c.z * d * c.z.transpose() + cluster_r(c, phi) * sigma2;
    Cholesky::new(v)
}

fn loglik_at(pb: &Problem, beta: &DVector<f64>, d: &DMatrix<f64>, sigma2: f64, phi: f64) -> f64 {
    let mut ll = 0.0;
    for c in &pb.clusters {
        let Some(chol) = cluster_v_chol(c, d, sigma2, phi) else {
            return f64::NEG_INFINITY;
        };
        let r = &c.y - &c.x * beta;
        let logdet: f64 = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let quad = r.dot(&chol.solve(&r));
        ll += -0.5 * logdet - 0.5 * quad - 0.5 * c.y.len() as f64 * LN_2PI;
    }
    ll
}

/// GLS β and information matrix Σ X' V⁻¹ X.
fn gls(pb: &Problem, d: &DMatrix<f64>, sigma2: f64, phi: f64) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let mut a = DMatrix::zeros(pb.p, pb.p);
    let mut rhs = DVector::zeros(pb.p);
    for c in &pb.clusters {
        let chol = cluster_v_chol(c, d, sigma2, phi).ok_or(Error::SingularDesign)?;
        let vinv_x = chol.solve(&c.x);
        a += c.x.transpose() * &vinv_x;
        rhs += vinv_x.transpose() * &c.y;
    }
    let chol = Cholesky::new(a.clone()).ok_or(Error::SingularDesign)?;
    Ok((chol.solve(&rhs), a))
}

fn check_rank(x: &DMatrix<f64>) -> Result<()> {
    if x.nrows() < x.ncols() {
        return Err(Error::SingularDesign);
    }
    let xtx = x.transpose() * x;
    let eig = xtx.symmetric_eigen();
    let max = eig.eigenvalues.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let min = eig.eigenvalues.iter().fold(f64::INFINITY, |m, v| m.min(*v));
    if max == 0.0 || min <= max * 1e-13 {
        return Err(Error::SingularDesign);
    }
    Ok(())
}

/// One EM update of (D, σ²) at fixed β.
fn em_variance_step(pb: &Problem, p: &Params, fix_d_zero: bool) -> (DMatrix<f64>, f64) {
    let q = pb.q;
    let mut d_acc = DMatrix::zeros(q, q);
    let mut s_acc = 0.0;
    for c in &pb.clusters {
        let chol = cluster_v_chol(c, &p.d, p.sigma2, p.phi).expect("V positive definite");
        let r = &c.y - &c.x * &p.beta;
        let vinv_r = chol.solve(&r);
        let b = &p.d * c.z.transpose() * &vinv_r;
        let dzt = &p.d * c.z.transpose();
        let cond = &p.d - &dzt * chol.solve(&dzt.transpose());
        d_acc += &b * b.transpose() + cond;
        let e = &r - &c.z * &b;
        let ni = c.y.len() as f64;
        if p.phi == 0.0 {
            let vinv_trace = chol.inverse().trace();
            s_acc += e.dot(&e) + p.sigma2 * ni - p.sigma2 * p.sigma2 * vinv_trace;
        } else {
            let rm = cluster_r(c, p.phi);
            let rchol = Cholesky::new(rm.clone()).expect("AR(1) correlation is positive definite");
            let quad = e.dot(&rchol.solve(&e));
            let tr = chol.solve(&rm).trace();
            s_acc += quad + p.sigma2 * ni - p.sigma2 * p.sigma2 * tr;
        }
    }
    let mut d_new = d_acc / pb.clusters.len() as f64;
    // symmetrize against rounding drift
    d_new = (&d_new + d_new.transpose()) * 0.5;
    if fix_d_zero {
        d_new.fill(0.0);
    }
    let sigma2 = (s_acc / pb.n as f64).max(1e-12);
    (d_new, sigma2)
}

/// Maximizes the log-likelihood over φ with everything else fixed.
fn golden_phi(pb: &Problem, p: &Params) -> (f64, f64) {
    let f = |phi: f64| loglik_at(pb, &p.beta, &p.d, p.sigma2, phi);
    let inv_gr = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (-PHI_BOUND, PHI_BOUND);
    let mut c = b - inv_gr * (b - a);
    let mut dd = a + inv_gr * (b - a);
    let (mut fc, mut fd) = (f(c), f(dd));
    while b - a > 1e-7 {
        if fc > fd {
            b = dd;
            dd = c;
            fd = fc;
            c = b - inv_gr * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = dd;
            fc = fd;
            dd = a + inv_gr * (b - a);
            fd = f(dd);
        }
    }
    let phi = 0.5 * (a + b);
    (phi, f(phi))
}

struct EmOutcome {
    params: Params,
    loglik: f64,
    trace: Vec<f64>,
    n_iter: usize,
    converged: bool,
}

fn run_em(pb: &Problem, mut p: Params, opts: &LmmOptions, fix_d_zero: bool) -> Result<EmOutcome> {
    let mut ll = loglik_at(pb, &p.beta, &p.d, p.sigma2, p.phi);
    let mut trace = vec![ll];
    let mut converged = false;
    let mut n_iter = 0;
    for _ in 0..opts.max_iter {
        n_iter += 1;
        let (beta, _) = gls(pb, &p.d, p.sigma2, p.phi)?;
        p.beta = beta;
        let (d, sigma2) = em_variance_step(pb, &p, fix_d_zero);
        p.d = d;
        p.sigma2 = sigma2;
        let mut ll_new = loglik_at(pb, &p.beta, &p.d, p.sigma2, p.phi);
        if pb.correlation == Correlation::Ar1 {
            let (phi, ll_phi) = golden_phi(pb, &p);
            if ll_phi > ll_new {
                p.phi = phi;
                ll_new = ll_phi;
            }
        }
        trace.push(ll_new);
        let delta = (ll_new - ll).abs();
        ll = ll_new;
        if delta < opts.tol {
            converged = true;
            break;
        }
    }
    Ok(EmOutcome { params: p, loglik: ll, trace, n_iter, converged })
}

fn initial_params(pb: &Problem, design: &LmmDesign, random: &RandomSpec, fix_d_zero: bool) -> Result<Params> {
    let x = &design.x;
    let xtx = x.transpose() * x;
    let y = DVector::from_column_slice(&design.y);
    let beta = Cholesky::new(xtx).ok_or(Error::SingularDesign)?.solve(&(x.transpose() * &y));
    let resid = &y - x * &beta;
    let s2 = (resid.dot(&resid) / pb.n as f64).max(1e-8);
    let mut d = DMatrix::zeros(pb.q, pb.q);
    if !fix_d_zero {
        d[(0, 0)] = s2 / 2.0;
        if random.q() > 1 {
            let wmax = design.waves.iter().copied().max().unwrap_or(1).max(1) as f64;
            d[(1, 1)] = s2 / (10.0 * wmax * wmax);
        }
    }
    let sigma2 = if fix_d_zero { s2 } else { s2 / 2.0 };
    Ok(Params { beta, d, sigma2, phi: 0.0 })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LmmFit {
    /// Set when the design came from a [`FixedSpec`]; `None` for explicit
    /// designs such as the leaf indicators of an RE-EM tree.
    pub fixed: Option<FixedSpec>,
    pub random: RandomSpec,
    pub term_names: Vec<String>,
    pub beta: Vec<f64>,
    /// Inverse of Σ X' V⁻¹ X, row-major.
    pub cov_beta: Vec<Vec<f64>>,
    pub vc: VarianceComponents,
    /// Posterior-mean random effects for every training cluster.
    pub b: BTreeMap<String, Vec<f64>>,
    pub loglik: f64,
    pub n_iter: usize,
    pub converged: bool,
    /// Log-likelihood at the start values, then after every EM pass.
    pub trace: Vec<f64>,
    pub n_obs: usize,
    /// Whether the zero-variance boundary beat the interior EM solution.
    pub boundary: bool,
    /// Reference distribution of Wald p-values.
    pub df_method: String,
}

/// ML fit on an explicit design (no intercept is added).
pub fn fit_design(
    design: &LmmDesign,
    term_names: Vec<String>,
    random: &RandomSpec,
    opts: &LmmOptions,
) -> Result<LmmFit> {
    random.validate()?;
    let m = design.cluster_ids.len();
    if m < 2 {
        return Err(Error::TooFewClusters(2, m));
    }
    check_rank(&design.x)?;
    let pb = Problem::new(design, random)?;
    // without replication inside any cluster, D and σ² cannot be separated
    let replicated = pb.clusters.iter().any(|c| c.y.len() > pb.q);
    let fix_zero = opts.fix_d_zero || !replicated;

    let start = initial_params(&pb, design, random, fix_zero)?;
    let mut best = run_em(&pb, start, opts, fix_zero)?;
    let mut boundary = fix_zero;
    if !fix_zero {
        let zero_start = initial_params(&pb, design, random, true)?;
        let zero = run_em(&pb, Params { phi: best.params.phi, ..zero_start }, opts, true)?;
        if zero.loglik > best.loglik {
            let mut trace = best.trace;
            trace.push(zero.loglik);
            best = EmOutcome { trace, n_iter: best.n_iter + zero.n_iter, ..zero };
            boundary = true;
        }
    }
    finish(&pb, design, term_names, random, best, boundary)
}

fn finish(
    pb: &Problem,
    design: &LmmDesign,
    term_names: Vec<String>,
    random: &RandomSpec,
    em: EmOutcome,
    boundary: bool,
) -> Result<LmmFit> {
    let p = &em.params;
    let (_, info) = gls(pb, &p.d, p.sigma2, p.phi)?;
    let cov = Cholesky::new(info).ok_or(Error::SingularDesign)?.inverse();
    let mut b = BTreeMap::new();
    for (c, id) in pb.clusters.iter().zip(&design.cluster_ids) {
        b.insert(id.clone(), cluster_blup(c, p).iter().copied().collect());
    }
    Ok(LmmFit {
        fixed: None,
        random: random.clone(),
        term_names,
        beta: p.beta.iter().copied().collect(),
        cov_beta: (0..cov.nrows()).map(|i| cov.row(i).iter().copied().collect()).collect(),
        vc: VarianceComponents::from_parts(&p.d, p.sigma2, p.phi),
        b,
        loglik: em.loglik,
        n_iter: em.n_iter,
        converged: em.converged,
        trace: em.trace,
        n_obs: pb.n,
        boundary,
        df_method: "normal".to_string(),
    })
}

fn cluster_blup(c: &Cluster, p: &Params) -> DVector<f64> {
    if p.d.iter().all(|v| *v == 0.0) {
        return DVector::zeros(p.d.nrows());
    }
    let chol = cluster_v_chol(c, &p.d, p.sigma2, p.phi).expect("V positive definite");
    let r = &c.y - &c.x * &p.beta;
    &p.d * c.z.transpose() * chol.solve(&r)
}

/// Centers, builds the design from `fixed`, and fits by ML.
pub fn fit_ml(ds: &PanelDataset, fixed: &FixedSpec, random: &RandomSpec, opts: &LmmOptions) -> Result<LmmFit> {
    fixed.validate()?;
    let centered = if fixed.center.is_empty() {
        ds.clone()
    } else {
        person_mean_center(ds, &fixed.center)?
    };
    let x = fixed.design(&centered)?;
    let design = LmmDesign::from_dataset(&centered, x);
    let mut fit = fit_design(&design, fixed.term_names(), random, opts)?;
    fit.fixed = Some(fixed.clone());
    Ok(fit)
}

/// Predictions plus whether each row's cluster had a fitted random effect.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub values: Vec<f64>,
    pub seen: Vec<bool>,
}

impl LmmFit {
    fn params(&self) -> Params {
        Params {
            beta: DVector::from_column_slice(&self.beta),
            d: self.vc.d_matrix(),
            sigma2: self.vc.sigma2,
            phi: self.vc.phi,
        }
    }

    fn fixed_spec(&self) -> Result<&FixedSpec> {
        self.fixed
            .as_ref()
            .ok_or_else(|| Error::InvalidParams("fit has no fixed spec; use the design-level API".into()))
    }

    /// Design matrix for `ds` under this fit's fixed spec.
    pub fn design_matrix(&self, ds: &PanelDataset) -> Result<DMatrix<f64>> {
        let fixed = self.fixed_spec()?;
        let centered = if fixed.center.is_empty() {
            ds.clone()
        } else {
            person_mean_center(ds, &fixed.center)?
        };
        fixed.design(&centered)
    }

    /// Fixed part plus (optionally) the fitted random effect of each row's
    /// cluster; unseen clusters get the fixed part alone.
    pub fn predict_design(&self, x: &DMatrix<f64>, waves: &[u32], clusters: &[String], use_random: bool) -> Prediction {
        let beta = DVector::from_column_slice(&self.beta);
        let fixed = x * beta;
        let mut values = Vec::with_capacity(waves.len());
        let mut seen = Vec::with_capacity(waves.len());
        for i in 0..waves.len() {
            let mut v = fixed[i];
            let b = self.b.get(&clusters[i]);
            seen.push(b.is_some());
            if let (true, Some(b)) = (use_random, b) {
                v += self.random.z_row(waves[i]).iter().zip(b).map(|(z, b)| z * b).sum::<f64>();
            }
            values.push(v);
        }
        Prediction { values, seen }
    }

    pub fn predict(&self, ds: &PanelDataset, use_random: bool) -> Result<Prediction> {
        let x = self.design_matrix(ds)?;
        let clusters: Vec<String> = ds.rows().iter().map(|r| r.subject.clone()).collect();
        Ok(self.predict_design(&x, &ds.waves(), &clusters, use_random))
    }

    /// BLUP `D Z' V⁻¹ (y − Xβ)` for one cluster's rows.
    pub fn blup_design(&self, cluster: &str, y: &[f64], x: &DMatrix<f64>, waves: &[u32]) -> Result<Vec<f64>> {
        if !self.b.contains_key(cluster) {
            return Err(Error::UnknownCluster(cluster.to_string()));
        }
        let c = Cluster {
            y: DVector::from_column_slice(y),
            x: x.clone(),
            z: self.random.z_matrix(waves),
            waves: waves.to_vec(),
        };
        Ok(cluster_blup(&c, &self.params()).iter().copied().collect())
    }

    /// BLUP for `cluster` computed from its rows in `ds`.
    pub fn blup(&self, cluster: &str, ds: &PanelDataset) -> Result<Vec<f64>> {
        let idx: Vec<usize> = (0..ds.n_rows()).filter(|&i| ds.rows()[i].subject == cluster).collect();
        let sub = ds.select_rows(&idx);
        let x = self.design_matrix(&sub)?;
        self.blup_design(cluster, &sub.responses(), &x, &sub.waves())
    }

    /// Marginal log-likelihood of an explicit design at the fitted parameters.
    pub fn loglik_design(&self, design: &LmmDesign) -> Result<f64> {
        let pb = Problem::new(design, &self.random)?;
        let p = self.params();
        Ok(loglik_at(&pb, &p.beta, &p.d, p.sigma2, p.phi))
    }

    pub fn loglik_on(&self, ds: &PanelDataset) -> Result<f64> {
        let x = self.design_matrix(ds)?;
        self.loglik_design(&LmmDesign::from_dataset(ds, x))
    }

    pub fn wald_table(&self) -> Vec<WaldRow> {
        self.term_names
            .iter()
            .enumerate()
            .map(|(j, term)| {
                let b = self.beta[j];
                let se = self.cov_beta[j][j].max(0.0).sqrt();
                let t = b / se;
                let p = erfc(t.abs() / std::f64::consts::SQRT_2).clamp(0.0, 1.0);
                WaldRow { term: term.clone(), b, se, t, p }
            })
            .collect()
    }

    pub fn to_json(&self) -> String {
        model_io::to_json(LMM_FORMAT, self)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        model_io::from_json(LMM_FORMAT, text)
    }
}

/// Marginal log-likelihood of a design at given coefficients and components.
pub fn marginal_loglik(design: &LmmDesign, random: &RandomSpec, beta: &[f64], vc: &VarianceComponents) -> Result<f64> {
    if beta.len() != design.x.ncols() {
        return Err(Error::LengthMismatch(beta.len(), design.x.ncols()));
    }
    let pb = Problem::new(design, random)?;
    Ok(loglik_at(&pb, &DVector::from_column_slice(beta), &vc.d_matrix(), vc.sigma2, vc.phi))
}

/// Refits the same design with AR(1) errors, started from a converged
/// independent-errors fit so that the alternative can only gain likelihood.
pub fn refit_ar1(design: &LmmDesign, null: &LmmFit, opts: &LmmOptions) -> Result<LmmFit> {
    let random = null.random.clone().with_correlation(Correlation::Ar1);
    let pb = Problem::new(design, &random)?;
    let start = Params { phi: 0.0, ..null.params() };
    let em = run_em(&pb, start, opts, null.boundary)?;
    let mut fit = finish(&pb, design, null.term_names.clone(), &random, em, null.boundary)?;
    fit.fixed = null.fixed.clone();
    Ok(fit)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WaldRow {
    pub term: String,
    pub b: f64,
    pub se: f64,
    pub t: f64,
    pub p: f64,
}

pub fn wald_csv(rows: &[WaldRow]) -> String {
    let mut out = String::from("term,b,se,t,p\n");
    for r in rows {
        out.push_str(&format!("\"{}\",{},{},{},{}\n", r.term, r.b, r.se, r.t, r.p));
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrtResult {
    pub stat: f64,
    pub df: usize,
    pub p: f64,
}

pub fn lr_test(null: &LmmFit, alt: &LmmFit, df: usize) -> Result<LrtResult> {
    lr_test_logliks(null.loglik, alt.loglik, df)
}

pub fn lr_test_logliks(null: f64, alt: f64, df: usize) -> Result<LrtResult> {
    let raw = 2.0 * (alt - null);
    if raw < -1e-6 {
        return Err(Error::NegativeStatBeyondTolerance(raw));
    }
    let stat = raw.max(0.0);
    let p = if stat == 0.0 {
        1.0
    } else {
        ChiSquared::new(df as f64)
            .map_err(|e| Error::InvalidParams(e.to_string()))?
            .sf(stat)
    };
    Ok(LrtResult { stat, df, p })
}
