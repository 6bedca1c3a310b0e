//! Long-format longitudinal panels: one row per (subject, wave).
//!
//! A [`PanelDataset`] is immutable once built. Rows are kept sorted by
//! `(subject, wave)` so the rows of one subject are always contiguous, which
//! the mixed-model code relies on when it groups observations into clusters.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::ops::Range;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// One measurement occasion of one subject.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub subject: String,
    pub wave: u32,
    pub response: f64,
    /// Aligned with [`PanelDataset::variable_names`]; `None` marks a missing cell.
    pub predictors: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PanelDataset {
    subjects: Vec<String>,
    rows: Vec<Observation>,
    variable_names: Vec<String>,
    response_name: String,
    time_name: String,
    subject_name: String,
}

impl PanelDataset {
    /// Builds a dataset, sorting rows by `(subject, wave)` and checking the
    /// panel invariants.
    pub fn new(
        subject_name: impl Into<String>,
        time_name: impl Into<String>,
        response_name: impl Into<String>,
        variable_names: Vec<String>,
        mut rows: Vec<Observation>,
    ) -> Result<Self> {
        let p = variable_names.len();
        for (i, row) in rows.iter_mut().enumerate() {
            if !row.response.is_finite() {
                return Err(Error::NonNumericResponse(i + 1));
            }
            if row.predictors.len() != p {
                return Err(Error::LengthMismatch(row.predictors.len(), p));
            }
            for v in row.predictors.iter_mut() {
                if matches!(v, Some(x) if !x.is_finite()) {
                    *v = None;
                }
            }
        }
        rows.sort_by(|a, b| a.subject.cmp(&b.subject).then(a.wave.cmp(&b.wave)));
        for pair in rows.windows(2) {
            if pair[0].subject == pair[1].subject && pair[0].wave == pair[1].wave {
                return Err(Error::DuplicateSubjectWave(pair[0].subject.clone(), pair[0].wave));
            }
        }
        let mut subjects: Vec<String> = Vec::new();
        for row in &rows {
            if subjects.last() != Some(&row.subject) {
                subjects.push(row.subject.clone());
            }
        }
        Ok(Self {
            subjects,
            rows,
            variable_names,
            response_name: response_name.into(),
            time_name: time_name.into(),
            subject_name: subject_name.into(),
        })
    }

    pub fn subjects(&self) -> &[String] {
        &self.subjects
    }

    pub fn rows(&self) -> &[Observation] {
        &self.rows
    }

    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn variable_names(&self) -> &[String] {
        &self.variable_names
    }

    pub fn response_name(&self) -> &str {
        &self.response_name
    }

    pub fn time_name(&self) -> &str {
        &self.time_name
    }

    pub fn subject_name(&self) -> &str {
        &self.subject_name
    }

    pub fn var_index(&self, name: &str) -> Result<usize> {
        self.variable_names
            .iter()
            .position(|v| v == name)
            .ok_or_else(|| Error::UnknownVariable(name.to_string()))
    }

    pub fn responses(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.response).collect()
    }

    pub fn waves(&self) -> Vec<u32> {
        self.rows.iter().map(|r| r.wave).collect()
    }

    /// Contiguous row range of each subject, in `subjects()` order.
    pub fn subject_ranges(&self) -> Vec<Range<usize>> {
        let mut out = Vec::with_capacity(self.subjects.len());
        let mut start = 0;
        for i in 1..=self.rows.len() {
            if i == self.rows.len() || self.rows[i].subject != self.rows[start].subject {
                out.push(start..i);
                start = i;
            }
        }
        out
    }

    /// Index into `subjects()` for every row.
    pub fn cluster_index(&self) -> Vec<usize> {
        let mut idx = vec![0; self.rows.len()];
        for (c, range) in self.subject_ranges().into_iter().enumerate() {
            for i in range {
                idx[i] = c;
            }
        }
        idx
    }

    pub fn column(&self, name: &str) -> Result<Vec<Option<f64>>> {
        let j = self.var_index(name)?;
        Ok(self.rows.iter().map(|r| r.predictors[j]).collect())
    }

    /// Values of `names` for one row, `None` where missing.
    pub fn row_values(&self, row: usize, names: &[String]) -> Result<Vec<Option<f64>>> {
        let idx = names
            .iter()
            .map(|n| self.var_index(n))
            .collect::<Result<Vec<_>>>()?;
        Ok(idx.iter().map(|&j| self.rows[row].predictors[j]).collect())
    }

    /// Dense column-major design over `names`. Every cell must be present.
    pub fn features(&self, names: &[String]) -> Result<FeatureMatrix> {
        let mut columns = Vec::with_capacity(names.len());
        for name in names {
            let j = self.var_index(name)?;
            let col = self
                .rows
                .iter()
                .map(|r| r.predictors[j].ok_or_else(|| Error::MissingValues(name.clone())))
                .collect::<Result<Vec<f64>>>()?;
            columns.push(col);
        }
        Ok(FeatureMatrix::new(names.to_vec(), columns, self.rows.len()))
    }

    /// New dataset holding only the given rows (indices into `rows()`).
    pub fn select_rows(&self, idx: &[usize]) -> PanelDataset {
        let rows: Vec<Observation> = idx.iter().map(|&i| self.rows[i].clone()).collect();
        self.with_rows(rows)
    }

    fn with_rows(&self, rows: Vec<Observation>) -> PanelDataset {
        PanelDataset::new(
            self.subject_name.clone(),
            self.time_name.clone(),
            self.response_name.clone(),
            self.variable_names.clone(),
            rows,
        )
        .expect("rows taken from a valid dataset")
    }

    /// Per-wave response counts.
    pub fn wave_counts(&self) -> BTreeMap<u32, usize> {
        let mut counts = BTreeMap::new();
        for r in &self.rows {
            *counts.entry(r.wave).or_insert(0) += 1;
        }
        counts
    }

    /// SHA-256 of the canonical CSV serialization.
    pub fn fingerprint(&self) -> String {
        let mut buf = Vec::new();
        write_csv(self, &mut buf, b',').expect("writing to memory");
        hex::encode(Sha256::digest(&buf))
    }
}

/// Dense column-major numeric design used by the tree learners.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    names: Vec<String>,
    columns: Vec<Vec<f64>>,
    n_rows: usize,
}

impl FeatureMatrix {
    pub fn new(names: Vec<String>, columns: Vec<Vec<f64>>, n_rows: usize) -> Self {
        assert_eq!(names.len(), columns.len(), "one name per column");
        assert!(columns.iter().all(|c| c.len() == n_rows), "ragged columns");
        Self { names, columns, n_rows }
    }

    /// Builds from row-major data.
    pub fn from_rows(names: Vec<String>, rows: &[Vec<f64>]) -> Self {
        let p = names.len();
        let mut columns = vec![Vec::with_capacity(rows.len()); p];
        for row in rows {
            assert_eq!(row.len(), p, "row width");
            for (j, &v) in row.iter().enumerate() {
                columns[j].push(v);
            }
        }
        Self::new(names, columns, rows.len())
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.columns.len()
    }

    pub fn column(&self, j: usize) -> &[f64] {
        &self.columns[j]
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.columns[col][row]
    }

    pub fn row(&self, row: usize) -> Vec<f64> {
        self.columns.iter().map(|c| c[row]).collect()
    }

    pub fn select_rows(&self, idx: &[usize]) -> FeatureMatrix {
        let columns = self
            .columns
            .iter()
            .map(|c| idx.iter().map(|&i| c[i]).collect())
            .collect();
        FeatureMatrix::new(self.names.clone(), columns, idx.len())
    }
}

/// Column roles for CSV ingestion.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CsvSchema {
    pub subject: String,
    pub wave: String,
    pub response: String,
    /// `None` means every remaining column is a predictor.
    pub predictors: Option<Vec<String>>,
    pub delimiter: u8,
}

impl CsvSchema {
    pub fn new(subject: &str, wave: &str, response: &str) -> Self {
        Self {
            subject: subject.to_string(),
            wave: wave.to_string(),
            response: response.to_string(),
            predictors: None,
            delimiter: b',',
        }
    }

    pub fn with_predictors(mut self, predictors: Vec<String>) -> Self {
        self.predictors = Some(predictors);
        self
    }

    pub fn with_delimiter(mut self, delimiter: u8) -> Self {
        self.delimiter = delimiter;
        self
    }
}

fn is_missing(cell: &str) -> bool {
    let c = cell.trim();
    c.is_empty() || c == "NA"
}

pub fn load_csv(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<PanelDataset> {
    let file = std::fs::File::open(path.as_ref())?;
    read_csv(file, schema)
}

pub fn read_csv<R: Read>(reader: R, schema: &CsvSchema) -> Result<PanelDataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(schema.delimiter)
        .has_headers(true)
        .from_reader(reader);
    let headers: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    };
    let subject_col = find(&schema.subject)?;
    let wave_col = find(&schema.wave)?;
    let response_col = find(&schema.response)?;
    let predictor_names: Vec<String> = match &schema.predictors {
        Some(p) => p.clone(),
        None => headers
            .iter()
            .enumerate()
            .filter(|(i, _)| ![subject_col, wave_col, response_col].contains(i))
            .map(|(_, h)| h.clone())
            .collect(),
    };
    if predictor_names.is_empty() {
        return Err(Error::MissingColumn("<predictor>".to_string()));
    }
    let predictor_cols = predictor_names
        .iter()
        .map(|n| find(n))
        .collect::<Result<Vec<_>>>()?;

    let mut rows = Vec::new();
    for (i, record) in rdr.records().enumerate() {
        let record = record?;
        let data_row = i + 1;
        let cell = |j: usize| record.get(j).unwrap_or("").trim();
        let subject = cell(subject_col).to_string();
        let wave: u32 = cell(wave_col).parse().map_err(|_| Error::InvalidWave(data_row))?;
        let response_cell = cell(response_col);
        let response: f64 = if is_missing(response_cell) {
            return Err(Error::NonNumericResponse(data_row));
        } else {
            response_cell
                .parse()
                .ok()
                .filter(|v: &f64| v.is_finite())
                .ok_or(Error::NonNumericResponse(data_row))?
        };
        let predictors = predictor_cols
            .iter()
            .map(|&j| {
                let c = cell(j);
                if is_missing(c) {
                    None
                } else {
                    c.parse::<f64>().ok().filter(|v| v.is_finite())
                }
            })
            .collect();
        rows.push(Observation { subject, wave, response, predictors });
    }
    PanelDataset::new(
        schema.subject.clone(),
        schema.wave.clone(),
        schema.response.clone(),
        predictor_names,
        rows,
    )
}

/// Writes the canonical long CSV: subject, wave, response, predictors.
/// Missing cells are written as `NA`.
pub fn write_csv<W: Write>(ds: &PanelDataset, writer: W, delimiter: u8) -> Result<()> {
    let mut wtr = csv::WriterBuilder::new().delimiter(delimiter).from_writer(writer);
    let mut header = vec![
        ds.subject_name.clone(),
        ds.time_name.clone(),
        ds.response_name.clone(),
    ];
    header.extend(ds.variable_names.iter().cloned());
    wtr.write_record(&header)?;
    for row in &ds.rows {
        let mut rec = Vec::with_capacity(header.len());
        rec.push(row.subject.clone());
        rec.push(row.wave.to_string());
        rec.push(row.response.to_string());
        for v in &row.predictors {
            rec.push(match v {
                Some(x) => x.to_string(),
                None => "NA".to_string(),
            });
        }
        wtr.write_record(&rec)?;
    }
    wtr.flush()?;
    Ok(())
}

/// Subtracts each subject's own mean (over non-missing waves) from `vars`.
pub fn person_mean_center(ds: &PanelDataset, vars: &[String]) -> Result<PanelDataset> {
    let idx = vars
        .iter()
        .map(|v| ds.var_index(v))
        .collect::<Result<Vec<_>>>()?;
    let mut rows = ds.rows.clone();
    for range in ds.subject_ranges() {
        for &j in &idx {
            let (sum, n) = rows[range.clone()]
                .iter()
                .filter_map(|r| r.predictors[j])
                .fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
            if n == 0 {
                continue;
            }
            let mean = sum / n as f64;
            for r in &mut rows[range.clone()] {
                if let Some(v) = r.predictors[j].as_mut() {
                    *v -= mean;
                }
            }
        }
    }
    Ok(ds.with_rows(rows))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DroppedRow {
    pub subject: String,
    pub wave: u32,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DropReport {
    pub dropped: Vec<DroppedRow>,
}

impl DropReport {
    pub fn len(&self) -> usize {
        self.dropped.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dropped.is_empty()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable")
    }
}

/// Listwise deletion over `vars`. Names that are not predictors (for example
/// the response, which is never missing) are ignored.
pub fn drop_missing(ds: &PanelDataset, vars: &[String]) -> (PanelDataset, DropReport) {
    let idx: Vec<usize> = vars.iter().filter_map(|v| ds.var_index(v).ok()).collect();
    let mut report = DropReport::default();
    let mut kept = Vec::with_capacity(ds.rows.len());
    for row in &ds.rows {
        if idx.iter().any(|&j| row.predictors[j].is_none()) {
            report.dropped.push(DroppedRow { subject: row.subject.clone(), wave: row.wave });
        } else {
            kept.push(row.clone());
        }
    }
    (ds.with_rows(kept), report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum FoldMode {
    #[default]
    SubjectGrouped,
    ObservationLevel,
}

impl std::str::FromStr for FoldMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "subject-grouped" | "subject" | "grouped" => Ok(FoldMode::SubjectGrouped),
            "observation-level" | "observation" | "row" => Ok(FoldMode::ObservationLevel),
            other => Err(Error::InvalidParams(format!("unknown fold mode `{other}`"))),
        }
    }
}

impl std::fmt::Display for FoldMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            FoldMode::SubjectGrouped => "subject-grouped",
            FoldMode::ObservationLevel => "observation-level",
        })
    }
}

/// Fold index per unit. Units are subjects (in `subjects()` order) in
/// subject-grouped mode and rows otherwise.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldAssignment {
    pub k: usize,
    pub mode: FoldMode,
    pub seed: u64,
    pub assignment: Vec<usize>,
}

impl FoldAssignment {
    /// Fold of every row of `ds`.
    pub fn row_folds(&self, ds: &PanelDataset) -> Vec<usize> {
        match self.mode {
            FoldMode::ObservationLevel => self.assignment.clone(),
            FoldMode::SubjectGrouped => ds
                .cluster_index()
                .into_iter()
                .map(|c| self.assignment[c])
                .collect(),
        }
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &f in &self.assignment {
            sizes[f] += 1;
        }
        sizes
    }

    pub fn fingerprint(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("serializable");
        hex::encode(Sha256::digest(&bytes))
    }
}

/// Random balanced partition of `n` units into `k` folds: shuffle, then deal
/// round-robin, so fold sizes differ by at most one.
pub fn partition(n: usize, k: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let mut out = vec![0; n];
    for (pos, &unit) in order.iter().enumerate() {
        out[unit] = pos % k;
    }
    out
}

pub fn make_folds(ds: &PanelDataset, k: usize, mode: FoldMode, seed: u64) -> Result<FoldAssignment> {
    let n = match mode {
        FoldMode::SubjectGrouped => ds.subjects.len(),
        FoldMode::ObservationLevel => ds.rows.len(),
    };
    if k < 2 || k > n {
        return Err(Error::TooFewUnits(k, n));
    }
    Ok(FoldAssignment { k, mode, seed, assignment: partition(n, k, seed) })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariableStats {
    pub name: String,
    pub n: usize,
    pub n_missing: usize,
    /// `None` when every entry is missing.
    pub min: Option<f64>,
    pub max: Option<f64>,
    pub mean: Option<f64>,
    /// n−1 denominator; `None` with fewer than two values.
    pub sd: Option<f64>,
}

impl VariableStats {
    fn from_values(name: &str, values: &[Option<f64>]) -> Self {
        let present: Vec<f64> = values.iter().flatten().copied().collect();
        let n = present.len();
        let n_missing = values.len() - n;
        if n == 0 {
            return Self { name: name.to_string(), n, n_missing, min: None, max: None, mean: None, sd: None };
        }
        let mean = present.iter().sum::<f64>() / n as f64;
        let min = present.iter().copied().fold(f64::INFINITY, f64::min);
        let max = present.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sd = (n > 1).then(|| {
            (present.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        });
        // guard against the mean drifting a rounding step outside [min, max]
        let mean = mean.clamp(min, max);
        Self { name: name.to_string(), n, n_missing, min: Some(min), max: Some(max), mean: Some(mean), sd }
    }

    pub fn is_defined(&self) -> bool {
        self.n > 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DescriptiveStats {
    /// Response first, then predictors in dataset order.
    pub variables: Vec<VariableStats>,
    pub wave_counts: BTreeMap<u32, usize>,
}

impl DescriptiveStats {
    pub fn get(&self, name: &str) -> Option<&VariableStats> {
        self.variables.iter().find(|v| v.name == name)
    }

    pub fn to_csv_string(&self) -> String {
        let fmt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_else(|| "NA".into());
        let mut out = String::from("variable,n,n_missing,min,max,mean,sd\n");
        for v in &self.variables {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                v.name,
                v.n,
                v.n_missing,
                fmt(v.min),
                fmt(v.max),
                fmt(v.mean),
                fmt(v.sd)
            ));
        }
        out
    }
}

pub fn summarize(ds: &PanelDataset) -> DescriptiveStats {
    let mut variables = Vec::with_capacity(ds.variable_names.len() + 1);
    let response: Vec<Option<f64>> = ds.rows.iter().map(|r| Some(r.response)).collect();
    variables.push(VariableStats::from_values(&ds.response_name, &response));
    for (j, name) in ds.variable_names.iter().enumerate() {
        let col: Vec<Option<f64>> = ds.rows.iter().map(|r| r.predictors[j]).collect();
        variables.push(VariableStats::from_values(name, &col));
    }
    DescriptiveStats { variables, wave_counts: ds.wave_counts() }
}
