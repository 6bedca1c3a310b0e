//! `mixedtrees`: batch runs of summarize, fit, cv, simulate and predict.
//!
//! Exit codes: 0 success, 2 input or config error, 3 fit or runtime error.

mod config;
mod output;

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use mixedtrees::dataset::{drop_missing, make_folds, read_csv, summarize, write_csv, CsvSchema, PanelDataset};
use mixedtrees::evaluation::{compare, cross_validate, FittedModel, ModelSpec};
use mixedtrees::lmm::wald_csv;
use mixedtrees::merf;
use mixedtrees::synthgen::{self, DgpSpec};
use mixedtrees::Error;

use config::{DataConfig, RunConfig};
use output::RunDir;

#[derive(Debug)]
pub struct CliError {
    code: u8,
    name: String,
    message: String,
}

impl CliError {
    pub fn input(message: impl Into<String>) -> Self {
        Self { code: 2, name: "Config".into(), message: message.into() }
    }

    pub fn io(message: impl Into<String>) -> Self {
        Self { code: 2, name: "Io".into(), message: message.into() }
    }

    fn runtime(name: &str, message: impl Into<String>) -> Self {
        Self { code: 3, name: name.into(), message: message.into() }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::MissingColumn(_)
            | Error::DuplicateSubjectWave(..)
            | Error::NonNumericResponse(_)
            | Error::InvalidWave(_)
            | Error::UnknownVariable(_)
            | Error::MissingValues(_)
            | Error::TooFewUnits(..)
            | Error::TooFewRows(..)
            | Error::MalformedModel(_)
            | Error::InvalidSpec(_)
            | Error::UnknownPreset(_)
            | Error::InvalidParams(_)
            | Error::Io(_)
            | Error::Csv(_)
            | Error::Json(_) => 2,
            _ => 3,
        };
        Self { code, name: e.name().to_string(), message: e.to_string() }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "error[{}]: {}", self.name, self.message)
    }
}

#[derive(Parser)]
#[command(name = "mixedtrees", version, about = "Tree-based mixed-effects models for longitudinal data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// Input CSV (overrides `data.path`).
    #[arg(long)]
    data: Option<PathBuf>,
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (overrides `out`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Master seed (overrides `seed`).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Descriptive statistics of every variable.
    Summarize(Common),
    /// Fit one model and export it.
    Fit(Common),
    /// Cross-validate several models on shared folds and compare them.
    Cv(Common),
    /// Generate a synthetic panel.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Built-in generator preset.
        #[arg(long)]
        preset: Option<String>,
        /// JSON generator spec.
        #[arg(long, conflicts_with = "preset")]
        spec: Option<PathBuf>,
    },
    /// Predict from a saved model.
    Predict {
        #[command(flatten)]
        common: Common,
        /// Model JSON written by `fit`.
        #[arg(long)]
        model: PathBuf,
    },
}

/// Resolved settings shared by every command.
struct Run {
    cfg: RunConfig,
    config_file: Option<(PathBuf, String)>,
    data: Option<PathBuf>,
    out: Option<PathBuf>,
    seed: Option<u64>,
}

impl Run {
    fn new(common: &Common) -> Result<Self, CliError> {
        let (cfg, config_file) = match &common.config {
            Some(path) => {
                let (cfg, text) = RunConfig::load(path)?;
                (cfg, Some((path.clone(), text)))
            }
            None => (RunConfig::default(), None),
        };
        Ok(Self {
            data: common.data.clone().or_else(|| cfg.data.path.clone()),
            out: common.out.clone().or_else(|| cfg.out.clone()),
            seed: common.seed.or(cfg.seed),
            cfg,
            config_file,
        })
    }

    fn out_dir(&self, command: &'static str, seed: Option<u64>) -> Result<RunDir, CliError> {
        let out = self.out.as_ref().ok_or_else(|| CliError::input("no output directory given (--out or `out`)"))?;
        let mut dir = RunDir::create(out, command, seed)?;
        if let Some((path, text)) = &self.config_file {
            dir.input("config", path, text.as_bytes());
        }
        Ok(dir)
    }

    fn seed(&self, command: &str) -> Result<u64, CliError> {
        self.seed.ok_or_else(|| CliError::input(format!("`{command}` is stochastic and needs a seed (--seed or `seed`)")))
    }

    fn data_path(&self) -> Result<&Path, CliError> {
        self.data.as_deref().ok_or_else(|| CliError::input("no data file given (--data or `data.path`)"))
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>, CliError> {
    std::fs::read(path).map_err(|e| CliError::io(format!("cannot read {}: {e}", path.display())))
}

fn delimiter(cfg: &DataConfig) -> Result<u8, CliError> {
    match cfg.delimiter {
        None => Ok(b','),
        Some(c) if c.is_ascii() => Ok(c as u8),
        Some(c) => Err(CliError::input(format!("delimiter `{c}` is not ASCII"))),
    }
}

/// Name of must-have column: explicitly configured, or the default.
fn role(value: &Option<String>, default: &str) -> String {
    value.clone().unwrap_or_else(|| default.to_string())
}

fn headers(bytes: &[u8], delim: u8) -> Result<Vec<String>, CliError> {
    let mut rdr = csv::ReaderBuilder::new().delimiter(delim).from_reader(bytes);
    let headers = rdr.headers().map_err(Error::from)?;
    Ok(headers.iter().map(|h| h.trim().to_string()).collect())
}

/// Loads the panel. The response defaults to the first column that is not
/// subject, wave or one of `exclude`.
fn load_panel(
    bytes: &[u8],
    cfg: &DataConfig,
    exclude: &[String],
    predictors: Option<Vec<String>>,
) -> Result<PanelDataset, CliError> {
    let delim = delimiter(cfg)?;
    let subject = role(&cfg.subject, "subject");
    let wave = role(&cfg.wave, "wave");
    let cols = headers(bytes, delim)?;
    let response = match &cfg.response {
        Some(r) => r.clone(),
        None => cols
            .iter()
            .find(|c| **c != subject && **c != wave && !exclude.contains(c))
            .cloned()
            .ok_or_else(|| Error::MissingColumn("<response>".into()))?,
    };
    let mut schema = CsvSchema::new(&subject, &wave, &response).with_delimiter(delim);
    if let Some(p) = predictors.or_else(|| cfg.predictors.clone()) {
        schema = schema.with_predictors(p);
    }
    Ok(read_csv(bytes, &schema)?)
}

/// Drops rows with missing values in `vars`, reporting them in dropped.json.
fn drop_and_report(ds: &PanelDataset, vars: &[String], dir: &mut RunDir) -> Result<PanelDataset, CliError> {
    let (kept, report) = drop_missing(ds, vars);
    if !report.is_empty() {
        warn!("dropped {} rows with missing values", report.len());
        dir.write("dropped.json", report.to_json())?;
    }
    Ok(kept)
}

fn cmd_summarize(run: &Run) -> Result<(), CliError> {
    let path = run.data_path()?;
    let bytes = read_file(path)?;
    let ds = load_panel(&bytes, &run.cfg.data, &[], None)?;
    let mut dir = run.out_dir("summarize", run.seed)?;
    dir.input("data", path, &bytes);
    let stats = summarize(&ds);
    dir.write("stats.csv", stats.to_csv_string())?;
    dir.write("stats.json", serde_json::to_string_pretty(&stats).expect("serializable") + "\n")?;
    dir.finish()
}

fn prepare_spec(spec: &ModelSpec, ds: &PanelDataset, seed: Option<u64>) -> ModelSpec {
    let spec = spec.clone().with_default_predictors(ds.variable_names());
    match seed {
        Some(s) => spec.with_seed(s),
        None => spec,
    }
}

fn cmd_fit(run: &Run) -> Result<(), CliError> {
    let spec = run.cfg.model.as_ref().ok_or_else(|| CliError::input("`fit` needs a [model] table in the config"))?;
    let seed = if spec.is_stochastic() || run.cfg.grid.is_some() { Some(run.seed("fit")?) } else { run.seed };
    let path = run.data_path()?;
    let bytes = read_file(path)?;
    let ds = load_panel(&bytes, &run.cfg.data, &[], None)?;
    let mut dir = run.out_dir("fit", seed)?;
    dir.input("data", path, &bytes);
    let mut spec = prepare_spec(spec, &ds, seed);
    let ds = drop_and_report(&ds, &spec.variables(), &mut dir)?;

    if let Some(grid) = &run.cfg.grid {
        let ModelSpec::Merf { predictors, params } = &mut spec else {
            return Err(CliError::input("[grid] applies to the merf family only"));
        };
        let (best, rows) = merf::grid_search(&ds, predictors, params, &grid.grid(), grid.k, seed.expect("seeded"))?;
        let mut csv = String::from("n_trees,max_depth,n_iter,mae\n");
        for r in &rows {
            csv.push_str(&format!("{},{},{},{}\n", r.n_trees, r.max_depth, r.n_iter, r.mae));
        }
        dir.write("grid.csv", csv)?;
        info!("grid search picked {} trees, depth {}, {} iterations", best.forest.n_trees, best.forest.max_depth, best.n_iter);
        *params = best;
    }

    info!("fitting {} on {} rows", spec.family(), ds.n_rows());
    let model = spec.fit(&ds)?;
    dir.write("model.json", model.to_json())?;
    match &model {
        FittedModel::Lmm(fit) => dir.write("wald.csv", wald_csv(&fit.wald_table()))?,
        FittedModel::Cart(_) | FittedModel::Reem(_) => {
            dir.write("tree.dot", model.tree().expect("tree family").export_dot(None))?
        }
        FittedModel::Merf(m) => {
            let x = ds.features(&m.predictors)?;
            dir.write("representative_tree.dot", m.representative_tree(&x).export_dot(None))?
        }
    }
    dir.finish()
}

fn cmd_cv(run: &Run) -> Result<(), CliError> {
    let seed = run.seed("cv")?;
    let cfg = &run.cfg;
    if cfg.models.is_empty() {
        return Err(CliError::input("`cv` needs at least one [[models]] entry"));
    }
    let mut families = BTreeSet::new();
    for m in &cfg.models {
        if !families.insert(m.family()) {
            return Err(CliError::input(format!("family `{}` is listed twice", m.family())));
        }
    }
    if !families.contains(cfg.cv.baseline.as_str()) {
        return Err(CliError::input(format!("baseline `{}` is not among the models", cfg.cv.baseline)));
    }
    let path = run.data_path()?;
    let bytes = read_file(path)?;
    let ds = load_panel(&bytes, &cfg.data, &[], None)?;
    let mut dir = run.out_dir("cv", Some(seed))?;
    dir.input("data", path, &bytes);
    let specs: Vec<ModelSpec> = cfg.models.iter().map(|m| prepare_spec(m, &ds, Some(seed))).collect();
    // one row set for every model so that the folds and fingerprints agree
    let vars: Vec<String> =
        specs.iter().flat_map(ModelSpec::variables).collect::<BTreeSet<_>>().into_iter().collect();
    let ds = drop_and_report(&ds, &vars, &mut dir)?;
    let folds = make_folds(&ds, cfg.cv.k, cfg.cv.mode, seed)?;
    info!("{} {} folds, sizes {:?}", cfg.cv.k, cfg.cv.mode, folds.fold_sizes());

    let mut reports = Vec::with_capacity(specs.len());
    for spec in &specs {
        info!("cross-validating {}", spec.family());
        let report = cross_validate(&ds, spec, &folds)?;
        for e in &report.errors {
            warn!("{}: fold {:?} failed: error[{}]: {}", report.family, e.fold, e.error, e.message);
        }
        dir.write(&format!("cv_{}.json", report.family), report.to_json() + "\n")?;
        reports.push(report);
    }
    let table = compare(&reports, &cfg.cv.baseline)?;
    dir.write("comparison.json", table.to_json() + "\n")?;
    dir.write("comparison.txt", table.to_text())?;
    dir.finish()?;

    if reports.iter().all(|r| r.mean_mae.is_none()) {
        let first = reports.iter().flat_map(|r| &r.errors).next();
        let (name, msg) = first.map_or(("CvFailed", "no fold could be scored".to_string()), |e| {
            (e.error.as_str(), format!("every model failed; first error: {}", e.message))
        });
        return Err(CliError::runtime(name, msg));
    }
    if reports.iter().any(|r| !r.complete) {
        eprintln!("warning: some folds failed; see the `complete` column and the per-model reports");
    }
    Ok(())
}

fn cmd_simulate(run: &Run, preset: Option<&str>, spec_path: Option<&Path>) -> Result<(), CliError> {
    let seed = run.seed("simulate")?;
    let sim = &run.cfg.simulate;
    let preset = preset.map(str::to_string).or_else(|| sim.preset.clone());
    let spec_path = spec_path.map(Path::to_path_buf).or_else(|| sim.spec.clone());
    let mut inputs = Vec::new();
    let spec: DgpSpec = match (preset, spec_path) {
        (Some(name), None) => synthgen::preset(&name)?,
        (None, Some(p)) => {
            let bytes = read_file(&p)?;
            let text = String::from_utf8(bytes.clone())
                .map_err(|_| CliError::from(Error::InvalidSpec(format!("{} is not UTF-8", p.display()))))?;
            inputs.push((p, bytes));
            DgpSpec::from_json(&text)?
        }
        (Some(_), Some(_)) => return Err(CliError::input("give either a preset or a spec file, not both")),
        (None, None) => return Err(CliError::input("`simulate` needs --preset or --spec")),
    };
    let mut spec = spec.with_seed(seed);
    if let Some(m) = sim.subjects {
        spec = spec.with_subjects(m);
    }
    spec.validate()?;
    let (ds, truth) = synthgen::generate(&spec)?;
    let mut dir = run.out_dir("simulate", Some(seed))?;
    for (p, bytes) in &inputs {
        dir.input("spec", p, bytes);
    }
    let mut csv = Vec::new();
    write_csv(&ds, &mut csv, delimiter(&run.cfg.data)?)?;
    dir.write("data.csv", csv)?;
    dir.write("truth.json", truth.to_json() + "\n")?;
    dir.write("spec.json", spec.to_json() + "\n")?;
    info!("simulated {} rows for {} subjects", ds.n_rows(), ds.subjects().len());
    dir.finish()
}

/// Stand-in response column for prediction inputs that carry none.
const PLACEHOLDER_RESPONSE: &str = "__response";

fn cmd_predict(run: &Run, model_path: &Path) -> Result<(), CliError> {
    let model_bytes = read_file(model_path)?;
    let text = std::str::from_utf8(&model_bytes)
        .map_err(|_| CliError::from(Error::MalformedModel("model file is not UTF-8".into())))?;
    let model = FittedModel::from_json(text)?;
    let vars = model.variables();
    let path = run.data_path()?;
    let mut bytes = read_file(path)?;
    let cfg = &run.cfg.data;
    let delim = delimiter(cfg)?;
    let subject = role(&cfg.subject, "subject");
    let wave = role(&cfg.wave, "wave");
    let cols = headers(&bytes, delim)?;
    let mut data_cfg = DataConfig { response: cfg.response.clone(), ..DataConfig::default() };
    data_cfg.subject = Some(subject.clone());
    data_cfg.wave = Some(wave.clone());
    data_cfg.delimiter = cfg.delimiter;
    let has_response = cfg.response.is_some()
        || cols.iter().any(|c| *c != subject && *c != wave && !vars.contains(c));
    let raw = bytes.clone();
    if !has_response {
        bytes = with_placeholder_response(&bytes, delim)?;
        data_cfg.response = Some(PLACEHOLDER_RESPONSE.into());
    }
    let predictors = if vars.is_empty() { None } else { Some(vars.clone()) };
    let ds = load_panel(&bytes, &data_cfg, &vars, predictors)?;
    let mut dir = run.out_dir("predict", run.seed)?;
    dir.input("model", model_path, &model_bytes);
    dir.input("data", path, &raw);

    let pred = model.predict(&ds)?;
    let mut wtr = csv::Writer::from_writer(Vec::new());
    let io = |e: csv::Error| CliError::from(Error::from(e));
    wtr.write_record(["subject", "wave", "prediction", "cluster"]).map_err(io)?;
    for ((row, value), seen) in ds.rows().iter().zip(&pred.values).zip(&pred.seen) {
        wtr.write_record([
            row.subject.clone(),
            row.wave.to_string(),
            value.to_string(),
            if *seen { "seen" } else { "unseen" }.to_string(),
        ])
        .map_err(io)?;
    }
    let csv = wtr.into_inner().map_err(|e| CliError::io(e.to_string()))?;
    dir.write("predictions.csv", csv)?;
    dir.finish()
}

fn with_placeholder_response(bytes: &[u8], delim: u8) -> Result<Vec<u8>, CliError> {
    let conv = |e: csv::Error| CliError::from(Error::from(e));
    let mut rdr = csv::ReaderBuilder::new().delimiter(delim).from_reader(bytes);
    let mut wtr = csv::WriterBuilder::new().delimiter(delim).from_writer(Vec::new());
    let mut header = rdr.headers().map_err(conv)?.clone();
    header.push_field(PLACEHOLDER_RESPONSE);
    wtr.write_record(&header).map_err(conv)?;
    for record in rdr.records() {
        let mut record = record.map_err(conv)?;
        record.push_field("0");
        wtr.write_record(&record).map_err(conv)?;
    }
    wtr.into_inner().map_err(|e| CliError::io(e.to_string()))
}

fn run(cli: Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Summarize(c) => cmd_summarize(&Run::new(c)?),
        Command::Fit(c) => cmd_fit(&Run::new(c)?),
        Command::Cv(c) => cmd_cv(&Run::new(c)?),
        Command::Simulate { common, preset, spec } => cmd_simulate(&Run::new(common)?, preset.as_deref(), spec.as_deref()),
        Command::Predict { common, model } => cmd_predict(&Run::new(common)?, model),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.code)
        }
    }
}
