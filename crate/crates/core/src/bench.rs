//! Experiment orchestration: trainers across folds and restarts, metrics and reports.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cg::{self, BetaFormula, LineSearchSpec};
use crate::data::{self, ColumnRef, CsvSchema, Dataset, FoldPlan, NormMode, Task};
use crate::error::{check_dim, Error, Result};
use crate::kernel::{mix64, Matrix, RngStream};
use crate::mcs::{self, Bounds, McsParams};
use crate::mlp::{self, Activation, MlpLayout};
use crate::moe::{self, argmax, MoeModel, MoeTopology, TrainSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum TrainerKind {
    #[serde(rename = "MLP")]
    Mlp,
    #[serde(rename = "GDME")]
    Gdme,
    #[serde(rename = "CGME")]
    Cgme,
    #[serde(rename = "MCS-CGME")]
    McsCgme,
}

impl TrainerKind {
    pub const ALL: [TrainerKind; 4] = [Self::Mlp, Self::Gdme, Self::Cgme, Self::McsCgme];

    pub fn name(self) -> &'static str {
        match self {
            Self::Mlp => "MLP",
            Self::Gdme => "GDME",
            Self::Cgme => "CGME",
            Self::McsCgme => "MCS-CGME",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|t| t.name().eq_ignore_ascii_case(s))
    }

    fn id(self) -> u64 {
        self as u64 + 1
    }
}

impl std::fmt::Display for TrainerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

fn default_per_class() -> usize {
    300
}

fn default_delimiter() -> char {
    ','
}

fn default_fraction() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DatasetSpec {
    /// Three-input regression with its fixed 500/250 split.
    Funcapprox,
    /// Three-class Gaussian-mixture problem.
    Artificial {
        #[serde(default = "default_per_class")]
        n_per_class: usize,
    },
    /// Classification table on disk; relative paths resolve against the config file.
    Csv {
        path: PathBuf,
        label_column: ColumnRef,
        #[serde(default = "default_delimiter")]
        delimiter: char,
        #[serde(default)]
        header: bool,
        #[serde(default)]
        ignore_columns: Vec<ColumnRef>,
        /// Stratified fraction of rows kept.
        #[serde(default = "default_fraction")]
        subsample: f64,
    },
}

impl DatasetSpec {
    pub fn label(&self) -> String {
        match self {
            Self::Funcapprox => "funcapprox".into(),
            Self::Artificial { .. } => "artificial".into(),
            Self::Csv { path, .. } => path
                .file_stem()
                .map_or_else(|| "csv".into(), |s| s.to_string_lossy().into_owned()),
        }
    }
}

/// Search settings for the weight initialization; the box is `[-bound, bound]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct McsConfig {
    pub n_nests: usize,
    pub max_evals: usize,
    pub a: f64,
    pub frac_abandon: f64,
    pub frac_top: f64,
    pub lambda: f64,
    pub bound: f64,
}

impl Default for McsConfig {
    fn default() -> Self {
        Self {
            n_nests: 25,
            max_evals: 5000,
            a: 1.0,
            frac_abandon: 0.75,
            frac_top: 0.25,
            lambda: mcs::DEFAULT_LAMBDA,
            bound: 2.0,
        }
    }
}

impl McsConfig {
    pub fn params(&self, dim: usize) -> Result<McsParams> {
        let p = McsParams {
            n_nests: self.n_nests,
            max_evals: self.max_evals,
            a: self.a,
            frac_abandon: self.frac_abandon,
            frac_top: self.frac_top,
            lambda: self.lambda,
            bounds: Bounds::uniform(dim, -self.bound, self.bound)?,
        };
        p.validate()?;
        Ok(p)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub dataset: DatasetSpec,
    pub trainers: Vec<TrainerKind>,
    pub n_experts: usize,
    pub expert_hidden: usize,
    pub gate_hidden: usize,
    pub baseline_hidden: usize,
    pub epochs: usize,
    pub eta_e: f64,
    pub eta_g: f64,
    pub momentum: f64,
    /// Folds for cross-validation; ignored by the fixed-split regression task.
    pub k: usize,
    pub restarts: usize,
    /// Half-width of the uniform random weight initialization.
    pub init_scale: f64,
    pub normalize: NormMode,
    pub cg_formula: BetaFormula,
    /// Full-batch search directions on network losses are short, so the step
    /// cap sits well above the bare line-search default.
    pub line_search: LineSearchSpec,
    pub mcs: McsConfig,
    /// When false the `wall_ms` column is written as 0 so reports are reproducible byte for byte.
    pub record_wall_clock: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            dataset: DatasetSpec::Artificial {
                n_per_class: default_per_class(),
            },
            trainers: TrainerKind::ALL.to_vec(),
            n_experts: 4,
            expert_hidden: 5,
            gate_hidden: 15,
            baseline_hidden: 25,
            epochs: 100,
            eta_e: 0.1,
            eta_g: 0.15,
            momentum: 0.9,
            k: 10,
            restarts: 3,
            init_scale: 0.5,
            normalize: NormMode::ZScore,
            cg_formula: BetaFormula::PolakRibiere,
            line_search: LineSearchSpec {
                eta_max: 1000.0,
                max_evals: 30,
                ..LineSearchSpec::default()
            },
            mcs: McsConfig::default(),
            record_wall_clock: false,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parses a config file; a relative CSV path is taken relative to the file.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        if let DatasetSpec::Csv { path: csv, .. } = &mut cfg.dataset {
            if csv.is_relative() {
                if let Some(dir) = path.parent() {
                    *csv = dir.join(&*csv);
                }
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always serializable")
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_experts", self.n_experts),
            ("expert_hidden", self.expert_hidden),
            ("gate_hidden", self.gate_hidden),
            ("baseline_hidden", self.baseline_hidden),
            ("epochs", self.epochs),
            ("restarts", self.restarts),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be >= 1")));
            }
        }
        if self.dataset != DatasetSpec::Funcapprox && self.k < 2 {
            return Err(Error::Config("k must be >= 2".into()));
        }
        if !(self.eta_e >= 0.0 && self.eta_g >= 0.0 && (0.0..1.0).contains(&self.momentum)) {
            return Err(Error::Config("learning rates must be >= 0 and momentum in [0, 1)".into()));
        }
        if !(self.init_scale > 0.0 && self.init_scale.is_finite()) {
            return Err(Error::Config("init_scale must be positive".into()));
        }
        self.line_search.validate()?;
        if let DatasetSpec::Csv { subsample, .. } = self.dataset {
            if !(subsample > 0.0 && subsample <= 1.0) {
                return Err(Error::Config("subsample must be in (0, 1]".into()));
            }
        }
        if let DatasetSpec::Artificial { n_per_class } = self.dataset {
            if n_per_class < 3 {
                return Err(Error::Config("n_per_class must be >= 3".into()));
            }
        }
        self.mcs.params(1).map(|_| ())
    }

    fn trainer_list(&self) -> Vec<TrainerKind> {
        let mut out = Vec::new();
        for &t in &self.trainers {
            if !out.contains(&t) {
                out.push(t);
            }
        }
        out
    }
}

const STREAM_DATA: u64 = 1;
const STREAM_SUBSAMPLE: u64 = 2;
const STREAM_FOLDS: u64 = 3;

/// Seed of one `(trainer, fold, restart)` run.
pub fn run_seed(seed: u64, trainer: TrainerKind, fold: usize, restart: usize) -> u64 {
    let mut h = mix64(seed);
    h = mix64(h ^ trainer.id());
    h = mix64(h ^ fold as u64);
    mix64(h ^ restart as u64)
}

/// One train/test pair, already normalized with training statistics.
#[derive(Debug, Clone)]
pub struct Split {
    pub train: Dataset,
    pub test: Dataset,
    /// Row indices into the source dataset; `None` for a fixed split.
    pub indices: Option<(Vec<usize>, Vec<usize>)>,
}

#[derive(Debug, Clone)]
pub struct Prepared {
    pub task: Task,
    pub splits: Vec<Split>,
    pub folds: Option<FoldPlan>,
}

/// Loads or generates the dataset and builds every normalized split.
pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared> {
    cfg.validate()?;
    let mut rng = RngStream::new(cfg.seed, STREAM_DATA);
    let full = match &cfg.dataset {
        DatasetSpec::Funcapprox => {
            let (train, test) = data::gen_funcapprox(&mut rng);
            let train_n = data::normalize(&train, cfg.normalize)?;
            let test_n = data::apply_normalization(&test, train_n.norm.as_ref().expect("just set"))?;
            return Ok(Prepared {
                task: Task::Regression,
                splits: vec![Split {
                    train: train_n,
                    test: test_n,
                    indices: None,
                }],
                folds: None,
            });
        }
        DatasetSpec::Artificial { n_per_class } => data::gen_artificial(&mut rng, *n_per_class)?,
        DatasetSpec::Csv {
            path,
            label_column,
            delimiter,
            header,
            ignore_columns,
            subsample,
        } => {
            let schema = CsvSchema {
                label_column: label_column.clone(),
                delimiter: *delimiter,
                header: *header,
                ignore_columns: ignore_columns.clone(),
            };
            let ds = data::load_csv(path, &schema)?;
            if *subsample < 1.0 {
                data::subsample(&ds, *subsample, &mut RngStream::new(cfg.seed, STREAM_SUBSAMPLE))?
            } else {
                ds
            }
        }
    };
    let plan = data::kfold(&full, cfg.k, &mut RngStream::new(cfg.seed, STREAM_FOLDS))?;
    let splits = (0..cfg.k)
        .map(|f| {
            let (tr, te) = (plan.train_indices(f), plan.test_indices(f));
            let train = data::normalize(&full.select(&tr), cfg.normalize)?;
            let test = data::apply_normalization(&full.select(&te), train.norm.as_ref().expect("just set"))?;
            Ok(Split {
                train,
                test,
                indices: Some((tr, te)),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Prepared {
        task: full.task,
        splits,
        folds: Some(plan),
    })
}

/// Mean squared error over every output, or accuracy in percent under argmax decoding.
pub fn metric(predictions: &Matrix, y: &Matrix, task: Task) -> Result<f64> {
    check_dim("metric rows", y.rows(), predictions.rows())?;
    check_dim("metric columns", y.cols(), predictions.cols())?;
    if y.rows() == 0 {
        return Err(Error::param("metric over zero samples"));
    }
    Ok(match task {
        Task::Regression => {
            let sq: f64 = predictions
                .as_slice()
                .iter()
                .zip(y.as_slice())
                .map(|(p, t)| (p - t) * (p - t))
                .sum();
            sq / y.as_slice().len() as f64
        }
        Task::Classification => {
            let correct = (0..y.rows())
                .filter(|&r| argmax(predictions.row(r)) == argmax(y.row(r)))
                .count();
            100.0 * correct as f64 / y.rows() as f64
        }
    })
}

/// Whether larger metric values are better for this task.
pub fn higher_is_better(task: Task) -> bool {
    task == Task::Classification
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunStatus {
    Ok,
    Failed,
}

impl RunStatus {
    pub fn name(self) -> &'static str {
        match self {
            Self::Ok => "ok",
            Self::Failed => "failed",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub trainer: TrainerKind,
    pub fold: usize,
    pub restart: usize,
    pub seed: u64,
    pub train_metric: f64,
    pub test_metric: f64,
    pub wall_ms: u64,
    pub status: RunStatus,
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub config: ExperimentConfig,
    pub task: Task,
    pub records: Vec<RunRecord>,
}

/// Trains and scores one `(trainer, fold, restart)` combination.
pub fn run_single(
    cfg: &ExperimentConfig,
    prepared: &Prepared,
    trainer: TrainerKind,
    fold: usize,
    restart: usize,
) -> RunRecord {
    let seed = run_seed(cfg.seed, trainer, fold, restart);
    let start = Instant::now();
    let split = &prepared.splits[fold];
    let outcome = train_and_predict(cfg, prepared.task, trainer, split, seed).and_then(|(tr, te)| {
        let train_metric = metric(&tr, &split.train.y, prepared.task)?;
        let test_metric = metric(&te, &split.test.y, prepared.task)?;
        if train_metric.is_finite() && test_metric.is_finite() {
            Ok((train_metric, test_metric))
        } else {
            Err(Error::NonFinite("predictions".into()))
        }
    });
    let wall_ms = if cfg.record_wall_clock {
        start.elapsed().as_millis() as u64
    } else {
        0
    };
    let (train_metric, test_metric, status) = match outcome {
        Ok((a, b)) => (a, b, RunStatus::Ok),
        Err(e) => {
            log::warn!("{trainer} fold {fold} restart {restart} failed: {e}");
            (f64::NAN, f64::NAN, RunStatus::Failed)
        }
    };
    RunRecord {
        trainer,
        fold,
        restart,
        seed,
        train_metric,
        test_metric,
        wall_ms,
        status,
    }
}

fn topology(cfg: &ExperimentConfig, task: Task, ds: &Dataset) -> MoeTopology {
    MoeTopology {
        in_dim: ds.n_features(),
        out_dim: ds.y.cols(),
        n_experts: cfg.n_experts,
        expert_hidden: cfg.expert_hidden,
        gate_hidden: cfg.gate_hidden,
        expert_activation: output_activation(task),
    }
}

fn output_activation(task: Task) -> Activation {
    match task {
        Task::Classification => Activation::Sigmoid,
        Task::Regression => Activation::Linear,
    }
}

fn train_and_predict(
    cfg: &ExperimentConfig,
    task: Task,
    trainer: TrainerKind,
    split: &Split,
    seed: u64,
) -> Result<(Matrix, Matrix)> {
    let (x, y) = (&split.train.x, &split.train.y);
    let mut rng = RngStream::new(seed, 0);
    if trainer == TrainerKind::Mlp {
        let layout = MlpLayout::new(x.cols(), cfg.baseline_hidden, y.cols(), output_activation(task))?;
        let w0 = mlp::flatten(&mlp::init_mlp(layout, &mut rng, cfg.init_scale)?);
        let fit = cg::minimize(
            |w| mlp::mse_loss(&layout, w, x, y).unwrap_or(f64::NAN),
            |w| mlp::mse_loss_and_gradient(&layout, w, x, y).map_or_else(|_| vec![f64::NAN; w.len()], |r| r.1),
            &w0,
            cfg.epochs,
            &cfg.line_search,
            cfg.cg_formula,
        )?;
        return Ok((
            mlp::predict_all(&layout, &fit.weights, x)?,
            mlp::predict_all(&layout, &fit.weights, &split.test.x)?,
        ));
    }

    let model = MoeModel::init(topology(cfg, task, &split.train), &mut rng, cfg.init_scale)?;
    let mut spec = match trainer {
        TrainerKind::Gdme => TrainSpec::gd(cfg.epochs, seed),
        _ => TrainSpec::cg(cfg.epochs, seed),
    };
    spec.eta_expert = cfg.eta_e;
    spec.eta_gate = cfg.eta_g;
    spec.momentum = cfg.momentum;
    spec.cg_formula = cfg.cg_formula;
    spec.line_search = cfg.line_search;
    let start = if trainer == TrainerKind::McsCgme {
        let params = cfg.mcs.params(model.param_count())?;
        let w = mcs::init_weights_mcs(&model, x, y, &params, &mut rng.substream(1))?;
        model.with_weights(w)?
    } else {
        model
    };
    let trained = moe::train(&start, x, y, &spec)?;
    Ok((trained.model.predict_all(x)?, trained.model.predict_all(&split.test.x)?))
}

/// Every trainer over every fold and restart. Runs execute in parallel; the
/// records come back ordered by `(trainer, fold, restart)` as configured.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunReport> {
    let prepared = prepare(cfg)?;
    let keys: Vec<(TrainerKind, usize, usize)> = cfg
        .trainer_list()
        .into_iter()
        .flat_map(|t| (0..prepared.splits.len()).flat_map(move |f| (0..cfg.restarts).map(move |r| (t, f, r))))
        .collect();
    let records = keys
        .par_iter()
        .map(|&(t, f, r)| run_single(cfg, &prepared, t, f, r))
        .collect();
    Ok(RunReport {
        config: cfg.clone(),
        task: prepared.task,
        records,
    })
}

/// Summary of one trainer's successful runs.
#[derive(Debug, Clone, PartialEq)]
pub struct Aggregate {
    pub trainer: TrainerKind,
    pub runs: usize,
    pub failed: usize,
    /// Mean over folds of the per-fold mean test metric.
    pub average: f64,
    /// Best per-fold mean test metric.
    pub best_fold_mean: f64,
    /// Best single-run test metric.
    pub best_overall: f64,
}

/// Aggregates per trainer, in order of first appearance. Failed runs are excluded.
pub fn aggregate(records: &[RunRecord], task: Task) -> Vec<Aggregate> {
    let better = |a: f64, b: f64| {
        if b.is_nan() || (higher_is_better(task) && a > b) || (!higher_is_better(task) && a < b) {
            a
        } else {
            b
        }
    };
    let mut trainers: Vec<TrainerKind> = Vec::new();
    for r in records {
        if !trainers.contains(&r.trainer) {
            trainers.push(r.trainer);
        }
    }
    trainers
        .into_iter()
        .map(|t| {
            let mine: Vec<&RunRecord> = records.iter().filter(|r| r.trainer == t).collect();
            let ok: Vec<&RunRecord> = mine.iter().copied().filter(|r| r.status == RunStatus::Ok).collect();
            let mut folds: Vec<usize> = ok.iter().map(|r| r.fold).collect();
            folds.sort_unstable();
            folds.dedup();
            let fold_means: Vec<f64> = folds
                .iter()
                .map(|&f| {
                    let v: Vec<f64> = ok.iter().filter(|r| r.fold == f).map(|r| r.test_metric).collect();
                    v.iter().sum::<f64>() / v.len() as f64
                })
                .collect();
            let average = if fold_means.is_empty() {
                f64::NAN
            } else {
                fold_means.iter().sum::<f64>() / fold_means.len() as f64
            };
            Aggregate {
                trainer: t,
                runs: mine.len(),
                failed: mine.len() - ok.len(),
                average,
                best_fold_mean: fold_means.iter().fold(f64::NAN, |b, &a| better(a, b)),
                best_overall: ok.iter().fold(f64::NAN, |b, r| better(r.test_metric, b)),
            }
        })
        .collect()
}

/// `%g`-style rendering with 6 significant digits.
pub fn sig6(x: f64) -> String {
    if x.is_nan() {
        return "nan".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if x == 0.0 {
        return "0".into();
    }
    let sci = format!("{x:.5e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    if !(-4..6).contains(&exp) {
        format!("{}e{}{:02}", trim_zeros(mantissa), if exp < 0 { '-' } else { '+' }, exp.abs())
    } else {
        let decimals = (5 - exp) as usize;
        trim_zeros(&format!("{x:.decimals$}")).to_string()
    }
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

pub const CSV_HEADER: &str = "trainer,fold,restart,seed,train_metric,test_metric,wall_ms,status";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Markdown,
}

pub fn emit_report(r: &RunReport, format: ReportFormat) -> String {
    match format {
        ReportFormat::Csv => runs_csv(&r.records),
        ReportFormat::Markdown => {
            let mut out = markdown_summary(&r.records, r.task, &r.config.dataset.label());
            out.push_str("\n## Configuration\n\n```toml\n");
            out.push_str(&r.config.to_toml());
            out.push_str("```\n");
            out
        }
    }
}

/// The flat per-run table.
pub fn runs_csv(records: &[RunRecord]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in records {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.trainer,
            r.fold,
            r.restart,
            r.seed,
            sig6(r.train_metric),
            sig6(r.test_metric),
            r.wall_ms,
            r.status.name()
        );
    }
    out
}

/// Reads back a table written by [`runs_csv`].
pub fn parse_runs_csv(text: &str) -> Result<Vec<RunRecord>> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    let header: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    if header.join(",") != CSV_HEADER {
        return Err(Error::Config(format!("unexpected runs header `{}`", header.join(","))));
    }
    let mut out = Vec::new();
    for rec in reader.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        let bad = |what: &str| Error::Config(format!("line {line}: bad {what}"));
        let num = |i: usize, what: &str| -> Result<f64> {
            match &rec[i] {
                "nan" => Ok(f64::NAN),
                s => s.parse().map_err(|_| bad(what)),
            }
        };
        out.push(RunRecord {
            trainer: TrainerKind::parse(&rec[0]).ok_or_else(|| bad("trainer"))?,
            fold: rec[1].parse().map_err(|_| bad("fold"))?,
            restart: rec[2].parse().map_err(|_| bad("restart"))?,
            seed: rec[3].parse().map_err(|_| bad("seed"))?,
            train_metric: num(4, "train_metric")?,
            test_metric: num(5, "test_metric")?,
            wall_ms: rec[6].parse().map_err(|_| bad("wall_ms"))?,
            status: match &rec[7] {
                "ok" => RunStatus::Ok,
                "failed" => RunStatus::Failed,
                _ => return Err(bad("status")),
            },
        });
    }
    Ok(out)
}

/// Markdown tables: one row per trainer with MSE columns for regression, one
/// dataset row with Best/Average columns per trainer for classification.
pub fn markdown_summary(records: &[RunRecord], task: Task, dataset: &str) -> String {
    let aggs = aggregate(records, task);
    let mut out = String::new();
    let _ = writeln!(out, "# Results: {dataset}\n");
    out.push_str(
        "Average is the mean over folds of each fold's mean test metric. \
         Best (fold mean) is the best of those per-fold means; \
         Best (overall) is the best single run. Failed runs are excluded.\n\n",
    );
    match task {
        Task::Regression => {
            out.push_str("Test MSE in normalized target units (targets scaled to [0.05, 0.95]).\n\n");
            out.push_str("| Method | MSE Average | MSE Best (fold mean) | MSE Best (overall) | Failed |\n");
            out.push_str("|---|---|---|---|---|\n");
            for a in &aggs {
                let _ = writeln!(
                    out,
                    "| {} | {} | {} | {} | {} |",
                    a.trainer,
                    sig6(a.average),
                    sig6(a.best_fold_mean),
                    sig6(a.best_overall),
                    a.failed
                );
            }
        }
        Task::Classification => {
            out.push_str("Test accuracy in percent.\n\n");
            let mut head = String::from("| Dataset |");
            let mut rule = String::from("|---|");
            for a in &aggs {
                let _ = write!(
                    head,
                    " {0} Best (fold mean) | {0} Best (overall) | {0} Average |",
                    a.trainer
                );
                rule.push_str("---|---|---|");
            }
            let _ = writeln!(out, "{head}\n{rule}");
            if !aggs.is_empty() {
                let mut row = format!("| {dataset} |");
                for a in &aggs {
                    let _ = write!(
                        row,
                        " {} | {} | {} |",
                        sig6(a.best_fold_mean),
                        sig6(a.best_overall),
                        sig6(a.average)
                    );
                }
                let _ = writeln!(out, "{row}");
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn metric_examples() {
        let y = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert_eq!(metric(&y, &y, Task::Classification).unwrap(), 100.0);
        assert_eq!(metric(&y, &y, Task::Regression).unwrap(), 0.0);
        let swapped = Matrix::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        assert_eq!(metric(&swapped, &y, Task::Classification).unwrap(), 0.0);
        let t = Matrix::from_vec(250, 1, (0..250).map(|i| i as f64 / 250.0).collect()).unwrap();
        let p = Matrix::from_vec(250, 1, t.as_slice().iter().map(|v| v + 0.1).collect()).unwrap();
        assert!((metric(&p, &t, Task::Regression).unwrap() - 0.01).abs() < 1e-12);
        assert!(metric(&p, &y, Task::Regression).is_err());
    }

    #[test]
    fn sig6_formatting() {
        assert_eq!(sig6(0.0), "0");
        assert_eq!(sig6(100.0), "100");
        assert_eq!(sig6(93.33333333), "93.3333");
        assert_eq!(sig6(0.0123456789), "0.0123457");
        assert_eq!(sig6(1.5e-7), "1.5e-07");
        assert_eq!(sig6(1234567.0), "1.23457e+06");
        assert_eq!(sig6(999999.6), "1e+06");
        assert_eq!(sig6(-2.5), "-2.5");
        assert_eq!(sig6(f64::NAN), "nan");
    }

    #[test]
    fn config_defaults_and_parsing() {
        let cfg = ExperimentConfig::from_toml("seed = 3\n[dataset]\nkind = \"funcapprox\"\n").unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!((cfg.n_experts, cfg.expert_hidden, cfg.gate_hidden, cfg.baseline_hidden), (4, 5, 15, 25));
        assert_eq!((cfg.epochs, cfg.eta_e, cfg.eta_g, cfg.k), (100, 0.1, 0.15, 10));
        assert_eq!(cfg.trainers, TrainerKind::ALL.to_vec());
        let again = ExperimentConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(cfg, again);
        let csv = ExperimentConfig::from_toml(
            "trainers = [\"GDME\", \"MCS-CGME\"]\n[dataset]\nkind = \"csv\"\npath = \"iris.csv\"\nlabel_column = \"species\"\nheader = true\n",
        )
        .unwrap();
        assert_eq!(csv.trainers, vec![TrainerKind::Gdme, TrainerKind::McsCgme]);
        assert!(ExperimentConfig::from_toml("epochs = 0").is_err());
        assert!(ExperimentConfig::from_toml("bogus_key = 1").is_err());
        assert!(ExperimentConfig::from_toml("trainers = [\"SVM\"]").is_err());
    }

    #[test]
    fn run_seeds_are_distinct() {
        let mut seen = std::collections::HashSet::new();
        for t in TrainerKind::ALL {
            for f in 0..10 {
                for r in 0..5 {
                    assert!(seen.insert(run_seed(7, t, f, r)));
                }
            }
        }
    }

    fn record(trainer: TrainerKind, fold: usize, restart: usize, test: f64) -> RunRecord {
        RunRecord {
            trainer,
            fold,
            restart,
            seed: 1,
            train_metric: test,
            test_metric: test,
            wall_ms: 0,
            status: RunStatus::Ok,
        }
    }

    #[test]
    fn aggregates_both_interpretations() {
        let rs = vec![
            record(TrainerKind::Gdme, 0, 0, 90.0),
            record(TrainerKind::Gdme, 0, 1, 100.0),
            record(TrainerKind::Gdme, 1, 0, 96.0),
            record(TrainerKind::Gdme, 1, 1, 96.0),
            RunRecord {
                status: RunStatus::Failed,
                test_metric: f64::NAN,
                ..record(TrainerKind::Gdme, 1, 2, 0.0)
            },
        ];
        let a = &aggregate(&rs, Task::Classification)[0];
        assert_eq!((a.runs, a.failed), (5, 1));
        assert_eq!(a.average, 95.5);
        assert_eq!(a.best_fold_mean, 96.0);
        assert_eq!(a.best_overall, 100.0);
        let m = &aggregate(&rs[..4], Task::Regression)[0];
        assert_eq!((m.best_fold_mean, m.best_overall), (95.0, 90.0));
    }

    #[test]
    fn reports_shape() {
        let rs = vec![record(TrainerKind::Cgme, 0, 0, 93.5), record(TrainerKind::McsCgme, 0, 0, 97.0)];
        let md = markdown_summary(&rs, Task::Classification, "iris");
        assert!(md.contains("Best") && md.contains("Average"));
        assert!(md.contains("| iris | 93.5 | 93.5 | 93.5 | 97 | 97 | 97 |"));
        let empty = markdown_summary(&[], Task::Classification, "iris");
        let table: Vec<&str> = empty.lines().filter(|l| l.starts_with('|')).collect();
        assert_eq!(table, vec!["| Dataset |", "|---|"]);
        let csv = runs_csv(&rs);
        assert_eq!(csv.lines().count(), 3);
        assert_eq!(parse_runs_csv(&csv).unwrap(), rs);
        assert!(parse_runs_csv("a,b\n1,2\n").is_err());
    }

    fn tiny(kind: DatasetSpec, trainers: Vec<TrainerKind>, k: usize, restarts: usize) -> ExperimentConfig {
        ExperimentConfig {
            dataset: kind,
            trainers,
            k,
            restarts,
            epochs: 5,
            mcs: McsConfig {
                max_evals: 60,
                ..McsConfig::default()
            },
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn folds_never_leak_and_counts_match() {
        let cfg = tiny(DatasetSpec::Artificial { n_per_class: 10 }, vec![TrainerKind::Gdme], 3, 2);
        let prepared = prepare(&cfg).unwrap();
        for s in &prepared.splits {
            let (tr, te) = s.indices.as_ref().unwrap();
            assert!(te.iter().all(|i| !tr.contains(i)));
            assert_eq!(tr.len() + te.len(), 30);
        }
        let report = run_experiment(&cfg).unwrap();
        assert_eq!(report.records.len(), 3 * 2);
        assert!(report.records.iter().all(|r| r.status == RunStatus::Ok));
    }

    #[test]
    fn single_run_reproduces_full_run_row() {
        let cfg = tiny(
            DatasetSpec::Artificial { n_per_class: 8 },
            vec![TrainerKind::Mlp, TrainerKind::McsCgme],
            2,
            2,
        );
        let report = run_experiment(&cfg).unwrap();
        let prepared = prepare(&cfg).unwrap();
        let row = run_single(&cfg, &prepared, TrainerKind::McsCgme, 1, 1);
        assert!(report.records.contains(&row));
        let again = run_experiment(&cfg).unwrap();
        assert_eq!(
            emit_report(&report, ReportFormat::Csv),
            emit_report(&again, ReportFormat::Csv)
        );
    }

    #[test]
    fn funcapprox_uses_fixed_split() {
        let cfg = tiny(DatasetSpec::Funcapprox, vec![TrainerKind::Cgme], 7, 1);
        let prepared = prepare(&cfg).unwrap();
        assert_eq!(prepared.splits.len(), 1);
        assert_eq!((prepared.splits[0].train.len(), prepared.splits[0].test.len()), (500, 250));
        let report = run_experiment(&cfg).unwrap();
        assert_eq!(report.records.len(), 1);
        assert_eq!(report.task, Task::Regression);
        let md = emit_report(&report, ReportFormat::Markdown);
        assert!(md.contains("| CGME |"));
    }
}
