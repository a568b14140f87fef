//! Benchmark datasets, CSV ingestion, normalization and fold planning.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::kernel::{Matrix, RngStream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Regression,
    Classification,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormMode {
    #[default]
    MinMax01,
    ZScore,
}

/// Regression targets are mapped into this range.
pub const TARGET_RANGE: (f64, f64) = (0.05, 0.95);

/// Affine map `v -> lo + (v - center) / spread * (hi - lo)` for one column.
/// Constant columns pass through untouched.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ColumnScale {
    pub center: f64,
    pub spread: f64,
    pub lo: f64,
    pub hi: f64,
    pub constant: bool,
}

impl ColumnScale {
    fn fit(values: impl Iterator<Item = f64> + Clone, mode: NormMode, range: (f64, f64)) -> Self {
        let n = values.clone().count() as f64;
        let (center, spread) = match mode {
            NormMode::MinMax01 => {
                let (mn, mx) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| {
                    (a.min(v), b.max(v))
                });
                (mn, mx - mn)
            }
            NormMode::ZScore => {
                let mean = values.clone().sum::<f64>() / n;
                let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                (mean, var.sqrt())
            }
        };
        Self {
            center,
            spread,
            lo: range.0,
            hi: range.1,
            constant: !(spread > 0.0),
        }
    }

    pub fn apply(&self, v: f64) -> f64 {
        if self.constant {
            v
        } else {
            self.lo + (v - self.center) / self.spread * (self.hi - self.lo)
        }
    }

    pub fn invert(&self, v: f64) -> f64 {
        if self.constant {
            v
        } else {
            self.center + (v - self.lo) / (self.hi - self.lo) * self.spread
        }
    }
}

/// Training-set statistics used to scale features (and regression targets).
#[derive(Debug, Clone, PartialEq)]
pub struct NormRecord {
    pub mode: NormMode,
    pub features: Vec<ColumnScale>,
    /// Empty for classification.
    pub targets: Vec<ColumnScale>,
}

impl NormRecord {
    /// Maps normalized regression targets back to original units.
    pub fn invert_targets(&self, y: &Matrix) -> Result<Matrix> {
        check_dim("invert_targets columns", self.targets.len(), y.cols())?;
        Ok(map_columns(y, &self.targets, ColumnScale::invert))
    }

    pub fn invert_features(&self, x: &Matrix) -> Result<Matrix> {
        check_dim("invert_features columns", self.features.len(), x.cols())?;
        Ok(map_columns(x, &self.features, ColumnScale::invert))
    }
}

fn map_columns(m: &Matrix, scales: &[ColumnScale], f: fn(&ColumnScale, f64) -> f64) -> Matrix {
    let mut out = m.clone();
    for r in 0..m.rows() {
        for (v, s) in out.row_mut(r).iter_mut().zip(scales) {
            *v = f(s, *v);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: Matrix,
    /// One-hot rows for classification.
    pub y: Matrix,
    pub task: Task,
    /// 0 for regression.
    pub n_classes: usize,
    pub class_names: Vec<String>,
    /// Set once the dataset has been normalized.
    pub norm: Option<NormRecord>,
}

impl Dataset {
    pub fn regression(x: Matrix, y: Matrix) -> Result<Self> {
        check_dim("dataset rows", x.rows(), y.rows())?;
        Ok(Self {
            x,
            y,
            task: Task::Regression,
            n_classes: 0,
            class_names: Vec::new(),
            norm: None,
        })
    }

    /// `labels[i]` must be `< class_names.len()`.
    pub fn classification(x: Matrix, labels: &[usize], class_names: Vec<String>) -> Result<Self> {
        check_dim("dataset rows", x.rows(), labels.len())?;
        let k = class_names.len();
        let mut y = Matrix::zeros(labels.len(), k);
        for (r, &l) in labels.iter().enumerate() {
            if l >= k {
                return Err(Error::param(format!("label {l} out of range for {k} classes")));
            }
            y.set(r, l, 1.0);
        }
        Ok(Self {
            x,
            y,
            task: Task::Classification,
            n_classes: k,
            class_names,
            norm: None,
        })
    }

    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.rows() == 0
    }

    pub fn n_features(&self) -> usize {
        self.x.cols()
    }

    /// Class index of every row (classification only; empty otherwise).
    pub fn labels(&self) -> Vec<usize> {
        if self.task != Task::Classification {
            return Vec::new();
        }
        (0..self.len()).map(|r| crate::moe::argmax(self.y.row(r))).collect()
    }

    /// Rows in the given order; normalization state is kept.
    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            x: self.x.select_rows(indices),
            y: self.y.select_rows(indices),
            ..self.clone()
        }
    }

    /// Writes `x0..,label` (classification) or `x0..,y0..` (regression) with a header.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header: Vec<String> = (0..self.n_features()).map(|i| format!("x{i}")).collect();
        match self.task {
            Task::Classification => header.push("label".into()),
            Task::Regression => header.extend((0..self.y.cols()).map(|i| format!("y{i}"))),
        }
        w.write_record(&header)?;
        let labels = self.labels();
        for r in 0..self.len() {
            let mut rec: Vec<String> = self.x.row(r).iter().map(|v| format!("{v:?}")).collect();
            match self.task {
                Task::Classification => rec.push(self.class_names[labels[r]].clone()),
                Task::Regression => rec.extend(self.y.row(r).iter().map(|v| format!("{v:?}"))),
            }
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// `(1 + x^0.5 + y^-1 + z^-1.5)^2`.
pub fn funcapprox_target(x: f64, y: f64, z: f64) -> f64 {
    let s = 1.0 + x.sqrt() + 1.0 / y + z.powf(-1.5);
    s * s
}

pub const FUNCAPPROX_TRAIN: usize = 500;
pub const FUNCAPPROX_TEST: usize = 250;

/// 500 training points uniform on `[1,6]^3` and 250 test points on `[2,5]^3`.
pub fn gen_funcapprox(rng: &mut RngStream) -> (Dataset, Dataset) {
    let mut make = |n: usize, lo: f64, hi: f64| {
        let mut x = Matrix::zeros(n, 3);
        let mut y = Matrix::zeros(n, 1);
        for r in 0..n {
            let p: Vec<f64> = (0..3).map(|_| rng.uniform_in(lo, hi)).collect();
            y.set(r, 0, funcapprox_target(p[0], p[1], p[2]));
            x.row_mut(r).copy_from_slice(&p);
        }
        Dataset::regression(x, y).expect("matching rows")
    };
    let train = make(FUNCAPPROX_TRAIN, 1.0, 6.0);
    let test = make(FUNCAPPROX_TEST, 2.0, 5.0);
    (train, test)
}

/// Component means `(x, y)` of the three classes; every component has unit variance.
pub const ARTIFICIAL_MEANS: [[(f64, f64); 3]; 3] = [
    [(6.0, 2.0), (14.0, 3.0), (18.0, 2.0)],
    [(5.0, -1.0), (10.5, 3.5), (20.0, 0.0)],
    [(3.0, 2.0), (12.0, 6.0), (18.0, -2.0)],
];

/// Three classes, each a uniform mixture of three unit-variance 2-D Gaussians.
pub fn gen_artificial(rng: &mut RngStream, n_per_class: usize) -> Result<Dataset> {
    Ok(gen_artificial_with_components(rng, n_per_class)?.0)
}

/// As [`gen_artificial`], also returning the mixture component of every row.
pub fn gen_artificial_with_components(
    rng: &mut RngStream,
    n_per_class: usize,
) -> Result<(Dataset, Vec<usize>)> {
    if n_per_class < 3 {
        return Err(Error::param("artificial dataset needs n_per_class >= 3"));
    }
    let n = 3 * n_per_class;
    let mut x = Matrix::zeros(n, 2);
    let mut labels = Vec::with_capacity(n);
    let mut components = Vec::with_capacity(n);
    for (class, means) in ARTIFICIAL_MEANS.iter().enumerate() {
        for _ in 0..n_per_class {
            let c = rng.index(3);
            let r = labels.len();
            x.set(r, 0, means[c].0 + rng.standard_normal());
            x.set(r, 1, means[c].1 + rng.standard_normal());
            labels.push(class);
            components.push(c);
        }
    }
    let names = (1..=3).map(|c| format!("C{c}")).collect();
    Ok((Dataset::classification(x, &labels, names)?, components))
}

/// A column addressed by position or header name.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ColumnRef {
    Index(usize),
    Name(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct CsvSchema {
    pub label_column: ColumnRef,
    pub delimiter: char,
    pub header: bool,
    /// Columns dropped before parsing features (e.g. an ID column).
    pub ignore_columns: Vec<ColumnRef>,
}

impl Default for CsvSchema {
    fn default() -> Self {
        Self {
            label_column: ColumnRef::Index(0),
            delimiter: ',',
            header: false,
            ignore_columns: Vec::new(),
        }
    }
}

/// Loads a classification table; labels become class indices in order of
/// first appearance. Errors name the 1-based line of the offending record.
pub fn load_csv(path: &Path, schema: &CsvSchema) -> Result<Dataset> {
    if !schema.delimiter.is_ascii() {
        return Err(Error::Config(format!("delimiter {:?} is not ASCII", schema.delimiter)));
    }
    let ingest = |row: u64, message: String| Error::Ingest {
        path: path.to_path_buf(),
        row,
        message,
    };
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(schema.delimiter as u8)
        .has_headers(schema.header)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)?;

    let names: Vec<String> = if schema.header {
        reader.headers()?.iter().map(str::to_string).collect()
    } else {
        Vec::new()
    };
    let resolve = |c: &ColumnRef| -> Result<usize> {
        match c {
            ColumnRef::Index(i) => Ok(*i),
            ColumnRef::Name(n) => names
                .iter()
                .position(|h| h == n)
                .ok_or_else(|| ingest(1, format!("no column named `{n}` in header"))),
        }
    };
    let label_col = resolve(&schema.label_column)?;
    let ignored = schema
        .ignore_columns
        .iter()
        .map(resolve)
        .collect::<Result<Vec<_>>>()?;

    let mut width = if schema.header { Some(names.len()) } else { None };
    let mut features = Vec::new();
    let mut labels = Vec::new();
    let mut class_names: Vec<String> = Vec::new();
    let mut class_index: HashMap<String, usize> = HashMap::new();
    let mut n_features = 0;

    for rec in reader.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() == 1 && rec.get(0) == Some("") {
            continue;
        }
        let w = *width.get_or_insert(rec.len());
        if rec.len() != w {
            return Err(ingest(line, format!("expected {w} fields, found {}", rec.len())));
        }
        if label_col >= w {
            return Err(ingest(line, format!("label column {label_col} out of range")));
        }
        let mut row = Vec::with_capacity(w);
        for (c, field) in rec.iter().enumerate() {
            if c == label_col || ignored.contains(&c) {
                continue;
            }
            let v: f64 = field
                .parse()
                .map_err(|_| ingest(line, format!("column {c}: `{field}` is not a number")))?;
            if !v.is_finite() {
                return Err(ingest(line, format!("column {c}: non-finite value")));
            }
            row.push(v);
        }
        let label = rec.get(label_col).unwrap_or_default().to_string();
        if label.is_empty() {
            return Err(ingest(line, "empty label".into()));
        }
        let next = class_names.len();
        let idx = *class_index.entry(label.clone()).or_insert_with(|| {
            class_names.push(label);
            next
        });
        n_features = row.len();
        features.extend(row);
        labels.push(idx);
    }
    if labels.is_empty() {
        return Err(ingest(0, "no data rows".into()));
    }
    let x = Matrix::from_vec(labels.len(), n_features, features)?;
    Dataset::classification(x, &labels, class_names)
}

/// Keeps `floor(fraction * count)` (at least 1) uniformly chosen rows per class
/// (per dataset for regression). Original row order is preserved.
pub fn subsample(ds: &Dataset, fraction: f64, rng: &mut RngStream) -> Result<Dataset> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::param(format!("subsample fraction must be in (0, 1], got {fraction}")));
    }
    let groups = groups_by_class(ds);
    let mut keep = Vec::new();
    for mut g in groups {
        let m = ((fraction * g.len() as f64).floor() as usize).max(1).min(g.len());
        rng.shuffle(&mut g);
        keep.extend_from_slice(&g[..m]);
    }
    keep.sort_unstable();
    Ok(ds.select(&keep))
}

/// Row indices grouped by class; one group for regression.
fn groups_by_class(ds: &Dataset) -> Vec<Vec<usize>> {
    match ds.task {
        Task::Regression => vec![(0..ds.len()).collect()],
        Task::Classification => {
            let mut groups = vec![Vec::new(); ds.n_classes];
            for (i, l) in ds.labels().into_iter().enumerate() {
                groups[l].push(i);
            }
            groups
        }
    }
}

/// Fits scaling on `ds` itself and returns the scaled copy (record attached).
pub fn normalize(ds: &Dataset, mode: NormMode) -> Result<Dataset> {
    if ds.is_empty() {
        return Err(Error::param("cannot normalize an empty dataset"));
    }
    if ds.norm.is_some() {
        return Err(Error::param("dataset is already normalized"));
    }
    fn col(m: &Matrix, c: usize) -> impl Iterator<Item = f64> + Clone + '_ {
        (0..m.rows()).map(move |r| m.get(r, c))
    }
    let feature_range = (0.0, 1.0);
    let features = (0..ds.x.cols())
        .map(|c| ColumnScale::fit(col(&ds.x, c), mode, feature_range))
        .collect();
    let targets = match ds.task {
        Task::Classification => Vec::new(),
        Task::Regression => (0..ds.y.cols())
            .map(|c| ColumnScale::fit(col(&ds.y, c), NormMode::MinMax01, TARGET_RANGE))
            .collect(),
    };
    apply_normalization(
        ds,
        &NormRecord {
            mode,
            features,
            targets,
        },
    )
}

/// Scales `ds` with a previously fitted record. Applying a record to data that
/// already carries it is a no-op; a different record is an error.
pub fn apply_normalization(ds: &Dataset, record: &NormRecord) -> Result<Dataset> {
    match &ds.norm {
        Some(r) if r == record => return Ok(ds.clone()),
        Some(_) => return Err(Error::param("dataset was normalized with a different record")),
        None => {}
    }
    check_dim("normalization feature columns", record.features.len(), ds.x.cols())?;
    let mut out = ds.clone();
    out.x = map_columns(&ds.x, &record.features, ColumnScale::apply);
    if ds.task == Task::Regression {
        check_dim("normalization target columns", record.targets.len(), ds.y.cols())?;
        out.y = map_columns(&ds.y, &record.targets, ColumnScale::apply);
    }
    out.norm = Some(record.clone());
    Ok(out)
}

/// Assignment of every row to one of `k` folds.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldPlan {
    pub k: usize,
    pub assignments: Vec<usize>,
    pub stratified: bool,
}

impl FoldPlan {
    pub fn test_indices(&self, fold: usize) -> Vec<usize> {
        (0..self.assignments.len())
            .filter(|&i| self.assignments[i] == fold)
            .collect()
    }

    pub fn train_indices(&self, fold: usize) -> Vec<usize> {
        (0..self.assignments.len())
            .filter(|&i| self.assignments[i] != fold)
            .collect()
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &a in &self.assignments {
            sizes[a] += 1;
        }
        sizes
    }
}

/// Stratified k-fold assignment; falls back to plain shuffling when some class
/// has fewer than `k` rows.
pub fn kfold(ds: &Dataset, k: usize, rng: &mut RngStream) -> Result<FoldPlan> {
    if k < 2 {
        return Err(Error::param("k-fold needs k >= 2"));
    }
    if k > ds.len() {
        return Err(Error::param(format!("k = {k} exceeds sample count {}", ds.len())));
    }
    let mut groups = groups_by_class(ds);
    let stratified = ds.task == Task::Classification && groups.iter().all(|g| g.len() >= k);
    if ds.task == Task::Classification && !stratified {
        log::warn!("some class has fewer than {k} samples; folds are not stratified");
        groups = vec![(0..ds.len()).collect()];
    }
    // Dealing classes one after another round-robin keeps both the overall fold
    // sizes and the per-class counts within one of each other.
    let mut assignments = vec![0; ds.len()];
    let mut pos = 0;
    for g in &mut groups {
        rng.shuffle(g);
        for &i in g.iter() {
            assignments[i] = pos % k;
            pos += 1;
        }
    }
    Ok(FoldPlan {
        k,
        assignments,
        stratified,
    })
}
