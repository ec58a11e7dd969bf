//! Tabular datasets: schema declaration, CSV ingestion, min-max normalization,
//! seeded splitting and L2-ball neighborhood sampling.

use std::collections::HashSet;
use std::path::Path;

use ndarray::{Array2, ArrayView1};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureKind {
    Numeric,
    Binary,
}

/// Direction in which an actionable feature may be moved.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Direction {
    #[default]
    Any,
    IncreaseOnly,
    DecreaseOnly,
}

impl Direction {
    /// Allowed interval of a normalized-space change.
    pub fn interval(self) -> (f64, f64) {
        match self {
            Direction::Any => (-1.0, 1.0),
            Direction::IncreaseOnly => (0.0, 1.0),
            Direction::DecreaseOnly => (-1.0, 0.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub name: String,
    pub kind: FeatureKind,
    pub actionable: bool,
    #[serde(default)]
    pub direction: Direction,
    pub raw_min: f64,
    pub raw_max: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "task", rename_all = "kebab-case")]
pub enum Task {
    Classification { n_classes: usize },
    Regression,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetSpec {
    pub name: String,
    #[serde(flatten)]
    pub task: Task,
}

/// Feature names, kinds and actionability constraints plus the prediction target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSchema {
    pub features: Vec<FeatureSpec>,
    pub target: TargetSpec,
}

impl FeatureSchema {
    pub fn new(features: Vec<FeatureSpec>, target: TargetSpec) -> Result<Self> {
        let schema = FeatureSchema { features, target };
        schema.validate()?;
        Ok(schema)
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let schema: FeatureSchema =
            toml::from_str(text).map_err(|e| Error::Schema(e.to_string()))?;
        schema.validate()?;
        Ok(schema)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref())?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("schema serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.features.is_empty() {
            return Err(Error::Schema("no features declared".into()));
        }
        let mut seen = HashSet::new();
        for f in &self.features {
            if !seen.insert(f.name.as_str()) {
                return Err(Error::Schema(format!(
                    "duplicate feature name '{}'",
                    f.name
                )));
            }
            if f.name == self.target.name {
                return Err(Error::Schema(format!(
                    "feature '{}' shadows the target",
                    f.name
                )));
            }
            match f.kind {
                FeatureKind::Numeric => {
                    if !(f.raw_min < f.raw_max) {
                        return Err(Error::Schema(format!(
                            "feature '{}': raw_min must be < raw_max",
                            f.name
                        )));
                    }
                }
                FeatureKind::Binary => {
                    if f.raw_min != 0.0 || f.raw_max != 1.0 {
                        return Err(Error::Schema(format!(
                            "binary feature '{}' must declare raw_min = 0, raw_max = 1",
                            f.name
                        )));
                    }
                }
            }
        }
        if !self.features.iter().any(|f| f.actionable) {
            return Err(Error::Schema(
                "at least one feature must be actionable".into(),
            ));
        }
        if let Task::Classification { n_classes } = self.target.task {
            if n_classes < 2 {
                return Err(Error::Schema(
                    "classification needs at least 2 classes".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn n_features(&self) -> usize {
        self.features.len()
    }

    pub fn task(&self) -> Task {
        self.target.task
    }

    /// Stable hex digest identifying the schema, used to match snapshots to data.
    pub fn fingerprint(&self) -> String {
        let canonical = serde_json::to_string(self).expect("schema serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Labels {
    Classes(Vec<usize>),
    Values(Vec<f64>),
}

impl Labels {
    pub fn len(&self) -> usize {
        match self {
            Labels::Classes(v) => v.len(),
            Labels::Values(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn select(&self, idx: &[usize]) -> Labels {
        match self {
            Labels::Classes(v) => Labels::Classes(idx.iter().map(|&i| v[i]).collect()),
            Labels::Values(v) => Labels::Values(idx.iter().map(|&i| v[i]).collect()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub schema: FeatureSchema,
    pub rows: Array2<f64>,
    pub labels: Labels,
    pub normalized: bool,
}

impl Dataset {
    pub fn new(
        schema: FeatureSchema,
        rows: Array2<f64>,
        labels: Labels,
        normalized: bool,
    ) -> Result<Self> {
        if rows.ncols() != schema.n_features() {
            return Err(Error::Shape {
                expected: schema.n_features(),
                got: rows.ncols(),
            });
        }
        if rows.nrows() != labels.len() {
            return Err(Error::Shape {
                expected: rows.nrows(),
                got: labels.len(),
            });
        }
        match (&labels, schema.task()) {
            (Labels::Classes(c), Task::Classification { n_classes }) => {
                if let Some(bad) = c.iter().find(|&&c| c >= n_classes) {
                    return Err(Error::Schema(format!("class label {bad} out of range")));
                }
            }
            (Labels::Values(v), Task::Regression) => {
                if v.iter().any(|y| !y.is_finite()) {
                    return Err(Error::NonFinite("regression label".into()));
                }
            }
            _ => {
                return Err(Error::Schema(
                    "label kind does not match target task".into(),
                ))
            }
        }
        if normalized && rows.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Contract(
                "normalized dataset has entries outside [0,1]".into(),
            ));
        }
        Ok(Dataset {
            schema,
            rows,
            labels,
            normalized,
        })
    }

    pub fn len(&self) -> usize {
        self.rows.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn n_features(&self) -> usize {
        self.rows.ncols()
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.rows.row(i)
    }

    pub fn class_labels(&self) -> Option<&[usize]> {
        match &self.labels {
            Labels::Classes(c) => Some(c),
            Labels::Values(_) => None,
        }
    }

    /// Rows at the given indices, in that order.
    pub fn select(&self, idx: &[usize]) -> Dataset {
        Dataset {
            schema: self.schema.clone(),
            rows: self.rows.select(ndarray::Axis(0), idx),
            labels: self.labels.select(idx),
            normalized: self.normalized,
        }
    }

    pub fn normalize(&self, stats: &NormalizationStats) -> Result<Dataset> {
        if self.normalized {
            return Err(Error::Contract("dataset is already normalized".into()));
        }
        let mut rows = self.rows.clone();
        for mut row in rows.rows_mut() {
            let z = stats.normalize(&row.to_vec())?;
            row.assign(&ArrayView1::from(&z));
        }
        Dataset::new(self.schema.clone(), rows, self.labels.clone(), true)
    }
}

/// Reads a comma-separated file whose header names every schema feature and the target.
pub fn load_csv(path: impl AsRef<Path>, schema: &FeatureSchema) -> Result<Dataset> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
    let header = reader
        .headers()
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?
        .clone();
    let position = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    };
    let feature_cols: Vec<usize> = schema
        .features
        .iter()
        .map(|f| position(&f.name))
        .collect::<Result<_>>()?;
    let target_col = position(&schema.target.name)?;

    let n = schema.n_features();
    let mut values = Vec::new();
    let mut classes = Vec::new();
    let mut targets = Vec::new();
    for (i, record) in reader.records().enumerate() {
        // 1-based data row numbering, header excluded.
        let row = i + 1;
        let record = record.map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            row,
            column: String::new(),
            message: e.to_string(),
        })?;
        let parse_err = |column: &str, message: String| Error::Parse {
            path: path.to_path_buf(),
            row,
            column: column.to_string(),
            message,
        };
        for (spec, &col) in schema.features.iter().zip(&feature_cols) {
            let cell = record.get(col).unwrap_or("");
            let v: f64 = cell
                .parse()
                .map_err(|_| parse_err(&spec.name, format!("non-numeric cell '{cell}'")))?;
            if !v.is_finite() {
                return Err(parse_err(&spec.name, "non-finite value".into()));
            }
            if spec.kind == FeatureKind::Binary && v != 0.0 && v != 1.0 {
                return Err(parse_err(
                    &spec.name,
                    format!("binary feature has value {v}"),
                ));
            }
            values.push(v);
        }
        let cell = record.get(target_col).unwrap_or("");
        let target_name = &schema.target.name;
        match schema.task() {
            Task::Classification { n_classes } => {
                let c: usize = cell
                    .parse()
                    .map_err(|_| parse_err(target_name, format!("invalid class label '{cell}'")))?;
                if c >= n_classes {
                    return Err(parse_err(
                        target_name,
                        format!("class label {c} out of range 0..{n_classes}"),
                    ));
                }
                classes.push(c);
            }
            Task::Regression => {
                let y: f64 = cell
                    .parse()
                    .map_err(|_| parse_err(target_name, format!("non-numeric label '{cell}'")))?;
                if !y.is_finite() {
                    return Err(parse_err(target_name, "non-finite label".into()));
                }
                targets.push(y);
            }
        }
    }
    let count = values.len() / n;
    let rows = Array2::from_shape_vec((count, n), values).expect("row-major fill");
    let labels = match schema.task() {
        Task::Classification { .. } => Labels::Classes(classes),
        Task::Regression => Labels::Values(targets),
    };
    Dataset::new(schema.clone(), rows, labels, false)
}

/// Per-feature min/max fitted on a training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

pub fn fit_normalizer(train: &Dataset) -> Result<NormalizationStats> {
    if train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if train.normalized {
        return Err(Error::Contract(
            "normalizer must be fitted on raw data".into(),
        ));
    }
    let n = train.n_features();
    let mut min = vec![f64::INFINITY; n];
    let mut max = vec![f64::NEG_INFINITY; n];
    for row in train.rows.rows() {
        for (j, &v) in row.iter().enumerate() {
            min[j] = min[j].min(v);
            max[j] = max[j].max(v);
        }
    }
    Ok(NormalizationStats { min, max })
}

impl NormalizationStats {
    pub fn len(&self) -> usize {
        self.min.len()
    }

    pub fn is_empty(&self) -> bool {
        self.min.is_empty()
    }

    pub fn is_constant(&self, feature: usize) -> bool {
        self.max[feature] <= self.min[feature]
    }

    fn check_len(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.len() {
            return Err(Error::Shape {
                expected: self.len(),
                got: x.len(),
            });
        }
        Ok(())
    }

    pub fn normalize(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_len(x)?;
        Ok(x.iter()
            .enumerate()
            .map(|(j, &v)| {
                if self.is_constant(j) {
                    0.0
                } else {
                    ((v - self.min[j]) / (self.max[j] - self.min[j])).clamp(0.0, 1.0)
                }
            })
            .collect())
    }

    pub fn denormalize(&self, z: &[f64]) -> Result<Vec<f64>> {
        self.check_len(z)?;
        Ok(z.iter()
            .enumerate()
            .map(|(j, &v)| self.min[j] + v * (self.max[j] - self.min[j]))
            .collect())
    }

    /// Converts a normalized-space difference to raw units.
    pub fn scale_delta(&self, dz: &[f64]) -> Result<Vec<f64>> {
        self.check_len(dz)?;
        Ok(dz
            .iter()
            .enumerate()
            .map(|(j, &d)| d * (self.max[j] - self.min[j]))
            .collect())
    }
}

/// Seeded shuffle split; the train part gets `floor(fraction * len)` rows.
pub fn split(dataset: &Dataset, train_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Config(format!(
            "train fraction must lie in (0,1), got {train_fraction}"
        )));
    }
    let n = dataset.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = ((train_fraction * n as f64) + 1e-9).floor() as usize;
    let (train_idx, test_idx) = idx.split_at(n_train);
    Ok((dataset.select(train_idx), dataset.select(test_idx)))
}

/// Uniform draw from the L2 ball of `radius` around `center`, without clamping.
pub fn sample_ball<R: Rng + ?Sized>(center: &[f64], radius: f64, rng: &mut R) -> Vec<f64> {
    let n = center.len();
    let dir: Vec<f64> = (0..n)
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect();
    let norm = dir
        .iter()
        .map(|d| d * d)
        .sum::<f64>()
        .sqrt()
        .max(f64::MIN_POSITIVE);
    let r = radius * rng.random::<f64>().powf(1.0 / n as f64);
    center
        .iter()
        .zip(&dir)
        .map(|(c, d)| c + r * d / norm)
        .collect()
}

/// Synthetic points around a normalized instance: uniform in the L2 ball, then
/// clamped to the unit box (clamping can only shrink the distance to `x`).
pub fn sample_neighborhood<R: Rng + ?Sized>(
    x: &[f64],
    radius: f64,
    count: usize,
    rng: &mut R,
) -> Result<Vec<Vec<f64>>> {
    if count == 0 {
        return Err(Error::Config(
            "neighborhood sample count must be positive".into(),
        ));
    }
    if !(radius > 0.0) {
        return Err(Error::Config("neighborhood radius must be positive".into()));
    }
    Ok((0..count)
        .map(|_| {
            sample_ball(x, radius, rng)
                .into_iter()
                .map(|v| v.clamp(0.0, 1.0))
                .collect()
        })
        .collect())
}
