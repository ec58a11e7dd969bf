//! Black-box predictors: in-process MLP targets, remote endpoints behind the
//! wire protocol, and the nearest-counterfactual-in-corpus baseline.

use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::container;
use crate::data::{Dataset, FeatureSchema, Labels, Task};
use crate::error::{Error, Result};
use crate::eval::CfResult;
use crate::nn::{Activation, CrossEntropy, DenseNet, Optimizer, OutputLoss, SquaredError};
pub use crate::protocol::{Model, ModelInfo, Prediction};
use crate::protocol::{RemoteClient, DEFAULT_HANDSHAKE_TIMEOUT};

/// Index of the largest score, lowest index on exact ties.
pub fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

/// Dense network target: softmax head for classification, identity head on
/// standardized labels for regression.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    net: DenseNet,
    task: Task,
    label_mean: f64,
    label_scale: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct MlpHeader {
    task: Task,
    label_mean: f64,
    label_scale: f64,
}

const MLP_MAGIC: &[u8; 8] = b"CFXMLP\0\0";
const MLP_VERSION: u32 = 1;

impl MlpModel {
    /// Wraps an existing network; classification nets must emit one score per class.
    pub fn from_net(net: DenseNet, task: Task) -> Result<Self> {
        let expected = match task {
            Task::Classification { n_classes } => n_classes,
            Task::Regression => 1,
        };
        if net.output_size() != expected {
            return Err(Error::Shape {
                expected,
                got: net.output_size(),
            });
        }
        Ok(MlpModel {
            net,
            task,
            label_mean: 0.0,
            label_scale: 1.0,
        })
    }

    pub fn net(&self) -> &DenseNet {
        &self.net
    }

    pub fn task(&self) -> Task {
        self.task
    }

    fn decode(&self, out: &[f64]) -> Prediction {
        match self.task {
            Task::Classification { .. } => Prediction::Class(argmax(out)),
            Task::Regression => Prediction::Value(out[0] * self.label_scale + self.label_mean),
        }
    }

    pub fn predict_rows(&self, xs: ArrayView2<'_, f64>) -> Result<Vec<Prediction>> {
        let out = self.net.predict_batch(xs)?;
        Ok(out
            .rows()
            .into_iter()
            .map(|r| self.decode(&r.to_vec()))
            .collect())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = MlpHeader {
            task: self.task,
            label_mean: self.label_mean,
            label_scale: self.label_scale,
        };
        container::encode(MLP_MAGIC, MLP_VERSION, &header, &[self.net.to_bytes()])
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (h, blobs): (MlpHeader, _) = container::decode(bytes, MLP_MAGIC, MLP_VERSION)?;
        let [blob]: [Vec<u8>; 1] = blobs
            .try_into()
            .map_err(|_| Error::Format("model file must hold exactly one network".into()))?;
        let mut m = MlpModel::from_net(DenseNet::from_bytes(&blob)?, h.task)?;
        m.label_mean = h.label_mean;
        m.label_scale = h.label_scale;
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

impl Model for MlpModel {
    fn info(&self) -> ModelInfo {
        ModelInfo {
            task: self.task,
            n_features: self.net.input_size(),
        }
    }

    fn predict(&self, x: &[f64]) -> Result<Prediction> {
        Ok(self.decode(&self.net.predict(x)?))
    }

    fn predict_many(&self, xs: &[Vec<f64>]) -> Result<Vec<Prediction>> {
        let n = self.net.input_size();
        if let Some(bad) = xs.iter().find(|x| x.len() != n) {
            return Err(Error::Shape {
                expected: n,
                got: bad.len(),
            });
        }
        let flat: Vec<f64> = xs.iter().flatten().copied().collect();
        let rows = Array2::from_shape_vec((xs.len(), n), flat).expect("checked");
        self.predict_rows(rows.view())
    }
}

/// A plain function exposed as a model; used for constructed targets.
pub struct FnModel<F> {
    pub info: ModelInfo,
    pub f: F,
}

impl<F: Fn(&[f64]) -> Prediction + Send + Sync> Model for FnModel<F> {
    fn info(&self) -> ModelInfo {
        self.info
    }

    fn predict(&self, x: &[f64]) -> Result<Prediction> {
        if x.len() != self.info.n_features {
            return Err(Error::Shape {
                expected: self.info.n_features,
                got: x.len(),
            });
        }
        Ok((self.f)(x))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MlpTrainConfig {
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for MlpTrainConfig {
    fn default() -> Self {
        MlpTrainConfig {
            hidden: vec![64, 64],
            epochs: 200,
            batch_size: 32,
            learning_rate: 1e-3,
            seed: 0,
        }
    }
}

fn check_trainable(train: &Dataset, cfg: &MlpTrainConfig) -> Result<()> {
    if !train.normalized {
        return Err(Error::Contract(
            "MLP targets train on normalized data".into(),
        ));
    }
    if train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    Ok(())
}

fn fit(
    net: &mut DenseNet,
    train: &Dataset,
    cfg: &MlpTrainConfig,
    loss_gradient: impl Fn(&[usize], &Array2<f64>) -> Array2<f64>,
) -> Result<()> {
    let mut opt = Optimizer::adam(cfg.learning_rate)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x006d_6c70_5f74_726e);
    let mut order: Vec<usize> = (0..train.len()).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let x = train.rows.select(Axis(0), chunk);
            let (out, tape) = net.forward_batch(x.view())?;
            let grad = loss_gradient(chunk, &out);
            let g = net.backward(&tape, grad.view())?;
            opt.apply(net, &g)?;
        }
    }
    Ok(())
}

fn layer_sizes(n_in: usize, hidden: &[usize], n_out: usize) -> Vec<usize> {
    let mut sizes = vec![n_in];
    sizes.extend_from_slice(hidden);
    sizes.push(n_out);
    sizes
}

pub fn train_mlp_classifier(train: &Dataset, cfg: &MlpTrainConfig) -> Result<MlpModel> {
    check_trainable(train, cfg)?;
    let Task::Classification { n_classes } = train.schema.task() else {
        return Err(Error::Config(
            "classifier needs a classification dataset".into(),
        ));
    };
    let labels = train.class_labels().expect("classification labels");
    if labels.iter().all(|&c| c == labels[0]) {
        return Err(Error::Config(
            "training data contains a single class".into(),
        ));
    }
    let mut net = DenseNet::new(
        &layer_sizes(train.n_features(), &cfg.hidden, n_classes),
        Activation::Softmax,
        cfg.seed,
    )?;
    fit(&mut net, train, cfg, |idx, out| {
        let classes: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
        let loss = CrossEntropy { classes: &classes };
        loss.gradient(out)
    })?;
    MlpModel::from_net(net, train.schema.task())
}

/// Trains on standardized labels; predictions come back in raw label units.
pub fn train_mlp_regressor(train: &Dataset, cfg: &MlpTrainConfig) -> Result<MlpModel> {
    check_trainable(train, cfg)?;
    let Labels::Values(y) = &train.labels else {
        return Err(Error::Config("regressor needs a regression dataset".into()));
    };
    let n = y.len() as f64;
    let mean = y.iter().sum::<f64>() / n;
    let var = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    // Constant labels: scale 0 makes every prediction exactly the mean.
    let scale = var.sqrt();
    let z: Vec<f64> = y
        .iter()
        .map(|v| if scale > 0.0 { (v - mean) / scale } else { 0.0 })
        .collect();
    let mut net = DenseNet::new(
        &layer_sizes(train.n_features(), &cfg.hidden, 1),
        Activation::Identity,
        cfg.seed,
    )?;
    fit(&mut net, train, cfg, |idx, out| {
        let t = Array2::from_shape_fn((idx.len(), 1), |(r, _)| z[idx[r]]);
        let loss = SquaredError { targets: t.view() };
        loss.gradient(out)
    })?;
    let mut model = MlpModel::from_net(net, Task::Regression)?;
    model.label_mean = mean;
    model.label_scale = scale;
    Ok(model)
}

pub fn train_mlp(train: &Dataset, cfg: &MlpTrainConfig) -> Result<MlpModel> {
    match train.schema.task() {
        Task::Classification { .. } => train_mlp_classifier(train, cfg),
        Task::Regression => train_mlp_regressor(train, cfg),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Endpoint {
    /// `host:port`
    Tcp(String),
    /// Program and arguments; the child speaks the protocol on stdin/stdout.
    Command(Vec<String>),
}

enum Backend {
    Local(Arc<dyn Model>),
    Remote(RemoteClient),
}

static NEXT_HANDLE_ID: AtomicU64 = AtomicU64::new(1);

/// A connected predictor with cached task metadata.
pub struct PredictorHandle {
    id: u64,
    info: ModelInfo,
    backend: Backend,
}

impl std::fmt::Debug for PredictorHandle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let kind = match self.backend {
            Backend::Local(_) => "local",
            Backend::Remote(_) => "remote",
        };
        f.debug_struct("PredictorHandle")
            .field("id", &self.id)
            .field("info", &self.info)
            .field("backend", &kind)
            .finish()
    }
}

impl PredictorHandle {
    pub fn local(model: Arc<dyn Model>) -> Result<Self> {
        let info = model.info();
        if let Task::Classification { n_classes } = info.task {
            if n_classes < 2 {
                return Err(Error::Config(
                    "a classifier needs at least two classes".into(),
                ));
            }
        }
        Ok(PredictorHandle {
            id: NEXT_HANDLE_ID.fetch_add(1, Ordering::Relaxed),
            info,
            backend: Backend::Local(model),
        })
    }

    pub fn in_process(model: MlpModel) -> Self {
        Self::local(Arc::new(model)).expect("MLP info is valid")
    }

    pub fn connect(endpoint: &Endpoint) -> Result<Self> {
        Self::connect_with_timeout(endpoint, DEFAULT_HANDSHAKE_TIMEOUT)
    }

    pub fn connect_with_timeout(endpoint: &Endpoint, handshake_timeout: Duration) -> Result<Self> {
        let client = match endpoint {
            Endpoint::Tcp(addr) => RemoteClient::connect_tcp(addr, handshake_timeout)?,
            Endpoint::Command(cmd) => RemoteClient::spawn(cmd, handshake_timeout)?,
        };
        Ok(PredictorHandle {
            id: NEXT_HANDLE_ID.fetch_add(1, Ordering::Relaxed),
            info: client.info(),
            backend: Backend::Remote(client),
        })
    }

    /// Connects and verifies the handshake against `schema`.
    pub fn connect_external(endpoint: &Endpoint, schema: &FeatureSchema) -> Result<Self> {
        let handle = Self::connect(endpoint)?;
        handle.check_schema(schema)?;
        Ok(handle)
    }

    pub fn check_schema(&self, schema: &FeatureSchema) -> Result<()> {
        if self.info.n_features != schema.n_features() {
            return Err(Error::Schema(format!(
                "predictor expects {} features, schema declares {}",
                self.info.n_features,
                schema.n_features()
            )));
        }
        if self.info.task != schema.task() {
            return Err(Error::Schema(format!(
                "predictor task {:?} differs from schema task {:?}",
                self.info.task,
                schema.task()
            )));
        }
        Ok(())
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn info(&self) -> ModelInfo {
        self.info
    }

    pub fn is_remote(&self) -> bool {
        matches!(self.backend, Backend::Remote(_))
    }

    /// A second handle on the same in-process model, sharing the id.
    pub fn share(&self) -> Option<Self> {
        match &self.backend {
            Backend::Local(m) => Some(PredictorHandle {
                id: self.id,
                info: self.info,
                backend: Backend::Local(Arc::clone(m)),
            }),
            Backend::Remote(_) => None,
        }
    }

    pub fn predict(&mut self, x: &[f64]) -> Result<Prediction> {
        if x.len() != self.info.n_features {
            return Err(Error::Shape {
                expected: self.info.n_features,
                got: x.len(),
            });
        }
        match &mut self.backend {
            Backend::Local(m) => m.predict(x),
            Backend::Remote(c) => c.predict(x),
        }
    }

    pub fn predict_batch(&mut self, xs: &[Vec<f64>]) -> Result<Vec<Prediction>> {
        if let Some(bad) = xs.iter().find(|x| x.len() != self.info.n_features) {
            return Err(Error::Shape {
                expected: self.info.n_features,
                got: bad.len(),
            });
        }
        match &mut self.backend {
            Backend::Local(m) => m.predict_many(xs),
            Backend::Remote(c) => c.predict_batch(xs.to_vec()),
        }
    }

    pub fn predict_rows(&mut self, rows: ArrayView2<'_, f64>) -> Result<Vec<Prediction>> {
        let xs: Vec<Vec<f64>> = rows.rows().into_iter().map(|r| r.to_vec()).collect();
        self.predict_batch(&xs)
    }

    /// Terminates a spawned remote predictor (testing aid).
    pub fn kill_remote(&mut self) {
        if let Backend::Remote(c) = &mut self.backend {
            c.kill_child();
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Score {
    Accuracy(f64),
    Rmse(f64),
}

impl Score {
    pub fn value(self) -> f64 {
        match self {
            Score::Accuracy(v) | Score::Rmse(v) => v,
        }
    }
}

impl std::fmt::Display for Score {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Score::Accuracy(v) => write!(f, "accuracy {v:.4}"),
            Score::Rmse(v) => write!(f, "rmse {v:.4}"),
        }
    }
}

/// Accuracy against class labels or RMSE (raw units) against values.
pub fn score(predictions: &[Prediction], labels: &Labels) -> Result<Score> {
    if predictions.len() != labels.len() {
        return Err(Error::Shape {
            expected: labels.len(),
            got: predictions.len(),
        });
    }
    if predictions.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let n = predictions.len() as f64;
    Ok(match labels {
        Labels::Classes(c) => {
            let hits = predictions
                .iter()
                .zip(c)
                .filter(|(p, &c)| p.class() == Some(c))
                .count();
            Score::Accuracy(hits as f64 / n)
        }
        Labels::Values(v) => {
            let sse: f64 = predictions
                .iter()
                .zip(v)
                .map(|(p, y)| (p.value() - y).powi(2))
                .sum();
            Score::Rmse((sse / n).sqrt())
        }
    })
}

pub fn evaluate(handle: &mut PredictorHandle, test: &Dataset) -> Result<Score> {
    let preds = handle.predict_rows(test.rows.view())?;
    score(&preds, &test.labels)
}

/// Corpus rows with their predicted labels under one specific handle.
#[derive(Debug, Clone)]
pub struct NearestCtIndex {
    rows: Array2<f64>,
    predicted: Vec<usize>,
    handle_id: u64,
}

impl NearestCtIndex {
    pub fn build(rows: ArrayView2<'_, f64>, handle: &mut PredictorHandle) -> Result<Self> {
        if !matches!(handle.info().task, Task::Classification { .. }) {
            return Err(Error::Config(
                "nearest-counterfactual baseline needs a classifier".into(),
            ));
        }
        if rows.nrows() == 0 {
            return Err(Error::EmptyDataset);
        }
        let predicted = handle
            .predict_rows(rows)?
            .into_iter()
            .map(|p| p.class().expect("classifier"))
            .collect();
        Ok(NearestCtIndex {
            rows: rows.to_owned(),
            predicted,
            handle_id: handle.id(),
        })
    }

    pub fn len(&self) -> usize {
        self.rows.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn predicted_labels(&self) -> &[usize] {
        &self.predicted
    }

    /// Row index with minimum L1 distance among rows predicted differently
    /// from `class`; the earliest row wins ties.
    pub fn nearest_row(&self, x: &[f64], class: usize) -> Result<usize> {
        let mut best: Option<(usize, f64)> = None;
        for (i, row) in self.rows.rows().into_iter().enumerate() {
            if self.predicted[i] == class {
                continue;
            }
            let d: f64 = row.iter().zip(x).map(|(a, b)| (a - b).abs()).sum();
            if best.is_none_or(|(_, bd)| d < bd) {
                best = Some((i, d));
            }
        }
        best.map(|(i, _)| i).ok_or(Error::NoCounterfactual)
    }

    pub fn query(
        &self,
        x: &[f64],
        handle: &mut PredictorHandle,
        instance_id: impl Into<String>,
    ) -> Result<CfResult> {
        if handle.id() != self.handle_id {
            return Err(Error::Contract(
                "nearest-counterfactual index was built with a different predictor".into(),
            ));
        }
        if x.len() != self.rows.ncols() {
            return Err(Error::Shape {
                expected: self.rows.ncols(),
                got: x.len(),
            });
        }
        let start = Instant::now();
        let class = handle.predict(x)?.class().expect("classifier");
        let i = self.nearest_row(x, class)?;
        let cf = self.rows.row(i).to_vec();
        Ok(CfResult::new(
            instance_id,
            x.to_vec(),
            cf,
            true,
            start.elapsed().as_secs_f64(),
        ))
    }
}
