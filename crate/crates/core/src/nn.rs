//! Dense feed-forward networks with exact backpropagation, SGD/Adam updates,
//! a finite-difference gradient checker and a versioned binary parameter format.
//!
//! Inputs are batches laid out one sample per row; single-vector helpers wrap
//! a batch of one.

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Identity,
    Relu,
    Sigmoid,
    Tanh,
    Softmax,
}

impl Activation {
    fn code(self) -> u8 {
        match self {
            Activation::Identity => 0,
            Activation::Relu => 1,
            Activation::Sigmoid => 2,
            Activation::Tanh => 3,
            Activation::Softmax => 4,
        }
    }

    fn from_code(code: u8) -> Result<Self> {
        Ok(match code {
            0 => Activation::Identity,
            1 => Activation::Relu,
            2 => Activation::Sigmoid,
            3 => Activation::Tanh,
            4 => Activation::Softmax,
            other => return Err(Error::Format(format!("unknown activation code {other}"))),
        })
    }

    fn apply(self, z: &mut Array2<f64>) {
        match self {
            Activation::Identity => {}
            Activation::Relu => z.mapv_inplace(|v| v.max(0.0)),
            Activation::Sigmoid => z.mapv_inplace(|v| 1.0 / (1.0 + (-v).exp())),
            Activation::Tanh => z.mapv_inplace(f64::tanh),
            Activation::Softmax => {
                for mut row in z.rows_mut() {
                    let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
                    row.mapv_inplace(|v| (v - m).exp());
                    let s = row.sum();
                    row.mapv_inplace(|v| v / s);
                }
            }
        }
    }

    /// Gradient w.r.t. the pre-activation given the activated output `a` and
    /// the gradient w.r.t. `a`.
    fn backprop(self, a: &Array2<f64>, grad: &Array2<f64>) -> Array2<f64> {
        match self {
            Activation::Identity => grad.clone(),
            Activation::Relu => Zip::from(a)
                .and(grad)
                .map_collect(|&a, &g| if a > 0.0 { g } else { 0.0 }),
            Activation::Sigmoid => Zip::from(a)
                .and(grad)
                .map_collect(|&a, &g| g * a * (1.0 - a)),
            Activation::Tanh => Zip::from(a)
                .and(grad)
                .map_collect(|&a, &g| g * (1.0 - a * a)),
            Activation::Softmax => {
                let dot = (a * grad).sum_axis(Axis(1)).insert_axis(Axis(1));
                a * &(grad - &dot)
            }
        }
    }
}

/// One affine layer; `weights` has shape (out, in).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Layer {
    fn zeros(out: usize, inp: usize) -> Self {
        Layer {
            weights: Array2::zeros((out, inp)),
            bias: Array1::zeros(out),
        }
    }

    fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    fn param(&self, i: usize) -> f64 {
        let nw = self.weights.len();
        if i < nw {
            let cols = self.weights.ncols();
            self.weights[[i / cols, i % cols]]
        } else {
            self.bias[i - nw]
        }
    }

    fn param_mut(&mut self, i: usize) -> &mut f64 {
        let nw = self.weights.len();
        if i < nw {
            let cols = self.weights.ncols();
            &mut self.weights[[i / cols, i % cols]]
        } else {
            &mut self.bias[i - nw]
        }
    }
}

/// Cached activations from a forward pass, consumed by [`DenseNet::backward`].
#[derive(Debug, Clone)]
pub struct Tape {
    /// `activations[0]` is the input, `activations[l+1]` the output of layer `l`.
    activations: Vec<Array2<f64>>,
}

impl Tape {
    pub fn output(&self) -> &Array2<f64> {
        self.activations.last().expect("tape has input")
    }

    pub fn input(&self) -> &Array2<f64> {
        &self.activations[0]
    }
}

/// Per-parameter gradients (shaped like the network) plus the input gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Layer>,
    pub input: Array2<f64>,
}

impl Gradients {
    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::param_count).sum()
    }

    /// Flat gradient entry in the same order as [`DenseNet::param`].
    pub fn param(&self, mut i: usize) -> f64 {
        for l in &self.layers {
            if i < l.param_count() {
                return l.param(i);
            }
            i -= l.param_count();
        }
        panic!("gradient index out of range");
    }

    pub fn scale(&mut self, factor: f64) {
        for l in &mut self.layers {
            l.weights *= factor;
            l.bias *= factor;
        }
        self.input *= factor;
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weights += &b.weights;
            a.bias += &b.bias;
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(l.bias.iter()))
            .fold(0.0, |m, v| m.max(v.abs()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseNet {
    layers: Vec<Layer>,
    hidden: Activation,
    output: Activation,
}

impl DenseNet {
    /// ReLU hidden layers, fan-in scaled uniform weights, zero biases.
    pub fn new(sizes: &[usize], output: Activation, seed: u64) -> Result<Self> {
        Self::with_rng(sizes, output, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn with_rng<R: Rng + ?Sized>(
        sizes: &[usize],
        output: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        if sizes.len() < 2 {
            return Err(Error::Config(
                "a network needs at least two layer sizes".into(),
            ));
        }
        if sizes.contains(&0) {
            return Err(Error::Config(format!(
                "layer sizes must be positive: {sizes:?}"
            )));
        }
        let layers = sizes
            .windows(2)
            .map(|w| {
                let (inp, out) = (w[0], w[1]);
                let limit = 1.0 / (inp as f64).sqrt();
                let weights =
                    Array2::from_shape_fn((out, inp), |_| rng.random_range(-limit..limit));
                Layer {
                    weights,
                    bias: Array1::zeros(out),
                }
            })
            .collect();
        Ok(DenseNet {
            layers,
            hidden: Activation::Relu,
            output,
        })
    }

    /// Builds a network from explicit layers (hidden layers use ReLU).
    pub fn from_layers(layers: Vec<Layer>, output: Activation) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config("no layers".into()));
        }
        for w in layers.windows(2) {
            if w[1].weights.ncols() != w[0].weights.nrows() {
                return Err(Error::Shape {
                    expected: w[0].weights.nrows(),
                    got: w[1].weights.ncols(),
                });
            }
        }
        for l in &layers {
            if l.bias.len() != l.weights.nrows() {
                return Err(Error::Shape {
                    expected: l.weights.nrows(),
                    got: l.bias.len(),
                });
            }
        }
        Ok(DenseNet {
            layers,
            hidden: Activation::Relu,
            output,
        })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn output_activation(&self) -> Activation {
        self.output
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![self.layers[0].weights.ncols()];
        s.extend(self.layers.iter().map(|l| l.weights.nrows()));
        s
    }

    pub fn input_size(&self) -> usize {
        self.layers[0].weights.ncols()
    }

    pub fn output_size(&self) -> usize {
        self.layers.last().expect("non-empty").weights.nrows()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::param_count).sum()
    }

    /// Flat parameter view: per layer, row-major weights then bias.
    pub fn param(&self, mut i: usize) -> f64 {
        for l in &self.layers {
            if i < l.param_count() {
                return l.param(i);
            }
            i -= l.param_count();
        }
        panic!("parameter index out of range");
    }

    pub fn set_param(&mut self, mut i: usize, value: f64) {
        for l in &mut self.layers {
            if i < l.param_count() {
                *l.param_mut(i) = value;
                return;
            }
            i -= l.param_count();
        }
        panic!("parameter index out of range");
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(l.bias.iter()).all(|v| v.is_finite()))
    }

    pub fn forward_batch(&self, x: ArrayView2<'_, f64>) -> Result<(Array2<f64>, Tape)> {
        if x.ncols() != self.input_size() {
            return Err(Error::Shape {
                expected: self.input_size(),
                got: x.ncols(),
            });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("network input".into()));
        }
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(x.to_owned());
        for (i, layer) in self.layers.iter().enumerate() {
            let prev = activations.last().expect("input pushed");
            let mut z = prev.dot(&layer.weights.t());
            z += &layer.bias;
            let act = if i + 1 == self.layers.len() {
                self.output
            } else {
                self.hidden
            };
            act.apply(&mut z);
            activations.push(z);
        }
        let out = activations.last().expect("non-empty").clone();
        Ok((out, Tape { activations }))
    }

    pub fn predict_batch(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.input_size() {
            return Err(Error::Shape {
                expected: self.input_size(),
                got: x.ncols(),
            });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("network input".into()));
        }
        let mut a = x.to_owned();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = a.dot(&layer.weights.t());
            z += &layer.bias;
            let act = if i + 1 == self.layers.len() {
                self.output
            } else {
                self.hidden
            };
            act.apply(&mut z);
            a = z;
        }
        Ok(a)
    }

    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, Tape)> {
        let view = ArrayView2::from_shape((1, x.len()), x).expect("one row");
        let (out, tape) = self.forward_batch(view)?;
        Ok((out.row(0).to_vec(), tape))
    }

    pub fn predict(&self, x: &[f64]) -> Result<Vec<f64>> {
        let view = ArrayView2::from_shape((1, x.len()), x).expect("one row");
        Ok(self.predict_batch(view)?.row(0).to_vec())
    }

    /// Backpropagates `output_gradient` (d loss / d output, one row per sample).
    pub fn backward(&self, tape: &Tape, output_gradient: ArrayView2<'_, f64>) -> Result<Gradients> {
        if tape.activations.len() != self.layers.len() + 1 {
            return Err(Error::Shape {
                expected: self.layers.len() + 1,
                got: tape.activations.len(),
            });
        }
        let out = tape.output();
        if output_gradient.dim() != out.dim() {
            return Err(Error::Shape {
                expected: out.len(),
                got: output_gradient.len(),
            });
        }
        let mut grad = output_gradient.to_owned();
        let mut layers = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let act = if i + 1 == self.layers.len() {
                self.output
            } else {
                self.hidden
            };
            let dz = act.backprop(&tape.activations[i + 1], &grad);
            let dw = dz.t().dot(&tape.activations[i]);
            let db = dz.sum_axis(Axis(0));
            grad = dz.dot(&layer.weights);
            layers.push(Layer {
                weights: dw,
                bias: db,
            });
        }
        layers.reverse();
        Ok(Gradients {
            layers,
            input: grad,
        })
    }

    pub fn zero_gradients(&self) -> Gradients {
        Gradients {
            layers: self
                .layers
                .iter()
                .map(|l| Layer::zeros(l.weights.nrows(), l.weights.ncols()))
                .collect(),
            input: Array2::zeros((0, self.input_size())),
        }
    }

    /// Copies parameters from `other` (same architecture) in place.
    pub fn copy_from(&mut self, other: &DenseNet) {
        debug_assert_eq!(self.sizes(), other.sizes());
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weights.assign(&b.weights);
            a.bias.assign(&b.bias);
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let sizes = self.sizes();
        let mut buf = Vec::with_capacity(24 + 4 * sizes.len() + 8 * self.param_count());
        buf.extend_from_slice(PARAM_MAGIC);
        buf.extend_from_slice(&PARAM_VERSION.to_le_bytes());
        buf.push(self.hidden.code());
        buf.push(self.output.code());
        buf.extend_from_slice(&(sizes.len() as u32).to_le_bytes());
        for s in &sizes {
            buf.extend_from_slice(&(*s as u32).to_le_bytes());
        }
        for l in &self.layers {
            for v in l.weights.iter().chain(l.bias.iter()) {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader { bytes, pos: 0 };
        if r.take(PARAM_MAGIC.len())? != PARAM_MAGIC {
            return Err(Error::Format("bad magic bytes in parameter file".into()));
        }
        let version = r.u32()?;
        if version != PARAM_VERSION {
            return Err(Error::Format(format!(
                "parameter file version {version}, expected {PARAM_VERSION}"
            )));
        }
        let hidden = Activation::from_code(r.u8()?)?;
        let output = Activation::from_code(r.u8()?)?;
        let count = r.u32()? as usize;
        if !(2..=1024).contains(&count) {
            return Err(Error::Format(format!("implausible layer count {count}")));
        }
        let sizes: Vec<usize> = (0..count)
            .map(|_| r.u32().map(|s| s as usize))
            .collect::<Result<_>>()?;
        if sizes.contains(&0) {
            return Err(Error::Format("zero layer size".into()));
        }
        let mut layers = Vec::with_capacity(count - 1);
        for w in sizes.windows(2) {
            let (inp, out) = (w[0], w[1]);
            let weights = (0..inp * out)
                .map(|_| r.f64())
                .collect::<Result<Vec<_>>>()?;
            let bias = (0..out).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            layers.push(Layer {
                weights: Array2::from_shape_vec((out, inp), weights).expect("sized"),
                bias: Array1::from(bias),
            });
        }
        if r.pos != bytes.len() {
            return Err(Error::Format("trailing bytes after parameters".into()));
        }
        Ok(DenseNet {
            layers,
            hidden,
            output,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

const PARAM_MAGIC: &[u8; 8] = b"CFXDNET\0";
const PARAM_VERSION: u32 = 1;

pub(crate) struct ByteReader<'a> {
    pub bytes: &'a [u8],
    pub pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format("unexpected end of file".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum OptimizerKind {
    Sgd,
    Adam {
        beta1: f64,
        beta2: f64,
        epsilon: f64,
    },
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// First-order optimizer state bound to one network's shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    step: u64,
    first: Vec<Layer>,
    second: Vec<Layer>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, learning_rate: f64) -> Result<Self> {
        if !(learning_rate >= 0.0) || !learning_rate.is_finite() {
            return Err(Error::Config(format!(
                "learning rate must be >= 0, got {learning_rate}"
            )));
        }
        Ok(Optimizer {
            kind,
            learning_rate,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        })
    }

    pub fn sgd(learning_rate: f64) -> Result<Self> {
        Self::new(OptimizerKind::Sgd, learning_rate)
    }

    pub fn adam(learning_rate: f64) -> Result<Self> {
        Self::new(OptimizerKind::adam(), learning_rate)
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update; a non-finite gradient aborts before touching `net`.
    pub fn apply(&mut self, net: &mut DenseNet, grads: &Gradients) -> Result<()> {
        if grads.layers.len() != net.layers.len() {
            return Err(Error::Shape {
                expected: net.layers.len(),
                got: grads.layers.len(),
            });
        }
        for (i, (g, l)) in grads.layers.iter().zip(&net.layers).enumerate() {
            if g.weights.dim() != l.weights.dim() || g.bias.len() != l.bias.len() {
                return Err(Error::Shape {
                    expected: l.param_count(),
                    got: g.param_count(),
                });
            }
            if let Some(bad) = g
                .weights
                .iter()
                .chain(g.bias.iter())
                .find(|v| !v.is_finite())
            {
                return Err(Error::NonFinite(format!(
                    "gradient of layer {i} contains {bad} (step {})",
                    self.step
                )));
            }
        }
        self.step += 1;
        let lr = self.learning_rate;
        match self.kind {
            OptimizerKind::Sgd => {
                for (l, g) in net.layers.iter_mut().zip(&grads.layers) {
                    l.weights.scaled_add(-lr, &g.weights);
                    l.bias.scaled_add(-lr, &g.bias);
                }
            }
            OptimizerKind::Adam {
                beta1,
                beta2,
                epsilon,
            } => {
                if self.first.is_empty() {
                    self.first = net.zero_gradients().layers;
                    self.second = net.zero_gradients().layers;
                }
                let t = self.step as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                for (((l, g), m), v) in net
                    .layers
                    .iter_mut()
                    .zip(&grads.layers)
                    .zip(&mut self.first)
                    .zip(&mut self.second)
                {
                    let update = |p: &mut f64, g: &f64, m: &mut f64, v: &mut f64| {
                        *m = beta1 * *m + (1.0 - beta1) * g;
                        *v = beta2 * *v + (1.0 - beta2) * g * g;
                        *p -= lr * (*m / c1) / ((*v / c2).sqrt() + epsilon);
                    };
                    Zip::from(&mut l.weights)
                        .and(&g.weights)
                        .and(&mut m.weights)
                        .and(&mut v.weights)
                        .for_each(update);
                    Zip::from(&mut l.bias)
                        .and(&g.bias)
                        .and(&mut m.bias)
                        .and(&mut v.bias)
                        .for_each(update);
                }
            }
        }
        if !net.is_finite() {
            return Err(Error::NonFinite(format!(
                "parameters after step {}",
                self.step
            )));
        }
        Ok(())
    }
}

/// A scalar loss on network outputs with its output gradient.
pub trait OutputLoss {
    fn value(&self, output: &Array2<f64>) -> f64;
    fn gradient(&self, output: &Array2<f64>) -> Array2<f64>;
}

/// Mean over the batch of the summed squared error.
pub struct SquaredError<'a> {
    pub targets: ArrayView2<'a, f64>,
}

impl OutputLoss for SquaredError<'_> {
    fn value(&self, output: &Array2<f64>) -> f64 {
        let n = output.nrows() as f64;
        (output - &self.targets).mapv(|d| d * d).sum() / n
    }

    fn gradient(&self, output: &Array2<f64>) -> Array2<f64> {
        let n = output.nrows() as f64;
        (output - &self.targets) * (2.0 / n)
    }
}

/// Mean cross-entropy against one-hot class targets on probability outputs.
pub struct CrossEntropy<'a> {
    pub classes: &'a [usize],
}

const PROB_FLOOR: f64 = 1e-12;

impl OutputLoss for CrossEntropy<'_> {
    fn value(&self, output: &Array2<f64>) -> f64 {
        let n = output.nrows() as f64;
        self.classes
            .iter()
            .enumerate()
            .map(|(i, &c)| -output[[i, c]].max(PROB_FLOOR).ln())
            .sum::<f64>()
            / n
    }

    fn gradient(&self, output: &Array2<f64>) -> Array2<f64> {
        let n = output.nrows() as f64;
        let mut g = Array2::zeros(output.dim());
        for (i, &c) in self.classes.iter().enumerate() {
            g[[i, c]] = -1.0 / (output[[i, c]].max(PROB_FLOOR) * n);
        }
        g
    }
}

/// Mean binary cross-entropy for sigmoid outputs with targets in [0,1].
pub struct BinaryCrossEntropy<'a> {
    pub targets: ArrayView2<'a, f64>,
}

impl OutputLoss for BinaryCrossEntropy<'_> {
    fn value(&self, output: &Array2<f64>) -> f64 {
        let n = output.nrows() as f64;
        Zip::from(output)
            .and(&self.targets)
            .fold(0.0, |acc, &y, &t| {
                acc - t * y.max(PROB_FLOOR).ln() - (1.0 - t) * (1.0 - y).max(PROB_FLOOR).ln()
            })
            / n
    }

    fn gradient(&self, output: &Array2<f64>) -> Array2<f64> {
        let n = output.nrows() as f64;
        Zip::from(output).and(&self.targets).map_collect(|&y, &t| {
            (-t / y.max(PROB_FLOOR) + (1.0 - t) / (1.0 - y).max(PROB_FLOOR)) / n
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub n_params: usize,
    pub max_relative_error: f64,
    pub worst_param: usize,
    pub passed: bool,
}

/// Relative error with a small floor so parameters with vanishing gradients
/// are judged on absolute agreement.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Central-difference gradient of an arbitrary scalar function of the parameters.
pub fn numeric_gradient(net: &DenseNet, f: impl Fn(&DenseNet) -> f64, h: f64) -> Vec<f64> {
    let mut probe = net.clone();
    (0..net.param_count())
        .map(|i| {
            let p = net.param(i);
            probe.set_param(i, p + h);
            let up = f(&probe);
            probe.set_param(i, p - h);
            let down = f(&probe);
            probe.set_param(i, p);
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Compares backprop against central differences on every parameter.
pub fn finite_diff_check(
    net: &DenseNet,
    loss: &dyn OutputLoss,
    x: ArrayView2<'_, f64>,
    h: f64,
    tolerance: f64,
) -> Result<GradCheckReport> {
    let (out, tape) = net.forward_batch(x)?;
    let analytic = net.backward(&tape, loss.gradient(&out).view())?;
    let numeric = numeric_gradient(
        net,
        |n| loss.value(&n.predict_batch(x).expect("shape checked")),
        h,
    );
    let (worst_param, max_relative_error) = numeric
        .iter()
        .enumerate()
        .map(|(i, &n)| (i, relative_error(analytic.param(i), n)))
        .fold((0, 0.0), |acc, cur| if cur.1 > acc.1 { cur } else { acc });
    Ok(GradCheckReport {
        n_params: net.param_count(),
        max_relative_error,
        worst_param,
        passed: max_relative_error <= tolerance,
    })
}
