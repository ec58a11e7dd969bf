//! Random network distillation novelty bonuses.
//!
//! A frozen random target network embeds each input; a trainable predictor
//! learns to reproduce the embedding. The squared prediction error is the
//! bonus, which decays on inputs the predictor has been trained on.

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Activation, DenseNet, Gradients, Optimizer, OptimizerKind};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RndConfig {
    pub hidden: usize,
    pub embedding: usize,
    /// Divide bonuses by the running standard deviation of raw bonuses.
    pub normalize: bool,
}

impl Default for RndConfig {
    fn default() -> Self {
        RndConfig {
            hidden: 64,
            embedding: 32,
            normalize: true,
        }
    }
}

/// Welford running mean and variance.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunningStats {
    count: u64,
    mean: f64,
    m2: f64,
}

impl RunningStats {
    pub fn push(&mut self, v: f64) {
        self.count += 1;
        let d = v - self.mean;
        self.mean += d / self.count as f64;
        self.m2 += d * (v - self.mean);
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    /// Sample standard deviation; `None` below two observations.
    pub fn std(&self) -> Option<f64> {
        (self.count >= 2).then(|| (self.m2 / (self.count - 1) as f64).sqrt())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rnd {
    target: DenseNet,
    predictor: DenseNet,
    optimizer: Optimizer,
    stats: RunningStats,
    normalize: bool,
}

impl Rnd {
    pub fn new<R: Rng + ?Sized>(
        input: usize,
        config: &RndConfig,
        optimizer: OptimizerKind,
        learning_rate: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let sizes = [input, config.hidden, config.embedding];
        Ok(Rnd {
            target: DenseNet::with_rng(&sizes, Activation::Identity, rng)?,
            predictor: DenseNet::with_rng(&sizes, Activation::Identity, rng)?,
            optimizer: Optimizer::new(optimizer, learning_rate)?,
            stats: RunningStats::default(),
            normalize: config.normalize,
        })
    }

    pub fn target(&self) -> &DenseNet {
        &self.target
    }

    pub fn predictor(&self) -> &DenseNet {
        &self.predictor
    }

    pub fn predictor_mut(&mut self) -> &mut DenseNet {
        &mut self.predictor
    }

    pub fn input_size(&self) -> usize {
        self.target.input_size()
    }

    pub fn stats(&self) -> &RunningStats {
        &self.stats
    }

    /// Divisor applied to raw bonuses.
    pub fn scale(&self) -> f64 {
        match (self.normalize, self.stats.std()) {
            (true, Some(s)) if s > 1e-12 => s,
            _ => 1.0,
        }
    }

    /// Squared embedding error per row.
    pub fn raw_bonus_batch(&self, x: ArrayView2<'_, f64>) -> Result<Vec<f64>> {
        let p = self.predictor.predict_batch(x)?;
        let t = self.target.predict_batch(x)?;
        Ok((&p - &t).rows().into_iter().map(|r| r.dot(&r)).collect())
    }

    pub fn raw_bonus(&self, x: &[f64]) -> Result<f64> {
        let view = ArrayView2::from_shape((1, x.len()), x).map_err(|_| Error::Shape {
            expected: self.input_size(),
            got: x.len(),
        })?;
        Ok(self.raw_bonus_batch(view)?[0])
    }

    pub fn bonus(&self, x: &[f64]) -> Result<f64> {
        Ok(self.raw_bonus(x)? / self.scale())
    }

    /// Records a raw bonus in the normalization statistics.
    pub fn observe(&mut self, raw: f64) {
        self.stats.push(raw);
    }

    /// Mean squared embedding error over the batch and its predictor gradients.
    pub fn distill_loss(&self, x: ArrayView2<'_, f64>) -> Result<(f64, Gradients)> {
        let (p, tape) = self.predictor.forward_batch(x)?;
        let t = self.target.predict_batch(x)?;
        let n = x.nrows() as f64;
        let diff = &p - &t;
        let loss = diff.iter().map(|d| d * d).sum::<f64>() / n;
        let grad = diff * (2.0 / n);
        Ok((loss, self.predictor.backward(&tape, grad.view())?))
    }

    /// One optimizer step on the predictor; returns the pre-step loss.
    pub fn distill_step(&mut self, x: ArrayView2<'_, f64>) -> Result<f64> {
        let (loss, grads) = self.distill_loss(x)?;
        self.optimizer.apply(&mut self.predictor, &grads)?;
        Ok(loss)
    }

    pub fn apply_gradients(&mut self, grads: &Gradients) -> Result<()> {
        self.optimizer.apply(&mut self.predictor, grads)
    }

    /// Normalized bonus per row and its gradient with respect to each input.
    pub fn bonus_input_gradient(&self, x: ArrayView2<'_, f64>) -> Result<(Vec<f64>, Array2<f64>)> {
        let (p, p_tape) = self.predictor.forward_batch(x)?;
        let (t, t_tape) = self.target.forward_batch(x)?;
        let scale = self.scale();
        let diff = &p - &t;
        let bonus = diff.rows().into_iter().map(|r| r.dot(&r) / scale).collect();
        let g = &diff * (2.0 / scale);
        let gp = self.predictor.backward(&p_tape, g.view())?.input;
        let gt = self.target.backward(&t_tape, (-&g).view())?.input;
        Ok((bonus, gp + gt))
    }
}

/// Stored reward: environment reward plus scaled state novelty.
pub fn combine_reward(reward: f64, state_bonus: f64, scale: f64) -> f64 {
    if scale == 0.0 {
        reward
    } else {
        reward + scale * state_bonus
    }
}
