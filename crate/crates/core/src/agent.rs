//! Parameterized-action deep Q-learning over the counterfactual MDP.
//!
//! A deterministic policy network proposes a magnitude for every slot; the
//! Q-network scores every slot given the state and that whole parameter
//! vector. Acting picks the best available slot and applies its proposed
//! magnitude. Two novelty signals shape learning: a state bonus added to the
//! stored reward, and an action bonus the policy is pushed towards.

use std::collections::VecDeque;
use std::fmt;
use std::path::Path;
use std::time::Instant;

use ndarray::{concatenate, s, Array2, ArrayView1, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::container;
use crate::curiosity::{combine_reward, Rnd, RndConfig};
use crate::data::{sample_neighborhood, NormalizationStats};
use crate::env::{ActionSpace, Done, EnvConfig, Episode, Goal, GoalMode, HybridAction};
use crate::error::{Error, Result};
use crate::eval::CfResult;
use crate::nn::{Activation, DenseNet, Gradients, Optimizer, OptimizerKind};
use crate::predictor::PredictorHandle;
use crate::replay::{PrioritizedBuffer, ReplayConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CuriosityConfig {
    pub rnd: RndConfig,
    /// Weight of the normalized state bonus in stored rewards; 0 disables it.
    pub state_scale: f64,
    /// Weight of the normalized action bonus in the policy objective; 0
    /// disables it.
    pub action_weight: f64,
}

impl Default for CuriosityConfig {
    fn default() -> Self {
        CuriosityConfig {
            rnd: RndConfig::default(),
            state_scale: 0.05,
            action_weight: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AgentConfig {
    pub q_hidden: Vec<usize>,
    pub policy_hidden: Vec<usize>,
    pub gamma: f64,
    pub n_step: usize,
    pub batch_size: usize,
    pub replay: ReplayConfig,
    pub optimizer: OptimizerKind,
    pub lr_q: f64,
    pub lr_policy: f64,
    pub lr_state_rnd: f64,
    pub lr_action_rnd: f64,
    /// Updates between hard copies into the target networks.
    pub target_sync: u64,
    /// Exploration noise standard deviation as a fraction of the interval width.
    pub noise_fraction: f64,
    /// Damp policy gradients that push a magnitude towards its bound, in
    /// proportion to the remaining room, so the tanh head does not saturate.
    pub invert_gradients: bool,
    /// Pick the bootstrap slot with the online networks and evaluate it with
    /// the target networks, instead of maximizing over target values.
    pub double_q: bool,
    /// Probability that an exploratory magnitude is drawn uniformly from the
    /// slot's interval instead of perturbing the policy's proposal.
    pub uniform_magnitude: f64,
    pub curiosity: CuriosityConfig,
}

impl Default for AgentConfig {
    fn default() -> Self {
        AgentConfig {
            q_hidden: vec![64, 64],
            policy_hidden: vec![64, 64],
            gamma: 0.99,
            n_step: 3,
            batch_size: 64,
            replay: ReplayConfig::default(),
            optimizer: OptimizerKind::adam(),
            lr_q: 1e-3,
            lr_policy: 1e-4,
            lr_state_rnd: 1e-4,
            lr_action_rnd: 1e-4,
            target_sync: 1000,
            noise_fraction: 0.1,
            double_q: false,
            invert_gradients: false,
            uniform_magnitude: 0.5,
            curiosity: CuriosityConfig::default(),
        }
    }
}

impl AgentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::Config(format!(
                "gamma must be in (0, 1], got {}",
                self.gamma
            )));
        }
        if self.n_step == 0 || self.batch_size == 0 || self.target_sync == 0 {
            return Err(Error::Config(
                "n_step, batch_size and target_sync must be positive".into(),
            ));
        }
        let c = &self.curiosity;
        for (name, v) in [
            ("noise_fraction", self.noise_fraction),
            ("uniform_magnitude", self.uniform_magnitude),
            ("state_scale", c.state_scale),
            ("action_weight", c.action_weight),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!(
                    "{name} must be a finite non-negative number, got {v}"
                )));
            }
        }
        if c.rnd.hidden == 0 || c.rnd.embedding == 0 {
            return Err(Error::Config(
                "curiosity network sizes must be positive".into(),
            ));
        }
        self.replay.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Instance draws from the training rows.
    pub epochs: usize,
    /// Environment steps spent on each drawn instance; episodes restart on
    /// it until the budget is used.
    pub steps_per_instance: usize,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    /// Fraction of all steps over which epsilon decays linearly.
    pub epsilon_decay_fraction: f64,
    /// Stored transitions required before the first update.
    pub learning_starts: usize,
    pub update_every: usize,
    /// Epochs between probe evaluations; 0 only probes after the last epoch.
    pub probe_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            steps_per_instance: 50_000,
            epsilon_start: 1.0,
            epsilon_end: 0.05,
            epsilon_decay_fraction: 0.5,
            learning_starts: 256,
            update_every: 1,
            probe_every: 1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.steps_per_instance == 0 || self.update_every == 0 {
            return Err(Error::Config(
                "epochs, steps_per_instance and update_every must be positive".into(),
            ));
        }
        let eps_ok = |e: f64| (0.0..=1.0).contains(&e);
        if !eps_ok(self.epsilon_start)
            || !eps_ok(self.epsilon_end)
            || !(self.epsilon_decay_fraction > 0.0)
        {
            return Err(Error::Config(
                "epsilon values must lie in [0, 1] with a positive decay fraction".into(),
            ));
        }
        Ok(())
    }

    pub fn total_steps(&self) -> u64 {
        self.epochs as u64 * self.steps_per_instance as u64
    }

    pub fn epsilon(&self, step: u64) -> f64 {
        linear_epsilon(
            self.epsilon_start,
            self.epsilon_end,
            step as f64 / (self.epsilon_decay_fraction * self.total_steps() as f64),
        )
    }
}

fn linear_epsilon(start: f64, end: f64, progress: f64) -> f64 {
    start + (end - start) * progress.clamp(0.0, 1.0)
}

/// A replay record. `reward` is already the discounted sum over the window
/// and `discount` multiplies the bootstrap value (0 when the episode ended
/// inside the window).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub state: Vec<f64>,
    pub mask: Vec<bool>,
    pub slot: usize,
    /// Executed parameter vector over all slots, in interval units.
    pub params: Vec<f64>,
    pub reward: f64,
    pub next_state: Vec<f64>,
    pub next_mask: Vec<bool>,
    pub discount: f64,
}

/// Folds one-step transitions into n-step ones.
#[derive(Debug, Clone)]
pub struct NStepAccumulator {
    n: usize,
    gamma: f64,
    window: VecDeque<Transition>,
}

impl NStepAccumulator {
    pub fn new(n: usize, gamma: f64) -> Result<Self> {
        if n == 0 || !(0.0..=1.0).contains(&gamma) {
            return Err(Error::Config(format!(
                "invalid n-step settings n={n}, gamma={gamma}"
            )));
        }
        Ok(NStepAccumulator {
            n,
            gamma,
            window: VecDeque::with_capacity(n),
        })
    }

    pub fn is_empty(&self) -> bool {
        self.window.is_empty()
    }

    /// Adds a one-step transition (its `discount` is ignored) and returns
    /// the records that became complete.
    pub fn push(&mut self, step: Transition, terminal: bool) -> Vec<Transition> {
        self.window.push_back(step);
        if terminal {
            let out = (0..self.window.len()).map(|i| self.fold(i, true)).collect();
            self.window.clear();
            out
        } else if self.window.len() == self.n {
            let out = vec![self.fold(0, false)];
            self.window.pop_front();
            out
        } else {
            Vec::new()
        }
    }

    /// Emits pending records bootstrapped from the last next state, for an
    /// episode cut short by the interaction budget.
    pub fn flush(&mut self) -> Vec<Transition> {
        let out = (0..self.window.len())
            .map(|i| self.fold(i, false))
            .collect();
        self.window.clear();
        out
    }

    fn fold(&self, start: usize, terminal: bool) -> Transition {
        let first = &self.window[start];
        let last = self.window.back().expect("non-empty window");
        let mut reward = 0.0;
        let mut discount = 1.0;
        for t in self.window.iter().skip(start) {
            reward += discount * t.reward;
            discount *= self.gamma;
        }
        Transition {
            state: first.state.clone(),
            mask: first.mask.clone(),
            slot: first.slot,
            params: first.params.clone(),
            reward,
            next_state: last.next_state.clone(),
            next_mask: last.next_mask.clone(),
            discount: if terminal { 0.0 } else { discount },
        }
    }
}

/// Largest entry among `mask`ed positions, lowest index on ties.
pub fn masked_argmax(values: ArrayView1<'_, f64>, mask: &[bool]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (k, &v) in values.iter().enumerate() {
        if mask[k] && best.is_none_or(|b| v > values[b]) {
            best = Some(k);
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActionChoice {
    pub action: HybridAction,
    /// Full parameter vector as executed (noise included), in interval units.
    pub params: Vec<f64>,
    pub explored: bool,
}

#[derive(Debug, Clone)]
pub struct QLoss {
    /// IS-weighted mean squared residual.
    pub td_loss: f64,
    /// State distillation loss.
    pub distill: f64,
    pub q_grads: Gradients,
    pub rnd_grads: Gradients,
    /// `y - Q(s, k)` per record.
    pub td_errors: Vec<f64>,
}

impl QLoss {
    pub fn total(&self) -> f64 {
        self.td_loss + self.distill
    }
}

#[derive(Debug, Clone)]
pub struct PiLoss {
    /// `-(1/B) Σ_b Σ_{k available} Q(s_b, v(s_b))[k]`.
    pub q_term: f64,
    /// `-w (1/B) Σ_b bonus(s_b, a_b)` for the policy's greedy hybrid action.
    pub novelty_term: f64,
    /// Action distillation loss on the same inputs.
    pub distill: f64,
    /// Gradient of `q_term + novelty_term` for the policy network.
    pub policy_grads: Gradients,
    /// Gradient of `distill` for the action predictor, inputs held fixed.
    pub rnd_grads: Gradients,
    /// Action novelty inputs: state, one-hot slot, magnitude.
    pub action_inputs: Array2<f64>,
}

impl PiLoss {
    pub fn total(&self) -> f64 {
        self.q_term + self.novelty_term + self.distill
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UpdateStats {
    pub loss_q: f64,
    pub loss_pi: f64,
}

fn layer_sizes(input: usize, hidden: &[usize], output: usize) -> Vec<usize> {
    let mut sizes = vec![input];
    sizes.extend_from_slice(hidden);
    sizes.push(output);
    sizes
}

fn stack<'a>(rows: impl ExactSizeIterator<Item = &'a [f64]>, width: usize) -> Result<Array2<f64>> {
    let n = rows.len();
    let mut flat = Vec::with_capacity(n * width);
    for r in rows {
        if r.len() != width {
            return Err(Error::Shape {
                expected: width,
                got: r.len(),
            });
        }
        flat.extend_from_slice(r);
    }
    Ok(Array2::from_shape_vec((n, width), flat).expect("row lengths checked"))
}

fn row_view(x: &[f64]) -> ArrayView2<'_, f64> {
    ArrayView2::from_shape((1, x.len()), x).expect("single row")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Agent {
    config: AgentConfig,
    space: ActionSpace,
    q: DenseNet,
    policy: DenseNet,
    q_target: DenseNet,
    policy_target: DenseNet,
    q_opt: Optimizer,
    policy_opt: Optimizer,
    state_rnd: Rnd,
    action_rnd: Rnd,
    updates: u64,
}

impl Agent {
    pub fn new(space: ActionSpace, config: AgentConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (sd, f) = (space.state_dim(), space.len());
        let q = DenseNet::with_rng(
            &layer_sizes(sd + f, &config.q_hidden, f),
            Activation::Identity,
            &mut rng,
        )?;
        let policy = DenseNet::with_rng(
            &layer_sizes(sd, &config.policy_hidden, f),
            Activation::Tanh,
            &mut rng,
        )?;
        Self::assemble(space, config, q, policy, &mut rng)
    }

    /// Starts from given networks with fresh targets, optimizers and
    /// curiosity modules.
    pub fn from_nets(
        space: ActionSpace,
        config: AgentConfig,
        q: DenseNet,
        policy: DenseNet,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        Self::assemble(
            space,
            config,
            q,
            policy,
            &mut ChaCha8Rng::seed_from_u64(seed),
        )
    }

    fn assemble(
        space: ActionSpace,
        config: AgentConfig,
        q: DenseNet,
        policy: DenseNet,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let (sd, f) = (space.state_dim(), space.len());
        if q.input_size() != sd + f || q.output_size() != f {
            return Err(Error::Shape {
                expected: sd + f,
                got: q.input_size(),
            });
        }
        if policy.input_size() != sd
            || policy.output_size() != f
            || policy.output_activation() != Activation::Tanh
        {
            return Err(Error::Contract(
                "policy network must map the state to tanh-bounded slot parameters".into(),
            ));
        }
        let c = &config.curiosity;
        let state_rnd = Rnd::new(sd, &c.rnd, config.optimizer, config.lr_state_rnd, rng)?;
        let action_rnd = Rnd::new(
            sd + f + 1,
            &c.rnd,
            config.optimizer,
            config.lr_action_rnd,
            rng,
        )?;
        Ok(Agent {
            q_opt: Optimizer::new(config.optimizer, config.lr_q)?,
            policy_opt: Optimizer::new(config.optimizer, config.lr_policy)?,
            q_target: q.clone(),
            policy_target: policy.clone(),
            q,
            policy,
            state_rnd,
            action_rnd,
            space,
            config,
            updates: 0,
        })
    }

    pub fn config(&self) -> &AgentConfig {
        &self.config
    }

    pub fn space(&self) -> &ActionSpace {
        &self.space
    }

    pub fn q_net(&self) -> &DenseNet {
        &self.q
    }

    pub fn q_net_mut(&mut self) -> &mut DenseNet {
        &mut self.q
    }

    pub fn policy_net(&self) -> &DenseNet {
        &self.policy
    }

    pub fn policy_net_mut(&mut self) -> &mut DenseNet {
        &mut self.policy
    }

    pub fn q_target(&self) -> &DenseNet {
        &self.q_target
    }

    pub fn policy_target(&self) -> &DenseNet {
        &self.policy_target
    }

    pub fn state_rnd(&self) -> &Rnd {
        &self.state_rnd
    }

    pub fn state_rnd_mut(&mut self) -> &mut Rnd {
        &mut self.state_rnd
    }

    pub fn action_rnd(&self) -> &Rnd {
        &self.action_rnd
    }

    pub fn action_rnd_mut(&mut self) -> &mut Rnd {
        &mut self.action_rnd
    }

    pub fn updates(&self) -> u64 {
        self.updates
    }

    pub fn sync_targets(&mut self) {
        self.q_target.copy_from(&self.q);
        self.policy_target.copy_from(&self.policy);
    }

    /// Maps tanh outputs to each slot's interval, column by column.
    fn rescale(&self, mut u: Array2<f64>) -> Array2<f64> {
        for (k, mut col) in u.columns_mut().into_iter().enumerate() {
            let slot = &self.space.slots[k];
            col.mapv_inplace(|v| {
                (slot.lo + (v + 1.0) / 2.0 * slot.width()).clamp(slot.lo, slot.hi)
            });
        }
        u
    }

    fn check_state(&self, state: &[f64], mask: &[bool]) -> Result<()> {
        if state.len() != self.space.state_dim() {
            return Err(Error::Shape {
                expected: self.space.state_dim(),
                got: state.len(),
            });
        }
        if mask.len() != self.space.len() {
            return Err(Error::Shape {
                expected: self.space.len(),
                got: mask.len(),
            });
        }
        Ok(())
    }

    /// Proposed parameters for every slot, in interval units.
    pub fn params_batch(&self, states: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        Ok(self.rescale(self.policy.predict_batch(states)?))
    }

    pub fn params(&self, state: &[f64]) -> Result<Vec<f64>> {
        Ok(self.params_batch(row_view(state))?.row(0).to_vec())
    }

    pub fn q_values(&self, state: &[f64], params: &[f64]) -> Result<Vec<f64>> {
        let x = concatenate![Axis(1), row_view(state), row_view(params)];
        Ok(self.q.predict_batch(x.view())?.row(0).to_vec())
    }

    /// Greedy action: best available slot under the proposed parameters.
    pub fn greedy_action(&self, state: &[f64], mask: &[bool]) -> Result<ActionChoice> {
        self.check_state(state, mask)?;
        let params = self.params(state)?;
        let q = self.q_values(state, &params)?;
        let slot = masked_argmax(ArrayView1::from(&q), mask)
            .ok_or_else(|| Error::Contract("no available slot to act on".into()))?;
        Ok(ActionChoice {
            action: HybridAction {
                slot,
                v: params[slot],
            },
            params,
            explored: false,
        })
    }

    /// Epsilon-greedy over slots; an exploratory pick also perturbs its
    /// magnitude with clipped Gaussian noise.
    pub fn select_action<R: Rng + ?Sized>(
        &self,
        state: &[f64],
        mask: &[bool],
        epsilon: f64,
        rng: &mut R,
    ) -> Result<ActionChoice> {
        self.check_state(state, mask)?;
        if !mask.iter().any(|&m| m) {
            return Err(Error::Contract("no available slot to act on".into()));
        }
        if !(epsilon > 0.0 && rng.random::<f64>() < epsilon) {
            return self.greedy_action(state, mask);
        }
        let mut params = self.params(state)?;
        let available: Vec<usize> = (0..mask.len()).filter(|&k| mask[k]).collect();
        let slot = available[rng.random_range(0..available.len())];
        let s = &self.space.slots[slot];
        if self.config.uniform_magnitude > 0.0
            && rng.random::<f64>() < self.config.uniform_magnitude
        {
            params[slot] = rng.random_range(s.lo..=s.hi);
        } else if self.config.noise_fraction > 0.0 {
            let z: f64 = rng.sample(StandardNormal);
            params[slot] =
                (params[slot] + self.config.noise_fraction * s.width() * z).clamp(s.lo, s.hi);
        }
        Ok(ActionChoice {
            action: HybridAction {
                slot,
                v: params[slot],
            },
            params,
            explored: true,
        })
    }

    /// Normalized state novelty of `state`, recorded in the running stats.
    /// Zero without querying the networks when the state bonus is disabled.
    pub fn state_bonus(&mut self, state: &[f64]) -> Result<f64> {
        if self.config.curiosity.state_scale == 0.0 {
            return Ok(0.0);
        }
        let raw = self.state_rnd.raw_bonus(state)?;
        let bonus = raw / self.state_rnd.scale();
        self.state_rnd.observe(raw);
        Ok(bonus)
    }

    /// Bootstrapped n-step targets from the target networks.
    pub fn compute_targets(&self, batch: &[&Transition]) -> Result<Vec<f64>> {
        let sd = self.space.state_dim();
        let next = stack(batch.iter().map(|t| t.next_state.as_slice()), sd)?;
        let v = self.rescale(self.policy_target.predict_batch(next.view())?);
        let q = self
            .q_target
            .predict_batch(concatenate![Axis(1), next.view(), v].view())?;
        let online = if self.config.double_q {
            let v = self.rescale(self.policy.predict_batch(next.view())?);
            Some(
                self.q
                    .predict_batch(concatenate![Axis(1), next, v].view())?,
            )
        } else {
            None
        };
        Ok(batch
            .iter()
            .enumerate()
            .map(|(b, t)| {
                if t.discount == 0.0 {
                    return t.reward;
                }
                let chooser = online.as_ref().unwrap_or(&q);
                match masked_argmax(chooser.row(b), &t.next_mask) {
                    Some(k) => t.reward + t.discount * q[[b, k]],
                    None => t.reward,
                }
            })
            .collect())
    }

    /// Q regression loss with state distillation; gradients for the
    /// Q-network and the state predictor only.
    pub fn loss_q(&self, batch: &[&Transition], weights: &[f64], targets: &[f64]) -> Result<QLoss> {
        let n = batch.len();
        if weights.len() != n || targets.len() != n || n == 0 {
            return Err(Error::Shape {
                expected: n.max(1),
                got: weights.len().min(targets.len()),
            });
        }
        let (sd, f) = (self.space.state_dim(), self.space.len());
        let states = stack(batch.iter().map(|t| t.state.as_slice()), sd)?;
        let params = stack(batch.iter().map(|t| t.params.as_slice()), f)?;
        let (q, tape) = self
            .q
            .forward_batch(concatenate![Axis(1), states, params].view())?;
        let mut grad = Array2::zeros(q.dim());
        let mut td_loss = 0.0;
        let mut td_errors = Vec::with_capacity(n);
        for (b, t) in batch.iter().enumerate() {
            if t.slot >= f {
                return Err(Error::Contract(format!(
                    "stored slot {} out of range",
                    t.slot
                )));
            }
            let residual = q[[b, t.slot]] - targets[b];
            td_loss += weights[b] * residual * residual;
            grad[[b, t.slot]] = 2.0 * weights[b] * residual / n as f64;
            td_errors.push(-residual);
        }
        td_loss /= n as f64;
        let q_grads = self.q.backward(&tape, grad.view())?;
        let (distill, rnd_grads) = self.state_rnd.distill_loss(states.view())?;
        Ok(QLoss {
            td_loss,
            distill,
            q_grads,
            rnd_grads,
            td_errors,
        })
    }

    /// Backpropagates an objective of the rescaled parameters through the
    /// policy. `objective` returns its value and its gradient with respect to
    /// the parameter matrix. With `invert_gradients` set the result is a
    /// damped descent direction rather than the exact gradient.
    pub fn policy_gradient(
        &self,
        states: ArrayView2<'_, f64>,
        objective: impl FnOnce(ArrayView2<'_, f64>) -> Result<(f64, Array2<f64>)>,
    ) -> Result<(f64, Gradients)> {
        let (u, tape) = self.policy.forward_batch(states)?;
        let v = self.rescale(u);
        let (value, mut gv) = objective(v.view())?;
        if gv.dim() != v.dim() {
            return Err(Error::Shape {
                expected: v.len(),
                got: gv.len(),
            });
        }
        let invert = self.config.invert_gradients;
        for ((b, k), g) in gv.indexed_iter_mut() {
            let slot = &self.space.slots[k];
            if invert {
                // Descent moves v against the gradient.
                let room = if *g < 0.0 {
                    slot.hi - v[[b, k]]
                } else {
                    v[[b, k]] - slot.lo
                };
                *g *= room / slot.width();
            }
            *g *= slot.width() / 2.0;
        }
        Ok((value, self.policy.backward(&tape, gv.view())?))
    }

    /// Action novelty inputs: state, one-hot slot and the slot's magnitude.
    fn action_inputs(
        &self,
        states: ArrayView2<'_, f64>,
        slots: &[usize],
        v: ArrayView2<'_, f64>,
    ) -> Array2<f64> {
        let (sd, f) = (self.space.state_dim(), self.space.len());
        let mut z = Array2::zeros((states.nrows(), sd + f + 1));
        z.slice_mut(s![.., ..sd]).assign(&states);
        for (b, &k) in slots.iter().enumerate() {
            z[[b, sd + k]] = 1.0;
            z[[b, sd + f]] = v[[b, k]];
        }
        z
    }

    /// Policy loss: negated available Q-values at the proposed parameters,
    /// minus weighted action novelty of the greedy hybrid action. The
    /// Q-network is held constant; the action predictor gets the
    /// distillation gradient on the same inputs.
    pub fn loss_pi(&self, batch: &[&Transition]) -> Result<PiLoss> {
        let n = batch.len();
        if n == 0 {
            return Err(Error::Shape {
                expected: 1,
                got: 0,
            });
        }
        let (sd, f) = (self.space.state_dim(), self.space.len());
        let states = stack(batch.iter().map(|t| t.state.as_slice()), sd)?;
        let weight = self.config.curiosity.action_weight;
        let mut q_term = 0.0;
        let mut novelty_term = 0.0;
        let mut action_inputs = Array2::zeros((0, 0));
        let (_, policy_grads) = self.policy_gradient(states.view(), |v| {
            let (q, tape) = self
                .q
                .forward_batch(concatenate![Axis(1), states.view(), v].view())?;
            let mut dq = Array2::zeros(q.dim());
            let mut slots = Vec::with_capacity(n);
            for (b, t) in batch.iter().enumerate() {
                for k in (0..f).filter(|&k| t.mask[k]) {
                    q_term -= q[[b, k]] / n as f64;
                    dq[[b, k]] = -1.0 / n as f64;
                }
                slots.push(masked_argmax(q.row(b), &t.mask).unwrap_or(0));
            }
            let gx = self.q.backward(&tape, dq.view())?.input;
            let mut gv = gx.slice(s![.., sd..]).to_owned();
            action_inputs = self.action_inputs(states.view(), &slots, v);
            if weight > 0.0 {
                let (bonus, gz) = self.action_rnd.bonus_input_gradient(action_inputs.view())?;
                novelty_term = -weight * bonus.iter().sum::<f64>() / n as f64;
                for (b, &k) in slots.iter().enumerate() {
                    gv[[b, k]] -= weight * gz[[b, sd + f]] / n as f64;
                }
            }
            Ok((q_term + novelty_term, gv))
        })?;
        let (distill, rnd_grads) = self.action_rnd.distill_loss(action_inputs.view())?;
        Ok(PiLoss {
            q_term,
            novelty_term,
            distill,
            policy_grads,
            rnd_grads,
            action_inputs,
        })
    }

    /// One prioritized minibatch step: Q and state predictor first, then
    /// policy and action predictor against the updated Q-network.
    pub fn update<R: Rng + ?Sized>(
        &mut self,
        buffer: &mut PrioritizedBuffer<Transition>,
        is_exponent: f64,
        rng: &mut R,
    ) -> Result<UpdateStats> {
        let sample = buffer.sample(self.config.batch_size, is_exponent, rng)?;
        let (stats, td_errors) = {
            let batch: Vec<&Transition> = sample.indices.iter().map(|&i| buffer.get(i)).collect();
            let targets = self.compute_targets(&batch)?;
            let ql = self.loss_q(&batch, &sample.weights, &targets)?;
            if !ql.total().is_finite() {
                return Err(Error::NonFinite("Q loss".into()));
            }
            self.q_opt.apply(&mut self.q, &ql.q_grads)?;
            self.state_rnd.apply_gradients(&ql.rnd_grads)?;
            let pl = self.loss_pi(&batch)?;
            if !pl.total().is_finite() {
                return Err(Error::NonFinite("policy loss".into()));
            }
            self.policy_opt.apply(&mut self.policy, &pl.policy_grads)?;
            self.action_rnd.apply_gradients(&pl.rnd_grads)?;
            (
                UpdateStats {
                    loss_q: ql.total(),
                    loss_pi: pl.total(),
                },
                ql.td_errors,
            )
        };
        buffer.update_priorities(&sample.indices, &td_errors)?;
        self.updates += 1;
        if self.updates.is_multiple_of(self.config.target_sync) {
            self.sync_targets();
        }
        Ok(stats)
    }

    pub fn snapshot(
        &self,
        schema_fingerprint: impl Into<String>,
        goal: GoalMode,
        env: EnvConfig,
        stats: NormalizationStats,
    ) -> PolicySnapshot {
        PolicySnapshot {
            meta: SnapshotMeta {
                schema_fingerprint: schema_fingerprint.into(),
                goal,
                env,
                stats,
                space: self.space.clone(),
                agent: self.config.clone(),
            },
            q: self.q.clone(),
            policy: self.policy.clone(),
        }
    }
}

/// Plays one step with exploration, stores completed n-step records and
/// returns the termination kind.
#[allow(clippy::too_many_arguments)]
fn interact<R: Rng + ?Sized>(
    agent: &mut Agent,
    episode: &mut Episode<'_>,
    acc: &mut NStepAccumulator,
    buffer: &mut PrioritizedBuffer<Transition>,
    epsilon: f64,
    handle: &mut PredictorHandle,
    rng: &mut R,
) -> Result<Done> {
    let state = episode.state().encode();
    let mask = episode.state().mask();
    let choice = agent.select_action(&state, &mask, epsilon, rng)?;
    let outcome = episode.apply(choice.action, handle)?;
    let next_state = episode.state().encode();
    let bonus = agent.state_bonus(&next_state)?;
    let step = Transition {
        state,
        mask,
        slot: choice.action.slot,
        params: choice.params,
        reward: combine_reward(outcome.reward, bonus, agent.config.curiosity.state_scale),
        next_mask: episode.state().mask(),
        next_state,
        discount: 1.0,
    };
    for t in acc.push(step, outcome.done.is_terminal()) {
        buffer.push(t, None);
    }
    Ok(outcome.done)
}

fn greedy_rollout(
    agent: &Agent,
    episode: &mut Episode<'_>,
    handle: &mut PredictorHandle,
) -> Result<Done> {
    loop {
        let s = episode.state();
        let choice = agent.greedy_action(&s.encode(), &s.mask())?;
        let done = episode.apply(choice.action, handle)?.done;
        if done.is_terminal() {
            return Ok(done);
        }
    }
}

/// Greedy rollout from `x` without exploration or learning.
pub fn generate_cf(
    agent: &Agent,
    x: &[f64],
    handle: &mut PredictorHandle,
    mode: GoalMode,
    env: EnvConfig,
    instance_id: impl Into<String>,
) -> Result<CfResult> {
    let start = Instant::now();
    let mut episode = Episode::reset(x, agent.space(), mode, env, handle)?;
    let done = greedy_rollout(agent, &mut episode, handle)?;
    let final_state = episode.state().x.clone();
    Ok(CfResult::new(
        instance_id,
        x.to_vec(),
        final_state,
        done == Done::Success,
        start.elapsed().as_secs_f64(),
    ))
}

/// Explains every row, ids `"{repetition}-{row}"`. Rows whose goal cannot
/// apply (already of the target class) are skipped. `overhead_s` is added to
/// each generation time, e.g. amortized training time.
pub fn explain_rows(
    agent: &Agent,
    rows: ArrayView2<'_, f64>,
    handle: &mut PredictorHandle,
    mode: GoalMode,
    env: EnvConfig,
    repetition: usize,
    overhead_s: f64,
) -> Result<Vec<CfResult>> {
    let mut out = Vec::with_capacity(rows.nrows());
    for (i, row) in rows.rows().into_iter().enumerate() {
        let x = row.to_vec();
        match generate_cf(agent, &x, handle, mode, env, format!("{repetition}-{i}")) {
            Ok(mut r) => {
                r.repetition = repetition;
                r.gen_time_s += overhead_s;
                out.push(r);
            }
            Err(Error::InvalidGoal(_)) => continue,
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

/// Fraction of rows with a valid greedy counterfactual; `None` when no row
/// admits the goal.
pub fn probe_validity(
    agent: &Agent,
    rows: ArrayView2<'_, f64>,
    handle: &mut PredictorHandle,
    mode: GoalMode,
    env: EnvConfig,
) -> Result<Option<f64>> {
    let results = explain_rows(agent, rows, handle, mode, env, 0, 0.0)?;
    Ok((!results.is_empty()).then(|| crate::eval::validity(&results)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub step: u64,
    pub epoch: usize,
    /// Mean over the epoch's updates; `None` before learning starts.
    pub loss_q: Option<f64>,
    pub loss_pi: Option<f64>,
    pub epsilon: f64,
    pub probe_validity: Option<f64>,
}

impl fmt::Display for LogEntry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let opt =
            |v: Option<f64>, p: usize| v.map_or_else(|| "-".to_string(), |v| format!("{v:.p$}"));
        write!(
            f,
            "step={} epoch={} loss_q={} loss_pi={} epsilon={:.4} probe_validity={}",
            self.step,
            self.epoch,
            opt(self.loss_q, 6),
            opt(self.loss_pi, 6),
            self.epsilon,
            opt(self.probe_validity, 4)
        )
    }
}

/// Resumable trainer state. The replay buffer is not included; a resumed
/// run refills it before updating again.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub agent: Agent,
    pub config: TrainConfig,
    pub env: EnvConfig,
    pub mode: GoalMode,
    pub rng: ChaCha8Rng,
    pub step: u64,
    pub epoch: usize,
    pub log: Vec<LogEntry>,
}

impl Checkpoint {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, serde_json::to_vec(self)?)?;
        std::fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }
}

/// Global training loop: each epoch draws one training instance and spends
/// `steps_per_instance` environment steps on it.
#[derive(Debug)]
pub struct Trainer {
    agent: Agent,
    space: ActionSpace,
    buffer: PrioritizedBuffer<Transition>,
    config: TrainConfig,
    env: EnvConfig,
    mode: GoalMode,
    rng: ChaCha8Rng,
    step: u64,
    epoch: usize,
    log: Vec<LogEntry>,
}

impl Trainer {
    pub fn new(agent: Agent, config: TrainConfig, env: EnvConfig, mode: GoalMode) -> Result<Self> {
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        Self::build(Checkpoint {
            agent,
            config,
            env,
            mode,
            rng,
            step: 0,
            epoch: 0,
            log: Vec::new(),
        })
    }

    pub fn from_checkpoint(checkpoint: Checkpoint) -> Result<Self> {
        Self::build(checkpoint)
    }

    fn build(c: Checkpoint) -> Result<Self> {
        c.config.validate()?;
        c.env.validate(c.agent.space())?;
        Ok(Trainer {
            space: c.agent.space().clone(),
            buffer: PrioritizedBuffer::new(c.agent.config().replay.clone())?,
            agent: c.agent,
            config: c.config,
            env: c.env,
            mode: c.mode,
            rng: c.rng,
            step: c.step,
            epoch: c.epoch,
            log: c.log,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            agent: self.agent.clone(),
            config: self.config.clone(),
            env: self.env,
            mode: self.mode,
            rng: self.rng.clone(),
            step: self.step,
            epoch: self.epoch,
            log: self.log.clone(),
        }
    }

    pub fn agent(&self) -> &Agent {
        &self.agent
    }

    pub fn into_agent(self) -> Agent {
        self.agent
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn log(&self) -> &[LogEntry] {
        &self.log
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn is_finished(&self) -> bool {
        self.epoch >= self.config.epochs
    }

    pub fn buffer_len(&self) -> usize {
        self.buffer.len()
    }

    /// Spends the per-instance budget on `x`, restarting episodes from it.
    /// Returns mean losses over the updates made, or `None` if none ran.
    /// An instance the goal cannot apply to consumes no steps.
    pub fn train_instance(
        &mut self,
        x: &[f64],
        handle: &mut PredictorHandle,
    ) -> Result<Option<UpdateStats>> {
        let goal = match Goal::new(self.mode, handle.predict(x)?) {
            Ok(g) => g,
            Err(Error::InvalidGoal(_)) => return Ok(None),
            Err(e) => return Err(e),
        };
        let warmup = self
            .config
            .learning_starts
            .max(self.agent.config.batch_size);
        let total = self.config.total_steps() as f64;
        let mut acc = NStepAccumulator::new(self.agent.config.n_step, self.agent.config.gamma)?;
        let mut sums = (0.0, 0.0, 0usize);
        let mut used = 0;
        while used < self.config.steps_per_instance {
            let mut episode = Episode::with_goal(x, &self.space, goal, self.env)?;
            loop {
                let eps = self.config.epsilon(self.step);
                let done = interact(
                    &mut self.agent,
                    &mut episode,
                    &mut acc,
                    &mut self.buffer,
                    eps,
                    handle,
                    &mut self.rng,
                )?;
                self.step += 1;
                used += 1;
                if self.buffer.len() >= warmup
                    && self.step.is_multiple_of(self.config.update_every as u64)
                {
                    let is = self
                        .agent
                        .config
                        .replay
                        .is_exponent(self.step as f64 / total);
                    let st = self.agent.update(&mut self.buffer, is, &mut self.rng)?;
                    sums = (sums.0 + st.loss_q, sums.1 + st.loss_pi, sums.2 + 1);
                }
                if done.is_terminal() {
                    break;
                }
                if used >= self.config.steps_per_instance {
                    for t in acc.flush() {
                        self.buffer.push(t, None);
                    }
                    break;
                }
            }
        }
        let n = sums.2 as f64;
        Ok((sums.2 > 0).then(|| UpdateStats {
            loss_q: sums.0 / n,
            loss_pi: sums.1 / n,
        }))
    }

    /// Runs the remaining epochs. After each epoch a log entry is appended
    /// and `hook` sees the trainer, e.g. to write a checkpoint. On error the
    /// trainer keeps its state as of the last completed step.
    pub fn train_global(
        &mut self,
        rows: ArrayView2<'_, f64>,
        probe: Option<ArrayView2<'_, f64>>,
        handle: &mut PredictorHandle,
        hook: impl FnMut(&Trainer, &LogEntry) -> Result<()>,
    ) -> Result<()> {
        self.train_until(self.config.epochs, rows, probe, handle, hook)
    }

    /// Like [`Trainer::train_global`] but stops once `epoch` epochs (capped
    /// at the configured count) are complete.
    pub fn train_until(
        &mut self,
        epoch: usize,
        rows: ArrayView2<'_, f64>,
        probe: Option<ArrayView2<'_, f64>>,
        handle: &mut PredictorHandle,
        mut hook: impl FnMut(&Trainer, &LogEntry) -> Result<()>,
    ) -> Result<()> {
        if rows.nrows() == 0 {
            return Err(Error::EmptyDataset);
        }
        let stop = epoch.min(self.config.epochs);
        while self.epoch < stop {
            let i = self.rng.random_range(0..rows.nrows());
            let stats = self.train_instance(&rows.row(i).to_vec(), handle)?;
            self.epoch += 1;
            let due = self.epoch == self.config.epochs
                || (self.config.probe_every > 0
                    && self.epoch.is_multiple_of(self.config.probe_every));
            let probe_validity = match probe {
                Some(p) if due => probe_validity(&self.agent, p, handle, self.mode, self.env)?,
                _ => None,
            };
            let entry = LogEntry {
                step: self.step,
                epoch: self.epoch,
                loss_q: stats.map(|s| s.loss_q),
                loss_pi: stats.map(|s| s.loss_pi),
                epsilon: self.config.epsilon(self.step),
                probe_validity,
            };
            log::info!("{entry}");
            self.log.push(entry.clone());
            hook(self, &entry)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LocalConfig {
    /// Environment steps; see [`LocalConfig::budget_from_global`].
    pub steps: u64,
    /// L2 radius of neighborhood samples in normalized space.
    pub radius: f64,
    /// Probability that an episode starts at the target rather than at a
    /// neighborhood sample.
    pub target_fraction: f64,
    /// Steps between greedy evaluations on the target.
    pub eval_every: u64,
    /// Return as soon as a greedy rollout on the target is valid.
    pub stop_on_valid: bool,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    pub learning_starts: usize,
    /// Environment steps per gradient update.
    pub update_every: u64,
    pub seed: u64,
}

impl Default for LocalConfig {
    fn default() -> Self {
        LocalConfig {
            steps: 0,
            radius: 1.0,
            target_fraction: 0.5,
            eval_every: 50,
            stop_on_valid: false,
            epsilon_start: 0.3,
            epsilon_end: 0.05,
            learning_starts: 64,
            update_every: 1,
            seed: 0,
        }
    }
}

impl LocalConfig {
    /// `fraction` of the global run's total steps, rounded up.
    pub fn budget_from_global(fraction: f64, global: &TrainConfig) -> u64 {
        (fraction * global.total_steps() as f64).ceil() as u64
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.radius > 0.0)
            || !(0.0..=1.0).contains(&self.target_fraction)
            || self.eval_every == 0
            || self.update_every == 0
        {
            return Err(Error::Config(
                "local mode needs radius > 0, target_fraction in [0, 1], eval_every > 0, update_every > 0".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.epsilon_start) || !(0.0..=1.0).contains(&self.epsilon_end) {
            return Err(Error::Config("epsilon values must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct LocalOutcome {
    /// Agent holding the best networks seen by the periodic evaluations.
    pub agent: Agent,
    /// Greedy rollout of `agent` on the target.
    pub result: CfResult,
    pub steps: u64,
    pub elapsed_s: f64,
    /// Wall-clock seconds until the first valid evaluation.
    pub first_valid_s: Option<f64>,
}

/// Better when valid over invalid, then strictly closer.
fn improves(candidate: &CfResult, incumbent: &CfResult) -> bool {
    match (candidate.valid, incumbent.valid) {
        (true, false) => true,
        (true, true) => candidate.proximity < incumbent.proximity,
        _ => false,
    }
}

/// Continues training `agent` around one target instance. Episodes start at
/// `x` or at neighborhood samples; greedy evaluations on `x` (including one
/// before any step) keep the best networks, so the outcome is never worse on
/// `x` than the starting agent.
pub fn fine_tune_local(
    mut agent: Agent,
    x: &[f64],
    handle: &mut PredictorHandle,
    mode: GoalMode,
    env: EnvConfig,
    config: &LocalConfig,
) -> Result<LocalOutcome> {
    config.validate()?;
    env.validate(agent.space())?;
    mode.validate(handle.info().task)?;
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let target_goal = Goal::new(mode, handle.predict(x)?)?;
    let space = agent.space().clone();
    let mut buffer = PrioritizedBuffer::new(agent.config().replay.clone())?;
    let warmup = config.learning_starts.max(agent.config().batch_size);

    let evaluate = |agent: &Agent, handle: &mut PredictorHandle| -> Result<CfResult> {
        let t = Instant::now();
        let mut episode = Episode::with_goal(x, &space, target_goal, env)?;
        let done = greedy_rollout(agent, &mut episode, handle)?;
        Ok(CfResult::new(
            "local",
            x.to_vec(),
            episode.state().x.clone(),
            done == Done::Success,
            t.elapsed().as_secs_f64(),
        ))
    };

    let mut best = evaluate(&agent, handle)?;
    let mut best_nets = (agent.q.clone(), agent.policy.clone());
    let mut first_valid_s = best.valid.then(|| start.elapsed().as_secs_f64());
    let mut step = 0u64;
    let mut stop = config.stop_on_valid && best.valid;

    while !stop && step < config.steps {
        let (origin, goal) = if rng.random::<f64>() < config.target_fraction {
            (x.to_vec(), target_goal)
        } else {
            let z = sample_neighborhood(x, config.radius, 1, &mut rng)?.remove(0);
            match Goal::new(mode, handle.predict(&z)?) {
                Ok(g) => (z, g),
                Err(Error::InvalidGoal(_)) => (x.to_vec(), target_goal),
                Err(e) => return Err(e),
            }
        };
        let mut episode = Episode::with_goal(&origin, &space, goal, env)?;
        let mut acc = NStepAccumulator::new(agent.config.n_step, agent.config.gamma)?;
        loop {
            let eps = linear_epsilon(
                config.epsilon_start,
                config.epsilon_end,
                step as f64 / (0.5 * config.steps as f64),
            );
            let done = interact(
                &mut agent,
                &mut episode,
                &mut acc,
                &mut buffer,
                eps,
                handle,
                &mut rng,
            )?;
            step += 1;
            if buffer.len() >= warmup && step.is_multiple_of(config.update_every) {
                let is = agent
                    .config
                    .replay
                    .is_exponent(step as f64 / config.steps as f64);
                agent.update(&mut buffer, is, &mut rng)?;
            }
            if step.is_multiple_of(config.eval_every) || step == config.steps {
                let candidate = evaluate(&agent, handle)?;
                if candidate.valid && first_valid_s.is_none() {
                    first_valid_s = Some(start.elapsed().as_secs_f64());
                }
                if improves(&candidate, &best) {
                    best = candidate;
                    best_nets = (agent.q.clone(), agent.policy.clone());
                }
                stop = config.stop_on_valid && best.valid;
            }
            if done.is_terminal() || stop {
                break;
            }
            if step >= config.steps {
                for t in acc.flush() {
                    buffer.push(t, None);
                }
                break;
            }
        }
    }
    agent.q = best_nets.0;
    agent.policy = best_nets.1;
    agent.sync_targets();
    let elapsed_s = start.elapsed().as_secs_f64();
    best.gen_time_s = elapsed_s;
    Ok(LocalOutcome {
        agent,
        result: best,
        steps: step,
        elapsed_s,
        first_valid_s,
    })
}

const SNAPSHOT_MAGIC: &[u8; 8] = b"CFXSNAP\0";
const SNAPSHOT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotMeta {
    pub schema_fingerprint: String,
    pub goal: GoalMode,
    pub env: EnvConfig,
    pub stats: NormalizationStats,
    pub space: ActionSpace,
    pub agent: AgentConfig,
}

/// Frozen Q and policy networks with everything needed to act again.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicySnapshot {
    pub meta: SnapshotMeta,
    pub q: DenseNet,
    pub policy: DenseNet,
}

impl PolicySnapshot {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        container::encode(
            SNAPSHOT_MAGIC,
            SNAPSHOT_VERSION,
            &self.meta,
            &[self.q.to_bytes(), self.policy.to_bytes()],
        )
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (meta, blobs): (SnapshotMeta, _) =
            container::decode(bytes, SNAPSHOT_MAGIC, SNAPSHOT_VERSION)?;
        let [q, policy] = <[Vec<u8>; 2]>::try_from(blobs).map_err(|b| {
            Error::Format(format!("snapshot holds {} networks, expected 2", b.len()))
        })?;
        Ok(PolicySnapshot {
            meta,
            q: DenseNet::from_bytes(&q)?,
            policy: DenseNet::from_bytes(&policy)?,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn check_schema(&self, fingerprint: &str) -> Result<()> {
        if self.meta.schema_fingerprint != fingerprint {
            return Err(Error::Schema(format!(
                "snapshot was trained for schema {}, got {}",
                self.meta.schema_fingerprint, fingerprint
            )));
        }
        Ok(())
    }

    /// Agent with these networks and fresh optimizers and curiosity modules.
    pub fn to_agent(&self, seed: u64) -> Result<Agent> {
        Agent::from_nets(
            self.meta.space.clone(),
            self.meta.agent.clone(),
            self.q.clone(),
            self.policy.clone(),
            seed,
        )
    }
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use ndarray::Array1;
    use proptest::prelude::*;
    use rand::Rng as _;
    use statrs::distribution::{ChiSquared, ContinuousCDF};

    use super::*;
    use crate::data::{Direction, FeatureKind, FeatureSchema, FeatureSpec, TargetSpec, Task};
    use crate::nn::{numeric_gradient, relative_error};
    use crate::predictor::{FnModel, ModelInfo, Prediction};

    fn space(n: usize) -> ActionSpace {
        let features = (0..n)
            .map(|i| FeatureSpec {
                name: format!("f{i}"),
                kind: FeatureKind::Numeric,
                actionable: true,
                direction: if i == 1 {
                    Direction::IncreaseOnly
                } else {
                    Direction::Any
                },
                raw_min: 0.0,
                raw_max: 1.0,
            })
            .collect();
        let schema = FeatureSchema {
            features,
            target: TargetSpec {
                name: "y".into(),
                task: Task::Classification { n_classes: 2 },
            },
        };
        let stats = NormalizationStats {
            min: vec![0.0; n],
            max: vec![1.0; n],
        };
        ActionSpace::new(&schema, &stats).unwrap()
    }

    fn small_config() -> AgentConfig {
        AgentConfig {
            invert_gradients: false,
            q_hidden: vec![8],
            policy_hidden: vec![8],
            batch_size: 4,
            replay: ReplayConfig {
                capacity: 64,
                ..ReplayConfig::default()
            },
            ..AgentConfig::default()
        }
    }

    fn agent(n: usize, seed: u64) -> Agent {
        Agent::new(space(n), small_config(), seed).unwrap()
    }

    /// Class 1 iff x0 + x1 > 1.
    fn handle(n: usize) -> PredictorHandle {
        let model = FnModel {
            info: ModelInfo {
                task: Task::Classification { n_classes: 2 },
                n_features: n,
            },
            f: |x: &[f64]| Prediction::Class(usize::from(x[0] + x[1] > 1.0)),
        };
        PredictorHandle::local(Arc::new(model)).unwrap()
    }

    fn transition(a: &Agent, rng: &mut ChaCha8Rng, discount: f64) -> Transition {
        let sd = a.space().state_dim();
        let f = a.space().len();
        let mut state: Vec<f64> = (0..sd).map(|_| rng.random::<f64>()).collect();
        let mask: Vec<bool> = (0..f).map(|k| k != f - 1).collect();
        for k in 0..f {
            state[sd - f + k] = if mask[k] { 0.0 } else { 1.0 };
        }
        let params = a.params(&state).unwrap();
        Transition {
            next_state: state.iter().map(|v| v * 0.5).collect(),
            next_mask: vec![true; f],
            slot: rng.random_range(0..f - 1),
            reward: rng.random::<f64>() - 0.5,
            state,
            mask,
            params,
            discount,
        }
    }

    fn batch(a: &Agent, n: usize, seed: u64) -> Vec<Transition> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| transition(a, &mut rng, if i % 2 == 0 { 0.9 } else { 0.0 }))
            .collect()
    }

    fn one_step(reward: f64, tag: f64) -> Transition {
        Transition {
            state: vec![tag],
            mask: vec![true],
            slot: 0,
            params: vec![0.0],
            reward,
            next_state: vec![tag + 1.0],
            next_mask: vec![true],
            discount: 1.0,
        }
    }

    #[test]
    fn uniform_slot_choice_at_full_epsilon() {
        let a = agent(4, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let state = vec![0.5, 0.5, 0.5, 0.5, 0.0, 0.0, 0.0, 0.0];
        let mask = [true; 4];
        let draws = 100_000;
        let mut counts = [0usize; 4];
        for _ in 0..draws {
            counts[a
                .select_action(&state, &mask, 1.0, &mut rng)
                .unwrap()
                .action
                .slot] += 1;
        }
        let expected = draws as f64 / 4.0;
        let chi2: f64 = counts
            .iter()
            .map(|&c| (c as f64 - expected).powi(2) / expected)
            .sum();
        let p = 1.0 - ChiSquared::new(3.0).unwrap().cdf(chi2);
        assert!(p > 0.01, "chi2 {chi2} p {p} counts {counts:?}");
    }

    #[test]
    fn greedy_choice_is_deterministic() {
        let a = agent(4, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let state = vec![0.2, 0.7, 0.1, 0.9, 0.0, 0.0, 1.0, 0.0];
        let mask = [true, true, false, true];
        let first = a.select_action(&state, &mask, 0.0, &mut rng).unwrap();
        for _ in 0..10 {
            assert_eq!(
                a.select_action(&state, &mask, 0.0, &mut rng).unwrap(),
                first
            );
        }
        assert_eq!(a.greedy_action(&state, &mask).unwrap(), first);
        assert!(!first.explored);
    }

    #[test]
    fn empty_mask_is_a_contract_error() {
        let a = agent(2, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let r = a.select_action(&[0.1, 0.2, 1.0, 1.0], &[false, false], 0.5, &mut rng);
        assert!(matches!(r, Err(Error::Contract(_))));
    }

    #[test]
    fn n1_terminal_target_is_reward() {
        let a = agent(3, 6);
        let mut t = batch(&a, 1, 7).remove(0);
        t.reward = 0.7;
        t.discount = 0.0;
        assert_eq!(a.compute_targets(&[&t]).unwrap(), vec![0.7]);
    }

    #[test]
    fn zero_gamma_target_is_reward() {
        let mut acc = NStepAccumulator::new(1, 0.0).unwrap();
        let out = acc.push(one_step(0.3, 0.0), false);
        assert_eq!(out[0].discount, 0.0);
        let a = agent(3, 8);
        let mut t = batch(&a, 1, 9).remove(0);
        t.reward = 0.3;
        t.discount = out[0].discount;
        assert_eq!(a.compute_targets(&[&t]).unwrap(), vec![0.3]);
    }

    #[test]
    fn three_step_fold_matches_hand_unroll() {
        let g: f64 = 0.9;
        let rewards = [0.5, -0.25, 0.125, 1.0, -2.0];
        let mut acc = NStepAccumulator::new(3, g).unwrap();
        let mut out = Vec::new();
        for (i, &r) in rewards.iter().enumerate() {
            out.extend(acc.push(one_step(r, i as f64), i == rewards.len() - 1));
        }
        assert!(acc.is_empty());
        assert_eq!(out.len(), 5);
        // Full windows bootstrap from the third next state.
        assert!((out[0].reward - (0.5 - 0.25 * g + 0.125 * g * g)).abs() < 1e-15);
        assert!((out[0].discount - g.powi(3)).abs() < 1e-15);
        assert_eq!(out[0].next_state, vec![3.0]);
        assert!((out[1].reward - (-0.25 + 0.125 * g + 1.0 * g * g)).abs() < 1e-15);
        // The terminal step closes every pending window without bootstrap.
        assert!((out[2].reward - (0.125 + g - 2.0 * g * g)).abs() < 1e-15);
        assert!((out[3].reward - (1.0 - 2.0 * g)).abs() < 1e-15);
        assert_eq!(out[4].reward, -2.0);
        assert!(out[2..]
            .iter()
            .all(|t| t.discount == 0.0 && t.next_state == vec![5.0]));

        // Bootstrapped value enters with γ^3.
        let a = agent(2, 10);
        let mut t = batch(&a, 1, 11).remove(0);
        t.reward = out[0].reward;
        t.discount = out[0].discount;
        let ns = &t.next_state;
        let q = a
            .q_target()
            .predict(
                &[
                    ns.clone(),
                    a.policy_target()
                        .predict(ns)
                        .unwrap()
                        .iter()
                        .enumerate()
                        .map(|(k, u)| {
                            let s = &a.space().slots[k];
                            s.lo + (u + 1.0) / 2.0 * s.width()
                        })
                        .collect(),
                ]
                .concat(),
            )
            .unwrap();
        let best = q.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let y = a.compute_targets(&[&t]).unwrap()[0];
        assert!((y - (t.reward + g.powi(3) * best)).abs() < 1e-12);
    }

    #[test]
    fn flush_bootstraps_partial_windows() {
        let mut acc = NStepAccumulator::new(3, 0.5).unwrap();
        assert!(acc.push(one_step(1.0, 0.0), false).is_empty());
        assert!(acc.push(one_step(1.0, 1.0), false).is_empty());
        let out = acc.flush();
        assert_eq!(out.len(), 2);
        assert_eq!((out[0].reward, out[0].discount), (1.5, 0.25));
        assert_eq!((out[1].reward, out[1].discount), (1.0, 0.5));
    }

    #[test]
    fn q_loss_zero_when_targets_match_and_predictor_copied() {
        let mut a = agent(3, 12);
        let target = a.state_rnd().target().clone();
        a.state_rnd_mut().predictor_mut().copy_from(&target);
        let data = batch(&a, 4, 13);
        let refs: Vec<&Transition> = data.iter().collect();
        let ys: Vec<f64> = data
            .iter()
            .map(|t| a.q_values(&t.state, &t.params).unwrap()[t.slot])
            .collect();
        let l = a.loss_q(&refs, &[1.0; 4], &ys).unwrap();
        assert_eq!(l.total(), 0.0);
        assert_eq!(l.q_grads.max_abs(), 0.0);
    }

    #[test]
    fn doubling_weights_doubles_td_term() {
        let a = agent(3, 14);
        let data = batch(&a, 4, 15);
        let refs: Vec<&Transition> = data.iter().collect();
        let ys = a.compute_targets(&refs).unwrap();
        let w = [0.2, 0.5, 1.0, 0.7];
        let w2: Vec<f64> = w.iter().map(|v| 2.0 * v).collect();
        let l1 = a.loss_q(&refs, &w, &ys).unwrap();
        let l2 = a.loss_q(&refs, &w2, &ys).unwrap();
        assert!((l2.td_loss - 2.0 * l1.td_loss).abs() < 1e-12);
        assert_eq!(l1.distill, l2.distill);
    }

    #[test]
    fn q_loss_gradients_match_finite_differences() {
        let a = agent(3, 16);
        let data = batch(&a, 4, 17);
        let refs: Vec<&Transition> = data.iter().collect();
        let ys = a.compute_targets(&refs).unwrap();
        let w = [0.3, 1.0, 0.6, 0.9];
        let l = a.loss_q(&refs, &w, &ys).unwrap();
        let numeric = numeric_gradient(
            a.q_net(),
            |q| {
                let mut b = a.clone();
                *b.q_net_mut() = q.clone();
                b.loss_q(&refs, &w, &ys).unwrap().td_loss
            },
            1e-5,
        );
        for (i, n) in numeric.iter().enumerate() {
            assert!(relative_error(l.q_grads.param(i), *n) <= 1e-4, "param {i}");
        }
    }

    #[test]
    fn pi_loss_gradients_match_finite_differences() {
        let mut a = agent(3, 18);
        a.config.curiosity.action_weight = 0.5;
        for v in [0.2, 0.9, 0.4] {
            a.action_rnd_mut().observe(v);
        }
        let data = batch(&a, 4, 19);
        let refs: Vec<&Transition> = data.iter().collect();
        let l = a.loss_pi(&refs).unwrap();
        assert!(l.novelty_term < 0.0);
        let numeric = numeric_gradient(
            a.policy_net(),
            |p| {
                let mut b = a.clone();
                *b.policy_net_mut() = p.clone();
                let l = b.loss_pi(&refs).unwrap();
                l.q_term + l.novelty_term
            },
            1e-5,
        );
        for (i, n) in numeric.iter().enumerate() {
            assert!(
                relative_error(l.policy_grads.param(i), *n) <= 1e-4,
                "param {i}"
            );
        }
        let z = l.action_inputs.clone();
        let target = a.action_rnd().target().clone();
        let numeric = numeric_gradient(
            a.action_rnd().predictor(),
            |p| {
                let d =
                    p.predict_batch(z.view()).unwrap() - target.predict_batch(z.view()).unwrap();
                d.iter().map(|v| v * v).sum::<f64>() / z.nrows() as f64
            },
            1e-5,
        );
        for (i, n) in numeric.iter().enumerate() {
            assert!(
                relative_error(l.rnd_grads.param(i), *n) <= 1e-4,
                "action rnd param {i}"
            );
        }
    }

    #[test]
    fn q_constant_in_params_gives_zero_policy_gradient() {
        let mut a = agent(3, 20);
        a.config.curiosity.action_weight = 0.0;
        // Zero the first-layer weights reading the parameter block.
        let sd = a.space().state_dim();
        let w = &mut a.q_net_mut().layers_mut()[0].weights;
        w.slice_mut(s![.., sd..]).fill(0.0);
        let data = batch(&a, 4, 21);
        let refs: Vec<&Transition> = data.iter().collect();
        assert_eq!(a.loss_pi(&refs).unwrap().policy_grads.max_abs(), 0.0);
    }

    #[test]
    fn policy_climbs_quadratic_critic() {
        let mut a = agent(3, 22);
        let target = Array1::from(vec![0.3, 0.6, -0.4]);
        let states = Array2::from_shape_fn((8, a.space().state_dim()), |(i, j)| {
            ((i * 7 + j * 3) % 10) as f64 / 10.0
        });
        let mut opt = Optimizer::sgd(0.02).unwrap();
        let dist = |a: &Agent| {
            let v = a.params_batch(states.view()).unwrap();
            v.rows()
                .into_iter()
                .map(|r| (&r - &target).mapv(|d| d * d).sum())
                .sum::<f64>()
        };
        let initial = dist(&a);
        let mut last = initial;
        for _ in 0..100 {
            let (_, g) = a
                .policy_gradient(states.view(), |v| {
                    // Maximize -|v - target|² by minimizing its negation.
                    let d = &v - &target;
                    Ok((d.mapv(|x| x * x).sum(), d * 2.0))
                })
                .unwrap();
            opt.apply(a.policy_net_mut(), &g).unwrap();
            let now = dist(&a);
            assert!(now <= last + 1e-12, "{last} -> {now}");
            last = now;
        }
        assert!(last < 0.5 * initial, "{initial} -> {last}");
    }

    #[test]
    fn updates_touch_only_their_own_networks() {
        let a = agent(3, 23);
        let data = batch(&a, 4, 24);
        let refs: Vec<&Transition> = data.iter().collect();
        let ys = a.compute_targets(&refs).unwrap();

        let mut b = a.clone();
        let ql = b.loss_q(&refs, &[1.0; 4], &ys).unwrap();
        b.q_opt.apply(&mut b.q, &ql.q_grads).unwrap();
        b.state_rnd.apply_gradients(&ql.rnd_grads).unwrap();
        assert_ne!(b.q, a.q);
        assert_eq!(b.policy, a.policy);
        assert_eq!(b.action_rnd, a.action_rnd);

        let mut c = a.clone();
        let pl = c.loss_pi(&refs).unwrap();
        c.policy_opt.apply(&mut c.policy, &pl.policy_grads).unwrap();
        c.action_rnd.apply_gradients(&pl.rnd_grads).unwrap();
        assert_ne!(c.policy, a.policy);
        assert_eq!(c.q, a.q);
        assert_eq!(c.state_rnd, a.state_rnd);
    }

    #[test]
    fn target_sync_copies_exactly() {
        let mut a = agent(3, 25);
        a.config.target_sync = 3;
        let mut buffer = PrioritizedBuffer::new(a.config.replay.clone()).unwrap();
        for t in batch(&a, 8, 26) {
            buffer.push(t, None);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(27);
        let before = a.q_target.clone();
        a.update(&mut buffer, 0.4, &mut rng).unwrap();
        a.update(&mut buffer, 0.4, &mut rng).unwrap();
        assert_eq!(a.q_target, before);
        a.update(&mut buffer, 0.4, &mut rng).unwrap();
        assert_eq!(a.q_target.to_bytes(), a.q.to_bytes());
        assert_eq!(a.policy_target.to_bytes(), a.policy.to_bytes());
    }

    proptest! {
        #[test]
        fn constant_shift_keeps_masked_argmax(
            q in proptest::collection::vec(-64i32..64, 1..12),
            mask_bits in any::<u16>(),
            c in -1000i32..1000,
        ) {
            let mask: Vec<bool> = (0..q.len()).map(|k| mask_bits >> k & 1 == 1).collect();
            // Dyadic values keep the shifted sums exact.
            let base: Vec<f64> = q.iter().map(|&v| v as f64 / 8.0).collect();
            let shifted: Vec<f64> = base.iter().map(|v| v + c as f64).collect();
            prop_assert_eq!(
                masked_argmax(ArrayView1::from(&base), &mask),
                masked_argmax(ArrayView1::from(&shifted), &mask)
            );
        }

        #[test]
        fn emitted_magnitudes_respect_intervals(seed in any::<u64>(), eps in 0.0f64..=1.0) {
            let a = agent(3, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
            let state: Vec<f64> = (0..6).map(|i| if i < 3 { rng.random::<f64>() } else { 0.0 }).collect();
            let choice = a.select_action(&state, &[true; 3], eps, &mut rng).unwrap();
            for (k, v) in choice.params.iter().enumerate() {
                prop_assert!(a.space().slots[k].contains(*v));
            }
        }
    }

    fn short_train(seed: u64) -> Trainer {
        let a = Agent::new(space(2), small_config(), seed).unwrap();
        let cfg = TrainConfig {
            epochs: 3,
            steps_per_instance: 40,
            learning_starts: 8,
            seed,
            ..TrainConfig::default()
        };
        let env = EnvConfig {
            lambda: 0.1,
            max_features: 2,
        };
        let mut t = Trainer::new(a, cfg, env, GoalMode::Untargeted).unwrap();
        let rows = Array2::from_shape_vec((3, 2), vec![0.2, 0.3, 0.8, 0.9, 0.4, 0.4]).unwrap();
        let mut h = handle(2);
        t.train_global(rows.view(), Some(rows.view()), &mut h, |_, _| Ok(()))
            .unwrap();
        t
    }

    #[test]
    fn seeded_training_is_reproducible() {
        let a = short_train(31);
        let b = short_train(31);
        assert_eq!(a.log(), b.log());
        assert_eq!(a.agent().q_net().to_bytes(), b.agent().q_net().to_bytes());
        assert_eq!(a.step(), 120);
        assert!(a.log().iter().all(|e| e.to_string().starts_with("step=")));
    }

    #[test]
    fn resume_from_checkpoint_matches_uninterrupted_state() {
        let t = short_train(32);
        let cp = t.checkpoint();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cp.json");
        cp.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        let resumed = Trainer::from_checkpoint(loaded).unwrap();
        assert_eq!(resumed.agent(), t.agent());
        assert_eq!(resumed.log(), t.log());
        assert!(resumed.is_finished());
    }

    #[test]
    fn zero_step_fine_tune_keeps_networks() {
        let a = agent(2, 33);
        let mut h = handle(2);
        let env = EnvConfig {
            lambda: 0.1,
            max_features: 2,
        };
        let out = fine_tune_local(
            a.clone(),
            &[0.2, 0.3],
            &mut h,
            GoalMode::Untargeted,
            env,
            &LocalConfig::default(),
        )
        .unwrap();
        assert_eq!(out.steps, 0);
        assert_eq!(out.agent.q_net().to_bytes(), a.q_net().to_bytes());
        assert_eq!(out.agent.policy_net().to_bytes(), a.policy_net().to_bytes());
    }

    #[test]
    fn fine_tune_never_worse_on_target() {
        let a = agent(2, 34);
        let mut h = handle(2);
        let env = EnvConfig {
            lambda: 0.1,
            max_features: 2,
        };
        let x = [0.2, 0.3];
        let before = generate_cf(&a, &x, &mut h, GoalMode::Untargeted, env, "x").unwrap();
        let cfg = LocalConfig {
            steps: 200,
            eval_every: 20,
            ..LocalConfig::default()
        };
        let out = fine_tune_local(a, &x, &mut h, GoalMode::Untargeted, env, &cfg).unwrap();
        let after = generate_cf(&out.agent, &x, &mut h, GoalMode::Untargeted, env, "x").unwrap();
        assert_eq!(after.valid, out.result.valid);
        assert!(after.valid || !before.valid);
        if before.valid {
            assert!(after.proximity <= before.proximity);
        }
    }

    #[test]
    fn snapshot_round_trip_reproduces_first_action() {
        let t = short_train(35);
        let stats = NormalizationStats {
            min: vec![0.0; 2],
            max: vec![1.0; 2],
        };
        let env = EnvConfig {
            lambda: 0.1,
            max_features: 2,
        };
        let snap = t.agent().snapshot("abc", GoalMode::Untargeted, env, stats);
        let bytes = snap.to_bytes().unwrap();
        let back = PolicySnapshot::from_bytes(&bytes).unwrap();
        assert_eq!(back, snap);
        assert!(back.check_schema("abc").is_ok());
        assert!(matches!(back.check_schema("xyz"), Err(Error::Schema(_))));
        let restored = back.to_agent(99).unwrap();
        let state = [0.3, 0.6, 0.0, 0.0];
        assert_eq!(
            restored.greedy_action(&state, &[true, true]).unwrap(),
            t.agent().greedy_action(&state, &[true, true]).unwrap()
        );
        for cut in [0, 8, bytes.len() - 1] {
            assert!(PolicySnapshot::from_bytes(&bytes[..cut]).is_err());
        }
    }

    #[test]
    fn generated_result_is_consistent() {
        let t = short_train(36);
        let mut h = handle(2);
        let env = EnvConfig {
            lambda: 0.1,
            max_features: 2,
        };
        let x = [0.3, 0.4];
        let r = generate_cf(t.agent(), &x, &mut h, GoalMode::Untargeted, env, "0-0").unwrap();
        if let Some(cf) = &r.counterfactual {
            assert_eq!(h.predict(cf).unwrap(), Prediction::Class(1));
            let l1: f64 = cf.iter().zip(&x).map(|(a, b)| (a - b).abs()).sum();
            assert!((r.proximity.unwrap() - l1).abs() < 1e-12);
        }
    }
}
