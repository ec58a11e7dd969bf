//! The counterfactual search MDP.
//!
//! A state is the current normalized instance plus a mask of the actionable
//! features already modified. An action picks one unmodified actionable
//! feature (a *slot*) and a signed magnitude; the feature is shifted, clamped
//! to the unit box and, for binary features, rounded. Rewards are the negative
//! increment of λ·L1 distance, plus one on the step that meets the goal, so an
//! episode's undiscounted return is `[success] - λ·ℓdist(x, x_final)`.

use serde::{Deserialize, Serialize};

use crate::data::{FeatureKind, FeatureSchema, NormalizationStats, Task};
use crate::error::{Error, Result};
use crate::predictor::{Prediction, PredictorHandle};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum GoalMode {
    /// Any change of predicted class.
    Untargeted,
    /// Prediction must become `class`.
    Targeted { class: usize },
    /// Regression output must move by at least `delta` (raw label units).
    Threshold { delta: f64 },
}

impl GoalMode {
    pub fn default_for(task: Task) -> Self {
        match task {
            Task::Classification { .. } => GoalMode::Untargeted,
            Task::Regression => GoalMode::Threshold { delta: 0.2 },
        }
    }

    pub fn validate(self, task: Task) -> Result<()> {
        match (self, task) {
            (GoalMode::Untargeted, Task::Classification { .. }) => Ok(()),
            (GoalMode::Targeted { class }, Task::Classification { n_classes })
                if class < n_classes =>
            {
                Ok(())
            }
            (GoalMode::Targeted { class }, Task::Classification { n_classes }) => {
                Err(Error::InvalidGoal(format!(
                    "target class {class} out of range for {n_classes} classes"
                )))
            }
            (GoalMode::Threshold { delta }, Task::Regression)
                if delta > 0.0 && delta.is_finite() =>
            {
                Ok(())
            }
            (GoalMode::Threshold { delta }, Task::Regression) => Err(Error::InvalidGoal(format!(
                "threshold must be positive, got {delta}"
            ))),
            (mode, task) => Err(Error::InvalidGoal(format!(
                "goal {mode:?} does not fit task {task:?}"
            ))),
        }
    }
}

/// A goal mode bound to the original instance's prediction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Goal {
    pub mode: GoalMode,
    pub original: Prediction,
}

impl Goal {
    pub fn new(mode: GoalMode, original: Prediction) -> Result<Self> {
        match (mode, original) {
            (GoalMode::Targeted { class }, Prediction::Class(c)) if class == c => {
                Err(Error::InvalidGoal(format!(
                    "instance is already predicted as target class {class}"
                )))
            }
            (GoalMode::Untargeted | GoalMode::Targeted { .. }, Prediction::Class(_)) => {
                Ok(Goal { mode, original })
            }
            (GoalMode::Threshold { delta }, Prediction::Value(_)) if delta > 0.0 => {
                Ok(Goal { mode, original })
            }
            (mode, original) => Err(Error::InvalidGoal(format!(
                "goal {mode:?} incompatible with prediction {original:?}"
            ))),
        }
    }

    pub fn is_met(&self, p: Prediction) -> bool {
        match (self.mode, self.original, p) {
            (GoalMode::Untargeted, Prediction::Class(orig), Prediction::Class(c)) => c != orig,
            (GoalMode::Targeted { class }, _, Prediction::Class(c)) => c == class,
            (GoalMode::Threshold { delta }, Prediction::Value(orig), Prediction::Value(v)) => {
                (v - orig).abs() >= delta
            }
            _ => false,
        }
    }

    /// The 0-1 prediction loss: 1 while the goal is unmet.
    pub fn lpred(&self, p: Prediction) -> u8 {
        u8::from(!self.is_met(p))
    }
}

/// L1 distance in normalized space.
pub fn ldist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

/// Number of components that differ.
pub fn changed_features(a: &[f64], b: &[f64]) -> usize {
    a.iter().zip(b).filter(|(x, y)| x != y).count()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnvConfig {
    /// Weight of the distance penalty.
    pub lambda: f64,
    /// Maximum number of modified features per episode.
    pub max_features: usize,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            lambda: 0.1,
            max_features: 5,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self, space: &ActionSpace) -> Result<()> {
        if !(self.lambda > 0.0) || !self.lambda.is_finite() {
            return Err(Error::Config(format!(
                "lambda must be positive, got {}",
                self.lambda
            )));
        }
        if self.max_features == 0 || self.max_features > space.len() {
            return Err(Error::Config(format!(
                "max_features must be in 1..={}, got {}",
                space.len(),
                self.max_features
            )));
        }
        Ok(())
    }
}

/// One actionable feature and its allowed change interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Slot {
    pub feature: usize,
    pub name: String,
    pub lo: f64,
    pub hi: f64,
    pub binary: bool,
}

impl Slot {
    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }

    pub fn contains(&self, v: f64) -> bool {
        v >= self.lo && v <= self.hi
    }
}

/// Actionable, non-constant features in schema order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionSpace {
    pub n_features: usize,
    pub slots: Vec<Slot>,
}

impl ActionSpace {
    pub fn new(schema: &FeatureSchema, stats: &NormalizationStats) -> Result<Self> {
        if stats.len() != schema.n_features() {
            return Err(Error::Shape {
                expected: schema.n_features(),
                got: stats.len(),
            });
        }
        let slots: Vec<Slot> = schema
            .features
            .iter()
            .enumerate()
            .filter(|(i, f)| f.actionable && !stats.is_constant(*i))
            .map(|(i, f)| {
                let (lo, hi) = f.direction.interval();
                Slot {
                    feature: i,
                    name: f.name.clone(),
                    lo,
                    hi,
                    binary: f.kind == FeatureKind::Binary,
                }
            })
            .collect();
        if slots.is_empty() {
            return Err(Error::Schema(
                "no actionable feature with a non-constant range".into(),
            ));
        }
        Ok(ActionSpace {
            n_features: schema.n_features(),
            slots,
        })
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    /// Length of [`EnvState::encode`].
    pub fn state_dim(&self) -> usize {
        self.n_features + self.slots.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvState {
    pub x: Vec<f64>,
    /// Per slot: modified this episode.
    pub modified: Vec<bool>,
    pub steps: usize,
    pub last_ldist: f64,
}

impl EnvState {
    /// `x` followed by the modified mask as 0/1.
    pub fn encode(&self) -> Vec<f64> {
        let mut s = Vec::with_capacity(self.x.len() + self.modified.len());
        self.encode_into(&mut s);
        s
    }

    pub fn encode_into(&self, out: &mut Vec<f64>) {
        out.extend_from_slice(&self.x);
        out.extend(self.modified.iter().map(|&m| if m { 1.0 } else { 0.0 }));
    }

    /// Slots still available.
    pub fn available(&self) -> Vec<usize> {
        (0..self.modified.len())
            .filter(|&k| !self.modified[k])
            .collect()
    }

    pub fn mask(&self) -> Vec<bool> {
        self.modified.iter().map(|m| !m).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HybridAction {
    pub slot: usize,
    pub v: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Done {
    Continue,
    Success,
    Budget,
}

impl Done {
    pub fn is_terminal(self) -> bool {
        self != Done::Continue
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub reward: f64,
    pub done: Done,
    pub prediction: Prediction,
}

/// One episode rooted at an original instance.
#[derive(Debug, Clone)]
pub struct Episode<'a> {
    space: &'a ActionSpace,
    config: EnvConfig,
    goal: Goal,
    origin: Vec<f64>,
    state: EnvState,
    finished: bool,
}

impl<'a> Episode<'a> {
    /// Queries the predictor for `x`'s original prediction, then starts.
    pub fn reset(
        x: &[f64],
        space: &'a ActionSpace,
        mode: GoalMode,
        config: EnvConfig,
        handle: &mut PredictorHandle,
    ) -> Result<Self> {
        mode.validate(handle.info().task)?;
        let goal = Goal::new(mode, handle.predict(x)?)?;
        Self::with_goal(x, space, goal, config)
    }

    /// Starts with an already-computed goal (avoids re-querying the predictor).
    pub fn with_goal(
        x: &[f64],
        space: &'a ActionSpace,
        goal: Goal,
        config: EnvConfig,
    ) -> Result<Self> {
        config.validate(space)?;
        if x.len() != space.n_features {
            return Err(Error::Shape {
                expected: space.n_features,
                got: x.len(),
            });
        }
        if x.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Contract(
                "episode origin must lie in the unit box".into(),
            ));
        }
        Ok(Episode {
            space,
            config,
            goal,
            origin: x.to_vec(),
            state: EnvState {
                x: x.to_vec(),
                modified: vec![false; space.len()],
                steps: 0,
                last_ldist: 0.0,
            },
            finished: false,
        })
    }

    pub fn state(&self) -> &EnvState {
        &self.state
    }

    pub fn origin(&self) -> &[f64] {
        &self.origin
    }

    pub fn goal(&self) -> Goal {
        self.goal
    }

    pub fn config(&self) -> EnvConfig {
        self.config
    }

    pub fn space(&self) -> &ActionSpace {
        self.space
    }

    pub fn is_finished(&self) -> bool {
        self.finished
    }

    /// Available slots with their allowed change intervals.
    pub fn action_mask(&self) -> Vec<(usize, (f64, f64))> {
        self.state
            .available()
            .into_iter()
            .map(|k| (k, (self.space.slots[k].lo, self.space.slots[k].hi)))
            .collect()
    }

    /// Applies `action`, queries the predictor and returns the reward and
    /// termination kind.
    pub fn apply(
        &mut self,
        action: HybridAction,
        handle: &mut PredictorHandle,
    ) -> Result<StepOutcome> {
        if self.finished {
            return Err(Error::Contract("episode already finished".into()));
        }
        let slot =
            self.space.slots.get(action.slot).ok_or_else(|| {
                Error::Contract(format!("slot {} is not actionable", action.slot))
            })?;
        if self.state.modified[action.slot] {
            return Err(Error::Contract(format!(
                "feature '{}' already modified this episode",
                slot.name
            )));
        }
        if !action.v.is_finite() || !slot.contains(action.v) {
            return Err(Error::Contract(format!(
                "magnitude {} outside [{}, {}] for feature '{}'",
                action.v, slot.lo, slot.hi, slot.name
            )));
        }
        let mut value = (self.state.x[slot.feature] + action.v).clamp(0.0, 1.0);
        if slot.binary {
            value = if value >= 0.5 { 1.0 } else { 0.0 };
        }
        let mut next = self.state.x.clone();
        next[slot.feature] = value;
        let prediction = handle.predict(&next)?;

        let dist = ldist(&self.origin, &next);
        let met = self.goal.is_met(prediction);
        let penalty = self.config.lambda * (dist - self.state.last_ldist);
        let reward = if met { 1.0 - penalty } else { -penalty };

        self.state.x = next;
        self.state.modified[action.slot] = true;
        self.state.steps += 1;
        self.state.last_ldist = dist;

        let done = if met {
            Done::Success
        } else if self.state.steps >= self.config.max_features
            || self.state.modified.iter().all(|&m| m)
        {
            Done::Budget
        } else {
            Done::Continue
        };
        self.finished = done.is_terminal();
        Ok(StepOutcome {
            reward,
            done,
            prediction,
        })
    }
}
