//! Prioritized experience replay backed by a sum tree.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Binary tree over `capacity` leaves stored as a 1-indexed heap: node `i`
/// has children `2i` and `2i+1`, leaves occupy `capacity..2*capacity`.
#[derive(Debug, Clone)]
pub struct SumTree {
    capacity: usize,
    nodes: Vec<f64>,
}

impl SumTree {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 || !capacity.is_power_of_two() {
            return Err(Error::Config(format!(
                "sum tree capacity must be a power of two, got {capacity}"
            )));
        }
        Ok(SumTree {
            capacity,
            nodes: vec![0.0; 2 * capacity],
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn total(&self) -> f64 {
        self.nodes[1]
    }

    pub fn get(&self, leaf: usize) -> f64 {
        self.nodes[self.capacity + leaf]
    }

    /// Sets a leaf and recomputes each ancestor from its two children, so
    /// internal nodes are exact sums regardless of update history.
    pub fn set(&mut self, leaf: usize, value: f64) {
        assert!(leaf < self.capacity, "leaf {leaf} out of range");
        debug_assert!(value >= 0.0 && value.is_finite());
        let mut i = self.capacity + leaf;
        self.nodes[i] = value;
        while i > 1 {
            i /= 2;
            self.nodes[i] = self.nodes[2 * i] + self.nodes[2 * i + 1];
        }
    }

    /// Leaf whose cumulative interval contains `mass`; never lands on a
    /// zero-priority leaf while the total is positive.
    pub fn find(&self, mut mass: f64) -> usize {
        let mut i = 1;
        while i < self.capacity {
            let left = 2 * i;
            if mass < self.nodes[left] || self.nodes[left + 1] <= 0.0 {
                i = left;
            } else {
                mass -= self.nodes[left];
                i = left + 1;
            }
        }
        i - self.capacity
    }

    /// Checks every internal node against the sum of its children.
    pub fn is_consistent(&self) -> bool {
        (1..self.capacity).all(|i| self.nodes[i] == self.nodes[2 * i] + self.nodes[2 * i + 1])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReplayConfig {
    /// Power of two.
    pub capacity: usize,
    /// Exponent applied to |td| + floor when writing priorities.
    pub priority_exponent: f64,
    pub priority_floor: f64,
    /// Importance-sampling exponent, annealed linearly from start to end.
    pub is_exponent_start: f64,
    pub is_exponent_end: f64,
    pub importance_weights: bool,
}

impl Default for ReplayConfig {
    fn default() -> Self {
        ReplayConfig {
            capacity: 1 << 16,
            priority_exponent: 0.6,
            priority_floor: 1e-3,
            is_exponent_start: 0.4,
            is_exponent_end: 1.0,
            importance_weights: true,
        }
    }
}

impl ReplayConfig {
    pub fn validate(&self) -> Result<()> {
        if self.capacity == 0 || !self.capacity.is_power_of_two() {
            return Err(Error::Config(format!(
                "replay capacity must be a power of two, got {}",
                self.capacity
            )));
        }
        if !(self.priority_exponent >= 0.0) || !(self.priority_floor > 0.0) {
            return Err(Error::Config(
                "priority exponent must be >= 0 and floor > 0".into(),
            ));
        }
        Ok(())
    }

    /// Importance exponent at training progress in [0,1].
    pub fn is_exponent(&self, progress: f64) -> f64 {
        let p = progress.clamp(0.0, 1.0);
        self.is_exponent_start + p * (self.is_exponent_end - self.is_exponent_start)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampledBatch {
    /// Buffer slots, usable with [`PrioritizedBuffer::get`] and
    /// [`PrioritizedBuffer::update_priorities`].
    pub indices: Vec<usize>,
    /// Importance weights in (0,1], normalized by the batch maximum.
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct PrioritizedBuffer<T> {
    config: ReplayConfig,
    tree: SumTree,
    records: Vec<T>,
    cursor: usize,
    max_priority: f64,
}

impl<T> PrioritizedBuffer<T> {
    pub fn new(config: ReplayConfig) -> Result<Self> {
        config.validate()?;
        Ok(PrioritizedBuffer {
            tree: SumTree::new(config.capacity)?,
            records: Vec::new(),
            cursor: 0,
            max_priority: 1.0,
            config,
        })
    }

    pub fn config(&self) -> &ReplayConfig {
        &self.config
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn total_priority(&self) -> f64 {
        self.tree.total()
    }

    pub fn priority(&self, index: usize) -> f64 {
        self.tree.get(index)
    }

    pub fn tree(&self) -> &SumTree {
        &self.tree
    }

    pub fn get(&self, index: usize) -> &T {
        &self.records[index]
    }

    /// Stores `record` at the cursor, overwriting the oldest entry once full.
    /// Without an explicit priority the record enters at the maximum seen so far.
    pub fn push(&mut self, record: T, priority: Option<f64>) -> usize {
        let p = priority
            .unwrap_or(self.max_priority)
            .max(self.config.priority_floor);
        let slot = self.cursor;
        if slot < self.records.len() {
            self.records[slot] = record;
        } else {
            self.records.push(record);
        }
        self.tree.set(slot, p);
        self.max_priority = self.max_priority.max(p);
        self.cursor = (self.cursor + 1) % self.config.capacity;
        slot
    }

    /// Stratified draw: one sample from each of `batch_size` equal-mass segments.
    pub fn sample<R: Rng + ?Sized>(
        &self,
        batch_size: usize,
        is_exponent: f64,
        rng: &mut R,
    ) -> Result<SampledBatch> {
        if self.records.is_empty() {
            return Err(Error::Contract(
                "sampling from an empty replay buffer".into(),
            ));
        }
        if batch_size == 0 || batch_size > self.records.len() {
            return Err(Error::Contract(format!(
                "batch size {batch_size} with {} stored records",
                self.records.len()
            )));
        }
        let total = self.tree.total();
        let segment = total / batch_size as f64;
        let indices: Vec<usize> = (0..batch_size)
            .map(|i| {
                let mass = (i as f64 + rng.random::<f64>()) * segment;
                self.tree.find(mass.min(total * (1.0 - f64::EPSILON)))
            })
            .collect();
        let weights = if self.config.importance_weights {
            let n = self.records.len() as f64;
            let raw: Vec<f64> = indices
                .iter()
                .map(|&i| (n * self.tree.get(i) / total).powf(-is_exponent))
                .collect();
            let max = raw.iter().cloned().fold(f64::MIN_POSITIVE, f64::max);
            raw.into_iter().map(|w| w / max).collect()
        } else {
            vec![1.0; batch_size]
        };
        Ok(SampledBatch { indices, weights })
    }

    /// Sets each leaf to (|td| + floor)^exponent.
    pub fn update_priorities(&mut self, indices: &[usize], td_errors: &[f64]) -> Result<()> {
        if indices.len() != td_errors.len() {
            return Err(Error::Shape {
                expected: indices.len(),
                got: td_errors.len(),
            });
        }
        for (&i, &td) in indices.iter().zip(td_errors) {
            if i >= self.records.len() {
                return Err(Error::Contract(format!(
                    "priority update for empty slot {i}"
                )));
            }
            if !td.is_finite() {
                return Err(Error::NonFinite(format!("TD error for slot {i}")));
            }
            let p = (td.abs() + self.config.priority_floor).powf(self.config.priority_exponent);
            self.tree.set(i, p);
            self.max_priority = self.max_priority.max(p);
        }
        Ok(())
    }
}
