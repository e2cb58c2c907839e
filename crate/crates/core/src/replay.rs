//! Prioritized experience replay with proportional sampling.
//!
//! Slot `i` is drawn with probability `P(i) = p_i^α / Σ_k p_k^α`. Priorities are
//! floored at `ε` so every stored transition stays reachable. The `p_i^α` values
//! live in a sum tree so that a draw costs `O(log N)`.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::Transition;

#[derive(Debug, Error, PartialEq)]
pub enum ReplayError {
    #[error("buffer holds {occupied} transitions, cannot sample a batch of {requested}")]
    Underfull { occupied: usize, requested: usize },
    #[error("index {index} is outside the {occupied} occupied slots")]
    IndexOutOfRange { index: usize, occupied: usize },
    #[error("indices and td errors differ in length")]
    LengthMismatch,
    #[error("invalid replay configuration: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PerConfig {
    pub capacity: usize,
    pub alpha: f64,
    pub epsilon: f64,
    pub beta0: f64,
    pub initial_max_priority: f64,
}

impl Default for PerConfig {
    fn default() -> Self {
        Self {
            capacity: 100_000,
            alpha: 0.6,
            epsilon: 1e-3,
            beta0: 0.4,
            initial_max_priority: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PriorityMode {
    /// Store `value + ε`.
    Explicit(f64),
    /// Store the largest priority seen so far.
    Highest,
}

/// Binary tree whose internal nodes hold the sum of their children.
/// Parents are recomputed from children on every write so sums never drift.
#[derive(Debug, Clone)]
struct SumTree {
    leaves: usize,
    nodes: Vec<f64>,
}

impl SumTree {
    fn new(capacity: usize) -> Self {
        let leaves = capacity.next_power_of_two();
        Self {
            leaves,
            nodes: vec![0.0; 2 * leaves],
        }
    }

    fn total(&self) -> f64 {
        self.nodes[1]
    }

    fn get(&self, i: usize) -> f64 {
        self.nodes[self.leaves + i]
    }

    fn set(&mut self, i: usize, value: f64) {
        let mut node = self.leaves + i;
        self.nodes[node] = value;
        while node > 1 {
            node /= 2;
            self.nodes[node] = self.nodes[2 * node] + self.nodes[2 * node + 1];
        }
    }

    /// Leaf whose cumulative interval contains `mass`, for `0 ≤ mass < total`.
    fn find(&self, mut mass: f64) -> usize {
        let mut node = 1;
        while node < self.leaves {
            let left = 2 * node;
            if mass < self.nodes[left] || self.nodes[left + 1] <= 0.0 {
                node = left;
            } else {
                mass -= self.nodes[left];
                node = left + 1;
            }
        }
        node - self.leaves
    }
}

#[derive(Debug, Clone)]
pub struct SampledBatch {
    pub indices: Vec<usize>,
    pub transitions: Vec<Transition>,
    /// `(1 / (N·P(i)))^β`, divided by the batch maximum.
    pub is_weights: Vec<f64>,
    pub probabilities: Vec<f64>,
}

impl SampledBatch {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct PrioritizedBuffer {
    config: PerConfig,
    storage: Vec<Transition>,
    priorities: Vec<f64>,
    tree: SumTree,
    next: usize,
    max_priority_seen: f64,
}

impl PrioritizedBuffer {
    pub fn new(config: PerConfig) -> Result<Self, ReplayError> {
        if config.capacity == 0 {
            return Err(ReplayError::Invalid("capacity must be positive".into()));
        }
        if !(0.0..=1.0).contains(&config.alpha) {
            return Err(ReplayError::Invalid("alpha must lie in [0, 1]".into()));
        }
        if !(config.epsilon > 0.0) {
            return Err(ReplayError::Invalid("epsilon must be positive".into()));
        }
        if !(config.initial_max_priority > 0.0) {
            return Err(ReplayError::Invalid("initial max priority must be positive".into()));
        }
        Ok(Self {
            storage: Vec::with_capacity(config.capacity.min(1 << 20)),
            priorities: Vec::with_capacity(config.capacity.min(1 << 20)),
            tree: SumTree::new(config.capacity),
            next: 0,
            max_priority_seen: config.initial_max_priority,
            config,
        })
    }

    pub fn config(&self) -> &PerConfig {
        &self.config
    }

    pub fn len(&self) -> usize {
        self.storage.len()
    }

    pub fn is_empty(&self) -> bool {
        self.storage.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.config.capacity
    }

    pub fn max_priority_seen(&self) -> f64 {
        self.max_priority_seen
    }

    pub fn priority(&self, index: usize) -> Option<f64> {
        self.priorities.get(index).copied()
    }

    pub fn transition(&self, index: usize) -> Option<&Transition> {
        self.storage.get(index)
    }

    /// `P(i)` for every occupied slot.
    pub fn probabilities(&self) -> Vec<f64> {
        let total = self.tree.total();
        (0..self.len()).map(|i| self.tree.get(i) / total).collect()
    }

    fn set_priority(&mut self, index: usize, priority: f64) {
        self.priorities[index] = priority;
        self.tree.set(index, priority.powf(self.config.alpha));
        if priority > self.max_priority_seen {
            self.max_priority_seen = priority;
        }
    }

    /// Stores `transition`, overwriting the oldest slot once full. Returns the slot.
    pub fn insert(&mut self, transition: Transition, mode: PriorityMode) -> usize {
        let priority = match mode {
            PriorityMode::Explicit(p) => p.abs() + self.config.epsilon,
            PriorityMode::Highest => self.max_priority_seen,
        };
        let slot = self.next;
        if slot == self.storage.len() {
            self.storage.push(transition);
            self.priorities.push(0.0);
        } else {
            self.storage[slot] = transition;
        }
        self.set_priority(slot, priority);
        self.next = (self.next + 1) % self.config.capacity;
        slot
    }

    /// Draws `batch_size` slots i.i.d. (with replacement) from `P`.
    pub fn sample<R: Rng + ?Sized>(
        &self,
        batch_size: usize,
        beta: f64,
        rng: &mut R,
    ) -> Result<SampledBatch, ReplayError> {
        let occupied = self.len();
        if occupied < batch_size || occupied == 0 {
            return Err(ReplayError::Underfull {
                occupied,
                requested: batch_size,
            });
        }
        let total = self.tree.total();
        let mut indices = Vec::with_capacity(batch_size);
        let mut probabilities = Vec::with_capacity(batch_size);
        let mut is_weights = Vec::with_capacity(batch_size);
        for _ in 0..batch_size {
            let mass = rng.random::<f64>() * total;
            let i = self.tree.find(mass).min(occupied - 1);
            let prob = self.tree.get(i) / total;
            indices.push(i);
            probabilities.push(prob);
            is_weights.push((1.0 / (occupied as f64 * prob)).powf(beta));
        }
        let max_w = is_weights.iter().copied().fold(f64::MIN, f64::max);
        is_weights.iter_mut().for_each(|w| *w /= max_w);
        let transitions = indices.iter().map(|&i| self.storage[i]).collect();
        Ok(SampledBatch {
            indices,
            transitions,
            is_weights,
            probabilities,
        })
    }

    /// `p_i ← |δ_i| + ε` for every sampled index.
    pub fn update_priorities(&mut self, indices: &[usize], td_errors: &[f64]) -> Result<(), ReplayError> {
        if indices.len() != td_errors.len() {
            return Err(ReplayError::LengthMismatch);
        }
        let occupied = self.len();
        if let Some(&index) = indices.iter().find(|&&i| i >= occupied) {
            return Err(ReplayError::IndexOutOfRange { index, occupied });
        }
        for (&i, &d) in indices.iter().zip(td_errors) {
            self.set_priority(i, d.abs() + self.config.epsilon);
        }
        Ok(())
    }
}

/// `β₀ + (1 − β₀)·step/total`, clamped to `[β₀, 1]`.
pub fn anneal_beta(step: usize, total_steps: usize, beta0: f64) -> f64 {
    if total_steps == 0 {
        return 1.0;
    }
    let frac = (step.min(total_steps)) as f64 / total_steps as f64;
    beta0 + (1.0 - beta0) * frac
}
