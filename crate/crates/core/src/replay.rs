//! Replay storage with uniform and prioritised transition sampling plus
//! contiguous K-step trajectory windows.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{MlrError, Result};
use crate::rng::Rng;
use crate::types::{Action, Observation, Trajectory, Transition};

/// Binary sum tree over `capacity` leaves.
#[derive(Clone, Debug, Serialize, Deserialize)]
struct SumTree {
    size: usize,
    nodes: Vec<f64>,
}

impl SumTree {
    fn new(capacity: usize) -> Self {
        let size = capacity.next_power_of_two();
        Self { size, nodes: vec![0.0; 2 * size] }
    }

    fn set(&mut self, leaf: usize, value: f64) {
        let mut i = leaf + self.size;
        self.nodes[i] = value;
        while i > 1 {
            i /= 2;
            self.nodes[i] = self.nodes[2 * i] + self.nodes[2 * i + 1];
        }
    }

    fn get(&self, leaf: usize) -> f64 {
        self.nodes[leaf + self.size]
    }

    fn total(&self) -> f64 {
        self.nodes[1]
    }

    /// Leaf whose cumulative interval contains `mass` (skips zero-mass leaves).
    fn find(&self, mut mass: f64) -> usize {
        let mut i = 1;
        while i < self.size {
            let left = self.nodes[2 * i];
            if mass < left || self.nodes[2 * i + 1] <= 0.0 {
                i *= 2;
            } else {
                mass -= left;
                i = 2 * i + 1;
            }
        }
        i - self.size
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriorityConfig {
    /// Exponent applied to raw priorities before sampling.
    pub exponent: f64,
}

impl Default for PriorityConfig {
    fn default() -> Self {
        Self { exponent: 0.5 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Slot {
    obs: Vec<u8>,
    next_obs: Vec<u8>,
    action: Action,
    reward: f64,
    done: bool,
    terminal: bool,
}

/// A sampled batch. `indices` are storage slots, usable with
/// [`ReplayBuffer::update_priorities`].
#[derive(Clone, Debug)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub transitions: Vec<Transition>,
    /// Importance weights normalised by the batch maximum (prioritised only).
    pub weights: Option<Vec<f64>>,
}

/// Discounted multi-step return starting at one stored transition.
#[derive(Clone, Debug, PartialEq)]
pub struct NStep {
    pub reward: f64,
    pub next_obs: Observation,
    /// `gamma^steps`, or 0 when the window ended in a terminal state.
    pub discount: f64,
    pub steps: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ReplayBuffer {
    capacity: usize,
    obs_shape: [usize; 3],
    min_size: usize,
    slots: Vec<Slot>,
    head: usize,
    priorities: Option<(PriorityConfig, SumTree, f64)>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, obs_shape: [usize; 3]) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        Self {
            capacity,
            obs_shape,
            min_size: 1,
            slots: Vec::new(),
            head: 0,
            priorities: None,
        }
    }

    pub fn with_priorities(mut self, cfg: PriorityConfig) -> Self {
        let mut tree = SumTree::new(self.capacity);
        for slot in 0..self.slots.len() {
            tree.set(slot, 1.0);
        }
        self.priorities = Some((cfg, tree, 1.0));
        self
    }

    /// Smallest size at which batch sampling is allowed.
    pub fn with_min_size(mut self, min_size: usize) -> Self {
        self.min_size = min_size.max(1);
        self
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn obs_shape(&self) -> [usize; 3] {
        self.obs_shape
    }

    pub fn prioritized(&self) -> bool {
        self.priorities.is_some()
    }

    /// Storage slot of the `i`-th oldest item.
    fn slot_of(&self, i: usize) -> usize {
        if self.slots.len() < self.capacity {
            i
        } else {
            (self.head + i) % self.capacity
        }
    }

    /// Age order of a storage slot (0 = oldest).
    fn order_of(&self, slot: usize) -> usize {
        if self.slots.len() < self.capacity {
            slot
        } else {
            (slot + self.capacity - self.head) % self.capacity
        }
    }

    pub fn push(&mut self, t: Transition) -> Result<()> {
        if !t.reward.is_finite() {
            return Err(MlrError::InvalidArgument(format!("reward {}", t.reward)));
        }
        if t.obs.shape() != self.obs_shape || t.next_obs.shape() != self.obs_shape {
            return Err(MlrError::ShapeMismatch(format!(
                "transition observation {:?} in buffer of {:?}",
                t.obs.shape(),
                self.obs_shape
            )));
        }
        let slot = Slot {
            obs: t.obs.to_bytes(),
            next_obs: t.next_obs.to_bytes(),
            action: t.action,
            reward: t.reward,
            done: t.done,
            terminal: t.terminal,
        };
        let idx = if self.slots.len() < self.capacity {
            self.slots.push(slot);
            self.slots.len() - 1
        } else {
            let idx = self.head;
            self.slots[idx] = slot;
            self.head = (self.head + 1) % self.capacity;
            idx
        };
        if let Some((cfg, tree, max_p)) = &mut self.priorities {
            tree.set(idx, max_p.powf(cfg.exponent));
        }
        Ok(())
    }

    fn transition(&self, slot: usize) -> Transition {
        let s = &self.slots[slot];
        Transition {
            obs: Observation::from_bytes(self.obs_shape, &s.obs),
            action: s.action.clone(),
            reward: s.reward,
            next_obs: Observation::from_bytes(self.obs_shape, &s.next_obs),
            done: s.done,
            terminal: s.terminal,
        }
    }

    /// Item by age order (0 = oldest).
    pub fn get(&self, i: usize) -> Transition {
        self.transition(self.slot_of(i))
    }

    /// Raw priority of a storage slot.
    pub fn priority(&self, slot: usize) -> Option<f64> {
        self.priorities
            .as_ref()
            .map(|(cfg, tree, _)| tree.get(slot).powf(1.0 / cfg.exponent))
    }

    pub fn max_priority(&self) -> Option<f64> {
        self.priorities.as_ref().map(|p| p.2)
    }

    /// Overwrite raw priorities of storage slots. Priorities must be
    /// non-negative and finite.
    pub fn update_priorities(&mut self, slots: &[usize], priorities: &[f64]) -> Result<()> {
        if slots.len() != priorities.len() {
            return Err(MlrError::LengthMismatch { expected: slots.len(), got: priorities.len() });
        }
        let len = self.slots.len();
        let (cfg, tree, max_p) = self
            .priorities
            .as_mut()
            .ok_or_else(|| MlrError::InvalidArgument("buffer has no priorities".into()))?;
        for (&s, &p) in slots.iter().zip(priorities) {
            if s >= len {
                return Err(MlrError::InvalidArgument(format!("slot {s} beyond size {len}")));
            }
            if !(p.is_finite() && p >= 0.0) {
                return Err(MlrError::InvalidArgument(format!("priority {p}")));
            }
            tree.set(s, p.powf(cfg.exponent));
            *max_p = max_p.max(p);
        }
        Ok(())
    }

    /// Sample `n` transitions with replacement. Prioritised buffers sample
    /// proportionally to `priority^exponent` and return importance weights with
    /// correction exponent `beta`.
    pub fn sample_batch(&self, n: usize, beta: f64, rng: &mut Rng) -> Result<Batch> {
        if self.slots.len() < self.min_size {
            return Err(MlrError::InsufficientData(format!(
                "{} transitions stored, {} required",
                self.slots.len(),
                self.min_size
            )));
        }
        let len = self.slots.len();
        match &self.priorities {
            None => {
                let indices: Vec<usize> = (0..n).map(|_| rng.random_range(0..len)).collect();
                let transitions = indices.iter().map(|&i| self.transition(i)).collect();
                Ok(Batch { indices, transitions, weights: None })
            }
            Some((_, tree, _)) => {
                let total = tree.total();
                if total <= 0.0 {
                    return Err(MlrError::InsufficientData("all priorities are zero".into()));
                }
                let indices: Vec<usize> = (0..n)
                    .map(|_| tree.find(rng.random::<f64>() * total).min(len - 1))
                    .collect();
                let raw: Vec<f64> = indices
                    .iter()
                    .map(|&i| (len as f64 * tree.get(i) / total).powf(-beta))
                    .collect();
                let max = raw.iter().cloned().fold(0.0, f64::max);
                let weights = raw.iter().map(|w| w / max).collect();
                let transitions = indices.iter().map(|&i| self.transition(i)).collect();
                Ok(Batch { indices, transitions, weights: Some(weights) })
            }
        }
    }

    /// Whether the window of `k` items starting at age `start` stays inside one
    /// episode (a boundary is allowed only at the last step).
    pub fn window_valid(&self, start: usize, k: usize) -> bool {
        k >= 1
            && start + k <= self.slots.len()
            && (start..start + k - 1).all(|i| !self.slots[self.slot_of(i)].done)
    }

    /// Every valid window start, by brute force.
    pub fn valid_windows(&self, k: usize) -> Vec<usize> {
        if k == 0 || self.slots.len() < k {
            return Vec::new();
        }
        (0..=self.slots.len() - k).filter(|&s| self.window_valid(s, k)).collect()
    }

    /// Sample a window of `k` contiguous steps, uniformly over valid windows.
    pub fn sample_trajectory(&self, k: usize, rng: &mut Rng) -> Result<Trajectory> {
        if k == 0 || self.slots.len() < k {
            return Err(MlrError::InsufficientData(format!(
                "{} steps stored, window of {k} requested",
                self.slots.len()
            )));
        }
        let last = self.slots.len() - k;
        let mut start = None;
        for _ in 0..64 {
            let s = rng.random_range(0..=last);
            if self.window_valid(s, k) {
                start = Some(s);
                break;
            }
        }
        let start = match start {
            Some(s) => s,
            None => {
                let valid = self.valid_windows(k);
                if valid.is_empty() {
                    return Err(MlrError::InsufficientData(format!(
                        "no window of {k} steps avoids an episode boundary"
                    )));
                }
                valid[rng.random_range(0..valid.len())]
            }
        };
        let mut observations = Vec::with_capacity(k);
        let mut actions = Vec::with_capacity(k);
        for i in start..start + k {
            let s = &self.slots[self.slot_of(i)];
            observations.push(Observation::from_bytes(self.obs_shape, &s.obs));
            actions.push(s.action.clone());
        }
        Ok(Trajectory { observations, actions, start_index: start })
    }

    /// `n`-step discounted return from storage slot `slot`, each reward first
    /// clipped to `[-clip, clip]` when given. The window stops at an episode
    /// boundary or at the newest stored item.
    pub fn n_step(&self, slot: usize, n: usize, gamma: f64, clip: Option<f64>) -> NStep {
        let start = self.order_of(slot);
        let mut reward = 0.0;
        let mut discount = 1.0;
        let mut steps = 0;
        let mut last = slot;
        for i in start..(start + n.max(1)).min(self.slots.len()) {
            let s = self.slot_of(i);
            let item = &self.slots[s];
            let r = clip.map_or(item.reward, |c| item.reward.clamp(-c, c));
            reward += discount * r;
            discount *= gamma;
            steps += 1;
            last = s;
            if item.done {
                if item.terminal {
                    discount = 0.0;
                }
                break;
            }
        }
        NStep {
            reward,
            next_obs: Observation::from_bytes(self.obs_shape, &self.slots[last].next_obs),
            discount,
            steps,
        }
    }
}
