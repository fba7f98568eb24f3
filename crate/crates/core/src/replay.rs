//! Transition memory: FIFO ring buffer with reward- or TD-based priorities
//! and softmax sampling (with replacement) over the stored priority scores.

use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agent::QNetwork;
use crate::error::{Error, Result};
use crate::math;

/// One step of experience. `priority` is assigned at insert time and may be
/// refreshed lazily when the transition is sampled.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub s: Vec<f64>,
    pub a: usize,
    pub r: f64,
    pub s_next: Vec<f64>,
    pub priority: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PriorityKind {
    Reward,
    Td,
}

impl FromStr for PriorityKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "reward" => Ok(PriorityKind::Reward),
            "td" => Ok(PriorityKind::Td),
            other => Err(Error::Config(format!("unknown priority kind `{other}`"))),
        }
    }
}

/// x = r.
pub fn priority_reward(t: &Transition) -> f64 {
    t.r
}

/// x = r + γ·max_a Q(s', a) − Q(s, a), both terms evaluated with the online
/// network (the decoupled two-network form is reserved for learning targets).
pub fn priority_td(t: &Transition, q_e: &QNetwork, gamma: f64) -> f64 {
    let next = q_e.forward(&t.s_next);
    let best = next.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    t.r + gamma * best - q_e.forward(&t.s)[t.a]
}

/// FIFO ring buffer over transitions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayMemory {
    capacity: usize,
    items: Vec<Transition>,
    /// Slot that the next insertion overwrites once the buffer is full.
    next: usize,
    inserted: u64,
}

impl ReplayMemory {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Config("replay capacity must be >= 1".into()));
        }
        Ok(ReplayMemory {
            capacity,
            items: Vec::new(),
            next: 0,
            inserted: 0,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn inserted(&self) -> u64 {
        self.inserted
    }

    pub fn push(&mut self, t: Transition) {
        if self.items.len() < self.capacity {
            self.items.push(t);
        } else {
            self.items[self.next] = t;
        }
        self.next = (self.next + 1) % self.capacity;
        self.inserted += 1;
    }

    pub fn get(&self, idx: usize) -> &Transition {
        &self.items[idx]
    }

    pub fn set_priority(&mut self, idx: usize, x: f64) {
        self.items[idx].priority = x;
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.items.iter()
    }

    /// Softmax distribution over stored priorities (max-subtracted).
    pub fn sampling_distribution(&self) -> Vec<f64> {
        let xs: Vec<f64> = self.items.iter().map(|t| t.priority).collect();
        math::softmax(&xs)
    }

    /// Draw `batch` indices with replacement from the softmax distribution.
    pub fn sample_indices(&self, batch: usize, rng: &mut ChaCha8Rng) -> Result<Vec<usize>> {
        if self.items.is_empty() {
            return Err(Error::Invalid("cannot sample from an empty replay memory".into()));
        }
        let probs = self.sampling_distribution();
        let mut cdf = Vec::with_capacity(probs.len());
        let mut acc = 0.0;
        for p in &probs {
            acc += p;
            cdf.push(acc);
        }
        // Guard the last edge against rounding.
        *cdf.last_mut().unwrap() = 1.0;
        Ok((0..batch)
            .map(|_| {
                let u: f64 = rng.gen();
                cdf.partition_point(|&c| c < u).min(self.items.len() - 1)
            })
            .collect())
    }

    /// Sampled transitions, cloned.
    pub fn sample_batch(&self, batch: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Transition>> {
        Ok(self
            .sample_indices(batch, rng)?
            .into_iter()
            .map(|i| self.items[i].clone())
            .collect())
    }
}
