//! Experience replay with both measurement branches stored per transition.

use std::collections::VecDeque;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::Branch;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredBranch {
    pub probability: f64,
    pub reward: f64,
    pub next: Vec<f64>,
    pub terminal: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayEntry {
    pub state: Vec<f64>,
    pub action: usize,
    /// Reachable branches only.
    pub branches: Vec<StoredBranch>,
    /// Position in `branches` of the outcome actually observed.
    pub sampled: usize,
}

impl ReplayEntry {
    pub fn from_branches(state: &[f64], action: usize, branches: &[Branch; 2], sampled_k: usize) -> Result<Self> {
        let mut stored = Vec::with_capacity(2);
        let mut sampled = None;
        for (k, b) in branches.iter().enumerate() {
            if !b.reachable {
                continue;
            }
            if k == sampled_k {
                sampled = Some(stored.len());
            }
            stored.push(StoredBranch {
                probability: b.probability,
                reward: b.reward,
                next: b.next.p.clone(),
                terminal: b.terminated,
            });
        }
        let sampled = sampled.ok_or_else(|| Error::numerical("sampled an unreachable branch"))?;
        let entry = ReplayEntry {
            state: state.to_vec(),
            action,
            branches: stored,
            sampled,
        };
        entry.validate()?;
        Ok(entry)
    }

    pub fn validate(&self) -> Result<()> {
        let total: f64 = self.branches.iter().map(|b| b.probability).sum();
        if self.branches.is_empty() || self.sampled >= self.branches.len() {
            return Err(Error::numerical("replay entry has no sampled branch"));
        }
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::numerical(format!("replay branch probabilities sum to {total}")));
        }
        Ok(())
    }
}

/// First-in first-out buffer of bounded size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayBuffer {
    capacity: usize,
    entries: VecDeque<ReplayEntry>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::config("replay capacity must be positive"));
        }
        Ok(ReplayBuffer {
            capacity,
            entries: VecDeque::with_capacity(capacity.min(1 << 16)),
        })
    }

    pub fn push(&mut self, entry: ReplayEntry) {
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back(entry);
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn get(&self, i: usize) -> &ReplayEntry {
        &self.entries[i]
    }

    /// Uniform draw with replacement.
    pub fn sample<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> Vec<&ReplayEntry> {
        (0..batch)
            .map(|_| &self.entries[rng.gen_range(0..self.entries.len())])
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(tag: usize) -> ReplayEntry {
        ReplayEntry {
            state: vec![1.0],
            action: tag,
            branches: vec![StoredBranch {
                probability: 1.0,
                reward: -1.0,
                next: vec![1.0],
                terminal: true,
            }],
            sampled: 0,
        }
    }

    #[test]
    fn fifo_eviction() {
        let mut b = ReplayBuffer::new(3).unwrap();
        for i in 0..5 {
            b.push(entry(i));
            assert!(b.len() <= 3);
        }
        let kept: Vec<usize> = (0..b.len()).map(|i| b.get(i).action).collect();
        assert_eq!(kept, vec![2, 3, 4]);
    }
}
