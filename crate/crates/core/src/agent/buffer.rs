use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::envs::Transition;
use crate::error::{Error, Result};

/// Fixed-capacity ring buffer of transitions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayBuffer {
    capacity: usize,
    data: Vec<Transition>,
    cursor: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::invalid("replay buffer capacity must be positive"));
        }
        Ok(ReplayBuffer {
            capacity,
            data: Vec::new(),
            cursor: 0,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Stored transitions in slot order (not insertion order once full).
    pub fn as_slice(&self) -> &[Transition] {
        &self.data
    }

    pub fn push(&mut self, t: Transition) {
        if self.data.len() < self.capacity {
            self.data.push(t);
        } else {
            self.data[self.cursor] = t;
        }
        self.cursor = (self.cursor + 1) % self.capacity;
    }

    /// `k` distinct slot indices drawn uniformly.
    pub fn sample_indices<R: Rng + ?Sized>(&self, k: usize, rng: &mut R) -> Result<Vec<usize>> {
        if k > self.data.len() {
            return Err(Error::invalid(format!(
                "cannot draw {k} distinct transitions from a buffer of {}",
                self.data.len()
            )));
        }
        Ok(index::sample(rng, self.data.len(), k).into_vec())
    }

    pub fn get(&self, i: usize) -> &Transition {
        &self.data[i]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(i: usize) -> Transition {
        Transition {
            state: vec![i as f64],
            action: vec![0.0],
            reward: i as f64,
            next_state: vec![0.0],
            done: false,
        }
    }

    #[test]
    fn ring_overwrites_oldest() {
        let mut b = ReplayBuffer::new(3).unwrap();
        for i in 0..5 {
            b.push(t(i));
        }
        assert_eq!(b.len(), 3);
        let mut rewards: Vec<f64> = b.as_slice().iter().map(|t| t.reward).collect();
        rewards.sort_by(f64::total_cmp);
        assert_eq!(rewards, vec![2.0, 3.0, 4.0]);
    }

    #[test]
    fn sampling_is_without_replacement() {
        let mut b = ReplayBuffer::new(100).unwrap();
        for i in 0..50 {
            b.push(t(i));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut idx = b.sample_indices(50, &mut rng).unwrap();
        idx.sort_unstable();
        assert_eq!(idx, (0..50).collect::<Vec<_>>());
        assert!(b.sample_indices(51, &mut rng).is_err());
        assert!(ReplayBuffer::new(0).is_err());
    }
}
