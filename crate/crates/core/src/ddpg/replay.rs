use std::collections::VecDeque;

use rand::Rng;

use crate::ccbp::StateVector;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub state: StateVector,
    /// Environment units.
    pub action: Vec<f64>,
    pub reward: f64,
    pub next_state: StateVector,
    /// True only when the episode ended for a reason intrinsic to the state
    /// (goal or collision); time limits are not terminal.
    pub terminal: bool,
}

/// Bounded FIFO; the oldest transition is evicted first.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    items: VecDeque<Transition>,
    capacity: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::param("replay capacity must be positive"));
        }
        Ok(Self {
            items: VecDeque::with_capacity(capacity.min(1 << 16)),
            capacity,
        })
    }

    pub fn push(&mut self, t: Transition) {
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(t);
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn get(&self, i: usize) -> Option<&Transition> {
        self.items.get(i)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.items.iter()
    }

    /// `n` uniform draws with replacement. Empty buffers yield nothing.
    pub fn sample<'a, R: Rng + ?Sized>(&'a self, n: usize, rng: &mut R) -> Vec<&'a Transition> {
        if self.items.is_empty() {
            return Vec::new();
        }
        (0..n).map(|_| &self.items[rng.gen_range(0..self.items.len())]).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ccbp::Bound;
    use rand::SeedableRng;
    use std::sync::Arc;

    fn tr(r: f64) -> Transition {
        let b: Arc<[Bound]> = Arc::from(vec![Bound::new(0.0, 1.0)]);
        let s = StateVector::new(vec![0.5], b).unwrap();
        Transition {
            state: s.clone(),
            action: vec![0.0],
            reward: r,
            next_state: s,
            terminal: false,
        }
    }

    #[test]
    fn evicts_oldest_first() {
        let mut buf = ReplayBuffer::new(3).unwrap();
        for i in 0..5 {
            buf.push(tr(i as f64));
            assert!(buf.len() <= 3);
        }
        let rewards: Vec<f64> = buf.iter().map(|t| t.reward).collect();
        assert_eq!(rewards, vec![2.0, 3.0, 4.0]);
        assert!(ReplayBuffer::new(0).is_err());
    }

    #[test]
    fn sampling_stays_in_buffer() {
        let mut buf = ReplayBuffer::new(10).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        assert!(buf.sample(4, &mut rng).is_empty());
        buf.push(tr(1.0));
        buf.push(tr(2.0));
        let s = buf.sample(50, &mut rng);
        assert_eq!(s.len(), 50);
        assert!(s.iter().any(|t| t.reward == 1.0) && s.iter().any(|t| t.reward == 2.0));
    }
}
