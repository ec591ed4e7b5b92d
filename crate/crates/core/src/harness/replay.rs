//! Chronological replay of collected steps for world-model training.

use std::collections::VecDeque;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::nn::{c, Real};
use crate::worldmodel::SequenceBatch;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayStep {
    pub obs: Vec<f32>,
    /// Action that led to `obs`; ignored on the first step of an episode.
    pub action: usize,
    /// Reward received on arriving at `obs`.
    pub reward: f32,
    /// 0 once the episode has terminated at `obs`.
    pub cont: f32,
    pub first: bool,
}

/// Ring of steps in collection order. Episodes follow each other, marked
/// by `first`, so a sampled window may span a boundary; the world model
/// resets its state wherever `first` is set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayBuffer {
    pub capacity: usize,
    pub steps: VecDeque<ReplayStep>,
    pub num_actions: usize,
    /// Steps ever added, including evicted ones.
    pub total_added: u64,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, num_actions: usize) -> Self {
        Self { capacity, steps: VecDeque::new(), num_actions, total_added: 0 }
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn push(&mut self, step: ReplayStep) {
        if self.steps.len() == self.capacity {
            self.steps.pop_front();
        }
        self.steps.push_back(step);
        self.total_added += 1;
    }

    pub fn can_sample(&self, length: usize) -> bool {
        self.steps.len() >= length
    }

    /// Start indices of `batch` windows of `length` contiguous steps.
    pub fn sample_starts<R: Rng + ?Sized>(&self, batch: usize, length: usize, rng: &mut R) -> Vec<usize> {
        let last = self.steps.len() - length;
        (0..batch).map(|_| rng.random_range(0..=last)).collect()
    }

    /// Time-major batch from the given windows. Every window starts from
    /// the model's initial state, so its first row is marked `first`.
    pub fn batch_at<T: Real>(&self, starts: &[usize], length: usize) -> SequenceBatch<T> {
        let b = starts.len();
        let n = length * b;
        let obs_dim = self.steps[0].obs.len();
        let step = |r: usize| &self.steps[starts[r % b] + r / b];
        let mut actions = Array2::zeros((n, self.num_actions));
        for r in 0..n {
            let s = step(r);
            if !(s.first || r < b) {
                actions[[r, s.action]] = T::one();
            }
        }
        SequenceBatch {
            steps: length,
            batch: b,
            obs: Array2::from_shape_fn((n, obs_dim), |(r, j)| c(f64::from(step(r).obs[j]))),
            actions,
            rewards: Array2::from_shape_fn((n, 1), |(r, _)| c(f64::from(step(r).reward))),
            conts: Array2::from_shape_fn((n, 1), |(r, _)| c(f64::from(step(r).cont))),
            firsts: Array2::from_shape_fn((n, 1), |(r, _)| if r < b || step(r).first { T::one() } else { T::zero() }),
        }
    }

    pub fn sample<T: Real, R: Rng + ?Sized>(&self, batch: usize, length: usize, rng: &mut R) -> SequenceBatch<T> {
        let starts = self.sample_starts(batch, length, rng);
        self.batch_at(&starts, length)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop_assert, prop_assert_eq, proptest};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Episodes of the given lengths; obs[0] holds the global step index.
    fn filled(lengths: &[usize], capacity: usize) -> ReplayBuffer {
        let mut buf = ReplayBuffer::new(capacity, 3);
        let mut k = 0;
        for &len in lengths {
            for t in 0..len {
                let last = t + 1 == len;
                buf.push(ReplayStep { obs: vec![k as f32, t as f32], action: k % 3, reward: 1.0, cont: if last { 0.0 } else { 1.0 }, first: t == 0 });
                k += 1;
            }
        }
        buf
    }

    #[test]
    fn evicts_oldest_first() {
        let buf = filled(&[10], 4);
        assert_eq!(buf.len(), 4);
        assert_eq!(buf.steps[0].obs[0], 6.0);
        assert_eq!(buf.total_added, 10);
    }

    #[test]
    fn batch_layout_is_time_major() {
        let buf = filled(&[5, 5], 100);
        let batch: SequenceBatch<f64> = buf.batch_at(&[0, 3], 4);
        assert_eq!(batch.obs.nrows(), 8);
        // Row t * B + b holds step t of window b.
        assert_eq!(batch.obs[[0, 0]], 0.0);
        assert_eq!(batch.obs[[1, 0]], 3.0);
        assert_eq!(batch.obs[[2, 0]], 1.0);
        assert_eq!(batch.obs[[5, 0]], 5.0);
        // Window 1 crosses into the second episode at t = 2.
        assert_eq!(batch.firsts[[5, 0]], 1.0);
        assert_eq!(batch.conts[[3, 0]], 0.0);
        assert_eq!(batch.actions.row(5).sum(), 0.0);
        assert_eq!(batch.actions.row(2).sum(), 1.0);
    }

    proptest! {
        #[test]
        fn windows_are_contiguous_and_mark_boundaries(
            lengths in proptest::collection::vec(1usize..30, 1..10),
            length in 1usize..16,
            seed in 0u64..1000,
        ) {
            let buf = filled(&lengths, 64);
            if !buf.can_sample(length) {
                return Ok(());
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let b = 4;
            let batch: SequenceBatch<f64> = buf.sample(b, length, &mut rng);
            prop_assert_eq!(batch.obs.nrows(), length * b);
            for lane in 0..b {
                prop_assert_eq!(batch.firsts[[lane, 0]], 1.0);
                for t in 1..length {
                    let (prev, cur) = ((t - 1) * b + lane, t * b + lane);
                    prop_assert_eq!(batch.obs[[cur, 0]], batch.obs[[prev, 0]] + 1.0);
                    // A new episode begins exactly where the in-episode index resets.
                    let boundary = batch.obs[[cur, 1]] == 0.0;
                    prop_assert_eq!(batch.firsts[[cur, 0]] == 1.0, boundary);
                    prop_assert!(!boundary || batch.conts[[prev, 0]] == 0.0);
                }
            }
        }
    }
}
