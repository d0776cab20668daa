//! Deterministic mixing of expert (S) and pseudo (T) samples into batches.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::losses::Supervision;

/// One batch: `(tag, index into S or T)`, expert samples first.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub epoch: u64,
    pub items: Vec<(Supervision, usize)>,
}

impl Batch {
    pub fn tags(&self) -> Vec<Supervision> {
        self.items.iter().map(|&(t, _)| t).collect()
    }

    pub fn count(&self, tag: Supervision) -> usize {
        self.items.iter().filter(|&&(t, _)| t == tag).count()
    }
}

/// Endless stream of batches. An epoch has `ceil((|S|+|T|)/batch)` batches, the last one
/// possibly partial. Within an epoch each batch takes expert samples in proportion to
/// `|S| / (|S|+|T|)` by cumulative flooring (at least one expert per batch), and both
/// sets are walked in a per-epoch shuffled order that wraps when a set runs out.
#[derive(Clone, Debug)]
pub struct BatchIterator {
    n_s: usize,
    n_t: usize,
    batch_size: usize,
    seed: u64,
    epoch: u64,
    batch_in_epoch: usize,
    order_s: Vec<usize>,
    order_t: Vec<usize>,
    cursor_s: usize,
    cursor_t: usize,
}

impl BatchIterator {
    pub fn new(n_s: usize, n_t: usize, batch_size: usize, seed: u64) -> Result<Self> {
        if n_s == 0 {
            return Err(Error::Data(
                "batch iterator: the expert set S is empty".into(),
            ));
        }
        if batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        let mut it = Self {
            n_s,
            n_t,
            batch_size,
            seed,
            epoch: 0,
            batch_in_epoch: 0,
            order_s: Vec::new(),
            order_t: Vec::new(),
            cursor_s: 0,
            cursor_t: 0,
        };
        it.start_epoch(0);
        Ok(it)
    }

    /// Positions the iterator at the start of batch `index` (counted from 0 across epochs).
    pub fn seek(&mut self, index: u64) {
        let per_epoch = self.batches_per_epoch() as u64;
        self.start_epoch(index / per_epoch);
        for _ in 0..index % per_epoch {
            self.next_batch();
        }
    }

    pub fn batches_per_epoch(&self) -> usize {
        (self.n_s + self.n_t).div_ceil(self.batch_size)
    }

    fn start_epoch(&mut self, epoch: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(
            self.seed
                .wrapping_add(epoch.wrapping_mul(0xA076_1D64_78BD_642F)),
        );
        self.order_s = (0..self.n_s).collect();
        self.order_s.shuffle(&mut rng);
        self.order_t = (0..self.n_t).collect();
        self.order_t.shuffle(&mut rng);
        self.epoch = epoch;
        self.batch_in_epoch = 0;
        self.cursor_s = 0;
        self.cursor_t = 0;
    }

    pub fn next_batch(&mut self) -> Batch {
        if self.batch_in_epoch == self.batches_per_epoch() {
            self.start_epoch(self.epoch + 1);
        }
        let total = self.n_s + self.n_t;
        let b = self.batch_in_epoch;
        let start = b * self.batch_size;
        let end = (start + self.batch_size).min(total);
        let size = end - start;
        let expert_before = start * self.n_s / total;
        let expert_after = end * self.n_s / total;
        let mut experts = (expert_after - expert_before).max(1).min(size);
        if self.n_t == 0 {
            experts = size;
        }
        let mut items = Vec::with_capacity(size);
        for _ in 0..experts {
            items.push((Supervision::Expert, self.order_s[self.cursor_s % self.n_s]));
            self.cursor_s += 1;
        }
        for _ in experts..size {
            items.push((Supervision::Pseudo, self.order_t[self.cursor_t % self.n_t]));
            self.cursor_t += 1;
        }
        self.batch_in_epoch += 1;
        Batch {
            epoch: self.epoch,
            items,
        }
    }
}

impl Iterator for BatchIterator {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        Some(self.next_batch())
    }
}
