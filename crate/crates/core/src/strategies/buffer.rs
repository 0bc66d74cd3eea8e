use alloc::vec::Vec;

use rand::Rng;

use crate::data::Image;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Slot chosen by the reservoir rule for the offer made after `seen` earlier
/// offers, or `None` when the offer is rejected.
pub fn reservoir_slot<R: Rng>(seen: u64, capacity: usize, rng: &mut R) -> Option<usize> {
    if (seen as u128) < capacity as u128 {
        return Some(seen as usize);
    }
    let j = rng.random_range(0..=seen);
    (j < capacity as u64).then_some(j as usize)
}

/// Fixed-capacity reservoir of examples.
#[derive(Clone, Debug, PartialEq)]
pub struct ReplayBuffer<T> {
    capacity: usize,
    items: Vec<T>,
    seen: u64,
}

impl<T> ReplayBuffer<T> {
    pub fn new(capacity: usize) -> Self {
        Self { capacity, items: Vec::with_capacity(capacity.min(1 << 16)), seen: 0 }
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

    /// Total offers made, accepted or not.
    pub fn seen_count(&self) -> u64 {
        self.seen
    }

    pub fn items(&self) -> &[T] {
        &self.items
    }

    /// Offers an item; returns the slot it landed in.
    pub fn reservoir_insert<R: Rng>(&mut self, item: T, rng: &mut R) -> Option<usize> {
        let slot = reservoir_slot(self.seen, self.capacity, rng);
        self.seen += 1;
        match slot {
            Some(s) if s == self.items.len() => self.items.push(item),
            Some(s) => self.items[s] = item,
            None => {}
        }
        slot
    }

    /// `n` indices drawn uniformly with replacement.
    pub fn sample_indices<R: Rng>(&self, n: usize, rng: &mut R) -> Result<Vec<usize>> {
        if self.items.is_empty() {
            return Err(Error::Empty("replay buffer"));
        }
        Ok((0..n).map(|_| rng.random_range(0..self.items.len())).collect())
    }

    pub fn uniform_sample<R: Rng>(&self, n: usize, rng: &mut R) -> Result<Vec<&T>> {
        Ok(self.sample_indices(n, rng)?.into_iter().map(|i| &self.items[i]).collect())
    }

    /// Restores a buffer from saved parts.
    pub fn from_parts(capacity: usize, items: Vec<T>, seen: u64) -> Result<Self> {
        if items.len() > capacity || (items.len() as u64) > seen {
            return Err(Error::Config("buffer state is inconsistent".into()));
        }
        Ok(Self { capacity, items, seen })
    }
}

/// A stored example: the raw image, its task and label, and an optional
/// cached network output.
#[derive(Clone, Debug, PartialEq)]
pub struct BufferItem {
    pub image: Image,
    pub task_id: usize,
    pub label: Option<usize>,
    pub target: Option<Tensor>,
}
