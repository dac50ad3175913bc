//! History buffer of generated images shown to the discriminator, damping
//! oscillation. Below capacity every fresh image is stored and passed
//! through; at capacity each fresh image is, with probability 1/2, swapped
//! against a uniformly random stored one.

use crate::num::Scalar;
use ndarray::{Array3, Array4, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone)]
pub struct HistoryBuffer<S> {
    capacity: usize,
    storage: Vec<Array3<S>>,
    rng: ChaCha8Rng,
}

impl<S: Scalar> HistoryBuffer<S> {
    pub fn new(capacity: usize, rng: ChaCha8Rng) -> Self {
        assert!(capacity >= 1, "buffer capacity must be at least 1");
        HistoryBuffer { capacity, storage: Vec::with_capacity(capacity), rng }
    }

    pub fn len(&self) -> usize {
        self.storage.len()
    }

    pub fn is_empty(&self) -> bool {
        self.storage.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn contents(&self) -> &[Array3<S>] {
        &self.storage
    }

    /// Pass a batch of freshly generated images through the buffer, returning
    /// the batch the discriminator should see. Deterministic given the rng
    /// state.
    pub fn query(&mut self, fresh: &Array4<S>) -> Array4<S> {
        let (b, c, h, w) = fresh.dim();
        let mut out = Array4::<S>::zeros((b, c, h, w));
        for i in 0..b {
            let img = fresh.index_axis(Axis(0), i).to_owned();
            let returned = if self.storage.len() < self.capacity {
                self.storage.push(img.clone());
                img
            } else if self.rng.random_bool(0.5) {
                img
            } else {
                let slot = self.rng.random_range(0..self.capacity);
                std::mem::replace(&mut self.storage[slot], img)
            };
            out.index_axis_mut(Axis(0), i).assign(&returned);
        }
        out
    }

    pub fn rng(&self) -> &ChaCha8Rng {
        &self.rng
    }

    /// Rebuild a buffer from checkpointed contents and rng state.
    pub fn restore(capacity: usize, storage: Vec<Array3<S>>, rng: ChaCha8Rng) -> Self {
        assert!(storage.len() <= capacity);
        HistoryBuffer { capacity, storage, rng }
    }
}
