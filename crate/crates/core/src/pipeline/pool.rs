use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// History of generated images shown to the discriminators.
#[derive(Clone, Debug)]
pub struct ImagePool<I> {
    capacity: usize,
    buffer: Vec<I>,
    rng: ChaCha8Rng,
}

impl<I: Clone> ImagePool<I> {
    pub fn new(capacity: usize, seed: u64) -> Self {
        Self { capacity, buffer: Vec::with_capacity(capacity), rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.buffer.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buffer.is_empty()
    }

    /// While filling, stores and returns `image`. Once full, with probability
    /// one half swaps `image` for a uniformly chosen stored one and returns
    /// the stored one; otherwise returns `image`.
    pub fn query(&mut self, image: I) -> I {
        if self.capacity == 0 {
            return image;
        }
        if self.buffer.len() < self.capacity {
            self.buffer.push(image.clone());
            return image;
        }
        if self.rng.random_bool(0.5) {
            let i = self.rng.random_range(0..self.buffer.len());
            std::mem::replace(&mut self.buffer[i], image)
        } else {
            image
        }
    }
}
