use guidegan_tensor::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::seed;

/// Replay buffer of past fakes for discriminator updates.
#[derive(Clone, Debug)]
pub struct ImagePool {
    pub capacity: usize,
    pub swap_prob: f64,
    pub buffer: Vec<Tensor<f32>>,
    pub rng: ChaCha8Rng,
}

impl ImagePool {
    pub fn new(capacity: usize, seed: u64, label: &str) -> Self {
        Self {
            capacity,
            swap_prob: 0.5,
            buffer: Vec::with_capacity(capacity),
            rng: seed::stream(seed, label),
        }
    }

    /// While filling, store and return `fake`. Once full, return `fake` or,
    /// with probability `swap_prob`, a uniformly chosen stored image which
    /// `fake` then replaces.
    pub fn query(&mut self, fake: Tensor<f32>) -> Tensor<f32> {
        if self.capacity == 0 {
            return fake;
        }
        if self.buffer.len() < self.capacity {
            self.buffer.push(fake.clone());
            return fake;
        }
        if self.rng.random_bool(self.swap_prob) {
            let i = self.rng.random_range(0..self.buffer.len());
            std::mem::replace(&mut self.buffer[i], fake)
        } else {
            fake
        }
    }
}
