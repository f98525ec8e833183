use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::Result;
use crate::params::ParameterStore;
use crate::tensor::Tensor;

/// Standard deviation of every trainable weight drawn at build time.
pub const TRAINABLE_SD: f64 = 0.02;

/// Seeded parameter initializer writing into a store.
pub struct Initializer<'a> {
    rng: ChaCha8Rng,
    store: &'a mut ParameterStore<f32>,
}

impl<'a> Initializer<'a> {
    pub fn new(store: &'a mut ParameterStore<f32>, seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            store,
        }
    }

    fn sample(&mut self, shape: &[usize], sd: f64, truncate: bool) -> Tensor<f32> {
        let rng = &mut self.rng;
        Tensor::from_fn(shape, |_| loop {
            let z: f64 = StandardNormal.sample(rng);
            if !truncate || z.abs() <= 2.0 {
                break (z * sd) as f32;
            }
        })
    }

    /// Normal truncated at two standard deviations.
    pub fn trunc_normal(&mut self, name: &str, shape: &[usize], sd: f64, frozen: bool) -> Result<()> {
        let t = self.sample(shape, sd, true);
        self.store.insert(name, t, frozen)
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], sd: f64, frozen: bool) -> Result<()> {
        let t = self.sample(shape, sd, false);
        self.store.insert(name, t, frozen)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize], frozen: bool) -> Result<()> {
        self.store.insert(name, Tensor::zeros(shape), frozen)
    }

    pub fn ones(&mut self, name: &str, shape: &[usize], frozen: bool) -> Result<()> {
        self.constant(name, shape, 1.0, frozen)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f32, frozen: bool) -> Result<()> {
        self.store.insert(name, Tensor::full(shape, value), frozen)
    }

    /// He-style normal for a `[.., fan_in, fan_out]` conv weight.
    pub fn kaiming(&mut self, name: &str, shape: &[usize], fan_in: usize) -> Result<()> {
        let sd = (2.0 / fan_in as f64).sqrt();
        self.normal(name, shape, sd, false)
    }
}
