//! Parameter storage and the handful of layers the networks are built from.
//!
//! Layers hold only [`ParamId`]s, so one definition serves any precision: the
//! values live in a [`ParamStore`] and a forward pass pulls them onto a tape.

mod layers;
mod params;

pub use layers::{
    attention, Conv2d, CrossAttention, LayerNorm, Linear, Mlp, MultiHeadAttention, QkvMode,
    TransformerBlock,
};
pub use params::{Param, ParamGroup, ParamId, ParamStore};

use crate::error::Result;
use crate::tensor::{Init, Scalar, Tensor};

/// splitmix64 over `(seed, salt)`.
pub fn mix_seed(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn name_hash(name: &str) -> u64 {
    // FNV-1a
    name.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

/// Registers parameters under a dotted name prefix.
///
/// Every parameter's init seed is derived from the builder seed and its full
/// name, so adding a layer never perturbs the initial values of the others.
pub struct Builder<'a, T> {
    store: &'a mut ParamStore<T>,
    seed: u64,
    prefix: String,
    group: ParamGroup,
}

impl<'a, T: Scalar> Builder<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, seed: u64, group: ParamGroup) -> Self {
        Self {
            store,
            seed,
            prefix: String::new(),
            group,
        }
    }

    pub fn scope(&mut self, name: &str) -> Builder<'_, T> {
        Builder {
            prefix: self.full(name),
            store: self.store,
            seed: self.seed,
            group: self.group,
        }
    }

    pub fn with_group(&mut self, group: ParamGroup) -> Builder<'_, T> {
        Builder {
            prefix: self.prefix.clone(),
            store: self.store,
            seed: self.seed,
            group,
        }
    }

    fn full(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    pub fn tensor(&mut self, name: &str, shape: &[usize], init: Init) -> Result<ParamId> {
        let full = self.full(name);
        let t = Tensor::create(shape, init)?;
        self.store.add(&full, t, self.group)
    }

    /// Kaiming-uniform with `a = sqrt(5)`: `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn kaiming(&mut self, name: &str, shape: &[usize], fan_in: usize) -> Result<ParamId> {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let seed = mix_seed(self.seed, name_hash(&self.full(name)));
        self.tensor(
            name,
            shape,
            Init::Uniform {
                lo: -bound,
                hi: bound,
                seed,
            },
        )
    }

    pub fn gaussian(&mut self, name: &str, shape: &[usize], std: f64) -> Result<ParamId> {
        let seed = mix_seed(self.seed, name_hash(&self.full(name)));
        self.tensor(name, shape, Init::Gaussian { std, seed })
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> Result<ParamId> {
        self.tensor(name, shape, Init::Zeros)
    }

    pub fn ones(&mut self, name: &str, shape: &[usize]) -> Result<ParamId> {
        self.tensor(name, shape, Init::Ones)
    }
}

impl<T: Scalar> ParamStore<T> {
    /// Overwrite every entry of a parameter with `value`.
    pub fn fill(&mut self, id: ParamId, value: f64) {
        let v = T::cast(value);
        self.param_mut(id)
            .value
            .data_mut()
            .iter_mut()
            .for_each(|x| *x = v);
    }

    /// Fill every parameter whose name starts with `prefix`.
    pub fn fill_prefix(&mut self, prefix: &str, value: f64) {
        let v = T::cast(value);
        for p in self.iter_mut().filter(|p| p.name.starts_with(prefix)) {
            p.value.data_mut().iter_mut().for_each(|x| *x = v);
        }
    }
}
