//! Named parameter registry.
//!
//! Parameters are registered in a fixed order at model construction; that
//! order defines the checkpoint layout and the optimizer update order, so
//! training runs are reproducible byte for byte. Freezing a parameter
//! removes it from the optimizer and disables gradient accumulation while
//! leaving it on the gradient path for everything upstream.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub struct Param {
    pub name: String,
    pub tensor: Tensor,
    pub trainable: bool,
    /// Weight decay applies only to plain weight matrices; biases, norm
    /// affines and embedding-style tables are exempt.
    pub weight_decay: bool,
}

#[derive(Default)]
pub struct ParamStore {
    params: Vec<Param>,
    index: HashMap<String, usize>,
}

fn decays(name: &str) -> bool {
    !["bias", "norm", "embed", "table", "token"]
        .iter()
        .any(|tag| name.contains(tag))
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Register a trainable tensor under `name` and return its handle.
    pub fn register(&mut self, name: impl Into<String>, tensor: Tensor) -> Tensor {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        tensor.set_requires_grad(true).expect("leaf parameter");
        self.index.insert(name.clone(), self.params.len());
        let weight_decay = decays(&name);
        self.params.push(Param {
            name,
            tensor: tensor.clone(),
            trainable: true,
            weight_decay,
        });
        tensor
    }

    /// Fresh parameter with fan-in scaled uniform init, bounds ±1/√fan_in.
    pub fn init_uniform(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        rng: &mut ChaCha12Rng,
    ) -> Tensor {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let data: Vec<f64> = (0..shape.iter().product())
            .map(|_| rng.gen_range(-bound..bound))
            .collect();
        self.register(name, Tensor::param(data, shape).expect("init shape"))
    }

    pub fn init_full(&mut self, name: impl Into<String>, shape: &[usize], value: f64) -> Tensor {
        let data = vec![value; shape.iter().product()];
        self.register(name, Tensor::param(data, shape).expect("init shape"))
    }

    /// Freeze every parameter whose name starts with `prefix`: excluded from
    /// the optimizer and from gradient storage, still traversed by backward.
    pub fn freeze_prefix(&mut self, prefix: &str) {
        for p in &mut self.params {
            if p.name.starts_with(prefix) {
                p.trainable = false;
                p.tensor.set_requires_grad(false).expect("leaf parameter");
            }
        }
    }

    pub fn all(&self) -> &[Param] {
        &self.params
    }

    pub fn trainable(&self) -> impl Iterator<Item = &Param> {
        self.params.iter().filter(|p| p.trainable)
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn zero_grads(&self) {
        for p in &self.params {
            p.tensor.zero_grad();
        }
    }

    /// Load values by name; shapes must match the registered tensors.
    pub fn load_values(&self, values: &HashMap<String, (Vec<usize>, Vec<f64>)>) -> Result<()> {
        for p in &self.params {
            let (shape, data) = values.get(&p.name).ok_or_else(|| {
                Error::Data(format!("checkpoint is missing parameter {}", p.name))
            })?;
            if shape != p.tensor.shape() {
                return Err(Error::Shape {
                    op: "load_values",
                    lhs: p.tensor.shape().to_vec(),
                    rhs: shape.clone(),
                });
            }
            p.tensor.update_data(|d| d.copy_from_slice(data))?;
        }
        Ok(())
    }

    /// FNV-1a over names and raw f64 bits of every parameter under `prefix`.
    pub fn checksum_prefix(&self, prefix: &str) -> u64 {
        let mut hash = 0xcbf2_9ce4_8422_2325u64;
        let mut feed = |bytes: &[u8]| {
            for &b in bytes {
                hash ^= b as u64;
                hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        for p in &self.params {
            if !p.name.starts_with(prefix) {
                continue;
            }
            feed(p.name.as_bytes());
            for v in p.tensor.data().iter() {
                feed(&v.to_le_bytes());
            }
        }
        hash
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, StreamTag};

    #[test]
    fn decay_classification() {
        assert!(decays("vision.block0.attn.q.w"));
        assert!(!decays("vision.block0.attn.q.bias"));
        assert!(!decays("vision.block0.norm1.gamma"));
        assert!(!decays("camera.table"));
        assert!(!decays("decoder.embed.table"));
        assert!(!decays("pstg.token"));
    }

    #[test]
    fn freeze_prefix_disables_grad_accumulation() {
        let mut store = ParamStore::new();
        let mut rng = stream(0, StreamTag::InitParams, 0, 0, 0);
        let w = store.init_uniform("decoder.head.w", &[2, 2], 2, &mut rng);
        store.freeze_prefix("decoder.");
        assert!(!w.requires_grad());
        assert!(store.trainable().count() == 0);
    }

    #[test]
    fn checksum_tracks_value_changes() {
        let mut store = ParamStore::new();
        let mut rng = stream(1, StreamTag::InitParams, 0, 0, 0);
        let w = store.init_uniform("vision.patch.w", &[3, 3], 3, &mut rng);
        let before = store.checksum_prefix("vision.");
        w.update_data(|d| d[0] += 1.0).unwrap();
        assert_ne!(before, store.checksum_prefix("vision."));
    }
}
