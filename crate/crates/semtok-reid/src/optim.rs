//! Adaptive moment estimation with decoupled weight decay.
//!
//! State exists only for trainable parameters, in registration order, so
//! updates are deterministic and frozen weights can never drift.

use crate::error::Result;
use crate::params::ParamStore;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

pub struct AdamW {
    pub weight_decay: f64,
    pub step_count: u64,
    /// (name, first moment, second moment) per trainable parameter.
    slots: Vec<(String, Vec<f64>, Vec<f64>)>,
}

impl AdamW {
    pub fn new(store: &ParamStore, weight_decay: f64) -> AdamW {
        let slots = store
            .trainable()
            .map(|p| {
                let n = p.tensor.numel();
                (p.name.clone(), vec![0.0; n], vec![0.0; n])
            })
            .collect();
        AdamW {
            weight_decay,
            step_count: 0,
            slots,
        }
    }

    /// Names the optimizer holds state for (the state-dict key audit).
    pub fn state_names(&self) -> Vec<&str> {
        self.slots.iter().map(|(n, _, _)| n.as_str()).collect()
    }

    /// One update over all trainable parameters. Parameters without a
    /// gradient this step are still decayed and advance their moments.
    pub fn step(&mut self, store: &ParamStore, lr: f64) -> Result<()> {
        self.step_count += 1;
        let t = self.step_count as i32;
        let bias1 = 1.0 - BETA1.powi(t);
        let bias2 = 1.0 - BETA2.powi(t);
        for (slot, param) in self.slots.iter_mut().zip(store.trainable()) {
            debug_assert_eq!(slot.0, param.name, "optimizer state order must match store");
            let grad = param
                .tensor
                .grad()
                .unwrap_or_else(|| vec![0.0; param.tensor.numel()]);
            let (m, v) = (&mut slot.1, &mut slot.2);
            let decay = if param.weight_decay {
                self.weight_decay
            } else {
                0.0
            };
            param.tensor.update_data(|data| {
                for i in 0..data.len() {
                    m[i] = BETA1 * m[i] + (1.0 - BETA1) * grad[i];
                    v[i] = BETA2 * v[i] + (1.0 - BETA2) * grad[i] * grad[i];
                    let m_hat = m[i] / bias1;
                    let v_hat = v[i] / bias2;
                    data[i] -= lr * (m_hat / (v_hat.sqrt() + ADAM_EPS) + decay * data[i]);
                }
            })?;
        }
        Ok(())
    }

    /// Flat snapshots for checkpointing: (name, m, v) in update order.
    pub fn state(&self) -> &[(String, Vec<f64>, Vec<f64>)] {
        &self.slots
    }

    pub fn restore(&mut self, step_count: u64, moments: Vec<(String, Vec<f64>, Vec<f64>)>) -> Result<()> {
        if moments.len() != self.slots.len()
            || moments
                .iter()
                .zip(&self.slots)
                .any(|(a, b)| a.0 != b.0 || a.1.len() != b.1.len())
        {
            return Err(crate::error::Error::Data(
                "optimizer state does not match the model's trainable parameters".into(),
            ));
        }
        self.step_count = step_count;
        self.slots = moments;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, StreamTag};
    use crate::tensor::Tensor;

    #[test]
    fn state_only_for_trainable_params() {
        let mut store = ParamStore::new();
        let mut rng = stream(2, StreamTag::InitParams, 0, 0, 0);
        store.init_uniform("vision.patch.w", &[2, 2], 2, &mut rng);
        store.init_uniform("decoder.head.w", &[2, 2], 2, &mut rng);
        store.freeze_prefix("decoder.");
        let opt = AdamW::new(&store, 1e-4);
        assert_eq!(opt.state_names(), vec!["vision.patch.w"]);
    }

    #[test]
    fn descends_a_quadratic() {
        let mut store = ParamStore::new();
        let x = store.register("x", Tensor::param(vec![2.0, -3.0], &[2]).unwrap());
        let mut opt = AdamW::new(&store, 0.0);
        for _ in 0..300 {
            store.zero_grads();
            let loss = x.mul(&x).unwrap().sum_all().unwrap();
            loss.backward().unwrap();
            opt.step(&store, 0.05).unwrap();
        }
        for v in x.to_vec() {
            assert!(v.abs() < 0.05, "did not converge: {v}");
        }
    }

    #[test]
    fn decay_exemption_respected() {
        let mut store = ParamStore::new();
        let w = store.register("layer.w", Tensor::param(vec![1.0], &[1]).unwrap());
        let b = store.register("layer.bias", Tensor::param(vec![1.0], &[1]).unwrap());
        let mut opt = AdamW::new(&store, 0.5);
        // no gradients at all: only decay can move values
        opt.step(&store, 0.1).unwrap();
        assert!(w.to_vec()[0] < 1.0, "weight must decay");
        assert_eq!(b.to_vec()[0], 1.0, "bias must not decay");
    }
}
