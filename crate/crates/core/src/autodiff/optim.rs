use super::tensor::ParamStore;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias-corrected moments.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Self {
        let zeros = || {
            store
                .iter()
                .map(|(_, _, t)| vec![0.0; t.numel()])
                .collect::<Vec<_>>()
        };
        Self {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, param: usize) -> &[f64] {
        &self.m[param]
    }

    pub fn second_moment(&self, param: usize) -> &[f64] {
        &self.v[param]
    }

    /// Apply one update using the gradients currently held by `store`.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        if self.m.len() != store.len() {
            return Err(Error::invalid(
                "adam_step",
                format!("state has {} slots, store {}", self.m.len(), store.len()),
            ));
        }
        for id in store.ids() {
            let t = store.get(id);
            if t.requires_grad() && t.grad().is_none() {
                return Err(Error::MissingGrad(store.name(id).to_string()));
            }
            if self.m[id.index()].len() != t.numel() {
                return Err(Error::invalid(
                    "adam_step",
                    format!("state size mismatch for '{}'", store.name(id)),
                ));
            }
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for id in store.ids() {
            let t = store.get_mut(id);
            if !t.requires_grad() {
                continue;
            }
            let g = t.grad().expect("checked above").to_vec();
            let (m, v) = (&mut self.m[id.index()], &mut self.v[id.index()]);
            for (i, w) in t.data_mut().iter_mut().enumerate() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                *w -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;

    fn scalar_store(w: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("w", Tensor::param(vec![1], vec![w]).unwrap());
        s
    }

    #[test]
    fn zero_grad_is_fixed_point() {
        let mut store = scalar_store(1.5);
        let mut adam = Adam::new(AdamConfig::default(), &store);
        for _ in 0..3 {
            store.zero_grad();
            adam.step(&mut store).unwrap();
        }
        assert_eq!(store.get(store.find("w").unwrap()).data(), &[1.5]);
        assert_eq!(adam.first_moment(0), &[0.0]);
        assert_eq!(adam.steps(), 3);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut store = scalar_store(1.0);
        let cfg = AdamConfig {
            lr: 0.1,
            ..Default::default()
        };
        let mut adam = Adam::new(cfg, &store);
        store.zero_grad();
        store.get_mut(store.find("w").unwrap()).accumulate_grad(&[1.0]);
        adam.step(&mut store).unwrap();
        let w = store.get(store.find("w").unwrap()).data()[0];
        // mhat = 1, vhat = 1 -> w - 0.1 / (1 + 1e-8)
        assert!((w - 0.9).abs() < 1e-8, "{w}");
    }

    #[test]
    fn constant_gradient_decreases_monotonically() {
        let mut store = scalar_store(1.0);
        let mut adam = Adam::new(AdamConfig::default(), &store);
        let id = store.find("w").unwrap();
        let mut prev = 1.0;
        for _ in 0..2 {
            store.zero_grad();
            store.get_mut(id).accumulate_grad(&[0.3]);
            adam.step(&mut store).unwrap();
            let w = store.get(id).data()[0];
            assert!(w < prev);
            prev = w;
        }
    }

    #[test]
    fn missing_grad_names_parameter() {
        let mut store = scalar_store(1.0);
        let mut adam = Adam::new(AdamConfig::default(), &store);
        match adam.step(&mut store) {
            Err(Error::MissingGrad(name)) => assert_eq!(name, "w"),
            other => panic!("unexpected {other:?}"),
        }
    }
}
