//! Adam with decoupled weight decay.

use std::collections::{HashMap, HashSet};

use crate::params::ParameterStoreOf;

pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    first_moment: HashMap<String, Vec<f64>>,
    second_moment: HashMap<String, Vec<f64>>,
    frozen: HashSet<String>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64, eps: f64) -> Self {
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps,
            weight_decay,
            step: 0,
            first_moment: HashMap::new(),
            second_moment: HashMap::new(),
            frozen: HashSet::new(),
        }
    }

    /// Excluded parameters receive no update at all, decay included.
    pub fn freeze(&mut self, names: impl IntoIterator<Item = String>) {
        self.frozen.extend(names);
    }

    pub fn step(&mut self, store: &mut ParameterStoreOf<f64>) -> crate::Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let bias1 = 1.0 - self.beta1.powi(t);
        let bias2 = 1.0 - self.beta2.powi(t);
        let names: Vec<String> = store.names().map(String::from).collect();
        for name in names {
            if self.frozen.contains(&name) {
                continue;
            }
            let len = store.get(&name)?.len();
            let m = self
                .first_moment
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; len]);
            let v = self
                .second_moment
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; len]);
            let (beta1, beta2) = (self.beta1, self.beta2);
            let (lr, eps, wd) = (self.lr, self.eps, self.weight_decay);
            store.update(&name, |data, grad| {
                for i in 0..data.len() {
                    m[i] = beta1 * m[i] + (1.0 - beta1) * grad[i];
                    v[i] = beta2 * v[i] + (1.0 - beta2) * grad[i] * grad[i];
                    let m_hat = m[i] / bias1;
                    let v_hat = v[i] / bias2;
                    data[i] -= lr * (m_hat / (v_hat.sqrt() + eps) + wd * data[i]);
                }
            })?;
        }
        Ok(())
    }
}
