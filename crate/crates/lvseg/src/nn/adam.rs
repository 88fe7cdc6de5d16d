//! Adam optimizer over named parameter tensors.

use super::NamedGrads;

/// Adam with per-parameter first/second moment estimates, keyed by parameter
/// name. Frozen parameters are skipped entirely: their values and their
/// moments are never touched, so they stay bit-identical across steps.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: NamedGrads,
    v: NamedGrads,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: NamedGrads::new(),
            v: NamedGrads::new(),
        }
    }

    /// Adam variant used for adversarial training (lower beta1).
    pub fn new_gan(lr: f64) -> Self {
        Adam {
            beta1: 0.5,
            ..Adam::new(lr)
        }
    }

    /// Apply one update. `params` pairs each parameter name with its storage;
    /// `trainable` decides (by full parameter name) whether it may move.
    pub fn step(
        &mut self,
        params: Vec<(String, &mut Vec<f64>)>,
        grads: &NamedGrads,
        trainable: &dyn Fn(&str) -> bool,
    ) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, values) in params {
            if !trainable(&name) {
                continue;
            }
            let Some(g) = grads.get(&name) else { continue };
            debug_assert_eq!(g.len(), values.len(), "gradient size mismatch for {name}");
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; values.len()]);
            let v = self.v.entry(name).or_insert_with(|| vec![0.0; values.len()]);
            for i in 0..values.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                values[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}
