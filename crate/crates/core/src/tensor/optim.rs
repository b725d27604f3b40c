use serde::{Deserialize, Serialize};

use super::{Gradients, ParamStore, Real};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
}

fn default_beta1() -> f64 {
    0.9
}

fn default_beta2() -> f64 {
    0.999
}

fn default_eps() -> f64 {
    1e-8
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
        }
    }
}

/// Bias-corrected Adam. Moment accumulators live on each [`super::Parameter`].
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    t: u64,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam { config, t: 0 }
    }

    /// Number of steps taken so far.
    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One update of every parameter that has a gradient.
    pub fn step<T: Real>(&mut self, store: &mut ParamStore<T>, grads: &Gradients<T>) -> Result<()> {
        for id in store.ids() {
            if let Some(g) = grads.get(id) {
                let n = store.get(id).value.len();
                if g.len() != n {
                    return Err(Error::Shape(format!(
                        "gradient for {} has {} values, parameter has {n}",
                        store.get(id).name,
                        g.len()
                    )));
                }
            }
        }
        self.t += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        let (b1, b2) = (T::of_f64(beta1), T::of_f64(beta2));
        let (lr_t, eps_t) = (T::of_f64(lr), T::of_f64(eps));
        let (bc1, bc2) = (T::of_f64(bc1), T::of_f64(bc2));
        for id in store.ids().collect::<Vec<_>>() {
            let Some(g) = grads.get(id) else { continue };
            let p = store.get_mut(id);
            let (value, m, v) = (p.value.data_mut(), &mut p.first_moment, &mut p.second_moment);
            for i in 0..g.len() {
                m[i] = b1 * m[i] + (T::one() - b1) * g[i];
                v[i] = b2 * v[i] + (T::one() - b2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                value[i] -= lr_t * m_hat / (v_hat.sqrt() + eps_t);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn scalar_store(v: f64) -> ParamStore<f64> {
        let mut store = ParamStore::new();
        store.add("theta", Tensor::new(vec![1], vec![v]).unwrap()).unwrap();
        store
    }

    fn grad_of(store: &ParamStore<f64>, g: f64) -> Gradients<f64> {
        let mut grads = Gradients::zeros_like(store);
        grads.get_mut(store.find("theta").unwrap()).unwrap()[0] = g;
        grads
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut store = scalar_store(0.5);
        let grads = grad_of(&store, 0.0);
        Adam::new(AdamConfig::default()).step(&mut store, &grads).unwrap();
        assert_eq!(store.params()[0].value.data(), &[0.5]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut store = scalar_store(0.0);
        let grads = grad_of(&store, 1.0);
        Adam::new(AdamConfig::default()).step(&mut store, &grads).unwrap();
        let expected = -1e-4 / (1.0 + 1e-8);
        assert!((store.params()[0].value.data()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn repeated_runs_are_identical() {
        let run = || {
            let mut store = scalar_store(1.0);
            let mut adam = Adam::new(AdamConfig { lr: 1e-2, ..Default::default() });
            for step in 0..10 {
                let grads = grad_of(&store, (step as f64 * 0.7).sin());
                adam.step(&mut store, &grads).unwrap();
            }
            store.params()[0].value.data()[0].to_bits()
        };
        assert_eq!(run(), run());
    }
}
