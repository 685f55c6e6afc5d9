//! Adam with bias correction.

use std::collections::HashMap;

use crate::params::Parameter;

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

#[derive(Clone, Debug)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

/// Adam optimizer. State is keyed by parameter name and persists across
/// steps; each parameter keeps its own step count so that frozen groups
/// resume with correct bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    state: HashMap<String, Moments>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            state: HashMap::new(),
        }
    }

    /// Updates every given parameter in place. Parameters without a gradient
    /// (not reached by the last backward pass) are skipped entirely.
    pub fn step<'a>(&mut self, params: impl IntoIterator<Item = &'a Parameter>) {
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        for p in params {
            let n = p.tensor.numel();
            let Some(grad) = p.tensor.grad() else {
                continue;
            };
            let st = self.state.entry(p.name.clone()).or_insert_with(|| Moments {
                m: vec![0.0; n],
                v: vec![0.0; n],
                t: 0,
            });
            st.t += 1;
            let bc1 = 1.0 - beta1.powi(st.t);
            let bc2 = 1.0 - beta2.powi(st.t);
            p.tensor.update_value(|x| {
                for i in 0..n {
                    let g = grad[i];
                    st.m[i] = beta1 * st.m[i] + (1.0 - beta1) * g;
                    st.v[i] = beta2 * st.v[i] + (1.0 - beta2) * g * g;
                    let m_hat = st.m[i] / bc1;
                    let v_hat = st.v[i] / bc2;
                    x[i] -= lr * m_hat / (v_hat.sqrt() + eps);
                }
            });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;

    fn quad_step(store: &ParamStore, adam: &mut Adam, target: f64) {
        store.zero_grad();
        let x = store.get("x").unwrap();
        x.add_scalar(-target).powf(2.0).sum().backward().unwrap();
        adam.step(store.iter());
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut store = ParamStore::new();
        store.register("x", vec![1.0], &[1]).unwrap();
        let mut adam = Adam::new(AdamConfig {
            lr: 0.1,
            ..Default::default()
        });
        quad_step(&store, &mut adam, 0.0);
        // m̂ = g, v̂ = g², so the step is lr·g/(|g|+ε)
        let x = store.get("x").unwrap().item();
        assert!((x - 0.9).abs() < 1e-8, "{x}");
    }

    #[test]
    fn missing_gradient_is_skipped_despite_momentum() {
        let mut store = ParamStore::new();
        store.register("x", vec![1.5], &[1]).unwrap();
        let mut adam = Adam::new(AdamConfig::default());
        adam.step(store.iter());
        assert_eq!(store.get("x").unwrap().item(), 1.5);
        quad_step(&store, &mut adam, 0.0);
        let after = store.get("x").unwrap().item();
        store.zero_grad();
        adam.step(store.iter());
        assert_eq!(store.get("x").unwrap().item(), after);
    }

    #[test]
    fn converges_on_shifted_quadratic() {
        let mut store = ParamStore::new();
        store.register("x", vec![0.0], &[1]).unwrap();
        let mut adam = Adam::new(AdamConfig {
            lr: 0.1,
            ..Default::default()
        });
        for _ in 0..200 {
            quad_step(&store, &mut adam, 3.0);
        }
        let x = store.get("x").unwrap().item();
        assert!((x - 3.0).abs() < 1e-2, "{x}");
    }
}
