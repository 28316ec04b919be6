//! First-order optimizers over a [`ParamStore`].

use serde::{Deserialize, Serialize};

use crate::nn::ParamStore;
use crate::tensor::Tensor;

pub trait Optimizer {
    /// Applies one update. `grads[i]` belongs to the parameter with index `i`.
    fn step(&mut self, store: &mut ParamStore, grads: &[Option<Tensor>]);

    /// Drops accumulated moment/velocity state.
    fn reset(&mut self);
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adaptive-moment optimizer with bias correction.
pub struct Adam {
    cfg: AdamConfig,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Adam {
            cfg,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }
}

impl Optimizer for Adam {
    fn step(&mut self, store: &mut ParamStore, grads: &[Option<Tensor>]) {
        let values = store.values_mut();
        if self.m.len() != values.len() {
            self.m = values.iter().map(|t| vec![0.0; t.data().len()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.cfg;
        let c1 = 1.0 - beta1.powi(self.t);
        let c2 = 1.0 - beta2.powi(self.t);
        for (i, param) in values.iter_mut().enumerate() {
            let Some(g) = &grads[i] else { continue };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, p) in param.data_mut().iter_mut().enumerate() {
                let gj = g.data()[j];
                m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
                v[j] = beta2 * v[j] + (1.0 - beta2) * gj * gj;
                *p -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + eps);
            }
        }
    }

    fn reset(&mut self) {
        self.t = 0;
        self.m.clear();
        self.v.clear();
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

/// Stochastic gradient descent with heavy-ball momentum and L2 weight decay.
pub struct Sgd {
    cfg: SgdConfig,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(cfg: SgdConfig) -> Self {
        Sgd {
            cfg,
            velocity: Vec::new(),
        }
    }
}

impl Optimizer for Sgd {
    fn step(&mut self, store: &mut ParamStore, grads: &[Option<Tensor>]) {
        let values = store.values_mut();
        if self.velocity.len() != values.len() {
            self.velocity = values.iter().map(|t| vec![0.0; t.data().len()]).collect();
        }
        let SgdConfig {
            lr,
            momentum,
            weight_decay,
        } = self.cfg;
        for (i, param) in values.iter_mut().enumerate() {
            let Some(g) = &grads[i] else { continue };
            let vel = &mut self.velocity[i];
            for (j, p) in param.data_mut().iter_mut().enumerate() {
                let d = g.data()[j] + weight_decay * *p;
                vel[j] = momentum * vel[j] + d;
                *p -= lr * vel[j];
            }
        }
    }

    fn reset(&mut self) {
        self.velocity.clear();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    fn quadratic_descent(opt: &mut dyn Optimizer, steps: usize) -> f64 {
        let mut store = ParamStore::default();
        let id = store
            .insert(
                "x",
                Tensor::from_vec(Shape::new(1, 1, 1, 2), vec![3.0, -2.0]).unwrap(),
            )
            .unwrap();
        for _ in 0..steps {
            let g = store.get(id).map(|v| 2.0 * v);
            opt.step(&mut store, &[Some(g)]);
        }
        store.get(id).data().iter().map(|v| v * v).sum()
    }

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut adam = Adam::new(AdamConfig {
            lr: 0.1,
            ..AdamConfig::default()
        });
        assert!(quadratic_descent(&mut adam, 500) < 1e-3);
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let mut adam = Adam::new(AdamConfig {
            lr: 0.01,
            ..AdamConfig::default()
        });
        let mut store = ParamStore::default();
        let id = store
            .insert("x", Tensor::full(Shape::new(1, 1, 1, 1), 1.0))
            .unwrap();
        adam.step(
            &mut store,
            &[Some(Tensor::full(Shape::new(1, 1, 1, 1), 42.0))],
        );
        assert!((store.get(id).data()[0] - 0.99).abs() < 1e-9);
    }

    #[test]
    fn sgd_with_momentum_minimizes_a_quadratic() {
        let mut sgd = Sgd::new(SgdConfig {
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 0.0,
        });
        assert!(quadratic_descent(&mut sgd, 300) < 1e-6);
    }
}
