use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::params::ParamStore;
use super::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self { kind: OptimizerKind::Adam, lr: 2e-4, beta1: 0.5, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam or plain SGD over one parameter store.
#[derive(Debug, Clone)]
pub struct Optimizer<T> {
    cfg: OptimConfig,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
    t: u32,
}

impl<T: Real> Optimizer<T> {
    pub fn new(cfg: OptimConfig, store: &ParamStore<T>) -> Self {
        Self { cfg, m: store.zeros_like(), v: store.zeros_like(), t: 0 }
    }

    pub fn steps(&self) -> u32 {
        self.t
    }

    /// Apply one update; fails without touching `store` if any gradient is non-finite.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Tensor<T>]) -> Result<()> {
        if grads.len() != store.len() {
            return Err(Error::Graph(format!("{} gradients for {} parameters", grads.len(), store.len())));
        }
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::Graph(format!("non-finite gradient for {}", store.name(i))));
        }
        self.t += 1;
        let lr = self.cfg.lr;
        match self.cfg.kind {
            OptimizerKind::Sgd => {
                let lr = T::c(lr);
                for (p, g) in store.tensors_mut().iter_mut().zip(grads) {
                    for (x, &d) in p.data.iter_mut().zip(&g.data) {
                        *x -= lr * d;
                    }
                }
            }
            OptimizerKind::Adam => {
                let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
                let c1 = 1.0 - b1.powi(self.t as i32);
                let c2 = 1.0 - b2.powi(self.t as i32);
                let step = T::c(lr * c2.sqrt() / c1);
                let eps = T::c(self.cfg.eps * c2.sqrt());
                let (b1, b2) = (T::c(b1), T::c(b2));
                let (one_b1, one_b2) = (T::one() - b1, T::one() - b2);
                for ((p, g), (m, v)) in
                    store.tensors_mut().iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut()))
                {
                    for (((x, &d), mi), vi) in
                        p.data.iter_mut().zip(&g.data).zip(m.data.iter_mut()).zip(v.data.iter_mut())
                    {
                        *mi = b1 * *mi + one_b1 * d;
                        *vi = b2 * *vi + one_b2 * d * d;
                        *x -= step * *mi / (vi.sqrt() + eps);
                    }
                }
            }
        }
        if !store.is_finite() {
            return Err(Error::Numerical("parameters became non-finite".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quad_grad(store: &ParamStore<f64>) -> Vec<Tensor<f64>> {
        // f = Σ (x - 3)²
        store
            .tensors()
            .iter()
            .map(|t| Tensor::new(t.shape.clone(), t.data.iter().map(|x| 2.0 * (x - 3.0)).collect()))
            .collect()
    }

    #[test]
    fn adam_and_sgd_descend() {
        for kind in [OptimizerKind::Adam, OptimizerKind::Sgd] {
            let mut s = ParamStore::<f64>::new();
            s.add("x", Tensor::new(vec![2], vec![0.0, 10.0]));
            let mut opt = Optimizer::new(OptimConfig { kind, lr: 0.1, ..OptimConfig::default() }, &s);
            for _ in 0..500 {
                let g = quad_grad(&s);
                opt.step(&mut s, &g).unwrap();
            }
            assert!(s.tensor(0).data.iter().all(|x| (x - 3.0).abs() < 1e-2), "{kind:?}: {:?}", s.tensor(0).data);
        }
    }

    #[test]
    fn first_adam_step_moves_by_lr() {
        let mut s = ParamStore::<f64>::new();
        s.add("x", Tensor::new(vec![1], vec![1.0]));
        let mut opt = Optimizer::new(OptimConfig::default(), &s);
        opt.step(&mut s, &[Tensor::new(vec![1], vec![5.0])]).unwrap();
        assert!((s.tensor(0).data[0] - (1.0 - 2e-4)).abs() < 1e-9);
    }

    #[test]
    fn rejects_nan_gradient() {
        let mut s = ParamStore::<f64>::new();
        s.add("x", Tensor::new(vec![1], vec![1.0]));
        let mut opt = Optimizer::new(OptimConfig::default(), &s);
        assert!(opt.step(&mut s, &[Tensor::new(vec![1], vec![f64::NAN])]).is_err());
        assert_eq!(s.tensor(0).data[0], 1.0);
    }
}
