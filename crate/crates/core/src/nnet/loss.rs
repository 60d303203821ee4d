use serde::{Deserialize, Serialize};

use super::graph::{Graph, Var};
use super::model::{LatentCode, ModelHyper};
use super::tensor::Real;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub rec: f64,
    pub kl: f64,
    pub gan: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { rec: 100.0, kl: 1.0, gan: 1.0 }
    }
}

impl From<&ModelHyper> for LossWeights {
    fn from(h: &ModelHyper) -> Self {
        Self { rec: h.lambda_rec, kl: h.lambda_kl, gan: h.lambda_gan }
    }
}

/// Scalar values of the loss terms for one step.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub rec: f64,
    pub kl: f64,
    pub gen: f64,
    pub disc: f64,
}

/// Generator objective `λ_rec·rec + λ_kl·kl + λ_gan·loss_G`.
pub fn total_loss(parts: &LossParts, w: &LossWeights) -> f64 {
    w.rec * parts.rec + w.kl * parts.kl + w.gan * parts.gen
}

pub fn kl_divergence<T: Real>(g: &mut Graph<T>, code: &LatentCode) -> Var {
    g.kl(code.mu, code.log_var)
}

/// Plain-value KL against the standard normal prior.
pub fn kl_value(mu: &[f64], log_var: &[f64]) -> f64 {
    mu.iter().zip(log_var).map(|(m, lv)| 0.5 * (m * m + lv.exp() - 1.0 - lv)).sum()
}

/// Mean absolute error over the missing pixels of a `[1, H, W]` prediction.
pub fn reconstruction_loss<T: Real>(g: &mut Graph<T>, pred: Var, truth: &[T], missing: &[bool]) -> Var {
    g.masked_l1(pred, truth.to_vec(), missing.to_vec())
}

/// `(loss_D, loss_G)` from real and fake logit maps.
pub fn gan_losses<T: Real>(g: &mut Graph<T>, d_real: Var, d_fake: Var) -> (Var, Var) {
    let real = g.softplus_mean(d_real, -1.0);
    let fake = g.softplus_mean(d_fake, 1.0);
    let loss_d = g.combine(&[(real, 1.0), (fake, 1.0)]);
    let loss_g = g.softplus_mean(d_fake, -1.0);
    (loss_d, loss_g)
}

pub fn generator_objective<T: Real>(g: &mut Graph<T>, rec: Var, kl: Var, loss_g: Option<Var>, w: &LossWeights) -> Var {
    let mut terms = vec![(rec, w.rec), (kl, w.kl)];
    if let Some(lg) = loss_g {
        terms.push((lg, w.gan));
    }
    g.combine(&terms)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nnet::tensor::Tensor;

    #[test]
    fn kl_closed_form_cases() {
        assert_eq!(kl_value(&[0.0, 0.0], &[0.0, 0.0]), 0.0);
        assert!((kl_value(&[1.0, 0.0], &[0.0, 0.0]) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn kl_grad_wrt_mu_is_mu() {
        let mut g = Graph::<f64>::new();
        let mu = g.leaf(Tensor::new(vec![3], vec![0.7, -1.3, 2.0]));
        let lv = g.leaf(Tensor::zeros(&[3]));
        let z = g.constant(Tensor::zeros(&[3]));
        let code = LatentCode { mu, log_var: lv, z, clamped: 0 };
        let kl = kl_divergence(&mut g, &code);
        let grads = g.backward(kl).unwrap();
        assert_eq!(grads.wrt(mu).unwrap().data, vec![0.7, -1.3, 2.0]);
        assert!(grads.wrt(lv).unwrap().data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn reconstruction_cases() {
        let truth = vec![0.2, 0.4, 0.6, 0.8];
        let missing = vec![false, true, true, false];
        let mut g = Graph::<f64>::new();
        let exact = g.leaf(Tensor::new(vec![1, 2, 2], truth.clone()));
        let l = reconstruction_loss(&mut g, exact, &truth, &missing);
        assert_eq!(g.value(l).item(), 0.0);

        let off: Vec<f64> = truth.iter().zip(&missing).map(|(&t, &m)| if m { t + 0.1 } else { t }).collect();
        let p = g.leaf(Tensor::new(vec![1, 2, 2], off));
        let l = reconstruction_loss(&mut g, p, &truth, &missing);
        assert!((g.value(l).item() - 0.1).abs() < 1e-12);

        let acq: Vec<f64> = truth.iter().zip(&missing).map(|(&t, &m)| if m { t } else { t + 5.0 }).collect();
        let p = g.leaf(Tensor::new(vec![1, 2, 2], acq));
        let l = reconstruction_loss(&mut g, p, &truth, &missing);
        assert_eq!(g.value(l).item(), 0.0);
        let grads = g.backward(l).unwrap();
        let gp = &grads.wrt(p).unwrap().data;
        assert_eq!((gp[0], gp[3]), (0.0, 0.0));

        let none = reconstruction_loss(&mut g, p, &truth, &[false; 4]);
        assert_eq!(g.value(none).item(), 0.0);
    }

    #[test]
    fn gan_losses_at_zero_logits() {
        let mut g = Graph::<f64>::new();
        let r = g.leaf(Tensor::zeros(&[1, 2, 2]));
        let f = g.leaf(Tensor::zeros(&[1, 2, 2]));
        let (ld, lg) = gan_losses(&mut g, r, f);
        assert!((g.value(ld).item() - 2.0 * 2f64.ln()).abs() < 1e-12);
        assert!((g.value(lg).item() - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn gan_losses_limits_and_monotonicity() {
        let mut g = Graph::<f64>::new();
        let r = g.constant(Tensor::new(vec![1, 1, 2], vec![60.0, 80.0]));
        let f = g.constant(Tensor::new(vec![1, 1, 2], vec![-60.0, -80.0]));
        let (ld, _) = gan_losses(&mut g, r, f);
        assert!(g.value(ld).item() < 1e-20);
        let mut prev = f64::INFINITY;
        for k in -10..=10 {
            let f = g.constant(Tensor::new(vec![1, 1, 1], vec![k as f64 * 0.5]));
            let (_, lg) = gan_losses(&mut g, r, f);
            let v = g.value(lg).item();
            assert!(v < prev);
            prev = v;
        }
    }

    #[test]
    fn total_loss_linearity() {
        assert_eq!(total_loss(&LossParts::default(), &LossWeights::default()), 0.0);
        let p = LossParts { rec: 0.1, kl: 2.0, gen: 0.7, disc: 1.0 };
        let w = LossWeights { gan: 0.0, ..LossWeights::default() };
        assert!((total_loss(&p, &w) - 12.0).abs() < 1e-12);
    }

    #[test]
    fn doubling_rec_weight_doubles_its_gradient() {
        let grad_for = |w_rec: f64| {
            let mut g = Graph::<f64>::new();
            let p = g.leaf(Tensor::new(vec![1, 1, 3], vec![0.1, 0.5, 0.9]));
            let rec = reconstruction_loss(&mut g, p, &[0.3, 0.3, 0.3], &[true, true, false]);
            let zero = g.constant(Tensor::scalar(0.0));
            let obj = generator_objective(&mut g, rec, zero, None, &LossWeights { rec: w_rec, kl: 1.0, gan: 1.0 });
            g.backward(obj).unwrap().wrt(p).unwrap().data.clone()
        };
        let a = grad_for(100.0);
        let b = grad_for(200.0);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(2.0 * x, *y);
        }
    }
}
