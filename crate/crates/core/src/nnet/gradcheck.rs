//! Central finite-difference checks of the reverse-mode gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::util::mix_seed;

use super::graph::{Graph, Var};
use super::loss::{gan_losses, generator_objective, kl_divergence, reconstruction_loss, LossWeights};
use super::model::{ImputationModel, ModelHyper, Shell, GENERATOR};
use super::params::ParamStore;
use super::tensor::Tensor;

pub const FD_STEP: f64 = 1e-3;

/// `‖a − n‖ / max(‖a‖, ‖n‖)`, zero when both vanish.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, b)| a - b).collect();
    let scale = norm(analytic).max(norm(numeric));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

#[derive(Debug, Clone)]
pub struct GradCheck {
    pub name: String,
    pub points: usize,
    /// Probes dropped because the difference interval crossed a kink.
    pub skipped: usize,
    pub max_rel_err: f64,
}

type Build = dyn Fn(&mut Graph<f64>, &[Var]) -> Var;

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

/// Values bounded away from zero so piecewise-linear ops stay on one branch.
fn off_zero(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let m = rng.gen_range(0.05..1.5);
            if rng.gen::<bool>() {
                m
            } else {
                -m
            }
        })
        .collect()
}

/// Scalarize `out` with fixed random weights, then compare gradients for every leaf input.
fn check_point(inputs: &[Tensor<f64>], build: &Build, weights_seed: u64) -> Result<f64> {
    let eval = |inputs: &[Tensor<f64>], grads: bool| -> Result<(f64, Vec<Vec<f64>>)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
        let out = build(&mut g, &vars);
        let n = g.value(out).len();
        let mut rng = ChaCha8Rng::seed_from_u64(weights_seed);
        let w = uniform(&mut rng, n, -1.0, 1.0);
        let loss = if n == 1 { out } else { g.dot(out, w) };
        let value = g.value(loss).item();
        if !grads {
            return Ok((value, Vec::new()));
        }
        let gr = g.backward(loss)?;
        let per = vars
            .iter()
            .zip(inputs)
            .map(|(&v, t)| gr.wrt(v).map(|x| x.data.clone()).unwrap_or_else(|| vec![0.0; t.len()]))
            .collect();
        Ok((value, per))
    };
    let (_, analytic) = eval(inputs, true)?;
    let mut a_all = Vec::new();
    let mut n_all = Vec::new();
    for (which, t) in inputs.iter().enumerate() {
        for k in 0..t.len() {
            let mut plus = inputs.to_vec();
            plus[which].data[k] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[which].data[k] -= FD_STEP;
            let fp = eval(&plus, false)?.0;
            let fm = eval(&minus, false)?.0;
            n_all.push((fp - fm) / (2.0 * FD_STEP));
            a_all.push(analytic[which][k]);
        }
    }
    Ok(relative_error(&a_all, &n_all))
}

type Sampler = dyn Fn(&mut ChaCha8Rng) -> Vec<Tensor<f64>>;

struct Primitive {
    name: &'static str,
    sample: Box<Sampler>,
    build: Box<Build>,
}

fn t(shape: &[usize], data: Vec<f64>) -> Tensor<f64> {
    Tensor::new(shape.to_vec(), data)
}

fn primitives() -> Vec<Primitive> {
    let mut v: Vec<Primitive> = Vec::new();
    for (stride, pad, k) in [(1usize, 1usize, 3usize), (2, 1, 3), (1, 0, 1)] {
        let name: &'static str = match (stride, k) {
            (1, 3) => "conv2d_3x3",
            (2, _) => "conv2d_stride2",
            _ => "conv2d_1x1",
        };
        v.push(Primitive {
            name,
            sample: Box::new(move |r| {
                vec![
                    t(&[2, 6, 6], uniform(r, 72, -1.0, 1.0)),
                    t(&[3, 2, k, k], uniform(r, 6 * k * k, -1.0, 1.0)),
                    t(&[3], uniform(r, 3, -1.0, 1.0)),
                ]
            }),
            build: Box::new(move |g, x| g.conv2d(x[0], x[1], x[2], stride, pad)),
        });
    }
    v.push(Primitive {
        name: "leaky_relu",
        sample: Box::new(|r| vec![t(&[2, 3, 3], off_zero(r, 18))]),
        build: Box::new(|g, x| g.leaky_relu(x[0], 0.2)),
    });
    v.push(Primitive {
        name: "sigmoid",
        sample: Box::new(|r| vec![t(&[1, 3, 4], uniform(r, 12, -4.0, 4.0))]),
        build: Box::new(|g, x| g.sigmoid(x[0])),
    });
    v.push(Primitive {
        name: "instance_norm",
        sample: Box::new(|r| vec![t(&[2, 3, 3], uniform(r, 18, -2.0, 2.0))]),
        build: Box::new(|g, x| g.instance_norm(x[0])),
    });
    v.push(Primitive {
        name: "avg_pool2",
        sample: Box::new(|r| vec![t(&[2, 4, 4], uniform(r, 32, -1.0, 1.0))]),
        build: Box::new(|g, x| g.avg_pool2(x[0])),
    });
    v.push(Primitive {
        name: "upsample2",
        sample: Box::new(|r| vec![t(&[2, 2, 3], uniform(r, 12, -1.0, 1.0))]),
        build: Box::new(|g, x| g.upsample2(x[0])),
    });
    v.push(Primitive {
        name: "global_avg_pool",
        sample: Box::new(|r| vec![t(&[3, 3, 3], uniform(r, 27, -1.0, 1.0))]),
        build: Box::new(|g, x| g.global_avg_pool(x[0])),
    });
    v.push(Primitive {
        name: "linear",
        sample: Box::new(|r| {
            vec![
                t(&[4], uniform(r, 4, -1.0, 1.0)),
                t(&[3, 4], uniform(r, 12, -1.0, 1.0)),
                t(&[3], uniform(r, 3, -1.0, 1.0)),
            ]
        }),
        build: Box::new(|g, x| g.linear(x[0], x[1], x[2])),
    });
    v.push(Primitive {
        name: "concat",
        sample: Box::new(|r| vec![t(&[1, 2, 3], uniform(r, 6, -1.0, 1.0)), t(&[2, 2, 3], uniform(r, 12, -1.0, 1.0))]),
        build: Box::new(|g, x| {
            let c = g.concat(&[x[0], x[1]]);
            g.sigmoid(c)
        }),
    });
    v.push(Primitive {
        name: "broadcast_tile",
        sample: Box::new(|r| vec![t(&[3], uniform(r, 3, -1.0, 1.0))]),
        build: Box::new(|g, x| g.tile(x[0], 3, 2)),
    });
    v.push(Primitive {
        name: "clamp",
        sample: Box::new(|r| {
            let d = (0..8)
                .map(|_| {
                    let s: f64 = r.gen_range(-0.9..0.9);
                    if r.gen::<bool>() {
                        s
                    } else {
                        s.signum() * r.gen_range(1.1..2.0)
                    }
                })
                .collect();
            vec![t(&[8], d)]
        }),
        build: Box::new(|g, x| g.clamp(x[0], -1.0, 1.0)),
    });
    v.push(Primitive {
        name: "reparameterize",
        sample: Box::new(|r| vec![t(&[4], uniform(r, 4, -1.0, 1.0)), t(&[4], uniform(r, 4, -2.0, 2.0))]),
        build: Box::new(|g, x| g.reparameterize(x[0], x[1], vec![0.3, -1.1, 0.8, 1.7])),
    });
    v.push(Primitive {
        name: "kl_divergence",
        sample: Box::new(|r| vec![t(&[5], uniform(r, 5, -2.0, 2.0)), t(&[5], uniform(r, 5, -3.0, 3.0))]),
        build: Box::new(|g, x| g.kl(x[0], x[1])),
    });
    v.push(Primitive {
        name: "masked_l1",
        sample: Box::new(|r| {
            // prediction = target + an offset bounded away from zero
            let off = off_zero(r, 12);
            vec![t(&[1, 3, 4], off.iter().enumerate().map(|(i, o)| 0.1 * i as f64 + o).collect())]
        }),
        build: Box::new(|g, x| {
            let target: Vec<f64> = (0..12).map(|i| 0.1 * i as f64).collect();
            let mask: Vec<bool> = (0..12).map(|i| i % 3 != 0).collect();
            g.masked_l1(x[0], target, mask)
        }),
    });
    v.push(Primitive {
        name: "softplus_mean",
        sample: Box::new(|r| vec![t(&[1, 2, 3], uniform(r, 6, -5.0, 5.0))]),
        build: Box::new(|g, x| {
            let a = g.softplus_mean(x[0], 1.0);
            let b = g.softplus_mean(x[0], -1.0);
            g.combine(&[(a, 0.7), (b, 1.3)])
        }),
    });
    v.push(Primitive {
        name: "mask_select",
        sample: Box::new(|r| vec![t(&[1, 2, 3], uniform(r, 6, -1.0, 1.0))]),
        build: Box::new(|g, x| g.mask_select(x[0], &[0.5; 6], vec![true, false, true, true, false, false])),
    });
    v
}

pub fn primitive_names() -> Vec<&'static str> {
    primitives().iter().map(|p| p.name).collect()
}

/// Finite-difference check of one primitive at `points` random inputs.
pub fn check_primitive(name: &str, points: usize, seed: u64) -> Result<GradCheck> {
    let all = primitives();
    let p = all
        .iter()
        .find(|p| p.name == name)
        .ok_or_else(|| crate::error::Error::Config(format!("unknown primitive '{name}'")))?;
    let mut worst = 0.0f64;
    for k in 0..points {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, k as u64]));
        let inputs = (p.sample)(&mut rng);
        let err = check_point(&inputs, &*p.build, mix_seed(&[seed, k as u64, 1]))?;
        worst = worst.max(err);
    }
    Ok(GradCheck { name: name.to_string(), points, skipped: 0, max_rel_err: worst })
}

/// Generator objective of a two-level toy network, differentiated against every
/// generator and discriminator parameter.
pub fn check_toy_network(seed: u64) -> Result<GradCheck> {
    let hyper = ModelHyper {
        z_dim: 2,
        x_plus_channels: 2,
        encoder_channels: vec![2, 3],
        base_channels: 2,
        depth: 2,
        disc_channels: vec![2, 2, 2],
        ..ModelHyper::desk()
    };
    let model = ImputationModel::<f64>::new(hyper.clone(), Shell::Weighted, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, 7]));
    let n = 16;
    let xp = t(&[2, n, n], uniform(&mut rng, 2 * n * n, 0.0, 1.0));
    let cond = t(&[hyper.condition_channels(), n, n], uniform(&mut rng, hyper.condition_channels() * n * n, 0.0, 1.0));
    let truth: Vec<f64> = uniform(&mut rng, n * n, 0.0, 1.0);
    let missing: Vec<bool> = (0..n * n).map(|p| p / n < 6).collect();
    let eps = vec![0.4, -0.6];
    let w = LossWeights::from(&hyper);

    let objective = |m: &ImputationModel<f64>, grads: bool| -> Result<(f64, u64, Option<super::graph::Grads<f64>>)> {
        let mut g = Graph::new();
        let x = g.constant(xp.clone());
        let c = g.constant(cond.clone());
        let (code, out) = m.generate(&mut g, x, c, Some(eps.clone()))?;
        let rec = reconstruction_loss(&mut g, out, &truth, &missing);
        let kl = kl_divergence(&mut g, &code);
        let fake = g.mask_select(out, &truth, missing.clone());
        let real = g.constant(t(&[1, n, n], truth.clone()));
        let d_real = m.discriminate(&mut g, real, c);
        let d_fake = m.discriminate(&mut g, fake, c);
        let (loss_d, loss_g) = gan_losses(&mut g, d_real, d_fake);
        let obj = generator_objective(&mut g, rec, kl, Some(loss_g), &w);
        // one scalar touching both networks
        let total = g.combine(&[(obj, 1.0), (loss_d, 0.5)]);
        let v = g.value(total).item();
        let sig = g.branch_signature();
        Ok((v, sig, if grads { Some(g.backward(total)?) } else { None }))
    };

    let (_, base_sig, grads) = objective(&model, true)?;
    let grads = grads.expect("requested");
    let mut analytic_gen = model.generator.zeros_like();
    let mut analytic_disc = model.discriminator.zeros_like();
    grads.accumulate_into(GENERATOR, &mut analytic_gen);
    grads.accumulate_into(super::model::DISCRIMINATOR, &mut analytic_disc);

    let mut a_all = Vec::new();
    let mut n_all = Vec::new();
    let mut skipped = 0;
    let mut probe = |which: usize, analytic: &[Tensor<f64>]| -> Result<()> {
        let store: &ParamStore<f64> = if which == 0 { &model.generator } else { &model.discriminator };
        for (ti, tensor) in store.tensors().iter().enumerate() {
            for k in 0..tensor.len() {
                let mut plus = model.clone();
                let mut minus = model.clone();
                let (sp, sm) = if which == 0 {
                    (&mut plus.generator, &mut minus.generator)
                } else {
                    (&mut plus.discriminator, &mut minus.discriminator)
                };
                sp.tensor_mut(ti).data[k] += FD_STEP;
                sm.tensor_mut(ti).data[k] -= FD_STEP;
                let (fp, sig_p, _) = objective(&plus, false)?;
                let (fm, sig_m, _) = objective(&minus, false)?;
                if sig_p != base_sig || sig_m != base_sig {
                    // the difference quotient straddles a kink
                    skipped += 1;
                    continue;
                }
                n_all.push((fp - fm) / (2.0 * FD_STEP));
                a_all.push(analytic[ti].data[k]);
            }
        }
        Ok(())
    };
    probe(0, &analytic_gen)?;
    probe(1, &analytic_disc)?;
    Ok(GradCheck {
        name: "toy_network".into(),
        points: a_all.len(),
        skipped,
        max_rel_err: relative_error(&a_all, &n_all),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_primitive_within_tolerance() {
        for name in primitive_names() {
            let r = check_primitive(name, 5, 11).unwrap();
            assert!(r.max_rel_err < 1e-4, "{name}: {}", r.max_rel_err);
        }
    }

    #[test]
    fn toy_network_matches_finite_differences() {
        let r = check_toy_network(3).unwrap();
        eprintln!("toy network: {} probes, {} skipped, max rel err {:e}", r.points, r.skipped, r.max_rel_err);
        assert!(r.points > 100);
        assert!(r.skipped * 20 < r.points, "{} of {} probes straddled kinks", r.skipped, r.points);
        assert!(r.max_rel_err < 1e-4, "{}", r.max_rel_err);
    }

    #[test]
    fn tile_adjoint_is_spatial_sum_exactly() {
        let mut g = Graph::<f64>::new();
        let z = g.leaf(t(&[2], vec![0.3, -0.4]));
        let tiled = g.tile(z, 2, 3);
        let up: Vec<f64> = (0..12).map(|i| i as f64 * 0.25 - 1.0).collect();
        let loss = g.dot(tiled, up.clone());
        let gr = g.backward(loss).unwrap();
        let expect = [up[..6].iter().sum::<f64>(), up[6..].iter().sum::<f64>()];
        assert_eq!(gr.wrt(z).unwrap().data, expect);
    }

    #[test]
    fn constant_loss_gives_zero_gradients() {
        let model = ImputationModel::<f64>::new(
            ModelHyper {
                z_dim: 2,
                x_plus_channels: 1,
                encoder_channels: vec![2],
                base_channels: 2,
                depth: 1,
                disc_channels: vec![2],
                ..ModelHyper::desk()
            },
            Shell::B0,
            1,
        )
        .unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 4, 4]));
        let c = g.constant(Tensor::zeros(&[6, 4, 4]));
        let (_, out) = model.generate(&mut g, x, c, None).unwrap();
        let zero = g.dot(out, vec![0.0; 16]);
        let gr = g.backward(zero).unwrap();
        assert!(gr.params().iter().all(|(_, t)| t.data.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn non_scalar_and_nan_losses_rejected() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t(&[2], vec![1.0, 2.0]));
        assert!(g.backward(x).is_err());
        let y = g.leaf(t(&[1], vec![f64::NAN]));
        assert!(g.backward(y).is_err());
    }
}
