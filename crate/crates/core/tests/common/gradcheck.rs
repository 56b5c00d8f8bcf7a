//! Analytic gradients against central finite differences.
//!
//! Each check draws a random upstream gradient `r`, forms the scalar
//! `sum(r * f(x))` in f64 and compares `d/dx` with `(L(x + e) - L(x - e)) / 2e`
//! using the norm-wise relative error.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sembg::arch::{transform, ArchSpec, BranchPlan};
use sembg::model::Model;
use sembg::ops::*;
use sembg::trainer::{total_loss, TrainConfig};
use sembg::Tensor;

const EPS: f32 = 1e-2;
const TOL: f64 = 1e-3;
pub const INSTANCES: u64 = 24;
/// Smaller step for the composed network, whose normalisation over tiny
/// batches is strongly curved.
const MODEL_EPS: f32 = 2e-3;

fn rel_err(a: &[f32], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(&x, &y)| (x as f64 - y).powi(2)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

fn dot(r: &Tensor, y: &Tensor) -> f64 {
    r.data().iter().zip(y.data()).map(|(&a, &b)| a as f64 * b as f64).sum()
}

/// Central differences of `loss` w.r.t. every entry of `x`.
fn numeric(x: &mut Tensor, mut loss: impl FnMut(&Tensor) -> f64) -> Vec<f64> {
    (0..x.numel())
        .map(|i| {
            let orig = x.data()[i];
            x.data_mut()[i] = orig + EPS;
            let up = loss(x);
            x.data_mut()[i] = orig - EPS;
            let down = loss(x);
            x.data_mut()[i] = orig;
            (up - down) / (2.0 * EPS as f64)
        })
        .collect()
}

fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(shape, 1.0, rng)
}

thread_local! {
    static WORST: std::cell::Cell<f64> = const { std::cell::Cell::new(0.0) };
}

/// Largest relative error seen on this thread since the last call.
pub fn take_worst_error() -> f64 {
    WORST.with(|w| w.replace(0.0))
}

fn assert_close(op: &str, seed: u64, what: &str, analytic: &[f32], numeric: &[f64]) {
    let e = rel_err(analytic, numeric);
    WORST.with(|w| w.set(w.get().max(e)));
    assert!(e <= TOL, "{op} seed {seed}: d/d{what} relative error {e:.3e}");
}

pub fn conv2d_gradients() {
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let groups = rng.random_range(1..=3);
        let c_in = groups * rng.random_range(1..=3);
        let c_out = groups * rng.random_range(1..=3);
        let k = if rng.random_bool(0.5) { 3 } else { 1 };
        let stride = rng.random_range(1..=2);
        let pad = if k == 3 { rng.random_range(0..=1) } else { 0 };
        let n = rng.random_range(1..=3);
        let (h, w) = (rng.random_range(4..=7), rng.random_range(4..=7));
        let mut conv = ConvParams::init(c_in, c_out, k, stride, pad, groups, true, &mut rng).unwrap();
        conv.bias.as_mut().unwrap().data_mut().iter_mut().for_each(|b| *b = rng.random_range(-1.0..1.0));
        let mut x = randn(&[n, c_in, h, w], &mut rng);
        let (y, cache) = conv.forward(&x).unwrap();
        let r = randn(y.shape(), &mut rng);
        let dx = conv.backward(&cache, &r).unwrap();

        let p = conv.clone();
        let num_x = numeric(&mut x, |x| dot(&r, &p.infer(x).unwrap()));
        assert_close("conv2d", seed, "x", dx.data(), &num_x);

        let mut probe = conv.clone();
        let num_w = numeric(&mut conv.weight.clone(), |w| {
            probe.weight.data_mut().copy_from_slice(w.data());
            dot(&r, &probe.infer(&x).unwrap())
        });
        assert_close("conv2d", seed, "w", conv.weight.grad().unwrap(), &num_w);

        let mut probe = conv.clone();
        let num_b = numeric(&mut conv.bias.clone().unwrap(), |b| {
            probe.bias.as_mut().unwrap().data_mut().copy_from_slice(b.data());
            dot(&r, &probe.infer(&x).unwrap())
        });
        assert_close("conv2d", seed, "b", conv.bias.as_ref().unwrap().grad().unwrap(), &num_b);
    }
}

pub fn batchnorm_gradients() {
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let c = rng.random_range(1..=4);
        let n = rng.random_range(2..=4);
        let (h, w) = (rng.random_range(2..=4), rng.random_range(2..=4));
        let mut bn = BatchNormParams::new(c);
        bn.gamma.data_mut().iter_mut().for_each(|g| *g = rng.random_range(0.5..1.5));
        bn.beta.data_mut().iter_mut().for_each(|b| *b = rng.random_range(-0.5..0.5));
        let mut x = randn(&[n, c, h, w], &mut rng);
        let (y, cache) = bn.forward(&x).unwrap();
        let r = randn(y.shape(), &mut rng);
        let dx = bn.backward(&cache, &r).unwrap();

        let mut probe = bn.clone();
        let num_x = numeric(&mut x, |x| dot(&r, &probe.forward(x).unwrap().0));
        assert_close("batchnorm train", seed, "x", dx.data(), &num_x);

        let mut probe = bn.clone();
        let num_g = numeric(&mut bn.gamma.clone(), |g| {
            probe.gamma.data_mut().copy_from_slice(g.data());
            dot(&r, &probe.forward(&x).unwrap().0)
        });
        assert_close("batchnorm train", seed, "gamma", bn.gamma.grad().unwrap(), &num_g);

        let mut probe = bn.clone();
        let num_b = numeric(&mut bn.beta.clone(), |b| {
            probe.beta.data_mut().copy_from_slice(b.data());
            dot(&r, &probe.forward(&x).unwrap().0)
        });
        assert_close("batchnorm train", seed, "beta", bn.beta.grad().unwrap(), &num_b);

        // Eval mode: affine in x with the running statistics.
        let mut ev = bn.clone();
        ev.mode = Mode::Eval;
        ev.running_var.data_mut().iter_mut().for_each(|v| *v = rng.random_range(0.5..2.0));
        let (y, cache) = ev.forward(&x).unwrap();
        let dx = ev.backward(&cache, &r).unwrap();
        assert_eq!(y.shape(), r.shape());
        let num_x = numeric(&mut x, |x| dot(&r, &ev.infer(x).unwrap()));
        assert_close("batchnorm eval", seed, "x", dx.data(), &num_x);
    }
}

pub fn relu_pool_add_gradients() {
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
        let shape = [rng.random_range(1..=3), rng.random_range(1..=4), rng.random_range(1..=4), rng.random_range(1..=4)];
        // Keep inputs a few eps away from the kink.
        let mut x = Tensor::from_fn(&shape, |_| {
            let v: f32 = rng.random_range(0.1..2.0);
            if rng.random_bool(0.5) { v } else { -v }
        });
        let r = randn(&shape, &mut rng);
        let dx = relu_backward(&x, &r).unwrap();
        let num = numeric(&mut x, |x| dot(&r, &relu(x)));
        assert_close("relu", seed, "x", dx.data(), &num);

        let rp = randn(&shape[..2], &mut rng);
        let dx = global_avg_pool_backward(&shape, &rp).unwrap();
        let num = numeric(&mut x, |x| dot(&rp, &global_avg_pool(x).unwrap()));
        assert_close("global_avg_pool", seed, "x", dx.data(), &num);

        let other = randn(&shape, &mut rng);
        let num = numeric(&mut x, |x| dot(&r, &residual_add(x, &other).unwrap()));
        let analytic: Vec<f32> = r.data().to_vec();
        assert_close("residual_add", seed, "x", &analytic, &num);
    }
}

pub fn linear_gradients() {
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
        let (n, d, m) = (rng.random_range(1..=4), rng.random_range(1..=6), rng.random_range(2..=5));
        let mut lin = Linear::init(d, m, &mut rng);
        lin.bias.data_mut().iter_mut().for_each(|b| *b = rng.random_range(-1.0..1.0));
        let mut x = randn(&[n, d], &mut rng);
        let r = randn(&[n, m], &mut rng);
        let dx = lin.backward(&x, &r).unwrap();
        let p = lin.clone();
        let num = numeric(&mut x, |x| dot(&r, &p.forward(x).unwrap()));
        assert_close("linear", seed, "x", dx.data(), &num);

        let mut probe = lin.clone();
        let num = numeric(&mut lin.weight.clone(), |w| {
            probe.weight.data_mut().copy_from_slice(w.data());
            dot(&r, &probe.forward(&x).unwrap())
        });
        assert_close("linear", seed, "w", lin.weight.grad().unwrap(), &num);
        let mut probe = lin.clone();
        let num = numeric(&mut lin.bias.clone(), |b| {
            probe.bias.data_mut().copy_from_slice(b.data());
            dot(&r, &probe.forward(&x).unwrap())
        });
        assert_close("linear", seed, "b", lin.bias.grad().unwrap(), &num);
    }
}

fn random_logits(n: usize, m: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(&[n, m], 1.5, rng)
}

pub fn softmax_cross_entropy_gradients() {
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(400 + seed);
        let (n, m) = (rng.random_range(1..=4), rng.random_range(2..=6));
        let mut z = random_logits(n, m, &mut rng);
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..m)).collect();
        let y = one_hot(&labels, m).unwrap();
        let g = softmax_cross_entropy_grad(&z, &y).unwrap();
        let num = numeric(&mut z, |z| {
            let p = softmax_temp(z, 1.0).unwrap();
            cross_entropy(&p, &y).unwrap().iter().map(|&v| v as f64).sum()
        });
        assert_close("softmax_cross_entropy", seed, "z", g.data(), &num);
    }
}

pub fn kd_loss_gradients() {
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(500 + seed);
        let (n, m) = (rng.random_range(1..=4), rng.random_range(2..=6));
        let t = rng.random_range(0.5..4.0);
        let mut zs = random_logits(n, m, &mut rng);
        let mut zt = random_logits(n, m, &mut rng);
        let out = kd_loss(&zs, &zt, t, false).unwrap();
        let num_s = numeric(&mut zs, |z| kd_loss(z, &zt, t, true).unwrap().loss as f64);
        assert_close("kd_loss", seed, "student", out.grad_student.data(), &num_s);
        let num_t = numeric(&mut zt, |z| kd_loss(&zs, z, t, true).unwrap().loss as f64);
        assert_close("kd_loss", seed, "teacher", out.grad_teacher.unwrap().data(), &num_t);
    }
}

fn loss_cfg(rng: &mut ChaCha8Rng, detach: bool) -> TrainConfig {
    TrainConfig {
        temperature: rng.random_range(0.5..4.0),
        alpha: rng.random_range(0.0..2.0),
        detach_teacher: detach,
        ..TrainConfig::default()
    }
}

pub fn total_loss_gradients_full() {
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(600 + seed);
        let (b, m, nb) = (rng.random_range(1..=4), rng.random_range(2..=5), rng.random_range(1..=4));
        let cfg = loss_cfg(&mut rng, false);
        let mut z: Vec<Tensor> = (0..nb).map(|_| random_logits(b, m, &mut rng)).collect();
        let labels: Vec<usize> = (0..b).map(|_| rng.random_range(0..m)).collect();
        let out = total_loss(&z, &labels, &cfg).unwrap();
        for i in 0..nb {
            let mut zi = z[i].clone();
            let num = numeric(&mut zi, |v| {
                z[i] = v.clone();
                total_loss(&z, &labels, &cfg).unwrap().loss
            });
            z[i] = zi;
            assert_close("total_loss", seed, "z_i", out.grads[i].data(), &num);
        }
    }
}

pub fn total_loss_gradients_detached_teacher() {
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(700 + seed);
        let (b, m, nb) = (rng.random_range(1..=4), rng.random_range(2..=5), rng.random_range(2..=4));
        let cfg = loss_cfg(&mut rng, true);
        let z: Vec<Tensor> = (0..nb).map(|_| random_logits(b, m, &mut rng)).collect();
        let labels: Vec<usize> = (0..b).map(|_| rng.random_range(0..m)).collect();
        let y = one_hot(&labels, m).unwrap();
        let z_e = sembg::trainer::ensemble_logits(&z).unwrap();
        let out = total_loss(&z, &labels, &cfg).unwrap();
        for i in 0..nb {
            // Teacher held at its unperturbed value.
            let num = numeric(&mut z[i].clone(), |v| {
                let ce: f64 = cross_entropy(&softmax_temp(v, 1.0).unwrap(), &y)
                    .unwrap()
                    .iter()
                    .map(|&c| c as f64)
                    .sum::<f64>()
                    / b as f64;
                ce + cfg.alpha as f64 * kd_loss(v, &z_e, cfg.temperature, true).unwrap().loss as f64
            });
            assert_close("total_loss detached", seed, "z_i", out.grads[i].data(), &num);
        }
    }
}

pub fn model_parameter_gradients() {
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(800 + seed);
        let groups = if seed % 2 == 0 { vec![1, 2] } else { vec![2, 1, 2] };
        let arch = ArchSpec::toy(2, vec![4, 8], vec![1, 1], 3).unwrap();
        let mb = transform(&arch, &BranchPlan::with_groups(&arch, 1, groups)).unwrap();
        let mut model = Model::new(&mb, seed).unwrap();
        let x = randn(&[3, 2, 5, 5], &mut rng);
        let (z, cache) = model.forward(&x).unwrap();
        let r: Vec<Tensor> = z.iter().map(|t| randn(t.shape(), &mut rng)).collect();
        model.zero_grad();
        model.backward(&cache, &r).unwrap();
        let loss = |m: &mut Model| -> f64 {
            let (z, _) = m.forward(&x).unwrap();
            z.iter().zip(&r).map(|(zi, ri)| dot(ri, zi)).sum()
        };

        // A random sample of coordinates across every parameter tensor. Inside
        // the composed network a perturbation can move some pre-activation
        // across the ReLU kink, where no finite difference is meaningful. Such
        // coordinates show up as forward and backward one-sided differences
        // that disagree, or as central differences that depend on the step,
        // and are left out.
        let base = loss(&mut model);
        let fd = |m: &mut Model, pi: usize, ci: usize, eps: f32| -> (f64, f64) {
            let orig = m.params_mut()[pi].data()[ci];
            m.params_mut()[pi].data_mut()[ci] = orig + eps;
            let up = loss(m);
            m.params_mut()[pi].data_mut()[ci] = orig - eps;
            let down = loss(m);
            m.params_mut()[pi].data_mut()[ci] = orig;
            ((up - base) / eps as f64, (base - down) / eps as f64)
        };
        let n_params = model.params_mut().len();
        let (mut analytic, mut num, mut sampled) = (Vec::new(), Vec::new(), 0);
        for pi in 0..n_params {
            let numel = model.params_mut()[pi].numel();
            for _ in 0..3 {
                let ci = rng.random_range(0..numel);
                sampled += 1;
                let (cf, cb) = fd(&mut model, pi, ci, MODEL_EPS);
                let (ff, fb) = fd(&mut model, pi, ci, MODEL_EPS / 2.0);
                let (coarse, fine) = ((cf + cb) / 2.0, (ff + fb) / 2.0);
                let tol = 2e-3 * (1.0 + fine.abs());
                if (coarse - fine).abs() > tol || (ff - fb).abs() > tol {
                    continue;
                }
                analytic.push(model.params_mut()[pi].grad().unwrap()[ci]);
                num.push(fine);
            }
        }
        assert!(num.len() * 10 >= sampled * 6, "model seed {seed}: only {}/{sampled} smooth coordinates", num.len());
        let e = rel_err(&analytic, &num);
        assert!(e <= TOL, "model seed {seed}: parameter gradient relative error {e:.3e}");
    }
}

/// Every check, by name.
pub const ALL: &[(&str, fn())] = &[
    ("conv2d_gradients", conv2d_gradients),
    ("batchnorm_gradients", batchnorm_gradients),
    ("relu_pool_add_gradients", relu_pool_add_gradients),
    ("linear_gradients", linear_gradients),
    ("softmax_cross_entropy_gradients", softmax_cross_entropy_gradients),
    ("kd_loss_gradients", kd_loss_gradients),
    ("total_loss_gradients_full", total_loss_gradients_full),
    ("total_loss_gradients_detached_teacher", total_loss_gradients_detached_teacher),
    ("model_parameter_gradients", model_parameter_gradients),
];
