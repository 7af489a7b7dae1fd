//! Finite-difference oracle for every operator, plus the accumulation and
//! determinism contracts of `backward`.

use gradcore::{
    grad_check, Fault, GradCheckConfig, Graph, Mode, Padding, ParamSet, RunningStats, Tensor, Var,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn randn(rng: &mut ChaCha8Rng, dims: &[usize], scale: f64) -> Tensor<f64> {
    let n = dims.iter().product();
    let data = (0..n)
        .map(|_| rng.sample::<f64, _>(StandardNormal) * scale)
        .collect();
    Tensor::new(dims.to_vec(), data).unwrap()
}

fn params(seed: u64, specs: &[(&str, &[usize], f64)]) -> ParamSet<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ParamSet::new();
    for (name, dims, scale) in specs {
        p.insert(*name, randn(&mut rng, dims, *scale)).unwrap();
    }
    p
}

/// Projects a tensor-valued output to a scalar with fixed random weights so
/// every output element contributes a distinct gradient.
fn project(g: &mut Graph<f64>, y: Var, seed: u64) -> Var {
    let dims = g.shape(y).dims().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = randn(&mut rng, &dims, 1.0);
    // sum(y * w) = 0.5 * (mse(y + w) - mse(y) - mse(w)) * n; use mse against -w instead.
    let n = w.numel() as f64;
    let neg_w = Tensor::new(dims, w.data().iter().map(|v| -v).collect()).unwrap();
    let m = g.mse(y, &neg_w).unwrap(); // mean (y + w)^2
    let sq = g.mse(y, &Tensor::zeros(g.shape(y).dims().to_vec()).unwrap()).unwrap(); // mean y^2
    let neg = g.scale(sq, -1.0).unwrap();
    let d = g.add(m, neg).unwrap(); // mean(2 y w + w^2)
    g.scale(d, 0.5 * n).unwrap()
}

fn check(p: &ParamSet<f64>, build: impl FnMut(&mut Graph<f64>, &ParamSet<f64>) -> gradcore::Result<Var>) {
    let report = grad_check(p, &GradCheckConfig::default(), build).unwrap();
    for e in &report.params {
        assert!(e.checked > 0, "{} had no checkable elements", e.name);
    }
    assert!(report.passed, "{report:#?}");
}

#[test]
fn conv2d_valid_and_same() {
    for (padding, stride) in [(Padding::Valid, 1), (Padding::Same, 2)] {
        let p = params(1, &[("x", &[2, 7, 5, 2], 1.0), ("k", &[3, 2, 2, 3], 0.5)]);
        check(&p, |g, p| {
            let x = g.param(p, "x")?;
            let k = g.param(p, "k")?;
            let y = g.conv2d(x, k, stride, 1, padding)?;
            Ok(project(g, y, 11))
        });
    }
}

#[test]
fn conv_transpose2d() {
    let p = params(2, &[("d", &[2, 3, 1, 4], 1.0), ("k", &[3, 1, 2, 4], 0.5)]);
    check(&p, |g, p| {
        let d = g.param(p, "d")?;
        let k = g.param(p, "k")?;
        let y = g.conv_transpose2d(d, k, 2, 1, Padding::Same, 6, 1)?;
        Ok(project(g, y, 12))
    });
    let p = params(3, &[("d", &[2, 4, 1, 3], 1.0), ("k", &[1, 6, 1, 3], 0.5)]);
    check(&p, |g, p| {
        let d = g.param(p, "d")?;
        let k = g.param(p, "k")?;
        let y = g.conv_transpose2d(d, k, 1, 1, Padding::Valid, 4, 6)?;
        Ok(project(g, y, 13))
    });
}

#[test]
fn dense() {
    let p = params(4, &[("x", &[3, 5], 1.0), ("w", &[5, 4], 0.5), ("b", &[4], 0.5)]);
    check(&p, |g, p| {
        let x = g.param(p, "x")?;
        let w = g.param(p, "w")?;
        let b = g.param(p, "b")?;
        let y = g.dense(x, w, b)?;
        Ok(project(g, y, 14))
    });
}

#[test]
fn leaky_relu() {
    let p = params(5, &[("x", &[4, 6], 1.0)]);
    check(&p, |g, p| {
        let x = g.param(p, "x")?;
        let y = g.leaky_relu(x, 0.01)?;
        Ok(project(g, y, 15))
    });
}

#[test]
fn batch_norm_both_modes() {
    for mode in [Mode::Train, Mode::Infer] {
        let p = params(6, &[("x", &[3, 2, 1, 3], 2.0), ("gamma", &[3], 1.0), ("beta", &[3], 1.0)]);
        let mut stats = RunningStats::<f64>::new(3);
        stats.mean = vec![0.3, -0.2, 1.0];
        stats.var = vec![0.5, 2.0, 1.5];
        stats.updates = 1;
        check(&p, |g, p| {
            let x = g.param(p, "x")?;
            let gamma = g.param(p, "gamma")?;
            let beta = g.param(p, "beta")?;
            let y = g.batch_norm(x, gamma, beta, &mut stats, mode, 0.99, 1e-5)?;
            Ok(project(g, y, 16))
        });
    }
}

#[test]
fn add_bias_add_scale_sum_reshape_concat() {
    let p = params(7, &[("x", &[2, 3, 4], 1.0), ("b", &[3, 4], 1.0), ("y", &[2, 12], 1.0)]);
    check(&p, |g, p| {
        let x = g.param(p, "x")?;
        let b = g.param(p, "b")?;
        let y = g.param(p, "y")?;
        let xb = g.add_bias(x, b)?;
        let flat = g.reshape(xb, &[2, 12])?;
        let both = g.add(flat, y)?;
        let scaled = g.scale(both, 1.7)?;
        let cat = g.concat_rows(&[scaled, y])?;
        let proj = project(g, cat, 17);
        let s = g.sum(y)?;
        g.add(proj, s)
    });
}

#[test]
fn mse_kl_reparameterize_cross_entropy() {
    let p = params(8, &[("mu", &[3, 4], 1.0), ("logvar", &[3, 4], 0.5), ("logits", &[3, 5], 1.0)]);
    let mut rng = ChaCha8Rng::seed_from_u64(80);
    let noise = randn(&mut rng, &[3, 4], 1.0);
    let target = randn(&mut rng, &[3, 4], 1.0);
    check(&p, |g, p| {
        let mu = g.param(p, "mu")?;
        let lv = g.param(p, "logvar")?;
        let logits = g.param(p, "logits")?;
        let z = g.reparameterize(mu, lv, &noise)?;
        let rec = g.mse(z, &target)?;
        let kl = g.gaussian_kl(mu, lv)?;
        let ce = g.softmax_cross_entropy(logits, &[0, 4, 2])?;
        let a = g.add(rec, kl)?;
        g.add(a, ce)
    });
}

#[test]
fn gaussian_kl_at_random_point() {
    let p = params(9, &[("mu", &[5, 3], 1.0), ("logvar", &[5, 3], 1.0)]);
    check(&p, |g, p| {
        let mu = g.param(p, "mu")?;
        let lv = g.param(p, "logvar")?;
        g.gaussian_kl(mu, lv)
    });
}

fn composite(g: &mut Graph<f64>, p: &ParamSet<f64>, stats: &mut RunningStats<f64>) -> gradcore::Result<Var> {
    let x = g.param(p, "x")?;
    let k = g.param(p, "k")?;
    let gamma = g.param(p, "gamma")?;
    let beta = g.param(p, "beta")?;
    let h = g.conv2d(x, k, 2, 1, Padding::Same)?; // [2,3,4,3]
    let h = g.batch_norm(h, gamma, beta, stats, Mode::Train, 0.99, 1e-5)?;
    let h = g.leaky_relu(h, 0.01)?;
    let h = g.reshape(h, &[2, 36])?;
    let w = g.param(p, "w")?;
    let b = g.param(p, "b")?;
    let y = g.dense(h, w, b)?;
    g.mse(y, &Tensor::new([2, 2], vec![0.5, -0.5, 1.0, 0.0]).unwrap())
}

fn composite_params() -> ParamSet<f64> {
    params(
        10,
        &[
            ("x", &[2, 5, 4, 1], 1.0),
            ("k", &[3, 4, 1, 3], 0.5),
            ("gamma", &[3], 1.0),
            ("beta", &[3], 0.5),
            ("w", &[36, 2], 0.3),
            ("b", &[2], 0.5),
        ],
    )
}

#[test]
fn composite_graph_passes() {
    let p = composite_params();
    let mut stats = RunningStats::new(3);
    check(&p, |g, p| composite(g, p, &mut stats));
}

#[test]
fn corrupted_backward_rule_is_detected() {
    let p = composite_params();
    let mut stats = RunningStats::new(3);
    let report = grad_check(&p, &GradCheckConfig::default(), |g, p| {
        g.set_fault(Fault::LeakyReluGate);
        composite(g, p, &mut stats)
    })
    .unwrap();
    assert!(!report.passed);
    assert!(report.max_error() > 1e-2);
}

#[test]
fn backward_twice_doubles_gradients_exactly() {
    let p = composite_params().cast::<f32>();
    let mut stats = RunningStats::new(3);
    let mut g = Graph::<f32>::new();
    let loss = {
        let x = g.param(&p, "x").unwrap();
        let k = g.param(&p, "k").unwrap();
        let gamma = g.param(&p, "gamma").unwrap();
        let beta = g.param(&p, "beta").unwrap();
        let h = g.conv2d(x, k, 2, 1, Padding::Same).unwrap();
        let h = g
            .batch_norm(h, gamma, beta, &mut stats, Mode::Train, 0.99, 1e-5)
            .unwrap();
        let h = g.leaky_relu(h, 0.01).unwrap();
        let s = g.sum(h).unwrap();
        let sq = g.mse(h, &Tensor::zeros(g.shape(h).dims().to_vec()).unwrap()).unwrap();
        g.add(s, sq).unwrap()
    };
    g.backward(loss).unwrap();
    let mut once = p.clone();
    g.export_grads(&mut once).unwrap();
    g.zero_grads();
    g.backward(loss).unwrap();
    g.backward(loss).unwrap();
    let mut twice = p.clone();
    g.export_grads(&mut twice).unwrap();
    for name in p.names() {
        let a = once.grad(name).unwrap();
        let b = twice.grad(name).unwrap();
        for (x, y) in a.iter().zip(b) {
            assert_eq!(2.0 * x, *y, "{name}");
        }
    }
}

#[test]
fn backward_is_bitwise_deterministic() {
    let p = composite_params().cast::<f32>();
    let run = || {
        let mut stats = RunningStats::new(3);
        let p64 = p.cast::<f64>();
        let mut g = Graph::new();
        let l = composite(&mut g, &p64, &mut stats).unwrap();
        g.backward(l).unwrap();
        let mut out = p64.clone();
        g.export_grads(&mut out).unwrap();
        out.names()
            .flat_map(|n| out.grad(n).unwrap().to_vec())
            .map(f64::to_bits)
            .collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}

proptest! {
    #[test]
    fn gaussian_kl_is_nonnegative(
        mu in prop::collection::vec(-5.0f64..5.0, 6),
        lv in prop::collection::vec(-6.0f64..4.0, 6),
    ) {
        let mut g = Graph::<f64>::new();
        let m = g.input(Tensor::new([2, 3], mu.clone()).unwrap());
        let l = g.input(Tensor::new([2, 3], lv.clone()).unwrap());
        let kl = g.gaussian_kl(m, l).unwrap();
        let v = g.value(kl).item();
        prop_assert!(v >= 0.0);
        if mu.iter().chain(&lv).any(|x| x.abs() > 1e-3) {
            prop_assert!(v > 0.0);
        }
    }
}
