//! Finite-difference checks over every operator and the three full objectives.

use gradcore::{
    grad_check, BnStates, GradCheckConfig, GradCheckReport, Graph, Mode, Padding, ParamSet, RunningStats, Tensor, Var,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::encoders::{bn_layers, param_shapes, ArchConfig, LossConfig, Net, ObjectiveRegistry, ReconScale};
use crate::error::Result;
use crate::frontend::N_MELS;
use crate::segmenter::WindowConfig;

#[derive(Clone, Debug, Serialize)]
pub struct SuiteEntry {
    pub name: String,
    pub passed: bool,
    pub max_error: f64,
    pub checked: usize,
    pub skipped: usize,
}

impl SuiteEntry {
    fn from_report(name: &str, r: &GradCheckReport) -> Self {
        SuiteEntry {
            name: name.into(),
            passed: r.passed && r.params.iter().all(|p| p.checked > 0),
            max_error: r.max_error(),
            checked: r.params.iter().map(|p| p.checked).sum(),
            skipped: r.params.iter().map(|p| p.skipped).sum(),
        }
    }
}

fn randn(rng: &mut ChaCha8Rng, dims: &[usize], scale: f64) -> Tensor<f64> {
    let n = dims.iter().product();
    let data = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal) * scale).collect();
    Tensor::new(dims.to_vec(), data).expect("dims match data")
}

fn params(rng: &mut ChaCha8Rng, specs: &[(&str, &[usize], f64)]) -> ParamSet<f64> {
    let mut p = ParamSet::new();
    for (name, dims, scale) in specs {
        p.insert(*name, randn(rng, dims, *scale)).expect("unique names");
    }
    p
}

type Build<'a> = dyn FnMut(&mut Graph<f64>, &ParamSet<f64>) -> gradcore::Result<Var> + 'a;

/// `sum(y * w)` for fixed random `w`, built from the available operators.
fn project(g: &mut Graph<f64>, y: Var, seed: u64) -> gradcore::Result<Var> {
    let dims = g.shape(y).dims().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = randn(&mut rng, &dims, 1.0);
    let n = w.numel() as f64;
    let neg_w = Tensor::new(dims.clone(), w.data().iter().map(|v| -v).collect())?;
    let plus = g.mse(y, &neg_w)?;
    let sq = g.mse(y, &Tensor::zeros(dims)?)?;
    let minus = g.scale(sq, -1.0)?;
    let d = g.add(plus, minus)?;
    g.scale(d, 0.5 * n)
}

/// One check per operator family; every operator appears at least once.
pub fn operator_checks(cfg: &GradCheckConfig) -> Result<Vec<SuiteEntry>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out = Vec::new();
    let mut run = |name: &str,
                   p: &ParamSet<f64>,
                   build: &mut Build|
     -> Result<()> {
        let r = grad_check(p, cfg, build)?;
        out.push(SuiteEntry::from_report(name, &r));
        Ok(())
    };

    for (label, padding, stride) in [("conv2d/valid", Padding::Valid, 1), ("conv2d/same-s2", Padding::Same, 2)] {
        let p = params(&mut rng, &[("x", &[2, 7, 5, 2], 1.0), ("k", &[3, 2, 2, 3], 0.5)]);
        run(label, &p, &mut |g, p| {
            let x = g.param(p, "x")?;
            let k = g.param(p, "k")?;
            let y = g.conv2d(x, k, stride, 1, padding)?;
            project(g, y, 1)
        })?;
    }
    let p = params(&mut rng, &[("d", &[2, 3, 1, 4], 1.0), ("k", &[3, 1, 2, 4], 0.5)]);
    run("conv_transpose2d", &p, &mut |g, p| {
        let d = g.param(p, "d")?;
        let k = g.param(p, "k")?;
        let y = g.conv_transpose2d(d, k, 2, 1, Padding::Same, 6, 1)?;
        project(g, y, 2)
    })?;
    let p = params(&mut rng, &[("x", &[3, 5], 1.0), ("w", &[5, 4], 0.5), ("b", &[4], 0.5)]);
    run("dense", &p, &mut |g, p| {
        let x = g.param(p, "x")?;
        let w = g.param(p, "w")?;
        let b = g.param(p, "b")?;
        let y = g.dense(x, w, b)?;
        project(g, y, 3)
    })?;
    let p = params(&mut rng, &[("x", &[4, 6], 1.0)]);
    run("leaky_relu", &p, &mut |g, p| {
        let x = g.param(p, "x")?;
        let y = g.leaky_relu(x, 0.01)?;
        project(g, y, 4)
    })?;
    for (label, mode) in [("batch_norm/train", Mode::Train), ("batch_norm/infer", Mode::Infer)] {
        let p = params(&mut rng, &[("x", &[3, 2, 1, 3], 2.0), ("gamma", &[3], 1.0), ("beta", &[3], 1.0)]);
        let mut stats = RunningStats::<f64>::new(3);
        stats.mean = vec![0.3, -0.2, 1.0];
        stats.var = vec![0.5, 2.0, 1.5];
        stats.updates = 1;
        run(label, &p, &mut |g, p| {
            let x = g.param(p, "x")?;
            let gamma = g.param(p, "gamma")?;
            let beta = g.param(p, "beta")?;
            let y = g.batch_norm(x, gamma, beta, &mut stats, mode, 0.99, 1e-5)?;
            project(g, y, 5)
        })?;
    }
    let p = params(&mut rng, &[("x", &[2, 3, 4], 1.0), ("b", &[3, 4], 1.0), ("y", &[2, 12], 1.0)]);
    run("add_bias/reshape/add/scale/concat_rows/sum", &p, &mut |g, p| {
        let x = g.param(p, "x")?;
        let b = g.param(p, "b")?;
        let y = g.param(p, "y")?;
        let xb = g.add_bias(x, b)?;
        let flat = g.reshape(xb, &[2, 12])?;
        let both = g.add(flat, y)?;
        let scaled = g.scale(both, 1.7)?;
        let cat = g.concat_rows(&[scaled, y])?;
        let proj = project(g, cat, 6)?;
        let s = g.sum(y)?;
        g.add(proj, s)
    })?;
    let target = randn(&mut rng, &[3, 4], 1.0);
    let p = params(&mut rng, &[("pred", &[3, 4], 1.0)]);
    run("mse", &p, &mut |g, p| {
        let x = g.param(p, "pred")?;
        g.mse(x, &target)
    })?;
    let p = params(&mut rng, &[("mu", &[5, 3], 1.0), ("logvar", &[5, 3], 1.0)]);
    run("gaussian_kl", &p, &mut |g, p| {
        let mu = g.param(p, "mu")?;
        let lv = g.param(p, "logvar")?;
        g.gaussian_kl(mu, lv)
    })?;
    let noise = randn(&mut rng, &[3, 4], 1.0);
    let p = params(&mut rng, &[("mu", &[3, 4], 1.0), ("logvar", &[3, 4], 0.5)]);
    run("reparameterize", &p, &mut |g, p| {
        let mu = g.param(p, "mu")?;
        let lv = g.param(p, "logvar")?;
        let z = g.reparameterize(mu, lv, &noise)?;
        project(g, z, 7)
    })?;
    let p = params(&mut rng, &[("logits", &[3, 5], 1.0)]);
    run("softmax_cross_entropy", &p, &mut |g, p| {
        let l = g.param(p, "logits")?;
        g.softmax_cross_entropy(l, &[0, 4, 2])
    })?;
    Ok(out)
}

/// Geometry used for full-objective checks: six frames (two target, two
/// neighbours per side), four latent dimensions, channels 2/3/4.
pub fn tiny_setup() -> (ArchConfig, WindowConfig) {
    let arch = ArchConfig {
        embed_dim: 4,
        conv_channels: [2, 3, 4],
        ..ArchConfig::default()
    };
    (arch, WindowConfig::new(2, 2))
}

/// Random, non-degenerate parameters (including the latent heads, which
/// start at zero in training and would hide encoder gradients).
fn random_model_params(
    arch: &ArchConfig,
    input_rows: usize,
    output_rows: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(ParamSet<f64>, BnStates<f64>)> {
    let mut p = ParamSet::new();
    for (name, dims) in param_shapes(arch, input_rows, output_rows) {
        let fan_in = if dims.len() == 4 {
            dims[0] * dims[1] * dims[2].max(dims[3])
        } else {
            dims[0]
        };
        let t = if name.ends_with(".gamma") {
            let mut t = randn(rng, &dims, 0.1);
            t.data_mut().iter_mut().for_each(|v| *v += 1.0);
            t
        } else if name.ends_with(".beta") || name.ends_with(".bias") {
            randn(rng, &dims, 0.1)
        } else {
            randn(rng, &dims, (1.0 / fan_in as f64).sqrt())
        };
        p.insert(name, t)?;
    }
    let bn = bn_layers(arch, output_rows)
        .into_iter()
        .map(|(n, c)| (n, RunningStats::new(c)))
        .collect();
    Ok((p, bn))
}

/// Full loss graph of each registered objective, plus the decoder gradient
/// with respect to the latent code.
pub fn objective_checks(cfg: &GradCheckConfig) -> Result<Vec<SuiteEntry>> {
    let (arch, window) = tiny_setup();
    let registry = ObjectiveRegistry::default();
    let batch = 8;
    let mut out = Vec::new();
    for name in registry.names() {
        let objective = registry.get(name)?;
        let (rin, rout) = (objective.input_rows(&window), objective.output_rows(&window));
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xC0DE);
        let (params, bn) = random_model_params(&arch, rin, rout, &mut rng)?;
        let input = randn(&mut rng, &[batch, rin, N_MELS, 1], 1.0);
        let target = randn(&mut rng, &[batch, rout, N_MELS], 1.0);
        let noise = randn(&mut rng, &[batch, arch.embed_dim], 1.0);
        let loss = LossConfig {
            recon: ReconScale::Mean,
            kl_weight: 1.0,
        };
        let r = grad_check(&params, cfg, |g, p| {
            let mut bn = bn.clone();
            let mut net = Net {
                arch: &arch,
                params: p,
                bn: &mut bn,
                mode: Mode::Train,
            };
            net.loss(g, input.clone(), &target, &noise, &loss)
                .map(|v| v.total)
                .map_err(|e| gradcore::GradError::Invalid(e.to_string()))
        })?;
        out.push(SuiteEntry::from_report(&format!("loss/{name}"), &r));
    }

    let rout = window.target_len;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xDEC0);
    let (mut params, bn) = random_model_params(&arch, rout, rout, &mut rng)?;
    params.insert("z", randn(&mut rng, &[batch, arch.embed_dim], 1.0))?;
    let target = randn(&mut rng, &[batch, rout, N_MELS], 1.0);
    let r = grad_check(&params, cfg, |g, p| {
        let mut bn = bn.clone();
        let mut net = Net {
            arch: &arch,
            params: p,
            bn: &mut bn,
            mode: Mode::Train,
        };
        let z = g.param(p, "z")?;
        let y = net
            .decode(g, z, rout)
            .map_err(|e| gradcore::GradError::Invalid(e.to_string()))?;
        g.mse(y, &target)
    })?;
    out.push(SuiteEntry::from_report("decode/mse", &r));
    Ok(out)
}

pub fn full_suite(cfg: &GradCheckConfig) -> Result<Vec<SuiteEntry>> {
    let mut v = operator_checks(cfg)?;
    v.extend(objective_checks(cfg)?);
    Ok(v)
}
