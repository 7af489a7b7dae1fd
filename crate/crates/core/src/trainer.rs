//! Mini-batch Adam training of an encoder/decoder pair.

use std::collections::BTreeMap;
use std::io::Write;
use std::time::Instant;

use gradcore::{Graph, Mode, ParamSet, Tensor};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::encoders::{seeded_rng, ArchConfig, ContextObjective, LossConfig, Model, Net};
use crate::error::{Error, Result};
use crate::frontend::{FeatureNorm, N_MELS};
use crate::segmenter::{Corpus, WindowConfig, WindowSample};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub max_steps: usize,
    /// Global gradient-norm ceiling; off when `None`.
    pub clip_norm: Option<f64>,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr: 1e-3,
            beta1: 0.95,
            beta2: 0.999,
            epsilon: 1e-8,
            batch_size: 256,
            max_steps: 1000,
            clip_norm: None,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && self.beta1 > 0.0
            && (0.0..1.0).contains(&self.beta2)
            && self.beta2 > 0.0
            && self.epsilon > 0.0
            && self.batch_size > 0
            && self.clip_norm.is_none_or(|c| c > 0.0);
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer settings: {self:?}")))
        }
    }
}

/// First and second moment buffers, per parameter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    moments: BTreeMap<String, (Vec<f32>, Vec<f32>)>,
}

impl AdamState {
    pub fn moments(&self, name: &str) -> Option<(&[f32], &[f32])> {
        self.moments.get(name).map(|(m, v)| (m.as_slice(), v.as_slice()))
    }
}

/// One bias-corrected Adam update from the gradients held in `params`.
/// `step` counts updates from 1.
pub fn adam_step(params: &mut ParamSet<f32>, state: &mut AdamState, cfg: &OptimConfig, step: u64) -> Result<()> {
    if step == 0 {
        return Err(Error::Train("adam step index starts at 1".into()));
    }
    for (name, _, grad) in params.iter_mut_with_grads() {
        if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
            return Err(Error::Train(format!("non-finite gradient in `{name}` at element {i}")));
        }
    }
    let c1 = 1.0 - cfg.beta1.powi(step as i32);
    let c2 = 1.0 - cfg.beta2.powi(step as i32);
    let (b1, b2) = (cfg.beta1 as f32, cfg.beta2 as f32);
    for (name, value, grad) in params.iter_mut_with_grads() {
        let (m, v) = state
            .moments
            .entry(name.to_string())
            .or_insert_with(|| (vec![0.0; grad.len()], vec![0.0; grad.len()]));
        for (((p, g), m), v) in value.data_mut().iter_mut().zip(grad).zip(m.iter_mut()).zip(v.iter_mut()) {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let m_hat = *m as f64 / c1;
            let v_hat = *v as f64 / c2;
            *p -= (cfg.lr * m_hat / (v_hat.sqrt() + cfg.epsilon)) as f32;
        }
    }
    Ok(())
}

fn clip_gradients(params: &mut ParamSet<f32>, max_norm: f64) {
    let norm = params
        .iter_mut_with_grads()
        .flat_map(|(_, _, g)| g.iter().map(|v| (*v as f64) * (*v as f64)))
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let scale = (max_norm / norm) as f32;
        let names: Vec<String> = params.names().map(str::to_string).collect();
        for name in names {
            if let Ok(g) = params.grad_mut(&name) {
                g.iter_mut().for_each(|v| *v *= scale);
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub recon: f64,
    pub kl: f64,
    pub wall_ms: u64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub records: Vec<StepRecord>,
    pub wall_ms: u64,
    pub checkpoint: Option<std::path::PathBuf>,
}

impl TrainReport {
    /// Mean loss over the first (or last) `n` steps.
    pub fn smoothed(&self, n: usize, from_end: bool) -> Option<f64> {
        let r = &self.records;
        if r.is_empty() {
            return None;
        }
        let n = n.min(r.len()).max(1);
        let slice = if from_end { &r[r.len() - n..] } else { &r[..n] };
        Some(slice.iter().map(|s| s.loss).sum::<f64>() / n as f64)
    }
}

/// Everything the training loop needs besides the data.
#[derive(Clone, Debug)]
pub struct TrainSetup<'a> {
    pub objective: &'a dyn ContextObjective,
    pub arch: &'a ArchConfig,
    pub window: &'a WindowConfig,
    pub loss: &'a LossConfig,
    pub optim: &'a OptimConfig,
    pub standardize: bool,
    pub seed: u64,
}

/// Trains a freshly initialized model. Initialization, the per-epoch window
/// shuffle and the reparameterization noise all come from one stream seeded
/// with `setup.seed`. One JSON line per step goes to `metrics` when given.
pub fn train(corpus: &Corpus, setup: &TrainSetup, mut metrics: Option<&mut dyn Write>) -> Result<(Model, TrainReport)> {
    setup.optim.validate()?;
    let start = Instant::now();
    let mut rng = seeded_rng(setup.seed);
    let mut model = Model::init(setup.objective, setup.arch, setup.window, &mut rng)?;
    let normalized;
    let corpus = if setup.standardize {
        let norm = FeatureNorm::fit(&corpus.features)?;
        normalized = corpus.map_features(|f| norm.apply(f));
        model.norm = Some(norm);
        &normalized
    } else {
        corpus
    };
    let mut order = corpus.window_positions(setup.window);
    if order.is_empty() {
        return Err(Error::Train(format!(
            "no training windows: every utterance is shorter than {} frames",
            setup.window.span()
        )));
    }
    let batch = setup.optim.batch_size.min(order.len());
    let in_rows = model.input_rows;
    let out_rows = model.output_rows;
    let k = setup.arch.embed_dim;
    let mut adam = AdamState::default();
    let mut report = TrainReport::default();
    let mut cursor = order.len();
    for step in 0..setup.optim.max_steps {
        if cursor + batch > order.len() {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let mut input = Vec::with_capacity(batch * in_rows * N_MELS);
        let mut target = Vec::with_capacity(batch * out_rows * N_MELS);
        for &(u, t) in &order[cursor..cursor + batch] {
            let w = WindowSample::at(&corpus.features[u], t, setup.window)
                .expect("window positions are in range");
            input.extend_from_slice(setup.objective.encoder_input(&w));
            target.extend_from_slice(setup.objective.prediction_target(&w));
        }
        cursor += batch;
        let noise: Vec<f32> = (0..batch * k).map(|_| rng.sample(StandardNormal)).collect();

        let mut g = Graph::<f32>::new();
        let mut net = Net {
            arch: setup.arch,
            params: &model.params,
            bn: &mut model.bn,
            mode: Mode::Train,
        };
        let vars = net.loss(
            &mut g,
            Tensor::new([batch, in_rows, N_MELS, 1], input)?,
            &Tensor::new([batch, out_rows, N_MELS], target)?,
            &Tensor::new([batch, k], noise)?,
            setup.loss,
        )?;
        let record = StepRecord {
            step,
            loss: g.value(vars.total).item() as f64,
            recon: g.value(vars.recon).item() as f64,
            kl: g.value(vars.kl).item() as f64,
            wall_ms: start.elapsed().as_millis() as u64,
        };
        if !record.loss.is_finite() {
            return Err(Error::Train(format!(
                "non-finite loss at step {step} (recon {}, kl {})",
                record.recon, record.kl
            )));
        }
        g.backward(vars.total)?;
        model.params.zero_grads();
        g.export_grads(&mut model.params)?;
        if let Some(c) = setup.optim.clip_norm {
            clip_gradients(&mut model.params, c);
        }
        adam_step(&mut model.params, &mut adam, setup.optim, step as u64 + 1)?;
        if let Some(w) = metrics.as_deref_mut() {
            let line = serde_json::to_string(&record)?;
            writeln!(w, "{line}").map_err(|e| Error::io("metrics", e))?;
        }
        if step % 100 == 0 {
            log::info!(
                "{} step {step}: loss {:.4} recon {:.4} kl {:.4}",
                setup.objective.name(),
                record.loss,
                record.recon,
                record.kl
            );
        }
        report.records.push(record);
    }
    model.params.zero_grads();
    report.wall_ms = start.elapsed().as_millis() as u64;
    Ok((model, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(value: f32, grad: f32) -> ParamSet<f32> {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::new([1], vec![value]).unwrap()).unwrap();
        p.grad_mut("w").unwrap()[0] = grad;
        p
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let cfg = OptimConfig::default();
        let mut p = single(0.0, 1.0);
        let mut s = AdamState::default();
        adam_step(&mut p, &mut s, &cfg, 1).unwrap();
        let (m, v) = s.moments("w").unwrap();
        assert!((m[0] - 0.05).abs() < 1e-7);
        assert!((v[0] - 0.001).abs() < 1e-7);
        assert!((p.get("w").unwrap().data()[0] + 1e-3).abs() < 1e-8);
    }

    #[test]
    fn zero_gradient_decays_moments_without_moving() {
        let cfg = OptimConfig::default();
        let mut p = single(0.5, 1.0);
        let mut s = AdamState::default();
        adam_step(&mut p, &mut s, &cfg, 1).unwrap();
        let after_one = p.get("w").unwrap().data()[0];
        let (m1, v1) = s.moments("w").map(|(m, v)| (m[0], v[0])).unwrap();
        p.grad_mut("w").unwrap()[0] = 0.0;
        adam_step(&mut p, &mut s, &cfg, 2).unwrap();
        let (m2, v2) = s.moments("w").map(|(m, v)| (m[0], v[0])).unwrap();
        assert!((m2 - 0.95 * m1).abs() < 1e-9);
        assert!((v2 - 0.999 * v1).abs() < 1e-12);
        // Momentum keeps moving the parameter even without a fresh gradient.
        assert!(p.get("w").unwrap().data()[0] < after_one);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut p = single(0.0, f32::NAN);
        let err = adam_step(&mut p, &mut AdamState::default(), &OptimConfig::default(), 1).unwrap_err();
        assert!(err.to_string().contains("`w`"));
    }

    #[test]
    fn clipping_bounds_global_norm() {
        let mut p = single(0.0, 10.0);
        clip_gradients(&mut p, 1.0);
        assert!((p.grad("w").unwrap()[0] - 1.0).abs() < 1e-6);
    }
}
