//! Convolutional VAE encoder/decoder shared by the three context objectives.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use gradcore::{BnStates, Graph, Mode, Padding, ParamSet, Real, RunningStats, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frontend::{FeatureNorm, N_MELS};
use crate::segmenter::{WindowConfig, WindowSample};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Vae,
    Cjfs,
    Cjfa,
}

impl ModelKind {
    pub const ALL: [ModelKind; 3] = [ModelKind::Vae, ModelKind::Cjfs, ModelKind::Cjfa];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Vae => "vae",
            ModelKind::Cjfs => "cjfs",
            ModelKind::Cjfa => "cjfa",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModelKind::ALL
            .into_iter()
            .find(|k| k.name() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::Config(format!("unknown model `{s}` (expected vae, cjfs or cjfa)")))
    }
}

/// Which part of a window the encoder sees and which part the decoder rebuilds.
pub trait ContextObjective: Send + Sync {
    fn name(&self) -> &'static str;
    fn kind(&self) -> ModelKind;
    fn input_rows(&self, window: &WindowConfig) -> usize;
    fn output_rows(&self, window: &WindowConfig) -> usize;
    fn encoder_input<'a>(&self, sample: &'a WindowSample) -> &'a [f32];
    fn prediction_target<'a>(&self, sample: &'a WindowSample) -> &'a [f32];
}

impl fmt::Debug for dyn ContextObjective + '_ {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Reconstructs the target window from itself.
pub struct Autoencode;

/// Synthesizes the target window from its neighbours.
pub struct Synthesize;

/// Predicts the neighbours from the target window.
pub struct Analyse;

impl ContextObjective for Autoencode {
    fn name(&self) -> &'static str {
        "vae"
    }
    fn kind(&self) -> ModelKind {
        ModelKind::Vae
    }
    fn input_rows(&self, w: &WindowConfig) -> usize {
        w.target_len
    }
    fn output_rows(&self, w: &WindowConfig) -> usize {
        w.target_len
    }
    fn encoder_input<'a>(&self, s: &'a WindowSample) -> &'a [f32] {
        &s.x
    }
    fn prediction_target<'a>(&self, s: &'a WindowSample) -> &'a [f32] {
        &s.x
    }
}

impl ContextObjective for Synthesize {
    fn name(&self) -> &'static str {
        "cjfs"
    }
    fn kind(&self) -> ModelKind {
        ModelKind::Cjfs
    }
    fn input_rows(&self, w: &WindowConfig) -> usize {
        2 * w.neighbour_len
    }
    fn output_rows(&self, w: &WindowConfig) -> usize {
        w.target_len
    }
    fn encoder_input<'a>(&self, s: &'a WindowSample) -> &'a [f32] {
        &s.y
    }
    fn prediction_target<'a>(&self, s: &'a WindowSample) -> &'a [f32] {
        &s.x
    }
}

impl ContextObjective for Analyse {
    fn name(&self) -> &'static str {
        "cjfa"
    }
    fn kind(&self) -> ModelKind {
        ModelKind::Cjfa
    }
    fn input_rows(&self, w: &WindowConfig) -> usize {
        w.target_len
    }
    fn output_rows(&self, w: &WindowConfig) -> usize {
        2 * w.neighbour_len
    }
    fn encoder_input<'a>(&self, s: &'a WindowSample) -> &'a [f32] {
        &s.x
    }
    fn prediction_target<'a>(&self, s: &'a WindowSample) -> &'a [f32] {
        &s.y
    }
}

/// Objectives registered by name.
#[derive(Clone)]
pub struct ObjectiveRegistry {
    entries: BTreeMap<String, Arc<dyn ContextObjective>>,
}

impl Default for ObjectiveRegistry {
    fn default() -> Self {
        let mut r = ObjectiveRegistry {
            entries: BTreeMap::new(),
        };
        r.register(Arc::new(Autoencode));
        r.register(Arc::new(Synthesize));
        r.register(Arc::new(Analyse));
        r
    }
}

impl ObjectiveRegistry {
    pub fn register(&mut self, objective: Arc<dyn ContextObjective>) {
        self.entries.insert(objective.name().to_string(), objective);
    }

    pub fn get(&self, name: &str) -> Result<Arc<dyn ContextObjective>> {
        self.entries.get(&name.to_ascii_lowercase()).cloned().ok_or_else(|| {
            Error::Config(format!(
                "unknown objective `{name}` (registered: {})",
                self.names().collect::<Vec<_>>().join(", ")
            ))
        })
    }

    pub fn for_kind(&self, kind: ModelKind) -> Result<Arc<dyn ContextObjective>> {
        self.get(kind.name())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchConfig {
    pub embed_dim: usize,
    pub conv_channels: [usize; 3],
    pub fc_units: usize,
    pub leaky_slope: f64,
    pub bn_momentum: f64,
    pub bn_epsilon: f64,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            embed_dim: 150,
            conv_channels: [64, 128, 256],
            fc_units: 512,
            leaky_slope: 0.01,
            bn_momentum: 0.99,
            bn_epsilon: 1e-5,
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.fc_units == 0 || self.conv_channels.contains(&0) {
            return Err(Error::Config(format!("architecture sizes must be >= 1: {self:?}")));
        }
        if !(self.leaky_slope > 0.0 && self.leaky_slope < 1.0) {
            return Err(Error::Config("leaky_slope must lie in (0, 1)".into()));
        }
        if !(0.0..1.0).contains(&self.bn_momentum) || self.bn_epsilon <= 0.0 {
            return Err(Error::Config("bn_momentum must lie in [0, 1) and bn_epsilon > 0".into()));
        }
        Ok(())
    }
}

/// Time extents through the strided stack: rows, rows, ceil(rows/2), ceil(rows/4).
pub fn time_chain(rows: usize) -> [usize; 3] {
    let half = rows.div_ceil(2);
    [rows, half, half.div_ceil(2)]
}

/// Shapes of every parameter, by name.
pub fn param_shapes(arch: &ArchConfig, input_rows: usize, output_rows: usize) -> Vec<(String, Vec<usize>)> {
    let [c1, c2, c3] = arch.conv_channels;
    let (k, h) = (arch.embed_dim, arch.fc_units);
    let enc_t = time_chain(input_rows)[2];
    let dec_t = time_chain(output_rows)[2];
    let mut v: Vec<(String, Vec<usize>)> = vec![
        ("encoder.conv1.kernel".into(), vec![1, N_MELS, 1, c1]),
        ("encoder.conv2.kernel".into(), vec![3, 1, c1, c2]),
        ("encoder.conv3.kernel".into(), vec![3, 1, c2, c3]),
        ("encoder.fc.weight".into(), vec![enc_t * c3, h]),
        ("encoder.fc.bias".into(), vec![h]),
        ("encoder.mu.weight".into(), vec![h, k]),
        ("encoder.mu.bias".into(), vec![k]),
        ("encoder.logvar.weight".into(), vec![h, k]),
        ("encoder.logvar.bias".into(), vec![k]),
        ("decoder.fc1.weight".into(), vec![k, h]),
        ("decoder.fc1.bias".into(), vec![h]),
        ("decoder.fc2.weight".into(), vec![h, dec_t * c3]),
        ("decoder.fc2.bias".into(), vec![dec_t * c3]),
        ("decoder.deconv1.kernel".into(), vec![3, 1, c2, c3]),
        ("decoder.deconv2.kernel".into(), vec![3, 1, c1, c2]),
        ("decoder.out.kernel".into(), vec![1, N_MELS, 1, c1]),
        ("decoder.out.bias".into(), vec![N_MELS]),
    ];
    for (name, c) in bn_layers(arch, output_rows) {
        v.push((format!("{name}.gamma"), vec![c]));
        v.push((format!("{name}.beta"), vec![c]));
    }
    v.sort();
    v
}

/// Batch-norm layers and their channel counts.
pub fn bn_layers(arch: &ArchConfig, output_rows: usize) -> Vec<(String, usize)> {
    let [c1, c2, c3] = arch.conv_channels;
    let dec_t = time_chain(output_rows)[2];
    vec![
        ("encoder.bn1".into(), c1),
        ("encoder.bn2".into(), c2),
        ("encoder.bn3".into(), c3),
        ("encoder.bn_fc".into(), arch.fc_units),
        ("decoder.bn_fc1".into(), arch.fc_units),
        ("decoder.bn_fc2".into(), dec_t * c3),
        ("decoder.bn1".into(), c2),
        ("decoder.bn2".into(), c1),
    ]
}

/// Trainable scalar count for an architecture and window geometry.
pub fn param_count(arch: &ArchConfig, input_rows: usize, output_rows: usize) -> usize {
    param_shapes(arch, input_rows, output_rows)
        .iter()
        .map(|(_, d)| d.iter().product::<usize>())
        .sum()
}

/// He-normal weights, zero biases, unit BN scales. Both latent heads start at
/// zero so the initial posterior equals the prior.
pub fn init_params(
    arch: &ArchConfig,
    input_rows: usize,
    output_rows: usize,
    rng: &mut impl Rng,
) -> Result<(ParamSet<f32>, BnStates<f32>)> {
    let mut params = ParamSet::new();
    for (name, dims) in param_shapes(arch, input_rows, output_rows) {
        let n: usize = dims.iter().product();
        let data = if name.ends_with(".gamma") {
            vec![1.0; n]
        } else if name.ends_with(".bias") || name.ends_with(".beta") || name.starts_with("encoder.mu.") || name.starts_with("encoder.logvar.") {
            vec![0.0; n]
        } else {
            let fan_in: usize = if dims.len() == 4 {
                if name.starts_with("decoder.") {
                    dims[0] * dims[1] * dims[3]
                } else {
                    dims[0] * dims[1] * dims[2]
                }
            } else {
                dims[0]
            };
            let sd = (2.0 / fan_in as f64).sqrt();
            (0..n)
                .map(|_| (rng.sample::<f64, _>(StandardNormal) * sd) as f32)
                .collect()
        };
        params.insert(name, Tensor::new(dims, data)?)?;
    }
    let bn = bn_layers(arch, output_rows)
        .into_iter()
        .map(|(n, c)| (n, RunningStats::new(c)))
        .collect();
    Ok((params, bn))
}

/// Recorded graph nodes of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub recon: Var,
    pub kl: Var,
    pub mu: Var,
    pub logvar: Var,
    pub output: Var,
}

/// How the reconstruction error is scaled against the KL term.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReconScale {
    /// Mean squared error over all elements.
    Mean,
    /// Unit-variance Gaussian negative log-likelihood up to a constant:
    /// half the squared error summed over a window, averaged over the batch.
    GaussianNll,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub recon: ReconScale,
    pub kl_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            recon: ReconScale::GaussianNll,
            kl_weight: 1.0,
        }
    }
}

/// Graph-building view of a network over some parameter set.
pub struct Net<'a, T: Real> {
    pub arch: &'a ArchConfig,
    pub params: &'a ParamSet<T>,
    pub bn: &'a mut BnStates<T>,
    pub mode: Mode,
}

impl<'a, T: Real> Net<'a, T> {
    fn bn_act(&mut self, g: &mut Graph<T>, x: Var, layer: &str) -> Result<Var> {
        let gamma = g.param(self.params, &format!("{layer}.gamma"))?;
        let beta = g.param(self.params, &format!("{layer}.beta"))?;
        let stats = self
            .bn
            .get_mut(layer)
            .ok_or_else(|| Error::Checkpoint(format!("missing batch-norm statistics `{layer}`")))?;
        let y = g.batch_norm(x, gamma, beta, stats, self.mode, self.arch.bn_momentum, self.arch.bn_epsilon)?;
        Ok(g.leaky_relu(y, self.arch.leaky_slope)?)
    }

    fn dense(&self, g: &mut Graph<T>, x: Var, layer: &str) -> Result<Var> {
        let w = g.param(self.params, &format!("{layer}.weight"))?;
        let b = g.param(self.params, &format!("{layer}.bias"))?;
        Ok(g.dense(x, w, b)?)
    }

    /// `input` is `[B, rows, 80, 1]`; returns the (mu, logvar) heads `[B, K]`.
    pub fn encode(&mut self, g: &mut Graph<T>, input: Var) -> Result<(Var, Var)> {
        let dims = g.shape(input).dims().to_vec();
        if dims.len() != 4 || dims[2] != N_MELS || dims[3] != 1 {
            return Err(Error::Data(format!("encoder input must be [B, rows, {N_MELS}, 1], got {dims:?}")));
        }
        let k1 = g.param(self.params, "encoder.conv1.kernel")?;
        let h = g.conv2d(input, k1, 1, 1, Padding::Valid)?;
        let h = self.bn_act(g, h, "encoder.bn1")?;
        let k2 = g.param(self.params, "encoder.conv2.kernel")?;
        let h = g.conv2d(h, k2, 2, 1, Padding::Same)?;
        let h = self.bn_act(g, h, "encoder.bn2")?;
        let k3 = g.param(self.params, "encoder.conv3.kernel")?;
        let h = g.conv2d(h, k3, 2, 1, Padding::Same)?;
        let h = self.bn_act(g, h, "encoder.bn3")?;
        let d = g.shape(h).dims().to_vec();
        let h = g.reshape(h, &[d[0], d[1] * d[2] * d[3]])?;
        let h = self.dense(g, h, "encoder.fc")?;
        let h = self.bn_act(g, h, "encoder.bn_fc")?;
        let mu = self.dense(g, h, "encoder.mu")?;
        let logvar = self.dense(g, h, "encoder.logvar")?;
        Ok((mu, logvar))
    }

    /// `z` is `[B, K]`; returns `[B, out_rows, 80]` in feature space.
    pub fn decode(&mut self, g: &mut Graph<T>, z: Var, out_rows: usize) -> Result<Var> {
        let batch = g.shape(z).dim(0);
        let [c1, c2, c3] = self.arch.conv_channels;
        let [t1, t2, t3] = time_chain(out_rows);
        let h = self.dense(g, z, "decoder.fc1")?;
        let h = self.bn_act(g, h, "decoder.bn_fc1")?;
        let h = self.dense(g, h, "decoder.fc2")?;
        let h = self.bn_act(g, h, "decoder.bn_fc2")?;
        let h = g.reshape(h, &[batch, t3, 1, c3])?;
        let k = g.param(self.params, "decoder.deconv1.kernel")?;
        let h = g.conv_transpose2d(h, k, 2, 1, Padding::Same, t2, 1)?;
        debug_assert_eq!(g.shape(h).dims(), [batch, t2, 1, c2]);
        let h = self.bn_act(g, h, "decoder.bn1")?;
        let k = g.param(self.params, "decoder.deconv2.kernel")?;
        let h = g.conv_transpose2d(h, k, 2, 1, Padding::Same, t1, 1)?;
        debug_assert_eq!(g.shape(h).dims(), [batch, t1, 1, c1]);
        let h = self.bn_act(g, h, "decoder.bn2")?;
        let k = g.param(self.params, "decoder.out.kernel")?;
        let h = g.conv_transpose2d(h, k, 1, 1, Padding::Valid, t1, N_MELS)?;
        let h = g.reshape(h, &[batch, t1, N_MELS])?;
        let b = g.param(self.params, "decoder.out.bias")?;
        Ok(g.add_bias(h, b)?)
    }

    /// Full objective: encode `input`, sample with `noise`, decode and compare
    /// against `target` (`[B, out_rows, 80]`).
    pub fn loss(
        &mut self,
        g: &mut Graph<T>,
        input: Tensor<T>,
        target: &Tensor<T>,
        noise: &Tensor<T>,
        cfg: &LossConfig,
    ) -> Result<LossVars> {
        let x = g.input(input);
        let (mu, logvar) = self.encode(g, x)?;
        let z = g.reparameterize(mu, logvar, noise)?;
        let out_rows = target.dims()[1];
        let output = self.decode(g, z, out_rows)?;
        let mse = g.mse(output, target)?;
        let recon = match cfg.recon {
            ReconScale::Mean => mse,
            ReconScale::GaussianNll => g.scale(mse, 0.5 * (out_rows * N_MELS) as f64)?,
        };
        let kl = g.gaussian_kl(mu, logvar)?;
        let weighted = g.scale(kl, cfg.kl_weight)?;
        let total = g.add(recon, weighted)?;
        Ok(LossVars {
            total,
            recon,
            kl,
            mu,
            logvar,
            output,
        })
    }
}

/// A trained (or freshly initialized) model with everything needed to embed.
#[derive(Clone, Debug)]
pub struct Model {
    pub kind: ModelKind,
    pub arch: ArchConfig,
    pub window: WindowConfig,
    pub input_rows: usize,
    pub output_rows: usize,
    pub params: ParamSet<f32>,
    pub bn: BnStates<f32>,
    /// Feature standardization fitted on the training corpus, if enabled.
    pub norm: Option<FeatureNorm>,
}

impl Model {
    pub fn init(
        objective: &dyn ContextObjective,
        arch: &ArchConfig,
        window: &WindowConfig,
        rng: &mut impl Rng,
    ) -> Result<Model> {
        arch.validate()?;
        window.validate()?;
        let input_rows = objective.input_rows(window);
        let output_rows = objective.output_rows(window);
        let (params, bn) = init_params(arch, input_rows, output_rows, rng)?;
        Ok(Model {
            kind: objective.kind(),
            arch: arch.clone(),
            window: window.clone(),
            input_rows,
            output_rows,
            params,
            bn,
            norm: None,
        })
    }

    pub fn param_count(&self) -> usize {
        self.params.numel()
    }

    /// Checks that every expected parameter is present with the right shape.
    pub fn validate(&self) -> Result<()> {
        for (name, dims) in param_shapes(&self.arch, self.input_rows, self.output_rows) {
            let p = self
                .params
                .get(&name)
                .map_err(|_| Error::Checkpoint(format!("missing parameter `{name}`")))?;
            if p.dims() != dims.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{name}` has shape {:?}, architecture expects {dims:?}",
                    p.dims()
                )));
            }
        }
        for (name, c) in bn_layers(&self.arch, self.output_rows) {
            match self.bn.get(&name) {
                Some(s) if s.channels() == c => {}
                _ => return Err(Error::Checkpoint(format!("missing or malformed batch-norm statistics `{name}`"))),
            }
        }
        Ok(())
    }

    /// Posterior means for a batch of encoder inputs (`rows x 80` each),
    /// using running batch-norm statistics.
    pub fn embed_batch(&self, inputs: &[&[f32]]) -> Result<Vec<Vec<f32>>> {
        if inputs.is_empty() {
            return Ok(Vec::new());
        }
        let rows = self.input_rows;
        let mut data = Vec::with_capacity(inputs.len() * rows * N_MELS);
        for x in inputs {
            if x.len() != rows * N_MELS {
                return Err(Error::Data(format!(
                    "{} model expects {rows} input rows, got {}",
                    self.kind,
                    x.len() as f64 / N_MELS as f64
                )));
            }
            data.extend_from_slice(x);
        }
        let mut bn = self.bn.clone();
        let mut net = Net {
            arch: &self.arch,
            params: &self.params,
            bn: &mut bn,
            mode: Mode::Infer,
        };
        let mut g = Graph::new();
        let x = g.input(Tensor::new([inputs.len(), rows, N_MELS, 1], data)?);
        let (mu, _) = net.encode(&mut g, x)?;
        let k = self.arch.embed_dim;
        Ok(g.value(mu).data().chunks_exact(k).map(<[f32]>::to_vec).collect())
    }

    /// Embedding of one window: the posterior mean of the encoder input the
    /// model's objective selects.
    pub fn embed(&self, objective: &dyn ContextObjective, window: &WindowSample) -> Result<Vec<f32>> {
        if objective.kind() != self.kind {
            return Err(Error::Config(format!(
                "objective {} does not match {} model",
                objective.name(),
                self.kind
            )));
        }
        Ok(self.embed_batch(&[objective.encoder_input(window)])?.remove(0))
    }
}

/// Seeded generator shared by model initialization and tests.
pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
