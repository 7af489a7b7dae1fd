//! Segment-level phone and speaker probing of frozen embeddings.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::sync::Arc;

use gradcore::{log_softmax, Graph, Padding, ParamSet, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoders::{Model, ObjectiveRegistry};
use crate::error::{Error, Result};
use crate::segmenter::{segment_windows, Corpus, CorpusIndex, LabelledSegment, Subset};
use crate::trainer::{adam_step, AdamState, OptimConfig};

pub const BLOCKS: [char; 8] = ['A', 'B', 'C', 'D', 'E', 'F', 'G', 'H'];

/// Speaker-recognition configurations differing in training-set overlap.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpeakerTask {
    A,
    B,
    C,
}

impl SpeakerTask {
    pub const ALL: [SpeakerTask; 3] = [SpeakerTask::A, SpeakerTask::B, SpeakerTask::C];

    /// Blocks used to train the embedding, the classifier, and to test.
    pub fn blocks(self) -> (&'static str, &'static str, &'static str) {
        match self {
            SpeakerTask::A => ("ABCEFG", "ABCEFG", "DH"),
            SpeakerTask::B => ("ABEF", "CG", "DH"),
            SpeakerTask::C => ("ABCD", "EG", "FH"),
        }
    }
}

impl fmt::Display for SpeakerTask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            SpeakerTask::A => "a",
            SpeakerTask::B => "b",
            SpeakerTask::C => "c",
        };
        f.write_str(s)
    }
}

impl FromStr for SpeakerTask {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "a" => Ok(SpeakerTask::A),
            "b" => Ok(SpeakerTask::B),
            "c" => Ok(SpeakerTask::C),
            _ => Err(Error::Config(format!("unknown speaker task `{s}` (expected a, b or c)"))),
        }
    }
}

/// Utterance positions (into the corpus index) for each role of a task.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TaskRoles {
    pub embed_train: Vec<usize>,
    pub clf_train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Eight disjoint blocks with two utterances per speaker each: A-D from the
/// training speakers, E-H from the test speakers.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitPlan {
    pub blocks: [Vec<usize>; 8],
}

impl SplitPlan {
    pub fn block(&self, name: char) -> &[usize] {
        let i = BLOCKS
            .iter()
            .position(|b| *b == name)
            .expect("block name in A..H");
        &self.blocks[i]
    }

    fn union(&self, names: &str) -> Vec<usize> {
        let mut v: Vec<usize> = names.chars().flat_map(|c| self.block(c).iter().copied()).collect();
        v.sort_unstable();
        v
    }

    pub fn roles(&self, task: SpeakerTask) -> TaskRoles {
        let (e, c, t) = task.blocks();
        TaskRoles {
            embed_train: self.union(e),
            clf_train: self.union(c),
            test: self.union(t),
        }
    }
}

/// Seeded assignment of each speaker's eight utterances to blocks, two per block.
pub fn make_splits(index: &CorpusIndex, seed: u64) -> Result<SplitPlan> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut blocks: [Vec<usize>; 8] = Default::default();
    for (speaker, utts) in &index.speakers {
        if utts.len() != 8 {
            return Err(Error::Data(format!(
                "speaker {speaker} has {} utterances; the block split needs exactly 8",
                utts.len()
            )));
        }
        let subset = index.utterances[utts[0]].subset;
        if utts.iter().any(|&u| index.utterances[u].subset != subset) {
            return Err(Error::Data(format!("speaker {speaker} appears in both train and test subsets")));
        }
        let mut order = utts.clone();
        order.shuffle(&mut rng);
        let base = if subset == Subset::Train { 0 } else { 4 };
        for (i, pair) in order.chunks(2).enumerate() {
            blocks[base + i].extend_from_slice(pair);
        }
    }
    for b in &mut blocks {
        b.sort_unstable();
    }
    Ok(SplitPlan { blocks })
}

/// Phone task: embedding and classifier trained on the training subset,
/// tested on the test subset.
pub fn phone_roles(index: &CorpusIndex) -> TaskRoles {
    let pick = |s: Subset| -> Vec<usize> {
        (0..index.len())
            .filter(|&i| index.utterances[i].subset == s)
            .collect()
    };
    let train = pick(Subset::Train);
    TaskRoles {
        embed_train: train.clone(),
        clf_train: train,
        test: pick(Subset::Test),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeClassifierConfig {
    /// Registered head name: `mlp` or `tconv`.
    pub head: String,
    pub hidden: usize,
    /// Embeddings spanned by one temporal-conv example.
    pub context: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub leaky_slope: f64,
}

impl Default for ProbeClassifierConfig {
    fn default() -> Self {
        ProbeClassifierConfig {
            head: "mlp".into(),
            hidden: 512,
            context: 3,
            epochs: 20,
            batch_size: 256,
            lr: 1e-3,
            leaky_slope: 0.01,
        }
    }
}

/// A classifier over one or more consecutive embeddings.
pub trait ProbeHead: Send + Sync {
    fn name(&self) -> &'static str;
    /// Consecutive embeddings per example.
    fn context(&self, cfg: &ProbeClassifierConfig) -> usize;
    fn init(&self, dim: usize, classes: usize, cfg: &ProbeClassifierConfig, rng: &mut ChaCha8Rng) -> Result<ParamSet<f32>>;
    /// `input` is `[B, context, dim]`; returns logits `[B, classes]`.
    fn logits(&self, g: &mut Graph<f32>, params: &ParamSet<f32>, input: Var, cfg: &ProbeClassifierConfig) -> Result<Var>;
}

fn he(rng: &mut ChaCha8Rng, dims: Vec<usize>, fan_in: usize) -> Result<Tensor<f32>> {
    let sd = (2.0 / fan_in as f64).sqrt();
    let n = dims.iter().product();
    let data = (0..n).map(|_| (rng.sample::<f64, _>(StandardNormal) * sd) as f32).collect();
    Ok(Tensor::new(dims, data)?)
}

fn output_layer(p: &mut ParamSet<f32>, hidden: usize, classes: usize, rng: &mut ChaCha8Rng) -> Result<()> {
    p.insert("out.weight", he(rng, vec![hidden, classes], hidden)?)?;
    p.insert("out.bias", Tensor::zeros([classes])?)?;
    Ok(())
}

/// One hidden leaky-ReLU layer over a single embedding.
pub struct MlpHead;

impl ProbeHead for MlpHead {
    fn name(&self) -> &'static str {
        "mlp"
    }

    fn context(&self, _: &ProbeClassifierConfig) -> usize {
        1
    }

    fn init(&self, dim: usize, classes: usize, cfg: &ProbeClassifierConfig, rng: &mut ChaCha8Rng) -> Result<ParamSet<f32>> {
        let mut p = ParamSet::new();
        p.insert("hidden.weight", he(rng, vec![dim, cfg.hidden], dim)?)?;
        p.insert("hidden.bias", Tensor::zeros([cfg.hidden])?)?;
        output_layer(&mut p, cfg.hidden, classes, rng)?;
        Ok(p)
    }

    fn logits(&self, g: &mut Graph<f32>, params: &ParamSet<f32>, input: Var, cfg: &ProbeClassifierConfig) -> Result<Var> {
        let d = g.shape(input).dims().to_vec();
        let x = g.reshape(input, &[d[0], d[1] * d[2]])?;
        let w = g.param(params, "hidden.weight")?;
        let b = g.param(params, "hidden.bias")?;
        let h = g.dense(x, w, b)?;
        let h = g.leaky_relu(h, cfg.leaky_slope)?;
        let w = g.param(params, "out.weight")?;
        let b = g.param(params, "out.bias")?;
        Ok(g.dense(h, w, b)?)
    }
}

/// A temporal convolution across neighbouring embeddings, then a linear layer.
pub struct TemporalConvHead;

impl ProbeHead for TemporalConvHead {
    fn name(&self) -> &'static str {
        "tconv"
    }

    fn context(&self, cfg: &ProbeClassifierConfig) -> usize {
        cfg.context.max(1)
    }

    fn init(&self, dim: usize, classes: usize, cfg: &ProbeClassifierConfig, rng: &mut ChaCha8Rng) -> Result<ParamSet<f32>> {
        let c = self.context(cfg);
        let mut p = ParamSet::new();
        p.insert("conv.kernel", he(rng, vec![c, dim, 1, cfg.hidden], c * dim)?)?;
        p.insert("conv.bias", Tensor::zeros([cfg.hidden])?)?;
        output_layer(&mut p, cfg.hidden, classes, rng)?;
        Ok(p)
    }

    fn logits(&self, g: &mut Graph<f32>, params: &ParamSet<f32>, input: Var, cfg: &ProbeClassifierConfig) -> Result<Var> {
        let d = g.shape(input).dims().to_vec();
        let x = g.reshape(input, &[d[0], d[1], d[2], 1])?;
        let k = g.param(params, "conv.kernel")?;
        let h = g.conv2d(x, k, 1, 1, Padding::Valid)?;
        let h = g.reshape(h, &[d[0], cfg.hidden])?;
        let b = g.param(params, "conv.bias")?;
        let h = g.add_bias(h, b)?;
        let h = g.leaky_relu(h, cfg.leaky_slope)?;
        let w = g.param(params, "out.weight")?;
        let b = g.param(params, "out.bias")?;
        Ok(g.dense(h, w, b)?)
    }
}

/// Probe heads registered by name.
#[derive(Clone)]
pub struct HeadRegistry {
    entries: BTreeMap<String, Arc<dyn ProbeHead>>,
}

impl Default for HeadRegistry {
    fn default() -> Self {
        let mut r = HeadRegistry {
            entries: BTreeMap::new(),
        };
        r.register(Arc::new(MlpHead));
        r.register(Arc::new(TemporalConvHead));
        r
    }
}

impl HeadRegistry {
    pub fn register(&mut self, head: Arc<dyn ProbeHead>) {
        self.entries.insert(head.name().to_string(), head);
    }

    pub fn get(&self, name: &str) -> Result<Arc<dyn ProbeHead>> {
        self.entries.get(name).cloned().ok_or_else(|| {
            Error::Config(format!(
                "unknown probe head `{name}` (registered: {})",
                self.entries.keys().cloned().collect::<Vec<_>>().join(", ")
            ))
        })
    }
}

/// Per-window embeddings of one labelled segment, in time order.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddedSegment {
    pub label: usize,
    pub frames: Vec<Vec<f32>>,
}

/// Stacks `context` neighbouring frames centred on `i`, clamped to the segment.
fn stack(frames: &[Vec<f32>], i: usize, context: usize, out: &mut Vec<f32>) {
    let half = (context / 2) as isize;
    let last = frames.len() as isize - 1;
    for o in 0..context as isize {
        let j = (i as isize + o - half).clamp(0, last) as usize;
        out.extend_from_slice(&frames[j]);
    }
}

/// A trained probe: head parameters plus the input standardization.
#[derive(Clone, Debug)]
pub struct Classifier {
    pub head: String,
    pub params: ParamSet<f32>,
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
    pub classes: usize,
    pub cfg: ProbeClassifierConfig,
}

fn head_inputs(segments: &[EmbeddedSegment], context: usize) -> (Vec<f32>, Vec<usize>) {
    let mut x = Vec::new();
    let mut y = Vec::new();
    for s in segments {
        for i in 0..s.frames.len() {
            stack(&s.frames, i, context, &mut x);
            y.push(s.label);
        }
    }
    (x, y)
}

/// Cross-entropy training of a probe head on per-window embeddings; each
/// window carries the label of its segment.
pub fn train_probe(
    segments: &[EmbeddedSegment],
    classes: usize,
    cfg: &ProbeClassifierConfig,
    heads: &HeadRegistry,
    seed: u64,
) -> Result<Classifier> {
    let head = heads.get(&cfg.head)?;
    let dim = segments
        .iter()
        .flat_map(|s| s.frames.first())
        .map(Vec::len)
        .next()
        .ok_or_else(|| Error::Probe("no training frames".into()))?;
    let mut seen = vec![false; classes];
    for s in segments {
        if s.label >= classes {
            return Err(Error::Probe(format!("label {} out of range for {classes} classes", s.label)));
        }
        seen[s.label] |= !s.frames.is_empty();
    }
    if let Some(c) = seen.iter().position(|s| !s) {
        return Err(Error::Probe(format!("class {c} has no training examples")));
    }
    let context = head.context(cfg);
    let width = context * dim;
    let (mut x, y) = head_inputs(segments, context);
    let n = y.len();

    let mut sum = vec![0.0f64; dim];
    let mut sq = vec![0.0f64; dim];
    for row in x.chunks_exact(dim) {
        for (i, v) in row.iter().enumerate() {
            sum[i] += *v as f64;
            sq[i] += (*v as f64).powi(2);
        }
    }
    let rows = (n * context) as f64;
    let mean: Vec<f32> = sum.iter().map(|s| (s / rows) as f32).collect();
    let std: Vec<f32> = sq
        .iter()
        .zip(&mean)
        .map(|(s, m)| ((s / rows - (*m as f64).powi(2)).max(0.0).sqrt().max(1e-6)) as f32)
        .collect();
    standardize(&mut x, &mean, &std);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = head.init(dim, classes, cfg, &mut rng)?;
    let optim = OptimConfig {
        lr: cfg.lr,
        ..OptimConfig::default()
    };
    let mut adam = AdamState::default();
    let mut order: Vec<usize> = (0..n).collect();
    let batch = cfg.batch_size.max(1).min(n);
    let mut step = 0u64;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for idx in order.chunks(batch) {
            let mut data = Vec::with_capacity(idx.len() * width);
            let mut labels = Vec::with_capacity(idx.len());
            for &i in idx {
                data.extend_from_slice(&x[i * width..(i + 1) * width]);
                labels.push(y[i]);
            }
            let mut g = Graph::<f32>::new();
            let input = g.input(Tensor::new([idx.len(), context, dim], data)?);
            let logits = head.logits(&mut g, &params, input, cfg)?;
            let loss = g.softmax_cross_entropy(logits, &labels)?;
            g.backward(loss)?;
            params.zero_grads();
            g.export_grads(&mut params)?;
            step += 1;
            adam_step(&mut params, &mut adam, &optim, step)?;
        }
    }
    params.zero_grads();
    Ok(Classifier {
        head: cfg.head.clone(),
        params,
        mean,
        std,
        classes,
        cfg: cfg.clone(),
    })
}

fn standardize(x: &mut [f32], mean: &[f32], std: &[f32]) {
    for row in x.chunks_exact_mut(mean.len()) {
        for ((v, m), s) in row.iter_mut().zip(mean).zip(std) {
            *v = (*v - m) / s;
        }
    }
}

impl Classifier {
    /// Log posteriors for each frame of a segment.
    pub fn frame_log_posteriors(&self, frames: &[Vec<f32>], heads: &HeadRegistry) -> Result<Vec<Vec<f64>>> {
        if frames.is_empty() {
            return Ok(Vec::new());
        }
        let head = heads.get(&self.head)?;
        let context = head.context(&self.cfg);
        let dim = self.mean.len();
        let mut x = Vec::with_capacity(frames.len() * context * dim);
        for i in 0..frames.len() {
            stack(frames, i, context, &mut x);
        }
        standardize(&mut x, &self.mean, &self.std);
        let mut g = Graph::<f32>::new();
        let input = g.input(Tensor::new([frames.len(), context, dim], x)?);
        let logits = head.logits(&mut g, &self.params, input, &self.cfg)?;
        Ok(g.value(logits)
            .data()
            .chunks_exact(self.classes)
            .map(log_softmax)
            .collect())
    }
}

/// Argmax over classes of summed frame log posteriors; ties go to the lowest index.
pub fn classify_segment(frame_log_posteriors: &[Vec<f64>]) -> Result<usize> {
    let first = frame_log_posteriors
        .first()
        .ok_or_else(|| Error::Probe("cannot classify an empty segment".into()))?;
    let mut total = vec![0.0f64; first.len()];
    for frame in frame_log_posteriors {
        if frame.len() != total.len() {
            return Err(Error::Probe("frames disagree on the number of classes".into()));
        }
        for (t, v) in total.iter_mut().zip(frame) {
            *t += v;
        }
    }
    let mut best = 0;
    for (i, v) in total.iter().enumerate() {
        if *v > total[best] {
            best = i;
        }
    }
    Ok(best)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassCount {
    pub label: String,
    pub total: usize,
    pub correct: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub task: String,
    pub model: Option<String>,
    pub head: String,
    pub accuracy: f64,
    pub correct: usize,
    pub total: usize,
    /// Uniform-guess accuracy, `1 / classes`.
    pub chance: f64,
    pub shuffled_labels: bool,
    pub per_class: Vec<ClassCount>,
    /// Rows are true classes, columns predictions.
    pub confusion: Vec<Vec<usize>>,
    pub seed: u64,
    pub config_digest: String,
}

impl ProbeReport {
    /// Binomial standard error of an accuracy at chance level.
    pub fn chance_standard_error(&self) -> f64 {
        (self.chance * (1.0 - self.chance) / self.total.max(1) as f64).sqrt()
    }
}

/// What a probe predicts.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProbeTarget {
    Phone,
    Speaker,
}

/// Labelled segments of the given utterances: phone segments, or whole
/// utterances labelled with their speaker.
pub fn labelled_segments(corpus: &Corpus, utterances: &[usize], target: ProbeTarget) -> Vec<LabelledSegment> {
    let mut out = Vec::new();
    for &u in utterances {
        let info = &corpus.index.utterances[u];
        match target {
            ProbeTarget::Phone => out.extend(info.phones.iter().cloned()),
            ProbeTarget::Speaker => out.push(LabelledSegment {
                utterance_id: info.id.clone(),
                start_frame: 0,
                end_frame: corpus.features[u].n_frames(),
                label: info.speaker.clone(),
            }),
        }
    }
    out
}

/// Embeds every window of every segment with the model's encoder.
pub fn embed_segments(
    model: &Model,
    corpus: &Corpus,
    segments: &[LabelledSegment],
    classes: &[String],
) -> Result<Vec<EmbeddedSegment>> {
    let objective = ObjectiveRegistry::default().for_kind(model.kind)?;
    let mut out = Vec::with_capacity(segments.len());
    let mut pending = Vec::new();
    let mut owners = Vec::new();
    let flush = |pending: &mut Vec<crate::segmenter::WindowSample>, owners: &mut Vec<usize>, out: &mut Vec<EmbeddedSegment>| -> Result<()> {
        let inputs: Vec<&[f32]> = pending.iter().map(|w| objective.encoder_input(w)).collect();
        let emb = model.embed_batch(&inputs)?;
        for (e, o) in emb.into_iter().zip(owners.iter()) {
            out[*o].frames.push(e);
        }
        pending.clear();
        owners.clear();
        Ok(())
    };
    let mut normalized = None;
    for seg in segments {
        let u = corpus
            .index
            .position(&seg.utterance_id)
            .ok_or_else(|| Error::Data(format!("segment refers to unknown utterance {}", seg.utterance_id)))?;
        let feats = match &model.norm {
            Some(norm) => {
                if normalized.as_ref().is_none_or(|(i, _)| *i != u) {
                    normalized = Some((u, norm.apply(&corpus.features[u])));
                }
                &normalized.as_ref().expect("just set").1
            }
            None => &corpus.features[u],
        };
        let label = classes
            .iter()
            .position(|c| *c == seg.label)
            .ok_or_else(|| Error::Probe(format!("label `{}` is not a known class", seg.label)))?;
        out.push(EmbeddedSegment {
            label,
            frames: Vec::new(),
        });
        for w in segment_windows(feats, seg, &model.window) {
            pending.push(w);
            owners.push(out.len() - 1);
        }
        if pending.len() >= 512 {
            flush(&mut pending, &mut owners, &mut out)?;
        }
    }
    flush(&mut pending, &mut owners, &mut out)?;
    Ok(out)
}

/// One probing run: embed, fit the probe on `roles.clf_train`, score segments
/// of `roles.test`.
#[derive(Clone, Debug)]
pub struct ProbeRun<'a> {
    pub task: String,
    pub target: ProbeTarget,
    pub roles: &'a TaskRoles,
    pub cfg: &'a ProbeClassifierConfig,
    pub seed: u64,
    /// Permute segment labels of the classifier training set (leakage control).
    pub shuffle_labels: bool,
}

pub fn run_probe(model: &Model, corpus: &Corpus, run: &ProbeRun, heads: &HeadRegistry) -> Result<ProbeReport> {
    let train_segs = labelled_segments(corpus, &run.roles.clf_train, run.target);
    let test_segs = labelled_segments(corpus, &run.roles.test, run.target);
    let mut classes: Vec<String> = train_segs.iter().map(|s| s.label.clone()).collect();
    if run.target == ProbeTarget::Phone {
        classes.extend(corpus.index.phone_labels());
    }
    classes.sort();
    classes.dedup();
    for s in &test_segs {
        if !classes.contains(&s.label) {
            return Err(Error::Probe(format!(
                "test label `{}` never appears in classifier training",
                s.label
            )));
        }
    }
    let mut train = embed_segments(model, corpus, &train_segs, &classes)?;
    if run.shuffle_labels {
        let mut labels: Vec<usize> = train.iter().map(|s| s.label).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(run.seed ^ 0x5EED_5EED);
        labels.shuffle(&mut rng);
        for (s, l) in train.iter_mut().zip(labels) {
            s.label = l;
        }
    }
    let test = embed_segments(model, corpus, &test_segs, &classes)?;
    let clf = train_probe(&train, classes.len(), run.cfg, heads, run.seed)?;
    let mut confusion = vec![vec![0usize; classes.len()]; classes.len()];
    for seg in &test {
        let post = clf.frame_log_posteriors(&seg.frames, heads)?;
        let guess = classify_segment(&post)?;
        confusion[seg.label][guess] += 1;
    }
    let total: usize = confusion.iter().flatten().sum();
    let correct: usize = (0..classes.len()).map(|i| confusion[i][i]).sum();
    let per_class = classes
        .iter()
        .enumerate()
        .map(|(i, label)| ClassCount {
            label: label.clone(),
            total: confusion[i].iter().sum(),
            correct: confusion[i][i],
        })
        .collect();
    let digest = Sha256::digest(serde_json::to_vec(run.cfg)?);
    Ok(ProbeReport {
        task: run.task.clone(),
        model: Some(model.kind.to_string()),
        head: run.cfg.head.clone(),
        accuracy: if total == 0 { 0.0 } else { correct as f64 / total as f64 },
        correct,
        total,
        chance: 1.0 / classes.len() as f64,
        shuffled_labels: run.shuffle_labels,
        per_class,
        confusion,
        seed: run.seed,
        config_digest: hex::encode(digest),
    })
}

/// Phone classification over known phone boundaries.
pub fn evaluate_phone(
    model: &Model,
    corpus: &Corpus,
    cfg: &ProbeClassifierConfig,
    seed: u64,
    heads: &HeadRegistry,
) -> Result<ProbeReport> {
    let roles = phone_roles(&corpus.index);
    let run = ProbeRun {
        task: "phone".into(),
        target: ProbeTarget::Phone,
        roles: &roles,
        cfg,
        seed,
        shuffle_labels: false,
    };
    run_probe(model, corpus, &run, heads)
}

/// Speaker recognition over whole utterances for one task of the block split.
pub fn evaluate_speaker(
    model: &Model,
    corpus: &Corpus,
    plan: &SplitPlan,
    task: SpeakerTask,
    cfg: &ProbeClassifierConfig,
    seed: u64,
    heads: &HeadRegistry,
) -> Result<ProbeReport> {
    let roles = plan.roles(task);
    let run = ProbeRun {
        task: format!("speaker-{task}"),
        target: ProbeTarget::Speaker,
        roles: &roles,
        cfg,
        seed,
        shuffle_labels: false,
    };
    run_probe(model, corpus, &run, heads)
}

/// Parameter varied by a sweep.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepParam {
    EmbedDim,
    NeighbourLen,
}

impl SweepParam {
    pub fn name(self) -> &'static str {
        match self {
            SweepParam::EmbedDim => "embed-dim",
            SweepParam::NeighbourLen => "neighbour-len",
        }
    }
}

impl FromStr for SweepParam {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "embed-dim" | "embed_dim" | "k" | "K" => Ok(SweepParam::EmbedDim),
            "neighbour-len" | "neighbour_len" | "n" | "N" => Ok(SweepParam::NeighbourLen),
            _ => Err(Error::Config(format!("unknown sweep parameter `{s}` (expected embed-dim or neighbour-len)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub param: String,
    pub value: usize,
    pub task: String,
    pub accuracy: f64,
    pub wall_ms: u64,
}

/// Runs one train-and-probe cycle per value.
pub fn sweep(
    param: SweepParam,
    values: &[usize],
    mut cycle: impl FnMut(usize) -> Result<ProbeReport>,
) -> Result<Vec<SweepRow>> {
    if values.is_empty() {
        return Err(Error::Config("sweep needs at least one value".into()));
    }
    let mut rows = Vec::with_capacity(values.len());
    for &v in values {
        let start = std::time::Instant::now();
        let report = cycle(v)?;
        rows.push(SweepRow {
            param: param.name().into(),
            value: v,
            task: report.task,
            accuracy: report.accuracy,
            wall_ms: start.elapsed().as_millis() as u64,
        });
    }
    Ok(rows)
}

pub fn write_sweep_csv(out: &mut dyn Write, rows: &[SweepRow]) -> std::io::Result<()> {
    writeln!(out, "param,value,task,accuracy,wall_ms")?;
    for r in rows {
        writeln!(out, "{},{},{},{:.6},{}", r.param, r.value, r.task, r.accuracy, r.wall_ms)?;
    }
    Ok(())
}
