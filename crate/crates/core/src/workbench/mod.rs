//! Configuration, persistence and the pipeline stages behind the CLI.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod gradsuite;

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::encoders::{Model, ObjectiveRegistry};
use crate::error::{Error, Result};
use crate::frontend::{load_wav, log_mel, DspConfig, FeatureMatrix};
use crate::segmenter::{load_manifest, write_manifest, Corpus, CorpusIndex, WindowSample};
use crate::synthcorpus::{generate, SynthCorpus, SynthSpec};
use crate::trainer::{train, TrainReport, TrainSetup};

pub use checkpoint::{load_checkpoint, load_features, save_checkpoint, save_features};
pub use config::RunConfig;

pub const CHECKPOINT_FILE: &str = "checkpoint.cjfe";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const SNAPSHOT_FILE: &str = "resolved_config.json";
pub const MANIFEST_FILE: &str = "manifest.jsonl";
/// Feature cache looked up beside a manifest when none is given explicitly.
pub const FEATURES_FILE: &str = "features.cjfe";

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Reads and featurizes every utterance of the index, resampling down to the
/// configured rate when needed.
pub fn featurize(index: &CorpusIndex, dsp: &DspConfig) -> Result<Vec<FeatureMatrix>> {
    dsp.validate()?;
    index
        .utterances
        .iter()
        .map(|u| {
            let mut audio = load_wav(&u.audio_path)?;
            if audio.sample_rate != dsp.sample_rate {
                audio = audio.decimate(dsp.sample_rate)?;
            }
            log_mel(&audio, dsp, &u.id)
        })
        .collect()
}

/// Loads a manifest with its features: from `features` if given, else from a
/// `features.cjfe` beside the manifest, else by featurizing the audio.
pub fn load_corpus(manifest: &Path, features: Option<&Path>, dsp: &DspConfig) -> Result<Corpus> {
    let shift = dsp.shift_samples() as u64;
    let beside = manifest.with_file_name(FEATURES_FILE);
    let cache = features.map(Path::to_path_buf).or_else(|| beside.is_file().then_some(beside));
    match cache {
        Some(path) => {
            let index = load_manifest(manifest, shift, false)?;
            Corpus::new(index, load_features(&path)?)
        }
        None => {
            let index = load_manifest(manifest, shift, true)?;
            let feats = featurize(&index, dsp)?;
            Corpus::new(index, feats)
        }
    }
}

/// Generates a synthetic corpus and stores it as `manifest.jsonl` plus a
/// feature cache in `dir`.
pub fn write_synthetic(spec: &SynthSpec, dsp: &DspConfig, dir: &Path) -> Result<SynthCorpus> {
    let synth = generate(spec)?;
    create_dir(dir)?;
    let records = synth.corpus.index.to_records(dsp.shift_samples() as u64);
    write_manifest(&dir.join(MANIFEST_FILE), &records)?;
    save_features(&dir.join(FEATURES_FILE), &synth.corpus.features, dsp)?;
    Ok(synth)
}

/// Trains the configured model. With `out_dir`, writes the checkpoint, the
/// per-step metrics and the resolved configuration there.
pub fn run_training(cfg: &RunConfig, corpus: &Corpus, out_dir: Option<&Path>) -> Result<(Model, TrainReport)> {
    cfg.validate()?;
    let objective = ObjectiveRegistry::default().for_kind(cfg.model)?;
    let setup = TrainSetup {
        objective: objective.as_ref(),
        arch: &cfg.arch,
        window: &cfg.window,
        loss: &cfg.loss,
        optim: &cfg.optim,
        standardize: cfg.dsp.standardize,
        seed: cfg.seed,
    };
    let Some(dir) = out_dir else {
        return train(corpus, &setup, None);
    };
    create_dir(dir)?;
    let metrics_path = dir.join(METRICS_FILE);
    let file = File::create(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
    let mut metrics = BufWriter::new(file);
    let (model, mut report) = train(corpus, &setup, Some(&mut metrics))?;
    metrics.flush().map_err(|e| Error::io(&metrics_path, e))?;
    let ckpt = dir.join(CHECKPOINT_FILE);
    save_checkpoint(&ckpt, &model, &cfg.digest())?;
    cfg.write_snapshot(&dir.join(SNAPSHOT_FILE))?;
    report.checkpoint = Some(ckpt);
    Ok((model, report))
}

/// Writes one CSV row per fully-contextualized window: utterance id, target
/// start frame, the phone covering the target centre (empty if unknown) and
/// the embedding. Returns the number of rows.
pub fn export_embeddings(model: &Model, corpus: &Corpus, out: &mut dyn Write) -> Result<usize> {
    let objective = ObjectiveRegistry::default().for_kind(model.kind)?;
    let k = model.arch.embed_dim;
    let mut header = String::from("utterance_id,t,label");
    for i in 0..k {
        header.push_str(&format!(",e{i}"));
    }
    let io = |e| Error::io("embedding export", e);
    writeln!(out, "{header}").map_err(io)?;
    let centre = model.window.target_len / 2;
    let mut rows = 0;
    for (info, feats) in corpus.index.utterances.iter().zip(&corpus.features) {
        let feats = match &model.norm {
            Some(norm) => norm.apply(feats),
            None => feats.clone(),
        };
        let windows: Vec<WindowSample> = model
            .window
            .positions(feats.n_frames())
            .filter_map(|t| WindowSample::at(&feats, t, &model.window))
            .collect();
        for chunk in windows.chunks(512) {
            let inputs: Vec<&[f32]> = chunk.iter().map(|w| objective.encoder_input(w)).collect();
            for (w, e) in chunk.iter().zip(model.embed_batch(&inputs)?) {
                let frame = w.t + centre;
                let label = info
                    .phones
                    .iter()
                    .find(|p| p.start_frame <= frame && frame < p.end_frame)
                    .map_or("", |p| p.label.as_str());
                let mut line = format!("{},{},{label}", info.id, w.t);
                for v in e {
                    line.push_str(&format!(",{v}"));
                }
                writeln!(out, "{line}").map_err(io)?;
                rows += 1;
            }
        }
    }
    Ok(rows)
}
