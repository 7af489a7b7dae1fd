//! Command-line front end.

use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use gradcore::GradCheckConfig;

use super::config::RunConfig;
use super::gradsuite::full_suite;
use super::{
    export_embeddings, load_checkpoint, load_corpus, run_training, save_features, write_synthetic, featurize,
    SNAPSHOT_FILE,
};
use crate::encoders::Model;
use crate::error::{Error, Result};
use crate::probe::{
    evaluate_phone, evaluate_speaker, make_splits, phone_roles, run_probe, sweep, write_sweep_csv, HeadRegistry,
    ProbeReport, ProbeRun, ProbeTarget, SpeakerTask, SweepParam,
};
use crate::segmenter::{import_timit, load_manifest, write_manifest, Corpus};

#[derive(Debug, Parser)]
#[command(name = "ctxembed", version, about = "Contextual acoustic embeddings: train, embed and probe")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

/// Flags shared by every subcommand; each overrides the matching config value.
#[derive(Debug, Args)]
pub struct Common {
    /// Run configuration (JSON).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true, value_parser = ["vae", "cjfs", "cjfa"])]
    pub model: Option<String>,
    #[arg(long, global = true)]
    pub target_len: Option<usize>,
    #[arg(long, global = true)]
    pub neighbour_len: Option<usize>,
    #[arg(long, global = true)]
    pub embed_dim: Option<usize>,
    #[arg(long, global = true)]
    pub steps: Option<usize>,
    /// Output file or directory, depending on the subcommand.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CorpusArgs {
    /// JSON-lines manifest; defaults to `paths.corpus` of the config.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Feature cache; defaults to `paths.features`, then `features.cjfe` beside the manifest.
    #[arg(long)]
    pub features: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ProbeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Probe classifier settings (JSON), replacing the config's `probe` section.
    #[arg(long)]
    pub task_config: Option<PathBuf>,
    /// Permute classifier training labels (leakage control).
    #[arg(long)]
    pub shuffle_labels: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Compute log-mel features for a manifest into a feature cache.
    Featurize {
        #[command(flatten)]
        corpus: CorpusArgs,
    },
    /// Write a synthetic corpus (manifest plus feature cache) to --out.
    SynthData,
    /// Train a model; writes checkpoint, metrics and config to --out.
    Train {
        #[command(flatten)]
        corpus: CorpusArgs,
        /// Utterances to train on: the phone-task training subset, the
        /// embedding-training blocks of a speaker task, or everything.
        #[arg(long, default_value = "phone", value_parser = ["phone", "a", "b", "c", "all"])]
        task: String,
    },
    /// Export per-window embeddings as CSV.
    Embed {
        #[command(flatten)]
        corpus: CorpusArgs,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Phone classification over known boundaries; report JSON on stdout.
    ProbePhone {
        #[command(flatten)]
        corpus: CorpusArgs,
        #[command(flatten)]
        probe: ProbeArgs,
    },
    /// Speaker recognition for one task; report JSON on stdout.
    ProbeSpeaker {
        #[command(flatten)]
        corpus: CorpusArgs,
        #[command(flatten)]
        probe: ProbeArgs,
        #[arg(long, default_value = "a")]
        task: String,
    },
    /// Train and probe once per value of one parameter; CSV to --out or stdout.
    Sweep {
        #[command(flatten)]
        corpus: CorpusArgs,
        /// embed-dim or neighbour-len.
        #[arg(long)]
        param: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<usize>,
        /// phone, a, b or c.
        #[arg(long, default_value = "phone")]
        task: String,
    },
    /// Finite-difference check of every operator and objective.
    Gradcheck {
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
    /// Build a manifest from a TIMIT-layout directory tree.
    ImportTimit {
        #[arg(long)]
        root: PathBuf,
    },
}

fn resolve_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
        cfg.synth.seed = s;
    }
    if let Some(m) = &common.model {
        cfg.model = m.parse()?;
    }
    if let Some(v) = common.target_len {
        cfg.window.target_len = v;
    }
    if let Some(v) = common.neighbour_len {
        cfg.window.neighbour_len = v;
    }
    if let Some(v) = common.embed_dim {
        cfg.arch.embed_dim = v;
    }
    if let Some(v) = common.steps {
        cfg.optim.max_steps = v;
    }
    if let Some(o) = &common.out {
        cfg.paths.out = Some(o.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn corpus_from(args: &CorpusArgs, cfg: &mut RunConfig) -> Result<Corpus> {
    if let Some(c) = &args.corpus {
        cfg.paths.corpus = Some(c.clone());
    }
    if let Some(f) = &args.features {
        cfg.paths.features = Some(f.clone());
    }
    let manifest = cfg
        .paths
        .corpus
        .clone()
        .ok_or_else(|| Error::Config("no corpus: pass --corpus or set paths.corpus".into()))?;
    load_corpus(&manifest, cfg.paths.features.as_deref(), &cfg.dsp)
}

fn out_path(cfg: &RunConfig, fallback: &str) -> PathBuf {
    cfg.paths.out.clone().unwrap_or_else(|| PathBuf::from(fallback))
}

/// Snapshot beside a file output: `<stem>.config.json` in the same directory.
fn snapshot_beside(cfg: &RunConfig, file: &Path) -> Result<()> {
    let stem = file.file_stem().map_or("run".into(), |s| s.to_string_lossy().into_owned());
    cfg.write_snapshot(&file.with_file_name(format!("{stem}.config.json")))
}

fn create_file(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

fn load_model(path: &Path, common: &Common, cfg: &RunConfig) -> Result<Model> {
    let expect = common.model.is_some().then_some((cfg.model, &cfg.arch));
    Ok(load_checkpoint(path, expect)?.0)
}

fn probe_cfg(args: &ProbeArgs, cfg: &mut RunConfig) -> Result<()> {
    if let Some(p) = &args.task_config {
        let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
        cfg.probe = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
    }
    cfg.validate()
}

fn emit_report(report: &ProbeReport, cfg: &RunConfig) -> Result<()> {
    let json = serde_json::to_string_pretty(report)?;
    println!("{json}");
    if let Some(out) = &cfg.paths.out {
        let mut f = create_file(out)?;
        writeln!(f, "{json}").map_err(|e| Error::io(out, e))?;
        snapshot_beside(cfg, out)?;
    }
    Ok(())
}

/// Utterances a model should be trained on for a probing task.
fn training_positions(corpus: &Corpus, task: &str, seed: u64) -> Result<Vec<usize>> {
    Ok(match task {
        "all" => (0..corpus.len()).collect(),
        "phone" => phone_roles(&corpus.index).embed_train,
        t => make_splits(&corpus.index, seed)?.roles(t.parse::<SpeakerTask>()?).embed_train,
    })
}

fn probe_once(model: &Model, corpus: &Corpus, task: &str, cfg: &RunConfig, shuffle: bool) -> Result<ProbeReport> {
    let heads = HeadRegistry::default();
    if task == "phone" {
        if !shuffle {
            return evaluate_phone(model, corpus, &cfg.probe, cfg.seed, &heads);
        }
        let roles = phone_roles(&corpus.index);
        let run = ProbeRun {
            task: "phone".into(),
            target: ProbeTarget::Phone,
            roles: &roles,
            cfg: &cfg.probe,
            seed: cfg.seed,
            shuffle_labels: true,
        };
        return run_probe(model, corpus, &run, &heads);
    }
    let t: SpeakerTask = task.parse()?;
    let plan = make_splits(&corpus.index, cfg.seed)?;
    if !shuffle {
        return evaluate_speaker(model, corpus, &plan, t, &cfg.probe, cfg.seed, &heads);
    }
    let roles = plan.roles(t);
    let run = ProbeRun {
        task: format!("speaker-{t}"),
        target: ProbeTarget::Speaker,
        roles: &roles,
        cfg: &cfg.probe,
        seed: cfg.seed,
        shuffle_labels: true,
    };
    run_probe(model, corpus, &run, &heads)
}

pub fn run(cli: Cli) -> Result<()> {
    let mut cfg = resolve_config(&cli.common)?;
    match cli.command {
        Command::Featurize { corpus } => {
            if let Some(c) = corpus.corpus {
                cfg.paths.corpus = Some(c);
            }
            let manifest = cfg
                .paths
                .corpus
                .clone()
                .ok_or_else(|| Error::Config("no corpus: pass --corpus or set paths.corpus".into()))?;
            let index = load_manifest(&manifest, cfg.dsp.shift_samples() as u64, true)?;
            let feats = featurize(&index, &cfg.dsp)?;
            let out = out_path(&cfg, "features.cjfe");
            save_features(&out, &feats, &cfg.dsp)?;
            snapshot_beside(&cfg, &out)?;
            eprintln!("wrote {} utterances to {}", feats.len(), out.display());
        }
        Command::SynthData => {
            let dir = out_path(&cfg, "synth");
            let synth = write_synthetic(&cfg.synth, &cfg.dsp, &dir)?;
            cfg.paths.corpus = Some(dir.join(super::MANIFEST_FILE));
            cfg.write_snapshot(&dir.join(SNAPSHOT_FILE))?;
            eprintln!(
                "wrote {} utterances to {} (oracle phone accuracy {:.3})",
                synth.corpus.len(),
                dir.display(),
                synth.oracle_phone_accuracy()
            );
        }
        Command::Train { corpus, task } => {
            let full = corpus_from(&corpus, &mut cfg)?;
            let subset = full.subset(&training_positions(&full, &task, cfg.seed)?)?;
            let dir = out_path(&cfg, "run");
            let (_, report) = run_training(&cfg, &subset, Some(&dir))?;
            eprintln!(
                "trained {} on {} utterances, {} steps, final loss {:.4}; checkpoint {}",
                cfg.model,
                subset.len(),
                report.records.len(),
                report.smoothed(10, true).unwrap_or(f64::NAN),
                dir.join(super::CHECKPOINT_FILE).display()
            );
        }
        Command::Embed { corpus, checkpoint } => {
            let data = corpus_from(&corpus, &mut cfg)?;
            let model = load_model(&checkpoint, &cli.common, &cfg)?;
            let out = out_path(&cfg, "embeddings.csv");
            let mut w = create_file(&out)?;
            let rows = export_embeddings(&model, &data, &mut w)?;
            w.flush().map_err(|e| Error::io(&out, e))?;
            snapshot_beside(&cfg, &out)?;
            eprintln!("wrote {rows} embeddings to {}", out.display());
        }
        Command::ProbePhone { corpus, probe } => {
            let data = corpus_from(&corpus, &mut cfg)?;
            probe_cfg(&probe, &mut cfg)?;
            let model = load_model(&probe.checkpoint, &cli.common, &cfg)?;
            let report = probe_once(&model, &data, "phone", &cfg, probe.shuffle_labels)?;
            emit_report(&report, &cfg)?;
        }
        Command::ProbeSpeaker { corpus, probe, task } => {
            let data = corpus_from(&corpus, &mut cfg)?;
            probe_cfg(&probe, &mut cfg)?;
            task.parse::<SpeakerTask>()?;
            let model = load_model(&probe.checkpoint, &cli.common, &cfg)?;
            let report = probe_once(&model, &data, &task, &cfg, probe.shuffle_labels)?;
            emit_report(&report, &cfg)?;
        }
        Command::Sweep {
            corpus,
            param,
            values,
            task,
        } => {
            let param: SweepParam = param.parse()?;
            if task != "phone" {
                task.parse::<SpeakerTask>()?;
            }
            let data = corpus_from(&corpus, &mut cfg)?;
            let subset = data.subset(&training_positions(&data, &task, cfg.seed)?)?;
            let rows = sweep(param, &values, |v| {
                let mut run_cfg = cfg.clone();
                match param {
                    SweepParam::EmbedDim => run_cfg.arch.embed_dim = v,
                    SweepParam::NeighbourLen => run_cfg.window.neighbour_len = v,
                }
                let (model, _) = run_training(&run_cfg, &subset, None)?;
                probe_once(&model, &data, &task, &run_cfg, false)
            })?;
            match &cfg.paths.out {
                Some(out) => {
                    let mut w = create_file(out)?;
                    write_sweep_csv(&mut w, &rows).map_err(|e| Error::io(out, e))?;
                    w.flush().map_err(|e| Error::io(out, e))?;
                    snapshot_beside(&cfg, out)?;
                }
                None => write_sweep_csv(&mut io::stdout().lock(), &rows).map_err(|e| Error::io("stdout", e))?,
            }
        }
        Command::Gradcheck { tolerance } => {
            let gc = GradCheckConfig {
                tolerance,
                seed: cfg.seed,
                ..GradCheckConfig::default()
            };
            let entries = full_suite(&gc)?;
            for e in &entries {
                println!(
                    "{} {:<44} max_rel_err {:.3e} checked {} skipped {}",
                    if e.passed { "PASS" } else { "FAIL" },
                    e.name,
                    e.max_error,
                    e.checked,
                    e.skipped
                );
            }
            if let Some(out) = &cfg.paths.out {
                let mut w = create_file(out)?;
                writeln!(w, "{}", serde_json::to_string_pretty(&entries)?).map_err(|e| Error::io(out, e))?;
                snapshot_beside(&cfg, out)?;
            }
            let failed: Vec<&str> = entries.iter().filter(|e| !e.passed).map(|e| e.name.as_str()).collect();
            if !failed.is_empty() {
                return Err(Error::Graph(gradcore::GradError::Invalid(format!(
                    "gradient check failed for {}",
                    failed.join(", ")
                ))));
            }
        }
        Command::ImportTimit { root } => {
            let root = fs::canonicalize(&root).map_err(|e| Error::io(&root, e))?;
            let mut records = import_timit(&root)?;
            // Absolute paths keep the manifest valid wherever it is written.
            for r in &mut records {
                r.audio_path = root.join(&r.audio_path).to_string_lossy().into_owned();
            }
            let out = out_path(&cfg, "manifest.jsonl");
            if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
            write_manifest(&out, &records)?;
            snapshot_beside(&cfg, &out)?;
            eprintln!("wrote {} records to {}", records.len(), out.display());
        }
    }
    Ok(())
}

