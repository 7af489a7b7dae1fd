use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoders::{ArchConfig, LossConfig, ModelKind};
use crate::error::{Error, Result};
use crate::frontend::DspConfig;
use crate::probe::ProbeClassifierConfig;
use crate::segmenter::WindowConfig;
use crate::synthcorpus::SynthSpec;
use crate::trainer::OptimConfig;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub corpus: Option<PathBuf>,
    pub features: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

/// Every knob of a run in one document. Unknown keys are rejected at any depth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelKind,
    pub dsp: DspConfig,
    pub window: WindowConfig,
    pub arch: ArchConfig,
    pub loss: LossConfig,
    pub optim: OptimConfig,
    pub probe: ProbeClassifierConfig,
    pub synth: SynthSpec,
    pub paths: PathsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 17,
            model: ModelKind::Cjfa,
            dsp: DspConfig::default(),
            window: WindowConfig::default(),
            arch: ArchConfig::default(),
            loss: LossConfig::default(),
            optim: OptimConfig::default(),
            probe: ProbeClassifierConfig::default(),
            synth: SynthSpec::default(),
            paths: PathsConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        self.dsp.validate()?;
        self.window.validate()?;
        self.arch.validate()?;
        self.optim.validate()?;
        self.synth.validate()?;
        if self.loss.kl_weight < 0.0 {
            return Err(Error::Config("kl_weight must be non-negative".into()));
        }
        if self.probe.hidden == 0 || self.probe.batch_size == 0 {
            return Err(Error::Config("probe hidden units and batch size must be >= 1".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 of the canonical JSON encoding, hex.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("config serializes")))
    }

    pub fn write_snapshot(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_json() + "\n").map_err(|e| Error::io(path, e))
    }
}
