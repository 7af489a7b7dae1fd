//! Binary container for model checkpoints and feature caches.
//!
//! Layout: `b"CJFE"`, format version (u32 LE), header length (u64 LE), JSON
//! header, then little-endian f32 arrays concatenated in directory order.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use gradcore::{ParamSet, RunningStats, Tensor};
use serde::{Deserialize, Serialize};

use crate::encoders::{ArchConfig, Model, ModelKind};
use crate::error::{Error, Result};
use crate::frontend::{DspConfig, FeatureMatrix, FeatureNorm, N_MELS};
use crate::segmenter::WindowConfig;

pub const MAGIC: [u8; 4] = *b"CJFE";
pub const VERSION: u32 = 1;
const PREAMBLE: usize = 16;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArrayEntry {
    pub name: String,
    pub kind: String,
    pub shape: Vec<usize>,
    /// Byte offset into the payload.
    pub offset: u64,
    /// Byte length.
    pub len: u64,
    pub crc32: u32,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    meta: serde_json::Value,
    directory: Vec<ArrayEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub kind: String,
    pub value: Tensor<f32>,
}

/// Decoded container: free-form metadata plus named arrays in stored order.
#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub meta: serde_json::Value,
    pub arrays: Vec<NamedArray>,
}

impl Container {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut payload = Vec::new();
        let mut directory = Vec::with_capacity(self.arrays.len());
        for a in &self.arrays {
            let start = payload.len();
            for v in a.value.data() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
            directory.push(ArrayEntry {
                name: a.name.clone(),
                kind: a.kind.clone(),
                shape: a.value.dims().to_vec(),
                offset: start as u64,
                len: (payload.len() - start) as u64,
                crc32: crc32fast::hash(&payload[start..]),
            });
        }
        let header = serde_json::to_vec(&Header {
            meta: self.meta.clone(),
            directory,
        })?;
        let mut out = Vec::with_capacity(PREAMBLE + header.len() + payload.len());
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 {
            return Err(Error::Truncated(format!("{} bytes, no magic", bytes.len())));
        }
        let magic: [u8; 4] = bytes[..4].try_into().expect("four bytes");
        if magic != MAGIC {
            return Err(Error::BadMagic(magic));
        }
        if bytes.len() < PREAMBLE {
            return Err(Error::Truncated(format!("{} bytes, preamble needs {PREAMBLE}", bytes.len())));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("four bytes"));
        if version != VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("eight bytes")) as usize;
        let body = &bytes[PREAMBLE..];
        if body.len() < header_len {
            return Err(Error::Truncated(format!(
                "header claims {header_len} bytes, {} available",
                body.len()
            )));
        }
        let header: Header = serde_json::from_slice(&body[..header_len])
            .map_err(|e| Error::Checkpoint(format!("malformed header: {e}")))?;
        let payload = &body[header_len..];
        let mut arrays = Vec::with_capacity(header.directory.len());
        let mut expected_offset = 0u64;
        for e in header.directory {
            let numel: usize = e.shape.iter().product();
            if e.len != 4 * numel as u64 || e.offset != expected_offset {
                return Err(Error::Checkpoint(format!(
                    "array `{}`: directory offset/length inconsistent with shape {:?}",
                    e.name, e.shape
                )));
            }
            expected_offset += e.len;
            let end = (e.offset + e.len) as usize;
            if end > payload.len() {
                return Err(Error::Truncated(format!(
                    "array `{}` ends at byte {end}, payload has {}",
                    e.name,
                    payload.len()
                )));
            }
            let raw = &payload[e.offset as usize..end];
            if crc32fast::hash(raw) != e.crc32 {
                return Err(Error::Checksum(e.name));
            }
            let data = raw
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().expect("four bytes")))
                .collect();
            arrays.push(NamedArray {
                value: Tensor::new(e.shape, data)?,
                name: e.name,
                kind: e.kind,
            });
        }
        if expected_offset as usize != payload.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing payload bytes",
                payload.len() - expected_offset as usize
            )));
        }
        Ok(Container {
            meta: header.meta,
            arrays,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    fn take(&mut self, name: &str) -> Option<Tensor<f32>> {
        let i = self.arrays.iter().position(|a| a.name == name)?;
        Some(self.arrays.remove(i).value)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BnMeta {
    pub channels: usize,
    pub updates: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelMeta {
    pub format: String,
    pub run_digest: String,
    pub model_kind: ModelKind,
    pub arch: ArchConfig,
    pub window: WindowConfig,
    pub input_rows: usize,
    pub output_rows: usize,
    pub param_count: usize,
    pub batch_norm: BTreeMap<String, BnMeta>,
    pub standardized: bool,
}

pub fn model_container(model: &Model, run_digest: &str) -> Result<Container> {
    let meta = ModelMeta {
        format: "model".into(),
        run_digest: run_digest.into(),
        model_kind: model.kind,
        arch: model.arch.clone(),
        window: model.window.clone(),
        input_rows: model.input_rows,
        output_rows: model.output_rows,
        param_count: model.param_count(),
        batch_norm: model
            .bn
            .iter()
            .map(|(k, s)| {
                (
                    k.clone(),
                    BnMeta {
                        channels: s.channels(),
                        updates: s.updates,
                    },
                )
            })
            .collect(),
        standardized: model.norm.is_some(),
    };
    let mut arrays: Vec<NamedArray> = model
        .params
        .iter()
        .map(|(name, t)| NamedArray {
            name: name.into(),
            kind: "param".into(),
            value: t.clone(),
        })
        .collect();
    for (layer, s) in &model.bn {
        for (suffix, v) in [("mean", &s.mean), ("var", &s.var)] {
            arrays.push(NamedArray {
                name: format!("bn.{layer}.{suffix}"),
                kind: format!("bn_{suffix}"),
                value: Tensor::new([v.len()], v.clone())?,
            });
        }
    }
    if let Some(norm) = &model.norm {
        for (suffix, v) in [("mean", &norm.mean), ("std", &norm.std)] {
            arrays.push(NamedArray {
                name: format!("norm.{suffix}"),
                kind: "norm".into(),
                value: Tensor::new([v.len()], v.clone())?,
            });
        }
    }
    Ok(Container {
        meta: serde_json::to_value(meta)?,
        arrays,
    })
}

pub fn model_from_container(mut c: Container) -> Result<(Model, ModelMeta)> {
    let meta: ModelMeta = serde_json::from_value(c.meta.clone())
        .map_err(|e| Error::Checkpoint(format!("not a model checkpoint: {e}")))?;
    if meta.format != "model" {
        return Err(Error::Checkpoint(format!("expected a model checkpoint, found `{}`", meta.format)));
    }
    let mut bn = BTreeMap::new();
    for (layer, m) in &meta.batch_norm {
        let missing = |s: &str| Error::Checkpoint(format!("missing array bn.{layer}.{s}"));
        let mean = c.take(&format!("bn.{layer}.mean")).ok_or_else(|| missing("mean"))?;
        let var = c.take(&format!("bn.{layer}.var")).ok_or_else(|| missing("var"))?;
        let mut s = RunningStats::new(m.channels);
        s.mean = mean.into_data();
        s.var = var.into_data();
        s.updates = m.updates;
        bn.insert(layer.clone(), s);
    }
    let norm = if meta.standardized {
        let mean = c.take("norm.mean").ok_or_else(|| Error::Checkpoint("missing norm.mean".into()))?;
        let std = c.take("norm.std").ok_or_else(|| Error::Checkpoint("missing norm.std".into()))?;
        Some(FeatureNorm {
            mean: mean.into_data(),
            std: std.into_data(),
        })
    } else {
        None
    };
    let mut params = ParamSet::new();
    for a in c.arrays {
        if a.kind != "param" {
            return Err(Error::Checkpoint(format!("unexpected array `{}` of kind {}", a.name, a.kind)));
        }
        params.insert(a.name, a.value)?;
    }
    let model = Model {
        kind: meta.model_kind,
        arch: meta.arch.clone(),
        window: meta.window.clone(),
        input_rows: meta.input_rows,
        output_rows: meta.output_rows,
        params,
        bn,
        norm,
    };
    model.validate()?;
    if model.param_count() != meta.param_count {
        return Err(Error::Checkpoint(format!(
            "header records {} parameters, arrays hold {}",
            meta.param_count,
            model.param_count()
        )));
    }
    Ok((model, meta))
}

pub fn save_checkpoint(path: &Path, model: &Model, run_digest: &str) -> Result<()> {
    model_container(model, run_digest)?.save(path)
}

/// Loads a model; when `expect` is given, the stored model kind and
/// architecture must match it.
pub fn load_checkpoint(path: &Path, expect: Option<(ModelKind, &ArchConfig)>) -> Result<(Model, ModelMeta)> {
    let (model, meta) = model_from_container(Container::load(path)?)?;
    if let Some((kind, arch)) = expect {
        if kind != model.kind {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds a {} model, {kind} was requested",
                model.kind
            )));
        }
        if *arch != model.arch {
            return Err(Error::Checkpoint(format!(
                "checkpoint architecture {:?} differs from requested {:?}",
                model.arch, arch
            )));
        }
    }
    Ok((model, meta))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FeatureMeta {
    format: String,
    dsp: DspConfig,
    frame_shift: f64,
}

/// Feature cache: one `[T, 80]` array per utterance.
pub fn save_features(path: &Path, features: &[FeatureMatrix], dsp: &DspConfig) -> Result<()> {
    let frame_shift = features.first().map_or(dsp.frame_shift_ms / 1000.0, |f| f.frame_shift);
    let arrays = features
        .iter()
        .map(|f| {
            Ok(NamedArray {
                name: f.utterance_id.clone(),
                kind: "features".into(),
                value: Tensor::new([f.n_frames(), N_MELS], f.frames.clone())?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let meta = FeatureMeta {
        format: "features".into(),
        dsp: dsp.clone(),
        frame_shift,
    };
    Container {
        meta: serde_json::to_value(meta)?,
        arrays,
    }
    .save(path)
}

pub fn load_features(path: &Path) -> Result<Vec<FeatureMatrix>> {
    let c = Container::load(path)?;
    let meta: FeatureMeta = serde_json::from_value(c.meta)
        .map_err(|e| Error::Checkpoint(format!("not a feature cache: {e}")))?;
    c.arrays
        .into_iter()
        .map(|a| FeatureMatrix::new(a.name, a.value.into_data(), meta.frame_shift))
        .collect()
}
