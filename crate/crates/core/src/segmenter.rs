//! Target/neighbour window pairs, labelled segments and the corpus manifest.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frontend::{FeatureMatrix, N_MELS};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WindowConfig {
    /// Frames in the target window.
    pub target_len: usize,
    /// Frames of context on each side of the target.
    pub neighbour_len: usize,
    pub stride: usize,
}

impl Default for WindowConfig {
    fn default() -> Self {
        WindowConfig {
            target_len: 10,
            neighbour_len: 10,
            stride: 1,
        }
    }
}

impl WindowConfig {
    pub fn new(target_len: usize, neighbour_len: usize) -> Self {
        WindowConfig {
            target_len,
            neighbour_len,
            stride: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.target_len == 0 || self.neighbour_len == 0 || self.stride == 0 {
            return Err(Error::Config(format!(
                "window lengths and stride must be >= 1, got {self:?}"
            )));
        }
        Ok(())
    }

    /// Frames spanned by a target plus both neighbours.
    pub fn span(&self) -> usize {
        self.target_len + 2 * self.neighbour_len
    }

    /// Number of fully-contextualized windows in an utterance of `n_frames`.
    pub fn count(&self, n_frames: usize) -> usize {
        if n_frames < self.span() {
            0
        } else {
            (n_frames - self.span()) / self.stride + 1
        }
    }

    /// Start frames of every fully-contextualized target window.
    pub fn positions(&self, n_frames: usize) -> impl Iterator<Item = usize> {
        let first = self.neighbour_len;
        let stride = self.stride;
        (0..self.count(n_frames)).map(move |i| first + i * stride)
    }
}

/// One target window and its concatenated left and right neighbours.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowSample {
    pub utterance_id: String,
    /// Start frame of the target window.
    pub t: usize,
    /// `target_len x 80`, row-major.
    pub x: Vec<f32>,
    /// `2 * neighbour_len x 80`: left rows then right rows.
    pub y: Vec<f32>,
}

impl WindowSample {
    /// Window at `t` with full context; `None` if it would leave the utterance.
    pub fn at(features: &FeatureMatrix, t: usize, cfg: &WindowConfig) -> Option<Self> {
        let (c, n) = (cfg.target_len, cfg.neighbour_len);
        if t < n || t + c + n > features.n_frames() {
            return None;
        }
        let mut y = Vec::with_capacity(2 * n * N_MELS);
        y.extend_from_slice(features.rows(t - n, t));
        y.extend_from_slice(features.rows(t + c, t + c + n));
        Some(WindowSample {
            utterance_id: features.utterance_id.clone(),
            t,
            x: features.rows(t, t + c).to_vec(),
            y,
        })
    }

    /// Window whose target rows are given explicitly as frame indices; the
    /// neighbours are taken around `start` with indices clamped to the utterance.
    fn with_target_rows(features: &FeatureMatrix, start: isize, target: &[usize], n: usize) -> Self {
        let last = features.n_frames() as isize - 1;
        let clamp = |r: isize| r.clamp(0, last) as usize;
        let c = target.len() as isize;
        let mut x = Vec::with_capacity(target.len() * N_MELS);
        for &r in target {
            x.extend_from_slice(features.row(r));
        }
        let mut y = Vec::with_capacity(2 * n * N_MELS);
        for r in (start - n as isize..start).chain(start + c..start + c + n as isize) {
            y.extend_from_slice(features.row(clamp(r)));
        }
        WindowSample {
            utterance_id: features.utterance_id.clone(),
            t: start.max(0) as usize,
            x,
            y,
        }
    }
}

/// All fully-contextualized windows of an utterance in time order.
pub fn extract_windows(features: &FeatureMatrix, cfg: &WindowConfig) -> Vec<WindowSample> {
    let out: Vec<_> = cfg
        .positions(features.n_frames())
        .filter_map(|t| WindowSample::at(features, t, cfg))
        .collect();
    if out.is_empty() {
        log::info!(
            "skipping {}: {} frames < {} needed for one window",
            features.utterance_id,
            features.n_frames(),
            cfg.span()
        );
    }
    out
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelledSegment {
    pub utterance_id: String,
    pub start_frame: usize,
    /// Exclusive.
    pub end_frame: usize,
    pub label: String,
}

impl LabelledSegment {
    pub fn len(&self) -> usize {
        self.end_frame - self.start_frame
    }

    pub fn is_empty(&self) -> bool {
        self.end_frame <= self.start_frame
    }
}

/// Windows whose target lies inside the segment. Context may reach outside
/// the segment and is edge-replicated at utterance boundaries. A segment
/// shorter than the target yields one centred window padded by repeating its
/// first and last frames.
pub fn segment_windows(
    features: &FeatureMatrix,
    seg: &LabelledSegment,
    cfg: &WindowConfig,
) -> Vec<WindowSample> {
    let c = cfg.target_len;
    let n = cfg.neighbour_len;
    let end = seg.end_frame.min(features.n_frames());
    if seg.start_frame >= end {
        return Vec::new();
    }
    let len = end - seg.start_frame;
    if len >= c {
        (seg.start_frame..=end - c)
            .step_by(cfg.stride)
            .map(|t| {
                let rows: Vec<usize> = (t..t + c).collect();
                WindowSample::with_target_rows(features, t as isize, &rows, n)
            })
            .collect()
    } else {
        let pad_before = (c - len) / 2;
        let rows: Vec<usize> = (0..c)
            .map(|i| seg.start_frame + i.saturating_sub(pad_before).min(len - 1))
            .collect();
        let start = seg.start_frame as isize - pad_before as isize;
        vec![WindowSample::with_target_rows(features, start, &rows, n)]
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Subset {
    #[default]
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhoneMark {
    pub start_sample: u64,
    pub end_sample: u64,
    pub label: String,
}

/// One line of the JSON-lines corpus manifest.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub utterance_id: String,
    pub audio_path: String,
    pub speaker_id: String,
    /// Official train/test partition of the speaker.
    #[serde(default)]
    pub subset: Subset,
    #[serde(default)]
    pub phones: Vec<PhoneMark>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UtteranceInfo {
    pub id: String,
    pub speaker: String,
    pub subset: Subset,
    pub audio_path: PathBuf,
    /// Phone segments in frames, sorted and non-overlapping.
    pub phones: Vec<LabelledSegment>,
}

/// Utterances sorted by id, with speaker grouping.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CorpusIndex {
    pub utterances: Vec<UtteranceInfo>,
    /// Speaker id to utterance positions in `utterances`.
    pub speakers: BTreeMap<String, Vec<usize>>,
}

impl CorpusIndex {
    pub fn new(mut utterances: Vec<UtteranceInfo>) -> Result<Self> {
        if utterances.is_empty() {
            return Err(Error::Manifest("corpus has no utterances".into()));
        }
        utterances.sort_by(|a, b| a.id.cmp(&b.id));
        let dups: Vec<&str> = utterances
            .windows(2)
            .filter(|w| w[0].id == w[1].id)
            .map(|w| w[0].id.as_str())
            .collect();
        if !dups.is_empty() {
            return Err(Error::Manifest(format!("duplicate utterance ids: {}", dups.join(", "))));
        }
        let mut speakers: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (i, u) in utterances.iter().enumerate() {
            speakers.entry(u.speaker.clone()).or_default().push(i);
        }
        Ok(CorpusIndex {
            utterances,
            speakers,
        })
    }

    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    pub fn position(&self, utterance_id: &str) -> Option<usize> {
        self.utterances
            .binary_search_by(|u| u.id.as_str().cmp(utterance_id))
            .ok()
    }

    /// Sorted, de-duplicated phone labels.
    pub fn phone_labels(&self) -> Vec<String> {
        let mut labels: Vec<String> = self
            .utterances
            .iter()
            .flat_map(|u| u.phones.iter().map(|p| p.label.clone()))
            .collect();
        labels.sort();
        labels.dedup();
        labels
    }

    pub fn to_records(&self, shift_samples: u64) -> Vec<ManifestRecord> {
        self.utterances
            .iter()
            .map(|u| ManifestRecord {
                utterance_id: u.id.clone(),
                audio_path: u.audio_path.to_string_lossy().into_owned(),
                speaker_id: u.speaker.clone(),
                subset: u.subset,
                phones: u
                    .phones
                    .iter()
                    .map(|p| PhoneMark {
                        start_sample: p.start_frame as u64 * shift_samples,
                        end_sample: p.end_frame as u64 * shift_samples,
                        label: p.label.clone(),
                    })
                    .collect(),
            })
            .collect()
    }
}

/// Converts manifest records into a corpus index. Phone boundaries map to
/// frames by `floor(sample / shift_samples)`. When `audio_root` is given every
/// audio path, resolved against it, must exist.
pub fn index_records(
    records: Vec<ManifestRecord>,
    shift_samples: u64,
    audio_root: Option<&Path>,
) -> Result<CorpusIndex> {
    if shift_samples == 0 {
        return Err(Error::Config("frame shift of zero samples".into()));
    }
    let mut dangling = Vec::new();
    let mut overlapping = Vec::new();
    let mut utterances = Vec::with_capacity(records.len());
    for rec in records {
        let mut path = PathBuf::from(&rec.audio_path);
        if let Some(root) = audio_root {
            if path.is_relative() {
                path = root.join(path);
            }
            if !path.is_file() {
                dangling.push(format!("{} ({})", rec.utterance_id, path.display()));
            }
        }
        let mut marks = rec.phones;
        marks.sort_by_key(|m| (m.start_sample, m.end_sample));
        for w in marks.windows(2) {
            if w[1].start_sample < w[0].end_sample {
                overlapping.push(format!(
                    "{}: {}..{} {} / {}..{} {}",
                    rec.utterance_id,
                    w[0].start_sample,
                    w[0].end_sample,
                    w[0].label,
                    w[1].start_sample,
                    w[1].end_sample,
                    w[1].label
                ));
            }
        }
        let phones = marks
            .into_iter()
            .filter_map(|m| {
                let seg = LabelledSegment {
                    utterance_id: rec.utterance_id.clone(),
                    start_frame: (m.start_sample / shift_samples) as usize,
                    end_frame: (m.end_sample / shift_samples) as usize,
                    label: m.label,
                };
                if seg.is_empty() {
                    log::debug!("{}: dropping sub-frame phone {}", seg.utterance_id, seg.label);
                    None
                } else {
                    Some(seg)
                }
            })
            .collect();
        utterances.push(UtteranceInfo {
            id: rec.utterance_id,
            speaker: rec.speaker_id,
            subset: rec.subset,
            audio_path: path,
            phones,
        });
    }
    if !dangling.is_empty() {
        return Err(Error::Manifest(format!("dangling audio paths: {}", dangling.join(", "))));
    }
    if !overlapping.is_empty() {
        return Err(Error::Manifest(format!(
            "overlapping phone segments: {}",
            overlapping.join("; ")
        )));
    }
    CorpusIndex::new(utterances)
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: ManifestRecord = serde_json::from_str(line)
            .map_err(|e| Error::Manifest(format!("{}:{}: {e}", path.display(), i + 1)))?;
        records.push(rec);
    }
    if records.is_empty() {
        return Err(Error::Manifest(format!("{}: empty manifest", path.display())));
    }
    Ok(records)
}

pub fn write_manifest(path: &Path, records: &[ManifestRecord]) -> Result<()> {
    let mut text = String::new();
    for r in records {
        text.push_str(&serde_json::to_string(r)?);
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Loads a manifest; audio paths are resolved against the manifest's
/// directory and checked only when `check_audio` is set.
pub fn load_manifest(path: &Path, shift_samples: u64, check_audio: bool) -> Result<CorpusIndex> {
    let records = read_manifest(path)?;
    let root = path.parent().unwrap_or(Path::new("."));
    index_records(records, shift_samples, check_audio.then_some(root))
}

/// Parses a TIMIT `.PHN` transcription ("start end label" per line).
pub fn parse_phn(text: &str) -> Result<Vec<PhoneMark>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let parts: Vec<&str> = line.split_whitespace().collect();
            let bad = || Error::Manifest(format!("PHN line {}: `{line}`", i + 1));
            if parts.len() != 3 {
                return Err(bad());
            }
            Ok(PhoneMark {
                start_sample: parts[0].parse().map_err(|_| bad())?,
                end_sample: parts[1].parse().map_err(|_| bad())?,
                label: parts[2].to_string(),
            })
        })
        .collect()
}

/// Builds manifest records from a TIMIT-layout tree: every audio file with a
/// sibling `.PHN`; the speaker is the parent directory and the subset comes
/// from a `TRAIN`/`TEST` path component.
pub fn import_timit(root: &Path) -> Result<Vec<ManifestRecord>> {
    let mut files = Vec::new();
    collect_files(root, &mut files)?;
    files.sort();
    let mut records = Vec::new();
    for audio in files {
        let is_wav = audio
            .extension()
            .is_some_and(|e| e.eq_ignore_ascii_case("wav"));
        if !is_wav {
            continue;
        }
        let phn = ["PHN", "phn"]
            .iter()
            .map(|ext| audio.with_extension(ext))
            .find(|p| p.is_file());
        let Some(phn) = phn else {
            continue;
        };
        let text = fs::read_to_string(&phn).map_err(|e| Error::io(&phn, e))?;
        let speaker = audio
            .parent()
            .and_then(|p| p.file_name())
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        let subset = if audio
            .components()
            .any(|c| c.as_os_str().eq_ignore_ascii_case("test"))
        {
            Subset::Test
        } else {
            Subset::Train
        };
        let stem = audio
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        let rel = audio.strip_prefix(root).unwrap_or(&audio);
        records.push(ManifestRecord {
            utterance_id: format!("{speaker}_{stem}"),
            audio_path: rel.to_string_lossy().into_owned(),
            speaker_id: speaker,
            subset,
            phones: parse_phn(&text)?,
        });
    }
    if records.is_empty() {
        return Err(Error::Manifest(format!(
            "no audio with .PHN transcriptions under {}",
            root.display()
        )));
    }
    Ok(records)
}

fn collect_files(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_dir() {
            collect_files(&path, out)?;
        } else {
            out.push(path);
        }
    }
    Ok(())
}

/// Utterance metadata paired with its feature matrix.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub index: CorpusIndex,
    /// Aligned with `index.utterances`.
    pub features: Vec<FeatureMatrix>,
}

impl Corpus {
    /// Pairs features with the index by utterance id. Phone segments that run
    /// past the last frame are clipped; segments starting after it are dropped.
    pub fn new(mut index: CorpusIndex, features: Vec<FeatureMatrix>) -> Result<Self> {
        let mut by_id: BTreeMap<String, FeatureMatrix> = features
            .into_iter()
            .map(|f| (f.utterance_id.clone(), f))
            .collect();
        let mut missing = Vec::new();
        let mut aligned = Vec::with_capacity(index.len());
        for u in &mut index.utterances {
            match by_id.remove(&u.id) {
                Some(f) => {
                    let t = f.n_frames();
                    u.phones.retain(|p| p.start_frame < t);
                    for p in &mut u.phones {
                        p.end_frame = p.end_frame.min(t);
                    }
                    aligned.push(f);
                }
                None => missing.push(u.id.clone()),
            }
        }
        if !missing.is_empty() {
            return Err(Error::Data(format!(
                "no features for utterances: {}",
                missing.join(", ")
            )));
        }
        Ok(Corpus {
            index,
            features: aligned,
        })
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    /// Keeps only the utterances at the given positions, in index order.
    pub fn subset(&self, positions: &[usize]) -> Result<Corpus> {
        let mut keep = positions.to_vec();
        keep.sort_unstable();
        keep.dedup();
        let utterances = keep.iter().map(|&i| self.index.utterances[i].clone()).collect();
        let features = keep.iter().map(|&i| self.features[i].clone()).collect();
        Corpus::new(CorpusIndex::new(utterances)?, features)
    }

    /// The same corpus with every feature matrix transformed.
    pub fn map_features(&self, f: impl Fn(&FeatureMatrix) -> FeatureMatrix) -> Corpus {
        Corpus {
            index: self.index.clone(),
            features: self.features.iter().map(f).collect(),
        }
    }

    /// Positions of every fully-contextualized window as (utterance, t),
    /// ordered by utterance id then time.
    pub fn window_positions(&self, cfg: &WindowConfig) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for (u, f) in self.features.iter().enumerate() {
            let before = out.len();
            out.extend(cfg.positions(f.n_frames()).map(|t| (u, t)));
            if out.len() == before {
                log::info!(
                    "skipping {}: {} frames < {} needed for one window",
                    f.utterance_id,
                    f.n_frames(),
                    cfg.span()
                );
            }
        }
        out
    }
}
