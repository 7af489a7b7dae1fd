//! Seeded synthetic corpus with known phone and speaker factors.
//!
//! A frame of phone `p` spoken by speaker `s` in session `u` is
//! `prototype[p] + speaker[s] + session[u] + noise`. Prototypes are unit
//! vectors with a minimum pairwise angle. Speaker and session offsets are
//! smooth low-order cosine curves over the Mel axis, so they behave like
//! spectral tilt and gain; speaker offsets also carry a shared log-energy
//! level. The session offset is what makes a speaker model trained on few
//! utterances generalize worse than one trained on many. Phone sequences
//! are random, with a bias towards one successor per phone standing in for
//! phonotactic structure.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frontend::{FeatureMatrix, N_MELS};
use crate::segmenter::{Corpus, CorpusIndex, LabelledSegment, Subset, UtteranceInfo};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub n_phones: usize,
    /// Speakers in total; the last `n_test_speakers` form the test subset.
    pub n_speakers: usize,
    pub n_test_speakers: usize,
    pub utterances_per_speaker: usize,
    pub phones_per_utterance: usize,
    pub min_duration: usize,
    pub max_duration: usize,
    pub noise_std: f64,
    /// Norm of each speaker offset.
    pub speaker_scale: f64,
    /// Log-energy level shared by every bin and speaker; log-mel features
    /// of real recordings are far from zero-mean.
    pub level: f64,
    /// Norm of each per-utterance session offset.
    pub session_scale: f64,
    /// Minimum angle between phone prototypes, degrees.
    pub min_angle_deg: f64,
    /// Probability that phone `q` is followed by its preferred successor
    /// `(q + 1) mod n_phones`; other successors share the rest uniformly.
    /// Zero gives uniformly random sequences.
    pub successor_bias: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n_phones: 8,
            n_speakers: 6,
            n_test_speakers: 2,
            utterances_per_speaker: 8,
            phones_per_utterance: 20,
            min_duration: 5,
            max_duration: 20,
            noise_std: 0.1,
            speaker_scale: 1.0,
            level: 0.5,
            session_scale: 0.5,
            min_angle_deg: 60.0,
            successor_bias: 0.5,
            seed: 17,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("synthetic corpus: {m}")));
        if self.n_phones < 2 {
            return bad("n_phones must be >= 2");
        }
        if self.n_speakers < 2 {
            return bad("n_speakers must be >= 2");
        }
        if self.n_test_speakers >= self.n_speakers {
            return bad("n_test_speakers must leave at least one training speaker");
        }
        if self.utterances_per_speaker != 8 {
            return bad("utterances_per_speaker must be 8 for the block split");
        }
        if self.phones_per_utterance == 0 || self.min_duration == 0 || self.min_duration > self.max_duration {
            return bad("need phones_per_utterance >= 1 and 1 <= min_duration <= max_duration");
        }
        if self.noise_std < 0.0 || self.speaker_scale < 0.0 || self.session_scale < 0.0 || !self.level.is_finite() {
            return bad("noise and offset scales must be non-negative and the level finite");
        }
        if !(0.0..90.0).contains(&self.min_angle_deg) {
            return bad("min_angle_deg must lie in [0, 90)");
        }
        if !(0.0..=1.0).contains(&self.successor_bias) {
            return bad("successor_bias must lie in [0, 1]");
        }
        Ok(())
    }

    /// TIMIT's speaker layout: 462 training and 168 test speakers.
    pub fn timit_shaped() -> Self {
        SynthSpec {
            n_speakers: 630,
            n_test_speakers: 168,
            ..SynthSpec::default()
        }
    }

    pub fn speaker_id(&self, s: usize) -> String {
        format!("spk{s:03}")
    }

    pub fn phone_label(&self, p: usize) -> String {
        format!("p{p}")
    }
}

/// The latent factors behind a generated corpus.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthTruth {
    pub prototypes: Vec<Vec<f32>>,
    pub speakers: BTreeMap<String, Vec<f32>>,
    /// Session offset per utterance id.
    pub sessions: BTreeMap<String, Vec<f32>>,
}

#[derive(Clone, Debug)]
pub struct SynthCorpus {
    pub corpus: Corpus,
    pub truth: SynthTruth,
}

fn unit_normal(rng: &mut impl Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-9 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn prototypes(spec: &SynthSpec, rng: &mut impl Rng) -> Result<Vec<Vec<f32>>> {
    let max_cos = spec.min_angle_deg.to_radians().cos();
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(spec.n_phones);
    let mut tries = 0;
    while out.len() < spec.n_phones {
        tries += 1;
        if tries > 100_000 {
            return Err(Error::Config(format!(
                "could not place {} prototypes {}° apart",
                spec.n_phones, spec.min_angle_deg
            )));
        }
        let v = unit_normal(rng, N_MELS);
        if out
            .iter()
            .all(|p| p.iter().zip(&v).map(|(a, b)| a * b).sum::<f64>() <= max_cos)
        {
            out.push(v);
        }
    }
    Ok(out
        .into_iter()
        .map(|v| v.into_iter().map(|x| x as f32).collect())
        .collect())
}

/// Smooth curve over the Mel axis with the given norm.
fn smooth_offset(rng: &mut impl Rng, norm: f64) -> Vec<f32> {
    let coef: Vec<f64> = (0..5).map(|_| rng.sample(StandardNormal)).collect();
    let v: Vec<f64> = (0..N_MELS)
        .map(|f| {
            let x = std::f64::consts::PI * f as f64 / (N_MELS - 1) as f64;
            coef.iter()
                .enumerate()
                .map(|(k, c)| c * (k as f64 * x).cos())
                .sum()
        })
        .collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.into_iter().map(|x| (x * norm / n) as f32).collect()
}

/// Phone sequence with durations; consecutive phones always differ.
fn phone_sequence(spec: &SynthSpec, rng: &mut impl Rng) -> Vec<(usize, usize)> {
    let mut seq = Vec::with_capacity(spec.phones_per_utterance);
    let mut prev = None;
    for _ in 0..spec.phones_per_utterance {
        let p = match prev {
            None => rng.random_range(0..spec.n_phones),
            Some(q) if rng.random_bool(spec.successor_bias) => (q + 1) % spec.n_phones,
            Some(q) => {
                let r = rng.random_range(0..spec.n_phones - 1);
                if r >= q {
                    r + 1
                } else {
                    r
                }
            }
        };
        let d = rng.random_range(spec.min_duration..=spec.max_duration);
        seq.push((p, d));
        prev = Some(p);
    }
    seq
}

struct Plan {
    info: UtteranceInfo,
    speaker: usize,
    phones: Vec<(usize, usize)>,
    rng: ChaCha8Rng,
}

fn plan(spec: &SynthSpec) -> Result<(ChaCha8Rng, Vec<Plan>)> {
    spec.validate()?;
    let rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut plans = Vec::with_capacity(spec.n_speakers * spec.utterances_per_speaker);
    for s in 0..spec.n_speakers {
        let speaker = spec.speaker_id(s);
        let subset = if s + spec.n_test_speakers >= spec.n_speakers {
            Subset::Test
        } else {
            Subset::Train
        };
        for u in 0..spec.utterances_per_speaker {
            let id = format!("{speaker}_u{u}");
            let mut urng = ChaCha8Rng::seed_from_u64(spec.seed);
            urng.set_stream((s * spec.utterances_per_speaker + u) as u64 + 1);
            let phones = phone_sequence(spec, &mut urng);
            let mut start = 0;
            let segs = phones
                .iter()
                .map(|&(p, d)| {
                    let seg = LabelledSegment {
                        utterance_id: id.clone(),
                        start_frame: start,
                        end_frame: start + d,
                        label: spec.phone_label(p),
                    };
                    start += d;
                    seg
                })
                .collect();
            plans.push(Plan {
                info: UtteranceInfo {
                    id: id.clone(),
                    speaker: speaker.clone(),
                    subset,
                    audio_path: format!("synthetic/{id}").into(),
                    phones: segs,
                },
                speaker: s,
                phones,
                rng: urng,
            });
        }
    }
    Ok((rng, plans))
}

/// Utterance metadata only (no features); cheap for large speaker counts.
pub fn generate_index(spec: &SynthSpec) -> Result<CorpusIndex> {
    let (_, plans) = plan(spec)?;
    CorpusIndex::new(plans.into_iter().map(|p| p.info).collect())
}

/// Generates features and metadata; identical specs give identical corpora.
pub fn generate(spec: &SynthSpec) -> Result<SynthCorpus> {
    let (mut rng, plans) = plan(spec)?;
    let protos = prototypes(spec, &mut rng)?;
    let speaker_vecs: Vec<Vec<f32>> = (0..spec.n_speakers)
        .map(|_| {
            let mut v = smooth_offset(&mut rng, spec.speaker_scale);
            v.iter_mut().for_each(|x| *x += spec.level as f32);
            v
        })
        .collect();
    let mut infos = Vec::with_capacity(plans.len());
    let mut features = Vec::with_capacity(plans.len());
    let mut sessions = BTreeMap::new();
    for mut p in plans {
        let session = smooth_offset(&mut p.rng, spec.session_scale);
        let spk = &speaker_vecs[p.speaker];
        let n: usize = p.phones.iter().map(|(_, d)| d).sum();
        let mut frames = Vec::with_capacity(n * N_MELS);
        for &(ph, d) in &p.phones {
            for _ in 0..d {
                for f in 0..N_MELS {
                    let noise: f64 = p.rng.sample(StandardNormal);
                    frames.push(protos[ph][f] + spk[f] + session[f] + (noise * spec.noise_std) as f32);
                }
            }
        }
        features.push(FeatureMatrix::new(p.info.id.clone(), frames, 0.01)?);
        sessions.insert(p.info.id.clone(), session);
        infos.push(p.info);
    }
    let speakers = speaker_vecs
        .into_iter()
        .enumerate()
        .map(|(s, v)| (spec.speaker_id(s), v))
        .collect();
    let corpus = Corpus::new(CorpusIndex::new(infos)?, features)?;
    Ok(SynthCorpus {
        corpus,
        truth: SynthTruth {
            prototypes: protos,
            speakers,
            sessions,
        },
    })
}

fn nearest(target: &[f64], candidates: &[&[f32]]) -> usize {
    let mut best = (f64::INFINITY, 0);
    for (i, c) in candidates.iter().enumerate() {
        let d: f64 = target.iter().zip(*c).map(|(a, b)| (a - *b as f64).powi(2)).sum();
        if d < best.0 {
            best = (d, i);
        }
    }
    best.1
}

impl SynthCorpus {
    /// Frame-level phone accuracy of the nearest-prototype rule after removing
    /// the known speaker and session offsets.
    pub fn oracle_phone_accuracy(&self) -> f64 {
        let protos: Vec<&[f32]> = self.truth.prototypes.iter().map(Vec::as_slice).collect();
        let (mut correct, mut total) = (0usize, 0usize);
        for (info, feats) in self.corpus.index.utterances.iter().zip(&self.corpus.features) {
            let spk = &self.truth.speakers[&info.speaker];
            let ses = &self.truth.sessions[&info.id];
            for seg in &info.phones {
                for t in seg.start_frame..seg.end_frame {
                    let residual: Vec<f64> = feats
                        .row(t)
                        .iter()
                        .zip(spk)
                        .zip(ses)
                        .map(|((x, a), b)| (*x - a - b) as f64)
                        .collect();
                    let guess = nearest(&residual, &protos);
                    correct += (format!("p{guess}") == seg.label) as usize;
                    total += 1;
                }
            }
        }
        correct as f64 / total.max(1) as f64
    }

    /// Utterance-level speaker accuracy of the nearest-speaker rule applied to
    /// the frame average after removing known phone and session contributions.
    pub fn oracle_speaker_accuracy(&self) -> f64 {
        let names: Vec<&String> = self.truth.speakers.keys().collect();
        let vecs: Vec<&[f32]> = self.truth.speakers.values().map(Vec::as_slice).collect();
        let mut correct = 0;
        for (info, feats) in self.corpus.index.utterances.iter().zip(&self.corpus.features) {
            let ses = &self.truth.sessions[&info.id];
            let mut mean = vec![0.0f64; N_MELS];
            let mut n = 0;
            for seg in &info.phones {
                let p: usize = seg.label[1..].parse().expect("synthetic phone label");
                for t in seg.start_frame..seg.end_frame {
                    for (f, m) in mean.iter_mut().enumerate() {
                        *m += (feats.row(t)[f] - self.truth.prototypes[p][f] - ses[f]) as f64;
                    }
                    n += 1;
                }
            }
            mean.iter_mut().for_each(|m| *m /= n.max(1) as f64);
            correct += (names[nearest(&mean, &vecs)] == &info.speaker) as usize;
        }
        correct as f64 / self.corpus.len() as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prototypes_respect_minimum_angle() {
        let spec = SynthSpec::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = prototypes(&spec, &mut rng).unwrap();
        for i in 0..p.len() {
            let n: f32 = p[i].iter().map(|x| x * x).sum();
            assert!((n - 1.0).abs() < 1e-5);
            for j in 0..i {
                let c: f32 = p[i].iter().zip(&p[j]).map(|(a, b)| a * b).sum();
                assert!(c <= 0.5 + 1e-6);
            }
        }
    }

    #[test]
    fn consecutive_phones_differ() {
        let spec = SynthSpec::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let seq = phone_sequence(&spec, &mut rng);
        assert!(seq.windows(2).all(|w| w[0].0 != w[1].0));
        assert!(seq.iter().all(|&(_, d)| (5..=20).contains(&d)));
    }

    #[test]
    fn offsets_have_requested_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let v = smooth_offset(&mut rng, 0.7);
        let n: f32 = v.iter().map(|x| x * x).sum::<f32>().sqrt();
        assert!((n - 0.7).abs() < 1e-5);
    }
}
