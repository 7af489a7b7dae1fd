//! Audio ingestion (RIFF PCM16 and NIST SPHERE) and log-Mel filterbanks.

use std::fs;
use std::io::Cursor;
use std::path::Path;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Width of every feature frame.
pub const N_MELS: usize = 80;

#[derive(Clone, Debug, PartialEq)]
pub struct AudioBuffer {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl AudioBuffer {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Audio("empty audio buffer".into()));
        }
        if sample_rate == 0 {
            return Err(Error::Audio("sample rate must be positive".into()));
        }
        Ok(AudioBuffer {
            samples,
            sample_rate,
        })
    }

    /// Integer-factor decimation with a boxcar pre-filter.
    pub fn decimate(&self, target_rate: u32) -> Result<AudioBuffer> {
        if target_rate == self.sample_rate {
            return Ok(self.clone());
        }
        if target_rate == 0 || !self.sample_rate.is_multiple_of(target_rate) {
            return Err(Error::Audio(format!(
                "cannot resample {} Hz to {} Hz (only integer decimation is supported)",
                self.sample_rate, target_rate
            )));
        }
        let factor = (self.sample_rate / target_rate) as usize;
        let samples: Vec<f32> = self
            .samples
            .chunks_exact(factor)
            .map(|c| c.iter().sum::<f32>() / factor as f32)
            .collect();
        AudioBuffer::new(samples, target_rate)
    }
}

/// A `T x 80` log-Mel matrix for one utterance, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    pub utterance_id: String,
    pub frames: Vec<f32>,
    /// Seconds between consecutive frames.
    pub frame_shift: f64,
}

impl FeatureMatrix {
    pub fn new(utterance_id: impl Into<String>, frames: Vec<f32>, frame_shift: f64) -> Result<Self> {
        let utterance_id = utterance_id.into();
        if frames.is_empty() || !frames.len().is_multiple_of(N_MELS) {
            return Err(Error::Data(format!(
                "{utterance_id}: feature buffer of {} values is not a non-empty multiple of {N_MELS}",
                frames.len()
            )));
        }
        if let Some(i) = frames.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!(
                "{utterance_id}: non-finite feature at frame {}",
                i / N_MELS
            )));
        }
        Ok(FeatureMatrix {
            utterance_id,
            frames,
            frame_shift,
        })
    }

    pub fn n_frames(&self) -> usize {
        self.frames.len() / N_MELS
    }

    pub fn row(&self, t: usize) -> &[f32] {
        &self.frames[t * N_MELS..(t + 1) * N_MELS]
    }

    /// Rows `[start, end)` as one contiguous slice.
    pub fn rows(&self, start: usize, end: usize) -> &[f32] {
        &self.frames[start * N_MELS..end * N_MELS]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DspConfig {
    pub sample_rate: u32,
    pub frame_length_ms: f64,
    pub frame_shift_ms: f64,
    pub fft_size: usize,
    pub n_mels: usize,
    pub fmin: f64,
    pub fmax: f64,
    pub log_floor: f64,
    /// Standardize each Mel bin with statistics of the training corpus.
    pub standardize: bool,
}

impl Default for DspConfig {
    fn default() -> Self {
        DspConfig {
            sample_rate: 16_000,
            frame_length_ms: 25.0,
            frame_shift_ms: 10.0,
            fft_size: 512,
            n_mels: N_MELS,
            fmin: 20.0,
            fmax: 7600.0,
            log_floor: 1e-10,
            standardize: false,
        }
    }
}

impl DspConfig {
    pub fn frame_samples(&self) -> usize {
        (self.sample_rate as f64 * self.frame_length_ms / 1000.0).round() as usize
    }

    pub fn shift_samples(&self) -> usize {
        (self.sample_rate as f64 * self.frame_shift_ms / 1000.0).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_mels != N_MELS {
            return bad(format!("n_mels must be {N_MELS}, got {}", self.n_mels));
        }
        if self.sample_rate == 0 || self.frame_samples() == 0 || self.shift_samples() == 0 {
            return bad("sample rate, frame length and shift must be positive".into());
        }
        if self.fft_size < self.frame_samples() {
            return bad(format!(
                "fft_size {} is shorter than a frame of {} samples",
                self.fft_size,
                self.frame_samples()
            ));
        }
        if !(0.0 <= self.fmin && self.fmin < self.fmax && self.fmax <= self.sample_rate as f64 / 2.0) {
            return bad(format!(
                "need 0 <= fmin < fmax <= sample_rate/2, got fmin {} fmax {}",
                self.fmin, self.fmax
            ));
        }
        if self.log_floor <= 0.0 {
            return bad("log_floor must be positive".into());
        }
        Ok(())
    }
}

/// Reads a mono 16-bit PCM file, either RIFF/WAVE or NIST SPHERE.
pub fn load_wav(path: &Path) -> Result<AudioBuffer> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_audio(&bytes).map_err(|e| match e {
        Error::Audio(m) => Error::Audio(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// Decodes in-memory audio bytes; see [`load_wav`].
pub fn decode_audio(bytes: &[u8]) -> Result<AudioBuffer> {
    if bytes.starts_with(b"NIST_1A") {
        return decode_sphere(bytes);
    }
    let reader = hound::WavReader::new(Cursor::new(bytes))
        .map_err(|e| Error::Audio(format!("not a readable RIFF/WAVE file: {e}")))?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::Audio(format!(
            "expected mono audio, found {} channels",
            spec.channels
        )));
    }
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(Error::Audio(format!(
            "unsupported encoding: {:?} {}-bit (need 16-bit PCM)",
            spec.sample_format, spec.bits_per_sample
        )));
    }
    let samples = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| v as f32 / 32768.0))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| Error::Audio(format!("truncated or corrupt sample data: {e}")))?;
    AudioBuffer::new(samples, spec.sample_rate)
}

fn decode_sphere(bytes: &[u8]) -> Result<AudioBuffer> {
    let head_end = bytes.len().min(1024);
    let text = String::from_utf8_lossy(&bytes[..head_end]);
    let mut lines = text.lines();
    lines.next();
    let header_len = lines
        .next()
        .and_then(|l| l.trim().parse::<usize>().ok())
        .unwrap_or(1024);
    if bytes.len() < header_len {
        return Err(Error::Audio(format!(
            "truncated SPHERE file: {} bytes, header claims {header_len}",
            bytes.len()
        )));
    }
    let header = String::from_utf8_lossy(&bytes[..header_len]);
    let mut sample_rate = 16_000u32;
    let mut channels = 1u32;
    let mut width = 2u32;
    let mut big_endian = false;
    for line in header.lines() {
        let mut parts = line.split_whitespace();
        let (Some(key), Some(_ty), Some(value)) = (parts.next(), parts.next(), parts.next()) else {
            continue;
        };
        let int = || {
            value
                .parse::<u32>()
                .map_err(|_| Error::Audio(format!("bad SPHERE field {key}={value}")))
        };
        match key {
            "sample_rate" => sample_rate = int()?,
            "channel_count" => channels = int()?,
            "sample_n_bytes" => width = int()?,
            "sample_byte_format" => big_endian = value == "10",
            "sample_coding" if value != "pcm" => {
                return Err(Error::Audio(format!("unsupported SPHERE sample coding `{value}`")));
            }
            _ => {}
        }
    }
    if channels != 1 {
        return Err(Error::Audio(format!("expected mono audio, found {channels} channels")));
    }
    if width != 2 {
        return Err(Error::Audio(format!("unsupported SPHERE sample width {width} bytes")));
    }
    let payload = &bytes[header_len..];
    if !payload.len().is_multiple_of(2) {
        return Err(Error::Audio("truncated SPHERE payload (odd byte count)".into()));
    }
    let samples = payload
        .chunks_exact(2)
        .map(|b| {
            let v = if big_endian {
                i16::from_be_bytes([b[0], b[1]])
            } else {
                i16::from_le_bytes([b[0], b[1]])
            };
            v as f32 / 32768.0
        })
        .collect();
    AudioBuffer::new(samples, sample_rate)
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Centre frequencies (Hz) of the triangular filters, lowest first.
pub fn mel_centers(cfg: &DspConfig) -> Vec<f64> {
    mel_edges(cfg)[1..=cfg.n_mels].to_vec()
}

fn mel_edges(cfg: &DspConfig) -> Vec<f64> {
    let (lo, hi) = (hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax));
    (0..cfg.n_mels + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (cfg.n_mels + 1) as f64))
        .collect()
}

/// Filter weights, `n_mels x (fft_size/2 + 1)` row-major.
pub fn mel_filterbank(cfg: &DspConfig) -> Vec<f64> {
    let bins = cfg.fft_size / 2 + 1;
    let edges = mel_edges(cfg);
    let mut w = vec![0.0; cfg.n_mels * bins];
    for m in 0..cfg.n_mels {
        let (l, c, r) = (edges[m], edges[m + 1], edges[m + 2]);
        for k in 0..bins {
            let f = k as f64 * cfg.sample_rate as f64 / cfg.fft_size as f64;
            let v = if f > l && f <= c {
                (f - l) / (c - l)
            } else if f > c && f < r {
                (r - f) / (r - c)
            } else {
                0.0
            };
            w[m * bins + k] = v;
        }
    }
    w
}

/// Log-Mel energies of one utterance.
pub fn log_mel(audio: &AudioBuffer, cfg: &DspConfig, utterance_id: &str) -> Result<FeatureMatrix> {
    cfg.validate()?;
    let audio = audio.decimate(cfg.sample_rate)?;
    let frame = cfg.frame_samples();
    let shift = cfg.shift_samples();
    let len = audio.samples.len();
    if len < frame {
        return Err(Error::Audio(format!(
            "{utterance_id}: {len} samples is shorter than one {frame}-sample frame"
        )));
    }
    let n_frames = (len - frame) / shift + 1;
    let bins = cfg.fft_size / 2 + 1;
    let bank = mel_filterbank(cfg);
    let window: Vec<f64> = (0..frame)
        .map(|n| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / frame as f64).cos())
        .collect();
    let fft = FftPlanner::<f64>::new().plan_fft_forward(cfg.fft_size);
    let mut buf = vec![Complex::new(0.0, 0.0); cfg.fft_size];
    let mut power = vec![0.0f64; bins];
    let mut out = Vec::with_capacity(n_frames * cfg.n_mels);
    for t in 0..n_frames {
        let chunk = &audio.samples[t * shift..t * shift + frame];
        buf.iter_mut().for_each(|c| *c = Complex::new(0.0, 0.0));
        for ((b, s), w) in buf.iter_mut().zip(chunk).zip(&window) {
            b.re = *s as f64 * w;
        }
        fft.process(&mut buf);
        for (p, c) in power.iter_mut().zip(&buf) {
            *p = c.norm_sqr();
        }
        for m in 0..cfg.n_mels {
            let e: f64 = bank[m * bins..(m + 1) * bins]
                .iter()
                .zip(&power)
                .map(|(w, p)| w * p)
                .sum();
            out.push(e.max(cfg.log_floor).ln() as f32);
        }
    }
    FeatureMatrix::new(utterance_id, out, cfg.frame_shift_ms / 1000.0)
}

/// Per-bin mean and standard deviation used to standardize features.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureNorm {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl FeatureNorm {
    pub fn fit<'a>(matrices: impl IntoIterator<Item = &'a FeatureMatrix>) -> Result<Self> {
        let mut sum = vec![0.0f64; N_MELS];
        let mut sq = vec![0.0f64; N_MELS];
        let mut n = 0usize;
        for m in matrices {
            for row in m.frames.chunks_exact(N_MELS) {
                for (i, v) in row.iter().enumerate() {
                    sum[i] += *v as f64;
                    sq[i] += (*v as f64) * (*v as f64);
                }
                n += 1;
            }
        }
        if n == 0 {
            return Err(Error::Data("cannot fit feature statistics on zero frames".into()));
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(s, m)| ((s / n as f64 - m * m).max(0.0).sqrt().max(1e-5)) as f32)
            .collect();
        Ok(FeatureNorm {
            mean: mean.into_iter().map(|m| m as f32).collect(),
            std,
        })
    }

    pub fn apply(&self, m: &FeatureMatrix) -> FeatureMatrix {
        let frames = m
            .frames
            .chunks_exact(N_MELS)
            .flat_map(|row| {
                row.iter()
                    .zip(&self.mean)
                    .zip(&self.std)
                    .map(|((v, mu), sd)| (v - mu) / sd)
            })
            .collect();
        FeatureMatrix {
            utterance_id: m.utterance_id.clone(),
            frames,
            frame_shift: m.frame_shift,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mel_scale_round_trips() {
        for hz in [0.0, 20.0, 1000.0, 7600.0] {
            assert!((mel_to_hz(hz_to_mel(hz)) - hz).abs() < 1e-9);
        }
        assert!((hz_to_mel(700.0) - 2595.0 * 2f64.log10()).abs() < 1e-9);
    }

    #[test]
    fn filters_peak_at_their_centres() {
        let cfg = DspConfig::default();
        let centres = mel_centers(&cfg);
        assert_eq!(centres.len(), N_MELS);
        assert!(centres.windows(2).all(|w| w[0] < w[1]));
        assert!(centres[0] > cfg.fmin && centres[N_MELS - 1] < cfg.fmax);
    }

    #[test]
    fn decimation_averages_blocks() {
        let a = AudioBuffer::new(vec![1.0, 3.0, 5.0, 7.0], 32_000).unwrap();
        let d = a.decimate(16_000).unwrap();
        assert_eq!(d.samples, vec![2.0, 6.0]);
        assert!(a.decimate(12_000).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(DspConfig::default().validate().is_ok());
        let cfg = DspConfig {
            fft_size: 256,
            ..DspConfig::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = DspConfig {
            fmax: 9000.0,
            ..DspConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
