//! Mono waveform container, WAV I/O, volume matching, time shifting and the
//! synthetic corpus used for desk-scale training and evaluation.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand::distr::weighted::WeightedIndex;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Sample rate of the reference experiment profile.
pub const REFERENCE_SAMPLE_RATE: u32 = 8000;

/// Peak level every synthetic clip is normalized to.
pub const SYNTH_PEAK: f64 = 0.9;

/// A mono waveform with its sample rate.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioBuffer {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl AudioBuffer {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::EmptyAudio);
        }
        if sample_rate == 0 {
            return Err(Error::arg("sample rate must be positive"));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::arg(format!("sample {i} is not finite")));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    /// Always false; a buffer holds at least one sample.
    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_seconds(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn rms(&self) -> f64 {
        rms(&self.samples)
    }

    pub fn peak(&self) -> f64 {
        self.samples.iter().fold(0.0f64, |m, s| m.max(s.abs()))
    }

    /// The first `n` samples, or the whole buffer when shorter.
    pub fn head(&self, n: usize) -> AudioBuffer {
        let n = n.clamp(1, self.samples.len());
        AudioBuffer {
            samples: self.samples[..n].to_vec(),
            sample_rate: self.sample_rate,
        }
    }

    pub fn slice(&self, start: usize, len: usize) -> Result<AudioBuffer> {
        if len == 0 || start + len > self.samples.len() {
            return Err(Error::arg(format!(
                "slice [{start}, {}) outside buffer of {} samples",
                start + len,
                self.samples.len()
            )));
        }
        Ok(AudioBuffer {
            samples: self.samples[start..start + len].to_vec(),
            sample_rate: self.sample_rate,
        })
    }
}

pub(crate) fn rms(samples: &[f64]) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    (samples.iter().map(|s| s * s).sum::<f64>() / samples.len() as f64).sqrt()
}

/// Reads a PCM16 or float32 WAV file. Multichannel files yield their first
/// channel.
pub fn read_wav(path: impl AsRef<Path>) -> Result<AudioBuffer> {
    let path = path.as_ref();
    let mut reader = hound::WavReader::open(path).map_err(|e| wav_error(path, e))?;
    let spec = reader.spec();
    let channels = spec.channels.max(1) as usize;
    let samples: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .samples::<i16>()
            .step_by(channels)
            .map(|s| s.map(|v| v as f64 / 32768.0))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| wav_error(path, e))?,
        (hound::SampleFormat::Float, 32) => reader
            .samples::<f32>()
            .step_by(channels)
            .map(|s| s.map(|v| v as f64))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| wav_error(path, e))?,
        (fmt, bits) => {
            return Err(Error::Unsupported(format!(
                "{bits}-bit {fmt:?} samples in {}",
                path.display()
            )))
        }
    };
    if samples.is_empty() {
        return Err(Error::EmptyAudio);
    }
    AudioBuffer::new(samples, spec.sample_rate)
}

fn wav_error(path: &Path, e: hound::Error) -> Error {
    match e {
        hound::Error::IoError(source) => Error::io(path, source),
        hound::Error::Unsupported => Error::Unsupported(format!("{}", path.display())),
        other => Error::Format(format!("{}: {other}", path.display())),
    }
}

/// Maps a sample in [-1, 1] to PCM16; out-of-range values are hard-clipped.
pub fn quantize_pcm16(sample: f64) -> i16 {
    (sample * 32768.0).round().clamp(-32768.0, 32767.0) as i16
}

/// Writes a 16-bit PCM mono WAV at the buffer's sample rate.
pub fn write_wav(buf: &AudioBuffer, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: buf.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(|e| wav_error(path, e))?;
    for &s in &buf.samples {
        writer
            .write_sample(quantize_pcm16(s))
            .map_err(|e| wav_error(path, e))?;
    }
    writer.finalize().map_err(|e| wav_error(path, e))
}

/// Result of [`match_rms`].
#[derive(Clone, Debug, PartialEq)]
pub struct RmsMatched {
    pub audio: AudioBuffer,
    /// The output had zero energy and was returned unchanged.
    pub silent_output: bool,
}

/// Gains this close to unity are treated as already matched, which makes
/// repeated application exact.
const UNITY_GAIN_TOLERANCE: f64 = 1e-12;

/// Scales `out` so its RMS equals that of `reference`.
pub fn match_rms(out: &AudioBuffer, reference: &AudioBuffer) -> Result<RmsMatched> {
    let ref_rms = reference.rms();
    if ref_rms <= 0.0 {
        return Err(Error::arg("reference RMS must be positive"));
    }
    let out_rms = out.rms();
    if out_rms == 0.0 {
        return Ok(RmsMatched {
            audio: out.clone(),
            silent_output: true,
        });
    }
    let gain = ref_rms / out_rms;
    let audio = if (gain - 1.0).abs() <= UNITY_GAIN_TOLERANCE {
        out.clone()
    } else {
        AudioBuffer {
            samples: out.samples.iter().map(|s| s * gain).collect(),
            sample_rate: out.sample_rate,
        }
    };
    Ok(RmsMatched {
        audio,
        silent_output: false,
    })
}

/// Delays (positive shift) or advances (negative shift) the signal, filling
/// with zeros and keeping the length.
pub fn time_shift(buf: &AudioBuffer, shift_samples: i64) -> Result<AudioBuffer> {
    let n = buf.samples.len();
    if shift_samples.unsigned_abs() as usize >= n {
        return Err(Error::arg(format!(
            "shift of {shift_samples} samples is not smaller than buffer length {n}"
        )));
    }
    let k = shift_samples.unsigned_abs() as usize;
    let mut samples = vec![0.0; n];
    if shift_samples >= 0 {
        samples[k..].copy_from_slice(&buf.samples[..n - k]);
    } else {
        samples[..n - k].copy_from_slice(&buf.samples[k..]);
    }
    Ok(AudioBuffer {
        samples,
        sample_rate: buf.sample_rate,
    })
}

/// Signal classes of the synthetic corpus.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ClipKind {
    Harmonic,
    Chirp,
    AmNoise,
    ToneNoise,
}

impl ClipKind {
    pub const ALL: [ClipKind; 4] = [
        ClipKind::Harmonic,
        ClipKind::Chirp,
        ClipKind::AmNoise,
        ClipKind::ToneNoise,
    ];
}

/// Description of a synthetic corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub n_clips: usize,
    pub clip_seconds: f64,
    pub sample_rate: u32,
    pub seed: u64,
    /// Weights over harmonic tone, chirp, AM noise, tone+noise.
    pub mix: [f64; 4],
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            n_clips: 64,
            clip_seconds: 2.0,
            sample_rate: REFERENCE_SAMPLE_RATE,
            seed: 42,
            mix: [0.4, 0.3, 0.1, 0.2],
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        if self.mix.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::arg("corpus mix weights must be nonnegative"));
        }
        let total: f64 = self.mix.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::arg(format!("corpus mix weights sum to {total}, not 1")));
        }
        if !(self.clip_seconds > 0.0 && self.clip_seconds.is_finite()) {
            return Err(Error::arg("clip_seconds must be positive"));
        }
        if self.sample_rate == 0 {
            return Err(Error::arg("sample rate must be positive"));
        }
        if self.clip_samples() == 0 {
            return Err(Error::arg("clips would be empty"));
        }
        Ok(())
    }

    pub fn clip_samples(&self) -> usize {
        (self.clip_seconds * self.sample_rate as f64).round() as usize
    }
}

/// Generates the corpus described by `spec`. Pure function of the spec.
pub fn synth_corpus(spec: &CorpusSpec) -> Result<Vec<AudioBuffer>> {
    Ok(synth_corpus_labeled(spec)?
        .into_iter()
        .map(|(_, clip)| clip)
        .collect())
}

/// Like [`synth_corpus`] but also reports the class of every clip.
pub fn synth_corpus_labeled(spec: &CorpusSpec) -> Result<Vec<(ClipKind, AudioBuffer)>> {
    spec.validate()?;
    if spec.n_clips == 0 {
        return Ok(Vec::new());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let classes = WeightedIndex::new(spec.mix).map_err(|e| Error::arg(e.to_string()))?;
    let n = spec.clip_samples();
    let sr = spec.sample_rate as f64;
    (0..spec.n_clips)
        .map(|_| {
            let kind = ClipKind::ALL[classes.sample(&mut rng)];
            let raw = synth_clip(kind, n, sr, &mut rng);
            let peak = raw.iter().fold(0.0f64, |m, s| m.max(s.abs()));
            let gain = if peak > 0.0 { SYNTH_PEAK / peak } else { 0.0 };
            let samples = raw.into_iter().map(|s| s * gain).collect();
            Ok((kind, AudioBuffer::new(samples, spec.sample_rate)?))
        })
        .collect()
}

fn synth_clip(kind: ClipKind, n: usize, sr: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let noise = Normal::new(0.0, 1.0).expect("unit normal");
    match kind {
        ClipKind::Harmonic => {
            let f0 = rng.random_range(80.0..=400.0);
            let n_partials = rng.random_range(3..=8usize);
            let partials: Vec<(f64, f64, f64)> = (1..=n_partials)
                .map(|k| {
                    let amp = rng.random_range(0.3..=1.0) / k as f64;
                    let phase = rng.random_range(0.0..2.0 * PI);
                    (k as f64 * f0, amp, phase)
                })
                .collect();
            (0..n)
                .map(|i| {
                    let t = i as f64 / sr;
                    partials
                        .iter()
                        .map(|&(f, a, p)| a * (2.0 * PI * f * t + p).sin())
                        .sum()
                })
                .collect()
        }
        ClipKind::Chirp => {
            let f_start = rng.random_range(100.0..=3500.0);
            let f_end = rng.random_range(100.0..=3500.0);
            let duration = n as f64 / sr;
            let phase0 = rng.random_range(0.0..2.0 * PI);
            (0..n)
                .map(|i| {
                    let t = i as f64 / sr;
                    let phase = 2.0 * PI * (f_start * t + (f_end - f_start) * t * t / (2.0 * duration));
                    (phase + phase0).sin()
                })
                .collect()
        }
        ClipKind::AmNoise => {
            let f_mod = rng.random_range(2.0..=8.0);
            (0..n)
                .map(|i| {
                    let t = i as f64 / sr;
                    let env = 0.5 + 0.5 * (2.0 * PI * f_mod * t).sin();
                    noise.sample(rng) * env
                })
                .collect()
        }
        ClipKind::ToneNoise => {
            let f = rng.random_range(100.0..=1000.0);
            let phase = rng.random_range(0.0..2.0 * PI);
            (0..n)
                .map(|i| {
                    let t = i as f64 / sr;
                    (2.0 * PI * f * t + phase).sin() + 0.1 * noise.sample(rng)
                })
                .collect()
        }
    }
}
