//! Full-reference audio quality metrics and token-space stability metrics.

use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::audio::AudioBuffer;
use crate::error::{Error, Result};

/// Integer code indices of shape `(n_levels, n_frames)`, row-major by level.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenGrid {
    codes: Vec<u32>,
    n_levels: usize,
    n_frames: usize,
    codebook_size: usize,
}

impl TokenGrid {
    pub fn new(codes: Vec<u32>, n_levels: usize, n_frames: usize, codebook_size: usize) -> Result<Self> {
        if n_levels == 0 || n_frames == 0 {
            return Err(Error::arg("token grid needs at least one level and one frame"));
        }
        if codebook_size == 0 {
            return Err(Error::arg("codebook size must be positive"));
        }
        if codes.len() != n_levels * n_frames {
            return Err(Error::shape(
                "TokenGrid::new",
                format!("{} codes for {n_levels}x{n_frames} grid", codes.len()),
            ));
        }
        if let Some(bad) = codes.iter().find(|&&c| c as usize >= codebook_size) {
            return Err(Error::arg(format!(
                "code {bad} outside codebook of size {codebook_size}"
            )));
        }
        Ok(Self {
            codes,
            n_levels,
            n_frames,
            codebook_size,
        })
    }

    /// Builds a grid from one code sequence per level.
    pub fn from_levels(levels: Vec<Vec<u32>>, codebook_size: usize) -> Result<Self> {
        let n_levels = levels.len();
        let n_frames = levels.first().map_or(0, Vec::len);
        if levels.iter().any(|l| l.len() != n_frames) {
            return Err(Error::shape("TokenGrid::from_levels", "ragged levels"));
        }
        Self::new(levels.concat(), n_levels, n_frames, codebook_size)
    }

    pub fn zeros(n_levels: usize, n_frames: usize, codebook_size: usize) -> Result<Self> {
        Self::new(vec![0; n_levels * n_frames], n_levels, n_frames, codebook_size)
    }

    pub fn n_levels(&self) -> usize {
        self.n_levels
    }

    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    pub fn codebook_size(&self) -> usize {
        self.codebook_size
    }

    pub fn get(&self, level: usize, frame: usize) -> u32 {
        self.codes[level * self.n_frames + frame]
    }

    pub fn level(&self, level: usize) -> &[u32] {
        &self.codes[level * self.n_frames..(level + 1) * self.n_frames]
    }

    pub fn codes(&self) -> &[u32] {
        &self.codes
    }

    /// CSV dump with header `level,frame,index`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("level,frame,index\n");
        for l in 0..self.n_levels {
            for (t, code) in self.level(l).iter().enumerate() {
                out.push_str(&format!("{l},{t},{code}\n"));
            }
        }
        out
    }
}

/// Metrics for one clip at one encoding iteration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub iteration: usize,
    pub si_sdr_db: f64,
    pub lsd: f64,
    /// Absent on the first iteration, which has no predecessor.
    pub match_rate_per_level: Option<Vec<f64>>,
    pub entropy_pct_per_level: Vec<f64>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Scale-invariant signal-to-distortion ratio in dB; `+inf` for a perfect
/// (scaled) reconstruction and `-inf` when the estimate is orthogonal to the
/// reference.
pub fn si_sdr(reference: &AudioBuffer, estimate: &AudioBuffer) -> Result<f64> {
    si_sdr_slices(reference.samples(), estimate.samples())
}

pub fn si_sdr_slices(reference: &[f64], estimate: &[f64]) -> Result<f64> {
    if reference.len() != estimate.len() {
        return Err(Error::arg(format!(
            "si_sdr length mismatch: {} vs {}",
            reference.len(),
            estimate.len()
        )));
    }
    let ref_energy = dot(reference, reference);
    if ref_energy == 0.0 {
        return Err(Error::arg("si_sdr reference has zero energy"));
    }
    let alpha = dot(estimate, reference) / ref_energy;
    let mut target_energy = 0.0;
    let mut noise_energy = 0.0;
    for (r, e) in reference.iter().zip(estimate) {
        let target = alpha * r;
        target_energy += target * target;
        noise_energy += (target - e) * (target - e);
    }
    if noise_energy == 0.0 {
        return Ok(f64::INFINITY);
    }
    if target_energy == 0.0 {
        return Ok(f64::NEG_INFINITY);
    }
    Ok(10.0 * (target_energy / noise_energy).log10())
}

pub const LSD_WINDOW: usize = 256;
pub const LSD_HOP: usize = 128;
pub const LSD_EPS: f64 = 1e-8;

/// STFT magnitudes with a periodic Hann window. Short or ragged tails are
/// zero-padded to a whole frame.
struct Stft {
    fft: Arc<dyn Fft<f64>>,
    window: Vec<f64>,
}

impl Stft {
    fn new(size: usize) -> Self {
        let fft = FftPlanner::new().plan_fft_forward(size);
        Self {
            fft,
            window: hann_periodic(size),
        }
    }

    fn magnitudes(&self, signal: &[f64], hop: usize) -> Vec<Vec<f64>> {
        let size = self.window.len();
        let n_frames = if signal.len() <= size {
            1
        } else {
            (signal.len() - size).div_ceil(hop) + 1
        };
        let mut buf = vec![Complex::new(0.0, 0.0); size];
        (0..n_frames)
            .map(|f| {
                for (i, slot) in buf.iter_mut().enumerate() {
                    let s = signal.get(f * hop + i).copied().unwrap_or(0.0);
                    *slot = Complex::new(s * self.window[i], 0.0);
                }
                self.fft.process(&mut buf);
                buf[..size / 2 + 1].iter().map(|c| c.norm()).collect()
            })
            .collect()
    }
}

pub(crate) fn hann_periodic(size: usize) -> Vec<f64> {
    (0..size)
        .map(|n| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / size as f64).cos())
        .collect()
}

/// Root-mean-square log-spectral distance in dB (Hann 256 / hop 128).
pub fn log_spectral_distance(reference: &AudioBuffer, estimate: &AudioBuffer) -> Result<f64> {
    if reference.len() != estimate.len() {
        return Err(Error::arg(format!(
            "log_spectral_distance length mismatch: {} vs {}",
            reference.len(),
            estimate.len()
        )));
    }
    let stft = Stft::new(LSD_WINDOW);
    let r = stft.magnitudes(reference.samples(), LSD_HOP);
    let e = stft.magnitudes(estimate.samples(), LSD_HOP);
    let mut acc = 0.0;
    let mut count = 0usize;
    for (rf, ef) in r.iter().zip(&e) {
        for (a, b) in rf.iter().zip(ef) {
            let d = 20.0 * ((a + LSD_EPS) / (b + LSD_EPS)).log10();
            acc += d * d;
            count += 1;
        }
    }
    Ok((acc / count as f64).sqrt())
}

/// Fraction of frames with identical codes, per level.
pub fn match_rate(a: &TokenGrid, b: &TokenGrid) -> Result<Vec<f64>> {
    if a.n_levels != b.n_levels || a.n_frames != b.n_frames {
        return Err(Error::arg(format!(
            "match_rate shape mismatch: {}x{} vs {}x{}",
            a.n_levels, a.n_frames, b.n_levels, b.n_frames
        )));
    }
    Ok((0..a.n_levels)
        .map(|l| {
            let same = a
                .level(l)
                .iter()
                .zip(b.level(l))
                .filter(|(x, y)| x == y)
                .count();
            same as f64 / a.n_frames as f64
        })
        .collect())
}

/// Token entropy as a percentage of `ln K`, per level. A codebook of size 1
/// is reported as 100.
pub fn codebook_use(tokens: &TokenGrid) -> Vec<f64> {
    let k = tokens.codebook_size;
    (0..tokens.n_levels)
        .map(|l| {
            if k == 1 {
                return 100.0;
            }
            let mut counts = vec![0usize; k];
            for &c in tokens.level(l) {
                counts[c as usize] += 1;
            }
            let n = tokens.n_frames as f64;
            let h: f64 = counts
                .iter()
                .filter(|&&c| c > 0)
                .map(|&c| {
                    let p = c as f64 / n;
                    // Written this way so a single-token level gives +0.
                    p * (n / c as f64).ln()
                })
                .sum();
            (100.0 * h / (k as f64).ln()).clamp(0.0, 100.0)
        })
        .collect()
}

/// Pearson correlation coefficient.
pub fn pearson_corr(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::arg("pearson_corr length mismatch"));
    }
    if xs.len() < 2 {
        return Err(Error::Undefined("pearson_corr needs at least two points".into()));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Undefined("pearson_corr of a zero-variance sequence".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.iter().sum::<f64>() / values.len() as f64
}
