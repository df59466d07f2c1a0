//! Hand-built codecs with known shift behavior, used to check the harness.

use crate::audio::AudioBuffer;
use crate::codec::Codec;
use crate::error::{Error, Result};
use crate::metrics::TokenGrid;

fn check(x: &AudioBuffer, sample_rate: u32, hop: usize) -> Result<usize> {
    if x.sample_rate() != sample_rate {
        return Err(Error::arg("sample rate mismatch"));
    }
    Ok(x.len().div_ceil(hop).max(1))
}

/// Phase-sensitive mock: each token packs the signs of the input at fixed
/// sample positions of its frame. Decoding emits `±1` plateaus around those
/// positions, so re-encoding a decoded signal (at any gain) returns the
/// same tokens.
#[derive(Clone, Debug)]
pub struct SignCodec {
    sample_rate: u32,
    hop: usize,
    bits: usize,
    levels: usize,
}

impl SignCodec {
    /// `bits` probe positions per level (at most 6, so codes fit `K = 64`),
    /// two levels.
    pub fn new(sample_rate: u32, hop: usize, bits: usize) -> Self {
        Self::with_levels(sample_rate, hop, bits, 2)
    }

    pub fn with_levels(sample_rate: u32, hop: usize, bits: usize, levels: usize) -> Self {
        assert!((1..=6).contains(&bits) && levels >= 1 && hop >= bits * levels);
        Self {
            sample_rate,
            hop,
            bits,
            levels,
        }
    }

    /// Offsets within a frame, one per (level, bit), evenly spread.
    fn probes(&self) -> Vec<usize> {
        let n = self.bits * self.levels;
        (0..n).map(|i| (2 * i + 1) * self.hop / (2 * n)).collect()
    }
}

impl Codec for SignCodec {
    fn name(&self) -> String {
        format!("sign{}x{}", self.bits, self.levels)
    }

    fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    fn hop(&self) -> usize {
        self.hop
    }

    fn encode_tokens(&self, x: &AudioBuffer) -> Result<TokenGrid> {
        let frames = check(x, self.sample_rate, self.hop)?;
        let probes = self.probes();
        let s = x.samples();
        let mut levels = vec![Vec::with_capacity(frames); self.levels];
        for f in 0..frames {
            for (l, codes) in levels.iter_mut().enumerate() {
                let mut code = 0u32;
                for b in 0..self.bits {
                    let pos = f * self.hop + probes[l * self.bits + b];
                    if s.get(pos).copied().unwrap_or(0.0) >= 0.0 {
                        code |= 1 << b;
                    }
                }
                codes.push(code);
            }
        }
        TokenGrid::from_levels(levels, 64)
    }

    fn decode_tokens(&self, tokens: &TokenGrid, n_samples: usize) -> Result<AudioBuffer> {
        let probes = self.probes();
        let mut out = vec![0.0; n_samples];
        for (i, v) in out.iter_mut().enumerate() {
            let f = (i / self.hop).min(tokens.n_frames() - 1);
            let within = i - f * self.hop;
            // Nearest probe in this frame.
            let k = probes
                .iter()
                .enumerate()
                .min_by_key(|(_, &p)| p.abs_diff(within))
                .map(|(k, _)| k)
                .expect("probes");
            let (l, b) = (k / self.bits, k % self.bits);
            *v = if tokens.get(l, f) >> b & 1 == 1 { 1.0 } else { -1.0 };
        }
        AudioBuffer::new(out, self.sample_rate)
    }
}

/// Phase-blind mock: each token is the frame's log energy, measured over a
/// window many hops long and quantized into coarse bins. Decoding emits
/// a fixed sinusoid whose per-frame amplitude sits at the bin center.
#[derive(Clone, Debug)]
pub struct EnergyCodec {
    sample_rate: u32,
    hop: usize,
    window: usize,
    bin_db: f64,
}

const ENERGY_FLOOR_DB: f64 = -120.0;
const ENERGY_BINS: u32 = 64;

impl EnergyCodec {
    pub fn new(sample_rate: u32, hop: usize) -> Self {
        Self {
            sample_rate,
            hop,
            window: 16 * hop,
            bin_db: 12.0,
        }
    }

    fn frame_db(&self, s: &[f64], f: usize) -> f64 {
        let center = (f * self.hop + self.hop / 2) as i64;
        let half = (self.window / 2) as i64;
        let (mut acc, mut n) = (0.0, 0usize);
        for i in center - half..center + half {
            if i >= 0 && (i as usize) < s.len() {
                acc += s[i as usize] * s[i as usize];
                n += 1;
            }
        }
        let power = if n == 0 { 0.0 } else { acc / n as f64 };
        10.0 * power.max(1e-30).log10()
    }

    fn bin(&self, db: f64) -> u32 {
        (((db - ENERGY_FLOOR_DB) / self.bin_db).floor().max(0.0) as u32).min(ENERGY_BINS - 1)
    }
}

impl Codec for EnergyCodec {
    fn name(&self) -> String {
        "energy".into()
    }

    fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    fn hop(&self) -> usize {
        self.hop
    }

    fn encode_tokens(&self, x: &AudioBuffer) -> Result<TokenGrid> {
        let frames = check(x, self.sample_rate, self.hop)?;
        let codes = (0..frames).map(|f| self.bin(self.frame_db(x.samples(), f))).collect();
        TokenGrid::from_levels(vec![codes], ENERGY_BINS as usize)
    }

    fn decode_tokens(&self, tokens: &TokenGrid, n_samples: usize) -> Result<AudioBuffer> {
        let period = 16.0;
        let out = (0..n_samples)
            .map(|i| {
                let f = (i / self.hop).min(tokens.n_frames() - 1);
                let db = ENERGY_FLOOR_DB + (tokens.get(0, f) as f64 + 0.5) * self.bin_db;
                let amp = (2.0 * 10f64.powf(db / 10.0)).sqrt();
                amp * (2.0 * std::f64::consts::PI * i as f64 / period).sin()
            })
            .collect();
        AudioBuffer::new(out, self.sample_rate)
    }
}
