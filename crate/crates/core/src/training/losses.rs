//! Loss graphs: reconstruction, VQ and the three idempotence distances.

use std::f64::consts::PI;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::audio::AudioBuffer;
use crate::autodiff::{SparseMap, Tape, Tensor, Var};
use crate::codec::{CodecModel, EncodeGraph, EncodeOptions, LevelGraph};
use crate::error::{Error, Result};
use crate::metrics::hann_periodic;

/// Window sizes of the multiscale spectral term; hop is half the window.
pub const SPECTRAL_WINDOWS: [usize; 3] = [64, 128, 256];
/// Offset inside the log of the spectral term.
pub const SPECTRAL_LOG_EPS: f64 = 1e-1;
const MAGNITUDE_EPS: f64 = 1e-12;

/// Which idempotence distance a fine-tune adds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IdemKind {
    None,
    /// Continuous encoder latents of both encodings.
    Enc,
    /// Projected residuals of both encodings, per level.
    Proj,
    /// Second-encoding projected residuals against the first encoding's
    /// selected codebook rows.
    Code,
    /// Encoder latents of the second encoding against the quantized latents
    /// of the first.
    EncQuantized,
}

impl IdemKind {
    pub const VARIANTS: [IdemKind; 4] = [IdemKind::Enc, IdemKind::Proj, IdemKind::Code, IdemKind::EncQuantized];

    /// λ used when none is given.
    pub fn default_lambda(self) -> f64 {
        match self {
            IdemKind::None => 0.0,
            IdemKind::Enc | IdemKind::EncQuantized => 1.0,
            IdemKind::Proj => 10.0,
            IdemKind::Code => 100.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            IdemKind::None => "none",
            IdemKind::Enc => "enc",
            IdemKind::Proj => "proj",
            IdemKind::Code => "code",
            IdemKind::EncQuantized => "enc_quantized",
        }
    }
}

impl std::str::FromStr for IdemKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(IdemKind::None),
            "enc" => Ok(IdemKind::Enc),
            "proj" => Ok(IdemKind::Proj),
            "code" => Ok(IdemKind::Code),
            "enc_quantized" => Ok(IdemKind::EncQuantized),
            other => Err(Error::arg(format!("unknown idempotence loss '{other}'"))),
        }
    }
}

impl std::fmt::Display for IdemKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub recon_wave: f64,
    pub recon_spec: f64,
    pub commit: f64,
    pub codebook: f64,
    /// λ; ignored when `idem_kind` is `None`.
    pub idem: f64,
    pub idem_kind: IdemKind,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            recon_wave: 10.0,
            recon_spec: 1.0,
            commit: 0.25,
            codebook: 1.0,
            idem: 0.0,
            idem_kind: IdemKind::None,
        }
    }
}

impl LossWeights {
    /// Pretraining weights plus one idempotence loss at its default λ.
    pub fn with_idem(kind: IdemKind) -> Self {
        Self {
            idem: kind.default_lambda(),
            idem_kind: kind,
            ..Self::default()
        }
    }

    pub fn zero() -> Self {
        Self {
            recon_wave: 0.0,
            recon_spec: 0.0,
            commit: 0.0,
            codebook: 0.0,
            idem: 0.0,
            idem_kind: IdemKind::None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.recon_wave, self.recon_spec, self.commit, self.codebook, self.idem];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::arg("loss weights must be finite and non-negative"));
        }
        Ok(())
    }

    /// λ actually applied.
    pub fn effective_idem(&self) -> f64 {
        if self.idem_kind == IdemKind::None { 0.0 } else { self.idem }
    }
}

struct SpectralScale {
    framing: Arc<SparseMap>,
    rows: usize,
    window: usize,
    cos: Tensor,
    sin: Tensor,
}

/// Framing maps and windowed DFT bases for one signal shape.
pub struct SpectralBank {
    n_samples: usize,
    batch: usize,
    scales: Vec<SpectralScale>,
}

fn spectral_frames(n: usize, w: usize) -> usize {
    let hop = w / 2;
    if n <= w { 1 } else { (n - w).div_ceil(hop) + 1 }
}

impl SpectralBank {
    pub fn new(n_samples: usize, batch: usize) -> Result<Self> {
        if n_samples == 0 || batch == 0 {
            return Err(Error::arg("spectral loss needs a non-empty signal"));
        }
        let mut scales = Vec::new();
        for w in SPECTRAL_WINDOWS {
            let hop = w / 2;
            let n_frames = spectral_frames(n_samples, w);
            let mut entries = Vec::new();
            for b in 0..batch {
                for f in 0..n_frames {
                    for j in 0..w {
                        let src = f * hop + j;
                        if src < n_samples {
                            let out = (b * n_frames + f) * w + j;
                            entries.push((out as u32, (b * n_samples + src) as u32, 1.0));
                        }
                    }
                }
            }
            let framing = Arc::new(SparseMap::new(batch * n_samples, batch * n_frames * w, entries)?);
            let bins = w / 2 + 1;
            let window = hann_periodic(w);
            let mut cos = vec![0.0; w * bins];
            let mut sin = vec![0.0; w * bins];
            for j in 0..w {
                for k in 0..bins {
                    let phase = 2.0 * PI * ((j * k) % w) as f64 / w as f64;
                    cos[j * bins + k] = window[j] * phase.cos();
                    sin[j * bins + k] = -window[j] * phase.sin();
                }
            }
            scales.push(SpectralScale {
                framing,
                rows: batch * n_frames,
                window: w,
                cos: Tensor::matrix(w, bins, cos)?,
                sin: Tensor::matrix(w, bins, sin)?,
            });
        }
        Ok(Self {
            n_samples,
            batch,
            scales,
        })
    }

    pub fn fits(&self, n_samples: usize, batch: usize) -> bool {
        self.n_samples == n_samples && self.batch == batch
    }

    fn log_magnitudes(&self, tape: &Tape, signal: Var) -> Result<Vec<Var>> {
        self.scales
            .iter()
            .map(|s| {
                let frames = tape.linear_map(signal, s.framing.clone(), &[s.rows, s.window])?;
                let re = tape.matmul(frames, tape.constant(s.cos.clone()))?;
                let im = tape.matmul(frames, tape.constant(s.sin.clone()))?;
                let power = tape.add(tape.square(re)?, tape.square(im)?)?;
                let mag = tape.sqrt(tape.add_scalar(power, MAGNITUDE_EPS)?)?;
                tape.ln(tape.add_scalar(mag, SPECTRAL_LOG_EPS)?)
            })
            .collect()
    }

    /// Sum over scales of the mean absolute log-magnitude difference.
    pub fn distance(&self, tape: &Tape, x: Var, x_hat: Var) -> Result<Var> {
        let a = self.log_magnitudes(tape, x)?;
        let b = self.log_magnitudes(tape, x_hat)?;
        let mut total: Option<Var> = None;
        for (la, lb) in a.into_iter().zip(b) {
            let term = tape.mean(tape.abs(tape.sub(la, lb)?)?)?;
            total = Some(match total {
                Some(t) => tape.add(t, term)?,
                None => term,
            });
        }
        Ok(total.expect("at least one scale"))
    }
}

/// Separately weighted reconstruction terms; `None` when the weight is zero.
pub struct ReconGraph {
    pub wave: Option<Var>,
    pub spec: Option<Var>,
}

pub fn reconstruction_graph(
    tape: &Tape,
    bank: &SpectralBank,
    x: Var,
    x_hat: Var,
    weights: &LossWeights,
) -> Result<ReconGraph> {
    let wave = if weights.recon_wave > 0.0 {
        Some(tape.scale(tape.mse(x, x_hat)?, weights.recon_wave)?)
    } else {
        None
    };
    let spec = if weights.recon_spec > 0.0 {
        Some(tape.scale(bank.distance(tape, x, x_hat)?, weights.recon_spec)?)
    } else {
        None
    };
    Ok(ReconGraph { wave, spec })
}

/// Weighted reconstruction loss between two signals of equal length.
pub fn loss_reconstruction(x: &AudioBuffer, x_hat: &AudioBuffer, weights: &LossWeights) -> Result<f64> {
    if x.len() != x_hat.len() {
        return Err(Error::shape(
            "loss_reconstruction",
            format!("{} vs {} samples", x.len(), x_hat.len()),
        ));
    }
    let tape = Tape::new();
    let bank = SpectralBank::new(x.len(), 1)?;
    let a = tape.constant(Tensor::matrix(1, x.len(), x.samples().to_vec())?);
    let b = tape.constant(Tensor::matrix(1, x.len(), x_hat.samples().to_vec())?);
    let g = reconstruction_graph(&tape, &bank, a, b, weights)?;
    Ok(g.wave.map_or(0.0, |v| tape.item(v)) + g.spec.map_or(0.0, |v| tape.item(v)))
}

/// Per-frame squared norm of `a - b`, as a vector over rows.
fn row_sq_norms(tape: &Tape, a: Var, b: Var) -> Result<Var> {
    let diff = tape.sub(a, b)?;
    let cols = tape.value(diff).cols() as f64;
    tape.scale(tape.mean_over_axis(tape.square(diff)?, 1)?, cols)
}

fn masked_mean(tape: &Tape, rows: Var, mask: Option<&[f64]>) -> Result<Var> {
    match mask {
        None => tape.mean(rows),
        Some(m) => {
            let n = m.len() as f64;
            let masked = tape.mul(rows, tape.constant(Tensor::vector(m.to_vec())))?;
            tape.scale(tape.sum(masked)?, 1.0 / n)
        }
    }
}

/// Codebook and commitment terms summed over levels; optional per-level row
/// masks exclude dropped levels.
pub struct VqGraph {
    pub codebook: Option<Var>,
    pub commit: Option<Var>,
}

pub fn vq_graph(
    tape: &Tape,
    levels: &[LevelGraph],
    masks: Option<&[Vec<f64>]>,
    codebook_weight: f64,
    commit_weight: f64,
) -> Result<VqGraph> {
    let mut codebook: Option<Var> = None;
    let mut commit: Option<Var> = None;
    let push = |acc: &mut Option<Var>, v: Var| -> Result<()> {
        *acc = Some(match *acc {
            Some(a) => tape.add(a, v)?,
            None => v,
        });
        Ok(())
    };
    for (l, level) in levels.iter().enumerate() {
        let mask = masks.map(|m| m[l].as_slice());
        if codebook_weight > 0.0 {
            let rows = row_sq_norms(tape, tape.stop_gradient(level.projected), level.selected)?;
            push(&mut codebook, masked_mean(tape, rows, mask)?)?;
        }
        if commit_weight > 0.0 {
            let rows = row_sq_norms(tape, level.projected, tape.stop_gradient(level.selected))?;
            push(&mut commit, masked_mean(tape, rows, mask)?)?;
        }
    }
    Ok(VqGraph {
        codebook: codebook.map(|v| tape.scale(v, codebook_weight)).transpose()?,
        commit: commit.map(|v| tape.scale(v, commit_weight)).transpose()?,
    })
}

fn mean_row_distance(tape: &Tape, a: Var, b: Var) -> Result<Var> {
    let (av, bv) = (tape.value(a), tape.value(b));
    if av.shape() != bv.shape() {
        return Err(Error::Shape {
            op: "idempotence",
            detail: format!("first encoding {:?}, second {:?}", bv.shape(), av.shape()),
        });
    }
    tape.mean(tape.l2_norm_rows(tape.sub(a, b)?)?)
}

/// Unweighted idempotence distance between a first and a second encoding.
pub fn idem_graph(tape: &Tape, kind: IdemKind, first: &EncodeGraph, second: &EncodeGraph) -> Result<Option<Var>> {
    let per_level = |target: &dyn Fn(&LevelGraph) -> Var| -> Result<Var> {
        let mut acc: Option<Var> = None;
        for (a, b) in second.levels.iter().zip(&first.levels) {
            let d = mean_row_distance(tape, a.projected, target(b))?;
            acc = Some(match acc {
                Some(s) => tape.add(s, d)?,
                None => d,
            });
        }
        acc.ok_or_else(|| Error::arg("no quantizer levels"))
    };
    Ok(match kind {
        IdemKind::None => None,
        IdemKind::Enc => Some(mean_row_distance(tape, second.z, first.z)?),
        IdemKind::EncQuantized => Some(mean_row_distance(tape, second.z, tape.stop_gradient(first.z_hat))?),
        IdemKind::Proj => Some(per_level(&|l| l.projected)?),
        IdemKind::Code => Some(per_level(&|l| tape.stop_gradient(l.selected))?),
    })
}

/// Value of an idempotence distance between the encodings of `x` and `x_prime`.
pub fn loss_idem(model: &CodecModel, kind: IdemKind, x: &AudioBuffer, x_prime: &AudioBuffer) -> Result<f64> {
    if x.len() != x_prime.len() {
        return Err(Error::shape(
            "idempotence",
            format!("{} vs {} samples", x.len(), x_prime.len()),
        ));
    }
    // Shape and rate checks shared with inference.
    model.encode_tokens(x)?;
    let tape = Tape::new();
    let bound = model.bind(&tape, |_| false);
    let encode = |signal: &AudioBuffer| -> Result<EncodeGraph> {
        let s = tape.constant(Tensor::matrix(1, signal.len(), signal.samples().to_vec())?);
        let frames = bound.frames(s, signal.len(), 1)?;
        bound.encode_graph(frames, &EncodeOptions::default())
    };
    let first = encode(x)?;
    let second = encode(x_prime)?;
    Ok(idem_graph(&tape, kind, &first, &second)?.map_or(0.0, |v| tape.item(v)))
}

pub fn loss_idem_enc(model: &CodecModel, x: &AudioBuffer, x_prime: &AudioBuffer) -> Result<f64> {
    loss_idem(model, IdemKind::Enc, x, x_prime)
}

pub fn loss_idem_proj(model: &CodecModel, x: &AudioBuffer, x_prime: &AudioBuffer) -> Result<f64> {
    loss_idem(model, IdemKind::Proj, x, x_prime)
}

pub fn loss_idem_code(model: &CodecModel, x: &AudioBuffer, x_prime: &AudioBuffer) -> Result<f64> {
    loss_idem(model, IdemKind::Code, x, x_prime)
}
