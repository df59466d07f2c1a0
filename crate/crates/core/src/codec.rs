//! Residual-vector-quantized frame codec.
//!
//! The pipeline factors as
//! `decode ∘ out_projection ∘ codebook_lookup ∘ quantize ∘ in_projection ∘ encode`:
//! a per-frame MLP encoder maps reflect-padded frames to `D`-dimensional
//! latents, every RVQ level projects the running residual to a `d`-dimensional
//! lookup space, picks the nearest codebook row by cosine similarity, and
//! projects the (unnormalized) row back. A per-frame MLP decoder turns the
//! summed reconstruction into frames that are Hann-windowed and overlap-added.

use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::audio::{match_rms, AudioBuffer};
use crate::autodiff::{ParamId, SparseMap, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::metrics::{hann_periodic, TokenGrid};

/// Architecture and framing hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CodecConfig {
    pub sample_rate: u32,
    pub frame_size: usize,
    pub hop: usize,
    pub latent_dim: usize,
    pub code_dim: usize,
    pub n_levels: usize,
    pub codebook_size: usize,
    pub encoder_hidden: Vec<usize>,
    pub seed: u64,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self {
            sample_rate: 8000,
            frame_size: 160,
            hop: 80,
            latent_dim: 64,
            code_dim: 8,
            n_levels: 4,
            codebook_size: 64,
            encoder_hidden: vec![128, 128],
            seed: 42,
        }
    }
}

impl CodecConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::arg(format!("invalid codec config: {m}")));
        if self.sample_rate == 0 {
            return fail("sample_rate must be positive");
        }
        if self.hop == 0 || self.hop > self.frame_size {
            return fail("need 0 < hop <= frame_size");
        }
        if self.code_dim == 0 || self.code_dim > self.latent_dim {
            return fail("need 0 < code_dim <= latent_dim");
        }
        if self.codebook_size < 2 {
            return fail("codebook_size must be at least 2");
        }
        if self.n_levels == 0 {
            return fail("n_levels must be at least 1");
        }
        if self.encoder_hidden.contains(&0) {
            return fail("hidden widths must be positive");
        }
        Ok(())
    }

    /// Frames produced for a signal of `n_samples`.
    pub fn n_frames(&self, n_samples: usize) -> usize {
        n_samples.div_ceil(self.hop)
    }

    /// Left padding placing frame `t` at samples `[t*hop - pad, t*hop - pad + frame)`.
    pub fn pad_left(&self) -> usize {
        (self.frame_size - self.hop) / 2
    }
}

/// Maps an index of the padded signal back into `[0, len)` by mirror
/// reflection about the first and last samples.
fn reflect_index(i: isize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len as isize - 1);
    let mut r = i.rem_euclid(period);
    if r >= len as isize {
        r = period - r;
    }
    r as usize
}

/// Sparse map from a `[batch, n_samples]` signal to `[batch * n_frames, frame]`
/// reflect-padded analysis frames.
pub fn analysis_map(cfg: &CodecConfig, n_samples: usize, batch: usize) -> Result<SparseMap> {
    let n_frames = cfg.n_frames(n_samples);
    let f = cfg.frame_size;
    let pad = cfg.pad_left() as isize;
    let mut entries = Vec::with_capacity(batch * n_frames * f);
    for b in 0..batch {
        for t in 0..n_frames {
            for p in 0..f {
                let src = reflect_index(t as isize * cfg.hop as isize - pad + p as isize, n_samples);
                let out = (b * n_frames + t) * f + p;
                entries.push((out as u32, (b * n_samples + src) as u32, 1.0));
            }
        }
    }
    SparseMap::new(batch * n_samples, batch * n_frames * f, entries)
}

/// Sparse map from `[batch * n_frames, frame]` decoder frames to a
/// `[batch, n_samples]` signal: Hann-weighted overlap-add normalized by the
/// summed window, cropped (or zero-extended) to `n_samples`.
pub fn synthesis_map(cfg: &CodecConfig, n_frames: usize, n_samples: usize, batch: usize) -> Result<SparseMap> {
    let f = cfg.frame_size;
    let pad = cfg.pad_left() as isize;
    let window = hann_periodic(f);
    let mut wsum = vec![0.0; n_samples];
    for t in 0..n_frames {
        for (p, w) in window.iter().enumerate() {
            let j = t as isize * cfg.hop as isize - pad + p as isize;
            if j >= 0 && (j as usize) < n_samples {
                wsum[j as usize] += w;
            }
        }
    }
    let mut entries = Vec::with_capacity(batch * n_frames * f);
    for b in 0..batch {
        for t in 0..n_frames {
            for (p, w) in window.iter().enumerate() {
                let j = t as isize * cfg.hop as isize - pad + p as isize;
                if j < 0 || j as usize >= n_samples {
                    continue;
                }
                let norm = wsum[j as usize];
                if norm < 1e-9 || *w == 0.0 {
                    continue;
                }
                let src = (b * n_frames + t) * f + p;
                entries.push(((b * n_samples + j as usize) as u32, src as u32, w / norm));
            }
        }
    }
    SparseMap::new(batch * n_frames * f, batch * n_samples, entries)
}

/// Which latent space a [`Latents`] matrix lives in.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LatentSpace {
    /// `D`-dimensional encoder output.
    Encoder,
    /// `d`-dimensional lookup space of one RVQ level.
    Projected,
}

/// `n_frames x dim` latent matrix tagged with its space.
#[derive(Clone, Debug, PartialEq)]
pub struct Latents {
    pub space: LatentSpace,
    pub data: Tensor,
}

impl Latents {
    pub fn n_frames(&self) -> usize {
        self.data.rows()
    }
}

/// Codebook vectors of one RVQ level, `K x d`.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    pub vectors: Tensor,
}

fn normalized(v: &[f64]) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter().map(|x| x / norm).collect()
    } else {
        v.to_vec()
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest codebook row under L2-normalized (cosine) distance, ties to the
/// lowest index. Returns the indices and the raw, unnormalized rows.
///
/// A zero query falls back to plain Euclidean distance to the raw rows.
pub fn quantize_level(codebook: &Codebook, residual: &Tensor) -> Result<(Vec<usize>, Tensor)> {
    let k = codebook.vectors.rows();
    let d = codebook.vectors.cols();
    if residual.cols() != d {
        return Err(Error::shape(
            "quantize_level",
            format!("query dim {} vs codebook dim {d}", residual.cols()),
        ));
    }
    let normed: Vec<Vec<f64>> = (0..k).map(|i| normalized(codebook.vectors.row(i))).collect();
    let n = residual.rows();
    let mut indices = Vec::with_capacity(n);
    let mut rows = Vec::with_capacity(n * d);
    for t in 0..n {
        let q = residual.row(t);
        let q_norm = q.iter().map(|x| x * x).sum::<f64>().sqrt();
        let best = if q_norm > 0.0 {
            let qh: Vec<f64> = q.iter().map(|x| x / q_norm).collect();
            argmin((0..k).map(|i| sq_dist(&qh, &normed[i])))
        } else {
            argmin((0..k).map(|i| sq_dist(q, codebook.vectors.row(i))))
        };
        indices.push(best);
        rows.extend_from_slice(codebook.vectors.row(best));
    }
    Ok((indices, Tensor::matrix(n, d, rows)?))
}

fn argmin(values: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::INFINITY);
    for (i, v) in values.enumerate() {
        if v < best.1 {
            best = (i, v);
        }
    }
    best.0
}

/// Named parameter tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn push(&mut self, name: impl Into<String>, t: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn n_values(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

/// Parameter ids of every network component.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Layout {
    pub encoder: Vec<Linear>,
    pub in_proj: Vec<Linear>,
    pub out_proj: Vec<Linear>,
    pub codebooks: Vec<ParamId>,
    pub decoder: Vec<Linear>,
}

/// The codec: configuration, parameters and their layout.
#[derive(Clone, Debug, PartialEq)]
pub struct CodecModel {
    config: CodecConfig,
    params: ParamStore,
    layout: Layout,
}

fn xavier(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| rng.random_range(-bound..=bound))
        .collect();
    Tensor::new(vec![fan_in, fan_out], data).expect("shape")
}

impl CodecModel {
    /// Randomly initialized model.
    pub fn new(config: CodecConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamStore::default();
        let linear = |params: &mut ParamStore, rng: &mut ChaCha8Rng, name: String, i: usize, o: usize| Linear {
            weight: params.push(format!("{name}.weight"), xavier(rng, i, o)),
            bias: params.push(format!("{name}.bias"), Tensor::zeros(&[o])),
        };

        let mut widths = vec![config.frame_size];
        widths.extend(&config.encoder_hidden);
        widths.push(config.latent_dim);
        let encoder = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| linear(&mut params, &mut rng, format!("encoder.{i}"), w[0], w[1]))
            .collect();

        let mut in_proj = Vec::new();
        let mut out_proj = Vec::new();
        let mut codebooks = Vec::new();
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        for l in 0..config.n_levels {
            in_proj.push(linear(&mut params, &mut rng, format!("in_proj.{l}"), config.latent_dim, config.code_dim));
            out_proj.push(linear(&mut params, &mut rng, format!("out_proj.{l}"), config.code_dim, config.latent_dim));
            let data = (0..config.codebook_size * config.code_dim)
                .map(|_| normal.sample(&mut rng))
                .collect();
            codebooks.push(params.push(
                format!("codebook.{l}"),
                Tensor::matrix(config.codebook_size, config.code_dim, data)?,
            ));
        }

        let mut widths = vec![config.latent_dim];
        widths.extend(config.encoder_hidden.iter().rev());
        widths.push(config.frame_size);
        let decoder = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| linear(&mut params, &mut rng, format!("decoder.{i}"), w[0], w[1]))
            .collect();

        Ok(Self {
            config,
            params,
            layout: Layout {
                encoder,
                in_proj,
                out_proj,
                codebooks,
                decoder,
            },
        })
    }

    pub fn config(&self) -> &CodecConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn codebook(&self, level: usize) -> Codebook {
        Codebook {
            vectors: self.params.get(self.layout.codebooks[level]).clone(),
        }
    }

    pub fn set_codebook(&mut self, level: usize, vectors: Tensor) -> Result<()> {
        let id = self.layout.codebooks[level];
        if vectors.shape() != self.params.get(id).shape() {
            return Err(Error::shape("set_codebook", format!("{:?}", vectors.shape())));
        }
        *self.params.get_mut(id) = vectors;
        Ok(())
    }

    pub fn codebook_ids(&self) -> &[ParamId] {
        &self.layout.codebooks
    }

    /// In- and out-projection parameters of every level.
    pub fn projection_ids(&self) -> Vec<ParamId> {
        self.layout
            .in_proj
            .iter()
            .chain(&self.layout.out_proj)
            .flat_map(|l| [l.weight, l.bias])
            .collect()
    }

    /// Places every parameter on `tape`; parameters for which `trainable`
    /// returns false become constants.
    pub fn bind<'t>(&self, tape: &'t Tape, trainable: impl Fn(ParamId) -> bool) -> Bound<'t> {
        let leaf = |id: ParamId| {
            let value = self.params.get(id).clone();
            if trainable(id) {
                tape.param(id, value)
            } else {
                tape.constant(value)
            }
        };
        let lin = |l: &Linear| (leaf(l.weight), leaf(l.bias));
        Bound {
            tape,
            config: self.config.clone(),
            encoder: self.layout.encoder.iter().map(lin).collect(),
            in_proj: self.layout.in_proj.iter().map(lin).collect(),
            out_proj: self.layout.out_proj.iter().map(lin).collect(),
            codebooks: self.layout.codebooks.iter().map(|&id| leaf(id)).collect(),
            codebook_values: (0..self.config.n_levels).map(|l| self.codebook(l)).collect(),
            decoder: self.layout.decoder.iter().map(lin).collect(),
        }
    }

    fn check_rate(&self, x: &AudioBuffer) -> Result<()> {
        if x.sample_rate() != self.config.sample_rate {
            return Err(Error::arg(format!(
                "audio at {} Hz, model expects {} Hz",
                x.sample_rate(),
                self.config.sample_rate
            )));
        }
        if x.len() < self.config.hop {
            return Err(Error::arg(format!(
                "audio of {} samples is shorter than one hop ({})",
                x.len(),
                self.config.hop
            )));
        }
        Ok(())
    }

    /// Continuous encoder latents, one `D`-vector per hop.
    pub fn encode_latents(&self, x: &AudioBuffer) -> Result<Latents> {
        self.check_rate(x)?;
        let tape = Tape::new();
        let bound = self.bind(&tape, |_| false);
        let signal = tape.constant(Tensor::matrix(1, x.len(), x.samples().to_vec())?);
        let frames = bound.frames(signal, x.len(), 1)?;
        let z = bound.encoder(frames)?;
        Ok(Latents {
            space: LatentSpace::Encoder,
            data: (*tape.value(z)).clone(),
        })
    }

    /// Tokens of `x` plus every intermediate latent of the RVQ cascade.
    pub fn encode(&self, x: &AudioBuffer) -> Result<(TokenGrid, LatentRecord)> {
        self.check_rate(x)?;
        let tape = Tape::new();
        let bound = self.bind(&tape, |_| false);
        let signal = tape.constant(Tensor::matrix(1, x.len(), x.samples().to_vec())?);
        let frames = bound.frames(signal, x.len(), 1)?;
        let graph = bound.encode_graph(frames, &EncodeOptions::default())?;
        let n_frames = tape.value(graph.z).rows();
        let levels: Vec<Vec<u32>> = graph
            .levels
            .iter()
            .map(|l| l.indices.iter().map(|&i| i as u32).collect())
            .collect();
        let tokens = TokenGrid::from_levels(levels, self.config.codebook_size)?;
        debug_assert_eq!(tokens.n_frames(), n_frames);
        let record = LatentRecord::from_graph(&tape, &graph);
        Ok((tokens, record))
    }

    /// Tokens only.
    pub fn encode_tokens(&self, x: &AudioBuffer) -> Result<TokenGrid> {
        Ok(self.encode(x)?.0)
    }

    /// Sum over levels of the out-projected codebook rows selected by `tokens`.
    pub fn dequantize(&self, tokens: &TokenGrid) -> Result<Tensor> {
        self.check_tokens(tokens)?;
        let tape = Tape::new();
        let bound = self.bind(&tape, |_| false);
        let z = bound.dequantize(tokens)?;
        Ok((*tape.value(z)).clone())
    }

    fn check_tokens(&self, tokens: &TokenGrid) -> Result<()> {
        if tokens.n_levels() != self.config.n_levels {
            return Err(Error::arg(format!(
                "token grid has {} levels, model has {}",
                tokens.n_levels(),
                self.config.n_levels
            )));
        }
        if tokens.codes().iter().any(|&c| c as usize >= self.config.codebook_size) {
            return Err(Error::arg("token outside codebook range"));
        }
        Ok(())
    }

    /// Waveform of exactly `n_samples` decoded from `tokens`.
    pub fn decode(&self, tokens: &TokenGrid, n_samples: usize) -> Result<AudioBuffer> {
        self.check_tokens(tokens)?;
        if n_samples == 0 {
            return Err(Error::arg("cannot decode to zero samples"));
        }
        let tape = Tape::new();
        let bound = self.bind(&tape, |_| false);
        let z = bound.dequantize(tokens)?;
        let out = bound.decoder(z, tokens.n_frames(), n_samples, 1)?;
        let samples = tape.value(out).data().to_vec();
        AudioBuffer::new(samples, self.config.sample_rate)
    }

    /// CRC32 of the serialized configuration and weights.
    pub fn config_hash(&self) -> u32 {
        // The serialized form ends with its own CRC; hashing that trailer
        // too would give the same residue for every model.
        model_to_bytes(self).map_or(0, |b| crc32fast::hash(&b[..b.len() - 4]))
    }

    /// One encode/decode pass with the output volume matched to `x`.
    pub fn roundtrip(&self, x: &AudioBuffer) -> Result<AudioBuffer> {
        let tokens = self.encode_tokens(x)?;
        let decoded = self.decode(&tokens, x.len())?;
        Ok(match_rms(&decoded, x)?.audio)
    }
}

/// Options for the differentiable encoder cascade.
#[derive(Clone, Debug, Default)]
pub struct EncodeOptions {
    /// Bypass the quantizer: levels pass their projected residual through.
    pub bypass_quantizer: bool,
    /// Per batch item, the number of active levels (codebook dropout).
    pub active_levels: Option<Vec<usize>>,
    /// Rows per batch item, needed with `active_levels`.
    pub frames_per_item: usize,
}

/// Graph nodes of one RVQ level.
#[derive(Clone, Debug)]
pub struct LevelGraph {
    /// Running residual entering the level (`D`-space).
    pub residual: Var,
    /// Projected residual (`d`-space).
    pub projected: Var,
    pub indices: Vec<usize>,
    /// Selected raw codebook rows.
    pub selected: Var,
    /// Straight-through output: value of `selected`, gradient to `projected`.
    pub quantized: Var,
    /// Out-projection of `quantized` (`D`-space).
    pub reconstruction: Var,
}

#[derive(Clone, Debug)]
pub struct EncodeGraph {
    pub z: Var,
    pub levels: Vec<LevelGraph>,
    /// Sum of level reconstructions fed to the decoder.
    pub z_hat: Var,
}

/// Values of an [`EncodeGraph`] detached from its tape.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentRecord {
    pub z: Latents,
    pub projected: Vec<Latents>,
    pub selected: Vec<Latents>,
    /// Quantized latent sum `z_hat` (`D`-space).
    pub z_hat: Latents,
    /// Per level, the per-frame norm of the residual entering the level; the
    /// last entry is the norm left after all levels.
    pub residual_norms: Vec<Vec<f64>>,
}

fn row_norms(t: &Tensor) -> Vec<f64> {
    (0..t.rows()).map(|r| t.row(r).iter().map(|v| v * v).sum::<f64>().sqrt()).collect()
}

impl LatentRecord {
    fn from_graph(tape: &Tape, g: &EncodeGraph) -> Self {
        let dump = |v: Var, space| Latents {
            space,
            data: (*tape.value(v)).clone(),
        };
        let mut residual_norms: Vec<Vec<f64>> = g.levels.iter().map(|l| row_norms(&tape.value(l.residual))).collect();
        if let Some(last) = g.levels.last() {
            let r = tape.value(last.residual);
            let rec = tape.value(last.reconstruction);
            let rest = Tensor::matrix(
                r.rows(),
                r.cols(),
                r.data().iter().zip(rec.data()).map(|(a, b)| a - b).collect(),
            )
            .expect("shape");
            residual_norms.push(row_norms(&rest));
        }
        Self {
            z: dump(g.z, LatentSpace::Encoder),
            projected: g.levels.iter().map(|l| dump(l.projected, LatentSpace::Projected)).collect(),
            selected: g.levels.iter().map(|l| dump(l.selected, LatentSpace::Projected)).collect(),
            z_hat: dump(g.z_hat, LatentSpace::Encoder),
            residual_norms,
        }
    }
}

/// A model's parameters placed on a tape.
pub struct Bound<'t> {
    tape: &'t Tape,
    config: CodecConfig,
    encoder: Vec<(Var, Var)>,
    in_proj: Vec<(Var, Var)>,
    out_proj: Vec<(Var, Var)>,
    codebooks: Vec<Var>,
    codebook_values: Vec<Codebook>,
    decoder: Vec<(Var, Var)>,
}

fn mlp(tape: &Tape, layers: &[(Var, Var)], mut h: Var) -> Result<Var> {
    let last = layers.len() - 1;
    for (i, &(w, b)) in layers.iter().enumerate() {
        h = tape.affine(h, w, b)?;
        if i < last {
            h = tape.tanh(h)?;
        }
    }
    Ok(h)
}

impl<'t> Bound<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    /// `[batch, n_samples]` signal to `[batch * n_frames, frame]` frames.
    pub fn frames(&self, signal: Var, n_samples: usize, batch: usize) -> Result<Var> {
        let map = Arc::new(analysis_map(&self.config, n_samples, batch)?);
        self.frames_with(signal, map)
    }

    pub fn frames_with(&self, signal: Var, map: Arc<SparseMap>) -> Result<Var> {
        let rows = map.out_len() / self.config.frame_size;
        self.tape.linear_map(signal, map, &[rows, self.config.frame_size])
    }

    pub fn encoder(&self, frames: Var) -> Result<Var> {
        mlp(self.tape, &self.encoder, frames)
    }

    /// Level `l` projection into lookup space.
    pub fn project(&self, level: usize, residual: Var) -> Result<Var> {
        let (w, b) = self.in_proj[level];
        self.tape.affine(residual, w, b)
    }

    pub fn unproject(&self, level: usize, code: Var) -> Result<Var> {
        let (w, b) = self.out_proj[level];
        self.tape.affine(code, w, b)
    }

    /// The full differentiable encoder cascade on prepared frames.
    pub fn encode_graph(&self, frames: Var, opts: &EncodeOptions) -> Result<EncodeGraph> {
        let z = self.encoder(frames)?;
        self.quantize_graph(z, opts).map(|(levels, z_hat)| EncodeGraph { z, levels, z_hat })
    }

    /// RVQ cascade starting from encoder latents `z`.
    pub fn quantize_graph(&self, z: Var, opts: &EncodeOptions) -> Result<(Vec<LevelGraph>, Var)> {
        let tape = self.tape;
        let n_rows = tape.value(z).rows();
        let mut residual = z;
        let mut levels = Vec::with_capacity(self.config.n_levels);
        let mut z_hat: Option<Var> = None;
        for l in 0..self.config.n_levels {
            let projected = self.project(l, residual)?;
            let (indices, selected) = if opts.bypass_quantizer {
                ((0..n_rows).map(|_| 0).collect(), projected)
            } else {
                let (indices, _) = quantize_level(&self.codebook_values[l], &tape.value(projected))?;
                let selected = tape.gather_rows(self.codebooks[l], indices.clone())?;
                (indices, selected)
            };
            let quantized = if opts.bypass_quantizer {
                projected
            } else {
                tape.straight_through(projected, selected)?
            };
            let reconstruction = self.unproject(l, quantized)?;
            let contribution = match &opts.active_levels {
                Some(active) => {
                    let mask: Vec<f64> = (0..n_rows)
                        .map(|r| {
                            let item = r / opts.frames_per_item.max(1);
                            if l < active[item] { 1.0 } else { 0.0 }
                        })
                        .collect();
                    let mask = tape.constant(Tensor::vector(mask));
                    tape.scale_rows(reconstruction, mask)?
                }
                None => reconstruction,
            };
            z_hat = Some(match z_hat {
                Some(acc) => tape.add(acc, contribution)?,
                None => contribution,
            });
            levels.push(LevelGraph {
                residual,
                projected,
                indices,
                selected,
                quantized,
                reconstruction,
            });
            residual = tape.sub(residual, reconstruction)?;
        }
        Ok((levels, z_hat.expect("at least one level")))
    }

    /// Out-projected codebook rows summed over levels.
    pub fn dequantize(&self, tokens: &TokenGrid) -> Result<Var> {
        let mut acc: Option<Var> = None;
        for l in 0..self.config.n_levels {
            let idx = tokens.level(l).iter().map(|&c| c as usize).collect();
            let rows = self.tape.gather_rows(self.codebooks[l], idx)?;
            let rec = self.unproject(l, rows)?;
            acc = Some(match acc {
                Some(a) => self.tape.add(a, rec)?,
                None => rec,
            });
        }
        Ok(acc.expect("at least one level"))
    }

    /// Decoder MLP plus overlap-add, giving `[batch, n_samples]`.
    pub fn decoder(&self, z_hat: Var, n_frames: usize, n_samples: usize, batch: usize) -> Result<Var> {
        let map = Arc::new(synthesis_map(&self.config, n_frames, n_samples, batch)?);
        self.decoder_with(z_hat, map, batch)
    }

    pub fn decoder_with(&self, z_hat: Var, map: Arc<SparseMap>, batch: usize) -> Result<Var> {
        let frames = mlp(self.tape, &self.decoder, z_hat)?;
        let n_samples = map.out_len() / batch;
        self.tape.linear_map(frames, map, &[batch, n_samples])
    }
}

/// Format version written by [`save_model`].
pub const MODEL_FORMAT_VERSION: u32 = 1;
const MODEL_MAGIC: &[u8; 4] = b"RVQC";

/// Writes the model as: magic, format version, JSON config, named f64
/// tensors, and a trailing CRC32 of everything before it.
pub fn save_model(model: &CodecModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = model_to_bytes(model)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn model_to_bytes(model: &CodecModel) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MODEL_MAGIC);
    buf.extend_from_slice(&MODEL_FORMAT_VERSION.to_le_bytes());
    let config = serde_json::to_vec(&model.config).map_err(|e| Error::Format(e.to_string()))?;
    buf.extend_from_slice(&(config.len() as u64).to_le_bytes());
    buf.extend_from_slice(&config);
    buf.extend_from_slice(&(model.params.len() as u64).to_le_bytes());
    for id in model.params.ids() {
        let name = model.params.name(id).as_bytes();
        let t = model.params.get(id);
        buf.extend_from_slice(&(name.len() as u64).to_le_bytes());
        buf.extend_from_slice(name);
        buf.extend_from_slice(&(t.shape().len() as u64).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    Ok(buf)
}

pub fn load_model(path: impl AsRef<Path>) -> Result<CodecModel> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    model_from_bytes(&bytes)
}

pub fn model_from_bytes(bytes: &[u8]) -> Result<CodecModel> {
    if bytes.len() < 12 {
        return Err(Error::Format("model file truncated".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }
    let mut r = body;
    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic)?;
    if &magic != MODEL_MAGIC {
        return Err(Error::Format("not a codec model file".into()));
    }
    let version = read_u32(&mut r)?;
    if version != MODEL_FORMAT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: MODEL_FORMAT_VERSION,
        });
    }
    let config_len = read_len(&mut r)?;
    let mut config = vec![0u8; config_len];
    read_exact(&mut r, &mut config)?;
    let config: CodecConfig = serde_json::from_slice(&config).map_err(|e| Error::Format(e.to_string()))?;
    let mut model = CodecModel::new(config)?;
    let count = read_len(&mut r)?;
    if count != model.params.len() {
        return Err(Error::Format(format!(
            "file has {count} tensors, config implies {}",
            model.params.len()
        )));
    }
    for id in model.params.ids().collect::<Vec<_>>() {
        let name_len = read_len(&mut r)?;
        let mut name = vec![0u8; name_len];
        read_exact(&mut r, &mut name)?;
        if name != model.params.name(id).as_bytes() {
            return Err(Error::Format(format!(
                "tensor {} is named {:?}, expected {}",
                id.0,
                String::from_utf8_lossy(&name),
                model.params.name(id)
            )));
        }
        let rank = read_len(&mut r)?;
        let shape = (0..rank).map(|_| read_len(&mut r)).collect::<Result<Vec<_>>>()?;
        if shape != model.params.get(id).shape() {
            return Err(Error::Format(format!("tensor {} has shape {shape:?}", model.params.name(id))));
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            let mut b = [0u8; 8];
            read_exact(&mut r, &mut b)?;
            data.push(f64::from_le_bytes(b));
        }
        *model.params.get_mut(id) = Tensor::new(shape, data)?;
    }
    if !r.is_empty() {
        return Err(Error::Format("trailing bytes after tensors".into()));
    }
    Ok(model)
}

fn read_exact(r: &mut &[u8], out: &mut [u8]) -> Result<()> {
    r.read_exact(out).map_err(|_| Error::Format("model file truncated".into()))
}

fn read_u32(r: &mut &[u8]) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_len(r: &mut &[u8]) -> Result<usize> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    let v = u64::from_le_bytes(b);
    usize::try_from(v)
        .ok()
        .filter(|&v| v <= 1 << 32)
        .ok_or_else(|| Error::Format(format!("implausible length {v}")))
}

/// Writes the `level,frame,index` CSV dump of a token grid.
pub fn write_tokens_csv(tokens: &TokenGrid, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(tokens.to_csv().as_bytes()).map_err(|e| Error::io(path, e))
}

/// Interface shared by the trained codec and the constructed mock codecs used
/// by the evaluation harness.
pub trait Codec: Sync {
    fn name(&self) -> String;
    fn sample_rate(&self) -> u32;
    fn hop(&self) -> usize;
    /// Identifies the configuration in reports.
    fn config_hash(&self) -> u32 {
        crc32fast::hash(self.name().as_bytes())
    }
    fn encode_tokens(&self, x: &AudioBuffer) -> Result<TokenGrid>;
    fn decode_tokens(&self, tokens: &TokenGrid, n_samples: usize) -> Result<AudioBuffer>;
}

impl Codec for CodecModel {
    fn name(&self) -> String {
        "rvq-codec".into()
    }

    fn sample_rate(&self) -> u32 {
        self.config.sample_rate
    }

    fn hop(&self) -> usize {
        self.config.hop
    }

    fn config_hash(&self) -> u32 {
        CodecModel::config_hash(self)
    }

    fn encode_tokens(&self, x: &AudioBuffer) -> Result<TokenGrid> {
        CodecModel::encode_tokens(self, x)
    }

    fn decode_tokens(&self, tokens: &TokenGrid, n_samples: usize) -> Result<AudioBuffer> {
        self.decode(tokens, n_samples)
    }
}
