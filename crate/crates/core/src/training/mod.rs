//! Pretraining, idempotent fine-tuning and λ selection.

mod kmeans;
mod losses;
mod optim;
mod sweep;

use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::{rms, AudioBuffer};
use crate::autodiff::{ParamId, SparseMap, Tape, Tensor, Var};
use crate::codec::{analysis_map, synthesis_map, CodecConfig, CodecModel, EncodeOptions};
use crate::error::{Error, Result};
use crate::metrics::si_sdr;

pub use kmeans::{kmeans_init, KMEANS_MAX_ITERS};
pub use losses::{
    idem_graph, loss_idem, loss_idem_code, loss_idem_enc, loss_idem_proj, loss_reconstruction, reconstruction_graph,
    vq_graph, IdemKind, LossWeights, ReconGraph, SpectralBank, VqGraph, SPECTRAL_LOG_EPS, SPECTRAL_WINDOWS,
};
pub use optim::{AdamW, AdamWConfig};
pub use sweep::{lambda_sweep, lambda_sweep_with, select_lambda, SweepOutcome, LAMBDA_CANDIDATES, QUALITY_TOLERANCE};

/// Cap applied to validation SI-SDR so an exact reconstruction stays finite.
const SI_SDR_CAP_DB: f64 = 100.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub batch_size: usize,
    pub excerpt_seconds: f64,
    pub optimizer: AdamWConfig,
    /// Reconstruction-only steps before codebook initialization.
    pub warmup_steps: u64,
    pub val_every: u64,
    pub log_every: u64,
    /// Excerpts whose latents seed the k-means codebook initialization.
    pub kmeans_excerpts: usize,
    /// Fine-tuning also freezes the level projections.
    pub freeze_projections: bool,
    /// Fine-tuning treats the re-encoded signal as a constant.
    pub detach_roundtrip: bool,
    /// Seconds of each validation clip scored at validation time.
    pub val_seconds: f64,
    /// Chance that a batch item gets a truncated level count while dropout
    /// is enabled.
    pub dropout_prob: f64,
    pub seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            batch_size: 2,
            excerpt_seconds: 0.5,
            optimizer: AdamWConfig::default(),
            warmup_steps: 1000,
            val_every: 500,
            log_every: 100,
            kmeans_excerpts: 32,
            freeze_projections: false,
            detach_roundtrip: false,
            val_seconds: 1.0,
            dropout_prob: 1.0,
            seed: 42,
        }
    }
}

impl TrainOptions {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::arg("batch size must be positive"));
        }
        if !(self.excerpt_seconds > 0.0) || !(self.val_seconds > 0.0) {
            return Err(Error::arg("excerpt and validation lengths must be positive"));
        }
        if !(self.optimizer.lr > 0.0) {
            return Err(Error::arg("learning rate must be positive"));
        }
        Ok(())
    }

    fn excerpt_samples(&self, sample_rate: u32) -> usize {
        ((self.excerpt_seconds * sample_rate as f64).round() as usize).max(1)
    }
}

/// Fixed-length excerpts stacked as `[batch, n_samples]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    signals: Tensor,
    sample_rate: u32,
}

impl Batch {
    pub fn new(items: &[AudioBuffer]) -> Result<Self> {
        let first = items.first().ok_or_else(|| Error::arg("empty batch"))?;
        let n = first.len();
        let mut data = Vec::with_capacity(n * items.len());
        for item in items {
            if item.len() != n || item.sample_rate() != first.sample_rate() {
                return Err(Error::arg("batch items must share length and sample rate"));
            }
            data.extend_from_slice(item.samples());
        }
        Ok(Self {
            signals: Tensor::matrix(items.len(), n, data)?,
            sample_rate: first.sample_rate(),
        })
    }

    pub fn len(&self) -> usize {
        self.signals.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn n_samples(&self) -> usize {
        self.signals.cols()
    }

    pub fn item(&self, i: usize) -> &[f64] {
        self.signals.row(i)
    }

    /// All items as a `[batch, n_samples]` matrix.
    pub fn signals(&self) -> &Tensor {
        &self.signals
    }
}

/// Every loss term of one step, weighted; zero when inactive.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub recon_wave: f64,
    pub recon_spec: f64,
    pub commit: f64,
    pub codebook: f64,
    /// λ times the idempotence distance.
    pub idem: f64,
    pub total: f64,
    pub grad_norm: f64,
}

struct StepMaps {
    n_samples: usize,
    batch: usize,
    analysis: Arc<SparseMap>,
    synthesis: Arc<SparseMap>,
    spectral: SpectralBank,
}

impl StepMaps {
    fn new(config: &CodecConfig, n_samples: usize, batch: usize) -> Result<Self> {
        let n_frames = config.n_frames(n_samples);
        Ok(Self {
            n_samples,
            batch,
            analysis: Arc::new(analysis_map(config, n_samples, batch)?),
            synthesis: Arc::new(synthesis_map(config, n_frames, n_samples, batch)?),
            spectral: SpectralBank::new(n_samples, batch)?,
        })
    }
}

/// Optimizer, RNG and phase flags carried between steps.
pub struct TrainState {
    pub step: u64,
    pub optimizer: AdamW,
    pub rng: ChaCha8Rng,
    /// Most recent validation reconstruction loss.
    pub val_loss: Option<f64>,
    pub quantizer_frozen: bool,
    pub projections_frozen: bool,
    pub dropout_enabled: bool,
    pub dropout_prob: f64,
    /// Warmup: levels pass their projected residual through unquantized.
    pub quantizer_bypassed: bool,
    pub detach_roundtrip: bool,
    maps: Option<StepMaps>,
}

impl TrainState {
    pub fn new(optimizer: AdamWConfig, seed: u64) -> Self {
        Self {
            step: 0,
            optimizer: AdamW::new(optimizer),
            rng: ChaCha8Rng::seed_from_u64(seed),
            val_loss: None,
            quantizer_frozen: false,
            projections_frozen: false,
            dropout_enabled: false,
            dropout_prob: 1.0,
            quantizer_bypassed: false,
            detach_roundtrip: false,
            maps: None,
        }
    }

    /// Flags for idempotent fine-tuning.
    pub fn for_finetune(opts: &TrainOptions) -> Self {
        let mut s = Self::new(opts.optimizer, opts.seed);
        s.quantizer_frozen = true;
        s.projections_frozen = opts.freeze_projections;
        s.detach_roundtrip = opts.detach_roundtrip;
        s
    }

    fn trainable(&self, model: &CodecModel) -> impl Fn(ParamId) -> bool {
        let mut frozen = Vec::new();
        if self.quantizer_frozen {
            frozen.extend_from_slice(model.codebook_ids());
        }
        if self.projections_frozen {
            frozen.extend(model.projection_ids());
        }
        move |id| !frozen.contains(&id)
    }
}

fn diverged(step: u64, term: &str) -> impl Fn(Error) -> Error + '_ {
    move |e| match e {
        Error::NonFinite { .. } => Error::Diverged {
            step,
            term: term.to_string(),
        },
        other => other,
    }
}

fn row_masks(active: &[usize], n_levels: usize, frames_per_item: usize) -> Vec<Vec<f64>> {
    (0..n_levels)
        .map(|l| {
            active
                .iter()
                .flat_map(|&a| std::iter::repeat_n(if l < a { 1.0 } else { 0.0 }, frames_per_item))
                .collect()
        })
        .collect()
}

/// Per-row volume matching of `x_hat` to the constant reference rows.
/// Rescales every row of `x_hat` to the RMS of the matching batch item.
pub fn match_rms_graph(tape: &Tape, x_hat: Var, reference: &Batch) -> Result<Var> {
    let ref_rms: Vec<f64> = (0..reference.len()).map(|i| rms(reference.item(i))).collect();
    if ref_rms.iter().any(|&r| r <= 0.0) {
        return Err(Error::arg("batch contains a silent excerpt"));
    }
    let power = tape.add_scalar(tape.mean_over_axis(tape.square(x_hat)?, 1)?, 1e-18)?;
    let inv = tape.recip(tape.sqrt(power)?)?;
    let gain = tape.mul(inv, tape.constant(Tensor::vector(ref_rms)))?;
    tape.scale_rows(x_hat, gain)
}

fn accumulate(tape: &Tape, acc: &mut Option<Var>, term: Option<Var>) -> Result<()> {
    if let Some(t) = term {
        *acc = Some(match *acc {
            Some(a) => tape.add(a, t)?,
            None => t,
        });
    }
    Ok(())
}

/// One optimizer step. Terms with zero weight are left out of the graph, so
/// parameters they would touch are not updated.
pub fn train_step(
    model: &mut CodecModel,
    state: &mut TrainState,
    batch: &Batch,
    weights: &LossWeights,
) -> Result<LossReport> {
    weights.validate()?;
    let config = model.config().clone();
    if batch.sample_rate != config.sample_rate {
        return Err(Error::arg("batch sample rate differs from the model's"));
    }
    let (n_samples, b) = (batch.n_samples(), batch.len());
    if state.maps.as_ref().is_none_or(|m| m.n_samples != n_samples || m.batch != b) {
        state.maps = Some(StepMaps::new(&config, n_samples, b)?);
    }
    let step = state.step;
    let frames_per_item = config.n_frames(n_samples);
    let active: Option<Vec<usize>> = (state.dropout_enabled && !state.quantizer_bypassed)
        .then(|| {
            (0..b)
                .map(|_| {
                    let truncate = state.rng.random_bool(state.dropout_prob.clamp(0.0, 1.0));
                    let levels = state.rng.random_range(1..=config.n_levels);
                    if truncate { levels } else { config.n_levels }
                })
                .collect()
        });
    let maps = state.maps.as_ref().expect("maps prepared");

    let tape = Tape::new();
    let bound = model.bind(&tape, state.trainable(model));
    let x = tape.constant(batch.signals.clone());
    let opts = EncodeOptions {
        bypass_quantizer: state.quantizer_bypassed,
        active_levels: active.clone(),
        frames_per_item,
    };
    let frames = bound.frames_with(x, maps.analysis.clone()).map_err(diverged(step, "encoder"))?;
    let first = bound.encode_graph(frames, &opts).map_err(diverged(step, "encoder"))?;
    let x_hat = bound
        .decoder_with(first.z_hat, maps.synthesis.clone(), b)
        .map_err(diverged(step, "decoder"))?;

    let recon = reconstruction_graph(&tape, &maps.spectral, x, x_hat, weights).map_err(diverged(step, "recon"))?;
    let vq = if state.quantizer_bypassed {
        VqGraph {
            codebook: None,
            commit: None,
        }
    } else {
        let masks = active.as_ref().map(|a| row_masks(a, config.n_levels, frames_per_item));
        let codebook_weight = if state.quantizer_frozen { 0.0 } else { weights.codebook };
        vq_graph(&tape, &first.levels, masks.as_deref(), codebook_weight, weights.commit)
            .map_err(diverged(step, "vq"))?
    };

    let lambda = weights.effective_idem();
    let idem = if lambda > 0.0 && !state.quantizer_bypassed {
        let term = (|| -> Result<Option<Var>> {
            let mut x_prime = match_rms_graph(&tape, x_hat, batch)?;
            if state.detach_roundtrip {
                x_prime = tape.stop_gradient(x_prime);
            }
            let frames2 = bound.frames_with(x_prime, maps.analysis.clone())?;
            let second = bound.encode_graph(
                frames2,
                &EncodeOptions {
                    frames_per_item,
                    ..EncodeOptions::default()
                },
            )?;
            idem_graph(&tape, weights.idem_kind, &first, &second)?
                .map(|d| tape.scale(d, lambda))
                .transpose()
        })()
        .map_err(diverged(step, "idem"))?;
        term
    } else {
        None
    };

    let value = |v: Option<Var>| v.map_or(0.0, |v| tape.item(v));
    let mut report = LossReport {
        recon_wave: value(recon.wave),
        recon_spec: value(recon.spec),
        commit: value(vq.commit),
        codebook: value(vq.codebook),
        idem: value(idem),
        ..LossReport::default()
    };
    let mut total = None;
    for term in [recon.wave, recon.spec, vq.commit, vq.codebook, idem] {
        accumulate(&tape, &mut total, term).map_err(diverged(step, "total"))?;
    }
    state.step += 1;
    let Some(total) = total else {
        return Ok(report);
    };
    report.total = tape.item(total);
    if !report.total.is_finite() {
        return Err(Error::Diverged {
            step,
            term: "total".into(),
        });
    }
    let grads = tape.backward(total)?;
    drop(bound);
    report.grad_norm = state.optimizer.step(model.params_mut(), grads);
    if !report.grad_norm.is_finite() {
        return Err(Error::Diverged {
            step,
            term: "gradient".into(),
        });
    }
    Ok(report)
}

/// One row of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: u64,
    pub report: LossReport,
    pub val_si_sdr_db: Option<f64>,
    pub val_loss: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
}

impl TrainLog {
    pub fn last_validation(&self) -> Option<(f64, f64)> {
        self.rows
            .iter()
            .rev()
            .find_map(|r| Some((r.val_loss?, r.val_si_sdr_db?)))
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,recon_wave,recon_spec,commit,codebook,idem,total,val_loss,val_si_sdr_db\n");
        let opt = |v: Option<f64>| v.map(|v| format!("{v:.6}")).unwrap_or_default();
        for r in &self.rows {
            let p = &r.report;
            out.push_str(&format!(
                "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{},{}\n",
                r.step,
                p.recon_wave,
                p.recon_spec,
                p.commit,
                p.codebook,
                p.idem,
                p.total,
                opt(r.val_loss),
                opt(r.val_si_sdr_db)
            ));
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_csv().as_bytes()).map_err(|e| Error::io(path, e))
    }
}

/// Training and validation clips; the last eighth (at least one) validates.
pub struct CorpusSplit<'a> {
    pub train: &'a [AudioBuffer],
    pub validation: &'a [AudioBuffer],
}

pub fn split_corpus(corpus: &[AudioBuffer]) -> Result<CorpusSplit<'_>> {
    if corpus.len() < 2 {
        return Err(Error::arg("training needs at least two clips"));
    }
    let n_val = (corpus.len() / 8).max(1);
    let (train, validation) = corpus.split_at(corpus.len() - n_val);
    Ok(CorpusSplit { train, validation })
}

fn sample_batch(rng: &mut ChaCha8Rng, clips: &[AudioBuffer], batch: usize, n: usize) -> Result<Batch> {
    let mut items = Vec::with_capacity(batch);
    for _ in 0..batch {
        let clip = &clips[rng.random_range(0..clips.len())];
        if clip.len() < n {
            return Err(Error::arg(format!(
                "clip of {} samples is shorter than the {n}-sample excerpt",
                clip.len()
            )));
        }
        let start = rng.random_range(0..=clip.len() - n);
        items.push(clip.slice(start, n)?);
    }
    Batch::new(&items)
}

/// Mean reconstruction loss and mean SI-SDR of the round trip on the head
/// of every validation clip.
pub fn validate(model: &CodecModel, clips: &[AudioBuffer], seconds: f64, weights: &LossWeights) -> Result<(f64, f64)> {
    if clips.is_empty() {
        return Err(Error::arg("no validation clips"));
    }
    let recon_only = LossWeights {
        commit: 0.0,
        codebook: 0.0,
        idem: 0.0,
        idem_kind: IdemKind::None,
        ..*weights
    };
    let (mut loss, mut sdr) = (0.0, 0.0);
    for clip in clips {
        let n = ((seconds * clip.sample_rate() as f64) as usize).clamp(1, clip.len());
        let x = clip.head(n);
        let tokens = model.encode_tokens(&x)?;
        let decoded = model.decode(&tokens, x.len())?;
        loss += loss_reconstruction(&x, &decoded, &recon_only)?;
        sdr += si_sdr(&x, &decoded)?.min(SI_SDR_CAP_DB).max(-SI_SDR_CAP_DB);
    }
    let n = clips.len() as f64;
    Ok((loss / n, sdr / n))
}

fn init_codebooks(model: &mut CodecModel, clips: &[AudioBuffer], opts: &TrainOptions, rng: &mut ChaCha8Rng) -> Result<()> {
    let config = model.config().clone();
    let n = opts.excerpt_samples(config.sample_rate);
    let batch = sample_batch(rng, clips, opts.kmeans_excerpts.max(1), n)?;
    let tape = Tape::new();
    let bound = model.bind(&tape, |_| false);
    let x = tape.constant(batch.signals.clone());
    let frames = bound.frames(x, n, batch.len())?;
    let mut residual = bound.encoder(frames)?;
    let mut codebooks = Vec::with_capacity(config.n_levels);
    for l in 0..config.n_levels {
        let projected = bound.project(l, residual)?;
        let seed = rng.random::<u64>();
        let codebook = kmeans_init(&tape.value(projected), config.codebook_size, seed)?;
        let (indices, _) = crate::codec::quantize_level(&codebook, &tape.value(projected))?;
        let rows = tape.gather_rows(tape.constant(codebook.vectors.clone()), indices)?;
        let rec = bound.unproject(l, rows)?;
        residual = tape.sub(residual, rec)?;
        codebooks.push(codebook);
    }
    drop(bound);
    for (l, cb) in codebooks.into_iter().enumerate() {
        model.set_codebook(l, cb.vectors)?;
    }
    Ok(())
}

fn log_step(
    log: &mut TrainLog,
    model: &CodecModel,
    state: &mut TrainState,
    split: &CorpusSplit<'_>,
    opts: &TrainOptions,
    weights: &LossWeights,
    report: LossReport,
    last: bool,
) -> Result<()> {
    let step = state.step;
    let validate_now = last || (opts.val_every > 0 && step.is_multiple_of(opts.val_every));
    let log_now = validate_now || (opts.log_every > 0 && step.is_multiple_of(opts.log_every));
    if !log_now {
        return Ok(());
    }
    let (val_loss, val_sdr) = if validate_now {
        let (l, s) = validate(model, split.validation, opts.val_seconds, weights)?;
        state.val_loss = Some(l);
        (Some(l), Some(s))
    } else {
        (None, None)
    };
    log.rows.push(LogRow {
        step,
        report,
        val_si_sdr_db: val_sdr,
        val_loss,
    });
    Ok(())
}

/// Trains a codec from scratch: reconstruction-only warmup with the
/// quantizer bypassed, k-means codebook initialization, then joint training
/// with codebook dropout. The warmup counts toward `n_steps`.
pub fn pretrain(
    config: CodecConfig,
    corpus: &[AudioBuffer],
    n_steps: u64,
    weights: &LossWeights,
    opts: &TrainOptions,
) -> Result<(CodecModel, TrainLog)> {
    if corpus.len() < 8 {
        return Err(Error::arg(format!("pretraining needs at least 8 clips, got {}", corpus.len())));
    }
    opts.validate()?;
    let mut model = CodecModel::new(config)?;
    let split = split_corpus(corpus)?;
    let n = opts.excerpt_samples(model.config().sample_rate);
    let mut state = TrainState::new(opts.optimizer, opts.seed);
    let warmup = opts.warmup_steps.min(n_steps);
    state.quantizer_bypassed = warmup > 0;
    let mut log = TrainLog::default();
    let mut initialized = false;
    for i in 0..n_steps {
        if i == warmup {
            init_codebooks(&mut model, split.train, opts, &mut state.rng)?;
            initialized = true;
            state.quantizer_bypassed = false;
            state.dropout_enabled = true;
            state.dropout_prob = opts.dropout_prob;
        }
        let batch = sample_batch(&mut state.rng, split.train, opts.batch_size, n)?;
        let report = train_step(&mut model, &mut state, &batch, weights)?;
        let last = i + 1 == n_steps;
        if state.quantizer_bypassed && !last {
            // Validation round trips go through codebooks that do not exist yet.
            if opts.log_every > 0 && state.step.is_multiple_of(opts.log_every) {
                log.rows.push(LogRow {
                    step: state.step,
                    report,
                    val_si_sdr_db: None,
                    val_loss: None,
                });
            }
            continue;
        }
        if last && !initialized {
            init_codebooks(&mut model, split.train, opts, &mut state.rng)?;
            initialized = true;
        }
        log_step(&mut log, &model, &mut state, &split, opts, weights, report, last)?;
    }
    if !initialized {
        init_codebooks(&mut model, split.train, opts, &mut state.rng)?;
    }
    Ok((model, log))
}

/// Fine-tunes with the quantizer frozen and dropout off; the re-encoded
/// signal is recomputed from the current parameters every step.
pub fn finetune(
    model: &CodecModel,
    corpus: &[AudioBuffer],
    weights: &LossWeights,
    n_steps: u64,
    opts: &TrainOptions,
) -> Result<(CodecModel, TrainLog)> {
    opts.validate()?;
    let mut model = model.clone();
    let split = split_corpus(corpus)?;
    let n = opts.excerpt_samples(model.config().sample_rate);
    let mut state = TrainState::for_finetune(opts);
    let mut log = TrainLog::default();
    for i in 0..n_steps {
        let batch = sample_batch(&mut state.rng, split.train, opts.batch_size, n)?;
        let report = train_step(&mut model, &mut state, &batch, weights)?;
        log_step(&mut log, &model, &mut state, &split, opts, weights, report, i + 1 == n_steps)?;
    }
    Ok((model, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::{synth_corpus, CorpusSpec};

    fn small_config() -> CodecConfig {
        CodecConfig {
            frame_size: 32,
            hop: 16,
            latent_dim: 8,
            code_dim: 4,
            n_levels: 2,
            codebook_size: 8,
            encoder_hidden: vec![16],
            ..CodecConfig::default()
        }
    }

    fn corpus(n: usize) -> Vec<AudioBuffer> {
        synth_corpus(&CorpusSpec {
            n_clips: n,
            clip_seconds: 0.25,
            ..CorpusSpec::default()
        })
        .unwrap()
    }

    fn small_opts() -> TrainOptions {
        TrainOptions {
            excerpt_seconds: 0.05,
            warmup_steps: 3,
            val_every: 5,
            log_every: 1,
            kmeans_excerpts: 8,
            val_seconds: 0.05,
            ..TrainOptions::default()
        }
    }

    #[test]
    fn zero_weights_leave_params_unchanged() {
        let mut model = CodecModel::new(small_config()).unwrap();
        let before = model.params().clone();
        let clips = corpus(2);
        let batch = Batch::new(&[clips[0].head(400), clips[1].head(400)]).unwrap();
        let mut state = TrainState::new(AdamWConfig::default(), 0);
        let report = train_step(&mut model, &mut state, &batch, &LossWeights::zero()).unwrap();
        assert_eq!(report.total, 0.0);
        assert_eq!(model.params(), &before);
    }

    #[test]
    fn pretrain_is_deterministic() {
        let clips = corpus(8);
        let run = || pretrain(small_config(), &clips, 8, &LossWeights::default(), &small_opts()).unwrap();
        let (a, la) = run();
        let (b, lb) = run();
        assert_eq!(a, b);
        assert_eq!(la.last_validation().unwrap().0.to_bits(), lb.last_validation().unwrap().0.to_bits());
    }

    #[test]
    fn finetune_freezes_codebooks() {
        let clips = corpus(8);
        let (model, _) = pretrain(small_config(), &clips, 6, &LossWeights::default(), &small_opts()).unwrap();
        let (tuned, log) = finetune(&model, &clips, &LossWeights::with_idem(IdemKind::Code), 4, &small_opts()).unwrap();
        for l in 0..model.config().n_levels {
            assert_eq!(model.codebook(l), tuned.codebook(l));
        }
        assert_ne!(model.params(), tuned.params());
        assert!(log.rows.iter().all(|r| r.report.codebook == 0.0 && r.report.idem > 0.0));
    }

    #[test]
    fn freeze_projections_flag() {
        let clips = corpus(8);
        let (model, _) = pretrain(small_config(), &clips, 6, &LossWeights::default(), &small_opts()).unwrap();
        let opts = TrainOptions {
            freeze_projections: true,
            ..small_opts()
        };
        let (tuned, _) = finetune(&model, &clips, &LossWeights::with_idem(IdemKind::Proj), 3, &opts).unwrap();
        for id in model.projection_ids() {
            assert_eq!(model.params().get(id), tuned.params().get(id));
        }
    }

    #[test]
    fn too_few_clips_rejected() {
        let clips = corpus(4);
        assert!(pretrain(small_config(), &clips, 1, &LossWeights::default(), &small_opts()).is_err());
    }

    #[test]
    fn log_csv_has_header_and_rows() {
        let clips = corpus(8);
        let (_, log) = pretrain(small_config(), &clips, 5, &LossWeights::default(), &small_opts()).unwrap();
        let csv = log.to_csv();
        assert!(csv.starts_with("step,recon_wave"));
        assert_eq!(csv.lines().count(), log.rows.len() + 1);
        assert!(log.last_validation().is_some());
    }

    #[test]
    fn dropout_masks_repeat_per_item() {
        let m = row_masks(&[1, 2], 2, 3);
        assert_eq!(m[0], vec![1.0; 6]);
        assert_eq!(m[1], vec![0.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
    }
}
