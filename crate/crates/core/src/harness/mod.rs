//! Multi-round re-encoding and time-shift evaluation, plus report files.

pub mod config;
pub mod mock;
pub mod pipeline;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::audio::{match_rms, time_shift, AudioBuffer};
use crate::codec::{Codec, CodecModel};
use crate::error::{Error, Result};
use crate::metrics::{codebook_use, log_spectral_distance, match_rate, mean, pearson_corr, si_sdr, MetricRow, TokenGrid};

/// Encoding iterations used when none are given.
pub const DEFAULT_ITERATIONS: usize = 25;
/// Largest time shift probed by default.
pub const DEFAULT_MAX_SHIFT_MS: f64 = 2.0;
/// Infinite SI-SDR values are written as this many dB (sign kept).
pub const SI_SDR_CAP_DB: f64 = 100.0;

fn cap(v: f64) -> f64 {
    v.clamp(-SI_SDR_CAP_DB, SI_SDR_CAP_DB)
}

/// A trained model reported under a chosen name.
pub struct Named<'a> {
    name: String,
    model: &'a CodecModel,
}

impl<'a> Named<'a> {
    pub fn new(name: impl Into<String>, model: &'a CodecModel) -> Self {
        Self {
            name: name.into(),
            model,
        }
    }
}

impl Codec for Named<'_> {
    fn name(&self) -> String {
        self.name.clone()
    }
    fn sample_rate(&self) -> u32 {
        self.model.config().sample_rate
    }
    fn hop(&self) -> usize {
        self.model.config().hop
    }
    fn config_hash(&self) -> u32 {
        self.model.config_hash()
    }
    fn encode_tokens(&self, x: &AudioBuffer) -> Result<TokenGrid> {
        self.model.encode_tokens(x)
    }
    fn decode_tokens(&self, t: &TokenGrid, n: usize) -> Result<AudioBuffer> {
        self.model.decode(t, n)
    }
}

/// Metrics of one clip at one iteration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipRow {
    pub clip: usize,
    pub metrics: MetricRow,
}

/// Means over clips at one iteration. SI-SDR is capped before averaging.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationSummary {
    pub iteration: usize,
    pub si_sdr_db: f64,
    pub lsd_db: f64,
    /// Mean over levels; absent on iteration 1.
    pub match_rate: Option<f64>,
    pub match_rate_per_level: Option<Vec<f64>>,
    pub entropy_pct: f64,
    pub entropy_pct_per_level: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model_id: String,
    pub clip_ids: Vec<String>,
    pub n_levels: usize,
    /// Sorted by clip, then iteration.
    pub rows: Vec<ClipRow>,
    pub summary: Vec<IterationSummary>,
    pub config_hash: String,
    pub seed: u64,
}

impl EvalReport {
    pub fn iterations(&self) -> usize {
        self.summary.len()
    }

    pub fn at(&self, iteration: usize) -> Option<&IterationSummary> {
        self.summary.get(iteration.checked_sub(1)?)
    }

    /// Mean over iterations `2..=N` of the level-averaged match rate.
    pub fn mean_match_rate(&self) -> Option<f64> {
        let rates: Vec<f64> = self.summary.iter().filter_map(|s| s.match_rate).collect();
        (!rates.is_empty()).then(|| mean(&rates))
    }

    /// SI-SDR at iteration 1 minus SI-SDR at the last iteration.
    pub fn si_sdr_degradation(&self) -> Option<f64> {
        Some(self.summary.first()?.si_sdr_db - self.summary.last()?.si_sdr_db)
    }

    pub fn clip_rows(&self, clip: usize) -> impl Iterator<Item = &MetricRow> {
        self.rows.iter().filter(move |r| r.clip == clip).map(|r| &r.metrics)
    }
}

/// Every intermediate of a multi-round run, for inspection.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Trace {
    /// Per clip, tokens of iterations `1..=N`.
    pub tokens: Vec<Vec<TokenGrid>>,
    /// Per clip, volume-matched output of iterations `1..=N`.
    pub audio: Vec<Vec<AudioBuffer>>,
}

struct ClipRun {
    rows: Vec<MetricRow>,
    tokens: Vec<TokenGrid>,
    audio: Vec<AudioBuffer>,
}

fn run_clip(codec: &dyn Codec, x0: &AudioBuffer, n_iters: usize, keep: bool) -> Result<ClipRun> {
    let mut rows = Vec::with_capacity(n_iters);
    let mut tokens_kept = Vec::new();
    let mut audio_kept = Vec::new();
    let mut prev_tokens: Option<TokenGrid> = None;
    let mut x = x0.clone();
    for n in 1..=n_iters {
        let tokens = codec.encode_tokens(&x)?;
        let decoded = codec.decode_tokens(&tokens, x0.len())?;
        x = match_rms(&decoded, x0)?.audio;
        let match_rate_per_level = prev_tokens.as_ref().map(|p| match_rate(&tokens, p)).transpose()?;
        rows.push(MetricRow {
            iteration: n,
            si_sdr_db: si_sdr(x0, &x)?,
            lsd: log_spectral_distance(x0, &x)?,
            match_rate_per_level,
            entropy_pct_per_level: codebook_use(&tokens),
        });
        if keep {
            tokens_kept.push(tokens.clone());
            audio_kept.push(x.clone());
        }
        prev_tokens = Some(tokens);
    }
    Ok(ClipRun {
        rows,
        tokens: tokens_kept,
        audio: audio_kept,
    })
}

fn worker_count(jobs: usize) -> usize {
    std::thread::available_parallelism().map_or(1, usize::from).clamp(1, jobs.max(1))
}

/// Runs `f` over `0..n`, in parallel when cores are available; results are
/// returned in index order.
fn par_map<T: Send>(n: usize, f: impl Fn(usize) -> Result<T> + Sync) -> Result<Vec<T>> {
    let workers = worker_count(n);
    if workers <= 1 {
        return (0..n).map(f).collect();
    }
    let mut out: Vec<Option<Result<T>>> = (0..n).map(|_| None).collect();
    std::thread::scope(|s| {
        let f = &f;
        let chunk = n.div_ceil(workers);
        for (w, slots) in out.chunks_mut(chunk).enumerate() {
            s.spawn(move || {
                for (j, slot) in slots.iter_mut().enumerate() {
                    *slot = Some(f(w * chunk + j));
                }
            });
        }
    });
    out.into_iter().map(|r| r.expect("every slot filled")).collect()
}

/// Re-encodes every clip `n_iters` times. Each output is volume-matched to
/// the original, and quality is always measured against the original.
pub fn eval_multiround(codec: &dyn Codec, clips: &[AudioBuffer], n_iters: usize) -> Result<EvalReport> {
    Ok(eval_multiround_traced(codec, clips, n_iters, false)?.0)
}

pub fn eval_multiround_traced(
    codec: &dyn Codec,
    clips: &[AudioBuffer],
    n_iters: usize,
    keep_trace: bool,
) -> Result<(EvalReport, Trace)> {
    if clips.is_empty() {
        return Err(Error::arg("no clips to evaluate"));
    }
    if n_iters == 0 {
        return Err(Error::arg("at least one encoding iteration is required"));
    }
    for c in clips {
        if c.sample_rate() != codec.sample_rate() {
            return Err(Error::arg(format!(
                "clip at {} Hz, codec expects {} Hz",
                c.sample_rate(),
                codec.sample_rate()
            )));
        }
    }
    let runs = par_map(clips.len(), |i| run_clip(codec, &clips[i], n_iters, keep_trace))?;
    let n_levels = runs[0].rows[0].entropy_pct_per_level.len();
    let mut rows = Vec::with_capacity(clips.len() * n_iters);
    let mut trace = Trace::default();
    for (clip, run) in runs.into_iter().enumerate() {
        rows.extend(run.rows.into_iter().map(|metrics| ClipRow { clip, metrics }));
        if keep_trace {
            trace.tokens.push(run.tokens);
            trace.audio.push(run.audio);
        }
    }
    let summary = summarize(&rows, n_iters, n_levels);
    Ok((
        EvalReport {
            model_id: codec.name(),
            clip_ids: (0..clips.len()).map(|i| format!("clip{i:03}")).collect(),
            n_levels,
            rows,
            summary,
            config_hash: format!("{:08x}", codec.config_hash()),
            seed: 0,
        },
        trace,
    ))
}

fn column_means(vectors: &[&[f64]], width: usize) -> Vec<f64> {
    (0..width)
        .map(|l| mean(&vectors.iter().map(|v| v[l]).collect::<Vec<_>>()))
        .collect()
}

fn summarize(rows: &[ClipRow], n_iters: usize, n_levels: usize) -> Vec<IterationSummary> {
    (1..=n_iters)
        .map(|it| {
            let at: Vec<&MetricRow> = rows.iter().map(|r| &r.metrics).filter(|m| m.iteration == it).collect();
            let match_rows: Vec<&[f64]> = at.iter().filter_map(|m| m.match_rate_per_level.as_deref()).collect();
            let match_rate_per_level = (!match_rows.is_empty()).then(|| column_means(&match_rows, n_levels));
            let entropy_rows: Vec<&[f64]> = at.iter().map(|m| m.entropy_pct_per_level.as_slice()).collect();
            let entropy_pct_per_level = column_means(&entropy_rows, n_levels);
            IterationSummary {
                iteration: it,
                si_sdr_db: mean(&at.iter().map(|m| cap(m.si_sdr_db)).collect::<Vec<_>>()),
                lsd_db: mean(&at.iter().map(|m| m.lsd).collect::<Vec<_>>()),
                match_rate: match_rate_per_level.as_deref().map(mean),
                match_rate_per_level,
                entropy_pct: mean(&entropy_pct_per_level),
                entropy_pct_per_level,
            }
        })
        .collect()
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(contents.as_bytes()).map_err(|e| Error::io(path, e))
}

/// `rows.csv` contents.
pub fn rows_csv(report: &EvalReport) -> String {
    let mut header = vec!["clip".to_string(), "iteration".into(), "si_sdr_db".into(), "lsd_db".into()];
    header.extend((0..report.n_levels).map(|l| format!("match_rate_l{l}")));
    header.extend((0..report.n_levels).map(|l| format!("entropy_pct_l{l}")));
    let mut out = header.join(",");
    out.push('\n');
    for r in &report.rows {
        let m = &r.metrics;
        let mut fields = vec![
            report.clip_ids[r.clip].clone(),
            m.iteration.to_string(),
            cap(m.si_sdr_db).to_string(),
            m.lsd.to_string(),
        ];
        match &m.match_rate_per_level {
            Some(v) => fields.extend(v.iter().map(f64::to_string)),
            None => fields.extend(std::iter::repeat_n(String::new(), report.n_levels)),
        }
        fields.extend(m.entropy_pct_per_level.iter().map(f64::to_string));
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    out
}

#[derive(Serialize)]
struct SummaryFile<'a> {
    model_id: &'a str,
    config_hash: &'a str,
    seed: u64,
    n_clips: usize,
    n_levels: usize,
    iterations: &'a [IterationSummary],
}

pub fn summary_json(report: &EvalReport) -> Result<String> {
    let file = SummaryFile {
        model_id: &report.model_id,
        config_hash: &report.config_hash,
        seed: report.seed,
        n_clips: report.clip_ids.len(),
        n_levels: report.n_levels,
        iterations: &report.summary,
    };
    serde_json::to_string_pretty(&file)
        .map(|s| s + "\n")
        .map_err(|e| Error::Format(e.to_string()))
}

/// `plot.dat`: one whitespace-separated line per iteration.
pub fn plot_dat(report: &EvalReport) -> String {
    let mut out = String::from("# iteration si_sdr_db lsd_db match_rate entropy_pct\n");
    for s in &report.summary {
        let m = s.match_rate.map_or_else(|| "nan".to_string(), |v| format!("{v:.6}"));
        out.push_str(&format!(
            "{} {:.6} {:.6} {} {:.6}\n",
            s.iteration, s.si_sdr_db, s.lsd_db, m, s.entropy_pct
        ));
    }
    out
}

pub const REPORT_FILES: [&str; 3] = ["rows.csv", "summary.json", "plot.dat"];

/// Writes `rows.csv`, `summary.json` and `plot.dat` into `dir`.
pub fn emit_report(report: &EvalReport, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_file(&dir.join("rows.csv"), &rows_csv(report))?;
    write_file(&dir.join("summary.json"), &summary_json(report)?)?;
    write_file(&dir.join("plot.dat"), &plot_dat(report))
}

/// Per-model result of [`eval_phase`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelShift {
    pub model_id: String,
    /// Mean match rate against the unshifted encoding, per shift, averaged
    /// over levels and clips.
    pub per_shift: Vec<f64>,
    /// Per level, averaged over shifts and clips.
    pub per_level: Vec<f64>,
    pub mean_match_rate: f64,
    /// Mean SI-SDR at the last re-encoding iteration.
    pub si_sdr_at_n: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShiftReport {
    pub shifts: Vec<i64>,
    pub iterations: usize,
    pub models: Vec<ModelShift>,
    /// Correlation of mean match rate with SI-SDR across models.
    pub correlation: Option<f64>,
    pub warnings: Vec<String>,
}

impl ShiftReport {
    pub fn shift_index(&self, shift: i64) -> Option<usize> {
        self.shifts.iter().position(|&s| s == shift)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("model,shift,match_rate\n");
        for m in &self.models {
            for (s, r) in self.shifts.iter().zip(&m.per_shift) {
                out.push_str(&format!("{},{},{}\n", m.model_id, s, r));
            }
        }
        out
    }

    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_file(&dir.join("shifts.csv"), &self.to_csv())?;
        let json = serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))?;
        write_file(&dir.join("phase.json"), &(json + "\n"))
    }
}

/// Nonzero integer shifts up to `max_shift_ms`, restricted to less than one
/// hop so frames stay aligned; dropped offsets are reported as warnings.
pub fn phase_shifts(sample_rate: u32, hop: usize, max_shift_ms: f64) -> Result<(Vec<i64>, Vec<String>)> {
    if !(max_shift_ms >= 0.0) || !max_shift_ms.is_finite() {
        return Err(Error::arg("maximum shift must be a non-negative number of milliseconds"));
    }
    let max = (max_shift_ms * sample_rate as f64 / 1000.0).round() as i64;
    let mut shifts = Vec::new();
    let mut warnings = Vec::new();
    for s in -max..=max {
        if s == 0 {
            continue;
        }
        if s.unsigned_abs() as usize >= hop {
            warnings.push(format!("shift {s} is not smaller than the {hop}-sample hop; skipped"));
            continue;
        }
        shifts.push(s);
    }
    Ok((shifts, warnings))
}

/// Token stability under sub-hop time shifts, paired with each model's
/// SI-SDR after `n_iters` re-encodings.
pub fn eval_phase(
    models: &[&dyn Codec],
    clips: &[AudioBuffer],
    max_shift_ms: f64,
    n_iters: usize,
) -> Result<ShiftReport> {
    if models.is_empty() {
        return Err(Error::arg("no models to evaluate"));
    }
    if clips.is_empty() {
        return Err(Error::arg("no clips to evaluate"));
    }
    let (shifts, mut warnings) = phase_shifts(models[0].sample_rate(), models.iter().map(|m| m.hop()).min().unwrap_or(1), max_shift_ms)?;
    if shifts.is_empty() {
        return Err(Error::arg("no usable shifts"));
    }
    let mut results = Vec::with_capacity(models.len());
    for &model in models {
        let per_clip = par_map(clips.len(), |c| -> Result<Vec<Vec<f64>>> {
            let x = &clips[c];
            let base = model.encode_tokens(x)?;
            shifts
                .iter()
                .map(|&s| match_rate(&model.encode_tokens(&time_shift(x, s)?)?, &base))
                .collect()
        })?;
        let n_levels = per_clip[0][0].len();
        let per_shift: Vec<f64> = (0..shifts.len())
            .map(|s| mean(&per_clip.iter().map(|c| mean(&c[s])).collect::<Vec<_>>()))
            .collect();
        let per_level: Vec<f64> = (0..n_levels)
            .map(|l| mean(&per_clip.iter().flat_map(|c| c.iter().map(move |v| v[l])).collect::<Vec<_>>()))
            .collect();
        let report = eval_multiround(model, clips, n_iters)?;
        results.push(ModelShift {
            model_id: model.name(),
            mean_match_rate: mean(&per_shift),
            per_shift,
            per_level,
            si_sdr_at_n: report.summary.last().map_or(f64::NAN, |s| s.si_sdr_db),
        });
    }
    let correlation = if results.len() >= 2 {
        let xs: Vec<f64> = results.iter().map(|m| m.mean_match_rate).collect();
        let ys: Vec<f64> = results.iter().map(|m| m.si_sdr_at_n).collect();
        match pearson_corr(&xs, &ys) {
            Ok(r) => Some(r),
            Err(e) => {
                warnings.push(format!("correlation undefined: {e}"));
                None
            }
        }
    } else {
        None
    };
    Ok(ShiftReport {
        shifts,
        iterations: n_iters,
        models: results,
        correlation,
        warnings,
    })
}

/// Reads back the per-iteration means of a `rows.csv` file.
pub fn summarize_rows_csv(text: &str) -> Result<BTreeMap<usize, (f64, f64)>> {
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().ok_or_else(|| Error::Format("empty rows.csv".into()))?.split(',').collect();
    let col = |name: &str| {
        header
            .iter()
            .position(|h| *h == name)
            .ok_or_else(|| Error::Format(format!("rows.csv lacks column {name}")))
    };
    let (it_col, sdr_col, lsd_col) = (col("iteration")?, col("si_sdr_db")?, col("lsd_db")?);
    let mut acc: BTreeMap<usize, (f64, f64, usize)> = BTreeMap::new();
    for line in lines.filter(|l| !l.is_empty()) {
        let f: Vec<&str> = line.split(',').collect();
        let parse = |i: usize| -> Result<f64> {
            f.get(i)
                .ok_or_else(|| Error::Format(format!("short row: {line}")))?
                .parse()
                .map_err(|_| Error::Format(format!("bad number in row: {line}")))
        };
        let it = parse(it_col)? as usize;
        let e = acc.entry(it).or_insert((0.0, 0.0, 0));
        e.0 += parse(sdr_col)?;
        e.1 += parse(lsd_col)?;
        e.2 += 1;
    }
    Ok(acc.into_iter().map(|(k, (s, l, n))| (k, (s / n as f64, l / n as f64))).collect())
}
