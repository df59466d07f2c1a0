//! Command-line front end. The binary only forwards to [`run`].

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::audio::{read_wav, synth_corpus, write_wav, AudioBuffer};
use crate::codec::{load_model, save_model, Codec};
use crate::error::{Error, Result};
use crate::harness::config::RunConfig;
use crate::harness::{emit_report, eval_multiround, eval_phase, summarize_rows_csv, Named, DEFAULT_ITERATIONS};
use crate::training::{finetune, lambda_sweep, pretrain, IdemKind, LossWeights};

/// Seed used when neither the flag nor a config file sets one.
pub const DEFAULT_SEED: u64 = 42;
/// Fine-tuning steps per candidate during a λ sweep.
pub const DEFAULT_SWEEP_STEPS: u64 = 2_000;

#[derive(Debug, Parser)]
#[command(name = "idemcodec", version, about = "Train RVQ codecs and measure re-encoding drift")]
pub struct Cli {
    /// Seed for every random choice. Overrides the config file.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic corpus as WAV files.
    SynthData {
        /// Config file; its corpus keys are used.
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a codec from scratch.
    Pretrain {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        steps: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fine-tune a trained codec with frozen codebooks.
    Finetune {
        #[arg(long)]
        ckpt: PathBuf,
        /// none, enc, proj, code or enc_quantized.
        #[arg(long)]
        idem: IdemKind,
        /// A weight, or `sweep` to pick one from 1, 10, 100, 1000.
        #[arg(long)]
        lambda: Option<String>,
        #[arg(long)]
        steps: u64,
        #[arg(long)]
        out: PathBuf,
        /// WAV directory; synthesized from the config when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_SWEEP_STEPS)]
        sweep_steps: u64,
    },
    /// Re-encode clips repeatedly and write a report.
    EvalIdem {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = DEFAULT_ITERATIONS)]
        iters: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Token stability under small time shifts, across models.
    EvalPhase {
        #[arg(long, num_args = 1.., required = true)]
        ckpts: Vec<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = crate::harness::DEFAULT_MAX_SHIFT_MS)]
        max_shift_ms: f64,
        #[arg(long, default_value_t = DEFAULT_ITERATIONS)]
        iters: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Summarize the reports found in a directory tree.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
    },
}

/// Parses `args` (program name first) and runs the command, writing
/// results to `out`. Returns the process exit status.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let text = e.render().to_string();
            let _ = if code == 0 { out.write_all(text.as_bytes()) } else { err.write_all(text.as_bytes()) };
            return code;
        }
    };
    match execute(&cli, out, err) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            1
        }
    }
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<RunConfig> {
    let cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    Ok(match seed {
        Some(s) => cfg.with_seed(s),
        None => cfg,
    })
}

/// Every `.wav` file directly inside `dir`, in file-name order.
pub fn read_corpus_dir(dir: &Path) -> Result<Vec<AudioBuffer>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("wav")))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::arg(format!("no .wav files in {}", dir.display())));
    }
    paths.iter().map(read_wav).collect()
}

fn io_err(e: std::io::Error) -> Error {
    Error::io("<output>", e)
}

fn stem(path: &Path) -> String {
    path.file_stem().map_or_else(|| "model".into(), |s| s.to_string_lossy().into_owned())
}

fn appended(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn execute(cli: &Cli, out: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    match &cli.command {
        Command::SynthData { spec, out: dir } => {
            let cfg = load_config(Some(spec), cli.seed)?;
            let clips = synth_corpus(&cfg.corpus)?;
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            for (i, clip) in clips.iter().enumerate() {
                write_wav(clip, dir.join(format!("clip{i:03}.wav")))?;
            }
            writeln!(out, "wrote {} clips to {}", clips.len(), dir.display()).map_err(io_err)?;
        }
        Command::Pretrain {
            config,
            data,
            steps,
            out: ckpt,
        } => {
            let cfg = load_config(config.as_deref(), cli.seed)?;
            let corpus = read_corpus_dir(data)?;
            let (model, log) = pretrain(cfg.codec, &corpus, *steps, &cfg.weights, &cfg.train)?;
            save_model(&model, ckpt)?;
            log.write_csv(appended(ckpt, ".log.csv"))?;
            if let Some((loss, sdr)) = log.last_validation() {
                writeln!(out, "validation loss {loss:.6}, SI-SDR {sdr:.2} dB").map_err(io_err)?;
            }
            writeln!(out, "saved {}", ckpt.display()).map_err(io_err)?;
        }
        Command::Finetune {
            ckpt,
            idem,
            lambda,
            steps,
            out: dest,
            data,
            config,
            sweep_steps,
        } => {
            let cfg = load_config(config.as_deref(), cli.seed)?;
            let model = load_model(ckpt)?;
            let corpus = match data {
                Some(d) => read_corpus_dir(d)?,
                None => synth_corpus(&cfg.corpus)?,
            };
            let mut weights = LossWeights {
                idem_kind: *idem,
                ..cfg.weights
            };
            weights.idem = match lambda.as_deref() {
                None => idem.default_lambda(),
                Some("sweep") => {
                    let sweep = lambda_sweep(&model, &corpus, &weights, *sweep_steps, &cfg.train)?;
                    writeln!(out, "base validation loss {:.6}", sweep.base_loss).map_err(io_err)?;
                    for (l, loss) in &sweep.candidates {
                        writeln!(out, "lambda {l}: validation loss {loss:.6}").map_err(io_err)?;
                    }
                    if let Some(w) = &sweep.warning {
                        writeln!(err, "warning: {w}").map_err(io_err)?;
                    }
                    writeln!(out, "selected lambda {}", sweep.selected).map_err(io_err)?;
                    sweep.selected
                }
                Some(v) => v
                    .parse()
                    .map_err(|_| Error::arg(format!("--lambda expects a number or 'sweep', got '{v}'")))?,
            };
            weights.validate()?;
            let (tuned, log) = finetune(&model, &corpus, &weights, *steps, &cfg.train)?;
            save_model(&tuned, dest)?;
            log.write_csv(appended(dest, ".log.csv"))?;
            writeln!(out, "saved {}", dest.display()).map_err(io_err)?;
        }
        Command::EvalIdem {
            ckpt,
            data,
            iters,
            out: dir,
        } => {
            let model = load_model(ckpt)?;
            let clips = read_corpus_dir(data)?;
            let named = Named::new(stem(ckpt), &model);
            let mut report = eval_multiround(&named, &clips, *iters)?;
            report.seed = cli.seed.unwrap_or(model.config().seed);
            emit_report(&report, dir)?;
            let last = report.summary.last().expect("at least one iteration");
            writeln!(
                out,
                "{}: SI-SDR@{} {:.2} dB, mean match rate {}",
                report.model_id,
                last.iteration,
                last.si_sdr_db,
                report.mean_match_rate().map_or("n/a".into(), |m| format!("{m:.4}"))
            )
            .map_err(io_err)?;
        }
        Command::EvalPhase {
            ckpts,
            data,
            max_shift_ms,
            iters,
            out: dir,
        } => {
            let models = ckpts.iter().map(load_model).collect::<Result<Vec<_>>>()?;
            let clips = read_corpus_dir(data)?;
            let named: Vec<Named<'_>> = ckpts.iter().zip(&models).map(|(p, m)| Named::new(stem(p), m)).collect();
            let refs: Vec<&dyn Codec> = named.iter().map(|n| n as &dyn Codec).collect();
            let report = eval_phase(&refs, &clips, *max_shift_ms, *iters)?;
            report.write(dir)?;
            for w in &report.warnings {
                writeln!(err, "warning: {w}").map_err(io_err)?;
            }
            for m in &report.models {
                writeln!(
                    out,
                    "{}: shift match rate {:.4}, SI-SDR@{} {:.2} dB",
                    m.model_id, m.mean_match_rate, report.iterations, m.si_sdr_at_n
                )
                .map_err(io_err)?;
            }
            match report.correlation {
                Some(r) => writeln!(out, "correlation {r:.4}"),
                None => writeln!(out, "correlation undefined"),
            }
            .map_err(io_err)?;
        }
        Command::Report { input } => report(input, out)?,
    }
    Ok(())
}

fn find_files(dir: &Path, name: &str, found: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    entries.sort();
    for p in entries {
        if p.is_dir() {
            find_files(&p, name, found)?;
        } else if p.file_name().is_some_and(|f| f == name) {
            found.push(p);
        }
    }
    Ok(())
}

/// Prints one line per `rows.csv` and `phase.json` below `dir`. Means are
/// recomputed from the rows rather than read from the summary.
fn report(dir: &Path, out: &mut dyn Write) -> Result<()> {
    let mut rows = Vec::new();
    let mut phases = Vec::new();
    find_files(dir, "rows.csv", &mut rows)?;
    find_files(dir, "phase.json", &mut phases)?;
    if rows.is_empty() && phases.is_empty() {
        return Err(Error::arg(format!("no reports under {}", dir.display())));
    }
    for path in rows {
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let means = summarize_rows_csv(&text)?;
        let (Some((&first_it, first)), Some((&last_it, last))) = (means.first_key_value(), means.last_key_value()) else {
            continue;
        };
        let label = path.parent().unwrap_or(dir).strip_prefix(dir).unwrap_or(Path::new(""));
        let label = if label.as_os_str().is_empty() { ".".into() } else { label.display().to_string() };
        writeln!(
            out,
            "{label}: SI-SDR@{first_it} {:.2} dB, SI-SDR@{last_it} {:.2} dB, degradation {:.2} dB, LSD@{last_it} {:.3} dB",
            first.0,
            last.0,
            first.0 - last.0,
            last.1
        )
        .map_err(io_err)?;
    }
    for path in phases {
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let r: crate::harness::ShiftReport = serde_json::from_str(&text).map_err(|e| Error::Format(e.to_string()))?;
        for m in &r.models {
            writeln!(out, "phase {}: shift match rate {:.4}", m.model_id, m.mean_match_rate).map_err(io_err)?;
        }
        if let Some(c) = r.correlation {
            writeln!(out, "phase correlation {c:.4}").map_err(io_err)?;
        }
    }
    Ok(())
}
