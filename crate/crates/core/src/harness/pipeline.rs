//! The reference experiment: pretrain, fine-tune a baseline and each
//! idempotence variant, then re-encode held-out clips with every model.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{emit_report, Named, eval_multiround, eval_phase, EvalReport, ShiftReport, DEFAULT_ITERATIONS, DEFAULT_MAX_SHIFT_MS};
use crate::audio::{synth_corpus, AudioBuffer, CorpusSpec};
use crate::codec::{save_model, Codec, CodecConfig, CodecModel};
use crate::error::{Error, Result};
use crate::training::{finetune, pretrain, split_corpus, validate, IdemKind, LossWeights, TrainLog, TrainOptions};

/// Offset between the training and held-out corpus seeds.
const HELD_OUT_SEED_OFFSET: u64 = 1_000_003;

/// Fine-tuned variants in report order: baseline first.
pub const VARIANTS: [IdemKind; 4] = [IdemKind::None, IdemKind::Enc, IdemKind::Proj, IdemKind::Code];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Plan {
    pub codec: CodecConfig,
    pub train_corpus: CorpusSpec,
    pub n_eval_clips: usize,
    pub eval_seconds: f64,
    pub pretrain_steps: u64,
    pub finetune_steps: u64,
    pub iterations: usize,
    pub weights: LossWeights,
    pub pretrain_opts: TrainOptions,
    pub finetune_opts: TrainOptions,
    pub variants: Vec<IdemKind>,
    pub max_shift_ms: f64,
}

impl Default for Plan {
    fn default() -> Self {
        let pretrain_opts = TrainOptions {
            optimizer: crate::training::AdamWConfig {
                lr: 1e-3,
                ..Default::default()
            },
            ..TrainOptions::default()
        };
        Self {
            codec: CodecConfig::default(),
            train_corpus: CorpusSpec::default(),
            n_eval_clips: 20,
            eval_seconds: 1.0,
            pretrain_steps: 20_000,
            finetune_steps: 5_000,
            iterations: DEFAULT_ITERATIONS,
            weights: LossWeights::default(),
            pretrain_opts,
            // The whole quantizer module stays fixed during fine-tuning.
            finetune_opts: TrainOptions {
                freeze_projections: true,
                ..TrainOptions::default()
            },
            variants: VARIANTS.to_vec(),
            max_shift_ms: DEFAULT_MAX_SHIFT_MS,
        }
    }
}

impl Plan {
    /// A much shorter plan on a small codec, for smoke tests.
    pub fn tiny() -> Self {
        let codec = CodecConfig {
            frame_size: 32,
            hop: 16,
            latent_dim: 8,
            code_dim: 4,
            n_levels: 2,
            codebook_size: 8,
            encoder_hidden: vec![16],
            ..CodecConfig::default()
        };
        let small = |lr: f64| TrainOptions {
            excerpt_seconds: 0.05,
            warmup_steps: 4,
            val_every: 10,
            log_every: 5,
            kmeans_excerpts: 8,
            val_seconds: 0.1,
            optimizer: crate::training::AdamWConfig {
                lr,
                ..Default::default()
            },
            ..TrainOptions::default()
        };
        Self {
            codec,
            train_corpus: CorpusSpec {
                n_clips: 8,
                clip_seconds: 0.25,
                ..CorpusSpec::default()
            },
            n_eval_clips: 3,
            eval_seconds: 0.1,
            pretrain_steps: 12,
            finetune_steps: 4,
            iterations: 4,
            weights: LossWeights::default(),
            pretrain_opts: small(1e-3),
            finetune_opts: TrainOptions {
                freeze_projections: true,
                ..small(1e-4)
            },
            variants: VARIANTS.to_vec(),
            max_shift_ms: 1.0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.codec.seed = seed;
        self.train_corpus.seed = seed;
        self.pretrain_opts.seed = seed;
        self.finetune_opts.seed = seed;
        self
    }

    pub fn held_out_spec(&self) -> CorpusSpec {
        CorpusSpec {
            n_clips: self.n_eval_clips,
            clip_seconds: self.eval_seconds,
            seed: self.train_corpus.seed.wrapping_add(HELD_OUT_SEED_OFFSET),
            ..self.train_corpus.clone()
        }
    }

    pub fn held_out(&self) -> Result<Vec<AudioBuffer>> {
        synth_corpus(&self.held_out_spec())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantOutcome {
    pub kind: IdemKind,
    pub lambda: f64,
    pub report: EvalReport,
    /// Codebooks bitwise equal to the pretrained model's.
    pub codebooks_frozen: bool,
    pub mean_match_rate: f64,
    pub si_sdr_degradation: f64,
    pub entropy_first: f64,
    pub entropy_last: f64,
}

/// The three directional checks on one seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Directional {
    /// Every idempotence variant matches at least as often as the baseline.
    pub match_rate_vs_baseline: bool,
    /// The codebook-target variant degrades least.
    pub code_least_degradation: bool,
    /// The codebook-target variant keeps codebook use within 10 points.
    pub code_preserves_use: bool,
}

/// Allowed drift of mean codebook use between the first and last iteration.
pub const USE_DRIFT_PP: f64 = 10.0;

impl Directional {
    pub fn evaluate(variants: &[VariantOutcome]) -> Result<Self> {
        let find = |k: IdemKind| {
            variants
                .iter()
                .find(|v| v.kind == k)
                .ok_or_else(|| Error::arg(format!("variant '{k}' missing")))
        };
        let base = find(IdemKind::None)?;
        let code = find(IdemKind::Code)?;
        let idem: Vec<&VariantOutcome> = variants.iter().filter(|v| v.kind != IdemKind::None).collect();
        Ok(Self {
            match_rate_vs_baseline: idem.iter().all(|v| v.mean_match_rate >= base.mean_match_rate),
            code_least_degradation: variants
                .iter()
                .filter(|v| v.kind != IdemKind::Code)
                .all(|v| code.si_sdr_degradation < v.si_sdr_degradation),
            code_preserves_use: (code.entropy_last - code.entropy_first).abs() <= USE_DRIFT_PP,
        })
    }

    pub fn all(&self) -> bool {
        self.match_rate_vs_baseline && self.code_least_degradation && self.code_preserves_use
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Outcome {
    pub seed: u64,
    pub pretrain_val_loss: f64,
    pub pretrain_val_si_sdr_db: f64,
    pub variants: Vec<VariantOutcome>,
    pub phase: ShiftReport,
    pub directional: Directional,
}

fn variant_dir(kind: IdemKind) -> String {
    match kind {
        IdemKind::None => "baseline".into(),
        k => k.name().into(),
    }
}

fn write_log(log: &TrainLog, out: Option<&Path>, name: &str) -> Result<()> {
    match out {
        Some(dir) => log.write_csv(dir.join(name)),
        None => Ok(()),
    }
}

/// Runs the plan. With `out`, checkpoints, training logs and reports are
/// written below it.
pub fn run(plan: &Plan, out: Option<&Path>) -> Result<Outcome> {
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let corpus = synth_corpus(&plan.train_corpus)?;
    let (pretrained, log) = pretrain(plan.codec.clone(), &corpus, plan.pretrain_steps, &plan.weights, &plan.pretrain_opts)?;
    write_log(&log, out, "pretrain_log.csv")?;
    if let Some(dir) = out {
        save_model(&pretrained, dir.join("pretrained.ckpt"))?;
    }
    run_finetunes(plan, &pretrained, out)
}

/// The fine-tuning and evaluation half of [`run`], starting from an
/// already pretrained model.
pub fn run_finetunes(plan: &Plan, pretrained: &CodecModel, out: Option<&Path>) -> Result<Outcome> {
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let corpus = synth_corpus(&plan.train_corpus)?;
    let held_out = plan.held_out()?;
    let split = split_corpus(&corpus)?;
    let (pretrain_val_loss, pretrain_val_si_sdr_db) =
        validate(pretrained, split.validation, plan.pretrain_opts.val_seconds, &plan.weights)?;

    let mut models = Vec::with_capacity(plan.variants.len());
    let mut variants = Vec::with_capacity(plan.variants.len());
    for &kind in &plan.variants {
        let weights = LossWeights {
            idem_kind: kind,
            idem: kind.default_lambda(),
            ..plan.weights
        };
        let (tuned, log) = finetune(pretrained, &corpus, &weights, plan.finetune_steps, &plan.finetune_opts)?;
        let name = variant_dir(kind);
        write_log(&log, out, &format!("finetune_{name}_log.csv"))?;
        let codebooks_frozen = (0..plan.codec.n_levels).all(|l| {
            let (a, b) = (pretrained.codebook(l), tuned.codebook(l));
            a.vectors.data().iter().zip(b.vectors.data()).all(|(x, y)| x.to_bits() == y.to_bits())
        });
        let named = Named::new(name.clone(), &tuned);
        let mut report = eval_multiround(&named, &held_out, plan.iterations)?;
        report.seed = plan.codec.seed;
        if let Some(dir) = out {
            save_model(&tuned, dir.join(format!("{name}.ckpt")))?;
            emit_report(&report, dir.join("eval").join(&name))?;
        }
        let first = report.summary.first().expect("at least one iteration");
        let last = report.summary.last().expect("at least one iteration");
        variants.push(VariantOutcome {
            kind,
            lambda: weights.effective_idem(),
            mean_match_rate: report.mean_match_rate().unwrap_or(f64::NAN),
            si_sdr_degradation: first.si_sdr_db - last.si_sdr_db,
            entropy_first: first.entropy_pct,
            entropy_last: last.entropy_pct,
            codebooks_frozen,
            report,
        });
        models.push((name, tuned));
    }

    let named: Vec<Named<'_>> = models.iter().map(|(n, m)| Named::new(n.clone(), m)).collect();
    let refs: Vec<&dyn Codec> = named.iter().map(|n| n as &dyn Codec).collect();
    let phase = eval_phase(&refs, &held_out, plan.max_shift_ms, plan.iterations)?;
    if let Some(dir) = out {
        phase.write(dir.join("phase"))?;
    }
    let directional = Directional::evaluate(&variants)?;
    Ok(Outcome {
        seed: plan.codec.seed,
        pretrain_val_loss,
        pretrain_val_si_sdr_db,
        variants,
        phase,
        directional,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tiny_plan_runs_and_writes_reports() {
        let dir = tempfile::tempdir().unwrap();
        let outcome = run(&Plan::tiny(), Some(dir.path())).unwrap();
        assert_eq!(outcome.variants.len(), 4);
        assert!(outcome.variants.iter().all(|v| v.codebooks_frozen));
        for v in ["baseline", "enc", "proj", "code"] {
            for f in super::super::REPORT_FILES {
                assert!(dir.path().join("eval").join(v).join(f).exists());
            }
        }
        assert!(dir.path().join("pretrained.ckpt").exists());
    }
}
