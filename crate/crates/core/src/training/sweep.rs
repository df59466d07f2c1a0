//! λ selection: the largest candidate whose fine-tune keeps validation loss
//! within tolerance of the pretrained model.

use serde::{Deserialize, Serialize};

use super::{finetune, split_corpus, validate, LossWeights, TrainOptions};
use crate::audio::AudioBuffer;
use crate::codec::CodecModel;
use crate::error::Result;

pub const LAMBDA_CANDIDATES: [f64; 4] = [1.0, 10.0, 100.0, 1000.0];
/// Allowed relative rise of validation loss.
pub const QUALITY_TOLERANCE: f64 = 0.10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepOutcome {
    pub selected: f64,
    pub base_loss: f64,
    /// `(λ, validation loss after fine-tuning)` per candidate.
    pub candidates: Vec<(f64, f64)>,
    /// Set when no candidate qualified and the smallest was returned.
    pub warning: Option<String>,
}

/// Applies the selection rule to measured losses.
pub fn select_lambda(base_loss: f64, candidates: &[(f64, f64)]) -> (f64, Option<String>) {
    let limit = base_loss * (1.0 + QUALITY_TOLERANCE);
    let best = candidates
        .iter()
        .filter(|(_, loss)| *loss <= limit)
        .map(|(l, _)| *l)
        .fold(None, |acc: Option<f64>, l| Some(acc.map_or(l, |a| a.max(l))));
    match best {
        Some(l) => (l, None),
        None => {
            let smallest = candidates.iter().map(|(l, _)| *l).fold(f64::INFINITY, f64::min);
            (
                smallest,
                Some(format!(
                    "no λ kept validation loss within {:.0}% of {base_loss:.6}; using {smallest}",
                    QUALITY_TOLERANCE * 100.0
                )),
            )
        }
    }
}

/// Runs the sweep with a caller-supplied evaluation of each candidate.
pub fn lambda_sweep_with(
    base_loss: f64,
    candidates: &[f64],
    mut evaluate: impl FnMut(f64) -> Result<f64>,
) -> Result<SweepOutcome> {
    let mut measured = Vec::with_capacity(candidates.len());
    for &l in candidates {
        measured.push((l, evaluate(l)?));
    }
    let (selected, warning) = select_lambda(base_loss, &measured);
    Ok(SweepOutcome {
        selected,
        base_loss,
        candidates: measured,
        warning,
    })
}

/// Fine-tunes `model` for `budget_steps` at each candidate λ and selects one.
pub fn lambda_sweep(
    model: &CodecModel,
    corpus: &[AudioBuffer],
    weights: &LossWeights,
    budget_steps: u64,
    opts: &TrainOptions,
) -> Result<SweepOutcome> {
    let split = split_corpus(corpus)?;
    let (base, _) = validate(model, split.validation, opts.val_seconds, weights)?;
    lambda_sweep_with(base, &LAMBDA_CANDIDATES, |lambda| {
        let w = LossWeights { idem: lambda, ..*weights };
        let (tuned, _) = finetune(model, corpus, &w, budget_steps, opts)?;
        Ok(validate(&tuned, split.validation, opts.val_seconds, weights)?.0)
    })
}
