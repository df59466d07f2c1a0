//! λ selection: the rule on made-up validation losses, then a real sweep
//! with a short fine-tuning budget per candidate.

use idemcodec::audio::synth_corpus;
use idemcodec::harness::pipeline::Plan;
use idemcodec::training::{lambda_sweep, pretrain, select_lambda, LAMBDA_CANDIDATES};
use idemcodec::{IdemKind, LossWeights};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let base = 2.0;
    let measured: Vec<(f64, f64)> = LAMBDA_CANDIDATES.iter().zip([1.0, 1.05, 1.09, 1.5]).map(|(l, r)| (*l, r * base)).collect();
    println!("rule on {measured:?}: {:?}", select_lambda(base, &measured));

    let plan = Plan::tiny();
    let corpus = synth_corpus(&plan.train_corpus)?;
    let (model, _) = pretrain(plan.codec.clone(), &corpus, 200, &plan.weights, &plan.pretrain_opts)?;
    let weights = LossWeights::with_idem(IdemKind::Code);
    let sweep = lambda_sweep(&model, &corpus, &weights, 40, &plan.finetune_opts)?;
    println!("base validation loss {:.4}", sweep.base_loss);
    for (l, loss) in &sweep.candidates {
        println!("lambda {l:>6}: validation loss {loss:.4}");
    }
    println!("selected {}", sweep.selected);
    if let Some(w) = sweep.warning {
        println!("warning: {w}");
    }
    Ok(())
}
