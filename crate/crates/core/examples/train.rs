//! Pretrains a small codec, then fine-tunes it with the codebook-target
//! idempotence loss and prints the last log rows of each phase.

use idemcodec::audio::synth_corpus;
use idemcodec::harness::pipeline::Plan;
use idemcodec::training::{finetune, pretrain, TrainLog};
use idemcodec::{IdemKind, LossWeights};

fn tail(label: &str, log: &TrainLog) {
    for row in log.rows.iter().rev().take(3).rev() {
        let r = &row.report;
        println!(
            "{label} step {:>4}: wave {:.4} spec {:.4} commit {:.4} idem {:.4} val SI-SDR {:?}",
            row.step, r.recon_wave, r.recon_spec, r.commit, r.idem, row.val_si_sdr_db
        );
    }
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let plan = Plan::tiny();
    let corpus = synth_corpus(&plan.train_corpus)?;
    let (model, log) = pretrain(plan.codec.clone(), &corpus, 300, &plan.weights, &plan.pretrain_opts)?;
    tail("pretrain", &log);

    let weights = LossWeights::with_idem(IdemKind::Code);
    let (tuned, log) = finetune(&model, &corpus, &weights, 100, &plan.finetune_opts)?;
    tail("finetune", &log);
    let same = (0..plan.codec.n_levels).all(|l| model.codebook(l) == tuned.codebook(l));
    println!("codebooks unchanged by fine-tuning: {same}");
    Ok(())
}
