//! Re-encodes held-out clips repeatedly and prints how tokens and quality
//! drift with the iteration count.

use idemcodec::audio::synth_corpus;
use idemcodec::harness::pipeline::Plan;
use idemcodec::harness::{emit_report, eval_multiround, Named};
use idemcodec::training::pretrain;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let plan = Plan::tiny();
    let corpus = synth_corpus(&plan.train_corpus)?;
    let (model, _) = pretrain(plan.codec.clone(), &corpus, 200, &plan.weights, &plan.pretrain_opts)?;
    let report = eval_multiround(&Named::new("tiny", &model), &plan.held_out()?, 10)?;
    for s in &report.summary {
        println!(
            "iteration {:>2}: SI-SDR {:>7.2} dB, match rate {:?}, codebook use {:.1}%",
            s.iteration, s.si_sdr_db, s.match_rate, s.entropy_pct
        );
    }
    let dir = std::env::temp_dir().join("idemcodec_multiround");
    emit_report(&report, &dir)?;
    println!("report written to {}", dir.display());
    Ok(())
}
