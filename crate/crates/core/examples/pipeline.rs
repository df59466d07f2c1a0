//! The whole experiment on a tiny plan: pretrain, fine-tune every variant,
//! evaluate re-encoding drift and phase sensitivity, and check the
//! directional expectations. Pass a seed as the first argument.

use idemcodec::harness::pipeline::{run, Plan};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let seed = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(0);
    let dir = std::env::temp_dir().join(format!("idemcodec_pipeline{seed}"));
    let outcome = run(&Plan::tiny().with_seed(seed), Some(&dir))?;
    println!("pretrained validation SI-SDR {:.2} dB", outcome.pretrain_val_si_sdr_db);
    for v in &outcome.variants {
        println!(
            "{:<5} lambda {:>5}: match {:.3}, degradation {:.2} dB, codebooks frozen {}",
            v.kind.to_string(),
            v.lambda,
            v.mean_match_rate,
            v.si_sdr_degradation,
            v.codebooks_frozen
        );
    }
    println!("{:?}", outcome.directional);
    println!("artifacts in {}", dir.display());
    Ok(())
}
