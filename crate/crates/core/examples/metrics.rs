//! Quality and token metrics on hand-made inputs.

use idemcodec::metrics::{codebook_use, log_spectral_distance, match_rate, pearson_corr, si_sdr};
use idemcodec::{AudioBuffer, TokenGrid};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let reference = AudioBuffer::new((0..800).map(|i| (i as f64 * 0.05).sin()).collect(), 8000)?;
    let noisy = AudioBuffer::new(
        reference.samples().iter().enumerate().map(|(i, v)| 0.5 * v + 0.05 * (i as f64 * 1.7).cos()).collect(),
        8000,
    )?;
    println!("SI-SDR {:.2} dB", si_sdr(&reference, &noisy)?);
    println!("log-spectral distance {:.3} dB", log_spectral_distance(&reference, &noisy)?);

    let a = TokenGrid::from_levels(vec![vec![0, 1, 2, 3, 0, 1, 2, 3], vec![5, 5, 5, 5, 5, 5, 5, 5]], 8)?;
    let b = TokenGrid::from_levels(vec![vec![0, 1, 2, 3, 4, 4, 4, 4], vec![5, 5, 5, 5, 5, 5, 5, 6]], 8)?;
    println!("match rate per level {:?}", match_rate(&a, &b)?);
    println!("codebook use per level {:?}", codebook_use(&a));
    println!("pearson {:.4}", pearson_corr(&[0.1, 0.4, 0.5, 0.9], &[-2.0, -1.1, -0.7, 0.3])?);
    Ok(())
}
