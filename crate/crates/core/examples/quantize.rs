//! Nearest-neighbor lookup on one codebook, then the full residual cascade
//! of an untrained codec on a short clip.

use idemcodec::audio::synth_corpus;
use idemcodec::codec::{quantize_level, Codebook};
use idemcodec::{CodecConfig, CodecModel, CorpusSpec, Tensor};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let rows = vec![1.0, 0.0, 0.0, 1.0, -1.0, 0.0, 0.0, -2.0];
    let book = Codebook {
        vectors: Tensor::matrix(4, 2, rows)?,
    };
    // Lookup compares directions, so a long query still picks the row it points at.
    let queries = Tensor::matrix(3, 2, vec![5.0, 0.4, -0.1, -0.3, -3.0, 0.2])?;
    let (indices, selected) = quantize_level(&book, &queries)?;
    for (i, idx) in indices.iter().enumerate() {
        println!("query {:?} -> row {idx} {:?}", queries.row(i), selected.row(i));
    }

    let model = CodecModel::new(CodecConfig::default())?;
    let clip = &synth_corpus(&CorpusSpec {
        n_clips: 1,
        clip_seconds: 0.25,
        ..CorpusSpec::default()
    })?[0];
    let (tokens, record) = model.encode(clip)?;
    println!("{} levels x {} frames", tokens.n_levels(), tokens.n_frames());
    for l in 0..tokens.n_levels() {
        let norms = &record.residual_norms[l];
        let mean = norms.iter().sum::<f64>() / norms.len() as f64;
        println!("level {l}: first tokens {:?}, mean residual norm {mean:.4}", &tokens.level(l)[..8]);
    }
    Ok(())
}
