//! Generates the synthetic training corpus and writes it as WAV files.

use idemcodec::audio::{read_wav, synth_corpus_labeled, write_wav};
use idemcodec::CorpusSpec;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let spec = CorpusSpec {
        n_clips: 6,
        clip_seconds: 0.5,
        ..CorpusSpec::default()
    };
    let dir = std::env::temp_dir().join("idemcodec_corpus");
    std::fs::create_dir_all(&dir)?;
    for (i, (kind, clip)) in synth_corpus_labeled(&spec)?.into_iter().enumerate() {
        let path = dir.join(format!("clip{i:03}.wav"));
        write_wav(&clip, &path)?;
        let back = read_wav(&path)?;
        println!(
            "{} {kind:?}: {} samples, rms {:.3}, peak {:.3}",
            path.display(),
            back.len(),
            back.rms(),
            back.peak()
        );
    }
    Ok(())
}
