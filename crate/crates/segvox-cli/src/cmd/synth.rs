use std::path::Path;

use segvox_core::synth::{generate, write_corpus, SynthConfig};

use crate::errors::AppError;

pub fn run(
    out: &Path,
    id: &str,
    seed: u64,
    n_utterances: usize,
    sample_rate: u32,
) -> Result<(), AppError> {
    if n_utterances == 0 {
        return Err(AppError::usage("--n-utterances must be at least 1"));
    }
    std::fs::create_dir_all(out)?;
    let cfg = SynthConfig {
        seed,
        n_utterances,
        sample_rate,
        ..SynthConfig::default()
    };
    let corpus = generate(&cfg, id);
    let (wav, manifest) = write_corpus(&corpus, out, id)?;
    println!(
        "wrote {} ({:.1}s, {} utterances) and {}",
        wav.display(),
        corpus.wave.duration_s(),
        corpus.segments.len(),
        manifest.display()
    );
    Ok(())
}
