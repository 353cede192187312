//! Write the bundled mini corpus: `cargo run -p mmvae --example make_mini_corpus -- data/mini`

use std::path::PathBuf;

fn main() -> std::io::Result<()> {
    let dir = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "data/mini".into()));
    std::fs::create_dir_all(&dir)?;
    for (name, bytes) in mmvae::synth::mini_corpus(mmvae::synth::MINI_CORPUS_SEED) {
        std::fs::write(dir.join(&name), bytes)?;
        println!("{}", dir.join(name).display());
    }
    Ok(())
}
