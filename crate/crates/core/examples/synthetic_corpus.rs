//! Generates a small scene corpus, prints a few samples and writes it to disk.
//!
//!     cargo run --example synthetic_corpus -- /tmp/scenes

use std::path::PathBuf;

use cookie_kit::data::{generate_corpus, Corpus, GeneratorConfig, Split};

fn main() -> cookie_kit::Result<()> {
    let out = std::env::args().nth(1).map(PathBuf::from);
    let corpus = generate_corpus(200, 11, &GeneratorConfig::default())?;
    let vocab = corpus.vocabulary();
    println!(
        "{} samples: {} train / {} val / {} test, vocabulary of {}",
        corpus.len(),
        corpus.split(Split::Train).len(),
        corpus.split(Split::Val).len(),
        corpus.split(Split::Test).len(),
        vocab.len()
    );
    for s in 0..3 {
        let rec = corpus.record(s);
        println!("\nsample {} with {} objects", rec.id, rec.spec.objects.len());
        for c in &rec.captions {
            println!("  {}", vocab.decode(c.ids()));
        }
    }
    if let Some(dir) = out {
        corpus.write(&dir)?;
        let back = Corpus::read(&dir)?;
        assert_eq!(back.images, corpus.images);
        println!("\nwrote and re-read {}", dir.display());
    }
    Ok(())
}
