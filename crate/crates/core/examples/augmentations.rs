//! Visual and textual augmentation: a few traced draws, then empirical rates.

use cookie_kit::augment::{augment_image, augment_text, augmentation_stats, TextAugConfig, VisualAugConfig};
use cookie_kit::data::{generate_corpus, GeneratorConfig};

fn main() -> cookie_kit::Result<()> {
    let corpus = generate_corpus(4, 5, &GeneratorConfig::default())?;
    let vocab = corpus.vocabulary();
    let visual = VisualAugConfig::default();
    let text = TextAugConfig::default();

    let image = &corpus.images[0];
    for seed in 0..4 {
        let (out, trace) = augment_image(image, &visual, seed);
        println!("view {seed}: {}x{} {trace:?}", out.height(), out.width());
    }
    let caption = &corpus.record(0).captions[0];
    println!("\noriginal: {}", vocab.decode(caption.ids()));
    for seed in 0..5 {
        let (out, trace) = augment_text(caption, &text, seed)?;
        println!("  view {seed}: {}  {trace:?}", vocab.decode(out.ids()));
    }

    let stats = augmentation_stats(10_000, &visual, &text, 1)?;
    println!("\nrates over 10000 trials:");
    for (name, rate) in [
        ("flip", stats.flip),
        ("noise", stats.noise),
        ("jitter", stats.jitter),
        ("gray", stats.gray),
        ("mask", stats.masked),
        ("replace", stats.replaced),
        ("delete", stats.deleted),
    ] {
        println!("  {name:<8} {:.4} +- {:.4}", rate.rate, rate.stderr);
    }
    Ok(())
}
