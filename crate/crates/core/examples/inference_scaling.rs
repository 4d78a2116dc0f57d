//! Retrieval cost of independent encoders against joint pair scoring.
//!
//!     cargo run --release --example inference_scaling

use cookie_kit::bench::{bench_both, BenchConfig, BenchInputs};
use cookie_kit::data::{generate_corpus, GeneratorConfig};
use cookie_kit::encoders::{CookieModel, EncoderConfig};

fn main() -> cookie_kit::Result<()> {
    let encoder = EncoderConfig {
        patch: 16,
        visual_dim: 32,
        text_dim: 32,
        model_dim: 32,
        ff_dim: 32,
        ..Default::default()
    };
    let model = CookieModel::<f32>::new(encoder, 1)?;
    let cfg = BenchConfig {
        sizes: vec![16, 32, 64, 128],
        ..Default::default()
    };
    let corpus = generate_corpus(128, 1, &GeneratorConfig::default())?;
    let inputs = BenchInputs {
        images: corpus.images.iter().collect(),
        captions: corpus.manifest.records.iter().map(|r| &r.captions[0]).collect(),
    };
    let summary = bench_both(&model, &inputs, &cfg, 1)?;
    print!("{}", summary.csv());
    for (name, fit) in [("double-stream", summary.double_stream_fit), ("one-stream", summary.one_stream_fit)] {
        if let Some(f) = fit {
            println!("{name}: time ~ n^{:.2} (+- {:.2}, r2 {:.3})", f.slope, f.stderr, f.r2);
        }
    }
    println!("double/one time ratio at n = 128: {:.4}", summary.largest_ratio);
    Ok(())
}
