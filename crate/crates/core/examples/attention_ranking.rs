//! Ranks image patches and caption words by their cosine with the pooled
//! embedding, after a short training run.

use cookie_kit::config::RunConfig;
use cookie_kit::data::{generate_corpus, Split};
use cookie_kit::eval::analyze_attention;
use cookie_kit::train::run_pretrain;

fn main() -> cookie_kit::Result<()> {
    let mut cfg = RunConfig::default();
    cfg.data.samples = 400;
    cfg.train.stage1_epochs = 4;
    cfg.train.stage2_epochs = 0;
    cfg.train.validate = false;

    let corpus = generate_corpus(cfg.data.samples, cfg.seed, &cfg.data.generator)?;
    let model = run_pretrain(&cfg, &corpus, None)?.model;
    let samples: Vec<usize> = corpus.split(Split::Test).into_iter().take(8).collect();
    let analysis = analyze_attention(&model, &corpus, &samples, cfg.objective.match_pool)?;

    for s in analysis.samples.iter().take(3) {
        println!("sample {} (objects first: {})", s.id, s.objects_first);
        let top = |tokens: &[cookie_kit::eval::RankedToken]| {
            tokens.iter().take(4).map(|t| format!("{} {:.2}", t.label, t.score)).collect::<Vec<_>>().join(", ")
        };
        println!("  patches: {}", top(&s.image));
        println!("  words:   {}", top(&s.text));
    }
    println!("objects outrank background in {:.0}% of samples", 100.0 * analysis.object_rate);
    Ok(())
}
