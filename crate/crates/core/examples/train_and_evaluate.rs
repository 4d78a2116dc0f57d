//! Two-stage pre-training, triplet fine-tuning and retrieval evaluation on a
//! reduced budget. Takes about a minute in release mode.
//!
//!     cargo run --release --example train_and_evaluate

use cookie_kit::config::RunConfig;
use cookie_kit::data::{generate_corpus, Split};
use cookie_kit::eval::eval_retrieval;
use cookie_kit::train::{run_finetune, run_pretrain, EpochRecord};

fn show(log: &[EpochRecord]) {
    for r in log {
        println!(
            "  {:?} stage {} epoch {}: loss {:.3} (visual {:.3}, textual {:.3}) val rsum {:.1}",
            r.phase,
            r.stage,
            r.epoch,
            r.loss_total,
            r.loss_visual,
            r.loss_textual,
            r.val_rsum.unwrap_or(f64::NAN)
        );
    }
}

fn main() -> cookie_kit::Result<()> {
    let mut cfg = RunConfig::default();
    cfg.data.samples = 600;
    cfg.train.stage1_epochs = 6;
    cfg.train.stage2_epochs = 2;
    cfg.train.finetune_epochs = 4;
    cfg.validate()?;

    let corpus = generate_corpus(cfg.data.samples, cfg.seed, &cfg.data.generator)?;
    let test = corpus.split(Split::Test).len();

    println!("pre-training");
    let pre = run_pretrain(&cfg, &corpus, None)?;
    show(&pre.log);
    println!("fine-tuning");
    let ft = run_finetune(&cfg, &corpus, Some(&pre.model), None)?;
    show(&ft.log);

    for (name, model) in [("pre-trained", &pre.model), ("fine-tuned", ft.selected())] {
        let (r, _, _) = eval_retrieval(model, &corpus, &cfg.eval, cfg.objective.match_pool, cfg.seed)?;
        println!(
            "{name}: R@1/5/10 i2t {:.1}/{:.1}/{:.1} t2i {:.1}/{:.1}/{:.1} rsum {:.1} map {:.3} sts {:.3}",
            r.r1_i2t, r.r5_i2t, r.r10_i2t, r.r1_t2i, r.r5_t2i, r.r10_t2i, r.rsum, r.map_at_k, r.sts_mean
        );
    }
    println!("chance R@1 on {test} test images: {:.2}%", 100.0 / test as f64);
    Ok(())
}
