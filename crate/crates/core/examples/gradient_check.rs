//! Finite-difference check of the full image-text objective on a tiny model.

use cookie_kit::data::{CaptionTokens, SceneImage};
use cookie_kit::encoders::{CookieModel, EncoderConfig};
use cookie_kit::objectives::cross_modal_loss;
use cookie_kit::tensor::{grad_check, ParamId, PoolStrategy};

fn main() -> cookie_kit::Result<()> {
    let config = EncoderConfig {
        image_size: 8,
        patch: 4,
        visual_dim: 8,
        text_dim: 8,
        model_dim: 8,
        heads: 2,
        text_heads: 2,
        ff_dim: 8,
        max_words: 6,
        vocab_size: 16,
        ..Default::default()
    };
    let model = CookieModel::<f64>::new(config, 3)?;
    let images: Vec<SceneImage> = (0..3)
        .map(|k| SceneImage::new(8, 8, 3, (0..192).map(|i| ((i * (k + 3)) % 17) as f32 / 17.0).collect()))
        .collect::<cookie_kit::Result<_>>()?;
    let caps = [
        CaptionTokens::new(vec![3, 7, 9]),
        CaptionTokens::new(vec![4, 4, 12, 5]),
        CaptionTokens::new(vec![15, 2]),
    ];
    let img: Vec<&SceneImage> = images.iter().collect();
    let cap: Vec<&CaptionTokens> = caps.iter().collect();

    // the attention key bias cannot move a softmax, so it is left out
    let ids: Vec<ParamId> = model
        .store
        .ids()
        .filter(|&id| !model.store.name(id).ends_with("attn.key.bias"))
        .collect();
    let mut store = model.store.clone();
    let report = grad_check(&mut store, &ids, 1e-5, 4, 1, |tape, store| {
        let m = model.with_store(store.clone());
        let i = m.encode_images(tape, &img, PoolStrategy::Max, None)?;
        let t = m.encode_texts(tape, &cap, PoolStrategy::Max, None)?;
        Ok(cross_modal_loss(tape, i, t, 0.07)?.sum)
    })?;
    println!(
        "{} coordinates over {} tensors, max relative error {:.2e} at {}[{}]",
        report.coords_checked,
        ids.len(),
        report.max_rel_error,
        report.worst_param,
        report.worst_index
    );
    Ok(())
}
