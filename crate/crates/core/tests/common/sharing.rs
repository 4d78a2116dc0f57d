//! Checks on the shared stack used by both modalities.

use cookie_kit::data::{CaptionTokens, SceneImage};
use cookie_kit::encoders::{CookieModel, EncoderConfig};
use cookie_kit::tensor::{ParamId, ParamStore, PoolStrategy, Tape, Tensor, Var};
use cookie_kit::train::{adamw_step, AdamWConfig, OptimState};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{random_image, small_model};

pub fn inputs() -> (Vec<SceneImage>, Vec<CaptionTokens>) {
    let images = (0..3).map(|s| random_image(8, 40 + s)).collect();
    let caps = vec![
        CaptionTokens::new(vec![4, 9, 6]),
        CaptionTokens::new(vec![7, 5]),
        CaptionTokens::new(vec![11, 10, 8, 4]),
    ];
    (images, caps)
}

pub fn image_loss(tape: &mut Tape<f64>, m: &CookieModel<f64>, images: &[&SceneImage]) -> Var {
    let i = m.encode_images(tape, images, PoolStrategy::Mean, None).unwrap();
    let sq = tape.mul(i, i).unwrap();
    tape.sum(sq).unwrap()
}

pub fn text_loss(tape: &mut Tape<f64>, m: &CookieModel<f64>, caps: &[&CaptionTokens]) -> Var {
    let t = m.encode_texts(tape, caps, PoolStrategy::Max, None).unwrap();
    let g = tape.gelu(t).unwrap();
    tape.sum(g).unwrap()
}

fn touched(m: &CookieModel<f64>, f: &dyn Fn(&mut Tape<f64>) -> Var) -> Vec<ParamId> {
    let mut tape = Tape::new();
    let l = f(&mut tape);
    let g = tape.backward(l, &m.store).unwrap();
    g.iter()
        .filter(|(_, t)| t.data().iter().any(|v| *v != 0.0))
        .map(|(id, _)| id)
        .collect()
}

/// Both paths read every shared tensor, and share nothing else.
pub fn check_shared_identity(seed: u64) -> Result<(), String> {
    let m = small_model(seed);
    let (images, caps) = inputs();
    let img: Vec<&SceneImage> = images.iter().collect();
    let cap: Vec<&CaptionTokens> = caps.iter().collect();
    let from_images = touched(&m, &|t| image_loss(t, &m, &img));
    let from_texts = touched(&m, &|t| text_loss(t, &m, &cap));
    let ws = m.params.ws_ids();
    // the key bias is inert under softmax, so no path produces a gradient for it
    for &id in ws.iter().filter(|&&id| !m.store.name(id).ends_with("attn.key.bias")) {
        if !from_images.contains(&id) || !from_texts.contains(&id) {
            return Err(format!("{} is not read by both paths", m.store.name(id)));
        }
    }
    if let Some(id) = from_images.iter().find(|id| from_texts.contains(id) && !ws.contains(id)) {
        return Err(format!("{} is shared outside the shared stack", m.store.name(*id)));
    }
    Ok(())
}

/// Permuting valid rows permutes the output bitwise; pooled outputs do not
/// move at all.
pub fn check_permutation_equivariance(seed: u64, cases: usize) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = CookieModel::<f32>::new(EncoderConfig::default(), seed).map_err(|e| e.to_string())?;
    let d = m.config.model_dim;
    for case in 0..cases {
        let len = rng.random_range(2..12);
        let x: Vec<Vec<f32>> = (0..len)
            .map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let mask: Vec<bool> = (0..len).map(|i| i == 0 || rng.random_bool(0.8)).collect();
        let mut perm: Vec<usize> = (0..len).collect();
        for k in (1..len).rev() {
            perm.swap(k, rng.random_range(0..=k));
        }
        let run = |order: &[usize]| {
            let data: Vec<f32> = order.iter().flat_map(|&r| x[r].iter().copied()).collect();
            let mk: Vec<bool> = order.iter().map(|&r| mask[r]).collect();
            let mut tape = Tape::new();
            let v = tape.constant(Tensor::new(vec![1, len, d], data).unwrap());
            let y = m.ws_encode(&mut tape, v, &mk, None).unwrap();
            let pm = m.pool(&mut tape, y, &mk, PoolStrategy::Mean).unwrap();
            let px = m.pool(&mut tape, y, &mk, PoolStrategy::Max).unwrap();
            let bits = |v: Var| tape.value(v).data().iter().map(|f| f.to_bits()).collect::<Vec<u32>>();
            (bits(y), bits(pm), bits(px))
        };
        let identity: Vec<usize> = (0..len).collect();
        let (base, mean, max) = run(&identity);
        let (moved, mean2, max2) = run(&perm);
        for (slot, &r) in perm.iter().enumerate() {
            if mask[r] && base[r * d..(r + 1) * d] != moved[slot * d..(slot + 1) * d] {
                return Err(format!("case {case}: row {r} changed under permutation"));
            }
        }
        if mean != mean2 || max != max2 {
            return Err(format!("case {case}: pooled output changed under permutation"));
        }
    }
    Ok(())
}

/// After an image-only update the text path reads the same new values:
/// swapping in just the updated shared stack reproduces the change.
pub fn check_post_step_identity(seed: u64) -> Result<(), String> {
    let mut m = small_model(seed);
    let (images, caps) = inputs();
    let img: Vec<&SceneImage> = images.iter().collect();
    let cap: Vec<&CaptionTokens> = caps.iter().collect();

    let mut tape = Tape::new();
    let l = image_loss(&mut tape, &m, &img);
    let grads = tape.backward(l, &m.store).unwrap();
    let mut state = OptimState::new(&m.store, AdamWConfig::default());
    let before = m.store.clone();
    adamw_step(&mut m.store, &grads, &mut state, 1e-2).map_err(|e| e.to_string())?;

    let ws = m.params.ws_ids();
    if ws.iter().all(|&id| m.store.get(id) == before.get(id)) {
        return Err("the image step left the shared stack unchanged".into());
    }
    let text_out = |store: &ParamStore<f64>| {
        let model = m.with_store(store.clone());
        let mut t = Tape::new();
        let v = model.encode_texts(&mut t, &cap, PoolStrategy::Max, None).unwrap();
        t.value(v).clone()
    };
    let mut only_ws = before.clone();
    for &id in &ws {
        only_ws.set(id, m.store.get(id).clone()).unwrap();
    }
    if text_out(&only_ws) == text_out(&before) {
        return Err("the text path did not see the updated shared stack".into());
    }
    for &id in &ws {
        only_ws.set(id, before.get(id).clone()).unwrap();
    }
    if text_out(&only_ws) != text_out(&before) {
        return Err("restoring the shared stack did not restore the text path".into());
    }
    Ok(())
}
