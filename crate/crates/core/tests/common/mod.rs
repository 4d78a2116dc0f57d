//! Shared fixtures for the integration tests.
#![allow(dead_code)]

pub mod oracles;
pub mod sharing;

use cookie_kit::augment::{TextAugConfig, VisualAugConfig};
use cookie_kit::data::{CaptionTokens, SceneImage};
use cookie_kit::encoders::{CookieModel, EncoderConfig};
use cookie_kit::objectives::{
    cross_modal_loss, hard_triplet_loss, info_nce, textual_contrastive_loss, visual_contrastive_loss, Augmenter,
};
use cookie_kit::tensor::{grad_check, ParamId, ParamStore, PoolStrategy, Tape, Tensor, Var};
use cookie_kit::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn small_encoder() -> EncoderConfig {
    EncoderConfig {
        image_size: 8,
        patch: 4,
        visual_dim: 6,
        text_dim: 6,
        model_dim: 8,
        heads: 2,
        text_heads: 2,
        ff_dim: 8,
        max_words: 5,
        vocab_size: 12,
        ..Default::default()
    }
}

pub fn random_image(side: usize, seed: u64) -> SceneImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    SceneImage::new(side, side, 3, (0..side * side * 3).map(|_| rng.random::<f32>()).collect()).unwrap()
}

pub fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Small model with every zero-initialized tensor given some signal.
pub fn small_model(seed: u64) -> CookieModel<f64> {
    let mut m = CookieModel::<f64>::new(small_encoder(), seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xABCD);
    for id in [m.params.patch_pos, m.params.visual_tag, m.params.text_tag] {
        let shape = m.store.get(id).shape().to_vec();
        m.store.set(id, random_tensor(&shape, &mut rng).map(|v| 0.3 * v)).unwrap();
    }
    m
}

/// One gradient-suite outcome.
pub struct GradCase {
    pub name: String,
    pub max_rel: f64,
    pub tol: f64,
}

impl GradCase {
    pub fn passed(&self) -> bool {
        self.max_rel < self.tol
    }
}

const LINEAR: f64 = 1e-6;
const SMOOTH: f64 = 1e-4;
const H: f64 = 1e-5;

/// Registers random inputs, then checks `sum(op(inputs) * W)` for a fixed
/// random weighting `W`, so no coordinate of the output is privileged.
fn op_case(
    name: &str,
    shapes: &[&[usize]],
    tol: f64,
    seed: u64,
    op: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
) -> GradCase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let ids: Vec<ParamId> = shapes
        .iter()
        .enumerate()
        .map(|(i, s)| store.register(format!("x{i}"), random_tensor(s, &mut rng)).unwrap())
        .collect();
    let mut probe = Tape::new();
    let vars: Vec<Var> = ids.iter().map(|&id| probe.param(&store, id)).collect();
    let out = op(&mut probe, &vars).unwrap();
    let out_shape = probe.shape(out).to_vec();
    let weight = random_tensor(&out_shape, &mut rng);
    let report = grad_check(&mut store, &ids, H, 40, seed, |tape, store| {
        let vars: Vec<Var> = ids.iter().map(|&id| tape.param(store, id)).collect();
        let y = op(tape, &vars)?;
        let w = tape.constant(weight.clone());
        let p = tape.mul(y, w)?;
        tape.sum(p)
    })
    .unwrap();
    GradCase {
        name: name.to_string(),
        max_rel: report.max_rel_error,
        tol,
    }
}

fn model_case(
    name: &str,
    model: &CookieModel<f64>,
    ids: Vec<ParamId>,
    coords: usize,
    build: impl Fn(&mut Tape<f64>, &CookieModel<f64>) -> Result<Var>,
) -> GradCase {
    // a key bias shifts every score of a query equally, so softmax ignores
    // it; its gradient must be zero and is not a finite-difference target
    let (key_bias, ids): (Vec<ParamId>, Vec<ParamId>) =
        ids.into_iter().partition(|&id| model.store.name(id).ends_with("attn.key.bias"));
    let mut tape = Tape::new();
    let loss = build(&mut tape, model).unwrap();
    let grads = tape.backward(loss, &model.store).unwrap();
    let inert = key_bias
        .iter()
        .all(|&id| grads.get(id).data().iter().all(|g| g.abs() < 1e-12));
    let mut store = model.store.clone();
    let report = grad_check(&mut store, &ids, H, coords, 3, |tape, store| {
        build(tape, &model.with_store(store.clone()))
    })
    .unwrap();
    GradCase {
        name: name.to_string(),
        max_rel: if inert { report.max_rel_error } else { f64::INFINITY },
        tol: SMOOTH,
    }
}

/// Finite-difference verification of every differentiable operation, the
/// encoder components and all losses, at 64-bit precision.
pub fn gradient_suite() -> Vec<GradCase> {
    let mut out = vec![
        op_case("matmul", &[&[3, 4], &[4, 5]], LINEAR, 1, |t, v| t.matmul(v[0], v[1])),
        op_case("batched matmul", &[&[2, 3, 4], &[4, 2]], LINEAR, 2, |t, v| t.matmul(v[0], v[1])),
        op_case("add (broadcast)", &[&[2, 3, 4], &[4]], LINEAR, 3, |t, v| t.add(v[0], v[1])),
        op_case("sub", &[&[3, 4], &[3, 4]], LINEAR, 4, |t, v| t.sub(v[0], v[1])),
        op_case("mul (broadcast)", &[&[2, 3], &[3]], LINEAR, 5, |t, v| t.mul(v[0], v[1])),
        op_case("scale", &[&[3, 3]], LINEAR, 6, |t, v| t.scale(v[0], 2.5)),
        op_case("add_scalar", &[&[3, 3]], LINEAR, 7, |t, v| t.add_scalar(v[0], -0.7)),
        op_case("transpose", &[&[2, 3, 4]], LINEAR, 8, |t, v| t.transpose(v[0])),
        op_case("reshape", &[&[2, 6]], LINEAR, 9, |t, v| t.reshape(v[0], &[3, 4])),
        op_case("sum", &[&[3, 4]], LINEAR, 10, |t, v| t.sum(v[0])),
        op_case("mean", &[&[3, 4]], LINEAR, 11, |t, v| t.mean(v[0])),
        op_case("diagonal", &[&[4, 4]], LINEAR, 12, |t, v| t.diagonal(v[0])),
        op_case("embedding", &[&[5, 3]], LINEAR, 13, |t, v| t.embedding(v[0], &[4, 0, 4, 2], &[2, 2])),
        op_case("concat_tokens", &[&[2, 3, 4], &[2, 2, 4]], LINEAR, 14, |t, v| {
            t.concat_tokens(v[0], v[1])
        }),
        op_case("mean pool", &[&[2, 4, 3]], LINEAR, 15, |t, v| {
            t.pool(v[0], &[true, true, false, true, true, false, false, false], PoolStrategy::Mean)
        }),
        op_case("dropout", &[&[4, 5]], LINEAR, 16, |t, v| {
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            t.dropout(v[0], 0.3, &mut rng)
        }),
        op_case("softmax", &[&[3, 5]], SMOOTH, 17, |t, v| t.softmax(v[0], 1)),
        op_case("softmax axis 0", &[&[3, 5]], SMOOTH, 18, |t, v| t.softmax(v[0], 0)),
        op_case("log_softmax", &[&[3, 5]], SMOOTH, 19, |t, v| t.log_softmax(v[0], 1)),
        op_case("layer_norm", &[&[3, 6], &[6], &[6]], SMOOTH, 20, |t, v| t.layer_norm(v[0], v[1], v[2], 1e-5)),
        op_case("gelu", &[&[4, 5]], SMOOTH, 21, |t, v| t.gelu(v[0])),
        op_case("relu", &[&[4, 5]], SMOOTH, 22, |t, v| t.relu(v[0])),
        op_case("attention", &[&[2, 4, 6], &[2, 4, 6], &[2, 4, 6]], SMOOTH, 23, |t, v| {
            t.attention(v[0], v[1], v[2], 2, &[true, true, true, false, true, false, true, true])
        }),
        op_case("max pool", &[&[2, 4, 3]], SMOOTH, 24, |t, v| {
            t.pool(v[0], &[true, true, false, true, true, false, true, false], PoolStrategy::Max)
        }),
        op_case("l2_normalize", &[&[3, 4]], SMOOTH, 25, |t, v| t.l2_normalize(v[0])),
        op_case("hardest_negative rows", &[&[4, 4]], SMOOTH, 26, |t, v| t.hardest_negative(v[0], 1)),
        op_case("hardest_negative cols", &[&[4, 4]], SMOOTH, 27, |t, v| t.hardest_negative(v[0], 0)),
        op_case("info_nce", &[&[4, 6], &[4, 6]], SMOOTH, 28, |t, v| info_nce(t, v[0], v[1], 0.07)),
        op_case("ccl i2t", &[&[4, 6], &[4, 6]], SMOOTH, 29, |t, v| {
            Ok(cross_modal_loss(t, v[0], v[1], 0.07)?.i2t)
        }),
        op_case("ccl t2i", &[&[4, 6], &[4, 6]], SMOOTH, 30, |t, v| {
            Ok(cross_modal_loss(t, v[0], v[1], 0.07)?.t2i)
        }),
        op_case("hard triplet", &[&[5, 6], &[5, 6]], SMOOTH, 31, |t, v| hard_triplet_loss(t, v[0], v[1], 0.5)),
    ];

    let m = small_model(5);
    let images = [random_image(8, 1), random_image(8, 2), random_image(8, 3)];
    let caps = [
        CaptionTokens::new(vec![4, 7, 9]),
        CaptionTokens::new(vec![5, 11, 6, 8]),
        CaptionTokens::new(vec![10, 4]),
    ];
    let img_refs: Vec<&SceneImage> = images.iter().collect();
    let cap_refs: Vec<&CaptionTokens> = caps.iter().collect();
    let joint = |tape: &mut Tape<f64>, model: &CookieModel<f64>| {
        let i = model.encode_images(tape, &img_refs, PoolStrategy::Mean, None)?;
        let t = model.encode_texts(tape, &cap_refs, PoolStrategy::Max, None)?;
        let prod = tape.mul(i, t)?;
        let s = tape.sum(prod)?;
        let sq = tape.mul(i, i)?;
        let q = tape.sum(sq)?;
        tape.add(s, q)
    };
    out.push(model_case("visual backbone", &m, m.params.visual_backbone_ids(), 6, joint));
    out.push(model_case("text backbone", &m, m.params.text_backbone_ids(), 6, joint));
    let mut proj = m.params.visual_projection_ids();
    proj.extend(m.params.text_projection_ids());
    out.push(model_case("projections", &m, proj, 6, joint));
    out.push(model_case("TAV encoder", &m, m.params.tav_ids(), 6, joint));
    out.push(model_case("WS encoder", &m, m.params.ws_ids(), 6, joint));

    let augmenter = Augmenter::new(
        VisualAugConfig {
            output_size: 8,
            ..Default::default()
        },
        TextAugConfig {
            vocab_size: 12,
            ..Default::default()
        },
    );
    let ids = [11u64, 12, 13];
    let all: Vec<ParamId> = m.store.ids().collect();
    out.push(model_case("visual contrastive loss", &m, all.clone(), 3, |tape, model| {
        visual_contrastive_loss(tape, model, &img_refs, &ids, &augmenter, 7, PoolStrategy::Mean, 0.07, None)
    }));
    out.push(model_case("textual contrastive loss", &m, all.clone(), 3, |tape, model| {
        textual_contrastive_loss(tape, model, &cap_refs, &ids, &augmenter, 7, PoolStrategy::Mean, 0.07, None)
    }));
    out.push(model_case("cross-modal loss (model)", &m, all, 3, |tape, model| {
        let i = model.encode_images(tape, &img_refs, PoolStrategy::Max, None)?;
        let t = model.encode_texts(tape, &cap_refs, PoolStrategy::Max, None)?;
        Ok(cross_modal_loss(tape, i, t, 0.07)?.sum)
    }));
    out
}
