//! Contrastive and triplet objectives.

use std::sync::atomic::{AtomicU64, Ordering};

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{augment_image, augment_text, TextAugConfig, VisualAugConfig};
use crate::data::{Batch, CaptionTokens, SceneImage};
use crate::encoders::CookieModel;
use crate::error::{contract_err, dim_err, Result};
use crate::seed;
use crate::tensor::{PoolStrategy, Real, Tape, Tensor, Var};

pub const DEFAULT_TAU: f64 = 0.07;
pub const DEFAULT_MARGIN: f64 = 0.2;

/// Matched query/key rows for one InfoNCE evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct ContrastiveBatch<T> {
    pub queries: Tensor<T>,
    pub keys: Tensor<T>,
    pub tau: f64,
}

impl<T: Real> ContrastiveBatch<T> {
    pub fn new(queries: Tensor<T>, keys: Tensor<T>, tau: f64) -> Result<Self> {
        check_pair(queries.shape(), keys.shape(), tau)?;
        if !queries.all_finite() || !keys.all_finite() {
            return Err(contract_err!("contrastive batch holds non-finite values"));
        }
        Ok(Self { queries, keys, tau })
    }

    /// Loss value without keeping the graph.
    pub fn loss(&self) -> Result<T> {
        let mut tape = Tape::new();
        let q = tape.constant(self.queries.clone());
        let k = tape.constant(self.keys.clone());
        let l = info_nce(&mut tape, q, k, self.tau)?;
        Ok(tape.value(l).item())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TripletConfig {
    pub alpha: f64,
}

impl Default for TripletConfig {
    fn default() -> Self {
        Self { alpha: DEFAULT_MARGIN }
    }
}

fn check_pair(q: &[usize], k: &[usize], tau: f64) -> Result<()> {
    if q.len() != 2 || q != k {
        return Err(dim_err!("contrastive sides must be equal [N, D] matrices, got {q:?} and {k:?}"));
    }
    if q[0] < 2 {
        return Err(contract_err!("contrastive batch needs N >= 2, got {}", q[0]));
    }
    if !(tau > 0.0) {
        return Err(contract_err!("temperature must be positive, got {tau}"));
    }
    Ok(())
}

/// Cosine logits `norm(a) norm(b)^T`, `[N, N]`.
pub fn cosine_matrix<T: Real>(tape: &mut Tape<T>, a: Var, b: Var) -> Result<Var> {
    let an = tape.l2_normalize(a)?;
    let bn = tape.l2_normalize(b)?;
    let bt = tape.transpose(bn)?;
    tape.matmul(an, bt)
}

/// `-(1/N) sum_i log softmax_j(q_i . k_j / tau)[i]` over L2-normalized rows.
pub fn info_nce<T: Real>(tape: &mut Tape<T>, q: Var, k: Var, tau: f64) -> Result<Var> {
    check_pair(tape.shape(q), tape.shape(k), tau)?;
    let sim = cosine_matrix(tape, q, k)?;
    let logits = tape.scale(sim, T::lit(1.0 / tau))?;
    let ls = tape.log_softmax(logits, 1)?;
    let diag = tape.diagonal(ls)?;
    let m = tape.mean(diag)?;
    tape.scale(m, T::lit(-1.0))
}

#[derive(Clone, Copy, Debug)]
pub struct CrossModal {
    pub i2t: Var,
    pub t2i: Var,
    pub sum: Var,
}

/// Image-to-text and text-to-image InfoNCE on aligned rows.
pub fn cross_modal_loss<T: Real>(tape: &mut Tape<T>, images: Var, texts: Var, tau: f64) -> Result<CrossModal> {
    let (si, st) = (tape.shape(images).to_vec(), tape.shape(texts).to_vec());
    if si.first() != st.first() {
        return Err(contract_err!("{} image rows but {} text rows", si[0], st[0]));
    }
    let i2t = info_nce(tape, images, texts, tau)?;
    let t2i = info_nce(tape, texts, images, tau)?;
    let sum = tape.add(i2t, t2i)?;
    Ok(CrossModal { i2t, t2i, sum })
}

/// Hinged triplet loss over hardest in-batch negatives, from a square
/// similarity matrix whose diagonal holds the positives. Mean over anchors.
pub fn hard_triplet_from_similarity<T: Real>(tape: &mut Tape<T>, sim: Var, alpha: f64) -> Result<Var> {
    if !(alpha >= 0.0) {
        return Err(contract_err!("triplet margin must be non-negative, got {alpha}"));
    }
    let pos = tape.diagonal(sim)?;
    // row i: hardest text for image i; column i: hardest image for text i
    let neg_text = tape.hardest_negative(sim, 1)?;
    let neg_image = tape.hardest_negative(sim, 0)?;
    let hinge = |tape: &mut Tape<T>, neg: Var| -> Result<Var> {
        let d = tape.sub(neg, pos)?;
        let d = tape.add_scalar(d, T::lit(alpha))?;
        tape.relu(d)
    };
    let a = hinge(tape, neg_image)?;
    let b = hinge(tape, neg_text)?;
    let per_pair = tape.add(a, b)?;
    tape.mean(per_pair)
}

/// Cosine-similarity hard triplet loss on aligned image/text embeddings.
pub fn hard_triplet_loss<T: Real>(tape: &mut Tape<T>, images: Var, texts: Var, alpha: f64) -> Result<Var> {
    check_pair(tape.shape(images), tape.shape(texts), 1.0)?;
    let sim = cosine_matrix(tape, images, texts)?;
    hard_triplet_from_similarity(tape, sim, alpha)
}

/// Augmentation pipelines plus a call counter.
#[derive(Debug, Default)]
pub struct Augmenter {
    pub visual: VisualAugConfig,
    pub text: TextAugConfig,
    calls: AtomicU64,
}

impl Augmenter {
    pub fn new(visual: VisualAugConfig, text: TextAugConfig) -> Self {
        Self {
            visual,
            text,
            calls: AtomicU64::new(0),
        }
    }

    /// Augmentations performed so far.
    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }

    pub fn image(&self, image: &SceneImage, seed: u64) -> SceneImage {
        self.calls.fetch_add(1, Ordering::Relaxed);
        augment_image(image, &self.visual, seed).0
    }

    pub fn caption(&self, tokens: &CaptionTokens, seed: u64) -> Result<CaptionTokens> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        Ok(augment_text(tokens, &self.text, seed)?.0)
    }
}

/// Seed of view `view` of sample `id`.
pub fn view_seed(seed: u64, id: u64, view: u64) -> u64 {
    seed::derive(&[seed, id, view])
}

/// InfoNCE between two independently augmented views of each image.
#[allow(clippy::too_many_arguments)]
pub fn visual_contrastive_loss<T: Real>(
    tape: &mut Tape<T>,
    model: &CookieModel<T>,
    images: &[&SceneImage],
    ids: &[u64],
    augmenter: &Augmenter,
    seed: u64,
    strategy: PoolStrategy,
    tau: f64,
    mut dropout: Option<&mut ChaCha8Rng>,
) -> Result<Var> {
    if images.len() != ids.len() {
        return Err(dim_err!("{} images but {} ids", images.len(), ids.len()));
    }
    let mut views = Vec::with_capacity(2);
    for view in [1, 2] {
        let aug: Vec<SceneImage> = images
            .iter()
            .zip(ids)
            .map(|(img, &id)| augmenter.image(img, view_seed(seed, id, view)))
            .collect();
        let refs: Vec<&SceneImage> = aug.iter().collect();
        views.push(model.encode_images(tape, &refs, strategy, dropout.as_deref_mut())?);
    }
    info_nce(tape, views[0], views[1], tau)
}

/// InfoNCE between two independently augmented views of each caption.
#[allow(clippy::too_many_arguments)]
pub fn textual_contrastive_loss<T: Real>(
    tape: &mut Tape<T>,
    model: &CookieModel<T>,
    captions: &[&CaptionTokens],
    ids: &[u64],
    augmenter: &Augmenter,
    seed: u64,
    strategy: PoolStrategy,
    tau: f64,
    mut dropout: Option<&mut ChaCha8Rng>,
) -> Result<Var> {
    if captions.len() != ids.len() {
        return Err(dim_err!("{} captions but {} ids", captions.len(), ids.len()));
    }
    let mut views = Vec::with_capacity(2);
    for view in [3, 4] {
        let aug = captions
            .iter()
            .zip(ids)
            .map(|(c, &id)| augmenter.caption(c, view_seed(seed, id, view)))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&CaptionTokens> = aug.iter().collect();
        views.push(model.encode_texts(tape, &refs, strategy, dropout.as_deref_mut())?);
    }
    info_nce(tape, views[0], views[1], tau)
}

/// Objective hyperparameters shared by the pre-training stages.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObjectiveConfig {
    pub tau: f64,
    pub alpha: f64,
    /// Pooling used while pre-training.
    pub pretrain_pool: PoolStrategy,
    /// Pooling used for triplet fine-tuning and matching evaluation.
    pub match_pool: PoolStrategy,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            tau: DEFAULT_TAU,
            alpha: DEFAULT_MARGIN,
            pretrain_pool: PoolStrategy::Max,
            match_pool: PoolStrategy::Max,
        }
    }
}

impl ObjectiveConfig {
    pub fn problems(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            out.push(("objective.tau".into(), format!("{} is not a positive temperature", self.tau)));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            out.push(("objective.alpha".into(), format!("{} is not a non-negative margin", self.alpha)));
        }
        out
    }
}

/// Recorded loss nodes of one pre-training step.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub i2t: Var,
    pub t2i: Var,
    pub visual: Option<Var>,
    pub textual: Option<Var>,
    pub total: Var,
}

impl LossTerms {
    /// `(i2t, t2i, visual, textual, total)` as plain numbers.
    pub fn values<T: Real>(&self, tape: &Tape<T>) -> [f64; 5] {
        let v = |x: Var| tape.value(x).item().as_f64();
        [
            v(self.i2t),
            v(self.t2i),
            self.visual.map_or(0.0, v),
            self.textual.map_or(0.0, v),
            v(self.total),
        ]
    }
}

/// Stage 1: cross-modal terms only. Stage 2 adds the visual and textual
/// contrastive terms with unit weights. `within` supplies the batch for the
/// within-modal terms (normally the same batch).
#[allow(clippy::too_many_arguments)]
pub fn pretrain_loss<T: Real>(
    tape: &mut Tape<T>,
    model: &CookieModel<T>,
    batch: &Batch<'_>,
    within: &Batch<'_>,
    stage: u8,
    config: &ObjectiveConfig,
    augmenter: &Augmenter,
    seed: u64,
    mut dropout: Option<&mut ChaCha8Rng>,
) -> Result<LossTerms> {
    if stage != 1 && stage != 2 {
        return Err(contract_err!("pre-training stage must be 1 or 2, got {stage}"));
    }
    let pool = config.pretrain_pool;
    let i = model.encode_images(tape, &batch.images, pool, dropout.as_deref_mut())?;
    let t = model.encode_texts(tape, &batch.captions, pool, dropout.as_deref_mut())?;
    let cm = cross_modal_loss(tape, i, t, config.tau)?;
    if stage == 1 {
        return Ok(LossTerms {
            i2t: cm.i2t,
            t2i: cm.t2i,
            visual: None,
            textual: None,
            total: cm.sum,
        });
    }
    let lv = visual_contrastive_loss(
        tape,
        model,
        &within.images,
        &within.ids,
        augmenter,
        seed,
        pool,
        config.tau,
        dropout.as_deref_mut(),
    )?;
    let lt = textual_contrastive_loss(
        tape,
        model,
        &within.captions,
        &within.ids,
        augmenter,
        seed,
        pool,
        config.tau,
        dropout,
    )?;
    let total = tape.add(cm.sum, lv)?;
    let total = tape.add(total, lt)?;
    Ok(LossTerms {
        i2t: cm.i2t,
        t2i: cm.t2i,
        visual: Some(lv),
        textual: Some(lt),
        total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;
    use crate::tensor::ParamStore;
    use rand::Rng;

    fn rand_matrix(n: usize, d: usize, s: u64) -> Tensor<f64> {
        let mut rng = seed::rng(&[s]);
        Tensor::from_fn(&[n, d], |_| rng.random_range(-1.0..1.0))
    }

    /// Direct evaluation of the InfoNCE formula.
    fn oracle(q: &Tensor<f64>, k: &Tensor<f64>, tau: f64) -> f64 {
        let n = q.rows();
        let norm = |r: &[f64]| r.iter().map(|x| x * x).sum::<f64>().sqrt();
        let cos = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (norm(a) * norm(b));
        let mut total = 0.0;
        for i in 0..n {
            let denom: f64 = (0..n).map(|j| (cos(q.row(i), k.row(j)) / tau).exp()).sum();
            total -= ((cos(q.row(i), k.row(i)) / tau).exp() / denom).ln();
        }
        total / n as f64
    }

    #[test]
    fn uniform_logits_give_ln_n() {
        for n in [2usize, 4, 8, 32] {
            // identical rows make every cosine equal to 1
            let q = Tensor::<f64>::full(&[n, 5], 0.3);
            let b = ContrastiveBatch::new(q.clone(), q, DEFAULT_TAU).unwrap();
            assert!((b.loss().unwrap() - (n as f64).ln()).abs() < 1e-9);
        }
    }

    #[test]
    fn matches_direct_formula_and_gradients() {
        let (q, k) = (rand_matrix(8, 16, 1), rand_matrix(8, 16, 2));
        let b = ContrastiveBatch::new(q.clone(), k.clone(), 0.5).unwrap();
        assert!((b.loss().unwrap() - oracle(&q, &k, 0.5)).abs() < 1e-9);

        let mut store = ParamStore::new();
        let qi = store.register("q", q).unwrap();
        let ki = store.register("k", k).unwrap();
        let r = grad_check(&mut store, &[qi, ki], 1e-5, 64, 3, |tape, s| {
            let q = tape.param(s, qi);
            let k = tape.param(s, ki);
            info_nce(tape, q, k, 0.5)
        })
        .unwrap();
        assert!(r.max_rel_error < 1e-5, "{r:?}");
    }

    #[test]
    fn rejects_bad_batches() {
        let one = rand_matrix(1, 4, 0);
        assert!(ContrastiveBatch::new(one.clone(), one, 0.1).is_err());
        let q = rand_matrix(3, 4, 0);
        assert!(ContrastiveBatch::new(q.clone(), q.clone(), 0.0).is_err());
        assert!(ContrastiveBatch::new(q.clone(), q, -1.0).is_err());
    }

    #[test]
    fn sharp_positive_gives_near_zero_loss() {
        let mut q = Tensor::<f64>::zeros(&[4, 4]);
        for i in 0..4 {
            q.data_mut()[i * 4 + i] = 1.0;
        }
        let b = ContrastiveBatch::new(q.clone(), q, 0.01).unwrap();
        assert!(b.loss().unwrap() < 1e-30);
    }

    #[test]
    fn cross_modal_is_asymmetric_and_matches_oracle() {
        let (i, t) = (rand_matrix(6, 5, 8), rand_matrix(6, 5, 9));
        let mut tape = Tape::new();
        let (iv, tv) = (tape.constant(i.clone()), tape.constant(t.clone()));
        let cm = cross_modal_loss(&mut tape, iv, tv, 0.2).unwrap();
        let (a, b) = (tape.value(cm.i2t).item(), tape.value(cm.t2i).item());
        assert!((a - oracle(&i, &t, 0.2)).abs() < 1e-9);
        assert!((b - oracle(&t, &i, 0.2)).abs() < 1e-9);
        assert!((a - b).abs() > 1e-6);
        assert_eq!(tape.value(cm.sum).item(), a + b);
        let short = tape.constant(rand_matrix(5, 5, 1));
        assert!(cross_modal_loss(&mut tape, iv, short, 0.2).is_err());
    }

    fn triplet_value(sim: Vec<Vec<f64>>, alpha: f64) -> f64 {
        let mut tape = Tape::new();
        let s = tape.constant(Tensor::from_rows(&sim).unwrap());
        let l = hard_triplet_from_similarity(&mut tape, s, alpha).unwrap();
        tape.value(l).item()
    }

    #[test]
    fn triplet_closed_forms() {
        // anchor 0: positive 0.9, hardest negative image 0.5, text 0.6
        let sat = vec![vec![0.9, 0.6], vec![0.5, 0.95]];
        // anchor 0 contributes 0; anchor 1: neg image 0.6 and text 0.5 vs 0.95
        assert_eq!(triplet_value(sat, 0.2), 0.0);
        // both anchors: positive 0.5, hardest negatives 0.6 and 0.4
        let hit = vec![vec![0.5, 0.4], vec![0.6, 0.5]];
        assert!((triplet_value(hit, 0.2) - 0.4).abs() < 1e-12);
    }
}
