//! Seeded image and caption augmentations for the within-modal contrastive
//! objectives.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{CaptionTokens, SceneImage, MASK, NUM_SPECIAL};
use crate::error::{contract_err, Result};
use crate::seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VisualAugConfig {
    /// Range of the independent height and width crop factors.
    pub crop_scale: (f64, f64),
    pub flip_prob: f64,
    pub noise_prob: f64,
    pub noise_std: f64,
    pub jitter_prob: f64,
    pub jitter_gain: (f64, f64),
    pub jitter_bias: (f64, f64),
    pub gray_prob: f64,
    /// Square output side after the final resize.
    pub output_size: usize,
}

impl Default for VisualAugConfig {
    fn default() -> Self {
        Self {
            crop_scale: (0.6, 1.0),
            flip_prob: 0.5,
            noise_prob: 0.5,
            noise_std: 0.05,
            jitter_prob: 0.8,
            jitter_gain: (0.6, 1.4),
            jitter_bias: (-0.2, 0.2),
            gray_prob: 0.2,
            output_size: 32,
        }
    }
}

impl VisualAugConfig {
    /// No-op pipeline: full crop and every probability zero.
    pub fn identity(output_size: usize) -> Self {
        Self {
            crop_scale: (1.0, 1.0),
            flip_prob: 0.0,
            noise_prob: 0.0,
            jitter_prob: 0.0,
            gray_prob: 0.0,
            output_size,
            ..Self::default()
        }
    }

    pub fn problems(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        for (f, p) in [
            ("flip_prob", self.flip_prob),
            ("noise_prob", self.noise_prob),
            ("jitter_prob", self.jitter_prob),
            ("gray_prob", self.gray_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                out.push((format!("augment.visual.{f}"), format!("{p} is not a probability")));
            }
        }
        let (lo, hi) = self.crop_scale;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            out.push(("augment.visual.crop_scale".into(), format!("({lo}, {hi}) is not inside (0, 1]")));
        }
        if !(self.noise_std >= 0.0) {
            out.push(("augment.visual.noise_std".into(), "must be non-negative".into()));
        }
        if !(self.jitter_gain.0 <= self.jitter_gain.1 && self.jitter_bias.0 <= self.jitter_bias.1) {
            out.push(("augment.visual.jitter".into(), "ranges must be ordered".into()));
        }
        if self.output_size == 0 {
            out.push(("augment.visual.output_size".into(), "must be positive".into()));
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TextAugConfig {
    pub token_prob: f64,
    pub mask_frac: f64,
    pub replace_frac: f64,
    pub delete_frac: f64,
    pub mask_token: u32,
    pub vocab_size: usize,
}

impl Default for TextAugConfig {
    fn default() -> Self {
        Self {
            token_prob: 0.2,
            mask_frac: 0.5,
            replace_frac: 0.1,
            delete_frac: 0.4,
            mask_token: MASK,
            vocab_size: crate::data::Vocabulary::standard().len(),
        }
    }
}

impl TextAugConfig {
    pub fn identity() -> Self {
        Self {
            token_prob: 0.0,
            ..Self::default()
        }
    }

    pub fn problems(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        for (f, p) in [
            ("token_prob", self.token_prob),
            ("mask_frac", self.mask_frac),
            ("replace_frac", self.replace_frac),
            ("delete_frac", self.delete_frac),
        ] {
            if !(0.0..=1.0).contains(&p) {
                out.push((format!("augment.text.{f}"), format!("{p} is not a probability")));
            }
        }
        let total = self.mask_frac + self.replace_frac + self.delete_frac;
        if (total - 1.0).abs() > 1e-9 {
            out.push(("augment.text.fractions".into(), format!("mask + replace + delete = {total}, not 1")));
        }
        if self.vocab_size <= NUM_SPECIAL as usize {
            out.push(("augment.text.vocab_size".into(), "no ordinary words to substitute".into()));
        }
        out
    }
}

/// What one call to [`augment_image`] did.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTrace {
    /// `(top, left, height, width)` of the crop window.
    pub crop: (usize, usize, usize, usize),
    pub flipped: bool,
    pub noised: bool,
    pub jittered: bool,
    pub gray: bool,
}

/// Crop, flip, noise, jitter and gray-scale in that order, then a bilinear
/// resize to the output size. Values are clamped to `[0, 1]`.
pub fn augment_image(image: &SceneImage, config: &VisualAugConfig, seed: u64) -> (SceneImage, ImageTrace) {
    let mut rng = seed::rng(&[seed, 0x1AA6E]);
    let (h, w, ch) = (image.height(), image.width(), image.channels());

    let (lo, hi) = config.crop_scale;
    let factor = |r: &mut rand_chacha::ChaCha8Rng| if lo < hi { r.random_range(lo..=hi) } else { lo };
    let s1 = factor(&mut rng);
    let s2 = factor(&mut rng);
    let ch_h = ((s1 * h as f64).round() as usize).clamp(1, h);
    let ch_w = ((s2 * w as f64).round() as usize).clamp(1, w);
    let top = rng.random_range(0..=h - ch_h);
    let left = rng.random_range(0..=w - ch_w);
    let mut img = SceneImage::zeros(ch_h, ch_w, ch);
    for y in 0..ch_h {
        for x in 0..ch_w {
            for c in 0..ch {
                img.set(y, x, c, image.get(top + y, left + x, c));
            }
        }
    }

    let flipped = rng.random_bool(config.flip_prob);
    if flipped {
        for y in 0..ch_h {
            for x in 0..ch_w / 2 {
                for c in 0..ch {
                    let (a, b) = (img.get(y, x, c), img.get(y, ch_w - 1 - x, c));
                    img.set(y, x, c, b);
                    img.set(y, ch_w - 1 - x, c, a);
                }
            }
        }
    }

    let noised = rng.random_bool(config.noise_prob);
    if noised {
        let normal = Normal::new(0.0f32, config.noise_std as f32).expect("validated std");
        for v in img.data_mut() {
            *v += normal.sample(&mut rng);
        }
    }

    let jittered = rng.random_bool(config.jitter_prob);
    if jittered {
        let draw = |r: &mut rand_chacha::ChaCha8Rng, (a, b): (f64, f64)| if a < b { r.random_range(a..=b) } else { a };
        let params: Vec<(f32, f32)> = (0..ch)
            .map(|_| (draw(&mut rng, config.jitter_gain) as f32, draw(&mut rng, config.jitter_bias) as f32))
            .collect();
        for (i, v) in img.data_mut().iter_mut().enumerate() {
            let (g, b) = params[i % ch];
            *v = *v * g + b;
        }
    }

    let gray = rng.random_bool(config.gray_prob);
    if gray && ch == 3 {
        for px in img.data_mut().chunks_mut(3) {
            let l = 0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2];
            px.fill(l);
        }
    }

    let mut out = resize_bilinear(&img, config.output_size, config.output_size);
    for v in out.data_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    (
        out,
        ImageTrace {
            crop: (top, left, ch_h, ch_w),
            flipped,
            noised,
            jittered,
            gray,
        },
    )
}

/// Half-pixel-centred bilinear resampling. Same-size input is copied exactly.
pub fn resize_bilinear(image: &SceneImage, out_h: usize, out_w: usize) -> SceneImage {
    let (h, w, ch) = (image.height(), image.width(), image.channels());
    if (h, w) == (out_h, out_w) {
        return image.clone();
    }
    let axis = |o: usize, n_in: usize, n_out: usize| {
        let src = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
        let i0 = src.floor() as usize;
        let i1 = (i0 + 1).min(n_in - 1);
        (i0, i1, (src - i0 as f64) as f32)
    };
    let mut out = SceneImage::zeros(out_h, out_w, ch);
    for y in 0..out_h {
        let (y0, y1, fy) = axis(y, h, out_h);
        for x in 0..out_w {
            let (x0, x1, fx) = axis(x, w, out_w);
            for c in 0..ch {
                let top = image.get(y0, x0, c) * (1.0 - fx) + image.get(y0, x1, c) * fx;
                let bot = image.get(y1, x0, c) * (1.0 - fx) + image.get(y1, x1, c) * fx;
                out.set(y, x, c, top * (1.0 - fy) + bot * fy);
            }
        }
    }
    out
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct TextTrace {
    pub masked: usize,
    pub replaced: usize,
    pub deleted: usize,
}

/// Independently selects each token with `token_prob`, then masks, replaces
/// with a random ordinary word, or deletes it. Order is preserved and at
/// least one token survives.
pub fn augment_text(tokens: &CaptionTokens, config: &TextAugConfig, seed: u64) -> Result<(CaptionTokens, TextTrace)> {
    if tokens.is_empty() {
        return Err(contract_err!("cannot augment an empty caption"));
    }
    let mut rng = seed::rng(&[seed, 0x7E47]);
    let mut trace = TextTrace::default();
    let mut out = Vec::with_capacity(tokens.len());
    let mut last_deleted = None;
    for &t in tokens.ids() {
        if !rng.random_bool(config.token_prob) {
            out.push(t);
            continue;
        }
        let u: f64 = rng.random();
        if u < config.mask_frac {
            out.push(config.mask_token);
            trace.masked += 1;
        } else if u < config.mask_frac + config.replace_frac {
            out.push(rng.random_range(NUM_SPECIAL..config.vocab_size as u32));
            trace.replaced += 1;
        } else {
            last_deleted = Some(t);
            trace.deleted += 1;
        }
    }
    if out.is_empty() {
        out.push(last_deleted.expect("a token was deleted"));
        trace.deleted -= 1;
    }
    Ok((CaptionTokens::new(out), trace))
}

/// Empirical application rate of one operation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Rate {
    pub rate: f64,
    pub stderr: f64,
    pub trials: usize,
}

impl Rate {
    fn new(hits: usize, trials: usize) -> Self {
        let rate = hits as f64 / trials as f64;
        Self {
            rate,
            stderr: (rate * (1.0 - rate) / trials as f64).sqrt(),
            trials,
        }
    }

    /// Whether `nominal` lies within `k` binomial standard errors, using the
    /// nominal rate for the spread.
    pub fn within(&self, nominal: f64, k: f64) -> bool {
        let se = (nominal * (1.0 - nominal) / self.trials as f64).sqrt();
        (self.rate - nominal).abs() <= k * se
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AugmentationStats {
    pub flip: Rate,
    pub noise: Rate,
    pub jitter: Rate,
    pub gray: Rate,
    /// Per-token rates over all tokens seen.
    pub masked: Rate,
    pub replaced: Rate,
    pub deleted: Rate,
}

/// Runs both pipelines `trials` times and reports per-operation rates.
/// Text trials use a fixed ten-token caption, so token rates cover
/// `10 * trials` tokens.
pub fn augmentation_stats(
    trials: usize,
    visual: &VisualAugConfig,
    text: &TextAugConfig,
    seed: u64,
) -> Result<AugmentationStats> {
    if trials < 1000 {
        return Err(contract_err!("augmentation_stats needs at least 1000 trials, got {trials}"));
    }
    let side = 8;
    let mut base = SceneImage::zeros(side, side, 3);
    for (i, v) in base.data_mut().iter_mut().enumerate() {
        *v = (i % 7) as f32 / 7.0;
    }
    let small = VisualAugConfig {
        output_size: side,
        ..visual.clone()
    };
    let (mut flip, mut noise, mut jitter, mut gray) = (0, 0, 0, 0);
    for t in 0..trials {
        let (_, tr) = augment_image(&base, &small, seed::derive(&[seed, t as u64, 1]));
        flip += tr.flipped as usize;
        noise += tr.noised as usize;
        jitter += tr.jittered as usize;
        gray += tr.gray as usize;
    }

    let words = text.vocab_size.saturating_sub(NUM_SPECIAL as usize).max(1) as u32;
    let caption = CaptionTokens::new((0..10).map(|i| NUM_SPECIAL + i % words).collect());
    let mut totals = TextTrace::default();
    for t in 0..trials {
        let (_, tr) = augment_text(&caption, text, seed::derive(&[seed, t as u64, 2]))?;
        totals.masked += tr.masked;
        totals.replaced += tr.replaced;
        totals.deleted += tr.deleted;
    }
    let tokens = trials * caption.len();
    Ok(AugmentationStats {
        flip: Rate::new(flip, trials),
        noise: Rate::new(noise, trials),
        jitter: Rate::new(jitter, trials),
        gray: Rate::new(gray, trials),
        masked: Rate::new(totals.masked, tokens),
        replaced: Rate::new(totals.replaced, tokens),
        deleted: Rate::new(totals.deleted, tokens),
    })
}
