//! Dual-stream encoder: toy backbones, projections, the text-aligned visual
//! layer, the weight-sharing transformer and pooling.

mod layers;
mod model;

use serde::{Deserialize, Serialize};

use crate::data::Vocabulary;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub use layers::{Dropout, LayerNormParams, LayerShape, Linear, TransformerLayer};
pub use model::{CookieModel, EncodeCounters, EncoderParams};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub image_size: usize,
    pub channels: usize,
    pub patch: usize,
    /// Visual backbone output width (`D_V`).
    pub visual_dim: usize,
    /// Text backbone output width (`D_T`).
    pub text_dim: usize,
    /// Common subspace width (`D`).
    pub model_dim: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub vocab_size: usize,
    /// Maximum caption length `m`; shorter captions are padded.
    pub max_words: usize,
    pub text_heads: usize,
    pub tav_layers: usize,
    pub ws_layers: usize,
    pub dropout: f64,
    pub layer_norm_eps: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            channels: 3,
            patch: 8,
            visual_dim: 64,
            text_dim: 64,
            model_dim: 64,
            heads: 4,
            ff_dim: 64,
            vocab_size: Vocabulary::standard().len(),
            max_words: 16,
            text_heads: 4,
            tav_layers: 1,
            ws_layers: 2,
            dropout: 0.0,
            layer_norm_eps: 1e-5,
        }
    }
}

impl EncoderConfig {
    /// Patches per image (`n`).
    pub fn num_patches(&self) -> usize {
        let side = self.image_size / self.patch.max(1);
        side * side
    }

    /// Values per flattened patch.
    pub fn patch_len(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    /// Every violated constraint, as `(field, reason)`.
    pub fn problems(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        let mut bad = |f: &str, why: String| out.push((format!("encoder.{f}"), why));
        for (f, v) in [
            ("image_size", self.image_size),
            ("channels", self.channels),
            ("patch", self.patch),
            ("visual_dim", self.visual_dim),
            ("text_dim", self.text_dim),
            ("model_dim", self.model_dim),
            ("heads", self.heads),
            ("ff_dim", self.ff_dim),
            ("max_words", self.max_words),
            ("text_heads", self.text_heads),
            ("ws_layers", self.ws_layers),
        ] {
            if v == 0 {
                bad(f, "must be positive".into());
            }
        }
        if self.patch > 0 && self.image_size % self.patch != 0 {
            bad("patch", format!("image size {} is not divisible by patch {}", self.image_size, self.patch));
        }
        if self.heads > 0 && self.model_dim % self.heads != 0 {
            bad("heads", format!("model_dim {} is not divisible by {} heads", self.model_dim, self.heads));
        }
        if self.text_heads > 0 && self.text_dim % self.text_heads != 0 {
            bad("text_heads", format!("text_dim {} is not divisible by {} heads", self.text_dim, self.text_heads));
        }
        if self.vocab_size < 3 {
            bad("vocab_size", "must hold the special tokens plus at least one word".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            bad("dropout", format!("{} is outside [0, 1)", self.dropout));
        }
        if !(self.layer_norm_eps > 0.0) {
            bad("layer_norm_eps", "must be positive".into());
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(
                p.into_iter().map(|(f, w)| format!("{f}: {w}")).collect::<Vec<_>>().join("; "),
            ))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Visual,
    Textual,
}

/// Backbone output for one image: `v` is `[n, D_V]`.
#[derive(Clone, Debug, PartialEq)]
pub struct VisualPatchFeatures<T> {
    pub v: Tensor<T>,
}

impl<T: Real> VisualPatchFeatures<T> {
    pub fn n(&self) -> usize {
        self.v.rows()
    }

    pub fn dim(&self) -> usize {
        self.v.cols()
    }
}

/// Backbone output for one caption: `t` is `[m, D_T]`; `mask[i]` is true
/// for real tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct WordFeatures<T> {
    pub t: Tensor<T>,
    pub mask: Vec<bool>,
}

impl<T: Real> WordFeatures<T> {
    pub fn m(&self) -> usize {
        self.t.rows()
    }

    pub fn dim(&self) -> usize {
        self.t.cols()
    }
}

/// Pooled vector in the common space.
#[derive(Clone, Debug, PartialEq)]
pub struct Embedding<T> {
    pub vec: Vec<T>,
    pub modality: Modality,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid() {
        let c = EncoderConfig::default();
        c.validate().unwrap();
        assert_eq!(c.num_patches(), 16);
        assert_eq!(c.patch_len(), 192);
    }

    #[test]
    fn lists_every_problem() {
        let c = EncoderConfig {
            patch: 7,
            heads: 5,
            dropout: 1.5,
            ..Default::default()
        };
        let p = c.problems();
        let fields: Vec<&str> = p.iter().map(|(f, _)| f.as_str()).collect();
        assert_eq!(fields, ["encoder.patch", "encoder.heads", "encoder.dropout"]);
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }
}
