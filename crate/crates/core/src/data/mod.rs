//! Synthetic paired image-caption corpus.

mod batch;
mod corpus;
mod scene;
mod vocab;

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Result};

pub use batch::{batch_iter, Batch, BatchPlan};
pub use corpus::{
    build_corpus, generate_corpus, graded_caption_pairs, read_image, split_of, write_image, Corpus, CorpusManifest,
    CorpusRecord, GradedPair, Split, MANIFEST_VERSION,
};
pub use scene::{
    caption_attributes, captions, generate_scene, render_scene, Color, GeneratedScene, GeneratorConfig, SceneObject,
    SceneSpec, Shape, Size, CAPTIONS_PER_IMAGE,
};
pub use vocab::{Vocabulary, MASK, NUM_SPECIAL, PAD};

/// Height x width x channel float image, channel-last, values nominally in
/// `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneImage {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl SceneImage {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if height * width * channels != data.len() || height == 0 || width == 0 || channels == 0 {
            return Err(dim_err!(
                "image {height}x{width}x{channels} cannot hold {} values",
                data.len()
            ));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f32) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    pub(crate) fn set_pixel(&mut self, y: usize, x: usize, rgb: [f32; 3]) {
        for (c, v) in rgb.into_iter().enumerate().take(self.channels) {
            self.set(y, x, c, v);
        }
    }
}

/// Unpadded caption token ids.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CaptionTokens(Vec<u32>);

impl CaptionTokens {
    pub fn new(ids: Vec<u32>) -> Self {
        Self(ids)
    }

    pub fn ids(&self) -> &[u32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}
