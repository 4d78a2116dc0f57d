use std::sync::atomic::{AtomicU64, Ordering};

use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::layers::{uniform_matrix, Dropout, LayerShape, Linear, TransformerLayer};
use super::{EncoderConfig, Embedding, Modality, VisualPatchFeatures, WordFeatures};
use crate::data::{CaptionTokens, SceneImage, PAD};
use crate::error::{contract_err, dim_err, Error, Result};
use crate::seed;
use crate::tensor::{ParamId, ParamStore, PoolStrategy, Real, Tape, Tensor, Var};

/// Identifiers of every learnable tensor, grouped by role.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncoderParams {
    /// Toy visual backbone: flattened patch to `D_V`.
    pub patch_embed: Linear,
    /// Toy text backbone: token table `[V, D_T]`, positions `[m, D_T]`, one layer.
    pub word_embed: ParamId,
    pub word_pos: ParamId,
    pub text_layer: TransformerLayer,
    /// `W_V`, `b_V`.
    pub visual_proj: Linear,
    /// Patch position embeddings `p`, `[n, D]`.
    pub patch_pos: ParamId,
    /// Visual semantic tag `s_V`, `[D]`.
    pub visual_tag: ParamId,
    /// `W_T`, `b_T`.
    pub text_proj: Linear,
    /// Textual semantic tag `s_T`, `[D]`.
    pub text_tag: ParamId,
    pub tav: Vec<TransformerLayer>,
    /// The single weight-sharing stack used by both modalities.
    pub ws: Vec<TransformerLayer>,
}

impl EncoderParams {
    pub fn ws_ids(&self) -> Vec<ParamId> {
        self.ws.iter().flat_map(|l| l.ids()).collect()
    }

    pub fn tav_ids(&self) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = self.tav.iter().flat_map(|l| l.ids()).collect();
        ids.push(self.visual_tag);
        ids
    }

    pub fn visual_backbone_ids(&self) -> Vec<ParamId> {
        self.patch_embed.ids().to_vec()
    }

    pub fn text_backbone_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.word_embed, self.word_pos];
        ids.extend(self.text_layer.ids());
        ids
    }

    pub fn visual_projection_ids(&self) -> Vec<ParamId> {
        vec![self.visual_proj.weight, self.visual_proj.bias, self.patch_pos]
    }

    pub fn text_projection_ids(&self) -> Vec<ParamId> {
        vec![self.text_proj.weight, self.text_proj.bias, self.text_tag]
    }
}

/// Number of items pushed through each encoder since construction.
#[derive(Debug, Default)]
pub struct EncodeCounters {
    images: AtomicU64,
    texts: AtomicU64,
}

impl EncodeCounters {
    pub fn images(&self) -> u64 {
        self.images.load(Ordering::Relaxed)
    }

    pub fn texts(&self) -> u64 {
        self.texts.load(Ordering::Relaxed)
    }

    pub fn reset(&self) {
        self.images.store(0, Ordering::Relaxed);
        self.texts.store(0, Ordering::Relaxed);
    }
}

/// Parameters plus forward passes of the dual-stream network.
#[derive(Debug)]
pub struct CookieModel<T> {
    pub config: EncoderConfig,
    pub store: ParamStore<T>,
    pub params: EncoderParams,
    pub counters: EncodeCounters,
}

impl<T: Real> Clone for CookieModel<T> {
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            store: self.store.clone(),
            params: self.params.clone(),
            counters: EncodeCounters::default(),
        }
    }
}

/// Images per tape when embedding large sets without gradients.
const INFER_CHUNK: usize = 64;

impl<T: Real> CookieModel<T> {
    pub fn new(config: EncoderConfig, init_seed: u64) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let mut rng = seed::rng(&[init_seed, 0x1A17]);
        let mut store = ParamStore::new();
        let d = c.model_dim;
        let text_shape = LayerShape {
            width: c.text_dim,
            heads: c.text_heads,
            ff: c.ff_dim,
            eps: c.layer_norm_eps,
        };
        let shape = c.layer_shape();

        let patch_embed = Linear::register(&mut store, "backbone.visual.patch", c.patch_len(), c.visual_dim, &mut rng)?;
        let word_embed = store.register("backbone.text.tokens", uniform_matrix(&mut rng, c.vocab_size, c.text_dim))?;
        let word_pos = store.register("backbone.text.positions", uniform_matrix(&mut rng, c.max_words, c.text_dim))?;
        let text_layer = TransformerLayer::register(&mut store, "backbone.text.layer0", text_shape, &mut rng)?;
        let visual_proj = Linear::register(&mut store, "proj.visual", c.visual_dim, d, &mut rng)?;
        let patch_pos = store.register("proj.visual.positions", Tensor::zeros(&[c.num_patches(), d]))?;
        let visual_tag = store.register("tav.tag", Tensor::zeros(&[d]))?;
        let text_proj = Linear::register(&mut store, "proj.text", c.text_dim, d, &mut rng)?;
        let text_tag = store.register("proj.text.tag", Tensor::zeros(&[d]))?;
        let tav = (0..c.tav_layers)
            .map(|i| TransformerLayer::register(&mut store, &format!("tav.layer{i}"), shape, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let ws = (0..c.ws_layers)
            .map(|i| TransformerLayer::register(&mut store, &format!("ws.layer{i}"), shape, &mut rng))
            .collect::<Result<Vec<_>>>()?;

        Ok(Self {
            config,
            store,
            params: EncoderParams {
                patch_embed,
                word_embed,
                word_pos,
                text_layer,
                visual_proj,
                patch_pos,
                visual_tag,
                text_proj,
                text_tag,
                tav,
                ws,
            },
            counters: EncodeCounters::default(),
        })
    }

    /// Rebuilds a model from stored tensors, matched by name. Every expected
    /// tensor must be present with the right shape and nothing else may be.
    pub fn from_store(config: EncoderConfig, loaded: &ParamStore<T>) -> Result<Self> {
        let mut model = Self::new(config, 0)?;
        if loaded.len() != model.store.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} tensors, model expects {}",
                loaded.len(),
                model.store.len()
            )));
        }
        let ids: Vec<ParamId> = model.store.ids().collect();
        for id in ids {
            let name = model.store.name(id).to_string();
            let src = loaded
                .id(&name)
                .ok_or_else(|| Error::Checkpoint(format!("checkpoint lacks tensor `{name}`")))?;
            model
                .store
                .set(id, loaded.get(src).clone())
                .map_err(|e| Error::Checkpoint(format!("tensor `{name}`: {e}")))?;
        }
        Ok(model)
    }

    /// Same architecture over different parameter values.
    pub fn with_store(&self, store: ParamStore<T>) -> Self {
        Self {
            config: self.config.clone(),
            store,
            params: self.params.clone(),
            counters: EncodeCounters::default(),
        }
    }

    pub fn cast<U: Real>(&self) -> CookieModel<U> {
        CookieModel {
            config: self.config.clone(),
            store: self.store.cast(),
            params: self.params.clone(),
            counters: EncodeCounters::default(),
        }
    }

    fn dropout<'a>(&self, rng: Option<&'a mut ChaCha8Rng>) -> Option<Dropout<'a>> {
        match rng {
            Some(rng) if self.config.dropout > 0.0 => Some(Dropout {
                rate: self.config.dropout,
                rng,
            }),
            _ => None,
        }
    }

    // ------------------------------------------------------------ visual path

    /// Cuts each image into non-overlapping patches: `[B, n, patch*patch*C]`,
    /// patches in row-major order, each flattened row-major with channels last.
    pub fn patchify(&self, images: &[&SceneImage]) -> Result<Tensor<T>> {
        let c = &self.config;
        let p = c.patch;
        for img in images {
            if img.height() % p != 0 || img.width() % p != 0 {
                return Err(Error::Config(format!(
                    "image {}x{} is not divisible into {p}x{p} patches",
                    img.height(),
                    img.width()
                )));
            }
            if img.height() != c.image_size || img.width() != c.image_size || img.channels() != c.channels {
                return Err(dim_err!(
                    "image {}x{}x{} does not match configured {}x{}x{}",
                    img.height(),
                    img.width(),
                    img.channels(),
                    c.image_size,
                    c.image_size,
                    c.channels
                ));
            }
        }
        if images.is_empty() {
            return Err(contract_err!("no images to encode"));
        }
        let side = c.image_size / p;
        let (n, len) = (c.num_patches(), c.patch_len());
        let mut out = Vec::with_capacity(images.len() * n * len);
        for img in images {
            for py in 0..side {
                for px in 0..side {
                    for y in py * p..(py + 1) * p {
                        for x in px * p..(px + 1) * p {
                            for ch in 0..c.channels {
                                out.push(T::lit(img.get(y, x, ch) as f64));
                            }
                        }
                    }
                }
            }
        }
        Tensor::new(vec![images.len(), n, len], out)
    }

    /// `[B, n, P]` patches to `[B, n, D_V]` features.
    pub fn visual_backbone(&self, tape: &mut Tape<T>, patches: Var) -> Result<Var> {
        self.params.patch_embed.forward(tape, &self.store, patches)
    }

    /// Row `i` becomes `v_i W_V + b_V + p_i`.
    pub fn project_visual(&self, tape: &mut Tape<T>, v: Var) -> Result<Var> {
        let y = self.params.visual_proj.forward(tape, &self.store, v)?;
        let p = tape.param(&self.store, self.params.patch_pos);
        tape.add(y, p)
    }

    /// Text-aligned visual layers followed by the visual tag `s_V` added to
    /// every row.
    pub fn tav_encode(&self, tape: &mut Tape<T>, v_hat: Var, rng: Option<&mut ChaCha8Rng>) -> Result<Var> {
        let shape = tape.shape(v_hat).to_vec();
        if shape.len() != 3 {
            return Err(dim_err!("tav_encode needs [B, n, D], got {shape:?}"));
        }
        let mask = vec![true; shape[0] * shape[1]];
        let mut dropout = self.dropout(rng);
        let mut x = v_hat;
        for layer in &self.params.tav {
            x = layer.forward(tape, &self.store, x, &mask, self.config.layer_shape(), &mut dropout)?;
        }
        let s = tape.param(&self.store, self.params.visual_tag);
        tape.add(x, s)
    }

    // -------------------------------------------------------------- text path

    /// Pads captions to `m` with PAD. Returns flat ids and the validity mask.
    pub fn caption_ids(&self, captions: &[&CaptionTokens]) -> Result<(Vec<usize>, Vec<bool>)> {
        let m = self.config.max_words;
        if captions.is_empty() {
            return Err(contract_err!("no captions to encode"));
        }
        let mut ids = Vec::with_capacity(captions.len() * m);
        let mut mask = Vec::with_capacity(captions.len() * m);
        for (i, cap) in captions.iter().enumerate() {
            if cap.is_empty() {
                return Err(contract_err!("caption {i} is empty"));
            }
            if cap.len() > m {
                return Err(Error::Data(format!("caption {i} has {} tokens, limit is {m}", cap.len())));
            }
            if let Some(&bad) = cap.ids().iter().find(|&&t| t as usize >= self.config.vocab_size) {
                return Err(Error::Data(format!(
                    "token id {bad} outside vocabulary of {}",
                    self.config.vocab_size
                )));
            }
            ids.extend(cap.ids().iter().map(|&t| t as usize));
            ids.extend(std::iter::repeat_n(PAD as usize, m - cap.len()));
            mask.extend((0..m).map(|j| j < cap.len()));
        }
        Ok((ids, mask))
    }

    /// Token lookup, learned positions and one transformer layer:
    /// `[B, m, D_T]`.
    pub fn text_backbone(
        &self,
        tape: &mut Tape<T>,
        ids: &[usize],
        mask: &[bool],
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        let m = self.config.max_words;
        if ids.len() % m != 0 || ids.is_empty() {
            return Err(dim_err!("{} token ids are not a whole number of length-{m} rows", ids.len()));
        }
        let b = ids.len() / m;
        let table = tape.param(&self.store, self.params.word_embed);
        let x = tape.embedding(table, ids, &[b, m])?;
        let pos = tape.param(&self.store, self.params.word_pos);
        let x = tape.add(x, pos)?;
        let shape = LayerShape {
            width: self.config.text_dim,
            heads: self.config.text_heads,
            ff: self.config.ff_dim,
            eps: self.config.layer_norm_eps,
        };
        let mut dropout = self.dropout(rng);
        self.params.text_layer.forward(tape, &self.store, x, mask, shape, &mut dropout)
    }

    /// Row `i` becomes `t_i W_T + b_T + s_T`.
    pub fn project_textual(&self, tape: &mut Tape<T>, t: Var) -> Result<Var> {
        let y = self.params.text_proj.forward(tape, &self.store, t)?;
        let s = tape.param(&self.store, self.params.text_tag);
        tape.add(y, s)
    }

    // ----------------------------------------------------------- shared stack

    /// The weight-sharing stack. It adds no positional terms of its own.
    pub fn ws_encode(&self, tape: &mut Tape<T>, x: Var, mask: &[bool], rng: Option<&mut ChaCha8Rng>) -> Result<Var> {
        let mut dropout = self.dropout(rng);
        let mut x = x;
        for layer in &self.params.ws {
            x = layer.forward(tape, &self.store, x, mask, self.config.layer_shape(), &mut dropout)?;
        }
        Ok(x)
    }

    pub fn pool(&self, tape: &mut Tape<T>, x: Var, mask: &[bool], strategy: PoolStrategy) -> Result<Var> {
        tape.pool(x, mask, strategy)
    }

    /// Full visual pipeline for a batch, `[B, D]`. Also returns the shared
    /// stack output `[B, n, D]`.
    pub fn encode_images_tokens(
        &self,
        tape: &mut Tape<T>,
        images: &[&SceneImage],
        strategy: PoolStrategy,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(Var, Var)> {
        let patches = tape.constant(self.patchify(images)?);
        let v = self.visual_backbone(tape, patches)?;
        let v_hat = self.project_visual(tape, v)?;
        let f = self.tav_encode(tape, v_hat, rng.as_deref_mut())?;
        let mask = vec![true; images.len() * self.config.num_patches()];
        let tokens = self.ws_encode(tape, f, &mask, rng)?;
        let pooled = self.pool(tape, tokens, &mask, strategy)?;
        self.counters.images.fetch_add(images.len() as u64, Ordering::Relaxed);
        Ok((pooled, tokens))
    }

    pub fn encode_images(
        &self,
        tape: &mut Tape<T>,
        images: &[&SceneImage],
        strategy: PoolStrategy,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        Ok(self.encode_images_tokens(tape, images, strategy, rng)?.0)
    }

    /// Full text pipeline for a batch, `[B, D]`, plus the shared stack output
    /// `[B, m, D]` and its mask.
    pub fn encode_texts_tokens(
        &self,
        tape: &mut Tape<T>,
        captions: &[&CaptionTokens],
        strategy: PoolStrategy,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(Var, Var, Vec<bool>)> {
        let (ids, mask) = self.caption_ids(captions)?;
        let t = self.text_backbone(tape, &ids, &mask, rng.as_deref_mut())?;
        let t_hat = self.project_textual(tape, t)?;
        let tokens = self.ws_encode(tape, t_hat, &mask, rng)?;
        let pooled = self.pool(tape, tokens, &mask, strategy)?;
        self.counters.texts.fetch_add(captions.len() as u64, Ordering::Relaxed);
        Ok((pooled, tokens, mask))
    }

    pub fn encode_texts(
        &self,
        tape: &mut Tape<T>,
        captions: &[&CaptionTokens],
        strategy: PoolStrategy,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        Ok(self.encode_texts_tokens(tape, captions, strategy, rng)?.0)
    }

    // ------------------------------------------------- gradient-free helpers

    pub fn visual_features(&self, image: &SceneImage) -> Result<VisualPatchFeatures<T>> {
        let mut tape = Tape::new();
        let patches = tape.constant(self.patchify(&[image])?);
        let v = self.visual_backbone(&mut tape, patches)?;
        let v = tape.value(v).clone().reshape(&[self.config.num_patches(), self.config.visual_dim])?;
        Ok(VisualPatchFeatures { v })
    }

    pub fn word_features(&self, tokens: &CaptionTokens) -> Result<WordFeatures<T>> {
        let mut tape = Tape::new();
        let (ids, mask) = self.caption_ids(&[tokens])?;
        let t = self.text_backbone(&mut tape, &ids, &mask, None)?;
        let t = tape.value(t).clone().reshape(&[self.config.max_words, self.config.text_dim])?;
        Ok(WordFeatures { t, mask })
    }

    pub fn encode_image(&self, image: &SceneImage, strategy: PoolStrategy) -> Result<Embedding<T>> {
        let mut tape = Tape::new();
        let out = self.encode_images(&mut tape, &[image], strategy, None)?;
        Ok(Embedding {
            vec: tape.value(out).data().to_vec(),
            modality: Modality::Visual,
        })
    }

    pub fn encode_text(&self, tokens: &CaptionTokens, strategy: PoolStrategy) -> Result<Embedding<T>> {
        let mut tape = Tape::new();
        let out = self.encode_texts(&mut tape, &[tokens], strategy, None)?;
        Ok(Embedding {
            vec: tape.value(out).data().to_vec(),
            modality: Modality::Textual,
        })
    }

    /// Embeds many images in independent chunks, encoding each image once
    /// and pooling its tokens with every listed strategy. One `[N, D]`
    /// tensor per strategy.
    pub fn embed_images_multi(&self, images: &[&SceneImage], strategies: &[PoolStrategy]) -> Result<Vec<Tensor<T>>> {
        let n = self.config.num_patches();
        let parts = images
            .par_chunks(INFER_CHUNK)
            .map(|chunk| {
                let mut tape = Tape::new();
                let (_, tokens) = self.encode_images_tokens(&mut tape, chunk, strategies[0], None)?;
                let mask = vec![true; chunk.len() * n];
                strategies
                    .iter()
                    .map(|&s| {
                        let v = tape.pool(tokens, &mask, s)?;
                        Ok(tape.value(v).data().to_vec())
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        self.assemble(parts, images.len(), strategies.len())
    }

    /// Caption counterpart of [`Self::embed_images_multi`].
    pub fn embed_texts_multi(&self, captions: &[&CaptionTokens], strategies: &[PoolStrategy]) -> Result<Vec<Tensor<T>>> {
        let parts = captions
            .par_chunks(INFER_CHUNK)
            .map(|chunk| {
                let mut tape = Tape::new();
                let (_, tokens, mask) = self.encode_texts_tokens(&mut tape, chunk, strategies[0], None)?;
                strategies
                    .iter()
                    .map(|&s| {
                        let v = tape.pool(tokens, &mask, s)?;
                        Ok(tape.value(v).data().to_vec())
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        self.assemble(parts, captions.len(), strategies.len())
    }

    fn assemble(&self, parts: Vec<Vec<Vec<T>>>, rows: usize, k: usize) -> Result<Vec<Tensor<T>>> {
        (0..k)
            .map(|s| {
                let data: Vec<T> = parts.iter().flat_map(|p| p[s].iter().copied()).collect();
                Tensor::new(vec![rows, self.config.model_dim], data)
            })
            .collect()
    }

    /// Embeds many images, `[N, D]`.
    pub fn embed_images(&self, images: &[&SceneImage], strategy: PoolStrategy) -> Result<Tensor<T>> {
        Ok(self.embed_images_multi(images, &[strategy])?.remove(0))
    }

    /// Embeds many captions, `[N, D]`.
    pub fn embed_texts(&self, captions: &[&CaptionTokens], strategy: PoolStrategy) -> Result<Tensor<T>> {
        Ok(self.embed_texts_multi(captions, &[strategy])?.remove(0))
    }
}


impl EncoderConfig {
    pub fn layer_shape(&self) -> LayerShape {
        LayerShape {
            width: self.model_dim,
            heads: self.heads,
            ff: self.ff_dim,
            eps: self.layer_norm_eps,
        }
    }
}
