use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::metrics::{map_at_k, recall_from_ranks, rsum, similarity_matrix, sts_scores, SimilarityMatrix};
use crate::data::{graded_caption_pairs, CaptionTokens, Corpus, SceneImage, SceneSpec, Split, CAPTIONS_PER_IMAGE};
use crate::encoders::CookieModel;
use crate::error::{contract_err, Result};
use crate::seed;
use crate::tensor::{PoolStrategy, Real, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub split: Split,
    /// MAP cut-off; capped at the gallery size.
    pub map_k: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            split: Split::Test,
            map_k: 5000,
        }
    }
}

/// Headline metrics of one evaluation run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetrievalReport {
    pub r1_i2t: f64,
    pub r5_i2t: f64,
    pub r10_i2t: f64,
    pub r1_t2i: f64,
    pub r5_t2i: f64,
    pub r10_t2i: f64,
    pub rsum: f64,
    pub map_at_k: f64,
    pub sts_pearson: f64,
    pub sts_spearman: f64,
    pub sts_mean: f64,
}

/// 1-based rank of the best relevant item for every query.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryRanks {
    pub i2t: Vec<usize>,
    pub t2i: Vec<usize>,
}

/// Everything the metrics are computed from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingDump {
    pub split: Split,
    pub map_k: usize,
    pub image_ids: Vec<u64>,
    /// Images with equal scene specs share a group and count as mutual matches.
    pub image_groups: Vec<usize>,
    /// Index into `images` of the image each caption describes.
    pub caption_owner: Vec<usize>,
    /// Matching-pool embeddings of the split's images and captions.
    pub images: Vec<Vec<f32>>,
    pub captions: Vec<Vec<f32>>,
    /// Mean-pool caption embeddings, used for caption similarity.
    pub captions_mean: Vec<Vec<f32>>,
    /// Mean-pool image embeddings of the split (queries) and of the train
    /// split (gallery), with their (shape, color) labels.
    pub images_mean: Vec<Vec<f32>>,
    pub query_labels: Vec<Vec<String>>,
    pub gallery_mean: Vec<Vec<f32>>,
    pub gallery_labels: Vec<Vec<String>>,
    /// `(caption a, caption b, label)` with indices into `captions`.
    pub sts_pairs: Vec<(usize, usize, f64)>,
}

fn rows_of<T: Real>(t: &Tensor<T>) -> Vec<Vec<f32>> {
    (0..t.rows())
        .map(|r| t.row(r).iter().map(|v| v.as_f64() as f32).collect())
        .collect()
}

fn tensor_of(rows: &[Vec<f32>]) -> Result<Tensor<f64>> {
    let d = rows.first().map_or(0, |r| r.len());
    Tensor::new(
        vec![rows.len(), d],
        rows.iter().flat_map(|r| r.iter().map(|&v| v as f64)).collect(),
    )
}

/// Group index per sample: the position of the first sample with an equal spec.
pub fn spec_groups(specs: &[&SceneSpec]) -> Vec<usize> {
    let mut first: HashMap<&SceneSpec, usize> = HashMap::new();
    specs.iter().enumerate().map(|(i, s)| *first.entry(s).or_insert(i)).collect()
}

fn labels_of(spec: &SceneSpec) -> Vec<String> {
    spec.labels()
        .into_iter()
        .map(|(s, c)| format!("{} {}", c.word(), s.word()))
        .collect()
}

/// Encodes the split once per item and collects everything needed for the
/// report.
pub fn dump_embeddings<T: Real>(
    model: &CookieModel<T>,
    corpus: &Corpus,
    config: &EvalConfig,
    match_pool: PoolStrategy,
    seed: u64,
) -> Result<EmbeddingDump> {
    let samples = corpus.split(config.split);
    if samples.len() < 2 {
        return Err(contract_err!("split {:?} has {} samples, need 2", config.split, samples.len()));
    }
    let gallery = corpus.split(Split::Train);
    let images: Vec<&SceneImage> = samples.iter().map(|&s| &corpus.images[s]).collect();
    let captions: Vec<&CaptionTokens> = samples
        .iter()
        .flat_map(|&s| corpus.record(s).captions.iter())
        .collect();
    let specs: Vec<&SceneSpec> = samples.iter().map(|&s| &corpus.record(s).spec).collect();

    let pools = [match_pool, PoolStrategy::Mean];
    let img = model.embed_images_multi(&images, &pools)?;
    let cap = model.embed_texts_multi(&captions, &pools)?;
    let gallery_images: Vec<&SceneImage> = gallery.iter().map(|&s| &corpus.images[s]).collect();
    let gal = if gallery_images.is_empty() {
        None
    } else {
        Some(model.embed_images(&gallery_images, PoolStrategy::Mean)?)
    };

    let slot: HashMap<usize, usize> = samples.iter().enumerate().map(|(i, &s)| (s, i)).collect();
    let sts_pairs = graded_caption_pairs(corpus, &samples, seed::derive(&[seed, 0x575]))
        .into_iter()
        .map(|p| {
            let at = |(s, c): (usize, usize)| slot[&s] * CAPTIONS_PER_IMAGE + c;
            (at(p.a_at), at(p.b_at), p.label)
        })
        .collect();

    Ok(EmbeddingDump {
        split: config.split,
        map_k: config.map_k,
        image_ids: samples.iter().map(|&s| corpus.record(s).id).collect(),
        image_groups: spec_groups(&specs),
        caption_owner: (0..captions.len()).map(|c| c / CAPTIONS_PER_IMAGE).collect(),
        images: rows_of(&img[0]),
        captions: rows_of(&cap[0]),
        captions_mean: rows_of(&cap[1]),
        images_mean: rows_of(&img[1]),
        query_labels: specs.iter().map(|s| labels_of(s)).collect(),
        gallery_mean: gal.as_ref().map(rows_of).unwrap_or_default(),
        gallery_labels: gallery.iter().map(|&s| labels_of(&corpus.record(s).spec)).collect(),
        sts_pairs,
    })
}

/// Image-to-text and text-to-image similarity matrices with spec-group
/// relevance.
pub fn matching_matrices(
    images: &Tensor<f64>,
    captions: &Tensor<f64>,
    image_groups: &[usize],
    caption_owner: &[usize],
) -> Result<(SimilarityMatrix, SimilarityMatrix)> {
    let cap_group: Vec<usize> = caption_owner.iter().map(|&o| image_groups[o]).collect();
    let i2t_rel = image_groups
        .iter()
        .map(|&g| (0..cap_group.len()).filter(|&c| cap_group[c] == g).collect())
        .collect();
    let t2i_rel = cap_group
        .iter()
        .map(|&g| (0..image_groups.len()).filter(|&i| image_groups[i] == g).collect())
        .collect();
    Ok((
        similarity_matrix(images, captions, i2t_rel)?,
        similarity_matrix(captions, images, t2i_rel)?,
    ))
}

/// R@1/5/10 both ways plus 1-based best ranks. On galleries smaller than
/// ten items the cut-off is capped at the gallery size.
pub fn matching_recalls(i2t: &SimilarityMatrix, t2i: &SimilarityMatrix) -> Result<([f64; 6], QueryRanks)> {
    let ri = i2t.first_relevant_ranks();
    let rt = t2i.first_relevant_ranks();
    let at = |r: &[usize], k: usize, g: usize| recall_from_ranks(r, k.min(g));
    let recalls = [
        at(&ri, 1, i2t.gallery()),
        at(&ri, 5, i2t.gallery()),
        at(&ri, 10, i2t.gallery()),
        at(&rt, 1, t2i.gallery()),
        at(&rt, 5, t2i.gallery()),
        at(&rt, 10, t2i.gallery()),
    ];
    Ok((
        recalls,
        QueryRanks {
            i2t: ri.iter().map(|r| r + 1).collect(),
            t2i: rt.iter().map(|r| r + 1).collect(),
        },
    ))
}

/// Image MAP: queries retrieve gallery images sharing a (shape, color)
/// label. Queries without any relevant gallery item are skipped.
pub fn image_map(
    queries: &Tensor<f64>,
    query_labels: &[Vec<String>],
    gallery: &Tensor<f64>,
    gallery_labels: &[Vec<String>],
    k: usize,
) -> Result<f64> {
    let mut keep = Vec::new();
    let mut relevant = Vec::new();
    for (q, ql) in query_labels.iter().enumerate() {
        let rel: Vec<usize> = (0..gallery_labels.len())
            .filter(|&g| gallery_labels[g].iter().any(|l| ql.contains(l)))
            .collect();
        if !rel.is_empty() {
            keep.push(q);
            relevant.push(rel);
        }
    }
    if keep.is_empty() {
        return Err(contract_err!("no query has a relevant gallery image"));
    }
    let d = queries.cols();
    let sub = Tensor::new(
        vec![keep.len(), d],
        keep.iter().flat_map(|&q| queries.row(q).iter().copied()).collect(),
    )?;
    let sim = similarity_matrix(&sub, gallery, relevant)?;
    map_at_k(&sim, k.min(sim.gallery()))
}

/// Metrics from a dump alone.
pub fn report_from_dump(dump: &EmbeddingDump) -> Result<(RetrievalReport, QueryRanks)> {
    let images = tensor_of(&dump.images)?;
    let captions = tensor_of(&dump.captions)?;
    let (i2t, t2i) = matching_matrices(&images, &captions, &dump.image_groups, &dump.caption_owner)?;
    let (r, ranks) = matching_recalls(&i2t, &t2i)?;

    let map = if dump.gallery_mean.is_empty() {
        0.0
    } else {
        image_map(
            &tensor_of(&dump.images_mean)?,
            &dump.query_labels,
            &tensor_of(&dump.gallery_mean)?,
            &dump.gallery_labels,
            dump.map_k,
        )?
    };

    let cm = tensor_of(&dump.captions_mean)?;
    let cos = |a: usize, b: usize| {
        let (x, y) = (cm.row(a), cm.row(b));
        let dot: f64 = x.iter().zip(y).map(|(p, q)| p * q).sum();
        let n = |v: &[f64]| v.iter().map(|t| t * t).sum::<f64>().sqrt();
        dot / (n(x) * n(y))
    };
    let pred: Vec<f64> = dump.sts_pairs.iter().map(|&(a, b, _)| cos(a, b)).collect();
    let labels: Vec<f64> = dump.sts_pairs.iter().map(|p| p.2).collect();
    let sts = sts_scores(&pred, &labels)?;

    Ok((
        RetrievalReport {
            r1_i2t: r[0],
            r5_i2t: r[1],
            r10_i2t: r[2],
            r1_t2i: r[3],
            r5_t2i: r[4],
            r10_t2i: r[5],
            rsum: rsum(&r)?,
            map_at_k: map,
            sts_pearson: sts.pearson,
            sts_spearman: sts.spearman,
            sts_mean: sts.mean,
        },
        ranks,
    ))
}

/// Encodes a split and scores it.
pub fn eval_retrieval<T: Real>(
    model: &CookieModel<T>,
    corpus: &Corpus,
    config: &EvalConfig,
    match_pool: PoolStrategy,
    seed: u64,
) -> Result<(RetrievalReport, QueryRanks, EmbeddingDump)> {
    let dump = dump_embeddings(model, corpus, config, match_pool, seed)?;
    let (report, ranks) = report_from_dump(&dump)?;
    Ok((report, ranks, dump))
}

/// Six matching recalls and Rsum over `samples` (used for validation).
pub fn validation_rsum<T: Real>(
    model: &CookieModel<T>,
    corpus: &Corpus,
    samples: &[usize],
    pool: PoolStrategy,
) -> Result<([f64; 6], f64)> {
    let images: Vec<&SceneImage> = samples.iter().map(|&s| &corpus.images[s]).collect();
    let captions: Vec<&CaptionTokens> = samples
        .iter()
        .flat_map(|&s| corpus.record(s).captions.iter())
        .collect();
    let specs: Vec<&SceneSpec> = samples.iter().map(|&s| &corpus.record(s).spec).collect();
    let img = model.embed_images(&images, pool)?.cast::<f64>();
    let cap = model.embed_texts(&captions, pool)?.cast::<f64>();
    let owner: Vec<usize> = (0..captions.len()).map(|c| c / CAPTIONS_PER_IMAGE).collect();
    let (i2t, t2i) = matching_matrices(&img, &cap, &spec_groups(&specs), &owner)?;
    let (r, _) = matching_recalls(&i2t, &t2i)?;
    Ok((r, rsum(&r)?))
}
