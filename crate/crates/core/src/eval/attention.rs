use std::fmt::Write as _;

use serde::Serialize;

use crate::data::{CaptionTokens, Corpus, SceneImage, Vocabulary};
use crate::encoders::CookieModel;
use crate::error::{contract_err, dim_err, Result};
use crate::tensor::{PoolStrategy, Real, Tape, Tensor};

/// One shared-stack output token scored against the pooled embedding.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RankedToken {
    pub index: usize,
    pub label: String,
    pub score: f64,
    /// 1-based position after sorting by descending score.
    pub rank: usize,
    pub top5: bool,
}

/// Cosine of every unmasked token with the pooled vector, sorted descending
/// (ties to the lower index). Zero-norm tokens are skipped with a warning.
pub fn attention_rank(
    tokens: &Tensor<f64>,
    mask: &[bool],
    pooled: &[f64],
    labels: &[String],
) -> Result<Vec<RankedToken>> {
    if tokens.ndim() != 2 || tokens.cols() != pooled.len() {
        return Err(dim_err!(
            "tokens {:?} do not match a pooled vector of {}",
            tokens.shape(),
            pooled.len()
        ));
    }
    if mask.len() != tokens.rows() || labels.len() != tokens.rows() {
        return Err(dim_err!(
            "{} tokens, {} mask entries, {} labels",
            tokens.rows(),
            mask.len(),
            labels.len()
        ));
    }
    if !mask.iter().any(|&m| m) {
        return Err(contract_err!("attention_rank needs at least one unmasked token"));
    }
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let pn = norm(pooled);
    if pn == 0.0 {
        return Err(contract_err!("pooled embedding has zero norm"));
    }
    let mut scored = Vec::new();
    for i in (0..tokens.rows()).filter(|&i| mask[i]) {
        let t = tokens.row(i);
        let tn = norm(t);
        if tn == 0.0 {
            log::warn!("token {i} ({}) has zero norm and is left out of the ranking", labels[i]);
            continue;
        }
        let dot: f64 = t.iter().zip(pooled).map(|(a, b)| a * b).sum();
        scored.push((i, (dot / (tn * pn)).clamp(-1.0, 1.0)));
    }
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(scored
        .into_iter()
        .enumerate()
        .map(|(r, (i, score))| RankedToken {
            index: i,
            label: labels[i].clone(),
            score,
            rank: r + 1,
            top5: r < 5,
        })
        .collect())
}

/// Rankings of one sample's image patches and caption words.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SampleAttention {
    pub id: u64,
    pub image: Vec<RankedToken>,
    pub text: Vec<RankedToken>,
    /// Whether patches holding an object outrank background patches on
    /// average (mean rank comparison).
    pub objects_first: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AttentionAnalysis {
    pub samples: Vec<SampleAttention>,
    /// Share of samples with `objects_first`.
    pub object_rate: f64,
}

/// Patch labels `r{row}c{col}:{color shape|background}`. Each patch covers
/// exactly one grid cell when the patch side equals the cell side.
fn patch_labels(corpus: &Corpus, sample: usize, side: usize) -> Vec<(String, bool)> {
    let spec = &corpus.record(sample).spec;
    let grid = corpus.manifest.generator.grid;
    (0..side * side)
        .map(|p| {
            let (r, c) = (p / side, p % side);
            // map patch to cell when the patch grid differs from the cell grid
            let cell = (r * grid / side) * grid + c * grid / side;
            match spec.objects.iter().find(|o| o.cell == cell) {
                Some(o) => (format!("r{r}c{c}:{} {}", o.color.word(), o.shape.word()), true),
                None => (format!("r{r}c{c}:background"), false),
            }
        })
        .collect()
}

fn caption_labels(tokens: &CaptionTokens, vocab: &Vocabulary, m: usize) -> Vec<String> {
    (0..m)
        .map(|i| match tokens.ids().get(i) {
            Some(&t) => vocab.word(t).unwrap_or("?").to_string(),
            None => "[PAD]".to_string(),
        })
        .collect()
}

/// Ranks shared-stack output tokens of each sample against its own pooled
/// embedding, for the image and for its first caption.
pub fn analyze_attention<T: Real>(
    model: &CookieModel<T>,
    corpus: &Corpus,
    samples: &[usize],
    strategy: PoolStrategy,
) -> Result<AttentionAnalysis> {
    let n = model.config.num_patches();
    let side = (n as f64).sqrt().round() as usize;
    let m = model.config.max_words;
    let d = model.config.model_dim;
    let vocab = corpus.vocabulary();
    let mut out = Vec::with_capacity(samples.len());
    for &s in samples {
        let img: &SceneImage = &corpus.images[s];
        let cap = &corpus.record(s).captions[0];
        let mut tape = Tape::new();
        let (pi, ti) = model.encode_images_tokens(&mut tape, &[img], strategy, None)?;
        let (pt, tt, tmask) = model.encode_texts_tokens(&mut tape, &[cap], strategy, None)?;
        let to64 = |v: &Tensor<T>, rows: usize| Tensor::new(vec![rows, d], v.data().iter().map(|x| x.as_f64()).collect());
        let vec64 = |v: &Tensor<T>| v.data().iter().map(|x| x.as_f64()).collect::<Vec<f64>>();

        let patches = patch_labels(corpus, s, side);
        let labels: Vec<String> = patches.iter().map(|p| p.0.clone()).collect();
        let image = attention_rank(&to64(tape.value(ti), n)?, &vec![true; n], &vec64(tape.value(pi)), &labels)?;
        let text = attention_rank(
            &to64(tape.value(tt), m)?,
            &tmask,
            &vec64(tape.value(pt)),
            &caption_labels(cap, vocab, m),
        )?;

        let mean_rank = |want: bool| {
            let r: Vec<f64> = image
                .iter()
                .filter(|t| patches[t.index].1 == want)
                .map(|t| t.rank as f64)
                .collect();
            (!r.is_empty()).then(|| r.iter().sum::<f64>() / r.len() as f64)
        };
        let objects_first = match (mean_rank(true), mean_rank(false)) {
            (Some(o), Some(b)) => o < b,
            _ => false,
        };
        out.push(SampleAttention {
            id: corpus.record(s).id,
            image,
            text,
            objects_first,
        });
    }
    let object_rate = if out.is_empty() {
        0.0
    } else {
        out.iter().filter(|a| a.objects_first).count() as f64 / out.len() as f64
    };
    Ok(AttentionAnalysis {
        samples: out,
        object_rate,
    })
}

/// CSV rows `sample_id,token_index,token_label,score,rank` for one modality.
pub fn attention_csv(analysis: &AttentionAnalysis, image: bool) -> String {
    let mut s = String::from("sample_id,token_index,token_label,score,rank\n");
    for a in &analysis.samples {
        for t in if image { &a.image } else { &a.text } {
            let _ = writeln!(s, "{},{},{},{:.6},{}", a.id, t.index, t.label, t.score, t.rank);
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_token_ranks_first() {
        let t = Tensor::from_rows(&[vec![0.3, -0.4]]).unwrap();
        let r = attention_rank(&t, &[true], &[0.3, -0.4], &["a".into()]).unwrap();
        assert_eq!(r.len(), 1);
        assert_eq!(r[0].rank, 1);
        assert!((r[0].score - 1.0).abs() < 1e-12);
    }

    #[test]
    fn masked_and_zero_tokens_are_skipped() {
        let t = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0], vec![0.0, 1.0], vec![-1.0, 0.0]]).unwrap();
        let labels: Vec<String> = ["a", "b", "c", "d"].map(String::from).to_vec();
        let r = attention_rank(&t, &[true, true, true, false], &[1.0, 1.0], &labels).unwrap();
        let order: Vec<usize> = r.iter().map(|x| x.index).collect();
        assert_eq!(order, vec![0, 2]);
        assert!(r.iter().all(|x| (-1.0..=1.0).contains(&x.score) && x.top5));
        assert!(attention_rank(&t, &[false; 4], &[1.0, 1.0], &labels).is_err());
    }
}
