use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{contract_err, dim_err, Result};
use crate::tensor::{Real, Tensor};

/// Query-by-gallery cosine scores with per-query relevant gallery indices.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMatrix {
    pub scores: Tensor<f64>,
    pub relevant: Vec<Vec<usize>>,
}

impl SimilarityMatrix {
    pub fn new(scores: Tensor<f64>, relevant: Vec<Vec<usize>>) -> Result<Self> {
        if scores.ndim() != 2 {
            return Err(dim_err!("similarity scores must be 2-D, got {:?}", scores.shape()));
        }
        let (q, g) = (scores.rows(), scores.cols());
        if relevant.len() != q {
            return Err(dim_err!("{} relevance lists for {q} queries", relevant.len()));
        }
        for (i, r) in relevant.iter().enumerate() {
            if r.is_empty() {
                return Err(contract_err!("query {i} has no relevant gallery item"));
            }
            if let Some(&bad) = r.iter().find(|&&j| j >= g) {
                return Err(contract_err!("query {i} marks gallery item {bad} of {g} as relevant"));
            }
        }
        if let Some(v) = scores.data().iter().find(|v| !(-1.0..=1.0).contains(*v)) {
            return Err(contract_err!("similarity {v} outside [-1, 1]"));
        }
        Ok(Self { scores, relevant })
    }

    pub fn queries(&self) -> usize {
        self.scores.rows()
    }

    pub fn gallery(&self) -> usize {
        self.scores.cols()
    }

    /// Gallery indices by descending score, ties to the lower index.
    pub fn ranking(&self, query: usize) -> Vec<usize> {
        let row = self.scores.row(query);
        let mut order: Vec<usize> = (0..row.len()).collect();
        order.sort_by(|&a, &b| rank_cmp(row, a, b));
        order
    }

    /// 0-based position of gallery item `j` in the ranking of `query`.
    pub fn position(&self, query: usize, j: usize) -> usize {
        let row = self.scores.row(query);
        (0..row.len())
            .filter(|&i| rank_cmp(row, i, j) == Ordering::Less)
            .count()
    }

    /// 0-based rank of the best-placed relevant item for every query.
    pub fn first_relevant_ranks(&self) -> Vec<usize> {
        (0..self.queries())
            .map(|q| {
                self.relevant[q]
                    .iter()
                    .map(|&j| self.position(q, j))
                    .min()
                    .expect("non-empty")
            })
            .collect()
    }

    fn check_k(&self, k: usize) -> Result<()> {
        if k == 0 {
            return Err(contract_err!("K must be at least 1"));
        }
        if k > self.gallery() {
            return Err(contract_err!("K = {k} exceeds the gallery of {}", self.gallery()));
        }
        Ok(())
    }
}

// scores are finite (checked in `new`); -0.0 and 0.0 tie
fn rank_cmp(row: &[f64], a: usize, b: usize) -> Ordering {
    row[b].partial_cmp(&row[a]).unwrap_or(Ordering::Equal).then(a.cmp(&b))
}

/// Cosine similarity of every query row against every gallery row.
pub fn similarity_matrix<T: Real>(
    queries: &Tensor<T>,
    gallery: &Tensor<T>,
    relevant: Vec<Vec<usize>>,
) -> Result<SimilarityMatrix> {
    if queries.ndim() != 2 || gallery.ndim() != 2 || queries.cols() != gallery.cols() {
        return Err(dim_err!(
            "cannot compare queries {:?} with gallery {:?}",
            queries.shape(),
            gallery.shape()
        ));
    }
    let unit = |t: &Tensor<T>, what: &str| -> Result<Tensor<f64>> {
        let d = t.cols();
        let mut out = Vec::with_capacity(t.len());
        for r in 0..t.rows() {
            let row: Vec<f64> = t.row(r).iter().map(|v| v.as_f64()).collect();
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 || !norm.is_finite() {
                return Err(contract_err!("{what} row {r} has zero or non-finite norm"));
            }
            out.extend(row.iter().map(|v| v / norm));
        }
        Tensor::new(vec![t.rows(), d], out)
    };
    let q = unit(queries, "query")?;
    let g = unit(gallery, "gallery")?;
    let scores = q.matmul(&g.transpose()?)?.map(|v| v.clamp(-1.0, 1.0));
    SimilarityMatrix::new(scores, relevant)
}

/// Percentage of queries with a relevant item in the top `k`.
pub fn recall_at_k(sim: &SimilarityMatrix, k: usize) -> Result<f64> {
    sim.check_k(k)?;
    let ranks = sim.first_relevant_ranks();
    Ok(recall_from_ranks(&ranks, k))
}

pub(crate) fn recall_from_ranks(ranks: &[usize], k: usize) -> f64 {
    100.0 * ranks.iter().filter(|&&r| r < k).count() as f64 / ranks.len() as f64
}

/// Sum of six recall percentages.
pub fn rsum(recalls: &[f64]) -> Result<f64> {
    if recalls.len() != 6 {
        return Err(contract_err!("rsum takes six recalls, got {}", recalls.len()));
    }
    if let Some(r) = recalls.iter().find(|r| !(0.0..=100.0).contains(*r)) {
        return Err(contract_err!("recall {r} outside [0, 100]"));
    }
    Ok(recalls.iter().sum())
}

/// Mean truncated average precision. Each query's precision sum over the
/// top `k` is divided by `min(R, k)`.
pub fn map_at_k(sim: &SimilarityMatrix, k: usize) -> Result<f64> {
    sim.check_k(k)?;
    let mut total = 0.0;
    for q in 0..sim.queries() {
        let mut is_rel = vec![false; sim.gallery()];
        for &j in &sim.relevant[q] {
            is_rel[j] = true;
        }
        let order = sim.ranking(q);
        let (mut hits, mut ap) = (0usize, 0.0);
        for (r, &j) in order.iter().take(k).enumerate() {
            if is_rel[j] {
                hits += 1;
                ap += hits as f64 / (r + 1) as f64;
            }
        }
        let rel = is_rel.iter().filter(|&&b| b).count();
        total += ap / rel.min(k) as f64;
    }
    Ok(total / sim.queries() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StsScores {
    pub pearson: f64,
    pub spearman: f64,
    pub mean: f64,
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(dim_err!("{} predictions but {} labels", x.len(), y.len()));
    }
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(contract_err!("correlation is undefined for a constant vector"));
    }
    Ok(sxy / (sxx * syy).sqrt())
}

/// 1-based ranks, tied values sharing their average rank.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = avg;
        }
        i = j + 1;
    }
    ranks
}

pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    pearson(&average_ranks(x), &average_ranks(y))
}

/// Pearson, Spearman and their mean.
pub fn sts_scores(pred: &[f64], labels: &[f64]) -> Result<StsScores> {
    if pred.len() < 3 {
        return Err(contract_err!("need at least 3 pairs, got {}", pred.len()));
    }
    if let Some(l) = labels.iter().find(|l| !(0.0..=5.0).contains(*l)) {
        return Err(contract_err!("label {l} outside [0, 5]"));
    }
    let p = pearson(pred, labels)?;
    let s = spearman(pred, labels)?;
    Ok(StsScores {
        pearson: p,
        spearman: s,
        mean: (p + s) / 2.0,
    })
}
