//! Brute-force reimplementations of the retrieval and correlation metrics.

use cookie_kit::eval::{map_at_k, pearson, recall_at_k, spearman, SimilarityMatrix};
use cookie_kit::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct Instance {
    pub scores: Vec<Vec<f64>>,
    pub relevant: Vec<Vec<usize>>,
}

/// Random instance with coarse scores so ties are common.
pub fn instance(rng: &mut ChaCha8Rng) -> Instance {
    let q = rng.random_range(1..=50);
    let g = rng.random_range(2..=250);
    let levels = rng.random_range(3..40) as f64;
    let scores: Vec<Vec<f64>> = (0..q)
        .map(|_| {
            (0..g)
                .map(|_| (rng.random_range(-1.0..1.0) * levels).round() / levels)
                .collect()
        })
        .collect();
    let relevant = (0..q)
        .map(|_| {
            let r = rng.random_range(1..=g.min(6));
            let mut picked: Vec<usize> = Vec::new();
            while picked.len() < r {
                let j = rng.random_range(0..g);
                if !picked.contains(&j) {
                    picked.push(j);
                }
            }
            picked
        })
        .collect();
    Instance { scores, relevant }
}

pub fn matrix(inst: &Instance) -> SimilarityMatrix {
    SimilarityMatrix::new(Tensor::from_rows(&inst.scores).unwrap(), inst.relevant.clone()).unwrap()
}

/// Stable sort by descending score keeps lower indices first on ties.
pub fn oracle_order(row: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap());
    idx
}

pub fn oracle_first_ranks(inst: &Instance) -> Vec<usize> {
    inst.scores
        .iter()
        .zip(&inst.relevant)
        .map(|(row, rel)| oracle_order(row).iter().position(|j| rel.contains(j)).unwrap())
        .collect()
}

pub fn oracle_recall(inst: &Instance, k: usize) -> f64 {
    let hits = inst
        .scores
        .iter()
        .zip(&inst.relevant)
        .filter(|(row, rel)| oracle_order(row)[..k].iter().any(|j| rel.contains(j)))
        .count();
    100.0 * hits as f64 / inst.scores.len() as f64
}

pub fn oracle_map(inst: &Instance, k: usize) -> f64 {
    let mut total = 0.0;
    for (row, rel) in inst.scores.iter().zip(&inst.relevant) {
        let order = oracle_order(row);
        let mut ap = 0.0;
        for cut in 1..=k {
            if rel.contains(&order[cut - 1]) {
                let precision = order[..cut].iter().filter(|j| rel.contains(j)).count() as f64 / cut as f64;
                ap += precision;
            }
        }
        total += ap / rel.len().min(k) as f64;
    }
    total / inst.scores.len() as f64
}

pub fn oracle_pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (sx, sy) = (x.iter().sum::<f64>(), y.iter().sum::<f64>());
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    let sxx: f64 = x.iter().map(|a| a * a).sum();
    let syy: f64 = y.iter().map(|b| b * b).sum();
    (n * sxy - sx * sy) / ((n * sxx - sx * sx).sqrt() * (n * syy - sy * sy).sqrt())
}

/// Fractional ranks by counting: 1 + smaller + (equal - 1) / 2.
pub fn oracle_ranks(x: &[f64]) -> Vec<f64> {
    x.iter()
        .map(|&v| {
            let below = x.iter().filter(|&&w| w < v).count() as f64;
            let equal = x.iter().filter(|&&w| w == v).count() as f64;
            1.0 + below + (equal - 1.0) / 2.0
        })
        .collect()
}


/// Compares ranks, recall and MAP on `count` random instances.
pub fn check_retrieval_metrics(count: usize, seed: u64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for n in 0..count {
        let inst = instance(&mut rng);
        let sim = matrix(&inst);
        if sim.first_relevant_ranks() != oracle_first_ranks(&inst) {
            return Err(format!("instance {n}: first relevant ranks differ"));
        }
        let g = inst.scores[0].len();
        for k in [1, 2, 5, 10, g].into_iter().filter(|&k| k <= g) {
            let dr = (recall_at_k(&sim, k).unwrap() - oracle_recall(&inst, k)).abs();
            let dm = (map_at_k(&sim, k).unwrap() - oracle_map(&inst, k)).abs();
            if dr >= 1e-12 || dm >= 1e-12 {
                return Err(format!("instance {n}, K = {k}: recall off by {dr:e}, MAP off by {dm:e}"));
            }
        }
    }
    Ok(())
}

/// Compares Pearson and Spearman on `count` random tied samples.
pub fn check_correlations(count: usize, seed: u64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut done = 0;
    while done < count {
        let n = rng.random_range(3..=250);
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(0..=10) as f64 / 2.0).collect();
        let y: Vec<f64> = x.iter().map(|v| v + rng.random_range(-2.0..2.0)).collect();
        if x.iter().all(|v| *v == x[0]) {
            continue;
        }
        let dp = (pearson(&x, &y).unwrap() - oracle_pearson(&x, &y)).abs();
        let ds = (spearman(&x, &y).unwrap() - oracle_pearson(&oracle_ranks(&x), &oracle_ranks(&y))).abs();
        if dp >= 1e-12 || ds >= 1e-12 {
            return Err(format!("sample {done}: pearson off by {dp:e}, spearman off by {ds:e}"));
        }
        done += 1;
    }
    Ok(())
}
