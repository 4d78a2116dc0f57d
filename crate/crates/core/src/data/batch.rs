use std::collections::{HashSet, VecDeque};

use rand::seq::SliceRandom;
use rand::Rng;

use super::corpus::Corpus;
use super::scene::{SceneSpec, CAPTIONS_PER_IMAGE};
use super::{CaptionTokens, SceneImage};
use crate::error::{contract_err, Error, Result};
use crate::seed;

/// Which sample and which of its captions fill each slot of a batch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BatchPlan {
    pub entries: Vec<(usize, usize)>,
}

/// Borrowed view of one mini-batch: row `i` of images matches row `i` of
/// captions.
#[derive(Clone, Debug)]
pub struct Batch<'a> {
    pub ids: Vec<u64>,
    pub images: Vec<&'a SceneImage>,
    pub captions: Vec<&'a CaptionTokens>,
    pub specs: Vec<&'a SceneSpec>,
}

impl Batch<'_> {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

impl Corpus {
    pub fn batch(&self, plan: &BatchPlan) -> Batch<'_> {
        let mut b = Batch {
            ids: Vec::with_capacity(plan.entries.len()),
            images: Vec::with_capacity(plan.entries.len()),
            captions: Vec::with_capacity(plan.entries.len()),
            specs: Vec::with_capacity(plan.entries.len()),
        };
        for &(s, c) in &plan.entries {
            let rec = self.record(s);
            b.ids.push(rec.id);
            b.images.push(&self.images[s]);
            b.captions.push(&rec.captions[c]);
            b.specs.push(&rec.spec);
        }
        b
    }
}

/// Plans one epoch over `samples`: a seeded shuffle cut into batches of
/// `batch_size`, each image paired with one of its captions, and no two
/// samples of a batch sharing a scene spec. Samples that would collide are
/// deferred to the next batch; the final partial batch is dropped.
pub fn batch_iter(corpus: &Corpus, samples: &[usize], batch_size: usize, epoch_seed: u64) -> Result<Vec<BatchPlan>> {
    if batch_size < 2 {
        return Err(contract_err!("batch size must be at least 2, got {batch_size}"));
    }
    if batch_size > samples.len() {
        return Err(contract_err!(
            "batch size {batch_size} exceeds the {} available samples",
            samples.len()
        ));
    }
    let distinct: HashSet<&SceneSpec> = samples.iter().map(|&s| &corpus.record(s).spec).collect();
    if distinct.len() < batch_size {
        return Err(Error::Data(format!(
            "only {} distinct scenes, cannot fill batches of {batch_size} with true negatives",
            distinct.len()
        )));
    }

    let mut order = samples.to_vec();
    order.shuffle(&mut seed::rng(&[epoch_seed, 0x5801]));
    let mut queue: VecDeque<usize> = order.into();
    let mut plans = Vec::new();
    loop {
        let mut entries = Vec::with_capacity(batch_size);
        let mut seen: HashSet<&SceneSpec> = HashSet::with_capacity(batch_size);
        let mut deferred = Vec::new();
        while entries.len() < batch_size {
            let Some(s) = queue.pop_front() else { break };
            let spec = &corpus.record(s).spec;
            if seen.insert(spec) {
                let caption = seed::rng(&[epoch_seed, s as u64, 0xCA9]).random_range(0..CAPTIONS_PER_IMAGE);
                entries.push((s, caption));
            } else {
                deferred.push(s);
            }
        }
        if entries.len() < batch_size {
            break;
        }
        for s in deferred.into_iter().rev() {
            queue.push_front(s);
        }
        plans.push(BatchPlan { entries });
    }
    Ok(plans)
}
