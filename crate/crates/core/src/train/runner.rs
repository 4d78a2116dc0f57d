use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;

use super::checkpoint::{save_checkpoint, Checkpoint, CheckpointMeta};
use super::optim::{adamw_step, clip_global_norm, lr_schedule, OptimState};
use super::WithinModalBatch;
use crate::config::RunConfig;
use crate::data::{batch_iter, BatchPlan, Corpus, Split};
use crate::encoders::CookieModel;
use crate::error::{Error, Result};
use crate::eval::validation_rsum;
use crate::objectives::{hard_triplet_loss, pretrain_loss, Augmenter};
use crate::seed;
use crate::tensor::{PoolStrategy, Tape, Var};

const TAG_EPOCH: u64 = 0xE90C;
const TAG_WITHIN: u64 = 0x3171;
const TAG_STEP: u64 = 0x57E9;
const TAG_INIT: u64 = 0x1417;

/// Records one step: `(tape, model, batch, within-modal batch, step seed)`
/// to the total loss node plus the five logged components.
type StepLoss<'a> = dyn Fn(&mut Tape<f32>, &CookieModel<f32>, &BatchPlan, &BatchPlan, u64) -> Result<(Var, [f64; 5])> + 'a;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Pretrain,
    Finetune,
}

/// One line of the JSON-lines training log.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    pub phase: Phase,
    pub stage: u8,
    pub epoch: usize,
    pub steps: usize,
    /// Learning rate of the last step.
    pub lr: f64,
    pub loss_i2t: f64,
    pub loss_t2i: f64,
    pub loss_visual: f64,
    pub loss_textual: f64,
    pub loss_total: f64,
    pub grad_norm: f64,
    pub val_rsum: Option<f64>,
    pub wall_time_s: f64,
    /// Augmentations performed during this epoch.
    pub augment_calls: u64,
}

pub struct TrainOutcome {
    /// Weights after the last step.
    pub model: CookieModel<f32>,
    /// Weights of the epoch with the highest validation Rsum.
    pub best: Option<(f64, CookieModel<f32>)>,
    pub optim: OptimState<f32>,
    pub log: Vec<EpochRecord>,
}

impl TrainOutcome {
    /// Best-validation weights when validation ran, otherwise the final ones.
    pub fn selected(&self) -> &CookieModel<f32> {
        self.best.as_ref().map_or(&self.model, |b| &b.1)
    }
}

struct Run<'a> {
    cfg: &'a RunConfig,
    corpus: &'a Corpus,
    train: Vec<usize>,
    val: Vec<usize>,
    out: Option<PathBuf>,
    log_file: Option<File>,
    log: Vec<EpochRecord>,
    best: Option<(f64, CookieModel<f32>)>,
    global_step: u64,
}

struct StageSpec {
    phase: Phase,
    stage: u8,
    epochs: usize,
    batch: usize,
    lr: f64,
    warmup: f64,
    pool: PoolStrategy,
}

impl<'a> Run<'a> {
    fn new(cfg: &'a RunConfig, corpus: &'a Corpus, out: Option<&Path>, log_name: &str) -> Result<Self> {
        cfg.validate()?;
        let train = corpus.split(Split::Train);
        let val = corpus.split(Split::Val);
        let log_file = match out {
            Some(dir) => {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                let p = dir.join(log_name);
                Some(File::create(&p).map_err(|e| Error::io(&p, e))?)
            }
            None => None,
        };
        Ok(Self {
            cfg,
            corpus,
            train,
            val,
            out: out.map(Path::to_path_buf),
            log_file,
            log: Vec::new(),
            best: None,
            global_step: 0,
        })
    }

    fn checkpoint(&self, model: &CookieModel<f32>, optim: &OptimState<f32>, rec: &EpochRecord, file: &str) -> Result<()> {
        let Some(dir) = &self.out else { return Ok(()) };
        let ckpt = Checkpoint {
            meta: CheckpointMeta {
                encoder: model.config.clone(),
                phase: match rec.phase {
                    Phase::Pretrain => "pretrain".into(),
                    Phase::Finetune => "finetune".into(),
                },
                stage: rec.stage,
                epoch: rec.epoch,
                global_step: self.global_step,
                val_rsum: rec.val_rsum,
                seed: self.cfg.seed,
                optimizer: None,
                optimizer_step: 0,
            },
            params: model.store.clone(),
            optim: Some(optim.clone()),
        };
        save_checkpoint(&dir.join(file), &ckpt)
    }

    /// Runs the epochs of one stage.
    fn stage(
        &mut self,
        spec: &StageSpec,
        model: &mut CookieModel<f32>,
        optim: &mut OptimState<f32>,
        augmenter: &Augmenter,
        loss: &StepLoss<'_>,
        plans_for: &dyn Fn(usize) -> Result<Vec<(BatchPlan, BatchPlan)>>,
    ) -> Result<()> {
        if spec.epochs == 0 {
            return Ok(());
        }
        let per_epoch = self.train.len() / spec.batch;
        let total = spec.epochs * per_epoch.max(1);
        let mut step = 0usize;
        let tc = &self.cfg.train;
        for epoch in 0..spec.epochs {
            let started = Instant::now();
            let calls_before = augmenter.calls();
            let plans = plans_for(epoch)?;
            let mut sums = [0.0f64; 5];
            let mut norm_sum = 0.0;
            let mut lr = 0.0;
            for (k, (plan, within)) in plans.iter().enumerate() {
                lr = lr_schedule(step, total, spec.lr, spec.warmup, tc.lr_decay);
                let step_seed = seed::derive(&[self.cfg.seed, TAG_STEP, spec.stage as u64, epoch as u64, k as u64]);
                let fail = |e: Error| {
                    Error::Training(format!(
                        "{:?} stage {} epoch {} step {k}: {e}",
                        spec.phase, spec.stage, epoch
                    ))
                };
                let mut tape = Tape::new();
                let (total_var, parts) = loss(&mut tape, model, plan, within, step_seed).map_err(fail)?;
                if !parts.iter().all(|v| v.is_finite()) {
                    return Err(fail(Error::NonFinite { op: "loss".into() }));
                }
                let mut grads = tape.backward(total_var, &model.store).map_err(fail)?;
                if let Some(id) = grads.first_non_finite() {
                    return Err(fail(Error::Training(format!(
                        "non-finite gradient for `{}`",
                        model.store.name(id)
                    ))));
                }
                norm_sum += clip_global_norm(&mut grads, tc.clip_norm);
                adamw_step(&mut model.store, &grads, optim, lr).map_err(fail)?;
                for (s, v) in sums.iter_mut().zip(parts) {
                    *s += v;
                }
                step += 1;
                self.global_step += 1;
            }
            let n = plans.len().max(1) as f64;
            let val_rsum = if tc.validate && self.val.len() >= 2 {
                Some(validation_rsum(model, self.corpus, &self.val, spec.pool)?.1)
            } else {
                None
            };
            let rec = EpochRecord {
                phase: spec.phase,
                stage: spec.stage,
                epoch,
                steps: plans.len(),
                lr,
                loss_i2t: sums[0] / n,
                loss_t2i: sums[1] / n,
                loss_visual: sums[2] / n,
                loss_textual: sums[3] / n,
                loss_total: sums[4] / n,
                grad_norm: norm_sum / n,
                val_rsum,
                wall_time_s: started.elapsed().as_secs_f64(),
                augment_calls: augmenter.calls() - calls_before,
            };
            log::info!(
                "{:?} stage {} epoch {}: loss {:.4} val rsum {:?}",
                rec.phase,
                rec.stage,
                rec.epoch,
                rec.loss_total,
                rec.val_rsum
            );
            if let Some(f) = &mut self.log_file {
                let line = serde_json::to_string(&rec)?;
                writeln!(f, "{line}").map_err(|e| Error::io("training log", e))?;
            }
            let prefix = match spec.phase {
                Phase::Pretrain => "pretrain",
                Phase::Finetune => "finetune",
            };
            self.checkpoint(model, optim, &rec, &format!("{prefix}_last.ckpt"))?;
            if let Some(r) = val_rsum {
                if self.best.as_ref().is_none_or(|b| r > b.0) {
                    self.best = Some((r, model.clone()));
                    self.checkpoint(model, optim, &rec, &format!("{prefix}_best.ckpt"))?;
                }
            }
            self.log.push(rec);
        }
        Ok(())
    }
}

/// Two-stage pre-training from a fresh initialization: cross-modal InfoNCE
/// only, then with the within-modal terms added. Writes `pretrain_log.jsonl`
/// and checkpoints when `out` is given.
pub fn run_pretrain(cfg: &RunConfig, corpus: &Corpus, out: Option<&Path>) -> Result<TrainOutcome> {
    let mut run = Run::new(cfg, corpus, out, "pretrain_log.jsonl")?;
    let tc = &cfg.train;
    let mut model = CookieModel::<f32>::new(cfg.encoder.clone(), seed::derive(&[cfg.seed, TAG_INIT]))?;
    let augmenter = Augmenter::new(cfg.augment.visual.clone(), cfg.augment.text.clone());
    let mut optim = OptimState::new(&model.store, tc.optimizer);
    let train = run.train.clone();

    for stage in [1u8, 2] {
        let epochs = if stage == 1 { tc.stage1_epochs } else { tc.stage2_epochs };
        if stage == 2 && tc.reset_optimizer {
            optim = OptimState::new(&model.store, tc.optimizer);
        }
        let spec = StageSpec {
            phase: Phase::Pretrain,
            stage,
            epochs,
            batch: tc.batch_size,
            lr: tc.lr,
            warmup: tc.pretrain_warmup,
            pool: cfg.objective.pretrain_pool,
        };
        let epoch_seed = |tag: u64, epoch: usize| seed::derive(&[cfg.seed, tag, stage as u64, epoch as u64]);
        let plans_for = |epoch: usize| {
            let plans = batch_iter(corpus, &train, tc.batch_size, epoch_seed(TAG_EPOCH, epoch))?;
            let within = match tc.within_modal {
                WithinModalBatch::Independent if stage == 2 => {
                    batch_iter(corpus, &train, tc.batch_size, epoch_seed(TAG_WITHIN, epoch))?
                }
                _ => plans.clone(),
            };
            Ok(plans
                .into_iter()
                .enumerate()
                .map(|(k, p)| (p, within[k % within.len()].clone()))
                .collect())
        };
        let loss = |tape: &mut Tape<f32>, model: &CookieModel<f32>, plan: &BatchPlan, within: &BatchPlan, step_seed: u64| {
            let batch = corpus.batch(plan);
            let within = corpus.batch(within);
            let mut rng = seed::rng(&[step_seed, 0xD0]);
            let terms = pretrain_loss(
                tape,
                model,
                &batch,
                &within,
                stage,
                &cfg.objective,
                &augmenter,
                step_seed,
                Some(&mut rng),
            )?;
            Ok((terms.total, terms.values(tape)))
        };
        run.stage(&spec, &mut model, &mut optim, &augmenter, &loss, &plans_for)?;
    }
    Ok(TrainOutcome {
        model,
        best: run.best,
        optim,
        log: run.log,
    })
}

/// Triplet fine-tuning with hardest in-batch negatives, starting from
/// `init` (or a fresh initialization) with a fresh optimizer. Writes
/// `finetune_log.jsonl` and checkpoints when `out` is given.
pub fn run_finetune(
    cfg: &RunConfig,
    corpus: &Corpus,
    init: Option<&CookieModel<f32>>,
    out: Option<&Path>,
) -> Result<TrainOutcome> {
    let mut run = Run::new(cfg, corpus, out, "finetune_log.jsonl")?;
    let tc = &cfg.train;
    let mut model = match init {
        Some(m) => {
            if m.config != cfg.encoder {
                return Err(Error::Config("initial weights were built with a different encoder config".into()));
            }
            m.clone()
        }
        None => CookieModel::<f32>::new(cfg.encoder.clone(), seed::derive(&[cfg.seed, TAG_INIT]))?,
    };
    let mut optim = OptimState::new(&model.store, tc.optimizer);
    let augmenter = Augmenter::new(cfg.augment.visual.clone(), cfg.augment.text.clone());
    let train = run.train.clone();
    let pool = cfg.objective.match_pool;
    let spec = StageSpec {
        phase: Phase::Finetune,
        stage: 0,
        epochs: tc.finetune_epochs,
        batch: tc.finetune_batch_size,
        lr: tc.finetune_lr,
        warmup: tc.finetune_warmup,
        pool,
    };
    let plans_for = |epoch: usize| {
        let epoch_seed = seed::derive(&[cfg.seed, TAG_EPOCH, 3, epoch as u64]);
        let plans = batch_iter(corpus, &train, tc.finetune_batch_size, epoch_seed)?;
        Ok(plans.into_iter().map(|p| (p.clone(), p)).collect())
    };
    let loss = |tape: &mut Tape<f32>, model: &CookieModel<f32>, plan: &BatchPlan, _: &BatchPlan, step_seed: u64| {
        let batch = corpus.batch(plan);
        let mut rng = seed::rng(&[step_seed, 0xD0]);
        let i = model.encode_images(tape, &batch.images, pool, Some(&mut rng))?;
        let t = model.encode_texts(tape, &batch.captions, pool, Some(&mut rng))?;
        let l = hard_triplet_loss(tape, i, t, cfg.objective.alpha)?;
        let v = tape.value(l).item() as f64;
        Ok((l, [0.0, 0.0, 0.0, 0.0, v]))
    };
    run.stage(&spec, &mut model, &mut optim, &augmenter, &loss, &plans_for)?;
    Ok(TrainOutcome {
        model,
        best: run.best,
        optim,
        log: run.log,
    })
}
