//! Inference-cost benchmark: independent encoding plus a cosine matrix
//! against a simulated joint encoder that must see every image-caption pair.

use std::fmt::Write as _;
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{CaptionTokens, SceneImage};
use crate::encoders::CookieModel;
use crate::error::{contract_err, Error, Result};
use crate::seed;
use crate::tensor::{PoolStrategy, Real, Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BenchMode {
    #[serde(rename = "double-stream")]
    DoubleStream,
    #[serde(rename = "one-stream-sim")]
    OneStreamSim,
}

impl BenchMode {
    pub fn label(self) -> &'static str {
        match self {
            BenchMode::DoubleStream => "double-stream",
            BenchMode::OneStreamSim => "one-stream-sim",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    /// Gallery sizes, ascending.
    pub sizes: Vec<usize>,
    pub repeats: usize,
    /// Untimed runs before the measured ones.
    pub warmup: usize,
    /// Worker threads; 1 gives reproducible timings.
    pub threads: usize,
    /// Pairs per joint forward batch in the one-stream simulation.
    pub pair_chunk: usize,
    /// Refuse sizes whose working set would exceed this many MiB.
    pub memory_cap_mb: usize,
    pub pool: PoolStrategy,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            sizes: vec![64, 128, 256, 512],
            repeats: 5,
            warmup: 1,
            threads: 1,
            pair_chunk: 64,
            memory_cap_mb: 2048,
            pool: PoolStrategy::Max,
        }
    }
}

impl BenchConfig {
    pub fn problems(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        if self.sizes.is_empty() || self.sizes.contains(&0) {
            out.push(("bench.sizes".into(), "need at least one positive size".into()));
        } else if self.sizes.windows(2).any(|w| w[0] >= w[1]) {
            out.push(("bench.sizes".into(), format!("{:?} is not strictly ascending", self.sizes)));
        }
        if self.repeats < 5 {
            out.push(("bench.repeats".into(), format!("{} is below the minimum of 5", self.repeats)));
        }
        if self.threads == 0 {
            out.push(("bench.threads".into(), "must be positive".into()));
        }
        if self.pair_chunk == 0 {
            out.push(("bench.pair_chunk".into(), "must be positive".into()));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        match self.problems().first() {
            None => Ok(()),
            Some((f, r)) => Err(Error::Config(format!("{f}: {r}"))),
        }
    }
}

/// Timings of one mode across gallery sizes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingRecord {
    pub mode: BenchMode,
    pub sizes: Vec<usize>,
    pub median_ms: Vec<f64>,
    pub min_ms: Vec<f64>,
    pub max_ms: Vec<f64>,
    /// Encoder calls per run: item encodes for double-stream, joint
    /// forwards for the simulation.
    pub calls: Vec<u64>,
    /// Sum of all scores of the last run, for determinism checks.
    pub score_sum: Vec<f64>,
    pub threads: usize,
}

impl TimingRecord {
    pub fn csv_rows(&self, out: &mut String) {
        for k in 0..self.sizes.len() {
            let _ = writeln!(
                out,
                "{},{},{:.4},{:.4},{:.4},{}",
                self.mode.label(),
                self.sizes[k],
                self.median_ms[k],
                self.min_ms[k],
                self.max_ms[k],
                self.calls[k]
            );
        }
    }
}

pub const CSV_HEADER: &str = "mode,n,median_ms,min_ms,max_ms,calls";

/// Least-squares fit of `log(time) = slope * log(n) + c`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingFit {
    pub slope: f64,
    pub stderr: f64,
    pub intercept: f64,
    pub r2: f64,
}

pub fn fit_power_law(sizes: &[usize], times: &[f64]) -> Result<ScalingFit> {
    if sizes.len() != times.len() {
        return Err(contract_err!("{} sizes but {} times", sizes.len(), times.len()));
    }
    if sizes.len() < 4 {
        return Err(contract_err!("need at least 4 sizes to fit an exponent, got {}", sizes.len()));
    }
    let (lo, hi) = (
        *sizes.iter().min().unwrap() as f64,
        *sizes.iter().max().unwrap() as f64,
    );
    if lo <= 0.0 || hi < 8.0 * lo {
        return Err(contract_err!("sizes must span at least 8x, got {lo}..{hi}"));
    }
    if let Some(t) = times.iter().find(|t| !(**t > 0.0 && t.is_finite())) {
        return Err(contract_err!("timings must be positive, got {t}"));
    }
    let x: Vec<f64> = sizes.iter().map(|&n| (n as f64).ln()).collect();
    let y: Vec<f64> = times.iter().map(|t| t.ln()).collect();
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let sxy: f64 = x.iter().zip(&y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let sse: f64 = x.iter().zip(&y).map(|(a, b)| (b - intercept - slope * a).powi(2)).sum();
    let stderr = (sse / (n - 2.0) / sxx).sqrt();
    let r2 = if syy > 0.0 { 1.0 - sse / syy } else { 1.0 };
    Ok(ScalingFit {
        slope,
        stderr,
        intercept,
        r2,
    })
}

/// Exponent of the median times in `record`.
pub fn fit_scaling_exponent(record: &TimingRecord) -> Result<ScalingFit> {
    fit_power_law(&record.sizes, &record.median_ms)
}

/// Rough peak working set of one run in bytes.
fn working_set<T: Real>(model: &CookieModel<T>, mode: BenchMode, n: usize, chunk: usize) -> usize {
    let c = &model.config;
    let tokens = c.num_patches() + c.max_words;
    let width = c.model_dim.max(c.ff_dim).max(c.patch_len());
    let per_item = tokens * width * 24 * std::mem::size_of::<T>();
    let scores = n * n * std::mem::size_of::<T>();
    match mode {
        BenchMode::DoubleStream => scores + 64 * per_item * 2,
        BenchMode::OneStreamSim => scores + 2 * n * tokens * c.model_dim * 4 + chunk * per_item * 2,
    }
}

/// Inputs are referenced, not copied, so data loading stays outside timing.
pub struct BenchInputs<'a> {
    pub images: Vec<&'a SceneImage>,
    pub captions: Vec<&'a CaptionTokens>,
}

/// Double-stream retrieval: encode every item once, then the n x n cosine
/// matrix. Returns the matrix and the encoder calls made.
pub fn double_stream_scores<T: Real>(
    model: &CookieModel<T>,
    images: &[&SceneImage],
    captions: &[&CaptionTokens],
    pool: PoolStrategy,
) -> Result<(Tensor<T>, u64)> {
    let before = model.counters.images() + model.counters.texts();
    let img = normalized(model.embed_images(images, pool)?);
    let txt = normalized(model.embed_texts(captions, pool)?);
    let scores = img.matmul(&txt.transpose()?)?;
    let calls = model.counters.images() + model.counters.texts() - before;
    Ok((scores, calls))
}

fn normalized<T: Real>(mut x: Tensor<T>) -> Tensor<T> {
    let d = x.cols();
    for row in x.data_mut().chunks_mut(d) {
        let norm = row.iter().fold(T::zero(), |a, &v| a + v * v).sqrt();
        if norm > T::zero() {
            row.iter_mut().for_each(|v| *v = *v / norm);
        }
    }
    x
}

/// Joint-encoder stand-in: each (image, caption) pair is concatenated into
/// one token sequence and run through the shared transformer stack, then
/// pooled and scored along a fixed direction.
pub struct OneStreamSim<'m, T> {
    model: &'m CookieModel<T>,
    head: Vec<T>,
    forwards: AtomicU64,
}

impl<'m, T: Real> OneStreamSim<'m, T> {
    pub fn new(model: &'m CookieModel<T>, seed: u64) -> Self {
        let mut rng = seed::rng(&[seed, 0xB0E5]);
        let d = model.config.model_dim;
        let raw: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let norm = raw.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        Self {
            model,
            head: raw.iter().map(|x| T::lit(x / norm)).collect(),
            forwards: AtomicU64::new(0),
        }
    }

    pub fn forwards(&self) -> u64 {
        self.forwards.load(Ordering::Relaxed)
    }

    /// Scores of all n_img x n_cap pairs, `chunk` pairs per batched forward.
    pub fn scores(
        &self,
        images: &[&SceneImage],
        captions: &[&CaptionTokens],
        pool: PoolStrategy,
        chunk: usize,
    ) -> Result<Tensor<T>> {
        let m = self.model;
        let d = m.config.model_dim;
        let np = m.config.num_patches();
        let nw = m.config.max_words;
        let len = np + nw;

        // per-item token features are shared by all pairs of that item
        let mut tape = Tape::new();
        let patches = tape.constant(m.patchify(images)?);
        let v = m.visual_backbone(&mut tape, patches)?;
        let v = m.project_visual(&mut tape, v)?;
        let (ids, mask) = m.caption_ids(captions)?;
        let t = m.text_backbone(&mut tape, &ids, &mask, None)?;
        let t = m.project_textual(&mut tape, t)?;
        let (vis, txt) = (tape.value(v).data().to_vec(), tape.value(t).data().to_vec());
        drop(tape);

        let pairs: Vec<(usize, usize)> = (0..images.len())
            .flat_map(|i| (0..captions.len()).map(move |j| (i, j)))
            .collect();
        let mut out = Vec::with_capacity(pairs.len());
        for block in pairs.chunks(chunk.max(1)) {
            let b = block.len();
            let mut x = Vec::with_capacity(b * len * d);
            let mut joint_mask = Vec::with_capacity(b * len);
            for &(i, j) in block {
                x.extend_from_slice(&vis[i * np * d..(i + 1) * np * d]);
                x.extend_from_slice(&txt[j * nw * d..(j + 1) * nw * d]);
                joint_mask.extend(std::iter::repeat_n(true, np));
                joint_mask.extend_from_slice(&mask[j * nw..(j + 1) * nw]);
            }
            let mut tape = Tape::new();
            let x = tape.constant(Tensor::new(vec![b, len, d], x)?);
            let y = m.ws_encode(&mut tape, x, &joint_mask, None)?;
            let pooled = m.pool(&mut tape, y, &joint_mask, pool)?;
            for row in tape.value(pooled).data().chunks(d) {
                out.push(row.iter().zip(&self.head).fold(T::zero(), |a, (&x, &h)| a + x * h));
            }
            self.forwards.fetch_add(b as u64, Ordering::Relaxed);
        }
        Tensor::new(vec![images.len(), captions.len()], out)
    }
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Times `mode` at every configured size on the first `n` inputs, inside a
/// dedicated pool of `config.threads` workers.
pub fn bench_retrieval<T: Real>(
    model: &CookieModel<T>,
    inputs: &BenchInputs<'_>,
    mode: BenchMode,
    config: &BenchConfig,
    seed: u64,
) -> Result<TimingRecord> {
    config.validate()?;
    let largest = *config.sizes.last().unwrap();
    if inputs.images.len() < largest || inputs.captions.len() < largest {
        return Err(Error::Benchmark(format!(
            "largest size {largest} needs that many images and captions, got {} and {}",
            inputs.images.len(),
            inputs.captions.len()
        )));
    }
    let cap = config.memory_cap_mb * (1 << 20);
    if let Some(&n) = config
        .sizes
        .iter()
        .find(|&&n| working_set(model, mode, n, config.pair_chunk) > cap)
    {
        let fits = config
            .sizes
            .iter()
            .copied()
            .filter(|&s| working_set(model, mode, s, config.pair_chunk) <= cap)
            .max();
        return Err(Error::Benchmark(format!(
            "size {n} would exceed the {} MiB memory cap; cap sizes at {}",
            config.memory_cap_mb,
            fits.map_or("a smaller value".to_string(), |s| s.to_string())
        )));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.threads)
        .build()
        .map_err(|e| Error::Benchmark(format!("thread pool: {e}")))?;

    let mut rec = TimingRecord {
        mode,
        sizes: config.sizes.clone(),
        median_ms: Vec::new(),
        min_ms: Vec::new(),
        max_ms: Vec::new(),
        calls: Vec::new(),
        score_sum: Vec::new(),
        threads: config.threads,
    };
    pool.install(|| -> Result<()> {
        for &n in &config.sizes {
            let (imgs, caps) = (&inputs.images[..n], &inputs.captions[..n]);
            let run = || -> Result<(f64, u64, f64)> {
                let start = Instant::now();
                let (scores, calls) = match mode {
                    BenchMode::DoubleStream => double_stream_scores(model, imgs, caps, config.pool)?,
                    BenchMode::OneStreamSim => {
                        let sim = OneStreamSim::new(model, seed);
                        let s = sim.scores(imgs, caps, config.pool, config.pair_chunk)?;
                        (s, sim.forwards())
                    }
                };
                let ms = start.elapsed().as_secs_f64() * 1e3;
                let sum = scores.data().iter().map(|x| x.as_f64()).sum();
                Ok((ms, calls, sum))
            };
            for _ in 0..config.warmup {
                run()?;
            }
            let mut times = Vec::with_capacity(config.repeats);
            let mut last = (0, 0.0);
            for _ in 0..config.repeats {
                let (ms, calls, sum) = run()?;
                if !times.is_empty() && (calls, sum.to_bits()) != (last.0, f64::to_bits(last.1)) {
                    return Err(Error::Benchmark(format!("{} at n={n} is not deterministic", mode.label())));
                }
                times.push(ms.max(1e-6));
                last = (calls, sum);
            }
            times.sort_by(f64::total_cmp);
            rec.median_ms.push(median(&times));
            rec.min_ms.push(times[0]);
            rec.max_ms.push(*times.last().unwrap());
            rec.calls.push(last.0);
            rec.score_sum.push(last.1);
            log::info!("{} n={n}: median {:.2} ms", mode.label(), median(&times));
        }
        Ok(())
    })?;
    Ok(rec)
}

/// Both modes plus their fitted exponents.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchSummary {
    pub double_stream: TimingRecord,
    pub one_stream_sim: TimingRecord,
    pub double_stream_fit: Option<ScalingFit>,
    pub one_stream_fit: Option<ScalingFit>,
    /// double-stream / one-stream median time at the largest size.
    pub largest_ratio: f64,
}

impl BenchSummary {
    pub fn csv(&self) -> String {
        let mut s = format!("{CSV_HEADER}\n");
        self.double_stream.csv_rows(&mut s);
        self.one_stream_sim.csv_rows(&mut s);
        s
    }
}

pub fn bench_both<T: Real>(
    model: &CookieModel<T>,
    inputs: &BenchInputs<'_>,
    config: &BenchConfig,
    seed: u64,
) -> Result<BenchSummary> {
    let double_stream = bench_retrieval(model, inputs, BenchMode::DoubleStream, config, seed)?;
    let one_stream_sim = bench_retrieval(model, inputs, BenchMode::OneStreamSim, config, seed)?;
    let fit = |r: &TimingRecord| fit_scaling_exponent(r).ok();
    let k = config.sizes.len() - 1;
    Ok(BenchSummary {
        double_stream_fit: fit(&double_stream),
        one_stream_fit: fit(&one_stream_sim),
        largest_ratio: double_stream.median_ms[k] / one_stream_sim.median_ms[k],
        double_stream,
        one_stream_sim,
    })
}
