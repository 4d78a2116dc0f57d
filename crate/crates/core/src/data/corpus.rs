use std::collections::BTreeSet;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::scene::{generate_scene, render_scene, GeneratorConfig, SceneSpec, CAPTIONS_PER_IMAGE};
use super::{CaptionTokens, SceneImage, Vocabulary};
use crate::error::{Error, Result};
use crate::seed;

pub const MANIFEST_VERSION: &str = "cookie-corpus/1";

const MANIFEST_FILE: &str = "manifest.jsonl";
const HEADER_FILE: &str = "corpus.json";
const IMAGE_DIR: &str = "images";

/// One line of `manifest.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusRecord {
    pub version: String,
    pub id: u64,
    pub spec: SceneSpec,
    pub captions: Vec<CaptionTokens>,
    pub render_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct CorpusHeader {
    version: String,
    seed: u64,
    count: usize,
    generator: GeneratorConfig,
    vocabulary: Vocabulary,
}

/// Index of a generated corpus: vocabulary plus one record per sample.
#[derive(Clone, Debug, PartialEq)]
pub struct CorpusManifest {
    pub version: String,
    pub seed: u64,
    pub generator: GeneratorConfig,
    pub vocabulary: Vocabulary,
    pub records: Vec<CorpusRecord>,
}

/// Manifest plus decoded images, indexed by sample id.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub manifest: CorpusManifest,
    pub images: Vec<SceneImage>,
}

/// Held-out partition of a corpus, assigned by hashing the sample id.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split `{other}` (train|val|test)"))),
        }
    }
}

/// 80/10/10 train/val/test by id hash.
pub fn split_of(id: u64) -> Split {
    match seed::splitmix64(id ^ 0x5B11_7000) % 10 {
        0..=7 => Split::Train,
        8 => Split::Val,
        _ => Split::Test,
    }
}

/// Renders `n` samples in memory. Sample `i` depends only on `(seed, i)`.
pub fn generate_corpus(n: usize, seed: u64, generator: &GeneratorConfig) -> Result<Corpus> {
    if n == 0 {
        return Err(Error::Data("corpus needs at least one sample".into()));
    }
    generator.validate()?;
    let vocabulary = Vocabulary::standard();
    let scenes: Vec<_> = (0..n as u64)
        .into_par_iter()
        .map(|id| generate_scene(seed::derive(&[seed, id]), generator, &vocabulary))
        .collect::<Result<_>>()?;
    let mut records = Vec::with_capacity(n);
    let mut images = Vec::with_capacity(n);
    for (id, s) in scenes.into_iter().enumerate() {
        records.push(CorpusRecord {
            version: MANIFEST_VERSION.to_string(),
            id: id as u64,
            spec: s.spec,
            captions: s.captions,
            render_seed: s.render_seed,
        });
        images.push(s.image);
    }
    Ok(Corpus {
        manifest: CorpusManifest {
            version: MANIFEST_VERSION.to_string(),
            seed,
            generator: generator.clone(),
            vocabulary,
            records,
        },
        images,
    })
}

/// Generates a corpus and writes it under `path`.
pub fn build_corpus(n: usize, seed: u64, generator: &GeneratorConfig, path: &Path) -> Result<CorpusManifest> {
    let corpus = generate_corpus(n, seed, generator)?;
    corpus.write(path)?;
    Ok(corpus.manifest)
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn vocabulary(&self) -> &Vocabulary {
        &self.manifest.vocabulary
    }

    pub fn record(&self, idx: usize) -> &CorpusRecord {
        &self.manifest.records[idx]
    }

    /// Sample indices belonging to a split, ascending.
    pub fn split(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| split_of(i as u64) == split).collect()
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        self.manifest.write(dir)?;
        let image_dir = dir.join(IMAGE_DIR);
        fs::create_dir_all(&image_dir).map_err(|e| Error::io(&image_dir, e))?;
        for (i, img) in self.images.iter().enumerate() {
            write_image(&image_dir.join(format!("{i}.f32")), img)?;
        }
        Ok(())
    }

    /// Loads manifest and images written by [`Corpus::write`].
    pub fn read(dir: &Path) -> Result<Self> {
        let manifest = CorpusManifest::read(dir)?;
        let image_dir = dir.join(IMAGE_DIR);
        let images = (0..manifest.records.len())
            .map(|i| read_image(&image_dir.join(format!("{i}.f32"))))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { manifest, images })
    }

    /// Rebuilds images from a manifest by re-rendering every spec.
    pub fn from_manifest(manifest: CorpusManifest) -> Self {
        let images = manifest
            .records
            .iter()
            .map(|r| render_scene(&r.spec, r.render_seed, &manifest.generator))
            .collect();
        Self { manifest, images }
    }
}

impl CorpusManifest {
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let header = CorpusHeader {
            version: self.version.clone(),
            seed: self.seed,
            count: self.records.len(),
            generator: self.generator.clone(),
            vocabulary: self.vocabulary.clone(),
        };
        let header_path = dir.join(HEADER_FILE);
        fs::write(&header_path, serde_json::to_string_pretty(&header)?).map_err(|e| Error::io(&header_path, e))?;
        let path = dir.join(MANIFEST_FILE);
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut out = BufWriter::new(file);
        for r in &self.records {
            serde_json::to_writer(&mut out, r)?;
            out.write_all(b"\n").map_err(|e| Error::io(&path, e))?;
        }
        out.flush().map_err(|e| Error::io(&path, e))
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let header_path = dir.join(HEADER_FILE);
        let text = fs::read_to_string(&header_path).map_err(|e| Error::io(&header_path, e))?;
        let header: CorpusHeader =
            serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", header_path.display())))?;
        if header.version != MANIFEST_VERSION {
            return Err(Error::Data(format!(
                "corpus version `{}` does not match `{MANIFEST_VERSION}`",
                header.version
            )));
        }
        let path = dir.join(MANIFEST_FILE);
        let file = File::open(&path).map_err(|e| Error::io(&path, e))?;
        let mut records = Vec::new();
        for (lineno, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(&path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: CorpusRecord = serde_json::from_str(&line)
                .map_err(|e| Error::Data(format!("{} line {}: {e}", path.display(), lineno + 1)))?;
            records.push(rec);
        }
        let manifest = Self {
            version: header.version,
            seed: header.seed,
            generator: header.generator,
            vocabulary: header.vocabulary,
            records,
        };
        if manifest.records.len() != header.count {
            return Err(Error::Data(format!(
                "manifest lists {} records, header promises {}",
                manifest.records.len(),
                header.count
            )));
        }
        manifest.validate()?;
        Ok(manifest)
    }

    /// Dense ids, known version, five in-vocabulary captions per record.
    pub fn validate(&self) -> Result<()> {
        let vocab = self.vocabulary.len() as u32;
        for (i, r) in self.records.iter().enumerate() {
            if r.id != i as u64 {
                return Err(Error::Data(format!("record {i} carries id {}", r.id)));
            }
            if r.version != self.version {
                return Err(Error::Data(format!("record {i} has version `{}`", r.version)));
            }
            if r.captions.len() != CAPTIONS_PER_IMAGE {
                return Err(Error::Data(format!("record {i} has {} captions", r.captions.len())));
            }
            if r.captions.iter().any(|c| c.is_empty() || c.ids().iter().any(|&t| t >= vocab)) {
                return Err(Error::Data(format!("record {i} has an empty or out-of-vocabulary caption")));
            }
            r.spec
                .validate(self.generator.grid)
                .map_err(|e| Error::Data(format!("record {i}: {e}")))?;
        }
        Ok(())
    }
}

/// Writes `H, W, C` as little-endian u32 followed by the f32 values.
pub fn write_image(path: &Path, image: &SceneImage) -> Result<()> {
    let mut buf = Vec::with_capacity(12 + image.data().len() * 4);
    for dim in [image.height(), image.width(), image.channels()] {
        buf.extend_from_slice(&(dim as u32).to_le_bytes());
    }
    for v in image.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_image(path: &Path) -> Result<SceneImage> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    if bytes.len() < 12 {
        return Err(Error::Data(format!("{}: truncated image header", path.display())));
    }
    let dim = |i: usize| u32::from_le_bytes(bytes[i * 4..i * 4 + 4].try_into().expect("4 bytes")) as usize;
    let (h, w, c) = (dim(0), dim(1), dim(2));
    let expected = h.checked_mul(w).and_then(|x| x.checked_mul(c)).and_then(|x| x.checked_mul(4));
    if expected != Some(bytes.len() - 12) {
        return Err(Error::Data(format!(
            "{}: header {h}x{w}x{c} disagrees with {} payload bytes",
            path.display(),
            bytes.len() - 12
        )));
    }
    let data = bytes[12..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
        .collect();
    SceneImage::new(h, w, c, data)
}

/// Caption pair with a graded 0-5 similarity label.
#[derive(Clone, Debug, PartialEq)]
pub struct GradedPair {
    pub a: CaptionTokens,
    pub b: CaptionTokens,
    /// `(sample, caption index)` each side was taken from.
    pub a_at: (usize, usize),
    pub b_at: (usize, usize),
    pub label: f64,
}

/// Builds text-matching pairs: two captions of one scene score 5, captions
/// of different scenes score 5 x the Jaccard overlap of their attributes.
pub fn graded_caption_pairs(corpus: &Corpus, samples: &[usize], seed: u64) -> Vec<GradedPair> {
    let mut rng = seed::rng(&[seed, 0x575]);
    let mut pairs = Vec::with_capacity(samples.len() * 2);
    for &s in samples {
        let rec = corpus.record(s);
        let i = rng.random_range(0..CAPTIONS_PER_IMAGE);
        let j = (i + rng.random_range(1..CAPTIONS_PER_IMAGE)) % CAPTIONS_PER_IMAGE;
        pairs.push(GradedPair {
            a: rec.captions[i].clone(),
            b: rec.captions[j].clone(),
            a_at: (s, i),
            b_at: (s, j),
            label: 5.0,
        });
        if samples.len() > 1 {
            let mut other = samples[rng.random_range(0..samples.len())];
            while other == s {
                other = samples[rng.random_range(0..samples.len())];
            }
            let orec = corpus.record(other);
            let label = if orec.spec == rec.spec {
                5.0
            } else {
                5.0 * jaccard(&rec.spec.attribute_words(), &orec.spec.attribute_words())
            };
            let k = rng.random_range(0..CAPTIONS_PER_IMAGE);
            pairs.push(GradedPair {
                a: rec.captions[i].clone(),
                b: orec.captions[k].clone(),
                a_at: (s, i),
                b_at: (other, k),
                label,
            });
        }
    }
    pairs
}

fn jaccard(a: &BTreeSet<&str>, b: &BTreeSet<&str>) -> f64 {
    let inter = a.intersection(b).count() as f64;
    let union = a.union(b).count() as f64;
    if union == 0.0 {
        0.0
    } else {
        inter / union
    }
}
