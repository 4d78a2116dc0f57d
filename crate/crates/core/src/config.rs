//! Run configuration: one JSON document with a section per module. Missing
//! fields take their defaults; unknown fields are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::augment::{TextAugConfig, VisualAugConfig};
use crate::bench::BenchConfig;
use crate::data::GeneratorConfig;
use crate::encoders::EncoderConfig;
use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::objectives::ObjectiveConfig;
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Corpus size used by `gen-data` and by commands that generate on the fly.
    pub samples: usize,
    pub generator: GeneratorConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            samples: 2000,
            generator: GeneratorConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub visual: VisualAugConfig,
    pub text: TextAugConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub encoder: EncoderConfig,
    pub objective: ObjectiveConfig,
    pub augment: AugmentConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub bench: BenchConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            data: DataConfig::default(),
            encoder: EncoderConfig::default(),
            objective: ObjectiveConfig::default(),
            augment: AugmentConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            bench: BenchConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Every failing field with the reason, including cross-section
    /// consistency checks. Empty when the config is usable.
    pub fn problems(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        if self.data.samples == 0 {
            out.push(("data.samples".into(), "must be positive".into()));
        }
        if let Err(e) = self.data.generator.validate() {
            out.push(("data.generator".into(), e.to_string()));
        }
        out.extend(self.encoder.problems());
        out.extend(self.objective.problems());
        out.extend(self.augment.visual.problems());
        out.extend(self.augment.text.problems());
        out.extend(self.train.problems());
        out.extend(self.bench.problems());
        if self.eval.map_k == 0 {
            out.push(("eval.map_k".into(), "must be positive".into()));
        }

        let size = self.encoder.image_size;
        if self.data.generator.image_size != size {
            out.push((
                "data.generator.image_size".into(),
                format!("{} differs from encoder.image_size {size}", self.data.generator.image_size),
            ));
        }
        if self.augment.visual.output_size != size {
            out.push((
                "augment.visual.output_size".into(),
                format!("{} differs from encoder.image_size {size}", self.augment.visual.output_size),
            ));
        }
        if self.augment.text.vocab_size != self.encoder.vocab_size {
            out.push((
                "augment.text.vocab_size".into(),
                format!("{} differs from encoder.vocab_size {}", self.augment.text.vocab_size, self.encoder.vocab_size),
            ));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            return Ok(());
        }
        let lines: Vec<String> = p.iter().map(|(f, r)| format!("{f}: {r}")).collect();
        Err(Error::Config(lines.join("; ")))
    }
}

/// Parses and validates, returning the normalized config.
pub fn validate_config(text: &str) -> Result<RunConfig> {
    let cfg = RunConfig::from_json(text)?;
    cfg.validate()?;
    Ok(cfg)
}
