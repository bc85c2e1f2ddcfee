//! Declarative run configuration, one TOML document per training run.
//!
//! ```toml
//! supervision = "M1"          # or: registry = "metrics.json"
//! grouping = "C1"
//! output_dir = "runs/m1"
//!
//! [data]
//! manifest = "corpus/manifest.jsonl"
//!
//! [[encoders]]
//! kind = "learnable_spectrogram"
//! num_layers = 2
//! d = 32
//! stride_s = 0.02
//!
//! [ampm]
//! layers = 2
//! heads = 4
//! d_model = 32
//! ffn = 64
//!
//! [train]
//! lr = 1e-3
//! steps = 1500
//! batch_budget_s = 8.0
//! ```
//!
//! Grouping and supervision live at the top level only, and the training
//! seed also seeds parameter initialisation. Relative paths are resolved
//! against the directory holding the config file.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::ampm::{AmpmConfig, Grouping};
use crate::error::{Error, Result};
use crate::features::EncoderConfig;
use crate::model::ModelConfig;
use crate::ncpm::NcpmConfig;
use crate::registry::{MetricRegistry, Supervision};
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub manifest: PathBuf,
    /// Preference pair files (derived or native) drawn by preference batches.
    #[serde(default)]
    pub pairs: Vec<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Built-in metric subset; exclusive with `registry`.
    #[serde(default)]
    pub supervision: Option<Supervision>,
    /// Path to a registry JSON document; exclusive with `supervision`.
    #[serde(default)]
    pub registry: Option<PathBuf>,
    #[serde(default = "default_grouping")]
    pub grouping: Grouping,
    pub output_dir: PathBuf,
    pub data: DataConfig,
    pub encoders: Vec<EncoderConfig>,
    #[serde(default)]
    pub ampm: AmpmConfig,
    #[serde(default)]
    pub ncpm: Option<NcpmConfig>,
    #[serde(default)]
    pub train: TrainConfig,
}

fn default_grouping() -> Grouping {
    Grouping::C1
}

/// Keys that belong at the top level and must not be repeated in sub-tables.
const HOISTED: [(&str, &str); 3] = [("ampm", "grouping"), ("train", "grouping"), ("train", "supervision")];

/// 1-based line of byte offset `at` in `text`.
fn line_of(text: &str, at: usize) -> usize {
    text[..at.min(text.len())].bytes().filter(|&b| b == b'\n').count() + 1
}

/// Deserializes a TOML document, reporting errors with `origin` and a line.
pub fn from_toml<T: DeserializeOwned>(text: &str, origin: &Path) -> Result<T> {
    toml::from_str(text).map_err(|e| Error::Parse {
        path: origin.to_path_buf(),
        line: e.span().map_or(0, |s| line_of(text, s.start)),
        message: e.message().trim().replace('\n', "; "),
    })
}

impl RunConfig {
    /// Parses a config document; `origin` is used for error context only.
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let table: toml::Table = from_toml(text, origin)?;
        for (section, key) in HOISTED {
            if table.get(section).and_then(|t| t.get(key)).is_some() {
                return Err(Error::Config(format!(
                    "{}: set `{key}` at the top level, not in [{section}]",
                    origin.display()
                )));
            }
        }
        let mut cfg: RunConfig = from_toml(text, origin)?;
        cfg.ampm.grouping = cfg.grouping;
        cfg.train.grouping = cfg.grouping;
        cfg.train.supervision = cfg.supervision;
        Ok(cfg)
    }

    /// Reads, resolves relative paths against the file's directory, and
    /// validates.
    pub fn load(path: &Path) -> Result<Self> {
        let text = crate::error::read_to_string(path)?;
        let mut cfg = Self::parse(&text, path)?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.resolve_paths(base);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.output_dir);
        fix(&mut self.data.manifest);
        self.data.pairs.iter_mut().for_each(fix);
        if let Some(r) = &mut self.registry {
            fix(r);
        }
        for e in &mut self.encoders {
            if let Some(d) = &mut e.feature_dir {
                fix(d);
            }
        }
    }

    /// Checks the F#C#M# combination, sub-configs and that inputs exist.
    pub fn validate(&self) -> Result<()> {
        match (&self.supervision, &self.registry) {
            (Some(_), Some(_)) => return Err(Error::Config("set either `supervision` or `registry`, not both".into())),
            (None, None) => return Err(Error::Config("one of `supervision` or `registry` is required".into())),
            _ => {}
        }
        if self.grouping == Grouping::C5 && matches!(self.supervision, Some(Supervision::M1 | Supervision::M5)) {
            return Err(Error::Config(format!(
                "C5 grouping needs the full metric set; {} covers one group only",
                self.supervision.unwrap()
            )));
        }
        if self.encoders.is_empty() {
            return Err(Error::Config("at least one encoder is required".into()));
        }
        for e in &self.encoders {
            e.validate()?;
        }
        self.ampm.validate()?;
        self.train.validate()?;
        if self.train.mix_ratio > 0.0 && (self.ncpm.is_none() || self.data.pairs.is_empty()) {
            return Err(Error::Config("mix_ratio > 0 needs an [ncpm] section and at least one pair file".into()));
        }
        let mut inputs = vec![&self.data.manifest];
        inputs.extend(&self.data.pairs);
        inputs.extend(&self.registry);
        for p in inputs {
            if !p.exists() {
                return Err(Error::Config(format!("input {} does not exist", p.display())));
            }
        }
        Ok(())
    }

    pub fn metric_registry(&self) -> Result<MetricRegistry> {
        match (&self.supervision, &self.registry) {
            (Some(s), None) => Ok(MetricRegistry::for_supervision(*s)),
            (None, Some(p)) => MetricRegistry::load(p),
            _ => Err(Error::Config("set exactly one of `supervision` or `registry`".into())),
        }
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        Ok(ModelConfig {
            encoders: self.encoders.clone(),
            ampm: self.ampm.clone(),
            ncpm: self.ncpm.clone(),
            registry: self.metric_registry()?,
            seed: self.train.seed,
        })
    }
}
