//! The full predictor: feature extractor, AMPM and (optionally) NCPM sharing
//! one parameter store.

use serde::{Deserialize, Serialize};

use crate::ampm::{Ampm, AmpmConfig, Grouping};
use crate::error::{Error, Result};
use crate::features::{EncoderConfig, FeatureExtractor, PreparedSample};
use crate::ncpm::{argmax_class, Ncpm, NcpmConfig, PreferenceOutput};
use crate::nn::{to_vec_f32, Mode, ParamStore};
use crate::pairs::Preference;
use crate::registry::MetricRegistry;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoders: Vec<EncoderConfig>,
    pub ampm: AmpmConfig,
    #[serde(default)]
    pub ncpm: Option<NcpmConfig>,
    pub registry: MetricRegistry,
    #[serde(default)]
    pub seed: u64,
}

impl ModelConfig {
    /// Desk-scale single-encoder model for `registry`.
    pub fn desk(registry: MetricRegistry, grouping: Grouping, with_ncpm: bool) -> Self {
        let ampm = AmpmConfig {
            grouping,
            ..AmpmConfig::desk()
        };
        ModelConfig {
            encoders: vec![EncoderConfig::learnable(2, ampm.d_model, 0.02)],
            ampm,
            ncpm: with_ncpm.then(NcpmConfig::desk),
            registry,
            seed: 0,
        }
    }

    /// `F<encoders>C<1|5>M<metrics>` naming of the configuration.
    pub fn tag(&self) -> String {
        let c = match self.ampm.grouping {
            Grouping::C1 => 1,
            Grouping::C5 => 5,
        };
        format!("F{}C{}M{}", self.encoders.len(), c, self.registry.len())
    }
}

pub struct Model {
    config: ModelConfig,
    store: ParamStore,
    pub extractor: FeatureExtractor,
    pub ampm: Ampm,
    pub ncpm: Option<Ncpm>,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        let mut store = ParamStore::new(config.seed);
        let extractor = FeatureExtractor::new(&mut store, &config.encoders, config.ampm.d_model)?;
        let ampm = Ampm::new(&mut store, &config.ampm, &config.registry)?;
        let ncpm = match &config.ncpm {
            Some(nc) => {
                ampm.naturalness_key()?;
                Some(Ncpm::new(&mut store, nc, config.ampm.d_model, config.ampm.heads, config.ampm.ffn)?)
            }
            None => None,
        };
        Ok(Model {
            config,
            store,
            extractor,
            ampm,
            ncpm,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn registry(&self) -> &MetricRegistry {
        &self.config.registry
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn ncpm(&self) -> Result<&Ncpm> {
        self.ncpm
            .as_ref()
            .ok_or_else(|| Error::Config("this model has no preference module".into()))
    }

    /// Range-constrained predictions, one row per sample in registry order.
    pub fn predict(&self, samples: &[&PreparedSample]) -> Result<Vec<Vec<f64>>> {
        let (fused, lengths) = self.extractor.forward(samples)?;
        let out = self.ampm.forward_batch(&fused, &lengths, &Mode::Eval)?;
        let k = self.registry().len();
        let flat = to_vec_f32(&out.preds)?;
        Ok(flat.chunks(k).map(|r| r.iter().map(|&v| v as f64).collect()).collect())
    }

    /// Direct preference outputs for aligned lists of A and B samples.
    pub fn compare(&self, a: &[&PreparedSample], b: &[&PreparedSample]) -> Result<Vec<PreferenceOutput>> {
        if a.len() != b.len() {
            return Err(Error::ShapeMismatch(format!("{} A samples for {} B samples", a.len(), b.len())));
        }
        let ncpm = self.ncpm()?;
        let key = self.ampm.naturalness_key()?;
        let latent = |side: &[&PreparedSample]| -> Result<_> {
            let (fused, lengths) = self.extractor.forward(side)?;
            Ok((self.ampm.encode_group_batch(&fused, &lengths, key, &Mode::Eval)?, lengths))
        };
        let (la, len_a) = latent(a)?;
        let (lb, len_b) = latent(b)?;
        let out = ncpm.forward_batch(&la, &len_a, &lb, &len_b, &Mode::Eval)?;
        let logits = to_vec_f32(&out.logits)?;
        let cmos = to_vec_f32(&out.cmos)?;
        Ok(logits
            .chunks(3)
            .zip(cmos)
            .map(|(l, c)| PreferenceOutput {
                logits: [l[0] as f64, l[1] as f64, l[2] as f64],
                cmos: Some(c as f64),
            })
            .collect())
    }

    pub fn predict_preferences(&self, a: &[&PreparedSample], b: &[&PreparedSample]) -> Result<Vec<Preference>> {
        Ok(self.compare(a, b)?.iter().map(|o| argmax_class(&o.logits)).collect())
    }
}
