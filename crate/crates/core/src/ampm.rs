//! Absolute metric prediction: one transformer encoder per metric group,
//! mean pooling over time, a linear head per metric, and the metric's range
//! activation on top.

use std::collections::BTreeMap;
use std::fmt;

use candle_core::{Module, Tensor};
use candle_nn::Linear;
use serde::{Deserialize, Serialize};

use crate::activation::Range;
use crate::error::{Error, Result};
use crate::features::FeatureSequence;
use crate::nn::{key_bias, masked_mean, sinusoidal_positions, to_vec_f32, AttentionLayer, LayerNorm, Mode, ParamStore};
use crate::registry::{MetricGroup, MetricRegistry};

/// How metrics are routed to shared encoders.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Grouping {
    /// Every metric shares one encoder.
    #[serde(alias = "single_group")]
    C1,
    /// One encoder per metric group.
    #[serde(alias = "table1_groups")]
    C5,
}

impl std::str::FromStr for Grouping {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "C1" | "c1" | "single_group" => Ok(Grouping::C1),
            "C5" | "c5" | "table1_groups" => Ok(Grouping::C5),
            other => Err(Error::Config(format!("unknown grouping `{other}`"))),
        }
    }
}

impl fmt::Display for Grouping {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Grouping::C1 => "C1",
            Grouping::C5 => "C5",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    Mean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AmpmConfig {
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub ffn: usize,
    pub pooling: Pooling,
    pub grouping: Grouping,
}

impl Default for AmpmConfig {
    fn default() -> Self {
        AmpmConfig {
            layers: 6,
            heads: 8,
            d_model: 768,
            ffn: 2048,
            pooling: Pooling::Mean,
            grouping: Grouping::C1,
        }
    }
}

impl AmpmConfig {
    /// A small configuration that trains in minutes on one CPU core.
    pub fn desk() -> Self {
        AmpmConfig {
            layers: 2,
            heads: 4,
            d_model: 32,
            ffn: 64,
            pooling: Pooling::Mean,
            grouping: Grouping::C1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.d_model == 0 || self.ffn == 0 {
            return Err(Error::Config("AMPM needs positive layers, width and feed-forward size".into()));
        }
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        Ok(())
    }
}

/// Which shared encoder a metric goes through.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum GroupKey {
    Shared,
    Category(MetricGroup),
}

impl GroupKey {
    pub fn of(grouping: Grouping, group: MetricGroup) -> Self {
        match grouping {
            Grouping::C1 => GroupKey::Shared,
            Grouping::C5 => GroupKey::Category(group),
        }
    }

    fn slug(self) -> String {
        match self {
            GroupKey::Shared => "shared".into(),
            GroupKey::Category(g) => g.as_str().to_string(),
        }
    }
}

impl fmt::Display for GroupKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.slug())
    }
}

/// A group encoder's output for one sample, stored time-major `(L, d_model)`.
#[derive(Debug, Clone)]
pub struct GroupLatent {
    pub group: GroupKey,
    pub frames: Tensor,
}

impl GroupLatent {
    pub fn d(&self) -> usize {
        self.frames.dims()[1]
    }

    pub fn l(&self) -> usize {
        self.frames.dims()[0]
    }
}

#[derive(Debug, Clone)]
pub struct PredictionBundle {
    /// Predictions in registry order.
    pub per_metric: Vec<(String, f64)>,
    pub group_latents: BTreeMap<GroupKey, GroupLatent>,
}

impl PredictionBundle {
    pub fn get(&self, metric: &str) -> Option<f64> {
        self.per_metric.iter().find(|(n, _)| n == metric).map(|(_, v)| *v)
    }
}

struct GroupEncoder {
    layers: Vec<AttentionLayer>,
    norm: LayerNorm,
}

impl GroupEncoder {
    fn forward(&self, x: &Tensor, lengths: &[usize], mode: &Mode) -> Result<Tensor> {
        let (_, t, d) = x.dims3()?;
        let pe = sinusoidal_positions(t, d, x.device())?;
        let bias = key_bias(lengths, t, x.device())?;
        let mut h = mode.dropout(&x.broadcast_add(&pe)?)?;
        for layer in &self.layers {
            h = layer.forward(&h, None, &bias, mode)?;
        }
        self.norm.forward(&h)
    }
}

struct Head {
    metric: String,
    group: GroupKey,
    linear: Linear,
    range: Range,
}

/// Batched AMPM output.
pub struct AmpmOutput {
    /// `(B, K)` range-constrained predictions in registry order.
    pub preds: Tensor,
    /// `(B, L, d_model)` latent per group.
    pub latents: BTreeMap<GroupKey, Tensor>,
}

pub struct Ampm {
    config: AmpmConfig,
    encoders: BTreeMap<GroupKey, GroupEncoder>,
    heads: Vec<Head>,
}

impl Ampm {
    pub fn new(store: &mut ParamStore, config: &AmpmConfig, registry: &MetricRegistry) -> Result<Self> {
        config.validate()?;
        if registry.is_empty() {
            return Err(Error::EmptyInput("AMPM needs at least one metric"));
        }
        let mut encoders = BTreeMap::new();
        let mut heads = Vec::new();
        for spec in registry.specs() {
            let key = GroupKey::of(config.grouping, spec.group);
            if let std::collections::btree_map::Entry::Vacant(slot) = encoders.entry(key) {
                let name = format!("ampm.{}", key.slug());
                let layers = (0..config.layers)
                    .map(|i| {
                        AttentionLayer::new(store, &format!("{name}.layer{i}"), config.d_model, config.heads, config.ffn, false)
                    })
                    .collect::<Result<_>>()?;
                let norm = store.layer_norm(&format!("{name}.norm"), config.d_model)?;
                slot.insert(GroupEncoder { layers, norm });
            }
            heads.push(Head {
                metric: spec.name.clone(),
                group: key,
                linear: store.linear(&format!("ampm.head.{}", spec.name), config.d_model, 1, true)?,
                range: Range::of(spec),
            });
        }
        Ok(Ampm {
            config: config.clone(),
            encoders,
            heads,
        })
    }

    pub fn config(&self) -> &AmpmConfig {
        &self.config
    }

    pub fn groups(&self) -> impl Iterator<Item = GroupKey> + '_ {
        self.encoders.keys().copied()
    }

    pub fn metric_names(&self) -> Vec<String> {
        self.heads.iter().map(|h| h.metric.clone()).collect()
    }

    /// The latent consumed by the preference module: the naturalness group
    /// under C5, the shared latent under C1.
    pub fn naturalness_key(&self) -> Result<GroupKey> {
        let key = GroupKey::of(self.config.grouping, MetricGroup::Naturalness);
        if self.encoders.contains_key(&key) {
            Ok(key)
        } else {
            Err(Error::Config("the registry has no naturalness metric to condition preferences on".into()))
        }
    }

    fn check_width(&self, d: usize) -> Result<()> {
        if d != self.config.d_model {
            return Err(Error::WidthMismatch {
                expected: self.config.d_model,
                got: d,
            });
        }
        Ok(())
    }

    /// Runs one group encoder over a padded `(B, L, d)` batch.
    pub fn encode_group_batch(&self, fused: &Tensor, lengths: &[usize], group: GroupKey, mode: &Mode) -> Result<Tensor> {
        self.check_width(fused.dim(2)?)?;
        let enc = self
            .encoders
            .get(&group)
            .ok_or_else(|| Error::UnknownGroup(group.to_string()))?;
        enc.forward(fused, lengths, mode)
    }

    /// Full batched forward pass over a padded `(B, L, d)` batch.
    pub fn forward_batch(&self, fused: &Tensor, lengths: &[usize], mode: &Mode) -> Result<AmpmOutput> {
        let mut latents = BTreeMap::new();
        let mut pooled = BTreeMap::new();
        for &key in self.encoders.keys() {
            let latent = self.encode_group_batch(fused, lengths, key, mode)?;
            pooled.insert(key, masked_mean(&latent, lengths)?);
            latents.insert(key, latent);
        }
        let columns = self
            .heads
            .iter()
            .map(|h| {
                let raw = h.linear.forward(&pooled[&h.group])?;
                h.range.apply_tensor(&raw)
            })
            .collect::<Result<Vec<_>>>()?;
        let preds = Tensor::cat(&columns, 1)?;
        Ok(AmpmOutput { preds, latents })
    }

    pub fn encode_group(&self, fused: &FeatureSequence, group: GroupKey) -> Result<GroupLatent> {
        let x = fused.frames().unsqueeze(0)?;
        let y = self.encode_group_batch(&x, &[fused.l()], group, &Mode::Eval)?;
        Ok(GroupLatent {
            group,
            frames: y.squeeze(0)?,
        })
    }

    pub fn forward(&self, fused: &FeatureSequence) -> Result<PredictionBundle> {
        let x = fused.frames().unsqueeze(0)?;
        let out = self.forward_batch(&x, &[fused.l()], &Mode::Eval)?;
        let values = to_vec_f32(&out.preds)?;
        let per_metric = self
            .heads
            .iter()
            .zip(values)
            .map(|(h, v)| (h.metric.clone(), v as f64))
            .collect();
        let group_latents = out
            .latents
            .into_iter()
            .map(|(k, t)| Ok((k, GroupLatent { group: k, frames: t.squeeze(0)? })))
            .collect::<Result<_>>()?;
        Ok(PredictionBundle {
            per_metric,
            group_latents,
        })
    }
}

/// Mean over the time axis of a latent.
pub fn pool(latent: &GroupLatent) -> Result<Vec<f32>> {
    if latent.l() == 0 {
        return Err(Error::EmptyInput("pooling an empty sequence"));
    }
    let x = latent.frames.unsqueeze(0)?;
    to_vec_f32(&masked_mean(&x, &[latent.l()])?)
}
