//! The metric taxonomy: names, category groups, valid ranges, reference
//! requirements and loss weights.
//!
//! Every other module resolves metric names through a [`MetricRegistry`].
//! The built-in registry holds fifteen metrics in five groups; smaller
//! supervision subsets ([`Supervision::M1`], [`Supervision::M5`]) are derived
//! from it, and custom registries can be loaded from JSON.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Category a metric belongs to. Metrics in the same group share an encoder
/// under grouped (`C5`) training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum MetricGroup {
    NoiseDistortion,
    Naturalness,
    Intelligibility,
    SpeakerCharacteristics,
    SpectralAccuracy,
}

impl MetricGroup {
    pub const ALL: [MetricGroup; 5] = [
        MetricGroup::NoiseDistortion,
        MetricGroup::Naturalness,
        MetricGroup::Intelligibility,
        MetricGroup::SpeakerCharacteristics,
        MetricGroup::SpectralAccuracy,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            MetricGroup::NoiseDistortion => "NoiseDistortion",
            MetricGroup::Naturalness => "Naturalness",
            MetricGroup::Intelligibility => "Intelligibility",
            MetricGroup::SpeakerCharacteristics => "SpeakerCharacteristics",
            MetricGroup::SpectralAccuracy => "SpectralAccuracy",
        }
    }
}

impl fmt::Display for MetricGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MetricGroup {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MetricGroup::ALL
            .into_iter()
            .find(|g| g.as_str() == s)
            .ok_or_else(|| Error::UnknownGroup(s.to_string()))
    }
}

/// One end of a metric's value range. Serialized as `{"finite": x}` or
/// `"unbounded"`; which infinity `Unbounded` means depends on the side.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bound {
    Finite(f64),
    Unbounded,
}

impl Bound {
    pub fn finite(self) -> Option<f64> {
        match self {
            Bound::Finite(v) => Some(v),
            Bound::Unbounded => None,
        }
    }

    pub fn is_finite(self) -> bool {
        matches!(self, Bound::Finite(_))
    }

    /// The bound as an IEEE value, with `Unbounded` mapped to `unbounded`.
    pub fn or_infinite(self, unbounded: f64) -> f64 {
        self.finite().unwrap_or(unbounded)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSpec {
    pub name: String,
    pub group: MetricGroup,
    pub lower: Bound,
    pub upper: Bound,
    pub requires_reference: bool,
    #[serde(default = "default_weight")]
    pub weight: f64,
}

fn default_weight() -> f64 {
    1.0
}

impl MetricSpec {
    pub fn new(
        name: &str,
        group: MetricGroup,
        lower: Bound,
        upper: Bound,
        requires_reference: bool,
    ) -> Self {
        MetricSpec {
            name: name.to_string(),
            group,
            lower,
            upper,
            requires_reference,
            weight: 1.0,
        }
    }

    /// Lower bound as an IEEE value (`-inf` when unbounded).
    pub fn lower_value(&self) -> f64 {
        self.lower.or_infinite(f64::NEG_INFINITY)
    }

    /// Upper bound as an IEEE value (`+inf` when unbounded).
    pub fn upper_value(&self) -> f64 {
        self.upper.or_infinite(f64::INFINITY)
    }

    /// Closed-interval membership at finite bounds.
    pub fn contains(&self, value: f64) -> bool {
        value.is_finite() && value >= self.lower_value() && value <= self.upper_value()
    }

    fn validate(&self) -> Result<()> {
        for bound in [self.lower, self.upper] {
            if let Bound::Finite(v) = bound {
                if !v.is_finite() {
                    return Err(Error::InvalidRange {
                        name: self.name.clone(),
                        lower: self.lower_value(),
                        upper: self.upper_value(),
                    });
                }
            }
        }
        if let (Bound::Finite(lo), Bound::Finite(hi)) = (self.lower, self.upper) {
            if lo >= hi {
                return Err(Error::InvalidRange {
                    name: self.name.clone(),
                    lower: lo,
                    upper: hi,
                });
            }
        }
        if !(self.weight.is_finite() && self.weight >= 0.0) {
            return Err(Error::InvalidWeight {
                name: self.name.clone(),
                weight: self.weight,
            });
        }
        Ok(())
    }
}

/// Supervision scope: which metrics a model is trained to predict.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Supervision {
    /// Human MOS only.
    M1,
    /// The naturalness group.
    M5,
    /// All fifteen built-in metrics.
    M15,
}

impl FromStr for Supervision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "M1" | "m1" => Ok(Supervision::M1),
            "M5" | "m5" => Ok(Supervision::M5),
            "M15" | "m15" => Ok(Supervision::M15),
            other => Err(Error::Config(format!("unknown supervision scope `{other}`"))),
        }
    }
}

impl fmt::Display for Supervision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Supervision::M1 => "M1",
            Supervision::M5 => "M5",
            Supervision::M15 => "M15",
        };
        f.write_str(s)
    }
}

/// An ordered, immutable set of metric specifications.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRegistry {
    specs: Vec<MetricSpec>,
    group_index: BTreeMap<MetricGroup, Vec<String>>,
}

#[derive(Serialize, Deserialize)]
struct RegistryDocument {
    metrics: Vec<MetricSpec>,
}

impl MetricRegistry {
    pub fn new(specs: Vec<MetricSpec>) -> Result<Self> {
        let mut group_index: BTreeMap<MetricGroup, Vec<String>> = BTreeMap::new();
        for (i, spec) in specs.iter().enumerate() {
            spec.validate()?;
            if specs[..i].iter().any(|s| s.name == spec.name) {
                return Err(Error::DuplicateMetric(spec.name.clone()));
            }
            group_index
                .entry(spec.group)
                .or_default()
                .push(spec.name.clone());
        }
        Ok(MetricRegistry { specs, group_index })
    }

    /// Built-in registry for a supervision scope.
    pub fn for_supervision(scope: Supervision) -> Self {
        let full = default_registry();
        match scope {
            Supervision::M15 => full,
            Supervision::M5 => full
                .subset(&["MOS", "UTMOS", "Distill_MOS", "NISQA_MOS", "SCOREQ"])
                .expect("naturalness metrics are built in"),
            Supervision::M1 => full.subset(&["MOS"]).expect("MOS is built in"),
        }
    }

    /// A registry holding only `names`, in this registry's order.
    pub fn subset(&self, names: &[&str]) -> Result<Self> {
        for name in names {
            self.lookup(name)?;
        }
        let specs = self
            .specs
            .iter()
            .filter(|s| names.contains(&s.name.as_str()))
            .cloned()
            .collect();
        MetricRegistry::new(specs)
    }

    pub fn specs(&self) -> &[MetricSpec] {
        &self.specs
    }

    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.specs.iter().map(|s| s.name.as_str())
    }

    pub fn lookup(&self, name: &str) -> Result<&MetricSpec> {
        self.specs
            .iter()
            .find(|s| s.name == name)
            .ok_or_else(|| Error::UnknownMetric(name.to_string()))
    }

    pub fn index_of(&self, name: &str) -> Result<usize> {
        self.specs
            .iter()
            .position(|s| s.name == name)
            .ok_or_else(|| Error::UnknownMetric(name.to_string()))
    }

    /// Members of `group` in registry order. Errors if the registry has no
    /// metric in that group.
    pub fn group_members(&self, group: MetricGroup) -> Result<&[String]> {
        self.group_index
            .get(&group)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::UnknownGroup(group.to_string()))
    }

    /// Groups present in the registry, in canonical group order.
    pub fn groups(&self) -> impl Iterator<Item = MetricGroup> + '_ {
        self.group_index.keys().copied()
    }

    pub fn to_json(&self) -> String {
        let doc = RegistryDocument {
            metrics: self.specs.clone(),
        };
        serde_json::to_string_pretty(&doc).expect("registry serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: RegistryDocument = serde_json::from_str(text)?;
        MetricRegistry::new(doc.metrics)
    }

    pub fn load(path: &Path) -> Result<Self> {
        MetricRegistry::from_json(&crate::error::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }
}

impl Serialize for MetricRegistry {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        RegistryDocument {
            metrics: self.specs.clone(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for MetricRegistry {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let doc = RegistryDocument::deserialize(d)?;
        MetricRegistry::new(doc.metrics).map_err(serde::de::Error::custom)
    }
}

/// The fifteen-metric, five-group registry.
pub fn default_registry() -> MetricRegistry {
    use Bound::{Finite, Unbounded};
    use MetricGroup::*;
    let rows = [
        ("PESQ", NoiseDistortion, Finite(1.0), Finite(4.5), true),
        ("PESQc2", NoiseDistortion, Finite(1.0), Finite(4.5), true),
        ("DNSMOS", NoiseDistortion, Finite(1.0), Finite(5.0), false),
        ("LSD", NoiseDistortion, Finite(0.0), Unbounded, true),
        ("SDR", NoiseDistortion, Unbounded, Unbounded, true),
        ("MOS", Naturalness, Finite(1.0), Finite(5.0), false),
        ("UTMOS", Naturalness, Finite(1.0), Finite(5.0), false),
        ("Distill_MOS", Naturalness, Finite(1.0), Finite(5.0), false),
        ("NISQA_MOS", Naturalness, Finite(1.0), Finite(5.0), false),
        ("SCOREQ", Naturalness, Finite(1.0), Finite(5.0), false),
        ("ESTOI", Intelligibility, Finite(0.0), Finite(1.0), true),
        ("SpeechBERTScore", Intelligibility, Finite(-1.0), Finite(1.0), true),
        ("LPS", Intelligibility, Unbounded, Finite(1.0), true),
        ("SpeakerSimilarity", SpeakerCharacteristics, Finite(-1.0), Finite(1.0), true),
        ("MCD", SpectralAccuracy, Finite(0.0), Unbounded, true),
    ];
    let specs = rows
        .into_iter()
        .map(|(name, group, lo, hi, r)| MetricSpec::new(name, group, lo, hi, r))
        .collect();
    MetricRegistry::new(specs).expect("built-in registry is valid")
}
