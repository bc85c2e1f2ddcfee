//! On-disk corpora: JSON Lines manifests of partially annotated samples and
//! natively preference-annotated pair files.
//!
//! A missing label is written as `null` and read back from either `null` or
//! key absence. Labels are validated against the registry's closed ranges;
//! loading is all-or-nothing per file.

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::ser::SerializeMap;
use serde::{Deserialize, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::pairs::Preference;
use crate::registry::{default_registry, MetricRegistry};

/// One utterance and whatever labels it carries.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub sample_id: String,
    pub corpus_id: String,
    pub system_id: Option<String>,
    /// Shared content key: samples with the same reference id render the
    /// same underlying utterance.
    pub reference_id: Option<String>,
    pub audio_path: PathBuf,
    pub duration_s: f64,
    /// Present labels only; an absent key is a missing label.
    pub labels: BTreeMap<String, f64>,
}

impl SampleRecord {
    pub fn label(&self, metric: &str) -> Option<f64> {
        self.labels.get(metric).copied()
    }

    /// Audio path resolved against the directory holding the manifest.
    pub fn resolve_audio(&self, manifest_dir: &Path) -> PathBuf {
        if self.audio_path.is_absolute() {
            self.audio_path.clone()
        } else {
            manifest_dir.join(&self.audio_path)
        }
    }

    fn validate(&self, registry: &MetricRegistry) -> Result<()> {
        if !(self.duration_s.is_finite() && self.duration_s > 0.0) {
            return Err(Error::InvalidRecord {
                sample: self.sample_id.clone(),
                reason: format!("duration_s must be positive, got {}", self.duration_s),
            });
        }
        for (metric, &value) in &self.labels {
            let spec = registry.lookup(metric)?;
            if !spec.contains(value) {
                return Err(Error::RangeViolation {
                    sample: self.sample_id.clone(),
                    metric: metric.clone(),
                    value,
                    lower: spec.lower_value(),
                    upper: spec.upper_value(),
                });
            }
        }
        Ok(())
    }
}

#[derive(Deserialize)]
struct RawRecord {
    sample_id: String,
    corpus_id: String,
    #[serde(default)]
    system_id: Option<String>,
    #[serde(default)]
    reference_id: Option<String>,
    audio_path: PathBuf,
    duration_s: f64,
    #[serde(default)]
    labels: BTreeMap<String, Option<f64>>,
}

struct LabelsOut<'a> {
    record: &'a SampleRecord,
    registry: &'a MetricRegistry,
}

impl Serialize for LabelsOut<'_> {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let mut map = s.serialize_map(Some(self.registry.len()))?;
        for name in self.registry.names() {
            map.serialize_entry(name, &self.record.label(name))?;
        }
        map.end()
    }
}

#[derive(Serialize)]
struct RecordOut<'a> {
    sample_id: &'a str,
    corpus_id: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    system_id: Option<&'a str>,
    #[serde(skip_serializing_if = "Option::is_none")]
    reference_id: Option<&'a str>,
    audio_path: &'a Path,
    duration_s: f64,
    labels: LabelsOut<'a>,
}

fn parse_error(path: &Path, line: usize, message: impl ToString) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.to_string(),
    }
}

/// Parses one manifest line.
///
/// Labels for built-in metrics that `registry` does not contain are
/// range-checked and then dropped, so a fully annotated corpus can train a
/// model supervised on a subset. Any other unknown metric name is an error.
pub fn parse_record(line: &str, registry: &MetricRegistry) -> Result<SampleRecord> {
    let raw: RawRecord = serde_json::from_str(line)?;
    let mut record = SampleRecord {
        sample_id: raw.sample_id,
        corpus_id: raw.corpus_id,
        system_id: raw.system_id,
        reference_id: raw.reference_id,
        audio_path: raw.audio_path,
        duration_s: raw.duration_s,
        labels: raw
            .labels
            .into_iter()
            .filter_map(|(k, v)| v.map(|v| (k, v)))
            .collect(),
    };
    if record.labels.keys().any(|k| registry.lookup(k).is_err()) {
        let builtin = default_registry();
        let (inside, outside): (BTreeMap<_, _>, BTreeMap<_, _>) = std::mem::take(&mut record.labels)
            .into_iter()
            .partition(|(k, _)| registry.lookup(k).is_ok());
        SampleRecord {
            labels: outside,
            ..record.clone()
        }
        .validate(&builtin)?;
        record.labels = inside;
    }
    record.validate(registry)?;
    Ok(record)
}

/// Reads a JSON Lines manifest. Blank lines are skipped.
pub fn load_manifest(path: &Path, registry: &MetricRegistry) -> Result<Vec<SampleRecord>> {
    let reader = BufReader::new(crate::error::open(path)?);
    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record = parse_record(&line, registry).map_err(|e| match e {
            Error::Json(j) => parse_error(path, i + 1, j),
            other => other,
        })?;
        if !seen.insert(record.sample_id.clone()) {
            return Err(Error::DuplicateSample(record.sample_id));
        }
        records.push(record);
    }
    Ok(records)
}

/// Serializes one record; labels are emitted in registry order with `null`
/// for missing values.
pub fn record_to_json(record: &SampleRecord, registry: &MetricRegistry) -> Result<String> {
    let out = RecordOut {
        sample_id: &record.sample_id,
        corpus_id: &record.corpus_id,
        system_id: record.system_id.as_deref(),
        reference_id: record.reference_id.as_deref(),
        audio_path: &record.audio_path,
        duration_s: record.duration_s,
        labels: LabelsOut { record, registry },
    };
    Ok(serde_json::to_string(&out)?)
}

pub fn write_manifest(path: &Path, records: &[SampleRecord], registry: &MetricRegistry) -> Result<()> {
    for record in records {
        record.validate(registry)?;
    }
    let mut w = BufWriter::new(File::create(path)?);
    for record in records {
        writeln!(w, "{}", record_to_json(record, registry)?)?;
    }
    w.flush()?;
    Ok(())
}

/// Fraction of records carrying each registered metric.
pub fn coverage_report(
    records: &[SampleRecord],
    registry: &MetricRegistry,
) -> Result<BTreeMap<String, f64>> {
    if records.is_empty() {
        return Err(Error::EmptyInput("coverage report needs at least one record"));
    }
    let n = records.len() as f64;
    Ok(registry
        .names()
        .map(|name| {
            let present = records.iter().filter(|r| r.label(name).is_some()).count();
            (name.to_string(), present as f64 / n)
        })
        .collect())
}

/// A pair judged directly by listeners (no absolute scores).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NativePairRecord {
    pub pair_id: String,
    pub sample_a: String,
    pub sample_b: String,
    pub label: Preference,
    pub corpus_id: String,
}

/// Reads native pairs and checks that both sides name known samples.
pub fn load_native_pairs(path: &Path, records: &[SampleRecord]) -> Result<Vec<NativePairRecord>> {
    let known: HashSet<&str> = records.iter().map(|r| r.sample_id.as_str()).collect();
    let reader = BufReader::new(crate::error::open(path)?);
    let mut pairs = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let pair: NativePairRecord =
            serde_json::from_str(&line).map_err(|e| parse_error(path, i + 1, e))?;
        if pair.sample_a == pair.sample_b {
            return Err(parse_error(path, i + 1, "sample_a and sample_b are identical"));
        }
        for side in [&pair.sample_a, &pair.sample_b] {
            if !known.contains(side.as_str()) {
                return Err(Error::UnknownSample(side.clone()));
            }
        }
        pairs.push(pair);
    }
    Ok(pairs)
}

pub fn write_native_pairs(path: &Path, pairs: &[NativePairRecord]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for pair in pairs {
        writeln!(w, "{}", serde_json::to_string(pair)?)?;
    }
    w.flush()?;
    Ok(())
}
