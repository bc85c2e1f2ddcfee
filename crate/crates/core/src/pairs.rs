//! Preference supervision derived from absolute ratings.
//!
//! Two samples with scores `s_a`, `s_b` receive a strict preference when
//! their difference exceeds a tie threshold `delta`, and a tie otherwise.
//! Candidate pairs come from one of three matching scopes, are capped by
//! seeded reservoir sampling, and can be augmented with their order-reversed
//! counterparts.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::manifest::{NativePairRecord, SampleRecord};

/// Three-way preference label. Serialized as `"A"`, `"tie"`, `"B"`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Preference {
    #[serde(rename = "A")]
    AWins,
    #[serde(rename = "tie")]
    Tie,
    #[serde(rename = "B")]
    BWins,
}

impl Preference {
    /// Class order used by logits: (A wins, tie, B wins).
    pub const CLASSES: [Preference; 3] = [Preference::AWins, Preference::Tie, Preference::BWins];

    pub fn class_index(self) -> usize {
        match self {
            Preference::AWins => 0,
            Preference::Tie => 1,
            Preference::BWins => 2,
        }
    }

    pub fn from_class_index(i: usize) -> Self {
        Preference::CLASSES[i]
    }

    /// The label of the order-reversed pair.
    pub fn reversed(self) -> Self {
        match self {
            Preference::AWins => Preference::BWins,
            Preference::Tie => Preference::Tie,
            Preference::BWins => Preference::AWins,
        }
    }

    pub fn is_strict(self) -> bool {
        self != Preference::Tie
    }
}

impl fmt::Display for Preference {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Preference::AWins => "A",
            Preference::Tie => "tie",
            Preference::BWins => "B",
        })
    }
}

/// Which samples may be paired.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scope {
    /// Any two samples.
    Any,
    /// Samples from the same corpus.
    Corpus,
    /// Samples sharing a reference but produced by different systems.
    Ref,
    /// Pairs annotated directly by listeners.
    Native,
}

impl FromStr for Scope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "any" => Ok(Scope::Any),
            "corpus" => Ok(Scope::Corpus),
            "ref" => Ok(Scope::Ref),
            "native" => Ok(Scope::Native),
            other => Err(Error::Config(format!("unknown pairing scope `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub pair_id: String,
    pub sample_a: String,
    pub sample_b: String,
    pub label: Preference,
    /// Threshold the label was derived with; `None` for native pairs.
    pub delta_used: Option<f64>,
    pub scope: Scope,
    pub score_a: Option<f64>,
    pub score_b: Option<f64>,
}

const REVERSED_SUFFIX: &str = ":rev";

impl PreferencePair {
    /// The same comparison presented in the opposite order.
    pub fn reversed(&self) -> PreferencePair {
        let pair_id = match self.pair_id.strip_suffix(REVERSED_SUFFIX) {
            Some(orig) => orig.to_string(),
            None => format!("{}{REVERSED_SUFFIX}", self.pair_id),
        };
        PreferencePair {
            pair_id,
            sample_a: self.sample_b.clone(),
            sample_b: self.sample_a.clone(),
            label: self.label.reversed(),
            delta_used: self.delta_used,
            scope: self.scope,
            score_a: self.score_b,
            score_b: self.score_a,
        }
    }
}

/// Assigns a preference from two scores and a tie threshold.
pub fn derive_label(s_a: f64, s_b: f64, delta: f64) -> Result<Preference> {
    if !(delta >= 0.0) {
        return Err(Error::NegativeDelta(delta));
    }
    Ok(if s_a - s_b > delta {
        Preference::AWins
    } else if s_b - s_a > delta {
        Preference::BWins
    } else {
        Preference::Tie
    })
}

/// Enumerates eligible unordered pairs under `scope`, labels them from
/// `metric`, and keeps a seeded uniform subset of at most `cap` pairs.
///
/// Each pair is ordered so that `sample_a < sample_b` by id. The output is in
/// enumeration order, which depends only on the order of `records`.
pub fn build_pairs(
    records: &[SampleRecord],
    scope: Scope,
    metric: &str,
    delta: f64,
    cap: usize,
    seed: u64,
) -> Result<Vec<PreferencePair>> {
    if !(delta >= 0.0) {
        return Err(Error::NegativeDelta(delta));
    }
    if cap == 0 {
        return Err(Error::Config("pair cap must be positive".into()));
    }
    let scores: Vec<f64> = records
        .iter()
        .map(|r| {
            r.label(metric).ok_or_else(|| Error::MissingLabel {
                sample: r.sample_id.clone(),
                metric: metric.to_string(),
            })
        })
        .collect::<Result<_>>()?;

    let groups = candidate_groups(records, scope)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reservoir: Vec<(u64, usize, usize)> = Vec::new();
    let mut seen: u64 = 0;
    for group in &groups {
        for (x, &i) in group.iter().enumerate() {
            for &j in &group[x + 1..] {
                if scope == Scope::Ref && records[i].system_id == records[j].system_id {
                    continue;
                }
                if reservoir.len() < cap {
                    reservoir.push((seen, i, j));
                } else {
                    let slot = rng.random_range(0..=seen);
                    if (slot as usize) < cap {
                        reservoir[slot as usize] = (seen, i, j);
                    }
                }
                seen += 1;
            }
        }
    }
    reservoir.sort_unstable_by_key(|&(n, _, _)| n);

    reservoir
        .into_iter()
        .map(|(_, i, j)| {
            let (i, j) = if records[i].sample_id <= records[j].sample_id {
                (i, j)
            } else {
                (j, i)
            };
            let (a, b) = (&records[i], &records[j]);
            Ok(PreferencePair {
                pair_id: format!("{}__{}", a.sample_id, b.sample_id),
                sample_a: a.sample_id.clone(),
                sample_b: b.sample_id.clone(),
                label: derive_label(scores[i], scores[j], delta)?,
                delta_used: Some(delta),
                scope,
                score_a: Some(scores[i]),
                score_b: Some(scores[j]),
            })
        })
        .collect()
}

/// Partitions record indices into groups whose members may be paired.
fn candidate_groups(records: &[SampleRecord], scope: Scope) -> Result<Vec<Vec<usize>>> {
    let keyed = |key: &dyn Fn(&SampleRecord) -> Result<String>| -> Result<Vec<Vec<usize>>> {
        let mut order: Vec<String> = Vec::new();
        let mut groups: HashMap<String, Vec<usize>> = HashMap::new();
        for (i, r) in records.iter().enumerate() {
            let k = key(r)?;
            groups
                .entry(k.clone())
                .or_insert_with(|| {
                    order.push(k);
                    Vec::new()
                })
                .push(i);
        }
        Ok(order.into_iter().map(|k| groups.remove(&k).unwrap()).collect())
    };
    match scope {
        Scope::Any => Ok(vec![(0..records.len()).collect()]),
        Scope::Corpus => keyed(&|r| Ok(r.corpus_id.clone())),
        Scope::Ref => keyed(&|r| {
            if r.system_id.is_none() {
                return Err(Error::MissingMetadata {
                    sample: r.sample_id.clone(),
                    field: "system_id",
                });
            }
            r.reference_id.clone().ok_or_else(|| Error::MissingMetadata {
                sample: r.sample_id.clone(),
                field: "reference_id",
            })
        }),
        Scope::Native => Err(Error::Config(
            "native pairs are loaded, not derived".into(),
        )),
    }
}

/// Appends to every pair its reversal, keeping each reversal right after its
/// source pair.
pub fn symmetrize(pairs: &[PreferencePair]) -> Vec<PreferencePair> {
    pairs
        .iter()
        .flat_map(|p| [p.clone(), p.reversed()])
        .collect()
}

/// Recomputes derived labels under a new threshold.
pub fn relabel_pairs(pairs: &[PreferencePair], delta: f64) -> Result<Vec<PreferencePair>> {
    pairs
        .iter()
        .map(|p| match (p.score_a, p.score_b) {
            (Some(a), Some(b)) => Ok(PreferencePair {
                label: derive_label(a, b, delta)?,
                delta_used: Some(delta),
                ..p.clone()
            }),
            _ => Err(Error::NativePair(p.pair_id.clone())),
        })
        .collect()
}

/// Removes pairs labeled as ties.
pub fn drop_ties(pairs: Vec<PreferencePair>) -> Vec<PreferencePair> {
    pairs.into_iter().filter(|p| p.label.is_strict()).collect()
}

pub fn from_native(records: &[NativePairRecord]) -> Vec<PreferencePair> {
    records
        .iter()
        .map(|r| PreferencePair {
            pair_id: r.pair_id.clone(),
            sample_a: r.sample_a.clone(),
            sample_b: r.sample_b.clone(),
            label: r.label,
            delta_used: None,
            scope: Scope::Native,
            score_a: None,
            score_b: None,
        })
        .collect()
}

/// Per-class counts, keyed by label.
pub fn label_counts(pairs: &[PreferencePair]) -> BTreeMap<Preference, usize> {
    let mut counts = BTreeMap::new();
    for p in pairs {
        *counts.entry(p.label).or_insert(0) += 1;
    }
    counts
}

pub fn write_pairs(path: &Path, pairs: &[PreferencePair]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for p in pairs {
        writeln!(w, "{}", serde_json::to_string(p)?)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_pairs(path: &Path) -> Result<Vec<PreferencePair>> {
    let reader = BufReader::new(crate::error::open(path)?);
    let mut pairs = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let pair: PreferencePair = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        if pair.sample_a == pair.sample_b {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: "sample_a and sample_b are identical".into(),
            });
        }
        pairs.push(pair);
    }
    Ok(pairs)
}
