//! Evaluation: correlations, preference accuracies, threshold sweeps,
//! order consistency, inter-metric correlation, and report tables.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::manifest::SampleRecord;
use crate::pairs::{derive_label, PreferencePair, Preference};
use crate::registry::MetricRegistry;

fn check_pair(x: &[f64], y: &[f64]) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::LengthMismatch(format!("{} vs {} values", x.len(), y.len())));
    }
    if x.len() < 2 {
        return Err(Error::EmptyInput("correlation needs at least two points"));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::Degenerate("non-finite value".into()));
    }
    Ok(())
}

/// Sample Pearson correlation. Errors on constant input.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y)?;
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Degenerate("correlation of a constant vector".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// 1-based ranks; tied values share the mean of their rank span.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = rank;
        }
        i = j + 1;
    }
    ranks
}

/// Pearson correlation of average ranks.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y)?;
    pearson(&average_ranks(x), &average_ranks(y))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AccuracyMode {
    /// Exact three-way match over all pairs.
    WithTies,
    /// Ground-truth ties removed; see [`StrictPolicy`] for predicted ties.
    Strict,
}

/// What STRICT accuracy does with a predicted tie on a strict pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrictPolicy {
    /// Count it as wrong.
    #[default]
    Penalize,
    /// Remove the pair from the denominator.
    Drop,
}

pub fn label_accuracy(
    predictions: &[Preference],
    truths: &[Preference],
    mode: AccuracyMode,
    policy: StrictPolicy,
) -> Result<f64> {
    if predictions.len() != truths.len() {
        return Err(Error::LengthMismatch(format!(
            "{} predictions for {} pairs",
            predictions.len(),
            truths.len()
        )));
    }
    let mut correct = 0usize;
    let mut total = 0usize;
    for (&p, &t) in predictions.iter().zip(truths) {
        if mode == AccuracyMode::Strict && (!t.is_strict() || (policy == StrictPolicy::Drop && !p.is_strict())) {
            continue;
        }
        total += 1;
        correct += usize::from(p == t);
    }
    if total == 0 {
        return Err(Error::EmptyInput("no pairs left to score"));
    }
    Ok(correct as f64 / total as f64)
}

/// Accuracy with the default (penalizing) strict policy.
pub fn preference_accuracy(predictions: &[Preference], truths: &[PreferencePair], mode: AccuracyMode) -> Result<f64> {
    let labels: Vec<Preference> = truths.iter().map(|p| p.label).collect();
    label_accuracy(predictions, &labels, mode, StrictPolicy::Penalize)
}

/// Converts predicted absolute scores into preference labels.
pub fn score_diff_preference(scores_a: &[f64], scores_b: &[f64], delta: f64) -> Result<Vec<Preference>> {
    if scores_a.len() != scores_b.len() {
        return Err(Error::LengthMismatch(format!("{} vs {} scores", scores_a.len(), scores_b.len())));
    }
    scores_a
        .iter()
        .zip(scores_b)
        .map(|(&a, &b)| derive_label(a, b, delta))
        .collect()
}

/// Predictions to sweep: fixed class predictions, or predicted scores turned
/// into labels at each threshold.
#[derive(Debug, Clone, Copy)]
pub enum SweepSource<'a> {
    Direct(&'a [Preference]),
    Scores { a: &'a [f64], b: &'a [f64] },
}

/// Whether the ground truth is held fixed or re-derived at each threshold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepTruth {
    Fixed,
    Relabel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub delta: f64,
    pub accuracy: f64,
    /// Predictions that are not ties.
    pub strict_predictions: usize,
}

pub fn threshold_sweep(
    source: SweepSource,
    pairs: &[PreferencePair],
    deltas: &[f64],
    truth: SweepTruth,
) -> Result<Vec<SweepPoint>> {
    if deltas.is_empty() {
        return Err(Error::EmptyInput("no thresholds to sweep"));
    }
    deltas
        .iter()
        .map(|&delta| {
            if !(delta >= 0.0) {
                return Err(Error::NegativeDelta(delta));
            }
            let predictions = match source {
                SweepSource::Direct(p) => p.to_vec(),
                SweepSource::Scores { a, b } => score_diff_preference(a, b, delta)?,
            };
            let truths = match truth {
                SweepTruth::Fixed => pairs.iter().map(|p| p.label).collect(),
                SweepTruth::Relabel => crate::pairs::relabel_pairs(pairs, delta)?
                    .iter()
                    .map(|p| p.label)
                    .collect::<Vec<_>>(),
            };
            Ok(SweepPoint {
                delta,
                accuracy: label_accuracy(&predictions, &truths, AccuracyMode::WithTies, StrictPolicy::Penalize)?,
                strict_predictions: predictions.iter().filter(|p| p.is_strict()).count(),
            })
        })
        .collect()
}

pub fn sweep_csv(points: &[SweepPoint]) -> String {
    let mut s = String::from("delta,accuracy,strict_predictions\n");
    for p in points {
        let _ = writeln!(s, "{},{},{}", p.delta, p.accuracy, p.strict_predictions);
    }
    s
}

/// Fraction of pairs whose two orderings contradict each other: the same
/// side wins in both `(a, b)` and `(b, a)`.
pub fn inconsistency_rate(forward: &[Preference], backward: &[Preference]) -> Result<f64> {
    if forward.len() != backward.len() {
        return Err(Error::LengthMismatch(format!("{} vs {} predictions", forward.len(), backward.len())));
    }
    if forward.is_empty() {
        return Err(Error::EmptyInput("no pairs to check"));
    }
    let bad = forward
        .iter()
        .zip(backward)
        .filter(|(f, b)| f.is_strict() && f == b)
        .count();
    Ok(bad as f64 / forward.len() as f64)
}

/// Symmetric matrix of pairwise-complete Spearman correlations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationMatrix {
    pub metrics: Vec<String>,
    /// `None` where fewer than two co-labeled records exist or a column is
    /// constant on the overlap.
    pub cells: Vec<Vec<Option<f64>>>,
}

impl CorrelationMatrix {
    pub fn get(&self, a: &str, b: &str) -> Option<f64> {
        let i = self.metrics.iter().position(|m| m == a)?;
        let j = self.metrics.iter().position(|m| m == b)?;
        self.cells[i][j]
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric");
        for m in &self.metrics {
            let _ = write!(s, ",{m}");
        }
        s.push('\n');
        for (m, row) in self.metrics.iter().zip(&self.cells) {
            s.push_str(m);
            for c in row {
                match c {
                    Some(v) => {
                        let _ = write!(s, ",{v:.4}");
                    }
                    None => s.push_str(",UNDEFINED"),
                }
            }
            s.push('\n');
        }
        s
    }
}

pub fn metric_correlation_matrix(records: &[SampleRecord], registry: &MetricRegistry) -> CorrelationMatrix {
    let metrics: Vec<String> = registry.names().map(str::to_string).collect();
    let k = metrics.len();
    let mut cells = vec![vec![None; k]; k];
    for i in 0..k {
        for j in i..k {
            let (x, y): (Vec<f64>, Vec<f64>) = records
                .iter()
                .filter_map(|r| Some((r.label(&metrics[i])?, r.label(&metrics[j])?)))
                .unzip();
            let value = if x.len() < 2 {
                None
            } else if i == j {
                Some(1.0)
            } else {
                spearman(&x, &y).ok()
            };
            cells[i][j] = value;
            cells[j][i] = value;
        }
    }
    CorrelationMatrix { metrics, cells }
}

/// Per-dataset evaluation numbers; absent fields were not evaluated.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetReport {
    /// WITH_TIES accuracy keyed by the threshold used for ground truth.
    #[serde(default)]
    pub acc_at: BTreeMap<String, f64>,
    #[serde(default)]
    pub acc_strict: Option<f64>,
    #[serde(default)]
    pub lcc: Option<f64>,
    #[serde(default)]
    pub srcc: Option<f64>,
    #[serde(default)]
    pub n_pairs: usize,
    #[serde(default)]
    pub n_samples: usize,
    #[serde(default)]
    pub inconsistency_rate: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(default)]
    pub model: String,
    pub per_dataset: BTreeMap<String, DatasetReport>,
}

/// Which report table to assemble.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Table {
    /// Cells `acc_0.5 / acc_0`.
    Preference,
    /// Cells `LCC / SRCC`.
    Correlation,
}

fn cell(a: Option<f64>, b: Option<f64>) -> String {
    let f = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.3}"));
    format!("{} / {}", f(a), f(b))
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Rows are models, columns are datasets.
pub fn report_table(reports: &[EvalReport], table: Table) -> String {
    let datasets: Vec<&String> = {
        let mut all: Vec<&String> = reports.iter().flat_map(|r| r.per_dataset.keys()).collect();
        all.sort();
        all.dedup();
        all
    };
    let mut s = String::from("model");
    for d in &datasets {
        let _ = write!(s, ",{}", csv_field(d));
    }
    s.push('\n');
    for r in reports {
        s.push_str(&csv_field(&r.model));
        for d in &datasets {
            let text = match r.per_dataset.get(*d) {
                None => "-".to_string(),
                Some(ds) => match table {
                    Table::Preference => cell(ds.acc_at.get("0.5").copied(), ds.acc_strict),
                    Table::Correlation => cell(ds.lcc, ds.srcc),
                },
            };
            let _ = write!(s, ",{}", csv_field(&text));
        }
        s.push('\n');
    }
    s
}

/// Predicted scores for one sample; a line of a predictions file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub sample_id: String,
    pub scores: BTreeMap<String, f64>,
}

pub fn write_predictions(path: &Path, predictions: &[PredictionRecord]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for p in predictions {
        writeln!(w, "{}", serde_json::to_string(p)?)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_predictions(path: &Path) -> Result<Vec<PredictionRecord>> {
    let reader = BufReader::new(crate::error::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

/// Preference predictions aligned with a pair list, optionally also for the
/// reversed order of every pair.
#[derive(Debug, Clone, PartialEq)]
pub struct PairPredictions {
    pub forward: Vec<Preference>,
    pub backward: Option<Vec<Preference>>,
}

/// Ground-truth thresholds reported for derived pairs.
pub const REPORT_DELTAS: [f64; 2] = [0.5, 0.0];

/// Scores one dataset. `scores` maps sample ids to the predicted value of
/// `metric`; correlations use records that carry both a label and a score.
/// Derived pairs are scored against ground truth re-derived at each of
/// [`REPORT_DELTAS`] and strict accuracy uses the zero-threshold truth;
/// native pairs are scored as annotated under the key `native`.
pub fn evaluate_dataset(
    records: &[SampleRecord],
    metric: &str,
    scores: Option<&BTreeMap<String, f64>>,
    pairs: &[PreferencePair],
    predictions: Option<&PairPredictions>,
    policy: StrictPolicy,
) -> Result<DatasetReport> {
    let mut report = DatasetReport {
        n_samples: records.len(),
        n_pairs: pairs.len(),
        ..DatasetReport::default()
    };
    if let Some(scores) = scores {
        let (pred, truth): (Vec<f64>, Vec<f64>) = records
            .iter()
            .filter_map(|r| Some((*scores.get(&r.sample_id)?, r.label(metric)?)))
            .unzip();
        if pred.len() >= 2 {
            report.lcc = Some(pearson(&pred, &truth)?);
            report.srcc = Some(spearman(&pred, &truth)?);
        }
    }
    let Some(pp) = predictions else {
        return Ok(report);
    };
    if pairs.is_empty() {
        return Ok(report);
    }
    let derived = pairs.iter().all(|p| p.score_a.is_some() && p.score_b.is_some());
    let strict_truth: Vec<Preference> = if derived {
        for delta in REPORT_DELTAS {
            let truth: Vec<Preference> = crate::pairs::relabel_pairs(pairs, delta)?.iter().map(|p| p.label).collect();
            let acc = label_accuracy(&pp.forward, &truth, AccuracyMode::WithTies, policy)?;
            report.acc_at.insert(format!("{delta}"), acc);
        }
        crate::pairs::relabel_pairs(pairs, 0.0)?.iter().map(|p| p.label).collect()
    } else {
        let truth: Vec<Preference> = pairs.iter().map(|p| p.label).collect();
        let acc = label_accuracy(&pp.forward, &truth, AccuracyMode::WithTies, policy)?;
        report.acc_at.insert("native".into(), acc);
        truth
    };
    if strict_truth.iter().any(|t| t.is_strict()) {
        report.acc_strict = label_accuracy(&pp.forward, &strict_truth, AccuracyMode::Strict, policy).ok();
    }
    if let Some(back) = &pp.backward {
        report.inconsistency_rate = Some(inconsistency_rate(&pp.forward, back)?);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pearson_examples() {
        assert!((pearson(&[1., 2., 3.], &[2., 4., 6.]).unwrap() - 1.0).abs() < 1e-12);
        assert!((pearson(&[1., 2., 3.], &[3., 2., 1.]).unwrap() + 1.0).abs() < 1e-12);
        assert!((pearson(&[1., 2., 3., 4.], &[1., 3., 2., 4.]).unwrap() - 0.8).abs() < 1e-12);
        assert!(matches!(pearson(&[1., 1., 1.], &[1., 2., 3.]), Err(Error::Degenerate(_))));
        assert!(pearson(&[1.], &[1.]).is_err());
    }

    #[test]
    fn spearman_examples() {
        assert!((spearman(&[1., 2., 3.], &[1., 5., 9.]).unwrap() - 1.0).abs() < 1e-12);
        let tied = spearman(&[1., 2., 3.], &[10., 10., 20.]).unwrap();
        assert!((tied - 3f64.sqrt() / 2.0).abs() < 1e-12);
        assert!((spearman(&[1., 2., 3.], &[3., 2., 1.]).unwrap() + 1.0).abs() < 1e-12);
        assert_eq!(average_ranks(&[5., 1., 5., 3.]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn strict_accuracy_policies() {
        use Preference::*;
        let truth = [AWins, Tie, BWins, AWins];
        let pred = [AWins, Tie, Tie, BWins];
        let with = label_accuracy(&pred, &truth, AccuracyMode::WithTies, StrictPolicy::Penalize).unwrap();
        assert_eq!(with, 0.5);
        let strict = label_accuracy(&pred, &truth, AccuracyMode::Strict, StrictPolicy::Penalize).unwrap();
        assert!((strict - 1.0 / 3.0).abs() < 1e-12);
        let dropped = label_accuracy(&pred, &truth, AccuracyMode::Strict, StrictPolicy::Drop).unwrap();
        assert_eq!(dropped, 0.5);
        assert!(label_accuracy(&[Tie], &[Tie], AccuracyMode::Strict, StrictPolicy::Penalize).is_err());
    }

    #[test]
    fn score_diff_examples() {
        use Preference::*;
        assert_eq!(score_diff_preference(&[4.0], &[3.2], 0.5).unwrap(), vec![AWins]);
        assert_eq!(score_diff_preference(&[3.01], &[3.0], 0.5).unwrap(), vec![Tie]);
        let p = score_diff_preference(&[1.0, 2.0, 3.0], &[1.5, 1.9, 3.0001], 0.0).unwrap();
        assert!(p.iter().all(|l| l.is_strict()));
        assert!(score_diff_preference(&[1.0], &[1.0], -0.1).is_err());
    }

    #[test]
    fn inconsistency() {
        use Preference::*;
        let f = [AWins, BWins, Tie, AWins];
        let b = [AWins, AWins, Tie, BWins];
        assert_eq!(inconsistency_rate(&f, &b).unwrap(), 0.25);
    }

    #[test]
    fn dataset_report_from_oracle_scores() {
        use crate::pairs::{build_pairs, Scope};
        let records: Vec<SampleRecord> = [1.0, 2.5, 3.0, 4.5]
            .iter()
            .enumerate()
            .map(|(i, &mos)| SampleRecord {
                sample_id: format!("s{i}"),
                corpus_id: "c".into(),
                system_id: None,
                reference_id: None,
                audio_path: "x.wav".into(),
                duration_s: 1.0,
                labels: [("MOS".to_string(), mos)].into(),
            })
            .collect();
        let scores: BTreeMap<String, f64> = records.iter().map(|r| (r.sample_id.clone(), r.labels["MOS"])).collect();
        let pairs = build_pairs(&records, Scope::Any, "MOS", 0.5, 100, 0).unwrap();
        let a: Vec<f64> = pairs.iter().map(|p| scores[&p.sample_a]).collect();
        let b: Vec<f64> = pairs.iter().map(|p| scores[&p.sample_b]).collect();
        let pp = PairPredictions {
            forward: score_diff_preference(&a, &b, 0.5).unwrap(),
            backward: Some(score_diff_preference(&b, &a, 0.5).unwrap()),
        };
        let r = evaluate_dataset(&records, "MOS", Some(&scores), &pairs, Some(&pp), StrictPolicy::Penalize).unwrap();
        assert!((r.lcc.unwrap() - 1.0).abs() < 1e-12 && (r.srcc.unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(r.acc_at["0.5"], 1.0);
        // 2.5 vs 3.0 is a tie at 0.5 but strict at 0.
        assert_eq!(r.acc_at["0"], 5.0 / 6.0);
        assert_eq!(r.acc_strict, Some(5.0 / 6.0));
        assert_eq!(r.inconsistency_rate, Some(0.0));
    }

    #[test]
    fn tables() {
        let mut ds = DatasetReport {
            lcc: Some(0.9),
            srcc: Some(0.85),
            acc_strict: Some(0.6),
            ..Default::default()
        };
        ds.acc_at.insert("0.5".into(), 0.5);
        let r = EvalReport {
            model: "F1C1M1".into(),
            per_dataset: [("synthetic".to_string(), ds)].into(),
        };
        let t = report_table(std::slice::from_ref(&r), Table::Preference);
        assert_eq!(t, "model,synthetic\nF1C1M1,0.500 / 0.600\n");
        let t = report_table(&[r], Table::Correlation);
        assert_eq!(t, "model,synthetic\nF1C1M1,0.900 / 0.850\n");
    }
}
