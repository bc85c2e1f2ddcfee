//! Training objectives: the masked multi-metric regression loss, preference
//! cross-entropy, and their weighted combination.
//!
//! For metric `k` with validity mask `m` over a batch,
//!
//! ```text
//! L^k   = w_k * sum_b m_b (pred_b - y_b)^2 / sum_b m_b
//! L_MSE = mean of L^k over metrics with at least one valid label
//! ```
//!
//! A metric with no valid labels is [`LossTerm::Skipped`], never zero.
//! Each function has a plain `f64` form (used for reporting and as a
//! reference) and a tensor form used in training.

use std::collections::BTreeMap;

use candle_core::{DType, Tensor};
use serde::ser::SerializeMap;
use serde::{Deserialize, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::pairs::Preference;

/// A loss value or the marker for "no supervision in this batch".
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LossTerm {
    Value(f64),
    Skipped,
}

impl LossTerm {
    pub fn value(self) -> Option<f64> {
        match self {
            LossTerm::Value(v) => Some(v),
            LossTerm::Skipped => None,
        }
    }

    pub fn is_skipped(self) -> bool {
        self == LossTerm::Skipped
    }
}

impl From<Option<f64>> for LossTerm {
    fn from(v: Option<f64>) -> Self {
        v.map_or(LossTerm::Skipped, LossTerm::Value)
    }
}

impl Serialize for LossTerm {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            LossTerm::Value(v) => s.serialize_f64(*v),
            LossTerm::Skipped => s.serialize_str("SKIPPED"),
        }
    }
}

impl<'de> Deserialize<'de> for LossTerm {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(LossTerm::Value(v)),
            Raw::Text(t) if t == "SKIPPED" => Ok(LossTerm::Skipped),
            Raw::Text(t) => Err(serde::de::Error::custom(format!("unexpected loss term `{t}`"))),
        }
    }
}

/// Output of [`masked_metric_loss`]: per-metric terms in column order.
#[derive(Debug, Clone, PartialEq)]
pub struct MseFragment {
    pub per_metric: Vec<LossTerm>,
    pub mse_total: LossTerm,
    pub valid_metric_count: usize,
}

fn check_matrix<T>(rows: &[Vec<T>], b: usize, k: usize, what: &str) -> Result<()> {
    if rows.len() != b || rows.iter().any(|r| r.len() != k) {
        return Err(Error::ShapeMismatch(format!("{what} is not {b}x{k}")));
    }
    Ok(())
}

fn check_inputs(preds: &[Vec<f64>], labels: &[Vec<Option<f64>>], weights: &[f64]) -> Result<(usize, usize)> {
    let b = preds.len();
    let k = weights.len();
    check_matrix(preds, b, k, "predictions")?;
    check_matrix(labels, b, k, "labels")?;
    if preds.iter().flatten().any(|p| !p.is_finite()) {
        return Err(Error::InvalidRecord {
            sample: "<batch>".into(),
            reason: "non-finite prediction".into(),
        });
    }
    Ok((b, k))
}

/// Masked per-metric squared error over a `B x K` batch.
pub fn masked_metric_loss(
    preds: &[Vec<f64>],
    labels: &[Vec<Option<f64>>],
    weights: &[f64],
) -> Result<MseFragment> {
    let (b, k) = check_inputs(preds, labels, weights)?;
    let per_metric: Vec<LossTerm> = (0..k)
        .map(|j| {
            let mut sum = 0.0;
            let mut count = 0usize;
            for i in 0..b {
                if let Some(y) = labels[i][j] {
                    sum += (preds[i][j] - y).powi(2);
                    count += 1;
                }
            }
            if count == 0 {
                LossTerm::Skipped
            } else {
                LossTerm::Value(weights[j] * sum / count as f64)
            }
        })
        .collect();
    Ok(fragment(per_metric))
}

fn fragment(per_metric: Vec<LossTerm>) -> MseFragment {
    let valid: Vec<f64> = per_metric.iter().filter_map(|t| t.value()).collect();
    let mse_total = if valid.is_empty() {
        LossTerm::Skipped
    } else {
        LossTerm::Value(valid.iter().sum::<f64>() / valid.len() as f64)
    };
    MseFragment {
        valid_metric_count: valid.len(),
        per_metric,
        mse_total,
    }
}

/// `d mse_total / d preds`; exactly zero at masked positions.
pub fn masked_metric_loss_grad(
    preds: &[Vec<f64>],
    labels: &[Vec<Option<f64>>],
    weights: &[f64],
) -> Result<Vec<Vec<f64>>> {
    let (b, k) = check_inputs(preds, labels, weights)?;
    let counts: Vec<usize> = (0..k)
        .map(|j| (0..b).filter(|&i| labels[i][j].is_some()).count())
        .collect();
    let valid = counts.iter().filter(|&&c| c > 0).count();
    let mut grad = vec![vec![0.0; k]; b];
    if valid == 0 {
        return Ok(grad);
    }
    for i in 0..b {
        for j in 0..k {
            if let Some(y) = labels[i][j] {
                grad[i][j] = weights[j] * 2.0 * (preds[i][j] - y) / (counts[j] as f64 * valid as f64);
            }
        }
    }
    Ok(grad)
}

fn log_sum_exp(row: &[f64; 3]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Mean cross-entropy of 3-way logits ordered (A wins, tie, B wins).
pub fn preference_ce(logits: &[[f64; 3]], labels: &[Preference]) -> Result<f64> {
    if logits.is_empty() {
        return Err(Error::EmptyInput("cross-entropy of an empty batch"));
    }
    if logits.len() != labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} logit rows for {} labels",
            logits.len(),
            labels.len()
        )));
    }
    let total: f64 = logits
        .iter()
        .zip(labels)
        .map(|(row, label)| log_sum_exp(row) - row[label.class_index()])
        .sum();
    Ok(total / logits.len() as f64)
}

/// `d preference_ce / d logits`.
pub fn preference_ce_grad(logits: &[[f64; 3]], labels: &[Preference]) -> Result<Vec<[f64; 3]>> {
    preference_ce(logits, labels)?;
    let n = logits.len() as f64;
    Ok(logits
        .iter()
        .zip(labels)
        .map(|(row, label)| {
            let lse = log_sum_exp(row);
            let mut g = [0.0; 3];
            for c in 0..3 {
                g[c] = (row[c] - lse).exp() / n;
            }
            g[label.class_index()] -= 1.0 / n;
            g
        })
        .collect())
}

/// Weights of the three loss terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Lambdas {
    pub mse: f64,
    pub ce: f64,
    pub cmos: f64,
}

impl Default for Lambdas {
    fn default() -> Self {
        Lambdas {
            mse: 1.0,
            ce: 1.0,
            cmos: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub total: LossTerm,
    pub mse_total: LossTerm,
    /// Per-metric terms in registry order.
    pub per_metric: Vec<(String, LossTerm)>,
    pub ce: LossTerm,
    pub cmos: LossTerm,
    pub valid_metric_count: usize,
}

struct OrderedTerms<'a>(&'a [(String, LossTerm)]);

impl Serialize for OrderedTerms<'_> {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let mut map = s.serialize_map(Some(self.0.len()))?;
        for (k, v) in self.0 {
            map.serialize_entry(k, v)?;
        }
        map.end()
    }
}

impl Serialize for LossReport {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let mut map = s.serialize_map(Some(6))?;
        map.serialize_entry("total", &self.total)?;
        map.serialize_entry("mse_total", &self.mse_total)?;
        map.serialize_entry("per_metric", &OrderedTerms(&self.per_metric))?;
        map.serialize_entry("ce", &self.ce)?;
        map.serialize_entry("cmos", &self.cmos)?;
        map.serialize_entry("valid_metric_count", &self.valid_metric_count)?;
        map.end()
    }
}

impl<'de> Deserialize<'de> for LossReport {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Raw {
            total: LossTerm,
            mse_total: LossTerm,
            per_metric: BTreeMap<String, LossTerm>,
            ce: LossTerm,
            cmos: LossTerm,
            valid_metric_count: usize,
        }
        let r = Raw::deserialize(d)?;
        Ok(LossReport {
            total: r.total,
            mse_total: r.mse_total,
            per_metric: r.per_metric.into_iter().collect(),
            ce: r.ce,
            cmos: r.cmos,
            valid_metric_count: r.valid_metric_count,
        })
    }
}

impl LossReport {
    /// Report for a step that had nothing to learn from.
    pub fn skipped(names: &[String]) -> Self {
        LossReport {
            total: LossTerm::Skipped,
            mse_total: LossTerm::Skipped,
            per_metric: names.iter().map(|n| (n.clone(), LossTerm::Skipped)).collect(),
            ce: LossTerm::Skipped,
            cmos: LossTerm::Skipped,
            valid_metric_count: 0,
        }
    }
}

/// Combines available terms; errors when every term is skipped.
pub fn total_loss(
    mse: Option<(&MseFragment, &[String])>,
    ce: LossTerm,
    cmos: LossTerm,
    lambdas: Lambdas,
) -> Result<LossReport> {
    let (mse_total, per_metric, valid) = match mse {
        Some((f, names)) => {
            if names.len() != f.per_metric.len() {
                return Err(Error::ShapeMismatch("metric names do not match loss columns".into()));
            }
            (
                f.mse_total,
                names.iter().cloned().zip(f.per_metric.iter().copied()).collect(),
                f.valid_metric_count,
            )
        }
        None => (LossTerm::Skipped, Vec::new(), 0),
    };
    let terms = [(mse_total, lambdas.mse), (ce, lambdas.ce), (cmos, lambdas.cmos)];
    if terms.iter().all(|(t, _)| t.is_skipped()) {
        return Err(Error::AllTermsSkipped);
    }
    let total = terms
        .iter()
        .filter_map(|(t, w)| t.value().map(|v| w * v))
        .sum();
    Ok(LossReport {
        total: LossTerm::Value(total),
        mse_total,
        per_metric,
        ce,
        cmos,
        valid_metric_count: valid,
    })
}

/// Tensor form of the masked loss for `(B, K)` predictions, in the dtype of
/// `preds`. Returns `None` when no metric has a valid label.
///
/// Masked positions enter only through a zero coefficient on a zero-filled
/// residual, so their gradient is exactly zero.
pub fn masked_mse_tensor(
    preds: &Tensor,
    labels: &[Vec<Option<f64>>],
    weights: &[f64],
) -> Result<Option<Tensor>> {
    let (b, k) = preds.dims2()?;
    check_matrix(labels, b, k, "labels")?;
    if weights.len() != k {
        return Err(Error::ShapeMismatch(format!("{} weights for {k} metrics", weights.len())));
    }
    let counts: Vec<usize> = (0..k)
        .map(|j| (0..b).filter(|&i| labels[i][j].is_some()).count())
        .collect();
    let valid = counts.iter().filter(|&&c| c > 0).count();
    if valid == 0 {
        return Ok(None);
    }
    let mut targets = vec![0f64; b * k];
    let mut coef = vec![0f64; b * k];
    for i in 0..b {
        for j in 0..k {
            if let Some(y) = labels[i][j] {
                targets[i * k + j] = y;
                coef[i * k + j] = weights[j] / (counts[j] as f64 * valid as f64);
            }
        }
    }
    let dtype = preds.dtype();
    let dev = preds.device();
    let targets = Tensor::from_vec(targets, (b, k), dev)?.to_dtype(dtype)?;
    let coef = Tensor::from_vec(coef, (b, k), dev)?.to_dtype(dtype)?;
    let mask = coef.ne(0.0)?.to_dtype(dtype)?;
    let residual = preds.sub(&targets)?.mul(&mask)?;
    Ok(Some(residual.sqr()?.mul(&coef)?.sum_all()?))
}

/// Tensor form of [`preference_ce`] for `(B, 3)` logits.
pub fn preference_ce_tensor(logits: &Tensor, labels: &[Preference]) -> Result<Tensor> {
    let (b, c) = logits.dims2()?;
    if b == 0 {
        return Err(Error::EmptyInput("cross-entropy of an empty batch"));
    }
    if c != 3 || labels.len() != b {
        return Err(Error::ShapeMismatch(format!("logits {b}x{c} for {} labels", labels.len())));
    }
    let target: Vec<u32> = labels.iter().map(|l| l.class_index() as u32).collect();
    let target = Tensor::from_vec(target, b, logits.device())?;
    Ok(candle_nn::loss::cross_entropy(logits, &target)?)
}

/// Squared error between predicted and target score differences.
pub fn cmos_tensor(cmos: &Tensor, targets: &[f64]) -> Result<Tensor> {
    let b = cmos.dims1()?;
    if targets.len() != b || b == 0 {
        return Err(Error::ShapeMismatch(format!("{b} CMOS predictions for {} targets", targets.len())));
    }
    let t = Tensor::from_slice(targets, b, cmos.device())?.to_dtype(cmos.dtype())?;
    Ok(cmos.sub(&t)?.sqr()?.mean_all()?)
}

pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}
