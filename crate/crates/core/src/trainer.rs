//! Joint training over absolute-score and preference batches.
//!
//! Batches are packed against an audio-duration budget. Every step a seeded
//! coin decides whether the next batch comes from the absolute stream or the
//! preference stream; each stream reshuffles per epoch from a seed derived
//! from the run seed, so a run is fully determined by seed, config and data.

use std::cell::RefCell;
use std::collections::HashMap;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use candle_core::backprop::GradStore;
use candle_core::Tensor;
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ampm::Grouping;
use crate::error::{Error, Result};
use crate::features::PreparedSample;
use crate::manifest::SampleRecord;
use crate::model::Model;
use crate::nn::{to_vec_f32, Mode};
use crate::objectives::{
    cmos_tensor, masked_metric_loss, masked_mse_tensor, preference_ce_tensor, scalar, total_loss, Lambdas,
    LossReport, LossTerm,
};
use crate::pairs::{Preference, PreferencePair};
use crate::registry::{MetricRegistry, Supervision};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub steps: u64,
    pub batch_budget_s: f64,
    pub seed: u64,
    pub grouping: Grouping,
    /// Expected metric subset; `None` accepts whatever registry the model has.
    pub supervision: Option<Supervision>,
    /// Fraction of steps that draw a preference batch.
    pub mix_ratio: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
    pub warmup_steps: u64,
    pub dropout: f64,
    pub lambdas: Lambdas,
    /// Keep derived tie pairs in the preference stream.
    pub keep_ties: bool,
    /// Train on each pair in both orders within the same batch.
    pub symmetrize: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 3e-5,
            steps: 20_000,
            batch_budget_s: 400.0,
            seed: 0,
            grouping: Grouping::C1,
            supervision: None,
            mix_ratio: 0.0,
            grad_clip: Some(1.0),
            warmup_steps: 0,
            dropout: 0.1,
            lambdas: Lambdas::default(),
            keep_ties: true,
            symmetrize: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(self.batch_budget_s > 0.0) {
            return Err(Error::Config("batch budget must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.mix_ratio) {
            return Err(Error::Config(format!("mix_ratio must be in [0, 1], got {}", self.mix_ratio)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout must be in [0, 1), got {}", self.dropout)));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::Config("grad_clip must be positive".into()));
            }
        }
        Ok(())
    }
}

/// Packs items in the given order: a batch closes when the next item would
/// push it over `budget_s`.
pub fn pack_greedy(durations: &[f64], order: &[usize], budget_s: f64) -> Vec<Vec<usize>> {
    let mut batches = Vec::new();
    let mut current = Vec::new();
    let mut total = 0.0;
    for &i in order {
        let d = durations[i];
        if !current.is_empty() && total + d > budget_s {
            batches.push(std::mem::take(&mut current));
            total = 0.0;
        }
        current.push(i);
        total += d;
    }
    if !current.is_empty() {
        batches.push(current);
    }
    batches
}

fn shuffled_batches(ids: &[&str], durations: &[f64], budget_s: f64, seed: u64) -> Result<Vec<Vec<usize>>> {
    for (id, &d) in ids.iter().zip(durations) {
        if d > budget_s {
            return Err(Error::OversizedSample {
                sample: id.to_string(),
                duration_s: d,
                budget_s,
            });
        }
    }
    let mut order: Vec<usize> = (0..durations.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(pack_greedy(durations, &order, budget_s))
}

/// One epoch of duration-budgeted batches over `records`, as indices.
pub fn make_batches(records: &[SampleRecord], budget_s: f64, seed: u64) -> Result<Vec<Vec<usize>>> {
    let ids: Vec<&str> = records.iter().map(|r| r.sample_id.as_str()).collect();
    let durations: Vec<f64> = records.iter().map(|r| r.duration_s).collect();
    shuffled_batches(&ids, &durations, budget_s, seed)
}

/// Records, their prepared extractor inputs, and preference pairs resolved
/// to record indices.
pub struct TrainData {
    pub records: Vec<SampleRecord>,
    pub prepared: Vec<PreparedSample>,
    pub pairs: Vec<PreferencePair>,
    pair_index: Vec<(usize, usize)>,
}

impl TrainData {
    pub fn new(records: Vec<SampleRecord>, prepared: Vec<PreparedSample>, pairs: Vec<PreferencePair>) -> Result<Self> {
        if records.len() != prepared.len() {
            return Err(Error::ShapeMismatch("one prepared input per record is required".into()));
        }
        let index: HashMap<&str, usize> = records
            .iter()
            .enumerate()
            .map(|(i, r)| (r.sample_id.as_str(), i))
            .collect();
        let lookup = |id: &str| index.get(id).copied().ok_or_else(|| Error::UnknownSample(id.to_string()));
        let pair_index = pairs
            .iter()
            .map(|p| Ok((lookup(&p.sample_a)?, lookup(&p.sample_b)?)))
            .collect::<Result<_>>()?;
        Ok(TrainData {
            records,
            prepared,
            pairs,
            pair_index,
        })
    }

    /// Reads audio/features for every record.
    pub fn load(model: &Model, records: Vec<SampleRecord>, manifest_dir: &Path, pairs: Vec<PreferencePair>) -> Result<Self> {
        let prepared = records
            .iter()
            .map(|r| model.extractor.prepare(&r.sample_id, &r.resolve_audio(manifest_dir), manifest_dir))
            .collect::<Result<_>>()?;
        Self::new(records, prepared, pairs)
    }

    pub fn index_of_pair(&self, i: usize) -> (usize, usize) {
        self.pair_index[i]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "items", rename_all = "snake_case")]
pub enum Batch {
    /// Record indices.
    Absolute(Vec<usize>),
    /// Pair indices.
    Preference(Vec<usize>),
}

#[derive(Serialize)]
struct LogLine<'a> {
    step: u64,
    kind: &'a str,
    loss: &'a LossReport,
    lr: f64,
    wall_ms: u64,
}

struct Stream {
    ids: Vec<String>,
    durations: Vec<f64>,
    pool: Vec<usize>,
    seed: u64,
    epoch: u64,
    queue: std::collections::VecDeque<Vec<usize>>,
}

impl Stream {
    fn new(ids: Vec<String>, durations: Vec<f64>, pool: Vec<usize>, seed: u64) -> Self {
        Stream {
            ids,
            durations,
            pool,
            seed,
            epoch: 0,
            queue: Default::default(),
        }
    }

    fn next(&mut self, budget_s: f64) -> Result<Vec<usize>> {
        if self.queue.is_empty() {
            let ids: Vec<&str> = self.pool.iter().map(|&i| self.ids[i].as_str()).collect();
            let durations: Vec<f64> = self.pool.iter().map(|&i| self.durations[i]).collect();
            let seed = self.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(self.epoch);
            let batches = shuffled_batches(&ids, &durations, budget_s, seed)?;
            self.queue = batches
                .into_iter()
                .map(|b| b.into_iter().map(|j| self.pool[j]).collect())
                .collect();
            self.epoch += 1;
        }
        self.queue.pop_front().ok_or(Error::EmptyInput("no training items"))
    }
}

pub struct Trainer<'a> {
    model: &'a Model,
    data: &'a TrainData,
    config: TrainConfig,
    optimizer: AdamW,
    coin: ChaCha8Rng,
    dropout_rng: RefCell<ChaCha8Rng>,
    absolute: Option<Stream>,
    preference: Option<Stream>,
    metric_names: Vec<String>,
    weights: Vec<f64>,
    step: u64,
}

fn check_consistency(model: &Model, config: &TrainConfig) -> Result<()> {
    if model.config().ampm.grouping != config.grouping {
        return Err(Error::Config(format!(
            "model uses {} grouping, training config asks for {}",
            model.config().ampm.grouping,
            config.grouping
        )));
    }
    if let Some(sup) = config.supervision {
        let expected = MetricRegistry::for_supervision(sup);
        if let Some(diff) = crate::checkpoint::registry_difference(model.registry(), &expected) {
            return Err(Error::Config(format!("supervision {sup}: {diff}")));
        }
    }
    Ok(())
}

impl<'a> Trainer<'a> {
    pub fn new(model: &'a Model, data: &'a TrainData, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        check_consistency(model, &config)?;
        let registry = model.registry();
        let metric_names: Vec<String> = registry.names().map(str::to_string).collect();
        let weights = registry.specs().iter().map(|s| s.weight).collect();

        let labeled: Vec<usize> = (0..data.records.len())
            .filter(|&i| metric_names.iter().any(|m| data.records[i].label(m).is_some()))
            .collect();
        let absolute = (config.mix_ratio < 1.0 && !labeled.is_empty()).then(|| {
            Stream::new(
                data.records.iter().map(|r| r.sample_id.clone()).collect(),
                data.records.iter().map(|r| r.duration_s).collect(),
                labeled,
                config.seed,
            )
        });

        let usable: Vec<usize> = (0..data.pairs.len())
            .filter(|&i| config.keep_ties || data.pairs[i].label != Preference::Tie)
            .collect();
        let preference = if config.mix_ratio > 0.0 && !usable.is_empty() {
            model.ncpm()?;
            let factor = if config.symmetrize { 2.0 } else { 1.0 };
            let durations = (0..data.pairs.len())
                .map(|i| {
                    let (a, b) = data.pair_index[i];
                    factor * data.records[a].duration_s.max(data.records[b].duration_s)
                })
                .collect();
            Some(Stream::new(
                data.pairs.iter().map(|p| p.pair_id.clone()).collect(),
                durations,
                usable,
                config.seed ^ 0x005E_ED0F_9A1F,
            ))
        } else {
            None
        };
        if absolute.is_none() && preference.is_none() {
            return Err(Error::EmptyInput("nothing to train on: no labeled records or usable pairs"));
        }

        let params = ParamsAdamW {
            lr: config.lr,
            weight_decay: 0.0,
            ..Default::default()
        };
        let optimizer = AdamW::new(model.store().all_vars(), params)?;
        let mut coin = ChaCha8Rng::seed_from_u64(config.seed);
        coin.set_stream(1);
        let mut dropout_rng = ChaCha8Rng::seed_from_u64(config.seed);
        dropout_rng.set_stream(2);
        Ok(Trainer {
            model,
            data,
            config,
            optimizer,
            coin,
            dropout_rng: RefCell::new(dropout_rng),
            absolute,
            preference,
            metric_names,
            weights,
            step: 0,
        })
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// Draws the next batch, advancing the data streams but not the model.
    pub fn next_batch(&mut self) -> Result<Batch> {
        let flip: f64 = self.coin.random();
        let want_pref = flip < self.config.mix_ratio;
        let budget = self.config.batch_budget_s;
        match (want_pref, &mut self.absolute, &mut self.preference) {
            (true, _, Some(p)) | (false, None, Some(p)) => Ok(Batch::Preference(p.next(budget)?)),
            (_, Some(a), _) => Ok(Batch::Absolute(a.next(budget)?)),
            (_, None, None) => Err(Error::EmptyInput("no training streams")),
        }
    }

    /// Advances the data streams by `steps` batches without training, e.g.
    /// to resume a run at the batch it stopped at.
    pub fn skip(&mut self, steps: u64) -> Result<()> {
        for _ in 0..steps {
            self.next_batch()?;
            self.step += 1;
        }
        Ok(())
    }

    fn current_lr(&self) -> f64 {
        if self.config.warmup_steps > 0 && self.step < self.config.warmup_steps {
            self.config.lr * (self.step + 1) as f64 / self.config.warmup_steps as f64
        } else {
            self.config.lr
        }
    }

    fn apply(&mut self, loss: &Tensor) -> Result<()> {
        let mut grads = loss.backward()?;
        if let Some(clip) = self.config.grad_clip {
            clip_grad_norm(&mut grads, self.model, clip)?;
        }
        let lr = self.current_lr();
        self.optimizer.set_learning_rate(lr);
        self.optimizer.step(&grads)?;
        Ok(())
    }

    fn mode(&self) -> Mode<'_> {
        Mode::Train {
            dropout: self.config.dropout,
            rng: &self.dropout_rng,
        }
    }

    fn absolute_step(&mut self, items: &[usize]) -> Result<LossReport> {
        let labels: Vec<Vec<Option<f64>>> = items
            .iter()
            .map(|&i| self.metric_names.iter().map(|m| self.data.records[i].label(m)).collect())
            .collect();
        if labels.iter().flatten().all(Option::is_none) {
            return Ok(LossReport::skipped(&self.metric_names));
        }
        let samples: Vec<&PreparedSample> = items.iter().map(|&i| &self.data.prepared[i]).collect();
        let mode = self.mode();
        let (fused, lengths) = self.model.extractor.forward(&samples)?;
        let out = self.model.ampm.forward_batch(&fused, &lengths, &mode)?;
        let Some(mse) = masked_mse_tensor(&out.preds, &labels, &self.weights)? else {
            return Ok(LossReport::skipped(&self.metric_names));
        };
        let k = self.metric_names.len();
        let host: Vec<Vec<f64>> = to_vec_f32(&out.preds)?
            .chunks(k)
            .map(|r| r.iter().map(|&v| v as f64).collect())
            .collect();
        let fragment = masked_metric_loss(&host, &labels, &self.weights)?;
        let report = total_loss(
            Some((&fragment, &self.metric_names)),
            LossTerm::Skipped,
            LossTerm::Skipped,
            self.config.lambdas,
        )?;
        let loss = (mse * self.config.lambdas.mse)?;
        self.apply(&loss)?;
        Ok(report)
    }

    fn preference_step(&mut self, items: &[usize]) -> Result<LossReport> {
        let mut a_idx = Vec::new();
        let mut b_idx = Vec::new();
        let mut labels = Vec::new();
        let mut diffs = Vec::new();
        for &i in items {
            let (a, b) = self.data.pair_index[i];
            let pair = &self.data.pairs[i];
            let diff = match (pair.score_a, pair.score_b) {
                (Some(x), Some(y)) => Some(x - y),
                _ => None,
            };
            a_idx.push(a);
            b_idx.push(b);
            labels.push(pair.label);
            diffs.push(diff);
            if self.config.symmetrize {
                a_idx.push(b);
                b_idx.push(a);
                labels.push(pair.label.reversed());
                diffs.push(diff.map(|d| -d));
            }
        }
        let model = self.model;
        let ncpm = model.ncpm()?;
        let key = model.ampm.naturalness_key()?;
        let mode = self.mode();
        let side = |idx: &[usize]| -> Result<(Tensor, Vec<usize>)> {
            let samples: Vec<&PreparedSample> = idx.iter().map(|&i| &self.data.prepared[i]).collect();
            let (fused, lengths) = model.extractor.forward(&samples)?;
            Ok((model.ampm.encode_group_batch(&fused, &lengths, key, &mode)?, lengths))
        };
        let (la, len_a) = side(&a_idx)?;
        let (lb, len_b) = side(&b_idx)?;
        let out = ncpm.forward_batch(&la, &len_a, &lb, &len_b, &mode)?;
        let ce = preference_ce_tensor(&out.logits, &labels)?;
        let ce_value = scalar(&ce)?;
        let mut loss = (&ce * self.config.lambdas.ce)?;
        let mut cmos_term = LossTerm::Skipped;
        if self.config.lambdas.cmos > 0.0 && diffs.iter().all(Option::is_some) {
            let targets: Vec<f64> = diffs.iter().map(|d| d.unwrap()).collect();
            let c = cmos_tensor(&out.cmos, &targets)?;
            cmos_term = LossTerm::Value(scalar(&c)?);
            loss = (loss + (c * self.config.lambdas.cmos)?)?;
        }
        let report = total_loss(None, LossTerm::Value(ce_value), cmos_term, self.config.lambdas)?;
        self.apply(&loss)?;
        Ok(report)
    }

    /// Runs one optimization step on `batch`. A batch with no usable
    /// supervision leaves the parameters untouched.
    pub fn train_step(&mut self, batch: &Batch) -> Result<LossReport> {
        let report = match batch {
            Batch::Absolute(items) => self.absolute_step(items)?,
            Batch::Preference(items) => self.preference_step(items)?,
        };
        self.step += 1;
        Ok(report)
    }

    /// Trains until `config.steps`, writing one JSON line per step.
    pub fn run(&mut self, mut log: Option<&mut dyn Write>, mut on_step: impl FnMut(u64, &LossReport) -> Result<()>) -> Result<()> {
        while self.step < self.config.steps {
            let started = Instant::now();
            let batch = self.next_batch()?;
            let lr = self.current_lr();
            let report = self.train_step(&batch)?;
            if let Some(w) = log.as_deref_mut() {
                let line = LogLine {
                    step: self.step,
                    kind: match batch {
                        Batch::Absolute(_) => "absolute",
                        Batch::Preference(_) => "preference",
                    },
                    loss: &report,
                    lr,
                    wall_ms: started.elapsed().as_millis() as u64,
                };
                writeln!(w, "{}", serde_json::to_string(&line)?)?;
            }
            on_step(self.step, &report)?;
        }
        Ok(())
    }
}

/// Rescales gradients of the model's parameters so their global L2 norm is
/// at most `max_norm`. Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut GradStore, model: &Model, max_norm: f64) -> Result<f64> {
    let vars = model.store().all_vars();
    let mut sq = 0.0;
    for v in &vars {
        if let Some(g) = grads.get(v.as_tensor()) {
            sq += scalar(&g.sqr()?.sum_all()?)?;
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm {
        let scale = max_norm / (norm + 1e-6);
        for v in &vars {
            if let Some(g) = grads.remove(v.as_tensor()) {
                grads.insert(v.as_tensor(), (g * scale)?);
            }
        }
    }
    Ok(norm)
}

/// Predictions for every prepared sample, `batch` samples at a time.
pub fn predict_all(model: &Model, prepared: &[PreparedSample], batch: usize) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(prepared.len());
    for chunk in prepared.chunks(batch.max(1)) {
        let refs: Vec<&PreparedSample> = chunk.iter().collect();
        out.extend(model.predict(&refs)?);
    }
    Ok(out)
}

/// Direct preference predictions for index pairs into `prepared`.
pub fn predict_pairs(
    model: &Model,
    prepared: &[PreparedSample],
    pairs: &[(usize, usize)],
    batch: usize,
) -> Result<Vec<Preference>> {
    let mut out = Vec::with_capacity(pairs.len());
    for chunk in pairs.chunks(batch.max(1)) {
        let a: Vec<&PreparedSample> = chunk.iter().map(|&(a, _)| &prepared[a]).collect();
        let b: Vec<&PreparedSample> = chunk.iter().map(|&(_, b)| &prepared[b]).collect();
        out.extend(model.predict_preferences(&a, &b)?);
    }
    Ok(out)
}
