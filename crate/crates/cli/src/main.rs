use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};

use sqa::checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_VERSION};
use sqa::config::{from_toml, RunConfig};
use sqa::eval::{
    evaluate_dataset, metric_correlation_matrix, read_predictions, report_table, score_diff_preference,
    sweep_csv, threshold_sweep, write_predictions, EvalReport, PairPredictions, PredictionRecord,
    StrictPolicy, SweepSource, SweepTruth, Table,
};
use sqa::features::PreparedSample;
use sqa::manifest::{load_manifest, SampleRecord};
use sqa::pairs::{build_pairs, drop_ties, label_counts, read_pairs, symmetrize, write_pairs, PreferencePair, Scope};
use sqa::synth::{generate, SynthConfig};
use sqa::trainer::{predict_all, predict_pairs, TrainData, Trainer};
use sqa::{Error, MetricRegistry, Model, Result, Supervision};

#[derive(Parser)]
#[command(name = "sqa", about = "Speech quality prediction toolkit")]
struct Cli {
    /// Maximum worker threads for numeric kernels.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus with a hidden latent quality.
    SynthData(SynthArgs),
    /// Derive preference pairs from absolute labels.
    BuildPairs(PairArgs),
    /// Train a model from a run config.
    Train(TrainArgs),
    /// Score a checkpoint or a predictions file against labels and pairs.
    Evaluate(EvalArgs),
    /// Preference accuracy as a function of the tie threshold.
    Sweep(SweepArgs),
    /// Spearman correlation between every pair of metrics in a manifest.
    Correlate(CorrelateArgs),
    /// Assemble a CSV table from evaluation reports.
    Report(ReportArgs),
}

#[derive(Args)]
struct RegistryArgs {
    /// Built-in metric subset used to read the manifest.
    #[arg(long, conflicts_with = "registry")]
    supervision: Option<Supervision>,
    /// Registry JSON document used to read the manifest.
    #[arg(long)]
    registry: Option<PathBuf>,
}

impl RegistryArgs {
    fn resolve(&self) -> Result<MetricRegistry> {
        match (&self.supervision, &self.registry) {
            (_, Some(p)) => MetricRegistry::load(p),
            (Some(s), None) => Ok(MetricRegistry::for_supervision(*s)),
            (None, None) => Ok(MetricRegistry::for_supervision(Supervision::M15)),
        }
    }
}

#[derive(Args)]
struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// TOML file with generator settings; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    n_samples: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Duration range in seconds, `MIN,MAX`.
    #[arg(long, value_parser = parse_range)]
    duration: Option<(f64, f64)>,
    /// SNR range in dB, `MIN,MAX`.
    #[arg(long, value_parser = parse_range)]
    snr: Option<(f64, f64)>,
    #[arg(long)]
    label_noise_sd: Option<f64>,
    #[arg(long)]
    corpora: Option<usize>,
    #[arg(long)]
    systems: Option<usize>,
    #[arg(long)]
    references: Option<usize>,
    /// Drop probability for one metric, `METRIC=P`; repeatable.
    #[arg(long = "missing", value_parser = parse_assignment)]
    missing: Vec<(String, f64)>,
    /// Comma-separated metrics to label (default: all built-in).
    #[arg(long, value_delimiter = ',')]
    metrics: Option<Vec<String>>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScopeArg {
    Any,
    Corpus,
    Ref,
}

#[derive(Args)]
struct PairArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum)]
    scope: ScopeArg,
    #[arg(long, default_value = "MOS")]
    metric: String,
    #[arg(long, default_value_t = 0.5)]
    delta: f64,
    #[arg(long, default_value_t = 100_000)]
    cap: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Append the reversed counterpart of every pair.
    #[arg(long)]
    symmetrize: bool,
    /// Keep derived ties (default) or drop them.
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    keep_ties: bool,
    #[command(flatten)]
    registry: RegistryArgs,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Continue from a checkpoint written by an earlier run of this config.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Also write a checkpoint every N steps.
    #[arg(long)]
    save_every: Option<u64>,
}

#[derive(Args)]
struct SourceArgs {
    /// Model checkpoint.
    #[arg(long, required_unless_present = "predictions", conflicts_with = "predictions")]
    ckpt: Option<PathBuf>,
    /// Predictions file (JSON lines of `{sample_id, scores}`).
    #[arg(long)]
    predictions: Option<PathBuf>,
    /// Turn predicted scores into preferences even if the checkpoint has a
    /// preference module.
    #[arg(long)]
    score_diff: bool,
    /// Metric whose predictions feed correlations and score differences.
    #[arg(long, default_value = "MOS")]
    metric: String,
    #[arg(long, default_value_t = 32)]
    batch: usize,
    #[command(flatten)]
    registry: RegistryArgs,
}

#[derive(Clone, Copy, ValueEnum)]
enum PolicyArg {
    Penalize,
    Drop,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    source: SourceArgs,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    pairs: Option<PathBuf>,
    /// Threshold of the score-difference preference predictor.
    #[arg(long, default_value_t = 0.5)]
    baseline_delta: f64,
    /// Treatment of predicted ties on strict pairs.
    #[arg(long, value_enum, default_value = "penalize")]
    strict_policy: PolicyArg,
    /// Report everything under one dataset name instead of per corpus.
    #[arg(long)]
    dataset: Option<String>,
    /// Model name in the report (default: input file stem).
    #[arg(long)]
    name: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write the checkpoint's predictions.
    #[arg(long)]
    write_predictions: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    source: SourceArgs,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    pairs: PathBuf,
    #[arg(long, value_delimiter = ',', required = true)]
    deltas: Vec<f64>,
    /// Re-derive ground truth at each threshold instead of holding it fixed.
    #[arg(long)]
    relabel: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CorrelateArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[command(flatten)]
    registry: RegistryArgs,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum TableArg {
    Preference,
    Correlation,
}

#[derive(Args)]
struct ReportArgs {
    /// EvalReport JSON files, one row each.
    #[arg(required = true)]
    reports: Vec<PathBuf>,
    #[arg(long, value_enum)]
    table: TableArg,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_range(s: &str) -> std::result::Result<(f64, f64), String> {
    let (a, b) = s.split_once(',').ok_or("expected MIN,MAX")?;
    let p = |v: &str| v.trim().parse::<f64>().map_err(|e| format!("`{v}`: {e}"));
    Ok((p(a)?, p(b)?))
}

fn parse_assignment(s: &str) -> std::result::Result<(String, f64), String> {
    let (k, v) = s.split_once('=').ok_or("expected METRIC=P")?;
    Ok((k.to_string(), v.parse::<f64>().map_err(|e| format!("`{v}`: {e}"))?))
}

fn main() -> ExitCode {
    let version = format!("{} (checkpoint format {CHECKPOINT_VERSION})", env!("CARGO_PKG_VERSION"));
    let version: &'static str = Box::leak(version.into_boxed_str());
    let matches = Cli::command().version(version).get_matches();
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(cli) => cli,
        Err(e) => e.exit(),
    };
    if let Some(j) = cli.jobs {
        // Read by the tensor backend when it sizes its thread pool.
        std::env::set_var("RAYON_NUM_THREADS", j.max(1).to_string());
    }
    let result = match cli.command {
        Command::SynthData(a) => synth_data(a),
        Command::BuildPairs(a) => build_pairs_cmd(a),
        Command::Train(a) => train(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Sweep(a) => sweep(a),
        Command::Correlate(a) => correlate(a),
        Command::Report(a) => report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

/// Writes `text` to `out`, or stdout when absent.
fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => fs::write(p, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn parent_dir(path: &Path) -> &Path {
    path.parent().unwrap_or(Path::new(""))
}

fn synth_data(a: SynthArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => from_toml::<SynthConfig>(&fs::read_to_string(p)?, p)?,
        None => SynthConfig::default(),
    };
    macro_rules! set {
        ($field:ident, $value:expr) => {
            if let Some(v) = $value {
                cfg.$field = v;
            }
        };
    }
    set!(n_samples, a.n_samples);
    set!(seed, a.seed);
    set!(duration_range, a.duration);
    set!(snr_range_db, a.snr);
    set!(label_noise_sd, a.label_noise_sd);
    set!(n_corpora, a.corpora);
    set!(n_systems, a.systems);
    set!(n_references, a.references);
    if a.metrics.is_some() {
        cfg.metrics = a.metrics;
    }
    cfg.missingness.extend(a.missing);
    let manifest = generate(&cfg, &a.out)?;
    println!("{}", manifest.display());
    Ok(())
}

fn build_pairs_cmd(a: PairArgs) -> Result<()> {
    let registry = a.registry.resolve()?;
    registry.lookup(&a.metric)?;
    let records = load_manifest(&a.manifest, &registry)?;
    let total = records.len();
    let labeled: Vec<SampleRecord> = records.into_iter().filter(|r| r.label(&a.metric).is_some()).collect();
    let scope = match a.scope {
        ScopeArg::Any => Scope::Any,
        ScopeArg::Corpus => Scope::Corpus,
        ScopeArg::Ref => Scope::Ref,
    };
    let mut pairs = build_pairs(&labeled, scope, &a.metric, a.delta, a.cap, a.seed)?;
    if !a.keep_ties {
        pairs = drop_ties(pairs);
    }
    if a.symmetrize {
        pairs = symmetrize(&pairs);
    }
    write_pairs(&a.out, &pairs)?;
    let counts = label_counts(&pairs);
    let count = |p| counts.get(&p).copied().unwrap_or(0);
    println!(
        "{} pairs from {} of {} records (A {}, tie {}, B {})",
        pairs.len(),
        labeled.len(),
        total,
        count(sqa::pairs::Preference::AWins),
        count(sqa::pairs::Preference::Tie),
        count(sqa::pairs::Preference::BWins),
    );
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let mut cfg = RunConfig::load(&a.config)?;
    if let Some(v) = a.steps {
        cfg.train.steps = v;
    }
    if let Some(v) = a.lr {
        cfg.train.lr = v;
    }
    if let Some(v) = a.seed {
        cfg.train.seed = v;
    }
    if let Some(v) = a.output_dir {
        cfg.output_dir = v;
    }
    cfg.validate()?;
    let model_cfg = cfg.model_config()?;
    let (model, start) = match &a.resume {
        Some(p) => {
            let (model, step) = load_checkpoint(p)?;
            if model.config() != &model_cfg {
                return Err(Error::VersionMismatch(format!(
                    "{} was written by a different model configuration",
                    p.display()
                )));
            }
            (model, step)
        }
        None => (Model::new(model_cfg)?, 0),
    };
    let registry = model.registry().clone();
    let records = load_manifest(&cfg.data.manifest, &registry)?;
    let mut pairs = Vec::new();
    for p in &cfg.data.pairs {
        pairs.extend(read_pairs(p)?);
    }
    let data = TrainData::load(&model, records, parent_dir(&cfg.data.manifest), pairs)?;
    fs::create_dir_all(&cfg.output_dir)?;
    let log_path = cfg.output_dir.join("train.log.jsonl");
    let log_file = if start > 0 {
        OpenOptions::new().create(true).append(true).open(&log_path)?
    } else {
        File::create(&log_path)?
    };
    let mut log = BufWriter::new(log_file);
    let mut trainer = Trainer::new(&model, &data, cfg.train.clone())?;
    trainer.skip(start)?;
    let save_every = a.save_every.filter(|&n| n > 0);
    let out_dir = cfg.output_dir.clone();
    let mut last = None;
    trainer.run(Some(&mut log), |step, report| {
        if let Some(n) = save_every {
            if step % n == 0 {
                save_checkpoint(&model, step, &out_dir.join(format!("step-{step:06}.ckpt")))?;
            }
        }
        last = Some(report.total);
        Ok(())
    })?;
    log.flush()?;
    let ckpt = cfg.output_dir.join("model.ckpt");
    save_checkpoint(&model, trainer.step(), &ckpt)?;
    match last {
        Some(total) => println!(
            "{} trained to step {}; last loss {}; checkpoint {}",
            model.config().tag(),
            trainer.step(),
            serde_json::to_string(&total)?,
            ckpt.display()
        ),
        None => println!("nothing to do at step {}; checkpoint {}", trainer.step(), ckpt.display()),
    }
    Ok(())
}

/// Scores and, for checkpoints, the loaded model with prepared inputs.
struct Scored {
    registry: MetricRegistry,
    records: Vec<SampleRecord>,
    scores: BTreeMap<String, f64>,
    model: Option<(Model, Vec<PreparedSample>)>,
}

fn score_manifest(src: &SourceArgs, manifest: &Path) -> Result<Scored> {
    match (&src.ckpt, &src.predictions) {
        (Some(ckpt), _) => {
            let (model, _) = load_checkpoint(ckpt)?;
            let registry = model.registry().clone();
            let column = registry.index_of(&src.metric)?;
            let records = load_manifest(manifest, &registry)?;
            let dir = parent_dir(manifest);
            let prepared: Vec<PreparedSample> = records
                .iter()
                .map(|r| model.extractor.prepare(&r.sample_id, &r.resolve_audio(dir), dir))
                .collect::<Result<_>>()?;
            let rows = predict_all(&model, &prepared, src.batch)?;
            let scores = records.iter().zip(&rows).map(|(r, row)| (r.sample_id.clone(), row[column])).collect();
            Ok(Scored {
                registry,
                records,
                scores,
                model: Some((model, prepared)),
            })
        }
        (None, Some(path)) => {
            let registry = src.registry.resolve()?;
            let records = load_manifest(manifest, &registry)?;
            let mut scores = BTreeMap::new();
            for p in read_predictions(path)? {
                if let Some(&v) = p.scores.get(&src.metric) {
                    scores.insert(p.sample_id, v);
                }
            }
            Ok(Scored {
                registry,
                records,
                scores,
                model: None,
            })
        }
        (None, None) => Err(Error::Config("one of --ckpt or --predictions is required".into())),
    }
}

impl Scored {
    fn uses_direct(&self, src: &SourceArgs) -> bool {
        !src.score_diff && matches!(&self.model, Some((m, _)) if m.ncpm.is_some())
    }

    fn score_of(&self, id: &str) -> Result<f64> {
        self.scores
            .get(id)
            .copied()
            .ok_or_else(|| Error::MissingLabel {
                sample: id.to_string(),
                metric: "prediction".into(),
            })
    }

    /// Forward and backward preference predictions for `pairs`.
    fn pair_predictions(&self, src: &SourceArgs, pairs: &[PreferencePair], delta: f64) -> Result<PairPredictions> {
        if self.uses_direct(src) {
            let (model, prepared) = self.model.as_ref().expect("direct predictions need a model");
            let index: HashMap<&str, usize> =
                self.records.iter().enumerate().map(|(i, r)| (r.sample_id.as_str(), i)).collect();
            let find = |id: &str| index.get(id).copied().ok_or_else(|| Error::UnknownSample(id.to_string()));
            let idx: Vec<(usize, usize)> = pairs
                .iter()
                .map(|p| Ok((find(&p.sample_a)?, find(&p.sample_b)?)))
                .collect::<Result<_>>()?;
            let rev: Vec<(usize, usize)> = idx.iter().map(|&(a, b)| (b, a)).collect();
            return Ok(PairPredictions {
                forward: predict_pairs(model, prepared, &idx, src.batch)?,
                backward: Some(predict_pairs(model, prepared, &rev, src.batch)?),
            });
        }
        let (a, b) = self.pair_scores(pairs)?;
        Ok(PairPredictions {
            forward: score_diff_preference(&a, &b, delta)?,
            backward: Some(score_diff_preference(&b, &a, delta)?),
        })
    }

    fn pair_scores(&self, pairs: &[PreferencePair]) -> Result<(Vec<f64>, Vec<f64>)> {
        let a = pairs.iter().map(|p| self.score_of(&p.sample_a)).collect::<Result<_>>()?;
        let b = pairs.iter().map(|p| self.score_of(&p.sample_b)).collect::<Result<_>>()?;
        Ok((a, b))
    }
}

fn source_name(src: &SourceArgs) -> String {
    src.ckpt
        .as_ref()
        .or(src.predictions.as_ref())
        .and_then(|p| p.file_stem())
        .map_or_else(|| "model".into(), |s| s.to_string_lossy().into_owned())
}

fn evaluate(a: EvalArgs) -> Result<()> {
    let scored = score_manifest(&a.source, &a.manifest)?;
    scored.registry.lookup(&a.source.metric)?;
    if let (Some(path), Some(_)) = (&a.write_predictions, &scored.model) {
        let (model, prepared) = scored.model.as_ref().unwrap();
        let rows = predict_all(model, prepared, a.source.batch)?;
        let names: Vec<String> = scored.registry.names().map(str::to_string).collect();
        let preds: Vec<PredictionRecord> = scored
            .records
            .iter()
            .zip(rows)
            .map(|(r, row)| PredictionRecord {
                sample_id: r.sample_id.clone(),
                scores: names.iter().cloned().zip(row).collect(),
            })
            .collect();
        write_predictions(path, &preds)?;
    }
    let pairs = match &a.pairs {
        Some(p) => read_pairs(p)?,
        None => Vec::new(),
    };
    let corpus_of: HashMap<&str, &str> = scored
        .records
        .iter()
        .map(|r| (r.sample_id.as_str(), r.corpus_id.as_str()))
        .collect();
    let dataset_of = |corpus: &str| a.dataset.clone().unwrap_or_else(|| corpus.to_string());
    let mut groups: BTreeMap<String, (Vec<SampleRecord>, Vec<PreferencePair>)> = BTreeMap::new();
    for r in &scored.records {
        groups.entry(dataset_of(&r.corpus_id)).or_default().0.push(r.clone());
    }
    for p in pairs {
        let corpus = corpus_of
            .get(p.sample_a.as_str())
            .ok_or_else(|| Error::UnknownSample(p.sample_a.clone()))?;
        groups.entry(dataset_of(corpus)).or_default().1.push(p);
    }
    let policy = match a.strict_policy {
        PolicyArg::Penalize => StrictPolicy::Penalize,
        PolicyArg::Drop => StrictPolicy::Drop,
    };
    let mut report = EvalReport {
        model: a.name.clone().unwrap_or_else(|| source_name(&a.source)),
        per_dataset: BTreeMap::new(),
    };
    for (name, (records, pairs)) in groups {
        let predictions = if pairs.is_empty() {
            None
        } else {
            Some(scored.pair_predictions(&a.source, &pairs, a.baseline_delta)?)
        };
        let ds = evaluate_dataset(
            &records,
            &a.source.metric,
            Some(&scored.scores),
            &pairs,
            predictions.as_ref(),
            policy,
        )
        .map_err(|e| Error::Config(format!("dataset {name}: {e}")))?;
        report.per_dataset.insert(name, ds);
    }
    let mut text = serde_json::to_string_pretty(&report)?;
    text.push('\n');
    emit(a.out.as_deref(), &text)
}

fn sweep(a: SweepArgs) -> Result<()> {
    let scored = score_manifest(&a.source, &a.manifest)?;
    let pairs = read_pairs(&a.pairs)?;
    let truth = if a.relabel { SweepTruth::Relabel } else { SweepTruth::Fixed };
    let points = if scored.uses_direct(&a.source) {
        let pp = scored.pair_predictions(&a.source, &pairs, 0.0)?;
        threshold_sweep(SweepSource::Direct(&pp.forward), &pairs, &a.deltas, truth)?
    } else {
        let (sa, sb) = scored.pair_scores(&pairs)?;
        threshold_sweep(SweepSource::Scores { a: &sa, b: &sb }, &pairs, &a.deltas, truth)?
    };
    emit(a.out.as_deref(), &sweep_csv(&points))
}

fn correlate(a: CorrelateArgs) -> Result<()> {
    let registry = a.registry.resolve()?;
    let records = load_manifest(&a.manifest, &registry)?;
    // Only metrics the manifest actually labels.
    let present: Vec<&str> = registry
        .names()
        .filter(|m| records.iter().any(|r| r.label(m).is_some()))
        .collect();
    let registry = registry.subset(&present)?;
    emit(a.out.as_deref(), &metric_correlation_matrix(&records, &registry).to_csv())
}

fn report(a: ReportArgs) -> Result<()> {
    let reports = a
        .reports
        .iter()
        .map(|p| {
            let text = fs::read_to_string(p).map_err(|source| Error::File { path: p.clone(), source })?;
            serde_json::from_str::<EvalReport>(&text).map_err(|e| Error::Parse {
                path: p.clone(),
                line: e.line(),
                message: e.to_string(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let table = match a.table {
        TableArg::Preference => Table::Preference,
        TableArg::Correlation => Table::Correlation,
    };
    emit(a.out.as_deref(), &report_table(&reports, table))
}
