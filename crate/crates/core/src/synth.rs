//! Synthetic corpora with a known latent quality.
//!
//! Each sample is a harmonic tone plus white noise at a sampled SNR. The
//! latent quality `q` maps SNR linearly onto `[1, 5]`, and every registered
//! metric receives a monotone function of `q` plus optional Gaussian noise,
//! clamped into the metric's range. The latent is written to a sidecar so
//! trained predictors can be scored against it.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::audio::{write_wav, SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::manifest::{write_manifest, SampleRecord};
use crate::registry::{default_registry, MetricRegistry, MetricSpec};

/// Metrics that fall as quality rises (distances).
const DECREASING: [&str; 2] = ["LSD", "MCD"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_samples: usize,
    pub duration_range: (f64, f64),
    pub snr_range_db: (f64, f64),
    /// Drop probability per metric; unlisted metrics are never dropped.
    pub missingness: BTreeMap<String, f64>,
    pub label_noise_sd: f64,
    pub n_corpora: usize,
    pub n_systems: usize,
    pub n_references: usize,
    pub seed: u64,
    /// Metrics to label; all built-in metrics when absent.
    pub metrics: Option<Vec<String>>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_samples: 200,
            duration_range: (1.0, 2.0),
            snr_range_db: (-5.0, 30.0),
            missingness: BTreeMap::new(),
            label_noise_sd: 0.1,
            n_corpora: 2,
            n_systems: 4,
            n_references: 2,
            seed: 0,
            metrics: None,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_samples == 0 || self.n_corpora == 0 || self.n_systems == 0 || self.n_references == 0 {
            return bad("sample, corpus, system and reference counts must be positive".into());
        }
        let (d0, d1) = self.duration_range;
        if !(d0 > 0.0 && d1 >= d0 && d1.is_finite()) {
            return bad(format!("invalid duration range {d0}..{d1}"));
        }
        let (s0, s1) = self.snr_range_db;
        if !(s1 > s0 && s0.is_finite() && s1.is_finite()) {
            return bad(format!("invalid SNR range {s0}..{s1}"));
        }
        for (m, &p) in &self.missingness {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("missingness for {m} must be in [0, 1], got {p}"));
            }
        }
        if !(self.label_noise_sd >= 0.0 && self.label_noise_sd.is_finite()) {
            return bad(format!("label noise must be non-negative, got {}", self.label_noise_sd));
        }
        Ok(())
    }

    pub fn registry(&self) -> Result<MetricRegistry> {
        let full = default_registry();
        match &self.metrics {
            None => Ok(full),
            Some(names) => full.subset(&names.iter().map(String::as_str).collect::<Vec<_>>()),
        }
    }
}

/// Hidden ground truth for one sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentRecord {
    pub sample_id: String,
    pub q: f64,
    pub snr_db: f64,
}

/// Noise-free label for latent quality `q` in `[1, 5]`; also returns the
/// slope used to scale label noise.
pub fn clean_label(spec: &MetricSpec, q: f64) -> (f64, f64) {
    let u = (q - 1.0) / 4.0;
    let (lo, hi) = (spec.lower_value(), spec.upper_value());
    let decreasing = DECREASING.contains(&spec.name.as_str());
    match (lo.is_finite(), hi.is_finite()) {
        (true, true) => (lo + (hi - lo) * u, hi - lo),
        (true, false) if decreasing => (lo + 8.0 * (1.0 - u), 8.0),
        (true, false) => (lo + 8.0 * u, 8.0),
        (false, true) => (hi - 2.0 * (1.0 - u), 2.0),
        (false, false) => (-5.0 + 35.0 * u, 35.0),
    }
}

fn synthesize(rng: &mut ChaCha8Rng, n: usize, f0: f64, snr_db: f64) -> Vec<f32> {
    let sr = SAMPLE_RATE as f64;
    let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let mut clean: Vec<f64> = (0..n)
        .map(|i| {
            let t = i as f64 / sr;
            let envelope = 0.6 + 0.4 * (std::f64::consts::TAU * 3.0 * t + phase).sin();
            let tone: f64 = (1..=5)
                .map(|h| (std::f64::consts::TAU * f0 * h as f64 * t).sin() / h as f64)
                .sum();
            envelope * tone
        })
        .collect();
    let rms = (clean.iter().map(|v| v * v).sum::<f64>() / n as f64).sqrt().max(1e-12);
    let target_rms = 0.1;
    for v in &mut clean {
        *v *= target_rms / rms;
    }
    let noise = Normal::new(0.0, target_rms / 10f64.powf(snr_db / 20.0)).expect("valid sd");
    let mixed: Vec<f64> = clean.iter().map(|c| c + noise.sample(rng)).collect();
    let peak = mixed.iter().fold(0f64, |m, v| m.max(v.abs()));
    let scale = if peak > 0.9 { 0.9 / peak } else { 1.0 };
    mixed.iter().map(|v| (v * scale) as f32).collect()
}

/// Writes `manifest.jsonl`, `latent.jsonl` and `audio/*.wav` under
/// `out_dir` and returns the manifest path.
pub fn generate(config: &SynthConfig, out_dir: &Path) -> Result<PathBuf> {
    config.validate()?;
    let registry = config.registry()?;
    for m in config.missingness.keys() {
        registry.lookup(m)?;
    }
    let audio_dir = out_dir.join("audio");
    fs::create_dir_all(&audio_dir)?;
    let width = config.n_samples.to_string().len().max(5);
    let mut records = Vec::with_capacity(config.n_samples);
    let mut latents = Vec::with_capacity(config.n_samples);
    for i in 0..config.n_samples {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(i as u64 + 1);
        let corpus = i % config.n_corpora;
        let j = i / config.n_corpora;
        let system = j % config.n_systems;
        let reference = (j / config.n_systems) % config.n_references;
        let sample_id = format!("syn{:0width$}", i + 1);

        let (d0, d1) = config.duration_range;
        let duration: f64 = if d1 > d0 { rng.random_range(d0..d1) } else { d0 };
        let n = ((duration * SAMPLE_RATE as f64).round() as usize).max(1);
        let (s0, s1) = config.snr_range_db;
        let snr_db: f64 = rng.random_range(s0..s1);
        let q = 1.0 + 4.0 * (snr_db - s0) / (s1 - s0);
        let f0 = 90.0 + 35.0 * reference as f64 + 10.0 * corpus as f64;
        let wave = synthesize(&mut rng, n, f0, snr_db);
        let rel = PathBuf::from("audio").join(format!("{sample_id}.wav"));
        write_wav(&out_dir.join(&rel), &wave, SAMPLE_RATE)?;

        let unit = Normal::new(0.0, 1.0).expect("valid sd");
        let mut labels = BTreeMap::new();
        for spec in registry.specs() {
            let (clean, slope) = clean_label(spec, q);
            let z: f64 = unit.sample(&mut rng);
            let drop: f64 = rng.random();
            let y = clean + z * config.label_noise_sd * slope / 4.0;
            let y = y.clamp(spec.lower_value(), spec.upper_value());
            if drop >= config.missingness.get(&spec.name).copied().unwrap_or(0.0) {
                labels.insert(spec.name.clone(), y);
            }
        }
        records.push(SampleRecord {
            sample_id: sample_id.clone(),
            corpus_id: format!("corpus{corpus}"),
            system_id: Some(format!("sys{system}")),
            reference_id: Some(format!("corpus{corpus}-ref{reference}")),
            audio_path: rel,
            duration_s: n as f64 / SAMPLE_RATE as f64,
            labels,
        });
        latents.push(LatentRecord { sample_id, q, snr_db });
    }
    let manifest = out_dir.join("manifest.jsonl");
    write_manifest(&manifest, &records, &registry)?;
    let mut w = BufWriter::new(File::create(out_dir.join("latent.jsonl"))?);
    for l in &latents {
        writeln!(w, "{}", serde_json::to_string(l)?)?;
    }
    w.flush()?;
    Ok(manifest)
}

/// Reads a latent sidecar into `sample_id -> q`.
pub fn load_latents(path: &Path) -> Result<BTreeMap<String, f64>> {
    let reader = BufReader::new(crate::error::open(path)?);
    let mut out = BTreeMap::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: LatentRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.insert(rec.sample_id, rec.q);
    }
    Ok(out)
}
