//! Multi-branch feature extraction.
//!
//! Each encoder branch turns a waveform into `num_layers` layer-wise
//! sequences. Per branch the layers are combined by a softmax-weighted sum,
//! the branches are linearly interpolated in time to the longest branch, and
//! the results are concatenated along the feature axis and projected to the
//! model width.
//!
//! Inside the model everything is batched and time-major, `(B, T, d)`. The
//! single-sample functions on [`FeatureSequence`] run the same tensor code
//! with a batch of one.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::{Device, Module, Tensor, D};
use candle_nn::{Conv1d, Linear};
use serde::{Deserialize, Serialize};

use crate::audio::{read_wav, LogMel, SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::nn::{time_mask, to_vec_f32, ParamStore};

/// A `d x l` feature matrix (feature dimension by frames).
///
/// Stored time-major as an `(l, d)` tensor.
#[derive(Debug, Clone)]
pub struct FeatureSequence {
    frames: Tensor,
    frame_rate_hz: f64,
}

impl FeatureSequence {
    /// Builds a sequence from a `d x l` matrix given as rows of features.
    pub fn from_matrix(rows: &[Vec<f32>], frame_rate_hz: f64) -> Result<Self> {
        let d = rows.len();
        let l = rows.first().map_or(0, Vec::len);
        if d == 0 || l == 0 {
            return Err(Error::EmptyInput("feature matrix has no rows or frames"));
        }
        if rows.iter().any(|r| r.len() != l) {
            return Err(Error::ShapeMismatch("ragged feature matrix".into()));
        }
        let mut time_major = vec![0f32; d * l];
        for (i, row) in rows.iter().enumerate() {
            for (t, &v) in row.iter().enumerate() {
                time_major[t * d + i] = v;
            }
        }
        Self::from_time_major(time_major, l, d, frame_rate_hz)
    }

    pub fn from_time_major(values: Vec<f32>, l: usize, d: usize, frame_rate_hz: f64) -> Result<Self> {
        if l == 0 || d == 0 {
            return Err(Error::EmptyInput("feature matrix has no rows or frames"));
        }
        if values.len() != l * d {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a {d}x{l} matrix",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidRecord {
                sample: "<features>".into(),
                reason: "non-finite feature value".into(),
            });
        }
        Ok(FeatureSequence {
            frames: Tensor::from_vec(values, (l, d), &Device::Cpu)?,
            frame_rate_hz,
        })
    }

    /// Wraps an `(l, d)` tensor.
    pub fn from_frames(frames: Tensor, frame_rate_hz: f64) -> Result<Self> {
        let (l, d) = frames.dims2()?;
        if l == 0 || d == 0 {
            return Err(Error::EmptyInput("feature matrix has no rows or frames"));
        }
        Ok(FeatureSequence { frames, frame_rate_hz })
    }

    pub fn d(&self) -> usize {
        self.frames.dims()[1]
    }

    pub fn l(&self) -> usize {
        self.frames.dims()[0]
    }

    pub fn frame_rate_hz(&self) -> f64 {
        self.frame_rate_hz
    }

    /// The `(l, d)` tensor.
    pub fn frames(&self) -> &Tensor {
        &self.frames
    }

    /// The `d x l` matrix.
    pub fn matrix(&self) -> Result<Vec<Vec<f32>>> {
        let (l, d) = (self.l(), self.d());
        let v = to_vec_f32(&self.frames)?;
        Ok((0..d).map(|i| (0..l).map(|t| v[t * d + i]).collect()).collect())
    }

    pub fn time_major(&self) -> Result<Vec<f32>> {
        to_vec_f32(&self.frames)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    /// Log-mel front end followed by a trainable convolution stack.
    LearnableSpectrogram,
    /// Feature matrices read from files next to the audio.
    Precomputed,
}

fn default_n_mels() -> usize {
    32
}

fn default_suffix() -> String {
    ".feat".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub kind: EncoderKind,
    pub num_layers: usize,
    pub d: usize,
    pub stride_s: f64,
    #[serde(default = "default_n_mels")]
    pub n_mels: usize,
    #[serde(default = "default_suffix")]
    pub suffix: String,
    /// Where precomputed files live; defaults to the manifest directory.
    #[serde(default)]
    pub feature_dir: Option<PathBuf>,
}

impl EncoderConfig {
    pub fn learnable(num_layers: usize, d: usize, stride_s: f64) -> Self {
        EncoderConfig {
            kind: EncoderKind::LearnableSpectrogram,
            num_layers,
            d,
            stride_s,
            n_mels: default_n_mels(),
            suffix: default_suffix(),
            feature_dir: None,
        }
    }

    pub fn precomputed(d: usize, stride_s: f64, suffix: &str) -> Self {
        EncoderConfig {
            kind: EncoderKind::Precomputed,
            num_layers: 1,
            d,
            stride_s,
            n_mels: default_n_mels(),
            suffix: suffix.to_string(),
            feature_dir: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 || self.d == 0 {
            return Err(Error::Config("encoder needs at least one layer and a positive width".into()));
        }
        if !(self.stride_s > 0.0 && self.stride_s.is_finite()) {
            return Err(Error::Config(format!("encoder stride must be positive, got {}", self.stride_s)));
        }
        if self.kind == EncoderKind::Precomputed && self.num_layers != 1 {
            return Err(Error::Config("precomputed feature files hold a single layer".into()));
        }
        Ok(())
    }

    pub fn frame_rate_hz(&self) -> f64 {
        1.0 / self.stride_s
    }

    /// Precomputed feature file for a sample.
    pub fn feature_path(&self, sample_id: &str, manifest_dir: &Path) -> PathBuf {
        let dir = self.feature_dir.as_deref().unwrap_or(manifest_dir);
        let dir = if dir.is_absolute() { dir.to_path_buf() } else { manifest_dir.join(dir) };
        dir.join(format!("{sample_id}{}", self.suffix))
    }
}

const FEATURE_MAGIC: &[u8; 4] = b"SQAF";

/// Writes a `d x l` matrix: magic, `d` and `l` as little-endian `u32`, then
/// `d * l` little-endian `f32` values in row-major order.
pub fn write_feature_file(path: &Path, features: &FeatureSequence) -> Result<()> {
    let (d, l) = (features.d(), features.l());
    let mut buf = Vec::with_capacity(12 + 4 * d * l);
    buf.extend_from_slice(FEATURE_MAGIC);
    buf.extend_from_slice(&(d as u32).to_le_bytes());
    buf.extend_from_slice(&(l as u32).to_le_bytes());
    for row in features.matrix()? {
        for v in row {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

pub fn read_feature_file(path: &Path, frame_rate_hz: f64) -> Result<FeatureSequence> {
    let bytes = match fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(Error::MissingFeatureFile(path.to_path_buf()))
        }
        Err(e) => return Err(e.into()),
    };
    let bad = |reason: &str| Error::BadFeatureFile {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    if bytes.len() < 12 || &bytes[..4] != FEATURE_MAGIC {
        return Err(bad("missing header"));
    }
    let d = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let l = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if d == 0 || l == 0 {
        return Err(bad("empty matrix"));
    }
    if bytes.len() != 12 + 4 * d * l {
        return Err(bad("payload size does not match header"));
    }
    let mut time_major = vec![0f32; d * l];
    for (k, chunk) in bytes[12..].chunks_exact(4).enumerate() {
        let (i, t) = (k / l, k % l);
        time_major[t * d + i] = f32::from_le_bytes(chunk.try_into().unwrap());
    }
    FeatureSequence::from_time_major(time_major, l, d, frame_rate_hz).map_err(|_| bad("non-finite value"))
}

/// Host-side, parameter-free encoder input for one sample: a log-mel matrix
/// for learnable branches, the stored features for precomputed ones.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchInput {
    pub values: Vec<f32>,
    pub frames: usize,
    pub width: usize,
}

/// One encoder branch with its trainable parameters.
pub struct Encoder {
    config: EncoderConfig,
    mel: Option<LogMel>,
    conv_in: Option<Conv1d>,
    convs: Vec<Conv1d>,
}

impl Encoder {
    pub fn new(store: &mut ParamStore, name: &str, config: &EncoderConfig) -> Result<Self> {
        config.validate()?;
        match config.kind {
            EncoderKind::LearnableSpectrogram => {
                let mel = LogMel::new(SAMPLE_RATE, config.stride_s, config.n_mels)?;
                let conv_in = store.conv1d(&format!("{name}.conv_in"), config.n_mels, config.d, 3)?;
                let convs = (1..config.num_layers)
                    .map(|j| store.conv1d(&format!("{name}.conv{j}"), config.d, config.d, 3))
                    .collect::<Result<_>>()?;
                Ok(Encoder {
                    config: config.clone(),
                    mel: Some(mel),
                    conv_in: Some(conv_in),
                    convs,
                })
            }
            EncoderKind::Precomputed => Ok(Encoder {
                config: config.clone(),
                mel: None,
                conv_in: None,
                convs: Vec::new(),
            }),
        }
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    /// Frames produced for a waveform of `n_samples` samples.
    pub fn frame_count(&self, n_samples: usize) -> Option<usize> {
        self.mel.as_ref().map(|m| m.frame_count(n_samples))
    }

    pub fn prepare_waveform(&self, waveform: &[f32]) -> Result<BranchInput> {
        if waveform.is_empty() {
            return Err(Error::EmptyInput("empty waveform"));
        }
        let mel = self.mel.as_ref().ok_or_else(|| {
            Error::Config("a precomputed encoder reads feature files, not waveforms".into())
        })?;
        let values = mel.compute(waveform)?;
        Ok(BranchInput {
            frames: values.len() / mel.n_mels(),
            width: mel.n_mels(),
            values,
        })
    }

    pub fn prepare_file(&self, path: &Path) -> Result<BranchInput> {
        let seq = read_feature_file(path, self.config.frame_rate_hz())?;
        if seq.d() != self.config.d {
            return Err(Error::WidthMismatch {
                expected: self.config.d,
                got: seq.d(),
            });
        }
        Ok(BranchInput {
            values: seq.time_major()?,
            frames: seq.l(),
            width: seq.d(),
        })
    }

    /// Layer-wise outputs for a padded batch, each `(B, T, d)`, with padding
    /// frames zeroed.
    pub fn forward_layers(&self, inputs: &[&BranchInput]) -> Result<(Vec<Tensor>, Vec<usize>)> {
        let lengths: Vec<usize> = inputs.iter().map(|i| i.frames).collect();
        let t_max = lengths.iter().copied().max().ok_or(Error::EmptyInput("empty batch"))?;
        let width = inputs[0].width;
        let mut padded = vec![0f32; inputs.len() * t_max * width];
        for (b, input) in inputs.iter().enumerate() {
            if input.width != width {
                return Err(Error::WidthMismatch {
                    expected: width,
                    got: input.width,
                });
            }
            let start = b * t_max * width;
            padded[start..start + input.values.len()].copy_from_slice(&input.values);
        }
        let x = Tensor::from_vec(padded, (inputs.len(), t_max, width), &Device::Cpu)?;
        let Some(conv_in) = &self.conv_in else {
            return Ok((vec![x], lengths));
        };
        let mask = time_mask(&lengths, t_max, &Device::Cpu)?;
        let mut h = conv_in.forward(&x.transpose(1, 2)?)?.gelu()?.transpose(1, 2)?.broadcast_mul(&mask)?;
        let mut layers = vec![h.clone()];
        for conv in &self.convs {
            let update = conv.forward(&h.transpose(1, 2)?)?.gelu()?.transpose(1, 2)?;
            h = (h + update)?.broadcast_mul(&mask)?;
            layers.push(h.clone());
        }
        Ok((layers, lengths))
    }

    /// Layer-wise representations of a single waveform.
    pub fn encode(&self, waveform: &[f32]) -> Result<Vec<FeatureSequence>> {
        let input = self.prepare_waveform(waveform)?;
        self.encode_prepared(&input)
    }

    pub fn encode_prepared(&self, input: &BranchInput) -> Result<Vec<FeatureSequence>> {
        let (layers, _) = self.forward_layers(&[input])?;
        layers
            .into_iter()
            .map(|t| FeatureSequence::from_frames(t.squeeze(0)?, self.config.frame_rate_hz()))
            .collect()
    }
}

/// `sum_j softmax(weights)_j * layers[j]` for tensors of any common shape.
pub fn aggregate_tensors(layers: &[Tensor], weights: &Tensor) -> Result<Tensor> {
    let n = weights.dims1()?;
    if n != layers.len() || n == 0 {
        return Err(Error::ShapeMismatch(format!(
            "{} aggregation weights for {} layers",
            n,
            layers.len()
        )));
    }
    let shape = layers[0].shape();
    if layers.iter().any(|l| l.shape() != shape) {
        return Err(Error::ShapeMismatch("layers differ in shape".into()));
    }
    if n == 1 {
        return Ok(layers[0].clone());
    }
    let alpha = candle_nn::ops::softmax(weights, D::Minus1)?;
    let mut acc: Option<Tensor> = None;
    for (j, layer) in layers.iter().enumerate() {
        let term = layer.broadcast_mul(&alpha.narrow(0, j, 1)?)?;
        acc = Some(match acc {
            None => term,
            Some(a) => (a + term)?,
        });
    }
    Ok(acc.expect("at least one layer"))
}

/// Softmax-weighted sum of layer-wise sequences.
pub fn aggregate_layers(layers: &[FeatureSequence], weights: &[f32]) -> Result<FeatureSequence> {
    let first = layers.first().ok_or(Error::EmptyInput("no layers to aggregate"))?;
    let tensors: Vec<Tensor> = layers.iter().map(|l| l.frames.clone()).collect();
    let w = Tensor::from_slice(weights, weights.len(), &Device::Cpu)?;
    FeatureSequence::from_frames(aggregate_tensors(&tensors, &w)?, first.frame_rate_hz)
}

/// Linear-interpolation weights taking `l_in` frames to `l_out`, endpoints
/// fixed; row-major `l_out x l_in`.
pub fn interpolation_matrix(l_in: usize, l_out: usize) -> Vec<f32> {
    let mut m = vec![0f32; l_out * l_in];
    for j in 0..l_out {
        if l_in == l_out {
            m[j * l_in + j] = 1.0;
            continue;
        }
        let pos = if l_out == 1 || l_in == 1 {
            0.0
        } else {
            j as f64 * (l_in - 1) as f64 / (l_out - 1) as f64
        };
        let i0 = (pos.floor() as usize).min(l_in - 1);
        let frac = pos - i0 as f64;
        if frac == 0.0 || i0 + 1 >= l_in {
            m[j * l_in + i0] = 1.0;
        } else {
            m[j * l_in + i0] = (1.0 - frac) as f32;
            m[j * l_in + i0 + 1] = frac as f32;
        }
    }
    m
}

/// Resamples each batch row of `x` (`(B, T_in, d)`, valid lengths
/// `lengths`) to `targets[b]` frames, padded to `t_out = max targets`.
pub fn align_batch(x: &Tensor, lengths: &[usize], targets: &[usize]) -> Result<Tensor> {
    let (b, t_in, _) = x.dims3()?;
    if lengths.len() != b || targets.len() != b {
        return Err(Error::ShapeMismatch("alignment lengths do not match the batch".into()));
    }
    if lengths == targets && lengths.iter().all(|&l| l == t_in) {
        return Ok(x.clone());
    }
    let t_out = targets.iter().copied().max().unwrap_or(0);
    let mut w = vec![0f32; b * t_out * t_in];
    for i in 0..b {
        let m = interpolation_matrix(lengths[i], targets[i]);
        for j in 0..targets[i] {
            let dst = i * t_out * t_in + j * t_in;
            w[dst..dst + lengths[i]].copy_from_slice(&m[j * lengths[i]..(j + 1) * lengths[i]]);
        }
    }
    let w = Tensor::from_vec(w, (b, t_out, t_in), x.device())?;
    Ok(w.matmul(&x.contiguous()?)?)
}

/// Interpolates every sequence to the longest length in the list.
pub fn align(features: &[FeatureSequence]) -> Result<Vec<FeatureSequence>> {
    let target = features
        .iter()
        .map(FeatureSequence::l)
        .max()
        .ok_or(Error::EmptyInput("nothing to align"))?;
    features
        .iter()
        .map(|f| {
            if f.l() == target {
                return Ok(f.clone());
            }
            let x = f.frames.unsqueeze(0)?;
            let y = align_batch(&x, &[f.l()], &[target])?.squeeze(0)?;
            let rate = f.frame_rate_hz * target as f64 / f.l() as f64;
            FeatureSequence::from_frames(y, rate)
        })
        .collect()
}

/// Concatenation along the feature axis followed by a linear projection.
pub struct Fusion {
    projection: Linear,
    input_dims: Vec<usize>,
    target_d: usize,
}

impl Fusion {
    pub fn new(store: &mut ParamStore, name: &str, input_dims: &[usize], target_d: usize) -> Result<Self> {
        let total = input_dims.iter().sum();
        Ok(Fusion {
            projection: store.linear(name, total, target_d, true)?,
            input_dims: input_dims.to_vec(),
            target_d,
        })
    }

    /// Fusion with explicit weights `(target_d, sum d_i)` and optional bias.
    pub fn from_weights(weight: Tensor, bias: Option<Tensor>, input_dims: &[usize]) -> Result<Self> {
        let (target_d, total) = weight.dims2()?;
        if total != input_dims.iter().sum::<usize>() {
            return Err(Error::ShapeMismatch(format!(
                "projection takes {total} features, inputs provide {}",
                input_dims.iter().sum::<usize>()
            )));
        }
        Ok(Fusion {
            projection: Linear::new(weight, bias),
            input_dims: input_dims.to_vec(),
            target_d,
        })
    }

    /// Identity projection for a single `d`-wide input.
    pub fn identity(d: usize) -> Result<Self> {
        Self::from_weights(Tensor::eye(d, candle_core::DType::F32, &Device::Cpu)?, None, &[d])
    }

    pub fn target_d(&self) -> usize {
        self.target_d
    }

    /// Fuses aligned `(B, L, d_i)` tensors into `(B, L, target_d)`.
    pub fn forward(&self, aligned: &[Tensor]) -> Result<Tensor> {
        if aligned.len() != self.input_dims.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} inputs for a {}-branch fusion",
                aligned.len(),
                self.input_dims.len()
            )));
        }
        let t = aligned[0].dim(1)?;
        for (a, &d) in aligned.iter().zip(&self.input_dims) {
            if a.dim(1)? != t {
                return Err(Error::LengthMismatch(format!("{} vs {} frames", t, a.dim(1)?)));
            }
            if a.dim(2)? != d {
                return Err(Error::WidthMismatch { expected: d, got: a.dim(2)? });
            }
        }
        let cat = if aligned.len() == 1 {
            aligned[0].clone()
        } else {
            Tensor::cat(aligned, 2)?
        };
        Ok(self.projection.forward(&cat)?)
    }

    pub fn fuse(&self, aligned: &[FeatureSequence]) -> Result<FeatureSequence> {
        let first = aligned.first().ok_or(Error::EmptyInput("nothing to fuse"))?;
        let tensors = aligned
            .iter()
            .map(|f| f.frames.unsqueeze(0))
            .collect::<candle_core::Result<Vec<_>>>()?;
        let y = self.forward(&tensors)?.squeeze(0)?;
        FeatureSequence::from_frames(y, first.frame_rate_hz)
    }
}

/// All branches plus per-branch aggregation weights and the fusion layer.
pub struct FeatureExtractor {
    encoders: Vec<Encoder>,
    layer_weights: Vec<Tensor>,
    fusion: Fusion,
}

/// Everything the extractor needs for one sample, computed once and reused.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedSample {
    pub branches: Vec<BranchInput>,
}

impl FeatureExtractor {
    pub fn new(store: &mut ParamStore, configs: &[EncoderConfig], target_d: usize) -> Result<Self> {
        if configs.is_empty() {
            return Err(Error::Config("at least one encoder is required".into()));
        }
        let mut encoders = Vec::new();
        let mut layer_weights = Vec::new();
        for (i, cfg) in configs.iter().enumerate() {
            encoders.push(Encoder::new(store, &format!("extractor.enc{i}"), cfg)?);
            layer_weights.push(store.constant(&format!("extractor.enc{i}.layer_weights"), &[cfg.num_layers], 0.0)?);
        }
        let dims: Vec<usize> = configs.iter().map(|c| c.d).collect();
        let fusion = Fusion::new(store, "extractor.fusion", &dims, target_d)?;
        Ok(FeatureExtractor {
            encoders,
            layer_weights,
            fusion,
        })
    }

    pub fn encoders(&self) -> &[Encoder] {
        &self.encoders
    }

    pub fn target_d(&self) -> usize {
        self.fusion.target_d()
    }

    /// Reads audio and/or feature files for one sample.
    pub fn prepare(&self, sample_id: &str, audio_path: &Path, manifest_dir: &Path) -> Result<PreparedSample> {
        let mut waveform: Option<Vec<f32>> = None;
        let mut branches = Vec::with_capacity(self.encoders.len());
        for enc in &self.encoders {
            let input = match enc.config.kind {
                EncoderKind::LearnableSpectrogram => {
                    if waveform.is_none() {
                        let (w, sr) = read_wav(audio_path)?;
                        if sr != SAMPLE_RATE {
                            return Err(Error::InvalidRecord {
                                sample: sample_id.to_string(),
                                reason: format!("expected {SAMPLE_RATE} Hz audio, got {sr} Hz"),
                            });
                        }
                        waveform = Some(w);
                    }
                    enc.prepare_waveform(waveform.as_deref().unwrap())?
                }
                EncoderKind::Precomputed => enc.prepare_file(&enc.config.feature_path(sample_id, manifest_dir))?,
            };
            branches.push(input);
        }
        Ok(PreparedSample { branches })
    }

    pub fn prepare_waveform(&self, waveform: &[f32]) -> Result<PreparedSample> {
        let branches = self
            .encoders
            .iter()
            .map(|e| e.prepare_waveform(waveform))
            .collect::<Result<_>>()?;
        Ok(PreparedSample { branches })
    }

    /// Fused `(B, L, target_d)` representation and per-sample valid lengths.
    pub fn forward(&self, batch: &[&PreparedSample]) -> Result<(Tensor, Vec<usize>)> {
        if batch.is_empty() {
            return Err(Error::EmptyInput("empty batch"));
        }
        let mut per_branch = Vec::with_capacity(self.encoders.len());
        for (i, enc) in self.encoders.iter().enumerate() {
            let inputs: Vec<&BranchInput> = batch.iter().map(|s| &s.branches[i]).collect();
            let (layers, lengths) = enc.forward_layers(&inputs)?;
            per_branch.push((aggregate_tensors(&layers, &self.layer_weights[i])?, lengths));
        }
        let targets: Vec<usize> = (0..batch.len())
            .map(|b| per_branch.iter().map(|(_, l)| l[b]).max().unwrap_or(0))
            .collect();
        let aligned = per_branch
            .iter()
            .map(|(x, lengths)| align_batch(x, lengths, &targets))
            .collect::<Result<Vec<_>>>()?;
        let fused = self.fusion.forward(&aligned)?;
        Ok((fused, targets))
    }

    pub fn extract(&self, sample: &PreparedSample) -> Result<FeatureSequence> {
        let (fused, _) = self.forward(&[sample])?;
        let rate = self.encoders.iter().map(|e| e.config.frame_rate_hz()).fold(0.0, f64::max);
        FeatureSequence::from_frames(fused.squeeze(0)?, rate)
    }
}
