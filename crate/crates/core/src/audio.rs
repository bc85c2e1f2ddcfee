//! WAV I/O and the fixed log-mel front end used by the learnable encoder.

use std::path::Path;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};

pub const SAMPLE_RATE: u32 = 16_000;

/// Writes 16-bit mono PCM. Samples are clipped to [-1, 1].
pub fn write_wav(path: &Path, samples: &[f32], sample_rate: u32) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(path, spec)?;
    for &s in samples {
        w.write_sample((s.clamp(-1.0, 1.0) * i16::MAX as f32).round() as i16)?;
    }
    w.finalize()?;
    Ok(())
}

/// Reads a mono WAV file into `[-1, 1]` floats, returning the sample rate.
/// Multi-channel input is averaged down to mono.
pub fn read_wav(path: &Path) -> Result<(Vec<f32>, u32)> {
    let mut r = hound::WavReader::new(std::io::BufReader::new(crate::error::open(path)?))?;
    let spec = r.spec();
    let interleaved: Vec<f32> = match spec.sample_format {
        hound::SampleFormat::Int => {
            let scale = (1i64 << (spec.bits_per_sample - 1)) as f32;
            r.samples::<i32>()
                .map(|s| s.map(|v| v as f32 / scale))
                .collect::<std::result::Result<_, _>>()?
        }
        hound::SampleFormat::Float => r.samples::<f32>().collect::<std::result::Result<_, _>>()?,
    };
    let ch = spec.channels as usize;
    let mono = if ch == 1 {
        interleaved
    } else {
        interleaved
            .chunks(ch)
            .map(|c| c.iter().sum::<f32>() / ch as f32)
            .collect()
    };
    Ok((mono, spec.sample_rate))
}

/// Short-time log-mel analysis with a frame hop fixed by the encoder stride.
///
/// Frame `t` is centered on sample `t * hop + hop / 2` and uses a Hann window
/// of `2 * hop` samples, zero-padded at the signal edges, so a signal of `n`
/// samples yields `n / hop` frames.
pub struct LogMel {
    hop: usize,
    window: Vec<f32>,
    n_fft: usize,
    filters: Vec<Vec<(usize, f32)>>,
    fft: Arc<dyn Fft<f32>>,
}

fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

impl LogMel {
    pub fn new(sample_rate: u32, stride_s: f64, n_mels: usize) -> Result<Self> {
        let hop = (stride_s * sample_rate as f64).round() as usize;
        if hop == 0 || n_mels == 0 {
            return Err(Error::Config(format!(
                "stride {stride_s} s / {n_mels} mel bands give an empty analysis"
            )));
        }
        let win = 2 * hop;
        let n_fft = win.next_power_of_two();
        let window = (0..win)
            .map(|i| (0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / win as f64).cos()) as f32)
            .collect();

        let n_bins = n_fft / 2 + 1;
        let mel_max = hz_to_mel(sample_rate as f64 / 2.0);
        let edges: Vec<f64> = (0..n_mels + 2)
            .map(|i| mel_to_hz(mel_max * i as f64 / (n_mels + 1) as f64))
            .collect();
        let bin_hz = sample_rate as f64 / n_fft as f64;
        let filters = (0..n_mels)
            .map(|m| {
                let (lo, center, hi) = (edges[m], edges[m + 1], edges[m + 2]);
                (0..n_bins)
                    .filter_map(|k| {
                        let f = k as f64 * bin_hz;
                        let w = if f > lo && f <= center {
                            (f - lo) / (center - lo)
                        } else if f > center && f < hi {
                            (hi - f) / (hi - center)
                        } else {
                            0.0
                        };
                        (w > 0.0).then_some((k, w as f32))
                    })
                    .collect()
            })
            .collect();
        let fft = FftPlanner::new().plan_fft_forward(n_fft);
        Ok(LogMel {
            hop,
            window,
            n_fft,
            filters,
            fft,
        })
    }

    pub fn hop(&self) -> usize {
        self.hop
    }

    pub fn n_mels(&self) -> usize {
        self.filters.len()
    }

    pub fn frame_count(&self, n_samples: usize) -> usize {
        n_samples / self.hop
    }

    /// Time-major log-mel matrix: `frames * n_mels` values.
    pub fn compute(&self, signal: &[f32]) -> Result<Vec<f32>> {
        let frames = self.frame_count(signal.len());
        if frames == 0 {
            return Err(Error::EmptyInput("waveform shorter than one frame"));
        }
        let win = self.window.len();
        let n_mels = self.n_mels();
        let mut out = Vec::with_capacity(frames * n_mels);
        let mut buf = vec![Complex::new(0f32, 0f32); self.n_fft];
        for t in 0..frames {
            let center = (t * self.hop + self.hop / 2) as isize;
            let start = center - (win / 2) as isize;
            for (i, slot) in buf.iter_mut().enumerate() {
                let idx = start + i as isize;
                let v = if i < win && idx >= 0 && (idx as usize) < signal.len() {
                    signal[idx as usize] * self.window[i]
                } else {
                    0.0
                };
                *slot = Complex::new(v, 0.0);
            }
            self.fft.process(&mut buf);
            for filter in &self.filters {
                let energy: f32 = filter.iter().map(|&(k, w)| w * buf[k].norm_sqr()).sum();
                out.push((energy + 1e-8).ln() / 10.0);
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frame_count_follows_stride() {
        let mel = LogMel::new(SAMPLE_RATE, 0.02, 16).unwrap();
        let signal: Vec<f32> = (0..32_000).map(|i| (i as f32 * 0.05).sin()).collect();
        let m = mel.compute(&signal).unwrap();
        assert_eq!(m.len(), 100 * 16);
        assert!(m.iter().all(|v| v.is_finite()));
        assert!(mel.compute(&[0.0; 10]).is_err());
    }

    #[test]
    fn tone_lands_in_the_right_band() {
        let mel = LogMel::new(SAMPLE_RATE, 0.02, 24).unwrap();
        let low: Vec<f32> = (0..8000).map(|i| (2.0 * std::f32::consts::PI * 200.0 * i as f32 / 16000.0).sin()).collect();
        let high: Vec<f32> = (0..8000).map(|i| (2.0 * std::f32::consts::PI * 5000.0 * i as f32 / 16000.0).sin()).collect();
        let argmax = |m: &[f32]| {
            let frame = &m[10 * 24..11 * 24];
            frame.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0
        };
        assert!(argmax(&mel.compute(&low).unwrap()) < argmax(&mel.compute(&high).unwrap()));
    }

    #[test]
    fn wav_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.wav");
        let samples: Vec<f32> = (0..1600).map(|i| 0.5 * (i as f32 * 0.01).sin()).collect();
        write_wav(&path, &samples, SAMPLE_RATE).unwrap();
        let (back, sr) = read_wav(&path).unwrap();
        assert_eq!(sr, SAMPLE_RATE);
        assert_eq!(back.len(), samples.len());
        for (a, b) in back.iter().zip(&samples) {
            assert!((a - b).abs() < 1e-4);
        }
    }
}
