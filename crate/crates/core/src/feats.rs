//! Log-mel filter-bank features with a prepended log-energy column.
//!
//! Frames are cut with a Hamming window (no dither, no pre-emphasis), the
//! power spectrum is pooled through triangular HTK-mel filters and the
//! natural log is floored at `ln(1e-10)`.

use std::path::Path;
use std::sync::Arc;

use ndarray::{s, Array2};
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};

/// The only sample rate accepted by the extractor.
pub const SAMPLE_RATE: u32 = 16_000;
/// Power floor applied before every logarithm.
pub const POWER_FLOOR: f64 = 1e-10;

pub fn log_floor() -> f64 {
    POWER_FLOOR.ln()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Self {
        Self { samples, sample_rate }
    }

    /// Reads a 16-bit PCM mono RIFF/WAV file, scaling samples into [-1, 1).
    pub fn read_wav(path: impl AsRef<Path>) -> Result<Self> {
        let mut reader = hound::WavReader::open(path)?;
        let spec = reader.spec();
        if spec.channels != 1 {
            return Err(Error::InvalidConfig(format!(
                "expected mono audio, found {} channels",
                spec.channels
            )));
        }
        if spec.bits_per_sample != 16 || spec.sample_format != hound::SampleFormat::Int {
            return Err(Error::InvalidConfig(format!(
                "expected 16-bit PCM, found {} bits {:?}",
                spec.bits_per_sample, spec.sample_format
            )));
        }
        let samples = reader
            .samples::<i16>()
            .map(|s| s.map(|v| v as f64 / 32768.0))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(Self::new(samples, spec.sample_rate))
    }

    pub fn write_wav(&self, path: impl AsRef<Path>) -> Result<()> {
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: self.sample_rate,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut writer = hound::WavWriter::create(path, spec)?;
        for &s in &self.samples {
            let v = (s * 32768.0).round().clamp(i16::MIN as f64, i16::MAX as f64) as i16;
            writer.write_sample(v)?;
        }
        writer.finalize()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureConfig {
    pub window_ms: f64,
    pub shift_ms: f64,
    pub n_mels: usize,
    pub include_energy: bool,
    pub low_freq: f64,
    pub high_freq: f64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            window_ms: 25.0,
            shift_ms: 10.0,
            n_mels: 80,
            include_energy: true,
            low_freq: 20.0,
            high_freq: 7600.0,
        }
    }
}

impl FeatureConfig {
    /// Output feature dimension: mel bins plus the optional energy column.
    pub fn dim(&self) -> usize {
        self.n_mels + usize::from(self.include_energy)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.shift_ms > 0.0 && self.shift_ms <= self.window_ms) {
            return Err(Error::InvalidConfig(format!(
                "need 0 < shift_ms <= window_ms, got shift {} window {}",
                self.shift_ms, self.window_ms
            )));
        }
        if self.n_mels == 0 {
            return Err(Error::InvalidConfig("n_mels must be at least 1".into()));
        }
        let nyquist = SAMPLE_RATE as f64 / 2.0;
        if !(self.low_freq >= 0.0 && self.low_freq < self.high_freq && self.high_freq <= nyquist) {
            return Err(Error::InvalidConfig(format!(
                "filter range {}..{} Hz outside 0..{} Hz",
                self.low_freq, self.high_freq, nyquist
            )));
        }
        Ok(())
    }

    pub fn window_samples(&self, sample_rate: u32) -> usize {
        (self.window_ms * sample_rate as f64 / 1000.0).round() as usize
    }

    pub fn shift_samples(&self, sample_rate: u32) -> usize {
        (self.shift_ms * sample_rate as f64 / 1000.0).round() as usize
    }
}

/// Number of frames for `n_samples` samples, or `None` if shorter than one window.
pub fn frame_count(n_samples: usize, window: usize, shift: usize) -> Option<usize> {
    if n_samples < window || shift == 0 {
        None
    } else {
        Some((n_samples - window) / shift + 1)
    }
}

/// A `T x dim` matrix of per-frame features.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub frames: Array2<f64>,
    pub cmn_applied: bool,
}

impl FeatureMatrix {
    pub fn new(frames: Array2<f64>) -> Self {
        Self { frames, cmn_applied: false }
    }

    pub fn n_frames(&self) -> usize {
        self.frames.nrows()
    }

    pub fn dim(&self) -> usize {
        self.frames.ncols()
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular mel filters laid out on the FFT bins.
#[derive(Debug, Clone)]
pub struct MelFilterBank {
    /// `n_mels x (n_fft / 2 + 1)` filter weights.
    pub weights: Array2<f64>,
    /// Centre frequency of each filter in Hz.
    pub centers_hz: Vec<f64>,
}

impl MelFilterBank {
    pub fn new(n_mels: usize, n_fft: usize, sample_rate: u32, low_hz: f64, high_hz: f64) -> Self {
        let n_bins = n_fft / 2 + 1;
        let mel_lo = hz_to_mel(low_hz);
        let mel_hi = hz_to_mel(high_hz);
        let step = (mel_hi - mel_lo) / (n_mels + 1) as f64;
        let edges: Vec<f64> = (0..n_mels + 2).map(|i| mel_lo + step * i as f64).collect();
        let bin_hz = sample_rate as f64 / n_fft as f64;

        let mut weights = Array2::zeros((n_mels, n_bins));
        for m in 0..n_mels {
            let (left, center, right) = (edges[m], edges[m + 1], edges[m + 2]);
            for k in 0..n_bins {
                let mel = hz_to_mel(k as f64 * bin_hz);
                let w = if mel > left && mel <= center {
                    (mel - left) / (center - left)
                } else if mel > center && mel < right {
                    (right - mel) / (right - center)
                } else {
                    0.0
                };
                weights[[m, k]] = w;
            }
        }
        let centers_hz = edges[1..=n_mels].iter().map(|&m| mel_to_hz(m)).collect();
        Self { weights, centers_hz }
    }

    /// Index of the filter whose centre lies nearest `hz` (in Hz).
    pub fn nearest_filter(&self, hz: f64) -> usize {
        let mut best = 0;
        for (i, c) in self.centers_hz.iter().enumerate() {
            if (c - hz).abs() < (self.centers_hz[best] - hz).abs() {
                best = i;
            }
        }
        best
    }
}

/// Reusable extractor holding the window, FFT plan and filter bank.
pub struct FbankExtractor {
    cfg: FeatureConfig,
    window: Vec<f64>,
    shift: usize,
    n_fft: usize,
    fft: Arc<dyn Fft<f64>>,
    filters: MelFilterBank,
}

impl FbankExtractor {
    pub fn new(cfg: FeatureConfig) -> Result<Self> {
        cfg.validate()?;
        let win_len = cfg.window_samples(SAMPLE_RATE);
        let shift = cfg.shift_samples(SAMPLE_RATE);
        if win_len == 0 || shift == 0 {
            return Err(Error::InvalidConfig("window or shift rounds to zero samples".into()));
        }
        let n_fft = win_len.next_power_of_two();
        let window = hamming(win_len);
        let fft = FftPlanner::new().plan_fft_forward(n_fft);
        let filters = MelFilterBank::new(cfg.n_mels, n_fft, SAMPLE_RATE, cfg.low_freq, cfg.high_freq);
        Ok(Self { cfg, window, shift, n_fft, fft, filters })
    }

    pub fn config(&self) -> &FeatureConfig {
        &self.cfg
    }

    pub fn filters(&self) -> &MelFilterBank {
        &self.filters
    }

    pub fn n_fft(&self) -> usize {
        self.n_fft
    }

    pub fn extract(&self, wave: &Waveform) -> Result<FeatureMatrix> {
        if wave.sample_rate == 0 {
            return Err(Error::InvalidConfig("sample rate must be positive".into()));
        }
        if wave.sample_rate != SAMPLE_RATE {
            return Err(Error::InvalidConfig(format!(
                "sample rate {} Hz not supported, expected {} Hz",
                wave.sample_rate, SAMPLE_RATE
            )));
        }
        let win_len = self.window.len();
        let n_frames = frame_count(wave.samples.len(), win_len, self.shift).ok_or(
            Error::InputTooShort { needed: win_len, got: wave.samples.len() },
        )?;
        let floor = log_floor();
        let offset = usize::from(self.cfg.include_energy);
        let n_bins = self.n_fft / 2 + 1;

        let mut out = Array2::zeros((n_frames, self.cfg.dim()));
        let mut buf = vec![Complex::new(0.0, 0.0); self.n_fft];
        let mut power = vec![0.0; n_bins];
        for t in 0..n_frames {
            let frame = &wave.samples[t * self.shift..t * self.shift + win_len];
            if self.cfg.include_energy {
                let energy: f64 = frame.iter().map(|x| x * x).sum();
                out[[t, 0]] = energy.max(POWER_FLOOR).ln();
            }
            for (i, c) in buf.iter_mut().enumerate() {
                *c = if i < win_len {
                    Complex::new(frame[i] * self.window[i], 0.0)
                } else {
                    Complex::new(0.0, 0.0)
                };
            }
            self.fft.process(&mut buf);
            for (p, c) in power.iter_mut().zip(&buf[..n_bins]) {
                *p = c.norm_sqr();
            }
            for m in 0..self.cfg.n_mels {
                let e: f64 = self.filters.weights.row(m).iter().zip(&power).map(|(w, p)| w * p).sum();
                out[[t, offset + m]] = if e > POWER_FLOOR { e.ln() } else { floor };
            }
        }
        Ok(FeatureMatrix::new(out))
    }
}

fn hamming(n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![1.0];
    }
    (0..n)
        .map(|i| 0.54 - 0.46 * (2.0 * std::f64::consts::PI * i as f64 / (n - 1) as f64).cos())
        .collect()
}

pub fn extract_fbank(wave: &Waveform, cfg: &FeatureConfig) -> Result<FeatureMatrix> {
    FbankExtractor::new(cfg.clone())?.extract(wave)
}

/// Subtracts the per-column mean over time.
pub fn apply_cmn(f: &FeatureMatrix) -> FeatureMatrix {
    let mut frames = f.frames.clone();
    if frames.nrows() > 0 {
        let mean = frames.mean_axis(ndarray::Axis(0)).expect("nonempty");
        frames -= &mean;
    }
    FeatureMatrix { frames, cmn_applied: true }
}

/// Takes `n` consecutive frames starting at `start`, tiling the matrix when it runs out.
pub fn crop_frames(f: &FeatureMatrix, n: usize, start: usize) -> Result<FeatureMatrix> {
    if n == 0 {
        return Err(Error::InvalidLength("crop length must be at least 1".into()));
    }
    let total = f.n_frames();
    if total == 0 {
        return Err(Error::InvalidLength("cannot crop an empty matrix".into()));
    }
    let frames = if start + n <= total {
        f.frames.slice(s![start..start + n, ..]).to_owned()
    } else {
        let mut out = Array2::zeros((n, f.dim()));
        for (i, mut row) in out.rows_mut().into_iter().enumerate() {
            row.assign(&f.frames.row((start + i) % total));
        }
        out
    };
    Ok(FeatureMatrix { frames, cmn_applied: f.cmn_applied })
}
