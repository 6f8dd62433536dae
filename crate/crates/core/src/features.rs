//! PCM audio to 80-dimensional log-mel spectrogram features.
//!
//! Pipeline, pinned for bit-exact reproducibility: 16 kHz mono input,
//! 512-sample (32 ms) frames with a 256-sample hop (50% overlap), periodic
//! Hann window, 512-point magnitude spectrum, 80 triangular mel filters
//! spanning 0–8000 Hz on the HTK mel scale, natural log of (filter energy +
//! 1e-10). No padding: a trailing partial frame is dropped.

use std::f64::consts::PI;
use std::path::Path;

use thiserror::Error;

/// Fixed input sample rate.
pub const SAMPLE_RATE_HZ: u32 = 16_000;
/// Analysis window length in samples (32 ms at 16 kHz).
pub const WINDOW_SAMPLES: usize = 512;
/// Hop length in samples (50% overlap).
pub const HOP_SAMPLES: usize = 256;
/// Number of mel filters.
pub const N_MELS: usize = 80;
/// Additive floor inside the log.
pub const LOG_FLOOR: f64 = 1e-10;
/// Upper edge of the mel filterbank in Hz (Nyquist).
pub const FMAX_HZ: f64 = 8000.0;

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("clip is empty")]
    EmptyClip,
    #[error("clip has {samples} samples, shorter than one {window}-sample window")]
    ClipTooShort { samples: usize, window: usize },
    #[error("sample {index} is {value}, outside [-1, 1] or not finite")]
    SampleOutOfRange { index: usize, value: f64 },
    #[error("expected {expected} Hz sample rate, got {found}")]
    WrongSampleRate { expected: u32, found: u32 },
    #[error("unsupported WAV encoding: {0} (need mono 16-bit PCM at 16 kHz)")]
    UnsupportedWav(String),
    #[error("feature rows have inconsistent widths")]
    RaggedFrames,
    #[error(transparent)]
    Wav(#[from] hound::Error),
}

/// Mono PCM audio with samples in [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    samples: Vec<f64>,
    sample_rate_hz: u32,
}

impl AudioClip {
    pub fn new(samples: Vec<f64>, sample_rate_hz: u32) -> Result<Self, FeatureError> {
        if samples.is_empty() {
            return Err(FeatureError::EmptyClip);
        }
        for (index, &value) in samples.iter().enumerate() {
            if !value.is_finite() || value.abs() > 1.0 {
                return Err(FeatureError::SampleOutOfRange { index, value });
            }
        }
        Ok(AudioClip {
            samples,
            sample_rate_hz,
        })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sample_rate_hz(&self) -> u32 {
        self.sample_rate_hz
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate_hz as f64
    }

    /// Reads a mono 16-bit PCM WAV at 16 kHz; anything else is rejected.
    pub fn from_wav(path: &Path) -> Result<Self, FeatureError> {
        let mut reader = hound::WavReader::open(path)?;
        let spec = reader.spec();
        if spec.channels != 1
            || spec.bits_per_sample != 16
            || spec.sample_format != hound::SampleFormat::Int
        {
            return Err(FeatureError::UnsupportedWav(format!(
                "{} ch, {} bit, {:?}",
                spec.channels, spec.bits_per_sample, spec.sample_format
            )));
        }
        if spec.sample_rate != SAMPLE_RATE_HZ {
            return Err(FeatureError::WrongSampleRate {
                expected: SAMPLE_RATE_HZ,
                found: spec.sample_rate,
            });
        }
        let samples: Vec<f64> = reader
            .samples::<i16>()
            .map(|s| s.map(|v| (f64::from(v) / 32767.0).max(-1.0)))
            .collect::<Result<_, _>>()?;
        AudioClip::new(samples, SAMPLE_RATE_HZ)
    }

    /// Writes the clip as mono 16-bit PCM WAV.
    pub fn to_wav(&self, path: &Path) -> Result<(), FeatureError> {
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: self.sample_rate_hz,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut writer = hound::WavWriter::create(path, spec)?;
        for &s in &self.samples {
            let q = (s * 32767.0).round().clamp(-32768.0, 32767.0) as i16;
            writer.write_sample(q)?;
        }
        writer.finalize()?;
        Ok(())
    }
}

/// Log-mel features for one utterance: `n_frames` rows of `N_MELS` values.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    frames: Vec<Vec<f64>>,
    pub frame_len_s: f64,
    pub frame_hop_s: f64,
}

impl FeatureMatrix {
    /// Wraps pre-computed frames; every row must have the same width.
    pub fn from_frames(frames: Vec<Vec<f64>>) -> Result<Self, FeatureError> {
        if frames.is_empty() {
            return Err(FeatureError::EmptyClip);
        }
        let width = frames[0].len();
        if width == 0 || frames.iter().any(|f| f.len() != width) {
            return Err(FeatureError::RaggedFrames);
        }
        Ok(FeatureMatrix {
            frames,
            frame_len_s: WINDOW_SAMPLES as f64 / SAMPLE_RATE_HZ as f64,
            frame_hop_s: HOP_SAMPLES as f64 / SAMPLE_RATE_HZ as f64,
        })
    }

    pub fn n_frames(&self) -> usize {
        self.frames.len()
    }

    pub fn n_mels(&self) -> usize {
        self.frames[0].len()
    }

    pub fn frames(&self) -> &[Vec<f64>] {
        &self.frames
    }

    /// Standardises each mel bin in place: (x - mean) / std per bin.
    pub fn apply_normalisation(&mut self, mean: &[f64], std: &[f64]) {
        for frame in &mut self.frames {
            for (i, v) in frame.iter_mut().enumerate() {
                *v = (*v - mean[i]) / std[i];
            }
        }
    }
}

/// Number of full analysis windows in a clip; 0 if shorter than one window.
pub fn frame_count(num_samples: usize, window_samples: usize, hop_samples: usize) -> usize {
    if num_samples < window_samples {
        0
    } else {
        (num_samples - window_samples) / hop_samples + 1
    }
}

/// HTK mel scale.
pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// In-place iterative radix-2 FFT (decimation in time). Length must be a
/// power of two. Twiddle factors are computed per butterfly from sin/cos so
/// results do not depend on accumulated rotations.
fn fft_in_place(re: &mut [f64], im: &mut [f64]) {
    let n = re.len();
    debug_assert!(n.is_power_of_two() && im.len() == n);
    // Bit-reversal permutation.
    let mut j = 0usize;
    for i in 1..n {
        let mut bit = n >> 1;
        while j & bit != 0 {
            j ^= bit;
            bit >>= 1;
        }
        j |= bit;
        if i < j {
            re.swap(i, j);
            im.swap(i, j);
        }
    }
    let mut len = 2;
    while len <= n {
        let half = len / 2;
        for start in (0..n).step_by(len) {
            for k in 0..half {
                let ang = -2.0 * PI * k as f64 / len as f64;
                let (wi, wr) = ang.sin_cos();
                let (er, ei) = (re[start + k], im[start + k]);
                let (xr, xi) = (re[start + k + half], im[start + k + half]);
                let or = xr * wr - xi * wi;
                let oi = xr * wi + xi * wr;
                re[start + k] = er + or;
                im[start + k] = ei + oi;
                re[start + k + half] = er - or;
                im[start + k + half] = ei - oi;
            }
        }
        len <<= 1;
    }
}

/// Periodic Hann window of length `WINDOW_SAMPLES`.
fn hann_window() -> Vec<f64> {
    (0..WINDOW_SAMPLES)
        .map(|n| 0.5 * (1.0 - (2.0 * PI * n as f64 / WINDOW_SAMPLES as f64).cos()))
        .collect()
}

/// 80 triangular filters over the one-sided spectrum (257 bins). Edges are
/// 82 points equally spaced on the mel scale between 0 and mel(8000),
/// converted to Hz; triangles are linear in Hz.
fn mel_filterbank() -> Vec<Vec<f64>> {
    let n_bins = WINDOW_SAMPLES / 2 + 1;
    let mel_max = hz_to_mel(FMAX_HZ);
    let edges_hz: Vec<f64> = (0..N_MELS + 2)
        .map(|i| mel_to_hz(i as f64 * mel_max / (N_MELS + 1) as f64))
        .collect();
    let bin_hz = f64::from(SAMPLE_RATE_HZ) / WINDOW_SAMPLES as f64;
    (0..N_MELS)
        .map(|m| {
            let (left, center, right) = (edges_hz[m], edges_hz[m + 1], edges_hz[m + 2]);
            (0..n_bins)
                .map(|k| {
                    let f = k as f64 * bin_hz;
                    let rising = (f - left) / (center - left);
                    let falling = (right - f) / (right - center);
                    rising.min(falling).max(0.0)
                })
                .collect()
        })
        .collect()
}

/// Converts a clip into log-mel features.
pub fn log_mel(clip: &AudioClip) -> Result<FeatureMatrix, FeatureError> {
    if clip.sample_rate_hz() != SAMPLE_RATE_HZ {
        return Err(FeatureError::WrongSampleRate {
            expected: SAMPLE_RATE_HZ,
            found: clip.sample_rate_hz(),
        });
    }
    let samples = clip.samples();
    let n_frames = frame_count(samples.len(), WINDOW_SAMPLES, HOP_SAMPLES);
    if n_frames == 0 {
        return Err(FeatureError::ClipTooShort {
            samples: samples.len(),
            window: WINDOW_SAMPLES,
        });
    }
    let window = hann_window();
    let bank = mel_filterbank();
    let n_bins = WINDOW_SAMPLES / 2 + 1;

    let mut frames = Vec::with_capacity(n_frames);
    let mut re = vec![0.0; WINDOW_SAMPLES];
    let mut im = vec![0.0; WINDOW_SAMPLES];
    let mut mags = vec![0.0; n_bins];
    for f in 0..n_frames {
        let start = f * HOP_SAMPLES;
        for n in 0..WINDOW_SAMPLES {
            re[n] = samples[start + n] * window[n];
            im[n] = 0.0;
        }
        fft_in_place(&mut re, &mut im);
        for (k, mag) in mags.iter_mut().enumerate() {
            *mag = (re[k] * re[k] + im[k] * im[k]).sqrt();
        }
        let row: Vec<f64> = bank
            .iter()
            .map(|filter| {
                let energy: f64 = filter.iter().zip(&mags).map(|(w, m)| w * m).sum();
                (energy + LOG_FLOOR).ln()
            })
            .collect();
        frames.push(row);
    }
    FeatureMatrix::from_frames(frames)
}
