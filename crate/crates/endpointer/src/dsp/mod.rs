//! Feature extraction: 40-dim log-mel filterbanks from 16 kHz PCM, plus a
//! frame-level synthesizer used to build training corpora without audio.

pub mod fft;
pub mod wav;

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeds::rng_from;

/// Feature extraction parameters. Defaults give 40 log-mel coefficients from
/// a 25 ms window advancing 10 ms at a time over 16 kHz audio.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DspParams {
    pub sample_rate_hz: u32,
    pub window_ms: u32,
    pub stride_ms: u32,
    pub n_mels: usize,
    pub fft_size: usize,
    pub mel_low_hz: f64,
    pub mel_high_hz: f64,
    pub log_floor: f64,
}

impl Default for DspParams {
    fn default() -> Self {
        DspParams {
            sample_rate_hz: 16_000,
            window_ms: 25,
            stride_ms: 10,
            n_mels: 40,
            fft_size: 512,
            mel_low_hz: 0.0,
            mel_high_hz: 8_000.0,
            log_floor: 1e-10,
        }
    }
}

impl DspParams {
    pub fn window_samples(&self) -> usize {
        (self.sample_rate_hz as usize * self.window_ms as usize) / 1000
    }

    pub fn stride_samples(&self) -> usize {
        (self.sample_rate_hz as usize * self.stride_ms as usize) / 1000
    }

    pub fn validate(&self) -> Result<()> {
        if self.sample_rate_hz == 0 || self.window_ms == 0 || self.stride_ms == 0 {
            return Err(Error::Config(
                "sample rate, window, and stride must be positive".into(),
            ));
        }
        if self.n_mels == 0 {
            return Err(Error::Config("n_mels must be at least 1".into()));
        }
        if !self.fft_size.is_power_of_two() || self.fft_size < self.window_samples() {
            return Err(Error::Config(format!(
                "fft_size {} must be a power of two no smaller than the window ({} samples)",
                self.fft_size,
                self.window_samples()
            )));
        }
        let nyquist = self.sample_rate_hz as f64 / 2.0;
        if !(self.mel_low_hz >= 0.0 && self.mel_low_hz < self.mel_high_hz) {
            return Err(Error::Config(format!(
                "mel band [{}, {}] is not an increasing range",
                self.mel_low_hz, self.mel_high_hz
            )));
        }
        if self.mel_high_hz > nyquist {
            return Err(Error::Config(format!(
                "mel_high_hz {} exceeds the Nyquist frequency {nyquist}",
                self.mel_high_hz
            )));
        }
        if !(self.log_floor > 0.0) {
            return Err(Error::Config("log_floor must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct FeatureSequenceRepr {
    frame_ms: u32,
    window_ms: u32,
    n_dims: usize,
    frames: Vec<Vec<f32>>,
}

/// A [n_frames x n_dims] feature matrix with its framing metadata. Values are
/// stored flat in row-major order; f32 is plenty for features while model
/// arithmetic stays in f64.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "FeatureSequenceRepr", into = "FeatureSequenceRepr")]
pub struct FeatureSequence {
    n_dims: usize,
    frame_ms: u32,
    window_ms: u32,
    data: Vec<f32>,
}

impl FeatureSequence {
    pub fn new(n_dims: usize, frame_ms: u32, window_ms: u32) -> Self {
        FeatureSequence {
            n_dims,
            frame_ms,
            window_ms,
            data: Vec::new(),
        }
    }

    pub fn from_flat(
        data: Vec<f32>,
        n_dims: usize,
        frame_ms: u32,
        window_ms: u32,
    ) -> Result<Self> {
        if n_dims == 0 || data.len() % n_dims != 0 {
            return Err(Error::Shape {
                expected: format!("flat length divisible by n_dims {n_dims}"),
                got: format!("{} values", data.len()),
            });
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("feature value {bad}")));
        }
        Ok(FeatureSequence {
            n_dims,
            frame_ms,
            window_ms,
            data,
        })
    }

    pub fn n_frames(&self) -> usize {
        if self.n_dims == 0 {
            0
        } else {
            self.data.len() / self.n_dims
        }
    }

    pub fn n_dims(&self) -> usize {
        self.n_dims
    }

    pub fn frame_ms(&self) -> u32 {
        self.frame_ms
    }

    pub fn window_ms(&self) -> u32 {
        self.window_ms
    }

    pub fn frame(&self, i: usize) -> &[f32] {
        &self.data[i * self.n_dims..(i + 1) * self.n_dims]
    }

    pub fn frames(&self) -> impl Iterator<Item = &[f32]> {
        self.data.chunks_exact(self.n_dims)
    }

    pub fn push_frame(&mut self, frame: &[f32]) {
        assert_eq!(frame.len(), self.n_dims, "frame width mismatch");
        self.data.extend_from_slice(frame);
    }

    pub fn as_flat(&self) -> &[f32] {
        &self.data
    }
}

impl TryFrom<FeatureSequenceRepr> for FeatureSequence {
    type Error = Error;

    fn try_from(repr: FeatureSequenceRepr) -> Result<Self> {
        let mut data = Vec::with_capacity(repr.frames.len() * repr.n_dims);
        for (i, row) in repr.frames.iter().enumerate() {
            if row.len() != repr.n_dims {
                return Err(Error::Shape {
                    expected: format!("{} values per frame", repr.n_dims),
                    got: format!("{} in frame {i}", row.len()),
                });
            }
            data.extend_from_slice(row);
        }
        FeatureSequence::from_flat(data, repr.n_dims, repr.frame_ms, repr.window_ms)
    }
}

impl From<FeatureSequence> for FeatureSequenceRepr {
    fn from(seq: FeatureSequence) -> Self {
        let frames = seq.frames().map(|f| f.to_vec()).collect();
        FeatureSequenceRepr {
            frame_ms: seq.frame_ms,
            window_ms: seq.window_ms,
            n_dims: seq.n_dims,
            frames,
        }
    }
}

fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular filterbank as per-filter sparse (bin, weight) lists over the
/// one-sided spectrum.
fn mel_filterbank(params: &DspParams) -> Vec<Vec<(usize, f64)>> {
    let n_bins = params.fft_size / 2 + 1;
    let bin_hz = params.sample_rate_hz as f64 / params.fft_size as f64;
    let mel_low = hz_to_mel(params.mel_low_hz);
    let mel_high = hz_to_mel(params.mel_high_hz);
    let n_points = params.n_mels + 2;
    let edges_hz: Vec<f64> = (0..n_points)
        .map(|i| {
            mel_to_hz(mel_low + (mel_high - mel_low) * i as f64 / (n_points - 1) as f64)
        })
        .collect();

    (0..params.n_mels)
        .map(|m| {
            let (low, center, high) = (edges_hz[m], edges_hz[m + 1], edges_hz[m + 2]);
            let mut taps = Vec::new();
            for bin in 0..n_bins {
                let f = bin as f64 * bin_hz;
                let w = if f <= low || f >= high {
                    0.0
                } else if f <= center {
                    (f - low) / (center - low)
                } else {
                    (high - f) / (high - center)
                };
                if w > 0.0 {
                    taps.push((bin, w));
                }
            }
            taps
        })
        .collect()
}

/// Computes log-mel filterbank features from mono samples normalized to
/// [-1, 1) (as produced by [`wav::read_wav`]).
///
/// Each 25 ms window is Hann-weighted, transformed, reduced to mel-band
/// energies, and logged with a floor clamp so silence stays finite.
pub fn log_mel(samples: &[f64], params: &DspParams) -> Result<FeatureSequence> {
    params.validate()?;
    let window = params.window_samples();
    let stride = params.stride_samples();
    let n_frames = if samples.len() >= window {
        (samples.len() - window) / stride + 1
    } else {
        0
    };

    // Periodic Hann, the common choice for spectral analysis frames.
    let hann: Vec<f64> = (0..window)
        .map(|n| 0.5 * (1.0 - (2.0 * PI * n as f64 / window as f64).cos()))
        .collect();
    let bank = mel_filterbank(params);

    let mut out = FeatureSequence::new(params.n_mels, params.stride_ms, params.window_ms);
    let mut windowed = vec![0.0; window];
    let mut frame = vec![0.0f32; params.n_mels];
    for i in 0..n_frames {
        let start = i * stride;
        for (j, w) in hann.iter().enumerate() {
            windowed[j] = samples[start + j] * w;
        }
        let power = fft::power_spectrum(&windowed, params.fft_size);
        for (coef, taps) in frame.iter_mut().zip(&bank) {
            let energy: f64 = taps.iter().map(|&(bin, w)| w * power[bin]).sum();
            *coef = energy.max(params.log_floor).ln() as f32;
        }
        out.push_frame(&frame);
    }
    Ok(out)
}

/// Per-dimension mean of synthetic speech frames.
pub fn synth_speech_mean(dim: usize) -> f64 {
    1.0 + 0.01 * dim as f64
}

/// Per-dimension mean of synthetic silence frames.
pub fn synth_silence_mean(dim: usize) -> f64 {
    -1.0 - 0.01 * dim as f64
}

/// Synthesizes a feature sequence directly at the frame level from a token
/// timeline, skipping audio entirely.
///
/// Frame i is centered at `i * stride_ms`; it counts as speech when that
/// center falls inside any `[start_ms, end_ms)` token span. Speech and
/// silence frames are drawn from Gaussians with fixed distinct means and
/// isotropic sigma = `noise_level`. The frame count is
/// `total_ms / stride_ms` rounded down, matching the corpus duration rule.
pub fn synth_features(
    token_spans_ms: &[(u32, u32)],
    total_ms: u32,
    params: &DspParams,
    noise_level: f64,
    seed: u64,
) -> Result<FeatureSequence> {
    if !(noise_level >= 0.0) {
        return Err(Error::Invalid(format!(
            "noise_level must be non-negative, got {noise_level}"
        )));
    }
    if params.stride_ms == 0 {
        return Err(Error::Config("stride_ms must be positive".into()));
    }
    use rand_distr::{Distribution, StandardNormal};
    let mut rng = rng_from(seed);
    let n_frames = (total_ms / params.stride_ms) as usize;
    let n_dims = params.n_mels;

    let mut out = FeatureSequence::new(n_dims, params.stride_ms, params.window_ms);
    let mut frame = vec![0.0f32; n_dims];
    for i in 0..n_frames {
        let center = (i as u32 * params.stride_ms) as f64;
        let speech = token_spans_ms
            .iter()
            .any(|&(s, e)| (s as f64) <= center && center < e as f64);
        for (d, v) in frame.iter_mut().enumerate() {
            let mean = if speech {
                synth_speech_mean(d)
            } else {
                synth_silence_mean(d)
            };
            let z: f64 = StandardNormal.sample(&mut rng);
            *v = (mean + noise_level * z) as f32;
        }
        out.push_frame(&frame);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sine(freq_hz: f64, amplitude: f64, seconds: f64, rate: u32) -> Vec<f64> {
        let n = (seconds * rate as f64) as usize;
        (0..n)
            .map(|i| amplitude * (2.0 * PI * freq_hz * i as f64 / rate as f64).sin())
            .collect()
    }

    #[test]
    fn zero_signal_hits_log_floor_everywhere() {
        let params = DspParams::default();
        let features = log_mel(&vec![0.0; 16_000], &params).unwrap();
        let expected = params.log_floor.ln() as f32;
        assert!(features.n_frames() > 0);
        for frame in features.frames() {
            for &v in frame {
                assert_eq!(v, expected);
            }
        }
    }

    #[test]
    fn one_second_yields_98_frames() {
        let features = log_mel(&vec![0.0; 16_000], &DspParams::default()).unwrap();
        assert_eq!(features.n_frames(), 98);
    }

    #[test]
    fn frame_count_follows_formula_for_random_lengths() {
        use rand::Rng;
        let params = DspParams::default();
        let (window, stride) = (params.window_samples(), params.stride_samples());
        let mut rng = crate::seeds::rng_from(5);
        for _ in 0..10 {
            let len = rng.random_range(window..4 * 16_000);
            let features = log_mel(&vec![0.0; len], &params).unwrap();
            assert_eq!(features.n_frames(), (len - window) / stride + 1, "len={len}");
        }
    }

    #[test]
    fn short_signal_yields_zero_frames() {
        let params = DspParams::default();
        let features = log_mel(&vec![0.0; params.window_samples() - 1], &params).unwrap();
        assert_eq!(features.n_frames(), 0);
    }

    #[test]
    fn tone_argmax_matches_independent_mel_oracle() {
        let params = DspParams::default();
        let tone_hz = 1000.0;

        // Oracle: rebuild the filter edges straight from the mel-scale
        // formula and find which triangle responds most at the tone
        // frequency. No shared code with the extractor's filterbank.
        let mel = |hz: f64| 2595.0 * (1.0 + hz / 700.0).log10();
        let inv = |m: f64| 700.0 * (10f64.powf(m / 2595.0) - 1.0);
        let (lo, hi) = (mel(params.mel_low_hz), mel(params.mel_high_hz));
        let point =
            |i: usize| inv(lo + (hi - lo) * i as f64 / (params.n_mels + 1) as f64);
        let mut oracle_bin = 0;
        let mut best = f64::NEG_INFINITY;
        for m in 0..params.n_mels {
            let (low, center, high) = (point(m), point(m + 1), point(m + 2));
            let w = if tone_hz <= center {
                (tone_hz - low) / (center - low)
            } else {
                (high - tone_hz) / (high - center)
            };
            if w > best {
                best = w;
                oracle_bin = m;
            }
        }
        // Sanity: the winning triangle really brackets the tone.
        assert!(point(oracle_bin) < tone_hz && tone_hz < point(oracle_bin + 2));

        let features = log_mel(&sine(tone_hz, 0.5, 1.0, 16_000), &params).unwrap();
        for (i, frame) in features.frames().enumerate() {
            let argmax = frame
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .map(|(d, _)| d)
                .unwrap();
            assert_eq!(argmax, oracle_bin, "frame {i}");
        }
    }

    #[test]
    fn shifting_by_one_stride_shifts_frames_by_one() {
        use rand::Rng;
        let params = DspParams::default();
        let mut rng = crate::seeds::rng_from(17);
        let signal: Vec<f64> = (0..8000).map(|_| rng.random_range(-0.9..0.9)).collect();
        let mut shifted = vec![0.0; params.stride_samples()];
        shifted.extend_from_slice(&signal);

        let base = log_mel(&signal, &params).unwrap();
        let moved = log_mel(&shifted, &params).unwrap();
        assert_eq!(moved.n_frames(), base.n_frames() + 1);
        for i in 0..base.n_frames() {
            for (a, b) in base.frame(i).iter().zip(moved.frame(i + 1)) {
                let rel = (a - b).abs() / a.abs().max(1e-6);
                assert!(rel < 1e-6, "frame {i}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn scaling_up_never_decreases_coefficients() {
        use rand::Rng;
        let params = DspParams::default();
        let mut rng = crate::seeds::rng_from(23);
        let signal: Vec<f64> = (0..8000).map(|_| rng.random_range(-0.2..0.2)).collect();
        let louder: Vec<f64> = signal.iter().map(|x| 3.0 * x).collect();

        let base = log_mel(&signal, &params).unwrap();
        let scaled = log_mel(&louder, &params).unwrap();
        for (f_base, f_scaled) in base.frames().zip(scaled.frames()) {
            for (a, b) in f_base.iter().zip(f_scaled) {
                assert!(b + 1e-6 >= *a, "scaled {b} < base {a}");
            }
        }
    }

    #[test]
    fn synth_zero_noise_produces_exact_means() {
        let params = DspParams::default();
        // One token covering frame centers 0..=90 ms, 150 ms total.
        let features = synth_features(&[(0, 100)], 150, &params, 0.0, 42).unwrap();
        assert_eq!(features.n_frames(), 15);
        for (i, frame) in features.frames().enumerate() {
            for (d, &v) in frame.iter().enumerate() {
                let expected = if i < 10 {
                    synth_speech_mean(d)
                } else {
                    synth_silence_mean(d)
                } as f32;
                assert_eq!(v, expected, "frame {i} dim {d}");
            }
        }
    }

    #[test]
    fn synth_is_deterministic_for_a_seed() {
        let params = DspParams::default();
        let a = synth_features(&[(50, 400)], 900, &params, 0.3, 7).unwrap();
        let b = synth_features(&[(50, 400)], 900, &params, 0.3, 7).unwrap();
        assert_eq!(a, b);
        let c = synth_features(&[(50, 400)], 900, &params, 0.3, 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn synth_silence_sample_mean_obeys_law_of_large_numbers() {
        let params = DspParams::default();
        let noise = 0.1;
        let n_frames = 10_000u32;
        let features =
            synth_features(&[], n_frames * params.stride_ms, &params, noise, 99).unwrap();
        assert_eq!(features.n_frames(), n_frames as usize);
        let tolerance = 3.0 * noise / (n_frames as f64).sqrt();
        for d in 0..features.n_dims() {
            let mean: f64 = features.frames().map(|f| f[d] as f64).sum::<f64>()
                / n_frames as f64;
            let err = (mean - synth_silence_mean(d)).abs();
            assert!(err < tolerance, "dim {d}: err {err} vs {tolerance}");
        }
    }

    #[test]
    fn synth_rejects_negative_noise() {
        let params = DspParams::default();
        assert!(synth_features(&[], 100, &params, -0.1, 0).is_err());
    }

    #[test]
    fn params_validation_catches_bad_ranges() {
        let mut p = DspParams {
            mel_high_hz: 9000.0,
            ..DspParams::default()
        };
        assert!(p.validate().is_err());
        p.mel_high_hz = 8000.0;
        p.fft_size = 300;
        assert!(p.validate().is_err());
    }

    #[test]
    fn feature_sequence_json_round_trip_rejects_ragged_rows() {
        let seq = FeatureSequence::from_flat(vec![1.0, 2.0, 3.0, 4.0], 2, 10, 25).unwrap();
        let json = serde_json::to_string(&seq).unwrap();
        let back: FeatureSequence = serde_json::from_str(&json).unwrap();
        assert_eq!(seq, back);

        let ragged = r#"{"frame_ms":10,"window_ms":25,"n_dims":2,"frames":[[1.0,2.0],[3.0]]}"#;
        assert!(serde_json::from_str::<FeatureSequence>(ragged).is_err());
    }
}
