use std::sync::{Arc, OnceLock};

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use super::{
    mel_filterbank, AudioClip, FFT_SIZE, HOP_SAMPLES, LOG_FLOOR, NUM_CHANNELS, SAMPLE_RATE,
    WINDOW_SAMPLES,
};
use crate::tensor::Tensor;
use crate::{Error, Result};

/// `T × 64` log filterbank energies at a 10 ms frame shift.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSeq {
    frames: Tensor,
}

impl FeatureSeq {
    pub fn new(frames: Tensor) -> Result<Self> {
        let (t, c) = frames.dims2();
        if frames.rank() != 2 || c != NUM_CHANNELS || t == 0 {
            return Err(Error::invalid(format!(
                "feature sequence must be T x {NUM_CHANNELS} with T >= 1, got {:?}",
                frames.shape()
            )));
        }
        if !frames.is_finite() {
            return Err(Error::NonFinite("feature sequence".into()));
        }
        Ok(Self { frames })
    }

    pub fn frames(&self) -> &Tensor {
        &self.frames
    }

    pub fn num_frames(&self) -> usize {
        self.frames.dims2().0
    }

    pub fn frame_shift_ms(&self) -> f64 {
        1000.0 * HOP_SAMPLES as f64 / SAMPLE_RATE as f64
    }

    pub fn frame_length_ms(&self) -> f64 {
        1000.0 * WINDOW_SAMPLES as f64 / SAMPLE_RATE as f64
    }
}

/// Number of full 25 ms windows at a 10 ms shift.
pub fn frame_count(num_samples: usize) -> usize {
    if num_samples < WINDOW_SAMPLES {
        0
    } else {
        1 + (num_samples - WINDOW_SAMPLES) / HOP_SAMPLES
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LfbeConfig {
    pub fmin: f64,
    pub fmax: f64,
}

impl Default for LfbeConfig {
    fn default() -> Self {
        Self {
            fmin: 20.0,
            fmax: 8000.0,
        }
    }
}

/// Precomputed window, FFT plan and sparse filterbank.
pub struct LfbeExtractor {
    window: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
    /// `(first bin, weights)` per filter.
    filters: Vec<(usize, Vec<f64>)>,
}

impl LfbeExtractor {
    pub fn new(config: LfbeConfig) -> Result<Self> {
        let fb = mel_filterbank(NUM_CHANNELS, FFT_SIZE, SAMPLE_RATE, config.fmin, config.fmax)?;
        let filters = (0..NUM_CHANNELS)
            .map(|f| {
                let row = fb.row_slice(f);
                let first = row.iter().position(|&w| w > 0.0).expect("non-degenerate");
                let last = row.iter().rposition(|&w| w > 0.0).expect("non-degenerate");
                (first, row[first..=last].to_vec())
            })
            .collect();
        // periodic Hann
        let window = (0..WINDOW_SAMPLES)
            .map(|n| {
                0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / WINDOW_SAMPLES as f64).cos()
            })
            .collect();
        let fft = FftPlanner::new().plan_fft_forward(FFT_SIZE);
        Ok(Self {
            window,
            fft,
            filters,
        })
    }

    pub fn extract(&self, clip: &AudioClip) -> Result<FeatureSeq> {
        let x = clip.samples();
        let t = frame_count(x.len());
        if t == 0 {
            return Err(Error::invalid(format!(
                "clip has {} samples, need at least {WINDOW_SAMPLES}",
                x.len()
            )));
        }
        let mut frames = Tensor::zeros(&[t, NUM_CHANNELS]);
        let mut buf = vec![Complex::new(0.0, 0.0); FFT_SIZE];
        let mut scratch = vec![Complex::new(0.0, 0.0); self.fft.get_inplace_scratch_len()];
        let mut power = vec![0.0; FFT_SIZE / 2 + 1];
        for f in 0..t {
            let start = f * HOP_SAMPLES;
            for (k, b) in buf.iter_mut().enumerate() {
                *b = if k < WINDOW_SAMPLES {
                    Complex::new(x[start + k] * self.window[k], 0.0)
                } else {
                    Complex::new(0.0, 0.0)
                };
            }
            self.fft.process_with_scratch(&mut buf, &mut scratch);
            for (p, b) in power.iter_mut().zip(&buf) {
                *p = b.norm_sqr();
            }
            let row = &mut frames.data_mut()[f * NUM_CHANNELS..(f + 1) * NUM_CHANNELS];
            for (out, (first, w)) in row.iter_mut().zip(&self.filters) {
                let e: f64 = w.iter().zip(&power[*first..]).map(|(a, b)| a * b).sum();
                *out = e.max(LOG_FLOOR).ln();
            }
        }
        FeatureSeq::new(frames)
    }
}

fn default_extractor() -> &'static LfbeExtractor {
    static EXTRACTOR: OnceLock<LfbeExtractor> = OnceLock::new();
    EXTRACTOR.get_or_init(|| LfbeExtractor::new(LfbeConfig::default()).expect("default config"))
}

/// LFBE features with the default 20–8000 Hz band.
pub fn lfbe_extract(clip: &AudioClip) -> Result<FeatureSeq> {
    default_extractor().extract(clip)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::mel_centers_hz;

    fn tone(freq: f64, amp: f64, n: usize) -> AudioClip {
        AudioClip::new(
            (0..n)
                .map(|i| amp * (2.0 * std::f64::consts::PI * freq * i as f64 / 16_000.0).sin())
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn frame_count_formula() {
        assert_eq!(frame_count(25_600), 158);
        assert_eq!(frame_count(400), 1);
        assert_eq!(frame_count(559), 1);
        assert_eq!(frame_count(560), 2);
        let f = lfbe_extract(&tone(440.0, 0.3, 25_600)).unwrap();
        assert_eq!(f.num_frames(), 158);
        assert_eq!(f.frame_shift_ms(), 10.0);
        assert_eq!(f.frame_length_ms(), 25.0);
    }

    #[test]
    fn silence_hits_the_floor() {
        let f = lfbe_extract(&AudioClip::new(vec![0.0; 1600]).unwrap()).unwrap();
        assert!(f.frames().data().iter().all(|&v| v == LOG_FLOOR.ln()));
    }

    #[test]
    fn short_clip_rejected() {
        assert!(lfbe_extract(&AudioClip::new(vec![0.0; 399]).unwrap()).is_err());
    }

    #[test]
    fn pure_tone_peaks_at_nearest_filter() {
        let centers = mel_centers_hz(64, 20.0, 8000.0);
        let nearest = (0..64)
            .min_by(|&a, &b| {
                (centers[a] - 1000.0)
                    .abs()
                    .partial_cmp(&(centers[b] - 1000.0).abs())
                    .unwrap()
            })
            .unwrap();
        let f = lfbe_extract(&tone(1000.0, 0.5, 8000)).unwrap();
        for t in 0..f.num_frames() {
            let row = f.frames().row_slice(t);
            let argmax = (0..64).max_by(|&a, &b| row[a].partial_cmp(&row[b]).unwrap()).unwrap();
            assert_eq!(argmax, nearest, "frame {t}");
        }
    }

    #[test]
    fn one_hop_delay_shifts_one_frame() {
        let base: Vec<f64> = (0..6400)
            .map(|i| ((i as f64 * 0.013).sin() + (i as f64 * 0.0021).cos()) * 0.2)
            .collect();
        let mut delayed = vec![0.0; 160];
        delayed.extend_from_slice(&base);
        let a = lfbe_extract(&AudioClip::new(base).unwrap()).unwrap();
        let b = lfbe_extract(&AudioClip::new(delayed).unwrap()).unwrap();
        for t in 0..a.num_frames() {
            for c in 0..64 {
                let d = (a.frames().get2(t, c) - b.frames().get2(t + 1, c)).abs();
                assert!(d < 1e-9, "frame {t} ch {c}: {d}");
            }
        }
    }

    #[test]
    fn gain_adds_two_log_c_above_floor() {
        let x: Vec<f64> = (0..4000).map(|i| 0.1 * (i as f64 * 0.05).sin()).collect();
        let c = 3.0;
        let a = lfbe_extract(&AudioClip::new(x.clone()).unwrap()).unwrap();
        let b = lfbe_extract(&AudioClip::new(x.iter().map(|v| v * c).collect()).unwrap()).unwrap();
        let floor = LOG_FLOOR.ln();
        for (va, vb) in a.frames().data().iter().zip(b.frames().data()) {
            assert!(vb >= va);
            if *va > floor + 1.0 {
                assert!((vb - va - 2.0 * c.ln()).abs() < 1e-9);
            }
        }
    }
}
