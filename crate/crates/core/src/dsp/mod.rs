//! 64-channel log filterbank energies: 25 ms Hann window, 10 ms shift,
//! 512-point power spectrum, HTK-mel triangular filters, floored natural log.

mod lfbe;
mod mel;
mod wav;

pub use lfbe::{frame_count, lfbe_extract, FeatureSeq, LfbeConfig, LfbeExtractor};
pub use mel::{hz_to_mel, mel_centers_hz, mel_filterbank, mel_to_hz};
pub use wav::read_wav;

use crate::{Error, Result};

pub const SAMPLE_RATE: u32 = 16_000;
pub const NUM_CHANNELS: usize = 64;
pub const WINDOW_SAMPLES: usize = 400;
pub const HOP_SAMPLES: usize = 160;
pub const FFT_SIZE: usize = 512;
pub const LOG_FLOOR: f64 = 1e-10;

/// Mono 16 kHz audio with samples in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioClip {
    samples: Vec<f64>,
}

impl AudioClip {
    pub fn new(samples: Vec<f64>) -> Result<Self> {
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::NonFinite(format!("audio sample {i}")));
        }
        Ok(Self { samples })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        SAMPLE_RATE
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / SAMPLE_RATE as f64
    }

    pub fn power(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        self.samples.iter().map(|s| s * s).sum::<f64>() / self.samples.len() as f64
    }

    pub fn peak(&self) -> f64 {
        self.samples.iter().fold(0.0, |m, s| m.max(s.abs()))
    }
}
