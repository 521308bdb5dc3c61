use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::Label;
use crate::dsp::{AudioClip, SAMPLE_RATE};
use crate::rng;
use crate::{Error, Result};

/// 0.4 s keyword template.
pub const KEYWORD_SAMPLES: usize = 6400;
/// Frequency range covered by the keyword tones, jitter included.
pub const KEYWORD_BAND_HZ: (f64, f64) = (450.0, 2800.0);
/// Distractor tones live strictly above the keyword band.
pub const DISTRACTOR_BAND_HZ: (f64, f64) = (3600.0, 6000.0);

const DISTRACTOR_PROB: f64 = 0.3;
/// Keyword level relative to background, dB.
const KEYWORD_SNR_DB: (f64, f64) = (-14.0, 4.0);
const BACKGROUND_RMS: (f64, f64) = (0.02, 0.08);

/// (start Hz, end Hz, relative amplitude) of the three template tones.
const TONES: [(f64, f64, f64); 3] = [
    (520.0, 820.0, 1.0),
    (1400.0, 1400.0, 0.7),
    (2600.0, 2200.0, 0.5),
];

fn envelope(i: usize, n: usize) -> f64 {
    (PI * i as f64 / n as f64).sin().powi(2)
}

/// The keyword pattern at unit peak scale and pitch factor `pitch`.
fn keyword_waveform(pitch: f64) -> Vec<f64> {
    let n = KEYWORD_SAMPLES;
    let dur = n as f64 / SAMPLE_RATE as f64;
    let mut phases = [0.0f64; 3];
    (0..n)
        .map(|i| {
            let t = i as f64 / SAMPLE_RATE as f64;
            let mut s = 0.0;
            for (k, &(f0, f1, a)) in TONES.iter().enumerate() {
                let f = pitch * (f0 + (f1 - f0) * t / dur);
                phases[k] += 2.0 * PI * f / SAMPLE_RATE as f64;
                s += a * phases[k].sin();
            }
            s * envelope(i, n)
        })
        .collect()
}

/// The clean, unjittered keyword template.
pub fn keyword_template() -> AudioClip {
    AudioClip::new(keyword_waveform(1.0)).expect("finite template")
}

fn rms(x: &[f64]) -> f64 {
    (x.iter().map(|v| v * v).sum::<f64>() / x.len().max(1) as f64).sqrt()
}

fn colored_noise(r: &mut rng::Rng, n: usize) -> Vec<f64> {
    // one-pole lowpass over white noise; the pole sets the color
    let pole: f64 = r.gen_range(0.0..0.95);
    let mut y = 0.0;
    (0..n)
        .map(|_| {
            let w: f64 = StandardNormal.sample(r);
            y = pole * y + (1.0 - pole) * w;
            y
        })
        .collect()
}

fn distractor(r: &mut rng::Rng) -> Vec<f64> {
    let n = r.gen_range(4800..8000);
    let freqs: [f64; 2] = [
        r.gen_range(DISTRACTOR_BAND_HZ.0 + 100.0..DISTRACTOR_BAND_HZ.1 - 300.0),
        r.gen_range(DISTRACTOR_BAND_HZ.0 + 100.0..DISTRACTOR_BAND_HZ.1 - 300.0),
    ];
    (0..n)
        .map(|i| {
            let t = i as f64 / SAMPLE_RATE as f64;
            let s: f64 = freqs.iter().map(|f| (2.0 * PI * f * t).sin()).sum();
            0.5 * s * envelope(i, n)
        })
        .collect()
}

/// Synthesizes one clip. Positives carry the keyword template with a seeded
/// pitch jitter of at most ±5 % at a seeded offset.
pub fn synth_utterance(seed: u64, label: Label, duration_s: f64) -> Result<AudioClip> {
    if !(0.5..=3.0).contains(&duration_s) {
        return Err(Error::invalid(format!(
            "utterance duration must be in [0.5, 3.0] s, got {duration_s}"
        )));
    }
    let n = (duration_s * SAMPLE_RATE as f64).round() as usize;
    let mut r = rng::rng_for(&[seed, rng::tag("synth")]);

    let mut x = colored_noise(&mut r, n);
    let bg_rms = r.gen_range(BACKGROUND_RMS.0..BACKGROUND_RMS.1);
    let scale = bg_rms / rms(&x).max(1e-12);
    x.iter_mut().for_each(|v| *v *= scale);

    match label {
        Label::Keyword => {
            let pitch = 1.0 + r.gen_range(-0.05..=0.05);
            let snr_db = r.gen_range(KEYWORD_SNR_DB.0..KEYWORD_SNR_DB.1);
            let offset = r.gen_range(0..=n - KEYWORD_SAMPLES);
            let mut kw = keyword_waveform(pitch);
            let g = bg_rms * 10f64.powf(snr_db / 20.0) / rms(&kw);
            kw.iter_mut().for_each(|v| *v *= g);
            for (d, k) in x[offset..].iter_mut().zip(&kw) {
                *d += k;
            }
        }
        Label::NonKeyword => {
            if r.gen_bool(DISTRACTOR_PROB) {
                let snr_db = r.gen_range(KEYWORD_SNR_DB.0..KEYWORD_SNR_DB.1);
                let mut d = distractor(&mut r);
                let g = bg_rms * 10f64.powf(snr_db / 20.0) / rms(&d);
                d.iter_mut().for_each(|v| *v *= g);
                let offset = r.gen_range(0..=n - d.len().min(n));
                for (x, v) in x[offset..].iter_mut().zip(&d) {
                    *x += v;
                }
            }
        }
    }
    x.iter_mut().for_each(|v| *v = v.clamp(-1.0, 1.0));
    AudioClip::new(x)
}
