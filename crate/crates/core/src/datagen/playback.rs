use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::dsp::{AudioClip, SAMPLE_RATE};
use crate::rng;
use crate::{Error, Result};

/// 40 ms.
pub const ECHO_DELAY: usize = 640;
pub const ECHO_GAIN: f64 = 0.3;
const BABBLE_VOICES: usize = 6;

/// The separated components of a playback mix, before echo.
#[derive(Clone, Debug)]
pub struct PlaybackMix {
    pub signal: Vec<f64>,
    pub noise: Vec<f64>,
    pub output: AudioClip,
}

/// Narrowband noise: white noise through a two-pole resonator, amplitude
/// modulated at a syllabic rate.
fn narrowband(r: &mut rng::Rng, n: usize) -> Vec<f64> {
    let fc: f64 = r.gen_range(200.0..3500.0);
    let bw: f64 = r.gen_range(80.0..300.0);
    let fm: f64 = r.gen_range(2.0..8.0);
    let phase: f64 = r.gen_range(0.0..2.0 * PI);
    let rad = (-PI * bw / SAMPLE_RATE as f64).exp();
    let a1 = 2.0 * rad * (2.0 * PI * fc / SAMPLE_RATE as f64).cos();
    let a2 = -rad * rad;
    let (mut y1, mut y2) = (0.0, 0.0);
    let mut out: Vec<f64> = (0..n)
        .map(|i| {
            let w: f64 = StandardNormal.sample(r);
            let y = w + a1 * y1 + a2 * y2;
            y2 = y1;
            y1 = y;
            let t = i as f64 / SAMPLE_RATE as f64;
            y * (1.0 + 0.8 * (2.0 * PI * fm * t + phase).sin())
        })
        .collect();
    let p = out.iter().map(|v| v * v).sum::<f64>() / n.max(1) as f64;
    if p > 0.0 {
        let s = 1.0 / p.sqrt();
        out.iter_mut().for_each(|v| *v *= s);
    }
    out
}

fn echo(x: &[f64]) -> Vec<f64> {
    (0..x.len())
        .map(|i| {
            if i >= ECHO_DELAY {
                x[i] + ECHO_GAIN * x[i - ECHO_DELAY]
            } else {
                x[i]
            }
        })
        .collect()
}

fn peak_normalize(mut x: Vec<f64>) -> Vec<f64> {
    let peak = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 1.0 {
        x.iter_mut().for_each(|v| *v /= peak);
    }
    x
}

/// Adds babble at `snr_db`, applies the echo and peak-normalizes, keeping the
/// pre-echo signal and noise components.
pub fn playback_components(clip: &AudioClip, seed: u64, snr_db: f64) -> Result<PlaybackMix> {
    if !snr_db.is_finite() {
        return Err(Error::invalid(format!("snr_db must be finite, got {snr_db}")));
    }
    let p_signal = clip.power();
    if p_signal == 0.0 {
        return Err(Error::invalid("playback on a zero-power clip: SNR undefined"));
    }
    let n = clip.len();
    let mut r = rng::rng_for(&[seed, rng::tag("playback")]);
    let mut noise = vec![0.0; n];
    for _ in 0..BABBLE_VOICES {
        for (acc, v) in noise.iter_mut().zip(narrowband(&mut r, n)) {
            *acc += v;
        }
    }
    let p_noise = noise.iter().map(|v| v * v).sum::<f64>() / n as f64;
    let target = p_signal / 10f64.powf(snr_db / 10.0);
    let g = (target / p_noise).sqrt();
    noise.iter_mut().for_each(|v| *v *= g);

    let mixed: Vec<f64> = clip.samples().iter().zip(&noise).map(|(s, v)| s + v).collect();
    let output = AudioClip::new(peak_normalize(echo(&mixed)))?;
    Ok(PlaybackMix {
        signal: clip.samples().to_vec(),
        noise,
        output,
    })
}

pub fn apply_playback(clip: &AudioClip, seed: u64, snr_db: f64) -> Result<AudioClip> {
    Ok(playback_components(clip, seed, snr_db)?.output)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{synth_utterance, Label};

    fn power(x: &[f64]) -> f64 {
        x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64
    }

    #[test]
    fn snr_matches_request() {
        let clip = synth_utterance(11, Label::Keyword, 1.2).unwrap();
        for snr in [-5.0, 0.0, 5.0, 20.0] {
            let mix = playback_components(&clip, 3, snr).unwrap();
            let measured = 10.0 * (power(&mix.signal) / power(&mix.noise)).log10();
            assert!((measured - snr).abs() < 0.1, "{snr} vs {measured}");
        }
    }

    #[test]
    fn high_snr_is_almost_pure_echo() {
        let clip = synth_utterance(4, Label::NonKeyword, 1.0).unwrap();
        let out = apply_playback(&clip, 9, 60.0).unwrap();
        let pure = peak_normalize(echo(clip.samples()));
        let diff: f64 = out.samples().iter().zip(&pure).map(|(a, b)| (a - b).powi(2)).sum();
        let norm: f64 = pure.iter().map(|v| v * v).sum();
        assert!((diff / norm).sqrt() < 0.01);
    }

    #[test]
    fn deterministic_bounded_and_rejects_silence() {
        let clip = synth_utterance(5, Label::Keyword, 0.9).unwrap();
        let a = apply_playback(&clip, 1, 5.0).unwrap();
        let b = apply_playback(&clip, 1, 5.0).unwrap();
        assert_eq!(a, b);
        assert!(a.peak() <= 1.0);
        let silent = AudioClip::new(vec![0.0; 800]).unwrap();
        assert!(apply_playback(&silent, 1, 5.0).is_err());
        assert!(apply_playback(&clip, 1, f64::NAN).is_err());
    }
}
