use crate::tensor::Tensor;
use crate::{Error, Result};

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Edge and center frequencies: `num_filters + 2` points equally spaced on
/// the mel scale between `fmin` and `fmax`.
fn mel_grid_hz(num_filters: usize, fmin: f64, fmax: f64) -> Vec<f64> {
    let (lo, hi) = (hz_to_mel(fmin), hz_to_mel(fmax));
    let step = (hi - lo) / (num_filters + 1) as f64;
    (0..num_filters + 2)
        .map(|i| mel_to_hz(lo + step * i as f64))
        .collect()
}

/// Center frequency in Hz of each filter.
pub fn mel_centers_hz(num_filters: usize, fmin: f64, fmax: f64) -> Vec<f64> {
    let grid = mel_grid_hz(num_filters, fmin, fmax);
    grid[1..=num_filters].to_vec()
}

/// Triangular HTK-mel filterbank of shape `[num_filters, fft_size/2 + 1]`.
pub fn mel_filterbank(
    num_filters: usize,
    fft_size: usize,
    sample_rate: u32,
    fmin: f64,
    fmax: f64,
) -> Result<Tensor> {
    let nyquist = sample_rate as f64 / 2.0;
    if !(fmin >= 0.0 && fmin < fmax && fmax <= nyquist) {
        return Err(Error::invalid(format!(
            "mel band needs 0 <= fmin < fmax <= {nyquist}, got {fmin}..{fmax}"
        )));
    }
    if num_filters == 0 || fft_size < 2 {
        return Err(Error::invalid("mel filterbank needs filters and fft_size >= 2"));
    }
    let bins = fft_size / 2 + 1;
    let grid = mel_grid_hz(num_filters, fmin, fmax);
    let mut fb = Tensor::zeros(&[num_filters, bins]);
    for f in 0..num_filters {
        let (left, center, right) = (grid[f], grid[f + 1], grid[f + 2]);
        let row = &mut fb.data_mut()[f * bins..(f + 1) * bins];
        for (k, w) in row.iter_mut().enumerate() {
            let hz = k as f64 * sample_rate as f64 / fft_size as f64;
            *w = if hz > left && hz <= center {
                (hz - left) / (center - left)
            } else if hz > center && hz < right {
                (right - hz) / (right - center)
            } else {
                0.0
            };
        }
        if row.iter().all(|&w| w == 0.0) {
            return Err(Error::invalid(format!(
                "mel filter {f} ({left:.1}-{right:.1} Hz) has no FFT bin at fft_size {fft_size}"
            )));
        }
    }
    Ok(fb)
}
