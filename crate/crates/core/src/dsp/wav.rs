use std::path::Path;

use super::{AudioClip, SAMPLE_RATE};
use crate::{Error, Result};

/// Reads 16-bit PCM mono 16 kHz RIFF/WAVE; any other layout is rejected.
pub fn read_wav(path: &Path) -> Result<AudioClip> {
    let reader = hound::WavReader::open(path).map_err(|e| Error::format("wav", e.to_string()))?;
    let spec = reader.spec();
    if spec.channels != 1
        || spec.sample_rate != SAMPLE_RATE
        || spec.bits_per_sample != 16
        || spec.sample_format != hound::SampleFormat::Int
    {
        return Err(Error::format(
            "wav",
            format!(
                "{}: need 16-bit PCM mono {SAMPLE_RATE} Hz, got {} ch {} Hz {} bit {:?}",
                path.display(),
                spec.channels,
                spec.sample_rate,
                spec.bits_per_sample,
                spec.sample_format
            ),
        ));
    }
    let samples = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| v as f64 / 32768.0))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| Error::format("wav", e.to_string()))?;
    AudioClip::new(samples)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(path: &Path, rate: u32, channels: u16, samples: &[i16]) {
        let spec = hound::WavSpec {
            channels,
            sample_rate: rate,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(path, spec).unwrap();
        for &s in samples {
            w.write_sample(s).unwrap();
        }
        w.finalize().unwrap();
    }

    #[test]
    fn reads_mono_16k_and_rejects_others() {
        let dir = tempfile::tempdir().unwrap();
        let ok = dir.path().join("ok.wav");
        write(&ok, 16_000, 1, &[0, 16384, -32768]);
        let clip = read_wav(&ok).unwrap();
        assert_eq!(clip.samples(), &[0.0, 0.5, -1.0]);

        let stereo = dir.path().join("stereo.wav");
        write(&stereo, 16_000, 2, &[0, 0]);
        assert!(read_wav(&stereo).is_err());

        let rate = dir.path().join("rate.wav");
        write(&rate, 8_000, 1, &[0]);
        assert!(read_wav(&rate).is_err());
    }
}
