//! Audio input and the log-mel front-end.

mod cache;
mod frontend;
mod resample;

use std::path::Path;

pub use cache::{read_lmsp, write_lmsp, LMSP_MAGIC};
pub use frontend::{
    apply_filterbank, log_mel, mel_filterbank, mel_power, mel_to_hz, hz_to_mel, stft_power, FrontendConfig, LogMelSpectrogram, Matrix,
    NormStats,
};
pub use resample::resample;

use crate::error::{Error, Result};

/// Mono audio.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    pub samples: Vec<f32>,
    pub sample_rate_hz: u32,
}

impl AudioClip {
    pub fn new(samples: Vec<f32>, sample_rate_hz: u32) -> Result<Self> {
        let clip = Self {
            samples,
            sample_rate_hz,
        };
        clip.validate()?;
        Ok(clip)
    }

    pub fn silence(duration_s: f64, sample_rate_hz: u32) -> Self {
        Self {
            samples: vec![0.0; (duration_s * sample_rate_hz as f64).round() as usize],
            sample_rate_hz,
        }
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate_hz as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.sample_rate_hz == 0 {
            return Err(Error::InvalidAudio("sample rate is zero".into()));
        }
        if let Some(i) = self.samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::InvalidAudio(format!("non-finite sample at index {i}")));
        }
        Ok(())
    }
}

/// Reads 16-bit PCM WAV; multi-channel input is averaged to mono.
pub fn read_wav(path: &Path) -> Result<AudioClip> {
    let mut reader = hound::WavReader::open(path)?;
    let spec = reader.spec();
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(Error::InvalidAudio(format!(
            "{}: expected 16-bit PCM, found {:?} {}-bit",
            path.display(),
            spec.sample_format,
            spec.bits_per_sample
        )));
    }
    let channels = spec.channels.max(1) as usize;
    let raw = reader.samples::<i16>().collect::<std::result::Result<Vec<_>, _>>()?;
    let samples = raw
        .chunks(channels)
        .map(|frame| frame.iter().map(|&s| s as f32 / 32768.0).sum::<f32>() / channels as f32)
        .collect();
    AudioClip::new(samples, spec.sample_rate)
}

/// Writes 16-bit PCM mono WAV, clamping to [-1, 1].
pub fn write_wav(path: &Path, clip: &AudioClip) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: clip.sample_rate_hz,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec)?;
    for &s in &clip.samples {
        writer.write_sample(pcm16(s))?;
    }
    writer.finalize()?;
    Ok(())
}

pub fn pcm16(s: f32) -> i16 {
    (s.clamp(-1.0, 1.0) * 32767.0).round() as i16
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wav_round_trip_is_pcm16_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.wav");
        let clip = AudioClip::new((0..1000).map(|i| ((i as f32) * 0.01).sin() * 0.8).collect(), 44100).unwrap();
        write_wav(&path, &clip).unwrap();
        let back = read_wav(&path).unwrap();
        assert_eq!(back.sample_rate_hz, 44100);
        assert_eq!(back.samples.len(), 1000);
        for (a, b) in clip.samples.iter().zip(&back.samples) {
            assert_eq!(pcm16(*a) as f32 / 32768.0, *b);
        }
    }

    #[test]
    fn stereo_is_averaged() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.wav");
        let spec = hound::WavSpec {
            channels: 2,
            sample_rate: 8000,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(&path, spec).unwrap();
        for _ in 0..10 {
            w.write_sample(1000i16).unwrap();
            w.write_sample(3000i16).unwrap();
        }
        w.finalize().unwrap();
        let clip = read_wav(&path).unwrap();
        assert_eq!(clip.samples.len(), 10);
        assert!(clip.samples.iter().all(|&s| s == 2000.0 / 32768.0));
    }

    #[test]
    fn non_finite_samples_are_invalid() {
        assert!(matches!(
            AudioClip::new(vec![0.0, f32::NAN], 100),
            Err(Error::InvalidAudio(_))
        ));
    }
}
