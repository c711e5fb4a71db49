use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use super::{resample, AudioClip};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FrontendConfig {
    pub target_rate_hz: u32,
    pub window_len: usize,
    pub hop_len: usize,
    pub n_mels: usize,
    pub n_frames: usize,
    pub energy_floor: f64,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        Self {
            target_rate_hz: 22050,
            window_len: 2048,
            hop_len: 345,
            n_mels: 128,
            n_frames: 640,
            energy_floor: 1e-10,
        }
    }
}

impl FrontendConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(format!("front-end: {m}")));
        if self.target_rate_hz == 0 {
            return fail("target_rate_hz must be positive");
        }
        if self.window_len < 2 {
            return fail("window_len must be at least 2");
        }
        if self.hop_len == 0 || self.hop_len >= self.window_len {
            return fail("need 0 < hop_len < window_len");
        }
        if self.n_mels == 0 {
            return fail("n_mels must be at least 1");
        }
        if self.n_frames == 0 {
            return fail("n_frames must be at least 1");
        }
        if !(self.energy_floor > 0.0 && self.energy_floor.is_finite()) {
            return fail("energy_floor must be positive and finite");
        }
        Ok(())
    }

    pub fn n_bins(&self) -> usize {
        self.window_len / 2 + 1
    }

    pub fn frame_hop_s(&self) -> f64 {
        self.hop_len as f64 / self.target_rate_hz as f64
    }

    /// Stable identifier for cache directories.
    pub fn cache_key(&self) -> String {
        format!(
            "sr{}_w{}_h{}_m{}_t{}_f{:e}",
            self.target_rate_hz, self.window_len, self.hop_len, self.n_mels, self.n_frames, self.energy_floor
        )
    }
}

/// Dense row-major matrix of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }
}

/// Periodic Hann window.
pub(crate) fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
        .collect()
}

/// Power spectrogram with `cfg.n_frames` centered frames.
///
/// Frame `t` covers samples `t*hop - window/2 .. t*hop + window/2` of a
/// reflect-padded signal; anything past the padding is zero.
pub fn stft_power(clip: &AudioClip, cfg: &FrontendConfig) -> Result<Matrix> {
    cfg.validate()?;
    clip.validate()?;
    if clip.sample_rate_hz != cfg.target_rate_hz {
        return Err(Error::InvalidAudio(format!(
            "clip at {} Hz, front-end expects {} Hz",
            clip.sample_rate_hz, cfg.target_rate_hz
        )));
    }
    let w = cfg.window_len;
    let pad = w / 2;
    let x = &clip.samples;
    let len = x.len();
    if len <= pad {
        return Err(Error::InvalidAudio(format!(
            "clip of {len} samples is too short to reflect-pad by {pad}"
        )));
    }
    let sample = |s: isize| -> f64 {
        let n = len as isize;
        let idx = if s < 0 {
            -s
        } else if s >= n {
            2 * (n - 1) - s
        } else {
            s
        };
        if idx < 0 || idx >= n || s >= n + pad as isize {
            0.0
        } else {
            x[idx as usize] as f64
        }
    };

    let window = hann(w);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(w);
    let n_bins = cfg.n_bins();
    let mut out = Matrix::zeros(cfg.n_frames, n_bins);
    let mut buf = vec![Complex::new(0.0, 0.0); w];
    let mut scratch = vec![Complex::new(0.0, 0.0); fft.get_inplace_scratch_len()];
    for t in 0..cfg.n_frames {
        let start = (t * cfg.hop_len) as isize - pad as isize;
        for (i, b) in buf.iter_mut().enumerate() {
            *b = Complex::new(sample(start + i as isize) * window[i], 0.0);
        }
        fft.process_with_scratch(&mut buf, &mut scratch);
        let row = &mut out.data[t * n_bins..(t + 1) * n_bins];
        for (r, c) in row.iter_mut().zip(&buf) {
            *r = c.norm_sqr();
        }
    }
    Ok(out)
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Unnormalized triangular filters with centers equally spaced in mel
/// between 0 Hz and Nyquist. Adjacent slopes sum to one between centers.
pub fn mel_filterbank(cfg: &FrontendConfig) -> Result<Matrix> {
    cfg.validate()?;
    let n_bins = cfg.n_bins();
    let nyquist = cfg.target_rate_hz as f64 / 2.0;
    let top = hz_to_mel(nyquist);
    let edges: Vec<f64> = (0..cfg.n_mels + 2)
        .map(|i| mel_to_hz(top * i as f64 / (cfg.n_mels + 1) as f64))
        .collect();
    let bin_hz = cfg.target_rate_hz as f64 / cfg.window_len as f64;
    let mut fb = Matrix::zeros(cfg.n_mels, n_bins);
    for m in 0..cfg.n_mels {
        let (lo, center, hi) = (edges[m], edges[m + 1], edges[m + 2]);
        let mut any = false;
        for k in 0..n_bins {
            let f = k as f64 * bin_hz;
            let wt = ((f - lo) / (center - lo)).min((hi - f) / (hi - center)).max(0.0);
            if wt > 0.0 {
                any = true;
            }
            fb.data[m * n_bins + k] = wt;
        }
        if !any {
            return Err(Error::Config(format!(
                "mel filter {m} of {} has no FFT bin; n_mels too large for window_len {}",
                cfg.n_mels, cfg.window_len
            )));
        }
    }
    Ok(fb)
}

/// `power · filterbankᵀ`: mel energies, frames × mels.
pub fn apply_filterbank(power: &Matrix, fb: &Matrix) -> Matrix {
    assert_eq!(power.cols, fb.cols);
    let mut out = Matrix::zeros(power.rows, fb.rows);
    for t in 0..power.rows {
        let p = power.row(t);
        for m in 0..fb.rows {
            out.data[t * fb.rows + m] = fb.row(m).iter().zip(p).map(|(a, b)| a * b).sum();
        }
    }
    out
}

fn prepare(clip: &AudioClip, cfg: &FrontendConfig) -> Result<AudioClip> {
    if clip.sample_rate_hz == cfg.target_rate_hz {
        clip.validate()?;
        Ok(clip.clone())
    } else {
        resample(clip, cfg.target_rate_hz)
    }
}

/// Mel energies before the floor and log, resampling first if needed.
pub fn mel_power(clip: &AudioClip, cfg: &FrontendConfig) -> Result<Matrix> {
    let clip = prepare(clip, cfg)?;
    let power = stft_power(&clip, cfg)?;
    Ok(apply_filterbank(&power, &mel_filterbank(cfg)?))
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogMelSpectrogram {
    pub n_frames: usize,
    pub n_mels: usize,
    /// Row-major by frame.
    pub frames: Vec<f32>,
    pub frame_hop_s: f64,
}

impl LogMelSpectrogram {
    pub fn get(&self, t: usize, b: usize) -> f32 {
        self.frames[t * self.n_mels + b]
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        &self.frames[t * self.n_mels..(t + 1) * self.n_mels]
    }
}

/// Log-mel features; clips that are too long are truncated and short ones
/// padded, so the output always has `cfg.n_frames` frames.
pub fn log_mel(clip: &AudioClip, cfg: &FrontendConfig) -> Result<LogMelSpectrogram> {
    let mel = mel_power(clip, cfg)?;
    let floor = cfg.energy_floor;
    Ok(LogMelSpectrogram {
        n_frames: mel.rows,
        n_mels: mel.cols,
        frames: mel.data.iter().map(|&e| e.max(floor).ln() as f32).collect(),
        frame_hop_s: cfg.frame_hop_s(),
    })
}

/// Per-mel-bin standardization statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl NormStats {
    const MIN_STD: f64 = 1e-5;

    pub fn identity(n_mels: usize) -> Self {
        Self {
            mean: vec![0.0; n_mels],
            std: vec![1.0; n_mels],
        }
    }

    pub fn compute<'a>(specs: impl IntoIterator<Item = &'a LogMelSpectrogram>) -> Result<Self> {
        let mut sum: Vec<f64> = Vec::new();
        let mut sq: Vec<f64> = Vec::new();
        let mut count = 0usize;
        for s in specs {
            if sum.is_empty() {
                sum = vec![0.0; s.n_mels];
                sq = vec![0.0; s.n_mels];
            } else if sum.len() != s.n_mels {
                return Err(Error::Config("spectrograms disagree on n_mels".into()));
            }
            for t in 0..s.n_frames {
                for (b, &v) in s.frame(t).iter().enumerate() {
                    sum[b] += v as f64;
                    sq[b] += (v as f64) * (v as f64);
                }
            }
            count += s.n_frames;
        }
        if count == 0 {
            return Err(Error::Config("normalization needs at least one frame".into()));
        }
        let n = count as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| ((q / n - m * m).max(0.0).sqrt().max(Self::MIN_STD)) as f32)
            .collect();
        Ok(Self {
            mean: mean.into_iter().map(|m| m as f32).collect(),
            std,
        })
    }

    pub fn apply(&self, spec: &mut LogMelSpectrogram) -> Result<()> {
        if spec.n_mels != self.mean.len() {
            return Err(Error::Config(format!(
                "normalization has {} bins, spectrogram has {}",
                self.mean.len(),
                spec.n_mels
            )));
        }
        for row in spec.frames.chunks_mut(spec.n_mels) {
            for ((v, m), s) in row.iter_mut().zip(&self.mean).zip(&self.std) {
                *v = (*v - m) / s;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> FrontendConfig {
        FrontendConfig {
            n_frames: 64,
            ..Default::default()
        }
    }

    #[test]
    fn config_validation() {
        assert!(FrontendConfig::default().validate().is_ok());
        let bad = FrontendConfig {
            hop_len: 2048,
            ..Default::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let bad = FrontendConfig {
            n_mels: 0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn zero_clip_gives_zero_power() {
        let clip = AudioClip::silence(1.0, 22050);
        let p = stft_power(&clip, &small()).unwrap();
        assert_eq!((p.rows, p.cols), (64, 1025));
        assert!(p.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dc_clip_concentrates_in_bin_zero() {
        let clip = AudioClip::new(vec![0.25; 22050], 22050).unwrap();
        let p = stft_power(&clip, &small()).unwrap();
        for t in 0..50 {
            let row = p.row(t);
            let total: f64 = row.iter().sum();
            // Hann leaks into bin 1 only.
            assert!(row[0] / total > 0.6, "frame {t}");
            assert!(row[2..].iter().sum::<f64>() / total < 1e-9);
        }
    }

    #[test]
    fn short_clip_is_invalid() {
        let clip = AudioClip::new(vec![0.1; 1000], 22050).unwrap();
        assert!(matches!(stft_power(&clip, &small()), Err(Error::InvalidAudio(_))));
    }

    #[test]
    fn wrong_rate_is_invalid_for_stft() {
        let clip = AudioClip::silence(1.0, 16000);
        assert!(matches!(stft_power(&clip, &small()), Err(Error::InvalidAudio(_))));
    }

    #[test]
    fn single_filter_spans_band() {
        let cfg = FrontendConfig {
            n_mels: 1,
            ..Default::default()
        };
        let fb = mel_filterbank(&cfg).unwrap();
        assert_eq!(fb.rows, 1);
        let row = fb.row(0);
        assert_eq!(row[0], 0.0);
        let nonzero = row.iter().filter(|&&v| v > 0.0).count();
        assert_eq!(nonzero, 1023);
    }

    #[test]
    fn too_many_mels_is_config_error() {
        let cfg = FrontendConfig {
            window_len: 256,
            hop_len: 64,
            n_mels: 128,
            ..Default::default()
        };
        assert!(matches!(mel_filterbank(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn norm_stats_standardize() {
        let spec = LogMelSpectrogram {
            n_frames: 4,
            n_mels: 2,
            frames: vec![1.0, 10.0, 3.0, 10.0, 1.0, 10.0, 3.0, 10.0],
            frame_hop_s: 0.1,
        };
        let stats = NormStats::compute([&spec]).unwrap();
        assert_eq!(stats.mean, vec![2.0, 10.0]);
        assert_eq!(stats.std[0], 1.0);
        let mut s = spec.clone();
        stats.apply(&mut s).unwrap();
        assert_eq!(s.frames[..4], [-1.0, 0.0, 1.0, 0.0]);
    }
}
