mod common;

use common::{hann, naive_dft_power, rng};
use proptest::prelude::*;
use rand::Rng;
use sedtriadv::audio::{log_mel, mel_filterbank, mel_power, resample, stft_power, AudioClip, FrontendConfig};

fn one_second() -> FrontendConfig {
    FrontendConfig {
        n_frames: 64,
        ..Default::default()
    }
}

fn noise(seed: u64, n: usize, rate: u32) -> AudioClip {
    let mut r = rng(seed);
    AudioClip::new((0..n).map(|_| r.gen_range(-0.5..0.5)).collect(), rate).unwrap()
}

/// Frame `t` of the centered, reflect-padded signal, windowed.
fn oracle_frame(x: &[f32], t: usize, cfg: &FrontendConfig) -> Vec<f64> {
    let w = hann(cfg.window_len);
    let n = x.len() as i64;
    let pad = (cfg.window_len / 2) as i64;
    (0..cfg.window_len)
        .map(|i| {
            let s = (t * cfg.hop_len) as i64 - pad + i as i64;
            let v = if s < 0 {
                x[(-s) as usize] as f64
            } else if s < n {
                x[s as usize] as f64
            } else if s < n + pad {
                x[(2 * (n - 1) - s) as usize] as f64
            } else {
                0.0
            };
            v * w[i]
        })
        .collect()
}

/// Triangles built from the HTK formula, bin by bin.
fn oracle_filterbank(cfg: &FrontendConfig) -> Vec<Vec<f64>> {
    let mel = |f: f64| 2595.0 * (1.0 + f / 700.0).log10();
    let inv = |m: f64| 700.0 * (10f64.powf(m / 2595.0) - 1.0);
    let sr = cfg.target_rate_hz as f64;
    let top = mel(sr / 2.0);
    let pts: Vec<f64> = (0..cfg.n_mels + 2).map(|i| inv(top * i as f64 / (cfg.n_mels + 1) as f64)).collect();
    (0..cfg.n_mels)
        .map(|m| {
            (0..cfg.window_len / 2 + 1)
                .map(|k| {
                    let f = k as f64 * sr / cfg.window_len as f64;
                    if f <= pts[m] || f >= pts[m + 2] {
                        0.0
                    } else if f <= pts[m + 1] {
                        (f - pts[m]) / (pts[m + 1] - pts[m])
                    } else {
                        (pts[m + 2] - f) / (pts[m + 2] - pts[m + 1])
                    }
                })
                .collect()
        })
        .collect()
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-30)
}

#[test]
fn stft_matches_naive_dft() {
    let cfg = one_second();
    let clip = noise(3, 22050, 22050);
    let p = stft_power(&clip, &cfg).unwrap();
    assert_eq!((p.rows, p.cols), (64, 1025));
    let mut worst = 0.0f64;
    for t in 0..cfg.n_frames {
        let want = naive_dft_power(&oracle_frame(&clip.samples, t, &cfg));
        for (k, &w) in want.iter().enumerate() {
            worst = worst.max(rel(p.get(t, k), w));
        }
    }
    assert!(worst <= 1e-6, "worst relative error {worst:e}");
}

#[test]
fn white_noise_mel_energies_match_oracle() {
    let cfg = one_second();
    let clip = noise(4, 22050, 22050);
    let mel = mel_power(&clip, &cfg).unwrap();
    let fb = oracle_filterbank(&cfg);
    let mut worst = 0.0f64;
    for t in (0..cfg.n_frames).step_by(7) {
        let power = naive_dft_power(&oracle_frame(&clip.samples, t, &cfg));
        for (m, row) in fb.iter().enumerate() {
            let want: f64 = row.iter().zip(&power).map(|(a, b)| a * b).sum();
            worst = worst.max(rel(mel.get(t, m), want));
        }
    }
    assert!(worst <= 1e-5, "worst relative error {worst:e}");
}

#[test]
fn default_ten_second_clip_is_640_by_128() {
    let cfg = FrontendConfig::default();
    let clip = noise(5, 441000, 44100);
    let spec = log_mel(&clip, &cfg).unwrap();
    assert_eq!((spec.n_frames, spec.n_mels), (640, 128));
    assert_eq!(spec.frames.len(), 640 * 128);
    assert!(spec.frames.iter().all(|v| v.is_finite()));
    let floor = (cfg.energy_floor.ln()) as f32;
    assert!(spec.frames.iter().all(|&v| v >= floor));
    assert!((spec.frame_hop_s - 345.0 / 22050.0).abs() < 1e-15);
}

#[test]
fn silence_sits_on_the_floor() {
    let cfg = one_second();
    let spec = log_mel(&AudioClip::silence(1.0, 22050), &cfg).unwrap();
    let floor = cfg.energy_floor.ln() as f32;
    assert!(spec.frames.iter().all(|&v| v == floor));
}

#[test]
fn filterbank_shape_and_support() {
    let cfg = FrontendConfig::default();
    let fb = mel_filterbank(&cfg).unwrap();
    assert_eq!((fb.rows, fb.cols), (128, 1025));
    for m in 0..fb.rows {
        let row = fb.row(m);
        assert!(row.iter().all(|&v| v >= 0.0));
        assert!(row.iter().sum::<f64>() > 0.0);
        let nz: Vec<usize> = (0..row.len()).filter(|&k| row[k] > 0.0).collect();
        assert_eq!(nz.last().unwrap() - nz[0] + 1, nz.len(), "row {m} support not contiguous");
    }
}

#[test]
fn filterbank_matches_direct_construction_and_partitions() {
    let cfg = FrontendConfig::default();
    let fb = mel_filterbank(&cfg).unwrap();
    let oracle = oracle_filterbank(&cfg);
    for (m, row) in oracle.iter().enumerate() {
        for (k, &w) in row.iter().enumerate() {
            assert!((fb.get(m, k) - w).abs() < 1e-12, "({m},{k})");
        }
    }
    // Interior bins: between the first and last filter centers.
    let bin_hz = 22050.0 / 2048.0;
    let top = 2595.0 * (1.0f64 + 11025.0 / 700.0).log10();
    let center_hz = |m: usize| 700.0 * (10f64.powf(top * (m + 1) as f64 / 129.0 / 2595.0) - 1.0);
    let first = (center_hz(0) / bin_hz).ceil() as usize;
    let last = (center_hz(127) / bin_hz).floor() as usize;
    for k in first..=last {
        let col: f64 = (0..fb.rows).map(|m| fb.get(m, k)).sum();
        let covering = (0..fb.rows).filter(|&m| fb.get(m, k) > 0.0).count();
        assert!((col - 1.0).abs() < 1e-9, "bin {k} ({} Hz) sums to {col}", k as f64 * bin_hz);
        assert!((1..=2).contains(&covering));
    }
}

#[test]
fn resampled_tone_keeps_its_peak() {
    let tone = |rate: u32, n: usize| -> Vec<f32> {
        (0..n)
            .map(|i| (2.0 * std::f64::consts::PI * 1000.0 * i as f64 / rate as f64).sin() as f32)
            .collect()
    };
    let clip = AudioClip::new(tone(44100, 44100), 44100).unwrap();
    let out = resample(&clip, 22050).unwrap();
    // 10 Hz resolution on both sides: 4410 input and 2205 output samples.
    let peak = |x: &[f32], rate: f64| {
        let frame: Vec<f64> = x.iter().map(|&v| v as f64).collect();
        let p = naive_dft_power(&frame);
        let k = (0..p.len()).max_by(|&a, &b| p[a].total_cmp(&p[b])).unwrap();
        k as f64 * rate / frame.len() as f64
    };
    let fin = peak(&clip.samples[8820..13230], 44100.0);
    let fout = peak(&out.samples[4410..6615], 22050.0);
    assert!((fin - fout).abs() <= 10.0, "{fin} vs {fout}");
    assert!((fout - 1000.0).abs() <= 10.0);
}

#[test]
fn front_end_is_deterministic() {
    let cfg = one_second();
    let clip = noise(6, 44100, 44100);
    let a = log_mel(&clip, &cfg).unwrap();
    let b = log_mel(&clip, &cfg).unwrap();
    assert!(a.frames.iter().zip(&b.frames).all(|(x, y)| x.to_bits() == y.to_bits()));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn delay_by_whole_hops_shifts_frames(k in 1usize..6, seed in 0u64..1000) {
        let cfg = FrontendConfig { n_frames: 40, ..Default::default() };
        let base = noise(seed, 16000, 22050);
        let mut delayed = vec![0.0f32; k * cfg.hop_len];
        delayed.extend_from_slice(&base.samples);
        let delayed = AudioClip::new(delayed, 22050).unwrap();
        let a = stft_power(&base, &cfg).unwrap();
        let b = stft_power(&delayed, &cfg).unwrap();
        // Frames whose window stays inside the undelayed signal.
        let lo = cfg.window_len / 2 / cfg.hop_len + 1;
        for t in lo..cfg.n_frames - k {
            for f in 0..a.cols {
                prop_assert!((a.get(t, f) - b.get(t + k, f)).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn raising_the_floor_never_lowers_output(lo_exp in -14.0f64..-2.0, gap in 0.1f64..6.0, seed in 0u64..1000) {
        let clip = noise(seed, 6000, 22050);
        let quiet = AudioClip::new(clip.samples.iter().map(|v| v * 1e-3).collect(), 22050).unwrap();
        let low = FrontendConfig { n_frames: 16, energy_floor: 10f64.powf(lo_exp), ..Default::default() };
        let high = FrontendConfig { energy_floor: 10f64.powf(lo_exp + gap), ..low.clone() };
        let a = log_mel(&quiet, &low).unwrap();
        let b = log_mel(&quiet, &high).unwrap();
        for (x, y) in a.frames.iter().zip(&b.frames) {
            prop_assert!(y >= x);
        }
    }
}
