//! Procedural two-domain soundscapes.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    write_jsonl, ClipDomain, CorpusInfo, EventAnnotation, HiddenTruth, LabelKind, LabeledClip, CLIP_SECONDS,
    CORPUS_FILE, HIDDEN_FILE, MANIFEST_FILE, SOURCE_RATE_HZ,
};
use crate::audio::{write_wav, AudioClip};
use crate::error::{Error, Result};

pub const CLASS_NAMES: [&str; 10] = [
    "tone",
    "chirp",
    "noise_burst",
    "am_tone",
    "click_train",
    "harmonic_stack",
    "fm_warble",
    "filtered_noise",
    "chirp_train",
    "hum",
];

pub const MAX_CLASSES: usize = CLASS_NAMES.len();

const FADE_S: f64 = 0.010;
const MIN_EVENT_S: f64 = 0.5;
const MAX_EVENT_S: f64 = 4.0;
/// Events of one class never touch, so their boundaries stay decodable.
const SAME_CLASS_GAP_S: f64 = 1.0;
/// Event RMS scale that background SNR is measured against.
const REFERENCE_RMS: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub n_s: usize,
    pub n_w: usize,
    pub n_u: usize,
    pub n_val: usize,
}

impl Default for SplitCounts {
    fn default() -> Self {
        Self {
            n_s: 200,
            n_w: 150,
            n_u: 400,
            n_val: 100,
        }
    }
}

impl SplitCounts {
    pub fn total(&self) -> usize {
        self.n_s + self.n_w + self.n_u + self.n_val
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateConfig {
    pub seed: u64,
    pub n_classes: usize,
    pub counts: SplitCounts,
    pub domain_gap: f64,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_classes: 4,
            counts: SplitCounts::default(),
            domain_gap: 0.8,
        }
    }
}

impl GenerateConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes == 0 || self.n_classes > MAX_CLASSES {
            return Err(Error::Config(format!(
                "n_classes must be in 1..={MAX_CLASSES}, got {}",
                self.n_classes
            )));
        }
        if !(0.0..=1.0).contains(&self.domain_gap) {
            return Err(Error::Config(format!("domain_gap must be in [0, 1], got {}", self.domain_gap)));
        }
        Ok(())
    }

    /// Background SNR in dB for real-domain clips; infinite at gap 0.
    pub fn snr_db(&self) -> f64 {
        if self.domain_gap == 0.0 {
            f64::INFINITY
        } else {
            20.0 * (1.0 / self.domain_gap - 1.0)
        }
    }
}

/// SplitMix64 step, used to derive independent per-clip seeds.
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn clip_seed(master: u64, index: usize) -> u64 {
    splitmix64(master ^ splitmix64(index as u64))
}

/// One generated clip with its full annotation.
#[derive(Debug, Clone)]
pub struct GeneratedClip {
    pub audio: AudioClip,
    pub events: Vec<EventAnnotation>,
}

/// Renders a single clip. The same seed always yields the same samples.
pub fn render_clip(seed: u64, n_classes: usize, domain: ClipDomain, domain_gap: f64) -> GeneratedClip {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rate = SOURCE_RATE_HZ as f64;
    let n = (CLIP_SECONDS * rate) as usize;
    let mut events = Vec::new();
    let n_events = rng.gen_range(1..=3);
    let allow_overlap = rng.gen_bool(0.5);
    let gap = (SAME_CLASS_GAP_S * rate) as usize;
    let mut placed: Vec<(usize, usize, usize)> = Vec::new();
    let mut mix = vec![0.0f64; n];
    for _ in 0..n_events {
        let class = rng.gen_range(0..n_classes);
        let len = (rng.gen_range(MIN_EVENT_S..=MAX_EVENT_S) * rate).round() as usize;
        let mut start = None;
        for _ in 0..50 {
            let s = rng.gen_range(0..=n - len);
            let fits = placed.iter().all(|&(a, b, c)| {
                let g = if c == class { gap } else { 0 };
                (allow_overlap && c != class) || s + len + g <= a || s >= b + g
            });
            if fits {
                start = Some(s);
                break;
            }
        }
        let Some(start) = start else { continue };
        placed.push((start, start + len, class));
        let amp = rng.gen_range(0.12..0.28);
        let sig = render_event(class, len, rate, &mut rng);
        for (i, v) in sig.iter().enumerate() {
            mix[start + i] += amp * v;
        }
        events.push(EventAnnotation {
            class_id: class,
            onset_s: start as f64 / rate,
            offset_s: (start + len) as f64 / rate,
        });
    }
    events.sort_by(|a, b| a.onset_s.total_cmp(&b.onset_s).then(a.class_id.cmp(&b.class_id)));

    if domain == ClipDomain::Real && domain_gap > 0.0 {
        // Random level, a short smearing response, then a pink background.
        let gain_db = domain_gap * rng.gen_range(-6.0..6.0);
        let gain = 10f64.powf(gain_db / 20.0);
        let smeared = smear(&mix, rate, &mut rng);
        let m = 0.7 * domain_gap;
        for (x, s) in mix.iter_mut().zip(&smeared) {
            *x = gain * ((1.0 - m) * *x + m * s);
        }
        let snr_db = 20.0 * (1.0 / domain_gap - 1.0);
        let noise_rms = REFERENCE_RMS * 10f64.powf(-snr_db / 20.0);
        let noise = pink_noise(n, &mut rng);
        for (x, p) in mix.iter_mut().zip(&noise) {
            *x += noise_rms * p;
        }
    }
    let peak = mix.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
    if peak > 0.99 {
        mix.iter_mut().for_each(|x| *x *= 0.99 / peak);
    }
    GeneratedClip {
        audio: AudioClip {
            samples: mix.into_iter().map(|x| x as f32).collect(),
            sample_rate_hz: SOURCE_RATE_HZ,
        },
        events,
    }
}

/// Peak-normalized event waveform with 10 ms linear fades.
pub fn render_event(class: usize, len: usize, rate: f64, rng: &mut impl Rng) -> Vec<f64> {
    let t = |i: usize| i as f64 / rate;
    let dur = len as f64 / rate;
    let mut x: Vec<f64> = match class {
        0 => {
            let f = log_uniform(rng, 300.0, 3000.0);
            (0..len).map(|i| (2.0 * PI * f * t(i)).sin()).collect()
        }
        1 => {
            let f0 = rng.gen_range(300.0..1000.0);
            let f1 = rng.gen_range(2000.0..6000.0);
            let k = (f1 - f0) / dur;
            (0..len).map(|i| (2.0 * PI * (f0 * t(i) + 0.5 * k * t(i) * t(i))).sin()).collect()
        }
        2 => (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        3 => {
            let fc = log_uniform(rng, 400.0, 2500.0);
            let fm = rng.gen_range(4.0..12.0);
            (0..len)
                .map(|i| (1.0 + 0.8 * (2.0 * PI * fm * t(i)).sin()) * (2.0 * PI * fc * t(i)).sin())
                .collect()
        }
        4 => {
            let period = 1.0 / rng.gen_range(6.0..20.0);
            let fc = rng.gen_range(2000.0..5000.0);
            let tau = period / 4.0;
            (0..len)
                .map(|i| {
                    let local = t(i) % period;
                    (0.95 * (-local / tau).exp() + 0.05) * (2.0 * PI * fc * local).sin()
                })
                .collect()
        }
        5 => {
            let f0 = rng.gen_range(150.0..400.0);
            (0..len)
                .map(|i| (1..=8).map(|h| (2.0 * PI * f0 * h as f64 * t(i)).sin() / h as f64).sum())
                .collect()
        }
        6 => {
            let fc = log_uniform(rng, 800.0, 3000.0);
            let rate_hz = rng.gen_range(3.0..8.0);
            let dev = fc * rng.gen_range(0.1..0.3);
            (0..len)
                .map(|i| {
                    let phase = 2.0 * PI * fc * t(i) - dev / rate_hz * (2.0 * PI * rate_hz * t(i)).cos();
                    phase.sin()
                })
                .collect()
        }
        7 => {
            let fc = rng.gen_range(1000.0..5000.0);
            let white: Vec<f64> = (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect();
            bandpass(&white, fc, 5.0, rate)
        }
        8 => {
            let seg = rng.gen_range(0.06..0.12);
            let (hi, lo) = (rng.gen_range(5000.0..7000.0), rng.gen_range(2500.0..3500.0));
            let k = (lo - hi) / seg;
            (0..len)
                .map(|i| {
                    let local = t(i) % seg;
                    (2.0 * PI * (hi * local + 0.5 * k * local * local)).sin()
                })
                .collect()
        }
        _ => {
            let f = rng.gen_range(100.0..160.0);
            (0..len)
                .map(|i| {
                    let s = t(i);
                    (2.0 * PI * f * s).sin() + 0.5 * (2.0 * PI * (f + 3.0) * s).sin() + 0.4 * (4.0 * PI * f * s).sin()
                })
                .collect()
        }
    };
    let peak = x.iter().fold(0.0f64, |a, &b| a.max(b.abs())).max(1e-12);
    let fade = ((FADE_S * rate) as usize).min(len / 2).max(1);
    for (i, v) in x.iter_mut().enumerate() {
        let edge = i.min(len - 1 - i);
        let g = if edge < fade { (edge + 1) as f64 / fade as f64 } else { 1.0 };
        *v *= g / peak;
    }
    x
}

fn log_uniform(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    (rng.gen_range(lo.ln()..hi.ln())).exp()
}

/// Two-pole resonator, normalized afterwards by the caller.
fn bandpass(x: &[f64], fc: f64, q: f64, rate: f64) -> Vec<f64> {
    let w0 = 2.0 * PI * fc / rate;
    let alpha = w0.sin() / (2.0 * q);
    let (b0, b2) = (alpha, -alpha);
    let (a0, a1, a2) = (1.0 + alpha, -2.0 * w0.cos(), 1.0 - alpha);
    let mut y = vec![0.0; x.len()];
    for i in 0..x.len() {
        let x2 = if i >= 2 { x[i - 2] } else { 0.0 };
        let y1 = if i >= 1 { y[i - 1] } else { 0.0 };
        let y2 = if i >= 2 { y[i - 2] } else { 0.0 };
        y[i] = (b0 * x[i] + b2 * x2 - a1 * y1 - a2 * y2) / a0;
    }
    y
}

/// Convolution with a random, exponentially decaying 4 ms response.
fn smear(x: &[f64], rate: f64, rng: &mut impl Rng) -> Vec<f64> {
    let len = (0.004 * rate) as usize;
    let mut h: Vec<f64> = (0..len)
        .map(|i| rng.gen_range(-1.0..1.0) * (-(i as f64) / (0.3 * len as f64)).exp())
        .collect();
    h[0] = 1.0;
    let norm = h.iter().map(|v| v * v).sum::<f64>().sqrt();
    h.iter_mut().for_each(|v| *v /= norm);
    let mut y = vec![0.0; x.len()];
    for (i, &xi) in x.iter().enumerate() {
        if xi == 0.0 {
            continue;
        }
        for (j, &hj) in h.iter().enumerate() {
            if i + j < y.len() {
                y[i + j] += xi * hj;
            }
        }
    }
    y
}

/// Unit-RMS pink noise (Kellet's three-pole approximation).
fn pink_noise(n: usize, rng: &mut impl Rng) -> Vec<f64> {
    let (mut b0, mut b1, mut b2) = (0.0, 0.0, 0.0);
    let mut out: Vec<f64> = (0..n)
        .map(|_| {
            let w: f64 = rng.gen_range(-1.0..1.0);
            b0 = 0.99765 * b0 + w * 0.0990460;
            b1 = 0.96300 * b1 + w * 0.2965164;
            b2 = 0.57000 * b2 + w * 1.0526913;
            b0 + b1 + b2 + w * 0.1848
        })
        .collect();
    let rms = (out.iter().map(|v| v * v).sum::<f64>() / n.max(1) as f64).sqrt().max(1e-12);
    out.iter_mut().for_each(|v| *v /= rms);
    out
}

/// Split plan: (id prefix, domain, kind, count).
fn plan(counts: &SplitCounts) -> Vec<(char, ClipDomain, LabelKind, usize)> {
    vec![
        ('S', ClipDomain::Synthetic, LabelKind::Strong, counts.n_s),
        ('W', ClipDomain::Real, LabelKind::Weak, counts.n_w),
        ('U', ClipDomain::Real, LabelKind::Unlabeled, counts.n_u),
        ('V', ClipDomain::Real, LabelKind::Strong, counts.n_val),
    ]
}

/// Writes a corpus under `out`: audio, manifest, metadata and hidden truth.
pub fn generate_toy_corpus(out: &Path, cfg: &GenerateConfig) -> Result<CorpusInfo> {
    cfg.validate()?;
    fs::create_dir_all(out.join("audio"))?;
    let mut jobs = Vec::new();
    let mut index = 0usize;
    for (prefix, domain, kind, count) in plan(&cfg.counts) {
        for j in 0..count {
            jobs.push((format!("{prefix}{j:04}"), domain, kind, clip_seed(cfg.seed, index)));
            index += 1;
        }
    }
    let rendered: Vec<Result<(LabeledClip, HiddenTruth)>> = jobs
        .par_iter()
        .map(|(id, domain, kind, seed)| {
            let g = render_clip(*seed, cfg.n_classes, *domain, cfg.domain_gap);
            let wav = format!("audio/{id}.wav");
            write_wav(&out.join(&wav), &g.audio)?;
            let mut weak: Vec<usize> = g.events.iter().map(|e| e.class_id).collect();
            weak.sort_unstable();
            weak.dedup();
            let clip = LabeledClip {
                id: id.clone(),
                wav,
                domain: *domain,
                kind: *kind,
                events: if *kind == LabelKind::Strong { g.events.clone() } else { Vec::new() },
                weak: if *kind == LabelKind::Weak { weak } else { Vec::new() },
            };
            Ok((
                clip,
                HiddenTruth {
                    id: id.clone(),
                    events: g.events,
                },
            ))
        })
        .collect();
    let mut clips = Vec::with_capacity(rendered.len());
    let mut truth = Vec::with_capacity(rendered.len());
    for r in rendered {
        let (c, h) = r?;
        clips.push(c);
        truth.push(h);
    }
    write_jsonl(&out.join(MANIFEST_FILE), &clips)?;
    write_jsonl(&out.join(HIDDEN_FILE), &truth)?;
    let info = CorpusInfo {
        class_names: CLASS_NAMES[..cfg.n_classes].iter().map(|s| s.to_string()).collect(),
        seed: cfg.seed,
        domain_gap: cfg.domain_gap,
        counts: cfg.counts,
        sample_rate_hz: SOURCE_RATE_HZ,
        clip_seconds: CLIP_SECONDS,
    };
    fs::write(out.join(CORPUS_FILE), serde_json::to_string_pretty(&info)?)?;
    Ok(info)
}
