use super::AudioClip;
use crate::error::{Error, Result};

/// Zero crossings of the sinc kernel on each side of its center.
const ZERO_CROSSINGS: f64 = 32.0;
/// Passband edge as a fraction of the output Nyquist frequency.
const ROLLOFF: f64 = 0.94;
const KAISER_BETA: f64 = 9.0;
/// Above this many phases kernels are evaluated per output sample.
const MAX_TABLE_PHASES: usize = 4096;

/// Band-limited downsampling with a Kaiser-windowed sinc kernel.
///
/// Output length is `round(len * target / source)`; the clip is treated as
/// zero outside its extent. Same-rate input is returned unchanged.
pub fn resample(clip: &AudioClip, target_rate_hz: u32) -> Result<AudioClip> {
    clip.validate()?;
    let src = clip.sample_rate_hz;
    if target_rate_hz == 0 || target_rate_hz > src {
        return Err(Error::UnsupportedRate {
            from: src,
            to: target_rate_hz,
        });
    }
    if target_rate_hz == src {
        return Ok(clip.clone());
    }
    let g = gcd(src as u64, target_rate_hz as u64);
    let step = src as u64 / g; // input samples advanced per `phases` outputs
    let phases = (target_rate_hz as u64 / g) as usize;

    // Cutoff in cycles per input sample.
    let cutoff = 0.5 * ROLLOFF * target_rate_hz as f64 / src as f64;
    let half = (ZERO_CROSSINGS / (2.0 * cutoff)).ceil() as i64;
    let kernel = Kernel { cutoff, half };

    let table: Option<Vec<Vec<f64>>> =
        (phases <= MAX_TABLE_PHASES).then(|| (0..phases).map(|p| kernel.taps(p as f64 / phases as f64)).collect());

    let n_in = clip.samples.len();
    let n_out = (n_in as f64 * target_rate_hz as f64 / src as f64).round() as usize;
    let x = &clip.samples;
    let mut out = Vec::with_capacity(n_out);
    for n in 0..n_out {
        // Input position n * src / target = base + phase / phases.
        let num = n as u64 * step;
        let base = (num / phases as u64) as i64;
        let phase = (num % phases as u64) as usize;
        let owned;
        let taps: &[f64] = match &table {
            Some(t) => &t[phase],
            None => {
                owned = kernel.taps(phase as f64 / phases as f64);
                &owned
            }
        };
        let start = base - half + 1;
        let mut acc = 0.0f64;
        for (j, &h) in taps.iter().enumerate() {
            let idx = start + j as i64;
            if idx >= 0 && (idx as usize) < n_in {
                acc += h * x[idx as usize] as f64;
            }
        }
        out.push(acc as f32);
    }
    AudioClip::new(out, target_rate_hz)
}

struct Kernel {
    cutoff: f64,
    half: i64,
}

impl Kernel {
    /// Taps for input offsets `-half+1 ..= half` relative to `base`, for an
    /// output that sits `frac` input samples past `base`; normalized to unit
    /// DC gain.
    fn taps(&self, frac: f64) -> Vec<f64> {
        let span = self.half as f64;
        let mut taps: Vec<f64> = (-self.half + 1..=self.half)
            .map(|k| {
                let x = k as f64 - frac;
                let u = x / span;
                if u.abs() >= 1.0 {
                    return 0.0;
                }
                let w = bessel_i0(KAISER_BETA * (1.0 - u * u).sqrt()) / bessel_i0(KAISER_BETA);
                2.0 * self.cutoff * sinc(2.0 * self.cutoff * x) * w
            })
            .collect();
        let sum: f64 = taps.iter().sum();
        taps.iter_mut().for_each(|t| *t /= sum);
        taps
    }
}

fn sinc(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        let px = std::f64::consts::PI * x;
        px.sin() / px
    }
}

fn bessel_i0(x: f64) -> f64 {
    let mut sum = 1.0;
    let mut term = 1.0;
    let q = x * x / 4.0;
    for k in 1..64 {
        term *= q / (k * k) as f64;
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}
