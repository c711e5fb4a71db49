use std::fs;
use std::path::Path;

use sedtriadv::audio::{read_wav, FrontendConfig};
use sedtriadv::corpus::{
    generate_toy_corpus, load_hidden_truth, load_manifest, load_split, ClipDomain, GenerateConfig, LabelKind, Split,
    SplitCounts,
};

fn small(seed: u64, gap: f64) -> GenerateConfig {
    GenerateConfig {
        seed,
        n_classes: 4,
        counts: SplitCounts {
            n_s: 6,
            n_w: 5,
            n_u: 4,
            n_val: 3,
        },
        domain_gap: gap,
    }
}

fn file_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn round_trip_and_split_sizes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(5, 0.8);
    let info = generate_toy_corpus(dir.path(), &cfg).unwrap();
    assert_eq!(info.class_names.len(), 4);
    let m = load_manifest(dir.path()).unwrap();
    assert_eq!(m.clips.len(), 18);
    assert_eq!(m.split(Split::TrainS).len(), 6);
    assert_eq!(m.split(Split::TrainW).len(), 5);
    assert_eq!(m.split(Split::TrainU).len(), 4);
    assert_eq!(m.split(Split::Validation).len(), 3);

    let truth = load_hidden_truth(dir.path()).unwrap();
    for c in &m.clips {
        let hidden = &truth[&c.id];
        match c.kind {
            LabelKind::Strong => assert_eq!(&c.events, hidden),
            LabelKind::Weak => {
                let mut classes: Vec<usize> = hidden.iter().map(|e| e.class_id).collect();
                classes.sort_unstable();
                classes.dedup();
                assert_eq!(c.weak, classes);
            }
            LabelKind::Unlabeled => assert!(c.events.is_empty() && c.weak.is_empty()),
        }
        assert_eq!(c.domain == ClipDomain::Synthetic, c.id.starts_with('S'));
        for e in hidden {
            assert!(0.0 <= e.onset_s && e.onset_s < e.offset_s && e.offset_s <= 10.0);
        }
        let audio = read_wav(&m.wav_path(c)).unwrap();
        assert_eq!(audio.sample_rate_hz, 44100);
        assert_eq!(audio.samples.len(), 441_000);
    }

    // Manifest re-serializes to identical records.
    let text = fs::read_to_string(dir.path().join("manifest.jsonl")).unwrap();
    for (line, clip) in text.lines().zip(&m.clips) {
        let back: sedtriadv::corpus::LabeledClip = serde_json::from_str(line).unwrap();
        assert_eq!(&back, clip);
        assert_eq!(serde_json::to_string(clip).unwrap(), line);
    }
}

#[test]
fn regeneration_is_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    generate_toy_corpus(a.path(), &small(9, 0.8)).unwrap();
    generate_toy_corpus(b.path(), &small(9, 0.8)).unwrap();
    assert_eq!(file_bytes(a.path()), file_bytes(b.path()));
    let c = tempfile::tempdir().unwrap();
    generate_toy_corpus(c.path(), &small(10, 0.8)).unwrap();
    assert_ne!(file_bytes(a.path()), file_bytes(c.path()));
}

#[test]
fn empty_unlabeled_split_is_valid() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small(2, 0.5);
    cfg.counts.n_u = 0;
    generate_toy_corpus(dir.path(), &cfg).unwrap();
    let m = load_manifest(dir.path()).unwrap();
    assert!(m.split(Split::TrainU).is_empty());
}

/// Intervals where a 4 ms RMS envelope exceeds a small threshold.
fn active_runs(x: &[f32], rate: f64) -> Vec<(f64, f64)> {
    let win = (0.004 * rate) as usize;
    let mut prefix = vec![0.0f64; x.len() + 1];
    for (i, v) in x.iter().enumerate() {
        prefix[i + 1] = prefix[i] + (*v as f64) * (*v as f64);
    }
    let on: Vec<bool> = (0..x.len())
        .map(|i| {
            let lo = i.saturating_sub(win / 2);
            let hi = (i + win / 2).min(x.len());
            ((prefix[hi] - prefix[lo]) / (hi - lo) as f64).sqrt() > 2e-3
        })
        .collect();
    let mut runs = Vec::new();
    let mut start = None;
    for (i, &a) in on.iter().chain(std::iter::once(&false)).enumerate() {
        match (a, start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                let (a, b) = (s as f64 / rate, i as f64 / rate);
                // Overlapping events can cancel for a moment; bridge dropouts under 5 ms.
                match runs.last_mut() {
                    Some((_, end)) if a - *end < 0.005 => *end = b,
                    _ => runs.push((a, b)),
                }
                start = None;
            }
            _ => {}
        }
    }
    runs
}

#[test]
fn annotations_match_energy_envelope() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small(21, 0.8);
    cfg.n_classes = 10;
    cfg.counts = SplitCounts {
        n_s: 30,
        n_w: 0,
        n_u: 0,
        n_val: 0,
    };
    generate_toy_corpus(dir.path(), &cfg).unwrap();
    let m = load_manifest(dir.path()).unwrap();
    for clip in &m.clips {
        let audio = read_wav(&m.wav_path(clip)).unwrap();
        // Merge annotated intervals that touch within 20 ms.
        let mut iv: Vec<(f64, f64)> = clip.events.iter().map(|e| (e.onset_s, e.offset_s)).collect();
        iv.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut merged: Vec<(f64, f64)> = Vec::new();
        for (a, b) in iv {
            match merged.last_mut() {
                Some(last) if a <= last.1 + 0.02 => last.1 = last.1.max(b),
                _ => merged.push((a, b)),
            }
        }
        let runs = active_runs(&audio.samples, 44100.0);
        assert_eq!(runs.len(), merged.len(), "{}: runs {runs:?} vs events {merged:?}", clip.id);
        for (r, e) in runs.iter().zip(&merged) {
            assert!((r.0 - e.0).abs() <= 0.010, "{}: onset {} vs {}", clip.id, r.0, e.0);
            assert!((r.1 - e.1).abs() <= 0.010, "{}: offset {} vs {}", clip.id, r.1, e.1);
        }
    }
}

#[test]
fn domains_are_linearly_separable_at_full_gap() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small(3, 1.0);
    cfg.counts = SplitCounts {
        n_s: 30,
        n_w: 30,
        n_u: 0,
        n_val: 0,
    };
    generate_toy_corpus(dir.path(), &cfg).unwrap();
    let m = load_manifest(dir.path()).unwrap();
    let fe = FrontendConfig {
        hop_len: 1380,
        n_frames: 160,
        n_mels: 32,
        ..Default::default()
    };
    // Feature: mean log-mel energy per bin; label: 1 for synthetic.
    let mut data: Vec<(Vec<f64>, f64)> = Vec::new();
    for (split, y) in [(Split::TrainS, 1.0), (Split::TrainW, 0.0)] {
        for (_, spec) in load_split(&m, split, &fe).unwrap() {
            let mut mean = vec![0.0; spec.n_mels];
            for t in 0..spec.n_frames {
                for (b, v) in spec.frame(t).iter().enumerate() {
                    mean[b] += *v as f64 / spec.n_frames as f64;
                }
            }
            data.push((mean, y));
        }
    }
    // Interleave so both halves contain both domains.
    let (train, test): (Vec<_>, Vec<_>) = data.iter().enumerate().partition(|(i, _)| i % 2 == 0);
    let dim = data[0].0.len();
    let mu: Vec<f64> = (0..dim).map(|d| train.iter().map(|(_, s)| s.0[d]).sum::<f64>() / train.len() as f64).collect();
    let sd: Vec<f64> = (0..dim)
        .map(|d| {
            (train.iter().map(|(_, s)| (s.0[d] - mu[d]).powi(2)).sum::<f64>() / train.len() as f64)
                .sqrt()
                .max(1e-6)
        })
        .collect();
    let z = |x: &[f64]| x.iter().enumerate().map(|(d, v)| (v - mu[d]) / sd[d]).collect::<Vec<f64>>();
    let mut w = vec![0.0; dim + 1];
    for _ in 0..500 {
        let mut g = vec![0.0; dim + 1];
        for (_, (x, y)) in &train {
            let zx = z(x);
            let s = w[dim] + zx.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>();
            let p = 1.0 / (1.0 + (-s).exp());
            for d in 0..dim {
                g[d] += (p - y) * zx[d];
            }
            g[dim] += p - y;
        }
        for d in 0..=dim {
            w[d] -= 0.1 * g[d] / train.len() as f64;
        }
    }
    let correct = test
        .iter()
        .filter(|(_, (x, y))| {
            let zx = z(x);
            let s = w[dim] + zx.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>();
            (s > 0.0) == (*y == 1.0)
        })
        .count();
    let acc = correct as f64 / test.len() as f64;
    assert!(acc > 0.9, "probe accuracy {acc}");
}

