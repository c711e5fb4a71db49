//! Clip records, the on-disk manifest, and the toy corpus generator.
//!
//! Layout of a corpus directory:
//!
//! ```text
//! manifest.jsonl       one LabeledClip per line
//! corpus.json          class names, seed, gap, counts
//! hidden_truth.jsonl   full annotations of every clip (never read by training)
//! audio/<id>.wav       PCM16 mono, 44.1 kHz
//! cache/<key>/<id>.lmsp
//! ```

mod generate;

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use generate::{
    clip_seed, generate_toy_corpus, render_clip, render_event, splitmix64, GenerateConfig, GeneratedClip, SplitCounts,
    CLASS_NAMES, MAX_CLASSES,
};

use crate::audio::{log_mel, read_lmsp, read_wav, write_lmsp, FrontendConfig, LogMelSpectrogram};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const CORPUS_FILE: &str = "corpus.json";
pub const HIDDEN_FILE: &str = "hidden_truth.jsonl";
pub const SOURCE_RATE_HZ: u32 = 44100;
pub const CLIP_SECONDS: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EventAnnotation {
    #[serde(rename = "class")]
    pub class_id: usize,
    #[serde(rename = "onset")]
    pub onset_s: f64,
    #[serde(rename = "offset")]
    pub offset_s: f64,
}

impl EventAnnotation {
    pub fn validate(&self, n_classes: usize, clip_s: f64) -> Result<()> {
        if self.class_id >= n_classes {
            return Err(Error::Label(format!("class {} out of range 0..{n_classes}", self.class_id)));
        }
        if !(self.onset_s >= 0.0 && self.onset_s < self.offset_s && self.offset_s <= clip_s + 1e-9) {
            return Err(Error::Label(format!(
                "event [{}, {}] outside 0..{clip_s} s or empty",
                self.onset_s, self.offset_s
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClipDomain {
    Synthetic,
    Real,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelKind {
    Strong,
    Weak,
    Unlabeled,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    TrainS,
    TrainW,
    TrainU,
    Validation,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::TrainS, Split::TrainW, Split::TrainU, Split::Validation];

    pub fn of(domain: ClipDomain, kind: LabelKind) -> Option<Split> {
        match (domain, kind) {
            (ClipDomain::Synthetic, LabelKind::Strong) => Some(Split::TrainS),
            (ClipDomain::Real, LabelKind::Weak) => Some(Split::TrainW),
            (ClipDomain::Real, LabelKind::Unlabeled) => Some(Split::TrainU),
            (ClipDomain::Real, LabelKind::Strong) => Some(Split::Validation),
            _ => None,
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train_s" | "s" => Ok(Split::TrainS),
            "train_w" | "w" => Ok(Split::TrainW),
            "train_u" | "u" => Ok(Split::TrainU),
            "validation" | "val" => Ok(Split::Validation),
            _ => Err(Error::Config(format!("unknown split '{s}'"))),
        }
    }
}

/// One manifest line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabeledClip {
    pub id: String,
    /// Relative to the corpus root.
    pub wav: String,
    pub domain: ClipDomain,
    pub kind: LabelKind,
    #[serde(default)]
    pub events: Vec<EventAnnotation>,
    #[serde(default)]
    pub weak: Vec<usize>,
}

impl LabeledClip {
    pub fn split(&self) -> Option<Split> {
        Split::of(self.domain, self.kind)
    }

    fn validate(&self, n_classes: usize) -> Result<()> {
        match self.kind {
            LabelKind::Strong => {
                if !self.weak.is_empty() {
                    return Err(Error::Label("strong clip with a weak label".into()));
                }
                for e in &self.events {
                    e.validate(n_classes, CLIP_SECONDS)?;
                }
            }
            LabelKind::Weak => {
                if !self.events.is_empty() {
                    return Err(Error::Label("weak clip with strong events".into()));
                }
                if let Some(&c) = self.weak.iter().find(|&&c| c >= n_classes) {
                    return Err(Error::Label(format!("weak class {c} out of range")));
                }
            }
            LabelKind::Unlabeled => {
                if !self.events.is_empty() || !self.weak.is_empty() {
                    return Err(Error::Label("unlabeled clip carries labels".into()));
                }
            }
        }
        if self.split().is_none() {
            return Err(Error::Label(format!("no split for {:?} {:?} clip", self.domain, self.kind)));
        }
        Ok(())
    }

    /// Weak label as a 0/1 vector.
    pub fn weak_vector(&self, n_classes: usize) -> Vec<f32> {
        let mut v = vec![0.0; n_classes];
        for &c in &self.weak {
            v[c] = 1.0;
        }
        v
    }
}

/// `corpus.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusInfo {
    pub class_names: Vec<String>,
    pub seed: u64,
    pub domain_gap: f64,
    pub counts: SplitCounts,
    pub sample_rate_hz: u32,
    pub clip_seconds: f64,
}

/// A line of `hidden_truth.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HiddenTruth {
    pub id: String,
    pub events: Vec<EventAnnotation>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusManifest {
    pub root: PathBuf,
    pub clips: Vec<LabeledClip>,
    pub class_names: Vec<String>,
}

impl CorpusManifest {
    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    /// Clips of a split in manifest order.
    pub fn split(&self, split: Split) -> Vec<&LabeledClip> {
        self.clips.iter().filter(|c| c.split() == Some(split)).collect()
    }

    pub fn wav_path(&self, clip: &LabeledClip) -> PathBuf {
        self.root.join(&clip.wav)
    }
}

pub(crate) fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<(usize, T)>> {
    let file = fs::File::open(path)?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(&line).map_err(|e| Error::Manifest {
            path: path.to_path_buf(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        out.push((i + 1, item));
    }
    Ok(out)
}

/// Loads `manifest.jsonl` and `corpus.json` from a corpus directory (or a
/// manifest path inside one).
pub fn load_manifest(path: &Path) -> Result<CorpusManifest> {
    let (root, manifest) = if path.is_dir() {
        (path.to_path_buf(), path.join(MANIFEST_FILE))
    } else {
        (path.parent().unwrap_or(Path::new(".")).to_path_buf(), path.to_path_buf())
    };
    let info: CorpusInfo = serde_json::from_str(&fs::read_to_string(root.join(CORPUS_FILE))?)?;
    let k = info.class_names.len();
    let mut seen = std::collections::HashSet::new();
    let mut clips = Vec::new();
    for (line, clip) in read_jsonl::<LabeledClip>(&manifest)? {
        let err = |msg: String| Error::Manifest {
            path: manifest.clone(),
            line,
            msg,
        };
        clip.validate(k).map_err(|e| err(e.to_string()))?;
        if !seen.insert(clip.id.clone()) {
            return Err(err(format!("duplicate id {}", clip.id)));
        }
        clips.push(clip);
    }
    Ok(CorpusManifest {
        root,
        clips,
        class_names: info.class_names,
    })
}

pub fn load_corpus_info(root: &Path) -> Result<CorpusInfo> {
    Ok(serde_json::from_str(&fs::read_to_string(root.join(CORPUS_FILE))?)?)
}

/// Full annotations for every generated clip, keyed by id.
pub fn load_hidden_truth(root: &Path) -> Result<std::collections::HashMap<String, Vec<EventAnnotation>>> {
    Ok(read_jsonl::<HiddenTruth>(&root.join(HIDDEN_FILE))?
        .into_iter()
        .map(|(_, h)| (h.id, h.events))
        .collect())
}

fn cache_path(manifest: &CorpusManifest, clip: &LabeledClip, cfg: &FrontendConfig) -> PathBuf {
    manifest
        .root
        .join("cache")
        .join(cfg.cache_key())
        .join(format!("{}.lmsp", clip.id))
}

/// Log-mel features of one clip, read from or written to the cache.
pub fn clip_features(manifest: &CorpusManifest, clip: &LabeledClip, cfg: &FrontendConfig) -> Result<LogMelSpectrogram> {
    let path = cache_path(manifest, clip, cfg);
    if let Ok(bytes) = fs::read(&path) {
        if let Ok(spec) = read_lmsp(&mut bytes.as_slice(), cfg.frame_hop_s()) {
            if spec.n_frames == cfg.n_frames && spec.n_mels == cfg.n_mels {
                return Ok(spec);
            }
        }
    }
    let spec = log_mel(&read_wav(&manifest.wav_path(clip))?, cfg)?;
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    // Write then rename so concurrent readers never see a partial file.
    let tmp = path.with_extension(format!("lmsp.{}.tmp", std::process::id()));
    let mut buf = Vec::new();
    write_lmsp(&mut buf, &spec)?;
    fs::write(&tmp, buf)?;
    fs::rename(&tmp, &path)?;
    Ok(spec)
}

/// Streams `(clip, features)` for a split in manifest order.
pub fn iterate_split<'a>(
    manifest: &'a CorpusManifest,
    split: Split,
    cfg: &'a FrontendConfig,
) -> impl Iterator<Item = Result<(LabeledClip, LogMelSpectrogram)>> + 'a {
    manifest
        .clips
        .iter()
        .filter(move |c| c.split() == Some(split))
        .map(move |c| Ok((c.clone(), clip_features(manifest, c, cfg)?)))
}

/// Features for a whole split, computed in parallel; order matches the
/// manifest.
pub fn load_split(
    manifest: &CorpusManifest,
    split: Split,
    cfg: &FrontendConfig,
) -> Result<Vec<(LabeledClip, LogMelSpectrogram)>> {
    manifest
        .split(split)
        .par_iter()
        .map(|c| Ok(((*c).clone(), clip_features(manifest, c, cfg)?)))
        .collect()
}

/// Frame targets `[n_frames, n_classes]`: frame `t` spans
/// `[t*hop, (t+1)*hop)` and is active when an event covers its midpoint.
pub fn frame_labels(events: &[EventAnnotation], n_frames: usize, n_classes: usize, hop_s: f64) -> Vec<f32> {
    let mut y = vec![0.0; n_frames * n_classes];
    for e in events {
        for t in 0..n_frames {
            let mid = (t as f64 + 0.5) * hop_s;
            if mid >= e.onset_s && mid < e.offset_s {
                y[t * n_classes + e.class_id] = 1.0;
            }
        }
    }
    y
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_mapping() {
        assert_eq!(Split::of(ClipDomain::Synthetic, LabelKind::Strong), Some(Split::TrainS));
        assert_eq!(Split::of(ClipDomain::Real, LabelKind::Strong), Some(Split::Validation));
        assert_eq!(Split::of(ClipDomain::Synthetic, LabelKind::Weak), None);
    }

    #[test]
    fn frame_labels_use_midpoints() {
        let ev = [EventAnnotation {
            class_id: 1,
            onset_s: 0.25,
            offset_s: 0.5,
        }];
        // hop 0.1: midpoints 0.05, 0.15, ..., active for 0.25, 0.35, 0.45
        let y = frame_labels(&ev, 8, 2, 0.1);
        let active: Vec<usize> = (0..8).filter(|&t| y[t * 2 + 1] == 1.0).collect();
        assert_eq!(active, vec![2, 3, 4]);
        assert!((0..8).all(|t| y[t * 2] == 0.0));
    }

    #[test]
    fn manifest_errors_carry_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let info = CorpusInfo {
            class_names: vec!["a".into(), "b".into()],
            seed: 0,
            domain_gap: 0.5,
            counts: SplitCounts::default(),
            sample_rate_hz: SOURCE_RATE_HZ,
            clip_seconds: CLIP_SECONDS,
        };
        fs::write(dir.path().join(CORPUS_FILE), serde_json::to_string(&info).unwrap()).unwrap();
        let good = r#"{"id":"W0000","wav":"audio/W0000.wav","domain":"real","kind":"weak","events":[],"weak":[1]}"#;
        let bad = r#"{"id":"W0001","wav":"audio/W0001.wav","domain":"real","kind":"weak","weak":[7]}"#;
        fs::write(dir.path().join(MANIFEST_FILE), format!("{good}\n{bad}\n")).unwrap();
        match load_manifest(dir.path()) {
            Err(Error::Manifest { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        fs::write(dir.path().join(MANIFEST_FILE), format!("{good}\n{{not json\n")).unwrap();
        assert!(matches!(load_manifest(dir.path()), Err(Error::Manifest { line: 2, .. })));
        fs::write(dir.path().join(MANIFEST_FILE), format!("{good}\n{good}\n")).unwrap();
        assert!(matches!(load_manifest(dir.path()), Err(Error::Manifest { line: 2, .. })));
    }
}
