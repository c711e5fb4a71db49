//! Two-phase training schedule.
//!
//! Phase 1 trains the extractor, both labelers, the target classifier and
//! (in adversarial modes) the domain classifier jointly. The labelers then
//! pseudo-label the real-domain clips by agreement, and phase 2 trains the
//! extractor, target classifier and domain classifier on labeled plus
//! pseudo-labeled data. Modes without tri-training run the phase 1 objective
//! with only the target classifier for the same total number of steps.
//!
//! Run directory:
//!
//! ```text
//! config.json   RunRecord
//! phase1.ckpt   parameters after phase 1
//! masks.bin     pseudo-labels (tri-training modes only)
//! final.ckpt
//! log.jsonl     one StepLog per step
//! ```

use std::fmt;
use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::audio::{FrontendConfig, LogMelSpectrogram, NormStats};
use crate::autodiff::{load_checkpoint, restore_into, save_checkpoint, Adam, AdamConfig, Graph, ParamId, ParamStore};
use crate::autodiff::{Scalar, Tensor, Var};
use crate::config::RunConfig;
use crate::corpus::{frame_labels, load_split, splitmix64, CorpusManifest, Split};
use crate::error::{shape_err, Error, Result};
use crate::evaluator::{DecodeConfig, EventMatchConfig};
use crate::losses::{classification_loss, domain_loss, orthogonality_loss, BatchTargets, DomainLabel, LabelTensor};
use crate::model::{AdvMode, FramePrediction, Head, ModelConfig, SedModel};

pub const CONFIG_FILE: &str = "config.json";
pub const PHASE1_CKPT: &str = "phase1.ckpt";
pub const MASKS_FILE: &str = "masks.bin";
pub const FINAL_CKPT: &str = "final.ckpt";
pub const LOG_FILE: &str = "log.jsonl";

/// The six ablation settings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    Baseline,
    AdvWhole,
    AdvTime,
    Tri,
    AdvWholeTri,
    AdvTimeTri,
}

impl TrainMode {
    pub const ALL: [TrainMode; 6] = [
        TrainMode::Baseline,
        TrainMode::AdvWhole,
        TrainMode::AdvTime,
        TrainMode::Tri,
        TrainMode::AdvWholeTri,
        TrainMode::AdvTimeTri,
    ];

    pub fn from_parts(adv_mode: AdvMode, tri_training: bool) -> Self {
        match (adv_mode, tri_training) {
            (AdvMode::None, false) => TrainMode::Baseline,
            (AdvMode::Whole, false) => TrainMode::AdvWhole,
            (AdvMode::Time, false) => TrainMode::AdvTime,
            (AdvMode::None, true) => TrainMode::Tri,
            (AdvMode::Whole, true) => TrainMode::AdvWholeTri,
            (AdvMode::Time, true) => TrainMode::AdvTimeTri,
        }
    }

    pub fn adv_mode(self) -> AdvMode {
        match self {
            TrainMode::Baseline | TrainMode::Tri => AdvMode::None,
            TrainMode::AdvWhole | TrainMode::AdvWholeTri => AdvMode::Whole,
            TrainMode::AdvTime | TrainMode::AdvTimeTri => AdvMode::Time,
        }
    }

    pub fn tri_training(self) -> bool {
        matches!(self, TrainMode::Tri | TrainMode::AdvWholeTri | TrainMode::AdvTimeTri)
    }

    pub fn name(self) -> &'static str {
        match self {
            TrainMode::Baseline => "baseline",
            TrainMode::AdvWhole => "adv_whole",
            TrainMode::AdvTime => "adv_time",
            TrainMode::Tri => "tri",
            TrainMode::AdvWholeTri => "adv_whole_tri",
            TrainMode::AdvTimeTri => "adv_time_tri",
        }
    }

    /// Heads the model carries in this mode.
    pub fn heads(self) -> &'static [Head] {
        if self.tri_training() {
            &[Head::F1, Head::F2, Head::Ft]
        } else {
            &[Head::Ft]
        }
    }
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TrainMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown mode '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    /// Gradient reversal coefficient; overrides the model's.
    pub alpha: f64,
    /// Weight of the labeler orthogonality term.
    pub lambda: f64,
    /// Agreement threshold for pseudo-labels.
    pub agree_threshold: f64,
    pub iters_phase1: usize,
    pub iters_phase2: usize,
    pub seed: u64,
    pub adv_mode: AdvMode,
    pub tri_training: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            lr: 1e-3,
            alpha: 1.0,
            lambda: 1.0,
            agree_threshold: 0.5,
            iters_phase1: 2000,
            iters_phase2: 2000,
            seed: 0,
            adv_mode: AdvMode::None,
            tri_training: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config("lr must be positive".into()));
        }
        if !(self.alpha >= 0.0) || !(self.lambda >= 0.0) {
            return Err(Error::Config("alpha and lambda must be >= 0".into()));
        }
        if !(self.agree_threshold > 0.0 && self.agree_threshold < 1.0) {
            return Err(Error::Config("agree_threshold must be in (0, 1)".into()));
        }
        Ok(())
    }

    pub fn mode(&self) -> TrainMode {
        TrainMode::from_parts(self.adv_mode, self.tri_training)
    }

    pub fn with_mode(mut self, mode: TrainMode) -> Self {
        self.adv_mode = mode.adv_mode();
        self.tri_training = mode.tri_training();
        self
    }

    /// Model configuration with the adversarial settings of this run applied.
    pub fn effective_model(&self, model: &ModelConfig) -> ModelConfig {
        ModelConfig {
            adv_mode: self.adv_mode,
            alpha: self.alpha,
            ..model.clone()
        }
    }
}

// ---- pseudo-labels ---------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum LabelState {
    Neg = 0,
    Pos = 1,
    Ignore = 2,
}

impl LabelState {
    fn from_byte(b: u8) -> Result<Self> {
        match b {
            0 => Ok(LabelState::Neg),
            1 => Ok(LabelState::Pos),
            2 => Ok(LabelState::Ignore),
            _ => Err(Error::Label(format!("invalid pseudo-label byte {b}"))),
        }
    }
}

/// POS when both probabilities exceed `tau`, NEG when both fall below
/// `1 - tau`, IGNORE otherwise.
pub fn agree(p1: f32, p2: f32, tau: f64) -> LabelState {
    let (p1, p2) = (p1 as f64, p2 as f64);
    if p1 > tau && p2 > tau {
        LabelState::Pos
    } else if p1 < 1.0 - tau && p2 < 1.0 - tau {
        LabelState::Neg
    } else {
        LabelState::Ignore
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabelMask {
    pub n_frames: usize,
    pub n_classes: usize,
    pub clip_state: Vec<LabelState>,
    /// Row-major `[n_frames, n_classes]`.
    pub frame_state: Vec<LabelState>,
}

impl PseudoLabelMask {
    pub fn frame(&self, t: usize, k: usize) -> LabelState {
        self.frame_state[t * self.n_classes + k]
    }

    /// Targets with IGNORE entries masked out.
    pub fn to_labels(&self) -> Result<LabelTensor> {
        let value = |s: &LabelState| if *s == LabelState::Pos { 1.0 } else { 0.0 };
        let keep = |s: &LabelState| if *s == LabelState::Ignore { 0.0 } else { 1.0 };
        let l = LabelTensor {
            n_frames: self.n_frames,
            n_classes: self.n_classes,
            clip_labels: self.clip_state.iter().map(value).collect(),
            clip_mask: Some(self.clip_state.iter().map(keep).collect()),
            frame_labels: Some(self.frame_state.iter().map(value).collect()),
            frame_mask: Some(self.frame_state.iter().map(keep).collect()),
        };
        l.validate()?;
        Ok(l)
    }
}

/// Pseudo-labels of one clip from the two labelers' predictions.
///
/// Unlabeled clips (`weak = None`) get clip states from the agreement rule
/// on clip probabilities; a NEG clip state forces every frame of that class
/// to NEG and an IGNORE clip state downgrades frame POS to IGNORE. Weakly
/// labeled clips take their clip state from the weak label, and classes
/// absent from it are NEG on every frame.
pub fn pseudo_label(
    p1: &FramePrediction,
    p2: &FramePrediction,
    weak: Option<&[f32]>,
    tau: f64,
) -> Result<PseudoLabelMask> {
    let (t, k) = (p1.n_frames, p1.n_classes);
    if p2.n_frames != t || p2.n_classes != k || weak.is_some_and(|w| w.len() != k) {
        return Err(shape_err("pseudo_label: labeler outputs or weak label disagree in shape"));
    }
    let clip_state: Vec<LabelState> = match weak {
        Some(w) => w
            .iter()
            .map(|&y| if y == 1.0 { LabelState::Pos } else { LabelState::Neg })
            .collect(),
        None => (0..k).map(|c| agree(p1.clip_probs[c], p2.clip_probs[c], tau)).collect(),
    };
    let mut frame_state = Vec::with_capacity(t * k);
    for i in 0..t * k {
        let raw = agree(p1.frame_probs[i], p2.frame_probs[i], tau);
        frame_state.push(match (clip_state[i % k], raw) {
            (LabelState::Neg, _) => LabelState::Neg,
            (LabelState::Ignore, LabelState::Pos) => LabelState::Ignore,
            (_, s) => s,
        });
    }
    Ok(PseudoLabelMask {
        n_frames: t,
        n_classes: k,
        clip_state,
        frame_state,
    })
}

/// Frame-level share of each state per class, in percent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskCoverage {
    pub pos: f64,
    pub neg: f64,
    pub ignore: f64,
}

pub fn mask_coverage<'a>(masks: impl IntoIterator<Item = &'a PseudoLabelMask>, n_classes: usize) -> Vec<MaskCoverage> {
    let mut counts = vec![[0usize; 3]; n_classes];
    for m in masks {
        for (i, s) in m.frame_state.iter().enumerate() {
            counts[i % m.n_classes][*s as usize] += 1;
        }
    }
    counts
        .into_iter()
        .map(|c| {
            let n = (c[0] + c[1] + c[2]).max(1) as f64;
            MaskCoverage {
                neg: 100.0 * c[0] as f64 / n,
                pos: 100.0 * c[1] as f64 / n,
                ignore: 100.0 * c[2] as f64 / n,
            }
        })
        .collect()
}

const MASK_MAGIC: &[u8; 4] = b"PSLM";

/// `"PSLM" | u32 n_clips | u32 T' | u32 K | n_clips × { u16 id_len | id | K clip bytes | T'·K frame bytes }`
pub fn write_masks<W: Write>(mut w: W, masks: &[(String, PseudoLabelMask)]) -> Result<()> {
    let (t, k) = masks.first().map_or((0, 0), |(_, m)| (m.n_frames, m.n_classes));
    w.write_all(MASK_MAGIC)?;
    for v in [masks.len(), t, k] {
        w.write_all(&(v as u32).to_le_bytes())?;
    }
    for (id, m) in masks {
        if m.n_frames != t || m.n_classes != k {
            return Err(shape_err("masks in one file must share a shape"));
        }
        let id_len = u16::try_from(id.len()).map_err(|_| Error::Label(format!("clip id too long: {id}")))?;
        w.write_all(&id_len.to_le_bytes())?;
        w.write_all(id.as_bytes())?;
        let bytes: Vec<u8> = m.clip_state.iter().chain(&m.frame_state).map(|s| *s as u8).collect();
        w.write_all(&bytes)?;
    }
    Ok(())
}

pub fn read_masks<R: Read>(mut r: R) -> Result<Vec<(String, PseudoLabelMask)>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MASK_MAGIC {
        return Err(Error::Label("not a pseudo-label file".into()));
    }
    let mut u32s = [0usize; 3];
    for v in &mut u32s {
        let mut b = [0u8; 4];
        r.read_exact(&mut b)?;
        *v = u32::from_le_bytes(b) as usize;
    }
    let [n, t, k] = u32s;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let mut len = [0u8; 2];
        r.read_exact(&mut len)?;
        let mut id = vec![0u8; u16::from_le_bytes(len) as usize];
        r.read_exact(&mut id)?;
        let id = String::from_utf8(id).map_err(|_| Error::Label("clip id is not utf-8".into()))?;
        let mut states = vec![0u8; k + t * k];
        r.read_exact(&mut states)?;
        let states = states
            .into_iter()
            .map(LabelState::from_byte)
            .collect::<Result<Vec<_>>>()?;
        out.push((
            id,
            PseudoLabelMask {
                n_frames: t,
                n_classes: k,
                clip_state: states[..k].to_vec(),
                frame_state: states[k..].to_vec(),
            },
        ));
    }
    Ok(out)
}

// ---- data ------------------------------------------------------------------

/// One normalized training clip.
#[derive(Debug, Clone)]
pub struct TrainItem {
    pub id: String,
    /// Row-major `[n_frames, n_mels]`.
    pub features: Vec<f32>,
    pub labels: Option<LabelTensor>,
    pub domain: DomainLabel,
}

/// Features and labels of the three training splits.
#[derive(Debug, Clone)]
pub struct TrainingSet {
    pub n_frames: usize,
    pub n_mels: usize,
    /// Frames after time pooling.
    pub out_frames: usize,
    pub n_classes: usize,
    /// Hop of the model's output frames, in seconds.
    pub out_hop_s: f64,
    pub strong: Vec<TrainItem>,
    pub weak: Vec<TrainItem>,
    pub unlabeled: Vec<TrainItem>,
    pub norm: NormStats,
    pub class_names: Vec<String>,
}

impl TrainingSet {
    /// Loads S, W and U, fits normalization statistics on all three, and
    /// renders strong annotations to output-frame targets.
    pub fn from_corpus(manifest: &CorpusManifest, frontend: &FrontendConfig, model: &ModelConfig) -> Result<Self> {
        let k = manifest.n_classes();
        let s = load_split(manifest, Split::TrainS, frontend)?;
        let w = load_split(manifest, Split::TrainW, frontend)?;
        let u = load_split(manifest, Split::TrainU, frontend)?;
        let norm = NormStats::compute(s.iter().chain(&w).chain(&u).map(|(_, spec)| spec))?;
        let out_frames = model.output_frames(frontend.n_frames);
        let out_hop_s = frontend.frame_hop_s() * model.time_pool_factor as f64;
        let items = |clips: Vec<(crate::corpus::LabeledClip, LogMelSpectrogram)>,
                     domain: DomainLabel,
                     label: &dyn Fn(&crate::corpus::LabeledClip) -> Result<Option<LabelTensor>>|
         -> Result<Vec<TrainItem>> {
            clips
                .into_iter()
                .map(|(clip, mut spec)| {
                    norm.apply(&mut spec)?;
                    Ok(TrainItem {
                        labels: label(&clip)?,
                        id: clip.id,
                        features: spec.frames,
                        domain,
                    })
                })
                .collect()
        };
        let strong = items(s, DomainLabel::Synthetic, &|c| {
            let y = frame_labels(&c.events, out_frames, k, out_hop_s);
            LabelTensor::strong(y, out_frames, k).map(Some)
        })?;
        let weak = items(w, DomainLabel::Real, &|c| LabelTensor::weak(c.weak_vector(k), out_frames).map(Some))?;
        let unlabeled = items(u, DomainLabel::Real, &|_| Ok(None))?;
        Ok(Self {
            n_frames: frontend.n_frames,
            n_mels: frontend.n_mels,
            out_frames,
            n_classes: k,
            out_hop_s,
            strong,
            weak,
            unlabeled,
            norm,
            class_names: manifest.class_names.clone(),
        })
    }
}

/// Stacked inputs and targets of a mini-batch.
#[derive(Debug, Clone)]
pub struct Batch<T> {
    /// `[N, T, B]`
    pub input: Tensor<T>,
    pub targets: BatchTargets<T>,
    pub domains: Vec<DomainLabel>,
}

impl<T: Scalar> Batch<T> {
    pub fn new(items: &[&TrainItem], n_frames: usize, n_mels: usize, out_frames: usize, n_classes: usize) -> Result<Self> {
        let per = n_frames * n_mels;
        if let Some(bad) = items.iter().find(|it| it.features.len() != per) {
            return Err(shape_err(format!("clip {} has {} feature values, expected {per}", bad.id, bad.features.len())));
        }
        let input = Tensor::from_fn(&[items.len(), n_frames, n_mels], |j| {
            T::from_f64(items[j / per].features[j % per] as f64)
        });
        let labels: Vec<Option<&LabelTensor>> = items.iter().map(|it| it.labels.as_ref()).collect();
        Ok(Self {
            input,
            targets: BatchTargets::new(&labels, out_frames, n_classes)?,
            domains: items.iter().map(|it| it.domain).collect(),
        })
    }

    fn both_domains(&self) -> bool {
        self.domains.contains(&DomainLabel::Synthetic) && self.domains.contains(&DomainLabel::Real)
    }
}

// ---- optimization ----------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    One,
    Two,
}

/// Graph handles of the loss terms of one step. `total` is
/// `y + lambda * orth + d` over the present terms.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub y: Option<Var>,
    pub orth: Option<Var>,
    pub d: Option<Var>,
    pub total: Var,
}

/// Loss values of one step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLosses {
    pub loss_y: f64,
    pub loss_orth: Option<f64>,
    pub loss_d: Option<f64>,
    pub total: f64,
}

/// One line of `log.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub phase: u8,
    pub loss_y: f64,
    pub loss_d: Option<f64>,
    pub loss_orth: Option<f64>,
    pub lr: f64,
}

/// Model, parameters and optimizer state of one run.
#[derive(Debug, Clone)]
pub struct Trainer<T: Scalar> {
    pub model: SedModel,
    pub store: ParamStore<T>,
    pub adam: Adam<T>,
    pub cfg: TrainConfig,
}

impl<T: Scalar> Trainer<T> {
    /// Builds the model for `cfg.mode()`, seeding initial weights with `cfg.seed`.
    pub fn new(model_cfg: &ModelConfig, n_mels: usize, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let model = SedModel::build(&cfg.effective_model(model_cfg), n_mels, cfg.mode().heads(), cfg.seed, &mut store)?;
        Ok(Self {
            model,
            store,
            adam: Adam::new(AdamConfig {
                lr: cfg.lr,
                ..AdamConfig::default()
            }),
            cfg: cfg.clone(),
        })
    }

    fn tri(&self) -> bool {
        self.cfg.tri_training
    }

    /// Heads whose classification loss enters the objective.
    pub fn loss_heads(&self, phase: Phase) -> &'static [Head] {
        match phase {
            Phase::One if self.tri() => &[Head::F1, Head::F2, Head::Ft],
            _ => &[Head::Ft],
        }
    }

    /// Parameters updated in `phase`; the labelers are frozen in phase 2.
    pub fn trainable(&self, phase: Phase) -> Vec<ParamId> {
        let mut ids = self.model.feature_params();
        for &h in self.loss_heads(phase) {
            ids.extend(self.model.head_params(h));
        }
        ids.extend(self.model.domain_params());
        ids
    }

    /// Records the objective of `phase` on `batch` into `g`.
    pub fn build_loss(&self, g: &mut Graph<T>, batch: &Batch<T>, phase: Phase) -> Result<LossTerms> {
        let x = g.input(batch.input.clone());
        let features = self.model.extract_features(g, &self.store, x)?;
        let mut y: Option<Var> = None;
        for &h in self.loss_heads(phase) {
            let out = self.model.classify_head(g, &self.store, features, h)?;
            if let Some(l) = classification_loss(g, out, &batch.targets)? {
                y = Some(match y {
                    Some(acc) => g.add(acc, l)?,
                    None => l,
                });
            }
        }
        let orth = if phase == Phase::One && self.tri() {
            let (Some(w1), Some(w2)) = (self.model.frame_weight(Head::F1), self.model.frame_weight(Head::F2)) else {
                unreachable!("tri-training models carry both labelers")
            };
            let (a, b) = (g.param(&self.store, w1), g.param(&self.store, w2));
            Some(orthogonality_loss(g, a, b)?)
        } else {
            None
        };
        let d = if !self.model.has_domain() {
            None
        } else if batch.both_domains() {
            let probs = self.model.classify_domain(g, &self.store, features)?;
            Some(domain_loss(g, probs, &batch.domains)?)
        } else {
            log::warn!("batch holds a single domain; domain loss skipped");
            None
        };
        let mut total = y;
        if let Some(o) = orth {
            let scaled = g.scale(o, T::from_f64(self.cfg.lambda))?;
            total = Some(match total {
                Some(t) => g.add(t, scaled)?,
                None => scaled,
            });
        }
        if let Some(d) = d {
            total = Some(match total {
                Some(t) => g.add(t, d)?,
                None => d,
            });
        }
        let total = total.ok_or_else(|| Error::Config("batch contributes no loss term".into()))?;
        Ok(LossTerms { y, orth, d, total })
    }

    fn values(g: &Graph<T>, terms: &LossTerms) -> StepLosses {
        let v = |x: Var| g.value(x).data()[0].to_f64();
        StepLosses {
            loss_y: terms.y.map_or(0.0, v),
            loss_orth: terms.orth.map(v),
            loss_d: terms.d.map(v),
            total: v(terms.total),
        }
    }

    /// Loss values without updating anything.
    pub fn evaluate(&self, batch: &Batch<T>, phase: Phase) -> Result<StepLosses> {
        let mut g = Graph::new();
        let terms = self.build_loss(&mut g, batch, phase)?;
        Ok(Self::values(&g, &terms))
    }

    /// One backward pass and Adam update of the parameters trained in `phase`.
    pub fn step(&mut self, batch: &Batch<T>, phase: Phase) -> Result<StepLosses> {
        self.store.zero_grad();
        let mut g = Graph::new();
        let terms = self.build_loss(&mut g, batch, phase)?;
        let losses = Self::values(&g, &terms);
        if !losses.total.is_finite() {
            return Err(Error::NonFinite("training loss".into()));
        }
        g.backward(terms.total, &mut self.store)?;
        let ids = self.trainable(phase);
        self.adam.step(&mut self.store, &ids);
        Ok(losses)
    }

    pub fn phase1_step(&mut self, batch: &Batch<T>) -> Result<StepLosses> {
        self.step(batch, Phase::One)
    }

    pub fn phase2_step(&mut self, batch: &Batch<T>) -> Result<StepLosses> {
        self.step(batch, Phase::Two)
    }
}

/// Cycles through shuffled index lists, one per stratum.
struct StratifiedSampler {
    strata: Vec<(Vec<usize>, usize)>,
    rng: ChaCha8Rng,
}

impl StratifiedSampler {
    fn new(sizes: &[usize], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let strata = sizes
            .iter()
            .map(|&n| {
                let mut order: Vec<usize> = (0..n).collect();
                order.shuffle(&mut rng);
                (order, 0)
            })
            .collect();
        Self { strata, rng }
    }

    /// `batch_size` indices split as evenly as possible over the strata,
    /// earlier strata taking the remainder.
    fn draw(&mut self, batch_size: usize) -> Vec<(usize, usize)> {
        let n = self.strata.len();
        let mut out = Vec::with_capacity(batch_size);
        for s in 0..n {
            let take = batch_size / n + usize::from(s < batch_size % n);
            for _ in 0..take {
                let (order, pos) = &mut self.strata[s];
                if *pos == order.len() {
                    order.shuffle(&mut self.rng);
                    *pos = 0;
                }
                out.push((s, order[*pos]));
                *pos += 1;
            }
        }
        out
    }
}

fn sample_batch<T: Scalar>(
    sampler: &mut StratifiedSampler,
    pools: &[&[TrainItem]],
    data: &TrainingSet,
    batch_size: usize,
) -> Result<Batch<T>> {
    let items: Vec<&TrainItem> = sampler
        .draw(batch_size)
        .into_iter()
        .map(|(s, i)| &pools[s][i])
        .collect();
    Batch::new(&items, data.n_frames, data.n_mels, data.out_frames, data.n_classes)
}

/// Stacks normalized features of several clips into a `[N, T, B]` batch.
pub fn stack_features(clips: &[&[f32]], n_frames: usize, n_mels: usize) -> Result<Tensor<f32>> {
    let per = n_frames * n_mels;
    let mut data = Vec::with_capacity(clips.len() * per);
    for c in clips {
        if c.len() != per {
            return Err(shape_err(format!("{} feature values, expected {per}", c.len())));
        }
        data.extend_from_slice(c);
    }
    Tensor::new(&[clips.len(), n_frames, n_mels], data)
}

const INFERENCE_CHUNK: usize = 16;

/// Agreement pseudo-labels for `items`. Weak labels are taken from the
/// items' clip labels when `use_weak` is set.
pub fn pseudo_label_items(
    model: &SedModel,
    store: &ParamStore<f32>,
    items: &[TrainItem],
    data: &TrainingSet,
    tau: f64,
    use_weak: bool,
) -> Result<Vec<PseudoLabelMask>> {
    let chunks: Vec<Vec<PseudoLabelMask>> = items
        .par_chunks(INFERENCE_CHUNK)
        .map(|chunk| {
            let feats: Vec<&[f32]> = chunk.iter().map(|it| it.features.as_slice()).collect();
            let batch = stack_features(&feats, data.n_frames, data.n_mels)?;
            let preds = model.predict_heads(store, &batch, &[Head::F1, Head::F2], data.out_hop_s)?;
            chunk
                .iter()
                .enumerate()
                .map(|(i, it)| {
                    let weak = if use_weak {
                        let l = it
                            .labels
                            .as_ref()
                            .ok_or_else(|| Error::Label(format!("clip {} has no weak label", it.id)))?;
                        Some(l.clip_labels.as_slice())
                    } else {
                        None
                    };
                    pseudo_label(&preds[0][i], &preds[1][i], weak, tau)
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    Ok(chunks.into_iter().flatten().collect())
}

// ---- runs ------------------------------------------------------------------

/// `config.json` of a run directory: everything needed to rebuild the model
/// and reproduce its preprocessing and scoring.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunRecord {
    pub mode: TrainMode,
    pub frontend: FrontendConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub decode: DecodeConfig,
    pub matching: EventMatchConfig,
    pub norm: NormStats,
    pub class_names: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub dir: PathBuf,
    pub steps: usize,
    pub last: StepLosses,
    pub mask_coverage: Option<Vec<MaskCoverage>>,
}

fn check_splits(data: &TrainingSet, mode: TrainMode) -> Result<()> {
    if data.strong.is_empty() || data.weak.is_empty() {
        return Err(Error::Config("training needs non-empty strong and weak splits".into()));
    }
    if mode.tri_training() && data.unlabeled.is_empty() {
        return Err(Error::Config(format!("mode {mode} needs unlabeled clips")));
    }
    Ok(())
}

/// Trains one model per `cfg` on `data`, writing the run directory `out`.
pub fn run(cfg: &RunConfig, data: &TrainingSet, out: &Path) -> Result<RunSummary> {
    cfg.validate()?;
    let mode = cfg.train.mode();
    check_splits(data, mode)?;
    let model_cfg = ModelConfig {
        n_classes: data.n_classes,
        ..cfg.train.effective_model(&cfg.model)
    };
    if data.n_mels != cfg.frontend.n_mels || data.n_frames != cfg.frontend.n_frames {
        return Err(Error::Config("training set was built with a different front-end".into()));
    }
    fs::create_dir_all(out)?;
    let record = RunRecord {
        mode,
        frontend: cfg.frontend.clone(),
        model: model_cfg.clone(),
        train: cfg.train.clone(),
        decode: cfg.decode.clone(),
        matching: cfg.matching.clone(),
        norm: data.norm.clone(),
        class_names: data.class_names.clone(),
    };
    fs::write(out.join(CONFIG_FILE), serde_json::to_string_pretty(&record)?)?;

    let mut trainer = Trainer::<f32>::new(&model_cfg, data.n_mels, &cfg.train)?;
    let mut log = BufWriter::new(fs::File::create(out.join(LOG_FILE))?);
    let bs = cfg.train.batch_size;
    let seed = splitmix64(cfg.train.seed ^ 0x5A4D_504C);

    // Phase-1 pools; unlabeled clips only feed the domain classifier.
    let mut pools: Vec<&[TrainItem]> = vec![&data.strong, &data.weak];
    if trainer.model.has_domain() && !data.unlabeled.is_empty() {
        pools.push(&data.unlabeled);
    }
    let mut sampler = StratifiedSampler::new(&pools.iter().map(|p| p.len()).collect::<Vec<_>>(), seed);
    let total_steps = cfg.train.iters_phase1 + cfg.train.iters_phase2;
    let phase1_steps = if mode.tri_training() { cfg.train.iters_phase1 } else { total_steps };
    let mut step = 0;
    let mut last = None;
    let write_log = |log: &mut BufWriter<fs::File>, step: usize, phase: u8, l: &StepLosses| -> Result<()> {
        let rec = StepLog {
            step,
            phase,
            loss_y: l.loss_y,
            loss_d: l.loss_d,
            loss_orth: l.loss_orth,
            lr: cfg.train.lr,
        };
        serde_json::to_writer(&mut *log, &rec)?;
        log.write_all(b"\n")?;
        Ok(())
    };
    while step < phase1_steps {
        let batch = sample_batch(&mut sampler, &pools, data, bs)?;
        let l = trainer.phase1_step(&batch)?;
        write_log(&mut log, step, 1, &l)?;
        last = Some(l);
        step += 1;
        if step == cfg.train.iters_phase1 {
            save_checkpoint(&trainer.store, &out.join(PHASE1_CKPT))?;
        }
    }
    if cfg.train.iters_phase1 == 0 {
        save_checkpoint(&trainer.store, &out.join(PHASE1_CKPT))?;
    }

    let mut coverage = None;
    if mode.tri_training() {
        let tau = cfg.train.agree_threshold;
        let w_masks = pseudo_label_items(&trainer.model, &trainer.store, &data.weak, data, tau, true)?;
        let u_masks = pseudo_label_items(&trainer.model, &trainer.store, &data.unlabeled, data, tau, false)?;
        let entries: Vec<(String, PseudoLabelMask)> = data
            .weak
            .iter()
            .zip(&w_masks)
            .chain(data.unlabeled.iter().zip(&u_masks))
            .map(|(it, m)| (it.id.clone(), m.clone()))
            .collect();
        let mut f = BufWriter::new(fs::File::create(out.join(MASKS_FILE))?);
        write_masks(&mut f, &entries)?;
        f.flush()?;
        coverage = Some(mask_coverage(entries.iter().map(|(_, m)| m), data.n_classes));

        let relabel = |items: &[TrainItem], masks: &[PseudoLabelMask]| -> Result<Vec<TrainItem>> {
            items
                .iter()
                .zip(masks)
                .map(|(it, m)| {
                    Ok(TrainItem {
                        labels: Some(m.to_labels()?),
                        ..it.clone()
                    })
                })
                .collect()
        };
        let w_psl = relabel(&data.weak, &w_masks)?;
        let u_psl = relabel(&data.unlabeled, &u_masks)?;
        let pools: Vec<&[TrainItem]> = vec![&data.strong, &w_psl, &u_psl];
        let mut sampler =
            StratifiedSampler::new(&pools.iter().map(|p| p.len()).collect::<Vec<_>>(), splitmix64(seed));
        while step < total_steps {
            let batch = sample_batch(&mut sampler, &pools, data, bs)?;
            let l = trainer.phase2_step(&batch)?;
            write_log(&mut log, step, 2, &l)?;
            last = Some(l);
            step += 1;
        }
    }
    log.flush()?;
    save_checkpoint(&trainer.store, &out.join(FINAL_CKPT))?;
    Ok(RunSummary {
        dir: out.to_path_buf(),
        steps: step,
        last: last.unwrap_or(StepLosses {
            loss_y: 0.0,
            loss_orth: None,
            loss_d: None,
            total: 0.0,
        }),
        mask_coverage: coverage,
    })
}

/// A trained model restored from a run directory.
#[derive(Debug, Clone)]
pub struct LoadedRun {
    pub record: RunRecord,
    pub model: SedModel,
    pub store: ParamStore<f32>,
}

impl LoadedRun {
    /// Loads `config.json` and the named checkpoint (`final.ckpt` or
    /// `phase1.ckpt`).
    pub fn load(dir: &Path, checkpoint: &str) -> Result<Self> {
        let text = fs::read_to_string(dir.join(CONFIG_FILE))?;
        let record: RunRecord = serde_json::from_str(&text)?;
        let mut store = ParamStore::new();
        let model = SedModel::build(
            &record.model,
            record.frontend.n_mels,
            record.mode.heads(),
            record.train.seed,
            &mut store,
        )?;
        let saved = load_checkpoint(&dir.join(checkpoint))?;
        restore_into(&mut store, &saved)?;
        Ok(Self { record, model, store })
    }

    pub fn out_hop_s(&self) -> f64 {
        self.record.frontend.frame_hop_s() * self.record.model.time_pool_factor as f64
    }

    /// Target-classifier predictions for raw (unnormalized) spectrograms.
    pub fn predict(&self, specs: &[LogMelSpectrogram]) -> Result<Vec<FramePrediction>> {
        self.predict_heads(specs, &[Head::Ft]).map(|mut v| v.remove(0))
    }

    /// Predictions of several heads; outer index follows `heads`.
    pub fn predict_heads(&self, specs: &[LogMelSpectrogram], heads: &[Head]) -> Result<Vec<Vec<FramePrediction>>> {
        let fe = &self.record.frontend;
        let hop = self.out_hop_s();
        let chunks: Vec<Vec<Vec<FramePrediction>>> = specs
            .par_chunks(INFERENCE_CHUNK)
            .map(|chunk| {
                let normed: Vec<LogMelSpectrogram> = chunk
                    .iter()
                    .map(|s| {
                        if s.n_frames != fe.n_frames || s.n_mels != fe.n_mels {
                            return Err(shape_err(format!(
                                "spectrogram {}x{} does not match the run's {}x{}",
                                s.n_frames, s.n_mels, fe.n_frames, fe.n_mels
                            )));
                        }
                        let mut s = s.clone();
                        self.record.norm.apply(&mut s)?;
                        Ok(s)
                    })
                    .collect::<Result<_>>()?;
                let feats: Vec<&[f32]> = normed.iter().map(|s| s.frames.as_slice()).collect();
                let batch = stack_features(&feats, fe.n_frames, fe.n_mels)?;
                self.model.predict_heads(&self.store, &batch, heads, hop)
            })
            .collect::<Result<_>>()?;
        let mut out = vec![Vec::with_capacity(specs.len()); heads.len()];
        for chunk in chunks {
            for (h, preds) in chunk.into_iter().enumerate() {
                out[h].extend(preds);
            }
        }
        Ok(out)
    }
}
