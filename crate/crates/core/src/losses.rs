//! Training objectives.
//!
//! Each loss exists twice: a detached `f64` evaluation over plain predictions,
//! and a graph builder used by the trainer. Both reduce by the mean over
//! contributing entries and clamp log arguments at [`BCE_EPS`].

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Scalar, Tensor, Var, BCE_EPS};
use crate::error::{shape_err, Error, Result};
use crate::model::{DomainPrediction, FramePrediction, HeadOutput};

/// Clip and optional frame targets for one clip. Masks use 1 for entries
/// that contribute and 0 for ignored ones.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelTensor {
    pub n_frames: usize,
    pub n_classes: usize,
    pub clip_labels: Vec<f32>,
    pub clip_mask: Option<Vec<f32>>,
    /// Row-major `[n_frames, n_classes]`.
    pub frame_labels: Option<Vec<f32>>,
    pub frame_mask: Option<Vec<f32>>,
}

impl LabelTensor {
    pub fn weak(clip_labels: Vec<f32>, n_frames: usize) -> Result<Self> {
        let l = Self {
            n_frames,
            n_classes: clip_labels.len(),
            clip_labels,
            clip_mask: None,
            frame_labels: None,
            frame_mask: None,
        };
        l.validate()?;
        Ok(l)
    }

    /// Strong labels; the clip label of a class is 1 iff any frame is active.
    pub fn strong(frame_labels: Vec<f32>, n_frames: usize, n_classes: usize) -> Result<Self> {
        if frame_labels.len() != n_frames * n_classes {
            return Err(shape_err(format!(
                "frame labels: {} values for {n_frames}x{n_classes}",
                frame_labels.len()
            )));
        }
        let clip_labels = (0..n_classes)
            .map(|k| {
                let on = (0..n_frames).any(|t| frame_labels[t * n_classes + k] != 0.0);
                if on {
                    1.0
                } else {
                    0.0
                }
            })
            .collect();
        let l = Self {
            n_frames,
            n_classes,
            clip_labels,
            clip_mask: None,
            frame_labels: Some(frame_labels),
            frame_mask: None,
        };
        l.validate()?;
        Ok(l)
    }

    pub fn is_strong(&self) -> bool {
        self.frame_labels.is_some()
    }

    pub fn validate(&self) -> Result<()> {
        let (t, k) = (self.n_frames, self.n_classes);
        check_binary("clip label", &self.clip_labels, k)?;
        if let Some(m) = &self.clip_mask {
            check_binary("clip mask", m, k)?;
        }
        match (&self.frame_labels, &self.frame_mask) {
            (Some(f), m) => {
                check_binary("frame label", f, t * k)?;
                if let Some(m) = m {
                    check_binary("frame mask", m, t * k)?;
                }
            }
            (None, Some(_)) => return Err(Error::Label("frame mask without frame labels".into())),
            (None, None) => {}
        }
        Ok(())
    }
}

fn check_binary(what: &str, v: &[f32], len: usize) -> Result<()> {
    if v.len() != len {
        return Err(shape_err(format!("{what}: expected {len} values, got {}", v.len())));
    }
    if let Some(x) = v.iter().find(|&&x| x != 0.0 && x != 1.0) {
        return Err(Error::Label(format!("{what} {x} is not 0 or 1")));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DomainLabel {
    Synthetic,
    Real,
}

impl DomainLabel {
    pub fn target(self) -> f32 {
        match self {
            DomainLabel::Synthetic => 1.0,
            DomainLabel::Real => 0.0,
        }
    }
}

/// Result of a masked mean. `masked_out` is set when nothing contributed,
/// in which case `value` is 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskedLoss {
    pub value: f64,
    pub masked_out: bool,
}

fn bce_term(p: f64, y: f64) -> f64 {
    let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

/// Mean BCE over entries with nonzero mask.
fn masked_bce(p: &[f32], y: &[f32], mask: Option<&[f32]>) -> MaskedLoss {
    let mut total = 0.0;
    let mut count = 0usize;
    for i in 0..p.len() {
        if mask.is_some_and(|m| m[i] == 0.0) {
            continue;
        }
        total += bce_term(p[i] as f64, y[i] as f64);
        count += 1;
    }
    if count == 0 {
        MaskedLoss {
            value: 0.0,
            masked_out: true,
        }
    } else {
        MaskedLoss {
            value: total / count as f64,
            masked_out: false,
        }
    }
}

fn check_pairs(preds: &[&FramePrediction], labels: &[&LabelTensor]) -> Result<()> {
    if preds.len() != labels.len() {
        return Err(shape_err(format!("{} predictions, {} labels", preds.len(), labels.len())));
    }
    for (p, l) in preds.iter().zip(labels) {
        l.validate()?;
        if p.n_classes != l.n_classes || p.n_frames != l.n_frames {
            return Err(shape_err(format!(
                "prediction {}x{} vs labels {}x{}",
                p.n_frames, p.n_classes, l.n_frames, l.n_classes
            )));
        }
    }
    Ok(())
}

/// Clip-level BCE averaged over every (clip, class) pair that is not masked.
pub fn clip_bce(preds: &[&FramePrediction], labels: &[&LabelTensor]) -> Result<MaskedLoss> {
    check_pairs(preds, labels)?;
    let mut p = Vec::new();
    let mut y = Vec::new();
    let mut m = Vec::new();
    for (pr, l) in preds.iter().zip(labels) {
        p.extend_from_slice(&pr.clip_probs);
        y.extend_from_slice(&l.clip_labels);
        match &l.clip_mask {
            Some(cm) => m.extend_from_slice(cm),
            None => m.extend(std::iter::repeat(1.0).take(l.n_classes)),
        }
    }
    Ok(masked_bce(&p, &y, Some(&m)))
}

/// Frame-level BCE averaged over contributing (clip, frame, class) entries
/// of clips that carry frame labels.
pub fn frame_bce(preds: &[&FramePrediction], labels: &[&LabelTensor]) -> Result<MaskedLoss> {
    check_pairs(preds, labels)?;
    let mut p = Vec::new();
    let mut y = Vec::new();
    let mut m = Vec::new();
    for (pr, l) in preds.iter().zip(labels) {
        let Some(fl) = &l.frame_labels else { continue };
        p.extend_from_slice(&pr.frame_probs);
        y.extend_from_slice(fl);
        match &l.frame_mask {
            Some(fm) => m.extend_from_slice(fm),
            None => m.extend(std::iter::repeat(1.0).take(fl.len())),
        }
    }
    Ok(masked_bce(&p, &y, Some(&m)))
}

/// Clip term plus frame term; the frame term is absent (0) when no clip has
/// contributing frame labels.
pub fn total_classification_loss(preds: &[&FramePrediction], labels: &[&LabelTensor]) -> Result<f64> {
    Ok(clip_bce(preds, labels)?.value + frame_bce(preds, labels)?.value)
}

/// Domain BCE: mean over clips for whole-clip outputs, over (clip, frame)
/// for per-frame outputs.
pub fn domain_bce(preds: &[DomainPrediction], labels: &[DomainLabel]) -> Result<f64> {
    if preds.len() != labels.len() || preds.is_empty() {
        return Err(shape_err(format!("{} domain predictions, {} labels", preds.len(), labels.len())));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for (p, l) in preds.iter().zip(labels) {
        let y = l.target() as f64;
        match p {
            DomainPrediction::Whole(v) => {
                total += bce_term(*v as f64, y);
                count += 1;
            }
            DomainPrediction::Time(vs) => {
                for v in vs {
                    total += bce_term(*v as f64, y);
                }
                count += vs.len();
            }
        }
    }
    if count == 0 {
        return Err(shape_err("domain predictions have no frames"));
    }
    Ok(total / count as f64)
}

/// `|cos(w1, w2)|` of flattened weights.
pub fn labeler_orthogonality(w1: &[f64], w2: &[f64]) -> Result<f64> {
    if w1.len() != w2.len() {
        return Err(shape_err(format!("weights of length {} and {}", w1.len(), w2.len())));
    }
    let dot: f64 = w1.iter().zip(w2).map(|(a, b)| a * b).sum();
    let n1 = w1.iter().map(|a| a * a).sum::<f64>().sqrt();
    let n2 = w2.iter().map(|a| a * a).sum::<f64>().sqrt();
    if n1 == 0.0 || n2 == 0.0 {
        return Err(Error::DegenerateWeights("zero-norm labeler weight".into()));
    }
    Ok((dot / (n1 * n2)).abs().min(1.0))
}

/// Dense targets and masks for a batch in which some clips carry no labels.
#[derive(Debug, Clone)]
pub struct BatchTargets<T> {
    /// `[N, K]`
    pub clip: Tensor<T>,
    pub clip_mask: Tensor<T>,
    /// `[N, T', K]`
    pub frame: Tensor<T>,
    pub frame_mask: Tensor<T>,
    pub any_clip: bool,
    pub any_frame: bool,
}

impl<T: Scalar> BatchTargets<T> {
    pub fn new(items: &[Option<&LabelTensor>], n_frames: usize, n_classes: usize) -> Result<Self> {
        let n = items.len();
        let (t, k) = (n_frames, n_classes);
        let mut clip = vec![T::zero(); n * k];
        let mut clip_mask = vec![T::zero(); n * k];
        let mut frame = vec![T::zero(); n * t * k];
        let mut frame_mask = vec![T::zero(); n * t * k];
        for (i, item) in items.iter().enumerate() {
            let Some(l) = item else { continue };
            l.validate()?;
            if l.n_frames != t || l.n_classes != k {
                return Err(shape_err(format!(
                    "labels {}x{} in a batch of {t}x{k}",
                    l.n_frames, l.n_classes
                )));
            }
            for c in 0..k {
                clip[i * k + c] = T::from_f64(l.clip_labels[c] as f64);
                clip_mask[i * k + c] = T::from_f64(l.clip_mask.as_ref().map_or(1.0, |m| m[c] as f64));
            }
            if let Some(fl) = &l.frame_labels {
                let off = i * t * k;
                for j in 0..t * k {
                    frame[off + j] = T::from_f64(fl[j] as f64);
                    frame_mask[off + j] = T::from_f64(l.frame_mask.as_ref().map_or(1.0, |m| m[j] as f64));
                }
            }
        }
        let nonzero = |m: &[T]| m.iter().any(|&x| x != T::zero());
        Ok(Self {
            any_clip: nonzero(&clip_mask),
            any_frame: nonzero(&frame_mask),
            clip: Tensor::new(&[n, k], clip)?,
            clip_mask: Tensor::new(&[n, k], clip_mask)?,
            frame: Tensor::new(&[n, t, k], frame)?,
            frame_mask: Tensor::new(&[n, t, k], frame_mask)?,
        })
    }
}

/// Graph form of the clip + frame loss for one head. `None` when the batch
/// has no contributing label at all.
pub fn classification_loss<T: Scalar>(g: &mut Graph<T>, out: HeadOutput, targets: &BatchTargets<T>) -> Result<Option<Var>> {
    let clip = targets
        .any_clip
        .then(|| g.bce(out.clip_probs, &targets.clip, Some(&targets.clip_mask)))
        .transpose()?;
    let frame = targets
        .any_frame
        .then(|| g.bce(out.frame_probs, &targets.frame, Some(&targets.frame_mask)))
        .transpose()?;
    match (clip, frame) {
        (Some(c), Some(f)) => Ok(Some(g.add(c, f)?)),
        (c, f) => Ok(c.or(f)),
    }
}

/// Graph form of the domain loss. `probs` is `[N]` or `[N, T']`.
pub fn domain_loss<T: Scalar>(g: &mut Graph<T>, probs: Var, labels: &[DomainLabel]) -> Result<Var> {
    let shape = g.shape(probs).to_vec();
    if shape[0] != labels.len() {
        return Err(shape_err(format!("{} domain labels for batch of {}", labels.len(), shape[0])));
    }
    let per_item: usize = shape[1..].iter().product();
    let target = Tensor::from_fn(&shape, |j| T::from_f64(labels[j / per_item].target() as f64));
    g.bce(probs, &target, None)
}

/// Graph form of the labeler orthogonality penalty.
pub fn orthogonality_loss<T: Scalar>(g: &mut Graph<T>, w1: Var, w2: Var) -> Result<Var> {
    g.abs_cosine(w1, w2)
}

/// Convenience: wraps per-clip predictions for the detached losses.
pub fn refs<T>(v: &[T]) -> Vec<&T> {
    v.iter().collect()
}
