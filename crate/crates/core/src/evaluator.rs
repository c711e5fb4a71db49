//! Decoding frame probabilities into events, and event/segment F1.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::corpus::{load_split, CorpusManifest, EventAnnotation, LabelKind, Split};
use crate::error::{Error, Result};
use crate::model::FramePrediction;
use crate::trainer::LoadedRun;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeConfig {
    pub prob_threshold: f64,
    pub median_filter_frames: usize,
    pub min_event_s: f64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            prob_threshold: 0.5,
            median_filter_frames: 9,
            min_event_s: 0.1,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.prob_threshold > 0.0 && self.prob_threshold < 1.0) {
            return Err(Error::Config("prob_threshold must be in (0, 1)".into()));
        }
        if self.median_filter_frames % 2 == 0 {
            return Err(Error::Config("median_filter_frames must be odd".into()));
        }
        if !(self.min_event_s >= 0.0) {
            return Err(Error::Config("min_event_s must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EventMatchConfig {
    pub onset_collar_s: f64,
    /// Offset collar is `max(offset_collar_s, offset_collar_rate * reference length)`.
    pub offset_collar_s: f64,
    pub offset_collar_rate: f64,
    pub segment_len_s: f64,
}

impl Default for EventMatchConfig {
    fn default() -> Self {
        Self {
            onset_collar_s: 0.2,
            offset_collar_s: 0.2,
            offset_collar_rate: 0.2,
            segment_len_s: 1.0,
        }
    }
}

impl EventMatchConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.onset_collar_s > 0.0 && self.offset_collar_s > 0.0 && self.offset_collar_rate >= 0.0) {
            return Err(Error::Config("collars must be positive".into()));
        }
        if !(self.segment_len_s > 0.0) {
            return Err(Error::Config("segment_len_s must be positive".into()));
        }
        Ok(())
    }

    /// Whether `hyp` may be matched to `reference` (class is checked by the caller).
    pub fn admissible(&self, reference: &EventAnnotation, hyp: &EventAnnotation) -> bool {
        let off_collar = self
            .offset_collar_s
            .max(self.offset_collar_rate * (reference.offset_s - reference.onset_s));
        (reference.onset_s - hyp.onset_s).abs() <= self.onset_collar_s
            && (reference.offset_s - hyp.offset_s).abs() <= off_collar
    }
}

/// Binary median filter applied until the sequence stops changing. Edges
/// replicate the boundary value.
pub fn median_filter_binary(x: &[bool], width: usize) -> Vec<bool> {
    let half = width / 2;
    let n = x.len();
    if half == 0 || n == 0 {
        return x.to_vec();
    }
    let mut cur = x.to_vec();
    loop {
        let next: Vec<bool> = (0..n)
            .map(|i| {
                let on = (0..width)
                    .filter(|&j| {
                        let idx = (i + j).saturating_sub(half).min(n - 1);
                        cur[idx]
                    })
                    .count();
                on > half
            })
            .collect();
        if next == cur {
            return cur;
        }
        cur = next;
    }
}

/// Thresholds, median-filters and merges frame activity into events,
/// dropping events shorter than `min_event_s`. Output is sorted by onset,
/// then class.
pub fn decode(pred: &FramePrediction, cfg: &DecodeConfig) -> Vec<EventAnnotation> {
    let hop = pred.frame_hop_s;
    let mut events = Vec::new();
    for k in 0..pred.n_classes {
        let active: Vec<bool> = (0..pred.n_frames)
            .map(|t| pred.frame(t, k) as f64 > cfg.prob_threshold)
            .collect();
        let active = median_filter_binary(&active, cfg.median_filter_frames.max(1));
        let mut t = 0;
        while t < active.len() {
            if !active[t] {
                t += 1;
                continue;
            }
            let start = t;
            while t < active.len() && active[t] {
                t += 1;
            }
            let (onset_s, offset_s) = (start as f64 * hop, t as f64 * hop);
            if offset_s - onset_s >= cfg.min_event_s {
                events.push(EventAnnotation {
                    class_id: k,
                    onset_s,
                    offset_s,
                });
            }
        }
    }
    sort_events(&mut events);
    events
}

pub fn sort_events(events: &mut [EventAnnotation]) {
    events.sort_by(|a, b| {
        a.onset_s
            .total_cmp(&b.onset_s)
            .then(a.class_id.cmp(&b.class_id))
            .then(a.offset_s.total_cmp(&b.offset_s))
    });
}

/// Frame activity `[n_frames, n_classes]` of a set of events: frame `t` is
/// active when an event covers `(t + 0.5) * hop`.
pub fn events_to_frames(events: &[EventAnnotation], n_frames: usize, n_classes: usize, hop_s: f64) -> Vec<f32> {
    crate::corpus::frame_labels(events, n_frames, n_classes, hop_s)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Counts {
    pub fn f1(&self) -> f64 {
        let denom = 2 * self.tp + self.fp + self.fn_;
        if denom == 0 {
            0.0
        } else {
            2.0 * self.tp as f64 / denom as f64
        }
    }

    pub fn add(&mut self, other: Counts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }
}

/// Per-class one-to-one matching of hypothesis to reference events.
///
/// Hypotheses are visited in onset order and first try the earliest
/// admissible free reference; if none is free, an augmenting path reassigns
/// earlier matches. The result is a maximum matching, so TP is the largest
/// achievable count under the collars.
pub fn event_counts(
    reference: &[EventAnnotation],
    hypothesis: &[EventAnnotation],
    cfg: &EventMatchConfig,
    n_classes: usize,
) -> Vec<Counts> {
    (0..n_classes)
        .map(|k| {
            let mut refs: Vec<&EventAnnotation> = reference.iter().filter(|e| e.class_id == k).collect();
            let mut hyps: Vec<&EventAnnotation> = hypothesis.iter().filter(|e| e.class_id == k).collect();
            refs.sort_by(|a, b| a.onset_s.total_cmp(&b.onset_s));
            hyps.sort_by(|a, b| a.onset_s.total_cmp(&b.onset_s));
            let adj: Vec<Vec<usize>> = hyps
                .iter()
                .map(|h| (0..refs.len()).filter(|&r| cfg.admissible(refs[r], h)).collect())
                .collect();
            let mut owner: Vec<Option<usize>> = vec![None; refs.len()];
            let mut tp = 0;
            for h in 0..hyps.len() {
                let mut seen = vec![false; refs.len()];
                if augment(h, &adj, &mut owner, &mut seen) {
                    tp += 1;
                }
            }
            Counts {
                tp,
                fp: hyps.len() - tp,
                fn_: refs.len() - tp,
            }
        })
        .collect()
}

fn augment(h: usize, adj: &[Vec<usize>], owner: &mut [Option<usize>], seen: &mut [bool]) -> bool {
    // Free references first, in onset order, so the greedy choice is kept
    // whenever it does not cost a match.
    for &r in &adj[h] {
        if owner[r].is_none() {
            owner[r] = Some(h);
            return true;
        }
    }
    for &r in &adj[h] {
        if seen[r] {
            continue;
        }
        seen[r] = true;
        let prev = owner[r].expect("checked above");
        if augment(prev, adj, owner, seen) {
            owner[r] = Some(h);
            return true;
        }
    }
    false
}

/// Segments (of length `segment_len_s`) overlapped by each class's events.
/// An event `[a, b)` activates segment `s` iff `a < (s+1)L` and `b > sL`.
pub fn active_segments(events: &[EventAnnotation], segment_len_s: f64, n_classes: usize) -> Vec<BTreeSet<usize>> {
    let mut out = vec![BTreeSet::new(); n_classes];
    for e in events {
        let first = (e.onset_s / segment_len_s).floor().max(0.0) as usize;
        let mut s = first;
        while (s as f64) * segment_len_s < e.offset_s {
            if e.onset_s < (s + 1) as f64 * segment_len_s {
                out[e.class_id].insert(s);
            }
            s += 1;
        }
    }
    out
}

pub fn segment_counts(
    reference: &[EventAnnotation],
    hypothesis: &[EventAnnotation],
    segment_len_s: f64,
    n_classes: usize,
) -> Vec<Counts> {
    let r = active_segments(reference, segment_len_s, n_classes);
    let h = active_segments(hypothesis, segment_len_s, n_classes);
    r.iter()
        .zip(&h)
        .map(|(r, h)| Counts {
            tp: r.intersection(h).count(),
            fp: h.difference(r).count(),
            fn_: r.difference(h).count(),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub class: String,
    pub event: Counts,
    pub event_f1: f64,
    pub segment: Counts,
    pub segment_f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_class: Vec<ClassReport>,
    pub macro_event_f1: f64,
    pub macro_segment_f1: f64,
}

/// One clip's reference and hypothesis events.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipEvents {
    pub id: String,
    pub reference: Vec<EventAnnotation>,
    pub hypothesis: Vec<EventAnnotation>,
}

/// Counts summed over clips, then per-class F1 and unweighted macro means.
pub fn score(clips: &[ClipEvents], class_names: &[String], cfg: &EventMatchConfig) -> MetricsReport {
    let k = class_names.len();
    let mut ev = vec![Counts::default(); k];
    let mut seg = vec![Counts::default(); k];
    for c in clips {
        for (acc, n) in ev.iter_mut().zip(event_counts(&c.reference, &c.hypothesis, cfg, k)) {
            acc.add(n);
        }
        for (acc, n) in seg
            .iter_mut()
            .zip(segment_counts(&c.reference, &c.hypothesis, cfg.segment_len_s, k))
        {
            acc.add(n);
        }
    }
    let per_class: Vec<ClassReport> = (0..k)
        .map(|i| ClassReport {
            class: class_names[i].clone(),
            event: ev[i],
            event_f1: ev[i].f1(),
            segment: seg[i],
            segment_f1: seg[i].f1(),
        })
        .collect();
    let mean = |f: &dyn Fn(&ClassReport) -> f64| {
        if k == 0 {
            0.0
        } else {
            per_class.iter().map(f).sum::<f64>() / k as f64
        }
    };
    MetricsReport {
        macro_event_f1: mean(&|c| c.event_f1),
        macro_segment_f1: mean(&|c| c.segment_f1),
        per_class,
    }
}

impl MetricsReport {
    /// Aligned plain-text table, F1 in percent.
    pub fn table(&self) -> String {
        let w = self.per_class.iter().map(|c| c.class.len()).max().unwrap_or(5).max(5);
        let mut s = String::new();
        let _ = writeln!(s, "{:<w$}  {:>14}  {:>16}", "class", "event-based F1", "segment-based F1");
        for c in &self.per_class {
            let _ = writeln!(s, "{:<w$}  {:>13.2}%  {:>15.2}%", c.class, 100.0 * c.event_f1, 100.0 * c.segment_f1);
        }
        let _ = writeln!(
            s,
            "{:<w$}  {:>13.2}%  {:>15.2}%",
            "macro",
            100.0 * self.macro_event_f1,
            100.0 * self.macro_segment_f1
        );
        s
    }
}

/// Tab-separated `clip_id onset offset class_name` lines.
pub fn write_tsv(w: &mut impl Write, rows: &[(String, EventAnnotation)], class_names: &[String]) -> Result<()> {
    for (id, e) in rows {
        let name = class_names
            .get(e.class_id)
            .ok_or_else(|| Error::Label(format!("class {} has no name", e.class_id)))?;
        writeln!(w, "{id}\t{:.6}\t{:.6}\t{name}", e.onset_s, e.offset_s)?;
    }
    Ok(())
}

pub fn read_tsv(r: impl BufRead, class_names: &[String]) -> Result<Vec<(String, EventAnnotation)>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |msg: &str| Error::Label(format!("tsv line {}: {msg}", i + 1));
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 4 {
            return Err(bad("expected 4 tab-separated fields"));
        }
        let onset: f64 = f[1].parse().map_err(|_| bad("bad onset"))?;
        let offset: f64 = f[2].parse().map_err(|_| bad("bad offset"))?;
        let class_id = class_names
            .iter()
            .position(|n| n == f[3])
            .ok_or_else(|| bad("unknown class"))?;
        out.push((
            f[0].to_string(),
            EventAnnotation {
                class_id,
                onset_s: onset,
                offset_s: offset,
            },
        ));
    }
    Ok(out)
}

/// Scores the target classifier of a trained run on a strongly labeled split.
pub fn evaluate_run(run: &LoadedRun, manifest: &CorpusManifest, split: Split) -> Result<(MetricsReport, Vec<ClipEvents>)> {
    if manifest.class_names != run.record.class_names {
        return Err(Error::Config("corpus and run disagree on class names".into()));
    }
    let clips = load_split(manifest, split, &run.record.frontend)?;
    if let Some((c, _)) = clips.iter().find(|(c, _)| c.kind != LabelKind::Strong) {
        return Err(Error::Label(format!("clip {} has no strong labels to score against", c.id)));
    }
    let specs: Vec<_> = clips.iter().map(|(_, s)| s.clone()).collect();
    let preds = run.predict(&specs)?;
    let scored: Vec<ClipEvents> = clips
        .into_iter()
        .zip(&preds)
        .map(|((clip, _), p)| ClipEvents {
            id: clip.id,
            reference: clip.events,
            hypothesis: decode(p, &run.record.decode),
        })
        .collect();
    Ok((score(&scored, &run.record.class_names, &run.record.matching), scored))
}
