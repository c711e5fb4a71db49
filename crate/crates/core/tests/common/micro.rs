//! A micro CRNN and tiny-corpus settings shared by the trainer suites.

use std::path::Path;

use rand::Rng;
use sedtriadv::audio::FrontendConfig;
use sedtriadv::autodiff::{Graph, ParamId, Var};
use sedtriadv::config::RunConfig;
use sedtriadv::corpus::{generate_toy_corpus, load_manifest, GenerateConfig, SplitCounts};
use sedtriadv::losses::{domain_loss, DomainLabel, LabelTensor};
use sedtriadv::model::{CnnBlock, ModelConfig};
use sedtriadv::trainer::{Batch, LabelState, LossTerms, Phase, StepLosses, TrainConfig, TrainItem, TrainMode, Trainer, TrainingSet};

use super::rng;

pub const T: usize = 8;
pub const B: usize = 8;
pub const TOUT: usize = 4;
pub const K: usize = 2;

pub fn micro_model() -> ModelConfig {
    ModelConfig {
        n_classes: K,
        cnn_blocks: vec![CnnBlock { channels: 2, freq_pool: 2 }, CnnBlock { channels: 2, freq_pool: 2 }],
        gru_hidden: 3,
        gru_layers: 2,
        time_pool_factor: 2,
        domain_hidden: 4,
        ..ModelConfig::default()
    }
}

pub fn micro_trainer(mode: TrainMode, alpha: f64, seed: u64) -> Trainer<f64> {
    let cfg = TrainConfig {
        alpha,
        lambda: 0.8,
        seed,
        lr: 1e-3,
        ..TrainConfig::default()
    }
    .with_mode(mode);
    Trainer::new(&micro_model(), B, &cfg).unwrap()
}

pub fn features(r: &mut impl Rng) -> Vec<f32> {
    (0..T * B).map(|_| r.gen_range(-1.5f32..1.5)).collect()
}

pub fn strong_item(r: &mut impl Rng, id: &str) -> TrainItem {
    let y: Vec<f32> = (0..TOUT * K).map(|_| if r.gen_bool(0.4) { 1.0 } else { 0.0 }).collect();
    TrainItem {
        id: id.into(),
        features: features(r),
        labels: Some(LabelTensor::strong(y, TOUT, K).unwrap()),
        domain: DomainLabel::Synthetic,
    }
}

pub fn weak_item(r: &mut impl Rng, id: &str) -> TrainItem {
    TrainItem {
        id: id.into(),
        features: features(r),
        labels: Some(LabelTensor::weak(vec![1.0, 0.0], TOUT).unwrap()),
        domain: DomainLabel::Real,
    }
}

pub fn unlabeled_item(r: &mut impl Rng, id: &str) -> TrainItem {
    TrainItem {
        id: id.into(),
        features: features(r),
        labels: None,
        domain: DomainLabel::Real,
    }
}

pub fn batch(items: &[TrainItem]) -> Batch<f64> {
    let refs: Vec<&TrainItem> = items.iter().collect();
    Batch::new(&refs, T, B, TOUT, K).unwrap()
}

pub fn mixed_items(seed: u64) -> Vec<TrainItem> {
    let mut r = rng(seed);
    vec![
        strong_item(&mut r, "S0"),
        strong_item(&mut r, "S1"),
        weak_item(&mut r, "W0"),
        unlabeled_item(&mut r, "U0"),
    ]
}

/// Parameter gradients of the term chosen by `pick`.
pub fn grads_of(tr: &mut Trainer<f64>, b: &Batch<f64>, phase: Phase, pick: fn(&LossTerms) -> Option<Var>) -> Vec<Vec<f64>> {
    tr.store.zero_grad();
    let mut g = Graph::new();
    let terms = tr.build_loss(&mut g, b, phase).unwrap();
    let v = pick(&terms).expect("term present");
    g.backward(v, &mut tr.store).unwrap();
    tr.store.iter().map(|(_, p)| p.grad.data().to_vec()).collect()
}

/// Domain loss without gradient reversal, assembled by hand from the stored
/// domain-classifier parameters.
pub fn natural_domain_grads(tr: &mut Trainer<f64>, b: &Batch<f64>) -> Vec<Vec<f64>> {
    tr.store.zero_grad();
    let mut g = Graph::new();
    let x = g.input(b.input.clone());
    let f = tr.model.extract_features(&mut g, &tr.store, x).unwrap();
    let s = g.shape(f).to_vec();
    let id = |name: &str| tr.store.id(name).unwrap();
    let (w1, b1, w2, b2) = (id("D.fc1.weight"), id("D.fc1.bias"), id("D.fc2.weight"), id("D.fc2.bias"));
    let flat = g.reshape(f, &[s[0] * s[1], s[2]]).unwrap();
    let (w1, b1, w2, b2) = (
        g.param(&tr.store, w1),
        g.param(&tr.store, b1),
        g.param(&tr.store, w2),
        g.param(&tr.store, b2),
    );
    let h = g.matmul(flat, w1).unwrap();
    let h = g.add_bias(h, b1).unwrap();
    let h = g.relu(h).unwrap();
    let o = g.matmul(h, w2).unwrap();
    let o = g.add_bias(o, b2).unwrap();
    let p = g.sigmoid(o).unwrap();
    let p = g.reshape(p, &[s[0], s[1]]).unwrap();
    let l = domain_loss(&mut g, p, &b.domains).unwrap();
    g.backward(l, &mut tr.store).unwrap();
    tr.store.iter().map(|(_, p)| p.grad.data().to_vec()).collect()
}

pub fn index_set(ids: &[ParamId]) -> Vec<usize> {
    ids.iter().map(|i| i.index()).collect()
}


/// Central differences of one loss term with respect to every parameter entry.
pub fn numeric_grads(tr: &mut Trainer<f64>, b: &Batch<f64>, phase: Phase, eps: f64, term: fn(&StepLosses) -> f64) -> Vec<Vec<f64>> {
    let ids: Vec<ParamId> = tr.store.ids().collect();
    let mut out = Vec::new();
    for id in ids {
        let n = tr.store.value(id).len();
        let mut g = vec![0.0; n];
        for j in 0..n {
            let orig = tr.store.value(id).data()[j];
            tr.store.get_mut(id).value.data_mut()[j] = orig + eps;
            let plus = term(&tr.evaluate(b, phase).unwrap());
            tr.store.get_mut(id).value.data_mut()[j] = orig - eps;
            let minus = term(&tr.evaluate(b, phase).unwrap());
            tr.store.get_mut(id).value.data_mut()[j] = orig;
            g[j] = (plus - minus) / (2.0 * eps);
        }
        out.push(g);
    }
    out
}

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}


/// Agreement rule stated as "both confident and agreeing".
pub fn agreement_oracle(p1: f64, p2: f64, tau: f64) -> LabelState {
    let side = |p: f64| p > 0.5;
    let conf = |p: f64| if p > 0.5 { p } else { 1.0 - p };
    if side(p1) == side(p2) && conf(p1) > tau && conf(p2) > tau {
        if side(p1) {
            LabelState::Pos
        } else {
            LabelState::Neg
        }
    } else {
        LabelState::Ignore
    }
}


pub fn tiny_config(mode: TrainMode) -> RunConfig {
    let mut cfg = RunConfig::desk();
    cfg.frontend = FrontendConfig {
        hop_len: 2000,
        n_frames: 32,
        n_mels: 16,
        ..FrontendConfig::default()
    };
    cfg.model = ModelConfig {
        cnn_blocks: vec![CnnBlock { channels: 2, freq_pool: 4 }, CnnBlock { channels: 2, freq_pool: 4 }],
        gru_hidden: 4,
        gru_layers: 1,
        time_pool_factor: 2,
        ..ModelConfig::default()
    };
    cfg.train = TrainConfig {
        batch_size: 6,
        iters_phase1: 4,
        iters_phase2: 3,
        seed: 5,
        ..TrainConfig::default()
    }
    .with_mode(mode);
    cfg
}

pub fn tiny_corpus(dir: &Path, n_u: usize) -> TrainingSet {
    let gen = GenerateConfig {
        seed: 3,
        n_classes: 3,
        counts: SplitCounts {
            n_s: 6,
            n_w: 5,
            n_u,
            n_val: 2,
        },
        domain_gap: 0.8,
    };
    generate_toy_corpus(dir, &gen).unwrap();
    let m = load_manifest(dir).unwrap();
    let cfg = tiny_config(TrainMode::Baseline);
    TrainingSet::from_corpus(&m, &cfg.frontend, &cfg.model).unwrap()
}
