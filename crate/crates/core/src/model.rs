//! CRNN detector: a shared feature extractor `F` (conv blocks followed by a
//! bidirectional GRU stack), frame/clip heads `F1`, `F2`, `Ft` that share an
//! architecture but never parameters, and a domain classifier `D` reached
//! through a gradient reversal node.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamId, ParamStore, Scalar, Tensor, Var};
use crate::error::{shape_err, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CnnBlock {
    pub channels: usize,
    pub freq_pool: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdvMode {
    None,
    Whole,
    Time,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClipPooling {
    /// Class-wise softmax attention over frames.
    Attention,
    Mean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub n_classes: usize,
    pub cnn_blocks: Vec<CnnBlock>,
    pub kernel_size: usize,
    pub gru_hidden: usize,
    pub gru_layers: usize,
    /// Time pooling applied once, in the first conv block.
    pub time_pool_factor: usize,
    pub adv_mode: AdvMode,
    /// Gradient reversal coefficient.
    pub alpha: f64,
    pub clip_pooling: ClipPooling,
    /// Hidden width of the domain classifier; 0 means the feature width.
    pub domain_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_classes: 4,
            cnn_blocks: vec![
                CnnBlock { channels: 16, freq_pool: 4 },
                CnnBlock { channels: 32, freq_pool: 4 },
                CnnBlock { channels: 32, freq_pool: 4 },
            ],
            kernel_size: 3,
            gru_hidden: 32,
            gru_layers: 2,
            time_pool_factor: 1,
            adv_mode: AdvMode::None,
            alpha: 1.0,
            clip_pooling: ClipPooling::Attention,
            domain_hidden: 0,
        }
    }
}

impl ModelConfig {
    /// Seven conv blocks and a two-layer bidirectional GRU over 128 mel bins.
    pub fn full_scale() -> Self {
        let channels = [16, 32, 64, 128, 128, 128, 128];
        Self {
            n_classes: 10,
            cnn_blocks: channels
                .iter()
                .map(|&channels| CnnBlock { channels, freq_pool: 2 })
                .collect(),
            gru_hidden: 128,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_classes == 0 {
            return Err(Error::Config("n_classes must be >= 1".into()));
        }
        if self.gru_layers == 0 || self.gru_hidden == 0 {
            return Err(Error::Config("gru_layers and gru_hidden must be >= 1".into()));
        }
        if self.time_pool_factor == 0 || self.cnn_blocks.iter().any(|b| b.freq_pool == 0 || b.channels == 0) {
            return Err(Error::Config("pool factors and channel counts must be >= 1".into()));
        }
        if self.kernel_size % 2 == 0 {
            return Err(Error::Config("kernel_size must be odd".into()));
        }
        if !(self.alpha >= 0.0) {
            return Err(Error::Config("alpha must be >= 0".into()));
        }
        Ok(())
    }

    /// Width H of the extracted features (both GRU directions).
    pub fn feature_width(&self) -> usize {
        2 * self.gru_hidden
    }

    /// Frequency bins left after all pooling, or an error if they vanish.
    pub fn pooled_bins(&self, n_mels: usize) -> Result<usize> {
        let mut bins = n_mels;
        for b in &self.cnn_blocks {
            bins /= b.freq_pool;
            if bins == 0 {
                return Err(Error::Config(format!(
                    "{n_mels} mel bins cannot be pooled by {:?}",
                    self.cnn_blocks.iter().map(|b| b.freq_pool).collect::<Vec<_>>()
                )));
            }
        }
        Ok(bins)
    }

    pub fn output_frames(&self, n_frames: usize) -> usize {
        n_frames / self.time_pool_factor
    }
}

/// Which classification head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Head {
    F1,
    F2,
    Ft,
}

impl Head {
    pub fn prefix(self) -> &'static str {
        match self {
            Head::F1 => "F1",
            Head::F2 => "F2",
            Head::Ft => "Ft",
        }
    }
}

#[derive(Debug, Clone)]
struct GruDirection {
    w_ih: ParamId,
    w_hh: ParamId,
    b_ih: ParamId,
    b_hh: ParamId,
}

#[derive(Debug, Clone)]
struct HeadParams {
    head: Head,
    frame_w: ParamId,
    frame_b: ParamId,
    att_w: ParamId,
    att_b: ParamId,
}

#[derive(Debug, Clone)]
struct DomainParams {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

/// Parameter layout of the detector. Values live in a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct SedModel {
    cfg: ModelConfig,
    n_mels: usize,
    conv: Vec<(ParamId, ParamId)>,
    gru: Vec<[GruDirection; 2]>,
    heads: Vec<HeadParams>,
    domain: Option<DomainParams>,
}

/// Graph handles for one head's outputs.
#[derive(Debug, Clone, Copy)]
pub struct HeadOutput {
    /// `[N, T', K]`
    pub frame_probs: Var,
    /// `[N, K]`
    pub clip_probs: Var,
}

impl SedModel {
    /// Registers parameters for `F`, the listed heads and (when
    /// `cfg.adv_mode` is not `None`) `D`, drawing initial values from `seed`.
    pub fn build<T: Scalar>(
        cfg: &ModelConfig,
        n_mels: usize,
        heads: &[Head],
        seed: u64,
        store: &mut ParamStore<T>,
    ) -> Result<Self> {
        cfg.validate()?;
        let bins = cfg.pooled_bins(n_mels)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = cfg.kernel_size;

        let mut conv = Vec::new();
        let mut cin = 1;
        for (i, b) in cfg.cnn_blocks.iter().enumerate() {
            let fan_in = cin * k * k;
            let w = store.insert_uniform(&format!("F.conv{i}.weight"), &[b.channels, cin, k, k], fan_in, &mut rng)?;
            let bias = store.insert_uniform(&format!("F.conv{i}.bias"), &[b.channels], fan_in, &mut rng)?;
            conv.push((w, bias));
            cin = b.channels;
        }

        let h = cfg.gru_hidden;
        let mut gru = Vec::new();
        let mut input = cin * bins;
        for layer in 0..cfg.gru_layers {
            let mut dir = |name: &str| -> Result<GruDirection> {
                let p = format!("F.gru{layer}.{name}");
                Ok(GruDirection {
                    w_ih: store.insert_uniform(&format!("{p}.w_ih"), &[input, 3 * h], h, &mut rng)?,
                    w_hh: store.insert_uniform(&format!("{p}.w_hh"), &[h, 3 * h], h, &mut rng)?,
                    b_ih: store.insert_uniform(&format!("{p}.b_ih"), &[3 * h], h, &mut rng)?,
                    b_hh: store.insert_uniform(&format!("{p}.b_hh"), &[3 * h], h, &mut rng)?,
                })
            };
            gru.push([dir("fwd")?, dir("bwd")?]);
            input = 2 * h;
        }

        let width = cfg.feature_width();
        let nk = cfg.n_classes;
        let mut head_params = Vec::new();
        for &head in heads {
            if head_params.iter().any(|p: &HeadParams| p.head == head) {
                continue;
            }
            let p = head.prefix();
            head_params.push(HeadParams {
                head,
                frame_w: store.insert_uniform(&format!("{p}.frame.weight"), &[width, nk], width, &mut rng)?,
                frame_b: store.insert_uniform(&format!("{p}.frame.bias"), &[nk], width, &mut rng)?,
                att_w: store.insert_uniform(&format!("{p}.att.weight"), &[width, nk], width, &mut rng)?,
                att_b: store.insert_uniform(&format!("{p}.att.bias"), &[nk], width, &mut rng)?,
            });
        }

        let domain = if cfg.adv_mode == AdvMode::None {
            None
        } else {
            let hidden = if cfg.domain_hidden == 0 { width } else { cfg.domain_hidden };
            Some(DomainParams {
                w1: store.insert_uniform("D.fc1.weight", &[width, hidden], width, &mut rng)?,
                b1: store.insert_uniform("D.fc1.bias", &[hidden], width, &mut rng)?,
                w2: store.insert_uniform("D.fc2.weight", &[hidden, 1], hidden, &mut rng)?,
                b2: store.insert_uniform("D.fc2.bias", &[1], hidden, &mut rng)?,
            })
        };

        Ok(Self {
            cfg: cfg.clone(),
            n_mels,
            conv,
            gru,
            heads: head_params,
            domain,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn n_mels(&self) -> usize {
        self.n_mels
    }

    pub fn has_head(&self, head: Head) -> bool {
        self.heads.iter().any(|p| p.head == head)
    }

    pub fn has_domain(&self) -> bool {
        self.domain.is_some()
    }

    /// Weight of a head's frame-classification layer (the "first layer"
    /// whose similarity the labeler-diversity term penalizes).
    pub fn frame_weight(&self, head: Head) -> Option<ParamId> {
        self.heads.iter().find(|p| p.head == head).map(|p| p.frame_w)
    }

    /// Shared-extractor parameter ids.
    pub fn feature_params(&self) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = self.conv.iter().flat_map(|&(w, b)| [w, b]).collect();
        for layer in &self.gru {
            for d in layer {
                ids.extend([d.w_ih, d.w_hh, d.b_ih, d.b_hh]);
            }
        }
        ids
    }

    pub fn head_params(&self, head: Head) -> Vec<ParamId> {
        self.heads
            .iter()
            .filter(|p| p.head == head)
            .flat_map(|p| [p.frame_w, p.frame_b, p.att_w, p.att_b])
            .collect()
    }

    pub fn domain_params(&self) -> Vec<ParamId> {
        self.domain
            .as_ref()
            .map(|d| vec![d.w1, d.b1, d.w2, d.b2])
            .unwrap_or_default()
    }

    /// `[N, T, B]` log-mel batch -> `[N, T', H]` features.
    pub fn extract_features<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, input: Var) -> Result<Var> {
        let s = g.shape(input).to_vec();
        if s.len() != 3 || s[2] != self.n_mels {
            return Err(shape_err(format!(
                "model expects [N, T, {}] spectrogram batch, got {s:?}",
                self.n_mels
            )));
        }
        if s[1] < self.cfg.time_pool_factor {
            return Err(shape_err(format!("{} frames cannot be pooled by {}", s[1], self.cfg.time_pool_factor)));
        }
        let (n, t) = (s[0], s[1]);
        let mut x = g.reshape(input, &[n, 1, t, self.n_mels])?;
        for (i, (&(w, b), block)) in self.conv.iter().zip(&self.cfg.cnn_blocks).enumerate() {
            let wv = g.param(store, w);
            let bv = g.param(store, b);
            x = g.conv2d(x, wv, bv)?;
            x = g.relu(x)?;
            let tp = if i == 0 { self.cfg.time_pool_factor } else { 1 };
            x = g.max_pool2d(x, tp, block.freq_pool)?;
        }
        let cs = g.shape(x).to_vec();
        let (c, tt, f) = (cs[1], cs[2], cs[3]);
        x = g.permute(x, &[0, 2, 1, 3])?;
        x = g.reshape(x, &[n, tt, c * f])?;
        for layer in &self.gru {
            x = self.bigru_layer(g, store, layer, x)?;
        }
        Ok(x)
    }

    fn bigru_layer<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        dirs: &[GruDirection; 2],
        seq: Var,
    ) -> Result<Var> {
        let s = g.shape(seq).to_vec();
        let (n, t, width) = (s[0], s[1], s[2]);
        let h = self.cfg.gru_hidden;
        let steps: Vec<Var> = (0..t)
            .map(|i| {
                let sl = g.slice(seq, 1, i, 1)?;
                g.reshape(sl, &[n, width])
            })
            .collect::<Result<_>>()?;
        let mut outputs = Vec::with_capacity(2);
        for (d, dir) in dirs.iter().enumerate() {
            let w_ih = g.param(store, dir.w_ih);
            let w_hh = g.param(store, dir.w_hh);
            let b_ih = g.param(store, dir.b_ih);
            let b_hh = g.param(store, dir.b_hh);
            let mut state = g.input(Tensor::zeros(&[n, h]));
            let mut hs = vec![state; t];
            let order: Box<dyn Iterator<Item = usize>> = if d == 0 { Box::new(0..t) } else { Box::new((0..t).rev()) };
            for i in order {
                state = g.gru_cell(steps[i], state, w_ih, w_hh, b_ih, b_hh)?;
                hs[i] = g.reshape(state, &[n, 1, h])?;
            }
            outputs.push(g.concat(&hs, 1)?);
        }
        g.concat(&outputs, 2)
    }

    /// Frame probabilities and attention-pooled clip probabilities of a head.
    pub fn classify_head<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        features: Var,
        head: Head,
    ) -> Result<HeadOutput> {
        let p = self
            .heads
            .iter()
            .find(|p| p.head == head)
            .ok_or_else(|| Error::Config(format!("model has no {head:?} head")))?;
        let s = g.shape(features).to_vec();
        let (n, t, width) = (s[0], s[1], s[2]);
        let k = self.cfg.n_classes;
        let flat = g.reshape(features, &[n * t, width])?;
        let fw = g.param(store, p.frame_w);
        let fb = g.param(store, p.frame_b);
        let logits = g.matmul(flat, fw)?;
        let logits = g.add_bias(logits, fb)?;
        let probs = g.sigmoid(logits)?;
        let frame_probs = g.reshape(probs, &[n, t, k])?;
        let clip_probs = match self.cfg.clip_pooling {
            ClipPooling::Mean => g.mean_axis(frame_probs, 1)?,
            ClipPooling::Attention => {
                let aw = g.param(store, p.att_w);
                let ab = g.param(store, p.att_b);
                let a = g.matmul(flat, aw)?;
                let a = g.add_bias(a, ab)?;
                let a = g.reshape(a, &[n, t, k])?;
                let weights = g.softmax(a, 1)?;
                let weighted = g.mul(weights, frame_probs)?;
                g.sum_axis(weighted, 1)?
            }
        };
        Ok(HeadOutput {
            frame_probs,
            clip_probs,
        })
    }

    /// Domain probabilities (synthetic = 1): `[N]` for whole-clip mode,
    /// `[N, T']` for per-frame mode. Features pass through gradient reversal
    /// with coefficient `alpha` before any pooling.
    pub fn classify_domain<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, features: Var) -> Result<Var> {
        let d = match (&self.domain, self.cfg.adv_mode) {
            (Some(d), mode) if mode != AdvMode::None => d,
            _ => return Err(Error::Config("domain classifier requested with adv_mode none".into())),
        };
        let s = g.shape(features).to_vec();
        let (n, t, width) = (s[0], s[1], s[2]);
        let reversed = g.grad_reverse(features, T::from_f64(self.cfg.alpha))?;
        let (rows, x) = match self.cfg.adv_mode {
            AdvMode::Time => (n * t, g.reshape(reversed, &[n * t, width])?),
            _ => (n, g.mean_axis(reversed, 1)?),
        };
        let w1 = g.param(store, d.w1);
        let b1 = g.param(store, d.b1);
        let w2 = g.param(store, d.w2);
        let b2 = g.param(store, d.b2);
        let hidden = g.matmul(x, w1)?;
        let hidden = g.add_bias(hidden, b1)?;
        let hidden = g.relu(hidden)?;
        let out = g.matmul(hidden, w2)?;
        let out = g.add_bias(out, b2)?;
        let probs = g.sigmoid(out)?;
        debug_assert_eq!(g.shape(probs), [rows, 1]);
        match self.cfg.adv_mode {
            AdvMode::Time => g.reshape(probs, &[n, t]),
            _ => g.reshape(probs, &[n]),
        }
    }
}

/// Detached per-clip output of one head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FramePrediction {
    pub n_frames: usize,
    pub n_classes: usize,
    /// Row-major `[n_frames, n_classes]`.
    pub frame_probs: Vec<f32>,
    pub clip_probs: Vec<f32>,
    pub frame_hop_s: f64,
}

impl FramePrediction {
    pub fn frame(&self, t: usize, k: usize) -> f32 {
        self.frame_probs[t * self.n_classes + k]
    }

    /// Per-clip predictions from batched head outputs.
    pub fn split_batch(frame: &Tensor<f32>, clip: &Tensor<f32>, frame_hop_s: f64) -> Vec<Self> {
        let s = frame.shape();
        let (n, t, k) = (s[0], s[1], s[2]);
        (0..n)
            .map(|i| FramePrediction {
                n_frames: t,
                n_classes: k,
                frame_probs: frame.data()[i * t * k..(i + 1) * t * k].to_vec(),
                clip_probs: clip.data()[i * k..(i + 1) * k].to_vec(),
                frame_hop_s,
            })
            .collect()
    }
}

/// Detached domain output.
#[derive(Debug, Clone, PartialEq)]
pub enum DomainPrediction {
    Whole(f32),
    Time(Vec<f32>),
}

impl SedModel {
    /// Forward-only prediction of `head` for a batch of `[T, B]` spectrograms.
    pub fn predict(
        &self,
        store: &ParamStore<f32>,
        batch: &Tensor<f32>,
        head: Head,
        frame_hop_s: f64,
    ) -> Result<Vec<FramePrediction>> {
        let mut g = Graph::inference();
        let x = g.input(batch.clone());
        let f = self.extract_features(&mut g, store, x)?;
        let out = self.classify_head(&mut g, store, f, head)?;
        Ok(FramePrediction::split_batch(
            g.value(out.frame_probs),
            g.value(out.clip_probs),
            frame_hop_s,
        ))
    }

    /// Forward-only predictions of several heads from one shared feature pass.
    pub fn predict_heads(
        &self,
        store: &ParamStore<f32>,
        batch: &Tensor<f32>,
        heads: &[Head],
        frame_hop_s: f64,
    ) -> Result<Vec<Vec<FramePrediction>>> {
        let mut g = Graph::inference();
        let x = g.input(batch.clone());
        let f = self.extract_features(&mut g, store, x)?;
        heads
            .iter()
            .map(|&h| {
                let out = self.classify_head(&mut g, store, f, h)?;
                Ok(FramePrediction::split_batch(
                    g.value(out.frame_probs),
                    g.value(out.clip_probs),
                    frame_hop_s,
                ))
            })
            .collect()
    }

    /// Forward-only domain prediction for a batch.
    pub fn predict_domain(&self, store: &ParamStore<f32>, batch: &Tensor<f32>) -> Result<Vec<DomainPrediction>> {
        let mut g = Graph::inference();
        let x = g.input(batch.clone());
        let f = self.extract_features(&mut g, store, x)?;
        let d = self.classify_domain(&mut g, store, f)?;
        let v = g.value(d);
        Ok(match self.cfg.adv_mode {
            AdvMode::Time => {
                let t = v.shape()[1];
                v.data().chunks(t).map(|c| DomainPrediction::Time(c.to_vec())).collect()
            }
            _ => v.data().iter().map(|&p| DomainPrediction::Whole(p)).collect(),
        })
    }
}
