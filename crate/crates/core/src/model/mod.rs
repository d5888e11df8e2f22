//! The attention model: frame features in, per-frame importance scores out.
//!
//! ```text
//! X (T×D) ─ replicate ×3, prepend CLS ─> E (3×(T+1)×D)
//! E ─ W_K ─> E_K ─ CNN ─ adaptive avg pool ─ + E_K[0] ─ LayerNorm ─> P
//! E[0] ─ W_V ─> E_V
//! P + PE ─ softmax over frames / over dims ─ dropout ─ ⊙ E_V, summed ─> M
//! M ─ adaptive avg pool (T+1 -> T rows) ─ classifier ─> S ∈ (0,1)^T
//! ```

mod checkpoint;
mod config;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use config::{Mixing, ModelConfig, Variant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backbone::{build_backbone, Network};
use crate::error::{Error, Result};
use crate::macs::{LayerKind, NetworkDescription, Phase};
use crate::params::{Bound, ParamStore};
use crate::tensor::{Graph, Tensor, Var};

/// `T×D` per-frame features.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSequence(Tensor);

impl FeatureSequence {
    pub fn new(values: Tensor) -> Result<Self> {
        if values.ndim() != 2 {
            return Err(Error::shape(format!(
                "feature sequence must be T×D, got {:?}",
                values.shape()
            )));
        }
        if !values.is_finite() {
            return Err(Error::invalid("feature sequence contains non-finite values"));
        }
        Ok(Self(values))
    }

    pub fn from_rows(frames: usize, dim: usize, data: Vec<f32>) -> Result<Self> {
        Self::new(Tensor::new(&[frames, dim], data)?)
    }

    pub fn frames(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }
}

/// Per-frame scores, each strictly inside (0, 1).
#[derive(Clone, Debug, PartialEq)]
pub struct ImportanceScores(pub Vec<f32>);

impl ImportanceScores {
    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Fixed sinusoidal table indexed by (frame position, feature dimension):
/// `PE[t, 2i] = sin(t / 10000^(2i/d))`, `PE[t, 2i+1] = cos(t / 10000^(2i/d))`.
pub fn positional_encoding(len: usize, dim: usize) -> Result<Tensor> {
    if dim == 0 || !dim.is_multiple_of(2) {
        return Err(Error::invalid(format!(
            "positional encoding needs an even dimension, got {dim}"
        )));
    }
    if len == 0 {
        return Err(Error::invalid("positional encoding needs at least one row"));
    }
    Ok(Tensor::from_fn(&[len, dim], |idx| {
        let (t, j) = (idx / dim, idx % dim);
        let pair = (j / 2 * 2) as f64;
        let angle = t as f64 / 10000f64.powf(pair / dim as f64);
        if j % 2 == 0 {
            angle.sin() as f32
        } else {
            angle.cos() as f32
        }
    }))
}

/// Stack `x` three times along channels and, when given, prepend the CLS row:
/// `3×T×D` features become `3×(T+1)×D`.
pub fn embed(g: &mut Graph, x: Var, cls: Option<Var>) -> Result<Var> {
    let (t, d) = match g.shape(x) {
        [t, d] => (*t, *d),
        s => return Err(Error::shape(format!("embed expects T×D features, got {s:?}"))),
    };
    if let Some(c) = cls {
        if g.shape(c) != [3, 1, d] {
            return Err(Error::shape(format!(
                "CLS token shape {:?} does not match feature dim {d}",
                g.shape(c)
            )));
        }
    }
    let one = g.reshape(x, &[1, t, d])?;
    let stacked = g.concat(&[one, one, one], 0)?;
    match cls {
        Some(c) => g.concat(&[c, stacked], 1),
        None => Ok(stacked),
    }
}

/// Key features for all three channels (`E W_K`) and value features from the
/// first channel only (`E[0] W_V`). `None` weights mean identity projections.
pub fn key_value_embed(
    g: &mut Graph,
    e: Var,
    key: Option<Var>,
    value: Option<Var>,
) -> Result<(Var, Var)> {
    let [c, rows, d] = *g.shape(e) else {
        return Err(Error::shape(format!(
            "key/value embedding expects 3×(T+1)×D, got {:?}",
            g.shape(e)
        )));
    };
    let ek = match key {
        Some(w) => {
            let flat = g.reshape(e, &[c * rows, d])?;
            let proj = g.matmul(flat, w)?;
            g.reshape(proj, &[c, rows, d])?
        }
        None => e,
    };
    let first = g.narrow(e, 0, 0, 1)?;
    let first = g.reshape(first, &[rows, d])?;
    let ev = match value {
        Some(w) => g.matmul(first, w)?,
        None => first,
    };
    Ok((ek, ev))
}

/// Output of [`mix`]: the pooled `T×D` features plus the pre-dropout
/// attention maps that produced them.
#[derive(Clone, Copy, Debug)]
pub struct Mixed {
    pub output: Var,
    /// Softmax over frames (each column sums to 1).
    pub att_time: Option<Var>,
    /// Softmax over dimensions (each row sums to 1).
    pub att_dim: Option<Var>,
}

/// Softmax-based mixing of the positioned attention map with the value features,
/// followed by adaptive average pooling from `rows` down to `out_rows` rows.
#[allow(clippy::too_many_arguments)]
pub fn mix<R: Rng + ?Sized>(
    g: &mut Graph,
    p_pos: Var,
    ev: Var,
    mixing: Mixing,
    out_rows: usize,
    rate: f32,
    training: bool,
    rng: &mut R,
) -> Result<Mixed> {
    if g.shape(p_pos) != g.shape(ev) {
        return Err(Error::shape(format!(
            "attention map {:?} and value features {:?} differ",
            g.shape(p_pos),
            g.shape(ev)
        )));
    }
    let (mut att_time, mut att_dim) = (None, None);
    let m = match mixing {
        Mixing::TimeAndDim => {
            let at = g.softmax(p_pos, 0)?;
            let ad = g.softmax(p_pos, 1)?;
            att_time = Some(at);
            att_dim = Some(ad);
            let at = g.dropout(at, rate, training, rng)?;
            let ad = g.dropout(ad, rate, training, rng)?;
            let a = g.mul(at, ev)?;
            let b = g.mul(ad, ev)?;
            g.add(a, b)?
        }
        Mixing::TimeOnly => {
            let at = g.softmax(p_pos, 0)?;
            att_time = Some(at);
            let at = g.dropout(at, rate, training, rng)?;
            g.mul(at, ev)?
        }
        Mixing::None => p_pos,
    };
    let [rows, d] = *g.shape(m) else {
        unreachable!("checked above")
    };
    let output = if rows == out_rows {
        m
    } else {
        let m3 = g.reshape(m, &[1, rows, d])?;
        let pooled = g.adaptive_avg_pool2d(m3, (out_rows, d))?;
        g.reshape(pooled, &[out_rows, d])?
    };
    Ok(Mixed {
        output,
        att_time,
        att_dim,
    })
}

/// Handles for the head parameters used by [`classify`].
#[derive(Clone, Copy, Debug)]
pub struct ClassifierVars {
    pub fc1_weight: Var,
    pub fc1_bias: Var,
    pub norm_gamma: Var,
    pub norm_beta: Var,
    pub fc2_weight: Var,
    pub fc2_bias: Var,
}

/// `S = sigmoid(FC2(LayerNorm(Dropout(ReLU(FC1(m))))))`, returned as a `T×1` node.
pub fn classify<R: Rng + ?Sized>(
    g: &mut Graph,
    m: Var,
    vars: &ClassifierVars,
    eps: f32,
    rate: f32,
    training: bool,
    rng: &mut R,
) -> Result<Var> {
    let h = g.linear(m, vars.fc1_weight, Some(vars.fc1_bias))?;
    let h = g.relu(h);
    let h = g.dropout(h, rate, training, rng)?;
    let r = g.layer_norm(h, vars.norm_gamma, vars.norm_beta, eps)?;
    let s = g.linear(r, vars.fc2_weight, Some(vars.fc2_bias))?;
    Ok(g.sigmoid(s))
}

/// Mean squared error between predicted scores (any shape with `T` elements)
/// and a target vector.
pub fn mse_loss(g: &mut Graph, pred: Var, target: &[f32]) -> Result<Var> {
    let n = g.value(pred).numel();
    if n != target.len() {
        return Err(Error::shape(format!(
            "prediction has {n} scores, target has {}",
            target.len()
        )));
    }
    let shape = g.shape(pred).to_vec();
    let t = g.constant(Tensor::new(&shape, target.to_vec())?);
    let diff = g.sub(pred, t)?;
    let sq = g.mul(diff, diff)?;
    Ok(g.mean(sq))
}

/// Plain-value MSE, accumulated in `f64`.
pub fn mse(pred: &[f32], target: &[f32]) -> Result<f64> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(Error::shape(format!(
            "mse over {} predictions and {} targets",
            pred.len(),
            target.len()
        )));
    }
    let s: f64 = pred
        .iter()
        .zip(target)
        .map(|(&p, &t)| (p as f64 - t as f64).powi(2))
        .sum();
    Ok(s / pred.len() as f64)
}

/// Intermediate nodes of one forward pass, kept for inspection and tests.
#[derive(Clone, Copy, Debug)]
pub struct Stages {
    pub embedded: Var,
    pub keys: Var,
    pub values: Var,
    pub backbone_out: Var,
    pub attention: Var,
    pub positioned: Var,
    pub att_time: Option<Var>,
    pub att_dim: Option<Var>,
    pub mixed: Var,
}

/// A recorded forward pass.
pub struct ForwardPass {
    pub graph: Graph,
    pub scores: Var,
    /// Parameter handles in [`CstaModel::named_params`] order.
    pub param_vars: Vec<Var>,
    pub stages: Stages,
}

impl ForwardPass {
    pub fn scores(&self) -> ImportanceScores {
        ImportanceScores(self.graph.value(self.scores).data().to_vec())
    }
}

pub const BACKBONE_PREFIX: &str = "backbone.";

#[derive(Clone, Debug, PartialEq)]
pub struct CstaModel {
    config: ModelConfig,
    pub backbone: Network,
    /// Everything outside the backbone.
    pub head: ParamStore,
}

impl CstaModel {
    /// Build a freshly initialized model. Deterministic in `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let d = config.feature_dim;
        let backbone = build_backbone(&config.backbone_spec())?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let uniform = |rng: &mut ChaCha8Rng, shape: &[usize], bound: f32| {
            Tensor::from_fn(shape, |_| rng.random_range(-bound..bound))
        };
        let emb_bound = 1.0 / (d as f32).sqrt();
        let mut head = ParamStore::new();
        let v = config.variant;
        if v.cls_token {
            head.insert("cls", uniform(&mut rng, &[3, 1, d], emb_bound))?;
        }
        if v.key_value_embedding {
            head.insert("key.weight", uniform(&mut rng, &[d, d], emb_bound))?;
            head.insert("value.weight", uniform(&mut rng, &[d, d], emb_bound))?;
        }
        if v.skip_connection {
            head.insert("attn_norm.gamma", Tensor::ones(&[d]))?;
            head.insert("attn_norm.beta", Tensor::zeros(&[d]))?;
        }
        // Xavier-uniform for the classifier layers.
        let xavier = |fan_in: usize, fan_out: usize| (6.0 / (fan_in + fan_out) as f32).sqrt();
        head.insert("fc1.weight", uniform(&mut rng, &[d, d], xavier(d, d)))?;
        head.insert("fc1.bias", Tensor::zeros(&[d]))?;
        head.insert("cls_norm.gamma", Tensor::ones(&[d]))?;
        head.insert("cls_norm.beta", Tensor::zeros(&[d]))?;
        head.insert("fc2.weight", uniform(&mut rng, &[d, 1], xavier(d, 1)))?;
        head.insert("fc2.bias", Tensor::zeros(&[1]))?;
        Ok(Self {
            config,
            backbone,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Every parameter, backbone first, under its checkpoint name.
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        self.backbone
            .params
            .iter()
            .map(|(n, t)| (format!("{BACKBONE_PREFIX}{n}"), t))
            .chain(self.head.iter().map(|(n, t)| (n.to_string(), t)))
            .collect()
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.backbone
            .params
            .iter_mut()
            .map(|(_, t)| t)
            .chain(self.head.iter_mut().map(|(_, t)| t))
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        match name.strip_prefix(BACKBONE_PREFIX) {
            Some(rest) => self.backbone.params.get_mut(rest),
            None => self.head.get_mut(name),
        }
    }

    pub fn num_params(&self) -> usize {
        self.backbone.params.num_elements() + self.head.num_elements()
    }

    /// Record a forward pass. Parameters are trainable leaves when `trainable`.
    pub fn forward_graph<R: Rng + ?Sized>(
        &self,
        x: &FeatureSequence,
        training: bool,
        trainable: bool,
        rng: &mut R,
    ) -> Result<ForwardPass> {
        let d = self.config.feature_dim;
        if x.dim() != d {
            return Err(Error::shape(format!(
                "model expects {d}-dimensional features, got {}",
                x.dim()
            )));
        }
        let t = x.frames();
        let v = self.config.variant;
        let (rate, eps) = (self.config.dropout, self.config.layer_norm_eps);

        let mut g = Graph::new();
        let bb = self.backbone.params.bind(&mut g, trainable);
        let hb = self.head.bind(&mut g, trainable);
        let head = |name: &str| hb.var(&self.head, name);
        let opt = |name: &str| self.head.position(name).map(|i| hb.vars()[i]);

        let xv = g.constant(x.tensor().clone());
        let embedded = embed(&mut g, xv, opt("cls"))?;
        let rows = g.shape(embedded)[1];
        let (keys, values) = key_value_embed(&mut g, embedded, opt("key.weight"), opt("value.weight"))?;

        let (attention, backbone_out) =
            self.attention_map(&mut g, &bb, keys, opt("attn_norm.gamma").zip(opt("attn_norm.beta")))?;

        let positioned = if v.positional_encoding {
            let pe = g.constant(positional_encoding(rows, d)?);
            g.add(attention, pe)?
        } else {
            attention
        };
        let Mixed {
            output: mixed,
            att_time,
            att_dim,
        } = mix(&mut g, positioned, values, v.mixing, t, rate, training, rng)?;
        let cv = ClassifierVars {
            fc1_weight: head("fc1.weight"),
            fc1_bias: head("fc1.bias"),
            norm_gamma: head("cls_norm.gamma"),
            norm_beta: head("cls_norm.beta"),
            fc2_weight: head("fc2.weight"),
            fc2_bias: head("fc2.bias"),
        };
        let s = classify(&mut g, mixed, &cv, eps, rate, training, rng)?;
        let scores = g.reshape(s, &[t])?;

        let mut param_vars = bb.vars().to_vec();
        param_vars.extend_from_slice(hb.vars());
        Ok(ForwardPass {
            graph: g,
            scores,
            param_vars,
            stages: Stages {
                embedded,
                keys,
                values,
                backbone_out,
                attention,
                positioned,
                att_time,
                att_dim,
                mixed,
            },
        })
    }

    /// CNN over the keys, pooled back to `(T+1)×1`, transposed to `(T+1)×D`,
    /// then (optionally) added to the first key channel and layer-normalized.
    fn attention_map(
        &self,
        g: &mut Graph,
        bb: &Bound,
        keys: Var,
        norm: Option<(Var, Var)>,
    ) -> Result<(Var, Var)> {
        let [_, rows, d] = *g.shape(keys) else {
            unreachable!("keys are 3-D")
        };
        let cnn = self.backbone.forward(g, bb, keys)?;
        let pooled = g.adaptive_avg_pool2d(cnn, (rows, 1))?;
        let flat = g.reshape(pooled, &[d, rows])?;
        let p = g.transpose(flat)?;
        let p = match norm {
            Some((gamma, beta)) => {
                let first = g.narrow(keys, 0, 0, 1)?;
                let first = g.reshape(first, &[rows, d])?;
                let skip = g.add(p, first)?;
                g.layer_norm(skip, gamma, beta, self.config.layer_norm_eps)?
            }
            None => p,
        };
        Ok((p, cnn))
    }

    pub fn forward<R: Rng + ?Sized>(
        &self,
        x: &FeatureSequence,
        training: bool,
        rng: &mut R,
    ) -> Result<ImportanceScores> {
        Ok(self.forward_graph(x, training, false, rng)?.scores())
    }

    /// Deterministic inference (dropout off).
    pub fn predict(&self, x: &FeatureSequence) -> Result<ImportanceScores> {
        // the RNG is never drawn from when not training
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        self.forward(x, false, &mut rng)
    }

    /// Layer chain for MAC counting at `frames` input frames.
    pub fn describe(&self, frames: usize) -> NetworkDescription {
        let d = self.config.feature_dim;
        let v = self.config.variant;
        let rows = frames + usize::from(v.cls_token);
        let sp = Phase::ScorePrediction;
        let mut desc = NetworkDescription::new();
        desc.push("embed", LayerKind::Input(vec![3, rows, d]), sp);
        if v.key_value_embedding {
            desc.push(
                "key",
                LayerKind::Linear {
                    in_features: d,
                    out_features: d,
                },
                sp,
            );
        }
        desc.extend(self.backbone.describe("backbone."));
        desc.push(
            "attn_pool",
            LayerKind::AdaptiveAvgPool2d { target: (rows, 1) },
            sp,
        );
        desc.push("attn_flatten", LayerKind::Reshape(vec![d, rows]), sp);
        desc.push("attn_transpose", LayerKind::Transpose2d, sp);
        desc.push("attn_skip_norm_pe", LayerKind::Elementwise, sp);
        if v.key_value_embedding {
            desc.push("value_input", LayerKind::Input(vec![rows, d]), sp);
            desc.push(
                "value",
                LayerKind::Linear {
                    in_features: d,
                    out_features: d,
                },
                sp,
            );
        }
        desc.push("mix", LayerKind::Elementwise, sp);
        desc.push("mix_pool_input", LayerKind::Reshape(vec![1, rows, d]), sp);
        desc.push(
            "mix_pool",
            LayerKind::AdaptiveAvgPool2d {
                target: (frames, d),
            },
            sp,
        );
        desc.push("mix_flatten", LayerKind::Reshape(vec![frames, d]), sp);
        desc.push(
            "fc1",
            LayerKind::Linear {
                in_features: d,
                out_features: d,
            },
            sp,
        );
        desc.push("relu_dropout_norm", LayerKind::Elementwise, sp);
        desc.push(
            "fc2",
            LayerKind::Linear {
                in_features: d,
                out_features: 1,
            },
            sp,
        );
        desc.push("sigmoid", LayerKind::Elementwise, sp);
        desc
    }
}
