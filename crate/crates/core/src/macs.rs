//! Multiply-accumulate accounting over a layer chain.
//!
//! Only convolutions and fully connected layers contribute; activations,
//! normalizations, softmax, pooling and element-wise products count zero.

use std::fmt;

use serde::Serialize;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Phase {
    /// Frozen per-frame feature extractor.
    FeatureExtraction,
    /// Everything from frame features to importance scores.
    ScorePrediction,
}

#[derive(Clone, Debug, PartialEq)]
pub enum LayerKind {
    /// Start a new branch from an explicit shape.
    Input(Vec<usize>),
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: (usize, usize),
        stride: usize,
        padding: usize,
    },
    /// Applied to the last axis; every leading index is a token.
    Linear {
        in_features: usize,
        out_features: usize,
    },
    /// Ceil-mode max pooling.
    MaxPool2d { kernel: usize, stride: usize },
    AdaptiveAvgPool2d { target: (usize, usize) },
    Reshape(Vec<usize>),
    Transpose2d,
    /// Any shape-preserving op (activation, normalization, softmax, dropout, sums).
    Elementwise,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerDesc {
    pub name: String,
    pub kind: LayerKind,
    pub phase: Phase,
}

impl LayerDesc {
    pub fn new(name: impl Into<String>, kind: LayerKind, phase: Phase) -> Self {
        Self {
            name: name.into(),
            kind,
            phase,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct NetworkDescription {
    pub layers: Vec<LayerDesc>,
}

impl NetworkDescription {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, kind: LayerKind, phase: Phase) {
        self.layers.push(LayerDesc::new(name, kind, phase));
    }

    pub fn extend(&mut self, other: NetworkDescription) {
        self.layers.extend(other.layers);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LayerMacs {
    pub name: String,
    pub phase: Phase,
    pub output_shape: Vec<usize>,
    pub macs: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MacReport {
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerMacs>,
    pub feature_extraction: u64,
    pub score_prediction: u64,
    pub total: u64,
}

fn unresolved(layer: &str, msg: impl fmt::Display) -> Error {
    Error::shape(format!("layer `{layer}`: {msg}"))
}

fn pooled_len(len: usize, kernel: usize, stride: usize) -> usize {
    if len <= kernel {
        1
    } else {
        (len - kernel).div_ceil(stride) + 1
    }
}

fn step(layer: &LayerDesc, shape: &[usize]) -> Result<(Vec<usize>, u64)> {
    let name = &layer.name;
    match &layer.kind {
        LayerKind::Input(s) => Ok((s.clone(), 0)),
        LayerKind::Conv2d {
            in_channels,
            out_channels,
            kernel: (kh, kw),
            stride,
            padding,
        } => {
            let [c, h, w] = shape else {
                return Err(unresolved(name, format!("conv expects C×H×W, got {shape:?}")));
            };
            if c != in_channels {
                return Err(unresolved(
                    name,
                    format!("expects {in_channels} channels, got {c}"),
                ));
            }
            if *stride == 0 || h + 2 * padding < *kh || w + 2 * padding < *kw {
                return Err(unresolved(name, "kernel does not fit the padded input"));
            }
            let oh = (h + 2 * padding - kh) / stride + 1;
            let ow = (w + 2 * padding - kw) / stride + 1;
            let macs = (out_channels * in_channels * kh * kw * oh * ow) as u64;
            Ok((vec![*out_channels, oh, ow], macs))
        }
        LayerKind::Linear {
            in_features,
            out_features,
        } => {
            let Some((&last, lead)) = shape.split_last() else {
                return Err(unresolved(name, "linear on an empty shape"));
            };
            if last != *in_features {
                return Err(unresolved(
                    name,
                    format!("expects last dim {in_features}, got {last}"),
                ));
            }
            let tokens: usize = lead.iter().product();
            let mut out = lead.to_vec();
            out.push(*out_features);
            Ok((out, (tokens * in_features * out_features) as u64))
        }
        LayerKind::MaxPool2d { kernel, stride } => {
            let [c, h, w] = shape else {
                return Err(unresolved(name, format!("pool expects C×H×W, got {shape:?}")));
            };
            Ok((
                vec![
                    *c,
                    pooled_len(*h, *kernel, *stride),
                    pooled_len(*w, *kernel, *stride),
                ],
                0,
            ))
        }
        LayerKind::AdaptiveAvgPool2d { target: (oh, ow) } => {
            let [c, _, _] = shape else {
                return Err(unresolved(name, format!("pool expects C×H×W, got {shape:?}")));
            };
            Ok((vec![*c, *oh, *ow], 0))
        }
        LayerKind::Reshape(s) => {
            if s.iter().product::<usize>() != shape.iter().product::<usize>() {
                return Err(unresolved(name, format!("cannot reshape {shape:?} to {s:?}")));
            }
            Ok((s.clone(), 0))
        }
        LayerKind::Transpose2d => {
            let [a, b] = shape else {
                return Err(unresolved(name, format!("transpose expects 2D, got {shape:?}")));
            };
            Ok((vec![*b, *a], 0))
        }
        LayerKind::Elementwise => Ok((shape.to_vec(), 0)),
    }
}

/// Walk the layer chain from `input_shape`, resolving every layer's output
/// shape and MAC count.
pub fn count_macs(desc: &NetworkDescription, input_shape: &[usize]) -> Result<MacReport> {
    let mut shape = input_shape.to_vec();
    let mut layers = Vec::with_capacity(desc.layers.len());
    let (mut fe, mut sp) = (0u64, 0u64);
    for layer in &desc.layers {
        let (next, macs) = step(layer, &shape)?;
        match layer.phase {
            Phase::FeatureExtraction => fe += macs,
            Phase::ScorePrediction => sp += macs,
        }
        layers.push(LayerMacs {
            name: layer.name.clone(),
            phase: layer.phase,
            output_shape: next.clone(),
            macs,
        });
        shape = next;
    }
    Ok(MacReport {
        input_shape: input_shape.to_vec(),
        layers,
        feature_extraction: fe,
        score_prediction: sp,
        total: fe + sp,
    })
}

/// Scale a count into a short human form (K/M/G).
pub fn human(macs: u64) -> String {
    let m = macs as f64;
    if m >= 1e9 {
        format!("{:.2}G", m / 1e9)
    } else if m >= 1e6 {
        format!("{:.2}M", m / 1e6)
    } else if m >= 1e3 {
        format!("{:.2}K", m / 1e3)
    } else {
        macs.to_string()
    }
}

impl MacReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,phase,output_shape,macs\n");
        for l in &self.layers {
            let shape: Vec<String> = l.output_shape.iter().map(|d| d.to_string()).collect();
            out.push_str(&format!(
                "{},{:?},{},{}\n",
                l.name,
                l.phase,
                shape.join("x"),
                l.macs
            ));
        }
        out.push_str(&format!("total_feature_extraction,,,{}\n", self.feature_extraction));
        out.push_str(&format!("total_score_prediction,,,{}\n", self.score_prediction));
        out.push_str(&format!("total,,,{}\n", self.total));
        out
    }
}

impl fmt::Display for MacReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "input shape {:?}", self.input_shape)?;
        for l in self.layers.iter().filter(|l| l.macs > 0) {
            writeln!(
                f,
                "  {:<28} {:>14} MACs  -> {:?}",
                l.name,
                l.macs,
                l.output_shape
            )?;
        }
        writeln!(
            f,
            "feature extraction: {} ({})",
            self.feature_extraction,
            human(self.feature_extraction)
        )?;
        writeln!(
            f,
            "score prediction:   {} ({})",
            self.score_prediction,
            human(self.score_prediction)
        )?;
        write!(f, "total:              {} ({})", self.total, human(self.total))
    }
}
