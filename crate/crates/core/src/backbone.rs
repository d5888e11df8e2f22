//! The trainable 2D CNN that reads the stacked frame-feature image.
//!
//! A stack of `conv(k×k, same padding) -> ReLU -> [2×2 ceil-mode max pool]`
//! stages. The last stage has no ReLU so the map it hands to the attention
//! branch is signed. Total spatial reduction equals `2^(#pooling stages)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::macs::{LayerKind, NetworkDescription, Phase};
use crate::params::{Bound, ParamStore};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSpec {
    pub kernel: usize,
    pub channels: usize,
    pub pool: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneSpec {
    pub in_channels: usize,
    /// Feature dimension `D`; the last stage must produce this many channels.
    pub out_channels: usize,
    /// Reduction ratio `r`, a power of two.
    pub reduction: usize,
    pub stages: Vec<StageSpec>,
    pub bias: bool,
    pub seed: u64,
}

impl BackboneSpec {
    /// Default stack: widths 32, 64, 128 then `D`, with one 2× pool on each of
    /// the first `log2(r)` stages. Reductions beyond 16 append extra `D`-wide
    /// stages to carry the remaining pools.
    pub fn standard(feature_dim: usize, reduction: usize, seed: u64) -> Self {
        Self::with_widths(feature_dim, reduction, &[32, 64, 128], seed)
    }

    /// Like [`BackboneSpec::standard`] but with custom hidden widths.
    pub fn with_widths(feature_dim: usize, reduction: usize, hidden: &[usize], seed: u64) -> Self {
        let pools = reduction.max(1).trailing_zeros() as usize;
        let mut widths: Vec<usize> = hidden.to_vec();
        widths.push(feature_dim);
        while widths.len() < pools {
            widths.push(feature_dim);
        }
        let stages = widths
            .into_iter()
            .enumerate()
            .map(|(i, channels)| StageSpec {
                kernel: 3,
                channels,
                pool: i < pools,
            })
            .collect();
        Self {
            in_channels: 3,
            out_channels: feature_dim,
            reduction,
            stages,
            bias: true,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::invalid("backbone channel counts must be positive"));
        }
        if self.reduction == 0 || !self.reduction.is_power_of_two() {
            return Err(Error::invalid(format!(
                "reduction ratio must be a power of two, got {}",
                self.reduction
            )));
        }
        let Some(last) = self.stages.last() else {
            return Err(Error::invalid("backbone needs at least one stage"));
        };
        if last.channels != self.out_channels {
            return Err(Error::invalid(format!(
                "last stage has {} channels, expected {}",
                last.channels, self.out_channels
            )));
        }
        if let Some(s) = self.stages.iter().find(|s| s.kernel == 0 || s.kernel % 2 == 0) {
            return Err(Error::invalid(format!(
                "stage kernels must be odd, got {}",
                s.kernel
            )));
        }
        let stride: usize = self.stages.iter().map(|s| if s.pool { 2 } else { 1 }).product();
        if stride != self.reduction {
            return Err(Error::invalid(format!(
                "stage strides multiply to {stride}, expected reduction {}",
                self.reduction
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
struct ConvLayer {
    in_channels: usize,
    out_channels: usize,
    kernel: usize,
    relu: bool,
    pool: bool,
}

/// A built backbone: layer metadata plus its parameters (`{i}.weight`, `{i}.bias`).
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    spec: BackboneSpec,
    layers: Vec<ConvLayer>,
    pub params: ParamStore,
}

pub fn build_backbone(spec: &BackboneSpec) -> Result<Network> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut params = ParamStore::new();
    let mut layers = Vec::with_capacity(spec.stages.len());
    let mut c_in = spec.in_channels;
    for (i, stage) in spec.stages.iter().enumerate() {
        let fan_in = c_in * stage.kernel * stage.kernel;
        // Kaiming-uniform for ReLU: U(-sqrt(6/fan_in), sqrt(6/fan_in)).
        let bound = (6.0 / fan_in as f32).sqrt();
        let shape = [stage.channels, c_in, stage.kernel, stage.kernel];
        let w = Tensor::from_fn(&shape, |_| rng.random_range(-bound..bound));
        params.insert(format!("{i}.weight"), w)?;
        if spec.bias {
            let bb = 1.0 / (fan_in as f32).sqrt();
            let b = Tensor::from_fn(&[stage.channels], |_| rng.random_range(-bb..bb));
            params.insert(format!("{i}.bias"), b)?;
        }
        layers.push(ConvLayer {
            in_channels: c_in,
            out_channels: stage.channels,
            kernel: stage.kernel,
            relu: i + 1 < spec.stages.len(),
            pool: stage.pool,
        });
        c_in = stage.channels;
    }
    Ok(Network {
        spec: spec.clone(),
        layers,
        params,
    })
}

impl Network {
    pub fn spec(&self) -> &BackboneSpec {
        &self.spec
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Output spatial size for an `h×w` input.
    pub fn output_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let r = self.spec.reduction;
        (h.div_ceil(r), w.div_ceil(r))
    }

    /// Run the stack on a `C×H×W` input. `bound` must come from `self.params.bind`.
    pub fn forward(&self, g: &mut Graph, bound: &Bound, input: Var) -> Result<Var> {
        let shape = g.shape(input);
        if shape.len() != 3 || shape[0] != self.spec.in_channels {
            return Err(Error::shape(format!(
                "backbone expects {}×H×W input, got {shape:?}",
                self.spec.in_channels
            )));
        }
        let mut x = input;
        for (i, layer) in self.layers.iter().enumerate() {
            let w = bound.var(&self.params, &format!("{i}.weight"));
            let b = self
                .spec
                .bias
                .then(|| bound.var(&self.params, &format!("{i}.bias")));
            x = g.conv2d(x, w, b, 1, layer.kernel / 2)?;
            if layer.relu {
                x = g.relu(x);
            }
            if layer.pool {
                x = g.max_pool2d(x, 2, 2)?;
            }
        }
        Ok(x)
    }

    /// Forward pass on plain tensors, without recording gradients.
    pub fn infer(&self, input: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let bound = self.params.bind(&mut g, false);
        let x = g.constant(input.clone());
        let y = self.forward(&mut g, &bound, x)?;
        Ok(g.value(y).clone())
    }

    pub fn describe(&self, prefix: &str) -> NetworkDescription {
        let mut d = NetworkDescription::new();
        for (i, l) in self.layers.iter().enumerate() {
            d.push(
                format!("{prefix}{i}.conv"),
                LayerKind::Conv2d {
                    in_channels: l.in_channels,
                    out_channels: l.out_channels,
                    kernel: (l.kernel, l.kernel),
                    stride: 1,
                    padding: l.kernel / 2,
                },
                Phase::ScorePrediction,
            );
            if l.relu {
                d.push(format!("{prefix}{i}.relu"), LayerKind::Elementwise, Phase::ScorePrediction);
            }
            if l.pool {
                d.push(
                    format!("{prefix}{i}.pool"),
                    LayerKind::MaxPool2d { kernel: 2, stride: 2 },
                    Phase::ScorePrediction,
                );
            }
        }
        d
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ops;

    fn single_conv(d: usize) -> BackboneSpec {
        BackboneSpec {
            in_channels: 3,
            out_channels: d,
            reduction: 1,
            stages: vec![StageSpec {
                kernel: 3,
                channels: d,
                pool: false,
            }],
            bias: true,
            seed: 3,
        }
    }

    #[test]
    fn no_reduction_preserves_spatial_dims() {
        let net = build_backbone(&single_conv(8)).unwrap();
        let y = net.infer(&Tensor::ones(&[3, 6, 8])).unwrap();
        assert_eq!(y.shape(), &[8, 6, 8]);
    }

    #[test]
    fn reduction_four_uses_ceil_mode() {
        let spec = BackboneSpec::standard(16, 4, 0);
        let net = build_backbone(&spec).unwrap();
        let y = net.infer(&Tensor::ones(&[3, 9, 16])).unwrap();
        assert_eq!(y.shape(), &[16, 3, 4]);
        assert_eq!(net.output_hw(9, 16), (3, 4));
    }

    #[test]
    fn standard_reduction_32_multiplies_out() {
        let spec = BackboneSpec::standard(64, 32, 0);
        spec.validate().unwrap();
        assert_eq!(spec.stages.iter().filter(|s| s.pool).count(), 5);
        let net = build_backbone(&spec).unwrap();
        let y = net.infer(&Tensor::ones(&[3, 2, 64])).unwrap();
        assert_eq!(y.shape(), &[64, 1, 2]);
    }

    #[test]
    fn same_seed_same_parameters() {
        let spec = BackboneSpec::standard(16, 4, 11);
        assert_eq!(build_backbone(&spec).unwrap(), build_backbone(&spec).unwrap());
        let other = BackboneSpec { seed: 12, ..spec };
        assert_ne!(
            build_backbone(&other).unwrap().params,
            build_backbone(&BackboneSpec::standard(16, 4, 11)).unwrap().params
        );
    }

    #[test]
    fn inconsistent_specs_rejected() {
        let mut spec = BackboneSpec::standard(16, 4, 0);
        spec.reduction = 8;
        assert!(build_backbone(&spec).is_err());
        let mut spec = BackboneSpec::standard(16, 4, 0);
        spec.stages.last_mut().unwrap().channels = 15;
        assert!(build_backbone(&spec).is_err());
        let mut spec = BackboneSpec::standard(16, 4, 0);
        spec.reduction = 3;
        assert!(spec.validate().is_err());
    }

    #[test]
    fn zero_input_bias_free_gives_zero() {
        let mut spec = BackboneSpec::standard(16, 4, 5);
        spec.bias = false;
        let net = build_backbone(&spec).unwrap();
        let y = net.infer(&Tensor::zeros(&[3, 7, 16])).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matches_manual_layer_composition() {
        let spec = BackboneSpec::with_widths(8, 2, &[4], 21);
        let net = build_backbone(&spec).unwrap();
        let x = Tensor::from_fn(&[3, 5, 8], |i| ((i * 13) % 7) as f32 * 0.2 - 0.5);
        let p = |n: &str| net.params.get(n).unwrap();
        let h = ops::conv2d(&x, p("0.weight"), Some(p("0.bias")), 1, 1).unwrap();
        let h = ops::max_pool2d(&ops::relu(&h), 2, 2).unwrap();
        let y = ops::conv2d(&h, p("1.weight"), Some(p("1.bias")), 1, 1).unwrap();
        assert_eq!(net.infer(&x).unwrap(), y);
    }

    #[test]
    fn short_inputs_still_produce_a_map() {
        let net = build_backbone(&BackboneSpec::with_widths(8, 8, &[4, 4], 1)).unwrap();
        for t in 1..5 {
            let y = net.infer(&Tensor::ones(&[3, t + 1, 8])).unwrap();
            assert_eq!(y.shape()[0], 8);
            assert!(y.shape()[1] >= 1 && y.shape()[2] >= 1);
        }
    }

    #[test]
    fn rejects_wrong_channel_count() {
        let net = build_backbone(&single_conv(4)).unwrap();
        assert!(net.infer(&Tensor::ones(&[1, 4, 4])).is_err());
    }

    #[test]
    fn every_parameter_gets_gradient() {
        let net = build_backbone(&BackboneSpec::with_widths(8, 4, &[6, 6], 2)).unwrap();
        let mut g = Graph::new();
        let bound = net.params.bind(&mut g, true);
        let x = g.constant(Tensor::from_fn(&[3, 9, 8], |i| ((i * 31) % 17) as f32 / 8.0 - 1.0));
        let y = net.forward(&mut g, &bound, x).unwrap();
        let w = g.constant(Tensor::from_fn(g.shape(y), |i| (i % 5) as f32 - 2.0));
        let p = g.mul(y, w).unwrap();
        let loss = g.sum(p);
        let grads = g.backward(loss).unwrap();
        for (var, (name, _)) in bound.vars().iter().zip(net.params.iter()) {
            let gr = grads.get(*var).unwrap();
            assert!(gr.data().iter().any(|&v| v != 0.0), "{name} has zero gradient");
        }
    }
}
