use serde::{Deserialize, Serialize};

use crate::backbone::BackboneSpec;
use crate::error::{Error, Result};
use crate::tensor::ops::LAYER_NORM_EPS;

/// How the attention map is turned into mixing weights.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mixing {
    /// `softmax over frames ⊙ V + softmax over dimensions ⊙ V`.
    TimeAndDim,
    /// `softmax over frames ⊙ V` only.
    TimeOnly,
    /// The attention map itself is passed to the classifier.
    None,
}

/// Which architectural pieces are switched on. [`Variant::full`] is the
/// default model; the other combinations exist for ablations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Variant {
    pub key_value_embedding: bool,
    pub positional_encoding: bool,
    pub cls_token: bool,
    pub skip_connection: bool,
    pub mixing: Mixing,
}

impl Variant {
    pub fn full() -> Self {
        Self {
            key_value_embedding: true,
            positional_encoding: true,
            cls_token: true,
            skip_connection: true,
            mixing: Mixing::TimeAndDim,
        }
    }

    /// CNN map straight into the classifier: no softmax, no CLS token, no
    /// key/value projections, no positional encoding, no skip connection.
    pub fn baseline() -> Self {
        Self {
            key_value_embedding: false,
            positional_encoding: false,
            cls_token: false,
            skip_connection: false,
            mixing: Mixing::None,
        }
    }
}

impl Default for Variant {
    fn default() -> Self {
        Self::full()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Frame feature dimension `D`.
    pub feature_dim: usize,
    /// Backbone reduction ratio `r`.
    pub reduction: usize,
    /// Backbone hidden stage widths; the final stage always has `D` channels.
    pub hidden_widths: Vec<usize>,
    pub dropout: f32,
    pub layer_norm_eps: f32,
    pub variant: Variant,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            feature_dim: 64,
            reduction: 32,
            hidden_widths: vec![32, 64, 128],
            dropout: 0.6,
            layer_norm_eps: LAYER_NORM_EPS,
            variant: Variant::full(),
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn new(feature_dim: usize, reduction: usize) -> Self {
        Self {
            feature_dim,
            reduction,
            ..Self::default()
        }
    }

    pub fn backbone_spec(&self) -> BackboneSpec {
        // backbone init stream is decorrelated from the head's
        let seed = self.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(1);
        BackboneSpec::with_widths(self.feature_dim, self.reduction, &self.hidden_widths, seed)
    }

    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 {
            return Err(Error::invalid("feature_dim must be positive"));
        }
        if self.variant.positional_encoding && !self.feature_dim.is_multiple_of(2) {
            return Err(Error::invalid(format!(
                "positional encoding needs an even feature_dim, got {}",
                self.feature_dim
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid(format!(
                "dropout must lie in [0, 1), got {}",
                self.dropout
            )));
        }
        if !(self.layer_norm_eps > 0.0) {
            return Err(Error::invalid("layer_norm_eps must be positive"));
        }
        self.backbone_spec().validate()
    }
}
