use alloc::format;

#[cfg(feature = "serde")]
use serde::{Deserialize, Serialize};

use crate::attention::EquScoreScale;
use crate::error::{Error, Result};

/// Symmetry group the equivariant stream respects.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize), serde(rename_all = "lowercase"))]
pub enum SymmetryMode {
    #[default]
    Se3,
    /// Adds reflections by centering `Zᴱ` channels before every
    /// equivariant projection.
    E3,
}

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize), serde(default))]
pub struct DropoutRates {
    pub embedding: f64,
    pub attention: f64,
    pub activation: f64,
    pub hidden: f64,
}

impl DropoutRates {
    pub const NONE: DropoutRates = DropoutRates {
        embedding: 0.0,
        attention: 0.0,
        activation: 0.0,
        hidden: 0.0,
    };

    pub fn uniform(rate: f64) -> Self {
        DropoutRates {
            embedding: rate,
            attention: rate,
            activation: rate,
            hidden: rate,
        }
    }
}

impl Default for DropoutRates {
    fn default() -> Self {
        DropoutRates::uniform(0.4)
    }
}

/// Per-module switches. A disabled sub-layer contributes a zero residual
/// branch; a disabled norm is the identity.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize), serde(default))]
pub struct Ablation {
    pub inv_self_attn: bool,
    pub equ_self_attn: bool,
    pub inv_cross_attn: bool,
    pub equ_cross_attn: bool,
    pub inv_ffn: bool,
    pub equ_ffn: bool,
    pub inv_ln: bool,
    pub equ_ln: bool,
    /// Master switch for the distance bias.
    pub structural_bias: bool,
    pub bias_inv_self: bool,
    pub bias_equ_self: bool,
    pub bias_inv_cross: bool,
    pub bias_equ_cross: bool,
}

impl Ablation {
    pub const ALL: Ablation = Ablation {
        inv_self_attn: true,
        equ_self_attn: true,
        inv_cross_attn: true,
        equ_cross_attn: true,
        inv_ffn: true,
        equ_ffn: true,
        inv_ln: true,
        equ_ln: true,
        structural_bias: true,
        bias_inv_self: true,
        bias_equ_self: true,
        bias_inv_cross: true,
        bias_equ_cross: true,
    };

    /// Every sub-layer and norm off; the blocks become the identity.
    pub const NONE: Ablation = Ablation {
        inv_self_attn: false,
        equ_self_attn: false,
        inv_cross_attn: false,
        equ_cross_attn: false,
        inv_ffn: false,
        equ_ffn: false,
        inv_ln: false,
        equ_ln: false,
        structural_bias: false,
        bias_inv_self: false,
        bias_equ_self: false,
        bias_inv_cross: false,
        bias_equ_cross: false,
    };
}

impl Default for Ablation {
    fn default() -> Self {
        Ablation::ALL
    }
}

/// Deliberate equivariance bugs used to prove the audits can fail.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize), serde(rename_all = "kebab-case"))]
pub enum Mutation {
    /// Elementwise GELU on the equivariant input features.
    GeluOnEqu,
    /// Raw positions instead of mean-centered ones feed `Zᴱ`.
    UncenteredPositions,
    /// Attention heads split over the flattened spatial axis.
    SpatialHeadSplit,
    /// Structural bias computed from a signed coordinate difference
    /// instead of the distance.
    BiasFromRawCoordinates,
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize), serde(default))]
pub struct ModelConfig {
    pub layers: usize,
    pub width: usize,
    pub heads: usize,
    pub ffn_width: usize,
    pub kernels: usize,
    pub vocab: usize,
    pub use_velocities: bool,
    pub dropout: DropoutRates,
    /// Per-branch residual drop probability (stochastic depth).
    pub drop_path: f64,
    pub symmetry: SymmetryMode,
    pub ablation: Ablation,
    pub equ_score_scale: EquScoreScale,
    /// Adds a pooled scalar readout.
    pub invariant_head: bool,
    pub ln_eps: f64,
    pub equ_ln_eps: f64,
    pub mutation: Option<Mutation>,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            layers: 4,
            width: 80,
            heads: 8,
            ffn_width: 80,
            kernels: 64,
            vocab: 2,
            use_velocities: true,
            dropout: DropoutRates::default(),
            drop_path: 0.0,
            symmetry: SymmetryMode::Se3,
            ablation: Ablation::ALL,
            equ_score_scale: EquScoreScale::ThreeHeadDim,
            invariant_head: false,
            ln_eps: 1e-5,
            equ_ln_eps: 1e-6,
            mutation: None,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Small configuration used by audits and tests.
    pub fn tiny() -> Self {
        ModelConfig {
            layers: 2,
            width: 8,
            heads: 2,
            ffn_width: 8,
            kernels: 6,
            dropout: DropoutRates::NONE,
            ..ModelConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: alloc::string::String| Err(Error::Config(m));
        if self.width == 0 || self.heads == 0 || self.ffn_width == 0 || self.kernels == 0 || self.vocab == 0 {
            return fail(format!(
                "width, heads, ffn_width, kernels and vocab must be positive (got {}, {}, {}, {}, {})",
                self.width, self.heads, self.ffn_width, self.kernels, self.vocab
            ));
        }
        if self.width % self.heads != 0 {
            return fail(format!("width {} is not divisible by heads {}", self.width, self.heads));
        }
        if self.use_velocities && self.width % 2 != 0 {
            return fail(format!("width {} must be even when velocities are used", self.width));
        }
        let rates = [
            ("dropout.embedding", self.dropout.embedding),
            ("dropout.attention", self.dropout.attention),
            ("dropout.activation", self.dropout.activation),
            ("dropout.hidden", self.dropout.hidden),
            ("drop_path", self.drop_path),
        ];
        for (name, r) in rates {
            if !(0.0..1.0).contains(&r) {
                return fail(format!("{name} = {r} is outside [0, 1)"));
            }
        }
        if !(self.ln_eps > 0.0) || !(self.equ_ln_eps > 0.0) {
            return fail(format!("norm epsilons must be positive (got {}, {})", self.ln_eps, self.equ_ln_eps));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }
}
