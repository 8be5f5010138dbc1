//! The MLP backbone: unmasked and masked forward passes, manual backpropagation,
//! activations and losses.

mod forward;
mod loss;
mod params;

use serde::{Deserialize, Serialize};

pub use forward::{
    backward, forward_comet, forward_masked, forward_standard, forward_with, ForwardTrace,
};
pub use loss::{
    batch_cross_entropy, batch_mse, loss_cross_entropy, loss_mse, softmax_row,
};
pub use params::ModelParams;

use crate::error::{CometError, Result};

/// Elementwise activation of the hidden layers. The output layer is always linear.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Tanh,
    #[default]
    Relu,
    Sigmoid,
    Identity,
    LeakyRelu,
}

const LEAKY_SLOPE: f32 = 0.01;

impl Activation {
    #[inline]
    pub fn apply(self, a: f32) -> f32 {
        match self {
            Activation::Tanh => a.tanh(),
            Activation::Relu => a.max(0.0),
            Activation::Sigmoid => sigmoid(a),
            Activation::Identity => a,
            Activation::LeakyRelu => {
                if a > 0.0 {
                    a
                } else {
                    LEAKY_SLOPE * a
                }
            }
        }
    }

    /// Derivative with respect to the pre-activation.
    #[inline]
    pub fn derivative(self, a: f32) -> f32 {
        match self {
            Activation::Tanh => {
                let t = a.tanh();
                1.0 - t * t
            }
            Activation::Relu => {
                if a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => {
                let s = sigmoid(a);
                s * (1.0 - s)
            }
            Activation::Identity => 1.0,
            Activation::LeakyRelu => {
                if a > 0.0 {
                    1.0
                } else {
                    LEAKY_SLOPE
                }
            }
        }
    }

    /// `f64` evaluation for reference computations.
    pub fn apply_f64(self, a: f64) -> f64 {
        match self {
            Activation::Tanh => a.tanh(),
            Activation::Relu => a.max(0.0),
            Activation::Sigmoid => {
                if a >= 0.0 {
                    1.0 / (1.0 + (-a).exp())
                } else {
                    let e = a.exp();
                    e / (1.0 + e)
                }
            }
            Activation::Identity => a,
            Activation::LeakyRelu => {
                if a > 0.0 {
                    a
                } else {
                    LEAKY_SLOPE as f64 * a
                }
            }
        }
    }
}

#[inline]
fn sigmoid(a: f32) -> f32 {
    if a >= 0.0 {
        1.0 / (1.0 + (-a).exp())
    } else {
        let e = a.exp();
        e / (1.0 + e)
    }
}

/// Which model family a spec describes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    #[default]
    Standard,
    Comet,
    Dropout,
    Topk,
    MoeTrainable,
    MoeFixed,
    LayerwiseRouting,
    BernoulliMask,
    ExampleTied,
    L1,
    /// Standard MLP with hidden widths scaled by `p_k`.
    Smaller,
}

impl Variant {
    pub const ALL: [Variant; 11] = [
        Variant::Standard,
        Variant::Comet,
        Variant::Dropout,
        Variant::Topk,
        Variant::MoeTrainable,
        Variant::MoeFixed,
        Variant::LayerwiseRouting,
        Variant::BernoulliMask,
        Variant::ExampleTied,
        Variant::L1,
        Variant::Smaller,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Standard => "standard",
            Variant::Comet => "comet",
            Variant::Dropout => "dropout",
            Variant::Topk => "topk",
            Variant::MoeTrainable => "moe-trainable",
            Variant::MoeFixed => "moe-fixed",
            Variant::LayerwiseRouting => "layerwise-routing",
            Variant::BernoulliMask => "bernoulli-mask",
            Variant::ExampleTied => "example-tied",
            Variant::L1 => "l1",
            Variant::Smaller => "smaller",
        }
    }

    pub fn uses_routing(self) -> bool {
        matches!(self, Variant::Comet | Variant::LayerwiseRouting)
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

fn default_p_k() -> f64 {
    1.0
}

fn default_true() -> bool {
    true
}

/// Architecture description: widths `N_0..N_L`, activation, survival proportion, variant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpSpec {
    pub widths: Vec<usize>,
    #[serde(default)]
    pub activation: Activation,
    #[serde(default = "default_p_k")]
    pub p_k: f64,
    #[serde(default)]
    pub variant: Variant,
    /// Add biases in masked layers. `false` drops every bias term from masked models.
    #[serde(default = "default_true")]
    pub masked_bias: bool,
}

impl MlpSpec {
    pub fn new(widths: Vec<usize>, activation: Activation, p_k: f64, variant: Variant) -> Self {
        Self {
            widths,
            activation,
            p_k,
            variant,
            masked_bias: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.len() < 2 {
            return Err(CometError::Config(
                "widths must list at least input and output sizes".into(),
            ));
        }
        if self.widths.iter().any(|&w| w == 0) {
            return Err(CometError::Config("all widths must be at least 1".into()));
        }
        crate::routing::check_p_k(self.p_k)?;
        Ok(())
    }

    /// Number of layers `L`.
    pub fn depth(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().expect("validated widths")
    }

    pub fn hidden_widths(&self) -> &[usize] {
        &self.widths[1..self.widths.len() - 1]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn activation_derivatives_match_differences() {
        for act in [
            Activation::Tanh,
            Activation::Relu,
            Activation::Sigmoid,
            Activation::Identity,
            Activation::LeakyRelu,
        ] {
            for &a in &[-2.3f64, -0.4, 0.3, 1.7] {
                let h = 1e-4;
                let fd = (act.apply_f64(a + h) - act.apply_f64(a - h)) / (2.0 * h);
                assert!((fd - act.derivative(a as f32) as f64).abs() < 1e-4, "{act:?} at {a}");
                assert!((act.apply(a as f32) as f64 - act.apply_f64(a)).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn sigmoid_is_stable() {
        assert_eq!(Activation::Sigmoid.apply(-1000.0), 0.0);
        assert_eq!(Activation::Sigmoid.apply(1000.0), 1.0);
    }

    #[test]
    fn spec_validation() {
        assert!(MlpSpec::new(vec![3, 2], Activation::Relu, 0.5, Variant::Comet)
            .validate()
            .is_ok());
        assert!(MlpSpec::new(vec![3], Activation::Relu, 0.5, Variant::Comet)
            .validate()
            .is_err());
        assert!(MlpSpec::new(vec![3, 0, 2], Activation::Relu, 0.5, Variant::Comet)
            .validate()
            .is_err());
        assert!(MlpSpec::new(vec![3, 2], Activation::Relu, 0.0, Variant::Comet)
            .validate()
            .is_err());
    }

    #[test]
    fn variant_names_round_trip_through_serde() {
        for v in Variant::ALL {
            let s = serde_json::to_string(&v).unwrap();
            assert_eq!(s, format!("\"{}\"", v.name()));
            assert_eq!(serde_json::from_str::<Variant>(&s).unwrap(), v);
        }
    }
}
