//! Comparison methods built on the backbone machinery: dropout, top-k, layer-wise
//! routing, static per-example masks, sparse mixtures of experts and L1.
//!
//! The smaller and standard models need nothing beyond [`crate::backbone`].

mod masked;
mod moe;
mod static_masks;

use serde::{Deserialize, Serialize};

pub use masked::{
    dropout_multipliers, forward_dropout, forward_layerwise_routing, forward_topk, l1_penalty,
};
pub use moe::{backward_moe, forward_moe, Gate, MoeGrads, MoeParams, MoeTrace};
pub use static_masks::{assign_static_masks, MaskTable, StaticMaskMode};

use crate::error::{CometError, Result};

fn default_generalization_fraction() -> f64 {
    0.2
}

fn default_l1() -> f64 {
    1e-5
}

fn default_gate_multiplier() -> usize {
    4
}

/// Baseline knobs not covered by [`crate::backbone::MlpSpec`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineConfig {
    /// Share of each layer that is always active under example-tied dropout.
    #[serde(default = "default_generalization_fraction")]
    pub generalization_fraction: f64,
    #[serde(default = "default_l1")]
    pub l1_coefficient: f64,
    /// MoE gate hidden width as a multiple of the expert count.
    #[serde(default = "default_gate_multiplier")]
    pub gate_hidden_multiplier: usize,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            generalization_fraction: default_generalization_fraction(),
            l1_coefficient: default_l1(),
            gate_hidden_multiplier: default_gate_multiplier(),
        }
    }
}

impl BaselineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.generalization_fraction) {
            return Err(CometError::Config(format!(
                "generalization_fraction must lie in [0, 1], got {}",
                self.generalization_fraction
            )));
        }
        if !(self.l1_coefficient >= 0.0) {
            return Err(CometError::Config(format!(
                "l1_coefficient must be non-negative, got {}",
                self.l1_coefficient
            )));
        }
        if self.gate_hidden_multiplier == 0 {
            return Err(CometError::Config("gate_hidden_multiplier must be positive".into()));
        }
        Ok(())
    }
}

/// Dropout rate matched to a survival proportion: `1 - p_k`.
pub fn dropout_rate(p_k: f64) -> f64 {
    1.0 - p_k
}

/// Number of experts matched to a survival proportion: `floor(1 / p_k)`.
pub fn num_experts(p_k: f64) -> Result<usize> {
    crate::routing::check_p_k(p_k)?;
    // guard against 1/0.1 = 9.999.. style rounding
    Ok(((1.0 / p_k) + 1e-9).floor() as usize)
}

/// Hidden widths scaled by `p_k`, at least one neuron each.
pub fn scaled_widths(widths: &[usize], p_k: f64) -> Vec<usize> {
    let last = widths.len() - 1;
    widths
        .iter()
        .enumerate()
        .map(|(i, &w)| {
            if i == 0 || i == last {
                w
            } else {
                ((p_k * w as f64).round() as usize).max(1)
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derived_counts() {
        assert_eq!(num_experts(0.5).unwrap(), 2);
        assert_eq!(num_experts(0.1).unwrap(), 10);
        assert_eq!(num_experts(0.9).unwrap(), 1);
        assert_eq!(num_experts(0.3).unwrap(), 3);
        assert!(num_experts(0.0).is_err());
        assert!((dropout_rate(0.9) - 0.1).abs() < 1e-12);
        assert_eq!(scaled_widths(&[10, 100, 50, 3], 0.1), vec![10, 10, 5, 3]);
    }

    #[test]
    fn config_validation() {
        assert!(BaselineConfig::default().validate().is_ok());
        let bad = BaselineConfig {
            l1_coefficient: -1.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
