use serde::{Deserialize, Serialize};

use crate::backbone::ModelParams;
use crate::error::{CometError, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Optimizer {
    #[default]
    Sgd,
    SgdMomentum,
}

/// One SGD update on a flat tensor. With `velocity`, `v ← μv + g` and `θ ← θ − αv`.
pub fn sgd_step(
    params: &mut [f32],
    grads: &[f32],
    learning_rate: f64,
    momentum: f64,
    velocity: Option<&mut [f32]>,
) -> Result<()> {
    if params.len() != grads.len() {
        return Err(CometError::shape(format!(
            "{} parameters for {} gradients",
            params.len(),
            grads.len()
        )));
    }
    if let Some(bad) = grads.iter().position(|g| !g.is_finite()) {
        return Err(CometError::numeric(format!("non-finite gradient at index {bad}")));
    }
    match velocity {
        Some(v) => {
            if v.len() != params.len() {
                return Err(CometError::shape("momentum buffer does not match parameters"));
            }
            for ((p, g), v) in params.iter_mut().zip(grads).zip(v.iter_mut()) {
                *v = (momentum * *v as f64 + *g as f64) as f32;
                *p = (*p as f64 - learning_rate * *v as f64) as f32;
            }
        }
        None => {
            for (p, g) in params.iter_mut().zip(grads) {
                *p = (*p as f64 - learning_rate * *g as f64) as f32;
            }
        }
    }
    Ok(())
}

/// Optimizer state across parameter groups.
#[derive(Clone, Debug)]
pub struct Sgd {
    learning_rate: f64,
    momentum: f64,
    velocity: Option<Vec<ModelParams>>,
}

impl Sgd {
    pub fn new(optimizer: Optimizer, learning_rate: f64, momentum: f64) -> Self {
        Self {
            learning_rate,
            momentum,
            velocity: match optimizer {
                Optimizer::Sgd => None,
                Optimizer::SgdMomentum => Some(Vec::new()),
            },
        }
    }

    /// Applies `grads` to `params`. Every gradient is checked before any parameter moves.
    pub fn step(&mut self, params: Vec<&mut ModelParams>, grads: &[ModelParams]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(CometError::shape("gradient groups do not match parameter groups"));
        }
        for (p, g) in params.iter().zip(grads) {
            if !p.same_shape(g) {
                return Err(CometError::shape("gradient shapes do not match parameters"));
            }
            if !g.is_finite() {
                return Err(CometError::numeric("non-finite gradient"));
            }
        }
        if let Some(v) = &mut self.velocity {
            if v.is_empty() {
                *v = grads.iter().map(ModelParams::zeros_like).collect();
            }
        }
        for (i, (p, g)) in params.into_iter().zip(grads).enumerate() {
            let mut vel = self.velocity.as_mut().map(|v| v[i].tensors_mut());
            for (t, (pt, gt)) in p.tensors_mut().into_iter().zip(g.tensors()).enumerate() {
                let v = vel.as_mut().map(|v| &mut *v[t]);
                sgd_step(pt, gt, self.learning_rate, self.momentum, v)?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_rate_is_identity() {
        let mut p = vec![1.5, -2.0, 0.25];
        sgd_step(&mut p, &[10.0, -3.0, 7.0], 0.0, 0.0, None).unwrap();
        assert_eq!(p, vec![1.5, -2.0, 0.25]);
    }

    #[test]
    fn scalar_update() {
        let mut w = [1.0f32];
        sgd_step(&mut w, &[2.0], 0.1, 0.0, None).unwrap();
        assert!((w[0] - 0.8).abs() < 1e-7);
    }

    #[test]
    fn quadratic_converges() {
        // f(w) = (w-3)^2, error contracts by (1 - 2*lr) per step
        let mut w = [0.0f32];
        for _ in 0..100 {
            let g = 2.0 * (w[0] - 3.0);
            sgd_step(&mut w, &[g], 0.1, 0.0, None).unwrap();
        }
        let oracle = 3.0 - 3.0 * 0.8f64.powi(100);
        assert!((w[0] as f64 - 3.0).abs() < 1e-6);
        assert!((w[0] as f64 - oracle).abs() < 1e-6);
    }

    #[test]
    fn momentum_accumulates() {
        let mut w = [0.0f32];
        let mut v = [0.0f32];
        sgd_step(&mut w, &[1.0], 0.1, 0.9, Some(&mut v)).unwrap();
        sgd_step(&mut w, &[1.0], 0.1, 0.9, Some(&mut v)).unwrap();
        assert!((v[0] - 1.9).abs() < 1e-6);
        assert!((w[0] + 0.29).abs() < 1e-6);
    }

    #[test]
    fn non_finite_gradient_aborts_untouched() {
        let mut p = vec![1.0, 2.0];
        let err = sgd_step(&mut p, &[0.5, f32::NAN], 0.1, 0.0, None).unwrap_err();
        assert!(matches!(err, CometError::Numeric(_)));
        assert_eq!(p, vec![1.0, 2.0]);
    }
}
