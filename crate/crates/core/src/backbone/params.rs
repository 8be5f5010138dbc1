use crate::error::{CometError, Result};
use crate::numerics::{sample_uniform_init, Matrix, RngStream};

/// Trainable weights `W_l` (`N_l x N_{l-1}`) and biases `b_l`, `l = 1..L`.
///
/// Gradients use the same structure.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub weights: Vec<Matrix>,
    pub biases: Vec<Vec<f32>>,
}

impl ModelParams {
    /// Uniform fan-in weights, zero biases.
    pub fn init(widths: &[usize], rng: &mut RngStream) -> Result<Self> {
        if widths.len() < 2 {
            return Err(CometError::shape("need at least input and output widths"));
        }
        let weights = widths
            .windows(2)
            .map(|w| sample_uniform_init(rng, w[1], w[0], w[0]))
            .collect::<Result<Vec<_>>>()?;
        let biases = widths[1..].iter().map(|&n| vec![0.0; n]).collect();
        Ok(Self { weights, biases })
    }

    pub fn new(weights: Vec<Matrix>, biases: Vec<Vec<f32>>) -> Result<Self> {
        let p = Self { weights, biases };
        p.check_consistent()?;
        Ok(p)
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            weights: self
                .weights
                .iter()
                .map(|w| Matrix::zeros(w.rows(), w.cols()))
                .collect(),
            biases: self.biases.iter().map(|b| vec![0.0; b.len()]).collect(),
        }
    }

    pub fn check_consistent(&self) -> Result<()> {
        if self.weights.is_empty() || self.weights.len() != self.biases.len() {
            return Err(CometError::shape("weights and biases must pair up per layer"));
        }
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            if w.rows() != b.len() {
                return Err(CometError::shape(format!(
                    "layer {}: {} rows but {} biases",
                    l + 1,
                    w.rows(),
                    b.len()
                )));
            }
            if l > 0 && w.cols() != self.weights[l - 1].rows() {
                return Err(CometError::shape(format!(
                    "layer {} expects {} inputs, previous layer has {}",
                    l + 1,
                    w.cols(),
                    self.weights[l - 1].rows()
                )));
            }
        }
        Ok(())
    }

    pub fn depth(&self) -> usize {
        self.weights.len()
    }

    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.weights[0].cols()];
        w.extend(self.weights.iter().map(Matrix::rows));
        w
    }

    pub fn num_params(&self) -> usize {
        self.weights
            .iter()
            .zip(&self.biases)
            .map(|(w, b)| w.as_slice().len() + b.len())
            .sum()
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.weights.len() == other.weights.len()
            && self
                .weights
                .iter()
                .zip(&other.weights)
                .all(|(a, b)| a.shape() == b.shape())
            && self
                .biases
                .iter()
                .zip(&other.biases)
                .all(|(a, b)| a.len() == b.len())
    }

    /// Flattened parameter vector `(W_1, b_1, ..., W_L, b_L)`.
    pub fn flatten(&self) -> Vec<f32> {
        let mut out = Vec::with_capacity(self.num_params());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend_from_slice(w.as_slice());
            out.extend_from_slice(b);
        }
        out
    }

    /// Mutable views of every parameter tensor in flattening order.
    pub fn tensors_mut(&mut self) -> Vec<&mut [f32]> {
        let mut out = Vec::with_capacity(2 * self.weights.len());
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            out.push(w.as_mut_slice());
            out.push(b.as_mut_slice());
        }
        out
    }

    pub fn tensors(&self) -> Vec<&[f32]> {
        let mut out = Vec::with_capacity(2 * self.weights.len());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.push(w.as_slice());
            out.push(b.as_slice());
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }
}
