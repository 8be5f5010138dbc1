//! Straightforward 64-bit forward passes used as oracles for the optimized kernels.

use crate::backbone::{Activation, ModelParams};
use crate::data::Targets;

/// MLP evaluated neuron by neuron in `f64`. Parameters are a flat vector laid out
/// like [`ModelParams::flatten`]: `W_1` row-major, `b_1`, `W_2`, `b_2`, ...
#[derive(Clone, Debug)]
pub struct ReferenceMlp {
    pub widths: Vec<usize>,
    pub activation: Activation,
    pub bias: bool,
}

/// Hidden activations `x_1..x_{L-1}` and the output `a_L` of one example.
#[derive(Clone, Debug)]
pub struct ReferencePass {
    pub activations: Vec<Vec<f64>>,
    pub output: Vec<f64>,
}

impl ReferenceMlp {
    pub fn new(widths: Vec<usize>, activation: Activation, bias: bool) -> Self {
        Self { widths, activation, bias }
    }

    pub fn num_params(&self) -> usize {
        self.widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    /// Offsets of `W_l` and `b_l` inside the flat vector.
    pub fn layer_offsets(&self, l: usize) -> (usize, usize) {
        let mut off = 0;
        for w in self.widths.windows(2).take(l) {
            off += w[0] * w[1] + w[1];
        }
        (off, off + self.widths[l] * self.widths[l + 1])
    }

    /// `multipliers[l]` scales hidden layer `l + 1`; `nudge = (l, i, d)` adds `d`
    /// to pre-activation `a_{l+1, i}`.
    pub fn forward(
        &self,
        theta: &[f64],
        x: &[f64],
        multipliers: &[Option<Vec<f64>>],
        nudge: Option<(usize, usize, f64)>,
    ) -> ReferencePass {
        let depth = self.widths.len() - 1;
        let mut prev = x.to_vec();
        let mut activations = Vec::new();
        for l in 0..depth {
            let (w_off, b_off) = self.layer_offsets(l);
            let (n_in, n_out) = (self.widths[l], self.widths[l + 1]);
            let mut next = vec![0.0; n_out];
            for (i, slot) in next.iter_mut().enumerate() {
                let mut a = 0.0;
                for (j, xj) in prev.iter().enumerate() {
                    a += theta[w_off + i * n_in + j] * xj;
                }
                if self.bias {
                    a += theta[b_off + i];
                }
                if let Some((nl, ni, d)) = nudge {
                    if nl == l && ni == i {
                        a += d;
                    }
                }
                *slot = a;
            }
            if l + 1 < depth {
                for (i, v) in next.iter_mut().enumerate() {
                    let m = multipliers
                        .get(l)
                        .and_then(|m| m.as_ref())
                        .map_or(1.0, |m| m[i]);
                    *v = m * self.activation.apply_f64(*v);
                }
                activations.push(next.clone());
            }
            prev = next;
        }
        ReferencePass { activations, output: prev }
    }

    /// Sum of absolute weights (biases excluded).
    pub fn weight_l1(&self, theta: &[f64]) -> f64 {
        (0..self.widths.len() - 1)
            .map(|l| {
                let (w, b) = self.layer_offsets(l);
                theta[w..b].iter().map(|v| v.abs()).sum::<f64>()
            })
            .sum()
    }
}

pub fn flatten_f64(params: &ModelParams) -> Vec<f64> {
    params.flatten().into_iter().map(f64::from).collect()
}

/// Mean cross-entropy or mean squared error of a batch of outputs.
pub fn reference_loss(outputs: &[Vec<f64>], targets: &Targets) -> f64 {
    match targets {
        Targets::Labels { labels, .. } => {
            let total: f64 = outputs
                .iter()
                .zip(labels)
                .map(|(o, &y)| {
                    let max = o.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let lse = max + o.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                    lse - o[y]
                })
                .sum();
            total / outputs.len() as f64
        }
        Targets::Values(t) => {
            let mut total = 0.0;
            for (r, o) in outputs.iter().enumerate() {
                for (p, y) in o.iter().zip(t.row(r)) {
                    total += (p - *y as f64).powi(2);
                }
            }
            total / (outputs.len() * t.cols()) as f64
        }
    }
}

pub fn softmax_f64(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::forward_standard;
    use crate::numerics::{Matrix, RngStream};

    #[test]
    fn agrees_with_the_fast_path() {
        let p = ModelParams::init(&[5, 7, 4, 3], &mut RngStream::new(2, 0)).unwrap();
        let x: Vec<f32> = (0..5).map(|i| (i as f32 * 0.7).cos()).collect();
        let fast = forward_standard(&p, Activation::Tanh, &Matrix::row_vector(&x).unwrap()).unwrap();
        let r = ReferenceMlp::new(vec![5, 7, 4, 3], Activation::Tanh, true);
        assert_eq!(r.num_params(), p.num_params());
        let x64: Vec<f64> = x.iter().map(|&v| v as f64).collect();
        let pass = r.forward(&flatten_f64(&p), &x64, &[], None);
        for (a, b) in pass.output.iter().zip(fast.output().row(0)) {
            assert!((a - *b as f64).abs() < 1e-5);
        }
    }

    #[test]
    fn loss_cases() {
        let uniform = vec![vec![0.0; 4]];
        let l = reference_loss(&uniform, &Targets::Labels { labels: vec![1], classes: 4 });
        assert!((l - 4f64.ln()).abs() < 1e-12);
        let t = Targets::Values(Matrix::from_vec(1, 2, vec![1.0, -1.0]).unwrap());
        assert!((reference_loss(&[vec![2.0, 1.0]], &t) - 2.5).abs() < 1e-12);
    }
}
