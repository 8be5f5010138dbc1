use super::{Activation, ModelParams};
use crate::error::{CometError, Result};
use crate::numerics::{matmul, Matrix};

/// Everything backpropagation needs from one batched forward pass.
///
/// Rows are examples. `multipliers[l]` is the per-example factor applied to hidden
/// layer `l + 1` after the activation: a 0/1 mask, a scaled dropout mask, or
/// `None` for an unmasked layer.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub inputs: Matrix,
    /// `a_1..a_L`; the last entry is the network output.
    pub pre_activations: Vec<Matrix>,
    /// `x_1..x_{L-1}`.
    pub activations: Vec<Matrix>,
    pub multipliers: Vec<Option<Matrix>>,
    pub activation: Activation,
    pub bias: bool,
}

impl ForwardTrace {
    pub fn output(&self) -> &Matrix {
        self.pre_activations.last().expect("at least one layer")
    }

    pub fn depth(&self) -> usize {
        self.pre_activations.len()
    }

    /// Input to layer `l` (0-based): `x_0` for the first layer.
    pub fn layer_input(&self, l: usize) -> &Matrix {
        if l == 0 {
            &self.inputs
        } else {
            &self.activations[l - 1]
        }
    }
}

/// Shared forward loop. `mask_for(layer, layer_input, pre_activation)` returns the
/// multiplier for each hidden layer; the output layer is never masked.
pub fn forward_with<F>(
    params: &ModelParams,
    activation: Activation,
    inputs: &Matrix,
    bias: bool,
    mut mask_for: F,
) -> Result<ForwardTrace>
where
    F: FnMut(usize, &Matrix, &Matrix) -> Result<Option<Matrix>>,
{
    let depth = params.depth();
    if inputs.cols() != params.weights[0].cols() {
        return Err(CometError::shape(format!(
            "network expects {} inputs, got {}",
            params.weights[0].cols(),
            inputs.cols()
        )));
    }
    inputs.check_finite("network input")?;
    let mut pre_activations = Vec::with_capacity(depth);
    let mut activations: Vec<Matrix> = Vec::with_capacity(depth - 1);
    let mut multipliers = Vec::with_capacity(depth - 1);
    for l in 0..depth {
        let x_prev = if l == 0 { inputs } else { &activations[l - 1] };
        let mut a = matmul(x_prev, &params.weights[l].transpose())?;
        if bias {
            let b = &params.biases[l];
            for r in 0..a.rows() {
                for (v, bv) in a.row_mut(r).iter_mut().zip(b) {
                    *v += bv;
                }
            }
        }
        a.check_finite("pre-activation")?;
        if l + 1 < depth {
            let mult = mask_for(l, x_prev, &a)?;
            let mut x = a.map(|v| activation.apply(v));
            if let Some(m) = &mult {
                if m.shape() != x.shape() {
                    return Err(CometError::shape(format!(
                        "layer {} mask is {:?}, activations are {:?}",
                        l + 1,
                        m.shape(),
                        x.shape()
                    )));
                }
                for (xv, mv) in x.as_mut_slice().iter_mut().zip(m.as_slice()) {
                    *xv *= mv;
                }
            }
            multipliers.push(mult);
            activations.push(x);
        }
        pre_activations.push(a);
    }
    Ok(ForwardTrace {
        inputs: inputs.clone(),
        pre_activations,
        activations,
        multipliers,
        activation,
        bias,
    })
}

/// `a_l = W_l x_{l-1} + b_l`, `x_l = f(a_l)`; the output `a_L` has no activation.
pub fn forward_standard(
    params: &ModelParams,
    activation: Activation,
    inputs: &Matrix,
) -> Result<ForwardTrace> {
    forward_with(params, activation, inputs, true, |_, _, _| Ok(None))
}

/// Forward pass with fixed per-example multipliers on every hidden layer.
pub fn forward_masked(
    params: &ModelParams,
    activation: Activation,
    masks: &[Matrix],
    inputs: &Matrix,
    bias: bool,
) -> Result<ForwardTrace> {
    if masks.len() + 1 != params.depth() {
        return Err(CometError::shape(format!(
            "{} mask layers for a {}-layer network",
            masks.len(),
            params.depth()
        )));
    }
    forward_with(params, activation, inputs, bias, |l, _, _| {
        Ok(Some(masks[l].clone()))
    })
}

/// Masked forward pass `x_l = m_l * f(a_l)` with routing masks as per-layer
/// `batch x N_l` 0/1 matrices.
pub fn forward_comet(
    params: &ModelParams,
    activation: Activation,
    masks: &[Matrix],
    inputs: &Matrix,
    bias: bool,
) -> Result<ForwardTrace> {
    forward_masked(params, activation, masks, inputs, bias)
}

/// Gradients of the loss with respect to every weight and bias, given the
/// gradient at the output pre-activation `a_L`. Multipliers are constants.
pub fn backward(trace: &ForwardTrace, params: &ModelParams, loss_grad: &Matrix) -> Result<ModelParams> {
    let depth = params.depth();
    if trace.depth() != depth {
        return Err(CometError::shape(format!(
            "trace has {} layers, parameters {}",
            trace.depth(),
            depth
        )));
    }
    if loss_grad.shape() != trace.output().shape() {
        return Err(CometError::shape(format!(
            "loss gradient {:?} vs output {:?}",
            loss_grad.shape(),
            trace.output().shape()
        )));
    }
    for (l, w) in params.weights.iter().enumerate() {
        if trace.pre_activations[l].cols() != w.rows() || trace.layer_input(l).cols() != w.cols() {
            return Err(CometError::shape(format!("trace does not match layer {}", l + 1)));
        }
    }
    let mut grads = params.zeros_like();
    let mut delta = loss_grad.clone();
    for l in (0..depth).rev() {
        grads.weights[l] = matmul(&delta.transpose(), trace.layer_input(l))?;
        if trace.bias {
            let gb = &mut grads.biases[l];
            let mut acc = vec![0.0f64; gb.len()];
            for r in 0..delta.rows() {
                for (s, d) in acc.iter_mut().zip(delta.row(r)) {
                    *s += *d as f64;
                }
            }
            for (g, s) in gb.iter_mut().zip(acc) {
                *g = s as f32;
            }
        }
        if l > 0 {
            let mut dx = matmul(&delta, &params.weights[l])?;
            let a = &trace.pre_activations[l - 1];
            let act = trace.activation;
            match &trace.multipliers[l - 1] {
                Some(m) => {
                    for ((d, av), mv) in dx
                        .as_mut_slice()
                        .iter_mut()
                        .zip(a.as_slice())
                        .zip(m.as_slice())
                    {
                        *d = if *mv == 0.0 { 0.0 } else { *d * act.derivative(*av) * mv };
                    }
                }
                None => {
                    for (d, av) in dx.as_mut_slice().iter_mut().zip(a.as_slice()) {
                        *d *= act.derivative(*av);
                    }
                }
            }
            delta = dx;
        }
    }
    Ok(grads)
}
