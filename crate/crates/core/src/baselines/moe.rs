use super::{num_experts, scaled_widths};
use crate::backbone::{backward, forward_standard, softmax_row, Activation, ForwardTrace, ModelParams};
use crate::error::{CometError, Result};
use crate::numerics::{matmul_nt, sample_uniform_init, Matrix, RngStream};

/// Expert-selection network.
#[derive(Clone, Debug, PartialEq)]
pub enum Gate {
    /// One-hidden-layer MLP `N_0 -> H -> E`, trained with the experts.
    Trainable(ModelParams),
    /// Frozen random projection `E x N_0`.
    Fixed(Matrix),
}

/// `floor(1 / p_k)` independent narrow MLPs plus a gate.
#[derive(Clone, Debug, PartialEq)]
pub struct MoeParams {
    pub experts: Vec<ModelParams>,
    pub gate: Gate,
}

/// Gradients for the trainable parts of a [`MoeParams`].
#[derive(Clone, Debug, PartialEq)]
pub struct MoeGrads {
    pub experts: Vec<ModelParams>,
    pub gate: Option<ModelParams>,
}

#[derive(Clone, Debug)]
pub struct MoeTrace {
    pub inputs: Matrix,
    pub gate_trace: Option<ForwardTrace>,
    pub scores: Matrix,
    /// Softmax of the scores, one row per example.
    pub gate_probs: Vec<Vec<f64>>,
    pub selected: Vec<usize>,
    /// Rows of the batch routed to each expert, in batch order.
    pub expert_rows: Vec<Vec<usize>>,
    pub expert_traces: Vec<Option<ForwardTrace>>,
    pub output: Matrix,
}

impl MoeParams {
    /// Experts get widths `p_k * N_l` on hidden layers; the trainable gate's hidden
    /// layer has `gate_hidden_multiplier * E` units.
    pub fn init(
        widths: &[usize],
        p_k: f64,
        trainable_gate: bool,
        gate_hidden_multiplier: usize,
        rng: &mut RngStream,
    ) -> Result<Self> {
        let e = num_experts(p_k)?;
        if e == 0 {
            return Err(CometError::domain("mixture needs at least one expert"));
        }
        let expert_widths = scaled_widths(widths, p_k);
        let experts = (0..e)
            .map(|_| ModelParams::init(&expert_widths, rng))
            .collect::<Result<Vec<_>>>()?;
        let gate = if trainable_gate {
            Gate::Trainable(ModelParams::init(
                &[widths[0], gate_hidden_multiplier.max(1) * e, e],
                rng,
            )?)
        } else {
            Gate::Fixed(sample_uniform_init(rng, e, widths[0], widths[0])?)
        };
        Ok(Self { experts, gate })
    }

    pub fn num_experts(&self) -> usize {
        self.experts.len()
    }

    pub fn trainable_gate(&self) -> bool {
        matches!(self.gate, Gate::Trainable(_))
    }

    pub fn trainable_param_count(&self) -> usize {
        let experts: usize = self.experts.iter().map(ModelParams::num_params).sum();
        match &self.gate {
            Gate::Trainable(g) => experts + g.num_params(),
            Gate::Fixed(_) => experts,
        }
    }
}

/// Hard top-1 mixture: the highest-scoring expert handles each example and its
/// output is scaled by that expert's softmax gate probability.
pub fn forward_moe(params: &MoeParams, activation: Activation, inputs: &Matrix) -> Result<MoeTrace> {
    let e = params.num_experts();
    if e == 0 {
        return Err(CometError::domain("mixture has no experts"));
    }
    let (gate_trace, scores) = match &params.gate {
        Gate::Trainable(g) => {
            let t = forward_standard(g, activation, inputs)?;
            let s = t.output().clone();
            (Some(t), s)
        }
        Gate::Fixed(v) => {
            if v.cols() != inputs.cols() {
                return Err(CometError::shape("gate projection width mismatch"));
            }
            (None, matmul_nt(inputs, v)?)
        }
    };
    if scores.cols() != e {
        return Err(CometError::shape(format!(
            "gate emits {} scores for {e} experts",
            scores.cols()
        )));
    }
    scores.check_finite("gate scores")?;
    let mut selected = Vec::with_capacity(inputs.rows());
    let mut gate_probs = Vec::with_capacity(inputs.rows());
    let mut expert_rows = vec![Vec::new(); e];
    for (r, row) in scores.iter_rows().enumerate() {
        let mut best = 0;
        for (j, &s) in row.iter().enumerate() {
            if s > row[best] {
                best = j;
            }
        }
        selected.push(best);
        gate_probs.push(softmax_row(row));
        expert_rows[best].push(r);
    }
    let out_dim = params.experts[0].weights.last().expect("layers").rows();
    let mut output = Matrix::zeros(inputs.rows(), out_dim);
    let mut expert_traces = Vec::with_capacity(e);
    for (ex, rows) in expert_rows.iter().enumerate() {
        if rows.is_empty() {
            expert_traces.push(None);
            continue;
        }
        let t = forward_standard(&params.experts[ex], activation, &inputs.select_rows(rows))?;
        for (i, &r) in rows.iter().enumerate() {
            let p = gate_probs[r][ex] as f32;
            for (o, v) in output.row_mut(r).iter_mut().zip(t.output().row(i)) {
                *o = p * v;
            }
        }
        expert_traces.push(Some(t));
    }
    Ok(MoeTrace {
        inputs: inputs.clone(),
        gate_trace,
        scores,
        gate_probs,
        selected,
        expert_rows,
        expert_traces,
        output,
    })
}

/// Gradients for every expert and, when trainable, the gate. Expert selection
/// is treated as a constant.
pub fn backward_moe(trace: &MoeTrace, params: &MoeParams, loss_grad: &Matrix) -> Result<MoeGrads> {
    if loss_grad.shape() != trace.output.shape() {
        return Err(CometError::shape("loss gradient does not match mixture output"));
    }
    let e = params.num_experts();
    let mut experts = Vec::with_capacity(e);
    let mut score_grad = Matrix::zeros(trace.scores.rows(), e);
    for ex in 0..e {
        let (rows, t) = match &trace.expert_traces[ex] {
            Some(t) => (&trace.expert_rows[ex], t),
            None => {
                experts.push(params.experts[ex].zeros_like());
                continue;
            }
        };
        let mut g = Matrix::zeros(rows.len(), loss_grad.cols());
        for (i, &r) in rows.iter().enumerate() {
            let probs = &trace.gate_probs[r];
            let p = probs[ex];
            let d_out = loss_grad.row(r);
            for (gv, dv) in g.row_mut(i).iter_mut().zip(d_out) {
                *gv = (p * *dv as f64) as f32;
            }
            // d loss / d p, then through the softmax: dp/ds_j = p (delta_j - q_j)
            let dp: f64 = d_out
                .iter()
                .zip(t.output().row(i))
                .map(|(d, y)| *d as f64 * *y as f64)
                .sum();
            for (j, q) in probs.iter().enumerate() {
                let delta = if j == ex { 1.0 } else { 0.0 };
                score_grad.set(r, j, (dp * p * (delta - q)) as f32);
            }
        }
        experts.push(backward(t, &params.experts[ex], &g)?);
    }
    let gate = match (&params.gate, &trace.gate_trace) {
        (Gate::Trainable(g), Some(t)) => Some(backward(t, g, &score_grad)?),
        _ => None,
    };
    Ok(MoeGrads { experts, gate })
}
