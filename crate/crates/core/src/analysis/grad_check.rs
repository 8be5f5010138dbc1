//! Central finite differences in `f64` against the analytic backward passes.

use serde::Serialize;

use super::reference::{flatten_f64, reference_loss, softmax_f64, ReferenceMlp};
use crate::backbone::{backward, forward_masked, Activation, MlpSpec, ModelParams, Variant};
use crate::baselines::{BaselineConfig, Gate};
use crate::data::Targets;
use crate::error::Result;
use crate::model::{loss_for, Body, Model, ModelTrace, Phase};
use crate::numerics::{Matrix, RngStream};

pub const FD_STEP: f64 = 1e-3;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;
/// Gradients smaller than this are compared absolutely.
pub const RELATIVE_FLOOR: f64 = 1e-3;

/// Variants whose backward pass is covered by [`grad_check`].
pub const CHECKED_VARIANTS: [Variant; 7] = [
    Variant::Standard,
    Variant::Comet,
    Variant::Topk,
    Variant::LayerwiseRouting,
    Variant::Dropout,
    Variant::MoeTrainable,
    Variant::L1,
];

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub variant: Variant,
    pub params_checked: usize,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub failures: usize,
    /// Masked neurons whose incoming weights or bias got a nonzero gradient.
    pub masked_nonzero: usize,
    pub tolerance: f64,
    pub passed: bool,
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(RELATIVE_FLOOR)
}

/// Oracle loss as a function of all trainable parameters, with every mask,
/// dropout multiplier and expert choice frozen at the values of `trace`.
struct FrozenObjective<'a> {
    model: &'a Model,
    trace: &'a ModelTrace,
    inputs: Vec<Vec<f64>>,
    targets: &'a Targets,
}

impl FrozenObjective<'_> {
    fn loss(&self, theta: &[f64]) -> f64 {
        let spec = self.model.spec();
        let act = spec.activation;
        match (self.trace, self.model.body()) {
            (ModelTrace::Dense(t), Body::Dense(p)) => {
                let net = ReferenceMlp::new(p.widths(), act, t.bias);
                let outputs: Vec<Vec<f64>> = self
                    .inputs
                    .iter()
                    .enumerate()
                    .map(|(r, x)| {
                        let mults: Vec<Option<Vec<f64>>> = t
                            .multipliers
                            .iter()
                            .map(|m| m.as_ref().map(|m| m.row(r).iter().map(|&v| v as f64).collect()))
                            .collect();
                        net.forward(theta, x, &mults, None).output
                    })
                    .collect();
                let mut loss = reference_loss(&outputs, self.targets);
                if spec.variant == Variant::L1 {
                    loss += self.model.baseline().l1_coefficient * net.weight_l1(theta);
                }
                loss
            }
            (ModelTrace::Moe(t), Body::Moe(m)) => {
                let nets: Vec<ReferenceMlp> = m
                    .experts
                    .iter()
                    .map(|e| ReferenceMlp::new(e.widths(), act, true))
                    .collect();
                let mut offsets = vec![0];
                for n in &nets {
                    offsets.push(offsets.last().unwrap() + n.num_params());
                }
                let gate_theta = &theta[*offsets.last().unwrap()..];
                let outputs: Vec<Vec<f64>> = self
                    .inputs
                    .iter()
                    .enumerate()
                    .map(|(r, x)| {
                        let sel = t.selected[r];
                        let scores = match &m.gate {
                            Gate::Trainable(g) => ReferenceMlp::new(g.widths(), act, true)
                                .forward(gate_theta, x, &[], None)
                                .output,
                            Gate::Fixed(v) => v
                                .iter_rows()
                                .map(|row| row.iter().zip(x).map(|(a, b)| *a as f64 * b).sum())
                                .collect(),
                        };
                        let p = softmax_f64(&scores)[sel];
                        let expert = &theta[offsets[sel]..offsets[sel + 1]];
                        nets[sel]
                            .forward(expert, x, &[], None)
                            .output
                            .into_iter()
                            .map(|v| p * v)
                            .collect()
                    })
                    .collect();
                reference_loss(&outputs, self.targets)
            }
            _ => unreachable!("trace kind follows body kind"),
        }
    }
}

fn flatten_groups(groups: &[&ModelParams]) -> Vec<f64> {
    groups.iter().flat_map(|p| flatten_f64(p)).collect()
}

/// Compares `analytic` (one entry per parameter group) with finite differences of
/// the frozen-mask oracle. `rng` must be the state the analytic pass started from.
pub fn check_gradients(
    model: &Model,
    inputs: &Matrix,
    targets: &Targets,
    ids: &[usize],
    rng: &RngStream,
    analytic: &[ModelParams],
    tolerance: f64,
) -> Result<GradCheckReport> {
    let trace = model.forward(inputs, Phase::Train(ids), &mut rng.clone(), None)?;
    let objective = FrozenObjective {
        model,
        trace: &trace,
        inputs: inputs
            .iter_rows()
            .map(|r| r.iter().map(|&v| v as f64).collect())
            .collect(),
        targets,
    };
    let mut theta = flatten_groups(&model.param_groups());
    let kinked = l1_weight_flags(model);
    let candidate = flatten_groups(&analytic.iter().collect::<Vec<_>>());
    let mut max_rel_error = 0.0;
    let mut worst_index = 0;
    let mut failures = 0;
    for i in 0..theta.len() {
        let orig = theta[i];
        // keep the stencil on one side of the |w| kink of the L1 penalty
        let h = if kinked.get(i).copied().unwrap_or(false) && orig != 0.0 && orig.abs() < FD_STEP {
            orig.abs() / 2.0
        } else {
            FD_STEP
        };
        theta[i] = orig + h;
        let up = objective.loss(&theta);
        theta[i] = orig - h;
        let down = objective.loss(&theta);
        theta[i] = orig;
        let fd = (up - down) / (2.0 * h);
        let err = relative_error(candidate.get(i).copied().unwrap_or(f64::NAN), fd);
        if !(err <= tolerance) {
            failures += 1;
        }
        if !(err <= max_rel_error) {
            max_rel_error = err;
            worst_index = i;
        }
    }
    if candidate.len() != theta.len() {
        failures += 1;
    }
    let masked_nonzero = masked_gradient_leaks(model, inputs, targets, ids, rng)?;
    Ok(GradCheckReport {
        variant: model.variant(),
        params_checked: theta.len(),
        max_rel_error,
        worst_index,
        failures,
        masked_nonzero,
        tolerance,
        passed: failures == 0 && masked_nonzero == 0,
    })
}

/// Marks flat coordinates that carry an L1 penalty (weights of an L1 model).
fn l1_weight_flags(model: &Model) -> Vec<bool> {
    let Body::Dense(p) = model.body() else {
        return Vec::new();
    };
    if model.variant() != Variant::L1 {
        return Vec::new();
    }
    let mut flags = Vec::with_capacity(p.num_params());
    for (w, b) in p.weights.iter().zip(&p.biases) {
        flags.extend(std::iter::repeat(true).take(w.as_slice().len()));
        flags.extend(std::iter::repeat(false).take(b.len()));
    }
    flags
}

/// Per example, counts masked hidden neurons whose incoming weights or bias
/// receive a nonzero backbone gradient (the gradient at `a_l` must be exactly zero).
fn masked_gradient_leaks(
    model: &Model,
    inputs: &Matrix,
    targets: &Targets,
    ids: &[usize],
    rng: &RngStream,
) -> Result<usize> {
    let Body::Dense(params) = model.body() else {
        return Ok(0);
    };
    let ModelTrace::Dense(trace) = model.forward(inputs, Phase::Train(ids), &mut rng.clone(), None)? else {
        unreachable!("dense body gives a dense trace")
    };
    let mut leaks = 0;
    for r in 0..inputs.rows() {
        let one = [r];
        let Some(masks) = trace
            .multipliers
            .iter()
            .map(|m| m.as_ref().map(|m| m.select_rows(&one)))
            .collect::<Option<Vec<Matrix>>>()
        else {
            continue;
        };
        let x = inputs.select_rows(&one);
        let single = forward_masked(params, model.spec().activation, &masks, &x, trace.bias)?;
        let (_, g) = loss_for(single.output(), &targets.select(&one))?;
        let grads = backward(&single, params, &g)?;
        for (l, m) in masks.iter().enumerate() {
            for (i, &mv) in m.row(0).iter().enumerate() {
                if mv == 0.0
                    && (grads.weights[l].row(i).iter().any(|&v| v != 0.0) || grads.biases[l][i] != 0.0)
                {
                    leaks += 1;
                }
            }
        }
    }
    Ok(leaks)
}

/// Replaces the first weight gradient by its transpose read back in the original
/// shape: the classic indexing bug, used as a negative control.
pub fn corrupt_transpose(grads: &mut [ModelParams]) {
    let w = &mut grads[0].weights[0];
    let (r, c) = w.shape();
    let t = w.transpose().into_vec();
    *w = Matrix::from_vec(r, c, t).expect("same element count");
}

/// Small tanh model of `variant` (`p_k = 0.5`) with a random classification batch.
pub fn tiny_problem(variant: Variant, seed: u64) -> Result<(Model, Matrix, Targets, Vec<usize>)> {
    let spec = MlpSpec::new(vec![4, 8, 6, 3], Activation::Tanh, 0.5, variant);
    let batch = 4;
    let model = Model::build(&spec, &BaselineConfig::default(), seed, batch)?;
    let mut rng = RngStream::new(seed, 100);
    let inputs = Matrix::from_vec(
        batch,
        4,
        (0..batch * 4).map(|_| rng.normal(0.0, 1.0) as f32).collect(),
    )?;
    let labels = (0..batch).map(|_| rng.below(3)).collect();
    Ok((model, inputs, Targets::Labels { labels, classes: 3 }, (0..batch).collect()))
}

/// Builds a tiny random model of `variant` and checks every parameter gradient.
pub fn grad_check(variant: Variant, seed: u64, tolerance: f64) -> Result<GradCheckReport> {
    let (model, inputs, targets, ids) = tiny_problem(variant, seed)?;
    let rng = RngStream::new(seed, 101);
    let (_, grads) = model.loss_and_grads(&inputs, &targets, &ids, &mut rng.clone(), None)?;
    check_gradients(&model, &inputs, &targets, &ids, &rng, &grads, tolerance)
}
