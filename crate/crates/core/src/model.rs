//! A trainable model of any variant: backbone or mixture parameters plus the frozen
//! routing network or static mask table the variant needs.

use crate::backbone::{
    backward, batch_cross_entropy, batch_mse, forward_comet, forward_masked, forward_standard,
    ForwardTrace, MlpSpec, ModelParams, Variant,
};
use crate::baselines::{
    assign_static_masks, backward_moe, forward_dropout, forward_layerwise_routing, forward_moe,
    forward_topk, l1_penalty, scaled_widths, BaselineConfig, Gate, MaskTable, MoeParams, MoeTrace,
    StaticMaskMode,
};
use crate::data::Targets;
use crate::error::{CometError, Result};
use crate::numerics::{Matrix, RngStream};
use crate::routing::{routing_forward_batch, RoutingParams};

const BACKBONE_STREAM: u64 = 1;
const ROUTING_STREAM: u64 = 2;
const MASK_TABLE_STREAM: u64 = 3;

#[derive(Clone, Debug, PartialEq)]
pub enum Body {
    Dense(ModelParams),
    Moe(MoeParams),
}

/// Per-example treatment for variants that look masks up by example id.
#[derive(Clone, Copy, Debug)]
pub enum Phase<'a> {
    /// Training examples with their dataset indices.
    Train(&'a [usize]),
    /// Inputs without table entries (held-out data).
    Eval,
    /// Training-set rows evaluated without dropout.
    EvalKnown(&'a [usize]),
}

#[derive(Clone, Debug)]
pub enum ModelTrace {
    Dense(ForwardTrace),
    Moe(MoeTrace),
}

impl ModelTrace {
    pub fn output(&self) -> &Matrix {
        match self {
            ModelTrace::Dense(t) => t.output(),
            ModelTrace::Moe(t) => &t.output,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    spec: MlpSpec,
    baseline: BaselineConfig,
    body: Body,
    routing: Option<RoutingParams>,
    mask_table: Option<MaskTable>,
}

impl Model {
    /// Initializes every component from `seed`; backbone, routing and mask table
    /// each draw from their own stream. `train_size` sizes static mask tables.
    pub fn build(spec: &MlpSpec, baseline: &BaselineConfig, seed: u64, train_size: usize) -> Result<Self> {
        spec.validate()?;
        baseline.validate()?;
        let mut backbone_rng = RngStream::new(seed, BACKBONE_STREAM);
        let body = match spec.variant {
            Variant::MoeTrainable | Variant::MoeFixed => Body::Moe(MoeParams::init(
                &spec.widths,
                spec.p_k,
                spec.variant == Variant::MoeTrainable,
                baseline.gate_hidden_multiplier,
                &mut backbone_rng,
            )?),
            Variant::Smaller => Body::Dense(ModelParams::init(
                &scaled_widths(&spec.widths, spec.p_k),
                &mut backbone_rng,
            )?),
            _ => Body::Dense(ModelParams::init(&spec.widths, &mut backbone_rng)?),
        };
        let routing = if spec.variant.uses_routing() {
            Some(RoutingParams::init(
                &spec.widths,
                &mut RngStream::new(seed, ROUTING_STREAM),
            )?)
        } else {
            None
        };
        let mask_table = match spec.variant {
            Variant::BernoulliMask | Variant::ExampleTied => {
                let mode = if spec.variant == Variant::BernoulliMask {
                    StaticMaskMode::Bernoulli
                } else {
                    StaticMaskMode::ExampleTied
                };
                Some(assign_static_masks(
                    train_size,
                    spec.hidden_widths(),
                    spec.p_k,
                    baseline.generalization_fraction,
                    &mut RngStream::new(seed, MASK_TABLE_STREAM),
                    mode,
                )?)
            }
            _ => None,
        };
        Self::from_parts(spec.clone(), baseline.clone(), body, routing, mask_table)
    }

    /// Reassembles a model, checking that the parts fit the spec.
    pub fn from_parts(
        spec: MlpSpec,
        baseline: BaselineConfig,
        body: Body,
        routing: Option<RoutingParams>,
        mask_table: Option<MaskTable>,
    ) -> Result<Self> {
        spec.validate()?;
        let expected = match spec.variant {
            Variant::Smaller => scaled_widths(&spec.widths, spec.p_k),
            _ => spec.widths.clone(),
        };
        match &body {
            Body::Dense(p) => {
                p.check_consistent()?;
                if p.widths() != expected {
                    return Err(CometError::shape(format!(
                        "parameters have widths {:?}, spec needs {expected:?}",
                        p.widths()
                    )));
                }
            }
            Body::Moe(m) => {
                for e in &m.experts {
                    e.check_consistent()?;
                }
            }
        }
        let is_moe = matches!(spec.variant, Variant::MoeTrainable | Variant::MoeFixed);
        if is_moe != matches!(body, Body::Moe(_)) {
            return Err(CometError::Config(format!(
                "variant {} does not match the parameter layout",
                spec.variant
            )));
        }
        if spec.variant.uses_routing() {
            let r = routing
                .as_ref()
                .ok_or_else(|| CometError::Config(format!("variant {} needs routing", spec.variant)))?;
            if r.widths() != spec.hidden_widths() || r.input_dim() != spec.input_dim() {
                return Err(CometError::shape("routing network does not match the backbone"));
            }
        }
        if matches!(spec.variant, Variant::BernoulliMask | Variant::ExampleTied) && mask_table.is_none() {
            return Err(CometError::Config(format!("variant {} needs a mask table", spec.variant)));
        }
        Ok(Self {
            spec,
            baseline,
            body,
            routing,
            mask_table,
        })
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn baseline(&self) -> &BaselineConfig {
        &self.baseline
    }

    pub fn body(&self) -> &Body {
        &self.body
    }

    pub fn routing(&self) -> Option<&RoutingParams> {
        self.routing.as_ref()
    }

    pub fn mask_table(&self) -> Option<&MaskTable> {
        self.mask_table.as_ref()
    }

    pub fn variant(&self) -> Variant {
        self.spec.variant
    }

    /// Trainable parameter tensors; gradients come back in the same order.
    pub fn param_groups(&self) -> Vec<&ModelParams> {
        match &self.body {
            Body::Dense(p) => vec![p],
            Body::Moe(m) => {
                let mut v: Vec<&ModelParams> = m.experts.iter().collect();
                if let Gate::Trainable(g) = &m.gate {
                    v.push(g);
                }
                v
            }
        }
    }

    pub fn param_groups_mut(&mut self) -> Vec<&mut ModelParams> {
        match &mut self.body {
            Body::Dense(p) => vec![p],
            Body::Moe(m) => {
                let mut v: Vec<&mut ModelParams> = m.experts.iter_mut().collect();
                if let Gate::Trainable(g) = &mut m.gate {
                    v.push(g);
                }
                v
            }
        }
    }

    /// Routing and static masks are frozen and not counted.
    pub fn trainable_param_count(&self) -> usize {
        self.param_groups().iter().map(|p| p.num_params()).sum()
    }

    pub fn uses_bias(&self) -> bool {
        !self.spec.variant.uses_routing() || self.spec.masked_bias
    }

    /// Routing masks for `inputs`, for callers that cache them.
    pub fn routing_masks(&self, inputs: &Matrix) -> Result<Option<Vec<Matrix>>> {
        match (&self.routing, self.spec.variant) {
            (Some(r), Variant::Comet) => Ok(Some(routing_forward_batch(r, inputs, self.spec.p_k)?)),
            _ => Ok(None),
        }
    }

    /// Forward pass. `rng` is consumed only by dropout during training;
    /// `masks` overrides the COMET routing masks (e.g. from a cache).
    pub fn forward(
        &self,
        inputs: &Matrix,
        phase: Phase<'_>,
        rng: &mut RngStream,
        masks: Option<Vec<Matrix>>,
    ) -> Result<ModelTrace> {
        let act = self.spec.activation;
        let p_k = self.spec.p_k;
        let training = matches!(phase, Phase::Train(_));
        let params = match &self.body {
            Body::Moe(m) => return Ok(ModelTrace::Moe(forward_moe(m, act, inputs)?)),
            Body::Dense(p) => p,
        };
        let trace = match self.spec.variant {
            Variant::Standard | Variant::Smaller | Variant::L1 => forward_standard(params, act, inputs)?,
            Variant::Comet => {
                let masks = match masks {
                    Some(m) => m,
                    None => self.routing_masks(inputs)?.expect("comet has routing"),
                };
                forward_comet(params, act, &masks, inputs, self.spec.masked_bias)?
            }
            Variant::Dropout => forward_dropout(params, act, inputs, p_k, rng, training)?,
            Variant::Topk => forward_topk(params, act, inputs, p_k)?,
            Variant::LayerwiseRouting => forward_layerwise_routing(
                params,
                act,
                self.routing.as_ref().expect("layerwise has routing"),
                inputs,
                p_k,
                self.spec.masked_bias,
            )?,
            Variant::BernoulliMask | Variant::ExampleTied => {
                let table = self.mask_table.as_ref().expect("static-mask variant has a table");
                let masks = match phase {
                    Phase::Train(ids) | Phase::EvalKnown(ids) => table.batch_masks(ids)?,
                    Phase::Eval => table.eval_batch_masks(inputs)?,
                };
                forward_masked(params, act, &masks, inputs, true)?
            }
            Variant::MoeTrainable | Variant::MoeFixed => unreachable!("handled above"),
        };
        Ok(ModelTrace::Dense(trace))
    }

    /// Deterministic evaluation output.
    pub fn predict(&self, inputs: &Matrix, phase: Phase<'_>) -> Result<Matrix> {
        let phase = match phase {
            Phase::Train(ids) => Phase::EvalKnown(ids),
            p => p,
        };
        // evaluation never draws randomness
        let mut unused = RngStream::new(0, 0);
        Ok(self.forward(inputs, phase, &mut unused, None)?.output().clone())
    }

    /// Objective value and gradients (one entry per parameter group) on a training batch.
    pub fn loss_and_grads(
        &self,
        inputs: &Matrix,
        targets: &Targets,
        ids: &[usize],
        rng: &mut RngStream,
        masks: Option<Vec<Matrix>>,
    ) -> Result<(f64, Vec<ModelParams>)> {
        let trace = self.forward(inputs, Phase::Train(ids), rng, masks)?;
        let (mut loss, grad) = loss_for(trace.output(), targets)?;
        let mut grads = match (&trace, &self.body) {
            (ModelTrace::Dense(t), Body::Dense(p)) => vec![backward(t, p, &grad)?],
            (ModelTrace::Moe(t), Body::Moe(m)) => {
                let g = backward_moe(t, m, &grad)?;
                let mut v = g.experts;
                v.extend(g.gate);
                v
            }
            _ => unreachable!("trace kind follows body kind"),
        };
        if self.spec.variant == Variant::L1 {
            let Body::Dense(p) = &self.body else { unreachable!() };
            let (penalty, pg) = l1_penalty(p, self.baseline.l1_coefficient)?;
            loss += penalty;
            for (g, extra) in grads[0].weights.iter_mut().zip(&pg.weights) {
                for (a, b) in g.as_mut_slice().iter_mut().zip(extra.as_slice()) {
                    *a += b;
                }
            }
        }
        Ok((loss, grads))
    }
}

/// Cross-entropy for labels, mean squared error for real targets.
pub fn loss_for(output: &Matrix, targets: &Targets) -> Result<(f64, Matrix)> {
    match targets {
        Targets::Labels { labels, .. } => batch_cross_entropy(output, labels),
        Targets::Values(t) => batch_mse(output, t),
    }
}
