use crate::backbone::{forward_standard, forward_with, Activation, ForwardTrace, ModelParams};
use crate::error::{CometError, Result};
use crate::numerics::{matmul, Matrix, RngStream};
use crate::routing::{cap_into, check_p_k, k_for, RoutingParams};

/// Inverted-dropout multipliers: each entry is `1 / p_keep` with probability
/// `p_keep`, else 0.
pub fn dropout_multipliers(rng: &mut RngStream, rows: usize, cols: usize, p_keep: f64) -> Matrix {
    let scale = (1.0 / p_keep) as f32;
    let data = (0..rows * cols)
        .map(|_| if rng.bernoulli(p_keep) { scale } else { 0.0 })
        .collect();
    Matrix::from_raw(rows, cols, data)
}

/// Inverted dropout at rate `1 - p_k` during training, identity at evaluation.
pub fn forward_dropout(
    params: &ModelParams,
    activation: Activation,
    inputs: &Matrix,
    p_k: f64,
    rng: &mut RngStream,
    training: bool,
) -> Result<ForwardTrace> {
    check_p_k(p_k)?;
    if !training {
        return forward_standard(params, activation, inputs);
    }
    forward_with(params, activation, inputs, true, |_, _, a| {
        Ok(Some(dropout_multipliers(rng, a.rows(), a.cols(), p_k)))
    })
}

fn cap_rows(c: &Matrix, k: usize) -> Matrix {
    let mut m = Matrix::zeros(c.rows(), c.cols());
    let mut scratch = Vec::new();
    for r in 0..c.rows() {
        cap_into(c.row(r), k, m.row_mut(r), &mut scratch);
    }
    m
}

/// Cap applied to the backbone's own pre-activations: `m_l = cap(a_l, k_l)`.
pub fn forward_topk(
    params: &ModelParams,
    activation: Activation,
    inputs: &Matrix,
    p_k: f64,
) -> Result<ForwardTrace> {
    check_p_k(p_k)?;
    forward_with(params, activation, inputs, true, |_, _, a| {
        Ok(Some(cap_rows(a, k_for(p_k, a.cols())?)))
    })
}

/// Routing fed by the backbone: `c_l = V_l x_{l-1}`, `m_l = cap(c_l, k_l)`.
pub fn forward_layerwise_routing(
    params: &ModelParams,
    activation: Activation,
    routing: &RoutingParams,
    inputs: &Matrix,
    p_k: f64,
    bias: bool,
) -> Result<ForwardTrace> {
    check_p_k(p_k)?;
    if routing.num_layers() + 1 != params.depth() {
        return Err(CometError::shape(format!(
            "{} routing layers for a {}-layer network",
            routing.num_layers(),
            params.depth()
        )));
    }
    forward_with(params, activation, inputs, bias, |l, x_prev, a| {
        let c = matmul(x_prev, routing.transposed(l))?;
        if c.shape() != a.shape() {
            return Err(CometError::shape(format!("routing layer {} width mismatch", l + 1)));
        }
        c.check_finite("routing pre-activation")?;
        Ok(Some(cap_rows(&c, k_for(p_k, c.cols())?)))
    })
}

/// `coefficient * sum |W|` over weights only, with subgradient `coefficient * sign(W)`
/// (zero at exact zeros).
pub fn l1_penalty(params: &ModelParams, coefficient: f64) -> Result<(f64, ModelParams)> {
    if !(coefficient >= 0.0) {
        return Err(CometError::domain(format!(
            "L1 coefficient must be non-negative, got {coefficient}"
        )));
    }
    let mut grads = params.zeros_like();
    let mut total = 0.0f64;
    let c = coefficient as f32;
    for (w, g) in params.weights.iter().zip(grads.weights.iter_mut()) {
        for (wv, gv) in w.as_slice().iter().zip(g.as_mut_slice()) {
            total += (*wv as f64).abs();
            *gv = if *wv > 0.0 {
                c
            } else if *wv < 0.0 {
                -c
            } else {
                0.0
            };
        }
    }
    Ok((coefficient * total, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::forward_comet;
    use crate::routing::routing_forward_batch;

    fn setup(seed: u64, widths: &[usize], n: usize) -> (ModelParams, Matrix, RngStream) {
        let mut rng = RngStream::new(seed, 0);
        let p = ModelParams::init(widths, &mut rng).unwrap();
        let x = Matrix::from_vec(
            n,
            widths[0],
            (0..n * widths[0]).map(|_| rng.standard_normal() as f32).collect(),
        )
        .unwrap();
        (p, x, rng)
    }

    #[test]
    fn dropout_rate_zero_and_eval_are_standard() {
        let (p, x, mut rng) = setup(1, &[5, 7, 7, 2], 3);
        let s = forward_standard(&p, Activation::Relu, &x).unwrap();
        let d = forward_dropout(&p, Activation::Relu, &x, 1.0, &mut rng, true).unwrap();
        assert_eq!(s.output(), d.output());
        let e = forward_dropout(&p, Activation::Relu, &x, 0.3, &mut rng, false).unwrap();
        assert_eq!(s.output(), e.output());
    }

    #[test]
    fn dropout_drop_fraction() {
        let mut rng = RngStream::new(2, 0);
        let m = dropout_multipliers(&mut rng, 100, 1000, 0.5);
        let dropped = m.as_slice().iter().filter(|v| **v == 0.0).count() as f64 / 1e5;
        assert!((dropped - 0.5).abs() < 0.01, "{dropped}");
        assert!(m.as_slice().iter().all(|v| *v == 0.0 || *v == 2.0));
    }

    #[test]
    fn topk_full_is_standard() {
        let (p, x, _) = setup(3, &[5, 7, 7, 2], 3);
        let s = forward_standard(&p, Activation::Tanh, &x).unwrap();
        let t = forward_topk(&p, Activation::Tanh, &x, 1.0).unwrap();
        assert_eq!(s.output(), t.output());
    }

    #[test]
    fn topk_selects_largest_preactivations() {
        let (p, x, _) = setup(4, &[5, 10, 3], 2);
        let t = forward_topk(&p, Activation::Tanh, &x, 0.3).unwrap();
        let a = &t.pre_activations[0];
        let m = t.multipliers[0].as_ref().unwrap();
        for r in 0..2 {
            let mut order: Vec<usize> = (0..10).collect();
            order.sort_by(|&i, &j| a.get(r, j).partial_cmp(&a.get(r, i)).unwrap());
            let mut active: Vec<usize> = (0..10).filter(|&i| m.get(r, i) == 1.0).collect();
            let mut expect = order[..3].to_vec();
            active.sort_unstable();
            expect.sort_unstable();
            assert_eq!(active, expect);
        }
    }

    #[test]
    fn topk_masks_follow_parameters() {
        let (p1, x, _) = setup(5, &[6, 20, 20, 2], 1);
        let (p2, _, _) = setup(6, &[6, 20, 20, 2], 1);
        let t1 = forward_topk(&p1, Activation::Relu, &x, 0.3).unwrap();
        let t2 = forward_topk(&p2, Activation::Relu, &x, 0.3).unwrap();
        assert_ne!(t1.multipliers[0], t2.multipliers[0]);
    }

    #[test]
    fn layerwise_first_layer_matches_comet_and_full_is_standard() {
        let widths = [8, 30, 30, 30, 3];
        let (p, x, mut rng) = setup(7, &widths, 5);
        let routing = RoutingParams::init(&widths, &mut rng).unwrap();
        let masks = routing_forward_batch(&routing, &x, 0.4).unwrap();
        let comet = forward_comet(&p, Activation::Relu, &masks, &x, true).unwrap();
        let lw = forward_layerwise_routing(&p, Activation::Relu, &routing, &x, 0.4, true).unwrap();
        assert_eq!(comet.multipliers[0], lw.multipliers[0]);
        assert!(comet.multipliers[1..] != lw.multipliers[1..]);
        let full = forward_layerwise_routing(&p, Activation::Relu, &routing, &x, 1.0, true).unwrap();
        assert_eq!(full.output(), forward_standard(&p, Activation::Relu, &x).unwrap().output());
    }

    #[test]
    fn l1_cases() {
        let p = ModelParams::new(
            vec![Matrix::from_vec(1, 1, vec![-2.0]).unwrap()],
            vec![vec![5.0]],
        )
        .unwrap();
        let (v, g) = l1_penalty(&p, 0.5).unwrap();
        assert_eq!(v, 1.0);
        assert_eq!(g.weights[0].as_slice(), &[-0.5]);
        assert_eq!(g.biases[0], vec![0.0]);
        let (v, g) = l1_penalty(&p, 0.0).unwrap();
        assert_eq!(v, 0.0);
        assert!(g.flatten().iter().all(|x| *x == 0.0));
        assert!(l1_penalty(&p, -1.0).is_err());
    }

    #[test]
    fn l1_gradient_matches_differences() {
        let (p, _, _) = setup(8, &[4, 5, 3], 1);
        let coef = 0.3;
        let (_, g) = l1_penalty(&p, coef).unwrap();
        let flat: Vec<f64> = p.flatten().iter().map(|&v| v as f64).collect();
        let gflat = g.flatten();
        // mark weight positions (biases are excluded from the penalty)
        let mut is_weight = Vec::new();
        for (w, b) in p.weights.iter().zip(&p.biases) {
            is_weight.extend(std::iter::repeat(true).take(w.as_slice().len()));
            is_weight.extend(std::iter::repeat(false).take(b.len()));
        }
        let pen = |v: &[f64]| -> f64 {
            coef * v.iter().zip(&is_weight).filter(|(_, w)| **w).map(|(x, _)| x.abs()).sum::<f64>()
        };
        let h = 1e-6;
        for i in 0..flat.len() {
            if flat[i].abs() < 1e-3 {
                continue;
            }
            let mut up = flat.clone();
            up[i] += h;
            let mut dn = flat.clone();
            dn[i] -= h;
            let fd = (pen(&up) - pen(&dn)) / (2.0 * h);
            assert!((fd - gflat[i] as f64).abs() < 1e-5, "param {i}: {fd} vs {}", gflat[i]);
        }
    }
}
