//! Exact empirical NTK on tiny networks and its per-layer factorization.

use serde::Serialize;

use super::grad_check::FD_STEP;
use super::reference::{flatten_f64, ReferenceMlp};
use crate::backbone::{backward, ModelParams};
use crate::error::{CometError, Result};
use crate::model::{Body, Model, ModelTrace, Phase};
use crate::numerics::{Matrix, RngStream};

pub const NTK_MAX_LAYERS: usize = 3;
pub const NTK_MAX_WIDTH: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct NtkReport {
    pub output_dim: usize,
    /// `K(x_train, x_test) = J_test J_train^T` from analytic Jacobians, row-major.
    pub kernel: Vec<f64>,
    /// The same kernel from finite-difference Jacobians.
    pub kernel_oracle: Vec<f64>,
    /// Contribution of each weight matrix `W_l` to `kernel`.
    pub weight_blocks: Vec<Vec<f64>>,
    pub jacobian_rel_error: f64,
    pub kernel_rel_error: f64,
    /// Per layer, mismatch between the `W_l` block and its activation-inner-product form.
    pub block_rel_errors: Vec<f64>,
    pub tolerance: f64,
    pub passed: bool,
}

/// Frobenius norm of `a - b` relative to the larger norm; zero when both vanish.
pub fn frobenius_rel_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale < 1e-12 {
        0.0
    } else {
        diff / scale
    }
}

struct Probe {
    /// Analytic Jacobian, `N_L x P` row-major.
    jacobian: Vec<f64>,
    /// Finite-difference Jacobian.
    jacobian_oracle: Vec<f64>,
    /// Layer inputs `x_0..x_{L-1}` from the oracle pass.
    layer_inputs: Vec<Vec<f64>>,
    /// Per layer, `d a_L / d a_l` as `N_L x N_l` row-major.
    sensitivities: Vec<Vec<f64>>,
}

fn check_size(params: &ModelParams) -> Result<()> {
    let widths = params.widths();
    if params.depth() > NTK_MAX_LAYERS || widths.iter().any(|&w| w > NTK_MAX_WIDTH) {
        return Err(CometError::Refused(format!(
            "exact NTK needs at most {NTK_MAX_LAYERS} layers of width at most {NTK_MAX_WIDTH}, got widths {widths:?}"
        )));
    }
    Ok(())
}

fn probe(model: &Model, params: &ModelParams, x: &[f32]) -> Result<Probe> {
    let input = Matrix::row_vector(x)?;
    let mut unused = RngStream::new(0, 0);
    let ModelTrace::Dense(trace) = model.forward(&input, Phase::Eval, &mut unused, None)? else {
        unreachable!("dense body gives a dense trace")
    };
    let n_out = params.widths()[params.depth()];
    let p = params.num_params();

    let mut jacobian = Vec::with_capacity(n_out * p);
    for o in 0..n_out {
        let mut seed = Matrix::zeros(1, n_out);
        seed.set(0, o, 1.0);
        let g = backward(&trace, params, &seed)?;
        jacobian.extend(g.flatten().into_iter().map(f64::from));
    }

    let net = ReferenceMlp::new(params.widths(), model.spec().activation, trace.bias);
    let mults: Vec<Option<Vec<f64>>> = trace
        .multipliers
        .iter()
        .map(|m| m.as_ref().map(|m| m.row(0).iter().map(|&v| v as f64).collect()))
        .collect();
    let x64: Vec<f64> = x.iter().map(|&v| v as f64).collect();
    let mut theta = flatten_f64(params);
    let mut jacobian_oracle = vec![0.0; n_out * p];
    for j in 0..p {
        let orig = theta[j];
        theta[j] = orig + FD_STEP;
        let up = net.forward(&theta, &x64, &mults, None).output;
        theta[j] = orig - FD_STEP;
        let down = net.forward(&theta, &x64, &mults, None).output;
        theta[j] = orig;
        for o in 0..n_out {
            jacobian_oracle[o * p + j] = (up[o] - down[o]) / (2.0 * FD_STEP);
        }
    }

    let base = net.forward(&theta, &x64, &mults, None);
    let mut layer_inputs = vec![x64.clone()];
    layer_inputs.extend(base.activations.iter().cloned());
    let mut sensitivities = Vec::new();
    for l in 0..params.depth() {
        let width = params.widths()[l + 1];
        let mut s = vec![0.0; n_out * width];
        for i in 0..width {
            let up = net.forward(&theta, &x64, &mults, Some((l, i, FD_STEP))).output;
            let down = net.forward(&theta, &x64, &mults, Some((l, i, -FD_STEP))).output;
            for o in 0..n_out {
                s[o * width + i] = (up[o] - down[o]) / (2.0 * FD_STEP);
            }
        }
        sensitivities.push(s);
    }
    Ok(Probe {
        jacobian,
        jacobian_oracle,
        layer_inputs,
        sensitivities,
    })
}

/// `sum_{p in range} A[o, p] B[o', p]` for all output pairs.
fn kernel_over(a: &[f64], b: &[f64], n_out: usize, p: usize, range: std::ops::Range<usize>) -> Vec<f64> {
    let mut k = vec![0.0; n_out * n_out];
    for o in 0..n_out {
        for q in 0..n_out {
            k[o * n_out + q] = range.clone().map(|j| a[o * p + j] * b[q * p + j]).sum();
        }
    }
    k
}

/// Checks the analytic NTK against finite differences and the factorization of
/// each `W_l` block into `<x_{l-1}, x'_{l-1}> * sum_i (d a_L / d a_{l,i})(d a'_L / d a'_{l,i})^T`.
/// Masks and other multipliers are those each input receives at evaluation.
pub fn verify_ntk_decomposition(
    model: &Model,
    x_train: &[f32],
    x_test: &[f32],
    tolerance: f64,
) -> Result<NtkReport> {
    let Body::Dense(params) = model.body() else {
        return Err(CometError::Refused("exact NTK supports single-backbone models only".into()));
    };
    check_size(params)?;
    let train = probe(model, params, x_train)?;
    let test = probe(model, params, x_test)?;
    let widths = params.widths();
    let n_out = widths[params.depth()];
    let p = params.num_params();

    let kernel = kernel_over(&test.jacobian, &train.jacobian, n_out, p, 0..p);
    let kernel_oracle = kernel_over(&test.jacobian_oracle, &train.jacobian_oracle, n_out, p, 0..p);
    let jacobian_rel_error = frobenius_rel_error(&train.jacobian, &train.jacobian_oracle)
        .max(frobenius_rel_error(&test.jacobian, &test.jacobian_oracle));
    let kernel_rel_error = frobenius_rel_error(&kernel, &kernel_oracle);

    let net = ReferenceMlp::new(widths.clone(), model.spec().activation, true);
    let mut weight_blocks = Vec::new();
    let mut block_rel_errors = Vec::new();
    for l in 0..params.depth() {
        let (w_off, b_off) = net.layer_offsets(l);
        let block = kernel_over(&test.jacobian, &train.jacobian, n_out, p, w_off..b_off);
        let inner: f64 = train.layer_inputs[l]
            .iter()
            .zip(&test.layer_inputs[l])
            .map(|(a, b)| a * b)
            .sum();
        let width = widths[l + 1];
        let (st, sr) = (&test.sensitivities[l], &train.sensitivities[l]);
        let mut factored = vec![0.0; n_out * n_out];
        for o in 0..n_out {
            for q in 0..n_out {
                let s: f64 = (0..width).map(|i| st[o * width + i] * sr[q * width + i]).sum();
                factored[o * n_out + q] = inner * s;
            }
        }
        block_rel_errors.push(frobenius_rel_error(&block, &factored));
        weight_blocks.push(block);
    }
    let passed = jacobian_rel_error <= tolerance
        && kernel_rel_error <= tolerance
        && block_rel_errors.iter().all(|&e| e <= tolerance);
    Ok(NtkReport {
        output_dim: n_out,
        kernel,
        kernel_oracle,
        weight_blocks,
        jacobian_rel_error,
        kernel_rel_error,
        block_rel_errors,
        tolerance,
        passed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{Activation, MlpSpec, Variant};
    use crate::baselines::BaselineConfig;

    fn model(widths: Vec<usize>, variant: Variant, seed: u64) -> Model {
        let spec = MlpSpec::new(widths, Activation::Tanh, 0.5, variant);
        Model::build(&spec, &BaselineConfig::default(), seed, 0).unwrap()
    }

    #[test]
    fn linear_layer_kernel_is_scaled_identity() {
        let m = model(vec![3, 2], Variant::Standard, 1);
        let (x, y) = ([0.5f32, -1.0, 2.0], [1.0f32, 0.25, -0.5]);
        let r = verify_ntk_decomposition(&m, &x, &y, 1e-4).unwrap();
        let inner = 0.5 - 0.25 - 1.0;
        let w = &r.weight_blocks[0];
        assert!((w[0] - inner).abs() < 1e-6 && (w[3] - inner).abs() < 1e-6);
        assert!(w[1].abs() < 1e-12 && w[2].abs() < 1e-12);
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn same_input_gives_symmetric_psd_kernel() {
        let m = model(vec![4, 10, 3], Variant::Standard, 2);
        let x = [0.3f32, -0.7, 1.1, 0.2];
        let r = verify_ntk_decomposition(&m, &x, &x, 1e-4).unwrap();
        let k = &r.kernel;
        for o in 0..3 {
            for q in 0..3 {
                assert!((k[o * 3 + q] - k[q * 3 + o]).abs() < 1e-9);
            }
        }
        // Gram matrix: v^T K v >= 0 for a few directions
        for v in [[1.0, 0.0, 0.0], [1.0, -1.0, 0.5], [0.2, 0.3, -0.9]] {
            let mut q = 0.0;
            for o in 0..3 {
                for p in 0..3 {
                    q += v[o] * k[o * 3 + p] * v[p];
                }
            }
            assert!(q >= -1e-9);
        }
    }

    #[test]
    fn two_layer_tanh_block_identity() {
        for (seed, variant) in [(3, Variant::Standard), (4, Variant::Comet)] {
            let m = model(vec![5, 12, 3], variant, seed);
            let r = verify_ntk_decomposition(&m, &[0.1, 0.5, -0.3, 0.9, -1.0], &[0.4, -0.2, 0.8, 0.1, 0.3], 1e-4).unwrap();
            assert!(r.passed, "{variant}: {r:?}");
        }
    }

    #[test]
    fn oversized_model_refused() {
        let m = model(vec![4, 64, 3], Variant::Standard, 1);
        let err = verify_ntk_decomposition(&m, &[0.0; 4], &[0.0; 4], 1e-4).unwrap_err();
        assert!(matches!(err, CometError::Refused(_)));
        let deep = model(vec![4, 8, 8, 8, 3], Variant::Standard, 1);
        assert!(matches!(
            verify_ntk_decomposition(&deep, &[0.0; 4], &[0.0; 4], 1e-4),
            Err(CometError::Refused(_))
        ));
    }
}
