use serde::{Deserialize, Serialize};

use super::{split_rows, DataSplits, Targets};
use crate::error::{CometError, Result};
use crate::numerics::{cosine_similarity, Matrix, RngStream};

/// Two input vectors and their cosine similarity.
#[derive(Clone, Debug, PartialEq)]
pub struct InputPair {
    pub u: Vec<f32>,
    pub v: Vec<f32>,
    pub cosine: f64,
}

/// Each vector has i.i.d. `Normal(mu, variance)` components, with `mu` a uniform
/// integer in `[mu_min, mu_max]` drawn per vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimilarityPairConfig {
    pub num_pairs: usize,
    pub dim: usize,
    pub mu_min: i64,
    pub mu_max: i64,
    pub variance: f64,
}

impl Default for SimilarityPairConfig {
    fn default() -> Self {
        Self {
            num_pairs: 500,
            dim: 100,
            mu_min: 0,
            mu_max: 100,
            variance: 25.0,
        }
    }
}

pub fn gen_similarity_pairs(rng: &mut RngStream, cfg: &SimilarityPairConfig) -> Result<Vec<InputPair>> {
    if cfg.num_pairs == 0 || cfg.dim == 0 {
        return Err(CometError::domain("need at least one pair of nonempty vectors"));
    }
    if cfg.mu_max < cfg.mu_min || !(cfg.variance > 0.0) {
        return Err(CometError::domain("invalid mean range or variance"));
    }
    let sd = cfg.variance.sqrt();
    let span = (cfg.mu_max - cfg.mu_min + 1) as usize;
    let draw = |rng: &mut RngStream| -> Vec<f32> {
        let mu = (cfg.mu_min + rng.below(span) as i64) as f64;
        (0..cfg.dim).map(|_| rng.normal(mu, sd) as f32).collect()
    };
    (0..cfg.num_pairs)
        .map(|_| {
            let u = draw(rng);
            let v = draw(rng);
            let cosine = cosine_similarity(&u, &v)?;
            Ok(InputPair { u, v, cosine })
        })
        .collect()
}

/// Gaussian clusters around `Normal(0, 1)` class centers; shuffled, then split 80/20.
pub fn gen_classification_blobs(
    rng: &mut RngStream,
    classes: usize,
    per_class: usize,
    dim: usize,
    spread: f64,
) -> Result<DataSplits> {
    if classes < 2 {
        return Err(CometError::domain("blobs need at least two classes"));
    }
    if per_class == 0 || dim == 0 || !(spread >= 0.0) {
        return Err(CometError::domain("invalid blob size, dimension or spread"));
    }
    let centers: Vec<Vec<f64>> = (0..classes)
        .map(|_| (0..dim).map(|_| rng.standard_normal()).collect())
        .collect();
    let mut order: Vec<usize> = (0..classes * per_class).collect();
    rng.shuffle(&mut order);
    let mut data = Vec::with_capacity(order.len() * dim);
    let mut labels = Vec::with_capacity(order.len());
    for &i in &order {
        let c = i / per_class;
        labels.push(c);
        data.extend(centers[c].iter().map(|&m| (m + spread * rng.standard_normal()) as f32));
    }
    let n = order.len();
    let inputs = Matrix::from_vec(n, dim, data)?;
    let n_train = ((0.8 * n as f64).round() as usize).clamp(1, n.saturating_sub(1).max(1));
    let provenance = format!(
        "blobs(seed={},stream={},classes={classes},per_class={per_class},dim={dim},spread={spread})",
        rng.seed(),
        rng.stream_id()
    );
    split_rows(inputs, Targets::Labels { labels, classes }, n_train, &provenance)
}

/// Smooth nonlinear regression: `y = sum_j a_j sin(u_j . x + phi_j) + w . x / 4`
/// with standard-normal inputs, split 90/10.
pub fn gen_regression(rng: &mut RngStream, n: usize, dim: usize) -> Result<DataSplits> {
    if n < 2 || dim == 0 {
        return Err(CometError::domain("regression set needs at least 2 examples"));
    }
    const TERMS: usize = 8;
    let scale = 1.0 / (dim as f64).sqrt();
    let dirs: Vec<Vec<f64>> = (0..TERMS)
        .map(|_| (0..dim).map(|_| rng.standard_normal() * scale).collect())
        .collect();
    let amps: Vec<f64> = (0..TERMS).map(|_| rng.standard_normal() / (TERMS as f64).sqrt()).collect();
    let phases: Vec<f64> = (0..TERMS).map(|_| rng.uniform_f64() * std::f64::consts::TAU).collect();
    let linear: Vec<f64> = (0..dim).map(|_| rng.standard_normal() * scale * 0.25).collect();
    let mut xs = Vec::with_capacity(n * dim);
    let mut ys = Vec::with_capacity(n);
    for _ in 0..n {
        let x: Vec<f64> = (0..dim).map(|_| rng.standard_normal()).collect();
        let mut y: f64 = x.iter().zip(&linear).map(|(a, b)| a * b).sum();
        for j in 0..TERMS {
            let proj: f64 = x.iter().zip(&dirs[j]).map(|(a, b)| a * b).sum();
            y += amps[j] * (proj + phases[j]).sin();
        }
        xs.extend(x.iter().map(|&v| v as f32));
        ys.push(y as f32);
    }
    let n_train = ((0.9 * n as f64).round() as usize).clamp(1, n - 1);
    let provenance = format!(
        "regression(seed={},stream={},n={n},dim={dim})",
        rng.seed(),
        rng.stream_id()
    );
    split_rows(
        Matrix::from_vec(n, dim, xs)?,
        Targets::Values(Matrix::from_vec(n, 1, ys)?),
        n_train,
        &provenance,
    )
}

const JOINTS: usize = 7;
const HARMONICS: usize = 3;

/// Inverse-dynamics-style regression over 21 inputs: joint positions, velocities
/// and accelerations of a 7-joint arm sampled along `trajectories` smooth
/// multi-sine paths, with the first joint's torque as target.
///
/// The torque is an inertia term `sum_j m_j (1 + cos(q_j - q_1) / 2) qdd_j`, a
/// velocity-product term `sum_j c_j sin(q_j) qd_j qd_{j+1}` and a gravity term
/// `sum_j g_j cos(q_1 + ... + q_j)`. Samples are shuffled and split 90/10; inputs
/// are standardized and the target scaled to unit variance with training-split
/// statistics.
pub fn gen_inverse_dynamics(rng: &mut RngStream, n: usize, trajectories: usize) -> Result<DataSplits> {
    if n < 2 || trajectories == 0 {
        return Err(CometError::domain("inverse dynamics set needs 2 examples and a trajectory"));
    }
    let provenance = format!(
        "inverse-dynamics(seed={},stream={},n={n},trajectories={trajectories})",
        rng.seed(),
        rng.stream_id()
    );
    // per trajectory, joint and harmonic: (amplitude, frequency, phase)
    let paths: Vec<Vec<[(f64, f64, f64); HARMONICS]>> = (0..trajectories)
        .map(|_| {
            (0..JOINTS)
                .map(|_| {
                    std::array::from_fn(|h| {
                        let amp = (0.2 + 0.8 * rng.uniform_f64()) / (h + 1) as f64;
                        let freq = (0.5 + 1.5 * rng.uniform_f64()) * (h + 1) as f64;
                        (amp, freq, rng.uniform_f64() * std::f64::consts::TAU)
                    })
                })
                .collect()
        })
        .collect();
    let inertia: Vec<f64> = (0..JOINTS).map(|j| (0.5 + rng.uniform_f64()) / (j + 1) as f64).collect();
    let coriolis: Vec<f64> = (0..JOINTS).map(|_| rng.standard_normal() * 0.3).collect();
    let gravity: Vec<f64> = (0..JOINTS).map(|j| (1.0 + rng.uniform_f64()) * (JOINTS - j) as f64 / JOINTS as f64).collect();

    let mut xs = Vec::with_capacity(n * 3 * JOINTS);
    let mut ys = Vec::with_capacity(n);
    for _ in 0..n {
        let path = &paths[rng.below(trajectories)];
        let t = rng.uniform_f64() * 10.0;
        let mut q = [0.0f64; JOINTS];
        let mut qd = [0.0f64; JOINTS];
        let mut qdd = [0.0f64; JOINTS];
        for j in 0..JOINTS {
            for &(a, w, phi) in &path[j] {
                let (s, c) = (w * t + phi).sin_cos();
                q[j] += a * s;
                qd[j] += a * w * c;
                qdd[j] -= a * w * w * s;
            }
        }
        let mut tau = 0.0;
        let mut angle = 0.0;
        for j in 0..JOINTS {
            tau += inertia[j] * (1.0 + 0.5 * (q[j] - q[0]).cos()) * qdd[j];
            tau += coriolis[j] * q[j].sin() * qd[j] * qd[(j + 1) % JOINTS];
            angle += q[j];
            tau += gravity[j] * angle.cos();
        }
        xs.extend(q.iter().chain(&qd).chain(&qdd));
        ys.push(tau);
    }
    let n_train = ((0.9 * n as f64).round() as usize).clamp(1, n - 1);
    let dim = 3 * JOINTS;
    let mut inputs = Vec::with_capacity(n * dim);
    let stats: Vec<(f64, f64)> = (0..dim)
        .map(|c| mean_sd((0..n_train).map(|r| xs[r * dim + c])))
        .collect();
    for r in 0..n {
        for (c, &(m, sd)) in stats.iter().enumerate() {
            inputs.push(((xs[r * dim + c] - m) / sd) as f32);
        }
    }
    let (ym, ysd) = mean_sd(ys[..n_train].iter().copied());
    let targets: Vec<f32> = ys.iter().map(|&y| ((y - ym) / ysd) as f32).collect();
    split_rows(
        Matrix::from_vec(n, dim, inputs)?,
        Targets::Values(Matrix::from_vec(n, 1, targets)?),
        n_train,
        &provenance,
    )
}

/// Mean and standard deviation; a zero spread is reported as 1.
fn mean_sd(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let count = values.clone().count().max(1) as f64;
    let mean = values.clone().sum::<f64>() / count;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / count;
    let sd = var.sqrt();
    (mean, if sd > 0.0 { sd } else { 1.0 })
}

/// Isotropic standard-normal probe inputs.
pub fn gen_gaussian_probe(rng: &mut RngStream, n: usize, dim: usize) -> Result<Matrix> {
    Matrix::from_vec(n, dim, (0..n * dim).map(|_| rng.standard_normal() as f32).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn equal_means_converge_to_population_cosine() {
        let mut rng = RngStream::new(1, 0);
        for mu in [3i64, 10, 40] {
            let cfg = SimilarityPairConfig {
                num_pairs: 1,
                dim: 10_000,
                mu_min: mu,
                mu_max: mu,
                variance: 25.0,
            };
            let pair = &gen_similarity_pairs(&mut rng, &cfg).unwrap()[0];
            let m = mu as f64;
            let expected = m * m / (m * m + 25.0);
            assert!((pair.cosine - expected).abs() < 0.02, "mu {mu}: {} vs {expected}", pair.cosine);
        }
    }

    #[test]
    fn zero_mean_pairs_are_near_orthogonal() {
        let mut rng = RngStream::new(2, 0);
        let cfg = SimilarityPairConfig {
            num_pairs: 5,
            dim: 10_000,
            mu_min: 0,
            mu_max: 0,
            variance: 25.0,
        };
        for p in gen_similarity_pairs(&mut rng, &cfg).unwrap() {
            // sd of the cosine is 1/sqrt(dim) = 0.01
            assert!(p.cosine.abs() < 0.05);
        }
    }

    #[test]
    fn pairs_are_reproducible() {
        let cfg = SimilarityPairConfig { num_pairs: 10, ..Default::default() };
        let a = gen_similarity_pairs(&mut RngStream::new(3, 3), &cfg).unwrap();
        let b = gen_similarity_pairs(&mut RngStream::new(3, 3), &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a[0].u.len(), 100);
    }

    #[test]
    fn zero_spread_blobs_are_centroid_separable() {
        let mut rng = RngStream::new(4, 0);
        let d = gen_classification_blobs(&mut rng, 3, 20, 5, 0.0).unwrap();
        assert_eq!(d.train.len() + d.eval.len(), 60);
        assert_eq!(d.train.len(), 48);
        let Targets::Labels { labels, .. } = &d.train.targets else { unreachable!() };
        // identical points within a class, so the first member is the centroid
        for c in 0..3 {
            let first = labels.iter().position(|&l| l == c).unwrap();
            for (i, &l) in labels.iter().enumerate() {
                let same = d.train.inputs.row(i) == d.train.inputs.row(first);
                assert_eq!(same, l == c);
            }
        }
    }

    #[test]
    fn blobs_are_reproducible() {
        let a = gen_classification_blobs(&mut RngStream::new(5, 0), 2, 10, 3, 0.1).unwrap();
        let b = gen_classification_blobs(&mut RngStream::new(5, 0), 2, 10, 3, 0.1).unwrap();
        assert_eq!(a, b);
        assert!(gen_classification_blobs(&mut RngStream::new(5, 0), 1, 10, 3, 0.1).is_err());
    }

    #[test]
    fn regression_shapes() {
        let d = gen_regression(&mut RngStream::new(6, 0), 100, 21).unwrap();
        assert_eq!(d.train.len(), 90);
        assert_eq!(d.eval.len(), 10);
        assert_eq!(d.input_dim(), 21);
        assert_eq!(d.output_dim(), 1);
    }

    #[test]
    fn inverse_dynamics_is_standardized_on_train() {
        let d = gen_inverse_dynamics(&mut RngStream::new(1, 0), 500, 4).unwrap();
        assert_eq!((d.train.len(), d.eval.len()), (450, 50));
        assert_eq!(d.input_dim(), 21);
        for c in 0..21 {
            let col: Vec<f64> = (0..450).map(|r| d.train.inputs.get(r, c) as f64).collect();
            let (m, sd) = mean_sd(col.iter().copied());
            assert!(m.abs() < 1e-5 && (sd - 1.0).abs() < 1e-4, "column {c}: {m} {sd}");
        }
        let Targets::Values(y) = &d.train.targets else { panic!("regression targets") };
        let (m, sd) = mean_sd(y.as_slice().iter().map(|&v| v as f64));
        assert!(m.abs() < 1e-5 && (sd - 1.0).abs() < 1e-4);
        let again = gen_inverse_dynamics(&mut RngStream::new(1, 0), 500, 4).unwrap();
        assert_eq!(again.train.inputs, d.train.inputs);
        assert!(gen_inverse_dynamics(&mut RngStream::new(1, 0), 10, 0).is_err());
    }
}
