//! How often each routed neuron is switched on over a probe set.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{CometError, Result};
use crate::numerics::{Matrix, RngStream};
use crate::routing::{k_for, routing_forward_batch, RoutingParams};

const NETWORK_STREAM: u64 = 31;
const PROBE_CHUNK: usize = 2048;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UtilizationConfig {
    pub networks: usize,
    pub hidden_layers: usize,
    pub min_width: usize,
    pub max_width: usize,
    /// Sparsity `1 - p_k` is drawn uniformly from `[min_sparsity, max_sparsity)`.
    pub min_sparsity: f64,
    pub max_sparsity: f64,
    pub seed: u64,
}

impl Default for UtilizationConfig {
    fn default() -> Self {
        Self {
            networks: 200,
            hidden_layers: 3,
            min_width: 100,
            max_width: 1000,
            min_sparsity: 0.05,
            max_sparsity: 1.0,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct NetworkUtilization {
    pub network: usize,
    pub widths: Vec<usize>,
    pub p_k: f64,
    pub k_per_layer: Vec<usize>,
    /// Per layer and neuron, the fraction of probe inputs with the mask bit set.
    pub frequencies: Vec<Vec<f64>>,
    pub dead: usize,
    /// Neurons dead on the first probe that fire on the second one.
    pub reactivated: Option<usize>,
}

impl NetworkUtilization {
    pub fn neurons(&self) -> usize {
        self.widths.iter().sum()
    }

    /// Largest gap between a layer's mean utilization and `k_l / N_l`.
    pub fn mean_utilization_error(&self) -> f64 {
        self.frequencies
            .iter()
            .zip(self.k_per_layer.iter().zip(&self.widths))
            .map(|(f, (&k, &n))| (f.iter().sum::<f64>() / n as f64 - k as f64 / n as f64).abs())
            .fold(0.0, f64::max)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct UtilizationReport {
    pub config: UtilizationConfig,
    pub probe_size: usize,
    pub networks: Vec<NetworkUtilization>,
    pub total_neurons: usize,
    pub dead_neurons: usize,
    pub dead_fraction: f64,
    pub networks_with_dead_fraction: f64,
    pub reactivated_fraction: Option<f64>,
}

impl UtilizationReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("network,widths,p_k,k_per_layer,neurons,dead,reactivated,min_frequency,max_frequency\n");
        for n in &self.networks {
            let all = n.frequencies.iter().flatten();
            let min = all.clone().cloned().fold(f64::INFINITY, f64::min);
            let max = all.cloned().fold(f64::NEG_INFINITY, f64::max);
            let join = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" ");
            let _ = writeln!(
                out,
                "{},{},{:?},{},{},{},{},{:?},{:?}",
                n.network,
                join(&n.widths),
                n.p_k,
                join(&n.k_per_layer),
                n.neurons(),
                n.dead,
                n.reactivated.map_or(String::new(), |r| r.to_string()),
                min,
                max
            );
        }
        out
    }

    /// One row per neuron, for histogram plots.
    pub fn frequencies_csv(&self) -> String {
        let mut out = String::from("network,layer,neuron,frequency\n");
        for n in &self.networks {
            for (l, f) in n.frequencies.iter().enumerate() {
                for (i, v) in f.iter().enumerate() {
                    let _ = writeln!(out, "{},{},{},{:?}", n.network, l + 1, i, v);
                }
            }
        }
        out
    }
}

/// How many probe rows switch on each neuron of each routed layer.
pub fn activation_counts(routing: &RoutingParams, probe: &Matrix, p_k: f64) -> Result<Vec<Vec<u64>>> {
    let mut counts: Vec<Vec<u64>> = routing.widths().iter().map(|&w| vec![0; w]).collect();
    let mut start = 0;
    while start < probe.rows() {
        let ids: Vec<usize> = (start..(start + PROBE_CHUNK).min(probe.rows())).collect();
        let masks = routing_forward_batch(routing, &probe.select_rows(&ids), p_k)?;
        for (c, m) in counts.iter_mut().zip(&masks) {
            for row in m.iter_rows() {
                for (slot, &bit) in c.iter_mut().zip(row) {
                    if bit != 0.0 {
                        *slot += 1;
                    }
                }
            }
        }
        start += ids.len();
    }
    Ok(counts)
}

/// Dead-neuron census over randomly sized routing networks. `input_dim` comes from
/// the probe; the optional second probe measures reactivation.
pub fn run_utilization_experiment(
    cfg: &UtilizationConfig,
    probe: &Matrix,
    second_probe: Option<&Matrix>,
) -> Result<UtilizationReport> {
    if probe.rows() == 0 {
        return Err(CometError::domain("probe set is empty"));
    }
    if cfg.networks == 0 || cfg.hidden_layers == 0 {
        return Err(CometError::Config("need at least one network with a hidden layer".into()));
    }
    if cfg.min_width == 0 || cfg.max_width < cfg.min_width {
        return Err(CometError::Config("invalid width range".into()));
    }
    if !(0.0 <= cfg.min_sparsity && cfg.min_sparsity < cfg.max_sparsity && cfg.max_sparsity <= 1.0) {
        return Err(CometError::Config("sparsity range must satisfy 0 <= min < max <= 1".into()));
    }
    if let Some(s) = second_probe {
        if s.cols() != probe.cols() || s.rows() == 0 {
            return Err(CometError::shape("second probe must be nonempty with the same input width"));
        }
    }
    let networks = (0..cfg.networks)
        .into_par_iter()
        .map(|i| {
            let mut rng = RngStream::new(cfg.seed, NETWORK_STREAM).derive(i as u64);
            let mut widths = vec![probe.cols()];
            for _ in 0..cfg.hidden_layers {
                widths.push(cfg.min_width + rng.below(cfg.max_width - cfg.min_width + 1));
            }
            let sparsity = cfg.min_sparsity + (cfg.max_sparsity - cfg.min_sparsity) * rng.uniform_f64();
            let p_k = 1.0 - sparsity;
            widths.push(1);
            let routing = RoutingParams::init(&widths, &mut rng.derive(1))?;
            let hidden = routing.widths();
            let counts = activation_counts(&routing, probe, p_k)?;
            let dead_mask: Vec<Vec<bool>> = counts.iter().map(|c| c.iter().map(|&v| v == 0).collect()).collect();
            let dead = dead_mask.iter().flatten().filter(|&&d| d).count();
            let reactivated = match second_probe {
                Some(s) => {
                    let again = activation_counts(&routing, s, p_k)?;
                    Some(
                        dead_mask
                            .iter()
                            .flatten()
                            .zip(again.iter().flatten())
                            .filter(|(&d, &c)| d && c > 0)
                            .count(),
                    )
                }
                None => None,
            };
            Ok(NetworkUtilization {
                network: i,
                k_per_layer: hidden.iter().map(|&n| k_for(p_k, n)).collect::<Result<_>>()?,
                frequencies: counts
                    .iter()
                    .map(|c| c.iter().map(|&v| v as f64 / probe.rows() as f64).collect())
                    .collect(),
                widths: hidden,
                p_k,
                dead,
                reactivated,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let total_neurons: usize = networks.iter().map(NetworkUtilization::neurons).sum();
    let dead_neurons: usize = networks.iter().map(|n| n.dead).sum();
    let with_dead = networks.iter().filter(|n| n.dead > 0).count();
    let reactivated_fraction = second_probe.map(|_| {
        let r: usize = networks.iter().filter_map(|n| n.reactivated).sum();
        if dead_neurons == 0 {
            0.0
        } else {
            r as f64 / dead_neurons as f64
        }
    });
    Ok(UtilizationReport {
        config: cfg.clone(),
        probe_size: probe.rows(),
        total_neurons,
        dead_neurons,
        dead_fraction: dead_neurons as f64 / total_neurons as f64,
        networks_with_dead_fraction: with_dead as f64 / networks.len() as f64,
        reactivated_fraction,
        networks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_gaussian_probe;

    fn probe(n: usize) -> Matrix {
        gen_gaussian_probe(&mut RngStream::new(5, 0), n, 10).unwrap()
    }

    #[test]
    fn full_survival_uses_everything() {
        let r = RoutingParams::init(&[10, 30, 20, 1], &mut RngStream::new(1, 0)).unwrap();
        let c = activation_counts(&r, &probe(50), 1.0).unwrap();
        assert!(c.iter().flatten().all(|&v| v == 50));
    }

    #[test]
    fn single_input_lights_exactly_k() {
        let r = RoutingParams::init(&[10, 30, 20, 1], &mut RngStream::new(1, 0)).unwrap();
        let c = activation_counts(&r, &probe(1), 0.3).unwrap();
        assert_eq!(c[0].iter().filter(|&&v| v == 1).count(), 9);
        assert_eq!(c[1].iter().filter(|&&v| v == 1).count(), 6);
        assert!(c.iter().flatten().all(|&v| v <= 1));
    }

    #[test]
    fn ensemble_aggregates_are_consistent() {
        let cfg = UtilizationConfig { networks: 6, min_width: 10, max_width: 40, ..Default::default() };
        let second = gen_gaussian_probe(&mut RngStream::new(6, 0), 100, 10).unwrap();
        let r = run_utilization_experiment(&cfg, &probe(200), Some(&second)).unwrap();
        assert_eq!(r.networks.len(), 6);
        for n in &r.networks {
            assert!(n.mean_utilization_error() < 1e-6);
            assert!(n.frequencies.iter().flatten().all(|f| (0.0..=1.0).contains(f)));
            let zeros = n.frequencies.iter().flatten().filter(|&&f| f == 0.0).count();
            assert_eq!(zeros, n.dead);
        }
        assert!(r.reactivated_fraction.is_some());
        assert!(run_utilization_experiment(&cfg, &Matrix::zeros(0, 10), None).is_err());
    }
}
