//! Mask and activation overlap as a function of input similarity.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::stats::{decrease_is_significant, mean, quantile_bins, spearman};
use crate::backbone::{forward_comet, Activation, MlpSpec, Variant};
use crate::baselines::BaselineConfig;
use crate::data::{gen_similarity_pairs, SimilarityPairConfig};
use crate::error::{CometError, Result};
use crate::model::{Body, Model};
use crate::numerics::{cosine_similarity, Matrix, RngStream};

const PAIR_STREAM: u64 = 21;
const NETWORK_STREAM: u64 = 22;
const BOOTSTRAP_STREAM: u64 = 23;
pub const DECILES: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimilarityConfig {
    pub pairs: SimilarityPairConfig,
    pub hidden_layers: usize,
    pub width: usize,
    /// Networks averaged over; shared by every pair.
    pub networks: usize,
    pub p_k_grid: Vec<f64>,
    pub activation: Activation,
    pub seed: u64,
    pub bootstrap_samples: usize,
}

impl Default for SimilarityConfig {
    fn default() -> Self {
        Self {
            pairs: SimilarityPairConfig::default(),
            hidden_layers: 10,
            width: 512,
            networks: 10,
            p_k_grid: vec![0.1, 0.3, 0.5, 0.7, 1.0],
            activation: Activation::default(),
            seed: 0,
            bootstrap_samples: 1000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SimilarityRow {
    pub pair: usize,
    pub p_k: f64,
    pub input_cosine: f64,
    pub mask_cosine: f64,
    /// Mean over networks where neither activation vector vanished; `None` if all did.
    pub activation_cosine: Option<f64>,
    pub degenerate_networks: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DecileRow {
    pub p_k: f64,
    pub decile: usize,
    pub pairs: usize,
    pub input_cosine: f64,
    pub mask_cosine: f64,
    pub activation_cosine: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LevelSummary {
    pub p_k: f64,
    pub mask_spearman: f64,
    pub activation_spearman: f64,
    /// Pairs excluded from activation statistics.
    pub flagged_pairs: usize,
    /// Adjacent deciles whose mean mask cosine drops.
    pub inversions: usize,
    pub significant_inversions: usize,
}

impl LevelSummary {
    /// Non-decreasing decile curve up to one statistically insignificant dip.
    pub fn monotone(&self) -> bool {
        self.inversions <= 1 && self.significant_inversions == 0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SimilarityReport {
    pub config: SimilarityConfig,
    pub rows: Vec<SimilarityRow>,
    pub deciles: Vec<DecileRow>,
    pub levels: Vec<LevelSummary>,
}

impl SimilarityReport {
    pub fn level(&self, p_k: f64) -> Option<&LevelSummary> {
        self.levels.iter().find(|l| l.p_k == p_k)
    }

    pub fn decile(&self, p_k: f64, decile: usize) -> Option<&DecileRow> {
        self.deciles.iter().find(|d| d.p_k == p_k && d.decile == decile)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("pair,p_k,input_cosine,mask_cosine,activation_cosine,degenerate_networks\n");
        for r in &self.rows {
            let act = r.activation_cosine.map_or(String::new(), |v| format!("{v:?}"));
            let _ = writeln!(
                out,
                "{},{:?},{:?},{:?},{},{}",
                r.pair, r.p_k, r.input_cosine, r.mask_cosine, act, r.degenerate_networks
            );
        }
        out
    }

    pub fn deciles_csv(&self) -> String {
        let mut out = String::from("p_k,decile,pairs,input_cosine,mask_cosine,activation_cosine\n");
        for d in &self.deciles {
            let _ = writeln!(
                out,
                "{:?},{},{},{:?},{:?},{:?}",
                d.p_k, d.decile, d.pairs, d.input_cosine, d.mask_cosine, d.activation_cosine
            );
        }
        out
    }
}

/// Per-pair sums over one network for every grid level.
struct NetworkPass {
    mask: Vec<Vec<f64>>,
    activation: Vec<Vec<Option<f64>>>,
}

fn concat_row(layers: &[Matrix], r: usize) -> Vec<f32> {
    layers.iter().flat_map(|m| m.row(r).iter().copied()).collect()
}

fn run_network(cfg: &SimilarityConfig, stacked: &Matrix, n: usize, net: usize) -> Result<NetworkPass> {
    let seed = RngStream::new(cfg.seed, NETWORK_STREAM).derive(net as u64).next_seed();
    let mut widths = vec![cfg.pairs.dim];
    widths.extend(std::iter::repeat(cfg.width).take(cfg.hidden_layers));
    widths.push(1);
    let mut mask = Vec::new();
    let mut activation = Vec::new();
    for &p_k in &cfg.p_k_grid {
        let spec = MlpSpec::new(widths.clone(), cfg.activation, p_k, Variant::Comet);
        let model = Model::build(&spec, &BaselineConfig::default(), seed, 0)?;
        let Body::Dense(params) = model.body() else { unreachable!("comet is dense") };
        let masks = model.routing_masks(stacked)?.expect("comet routes");
        let trace = forward_comet(params, cfg.activation, &masks, stacked, spec.masked_bias)?;
        let mut m_level = Vec::with_capacity(n);
        let mut a_level = Vec::with_capacity(n);
        for r in 0..n {
            m_level.push(cosine_similarity(&concat_row(&masks, r), &concat_row(&masks, n + r))?);
            let au = concat_row(&trace.activations, r);
            let av = concat_row(&trace.activations, n + r);
            a_level.push(cosine_similarity(&au, &av).ok());
        }
        mask.push(m_level);
        activation.push(a_level);
    }
    Ok(NetworkPass { mask, activation })
}

pub fn run_similarity_experiment(cfg: &SimilarityConfig) -> Result<SimilarityReport> {
    if cfg.networks == 0 || cfg.hidden_layers == 0 || cfg.width == 0 {
        return Err(CometError::Config("need at least one network with a hidden layer".into()));
    }
    if cfg.p_k_grid.is_empty() {
        return Err(CometError::Config("p_k grid is empty".into()));
    }
    let pairs = gen_similarity_pairs(&mut RngStream::new(cfg.seed, PAIR_STREAM), &cfg.pairs)?;
    let n = pairs.len();
    let mut rows_data: Vec<Vec<f32>> = pairs.iter().map(|p| p.u.clone()).collect();
    rows_data.extend(pairs.iter().map(|p| p.v.clone()));
    let stacked = Matrix::from_rows(&rows_data)?;

    let passes = (0..cfg.networks)
        .into_par_iter()
        .map(|net| run_network(cfg, &stacked, n, net))
        .collect::<Result<Vec<_>>>()?;

    let input_cos: Vec<f64> = pairs.iter().map(|p| p.cosine).collect();
    let bins = quantile_bins(&input_cos, DECILES);
    let mut rows = Vec::new();
    let mut deciles = Vec::new();
    let mut levels = Vec::new();
    for (g, &p_k) in cfg.p_k_grid.iter().enumerate() {
        let mut mask_cos = Vec::with_capacity(n);
        let mut act_cos = Vec::with_capacity(n);
        for (pair, &input_cosine) in input_cos.iter().enumerate() {
            let m = passes.iter().map(|p| p.mask[g][pair]).sum::<f64>() / passes.len() as f64;
            let acts: Vec<f64> = passes.iter().filter_map(|p| p.activation[g][pair]).collect();
            let a = (!acts.is_empty()).then(|| mean(&acts));
            rows.push(SimilarityRow {
                pair,
                p_k,
                input_cosine,
                mask_cosine: m,
                activation_cosine: a,
                degenerate_networks: passes.len() - acts.len(),
            });
            mask_cos.push(m);
            act_cos.push(a);
        }

        let mut decile_masks = Vec::new();
        for (d, bin) in bins.iter().enumerate() {
            let valid_acts: Vec<f64> = bin.iter().filter_map(|&i| act_cos[i]).collect();
            let masks: Vec<f64> = bin.iter().map(|&i| mask_cos[i]).collect();
            deciles.push(DecileRow {
                p_k,
                decile: d,
                pairs: bin.len(),
                input_cosine: mean(&bin.iter().map(|&i| input_cos[i]).collect::<Vec<_>>()),
                mask_cosine: mean(&masks),
                activation_cosine: mean(&valid_acts),
            });
            decile_masks.push(masks);
        }

        let mut boot = RngStream::new(cfg.seed, BOOTSTRAP_STREAM).derive(g as u64);
        let mut inversions = 0;
        let mut significant_inversions = 0;
        for w in decile_masks.windows(2) {
            if mean(&w[1]) < mean(&w[0]) {
                inversions += 1;
                if decrease_is_significant(&w[0], &w[1], cfg.bootstrap_samples, &mut boot) {
                    significant_inversions += 1;
                }
            }
        }
        let kept: Vec<usize> = (0..n).filter(|&i| act_cos[i].is_some()).collect();
        levels.push(LevelSummary {
            p_k,
            mask_spearman: spearman(&input_cos, &mask_cos),
            activation_spearman: spearman(
                &kept.iter().map(|&i| input_cos[i]).collect::<Vec<_>>(),
                &kept.iter().map(|&i| act_cos[i].unwrap()).collect::<Vec<_>>(),
            ),
            flagged_pairs: n - kept.len(),
            inversions,
            significant_inversions,
        });
    }
    Ok(SimilarityReport {
        config: cfg.clone(),
        rows,
        deciles,
        levels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SimilarityConfig {
        SimilarityConfig {
            pairs: SimilarityPairConfig { num_pairs: 40, dim: 12, ..Default::default() },
            hidden_layers: 3,
            width: 24,
            networks: 2,
            p_k_grid: vec![0.25, 1.0],
            bootstrap_samples: 50,
            ..Default::default()
        }
    }

    #[test]
    fn full_survival_gives_identical_masks() {
        let r = run_similarity_experiment(&small()).unwrap();
        assert_eq!(r.rows.len(), 80);
        for row in r.rows.iter().filter(|r| r.p_k == 1.0) {
            assert!((row.mask_cosine - 1.0).abs() < 1e-12);
        }
        assert_eq!(r.deciles.len(), 20);
        assert_eq!(r.to_csv().lines().count(), 81);
    }

    #[test]
    fn identical_inputs_share_masks() {
        let mut cfg = small();
        cfg.pairs.mu_min = 5;
        cfg.pairs.mu_max = 5;
        let pairs = gen_similarity_pairs(&mut RngStream::new(cfg.seed, PAIR_STREAM), &cfg.pairs).unwrap();
        let x = Matrix::from_rows(&[pairs[0].u.clone(), pairs[0].u.clone()]).unwrap();
        let pass = run_network(&cfg, &x, 1, 0).unwrap();
        for level in &pass.mask {
            assert!((level[0] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn deterministic() {
        let (a, b) = (run_similarity_experiment(&small()).unwrap(), run_similarity_experiment(&small()).unwrap());
        assert_eq!(a.to_csv(), b.to_csv());
        assert_eq!(a.deciles_csv(), b.deciles_csv());
        // constant mask cosines at full survival make the rank correlation NaN
        assert!(a.level(1.0).unwrap().mask_spearman.is_nan());
        assert_eq!(format!("{:?}", a.levels), format!("{:?}", b.levels));
    }
}
