//! Cartesian capacity sweep over variants, widths, survival rates and seeds.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::{Activation, MlpSpec, Variant};
use crate::baselines::BaselineConfig;
use crate::data::DataSplits;
use crate::error::{CometError, Result};
use crate::model::Model;
use crate::training::{train, RunRecord, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub variants: Vec<Variant>,
    pub widths: Vec<usize>,
    pub p_k: Vec<f64>,
    pub seeds: Vec<u64>,
    pub hidden_layers: usize,
    pub activation: Activation,
    pub masked_bias: bool,
    /// Template; each run's seed replaces `train.seed`.
    pub train: TrainConfig,
    pub baseline: BaselineConfig,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            variants: vec![Variant::Standard, Variant::Comet],
            widths: vec![100, 1000],
            p_k: vec![0.5],
            seeds: vec![0, 1, 2],
            hidden_layers: 3,
            activation: Activation::default(),
            masked_bias: true,
            train: TrainConfig::default(),
            baseline: BaselineConfig::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SweepPoint {
    pub variant: Variant,
    pub width: usize,
    pub p_k: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRecord {
    pub point: SweepPoint,
    pub record: Option<RunRecord>,
    /// Set when the run could not start or failed outright.
    pub error: Option<String>,
}

impl SweepRecord {
    pub fn final_eval_metric(&self) -> Option<f64> {
        self.record.as_ref()?.summary.as_ref().map(|s| s.eval_metric)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepReport {
    pub config: SweepConfig,
    pub records: Vec<SweepRecord>,
}

impl SweepConfig {
    pub fn points(&self) -> Vec<SweepPoint> {
        let mut out = Vec::new();
        for &variant in &self.variants {
            for &width in &self.widths {
                for &p_k in &self.p_k {
                    for &seed in &self.seeds {
                        out.push(SweepPoint { variant, width, p_k, seed });
                    }
                }
            }
        }
        out
    }

    pub fn spec_for(&self, point: &SweepPoint, input_dim: usize, output_dim: usize) -> MlpSpec {
        let mut widths = vec![input_dim];
        widths.extend(std::iter::repeat(point.width).take(self.hidden_layers));
        widths.push(output_dim);
        let mut spec = MlpSpec::new(widths, self.activation, point.p_k, point.variant);
        spec.masked_bias = self.masked_bias;
        spec
    }
}

/// Builds and trains the model for one point; model and training share the point's seed.
pub fn run_point(cfg: &SweepConfig, point: &SweepPoint, data: &DataSplits) -> Result<RunRecord> {
    let spec = cfg.spec_for(point, data.input_dim(), data.output_dim());
    let mut model = Model::build(&spec, &cfg.baseline, point.seed, data.train.len())?;
    let train_cfg = TrainConfig { seed: point.seed, ..cfg.train.clone() };
    train(&mut model, data, &train_cfg)
}

/// Runs every grid point in parallel; failures are recorded and do not stop the sweep.
pub fn run_capacity_sweep(cfg: &SweepConfig, data: &DataSplits) -> Result<SweepReport> {
    let points = cfg.points();
    if points.is_empty() {
        return Err(CometError::Config("sweep grid is empty".into()));
    }
    let records = points
        .par_iter()
        .map(|point| match run_point(cfg, point, data) {
            Ok(record) => SweepRecord { point: *point, record: Some(record), error: None },
            Err(e) => SweepRecord { point: *point, record: None, error: Some(e.to_string()) },
        })
        .collect();
    Ok(SweepReport { config: cfg.clone(), records })
}

impl SweepReport {
    /// Long format: one row per (point, recorded epoch).
    pub fn to_csv(&self) -> String {
        let mut out = String::from("variant,width,p_k,seed,epoch,train_loss,eval_loss,metric,wall_ms\n");
        for r in &self.records {
            let p = &r.point;
            if let Some(rec) = &r.record {
                for row in &rec.rows {
                    let _ = writeln!(
                        out,
                        "{},{},{:?},{},{},{:?},{:?},{:?},{}",
                        p.variant, p.width, p.p_k, p.seed, row.epoch, row.train_loss, row.eval_loss, row.metric, row.wall_ms
                    );
                }
            }
        }
        out
    }

    pub fn summary_csv(&self) -> String {
        let mut out = String::from("variant,width,p_k,seed,epochs_completed,train_metric,eval_metric,status\n");
        for r in &self.records {
            let p = &r.point;
            let summary = r.record.as_ref().and_then(|rec| rec.summary.as_ref());
            let status = match (&r.error, r.record.as_ref().and_then(|rec| rec.aborted.as_ref())) {
                (Some(e), _) => format!("error: {e}"),
                (None, Some(a)) => format!("aborted: {a}"),
                _ => "ok".into(),
            };
            let _ = writeln!(
                out,
                "{},{},{:?},{},{},{},{},\"{}\"",
                p.variant,
                p.width,
                p.p_k,
                p.seed,
                summary.map_or(String::new(), |s| s.epochs_completed.to_string()),
                summary.map_or(String::new(), |s| format!("{:?}", s.train_metric)),
                summary.map_or(String::new(), |s| format!("{:?}", s.eval_metric)),
                status.replace('"', "'")
            );
        }
        out
    }

    /// Mean final evaluation metric over seeds that finished.
    pub fn mean_eval_metric(&self, variant: Variant, width: usize, p_k: f64) -> Option<f64> {
        self.mean_over_seeds(variant, width, p_k, |r| r.summary.as_ref().map(|s| s.eval_metric))
    }

    /// Mean evaluation metric recorded at `epoch` over seeds that reached it.
    pub fn mean_metric_at(&self, variant: Variant, width: usize, p_k: f64, epoch: usize) -> Option<f64> {
        self.mean_over_seeds(variant, width, p_k, |r| r.row(epoch).map(|row| row.metric))
    }

    fn mean_over_seeds(
        &self,
        variant: Variant,
        width: usize,
        p_k: f64,
        f: impl Fn(&RunRecord) -> Option<f64>,
    ) -> Option<f64> {
        let vals: Vec<f64> = self
            .records
            .iter()
            .filter(|r| r.point.variant == variant && r.point.width == width && r.point.p_k == p_k)
            .filter_map(|r| r.record.as_ref().and_then(&f))
            .collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_classification_blobs;
    use crate::numerics::RngStream;

    fn data() -> DataSplits {
        gen_classification_blobs(&mut RngStream::new(1, 0), 3, 20, 5, 0.5).unwrap()
    }

    fn cfg() -> SweepConfig {
        SweepConfig {
            variants: vec![Variant::Standard, Variant::Comet],
            widths: vec![8, 16],
            p_k: vec![0.5],
            seeds: vec![0, 1],
            hidden_layers: 2,
            train: TrainConfig { epochs: 2, batch_size: 8, learning_rate: 0.05, ..Default::default() },
            ..Default::default()
        }
    }

    #[test]
    fn grid_cardinality() {
        let r = run_capacity_sweep(&cfg(), &data()).unwrap();
        assert_eq!(r.records.len(), 8);
        assert!(r.records.iter().all(|x| x.error.is_none()));
        assert_eq!(r.summary_csv().lines().count(), 9);
        assert_eq!(r.to_csv().lines().count(), 1 + 8 * 3);
    }

    #[test]
    fn single_point_equals_direct_training() {
        let mut c = cfg();
        c.variants = vec![Variant::Comet];
        c.widths = vec![16];
        c.seeds = vec![4];
        let d = data();
        let sweep = run_capacity_sweep(&c, &d).unwrap();
        let point = c.points()[0];
        let spec = c.spec_for(&point, 5, 3);
        let mut model = Model::build(&spec, &c.baseline, 4, d.train.len()).unwrap();
        let direct = train(&mut model, &d, &TrainConfig { seed: 4, ..c.train.clone() }).unwrap();
        assert_eq!(sweep.records[0].record.as_ref().unwrap(), &direct);
    }

    #[test]
    fn failing_point_is_recorded() {
        let mut c = cfg();
        c.train.batch_size = 10_000;
        let r = run_capacity_sweep(&c, &data()).unwrap();
        assert!(r.records.iter().all(|x| x.error.is_some()));
        assert_eq!(r.records.len(), 8);
    }
}
