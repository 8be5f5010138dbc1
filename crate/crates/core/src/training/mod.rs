//! SGD training loop, evaluation and run records.

mod optim;
mod record;

use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use optim::{sgd_step, Optimizer, Sgd};
pub use record::{EpochRow, RunConfig, RunRecord, RunSummary, CSV_HEADER};

use crate::backbone::Variant;
use crate::data::{DataSplits, Dataset, Split, Targets};
use crate::error::{CometError, Result};
use crate::model::{loss_for, Model, Phase};
use crate::numerics::{Matrix, RngStream};

const SHUFFLE_STREAM: u64 = 11;
const DROPOUT_STREAM: u64 = 12;
const EVAL_CHUNK: usize = 1024;

fn default_lr() -> f64 {
    1e-4
}

fn default_epochs() -> usize {
    30
}

fn default_batch() -> usize {
    128
}

fn default_eval_every() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default)]
    pub optimizer: Optimizer,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default)]
    pub momentum: f64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
    /// Precompute routing masks for the training set once.
    #[serde(default)]
    pub cache_masks: bool,
    /// Record real elapsed time; off by default so metric files are reproducible.
    #[serde(default)]
    pub record_wall_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: Optimizer::default(),
            learning_rate: default_lr(),
            momentum: 0.0,
            epochs: default_epochs(),
            batch_size: default_batch(),
            seed: 0,
            eval_every: default_eval_every(),
            cache_masks: false,
            record_wall_time: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(CometError::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(CometError::Config(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        if self.batch_size == 0 {
            return Err(CometError::Config("batch_size must be positive".into()));
        }
        if self.eval_every == 0 {
            return Err(CometError::Config("eval_every must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Metrics {
    pub loss: f64,
    /// Accuracy for classification, mean squared error for regression.
    pub metric: f64,
}

pub fn metric_name(targets: &Targets) -> &'static str {
    if targets.is_classification() {
        "accuracy"
    } else {
        "mse"
    }
}

fn check_dims(model: &Model, data: &Dataset) -> Result<()> {
    let spec = model.spec();
    if data.input_dim() != spec.input_dim() || data.targets.output_dim() != spec.output_dim() {
        return Err(CometError::shape(format!(
            "dataset is {} -> {}, model is {} -> {}",
            data.input_dim(),
            data.targets.output_dim(),
            spec.input_dim(),
            spec.output_dim()
        )));
    }
    Ok(())
}

/// Deterministic pass over `data`: dropout off, static masks looked up for training
/// rows and drawn by the evaluation policy otherwise.
pub fn evaluate(model: &Model, data: &Dataset) -> Result<Metrics> {
    if data.is_empty() {
        return Err(CometError::domain("cannot evaluate on an empty dataset"));
    }
    check_dims(model, data)?;
    let n = data.len();
    let mut loss = 0.0;
    let mut hits = 0usize;
    let mut sq = 0.0;
    let mut start = 0;
    while start < n {
        let ids: Vec<usize> = (start..(start + EVAL_CHUNK).min(n)).collect();
        let x = data.inputs.select_rows(&ids);
        let t = data.targets.select(&ids);
        let phase = match data.split {
            Split::Train => Phase::EvalKnown(&ids),
            Split::Eval => Phase::Eval,
        };
        let out = model.predict(&x, phase)?;
        let (l, _) = loss_for(&out, &t)?;
        loss += l * ids.len() as f64;
        match &t {
            Targets::Labels { labels, .. } => {
                for (row, &label) in out.iter_rows().zip(labels) {
                    if argmax(row) == label {
                        hits += 1;
                    }
                }
            }
            Targets::Values(v) => {
                for (a, b) in out.as_slice().iter().zip(v.as_slice()) {
                    let d = *a as f64 - *b as f64;
                    sq += d * d;
                }
            }
        }
        start += ids.len();
    }
    let metric = match &data.targets {
        Targets::Labels { .. } => hits as f64 / n as f64,
        Targets::Values(v) => sq / (n * v.cols()) as f64,
    };
    let loss = loss / n as f64;
    if !loss.is_finite() {
        return Err(CometError::numeric("evaluation loss is not finite"));
    }
    Ok(Metrics { loss, metric })
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Trains `model` in place with mini-batch SGD.
///
/// Numeric failures during training end the run and are recorded in
/// [`RunRecord::aborted`]; the rows recorded so far are kept.
pub fn train(model: &mut Model, data: &DataSplits, config: &TrainConfig) -> Result<RunRecord> {
    config.validate()?;
    check_dims(model, &data.train)?;
    check_dims(model, &data.eval)?;
    let n = data.train.len();
    if config.batch_size > n {
        return Err(CometError::Config(format!(
            "batch_size {} exceeds the {n} training examples",
            config.batch_size
        )));
    }
    let started = Instant::now();
    let wall = |cfg: &TrainConfig| {
        if cfg.record_wall_time {
            started.elapsed().as_millis() as u64
        } else {
            0
        }
    };
    let mut record = RunRecord::new(
        RunConfig {
            model: model.spec().clone(),
            baseline: model.baseline().clone(),
            train: config.clone(),
        },
        data.provenance(),
    );

    let initial_train = evaluate(model, &data.train)?;
    let initial_eval = evaluate(model, &data.eval)?;
    record.rows.push(EpochRow {
        epoch: 0,
        train_loss: initial_train.loss,
        eval_loss: initial_eval.loss,
        metric: initial_eval.metric,
        wall_ms: wall(config),
    });

    let cached = if config.cache_masks && model.variant() == Variant::Comet {
        model.routing_masks(&data.train.inputs)?
    } else {
        None
    };
    let mut opt = Sgd::new(config.optimizer, config.learning_rate, config.momentum);
    let shuffle_root = RngStream::new(config.seed, SHUFFLE_STREAM);
    let dropout_root = RngStream::new(config.seed, DROPOUT_STREAM);
    let mut last_eval = initial_eval;
    let mut completed = 0;

    'epochs: for epoch in 1..=config.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        shuffle_root.derive(epoch as u64).shuffle(&mut order);
        let mut dropout_rng = dropout_root.derive(epoch as u64);
        let mut loss_sum = 0.0;
        for ids in order.chunks(config.batch_size) {
            let x = data.train.inputs.select_rows(ids);
            let t = data.train.targets.select(ids);
            let masks = cached
                .as_ref()
                .map(|c| c.iter().map(|m| m.select_rows(ids)).collect::<Vec<Matrix>>());
            let step = model
                .loss_and_grads(&x, &t, ids, &mut dropout_rng, masks)
                .and_then(|(loss, grads)| {
                    if !loss.is_finite() {
                        return Err(CometError::numeric(format!("non-finite loss at epoch {epoch}")));
                    }
                    opt.step(model.param_groups_mut(), &grads)?;
                    Ok(loss)
                });
            match step {
                Ok(loss) => loss_sum += loss * ids.len() as f64,
                Err(e @ CometError::Numeric(_)) => {
                    record.aborted = Some(e.to_string());
                    break 'epochs;
                }
                Err(e) => return Err(e),
            }
        }
        completed = epoch;
        if epoch % config.eval_every == 0 || epoch == config.epochs {
            match evaluate(model, &data.eval) {
                Ok(m) => last_eval = m,
                Err(e @ CometError::Numeric(_)) => {
                    record.aborted = Some(e.to_string());
                    break;
                }
                Err(e) => return Err(e),
            }
            record.rows.push(EpochRow {
                epoch,
                train_loss: loss_sum / n as f64,
                eval_loss: last_eval.loss,
                metric: last_eval.metric,
                wall_ms: wall(config),
            });
        }
    }

    if record.aborted.is_none() {
        let final_train = evaluate(model, &data.train)?;
        record.summary = Some(RunSummary {
            epochs_completed: completed,
            metric_name: metric_name(&data.train.targets).into(),
            train_loss: final_train.loss,
            train_metric: final_train.metric,
            eval_loss: last_eval.loss,
            eval_metric: last_eval.metric,
            trainable_params: model.trainable_param_count(),
        });
    }
    Ok(record)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{Activation, MlpSpec};
    use crate::baselines::BaselineConfig;
    use crate::data::gen_classification_blobs;

    fn blobs() -> DataSplits {
        gen_classification_blobs(&mut RngStream::new(3, 0), 2, 50, 4, 0.3).unwrap()
    }

    fn model(variant: Variant, seed: u64, n: usize) -> Model {
        let spec = MlpSpec::new(vec![4, 16, 2], Activation::Relu, 0.5, variant);
        Model::build(&spec, &BaselineConfig::default(), seed, n).unwrap()
    }

    #[test]
    fn zero_epochs_only_evaluates() {
        let data = blobs();
        let mut m = model(Variant::Standard, 1, data.train.len());
        let before = m.clone();
        let cfg = TrainConfig { epochs: 0, batch_size: 8, ..Default::default() };
        let rec = train(&mut m, &data, &cfg).unwrap();
        assert_eq!(m, before);
        assert_eq!(rec.rows.len(), 1);
        assert_eq!(rec.rows[0].epoch, 0);
        assert_eq!(rec.summary.unwrap().epochs_completed, 0);
    }

    #[test]
    fn separable_blobs_reach_full_training_accuracy() {
        let data = blobs();
        let mut m = model(Variant::Standard, 2, data.train.len());
        let cfg = TrainConfig { epochs: 50, batch_size: 8, learning_rate: 0.1, ..Default::default() };
        let rec = train(&mut m, &data, &cfg).unwrap();
        assert_eq!(rec.summary.unwrap().train_metric, 1.0);
    }

    #[test]
    fn empty_eval_rejected() {
        let data = blobs();
        let m = model(Variant::Standard, 1, 0);
        let empty = data.eval.subset(&[]);
        assert!(evaluate(&m, &empty).is_err());
    }

    #[test]
    fn evaluation_is_repeatable() {
        let data = blobs();
        for v in [Variant::Dropout, Variant::BernoulliMask, Variant::Comet] {
            let m = model(v, 5, data.train.len());
            assert_eq!(evaluate(&m, &data.eval).unwrap(), evaluate(&m, &data.eval).unwrap());
            assert_eq!(evaluate(&m, &data.train).unwrap(), evaluate(&m, &data.train).unwrap());
        }
    }

    #[test]
    fn cached_masks_match_uncached_bitwise() {
        let data = blobs();
        let cfg = TrainConfig { epochs: 3, batch_size: 16, learning_rate: 0.05, ..Default::default() };
        let mut a = model(Variant::Comet, 9, data.train.len());
        let mut b = a.clone();
        let ra = train(&mut a, &data, &cfg).unwrap();
        let rb = train(&mut b, &data, &TrainConfig { cache_masks: true, ..cfg.clone() }).unwrap();
        assert_eq!(a, b);
        assert_eq!(ra.to_csv(), rb.to_csv());
    }

    #[test]
    fn divergence_is_recorded() {
        let data = blobs();
        let mut m = model(Variant::Standard, 1, data.train.len());
        let cfg = TrainConfig { epochs: 20, batch_size: 8, learning_rate: 1e30, ..Default::default() };
        let rec = train(&mut m, &data, &cfg).unwrap();
        assert!(rec.is_aborted());
        assert!(rec.summary.is_none());
    }

    #[test]
    fn csv_shape() {
        let data = blobs();
        let mut m = model(Variant::Topk, 1, data.train.len());
        let cfg = TrainConfig { epochs: 4, eval_every: 2, batch_size: 10, ..Default::default() };
        let rec = train(&mut m, &data, &cfg).unwrap();
        let csv = rec.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], CSV_HEADER);
        assert_eq!(lines.len(), 4);
        assert!(lines[3].starts_with("4,"));
        let jsonl = rec.to_jsonl().unwrap();
        assert!(jsonl.lines().next().unwrap().contains("\"config\""));
    }

    #[test]
    fn oversized_batch_rejected() {
        let data = blobs();
        let mut m = model(Variant::Standard, 1, 0);
        let cfg = TrainConfig { batch_size: 10_000, ..Default::default() };
        assert!(matches!(train(&mut m, &data, &cfg), Err(CometError::Config(_))));
    }
}
