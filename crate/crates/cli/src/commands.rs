//! Subcommand bodies. Each returns the files it wrote plus a verdict.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use comet_core::analysis::{
    grad_check, run_capacity_sweep, run_similarity_experiment, run_utilization_experiment,
    verify_ntk_decomposition, SimilarityConfig, SweepConfig, UtilizationConfig, CHECKED_VARIANTS,
};
use comet_core::checkpoint;
use comet_core::data::sha256_hex;
use comet_core::training::Optimizer;
use comet_core::{
    Activation, BaselineConfig, CometError, MlpSpec, Model, Result, RngStream, TrainConfig, Variant,
};

use crate::config::{parse, DataSpec, ProbeSpec};

/// How a command ended; maps onto the process exit code.
#[derive(Debug, PartialEq, Eq)]
pub enum Verdict {
    Ok,
    Aborted,
    CheckFailed,
}

pub struct Outcome {
    pub verdict: Verdict,
    pub summary: String,
    pub dir: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainFile {
    #[serde(default)]
    pub variant: Variant,
    #[serde(default = "default_p_k")]
    pub p_k: f64,
    #[serde(default)]
    pub activation: Activation,
    /// Hidden widths; input and output widths come from the data.
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    #[serde(default = "default_true")]
    pub masked_bias: bool,
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
    #[serde(default)]
    pub cache_masks: bool,
    #[serde(default)]
    pub record_wall_time: bool,
    #[serde(default)]
    pub baseline: BaselineConfig,
    #[serde(default)]
    pub data: DataSpec,
}

fn default_p_k() -> f64 {
    0.5
}

fn default_hidden() -> Vec<usize> {
    vec![1000, 1000, 1000]
}

fn default_true() -> bool {
    true
}

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

impl TrainFile {
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            optimizer: self.optimizer,
            learning_rate: self.learning_rate,
            momentum: self.momentum,
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed: self.seed,
            eval_every: self.eval_every,
            cache_masks: self.cache_masks,
            record_wall_time: self.record_wall_time,
        }
    }

    pub fn spec(&self, input_dim: usize, output_dim: usize) -> MlpSpec {
        let mut widths = Vec::with_capacity(self.hidden.len() + 2);
        widths.push(input_dim);
        widths.extend(&self.hidden);
        widths.push(output_dim);
        let mut spec = MlpSpec::new(widths, self.activation, self.p_k, self.variant);
        spec.masked_bias = self.masked_bias;
        spec
    }
}

/// `<base>/<command>-<first 12 hex digits of the resolved config hash>` unless overridden.
pub fn output_dir(out: Option<&Path>, command: &str, resolved: &Value) -> PathBuf {
    if let Some(p) = out {
        return p.to_path_buf();
    }
    let base = std::env::var_os("COMET_OUT_DIR").map_or_else(|| PathBuf::from("runs"), PathBuf::from);
    let text = serde_json::to_string(resolved).expect("JSON values always serialize");
    base.join(format!("{command}-{}", &sha256_hex(text.as_bytes())[..12]))
}

fn prepare(dir: &Path, resolved: &Value) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut text = serde_json::to_string_pretty(resolved)?;
    text.push('\n');
    fs::write(dir.join("config.json"), text)?;
    Ok(())
}

fn write(dir: &Path, name: &str, contents: &str) -> Result<()> {
    fs::write(dir.join(name), contents)?;
    Ok(())
}

/// Re-serializes a parsed config so defaults are spelled out on disk.
fn resolved<T: Serialize>(cfg: &T) -> Result<Value> {
    Ok(serde_json::to_value(cfg)?)
}

pub fn run_train(tree: Value, out: Option<&Path>) -> Result<Outcome> {
    let file: TrainFile = parse(tree)?;
    let resolved = resolved(&file)?;
    let data = file.data.load()?;
    let spec = file.spec(data.input_dim(), data.output_dim());
    let cfg = file.train_config();
    cfg.validate()?;
    let mut model = Model::build(&spec, &file.baseline, file.seed, data.train.len())?;

    let dir = output_dir(out, "train", &resolved);
    prepare(&dir, &resolved)?;
    let record = comet_core::train(&mut model, &data, &cfg)?;
    write(&dir, "metrics.csv", &record.to_csv())?;
    write(&dir, "metrics.jsonl", &record.to_jsonl()?)?;

    if let Some(reason) = &record.aborted {
        return Ok(Outcome {
            verdict: Verdict::Aborted,
            summary: format!("train aborted after {} rows: {reason}", record.rows.len()),
            dir,
        });
    }
    checkpoint::save(&model, &dir.join("model.ckpt"))?;
    let summary = record.summary.as_ref().map_or_else(String::new, |s| {
        format!(
            "train done: {} epochs, eval loss {:.6}, eval {} {:.6}, {} trainable params",
            s.epochs_completed, s.eval_loss, s.metric_name, s.eval_metric, s.trainable_params
        )
    });
    Ok(Outcome { verdict: Verdict::Ok, summary, dir })
}

pub fn run_similarity(tree: Value, out: Option<&Path>, plot_data: bool) -> Result<Outcome> {
    let cfg: SimilarityConfig = parse(tree)?;
    let resolved = resolved(&cfg)?;
    let dir = output_dir(out, "similarity", &resolved);
    prepare(&dir, &resolved)?;
    let report = run_similarity_experiment(&cfg)?;
    write(&dir, "levels.csv", &levels_csv(&report.levels))?;
    if plot_data {
        write(&dir, "pairs.csv", &report.to_csv())?;
        write(&dir, "deciles.csv", &report.deciles_csv())?;
    }
    let parts: Vec<String> = report
        .levels
        .iter()
        .map(|l| format!("p_k={} spearman={:.3}", l.p_k, l.mask_spearman))
        .collect();
    Ok(Outcome {
        verdict: Verdict::Ok,
        summary: format!("similarity: {}", parts.join(", ")),
        dir,
    })
}

fn levels_csv(levels: &[comet_core::analysis::LevelSummary]) -> String {
    let mut s = String::from(
        "p_k,mask_spearman,activation_spearman,flagged_pairs,inversions,significant_inversions,monotone\n",
    );
    for l in levels {
        s.push_str(&format!(
            "{:?},{:?},{:?},{},{},{},{}\n",
            l.p_k,
            l.mask_spearman,
            l.activation_spearman,
            l.flagged_pairs,
            l.inversions,
            l.significant_inversions,
            l.monotone()
        ));
    }
    s
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UtilizationFile {
    pub ensemble: UtilizationConfig,
    pub probe: ProbeSpec,
    pub second_probe: Option<ProbeSpec>,
}

pub fn run_utilization(tree: Value, out: Option<&Path>, plot_data: bool) -> Result<Outcome> {
    let cfg: UtilizationFile = parse(tree)?;
    let resolved = resolved(&cfg)?;
    let (probe, _) = cfg.probe.load()?;
    let second = cfg.second_probe.as_ref().map(ProbeSpec::load).transpose()?;
    let dir = output_dir(out, "utilization", &resolved);
    prepare(&dir, &resolved)?;
    let report = run_utilization_experiment(&cfg.ensemble, &probe, second.as_ref().map(|(m, _)| m))?;
    write(&dir, "networks.csv", &report.to_csv())?;
    if plot_data {
        write(&dir, "frequencies.csv", &report.frequencies_csv())?;
    }
    let neurons: usize = report.networks.iter().map(|n| n.neurons()).sum();
    Ok(Outcome {
        verdict: Verdict::Ok,
        summary: format!(
            "utilization: {} networks, {} of {neurons} neurons never active",
            report.networks.len(),
            report.dead_neurons
        ),
        dir,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NtkFile {
    /// Random models per variant when `widths` is empty.
    pub models: usize,
    /// Fixed widths for every model; empty draws tiny random shapes.
    pub widths: Vec<usize>,
    pub variants: Vec<Variant>,
    pub activation: Activation,
    pub p_k: f64,
    pub seed: u64,
    pub tolerance: f64,
}

impl Default for NtkFile {
    fn default() -> Self {
        Self {
            models: 20,
            widths: Vec::new(),
            variants: vec![Variant::Standard, Variant::Comet],
            activation: Activation::Tanh,
            p_k: 0.5,
            seed: 0,
            tolerance: 1e-4,
        }
    }
}

fn gaussian(rng: &mut RngStream, n: usize) -> Vec<f32> {
    (0..n).map(|_| rng.standard_normal() as f32).collect()
}

pub fn run_ntk_check(tree: Value, out: Option<&Path>) -> Result<Outcome> {
    let cfg: NtkFile = parse(tree)?;
    let resolved = resolved(&cfg)?;
    let count = if cfg.widths.is_empty() { cfg.models } else { 1 };
    let mut rows = String::from(
        "variant,model,widths,jacobian_rel_error,kernel_rel_error,max_block_rel_error,passed\n",
    );
    let mut failures = 0;
    let mut reports = Vec::new();
    for &variant in &cfg.variants {
        for m in 0..count {
            let seed = cfg.seed.wrapping_add(m as u64);
            let mut rng = RngStream::new(seed, 7);
            let widths = if cfg.widths.is_empty() {
                let depth = 2 + rng.below(2);
                let mut w = vec![2 + rng.below(6)];
                for _ in 1..depth {
                    w.push(4 + rng.below(13));
                }
                w.push(1 + rng.below(4));
                w
            } else {
                cfg.widths.clone()
            };
            let spec = MlpSpec::new(widths.clone(), cfg.activation, cfg.p_k, variant);
            let model = Model::build(&spec, &BaselineConfig::default(), seed, 0)?;
            let x = gaussian(&mut rng, widths[0]);
            let y = gaussian(&mut rng, widths[0]);
            let r = verify_ntk_decomposition(&model, &x, &y, cfg.tolerance)?;
            let block = r.block_rel_errors.iter().copied().fold(0.0, f64::max);
            let shape: Vec<String> = widths.iter().map(usize::to_string).collect();
            rows.push_str(&format!(
                "{variant},{m},{},{:?},{:?},{:?},{}\n",
                shape.join("-"),
                r.jacobian_rel_error,
                r.kernel_rel_error,
                block,
                r.passed
            ));
            if !r.passed {
                failures += 1;
            }
            reports.push(r);
        }
    }
    let dir = output_dir(out, "ntk-check", &resolved);
    prepare(&dir, &resolved)?;
    write(&dir, "ntk.csv", &rows)?;
    let mut jsonl = String::new();
    for r in &reports {
        jsonl.push_str(&serde_json::to_string(r)?);
        jsonl.push('\n');
    }
    write(&dir, "ntk.jsonl", &jsonl)?;
    Ok(Outcome {
        verdict: if failures == 0 { Verdict::Ok } else { Verdict::CheckFailed },
        summary: format!("ntk-check: {} models, {failures} failed", reports.len()),
        dir,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradCheckFile {
    pub variants: Vec<Variant>,
    /// Seeds per variant.
    pub models: usize,
    pub seed: u64,
    pub tolerance: f64,
}

impl Default for GradCheckFile {
    fn default() -> Self {
        Self {
            variants: CHECKED_VARIANTS.to_vec(),
            models: 20,
            seed: 0,
            tolerance: comet_core::analysis::DEFAULT_TOLERANCE,
        }
    }
}

pub fn run_grad_check(tree: Value, out: Option<&Path>) -> Result<Outcome> {
    let cfg: GradCheckFile = parse(tree)?;
    let resolved = resolved(&cfg)?;
    let mut rows = String::from("variant,seed,params_checked,max_rel_error,failures,masked_nonzero,passed\n");
    let mut failed = 0;
    let mut total = 0;
    for &variant in &cfg.variants {
        for m in 0..cfg.models {
            let seed = cfg.seed.wrapping_add(m as u64);
            let r = grad_check(variant, seed, cfg.tolerance)?;
            rows.push_str(&format!(
                "{variant},{seed},{},{:?},{},{},{}\n",
                r.params_checked, r.max_rel_error, r.failures, r.masked_nonzero, r.passed
            ));
            total += 1;
            if !r.passed {
                failed += 1;
            }
        }
    }
    let dir = output_dir(out, "grad-check", &resolved);
    prepare(&dir, &resolved)?;
    write(&dir, "grad_check.csv", &rows)?;
    Ok(Outcome {
        verdict: if failed == 0 { Verdict::Ok } else { Verdict::CheckFailed },
        summary: format!("grad-check: {total} models, {failed} failed"),
        dir,
    })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepFile {
    pub sweep: SweepConfig,
    pub data: DataSpec,
}

pub fn run_sweep(tree: Value, out: Option<&Path>) -> Result<Outcome> {
    let cfg: SweepFile = parse(tree)?;
    let resolved = resolved(&cfg)?;
    let data = cfg.data.load()?;
    let dir = output_dir(out, "sweep", &resolved);
    prepare(&dir, &resolved)?;
    let report = run_capacity_sweep(&cfg.sweep, &data)?;
    write(&dir, "sweep.csv", &report.to_csv())?;
    write(&dir, "summary.csv", &report.summary_csv())?;
    let errors = report.records.iter().filter(|r| r.error.is_some()).count();
    let aborted = report
        .records
        .iter()
        .filter(|r| r.record.as_ref().is_some_and(|rec| rec.is_aborted()))
        .count();
    let verdict = if errors + aborted == 0 { Verdict::Ok } else { Verdict::Aborted };
    Ok(Outcome {
        verdict,
        summary: format!(
            "sweep: {} runs, {errors} failed to start, {aborted} aborted",
            report.records.len()
        ),
        dir,
    })
}

/// Exit code for an error that escaped a command.
pub fn error_code(err: &CometError) -> u8 {
    match err {
        CometError::Numeric(_) | CometError::Domain(_) => 3,
        _ => 2,
    }
}
