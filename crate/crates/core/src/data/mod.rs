//! Datasets: synthetic generators plus CIFAR-10 binary and CSV regression ingestion.

mod cifar;
mod csv_regression;
mod synthetic;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use cifar::{load_cifar10, parse_cifar10_batch, CIFAR10_RECORD_BYTES};
pub use csv_regression::load_csv_regression;
pub use synthetic::{
    gen_classification_blobs, gen_gaussian_probe, gen_inverse_dynamics, gen_regression, gen_similarity_pairs,
    InputPair, SimilarityPairConfig,
};

use crate::error::{CometError, Result};
use crate::numerics::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Targets {
    Labels { labels: Vec<usize>, classes: usize },
    Values(Matrix),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Labels { labels, .. } => labels.len(),
            Targets::Values(m) => m.rows(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Width of the network output these targets need.
    pub fn output_dim(&self) -> usize {
        match self {
            Targets::Labels { classes, .. } => *classes,
            Targets::Values(m) => m.cols(),
        }
    }

    pub fn select(&self, ids: &[usize]) -> Targets {
        match self {
            Targets::Labels { labels, classes } => Targets::Labels {
                labels: ids.iter().map(|&i| labels[i]).collect(),
                classes: *classes,
            },
            Targets::Values(m) => Targets::Values(m.select_rows(ids)),
        }
    }

    pub fn is_classification(&self) -> bool {
        matches!(self, Targets::Labels { .. })
    }
}

/// Inputs (one row per example) with matching targets.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub inputs: Matrix,
    pub targets: Targets,
    pub split: Split,
    pub provenance: String,
}

impl Dataset {
    pub fn new(inputs: Matrix, targets: Targets, split: Split, provenance: impl Into<String>) -> Result<Self> {
        if inputs.rows() != targets.len() {
            return Err(CometError::shape(format!(
                "{} input rows for {} targets",
                inputs.rows(),
                targets.len()
            )));
        }
        inputs.check_finite("dataset inputs")?;
        match &targets {
            Targets::Labels { labels, classes } => {
                if let Some(bad) = labels.iter().find(|&&l| l >= *classes) {
                    return Err(CometError::domain(format!(
                        "label {bad} outside {classes} classes"
                    )));
                }
            }
            Targets::Values(m) => m.check_finite("dataset targets")?,
        }
        Ok(Self {
            inputs,
            targets,
            split,
            provenance: provenance.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.cols()
    }

    /// Rows `ids` as a new dataset with the same split tag.
    pub fn subset(&self, ids: &[usize]) -> Dataset {
        Dataset {
            inputs: self.inputs.select_rows(ids),
            targets: self.targets.select(ids),
            split: self.split,
            provenance: self.provenance.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataSplits {
    pub train: Dataset,
    pub eval: Dataset,
}

impl DataSplits {
    pub fn provenance(&self) -> &str {
        &self.train.provenance
    }

    pub fn input_dim(&self) -> usize {
        self.train.input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.train.targets.output_dim()
    }

    /// Keeps the first `n` training examples.
    pub fn truncate_train(mut self, n: usize) -> Self {
        if n < self.train.len() {
            let ids: Vec<usize> = (0..n).collect();
            self.train = self.train.subset(&ids);
            self.train.provenance = format!("{};train_limit={n}", self.train.provenance);
            self.eval.provenance = self.train.provenance.clone();
        }
        self
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Splits row-major examples into the first `n_train` and the rest.
pub(crate) fn split_rows(
    inputs: Matrix,
    targets: Targets,
    n_train: usize,
    provenance: &str,
) -> Result<DataSplits> {
    let n = inputs.rows();
    let train_ids: Vec<usize> = (0..n_train).collect();
    let eval_ids: Vec<usize> = (n_train..n).collect();
    let train = Dataset::new(
        inputs.select_rows(&train_ids),
        targets.select(&train_ids),
        Split::Train,
        provenance,
    )?;
    let eval = Dataset::new(
        inputs.select_rows(&eval_ids),
        targets.select(&eval_ids),
        Split::Eval,
        provenance,
    )?;
    Ok(DataSplits { train, eval })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dataset_validation() {
        let x = Matrix::zeros(2, 3);
        let ok = Dataset::new(
            x.clone(),
            Targets::Labels { labels: vec![0, 1], classes: 2 },
            Split::Train,
            "t",
        );
        assert!(ok.is_ok());
        let bad = Dataset::new(
            x.clone(),
            Targets::Labels { labels: vec![0, 2], classes: 2 },
            Split::Train,
            "t",
        );
        assert!(bad.is_err());
        let short = Dataset::new(x, Targets::Labels { labels: vec![0], classes: 2 }, Split::Train, "t");
        assert!(short.is_err());
    }
}
