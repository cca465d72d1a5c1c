//! Dataset ingestion and client partitioning.

mod cifar;
mod partition;
mod synthetic;

pub use cifar::{load_cifar_binary, CifarVariant};
pub use partition::{
    partition, partition_stats, PartitionConfig, PartitionPlan, PartitionScheme, PartitionStats,
};
pub use synthetic::generate_synthetic;

use ndarray::{Array2, Array4, Axis};

use crate::error::{Error, Result};

/// Raw sample storage: flat feature vectors or CHW images.
#[derive(Clone, Debug, PartialEq)]
pub enum Samples {
    /// Shape (M, F).
    Vector(Array2<f64>),
    /// Shape (M, C, H, W).
    Image(Array4<f64>),
}

impl Samples {
    pub fn len(&self) -> usize {
        match self {
            Samples::Vector(a) => a.nrows(),
            Samples::Image(a) => a.shape()[0],
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Per-sample shape, used to validate against a model's input spec.
    pub fn input_shape(&self) -> InputShape {
        match self {
            Samples::Vector(a) => InputShape::Vector { dim: a.ncols() },
            Samples::Image(a) => {
                let s = a.shape();
                InputShape::Image {
                    channels: s[1],
                    height: s[2],
                    width: s[3],
                }
            }
        }
    }

    /// Copy the rows at `indices` (in the given order) into a new batch.
    pub fn select(&self, indices: &[usize]) -> Samples {
        match self {
            Samples::Vector(a) => Samples::Vector(a.select(Axis(0), indices)),
            Samples::Image(a) => Samples::Image(a.select(Axis(0), indices)),
        }
    }

    pub fn iter_finite(&self) -> bool {
        match self {
            Samples::Vector(a) => a.iter().all(|v| v.is_finite()),
            Samples::Image(a) => a.iter().all(|v| v.is_finite()),
        }
    }
}

/// Shape of a single sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum InputShape {
    Vector { dim: usize },
    Image { channels: usize, height: usize, width: usize },
}

/// A labeled dataset: M samples, integer labels in {0..Q-1}.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    pub samples: Samples,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl LabeledDataset {
    /// Validates the type invariants (non-empty, labels in range, finite values).
    pub fn new(samples: Samples, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if samples.len() == 0 {
            return Err(Error::Data("dataset is empty (M = 0)".into()));
        }
        if samples.len() != labels.len() {
            return Err(Error::Data(format!(
                "{} samples but {} labels",
                samples.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Data(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        if !samples.iter_finite() {
            return Err(Error::Data("non-finite sample value".into()));
        }
        Ok(Self { samples, labels, num_classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Materialize the sub-dataset at `indices` (a client's partition slice).
    pub fn subset(&self, indices: &[usize]) -> Result<LabeledDataset> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.len()) {
            return Err(Error::Data(format!(
                "subset index {bad} out of bounds for dataset of {}",
                self.len()
            )));
        }
        LabeledDataset::new(
            self.samples.select(indices),
            indices.iter().map(|&i| self.labels[i]).collect(),
            self.num_classes,
        )
    }

    /// Concatenate several datasets with identical sample shape and class count
    /// (e.g. the five CIFAR-10 training batches).
    pub fn concat(parts: &[LabeledDataset]) -> Result<LabeledDataset> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Data("concat of zero datasets".into()))?;
        let q = first.num_classes;
        if parts.iter().any(|p| p.num_classes != q) {
            return Err(Error::Data("concat with mismatched class counts".into()));
        }
        let labels: Vec<usize> = parts.iter().flat_map(|p| p.labels.iter().copied()).collect();
        let samples = match &first.samples {
            Samples::Vector(_) => {
                let views: Vec<_> = parts
                    .iter()
                    .map(|p| match &p.samples {
                        Samples::Vector(a) => Ok(a.view()),
                        _ => Err(Error::Shape("concat mixes vector and image data".into())),
                    })
                    .collect::<Result<_>>()?;
                Samples::Vector(
                    ndarray::concatenate(Axis(0), &views)
                        .map_err(|e| Error::Shape(e.to_string()))?,
                )
            }
            Samples::Image(_) => {
                let views: Vec<_> = parts
                    .iter()
                    .map(|p| match &p.samples {
                        Samples::Image(a) => Ok(a.view()),
                        _ => Err(Error::Shape("concat mixes vector and image data".into())),
                    })
                    .collect::<Result<_>>()?;
                Samples::Image(
                    ndarray::concatenate(Axis(0), &views)
                        .map_err(|e| Error::Shape(e.to_string()))?,
                )
            }
        };
        LabeledDataset::new(samples, labels, q)
    }

    /// Keep only the first `k` samples (record order), e.g. a quick CIFAR subset.
    pub fn truncate(&self, k: usize) -> Result<LabeledDataset> {
        let k = k.min(self.len());
        let indices: Vec<usize> = (0..k).collect();
        self.subset(&indices)
    }
}
