//! CIFAR binary-format loader.
//!
//! CIFAR-10 records are 3073 bytes: one label byte followed by 3072 pixel
//! bytes, plane-major (1024 red, 1024 green, 1024 blue), each plane a 32x32
//! row-major image. CIFAR-100 records are 3074 bytes: a coarse label byte,
//! a fine label byte (the one we use), then the same 3072 pixel bytes.

use std::path::Path;

use ndarray::Array4;

use crate::datasets::{LabeledDataset, Samples};
use crate::error::{Error, Result};

const PIXELS: usize = 3 * 32 * 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CifarVariant {
    Cifar10,
    Cifar100,
}

impl CifarVariant {
    pub fn record_len(self) -> usize {
        match self {
            CifarVariant::Cifar10 => 1 + PIXELS,
            CifarVariant::Cifar100 => 2 + PIXELS,
        }
    }

    pub fn num_classes(self) -> usize {
        match self {
            CifarVariant::Cifar10 => 10,
            CifarVariant::Cifar100 => 100,
        }
    }
}

/// Load one CIFAR binary batch file. Pixels are scaled to [0,1]; labels are
/// taken verbatim and record order is preserved.
pub fn load_cifar_binary(path: &Path, variant: CifarVariant) -> Result<LabeledDataset> {
    let bytes = std::fs::read(path)?;
    let rec = variant.record_len();
    if bytes.len() % rec != 0 {
        // Offset of the first truncated record.
        let offset = (bytes.len() / rec) * rec;
        return Err(Error::DataFormat {
            path: path.display().to_string(),
            offset: offset as u64,
            detail: format!(
                "file length {} is not a multiple of the {rec}-byte record length",
                bytes.len()
            ),
        });
    }
    let m = bytes.len() / rec;
    let q = variant.num_classes();
    let mut labels = Vec::with_capacity(m);
    let mut pixels = Array4::<f64>::zeros((m, 3, 32, 32));
    for (i, record) in bytes.chunks_exact(rec).enumerate() {
        let label = match variant {
            CifarVariant::Cifar10 => record[0],
            CifarVariant::Cifar100 => record[1], // fine label; coarse byte ignored
        } as usize;
        if label >= q {
            return Err(Error::Data(format!(
                "record {i} in {} has label {label} >= {q} classes",
                path.display()
            )));
        }
        labels.push(label);
        let body = &record[rec - PIXELS..];
        for c in 0..3 {
            for y in 0..32 {
                for x in 0..32 {
                    pixels[[i, c, y, x]] = body[c * 1024 + y * 32 + x] as f64 / 255.0;
                }
            }
        }
    }
    LabeledDataset::new(Samples::Image(pixels), labels, q)
}
