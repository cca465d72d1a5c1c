//! Synthetic Gaussian-blob datasets: a desk-scale stand-in for CIFAR.

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::datasets::{LabeledDataset, Samples};
use crate::error::{Error, Result};
use crate::rng::substream;

/// Q isotropic Gaussian blobs with standard deviation `spread`, centered at
/// independent random points on the unit sphere. Labels come out class-major:
/// [0 x per_class, 1 x per_class, ...]. Deterministic in `seed`.
pub fn generate_synthetic(
    num_classes: usize,
    per_class: usize,
    dim: usize,
    spread: f64,
    seed: u64,
) -> Result<LabeledDataset> {
    if num_classes < 2 {
        return Err(Error::Config(format!(
            "synthetic data needs >= 2 classes, got {num_classes}"
        )));
    }
    if per_class < 2 {
        return Err(Error::Config(format!(
            "synthetic data needs >= 2 samples per class, got {per_class}"
        )));
    }
    if !(spread > 0.0) || !spread.is_finite() {
        return Err(Error::Config(format!("spread must be positive, got {spread}")));
    }
    if dim == 0 {
        return Err(Error::Config("dim must be >= 1".into()));
    }

    let mut rng = substream(seed, "synthetic", &[]);
    let mut centers = Array2::<f64>::zeros((num_classes, dim));
    for mut row in centers.rows_mut() {
        loop {
            for v in row.iter_mut() {
                *v = rng.sample(StandardNormal);
            }
            let norm = row.dot(&row).sqrt();
            if norm > 1e-12 {
                row.mapv_inplace(|v| v / norm);
                break;
            }
        }
    }

    let m = num_classes * per_class;
    let mut samples = Array2::<f64>::zeros((m, dim));
    let mut labels = Vec::with_capacity(m);
    for class in 0..num_classes {
        for i in 0..per_class {
            let r = class * per_class + i;
            for (d, v) in samples.row_mut(r).iter_mut().enumerate() {
                let noise: f64 = rng.sample(StandardNormal);
                *v = centers[[class, d]] + spread * noise;
            }
            labels.push(class);
        }
    }
    LabeledDataset::new(Samples::Vector(samples), labels, num_classes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vectors(ds: &LabeledDataset) -> &Array2<f64> {
        match &ds.samples {
            Samples::Vector(a) => a,
            _ => panic!("expected vector samples"),
        }
    }

    #[test]
    fn balanced_class_major_labels() {
        let ds = generate_synthetic(2, 3, 4, 0.1, 0).unwrap();
        assert_eq!(ds.len(), 6);
        assert_eq!(ds.labels, vec![0, 0, 0, 1, 1, 1]);
        assert_eq!(vectors(&ds).ncols(), 4);
    }

    #[test]
    fn deterministic_in_seed() {
        let a = generate_synthetic(3, 5, 8, 0.3, 42).unwrap();
        let b = generate_synthetic(3, 5, 8, 0.3, 42).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic(3, 5, 8, 0.3, 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn vanishing_spread_collapses_within_class_variance() {
        let ds = generate_synthetic(3, 10, 6, 1e-8, 7).unwrap();
        let xs = vectors(&ds);
        for class in 0..3 {
            let rows: Vec<usize> = (0..ds.len()).filter(|&i| ds.labels[i] == class).collect();
            let mean = rows
                .iter()
                .fold(ndarray::Array1::<f64>::zeros(6), |acc, &i| acc + xs.row(i))
                / rows.len() as f64;
            let var: f64 = rows
                .iter()
                .map(|&i| {
                    let d = &xs.row(i) - &mean;
                    d.dot(&d)
                })
                .sum::<f64>()
                / rows.len() as f64;
            assert!(var < 1e-12, "class {class} variance {var}");
            // centers live on the unit sphere, so tiny-spread samples do too
            let norm = mean.dot(&mean).sqrt();
            assert!((norm - 1.0).abs() < 1e-6, "center norm {norm}");
        }
    }

    #[test]
    fn rejects_bad_arguments() {
        assert!(generate_synthetic(1, 3, 4, 0.1, 0).is_err());
        assert!(generate_synthetic(2, 1, 4, 0.1, 0).is_err());
        assert!(generate_synthetic(2, 3, 4, 0.0, 0).is_err());
        assert!(generate_synthetic(2, 3, 0, 0.1, 0).is_err());
    }
}
