//! Randomized invariants over the library's numerical surface. Each
//! property pins down behaviour the unit suites only spot-check: symmetry
//! and scale freedoms of the losses, exactness of the covariance split,
//! bounds on the spectral metrics, and the structural guarantees of client
//! partitions.

mod common;

use std::collections::HashSet;
use std::sync::Arc;

use fedrcl_core::datasets::{
    generate_synthetic, partition, partition_stats, PartitionConfig, PartitionScheme,
};
use fedrcl_core::diagnostics::{
    class_statistics, covariance_decomposition, deviation_report, effective_rank, vci,
};
use fedrcl_core::engine::aggregate;
use fedrcl_core::losses::{
    cross_entropy, multi_level_contrastive, rcl_from_similarities, rcl_loss,
    scl_from_similarities, scl_loss, LossConfig, LossMode,
};
use fedrcl_core::model::{FeatureStack, ModelParams, ParamLayout};
use fedrcl_core::rng;
use ndarray::Array2;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;

use common::{random_labels, random_similarities};

fn random_embeddings(seed: u64, b: usize, d: usize) -> (Array2<f64>, Vec<usize>) {
    let mut rng = rng::substream(seed, "property-embeddings", &[]);
    let emb = Array2::from_shape_fn((b, d), |_| rng.gen_range(-3.0..3.0));
    let labels = random_labels(&mut rng, b, 3);
    (emb, labels)
}

proptest! {
    #[test]
    fn contrastive_values_are_permutation_invariant(
        seed in any::<u64>(),
        b in 3..8usize,
        d in 2..6usize,
    ) {
        let (emb, labels) = random_embeddings(seed, b, d);
        let mut perm: Vec<usize> = (0..b).collect();
        perm.shuffle(&mut rng::substream(seed, "property-perm", &[]));
        let mut emb_p = Array2::zeros((b, d));
        let mut labels_p = vec![0usize; b];
        for (to, &from) in perm.iter().enumerate() {
            labels_p[to] = labels[from];
            for k in 0..d {
                emb_p[[to, k]] = emb[[from, k]];
            }
        }
        let scl_gap = (scl_loss(&emb, &labels, 0.05).value
            - scl_loss(&emb_p, &labels_p, 0.05).value)
            .abs();
        let rcl_gap = (rcl_loss(&emb, &labels, 0.05, 0.7, 1.0).value
            - rcl_loss(&emb_p, &labels_p, 0.05, 0.7, 1.0).value)
            .abs();
        prop_assert!(scl_gap <= 1e-9, "scl moved by {scl_gap} under a permutation");
        prop_assert!(rcl_gap <= 1e-9, "rcl moved by {rcl_gap} under a permutation");
    }

    #[test]
    fn contrastive_values_are_scale_invariant(
        seed in any::<u64>(),
        b in 3..8usize,
        d in 2..6usize,
        scale in 0.1f64..10.0,
    ) {
        let (emb, labels) = random_embeddings(seed, b, d);
        let scaled = emb.mapv(|v| v * scale);
        let scl_gap =
            (scl_loss(&emb, &labels, 0.05).value - scl_loss(&scaled, &labels, 0.05).value).abs();
        let rcl_gap = (rcl_loss(&emb, &labels, 0.05, 0.7, 1.0).value
            - rcl_loss(&scaled, &labels, 0.05, 0.7, 1.0).value)
            .abs();
        prop_assert!(scl_gap <= 1e-9, "scl moved by {scl_gap} under scaling");
        prop_assert!(rcl_gap <= 1e-9, "rcl moved by {rcl_gap} under scaling");
    }

    #[test]
    fn relaxed_loss_is_affine_in_the_penalty_weight(
        seed in any::<u64>(),
        b in 3..9usize,
        beta1 in 0.0f64..3.0,
        beta2 in 0.0f64..3.0,
    ) {
        let mut rng = rng::substream(seed, "property-affine", &[]);
        let sims = random_similarities(&mut rng, b);
        let labels = random_labels(&mut rng, b, 3);
        let at = |beta: f64| rcl_from_similarities(&sims, &labels, 0.05, 0.7, beta);
        // beta = 0 takes the identical code path as the plain loss
        prop_assert_eq!(at(0.0), scl_from_similarities(&sims, &labels, 0.05));
        let midpoint_gap = (at(beta1) + at(beta2) - 2.0 * at(0.5 * (beta1 + beta2))).abs();
        prop_assert!(midpoint_gap <= 1e-9, "deviation from affinity: {midpoint_gap}");
    }

    #[test]
    fn single_sample_batches_contribute_zero(
        d in 1..6usize,
        value in -5.0f64..5.0,
    ) {
        let emb = Array2::from_elem((1, d), value);
        prop_assert_eq!(scl_loss(&emb, &[0], 0.05).value, 0.0);
        prop_assert_eq!(rcl_loss(&emb, &[0], 0.05, 0.7, 1.0).value, 0.0);
    }

    #[test]
    fn multi_level_loss_is_the_mean_over_levels(
        seed in any::<u64>(),
        b in 3..7usize,
    ) {
        let (e1, labels) = random_embeddings(seed, b, 4);
        let (e2, _) = random_embeddings(seed ^ 0xabcd, b, 6);
        let logits = Array2::zeros((b, 3));
        let probs = Array2::from_elem((b, 3), 1.0 / 3.0);
        let stack = FeatureStack { levels: vec![e1.clone(), e2.clone()], logits, probs };
        let cfg = LossConfig {
            mode: LossMode::CeScl,
            levels: vec![1, 2],
            ..LossConfig::default()
        };
        let combined = multi_level_contrastive(&stack, &labels, &cfg).unwrap().value;
        let separate = 0.5
            * (scl_loss(&e1, &labels, cfg.tau).value + scl_loss(&e2, &labels, cfg.tau).value);
        prop_assert!((combined - separate).abs() <= 1e-9);
    }

    #[test]
    fn cross_entropy_is_nonnegative_and_rewards_the_true_logit(
        seed in any::<u64>(),
        m in 2..6usize,
        q in 2..5usize,
    ) {
        let mut rng = rng::substream(seed, "property-ce", &[]);
        let logits = Array2::from_shape_fn((m, q), |_| rng.gen_range(-3.0..3.0));
        let labels: Vec<usize> = (0..m).map(|_| rng.gen_range(0..q)).collect();
        let base = cross_entropy(&logits, &labels);
        prop_assert!(base >= 0.0);
        let mut better = logits.clone();
        for (i, &y) in labels.iter().enumerate() {
            better[[i, y]] += 1.0;
        }
        prop_assert!(cross_entropy(&better, &labels) < base);
    }

    #[test]
    fn covariance_split_is_exact(
        seed in any::<u64>(),
        m in 4..20usize,
        d in 2..6usize,
        q in 2..4usize,
    ) {
        let mut rng = rng::substream(seed, "property-cov", &[]);
        let features = Array2::from_shape_fn((m, d), |_| rng.gen_range(-2.0..2.0));
        let labels: Vec<usize> = (0..m).map(|i| i % q).collect();
        let dec = covariance_decomposition(&features, &labels).unwrap();
        for i in 0..d {
            for j in 0..d {
                let gap = dec.total[[i, j]] - dec.within[[i, j]] - dec.between[[i, j]];
                prop_assert!(gap.abs() <= 1e-10, "split off by {gap} at ({i}, {j})");
            }
        }
        prop_assert!(dec.trace_within >= -1e-12);
        prop_assert!(dec.trace_between >= -1e-12);
        let trace_gap = dec.trace_total - dec.trace_within - dec.trace_between;
        prop_assert!(trace_gap.abs() <= 1e-10);
    }

    #[test]
    fn effective_rank_is_bounded_and_scale_free(
        seed in any::<u64>(),
        m in 2..6usize,
        n in 2..6usize,
        scale in 0.1f64..10.0,
    ) {
        let mut rng = rng::substream(seed, "property-erank", &[]);
        let a = Array2::from_shape_fn((m, n), |_| rng.gen_range(0.1..2.0));
        let er = effective_rank(&a).unwrap();
        prop_assert!(er >= 1.0 - 1e-9, "effective rank {er} below 1");
        prop_assert!(er <= m.min(n) as f64 + 1e-9, "effective rank {er} above min(m, n)");
        let er_scaled = effective_rank(&a.mapv(|v| v * scale)).unwrap();
        prop_assert!((er - er_scaled).abs() <= 1e-9);
    }

    #[test]
    fn vci_lies_in_the_unit_interval(
        seed in any::<u64>(),
        m in 6..20usize,
        d in 3..6usize,
        q in 2..4usize,
    ) {
        let mut rng = rng::substream(seed, "property-vci", &[]);
        let labels: Vec<usize> = (0..m).map(|i| i % q).collect();
        let mut features = Array2::from_shape_fn((m, d), |_| rng.gen_range(-1.0..1.0));
        for (i, &y) in labels.iter().enumerate() {
            features[[i, y % d]] += 3.0; // keep the class means distinct
        }
        let v = vci(&features, &labels).unwrap();
        prop_assert!((0.0..=1.0).contains(&v), "vci {v} outside [0, 1]");
    }

    #[test]
    fn deviation_bounds_are_nonnegative_for_rectified_features(
        seed in any::<u64>(),
        m in 6..16usize,
        d in 2..6usize,
        q in 2..4usize,
    ) {
        let mut rng = rng::substream(seed, "property-deviation", &[]);
        let features = Array2::from_shape_fn((m, d), |_| rng.gen_range(0.01..1.0));
        let labels: Vec<usize> = (0..m).map(|i| i % q).collect();
        let mut predictions = Array2::from_shape_fn((m, q), |_| rng.gen_range(0.05..1.0));
        for mut row in predictions.rows_mut() {
            let s = row.sum();
            row.mapv_inplace(|p| p / s);
        }
        let stats = class_statistics(&features, &predictions, &labels).unwrap();
        let report = deviation_report(&features, &labels, &stats).unwrap();
        for (i, &dev) in report.deviation.iter().enumerate() {
            prop_assert!(
                dev >= 0.0 || dev.is_infinite(),
                "sample {i} has negative deviation bound {dev}"
            );
        }
        prop_assert!((0.0..=1.0).contains(&report.fraction_below_one));
    }

    #[test]
    fn aggregate_stays_within_coordinatewise_bounds(
        seed in any::<u64>(),
        k in 1..6usize,
        len in 1..8usize,
    ) {
        let mut rng = rng::substream(seed, "property-aggregate", &[]);
        let layout = Arc::new(ParamLayout::new(vec![("w".into(), vec![len])]));
        let parts: Vec<ModelParams> = (0..k)
            .map(|_| {
                let values = (0..len).map(|_| rng.gen_range(-5.0..5.0)).collect();
                ModelParams::from_values(Arc::clone(&layout), values).unwrap()
            })
            .collect();
        let mean = aggregate(&parts).unwrap();
        for i in 0..len {
            let lo = parts.iter().map(|p| p.values()[i]).fold(f64::INFINITY, f64::min);
            let hi = parts.iter().map(|p| p.values()[i]).fold(f64::NEG_INFINITY, f64::max);
            let v = mean.values()[i];
            prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12, "mean {v} outside [{lo}, {hi}]");
        }
    }

    #[test]
    fn substreams_are_deterministic_and_separated(
        master in any::<u64>(),
        index in any::<u64>(),
    ) {
        let draw = |tag: &str, ix: &[u64]| {
            let mut s = rng::substream(master, tag, ix);
            (0..4).map(|_| s.gen::<u64>()).collect::<Vec<_>>()
        };
        prop_assert_eq!(draw("sampling", &[index]), draw("sampling", &[index]));
        prop_assert_ne!(draw("sampling", &[index]), draw("sampling", &[index ^ 1]));
        prop_assert_ne!(draw("sampling", &[index]), draw("client", &[index]));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn partitions_are_disjoint_balanced_and_deterministic(
        scheme in prop_oneof![
            Just(PartitionScheme::Iid),
            (1..=3usize).prop_map(|gamma| PartitionScheme::Quantity { gamma }),
            (0.05f64..5.0).prop_map(|alpha| PartitionScheme::Dirichlet { alpha }),
        ],
        num_clients in 1..=10usize,
        seed in any::<u64>(),
    ) {
        let data = generate_synthetic(4, 30, 4, 0.3, 7).unwrap();
        let config = PartitionConfig { scheme, num_clients, seed };
        let plan = partition(&data, &config).unwrap();
        let again = partition(&data, &config).unwrap();
        prop_assert_eq!(&plan.assignments, &again.assignments);

        let stats = partition_stats(&plan);
        prop_assert!(stats.disjoint);
        let max = *stats.client_sizes.iter().max().unwrap();
        let min = *stats.client_sizes.iter().min().unwrap();
        prop_assert!(max - min <= 1, "client sizes spread {min}..{max}");

        let mut seen = HashSet::new();
        for (client, ix) in plan.assignments.iter().enumerate() {
            prop_assert_eq!(
                ix.len(),
                plan.label_histograms[client].iter().sum::<usize>(),
                "histogram row does not add up for client {}", client
            );
            for &i in ix {
                prop_assert!(i < data.len(), "index {i} out of range");
                prop_assert!(seen.insert(i), "index {i} assigned twice");
            }
        }
        prop_assert!(seen.len() <= data.len());
    }
}
