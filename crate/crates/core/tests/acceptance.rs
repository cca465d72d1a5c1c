//! The ten acceptance gates for the toolkit, one test per gate.
//!
//! Every test prints a single `[PASS]`/`[FAIL]` line before asserting, so
//! the whole ledger is visible in order with
//!
//! ```text
//! cargo test --test acceptance -- --nocapture --test-threads=1
//! ```
//!
//! Gates 8 and 9 share one benchmark: 8-class synthetic blobs, 10 clients
//! under a Dirichlet(0.1) label split, half participation, a two-stage
//! backbone, 60 rounds, 3 seeds. The benchmark runs once and is cached.

mod common;

use std::path::Path;
use std::sync::{Arc, OnceLock};
use std::time::Instant;

use fedrcl_core::datasets::{
    generate_synthetic, partition, partition_stats, PartitionConfig, PartitionScheme,
};
use fedrcl_core::diagnostics::{
    classifier_update_check, covariance_decomposition, effective_rank, inequality_chain_check,
    vci,
};
use fedrcl_core::engine::{
    run_training, server_step, RunOptions, ServerOptKind, ServerOptState, TrainConfig,
};
use fedrcl_core::experiment::{run_experiment, ExperimentConfig, SchemeKind};
use fedrcl_core::losses::{rcl_from_similarities, scl_from_similarities, LossConfig, LossMode};
use fedrcl_core::model::gradcheck::{check_instance, DEFAULT_EPS, DEFAULT_TOL};
use fedrcl_core::model::{ArchConfig, ModelParams, ParamLayout, Reduction};
use fedrcl_core::rng;
use ndarray::{arr1, Array2};
use rand::Rng;

use common::{grad_instance, random_labels, random_similarities, scl_quotient_form};

fn verdict(num: u32, title: &str, ok: bool, detail: &str) {
    let tag = if ok { "PASS" } else { "FAIL" };
    println!("[{tag}] criterion {num} — {title}: {detail}");
    assert!(ok, "criterion {num} ({title}): {detail}");
}

#[test]
fn criterion_01_gradient_soundness() {
    let start = Instant::now();
    let variants: [(LossMode, &[usize]); 6] = [
        (LossMode::Ce, &[]),
        (LossMode::CeProx, &[]),
        (LossMode::CeScl, &[2]),
        (LossMode::CeRcl, &[2]),
        (LossMode::CeScl, &[1, 2]),
        (LossMode::CeRcl, &[1, 2]),
    ];
    let per_variant = 4;
    let mut checked = 0usize;
    let mut worst: f64 = 0.0;
    for (vi, (mode, levels)) in variants.iter().enumerate() {
        let mut found = 0;
        for attempt in 0..5000u64 {
            let seed = (vi as u64) << 32 | attempt;
            let Some(inst) = grad_instance(*mode, levels, seed) else { continue };
            let err = check_instance(
                &inst.arch,
                &inst.params,
                &inst.batch,
                &inst.labels,
                inst.snapshot.as_ref(),
                &inst.cfg,
                DEFAULT_EPS,
            )
            .unwrap();
            worst = worst.max(err);
            checked += 1;
            found += 1;
            if found == per_variant {
                break;
            }
        }
        assert_eq!(found, per_variant, "too few well-separated instances for {mode:?}");
    }
    let ok = checked >= 20 && worst <= DEFAULT_TOL;
    verdict(
        1,
        "gradient soundness",
        ok,
        &format!(
            "{checked} instances across 6 mode/level variants, worst relative error {worst:.2e} \
             (tolerance {DEFAULT_TOL:.0e}), {:.1?}",
            start.elapsed()
        ),
    );
}

#[test]
fn criterion_02_algebraic_identities() {
    let mut rng = rng::substream(2024, "acceptance-identities", &[]);
    let mut worst_forms: f64 = 0.0;
    let mut worst_beta0: f64 = 0.0;
    for _ in 0..50 {
        let b = rng.gen_range(3..=10usize);
        let q = rng.gen_range(2..=4usize);
        let sims = random_similarities(&mut rng, b);
        let labels = random_labels(&mut rng, b, q);
        let split = scl_from_similarities(&sims, &labels, 0.05);
        let quotient = scl_quotient_form(&sims, &labels, 0.05);
        worst_forms = worst_forms.max((split - quotient).abs());
        let rcl0 = rcl_from_similarities(&sims, &labels, 0.05, 0.7, 0.0);
        worst_beta0 = worst_beta0.max((rcl0 - split).abs());
    }
    let ok = worst_forms <= 1e-10 && worst_beta0 <= 1e-10;
    verdict(
        2,
        "algebraic identities",
        ok,
        &format!(
            "50 batches: split vs quotient form deviates by {worst_forms:.2e}, \
             relaxed(beta=0) vs plain by {worst_beta0:.2e} (tolerance 1e-10)"
        ),
    );
}

#[test]
fn criterion_03_inequality_chain() {
    let start = Instant::now();
    let mut rng = rng::substream(3, "acceptance-chain", &[]);
    let mut held = 0usize;
    let mut min_slack = f64::INFINITY;
    for _ in 0..1000 {
        let q = rng.gen_range(3..=5usize);
        let d = rng.gen_range(3..=8usize);
        let mut labels = Vec::new();
        for y in 0..q {
            for _ in 0..rng.gen_range(2..=4usize) {
                labels.push(y);
            }
        }
        let m = labels.len();
        let features = Array2::from_shape_fn((m, d), |_| rng.gen_range(0.05..1.0));
        let anchor = rng.gen_range(0..m);
        let report = inequality_chain_check(&features, &labels, anchor).unwrap();
        min_slack = min_slack.min(report.b - report.a).min(report.c - report.b);
        if report.holds() {
            held += 1;
        }
    }
    let ok = held == 1000 && min_slack >= -1e-9;
    verdict(
        3,
        "bound chain A <= B <= C",
        ok,
        &format!(
            "{held}/1000 non-negative feature sets, minimum slack {min_slack:.2e} \
             (allowed >= -1e-9), {:.1?}",
            start.elapsed()
        ),
    );
}

#[test]
fn criterion_04_classifier_update_decomposition() {
    let mut rng = rng::substream(4, "acceptance-update", &[]);
    let mut max_residual: f64 = 0.0;
    let mut max_sum_norm: f64 = 0.0;
    for _ in 0..50 {
        let m = rng.gen_range(4..=12usize);
        let d = rng.gen_range(2..=6usize);
        let q = rng.gen_range(2..=4usize);
        let features = Array2::from_shape_fn((m, d), |_| rng.gen_range(-2.0..2.0));
        let labels: Vec<usize> = (0..m).map(|_| rng.gen_range(0..q)).collect();
        let classifier = Array2::from_shape_fn((q, d), |_| rng.gen_range(-1.0..1.0));
        let eta = rng.gen_range(0.01..1.0);
        let check = classifier_update_check(&features, &labels, &classifier, eta).unwrap();
        max_residual = max_residual.max(check.residual);
        max_sum_norm = max_sum_norm.max(check.delta_sum_norm);
    }
    let ok = max_residual <= 1e-8 && max_sum_norm <= 1e-8;
    verdict(
        4,
        "classifier update decomposition",
        ok,
        &format!(
            "50 instances: max residual {max_residual:.2e}, max ||sum of row updates|| \
             {max_sum_norm:.2e} (tolerance 1e-8)"
        ),
    );
}

#[test]
fn criterion_05_metric_correctness() {
    let cases = [
        (vec![1.0, 1.0, 1.0], 3.0),
        (vec![1.0, 0.0, 0.0], 1.0),
        (vec![2.0, 1.0, 1.0], 2.0f64.powf(1.5)),
    ];
    let mut worst_erank: f64 = 0.0;
    for (diag, expected) in &cases {
        let m = Array2::from_diag(&arr1(diag));
        worst_erank = worst_erank.max((effective_rank(&m).unwrap() - expected).abs());
    }

    let mut rng = rng::substream(5, "acceptance-metrics", &[]);
    let features = Array2::from_shape_fn((30, 5), |_| rng.gen_range(-1.0..1.0));
    let labels: Vec<usize> = (0..30).map(|i| i % 3).collect();
    let dec = covariance_decomposition(&features, &labels).unwrap();
    let mut worst_split: f64 = 0.0;
    for i in 0..5 {
        for j in 0..5 {
            let gap = dec.total[[i, j]] - dec.within[[i, j]] - dec.between[[i, j]];
            worst_split = worst_split.max(gap.abs());
        }
    }

    // every sample sits exactly on its class mean: zero within-class variance
    let mut collapsed = Array2::zeros((12, 4));
    let mut clabels = Vec::new();
    for i in 0..12 {
        let y = i % 3;
        clabels.push(y);
        collapsed[[i, y]] = 2.0;
        collapsed[[i, 3]] = 1.0;
    }
    let v = vci(&collapsed, &clabels).unwrap();

    let ok = worst_erank <= 1e-9 && worst_split <= 1e-10 && v <= 1e-9;
    verdict(
        5,
        "metric correctness",
        ok,
        &format!(
            "effective-rank closed forms off by {worst_erank:.2e}, covariance split off by \
             {worst_split:.2e}, collapsed-data VCI {v:.2e}"
        ),
    );
}

#[test]
fn criterion_06_partition_correctness() {
    let data = generate_synthetic(4, 50, 4, 0.3, 0).unwrap();
    let n = 8;
    let mut balanced = true;
    let mut disjoint = true;
    let mut tv = [0.0f64; 3];
    let alphas = [0.05, 0.3, 1e6];
    let seeds = 20u64;
    for seed in 0..seeds {
        let mut schemes = vec![
            PartitionScheme::Iid,
            PartitionScheme::Quantity { gamma: 2 },
        ];
        schemes.extend(alphas.iter().map(|&alpha| PartitionScheme::Dirichlet { alpha }));
        for (si, scheme) in schemes.into_iter().enumerate() {
            let plan = partition(
                &data,
                &PartitionConfig { scheme, num_clients: n, seed },
            )
            .unwrap();
            let stats = partition_stats(&plan);
            disjoint &= stats.disjoint;
            let max = *stats.client_sizes.iter().max().unwrap();
            let min = *stats.client_sizes.iter().min().unwrap();
            balanced &= max - min <= 1;
            if si >= 2 {
                tv[si - 2] += stats.heterogeneity / seeds as f64;
            }
        }
    }
    let monotone = tv[0] >= tv[1] && tv[1] >= tv[2];
    let ok = balanced && disjoint && monotone;
    verdict(
        6,
        "partition correctness",
        ok,
        &format!(
            "20 seeds x 5 plans: disjoint {disjoint}, sizes within 1 {balanced}, mean \
             TV-heterogeneity {:.3} >= {:.3} >= {:.3} over alpha {{0.05, 0.3, 1e6}}",
            tv[0], tv[1], tv[2]
        ),
    );
}

fn small_run_config(out_dir: &Path, parallel: bool) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::parse("[dataset]\nkind = \"synthetic\"\n").unwrap();
    cfg.dataset.classes = 4;
    cfg.dataset.per_class = 20;
    cfg.dataset.dim = 8;
    cfg.dataset.spread = 0.3;
    cfg.dataset.holdout_per_class = 5;
    cfg.partition.scheme = SchemeKind::Dirichlet;
    cfg.partition.alpha = Some(0.3);
    cfg.partition.clients = 6;
    cfg.model.widths = vec![10, 8];
    cfg.model.groups = 2;
    cfg.train.rounds = 8;
    cfg.train.local_epochs = 2;
    cfg.run.seed = 11;
    cfg.run.eval_every = 2;
    cfg.run.parallel = parallel;
    cfg.run.out_dir = out_dir.to_path_buf();
    cfg
}

#[test]
fn criterion_07_serial_parallel_determinism() {
    let start = Instant::now();
    let tmp = tempfile::tempdir().unwrap();
    run_experiment(&small_run_config(&tmp.path().join("serial"), false)).unwrap();
    run_experiment(&small_run_config(&tmp.path().join("parallel"), true)).unwrap();
    let a = std::fs::read(tmp.path().join("serial/metrics.jsonl")).unwrap();
    let b = std::fs::read(tmp.path().join("parallel/metrics.jsonl")).unwrap();
    let ok = !a.is_empty() && a == b;
    verdict(
        7,
        "serial/parallel determinism",
        ok,
        &format!(
            "metric logs of the serial and the worker-pool run are byte-identical \
             ({} bytes, {:.1?})",
            a.len(),
            start.elapsed()
        ),
    );
}

/// Per-mode means over the three benchmark seeds.
struct ModeStats {
    final_acc: f64,
    erank_at_10: f64,
    final_vci: f64,
}

struct Benchmark {
    ce: ModeStats,
    scl: ModeStats,
    rcl: ModeStats,
    elapsed: std::time::Duration,
}

fn bench_mode(mode: LossMode, dir: &Path) -> ModeStats {
    let seeds = 3u64;
    let mut acc = 0.0;
    let mut erank = 0.0;
    let mut v = 0.0;
    for seed in 0..seeds {
        let mut cfg = ExperimentConfig::parse("[dataset]\nkind = \"synthetic\"\n").unwrap();
        cfg.dataset.classes = 8;
        cfg.dataset.per_class = 50;
        cfg.dataset.dim = 32;
        cfg.dataset.spread = 0.5;
        cfg.dataset.holdout_per_class = 10;
        cfg.partition.scheme = SchemeKind::Dirichlet;
        cfg.partition.alpha = Some(0.1);
        cfg.partition.clients = 10;
        cfg.model.widths = vec![32, 16];
        cfg.model.groups = 4;
        cfg.train.rounds = 60;
        cfg.train.local_epochs = 10;
        cfg.train.lr = 0.05;
        cfg.train.participation = 0.5;
        cfg.loss.mode = mode;
        cfg.run.seed = seed;
        cfg.run.eval_every = 5;
        cfg.run.parallel = true;
        cfg.run.out_dir = dir.join(format!("{mode:?}-{seed}"));
        let outcome = run_experiment(&cfg).unwrap();
        let last = outcome.rows.last().unwrap();
        let at10 = outcome.rows.iter().find(|r| r.round == 10).unwrap();
        acc += last.accuracy;
        erank += at10.effective_rank.unwrap_or(f64::NAN);
        v += last.vci.unwrap_or(f64::NAN);
    }
    ModeStats {
        final_acc: acc / seeds as f64,
        erank_at_10: erank / seeds as f64,
        final_vci: v / seeds as f64,
    }
}

fn benchmark() -> &'static Benchmark {
    static BENCH: OnceLock<Benchmark> = OnceLock::new();
    BENCH.get_or_init(|| {
        let start = Instant::now();
        let tmp = tempfile::tempdir().unwrap();
        let ce = bench_mode(LossMode::Ce, tmp.path());
        let scl = bench_mode(LossMode::CeScl, tmp.path());
        let rcl = bench_mode(LossMode::CeRcl, tmp.path());
        Benchmark { ce, scl, rcl, elapsed: start.elapsed() }
    })
}

#[test]
fn criterion_08_accuracy_gap_over_the_baseline() {
    let b = benchmark();
    let gap = b.rcl.final_acc - b.ce.final_acc;
    let ok = gap >= 0.02;
    verdict(
        8,
        "relaxed-contrastive accuracy gap",
        ok,
        &format!(
            "mean final accuracy over 3 seeds: baseline {:.4}, with the relaxed contrastive \
             term {:.4} (+{:.1} points, required >= 2.0), benchmark took {:.1?}",
            b.ce.final_acc,
            b.rcl.final_acc,
            gap * 100.0,
            b.elapsed
        ),
    );
}

#[test]
fn criterion_09_collapse_trend() {
    let b = benchmark();
    let erank_ok = b.scl.erank_at_10 < b.rcl.erank_at_10;
    let vci_ok = b.rcl.final_vci <= b.scl.final_vci;
    let ok = erank_ok && vci_ok;
    verdict(
        9,
        "collapse and transferability trend",
        ok,
        &format!(
            "mean effective rank at round 10: plain contrastive {:.3} < relaxed {:.3} is \
             {erank_ok}; mean final VCI: relaxed {:.4} <= plain {:.4} is {vci_ok}",
            b.scl.erank_at_10, b.rcl.erank_at_10, b.rcl.final_vci, b.scl.final_vci
        ),
    );
}

#[test]
fn criterion_10_server_optimizer_sanity() {
    // (a) momentum weight zero reduces to plain averaging, bit for bit
    let data = generate_synthetic(3, 12, 5, 0.3, 9).unwrap();
    let plan = partition(
        &data,
        &PartitionConfig { scheme: PartitionScheme::Iid, num_clients: 4, seed: 9 },
    )
    .unwrap();
    let arch = ArchConfig {
        input: fedrcl_core::datasets::InputShape::Vector { dim: 5 },
        stage_widths: vec![8, 6],
        groups: 2,
        num_classes: 3,
        reduction: Reduction::MeanPool,
    };
    let train = TrainConfig {
        rounds: 5,
        local_epochs: 1,
        iters_per_epoch: 4,
        participation: 0.5,
        seed: 3,
        ..TrainConfig::default()
    };
    let loss = LossConfig { mode: LossMode::Ce, ..LossConfig::default() };
    let opts = RunOptions { eval_every: 2, ..RunOptions::default() };
    let run = |server: &mut ServerOptState| {
        run_training(&arch, &data, &plan, &train, &loss, server, Some(&data), &opts, |_| Ok(()))
            .unwrap()
    };
    let avg = run(&mut ServerOptState::new(ServerOptKind::FedAvg));
    let mut zero_beta = ServerOptState::new(ServerOptKind::FedAvgM);
    zero_beta.beta_momentum = 0.0;
    let avgm = run(&mut zero_beta);
    let trajectories_match = avg.records == avgm.records && avg.model == avgm.model;

    // (b) one adaptive step against the hand-stepped scalar oracle
    let layout = Arc::new(ParamLayout::new(vec![("w".into(), vec![1])]));
    let mut global = ModelParams::from_values(Arc::clone(&layout), vec![0.5]).unwrap();
    let aggregated = ModelParams::from_values(layout, vec![0.7]).unwrap();
    let mut state = ServerOptState::new(ServerOptKind::FedAdam);
    server_step(&mut state, &mut global, &aggregated).unwrap();
    let delta: f64 = 0.7 - 0.5;
    let m = (1.0 - 0.9) * delta;
    let v = (1.0 - 0.99) * delta * delta;
    let expected = 0.5 + 0.01 * m / (v.sqrt() + 1e-3);
    let adam_err = (global.values()[0] - expected).abs();

    let ok = trajectories_match && adam_err <= 1e-12;
    verdict(
        10,
        "server optimizer sanity",
        ok,
        &format!(
            "zero-momentum trajectories identical over 5 rounds: {trajectories_match}; \
             adaptive single step off the scalar oracle by {adam_err:.2e} (tolerance 1e-12)"
        ),
    );
}
