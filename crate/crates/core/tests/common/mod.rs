//! Generators and reference formulas shared by the integration suites.
#![allow(dead_code)] // each test binary pulls in a different subset

use fedrcl_core::datasets::{InputShape, Samples};
use fedrcl_core::losses::{LossConfig, LossMode};
use fedrcl_core::model::gradcheck::{fd_resolvable, instance_margins, DEFAULT_EPS, DEFAULT_TOL};
use fedrcl_core::model::{init_model, ArchConfig, ModelParams, Reduction};
use fedrcl_core::rng;
use ndarray::Array2;
use rand::Rng;

/// Quotient-form supervised contrastive loss, straight from the definition:
/// the mean over anchors that have positives of
///
///   -sum_{p in P(i)} log( exp(s_ip/tau) / sum_{a != i} exp(s_ia/tau) ).
///
/// Written without log-domain stabilization so it shares no arithmetic with
/// the library's split-form evaluation.
pub fn scl_quotient_form(sims: &Array2<f64>, labels: &[usize], tau: f64) -> f64 {
    let b = labels.len();
    let mut total = 0.0;
    let mut anchors = 0usize;
    for i in 0..b {
        let pos: Vec<usize> =
            (0..b).filter(|&k| k != i && labels[k] == labels[i]).collect();
        if pos.is_empty() {
            continue;
        }
        anchors += 1;
        let denom: f64 =
            (0..b).filter(|&k| k != i).map(|k| (sims[[i, k]] / tau).exp()).sum();
        for &p in &pos {
            total += -((sims[[i, p]] / tau).exp() / denom).ln();
        }
    }
    if anchors == 0 {
        0.0
    } else {
        total / anchors as f64
    }
}

/// Symmetric matrix with unit diagonal and off-diagonal entries in
/// (-0.95, 0.95) — the shape of a cosine-similarity matrix.
pub fn random_similarities(rng: &mut impl Rng, b: usize) -> Array2<f64> {
    let mut s = Array2::zeros((b, b));
    for i in 0..b {
        s[[i, i]] = 1.0;
        for j in (i + 1)..b {
            let v = rng.gen_range(-0.95..0.95);
            s[[i, j]] = v;
            s[[j, i]] = v;
        }
    }
    s
}

/// Labels over `q` classes with at least one positive pair and at least two
/// classes present.
pub fn random_labels(rng: &mut impl Rng, b: usize, q: usize) -> Vec<usize> {
    assert!(b >= 3 && q >= 2);
    let mut labels: Vec<usize> = (0..b).map(|_| rng.gen_range(0..q)).collect();
    labels[1] = labels[0];
    if labels.iter().all(|&y| y == labels[0]) {
        let last = labels.len() - 1;
        labels[last] = (labels[0] + 1) % q;
    }
    labels
}

/// One (architecture, parameters, batch) instance for finite-difference
/// checking.
pub struct GradInstance {
    pub arch: ArchConfig,
    pub params: ModelParams,
    pub batch: Samples,
    pub labels: Vec<usize>,
    pub snapshot: Option<ModelParams>,
    pub cfg: LossConfig,
}

/// Draw a random instance for `mode`; None when the draw lands too close to
/// a kink of the loss surface for central differences to be meaningful, in
/// which case the caller simply tries the next seed.
pub fn grad_instance(mode: LossMode, levels: &[usize], seed: u64) -> Option<GradInstance> {
    let mut rng = rng::substream(seed, "acceptance-gradcheck", &[]);
    let q = rng.gen_range(3..=4usize);
    let b = rng.gen_range(5..=8usize);
    let dim = rng.gen_range(5..=10usize);
    let arch = ArchConfig {
        input: InputShape::Vector { dim },
        // widths stay divisible by the two normalization groups
        stage_widths: vec![2 * rng.gen_range(3..=5), 2 * rng.gen_range(2..=4)],
        groups: 2,
        num_classes: q,
        reduction: Reduction::MeanPool,
    };
    let mut params = init_model(&arch, seed).unwrap();
    // widen the affine weights so normalization groups are well-conditioned
    for seg in ["stage1.weight", "stage2.weight", "classifier.weight"] {
        for v in params.segment_mut(seg).unwrap() {
            *v *= 3.0;
        }
    }
    let x = Array2::from_shape_fn((b, dim), |_| rng.gen_range(-2.0..2.0));
    let batch = Samples::Vector(x);
    let labels = random_labels(&mut rng, b, q);
    let snapshot = match mode {
        LossMode::CeProx => Some(init_model(&arch, seed ^ 0x5851_f42d).unwrap()),
        _ => None,
    };
    let cfg = LossConfig { mode, levels: levels.to_vec(), ..LossConfig::default() };
    let margins = instance_margins(&arch, &params, &batch, &labels, &cfg).unwrap();
    if !margins.well_separated() {
        return None;
    }
    // the relaxation penalty only sees pairs past the threshold; make the
    // relaxed-mode instances actually exercise that branch
    if mode == LossMode::CeRcl && margins.active_pairs == 0 {
        return None;
    }
    // skip instances whose curvature the fixed probe step cannot resolve
    let resolvable = fd_resolvable(
        &arch,
        &params,
        &batch,
        &labels,
        snapshot.as_ref(),
        &cfg,
        DEFAULT_EPS,
        DEFAULT_TOL,
    )
    .unwrap();
    if !resolvable {
        return None;
    }
    Some(GradInstance { arch, params, batch, labels, snapshot, cfg })
}
