//! Central finite-difference verification of the analytic gradient.
//!
//! The contract for the hand-derived backward pass is numerical: every
//! coordinate of the analytic gradient must agree with a central difference
//! (eps = 1e-3) to a relative error of 1e-4. Instances are screened twice
//! before the comparison:
//!
//! 1. [`instance_margins`] keeps the probe away from the kinks of the loss
//!    surface (ReLU boundaries, the relaxation threshold, zero-norm
//!    embeddings), where one-sided evaluation would be meaningless.
//! 2. [`fd_resolvable`] discards instances whose smooth-region curvature is
//!    too strong for the fixed step to resolve, by comparing full- and
//!    half-step differences. The screen never looks at the analytic
//!    gradient, so it cannot mask a wrong one: it only certifies that the
//!    numerical oracle itself is sharp enough to adjudicate.

use crate::datasets::Samples;
use crate::error::Result;
use crate::losses::{self, LossConfig, LossMode};
use crate::model::{forward, forward_kink_stats, grad, ArchConfig, ModelParams};

pub const DEFAULT_EPS: f64 = 1e-3;
pub const DEFAULT_TOL: f64 = 1e-4;

/// Distances of one (params, batch, labels) instance from the kinks of the
/// composite loss. Finite differences are only meaningful when every margin
/// is comfortably larger than the probe step.
#[derive(Clone, Copy, Debug)]
pub struct InstanceMargins {
    /// min |post-affine pre-activation| over all stages (ReLU boundary).
    pub relu: f64,
    /// min normalization group variance (degenerate-group boundary).
    pub group_var: f64,
    /// min embedding norm over contrastive levels (cosine singularity).
    pub embedding_norm: f64,
    /// min softmax probability of the true class (log-clamp boundary).
    pub prob_true: f64,
    /// min |cos - lambda| over intra-class pairs (relaxation threshold).
    pub cos_gap: f64,
    /// number of intra-class pairs past the relaxation threshold, i.e. pairs
    /// the divergence penalty actually sees. Only counted for the relaxed
    /// mode; a gradient check that wants the penalty branch exercised should
    /// require this to be positive.
    pub active_pairs: usize,
}

impl InstanceMargins {
    /// Margins comfortably clear of every kink for eps = 1e-3 probes, so
    /// that no central difference straddles a non-smooth point. Truncation
    /// error on the smooth part is a separate concern; see [`fd_resolvable`].
    pub fn well_separated(&self) -> bool {
        self.relu >= 0.05
            && self.group_var >= 0.1
            && self.embedding_norm >= 0.05
            && self.prob_true >= 1e-8
            && self.cos_gap >= 0.02
    }
}

/// Measure how far an instance sits from every non-smooth point of the loss.
pub fn instance_margins(
    arch: &ArchConfig,
    params: &ModelParams,
    batch: &Samples,
    labels: &[usize],
    cfg: &LossConfig,
) -> Result<InstanceMargins> {
    let (stack, relu, group_var) = forward_kink_stats(arch, params, batch)?;
    let mut embedding_norm = f64::INFINITY;
    let mut cos_gap = f64::INFINITY;
    let mut active_pairs = 0usize;
    if cfg.mode.is_contrastive() {
        for &l in &cfg.levels {
            let emb = stack.level(l)?;
            let norms: Vec<f64> =
                emb.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect();
            for &n in &norms {
                embedding_norm = embedding_norm.min(n);
            }
            if cfg.mode == LossMode::CeRcl && cfg.beta != 0.0 {
                for i in 0..emb.nrows() {
                    for j in 0..emb.nrows() {
                        if i == j || labels[i] != labels[j] {
                            continue;
                        }
                        if norms[i] > 0.0 && norms[j] > 0.0 {
                            let c = emb.row(i).dot(&emb.row(j)) / (norms[i] * norms[j]);
                            cos_gap = cos_gap.min((c - cfg.lambda).abs());
                            if c > cfg.lambda {
                                active_pairs += 1;
                            }
                        }
                    }
                }
            }
        }
    }
    let mut prob_true = f64::INFINITY;
    for (i, &y) in labels.iter().enumerate() {
        prob_true = prob_true.min(stack.probs[[i, y]]);
    }
    Ok(InstanceMargins { relu, group_var, embedding_norm, prob_true, cos_gap, active_pairs })
}

/// The composite loss as a pure function of the parameters.
pub fn loss_value(
    arch: &ArchConfig,
    params: &ModelParams,
    batch: &Samples,
    labels: &[usize],
    global_snapshot: Option<&ModelParams>,
    cfg: &LossConfig,
) -> Result<f64> {
    let stack = forward(arch, params, batch)?;
    Ok(losses::total_local_loss(&stack, labels, params, global_snapshot, cfg)?.total)
}

/// Central-difference gradient over every coordinate.
pub fn numerical_gradient(
    arch: &ArchConfig,
    params: &ModelParams,
    batch: &Samples,
    labels: &[usize],
    global_snapshot: Option<&ModelParams>,
    cfg: &LossConfig,
    eps: f64,
) -> Result<Vec<f64>> {
    let mut perturbed = params.clone();
    let mut out = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        let orig = params.values()[i];
        perturbed.values_mut()[i] = orig + eps;
        let up = loss_value(arch, &perturbed, batch, labels, global_snapshot, cfg)?;
        perturbed.values_mut()[i] = orig - eps;
        let down = loss_value(arch, &perturbed, batch, labels, global_snapshot, cfg)?;
        perturbed.values_mut()[i] = orig;
        out.push((up - down) / (2.0 * eps));
    }
    Ok(out)
}

/// Decide whether central differences at `eps` can resolve this instance's
/// gradient to within `tol` relative error, using Richardson step-halving.
///
/// A central difference expands as D(eps) = g + c*eps^2 + O(eps^4), so
/// D(eps) - D(eps/2) = (3/4) c eps^2 and the truncation error of the
/// full-step estimate is (4/3) |D(eps) - D(eps/2)| per coordinate. The
/// instance is kept only when that estimate clears tol/2 under the same
/// relative measure as [`max_relative_error`], leaving the other half of
/// the budget for everything the quadratic model misses. Only loss values
/// enter the decision — a wrong analytic gradient cannot bias it.
pub fn fd_resolvable(
    arch: &ArchConfig,
    params: &ModelParams,
    batch: &Samples,
    labels: &[usize],
    global_snapshot: Option<&ModelParams>,
    cfg: &LossConfig,
    eps: f64,
    tol: f64,
) -> Result<bool> {
    let full = numerical_gradient(arch, params, batch, labels, global_snapshot, cfg, eps)?;
    let half = numerical_gradient(arch, params, batch, labels, global_snapshot, cfg, eps / 2.0)?;
    Ok(full.iter().zip(&half).all(|(&f, &h)| {
        let truncation = (f - h).abs() * 4.0 / 3.0;
        truncation <= 0.5 * tol * f.abs().max(h.abs()).max(1e-6)
    }))
}

/// max_i |a_i - f_i| / max(|a_i|, |f_i|, 1e-6).
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &f)| (a - f).abs() / a.abs().max(f.abs()).max(1e-6))
        .fold(0.0, f64::max)
}

/// Run the full check on one instance; returns the worst relative error.
pub fn check_instance(
    arch: &ArchConfig,
    params: &ModelParams,
    batch: &Samples,
    labels: &[usize],
    global_snapshot: Option<&ModelParams>,
    cfg: &LossConfig,
    eps: f64,
) -> Result<f64> {
    let (_, analytic) = grad(arch, params, batch, labels, global_snapshot, cfg)?;
    let numeric = numerical_gradient(arch, params, batch, labels, global_snapshot, cfg, eps)?;
    Ok(max_relative_error(analytic.values(), &numeric))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::InputShape;
    use crate::losses::LossMode;
    use crate::model::{init_model, Reduction};
    use ndarray::Array2;
    use rand::Rng;

    #[test]
    fn dense_ce_gradient_matches_finite_differences() {
        let arch = ArchConfig {
            input: InputShape::Vector { dim: 5 },
            stage_widths: vec![6, 4],
            groups: 2,
            num_classes: 3,
            reduction: Reduction::MeanPool,
        };
        let cfg = LossConfig { mode: LossMode::Ce, ..LossConfig::default() };
        let labels = [0usize, 1, 2, 1];
        let mut checked = 0;
        for seed in 0..200u64 {
            // widen weights and inputs so normalization groups are
            // well-conditioned; margins still decide acceptance
            let mut params = init_model(&arch, seed).unwrap();
            for seg in ["stage1.weight", "stage2.weight", "classifier.weight"] {
                for v in params.segment_mut(seg).unwrap() {
                    *v *= 3.0;
                }
            }
            let mut rng = crate::rng::substream(seed, "gradcheck-smoke", &[]);
            let x = Array2::from_shape_fn((4, 5), |_| rng.gen_range(-2.0..2.0));
            let batch = Samples::Vector(x);
            let margins = instance_margins(&arch, &params, &batch, &labels, &cfg).unwrap();
            if !margins.well_separated()
                || !fd_resolvable(&arch, &params, &batch, &labels, None, &cfg, DEFAULT_EPS, DEFAULT_TOL)
                    .unwrap()
            {
                continue;
            }
            let err =
                check_instance(&arch, &params, &batch, &labels, None, &cfg, DEFAULT_EPS)
                    .unwrap();
            assert!(err <= DEFAULT_TOL, "seed {seed}: max relative error {err}");
            checked += 1;
            if checked == 3 {
                return;
            }
        }
        panic!("no well-separated instances found in 200 seeds (checked {checked})");
    }

    // regression: the proximal pull must survive the backward walk that
    // fills every segment buffer
    #[test]
    fn prox_gradient_reaches_every_segment() {
        let arch = ArchConfig {
            input: InputShape::Vector { dim: 4 },
            stage_widths: vec![6, 4],
            groups: 2,
            num_classes: 3,
            reduction: Reduction::MeanPool,
        };
        let cfg = LossConfig { mode: LossMode::CeProx, mu: 0.5, ..LossConfig::default() };
        let labels = [0usize, 1, 2];
        for seed in 0..50u64 {
            let mut params = init_model(&arch, seed).unwrap();
            for seg in ["stage1.weight", "stage2.weight", "classifier.weight"] {
                for v in params.segment_mut(seg).unwrap() {
                    *v *= 3.0;
                }
            }
            let snapshot = init_model(&arch, seed + 999).unwrap();
            let mut rng = crate::rng::substream(seed, "gradcheck-prox", &[]);
            let x = Array2::from_shape_fn((3, 4), |_| rng.gen_range(-2.0..2.0));
            let batch = Samples::Vector(x);
            let margins = instance_margins(&arch, &params, &batch, &labels, &cfg).unwrap();
            if !margins.well_separated()
                || !fd_resolvable(
                    &arch,
                    &params,
                    &batch,
                    &labels,
                    Some(&snapshot),
                    &cfg,
                    DEFAULT_EPS,
                    DEFAULT_TOL,
                )
                .unwrap()
            {
                continue;
            }
            let err = check_instance(
                &arch,
                &params,
                &batch,
                &labels,
                Some(&snapshot),
                &cfg,
                DEFAULT_EPS,
            )
            .unwrap();
            assert!(err <= DEFAULT_TOL, "seed {seed}: max relative error {err}");
            return;
        }
        panic!("no well-separated instance found");
    }
}

