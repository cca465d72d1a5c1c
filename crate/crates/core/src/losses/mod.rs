//! Local-objective components: cross-entropy, supervised contrastive (SCL),
//! relaxed contrastive (RCL), the FedProx proximal term, and their
//! multi-level composition.
//!
//! Both contrastive losses are computed from the batch cosine-similarity
//! matrix. For an anchor x_i with positives j (same class, j != i) the SCL
//! term is, in split form,
//!
//!   sum_j [ -c_ij/tau ] + |pos_i| * log sum_{k != i} exp(c_ik/tau),
//!
//! and RCL adds, once per positive, the divergence penalty
//!
//!   beta * log( sum_{k in P(x_i)} exp(c_ik/tau) + exp(1/tau) ),
//!
//! where P(x_i) is the set of intra-class samples (anchor excluded) with
//! cosine similarity above the relaxation threshold lambda. The batch value
//! is the sum over anchors divided by the number of anchors that have at
//! least one positive (zero if none has), so magnitudes are batch-size
//! stable; the raw sum is recoverable as value * anchor count.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{FeatureStack, ModelParams};

/// Which terms make up the local objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossMode {
    #[serde(rename = "ce")]
    Ce,
    #[serde(rename = "ce+scl")]
    CeScl,
    #[serde(rename = "ce+rcl")]
    CeRcl,
    #[serde(rename = "ce+prox")]
    CeProx,
}

impl LossMode {
    pub fn is_contrastive(self) -> bool {
        matches!(self, LossMode::CeScl | LossMode::CeRcl)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub mode: LossMode,
    /// Contrastive temperature.
    pub tau: f64,
    /// Relaxation threshold: intra-class similarities above it are penalized.
    pub lambda: f64,
    /// Weight of the divergence penalty.
    pub beta: f64,
    /// Proximal weight (ce+prox mode).
    pub mu: f64,
    /// 1-based tap levels fed to the contrastive term.
    pub levels: Vec<usize>,
    /// Optional hard-pair subsampling: keep this fraction of the hardest
    /// positives (lowest similarity) and hardest negatives (highest
    /// similarity) per anchor. Off by default.
    pub hard_pair_fraction: Option<f64>,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            mode: LossMode::CeRcl,
            tau: 0.05,
            lambda: 0.7,
            beta: 1.0,
            mu: 0.001,
            levels: Vec::new(),
            hard_pair_fraction: None,
        }
    }
}

impl LossConfig {
    /// Check internal consistency against a model with `num_levels` taps.
    pub fn validate(&self, num_levels: usize) -> Result<()> {
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(Error::Config(format!("tau must be positive, got {}", self.tau)));
        }
        if !(self.lambda > -1.0 && self.lambda < 1.0) {
            return Err(Error::Config(format!(
                "lambda must lie in (-1, 1), got {}",
                self.lambda
            )));
        }
        if !(self.beta >= 0.0) || !self.beta.is_finite() {
            return Err(Error::Config(format!("beta must be >= 0, got {}", self.beta)));
        }
        if !(self.mu >= 0.0) || !self.mu.is_finite() {
            return Err(Error::Config(format!("mu must be >= 0, got {}", self.mu)));
        }
        if let Some(f) = self.hard_pair_fraction {
            if !(f > 0.0 && f <= 1.0) {
                return Err(Error::Config(format!(
                    "hard_pair_fraction must lie in (0, 1], got {f}"
                )));
            }
        }
        if self.mode.is_contrastive() {
            if self.levels.is_empty() {
                return Err(Error::Config(
                    "loss.levels must be non-empty for a contrastive mode".into(),
                ));
            }
            for &l in &self.levels {
                if l == 0 || l > num_levels {
                    return Err(Error::Config(format!(
                        "loss.levels references level {l}, but model.stage_widths has only \
                         {num_levels} stages"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Mean cross-entropy over the batch; the log is floored at 1e-12.
pub fn cross_entropy(logits: &Array2<f64>, labels: &[usize]) -> f64 {
    let b = logits.nrows();
    assert_eq!(b, labels.len(), "batch/label length mismatch");
    assert!(b > 0, "empty batch");
    let mut total = 0.0;
    for (row, &y) in logits.rows().into_iter().zip(labels) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
        let p = (row[y] - lse).exp();
        total += -p.max(1e-12).ln();
    }
    total / b as f64
}

/// d(mean CE)/d(logits) = (softmax - onehot) / B.
pub(crate) fn ce_grad_wrt_logits(probs: &Array2<f64>, labels: &[usize]) -> Array2<f64> {
    let b = probs.nrows() as f64;
    let mut g = probs.clone();
    for (i, &y) in labels.iter().enumerate() {
        g[[i, y]] -= 1.0;
    }
    g.mapv_inplace(|v| v / b);
    g
}

/// A contrastive loss value plus the count of sample pairs whose similarity
/// was forced to 0 because one side had a zero-norm embedding.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ContrastiveLoss {
    pub value: f64,
    pub zero_norm_pairs: usize,
}

/// Pairwise cosine similarities; rows with zero norm get similarity 0
/// against everything.
fn cosine_matrix(emb: &Array2<f64>) -> (Array2<f64>, Vec<f64>, Array2<f64>, usize) {
    let (b, _) = emb.dim();
    let norms: Vec<f64> = emb.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect();
    let mut units = emb.clone();
    for (mut row, &n) in units.rows_mut().into_iter().zip(&norms) {
        if n > 0.0 {
            row.mapv_inplace(|v| v / n);
        } else {
            row.fill(0.0);
        }
    }
    let sims = units.dot(&units.t());
    let zero_rows = norms.iter().filter(|&&n| !(n > 0.0)).count();
    let zero_norm_pairs = zero_rows * (b - zero_rows) + zero_rows * zero_rows.saturating_sub(1) / 2;
    (sims, norms, units, zero_norm_pairs)
}

/// Per-anchor positive and denominator index sets, after optional hard-pair
/// subsampling.
fn pair_sets(
    sims: &Array2<f64>,
    labels: &[usize],
    mining: Option<f64>,
) -> Vec<(Vec<usize>, Vec<usize>)> {
    let b = labels.len();
    (0..b)
        .map(|i| {
            let mut pos: Vec<usize> =
                (0..b).filter(|&k| k != i && labels[k] == labels[i]).collect();
            let mut neg: Vec<usize> =
                (0..b).filter(|&k| k != i && labels[k] != labels[i]).collect();
            if let Some(f) = mining {
                // hardest positives: lowest similarity; ties by index
                pos.sort_by(|&a, &c| {
                    sims[[i, a]].partial_cmp(&sims[[i, c]]).unwrap().then(a.cmp(&c))
                });
                pos.truncate(((f * pos.len() as f64).ceil() as usize).max(1).min(pos.len()));
                // hardest negatives: highest similarity
                neg.sort_by(|&a, &c| {
                    sims[[i, c]].partial_cmp(&sims[[i, a]]).unwrap().then(a.cmp(&c))
                });
                neg.truncate(((f * neg.len() as f64).ceil() as usize).max(1).min(neg.len()));
            }
            let mut den = pos.clone();
            den.extend_from_slice(&neg);
            den.sort_unstable();
            (pos, den)
        })
        .collect()
}

/// Shared value (and optional similarity-gradient) computation. `penalty`
/// carries (lambda, beta) for RCL; None gives plain SCL.
fn contrastive_core(
    sims: &Array2<f64>,
    labels: &[usize],
    tau: f64,
    penalty: Option<(f64, f64)>,
    mining: Option<f64>,
    mut grad_sims: Option<&mut Array2<f64>>,
) -> f64 {
    // a batch with no positive pairs (including B <= 1) contributes zero
    let b = labels.len();
    let sets = pair_sets(sims, labels, mining);
    let mut total = 0.0;
    let mut anchors = 0usize;
    for i in 0..b {
        let (pos, den) = &sets[i];
        if pos.is_empty() {
            continue;
        }
        anchors += 1;
        let m_i = pos.len() as f64;

        let mut attract = 0.0;
        for &j in pos {
            attract += -sims[[i, j]] / tau;
            if let Some(g) = grad_sims.as_deref_mut() {
                g[[i, j]] += -1.0 / tau;
            }
        }

        let max_c = den.iter().map(|&k| sims[[i, k]]).fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = den.iter().map(|&k| ((sims[[i, k]] - max_c) / tau).exp()).sum();
        let lse = max_c / tau + denom.ln();
        if let Some(g) = grad_sims.as_deref_mut() {
            for &k in den {
                let w = ((sims[[i, k]] - max_c) / tau).exp() / denom;
                g[[i, k]] += m_i * w / tau;
            }
        }
        total += attract + m_i * lse;

        if let Some((lambda, beta)) = penalty {
            if beta != 0.0 {
                let relaxed: Vec<usize> =
                    pos.iter().copied().filter(|&k| sims[[i, k]] > lambda).collect();
                // the exp(1/tau) floor is the anchor's own self-similarity
                let max_a = relaxed
                    .iter()
                    .map(|&k| sims[[i, k]])
                    .fold(1.0f64, f64::max)
                    / tau;
                let pen_denom: f64 = relaxed
                    .iter()
                    .map(|&k| (sims[[i, k]] / tau - max_a).exp())
                    .sum::<f64>()
                    + (1.0 / tau - max_a).exp();
                let pen = max_a + pen_denom.ln();
                total += beta * m_i * pen;
                if let Some(g) = grad_sims.as_deref_mut() {
                    for &k in &relaxed {
                        let w = (sims[[i, k]] / tau - max_a).exp() / pen_denom;
                        g[[i, k]] += beta * m_i * w / tau;
                    }
                }
            }
        }
    }
    if anchors == 0 {
        return 0.0;
    }
    let scale = 1.0 / anchors as f64;
    if let Some(g) = grad_sims {
        g.mapv_inplace(|v| v * scale);
    }
    total * scale
}

/// SCL on a precomputed similarity matrix.
pub fn scl_from_similarities(sims: &Array2<f64>, labels: &[usize], tau: f64) -> f64 {
    contrastive_core(sims, labels, tau, None, None, None)
}

/// RCL on a precomputed similarity matrix.
pub fn rcl_from_similarities(
    sims: &Array2<f64>,
    labels: &[usize],
    tau: f64,
    lambda: f64,
    beta: f64,
) -> f64 {
    contrastive_core(sims, labels, tau, Some((lambda, beta)), None, None)
}

pub fn scl_loss(emb: &Array2<f64>, labels: &[usize], tau: f64) -> ContrastiveLoss {
    let (sims, _, _, zero_norm_pairs) = cosine_matrix(emb);
    let value = contrastive_core(&sims, labels, tau, None, None, None);
    ContrastiveLoss { value, zero_norm_pairs }
}

pub fn rcl_loss(
    emb: &Array2<f64>,
    labels: &[usize],
    tau: f64,
    lambda: f64,
    beta: f64,
) -> ContrastiveLoss {
    let (sims, _, _, zero_norm_pairs) = cosine_matrix(emb);
    let value = contrastive_core(&sims, labels, tau, Some((lambda, beta)), None, None);
    ContrastiveLoss { value, zero_norm_pairs }
}

/// Value and gradient w.r.t. the embeddings. `penalty` as in the core;
/// pairs involving a zero-norm embedding contribute zero gradient, matching
/// their constant-zero similarity.
pub(crate) fn contrastive_value_grad(
    emb: &Array2<f64>,
    labels: &[usize],
    tau: f64,
    penalty: Option<(f64, f64)>,
    mining: Option<f64>,
) -> (f64, Array2<f64>, usize) {
    let (sims, norms, units, zero_norm_pairs) = cosine_matrix(emb);
    let b = emb.nrows();
    let mut g_sims = Array2::<f64>::zeros((b, b));
    let value = contrastive_core(&sims, labels, tau, penalty, mining, Some(&mut g_sims));
    let mut g_emb = Array2::<f64>::zeros(emb.dim());
    for i in 0..b {
        for k in 0..b {
            if i == k {
                continue;
            }
            let w = g_sims[[i, k]];
            if w == 0.0 || !(norms[i] > 0.0) || !(norms[k] > 0.0) {
                continue;
            }
            let c = sims[[i, k]];
            for d in 0..emb.ncols() {
                g_emb[[i, d]] += w * (units[[k, d]] - c * units[[i, d]]) / norms[i];
                g_emb[[k, d]] += w * (units[[i, d]] - c * units[[k, d]]) / norms[k];
            }
        }
    }
    (value, g_emb, zero_norm_pairs)
}

/// (mu/2) * ||local - global||^2.
pub fn prox_term(local: &ModelParams, global: &ModelParams, mu: f64) -> Result<f64> {
    let d = local.delta(global)?;
    Ok(0.5 * mu * d.sq_norm())
}

/// Mean of the configured contrastive loss over the configured tap levels.
pub fn multi_level_contrastive(
    stack: &FeatureStack,
    labels: &[usize],
    cfg: &LossConfig,
) -> Result<ContrastiveLoss> {
    let penalty = match cfg.mode {
        LossMode::CeScl => None,
        LossMode::CeRcl => Some((cfg.lambda, cfg.beta)),
        _ => {
            return Err(Error::Config(
                "multi_level_contrastive called with a non-contrastive mode".into(),
            ))
        }
    };
    if cfg.levels.is_empty() {
        return Err(Error::Config("no contrastive levels configured".into()));
    }
    let mut value = 0.0;
    let mut zero_norm_pairs = 0;
    for &l in &cfg.levels {
        let emb = stack.level(l)?;
        let (sims, _, _, z) = cosine_matrix(emb);
        value += contrastive_core(&sims, labels, cfg.tau, penalty, cfg.hard_pair_fraction, None);
        zero_norm_pairs += z;
    }
    Ok(ContrastiveLoss { value: value / cfg.levels.len() as f64, zero_norm_pairs })
}

/// The components of one local-objective evaluation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub ce: f64,
    pub contrastive: f64,
    pub prox: f64,
    pub zero_norm_pairs: usize,
}

/// Composite local loss for the configured mode. `global_snapshot` anchors
/// the proximal term and must be present in ce+prox mode.
pub fn total_local_loss(
    stack: &FeatureStack,
    labels: &[usize],
    params: &ModelParams,
    global_snapshot: Option<&ModelParams>,
    cfg: &LossConfig,
) -> Result<LossBreakdown> {
    let ce = cross_entropy(&stack.logits, labels);
    let mut contrastive = 0.0;
    let mut prox = 0.0;
    let mut zero_norm_pairs = 0;
    match cfg.mode {
        LossMode::Ce => {}
        LossMode::CeScl | LossMode::CeRcl => {
            let c = multi_level_contrastive(stack, labels, cfg)?;
            contrastive = c.value;
            zero_norm_pairs = c.zero_norm_pairs;
        }
        LossMode::CeProx => {
            let anchor = global_snapshot.ok_or_else(|| {
                Error::Config("ce+prox mode needs the global snapshot".into())
            })?;
            prox = prox_term(params, anchor, cfg.mu)?;
        }
    }
    Ok(LossBreakdown { total: ce + contrastive + prox, ce, contrastive, prox, zero_norm_pairs })
}
