//! Analytical quantities over feature embeddings: the sample-wise deviation
//! bound, the classifier-update decomposition, covariance splits, effective
//! rank, the variance collapse index (VCI), and the numeric certification of
//! the bound chain that connects the deviation objective to the supervised
//! contrastive form.
//!
//! Everything here is pure and read-only over (features, predictions,
//! labels) matrices; callers typically feed the final-level embeddings of a
//! held-out set.

use nalgebra::{DMatrix, DVector};
use ndarray::Array2;

use crate::error::{Error, Result};

/// Per-class summary statistics over one feature/prediction matrix.
///
/// For each class y: the member indices O_y, the size |O_y|, the mean
/// feature norm Phi_y, and the mean prediction row P_z^(y) (mean over O_y of
/// the softmax scores for every z). Absent classes are flagged rather than
/// dropped so class ids stay aligned.
#[derive(Clone, Debug)]
pub struct ClassStats {
    pub sizes: Vec<usize>,
    pub mean_norms: Vec<f64>,
    /// Row y, column z: P_z^(y).
    pub mean_predictions: Array2<f64>,
    pub present: Vec<bool>,
    pub members: Vec<Vec<usize>>,
}

impl ClassStats {
    pub fn num_classes(&self) -> usize {
        self.sizes.len()
    }

    /// Class of sample `idx`.
    pub fn class_of(&self, idx: usize) -> Option<usize> {
        self.members.iter().position(|m| m.contains(&idx))
    }
}

pub fn class_statistics(
    features: &Array2<f64>,
    predictions: &Array2<f64>,
    labels: &[usize],
) -> Result<ClassStats> {
    let m = features.nrows();
    if predictions.nrows() != m || labels.len() != m {
        return Err(Error::Shape(format!(
            "features ({m}), predictions ({}), labels ({}) disagree on sample count",
            predictions.nrows(),
            labels.len()
        )));
    }
    let q = predictions.ncols();
    if let Some(&y) = labels.iter().find(|&&y| y >= q) {
        return Err(Error::Data(format!("label {y} out of range for {q} classes")));
    }
    let mut members = vec![Vec::new(); q];
    for (i, &y) in labels.iter().enumerate() {
        members[y].push(i);
    }
    let mut sizes = vec![0usize; q];
    let mut mean_norms = vec![0.0; q];
    let mut mean_predictions = Array2::<f64>::zeros((q, q));
    let mut present = vec![false; q];
    for y in 0..q {
        let n = members[y].len();
        sizes[y] = n;
        if n == 0 {
            continue;
        }
        present[y] = true;
        for &i in &members[y] {
            let row = features.row(i);
            mean_norms[y] += row.dot(&row).sqrt();
            for z in 0..q {
                mean_predictions[[y, z]] += predictions[[i, z]];
            }
        }
        mean_norms[y] /= n as f64;
        for z in 0..q {
            mean_predictions[[y, z]] /= n as f64;
        }
    }
    Ok(ClassStats { sizes, mean_norms, mean_predictions, present, members })
}

fn unit_rows(features: &Array2<f64>) -> Array2<f64> {
    let mut units = features.clone();
    for mut row in units.rows_mut() {
        let n = row.dot(&row).sqrt();
        if n > 0.0 {
            row.mapv_inplace(|v| v / n);
        } else {
            row.fill(0.0);
        }
    }
    units
}

/// Sample-wise deviation bound for one anchor:
///
///   D(x) = (1 - P_r^(r)) * Phi_r * |O_r| * S_r(x)
///          / sum_{j != r} P_r^(j) * Phi_j * |O_j| * S_j(x),
///
/// with S_y(x) the mean cosine similarity of x to the members of class y
/// (the anchor itself included when y = r). A non-positive denominator
/// yields the +inf sentinel; with rectified non-negative features that can
/// only happen when every cross-class similarity is exactly zero.
pub fn deviation_bound(idx: usize, features: &Array2<f64>, stats: &ClassStats) -> Result<f64> {
    let units = unit_rows(features);
    let sims = class_mean_similarities(idx, &units, stats);
    let r = stats
        .class_of(idx)
        .ok_or_else(|| Error::Data(format!("sample {idx} not in any class")))?;
    Ok(deviation_from_sims(r, &sims, stats))
}

/// S_y(x) for every class, from precomputed unit rows.
fn class_mean_similarities(idx: usize, units: &Array2<f64>, stats: &ClassStats) -> Vec<f64> {
    let q = stats.num_classes();
    let anchor = units.row(idx);
    let mut sims = vec![0.0; q];
    for y in 0..q {
        if !stats.present[y] {
            continue;
        }
        let mut acc = 0.0;
        for &i in &stats.members[y] {
            acc += anchor.dot(&units.row(i));
        }
        sims[y] = acc / stats.sizes[y] as f64;
    }
    sims
}

fn deviation_from_sims(r: usize, sims: &[f64], stats: &ClassStats) -> f64 {
    let numerator = (1.0 - stats.mean_predictions[[r, r]])
        * stats.mean_norms[r]
        * stats.sizes[r] as f64
        * sims[r];
    let mut denominator = 0.0;
    for j in 0..stats.num_classes() {
        if j == r || !stats.present[j] {
            continue;
        }
        denominator +=
            stats.mean_predictions[[j, r]] * stats.mean_norms[j] * stats.sizes[j] as f64 * sims[j];
    }
    if denominator > 0.0 {
        numerator / denominator
    } else {
        f64::INFINITY
    }
}

/// Deviation bounds for every sample plus the similarity matrix they share.
#[derive(Clone, Debug)]
pub struct DeviationReport {
    pub deviation: Vec<f64>,
    /// Row i, column y: S_y(x_i).
    pub similarities: Array2<f64>,
    /// Mean over samples with a finite bound (NaN if none).
    pub mean_finite: f64,
    pub min: f64,
    pub fraction_below_one: f64,
    pub infinite_count: usize,
}

pub fn deviation_report(
    features: &Array2<f64>,
    labels: &[usize],
    stats: &ClassStats,
) -> Result<DeviationReport> {
    let m = features.nrows();
    if labels.len() != m {
        return Err(Error::Shape("labels/features length mismatch".into()));
    }
    let q = stats.num_classes();
    let units = unit_rows(features);
    // mean unit vector per class turns every S_y(x) into one dot product
    let mut class_mean_units = Array2::<f64>::zeros((q, features.ncols()));
    for y in 0..q {
        if !stats.present[y] {
            continue;
        }
        for &i in &stats.members[y] {
            for d in 0..features.ncols() {
                class_mean_units[[y, d]] += units[[i, d]];
            }
        }
        let n = stats.sizes[y] as f64;
        for d in 0..features.ncols() {
            class_mean_units[[y, d]] /= n;
        }
    }
    let mut similarities = Array2::<f64>::zeros((m, q));
    let mut deviation = Vec::with_capacity(m);
    let mut finite_sum = 0.0;
    let mut finite_count = 0usize;
    let mut min = f64::INFINITY;
    let mut below_one = 0usize;
    let mut infinite_count = 0usize;
    for i in 0..m {
        let sims: Vec<f64> =
            (0..q).map(|y| units.row(i).dot(&class_mean_units.row(y))).collect();
        for y in 0..q {
            similarities[[i, y]] = sims[y];
        }
        let d = deviation_from_sims(labels[i], &sims, stats);
        if d.is_finite() {
            finite_sum += d;
            finite_count += 1;
            min = min.min(d);
            if d < 1.0 {
                below_one += 1;
            }
        } else {
            infinite_count += 1;
        }
        deviation.push(d);
    }
    Ok(DeviationReport {
        deviation,
        similarities,
        mean_finite: if finite_count > 0 { finite_sum / finite_count as f64 } else { f64::NAN },
        min,
        fraction_below_one: below_one as f64 / m as f64,
        infinite_count,
    })
}

/// The classifier-row update decomposition and its certification.
#[derive(Clone, Debug)]
pub struct UpdateCheck {
    /// Delta psi_r for every class r (Q x d).
    pub deltas: Array2<f64>,
    /// max-entry |Delta psi - (-eta * exact CE gradient)|.
    pub residual: f64,
    /// ||sum_r Delta psi_r||_2 — zero because softmax rows sum to one.
    pub delta_sum_norm: f64,
}

/// Evaluate Delta psi_r = eta [ sum_{i in O_r} (1 - p_r(x_i)) phi(x_i)
/// - sum_{j != r} sum_{i in O_j} p_r(x_i) phi(x_i) ] for every r, and
/// certify it against the exact (sum-reduction) cross-entropy gradient.
pub fn classifier_update_check(
    features: &Array2<f64>,
    labels: &[usize],
    classifier: &Array2<f64>,
    eta: f64,
) -> Result<UpdateCheck> {
    let (m, d) = features.dim();
    let q = classifier.nrows();
    if classifier.ncols() != d {
        return Err(Error::Shape(format!(
            "classifier is {}x{} but features have width {d}",
            q,
            classifier.ncols()
        )));
    }
    if labels.len() != m {
        return Err(Error::Shape("labels/features length mismatch".into()));
    }
    if let Some(&y) = labels.iter().find(|&&y| y >= q) {
        return Err(Error::Data(format!("label {y} out of range for {q} classes")));
    }
    let logits = features.dot(&classifier.t());
    let mut probs = logits;
    for mut row in probs.rows_mut() {
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|z| (z - mx).exp());
        let s = row.sum();
        row.mapv_inplace(|e| e / s);
    }
    let mut deltas = Array2::<f64>::zeros((q, d));
    for r in 0..q {
        for i in 0..m {
            let coef = if labels[i] == r { 1.0 - probs[[i, r]] } else { -probs[[i, r]] };
            for k in 0..d {
                deltas[[r, k]] += eta * coef * features[[i, k]];
            }
        }
    }
    // exact full-batch CE gradient (sum reduction): sum_i (p - onehot)^T phi
    let mut residual: f64 = 0.0;
    for r in 0..q {
        for k in 0..d {
            let mut grad = 0.0;
            for i in 0..m {
                let coef = probs[[i, r]] - if labels[i] == r { 1.0 } else { 0.0 };
                grad += coef * features[[i, k]];
            }
            residual = residual.max((deltas[[r, k]] - (-eta * grad)).abs());
        }
    }
    let mut delta_sum_norm = 0.0;
    for k in 0..d {
        let s: f64 = (0..q).map(|r| deltas[[r, k]]).sum();
        delta_sum_norm += s * s;
    }
    Ok(UpdateCheck { deltas, residual, delta_sum_norm: delta_sum_norm.sqrt() })
}

fn to_nalgebra(m: &Array2<f64>) -> DMatrix<f64> {
    let a = m.as_standard_layout();
    DMatrix::from_row_slice(m.nrows(), m.ncols(), a.as_slice().unwrap())
}

/// Effective rank: with p_k = sigma_k / sum_i sigma_i over the singular
/// values, erank = exp(-sum_k p_k ln p_k); zero singular values contribute
/// nothing via the p ln p -> 0 limit.
pub fn effective_rank(matrix: &Array2<f64>) -> Result<f64> {
    let svd = to_nalgebra(matrix).svd(false, false);
    let sigma: &DVector<f64> = &svd.singular_values;
    let total: f64 = sigma.iter().sum();
    if !(total > 0.0) {
        return Err(Error::Numerical("effective rank of an all-zero matrix is undefined".into()));
    }
    let mut entropy = 0.0;
    for &s in sigma.iter() {
        let p = s / total;
        if p > 0.0 {
            entropy -= p * p.ln();
        }
    }
    Ok(entropy.exp())
}

/// Within/between/total covariance split, each normalized by the sample
/// count M so that total = within + between exactly.
#[derive(Clone, Debug)]
pub struct CovarianceDecomposition {
    pub within: Array2<f64>,
    pub between: Array2<f64>,
    pub total: Array2<f64>,
    pub trace_within: f64,
    pub trace_between: f64,
    pub trace_total: f64,
    /// Only one class present: between is identically zero.
    pub single_class: bool,
}

pub fn covariance_decomposition(
    features: &Array2<f64>,
    labels: &[usize],
) -> Result<CovarianceDecomposition> {
    let (m, d) = features.dim();
    if m == 0 {
        return Err(Error::Shape("empty feature matrix".into()));
    }
    if labels.len() != m {
        return Err(Error::Shape("labels/features length mismatch".into()));
    }
    let q = labels.iter().max().unwrap() + 1;
    let mut counts = vec![0usize; q];
    for &y in labels {
        counts[y] += 1;
    }
    let single_class = counts.iter().filter(|&&c| c > 0).count() < 2;

    let mf = m as f64;
    let mut global_mean = vec![0.0; d];
    for row in features.rows() {
        for (g, v) in global_mean.iter_mut().zip(row.iter()) {
            *g += v / mf;
        }
    }
    let mut class_means = Array2::<f64>::zeros((q, d));
    for (i, &y) in labels.iter().enumerate() {
        for k in 0..d {
            class_means[[y, k]] += features[[i, k]] / counts[y] as f64;
        }
    }

    let mut within = Array2::<f64>::zeros((d, d));
    let mut between = Array2::<f64>::zeros((d, d));
    let mut total = Array2::<f64>::zeros((d, d));
    for (i, &y) in labels.iter().enumerate() {
        for a in 0..d {
            let dw_a = features[[i, a]] - class_means[[y, a]];
            let dt_a = features[[i, a]] - global_mean[a];
            for b in 0..d {
                within[[a, b]] += dw_a * (features[[i, b]] - class_means[[y, b]]) / mf;
                total[[a, b]] += dt_a * (features[[i, b]] - global_mean[b]) / mf;
            }
        }
    }
    for y in 0..q {
        if counts[y] == 0 {
            continue;
        }
        let w = counts[y] as f64 / mf;
        for a in 0..d {
            let da = class_means[[y, a]] - global_mean[a];
            for b in 0..d {
                between[[a, b]] += w * da * (class_means[[y, b]] - global_mean[b]);
            }
        }
    }
    let trace = |mat: &Array2<f64>| (0..d).map(|k| mat[[k, k]]).sum::<f64>();
    Ok(CovarianceDecomposition {
        trace_within: trace(&within),
        trace_between: trace(&between),
        trace_total: trace(&total),
        within,
        between,
        total,
        single_class,
    })
}

/// Relative singular-value cutoff shared by the pseudo-inverse and the
/// numerical rank.
const PINV_RCOND: f64 = 1e-10;

/// Variance collapse index: 1 - Tr[pinv(total) * between] / rank(between),
/// clamped to [0, 1] after allowing 1e-9 of numerical overshoot.
pub fn vci(features: &Array2<f64>, labels: &[usize]) -> Result<f64> {
    let dec = covariance_decomposition(features, labels)?;
    vci_from_decomposition(&dec)
}

pub fn vci_from_decomposition(dec: &CovarianceDecomposition) -> Result<f64> {
    let between = to_nalgebra(&dec.between);
    let sigma_b = between.clone().svd(false, false).singular_values;
    let max_b = sigma_b.iter().cloned().fold(0.0f64, f64::max);
    let rank_b = sigma_b.iter().filter(|&&s| s > PINV_RCOND * max_b && s > 0.0).count();
    if rank_b == 0 {
        return Err(Error::Numerical(
            "VCI undefined: between-class covariance has rank 0".into(),
        ));
    }
    let total = to_nalgebra(&dec.total);
    let svd = total.svd(true, true);
    let max_t = svd.singular_values.iter().cloned().fold(0.0f64, f64::max);
    let pinv = svd
        .pseudo_inverse(PINV_RCOND * max_t)
        .map_err(|e| Error::Numerical(format!("pseudo-inverse failed: {e}")))?;
    let ratio = (pinv * between).trace() / rank_b as f64;
    let v = 1.0 - ratio;
    if !v.is_finite() {
        return Err(Error::Numerical("VCI evaluated to a non-finite value".into()));
    }
    Ok(v.clamp(0.0, 1.0))
}

/// Collapse diagnostics bundled for reporting: covariance traces, the
/// effective rank of the total feature covariance, and the VCI. The two
/// derived quantities are None when undefined (all-zero covariance, rank-0
/// between-class scatter).
#[derive(Clone, Debug, PartialEq)]
pub struct CollapseMetrics {
    pub trace_within: f64,
    pub trace_between: f64,
    pub trace_total: f64,
    pub effective_rank: Option<f64>,
    pub vci: Option<f64>,
}

pub fn collapse_metrics(features: &Array2<f64>, labels: &[usize]) -> Result<CollapseMetrics> {
    let dec = covariance_decomposition(features, labels)?;
    let erank = effective_rank(&dec.total).ok();
    let vci = vci_from_decomposition(&dec).ok();
    Ok(CollapseMetrics {
        trace_within: dec.trace_within,
        trace_between: dec.trace_between,
        trace_total: dec.trace_total,
        effective_rank: erank,
        vci,
    })
}

/// The three quantities of the bound chain tying the deviation objective to
/// the supervised contrastive form, evaluated for one anchor:
///
///   A = max(0, (1/(Q-1)) sum_{j != r} S_j(x) - S_r(x))
///   B = log(exp(0) + exp((1/(Q-1)) sum_{j != r} S_j(x) - S_r(x)))
///   C = -(1/(|O_r|-1)) sum_{x_i in O_r \ x}
///         log[ exp(cos(x, x_i)) / sum_{x_k != x} exp(cos(x, x_k)) ]
///
/// where Q counts the classes present, S uses raw cosines (no temperature),
/// and S_r includes the anchor itself. A <= B <= C holds for cosine inputs:
/// max <= LogSumExp, dropping the anchor's own similarity (which is maximal)
/// from the mean, and two Jensen steps.
#[derive(Clone, Copy, Debug)]
pub struct ChainReport {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub a_le_b: bool,
    pub b_le_c: bool,
}

impl ChainReport {
    pub fn holds(&self) -> bool {
        self.a_le_b && self.b_le_c
    }
}

pub fn inequality_chain_check(
    features: &Array2<f64>,
    labels: &[usize],
    anchor: usize,
) -> Result<ChainReport> {
    let m = features.nrows();
    if labels.len() != m {
        return Err(Error::Shape("labels/features length mismatch".into()));
    }
    if anchor >= m {
        return Err(Error::Shape(format!("anchor {anchor} out of range for {m} samples")));
    }
    let r = labels[anchor];
    let own = labels.iter().filter(|&&y| y == r).count();
    if own < 2 {
        return Err(Error::Data("anchor's class needs at least 2 samples".into()));
    }
    let mut classes: Vec<usize> = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    let q = classes.len();
    if q < 2 {
        return Err(Error::Data("chain check needs at least 2 classes".into()));
    }
    let units = unit_rows(features);
    let cos: Vec<f64> = (0..m).map(|i| units.row(anchor).dot(&units.row(i))).collect();

    let mut mean_sim = vec![0.0; classes.len()];
    for (ci, &y) in classes.iter().enumerate() {
        let members: Vec<usize> = (0..m).filter(|&i| labels[i] == y).collect();
        mean_sim[ci] = members.iter().map(|&i| cos[i]).sum::<f64>() / members.len() as f64;
    }
    let r_pos = classes.iter().position(|&y| y == r).unwrap();
    let off_mean: f64 = mean_sim
        .iter()
        .enumerate()
        .filter(|&(ci, _)| ci != r_pos)
        .map(|(_, &s)| s)
        .sum::<f64>()
        / (q - 1) as f64;
    let t = off_mean - mean_sim[r_pos];
    let a = t.max(0.0);
    // log(1 + e^t), stably
    let b = if t > 0.0 { t + (-t).exp().ln_1p() } else { t.exp().ln_1p() };

    let denom: f64 = (0..m).filter(|&k| k != anchor).map(|k| cos[k].exp()).sum();
    let mut c = 0.0;
    for i in 0..m {
        if i == anchor || labels[i] != r {
            continue;
        }
        c += -(cos[i].exp() / denom).ln();
    }
    c /= (own - 1) as f64;

    Ok(ChainReport { a, b, c, a_le_b: a <= b + 1e-9, b_le_c: b <= c + 1e-9 })
}
