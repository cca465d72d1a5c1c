//! A small layered feature extractor with a tap point after every stage,
//! group normalization, and a linear classifier.
//!
//! Vector inputs run through dense stages, image inputs through 3x3
//! stride-2 convolutions; each stage is normalized, affinely rescaled, and
//! rectified, so every tap embedding is entrywise >= 0. Spatial maps are
//! reduced to vectors by global average pooling before they are used as
//! embeddings. Gradients are hand-derived; the contract is agreement with
//! central finite differences (see the gradcheck module).

mod backbone;
pub mod gradcheck;
pub mod params;

use ndarray::{Array2, Array4, Ix2, Ix4};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::sync::Arc;

use crate::datasets::{InputShape, Samples};
use crate::error::{Error, Result};
use crate::losses::{self, LossBreakdown, LossConfig, LossMode};

pub use params::{ModelParams, ParamLayout, SegmentSpec};

use backbone::{
    conv_stage_backward, conv_stage_forward, dense_stage_backward, dense_stage_forward,
    mean_pool, mean_pool_backward, StageCache,
};

/// How spatial maps are reduced to embedding vectors.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    MeanPool,
}

impl Default for Reduction {
    fn default() -> Self {
        Reduction::MeanPool
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub input: InputShape,
    /// Channel (image) or unit (vector) count per stage; the length is the
    /// number of tap levels L.
    pub stage_widths: Vec<usize>,
    /// Requested groups per normalization; each stage uses
    /// min(groups, width), which must divide the width.
    pub groups: usize,
    pub num_classes: usize,
    #[serde(default)]
    pub reduction: Reduction,
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stage_widths.is_empty() {
            return Err(Error::Config("stage_widths must have at least one stage".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config(format!(
                "num_classes must be >= 2, got {}",
                self.num_classes
            )));
        }
        if self.groups == 0 {
            return Err(Error::Config("groups must be >= 1".into()));
        }
        match self.input {
            InputShape::Vector { dim } if dim == 0 => {
                return Err(Error::Config("input dim must be >= 1".into()))
            }
            InputShape::Image { channels, height, width }
                if channels == 0 || height == 0 || width == 0 =>
            {
                return Err(Error::Config("image input dims must be >= 1".into()))
            }
            _ => {}
        }
        for (l, &w) in self.stage_widths.iter().enumerate() {
            if w == 0 {
                return Err(Error::Config(format!("stage {} has zero width", l + 1)));
            }
            let g = self.effective_groups(w);
            if w % g != 0 {
                return Err(Error::Config(format!(
                    "stage {} width {} is not divisible by {} groups",
                    l + 1,
                    w,
                    g
                )));
            }
        }
        Ok(())
    }

    pub fn num_levels(&self) -> usize {
        self.stage_widths.len()
    }

    pub fn embedding_dim(&self) -> usize {
        *self.stage_widths.last().expect("validated: at least one stage")
    }

    pub(crate) fn effective_groups(&self, width: usize) -> usize {
        self.groups.min(width)
    }

    /// The named-segment layout induced by this architecture.
    pub fn layout(&self) -> ParamLayout {
        let mut segs: Vec<(String, Vec<usize>)> = Vec::new();
        let mut prev = match self.input {
            InputShape::Vector { dim } => dim,
            InputShape::Image { channels, .. } => channels,
        };
        let conv = matches!(self.input, InputShape::Image { .. });
        for (l, &w) in self.stage_widths.iter().enumerate() {
            let shape = if conv { vec![w, prev, 3, 3] } else { vec![w, prev] };
            segs.push((format!("stage{}.weight", l + 1), shape));
            segs.push((format!("stage{}.gn_scale", l + 1), vec![w]));
            segs.push((format!("stage{}.gn_shift", l + 1), vec![w]));
            prev = w;
        }
        segs.push(("classifier.weight".into(), vec![self.num_classes, prev]));
        ParamLayout::new(segs)
    }
}

/// Per-level embeddings plus classifier outputs for one batch.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStack {
    /// e_l in R^{B x d_l} for l = 1..L; spatial maps already pooled.
    pub levels: Vec<Array2<f64>>,
    pub logits: Array2<f64>,
    /// softmax(logits), rows summing to 1.
    pub probs: Array2<f64>,
}

impl FeatureStack {
    /// 1-based tap accessor.
    pub fn level(&self, l: usize) -> Result<&Array2<f64>> {
        if l == 0 || l > self.levels.len() {
            return Err(Error::Config(format!(
                "tap level {l} out of range 1..={}",
                self.levels.len()
            )));
        }
        Ok(&self.levels[l - 1])
    }

    pub fn batch_size(&self) -> usize {
        self.logits.nrows()
    }
}

/// Deterministic fan-in-scaled initialization. Stage weights and the
/// classifier draw zero-mean normals scaled by 1/sqrt(fan_in); the
/// normalization affine starts near identity (scale 1, shift 0) with small
/// jitter so distinct seeds disagree everywhere.
pub fn init_model(arch: &ArchConfig, seed: u64) -> Result<ModelParams> {
    arch.validate()?;
    let layout = Arc::new(arch.layout());
    let mut params = ModelParams::zeros(Arc::clone(&layout));
    let mut rng = crate::rng::substream(seed, "init", &[]);
    let normal = StandardNormal;
    for seg in layout.segments() {
        let scale = if seg.name.ends_with(".weight") {
            let fan_in: usize = seg.shape[1..].iter().product();
            1.0 / (fan_in as f64).sqrt()
        } else {
            0.05
        };
        let bias = if seg.name.ends_with(".gn_scale") { 1.0 } else { 0.0 };
        let values = params.segment_mut(&seg.name)?;
        for v in values.iter_mut() {
            let z: f64 = normal.sample(&mut rng);
            *v = bias + scale * z;
        }
    }
    Ok(params)
}

fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut probs = logits.clone();
    for mut row in probs.rows_mut() {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|z| (z - m).exp());
        let s = row.sum();
        row.mapv_inplace(|e| e / s);
    }
    probs
}

fn check_batch(arch: &ArchConfig, params: &ModelParams, batch: &Samples) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::Shape("empty batch".into()));
    }
    if batch.input_shape() != arch.input {
        return Err(Error::Shape(format!(
            "batch shape {:?} does not match model input {:?}",
            batch.input_shape(),
            arch.input
        )));
    }
    if **params.layout() != arch.layout() {
        return Err(Error::LayoutMismatch(
            "parameter layout does not match architecture".into(),
        ));
    }
    if !batch.iter_finite() {
        return Err(Error::Numerical("batch contains non-finite values".into()));
    }
    Ok(())
}

fn view2<'a>(params: &'a ModelParams, name: &str) -> Result<ndarray::ArrayView2<'a, f64>> {
    params
        .segment_view(name)?
        .into_dimensionality::<Ix2>()
        .map_err(|e| Error::Shape(format!("segment {name}: {e}")))
}

fn view4<'a>(params: &'a ModelParams, name: &str) -> Result<ndarray::ArrayView4<'a, f64>> {
    params
        .segment_view(name)?
        .into_dimensionality::<Ix4>()
        .map_err(|e| Error::Shape(format!("segment {name}: {e}")))
}

fn forward_trace(
    arch: &ArchConfig,
    params: &ModelParams,
    batch: &Samples,
) -> Result<(FeatureStack, Vec<StageCache>)> {
    check_batch(arch, params, batch)?;
    let l_count = arch.num_levels();
    let mut levels = Vec::with_capacity(l_count);
    let mut caches = Vec::with_capacity(l_count);
    match batch {
        Samples::Vector(x0) => {
            let mut x = x0.clone();
            for l in 1..=l_count {
                let w = view2(params, &format!("stage{l}.weight"))?;
                let scale = params.segment(&format!("stage{l}.gn_scale"))?;
                let shift = params.segment(&format!("stage{l}.gn_shift"))?;
                let g = arch.effective_groups(arch.stage_widths[l - 1]);
                let (act, cache) = dense_stage_forward(&x, w, scale, shift, g);
                levels.push(act.clone());
                caches.push(cache);
                x = act;
            }
        }
        Samples::Image(x0) => {
            let mut x = x0.clone();
            for l in 1..=l_count {
                let w = view4(params, &format!("stage{l}.weight"))?;
                let scale = params.segment(&format!("stage{l}.gn_scale"))?;
                let shift = params.segment(&format!("stage{l}.gn_shift"))?;
                let g = arch.effective_groups(arch.stage_widths[l - 1]);
                let (act, cache) = conv_stage_forward(&x, w, scale, shift, g);
                let Reduction::MeanPool = arch.reduction;
                levels.push(mean_pool(&act));
                caches.push(cache);
                x = act;
            }
        }
    }
    let emb = levels.last().expect("at least one stage");
    let w_cls = view2(params, "classifier.weight")?;
    let logits = emb.dot(&w_cls.t());
    let probs = softmax_rows(&logits);
    Ok((FeatureStack { levels, logits, probs }, caches))
}

/// Run the extractor and classifier on one batch.
pub fn forward(arch: &ArchConfig, params: &ModelParams, batch: &Samples) -> Result<FeatureStack> {
    forward_trace(arch, params, batch).map(|(stack, _)| stack)
}

/// Distances from the piecewise boundaries inside the forward pass: the
/// smallest |post-affine pre-activation| (ReLU kink) and the smallest
/// normalization group variance. Used to keep finite-difference instances
/// away from non-differentiable points.
pub(crate) fn forward_kink_stats(
    arch: &ArchConfig,
    params: &ModelParams,
    batch: &Samples,
) -> Result<(FeatureStack, f64, f64)> {
    let (stack, caches) = forward_trace(arch, params, batch)?;
    let mut min_abs_post = f64::INFINITY;
    let mut min_group_var = f64::INFINITY;
    for cache in &caches {
        let (posts, inv_stds): (Vec<f64>, Vec<f64>) = match cache {
            StageCache::Dense { post, inv_std, .. } => {
                (post.iter().copied().collect(), inv_std.iter().copied().collect())
            }
            StageCache::Conv { post, inv_std, .. } => {
                (post.iter().copied().collect(), inv_std.iter().copied().collect())
            }
        };
        for v in posts {
            min_abs_post = min_abs_post.min(v.abs());
        }
        for istd in inv_stds {
            min_group_var = min_group_var.min(1.0 / (istd * istd) - backbone::GN_EPS);
        }
    }
    Ok((stack, min_abs_post, min_group_var))
}

/// Gradient of the composite local loss w.r.t. every parameter, plus the
/// loss breakdown it differentiates. `global_snapshot` anchors the proximal
/// term and is required exactly in ce+prox mode.
pub fn grad(
    arch: &ArchConfig,
    params: &ModelParams,
    batch: &Samples,
    labels: &[usize],
    global_snapshot: Option<&ModelParams>,
    cfg: &LossConfig,
) -> Result<(LossBreakdown, ModelParams)> {
    cfg.validate(arch.num_levels())?;
    if labels.len() != batch.len() {
        return Err(Error::Shape(format!(
            "{} labels for a batch of {}",
            labels.len(),
            batch.len()
        )));
    }
    if let Some(&y) = labels.iter().find(|&&y| y >= arch.num_classes) {
        return Err(Error::Data(format!(
            "label {y} out of range for {} classes",
            arch.num_classes
        )));
    }
    if !params.all_finite() {
        return Err(Error::Numerical("parameters contain non-finite values".into()));
    }
    let (stack, caches) = forward_trace(arch, params, batch)?;
    let b = stack.batch_size();
    let l_count = arch.num_levels();
    let mut g = ModelParams::zeros(Arc::clone(params.layout()));

    let ce = losses::cross_entropy(&stack.logits, labels);
    let d_logits = losses::ce_grad_wrt_logits(&stack.probs, labels);

    // per-level pull from the contrastive term (before the 1/|levels| mean)
    let mut d_tap: Vec<Array2<f64>> = arch
        .stage_widths
        .iter()
        .map(|&w| Array2::zeros((b, w)))
        .collect();
    let mut contrastive = 0.0;
    let mut zero_norm_pairs = 0;
    if cfg.mode.is_contrastive() {
        let penalty = match cfg.mode {
            LossMode::CeScl => None,
            LossMode::CeRcl => Some((cfg.lambda, cfg.beta)),
            _ => unreachable!(),
        };
        let weight = 1.0 / cfg.levels.len() as f64;
        for &l in &cfg.levels {
            let (v, g_emb, z) = losses::contrastive_value_grad(
                stack.level(l)?,
                labels,
                cfg.tau,
                penalty,
                cfg.hard_pair_fraction,
            );
            contrastive += v;
            zero_norm_pairs += z;
            d_tap[l - 1].scaled_add(weight, &g_emb);
        }
        contrastive /= cfg.levels.len() as f64;
    }

    // classifier: logits = emb . W^T
    let emb = &stack.levels[l_count - 1];
    let w_cls = view2(params, "classifier.weight")?;
    let d_w_cls = d_logits.t().dot(emb);
    g.segment_mut("classifier.weight")?
        .copy_from_slice(d_w_cls.as_standard_layout().as_slice().unwrap());
    d_tap[l_count - 1].scaled_add(1.0, &d_logits.dot(&w_cls));

    // walk the stages backwards, merging tap pulls with the downstream flow
    match batch {
        Samples::Vector(_) => {
            let mut d_from_above: Option<Array2<f64>> = None;
            for l in (1..=l_count).rev() {
                let mut d_act = d_tap[l - 1].clone();
                if let Some(up) = d_from_above.take() {
                    d_act.scaled_add(1.0, &up);
                }
                let w = view2(params, &format!("stage{l}.weight"))?;
                let scale = params.segment(&format!("stage{l}.gn_scale"))?;
                let gs = arch.effective_groups(arch.stage_widths[l - 1]);
                let (d_in, d_w, d_scale, d_shift) =
                    dense_stage_backward(&caches[l - 1], w, scale, &d_act, gs);
                g.segment_mut(&format!("stage{l}.weight"))?
                    .copy_from_slice(d_w.as_standard_layout().as_slice().unwrap());
                g.segment_mut(&format!("stage{l}.gn_scale"))?.copy_from_slice(&d_scale);
                g.segment_mut(&format!("stage{l}.gn_shift"))?.copy_from_slice(&d_shift);
                d_from_above = Some(d_in);
            }
        }
        Samples::Image(_) => {
            let mut d_from_above: Option<Array4<f64>> = None;
            for l in (1..=l_count).rev() {
                let (h, w_sp) = match &caches[l - 1] {
                    StageCache::Conv { post, .. } => (post.dim().2, post.dim().3),
                    StageCache::Dense { .. } => unreachable!("image path uses conv caches"),
                };
                let mut d_act = mean_pool_backward(&d_tap[l - 1], h, w_sp);
                if let Some(up) = d_from_above.take() {
                    d_act.scaled_add(1.0, &up);
                }
                let w = view4(params, &format!("stage{l}.weight"))?;
                let scale = params.segment(&format!("stage{l}.gn_scale"))?;
                let gs = arch.effective_groups(arch.stage_widths[l - 1]);
                let (d_in, d_w, d_scale, d_shift) =
                    conv_stage_backward(&caches[l - 1], w, scale, &d_act, gs);
                g.segment_mut(&format!("stage{l}.weight"))?
                    .copy_from_slice(d_w.as_standard_layout().as_slice().unwrap());
                g.segment_mut(&format!("stage{l}.gn_scale"))?.copy_from_slice(&d_scale);
                g.segment_mut(&format!("stage{l}.gn_shift"))?.copy_from_slice(&d_shift);
                d_from_above = Some(d_in);
            }
        }
    }

    // the proximal pull touches every segment, so it joins after the
    // backward walk has filled them all
    let mut prox = 0.0;
    if cfg.mode == LossMode::CeProx {
        let anchor = global_snapshot
            .ok_or_else(|| Error::Config("ce+prox mode needs the global snapshot".into()))?;
        prox = losses::prox_term(params, anchor, cfg.mu)?;
        let d = params.delta(anchor)?;
        g.axpy(cfg.mu, &d)?;
    }

    let breakdown = LossBreakdown {
        total: ce + contrastive + prox,
        ce,
        contrastive,
        prox,
        zero_norm_pairs,
    };
    if !breakdown.total.is_finite() || !g.all_finite() {
        return Err(Error::Numerical(format!(
            "non-finite loss or gradient (ce={}, contrastive={}, prox={})",
            ce, contrastive, prox
        )));
    }
    Ok((breakdown, g))
}
