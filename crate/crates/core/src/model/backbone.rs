//! Stage-level forward/backward machinery: linear and 3x3/stride-2 conv
//! stages, each followed by group normalization (with affine) and ReLU.
//!
//! Backward passes are hand-derived; the contract is agreement with central
//! finite differences (see the gradcheck module and the acceptance suite).

use ndarray::{Array2, Array4, ArrayView2, ArrayView4};

pub(crate) const GN_EPS: f64 = 1e-8;

/// Everything the backward pass needs from one stage's forward evaluation.
pub(crate) enum StageCache {
    Dense {
        input: Array2<f64>,
        xhat: Array2<f64>,
        /// (B, groups) reciprocal standard deviations.
        inv_std: Array2<f64>,
        post: Array2<f64>,
    },
    Conv {
        input: Array4<f64>,
        xhat: Array4<f64>,
        inv_std: Array2<f64>,
        post: Array4<f64>,
    },
}

/// y = GN(x W^T) * scale + shift, then ReLU. Returns activations (B, out).
pub(crate) fn dense_stage_forward(
    x: &Array2<f64>,
    w: ArrayView2<'_, f64>,
    scale: &[f64],
    shift: &[f64],
    groups: usize,
) -> (Array2<f64>, StageCache) {
    let pre = x.dot(&w.t());
    let (b, width) = pre.dim();
    let cpg = width / groups;
    let mut xhat = Array2::<f64>::zeros((b, width));
    let mut inv_std = Array2::<f64>::zeros((b, groups));
    for bi in 0..b {
        for g in 0..groups {
            let cs = g * cpg..(g + 1) * cpg;
            let mean = cs.clone().map(|c| pre[[bi, c]]).sum::<f64>() / cpg as f64;
            let var = cs.clone().map(|c| (pre[[bi, c]] - mean).powi(2)).sum::<f64>() / cpg as f64;
            let istd = 1.0 / (var + GN_EPS).sqrt();
            inv_std[[bi, g]] = istd;
            for c in cs {
                xhat[[bi, c]] = (pre[[bi, c]] - mean) * istd;
            }
        }
    }
    let mut post = Array2::<f64>::zeros((b, width));
    for bi in 0..b {
        for c in 0..width {
            post[[bi, c]] = xhat[[bi, c]] * scale[c] + shift[c];
        }
    }
    let act = post.mapv(|v| v.max(0.0));
    let cache = StageCache::Dense { input: x.clone(), xhat, inv_std, post };
    (act, cache)
}

/// Backward through ReLU, the affine, group norm, and the linear map.
/// Returns (d_input, d_weight, d_scale, d_shift).
pub(crate) fn dense_stage_backward(
    cache: &StageCache,
    w: ArrayView2<'_, f64>,
    scale: &[f64],
    d_act: &Array2<f64>,
    groups: usize,
) -> (Array2<f64>, Array2<f64>, Vec<f64>, Vec<f64>) {
    let StageCache::Dense { input, xhat, inv_std, post } = cache else {
        panic!("dense backward on conv cache");
    };
    let (b, width) = post.dim();
    let cpg = width / groups;
    let mut d_scale = vec![0.0; width];
    let mut d_shift = vec![0.0; width];
    let mut d_xhat = Array2::<f64>::zeros((b, width));
    for bi in 0..b {
        for c in 0..width {
            let d_post = if post[[bi, c]] > 0.0 { d_act[[bi, c]] } else { 0.0 };
            d_scale[c] += d_post * xhat[[bi, c]];
            d_shift[c] += d_post;
            d_xhat[[bi, c]] = d_post * scale[c];
        }
    }
    let mut d_pre = Array2::<f64>::zeros((b, width));
    for bi in 0..b {
        for g in 0..groups {
            let cs = g * cpg..(g + 1) * cpg;
            let m1 = cs.clone().map(|c| d_xhat[[bi, c]]).sum::<f64>() / cpg as f64;
            let m2 =
                cs.clone().map(|c| d_xhat[[bi, c]] * xhat[[bi, c]]).sum::<f64>() / cpg as f64;
            let istd = inv_std[[bi, g]];
            for c in cs {
                d_pre[[bi, c]] = istd * (d_xhat[[bi, c]] - m1 - xhat[[bi, c]] * m2);
            }
        }
    }
    let d_w = d_pre.t().dot(input);
    let d_input = d_pre.dot(&w);
    (d_input, d_w, d_scale, d_shift)
}

/// Output spatial size of the 3x3, stride-2, pad-1 convolution.
pub(crate) fn conv_out(hw: usize) -> usize {
    (hw - 1) / 2 + 1
}

fn conv3x3s2(x: &Array4<f64>, w: ArrayView4<'_, f64>) -> Array4<f64> {
    let (b, ci, h, width) = x.dim();
    let co = w.shape()[0];
    debug_assert_eq!(w.shape()[1], ci);
    let (ho, wo) = (conv_out(h), conv_out(width));
    let mut out = Array4::<f64>::zeros((b, co, ho, wo));
    for bi in 0..b {
        for o in 0..co {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = 0.0;
                    for i in 0..ci {
                        for ky in 0..3usize {
                            for kx in 0..3usize {
                                let iy = (2 * oy + ky) as isize - 1;
                                let ix = (2 * ox + kx) as isize - 1;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < width
                                {
                                    acc += x[[bi, i, iy as usize, ix as usize]]
                                        * w[[o, i, ky, kx]];
                                }
                            }
                        }
                    }
                    out[[bi, o, oy, ox]] = acc;
                }
            }
        }
    }
    out
}

pub(crate) fn conv_stage_forward(
    x: &Array4<f64>,
    w: ArrayView4<'_, f64>,
    scale: &[f64],
    shift: &[f64],
    groups: usize,
) -> (Array4<f64>, StageCache) {
    let pre = conv3x3s2(x, w);
    let (b, c, h, wd) = pre.dim();
    let cpg = c / groups;
    let n = (cpg * h * wd) as f64;
    let mut xhat = Array4::<f64>::zeros((b, c, h, wd));
    let mut inv_std = Array2::<f64>::zeros((b, groups));
    for bi in 0..b {
        for g in 0..groups {
            let cs = g * cpg..(g + 1) * cpg;
            let mut mean = 0.0;
            for ci in cs.clone() {
                for y in 0..h {
                    for xx in 0..wd {
                        mean += pre[[bi, ci, y, xx]];
                    }
                }
            }
            mean /= n;
            let mut var = 0.0;
            for ci in cs.clone() {
                for y in 0..h {
                    for xx in 0..wd {
                        var += (pre[[bi, ci, y, xx]] - mean).powi(2);
                    }
                }
            }
            var /= n;
            let istd = 1.0 / (var + GN_EPS).sqrt();
            inv_std[[bi, g]] = istd;
            for ci in cs {
                for y in 0..h {
                    for xx in 0..wd {
                        xhat[[bi, ci, y, xx]] = (pre[[bi, ci, y, xx]] - mean) * istd;
                    }
                }
            }
        }
    }
    let mut post = Array4::<f64>::zeros((b, c, h, wd));
    for bi in 0..b {
        for ci in 0..c {
            for y in 0..h {
                for xx in 0..wd {
                    post[[bi, ci, y, xx]] = xhat[[bi, ci, y, xx]] * scale[ci] + shift[ci];
                }
            }
        }
    }
    let act = post.mapv(|v| v.max(0.0));
    let cache = StageCache::Conv { input: x.clone(), xhat, inv_std, post };
    (act, cache)
}

pub(crate) fn conv_stage_backward(
    cache: &StageCache,
    w: ArrayView4<'_, f64>,
    scale: &[f64],
    d_act: &Array4<f64>,
    groups: usize,
) -> (Array4<f64>, Array4<f64>, Vec<f64>, Vec<f64>) {
    let StageCache::Conv { input, xhat, inv_std, post } = cache else {
        panic!("conv backward on dense cache");
    };
    let (b, c, h, wd) = post.dim();
    let cpg = c / groups;
    let n = (cpg * h * wd) as f64;
    let mut d_scale = vec![0.0; c];
    let mut d_shift = vec![0.0; c];
    let mut d_xhat = Array4::<f64>::zeros((b, c, h, wd));
    for bi in 0..b {
        for ci in 0..c {
            for y in 0..h {
                for xx in 0..wd {
                    let d_post =
                        if post[[bi, ci, y, xx]] > 0.0 { d_act[[bi, ci, y, xx]] } else { 0.0 };
                    d_scale[ci] += d_post * xhat[[bi, ci, y, xx]];
                    d_shift[ci] += d_post;
                    d_xhat[[bi, ci, y, xx]] = d_post * scale[ci];
                }
            }
        }
    }
    let mut d_pre = Array4::<f64>::zeros((b, c, h, wd));
    for bi in 0..b {
        for g in 0..groups {
            let cs = g * cpg..(g + 1) * cpg;
            let mut m1 = 0.0;
            let mut m2 = 0.0;
            for ci in cs.clone() {
                for y in 0..h {
                    for xx in 0..wd {
                        m1 += d_xhat[[bi, ci, y, xx]];
                        m2 += d_xhat[[bi, ci, y, xx]] * xhat[[bi, ci, y, xx]];
                    }
                }
            }
            m1 /= n;
            m2 /= n;
            let istd = inv_std[[bi, g]];
            for ci in cs {
                for y in 0..h {
                    for xx in 0..wd {
                        d_pre[[bi, ci, y, xx]] =
                            istd * (d_xhat[[bi, ci, y, xx]] - m1 - xhat[[bi, ci, y, xx]] * m2);
                    }
                }
            }
        }
    }
    // weight and input gradients of the strided convolution
    let (_, ci_n, hi, wi) = input.dim();
    let (ho, wo) = (conv_out(hi), conv_out(wi));
    let mut d_w = Array4::<f64>::zeros((c, ci_n, 3, 3));
    let mut d_input = Array4::<f64>::zeros(input.dim());
    for bi in 0..b {
        for o in 0..c {
            for oy in 0..ho {
                for ox in 0..wo {
                    let g = d_pre[[bi, o, oy, ox]];
                    if g == 0.0 {
                        continue;
                    }
                    for i in 0..ci_n {
                        for ky in 0..3usize {
                            for kx in 0..3usize {
                                let iy = (2 * oy + ky) as isize - 1;
                                let ix = (2 * ox + kx) as isize - 1;
                                if iy >= 0 && ix >= 0 && (iy as usize) < hi && (ix as usize) < wi {
                                    let (iy, ix) = (iy as usize, ix as usize);
                                    d_w[[o, i, ky, kx]] += g * input[[bi, i, iy, ix]];
                                    d_input[[bi, i, iy, ix]] += g * w[[o, i, ky, kx]];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    (d_input, d_w, d_scale, d_shift)
}

/// Global average pooling: (B, C, H, W) -> (B, C).
pub(crate) fn mean_pool(act: &Array4<f64>) -> Array2<f64> {
    let (b, c, h, w) = act.dim();
    let n = (h * w) as f64;
    let mut out = Array2::<f64>::zeros((b, c));
    for bi in 0..b {
        for ci in 0..c {
            let mut acc = 0.0;
            for y in 0..h {
                for x in 0..w {
                    acc += act[[bi, ci, y, x]];
                }
            }
            out[[bi, ci]] = acc / n;
        }
    }
    out
}

/// Spread a pooled gradient back over the spatial map.
pub(crate) fn mean_pool_backward(d_tap: &Array2<f64>, h: usize, w: usize) -> Array4<f64> {
    let (b, c) = d_tap.dim();
    let n = (h * w) as f64;
    let mut out = Array4::<f64>::zeros((b, c, h, w));
    for bi in 0..b {
        for ci in 0..c {
            let g = d_tap[[bi, ci]] / n;
            for y in 0..h {
                for x in 0..w {
                    out[[bi, ci, y, x]] = g;
                }
            }
        }
    }
    out
}
