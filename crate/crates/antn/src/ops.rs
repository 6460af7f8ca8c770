//! Forward and backward kernels for the encoder-decoder networks.
//!
//! Everything here operates on [`Tensor4`] in NHWC layout, stride 1, with
//! same-size zero padding for the 3x3 convolutions. Backward functions take
//! the forward-pass *input* (recomputation is cheaper than caching masks)
//! and produce exact analytic gradients; the test suite checks every one
//! against central finite differences.
//!
//! Tie-breaking and padding conventions are part of the contract:
//!
//! * max pooling resolves ties to the first maximum in row-major window
//!   order, and backward routes the gradient to that same element;
//! * upsampling is nearest-neighbour, so its backward sums each 2x2 block;
//! * channel concatenation preserves source order.

use crate::error::ConfigError;
use crate::tensor::Tensor4;

/// Floor applied to probabilities inside logarithms so a confidently wrong
/// prediction cannot produce an infinite loss. Gradients are unaffected.
pub const PROB_FLOOR: f64 = 1e-12;

/// Parameters of one convolution layer.
///
/// Weights are stored as `[ky][kx][in][out]` in row-major order with the
/// output channel contiguous, which keeps the hot inner loop over output
/// channels a straight slice walk.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvWeights {
    pub k: usize,
    pub in_c: usize,
    pub out_c: usize,
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl ConvWeights {
    /// Zero-initialized layer. `k` must be 1 or 3.
    pub fn zeros(k: usize, in_c: usize, out_c: usize) -> Self {
        assert!(k == 1 || k == 3, "kernel size must be 1 or 3");
        ConvWeights { k, in_c, out_c, w: vec![0.0; k * k * in_c * out_c], b: vec![0.0; out_c] }
    }

    /// Number of parameters including biases.
    pub fn param_count(&self) -> usize {
        self.w.len() + self.b.len()
    }

    #[inline(always)]
    fn w_base(&self, ky: usize, kx: usize, in_ch: usize) -> usize {
        ((ky * self.k + kx) * self.in_c + in_ch) * self.out_c
    }
}

/// 2D convolution, stride 1, zero padding to preserve the spatial size.
pub fn conv2d_forward(x: &Tensor4, layer: &ConvWeights) -> Result<Tensor4, ConfigError> {
    if x.c() != layer.in_c {
        return Err(ConfigError::Shape(format!(
            "convolution expects {} input channels, got {}",
            layer.in_c,
            x.c()
        )));
    }
    let (n, h, w, _) = x.dims();
    let k = layer.k;
    let pad = (k / 2) as isize;
    let out_c = layer.out_c;
    let mut out = Tensor4::zeros(n, h, w, out_c);
    for bn in 0..n {
        for y in 0..h {
            for xx in 0..w {
                let acc_start = out.idx(bn, y, xx, 0);
                let acc = &mut out.data_mut()[acc_start..acc_start + out_c];
                acc.copy_from_slice(&layer.b);
                for ky in 0..k {
                    let iy = y as isize + ky as isize - pad;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = xx as isize + kx as isize - pad;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let px = x.pixel(bn, iy as usize, ix as usize);
                        for (in_ch, &xv) in px.iter().enumerate() {
                            if xv == 0.0 {
                                continue;
                            }
                            let wb = layer.w_base(ky, kx, in_ch);
                            let wrow = &layer.w[wb..wb + out_c];
                            for (a, &wv) in acc.iter_mut().zip(wrow) {
                                *a += xv * wv;
                            }
                        }
                    }
                }
            }
        }
    }
    out.debug_assert_finite("conv2d_forward");
    Ok(out)
}

/// Backward pass of [`conv2d_forward`].
///
/// Accumulates (adds) weight and bias gradients into `gw`/`gb` and returns
/// the gradient with respect to the input. `x` must be the forward input
/// and `gout` the upstream gradient with the forward output's shape.
pub fn conv2d_backward(
    x: &Tensor4,
    layer: &ConvWeights,
    gout: &Tensor4,
    gw: &mut [f64],
    gb: &mut [f64],
) -> Tensor4 {
    assert_eq!(x.c(), layer.in_c);
    assert_eq!(gout.c(), layer.out_c);
    assert_eq!((x.n(), x.h(), x.w()), (gout.n(), gout.h(), gout.w()));
    assert_eq!(gw.len(), layer.w.len());
    assert_eq!(gb.len(), layer.b.len());
    let (n, h, w, in_c) = x.dims();
    let k = layer.k;
    let pad = (k / 2) as isize;
    let out_c = layer.out_c;
    let mut gx = Tensor4::zeros(n, h, w, in_c);
    for bn in 0..n {
        for y in 0..h {
            for xx in 0..w {
                let go = gout.pixel(bn, y, xx);
                for (o, &g) in go.iter().enumerate() {
                    gb[o] += g;
                }
                for ky in 0..k {
                    let iy = y as isize + ky as isize - pad;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = xx as isize + kx as isize - pad;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let px = x.pixel(bn, iy as usize, ix as usize);
                        let gx_start = gx.idx(bn, iy as usize, ix as usize, 0);
                        let gpx = &mut gx.data_mut()[gx_start..gx_start + in_c];
                        for in_ch in 0..in_c {
                            let wb = layer.w_base(ky, kx, in_ch);
                            let wrow = &layer.w[wb..wb + out_c];
                            let gwrow = &mut gw[wb..wb + out_c];
                            let xv = px[in_ch];
                            let mut gxv = 0.0;
                            for o in 0..out_c {
                                let g = go[o];
                                gwrow[o] += xv * g;
                                gxv += wrow[o] * g;
                            }
                            gpx[in_ch] += gxv;
                        }
                    }
                }
            }
        }
    }
    gx.debug_assert_finite("conv2d_backward");
    gx
}

/// Element-wise `max(0, x)`.
pub fn relu_forward(x: &Tensor4) -> Tensor4 {
    let mut out = x.clone();
    for v in out.data_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    out
}

/// Backward pass of [`relu_forward`]; `pre` is the forward input. The
/// subgradient at exactly 0 is taken as 0.
pub fn relu_backward(pre: &Tensor4, gout: &Tensor4) -> Tensor4 {
    assert_eq!(pre.dims(), gout.dims());
    let mut gx = gout.clone();
    for (g, &p) in gx.data_mut().iter_mut().zip(pre.data()) {
        if p <= 0.0 {
            *g = 0.0;
        }
    }
    gx
}

/// 2x2 max pooling with stride 2. Spatial dimensions must be even.
pub fn maxpool2_forward(x: &Tensor4) -> Result<Tensor4, ConfigError> {
    let (n, h, w, c) = x.dims();
    if h % 2 != 0 || w % 2 != 0 {
        return Err(ConfigError::Shape(format!("max pooling needs even spatial dims, got {h}x{w}")));
    }
    let mut out = Tensor4::zeros(n, h / 2, w / 2, c);
    for bn in 0..n {
        for y in 0..h / 2 {
            for xx in 0..w / 2 {
                for ch in 0..c {
                    let mut best = x.at(bn, 2 * y, 2 * xx, ch);
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let v = x.at(bn, 2 * y + dy, 2 * xx + dx, ch);
                        if v > best {
                            best = v;
                        }
                    }
                    out.set(bn, y, xx, ch, best);
                }
            }
        }
    }
    Ok(out)
}

/// Backward pass of [`maxpool2_forward`]; routes each upstream gradient to
/// the first maximum of its 2x2 window in row-major order.
pub fn maxpool2_backward(x: &Tensor4, gout: &Tensor4) -> Tensor4 {
    let (n, h, w, c) = x.dims();
    assert_eq!(gout.dims(), (n, h / 2, w / 2, c));
    let mut gx = Tensor4::zeros(n, h, w, c);
    for bn in 0..n {
        for y in 0..h / 2 {
            for xx in 0..w / 2 {
                for ch in 0..c {
                    let mut best = (0usize, 0usize);
                    let mut best_v = x.at(bn, 2 * y, 2 * xx, ch);
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let v = x.at(bn, 2 * y + dy, 2 * xx + dx, ch);
                        if v > best_v {
                            best_v = v;
                            best = (dy, dx);
                        }
                    }
                    let i = gx.idx(bn, 2 * y + best.0, 2 * xx + best.1, ch);
                    gx.data_mut()[i] += gout.at(bn, y, xx, ch);
                }
            }
        }
    }
    gx
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample2_forward(x: &Tensor4) -> Tensor4 {
    let (n, h, w, c) = x.dims();
    let mut out = Tensor4::zeros(n, 2 * h, 2 * w, c);
    for bn in 0..n {
        for y in 0..2 * h {
            for xx in 0..2 * w {
                let src = x.pixel(bn, y / 2, xx / 2);
                let dst_start = out.idx(bn, y, xx, 0);
                out.data_mut()[dst_start..dst_start + c].copy_from_slice(src);
            }
        }
    }
    out
}

/// Backward pass of [`upsample2_forward`]: sums each 2x2 block.
pub fn upsample2_backward(gout: &Tensor4) -> Tensor4 {
    let (n, h2, w2, c) = gout.dims();
    assert!(h2 % 2 == 0 && w2 % 2 == 0);
    let mut gx = Tensor4::zeros(n, h2 / 2, w2 / 2, c);
    for bn in 0..n {
        for y in 0..h2 {
            for xx in 0..w2 {
                let src = gout.pixel(bn, y, xx);
                let dst_start = gx.idx(bn, y / 2, xx / 2, 0);
                let dst = &mut gx.data_mut()[dst_start..dst_start + c];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
    }
    gx
}

/// Stacks channels of `a` then `b`. Spatial and batch dims must match.
pub fn concat_channels(a: &Tensor4, b: &Tensor4) -> Result<Tensor4, ConfigError> {
    if (a.n(), a.h(), a.w()) != (b.n(), b.h(), b.w()) {
        return Err(ConfigError::Shape(format!(
            "cannot concatenate {:?} with {:?}",
            a.dims(),
            b.dims()
        )));
    }
    let (n, h, w, ca) = a.dims();
    let cb = b.c();
    let mut out = Tensor4::zeros(n, h, w, ca + cb);
    for bn in 0..n {
        for y in 0..h {
            for xx in 0..w {
                let dst_start = out.idx(bn, y, xx, 0);
                let dst = &mut out.data_mut()[dst_start..dst_start + ca + cb];
                dst[..ca].copy_from_slice(a.pixel(bn, y, xx));
                dst[ca..].copy_from_slice(b.pixel(bn, y, xx));
            }
        }
    }
    Ok(out)
}

/// Splits channels back into a leading block of `c_first` and the rest;
/// the exact inverse of [`concat_channels`].
pub fn split_channels(g: &Tensor4, c_first: usize) -> (Tensor4, Tensor4) {
    let (n, h, w, c) = g.dims();
    assert!(c_first < c);
    let mut a = Tensor4::zeros(n, h, w, c_first);
    let mut b = Tensor4::zeros(n, h, w, c - c_first);
    for bn in 0..n {
        for y in 0..h {
            for xx in 0..w {
                let src = g.pixel(bn, y, xx);
                let ai = a.idx(bn, y, xx, 0);
                a.data_mut()[ai..ai + c_first].copy_from_slice(&src[..c_first]);
                let bi = b.idx(bn, y, xx, 0);
                b.data_mut()[bi..bi + (c - c_first)].copy_from_slice(&src[c_first..]);
            }
        }
    }
    (a, b)
}

/// Softmax over each consecutive group of `group` channels, per pixel.
///
/// With `group == c` this is an ordinary per-pixel softmax; the transition
/// heads use `group == C` over `C*C` channels so every matrix row
/// normalizes independently. Uses the max-subtraction form, so it is safe
/// for large logits.
pub fn softmax_groups(logits: &Tensor4, group: usize) -> Result<Tensor4, ConfigError> {
    let (_, _, _, c) = logits.dims();
    if group == 0 || c % group != 0 {
        return Err(ConfigError::Shape(format!(
            "channel count {c} is not a multiple of softmax group size {group}"
        )));
    }
    let mut out = logits.clone();
    for row in out.data_mut().chunks_exact_mut(group) {
        let mut mx = row[0];
        for &v in row.iter() {
            if v > mx {
                mx = v;
            }
        }
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - mx).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out.debug_assert_finite("softmax_groups");
    Ok(out)
}

/// Element-wise logistic function.
pub fn sigmoid_forward(x: &Tensor4) -> Tensor4 {
    let mut out = x.clone();
    for v in out.data_mut() {
        *v = 1.0 / (1.0 + (-*v).exp());
    }
    out
}

/// Weighted cross-entropy over grouped softmax outputs.
///
/// `probs` must be the output of [`softmax_groups`] with the same `group`,
/// and `weights` carries a non-negative weight per channel. The loss is
///
/// ```text
/// -(scale / (n*h*w)) * sum over channels of  w * ln p
/// ```
///
/// and the returned gradient is taken with respect to the *logits* that
/// produced `probs`: for each group, `(sum of w) * p - w`, times the same
/// normalization. `scale` folds in any extra factor such as 1/batch.
pub fn weighted_cross_entropy(
    probs: &Tensor4,
    weights: &Tensor4,
    group: usize,
    scale: f64,
) -> Result<(f64, Tensor4), ConfigError> {
    if probs.dims() != weights.dims() {
        return Err(ConfigError::Shape(format!(
            "probabilities {:?} and weights {:?} differ",
            probs.dims(),
            weights.dims()
        )));
    }
    let (n, h, w, c) = probs.dims();
    if group == 0 || c % group != 0 {
        return Err(ConfigError::Shape(format!(
            "channel count {c} is not a multiple of group size {group}"
        )));
    }
    let norm = scale / (n * h * w) as f64;
    let mut loss = 0.0;
    let mut grad = Tensor4::zeros(n, h, w, c);
    {
        let gdata = grad.data_mut();
        for (gi, (prow, wrow)) in probs
            .data()
            .chunks_exact(group)
            .zip(weights.data().chunks_exact(group))
            .enumerate()
        {
            let wsum: f64 = wrow.iter().sum();
            if wsum == 0.0 {
                continue;
            }
            let grow = &mut gdata[gi * group..(gi + 1) * group];
            for ((g, &p), &wv) in grow.iter_mut().zip(prow).zip(wrow) {
                if wv != 0.0 {
                    loss -= wv * p.max(PROB_FLOOR).ln();
                }
                *g = norm * (wsum * p - wv);
            }
        }
    }
    grad.debug_assert_finite("weighted_cross_entropy");
    Ok((loss * norm, grad))
}

/// Weighted cross-entropy over independent sigmoid outputs.
///
/// `probs` must be the output of [`sigmoid_forward`]; each channel carries
/// its own Bernoulli "keep" probability. The loss is
///
/// ```text
/// -(scale / (n*h*w)) * sum over channels of  w * ln p
/// ```
///
/// and the gradient with respect to the logits is `w * (p - 1)` times the
/// same normalization (only the observed side of each Bernoulli enters the
/// objective, so there is no `ln (1 - p)` term).
pub fn sigmoid_weighted_ce(
    probs: &Tensor4,
    weights: &Tensor4,
    scale: f64,
) -> Result<(f64, Tensor4), ConfigError> {
    if probs.dims() != weights.dims() {
        return Err(ConfigError::Shape(format!(
            "probabilities {:?} and weights {:?} differ",
            probs.dims(),
            weights.dims()
        )));
    }
    let (n, h, w, c) = probs.dims();
    let norm = scale / (n * h * w) as f64;
    let mut loss = 0.0;
    let mut grad = Tensor4::zeros(n, h, w, c);
    for ((g, &p), &wv) in grad.data_mut().iter_mut().zip(probs.data()).zip(weights.data()) {
        if wv != 0.0 {
            loss -= wv * p.max(PROB_FLOOR).ln();
            *g = norm * wv * (p - 1.0);
        }
    }
    grad.debug_assert_finite("sigmoid_weighted_ce");
    Ok((loss * norm, grad))
}

/// Maximum relative error between an analytic gradient and a central
/// finite-difference estimate.
///
/// `loss` is evaluated on perturbed copies of `params` (the slice is
/// restored after every probe). The relative error for one coordinate is
/// `|fd - analytic| / max(|fd|, |analytic|, 1e-8)`.
pub fn finite_diff_check(
    params: &mut [f64],
    analytic: &[f64],
    step: f64,
    mut loss: impl FnMut(&[f64]) -> f64,
) -> f64 {
    assert_eq!(params.len(), analytic.len());
    let mut worst = 0.0f64;
    for i in 0..params.len() {
        let saved = params[i];
        params[i] = saved + step;
        let lp = loss(params);
        params[i] = saved - step;
        let lm = loss(params);
        params[i] = saved;
        let fd = (lp - lm) / (2.0 * step);
        let rel = (fd - analytic[i]).abs() / fd.abs().max(analytic[i].abs()).max(1e-8);
        if rel > worst {
            worst = rel;
        }
    }
    worst
}
