//! Color spaces and statistics-matching normalization.
//!
//! Two color spaces serve two different jobs:
//!
//! * the Ruderman log-LMS opponent space (here "lab_ruderman", channels
//!   l/alpha/beta) carries the stain-normalization transfer: shift and
//!   scale each decorrelated channel of a source image to match a
//!   reference image's per-channel mean and standard deviation;
//! * CIELAB (D65, standard sRGB linearization) backs the
//!   uniformity/disparity quality metric in [`crate::metrics`].
//!
//! All converters map `1 x H x W x 3` tensors with RGB in `[0, 1]`.

use crate::error::ConfigError;
use crate::tensor::Tensor4;

/// LMS responses are floored here before the log so black pixels stay
/// finite. Pixels darker than the floor round-trip to the floor, not to
/// exact zero.
const LMS_FLOOR: f64 = 1e-6;

/// A source channel with standard deviation below this is treated as
/// constant: statistics matching shifts it without rescaling.
const SIGMA_FLOOR: f64 = 1e-12;

const RGB_TO_LMS: [[f64; 3]; 3] = [
    [0.3811, 0.5783, 0.0402],
    [0.1967, 0.7244, 0.0782],
    [0.0241, 0.1288, 0.8444],
];

fn check_rgb(t: &Tensor4) -> Result<(), ConfigError> {
    if t.n() != 1 || t.c() != 3 {
        return Err(ConfigError::Shape(format!(
            "expected a 1 x H x W x 3 RGB tensor, got {:?}",
            t.dims()
        )));
    }
    Ok(())
}

/// Exact inverse of a 3x3 matrix by the adjugate formula. Using a
/// numerical inverse (rather than published rounded coefficients) keeps
/// convert-there-and-back errors at machine precision.
fn invert3(m: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
    assert!(det.abs() > 1e-12, "matrix is singular");
    let inv_det = 1.0 / det;
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            // Cofactor of (j, i), transposed into (i, j).
            let r0 = (j + 1) % 3;
            let r1 = (j + 2) % 3;
            let c0 = (i + 1) % 3;
            let c1 = (i + 2) % 3;
            out[i][j] = (m[r0][c0] * m[r1][c1] - m[r0][c1] * m[r1][c0]) * inv_det;
        }
    }
    out
}

#[inline]
fn mat_mul_vec(m: &[[f64; 3]; 3], v: [f64; 3]) -> [f64; 3] {
    [
        m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
        m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
        m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
    ]
}

/// RGB to the Ruderman log-opponent space: LMS responses, log10, then the
/// orthogonal l/alpha/beta combination.
pub fn rgb_to_lab_ruderman(image: &Tensor4) -> Result<Tensor4, ConfigError> {
    check_rgb(image)?;
    let (_, h, w, _) = image.dims();
    let mut out = Tensor4::zeros(1, h, w, 3);
    let s3 = 3.0f64.sqrt();
    let s6 = 6.0f64.sqrt();
    let s2 = 2.0f64.sqrt();
    for y in 0..h {
        for x in 0..w {
            let px = image.pixel(0, y, x);
            let lms = mat_mul_vec(&RGB_TO_LMS, [px[0], px[1], px[2]]);
            let l = lms[0].max(LMS_FLOOR).log10();
            let m = lms[1].max(LMS_FLOOR).log10();
            let s = lms[2].max(LMS_FLOOR).log10();
            let o = out.pixel_mut(0, y, x);
            o[0] = (l + m + s) / s3;
            o[1] = (l + m - 2.0 * s) / s6;
            o[2] = (l - m) / s2;
        }
    }
    Ok(out)
}

/// Inverse of [`rgb_to_lab_ruderman`]. Output is not clamped; callers that
/// need displayable images clamp to `[0, 1]` themselves.
pub fn lab_ruderman_to_rgb(lab: &Tensor4) -> Result<Tensor4, ConfigError> {
    check_rgb(lab)?;
    let (_, h, w, _) = lab.dims();
    let lms_to_rgb = invert3(&RGB_TO_LMS);
    let mut out = Tensor4::zeros(1, h, w, 3);
    let s3 = 3.0f64.sqrt();
    let s6 = 6.0f64.sqrt();
    let s2 = 2.0f64.sqrt();
    for y in 0..h {
        for x in 0..w {
            let px = lab.pixel(0, y, x);
            let (l, a, b) = (px[0], px[1], px[2]);
            // The forward combination matrix has orthogonal rows, so its
            // inverse is the transpose with reciprocal row norms.
            let log_l = l / s3 + a / s6 + b / s2;
            let log_m = l / s3 + a / s6 - b / s2;
            let log_s = l / s3 - 2.0 * a / s6;
            let lms = [10f64.powf(log_l), 10f64.powf(log_m), 10f64.powf(log_s)];
            let rgb = mat_mul_vec(&lms_to_rgb, lms);
            out.pixel_mut(0, y, x).copy_from_slice(&rgb);
        }
    }
    Ok(out)
}

/// Per-channel mean and (population) standard deviation.
pub fn channel_stats(t: &Tensor4) -> ([f64; 3], [f64; 3]) {
    let (_, h, w, _) = t.dims();
    let n = (h * w) as f64;
    let mut mean = [0.0; 3];
    for px in t.data().chunks_exact(3) {
        for c in 0..3 {
            mean[c] += px[c];
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = [0.0; 3];
    for px in t.data().chunks_exact(3) {
        for c in 0..3 {
            let d = px[c] - mean[c];
            var[c] += d * d;
        }
    }
    let std = [(var[0] / n).sqrt(), (var[1] / n).sqrt(), (var[2] / n).sqrt()];
    (mean, std)
}

/// Shifts and scales every channel so its statistics become
/// `(ref_mean, ref_std)`: `out = (x - mean) * ref_std / std + ref_mean`.
/// A channel with (near-)zero spread is shifted without rescaling.
pub fn match_statistics(
    t: &Tensor4,
    ref_mean: [f64; 3],
    ref_std: [f64; 3],
) -> Tensor4 {
    let (src_mean, src_std) = channel_stats(t);
    let mut scale = [1.0; 3];
    for c in 0..3 {
        if src_std[c] > SIGMA_FLOOR {
            scale[c] = ref_std[c] / src_std[c];
        }
    }
    let mut out = t.clone();
    for px in out.data_mut().chunks_exact_mut(3) {
        for c in 0..3 {
            px[c] = (px[c] - src_mean[c]) * scale[c] + ref_mean[c];
        }
    }
    out
}

/// Full statistics-matching normalization: source and reference go to the
/// Ruderman space, the source's channel statistics are mapped onto the
/// reference's, and the result comes back to RGB clamped to `[0, 1]`.
pub fn reinhard_normalize(source: &Tensor4, reference: &Tensor4) -> Result<Tensor4, ConfigError> {
    let src_lab = rgb_to_lab_ruderman(source)?;
    let ref_lab = rgb_to_lab_ruderman(reference)?;
    let (ref_mean, ref_std) = channel_stats(&ref_lab);
    let matched = match_statistics(&src_lab, ref_mean, ref_std);
    let mut rgb = lab_ruderman_to_rgb(&matched)?;
    for v in rgb.data_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    Ok(rgb)
}

/// sRGB component to linear light.
#[inline]
fn srgb_linearize(c: f64) -> f64 {
    if c <= 0.04045 {
        c / 12.92
    } else {
        ((c + 0.055) / 1.055).powf(2.4)
    }
}

/// D65 reference white in XYZ.
const D65: [f64; 3] = [0.95047, 1.0, 1.08883];

const LINEAR_RGB_TO_XYZ: [[f64; 3]; 3] = [
    [0.4124564, 0.3575761, 0.1804375],
    [0.2126729, 0.7151522, 0.0721750],
    [0.0193339, 0.1191920, 0.9503041],
];

/// RGB in `[0, 1]` to CIELAB (D65 white point, sRGB linearization).
pub fn rgb_to_cielab(image: &Tensor4) -> Result<Tensor4, ConfigError> {
    check_rgb(image)?;
    let (_, h, w, _) = image.dims();
    let mut out = Tensor4::zeros(1, h, w, 3);
    let delta = 6.0 / 29.0f64;
    let d3 = delta * delta * delta;
    let f = |t: f64| {
        if t > d3 {
            t.cbrt()
        } else {
            t / (3.0 * delta * delta) + 4.0 / 29.0
        }
    };
    for y in 0..h {
        for x in 0..w {
            let px = image.pixel(0, y, x);
            let lin = [srgb_linearize(px[0]), srgb_linearize(px[1]), srgb_linearize(px[2])];
            let xyz = mat_mul_vec(&LINEAR_RGB_TO_XYZ, lin);
            let fx = f(xyz[0] / D65[0]);
            let fy = f(xyz[1] / D65[1]);
            let fz = f(xyz[2] / D65[2]);
            let o = out.pixel_mut(0, y, x);
            o[0] = 116.0 * fy - 16.0;
            o[1] = 500.0 * (fx - fy);
            o[2] = 200.0 * (fy - fz);
        }
    }
    Ok(out)
}
