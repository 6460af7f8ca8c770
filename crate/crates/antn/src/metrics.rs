//! Evaluation quantities: accuracy, cross-entropy against a reference,
//! clean/noisy agreement ratios, empirical and model-average transition
//! matrices, and an unsupervised uniformity/disparity score.

use crate::color::rgb_to_cielab;
use crate::error::{ConfigError, DataError};
use crate::fields::{LabelField, ProbField};
use crate::net::MiniUNet;
use crate::ops::PROB_FLOOR;
use crate::tensor::Tensor4;

/// A `C x C` label transition summary; rows are true classes, columns
/// observed classes. Rows for classes absent from the data are flagged
/// undefined and excluded from comparisons.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionMatrix {
    classes: usize,
    data: Vec<f64>,
    defined: Vec<bool>,
}

impl TransitionMatrix {
    pub fn new(classes: usize, data: Vec<f64>, defined: Vec<bool>) -> Result<Self, DataError> {
        if classes == 0 || data.len() != classes * classes || defined.len() != classes {
            return Err(DataError::Shape(format!(
                "transition matrix needs {classes}x{classes} entries and {classes} row flags, \
                 got {} and {}",
                data.len(),
                defined.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(DataError::NonFinite("transition matrix".into()));
        }
        Ok(TransitionMatrix { classes, data, defined })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    #[inline(always)]
    pub fn at(&self, from: usize, to: usize) -> f64 {
        self.data[from * self.classes + to]
    }

    pub fn row(&self, from: usize) -> &[f64] {
        &self.data[from * self.classes..(from + 1) * self.classes]
    }

    pub fn row_defined(&self, from: usize) -> bool {
        self.defined[from]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// True when every defined row is a distribution within `tol`.
    pub fn rows_normalized(&self, tol: f64) -> bool {
        (0..self.classes).filter(|&r| self.defined[r]).all(|r| {
            let row = self.row(r);
            row.iter().all(|&p| p >= 0.0) && (row.iter().sum::<f64>() - 1.0).abs() <= tol
        })
    }

    /// Frobenius distance over rows defined in both matrices.
    pub fn frobenius_distance(&self, other: &TransitionMatrix) -> Result<f64, DataError> {
        if self.classes != other.classes {
            return Err(DataError::Shape(format!(
                "cannot compare a {0}x{0} matrix with a {1}x{1} one",
                self.classes, other.classes
            )));
        }
        let mut sum = 0.0;
        let mut any = false;
        for r in 0..self.classes {
            if !(self.defined[r] && other.defined[r]) {
                continue;
            }
            any = true;
            for c in 0..self.classes {
                sum += (self.at(r, c) - other.at(r, c)).powi(2);
            }
        }
        if !any {
            return Err(DataError::Degenerate("no row is defined in both matrices".into()));
        }
        Ok(sum.sqrt())
    }

    /// 8-bit grayscale rendering, `round(255 * p)` row-major; undefined
    /// rows render as 0.
    pub fn heatmap_bytes(&self) -> Vec<u8> {
        self.data
            .chunks_exact(self.classes)
            .zip(&self.defined)
            .flat_map(|(row, &ok)| {
                row.iter().map(move |&p| {
                    if ok {
                        (255.0 * p).round().clamp(0.0, 255.0) as u8
                    } else {
                        0
                    }
                })
            })
            .collect()
    }
}

fn check_same_grid(a: &LabelField, b: &LabelField) -> Result<(), DataError> {
    if a.h() != b.h() || a.w() != b.w() || a.num_classes() != b.num_classes() {
        return Err(DataError::Shape(format!(
            "label fields disagree: {}x{} ({} classes) vs {}x{} ({} classes)",
            a.h(),
            a.w(),
            a.num_classes(),
            b.h(),
            b.w(),
            b.num_classes()
        )));
    }
    if a.pixels() == 0 {
        return Err(DataError::Shape("label fields have no pixels".into()));
    }
    Ok(())
}

/// Fraction of pixels where the two fields agree.
pub fn pixel_accuracy(pred: &LabelField, truth: &LabelField) -> Result<f64, DataError> {
    check_same_grid(pred, truth)?;
    let agree = pred.data().iter().zip(truth.data()).filter(|(a, b)| a == b).count();
    Ok(agree as f64 / pred.pixels() as f64)
}

/// Mean negative log probability the prediction assigns to the reference
/// label, logs clamped at [`PROB_FLOOR`].
pub fn cross_entropy_curve(pred: &ProbField, reference: &LabelField) -> Result<f64, DataError> {
    if pred.h() != reference.h()
        || pred.w() != reference.w()
        || pred.num_classes() != reference.num_classes()
    {
        return Err(DataError::Shape(format!(
            "prediction {}x{} ({} classes) does not match reference {}x{} ({} classes)",
            pred.h(),
            pred.w(),
            pred.num_classes(),
            reference.h(),
            reference.w(),
            reference.num_classes()
        )));
    }
    if reference.pixels() == 0 {
        return Err(DataError::Shape("fields have no pixels".into()));
    }
    let mut sum = 0.0;
    for y in 0..pred.h() {
        for x in 0..pred.w() {
            sum -= pred.at(y, x, reference.at(y, x) as usize).max(PROB_FLOOR).ln();
        }
    }
    Ok(sum / reference.pixels() as f64)
}

/// Agreement ratio between the posterior's argmax labels and a noisy label
/// set: agreeing pixels over disagreeing pixels, `+inf` when nothing
/// disagrees. Argmax ties resolve to the lowest class.
pub fn clean_noisy_ratio(posterior: &ProbField, noisy: &LabelField) -> Result<f64, DataError> {
    let hard = posterior.argmax_labels();
    check_same_grid(&hard, noisy)?;
    let agree = hard.data().iter().zip(noisy.data()).filter(|(a, b)| a == b).count();
    let disagree = hard.pixels() - agree;
    if disagree == 0 {
        Ok(f64::INFINITY)
    } else {
        Ok(agree as f64 / disagree as f64)
    }
}

/// Empirical transition matrix: entry `(y, o)` is the fraction of pixels
/// with clean class `y` that carry observed class `o`. Rows for classes
/// never seen in `clean` are undefined.
pub fn expected_transition(
    clean: &LabelField,
    noisy: &LabelField,
) -> Result<TransitionMatrix, DataError> {
    check_same_grid(clean, noisy)?;
    let c = clean.num_classes();
    let mut counts = vec![0u64; c * c];
    let mut row_totals = vec![0u64; c];
    for (&y, &o) in clean.data().iter().zip(noisy.data()) {
        counts[y as usize * c + o as usize] += 1;
        row_totals[y as usize] += 1;
    }
    let mut data = vec![0.0; c * c];
    let mut defined = vec![false; c];
    for y in 0..c {
        if row_totals[y] == 0 {
            continue;
        }
        defined[y] = true;
        for o in 0..c {
            data[y * c + o] = counts[y * c + o] as f64 / row_totals[y] as f64;
        }
    }
    TransitionMatrix::new(c, data, defined)
}

/// Mean per-pixel transition matrix a network predicts across `images`,
/// rows renormalized to sum exactly 1. Uniform-remainder networks need the
/// observed label field for each image.
pub fn average_transition(
    net: &MiniUNet,
    images: &[Tensor4],
    observed: Option<&[LabelField]>,
) -> Result<TransitionMatrix, ConfigError> {
    if images.is_empty() {
        return Err(ConfigError::Parameter("need at least one image to average over".into()));
    }
    if let Some(obs) = observed {
        if obs.len() != images.len() {
            return Err(ConfigError::Inconsistent(format!(
                "{} label fields for {} images",
                obs.len(),
                images.len()
            )));
        }
    }
    let c = net.spec().num_classes;
    let mut sum = vec![0.0f64; c * c];
    let mut pixels = 0u64;
    for (i, img) in images.iter().enumerate() {
        let field = net.predict_transition(img, observed.map(|o| &o[i]))?;
        for y in 0..field.h() {
            for x in 0..field.w() {
                for from in 0..c {
                    for (to, &p) in field.row(y, x, from).iter().enumerate() {
                        sum[from * c + to] += p;
                    }
                }
            }
        }
        pixels += (field.h() * field.w()) as u64;
    }
    for v in sum.iter_mut() {
        *v /= pixels as f64;
    }
    // Averaged softmax rows sum to 1 only up to rounding; pin them exactly.
    for row in sum.chunks_exact_mut(c) {
        let total: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= total);
    }
    Ok(TransitionMatrix::new(c, sum, vec![true; c])
        .expect("averaged rows are finite and correctly sized"))
}

/// Within-class spread over between-class separation in CIELAB; lower
/// means the segmentation traces more uniform regions.
///
/// `U` weighs each class's mean distance-to-centroid by its pixel share;
/// `D` is the pair-count-weighted mean distance between class centroids.
/// Returns `+inf` when the centroids coincide (`D = 0`) and an error when
/// fewer than two classes are populated.
pub fn uniformity_disparity(image: &Tensor4, seg: &LabelField) -> Result<f64, DataError> {
    let (n, h, w, ch) = image.dims();
    if n != 1 || ch != 3 || h != seg.h() || w != seg.w() {
        return Err(DataError::Shape(format!(
            "image {:?} does not pair with a {}x{} segmentation",
            image.dims(),
            seg.h(),
            seg.w()
        )));
    }
    let lab = rgb_to_cielab(image)
        .map_err(|e| DataError::Shape(format!("CIELAB conversion failed: {e}")))?;
    let c = seg.num_classes();
    let mut counts = vec![0u64; c];
    let mut mean = vec![[0.0f64; 3]; c];
    for y in 0..h {
        for x in 0..w {
            let class = seg.at(y, x) as usize;
            counts[class] += 1;
            let px = lab.pixel(0, y, x);
            for k in 0..3 {
                mean[class][k] += px[k];
            }
        }
    }
    let populated: Vec<usize> = (0..c).filter(|&k| counts[k] > 0).collect();
    if populated.len() < 2 {
        return Err(DataError::Degenerate(format!(
            "uniformity/disparity needs at least 2 populated classes, found {}",
            populated.len()
        )));
    }
    for k in &populated {
        for v in mean[*k].iter_mut() {
            *v /= counts[*k] as f64;
        }
    }

    let total = (h * w) as f64;
    let mut spread = vec![0.0f64; c];
    for y in 0..h {
        for x in 0..w {
            let class = seg.at(y, x) as usize;
            let px = lab.pixel(0, y, x);
            let d2: f64 = (0..3).map(|k| (px[k] - mean[class][k]).powi(2)).sum();
            spread[class] += d2.sqrt();
        }
    }
    let uniformity: f64 = populated
        .iter()
        .map(|&k| (counts[k] as f64 / total) * (spread[k] / counts[k] as f64))
        .sum();

    let mut weighted = 0.0;
    let mut weight_total = 0.0;
    for (i, &a) in populated.iter().enumerate() {
        for &b in &populated[i + 1..] {
            let w_pair = counts[a] as f64 * counts[b] as f64;
            let d2: f64 = (0..3).map(|k| (mean[a][k] - mean[b][k]).powi(2)).sum();
            weighted += w_pair * d2.sqrt();
            weight_total += w_pair;
        }
    }
    let disparity = weighted / weight_total;
    if disparity == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(uniformity / disparity)
}
