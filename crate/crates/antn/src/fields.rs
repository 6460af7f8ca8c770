//! Per-pixel label and probability fields.
//!
//! These are the domain-level views of network inputs and outputs:
//!
//! * [`LabelField`]: one class index per pixel, `0..num_classes`.
//! * [`ProbField`]: one distribution over classes per pixel.
//! * [`TransField`]: one `C x C` transition matrix per pixel, row `y`
//!   holding `Pr(observed label | clean label = y)`.
//!
//! Class count is capped at 256 so labels round-trip through 8-bit
//! grayscale images exactly.

use crate::error::DataError;
use crate::tensor::Tensor4;

/// Largest supported class count; label images are 8-bit.
pub const MAX_CLASSES: usize = 256;

/// A class index per pixel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelField {
    h: usize,
    w: usize,
    classes: usize,
    data: Vec<u8>,
}

impl LabelField {
    /// All-zero (class 0) field.
    pub fn zeros(h: usize, w: usize, classes: usize) -> Self {
        assert!(classes >= 1 && classes <= MAX_CLASSES);
        LabelField { h, w, classes, data: vec![0; h * w] }
    }

    /// Wraps a buffer of class indices, validating every value.
    pub fn from_vec(h: usize, w: usize, classes: usize, data: Vec<u8>) -> Result<Self, DataError> {
        if classes < 1 || classes > MAX_CLASSES {
            return Err(DataError::Shape(format!("class count {classes} not in 1..=256")));
        }
        if data.len() != h * w {
            return Err(DataError::Shape(format!(
                "label buffer of {} elements cannot view as {h}x{w}",
                data.len()
            )));
        }
        if let Some((i, &v)) = data.iter().enumerate().find(|(_, &v)| v as usize >= classes) {
            return Err(DataError::LabelRange {
                value: v as u32,
                num_classes: classes,
                at: Some(format!(" at pixel ({}, {})", i / w, i % w)),
            });
        }
        Ok(LabelField { h, w, classes, data })
    }

    pub fn h(&self) -> usize {
        self.h
    }

    pub fn w(&self) -> usize {
        self.w
    }

    pub fn num_classes(&self) -> usize {
        self.classes
    }

    /// The background class, by convention the last one.
    pub fn background(&self) -> u8 {
        (self.classes - 1) as u8
    }

    #[inline(always)]
    pub fn at(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.w + x]
    }

    #[inline(always)]
    pub fn set(&mut self, y: usize, x: usize, value: u8) {
        debug_assert!((value as usize) < self.classes);
        self.data[y * self.w + x] = value;
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn pixels(&self) -> usize {
        self.h * self.w
    }

    /// One-hot encoding, one unit row per pixel.
    pub fn one_hot(&self) -> ProbField {
        let c = self.classes;
        let mut data = vec![0.0; self.h * self.w * c];
        for (i, &v) in self.data.iter().enumerate() {
            data[i * c + v as usize] = 1.0;
        }
        ProbField { h: self.h, w: self.w, classes: c, data }
    }
}

/// A distribution over classes per pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbField {
    h: usize,
    w: usize,
    classes: usize,
    data: Vec<f64>,
}

impl ProbField {
    /// Reinterprets a `1 x H x W x C` tensor as a probability field.
    pub fn from_tensor(t: Tensor4) -> Result<Self, DataError> {
        if t.n() != 1 {
            return Err(DataError::Shape(format!(
                "probability field needs batch size 1, got {}",
                t.n()
            )));
        }
        let (_, h, w, c) = t.dims();
        Ok(ProbField { h, w, classes: c, data: t.into_vec() })
    }

    pub fn from_vec(h: usize, w: usize, classes: usize, data: Vec<f64>) -> Result<Self, DataError> {
        let t = Tensor4::from_vec(1, h, w, classes, data)?;
        Self::from_tensor(t)
    }

    pub fn to_tensor(&self) -> Tensor4 {
        Tensor4::from_vec(1, self.h, self.w, self.classes, self.data.clone())
            .expect("field buffer is a valid tensor")
    }

    pub fn h(&self) -> usize {
        self.h
    }

    pub fn w(&self) -> usize {
        self.w
    }

    pub fn num_classes(&self) -> usize {
        self.classes
    }

    #[inline(always)]
    pub fn at(&self, y: usize, x: usize, class: usize) -> f64 {
        self.data[(y * self.w + x) * self.classes + class]
    }

    /// The distribution at one pixel.
    #[inline(always)]
    pub fn row(&self, y: usize, x: usize) -> &[f64] {
        let i = (y * self.w + x) * self.classes;
        &self.data[i..i + self.classes]
    }

    #[inline(always)]
    pub fn row_mut(&mut self, y: usize, x: usize) -> &mut [f64] {
        let i = (y * self.w + x) * self.classes;
        let c = self.classes;
        &mut self.data[i..i + c]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// True when every pixel row sums to 1 within `tol` and all entries are
    /// non-negative.
    pub fn is_normalized(&self, tol: f64) -> bool {
        self.data.chunks_exact(self.classes).all(|row| {
            row.iter().all(|&p| p >= 0.0) && (row.iter().sum::<f64>() - 1.0).abs() <= tol
        })
    }

    /// Hard labels by per-pixel argmax; ties go to the lowest class index.
    pub fn argmax_labels(&self) -> LabelField {
        let mut out = LabelField::zeros(self.h, self.w, self.classes);
        for (i, row) in self.data.chunks_exact(self.classes).enumerate() {
            let mut best = 0usize;
            for (c, &p) in row.iter().enumerate() {
                if p > row[best] {
                    best = c;
                }
            }
            out.data[i] = best as u8;
        }
        out
    }
}

/// A `C x C` label transition matrix per pixel.
///
/// Entry `(from, to)` is `Pr(observed = to | clean = from)` at that pixel;
/// each `from` row sums to 1.
#[derive(Debug, Clone, PartialEq)]
pub struct TransField {
    h: usize,
    w: usize,
    classes: usize,
    data: Vec<f64>,
}

impl TransField {
    /// Reinterprets a `1 x H x W x C^2` tensor; channel `from * C + to`
    /// holds entry `(from, to)`.
    pub fn from_tensor(t: Tensor4, classes: usize) -> Result<Self, DataError> {
        if t.n() != 1 || t.c() != classes * classes {
            return Err(DataError::Shape(format!(
                "transition field needs 1 x H x W x {} tensor, got {:?}",
                classes * classes,
                t.dims()
            )));
        }
        let (_, h, w, _) = t.dims();
        Ok(TransField { h, w, classes, data: t.into_vec() })
    }

    pub fn h(&self) -> usize {
        self.h
    }

    pub fn w(&self) -> usize {
        self.w
    }

    pub fn num_classes(&self) -> usize {
        self.classes
    }

    #[inline(always)]
    pub fn at(&self, y: usize, x: usize, from: usize, to: usize) -> f64 {
        self.data[((y * self.w + x) * self.classes + from) * self.classes + to]
    }

    /// Row `from` of the matrix at one pixel.
    #[inline(always)]
    pub fn row(&self, y: usize, x: usize, from: usize) -> &[f64] {
        let i = ((y * self.w + x) * self.classes + from) * self.classes;
        &self.data[i..i + self.classes]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// True when every `from` row at every pixel is a distribution.
    pub fn rows_normalized(&self, tol: f64) -> bool {
        self.data.chunks_exact(self.classes).all(|row| {
            row.iter().all(|&p| p >= 0.0) && (row.iter().sum::<f64>() - 1.0).abs() <= tol
        })
    }

    /// For each pixel, the column of the transition matrix selected by the
    /// observed label: `out[y, x][c] = Pr(observed(y, x) | clean = c)`.
    pub fn observed_column(&self, observed: &LabelField) -> Result<ProbField, DataError> {
        if observed.h() != self.h || observed.w() != self.w {
            return Err(DataError::Shape(format!(
                "label field {}x{} does not match transition field {}x{}",
                observed.h(),
                observed.w(),
                self.h,
                self.w
            )));
        }
        if observed.num_classes() != self.classes {
            return Err(DataError::Shape(format!(
                "label field has {} classes, transition field {}",
                observed.num_classes(),
                self.classes
            )));
        }
        let c = self.classes;
        let mut data = vec![0.0; self.h * self.w * c];
        for y in 0..self.h {
            for x in 0..self.w {
                let to = observed.at(y, x) as usize;
                let out = &mut data[(y * self.w + x) * c..(y * self.w + x + 1) * c];
                for (from, slot) in out.iter_mut().enumerate() {
                    *slot = self.at(y, x, from, to);
                }
            }
        }
        ProbField::from_vec(self.h, self.w, c, data)
    }
}
