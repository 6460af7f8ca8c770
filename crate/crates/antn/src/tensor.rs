//! A minimal dense rank-4 tensor.
//!
//! Layout is NHWC in row-major order: the flat index of `(n, y, x, c)` is
//! `((n*h + y)*w + x)*channels + c`, so the channel axis is contiguous.
//! All storage is `f64`; every operation in [`crate::ops`] preserves
//! finiteness, and debug builds assert it at operation boundaries.

use crate::error::DataError;

/// Dense `f64` tensor with shape `(n, h, w, c)` in NHWC layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4 {
    n: usize,
    h: usize,
    w: usize,
    c: usize,
    data: Vec<f64>,
}

impl Tensor4 {
    /// All-zero tensor of the given shape.
    pub fn zeros(n: usize, h: usize, w: usize, c: usize) -> Self {
        Tensor4 { n, h, w, c, data: vec![0.0; n * h * w * c] }
    }

    /// Constant-filled tensor of the given shape.
    pub fn filled(n: usize, h: usize, w: usize, c: usize, value: f64) -> Self {
        Tensor4 { n, h, w, c, data: vec![value; n * h * w * c] }
    }

    /// Wraps an existing buffer. The length must match the shape and every
    /// element must be finite.
    pub fn from_vec(
        n: usize,
        h: usize,
        w: usize,
        c: usize,
        data: Vec<f64>,
    ) -> Result<Self, DataError> {
        if data.len() != n * h * w * c {
            return Err(DataError::Shape(format!(
                "buffer of {} elements cannot view as {}x{}x{}x{}",
                data.len(),
                n,
                h,
                w,
                c
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(DataError::NonFinite("tensor buffer".into()));
        }
        Ok(Tensor4 { n, h, w, c, data })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn h(&self) -> usize {
        self.h
    }

    pub fn w(&self) -> usize {
        self.w
    }

    pub fn c(&self) -> usize {
        self.c
    }

    /// Shape as `(n, h, w, c)`.
    pub fn dims(&self) -> (usize, usize, usize, usize) {
        (self.n, self.h, self.w, self.c)
    }

    /// Flat index of `(n, y, x, c)`.
    #[inline(always)]
    pub fn idx(&self, n: usize, y: usize, x: usize, c: usize) -> usize {
        ((n * self.h + y) * self.w + x) * self.c + c
    }

    #[inline(always)]
    pub fn at(&self, n: usize, y: usize, x: usize, c: usize) -> f64 {
        self.data[self.idx(n, y, x, c)]
    }

    #[inline(always)]
    pub fn set(&mut self, n: usize, y: usize, x: usize, c: usize, value: f64) {
        let i = self.idx(n, y, x, c);
        self.data[i] = value;
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    /// The contiguous channel slice at one pixel.
    #[inline(always)]
    pub fn pixel(&self, n: usize, y: usize, x: usize) -> &[f64] {
        let i = self.idx(n, y, x, 0);
        &self.data[i..i + self.c]
    }

    #[inline(always)]
    pub fn pixel_mut(&mut self, n: usize, y: usize, x: usize) -> &mut [f64] {
        let i = self.idx(n, y, x, 0);
        let c = self.c;
        &mut self.data[i..i + c]
    }

    pub fn is_all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Debug-build finiteness assertion, used at operation boundaries.
    #[track_caller]
    pub(crate) fn debug_assert_finite(&self, what: &str) {
        #[cfg(debug_assertions)]
        if !self.is_all_finite() {
            panic!("non-finite value produced by {what}");
        }
        #[cfg(not(debug_assertions))]
        let _ = what;
    }

    /// Element-wise `self += other`. Shapes must already match.
    pub(crate) fn add_assign(&mut self, other: &Tensor4) {
        debug_assert_eq!(self.dims(), other.dims());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_is_nhwc_row_major() {
        let mut t = Tensor4::zeros(2, 3, 4, 5);
        t.set(1, 2, 3, 4, 7.0);
        assert_eq!(t.idx(1, 2, 3, 4), ((1 * 3 + 2) * 4 + 3) * 5 + 4);
        assert_eq!(t.data()[t.idx(1, 2, 3, 4)], 7.0);
        assert_eq!(t.at(1, 2, 3, 4), 7.0);
    }

    #[test]
    fn channel_axis_is_contiguous() {
        let data: Vec<f64> = (0..24).map(|v| v as f64).collect();
        let t = Tensor4::from_vec(1, 2, 3, 4, data).unwrap();
        assert_eq!(t.pixel(0, 1, 2), &[20.0, 21.0, 22.0, 23.0]);
    }

    #[test]
    fn from_vec_rejects_bad_length_and_nan() {
        assert!(Tensor4::from_vec(1, 2, 2, 1, vec![0.0; 3]).is_err());
        assert!(Tensor4::from_vec(1, 1, 1, 2, vec![0.0, f64::NAN]).is_err());
    }
}
