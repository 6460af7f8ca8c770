//! Pixel-wise segmentation learned from multiple noisy label sets.
//!
//! The centrepiece is an EM scheme that jointly trains one clean-label
//! predictor and one label-noise transition predictor per annotation source.
//! The transition predictors are small image-conditioned networks, so the
//! noise model can vary from pixel to pixel. Around that core the crate
//! carries everything needed to run desk-scale experiments end to end:
//!
//! * [`tensor`], [`ops`], [`net`]: a small dense NHWC tensor, the forward
//!   and backward kernels, and the two-level encoder-decoder used for every
//!   predictor. All arithmetic is `f64`; gradients are analytic and checked
//!   against central finite differences in the test suite.
//! * [`synth`], [`morph`]: synthetic circle images and morphological label
//!   corruption for controlled experiments.
//! * [`classical`], [`color`]: K-Means and multi-level Otsu segmenters and
//!   Reinhard colour normalization, the classical sources of noisy labels.
//! * [`em`], [`train`]: E-step posteriors, marginal likelihoods, and the
//!   three-phase training procedure, plus plain and noise-tolerant baselines.
//! * [`metrics`]: pixel accuracy, confusion matrices, and the uniformity /
//!   disparity colour statistics.
//! * [`io`]: PPM/PGM codecs, a binary checkpoint format, and the flat
//!   `key = value` run configuration.

pub mod classical;
pub mod color;
pub mod em;
pub mod error;
pub mod fields;
pub mod io;
pub mod metrics;
pub mod morph;
pub mod net;
pub mod ops;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{ConfigError, DataError, TrainError};
pub use fields::{LabelField, ProbField, TransField};
pub use tensor::Tensor4;
