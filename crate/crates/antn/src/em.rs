//! E-step posteriors and marginal log-likelihoods.
//!
//! The model factorizes per pixel as
//!
//! ```text
//! Pr(yhat1, yhat2 | X) = sum over y of  T1[y, yhat1] * T2[y, yhat2] * Pr(y | X)
//! ```
//!
//! Given the clean-label field `Pr(y|X)` and, for each noisy source, the
//! transition column selected by the observed label (see
//! [`crate::fields::TransField::observed_column`]), the E-step computes the
//! posterior over the latent clean label at every pixel. Single-source and
//! joint posteriors differ only in how many columns multiply the prior.
//!
//! A pixel whose posterior denominator underflows to (effectively) zero
//! falls back to the clean prior; the count of such pixels is surfaced so
//! training can report it.

use crate::error::DataError;
use crate::fields::ProbField;
use crate::ops::PROB_FLOOR;

/// Denominators at or below this are treated as total underflow.
const DENOM_FLOOR: f64 = f64::MIN_POSITIVE;

/// An E-step result: per-pixel posterior plus the number of pixels that
/// fell back to the prior because every product term underflowed.
#[derive(Debug, Clone)]
pub struct EStepOutcome {
    pub posterior: ProbField,
    pub fallback_pixels: usize,
}

/// Which marginal log-likelihood to evaluate: source 1, source 2, or the
/// joint over both.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Likelihood {
    L1,
    L2,
    L3,
}

fn check_shapes(name: &str, a: &ProbField, b: &ProbField) -> Result<(), DataError> {
    if a.h() != b.h() || a.w() != b.w() || a.num_classes() != b.num_classes() {
        return Err(DataError::Shape(format!(
            "{name}: {}x{}x{} vs {}x{}x{}",
            a.h(),
            a.w(),
            a.num_classes(),
            b.h(),
            b.w(),
            b.num_classes()
        )));
    }
    Ok(())
}

fn posterior_over(
    clean: &ProbField,
    term: impl Fn(usize, usize) -> f64,
) -> (ProbField, usize) {
    let (h, w, c) = (clean.h(), clean.w(), clean.num_classes());
    let mut data = vec![0.0; h * w * c];
    let mut fallbacks = 0usize;
    for y in 0..h {
        for x in 0..w {
            let prior = clean.row(y, x);
            let out = &mut data[(y * w + x) * c..(y * w + x + 1) * c];
            let mut denom = 0.0;
            for (cl, slot) in out.iter_mut().enumerate() {
                *slot = prior[cl] * term(y * w + x, cl);
                denom += *slot;
            }
            if denom <= DENOM_FLOOR {
                out.copy_from_slice(prior);
                fallbacks += 1;
            } else {
                out.iter_mut().for_each(|v| *v /= denom);
            }
        }
    }
    let posterior = ProbField::from_vec(h, w, c, data).expect("posterior buffer is well formed");
    (posterior, fallbacks)
}

/// Posterior over the clean label given one noisy source:
/// `q(y) = col(y) * clean(y) / sum over y'`.
pub fn e_step_single(clean: &ProbField, col: &ProbField) -> Result<EStepOutcome, DataError> {
    check_shapes("e_step_single", clean, col)?;
    let cd = col.data();
    let c = clean.num_classes();
    let (posterior, fallback_pixels) = posterior_over(clean, |pix, cl| cd[pix * c + cl]);
    Ok(EStepOutcome { posterior, fallback_pixels })
}

/// Posterior over the clean label given both noisy sources:
/// `q(y) = col1(y) * col2(y) * clean(y) / sum over y'`.
pub fn e_step_joint(
    clean: &ProbField,
    col1: &ProbField,
    col2: &ProbField,
) -> Result<EStepOutcome, DataError> {
    check_shapes("e_step_joint", clean, col1)?;
    check_shapes("e_step_joint", clean, col2)?;
    let c1 = col1.data();
    let c2 = col2.data();
    let c = clean.num_classes();
    let (posterior, fallback_pixels) =
        posterior_over(clean, |pix, cl| c1[pix * c + cl] * c2[pix * c + cl]);
    Ok(EStepOutcome { posterior, fallback_pixels })
}

/// Mean per-pixel marginal log-likelihood of the observed labels.
///
/// `L1`/`L2` use one column: `(1/N) * sum over n of ln sum over y of
/// col_s(y) * clean(y)`; `L3` uses the product of both columns. Logs are
/// clamped at [`PROB_FLOOR`].
pub fn marginal_log_likelihood(
    clean: &ProbField,
    col1: &ProbField,
    col2: &ProbField,
    which: Likelihood,
) -> Result<f64, DataError> {
    check_shapes("marginal_log_likelihood", clean, col1)?;
    check_shapes("marginal_log_likelihood", clean, col2)?;
    let (h, w, c) = (clean.h(), clean.w(), clean.num_classes());
    let (d1, d2) = (col1.data(), col2.data());
    let mut total = 0.0;
    for pix in 0..h * w {
        let prior = &clean.data()[pix * c..(pix + 1) * c];
        let mut dot = 0.0;
        for cl in 0..c {
            let t = match which {
                Likelihood::L1 => d1[pix * c + cl],
                Likelihood::L2 => d2[pix * c + cl],
                Likelihood::L3 => d1[pix * c + cl] * d2[pix * c + cl],
            };
            dot += prior[cl] * t;
        }
        total += dot.max(PROB_FLOOR).ln();
    }
    Ok(total / (h * w) as f64)
}
