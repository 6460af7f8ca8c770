//! Morphological corruption of label fields.
//!
//! Both operations slide a square window (the structural element) over the
//! label grid, clipped at the borders, treating the last class as
//! background:
//!
//! * erosion keeps an object class only where the window is unanimous,
//!   shrinking objects toward background;
//! * dilation grows objects: a pixel takes the lowest object class present
//!   anywhere in its window, and stays background only when the window is
//!   all background.
//!
//! On binary fields the two are exact complements of each other, which the
//! tests exercise as the classic duality identity.

use crate::error::ConfigError;
use crate::fields::LabelField;

fn check_se(se: usize) -> Result<(), ConfigError> {
    if se == 0 || se % 2 == 0 {
        return Err(ConfigError::Parameter(format!(
            "structural element must be odd and positive, got {se}"
        )));
    }
    Ok(())
}

/// Window bounds for a pixel, clipped to the field.
#[inline]
fn window(center: usize, half: usize, limit: usize) -> (usize, usize) {
    (center.saturating_sub(half), (center + half).min(limit - 1))
}

/// Erodes object classes: a pixel keeps class `c` only if every pixel in
/// its `se x se` window (clipped at borders) has class `c`; otherwise it
/// becomes background. Background pixels stay background.
pub fn erode_labels(labels: &LabelField, se: usize) -> Result<LabelField, ConfigError> {
    check_se(se)?;
    let (h, w) = (labels.h(), labels.w());
    let bg = labels.background();
    let half = se / 2;
    let mut out = labels.clone();
    for y in 0..h {
        let (y0, y1) = window(y, half, h);
        for x in 0..w {
            let v = labels.at(y, x);
            if v == bg {
                continue;
            }
            let (x0, x1) = window(x, half, w);
            let unanimous = (y0..=y1).all(|wy| (x0..=x1).all(|wx| labels.at(wy, wx) == v));
            if !unanimous {
                out.set(y, x, bg);
            }
        }
    }
    Ok(out)
}

/// Dilates object classes: a pixel takes the lowest object class index
/// appearing in its `se x se` window (clipped at borders); it stays
/// background only if the window is all background.
pub fn dilate_labels(labels: &LabelField, se: usize) -> Result<LabelField, ConfigError> {
    check_se(se)?;
    let (h, w) = (labels.h(), labels.w());
    let half = se / 2;
    let mut out = labels.clone();
    for y in 0..h {
        let (y0, y1) = window(y, half, h);
        for x in 0..w {
            let (x0, x1) = window(x, half, w);
            // Background is the highest index, so the window minimum is the
            // lowest object class when one exists, else background.
            let mut lowest = labels.at(y, x);
            for wy in y0..=y1 {
                for wx in x0..=x1 {
                    let v = labels.at(wy, wx);
                    if v < lowest {
                        lowest = v;
                    }
                }
            }
            out.set(y, x, lowest);
        }
    }
    Ok(out)
}
