//! Classical segmenters used as noisy label sources.
//!
//! Both segmenters cluster pixels without supervision and then name the
//! clusters by nearest [`ClassPrototypes`] color, so their output lands in
//! the same class space as the ground truth:
//!
//! * [`kmeans_segment`]: Lloyd's algorithm on RGB triples.
//! * [`otsu_segment`]: exhaustive multi-level threshold search on
//!   luminance, maximizing between-class variance.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{ConfigError, DataError};
use crate::fields::LabelField;
use crate::tensor::Tensor4;

/// Otsu histogram resolution; luminance is binned to `0..=255`.
pub const LUM_BINS: usize = 256;

/// Reference RGB color per class on the 0..255 scale.
///
/// Cluster outputs are mapped to classes by nearest prototype, so the
/// triples must be pairwise distinct.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassPrototypes {
    colors: Vec<[f64; 3]>,
}

impl ClassPrototypes {
    pub fn new(colors: Vec<[f64; 3]>) -> Result<Self, ConfigError> {
        if colors.len() < 2 {
            return Err(ConfigError::Parameter(format!(
                "need at least 2 class prototypes, got {}",
                colors.len()
            )));
        }
        for c in &colors {
            if c.iter().any(|&v| !(0.0..=255.0).contains(&v)) {
                return Err(ConfigError::Parameter(format!(
                    "prototype {c:?} outside the 0..255 color scale"
                )));
            }
        }
        for i in 0..colors.len() {
            for j in i + 1..colors.len() {
                if colors[i] == colors[j] {
                    return Err(ConfigError::Parameter(format!(
                        "prototypes {i} and {j} are identical ({:?})",
                        colors[i]
                    )));
                }
            }
        }
        Ok(ClassPrototypes { colors })
    }

    /// Red, green, blue discs plus a white background.
    pub fn default_four() -> Self {
        ClassPrototypes {
            colors: vec![
                [200.0, 60.0, 60.0],
                [60.0, 200.0, 60.0],
                [60.0, 60.0, 200.0],
                [200.0, 200.0, 200.0],
            ],
        }
    }

    pub fn len(&self) -> usize {
        self.colors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.colors.is_empty()
    }

    pub fn colors(&self) -> &[[f64; 3]] {
        &self.colors
    }

    /// Class whose prototype is nearest to `rgb` (unit scale); ties go to
    /// the lowest class index.
    pub fn nearest_unit(&self, rgb: [f64; 3]) -> usize {
        let mut best = 0usize;
        let mut best_d = f64::INFINITY;
        for (i, proto) in self.colors.iter().enumerate() {
            let d: f64 = (0..3).map(|c| (rgb[c] - proto[c] / 255.0).powi(2)).sum();
            if d < best_d {
                best_d = d;
                best = i;
            }
        }
        best
    }
}

fn unit_rgb_pixels(image: &Tensor4) -> Result<Vec<[f64; 3]>, DataError> {
    let (n, h, w, c) = image.dims();
    if n != 1 || c != 3 {
        return Err(DataError::Shape(format!(
            "segmenter expects a single RGB image (1 x H x W x 3), got {:?}",
            image.dims()
        )));
    }
    if h == 0 || w == 0 {
        return Err(DataError::Shape("image has no pixels".into()));
    }
    Ok(image.data().chunks_exact(3).map(|p| [p[0], p[1], p[2]]).collect())
}

/// One K-Means run: final centers, per-pixel cluster assignment, and the
/// within-cluster sum of squares recorded after each assignment step.
#[derive(Debug, Clone)]
pub struct KMeansFit {
    pub centers: Vec<[f64; 3]>,
    pub assignment: Vec<usize>,
    pub wcss: Vec<f64>,
}

const KMEANS_MAX_ITERS: usize = 50;
const KMEANS_MOVE_TOL: f64 = 1e-4;

fn dist2(a: [f64; 3], b: [f64; 3]) -> f64 {
    (0..3).map(|c| (a[c] - b[c]).powi(2)).sum()
}

/// Lloyd's algorithm with a distance-weighted seeded initialization.
///
/// Stops after [`KMEANS_MAX_ITERS`] iterations or when no center moves more
/// than [`KMEANS_MOVE_TOL`]. Assignment ties go to the lowest cluster
/// index; a cluster that loses all its points keeps its old center.
pub fn kmeans_fit(pixels: &[[f64; 3]], k: usize, seed: u64) -> Result<KMeansFit, ConfigError> {
    if k == 0 {
        return Err(ConfigError::Parameter("cluster count must be positive".into()));
    }
    if pixels.is_empty() {
        return Err(ConfigError::Parameter("cannot cluster zero pixels".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // Distance-weighted init: each new center is drawn with probability
    // proportional to squared distance from the nearest existing center.
    let mut centers: Vec<[f64; 3]> = Vec::with_capacity(k);
    centers.push(pixels[rng.random_range(0..pixels.len())]);
    let mut d2: Vec<f64> = pixels.iter().map(|&p| dist2(p, centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.random_range(0.0..total);
            let mut chosen = pixels.len() - 1;
            for (i, &w) in d2.iter().enumerate() {
                if r < w {
                    chosen = i;
                    break;
                }
                r -= w;
            }
            chosen
        } else {
            // All pixels coincide with a center; any pick is equivalent.
            rng.random_range(0..pixels.len())
        };
        let c = pixels[pick];
        centers.push(c);
        for (dist, &p) in d2.iter_mut().zip(pixels) {
            *dist = dist.min(dist2(p, c));
        }
    }

    let mut assignment = vec![0usize; pixels.len()];
    let mut wcss = Vec::new();
    for _ in 0..KMEANS_MAX_ITERS {
        let mut objective = 0.0;
        for (slot, &p) in assignment.iter_mut().zip(pixels) {
            let mut best = 0usize;
            let mut best_d = f64::INFINITY;
            for (i, &c) in centers.iter().enumerate() {
                let d = dist2(p, c);
                if d < best_d {
                    best_d = d;
                    best = i;
                }
            }
            *slot = best;
            objective += best_d;
        }
        wcss.push(objective);

        let mut sums = vec![[0.0f64; 3]; k];
        let mut counts = vec![0usize; k];
        for (&a, &p) in assignment.iter().zip(pixels) {
            counts[a] += 1;
            for c in 0..3 {
                sums[a][c] += p[c];
            }
        }
        let mut moved: f64 = 0.0;
        for i in 0..k {
            if counts[i] == 0 {
                continue;
            }
            let new = [
                sums[i][0] / counts[i] as f64,
                sums[i][1] / counts[i] as f64,
                sums[i][2] / counts[i] as f64,
            ];
            moved = moved.max(dist2(new, centers[i]).sqrt());
            centers[i] = new;
        }
        if moved < KMEANS_MOVE_TOL {
            break;
        }
    }
    Ok(KMeansFit { centers, assignment, wcss })
}

/// K-Means segmentation: clusters RGB pixels into `prototypes.len()`
/// groups, then labels each cluster with its nearest prototype's class.
pub fn kmeans_segment(
    image: &Tensor4,
    prototypes: &ClassPrototypes,
    seed: u64,
) -> Result<LabelField, DataError> {
    let pixels = unit_rgb_pixels(image)?;
    let fit = kmeans_fit(&pixels, prototypes.len(), seed)
        .expect("prototype count and pixel count already validated");
    let class_of: Vec<u8> =
        fit.centers.iter().map(|&c| prototypes.nearest_unit(c) as u8).collect();
    let (_, h, w, _) = image.dims();
    let mut out = LabelField::zeros(h, w, prototypes.len());
    for (i, &a) in fit.assignment.iter().enumerate() {
        out.set(i / w, i % w, class_of[a]);
    }
    Ok(out)
}

/// Luminance histogram over [`LUM_BINS`] bins; bin = `round(255 * (R+G+B)/3)`
/// clamped to the bin range.
pub fn luminance_histogram(image: &Tensor4) -> Result<[u64; LUM_BINS], DataError> {
    let pixels = unit_rgb_pixels(image)?;
    let mut hist = [0u64; LUM_BINS];
    for p in pixels {
        let lum = (p[0] + p[1] + p[2]) / 3.0;
        let bin = (255.0 * lum).round().clamp(0.0, 255.0) as usize;
        hist[bin] += 1;
    }
    Ok(hist)
}

/// Between-class variance surrogate for a threshold tuple: sum over
/// non-empty intervals of (interval intensity sum)^2 / (interval count).
///
/// Maximizing this is equivalent to maximizing between-class variance for
/// a fixed histogram, and every term is an exact small integer ratio, so
/// independent evaluations agree bitwise.
fn interval_score(pn: &[f64], ps: &[f64], thresholds: &[usize]) -> f64 {
    let mut score = 0.0;
    let mut lo = 0usize;
    for k in 0..=thresholds.len() {
        let hi = if k < thresholds.len() { thresholds[k] + 1 } else { LUM_BINS };
        let n = pn[hi] - pn[lo];
        if n > 0.0 {
            let s = ps[hi] - ps[lo];
            score += s * s / n;
        }
        lo = hi;
    }
    score
}

/// Exhaustive multi-level Otsu: the strictly increasing threshold tuple
/// `t_1 < .. < t_{C-1}` (each in `0..=254`) maximizing between-class
/// variance; interval `k` spans bins `(t_k, t_{k+1}]`. Ties pick the
/// lexicographically lowest tuple.
pub fn otsu_thresholds(hist: &[u64; LUM_BINS], classes: usize) -> Result<Vec<usize>, ConfigError> {
    if classes < 2 || classes > LUM_BINS {
        return Err(ConfigError::Parameter(format!(
            "threshold search needs 2..=256 classes, got {classes}"
        )));
    }
    if hist.iter().all(|&n| n == 0) {
        return Err(ConfigError::Parameter("histogram is empty".into()));
    }
    let mut pn = vec![0.0f64; LUM_BINS + 1];
    let mut ps = vec![0.0f64; LUM_BINS + 1];
    for i in 0..LUM_BINS {
        pn[i + 1] = pn[i] + hist[i] as f64;
        ps[i + 1] = ps[i] + (i as u64 * hist[i]) as f64;
    }

    let m = classes - 1;
    let mut current: Vec<usize> = (0..m).collect();
    let mut best = current.clone();
    let mut best_score = interval_score(&pn, &ps, &current);
    // Enumerate strictly increasing tuples in lexicographic order; only a
    // strict improvement replaces the incumbent, so ties keep the lowest.
    loop {
        // Advance to the next combination.
        let mut i = m;
        loop {
            if i == 0 {
                return Ok(best);
            }
            i -= 1;
            if current[i] < LUM_BINS - 2 - (m - 1 - i) {
                current[i] += 1;
                for j in i + 1..m {
                    current[j] = current[j - 1] + 1;
                }
                break;
            }
        }
        let score = interval_score(&pn, &ps, &current);
        if score > best_score {
            best_score = score;
            best = current.clone();
        }
    }
}

/// Otsu segmentation: thresholds the luminance histogram into
/// `prototypes.len()` intervals and labels each non-empty interval with
/// the class whose prototype is nearest to the interval's mean RGB.
///
/// Intervals that receive no pixels are merged into their neighbors (they
/// cover no pixels, so only a warning is emitted).
pub fn otsu_segment(image: &Tensor4, prototypes: &ClassPrototypes) -> Result<LabelField, DataError> {
    let pixels = unit_rgb_pixels(image)?;
    let hist = luminance_histogram(image)?;
    let thresholds = otsu_thresholds(&hist, prototypes.len())
        .expect("prototype count validated and image is non-empty");

    let interval_of = |bin: usize| thresholds.iter().take_while(|&&t| bin > t).count();
    let classes = prototypes.len();
    let mut sums = vec![[0.0f64; 3]; classes];
    let mut counts = vec![0u64; classes];
    for p in &pixels {
        let lum = (p[0] + p[1] + p[2]) / 3.0;
        let bin = (255.0 * lum).round().clamp(0.0, 255.0) as usize;
        let k = interval_of(bin);
        counts[k] += 1;
        for c in 0..3 {
            sums[k][c] += p[c];
        }
    }
    let class_of: Vec<Option<u8>> = (0..classes)
        .map(|k| {
            if counts[k] == 0 {
                log::warn!("threshold interval {k} of {classes} is empty; merging into neighbors");
                None
            } else {
                let mean = [
                    sums[k][0] / counts[k] as f64,
                    sums[k][1] / counts[k] as f64,
                    sums[k][2] / counts[k] as f64,
                ];
                Some(prototypes.nearest_unit(mean) as u8)
            }
        })
        .collect();

    let (_, h, w, _) = image.dims();
    let mut out = LabelField::zeros(h, w, classes);
    for (i, p) in pixels.iter().enumerate() {
        let lum = (p[0] + p[1] + p[2]) / 3.0;
        let bin = (255.0 * lum).round().clamp(0.0, 255.0) as usize;
        let class = class_of[interval_of(bin)].expect("pixels only land in non-empty intervals");
        out.set(i / w, i % w, class);
    }
    Ok(out)
}
