//! Training loops: three-phase EM over a clean predictor and two
//! transition predictors, plus the two baselines (direct training on noisy
//! labels, and a clean predictor composed with one global transition
//! matrix diffused by weight decay).
//!
//! All loops are deterministic given the config: image order is fixed,
//! batches are consecutive index ranges, and randomness enters only
//! through network initialization. Posteriors are recomputed per batch
//! with the parameters current at the start of that batch.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use rayon::prelude::*;

use crate::em::{e_step_joint, e_step_single, marginal_log_likelihood, Likelihood};
use crate::error::{ConfigError, DataError, TrainError};
use crate::fields::{LabelField, ProbField};
use crate::metrics::cross_entropy_curve;
use crate::net::{HeadKind, MiniUNet, MiniUNetSpec};
use crate::ops::{
    sigmoid_forward, sigmoid_weighted_ce, softmax_groups, weighted_cross_entropy, PROB_FLOOR,
};
use crate::tensor::Tensor4;

/// How a transition network's head is read out into per-pixel matrices.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReadoutMode {
    /// `C*C` logits per pixel, each matrix row its own softmax.
    RowSoftmax,
    /// `C` sigmoid "keep" probabilities per pixel; each row places its
    /// mass on the observed label's column and spreads the remainder.
    UniformRemainder,
}

impl ReadoutMode {
    pub fn head(self) -> HeadKind {
        match self {
            ReadoutMode::RowSoftmax => HeadKind::TransitionRowSoftmax,
            ReadoutMode::UniformRemainder => HeadKind::TransitionUniformRemainder,
        }
    }
}

impl fmt::Display for ReadoutMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ReadoutMode::RowSoftmax => "row-softmax",
            ReadoutMode::UniformRemainder => "uniform-remainder",
        })
    }
}

impl FromStr for ReadoutMode {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, ConfigError> {
        match s {
            "row-softmax" => Ok(ReadoutMode::RowSoftmax),
            "uniform-remainder" => Ok(ReadoutMode::UniformRemainder),
            other => Err(ConfigError::Parameter(format!(
                "unknown readout mode {other:?}; expected row-softmax or uniform-remainder"
            ))),
        }
    }
}

/// Schedule and model hyperparameters for every trainer in this module.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub num_classes: usize,
    pub base_filters: usize,
    /// Phase A length: clean net alone against the label mixture.
    pub epochs_init_clean: usize,
    /// Phase B length: transition nets alone, clean net frozen.
    pub epochs_transition: usize,
    /// Phase C length: alternating group updates.
    pub epochs_alternate: usize,
    /// Epochs per group before Phase C switches to the other group.
    pub alternate_interval: usize,
    /// Tail of the epoch budget the global-matrix baseline spends jointly
    /// diffusing its transition matrix.
    pub epochs_ntn_diffuse: usize,
    pub lr_main: f64,
    pub lr_final: f64,
    /// Learning rate for the transition networks; `None` follows `lr_main`.
    /// Their rate decides which EM fixed point wins: too fast and the rows
    /// snap to the identity (the posterior collapses onto the observed
    /// labels), too slow and they stall near uniform, so it wants tuning
    /// separately from the clean net's rate.
    pub lr_trans: Option<f64>,
    /// Global epoch at which the learning rate drops to `lr_final`.
    pub lr_drop_epoch: usize,
    /// Images per gradient step.
    pub batch_size: usize,
    pub seed: u64,
    pub readout_mode: ReadoutMode,
    pub ntn_weight_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            num_classes: 4,
            base_filters: 8,
            epochs_init_clean: 100,
            epochs_transition: 200,
            epochs_alternate: 200,
            alternate_interval: 10,
            epochs_ntn_diffuse: 150,
            lr_main: 1e-4,
            lr_final: 1e-5,
            lr_trans: None,
            lr_drop_epoch: 450,
            batch_size: 1,
            seed: 0,
            readout_mode: ReadoutMode::RowSoftmax,
            ntn_weight_decay: 1e-3,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.num_classes < 2 {
            return Err(ConfigError::Parameter(format!(
                "need at least 2 classes, got {}",
                self.num_classes
            )));
        }
        if self.base_filters < 2 {
            return Err(ConfigError::Parameter(format!(
                "need at least 2 base filters, got {}",
                self.base_filters
            )));
        }
        if !(self.lr_main > 0.0 && self.lr_main.is_finite())
            || !(self.lr_final > 0.0 && self.lr_final.is_finite())
        {
            return Err(ConfigError::Parameter(format!(
                "learning rates must be positive and finite, got {} and {}",
                self.lr_main, self.lr_final
            )));
        }
        if let Some(t) = self.lr_trans {
            if !(t > 0.0 && t.is_finite()) {
                return Err(ConfigError::Parameter(format!(
                    "lr_trans must be positive and finite, got {t}"
                )));
            }
        }
        if self.alternate_interval == 0 {
            return Err(ConfigError::Parameter("alternate_interval must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(ConfigError::Parameter("batch_size must be at least 1".into()));
        }
        if !(self.ntn_weight_decay >= 0.0 && self.ntn_weight_decay.is_finite()) {
            return Err(ConfigError::Parameter(format!(
                "ntn_weight_decay must be non-negative, got {}",
                self.ntn_weight_decay
            )));
        }
        Ok(())
    }

    /// Total epoch budget; the baselines train for this many epochs so
    /// every method sees the same number of passes.
    pub fn total_epochs(&self) -> usize {
        self.epochs_init_clean + self.epochs_transition + self.epochs_alternate
    }

    /// Learning rate for a 0-based global epoch index.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        if epoch < self.lr_drop_epoch {
            self.lr_main
        } else {
            self.lr_final
        }
    }

    /// Transition-net learning rate for a 0-based global epoch index. The
    /// drop at `lr_drop_epoch` scales it by the same `lr_final / lr_main`
    /// factor as the main rate.
    pub fn trans_lr_at(&self, epoch: usize) -> f64 {
        let base = self.lr_trans.unwrap_or(self.lr_main);
        if epoch < self.lr_drop_epoch {
            base
        } else {
            base * (self.lr_final / self.lr_main)
        }
    }
}

/// Training inputs: images with one or two noisy label sets, optionally
/// with clean reference labels for metric curves only (never trained on).
#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: Vec<Tensor4>,
    pub noisy1: Vec<LabelField>,
    pub noisy2: Option<Vec<LabelField>>,
    pub clean_ref: Option<Vec<LabelField>>,
}

impl Dataset {
    pub fn channels(&self) -> usize {
        self.images.first().map_or(0, |t| t.c())
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn validate(&self, num_classes: usize) -> Result<(), DataError> {
        if self.images.is_empty() {
            return Err(DataError::Shape("dataset has no images".into()));
        }
        if self.noisy1.len() != self.images.len() {
            return Err(DataError::Shape(format!(
                "{} images but {} noisy label fields",
                self.images.len(),
                self.noisy1.len()
            )));
        }
        for (name, set) in [("noisy2", &self.noisy2), ("clean_ref", &self.clean_ref)] {
            if let Some(set) = set {
                if set.len() != self.images.len() {
                    return Err(DataError::Shape(format!(
                        "{} images but {} {name} label fields",
                        self.images.len(),
                        set.len()
                    )));
                }
            }
        }
        let channels = self.channels();
        for (i, img) in self.images.iter().enumerate() {
            let (n, h, w, c) = img.dims();
            if n != 1 {
                return Err(DataError::Shape(format!("image {i} has batch size {n}, need 1")));
            }
            if c != channels {
                return Err(DataError::Shape(format!(
                    "image {i} has {c} channels but image 0 has {channels}"
                )));
            }
            // Pooling halves and upsampling doubles the grid, so odd sizes
            // cannot round-trip.
            if h < 2 || w < 2 || h % 2 != 0 || w % 2 != 0 {
                return Err(DataError::Shape(format!(
                    "image {i} is {h}x{w}; sides must be even and at least 2"
                )));
            }
            let check = |name: &str, f: &LabelField| {
                if f.h() != h || f.w() != w {
                    return Err(DataError::Shape(format!(
                        "{name} field {i} is {}x{} but its image is {h}x{w}",
                        f.h(),
                        f.w()
                    )));
                }
                if f.num_classes() != num_classes {
                    return Err(DataError::Shape(format!(
                        "{name} field {i} has {} classes, config says {num_classes}",
                        f.num_classes()
                    )));
                }
                Ok(())
            };
            check("noisy1", &self.noisy1[i])?;
            if let Some(n2) = &self.noisy2 {
                check("noisy2", &n2[i])?;
            }
            if let Some(cr) = &self.clean_ref {
                check("clean_ref", &cr[i])?;
            }
        }
        Ok(())
    }
}

/// Which label set a baseline trains against.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelSource {
    Noisy1,
    Noisy2,
    /// Both sets, each image paired with each set once per epoch.
    Mixture,
}

/// Which loop produced a log row.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PhaseTag {
    /// Phase A: clean net on the mixture.
    InitClean,
    /// Phase B: transition nets only.
    TransitionsOnly,
    /// Phase C: alternating groups.
    Alternate,
    /// Direct baseline training.
    Direct,
    /// Global-matrix baseline, stage 1 (base net only).
    NtnWarmup,
    /// Global-matrix baseline, stage 2 (joint with the matrix).
    NtnJoint,
}

impl fmt::Display for PhaseTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PhaseTag::InitClean => "A",
            PhaseTag::TransitionsOnly => "B",
            PhaseTag::Alternate => "C",
            PhaseTag::Direct => "direct",
            PhaseTag::NtnWarmup => "ntn-warmup",
            PhaseTag::NtnJoint => "ntn-joint",
        })
    }
}

/// Column order of [`EpochRecord::to_csv_row`].
pub const CSV_HEADER: &str = "epoch,phase,L1,L2,L3,ce_clean,ce_noisy1,ce_noisy2,R1,R2,lr";

/// One per-epoch metrics row. Quantities a trainer cannot compute (no
/// transition nets, no reference labels) are NaN and serialize as "NaN".
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase: PhaseTag,
    pub l1: f64,
    pub l2: f64,
    pub l3: f64,
    pub ce_clean: f64,
    pub ce_noisy1: f64,
    pub ce_noisy2: f64,
    pub r1: f64,
    pub r2: f64,
    pub lr: f64,
}

fn fmt_metric(v: f64) -> String {
    if v.is_nan() {
        "NaN".to_string()
    } else if v == f64::INFINITY {
        "inf".to_string()
    } else if v == f64::NEG_INFINITY {
        "-inf".to_string()
    } else {
        format!("{v}")
    }
}

impl EpochRecord {
    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            self.epoch,
            self.phase,
            fmt_metric(self.l1),
            fmt_metric(self.l2),
            fmt_metric(self.l3),
            fmt_metric(self.ce_clean),
            fmt_metric(self.ce_noisy1),
            fmt_metric(self.ce_noisy2),
            fmt_metric(self.r1),
            fmt_metric(self.r2),
            fmt_metric(self.lr),
        )
    }
}

/// A global `C x C` row-stochastic transition matrix, parameterized by
/// logits so rows stay stochastic no matter what gradients do.
#[derive(Debug, Clone, PartialEq)]
pub struct NtnTransitionLayer {
    classes: usize,
    logits: Vec<f64>,
}

impl NtnTransitionLayer {
    /// Near-identity start: +6 on the diagonal logits, zero elsewhere,
    /// which puts about 99% of each row's mass on the diagonal for C = 4.
    pub fn near_identity(classes: usize) -> Self {
        let mut logits = vec![0.0; classes * classes];
        for i in 0..classes {
            logits[i * classes + i] = 6.0;
        }
        NtnTransitionLayer { classes, logits }
    }

    pub fn from_logits(classes: usize, logits: Vec<f64>) -> Result<Self, DataError> {
        if classes < 2 || logits.len() != classes * classes {
            return Err(DataError::Shape(format!(
                "{} logits cannot form a {classes}x{classes} matrix",
                logits.len()
            )));
        }
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(DataError::NonFinite("transition layer logits".into()));
        }
        Ok(NtnTransitionLayer { classes, logits })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    /// The row-stochastic matrix, row-major.
    pub fn q_matrix(&self) -> Vec<f64> {
        let mut q = self.logits.clone();
        for row in q.chunks_exact_mut(self.classes) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        q
    }

    /// One gradient step: `grad_q` is the loss gradient with respect to the
    /// matrix entries; it is chained through the row softmax. Weight decay
    /// then shrinks every logit by `1 - decay`, pulling rows toward uniform
    /// at a pace set by the coefficient alone. Decay scaled by the learning
    /// rate would stall whenever the rate is small, and the diffusion is the
    /// point of the phase that uses it.
    fn step(&mut self, grad_q: &[f64], lr: f64, decay: f64) {
        let c = self.classes;
        let q = self.q_matrix();
        for row in 0..c {
            let qr = &q[row * c..(row + 1) * c];
            let gr = &grad_q[row * c..(row + 1) * c];
            let inner: f64 = qr.iter().zip(gr).map(|(&qv, &gv)| qv * gv).sum();
            for k in 0..c {
                let gl = qr[k] * (gr[k] - inner);
                let logit = &mut self.logits[row * c + k];
                *logit = (*logit - lr * gl) * (1.0 - decay);
            }
        }
    }
}

/// Clean prediction pushed through a global transition matrix:
/// `out(o) = sum over y of q[y, o] * clean(y)`.
pub fn compose_global(clean: &ProbField, q: &[f64]) -> Result<ProbField, DataError> {
    let c = clean.num_classes();
    if q.len() != c * c {
        return Err(DataError::Shape(format!(
            "{} matrix entries do not form {c}x{c}",
            q.len()
        )));
    }
    let (h, w) = (clean.h(), clean.w());
    let mut data = vec![0.0; h * w * c];
    for (pix, prow) in clean.data().chunks_exact(c).enumerate() {
        let out = &mut data[pix * c..(pix + 1) * c];
        for (y, &p) in prow.iter().enumerate() {
            for (o, slot) in out.iter_mut().enumerate() {
                *slot += q[y * c + o] * p;
            }
        }
    }
    ProbField::from_vec(h, w, c, data)
}

/// The three jointly trained networks.
#[derive(Debug, Clone)]
pub struct AntnModel {
    pub clean: MiniUNet,
    pub trans1: MiniUNet,
    pub trans2: MiniUNet,
}

/// The global-matrix baseline: a clean network plus one transition matrix.
#[derive(Debug, Clone)]
pub struct NtnModel {
    pub clean: MiniUNet,
    pub q: NtnTransitionLayer,
}

fn batch_ranges(n: usize, batch: usize) -> impl Iterator<Item = Range<usize>> {
    (0..n).step_by(batch).map(move |s| s..(s + batch).min(n))
}

/// Scatters per-pixel class weights into the observed column of each
/// pixel's matrix row block, matching the `C*C`-channel head layout.
fn scatter_into_rows(posterior: &ProbField, noisy: &LabelField) -> Tensor4 {
    let (h, w, c) = (posterior.h(), posterior.w(), posterior.num_classes());
    let mut data = vec![0.0; h * w * c * c];
    for (pix, &obs) in noisy.data().iter().enumerate() {
        let post = &posterior.data()[pix * c..(pix + 1) * c];
        for (y, &p) in post.iter().enumerate() {
            data[pix * c * c + y * c + obs as usize] = p;
        }
    }
    Tensor4::from_vec(1, h, w, c * c, data).expect("weights buffer is finite and sized")
}

/// Per-pixel column `Pr(observed | clean = y)` pulled out of a full
/// row-softmax probability tensor.
fn observed_column_of(probs: &Tensor4, noisy: &LabelField, c: usize) -> ProbField {
    let (h, w) = (noisy.h(), noisy.w());
    let pd = probs.data();
    let mut col = vec![0.0; h * w * c];
    for (pix, &obs) in noisy.data().iter().enumerate() {
        for y in 0..c {
            col[pix * c + y] = pd[pix * c * c + y * c + obs as usize];
        }
    }
    ProbField::from_vec(h, w, c, col).expect("column buffer is finite and sized")
}

/// Adds one image's clean-net cross-entropy gradient (weights as given)
/// into the net's gradient buffers. Returns the loss contribution.
fn accumulate_clean(
    net: &mut MiniUNet,
    image: &Tensor4,
    weights: &Tensor4,
    scale: f64,
) -> Result<f64, TrainError> {
    let c = net.spec().num_classes;
    let (logits, cache) = net.forward(image)?;
    let probs = softmax_groups(&logits, c)?;
    let (loss, grad) = weighted_cross_entropy(&probs, weights, c, scale)?;
    net.backward(&cache, &grad);
    Ok(loss)
}

/// One epoch of plain cross-entropy training against hard labels.
fn clean_pass(
    net: &mut MiniUNet,
    images: &[Tensor4],
    labels: &[LabelField],
    batch: usize,
    lr: f64,
) -> Result<(), TrainError> {
    for range in batch_ranges(images.len(), batch) {
        net.zero_grads();
        let scale = 1.0 / range.len() as f64;
        for i in range {
            accumulate_clean(net, &images[i], &labels[i].one_hot().to_tensor(), scale)?;
        }
        net.sgd_step(lr);
    }
    Ok(())
}

/// Fused E/M contribution for one image of a transition net: one forward
/// serves the E-step (via the observed column) and the posterior-weighted
/// gradient. Returns the number of prior-fallback pixels.
fn em_transition_grad(
    net: &mut MiniUNet,
    image: &Tensor4,
    noisy: &LabelField,
    prior: &ProbField,
    scale: f64,
) -> Result<usize, TrainError> {
    let c = net.spec().num_classes;
    let (logits, cache) = net.forward(image)?;
    match net.head() {
        HeadKind::TransitionRowSoftmax => {
            let probs = softmax_groups(&logits, c)?;
            let col = observed_column_of(&probs, noisy, c);
            let e = e_step_single(prior, &col)?;
            let weights = scatter_into_rows(&e.posterior, noisy);
            let (_, grad) = weighted_cross_entropy(&probs, &weights, c, scale)?;
            net.backward(&cache, &grad);
            Ok(e.fallback_pixels)
        }
        HeadKind::TransitionUniformRemainder => {
            // Every row's observed-column entry is its own sigmoid, so the
            // sigmoid tensor is exactly the transition column.
            let sig = sigmoid_forward(&logits);
            let col = ProbField::from_tensor(sig.clone()).expect("head emits C channels");
            let e = e_step_single(prior, &col)?;
            let (_, grad) = sigmoid_weighted_ce(&sig, &e.posterior.to_tensor(), scale)?;
            net.backward(&cache, &grad);
            Ok(e.fallback_pixels)
        }
        HeadKind::Clean => Err(ConfigError::Inconsistent(
            "transition update requested on the clean network".into(),
        )
        .into()),
    }
}

/// One epoch of E/M updates for a transition net against its noisy source,
/// with the clean net's predictions fixed (`priors`).
fn em_transition_pass(
    net: &mut MiniUNet,
    images: &[Tensor4],
    noisy: &[LabelField],
    priors: &[ProbField],
    batch: usize,
    lr: f64,
) -> Result<usize, TrainError> {
    let mut fallbacks = 0;
    for range in batch_ranges(images.len(), batch) {
        net.zero_grads();
        let scale = 1.0 / range.len() as f64;
        for i in range {
            fallbacks += em_transition_grad(net, &images[i], &noisy[i], &priors[i], scale)?;
        }
        net.sgd_step(lr);
    }
    Ok(fallbacks)
}

/// One epoch of joint-posterior updates for the clean net, transition
/// columns fixed.
fn clean_joint_pass(
    net: &mut MiniUNet,
    images: &[Tensor4],
    col1: &[ProbField],
    col2: &[ProbField],
    batch: usize,
    lr: f64,
) -> Result<usize, TrainError> {
    let c = net.spec().num_classes;
    let mut fallbacks = 0;
    for range in batch_ranges(images.len(), batch) {
        net.zero_grads();
        let scale = 1.0 / range.len() as f64;
        for i in range {
            let (logits, cache) = net.forward(&images[i])?;
            let probs = softmax_groups(&logits, c)?;
            let prior = ProbField::from_tensor(probs.clone()).expect("clean head emits C");
            let e = e_step_joint(&prior, &col1[i], &col2[i])?;
            fallbacks += e.fallback_pixels;
            let (_, grad) = weighted_cross_entropy(&probs, &e.posterior.to_tensor(), c, scale)?;
            net.backward(&cache, &grad);
        }
        net.sgd_step(lr);
    }
    Ok(fallbacks)
}

/// One M-step on a transition net for a single image with a caller-supplied
/// posterior. Returns the (posterior-weighted) loss before the step.
pub fn m_step_transition(
    net: &mut MiniUNet,
    image: &Tensor4,
    noisy: &LabelField,
    posterior: &ProbField,
    lr: f64,
) -> Result<f64, TrainError> {
    let c = net.spec().num_classes;
    net.zero_grads();
    let (logits, cache) = net.forward(image)?;
    let (loss, grad) = match net.head() {
        HeadKind::TransitionRowSoftmax => {
            let probs = softmax_groups(&logits, c)?;
            let weights = scatter_into_rows(posterior, noisy);
            weighted_cross_entropy(&probs, &weights, c, 1.0)?
        }
        HeadKind::TransitionUniformRemainder => {
            let sig = sigmoid_forward(&logits);
            sigmoid_weighted_ce(&sig, &posterior.to_tensor(), 1.0)?
        }
        HeadKind::Clean => {
            return Err(ConfigError::Inconsistent(
                "transition update requested on the clean network".into(),
            )
            .into())
        }
    };
    net.backward(&cache, &grad);
    net.sgd_step(lr);
    Ok(loss)
}

/// One M-step on the clean net for a single image with a caller-supplied
/// posterior. Returns the loss before the step.
pub fn m_step_clean(
    net: &mut MiniUNet,
    image: &Tensor4,
    posterior: &ProbField,
    lr: f64,
) -> Result<f64, TrainError> {
    if net.head() != HeadKind::Clean {
        return Err(
            ConfigError::Inconsistent("clean update requested on a transition network".into())
                .into(),
        );
    }
    net.zero_grads();
    let loss = accumulate_clean(net, image, &posterior.to_tensor(), 1.0)?;
    net.sgd_step(lr);
    Ok(loss)
}

fn predict_clean_all(net: &MiniUNet, images: &[Tensor4]) -> Result<Vec<ProbField>, TrainError> {
    images
        .par_iter()
        .map(|img| net.predict_clean(img).map_err(TrainError::from))
        .collect()
}

fn predict_cols_all(
    net: &MiniUNet,
    images: &[Tensor4],
    noisy: &[LabelField],
) -> Result<Vec<ProbField>, TrainError> {
    images
        .par_iter()
        .zip(noisy)
        .map(|(img, labels)| {
            let field = net.predict_transition(img, Some(labels))?;
            Ok(field.observed_column(labels)?)
        })
        .collect()
}

/// Epoch-end metric values; NaN marks quantities the trainer cannot
/// produce.
struct EpochEval {
    l1: f64,
    l2: f64,
    l3: f64,
    ce_clean: f64,
    ce_noisy1: f64,
    ce_noisy2: f64,
    r1: f64,
    r2: f64,
}

impl EpochEval {
    fn record(&self, epoch: usize, phase: PhaseTag, lr: f64) -> EpochRecord {
        EpochRecord {
            epoch,
            phase,
            l1: self.l1,
            l2: self.l2,
            l3: self.l3,
            ce_clean: self.ce_clean,
            ce_noisy1: self.ce_noisy1,
            ce_noisy2: self.ce_noisy2,
            r1: self.r1,
            r2: self.r2,
            lr,
        }
    }
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

fn ratio_of(agree: usize, disagree: usize) -> f64 {
    if disagree == 0 {
        f64::INFINITY
    } else {
        agree as f64 / disagree as f64
    }
}

/// Cross-entropy curves computable from the clean net alone.
fn eval_clean_only(clean: &MiniUNet, data: &Dataset) -> Result<(f64, f64, f64), TrainError> {
    let per: Vec<(f64, f64, f64)> = (0..data.len())
        .into_par_iter()
        .map(|i| -> Result<(f64, f64, f64), TrainError> {
            let p3 = clean.predict_clean(&data.images[i])?;
            let ce_clean = match &data.clean_ref {
                Some(refs) => cross_entropy_curve(&p3, &refs[i])?,
                None => f64::NAN,
            };
            let ce1 = cross_entropy_curve(&p3, &data.noisy1[i])?;
            let ce2 = match &data.noisy2 {
                Some(n2) => cross_entropy_curve(&p3, &n2[i])?,
                None => f64::NAN,
            };
            Ok((ce_clean, ce1, ce2))
        })
        .collect::<Result<_, _>>()?;
    let a: Vec<f64> = per.iter().map(|t| t.0).collect();
    let b: Vec<f64> = per.iter().map(|t| t.1).collect();
    let c: Vec<f64> = per.iter().map(|t| t.2).collect();
    Ok((mean(&a), mean(&b), mean(&c)))
}

struct PerImageEval {
    l1: f64,
    l2: f64,
    l3: f64,
    ce_clean: f64,
    ce_noisy1: f64,
    ce_noisy2: f64,
    agree1: usize,
    agree2: usize,
    pixels: usize,
}

/// Full metric set for the three-network model. Caches hold predictions of
/// networks known to be frozen since the cache was built; anything not
/// cached is recomputed with current parameters.
fn eval_antn(
    clean: &MiniUNet,
    trans1: &MiniUNet,
    trans2: &MiniUNet,
    data: &Dataset,
    p3_cache: Option<&[ProbField]>,
    col1_cache: Option<&[ProbField]>,
    col2_cache: Option<&[ProbField]>,
) -> Result<EpochEval, TrainError> {
    let noisy2 = data.noisy2.as_ref().expect("joint training validated two sources");
    let per: Vec<PerImageEval> = (0..data.len())
        .into_par_iter()
        .map(|i| -> Result<PerImageEval, TrainError> {
            let img = &data.images[i];
            let p3 = match p3_cache {
                Some(cache) => cache[i].clone(),
                None => clean.predict_clean(img)?,
            };
            let col1 = match col1_cache {
                Some(cache) => cache[i].clone(),
                None => trans1
                    .predict_transition(img, Some(&data.noisy1[i]))?
                    .observed_column(&data.noisy1[i])?,
            };
            let col2 = match col2_cache {
                Some(cache) => cache[i].clone(),
                None => trans2
                    .predict_transition(img, Some(&noisy2[i]))?
                    .observed_column(&noisy2[i])?,
            };
            let l1 = marginal_log_likelihood(&p3, &col1, &col2, Likelihood::L1)?;
            let l2 = marginal_log_likelihood(&p3, &col1, &col2, Likelihood::L2)?;
            let l3 = marginal_log_likelihood(&p3, &col1, &col2, Likelihood::L3)?;
            let ce_clean = match &data.clean_ref {
                Some(refs) => cross_entropy_curve(&p3, &refs[i])?,
                None => f64::NAN,
            };
            let ce_noisy1 = cross_entropy_curve(&p3, &data.noisy1[i])?;
            let ce_noisy2 = cross_entropy_curve(&p3, &noisy2[i])?;
            let joint = e_step_joint(&p3, &col1, &col2)?.posterior.argmax_labels();
            let agree1 =
                joint.data().iter().zip(data.noisy1[i].data()).filter(|(a, b)| a == b).count();
            let agree2 = joint.data().iter().zip(noisy2[i].data()).filter(|(a, b)| a == b).count();
            Ok(PerImageEval {
                l1,
                l2,
                l3,
                ce_clean,
                ce_noisy1,
                ce_noisy2,
                agree1,
                agree2,
                pixels: joint.pixels(),
            })
        })
        .collect::<Result<_, _>>()?;
    let total_pixels: usize = per.iter().map(|p| p.pixels).sum();
    let agree1: usize = per.iter().map(|p| p.agree1).sum();
    let agree2: usize = per.iter().map(|p| p.agree2).sum();
    let col = |f: fn(&PerImageEval) -> f64| per.iter().map(f).collect::<Vec<_>>();
    Ok(EpochEval {
        l1: mean(&col(|p| p.l1)),
        l2: mean(&col(|p| p.l2)),
        l3: mean(&col(|p| p.l3)),
        ce_clean: mean(&col(|p| p.ce_clean)),
        ce_noisy1: mean(&col(|p| p.ce_noisy1)),
        ce_noisy2: mean(&col(|p| p.ce_noisy2)),
        r1: ratio_of(agree1, total_pixels - agree1),
        r2: ratio_of(agree2, total_pixels - agree2),
    })
}

/// Three-phase EM training of the full model.
///
/// Phase A trains the clean net alone on the mixture (a full pass over the
/// first label set, then a full pass over the second, per epoch). Phase B
/// freezes the clean net and trains each transition net against its own
/// source through single-source posteriors. Phase C alternates every
/// `alternate_interval` epochs between the transition pair (single-source
/// posteriors) and the clean net (joint posteriors), starting with the
/// transition pair. Transition updates step at [`TrainConfig::trans_lr_at`],
/// clean updates at [`TrainConfig::lr_at`]; each epoch logs the rate it
/// used.
pub fn train_antn(
    data: &Dataset,
    cfg: &TrainConfig,
) -> Result<(AntnModel, Vec<EpochRecord>), TrainError> {
    cfg.validate()?;
    data.validate(cfg.num_classes)?;
    let noisy2 = data.noisy2.as_ref().ok_or_else(|| {
        ConfigError::Inconsistent("joint training needs a second noisy label set".into())
    })?;
    let spec = MiniUNetSpec {
        in_channels: data.channels(),
        base_filters: cfg.base_filters,
        num_classes: cfg.num_classes,
    };
    let mut clean = MiniUNet::init(spec, HeadKind::Clean, cfg.seed)?;
    let mut trans1 = MiniUNet::init(spec, cfg.readout_mode.head(), cfg.seed.wrapping_add(1))?;
    let mut trans2 = MiniUNet::init(spec, cfg.readout_mode.head(), cfg.seed.wrapping_add(2))?;

    let mut log = Vec::with_capacity(cfg.total_epochs());
    let mut global = 0usize;
    let mut fallbacks = 0usize;
    // Prediction caches for whichever networks are currently frozen.
    let mut p3_cache: Option<Vec<ProbField>> = None;
    let mut col_cache: Option<(Vec<ProbField>, Vec<ProbField>)> = None;

    for _ in 0..cfg.epochs_init_clean {
        let lr = cfg.lr_at(global);
        clean_pass(&mut clean, &data.images, &data.noisy1, cfg.batch_size, lr)?;
        clean_pass(&mut clean, &data.images, noisy2, cfg.batch_size, lr)?;
        if col_cache.is_none() {
            col_cache = Some((
                predict_cols_all(&trans1, &data.images, &data.noisy1)?,
                predict_cols_all(&trans2, &data.images, noisy2)?,
            ));
        }
        let (c1, c2) = col_cache.as_ref().expect("cache was just filled");
        let ev = eval_antn(&clean, &trans1, &trans2, data, None, Some(c1), Some(c2))?;
        log.push(ev.record(global, PhaseTag::InitClean, lr));
        global += 1;
    }

    for _ in 0..cfg.epochs_transition {
        let lr = cfg.trans_lr_at(global);
        if p3_cache.is_none() {
            p3_cache = Some(predict_clean_all(&clean, &data.images)?);
        }
        let p3 = p3_cache.as_ref().expect("cache was just filled");
        fallbacks +=
            em_transition_pass(&mut trans1, &data.images, &data.noisy1, p3, cfg.batch_size, lr)?;
        fallbacks += em_transition_pass(&mut trans2, &data.images, noisy2, p3, cfg.batch_size, lr)?;
        col_cache = None;
        let ev = eval_antn(&clean, &trans1, &trans2, data, Some(p3), None, None)?;
        log.push(ev.record(global, PhaseTag::TransitionsOnly, lr));
        global += 1;
    }

    for e in 0..cfg.epochs_alternate {
        let transition_turn = (e / cfg.alternate_interval) % 2 == 0;
        if transition_turn {
            let lr = cfg.trans_lr_at(global);
            if p3_cache.is_none() {
                p3_cache = Some(predict_clean_all(&clean, &data.images)?);
            }
            let p3 = p3_cache.as_ref().expect("cache was just filled");
            fallbacks += em_transition_pass(
                &mut trans1,
                &data.images,
                &data.noisy1,
                p3,
                cfg.batch_size,
                lr,
            )?;
            fallbacks +=
                em_transition_pass(&mut trans2, &data.images, noisy2, p3, cfg.batch_size, lr)?;
            col_cache = None;
            let ev = eval_antn(&clean, &trans1, &trans2, data, Some(p3), None, None)?;
            log.push(ev.record(global, PhaseTag::Alternate, lr));
        } else {
            let lr = cfg.lr_at(global);
            if col_cache.is_none() {
                col_cache = Some((
                    predict_cols_all(&trans1, &data.images, &data.noisy1)?,
                    predict_cols_all(&trans2, &data.images, noisy2)?,
                ));
            }
            let (c1, c2) = col_cache.as_ref().expect("cache was just filled");
            fallbacks +=
                clean_joint_pass(&mut clean, &data.images, c1, c2, cfg.batch_size, lr)?;
            p3_cache = None;
            let ev = eval_antn(&clean, &trans1, &trans2, data, None, Some(c1), Some(c2))?;
            log.push(ev.record(global, PhaseTag::Alternate, lr));
        }
        global += 1;
    }

    if fallbacks > 0 {
        log::debug!("{fallbacks} pixel posteriors fell back to the prior during training");
    }
    Ok((AntnModel { clean, trans1, trans2 }, log))
}

/// Plain cross-entropy training of a clean network against one noisy label
/// set or the two-set mixture, for the full epoch budget.
pub fn train_unet_direct(
    data: &Dataset,
    source: LabelSource,
    cfg: &TrainConfig,
) -> Result<(MiniUNet, Vec<EpochRecord>), TrainError> {
    cfg.validate()?;
    data.validate(cfg.num_classes)?;
    if matches!(source, LabelSource::Noisy2 | LabelSource::Mixture) && data.noisy2.is_none() {
        return Err(ConfigError::Inconsistent(format!(
            "label source {source:?} needs a second noisy label set"
        ))
        .into());
    }
    let spec = MiniUNetSpec {
        in_channels: data.channels(),
        base_filters: cfg.base_filters,
        num_classes: cfg.num_classes,
    };
    let mut net = MiniUNet::init(spec, HeadKind::Clean, cfg.seed)?;
    let mut log = Vec::with_capacity(cfg.total_epochs());
    for epoch in 0..cfg.total_epochs() {
        let lr = cfg.lr_at(epoch);
        match source {
            LabelSource::Noisy1 => {
                clean_pass(&mut net, &data.images, &data.noisy1, cfg.batch_size, lr)?
            }
            LabelSource::Noisy2 => {
                let n2 = data.noisy2.as_ref().expect("presence checked above");
                clean_pass(&mut net, &data.images, n2, cfg.batch_size, lr)?
            }
            LabelSource::Mixture => {
                let n2 = data.noisy2.as_ref().expect("presence checked above");
                clean_pass(&mut net, &data.images, &data.noisy1, cfg.batch_size, lr)?;
                clean_pass(&mut net, &data.images, n2, cfg.batch_size, lr)?;
            }
        }
        let (ce_clean, ce_noisy1, ce_noisy2) = eval_clean_only(&net, data)?;
        log.push(EpochRecord {
            epoch,
            phase: PhaseTag::Direct,
            l1: f64::NAN,
            l2: f64::NAN,
            l3: f64::NAN,
            ce_clean,
            ce_noisy1,
            ce_noisy2,
            r1: f64::NAN,
            r2: f64::NAN,
            lr,
        });
    }
    Ok((net, log))
}

/// One epoch of joint training of the base net and the global matrix
/// against one noisy source.
fn ntn_joint_pass(
    net: &mut MiniUNet,
    q: &mut NtnTransitionLayer,
    images: &[Tensor4],
    noisy: &[LabelField],
    batch: usize,
    lr: f64,
    decay: f64,
) -> Result<usize, TrainError> {
    let c = net.spec().num_classes;
    let mut fallbacks = 0;
    for range in batch_ranges(images.len(), batch) {
        net.zero_grads();
        let mut grad_q = vec![0.0; c * c];
        let scale = 1.0 / range.len() as f64;
        let qm = q.q_matrix();
        for i in range {
            let (logits, cache) = net.forward(&images[i])?;
            let probs = softmax_groups(&logits, c)?;
            let prior = ProbField::from_tensor(probs.clone()).expect("clean head emits C");
            let (h, w) = (noisy[i].h(), noisy[i].w());
            // The matrix column selected by each pixel's observed label.
            let mut col = vec![0.0; h * w * c];
            for (pix, &obs) in noisy[i].data().iter().enumerate() {
                for y in 0..c {
                    col[pix * c + y] = qm[y * c + obs as usize];
                }
            }
            let col = ProbField::from_vec(h, w, c, col)?;
            let e = e_step_single(&prior, &col)?;
            fallbacks += e.fallback_pixels;
            // Gradient of the composed cross-entropy with respect to the
            // base logits is exactly the posterior-weighted form.
            let (_, grad) = weighted_cross_entropy(&probs, &e.posterior.to_tensor(), c, scale)?;
            net.backward(&cache, &grad);

            let norm = scale / (h * w) as f64;
            for (pix, &obs) in noisy[i].data().iter().enumerate() {
                let obs = obs as usize;
                let prow = &prior.data()[pix * c..(pix + 1) * c];
                let mut denom = 0.0;
                for y in 0..c {
                    denom += prow[y] * qm[y * c + obs];
                }
                // Inside the clamped-log region the loss is flat.
                if denom > PROB_FLOOR {
                    for y in 0..c {
                        grad_q[y * c + obs] -= norm * prow[y] / denom;
                    }
                }
            }
        }
        q.step(&grad_q, lr, decay);
        net.sgd_step(lr);
    }
    Ok(fallbacks)
}

/// The global-matrix baseline: direct training of the base net for the
/// epoch budget minus `epochs_ntn_diffuse`, then joint training of the
/// base net and the weight-decayed matrix for the remainder.
pub fn train_ntn(
    data: &Dataset,
    source: LabelSource,
    cfg: &TrainConfig,
) -> Result<(NtnModel, Vec<EpochRecord>), TrainError> {
    cfg.validate()?;
    data.validate(cfg.num_classes)?;
    let labels: &[LabelField] = match source {
        LabelSource::Noisy1 => &data.noisy1,
        LabelSource::Noisy2 => data.noisy2.as_ref().ok_or_else(|| {
            ConfigError::Inconsistent("second label source requested but not provided".into())
        })?,
        LabelSource::Mixture => {
            return Err(ConfigError::Inconsistent(
                "the global-matrix baseline trains against a single noisy source".into(),
            )
            .into())
        }
    };
    let spec = MiniUNetSpec {
        in_channels: data.channels(),
        base_filters: cfg.base_filters,
        num_classes: cfg.num_classes,
    };
    let mut net = MiniUNet::init(spec, HeadKind::Clean, cfg.seed)?;
    let mut q = NtnTransitionLayer::near_identity(cfg.num_classes);
    let warmup = cfg.total_epochs().saturating_sub(cfg.epochs_ntn_diffuse);
    let joint = cfg.total_epochs() - warmup;
    let mut log = Vec::with_capacity(cfg.total_epochs());
    let mut fallbacks = 0usize;
    for epoch in 0..warmup {
        let lr = cfg.lr_at(epoch);
        clean_pass(&mut net, &data.images, labels, cfg.batch_size, lr)?;
        let (ce_clean, ce_noisy1, ce_noisy2) = eval_clean_only(&net, data)?;
        log.push(EpochRecord {
            epoch,
            phase: PhaseTag::NtnWarmup,
            l1: f64::NAN,
            l2: f64::NAN,
            l3: f64::NAN,
            ce_clean,
            ce_noisy1,
            ce_noisy2,
            r1: f64::NAN,
            r2: f64::NAN,
            lr,
        });
    }
    for e in 0..joint {
        let epoch = warmup + e;
        let lr = cfg.lr_at(epoch);
        fallbacks += ntn_joint_pass(
            &mut net,
            &mut q,
            &data.images,
            labels,
            cfg.batch_size,
            lr,
            cfg.ntn_weight_decay,
        )?;
        let (ce_clean, ce_noisy1, ce_noisy2) = eval_clean_only(&net, data)?;
        log.push(EpochRecord {
            epoch,
            phase: PhaseTag::NtnJoint,
            l1: f64::NAN,
            l2: f64::NAN,
            l3: f64::NAN,
            ce_clean,
            ce_noisy1,
            ce_noisy2,
            r1: f64::NAN,
            r2: f64::NAN,
            lr,
        });
    }
    if fallbacks > 0 {
        log::debug!("{fallbacks} pixel posteriors fell back to the prior during joint training");
    }
    Ok((NtnModel { clean: net, q }, log))
}
