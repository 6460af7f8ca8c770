//! The shared encoder-decoder network and its output heads.
//!
//! Every predictor in the system (the clean-label network and both
//! transition networks) is the same small two-level u-shaped trunk with a
//! 1x1 head, differing only in head width and output normalization:
//!
//! * [`HeadKind::Clean`]: C channels, per-pixel softmax, a distribution
//!   over clean classes.
//! * [`HeadKind::TransitionRowSoftmax`]: C*C channels, softmax over each
//!   group of C, a row-stochastic transition matrix per pixel.
//! * [`HeadKind::TransitionUniformRemainder`]: C sigmoid channels; entry
//!   `p[y]` lands at the observed label's column of row `y` and the
//!   remaining mass spreads uniformly over the other C-1 columns.
//!
//! The trunk is: two 3x3 conv+relu pairs, 2x2 max pool, two more conv+relu
//! pairs at double width, nearest-neighbour upsample, skip concatenation,
//! two decoder conv+relu pairs, then the 1x1 head. Backpropagation is
//! hand-written against the kernels in [`crate::ops`] and verified against
//! finite differences in the tests.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{ConfigError, DataError};
use crate::fields::{LabelField, ProbField, TransField};
use crate::ops::{
    concat_channels, conv2d_backward, conv2d_forward, maxpool2_backward, maxpool2_forward,
    relu_backward, relu_forward, sigmoid_forward, softmax_groups, split_channels,
    upsample2_backward, upsample2_forward, ConvWeights,
};
use crate::tensor::Tensor4;

/// Layer names in parameter order; also the checkpoint serialization order.
pub const LAYER_NAMES: [&str; 7] = ["enc1a", "enc1b", "enc2a", "enc2b", "dec1a", "dec1b", "head"];

/// Trunk shape: input channels, base filter count, class count.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MiniUNetSpec {
    pub in_channels: usize,
    pub base_filters: usize,
    pub num_classes: usize,
}

impl MiniUNetSpec {
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
        if self.in_channels == 0 {
            return Err(ConfigError::Parameter("need at least 1 input channel".into()));
        }
        Ok(())
    }

    /// Parameter count of a network with this shape and head, computed
    /// without building one. Saturates instead of overflowing so oversized
    /// descriptors from untrusted sources compare unequal, not panic.
    pub fn param_count(&self, head: HeadKind) -> usize {
        let f = self.base_filters;
        let conv = |k: usize, ci: usize, co: usize| {
            k.saturating_mul(k).saturating_mul(ci).saturating_mul(co).saturating_add(co)
        };
        let f2 = f.saturating_mul(2);
        let f3 = f.saturating_mul(3);
        [
            conv(3, self.in_channels, f),
            conv(3, f, f),
            conv(3, f, f2),
            conv(3, f2, f2),
            conv(3, f3, f),
            conv(3, f, f),
            conv(1, f, head.channels(self.num_classes)),
        ]
        .iter()
        .fold(0usize, |a, &b| a.saturating_add(b))
    }
}

/// Output head variant; fixes head width and normalization.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadKind {
    Clean,
    TransitionRowSoftmax,
    TransitionUniformRemainder,
}

impl HeadKind {
    /// Head output channels for `c` classes.
    pub fn channels(self, c: usize) -> usize {
        match self {
            HeadKind::Clean => c,
            HeadKind::TransitionRowSoftmax => c * c,
            HeadKind::TransitionUniformRemainder => c,
        }
    }

    pub fn is_transition(self) -> bool {
        !matches!(self, HeadKind::Clean)
    }
}

/// Per-layer parameters with matching gradient accumulators.
#[derive(Debug, Clone)]
pub struct ParamStore {
    layers: Vec<ConvWeights>,
    grads: Vec<ConvWeights>,
}

impl ParamStore {
    fn new(layers: Vec<ConvWeights>) -> Self {
        let grads =
            layers.iter().map(|l| ConvWeights::zeros(l.k, l.in_c, l.out_c)).collect();
        ParamStore { layers, grads }
    }
}

/// Intermediate activations kept for the backward pass.
///
/// `a_*` are pre-relu convolution outputs, `r_*` their rectified versions;
/// the remaining fields are the pooling/upsampling/concat stages.
pub struct ForwardCache {
    x: Tensor4,
    a_enc1a: Tensor4,
    r_enc1a: Tensor4,
    a_enc1b: Tensor4,
    r_enc1b: Tensor4,
    pooled: Tensor4,
    a_enc2a: Tensor4,
    r_enc2a: Tensor4,
    a_enc2b: Tensor4,
    cat: Tensor4,
    a_dec1a: Tensor4,
    r_dec1a: Tensor4,
    a_dec1b: Tensor4,
    r_dec1b: Tensor4,
}

/// Two-level encoder-decoder with a 1x1 output head.
#[derive(Debug, Clone)]
pub struct MiniUNet {
    spec: MiniUNetSpec,
    head: HeadKind,
    params: ParamStore,
}

impl MiniUNet {
    /// Builds the network with He-normal weights and zero biases, drawn
    /// deterministically from `seed`.
    pub fn init(spec: MiniUNetSpec, head: HeadKind, seed: u64) -> Result<Self, ConfigError> {
        spec.validate()?;
        let f = spec.base_filters;
        let c = spec.num_classes;
        let shapes: [(usize, usize, usize); 7] = [
            (3, spec.in_channels, f),
            (3, f, f),
            (3, f, 2 * f),
            (3, 2 * f, 2 * f),
            (3, 3 * f, f),
            (3, f, f),
            (1, f, head.channels(c)),
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(7);
        for (k, in_c, out_c) in shapes {
            let mut layer = ConvWeights::zeros(k, in_c, out_c);
            let std = (2.0 / (k * k * in_c) as f64).sqrt();
            let dist = Normal::new(0.0, std).expect("std is positive and finite");
            for wv in &mut layer.w {
                *wv = dist.sample(&mut rng);
            }
            layers.push(layer);
        }
        Ok(MiniUNet { spec, head, params: ParamStore::new(layers) })
    }

    pub fn spec(&self) -> MiniUNetSpec {
        self.spec
    }

    pub fn head(&self) -> HeadKind {
        self.head
    }

    pub fn layers(&self) -> &[ConvWeights] {
        &self.params.layers
    }

    pub fn layers_mut(&mut self) -> &mut [ConvWeights] {
        &mut self.params.layers
    }

    /// Total parameter count across all layers.
    pub fn param_count(&self) -> usize {
        self.params.layers.iter().map(ConvWeights::param_count).sum()
    }

    /// All parameters as one flat vector, layer by layer in
    /// [`LAYER_NAMES`] order, weights then bias within a layer.
    pub fn flatten_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.params.layers {
            out.extend_from_slice(&l.w);
            out.extend_from_slice(&l.b);
        }
        out
    }

    /// Inverse of [`flatten_params`]. The buffer length must match and all
    /// values must be finite.
    pub fn load_flat_params(&mut self, flat: &[f64]) -> Result<(), DataError> {
        if flat.len() != self.param_count() {
            return Err(DataError::Shape(format!(
                "parameter buffer has {} values, network needs {}",
                flat.len(),
                self.param_count()
            )));
        }
        if !flat.iter().all(|v| v.is_finite()) {
            return Err(DataError::NonFinite("parameter buffer".into()));
        }
        let mut off = 0;
        for l in &mut self.params.layers {
            let nw = l.w.len();
            let nb = l.b.len();
            l.w.copy_from_slice(&flat[off..off + nw]);
            off += nw;
            l.b.copy_from_slice(&flat[off..off + nb]);
            off += nb;
        }
        Ok(())
    }

    /// Accumulated gradients flattened in the same order as
    /// [`flatten_params`].
    pub fn flatten_grads(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for g in &self.params.grads {
            out.extend_from_slice(&g.w);
            out.extend_from_slice(&g.b);
        }
        out
    }

    fn check_image(&self, image: &Tensor4) -> Result<(), ConfigError> {
        let (_, h, w, c) = image.dims();
        if h % 2 != 0 || w % 2 != 0 {
            return Err(ConfigError::Shape(format!(
                "image dims must be divisible by 2 for one pooling level, got {h}x{w}"
            )));
        }
        if c != self.spec.in_channels {
            return Err(ConfigError::Shape(format!(
                "network expects {} input channels, got {c}",
                self.spec.in_channels
            )));
        }
        Ok(())
    }

    /// Full forward pass; returns head logits and the cache consumed by
    /// [`MiniUNet::backward`].
    pub fn forward(&self, x: &Tensor4) -> Result<(Tensor4, ForwardCache), ConfigError> {
        self.check_image(x)?;
        let l = &self.params.layers;
        let a_enc1a = conv2d_forward(x, &l[0])?;
        let r_enc1a = relu_forward(&a_enc1a);
        let a_enc1b = conv2d_forward(&r_enc1a, &l[1])?;
        let r_enc1b = relu_forward(&a_enc1b);
        let pooled = maxpool2_forward(&r_enc1b)?;
        let a_enc2a = conv2d_forward(&pooled, &l[2])?;
        let r_enc2a = relu_forward(&a_enc2a);
        let a_enc2b = conv2d_forward(&r_enc2a, &l[3])?;
        let r_enc2b = relu_forward(&a_enc2b);
        let up = upsample2_forward(&r_enc2b);
        let cat = concat_channels(&r_enc1b, &up)?;
        let a_dec1a = conv2d_forward(&cat, &l[4])?;
        let r_dec1a = relu_forward(&a_dec1a);
        let a_dec1b = conv2d_forward(&r_dec1a, &l[5])?;
        let r_dec1b = relu_forward(&a_dec1b);
        let logits = conv2d_forward(&r_dec1b, &l[6])?;
        Ok((
            logits,
            ForwardCache {
                x: x.clone(),
                a_enc1a,
                r_enc1a,
                a_enc1b,
                r_enc1b,
                pooled,
                a_enc2a,
                r_enc2a,
                a_enc2b,
                cat,
                a_dec1a,
                r_dec1a,
                a_dec1b,
                r_dec1b,
            },
        ))
    }

    /// Backpropagates `g_logits` through the network, *adding* parameter
    /// gradients into the store. Call [`MiniUNet::sgd_step`] to apply and
    /// clear them.
    pub fn backward(&mut self, cache: &ForwardCache, g_logits: &Tensor4) {
        let f = self.spec.base_filters;
        let layers = &self.params.layers;
        let grads = &mut self.params.grads;
        // Splits one gradient buffer into its weight and bias halves so the
        // kernel can borrow both mutably.
        fn wb(g: &mut ConvWeights) -> (&mut [f64], &mut [f64]) {
            (&mut g.w, &mut g.b)
        }
        let (gw, gb) = wb(&mut grads[6]);
        let g = conv2d_backward(&cache.r_dec1b, &layers[6], g_logits, gw, gb);
        let g = relu_backward(&cache.a_dec1b, &g);
        let (gw, gb) = wb(&mut grads[5]);
        let g = conv2d_backward(&cache.r_dec1a, &layers[5], &g, gw, gb);
        let g = relu_backward(&cache.a_dec1a, &g);
        let (gw, gb) = wb(&mut grads[4]);
        let g = conv2d_backward(&cache.cat, &layers[4], &g, gw, gb);
        let (g_skip, g_up) = split_channels(&g, f);
        let g = upsample2_backward(&g_up);
        let g = relu_backward(&cache.a_enc2b, &g);
        let (gw, gb) = wb(&mut grads[3]);
        let g = conv2d_backward(&cache.r_enc2a, &layers[3], &g, gw, gb);
        let g = relu_backward(&cache.a_enc2a, &g);
        let (gw, gb) = wb(&mut grads[2]);
        let g = conv2d_backward(&cache.pooled, &layers[2], &g, gw, gb);
        let mut g = maxpool2_backward(&cache.r_enc1b, &g);
        g.add_assign(&g_skip);
        let g = relu_backward(&cache.a_enc1b, &g);
        let (gw, gb) = wb(&mut grads[1]);
        let g = conv2d_backward(&cache.r_enc1a, &layers[1], &g, gw, gb);
        let g = relu_backward(&cache.a_enc1a, &g);
        let (gw, gb) = wb(&mut grads[0]);
        let _ = conv2d_backward(&cache.x, &layers[0], &g, gw, gb);
    }

    /// Clears all accumulated gradients.
    pub fn zero_grads(&mut self) {
        for g in &mut self.params.grads {
            g.w.iter_mut().for_each(|v| *v = 0.0);
            g.b.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// One plain gradient step `p <- p - lr * g`, then clears gradients.
    pub fn sgd_step(&mut self, lr: f64) {
        for (l, g) in self.params.layers.iter_mut().zip(&mut self.params.grads) {
            for (p, gv) in l.w.iter_mut().zip(&mut g.w) {
                *p -= lr * *gv;
                *gv = 0.0;
            }
            for (p, gv) in l.b.iter_mut().zip(&mut g.b) {
                *p -= lr * *gv;
                *gv = 0.0;
            }
        }
    }

    /// Clean-class distribution per pixel. The head must be
    /// [`HeadKind::Clean`].
    pub fn predict_clean(&self, image: &Tensor4) -> Result<ProbField, ConfigError> {
        if self.head != HeadKind::Clean {
            return Err(ConfigError::Inconsistent(
                "predict_clean called on a transition network".into(),
            ));
        }
        let (logits, _) = self.forward(image)?;
        let probs = softmax_groups(&logits, self.spec.num_classes)?;
        Ok(ProbField::from_tensor(probs).expect("forward output is batch 1"))
    }

    /// Per-pixel transition matrix. The head must be a transition kind;
    /// `observed` is required in uniform-remainder mode (it selects the
    /// column that receives the sigmoid mass) and ignored otherwise.
    pub fn predict_transition(
        &self,
        image: &Tensor4,
        observed: Option<&LabelField>,
    ) -> Result<TransField, ConfigError> {
        let c = self.spec.num_classes;
        match self.head {
            HeadKind::Clean => Err(ConfigError::Inconsistent(
                "predict_transition called on the clean-label network".into(),
            )),
            HeadKind::TransitionRowSoftmax => {
                let (logits, _) = self.forward(image)?;
                let probs = softmax_groups(&logits, c)?;
                Ok(TransField::from_tensor(probs, c).expect("head emits C*C channels"))
            }
            HeadKind::TransitionUniformRemainder => {
                let observed = observed.ok_or_else(|| {
                    ConfigError::Inconsistent(
                        "uniform-remainder readout needs the observed label field".into(),
                    )
                })?;
                let (_, h, w, _) = image.dims();
                if observed.h() != h || observed.w() != w || observed.num_classes() != c {
                    return Err(ConfigError::Shape(format!(
                        "observed labels {}x{} ({} classes) do not match image {}x{} ({} classes)",
                        observed.h(),
                        observed.w(),
                        observed.num_classes(),
                        h,
                        w,
                        c
                    )));
                }
                let (logits, _) = self.forward(image)?;
                let p = sigmoid_forward(&logits);
                let mut data = vec![0.0; h * w * c * c];
                let spread = 1.0 / (c - 1) as f64;
                for y in 0..h {
                    for x in 0..w {
                        let obs = observed.at(y, x) as usize;
                        let ps = p.pixel(0, y, x);
                        let base = (y * w + x) * c * c;
                        for (from, &keep) in ps.iter().enumerate() {
                            let row = &mut data[base + from * c..base + (from + 1) * c];
                            let rest = (1.0 - keep) * spread;
                            row.iter_mut().for_each(|v| *v = rest);
                            row[obs] = keep;
                        }
                    }
                }
                let t = Tensor4::from_vec(1, h, w, c * c, data)
                    .expect("constructed buffer is finite and sized");
                Ok(TransField::from_tensor(t, c).expect("buffer has C*C channels"))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::{finite_diff_check, weighted_cross_entropy};
    use approx::assert_relative_eq;
    use rand::Rng;

    fn rand_image(h: usize, w: usize, seed: u64) -> Tensor4 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor4::from_vec(1, h, w, 3, (0..h * w * 3).map(|_| rng.random_range(0.0..1.0)).collect())
            .unwrap()
    }

    fn small_spec() -> MiniUNetSpec {
        MiniUNetSpec { in_channels: 3, base_filters: 2, num_classes: 2 }
    }

    #[test]
    fn spec_validation_rejects_degenerate_nets() {
        assert!(MiniUNetSpec { in_channels: 3, base_filters: 2, num_classes: 1 }.validate().is_err());
        assert!(MiniUNetSpec { in_channels: 3, base_filters: 1, num_classes: 2 }.validate().is_err());
        assert!(small_spec().validate().is_ok());
    }

    #[test]
    fn spec_level_param_count_matches_a_built_network() {
        for (f, c, input) in [(2, 2, 3), (4, 3, 3), (8, 4, 1), (3, 5, 2)] {
            let spec = MiniUNetSpec { in_channels: input, base_filters: f, num_classes: c };
            for head in [
                HeadKind::Clean,
                HeadKind::TransitionRowSoftmax,
                HeadKind::TransitionUniformRemainder,
            ] {
                let net = MiniUNet::init(spec, head, 0).unwrap();
                assert_eq!(spec.param_count(head), net.param_count(), "{spec:?} {head:?}");
            }
        }
        // Oversized descriptors saturate instead of wrapping.
        let huge =
            MiniUNetSpec { in_channels: 65535, base_filters: usize::MAX / 2, num_classes: 65535 };
        assert_eq!(huge.param_count(HeadKind::Clean), usize::MAX);
    }

    #[test]
    fn clean_output_rows_are_distributions() {
        let net = MiniUNet::init(
            MiniUNetSpec { in_channels: 3, base_filters: 4, num_classes: 3 },
            HeadKind::Clean,
            7,
        )
        .unwrap();
        let p = net.predict_clean(&rand_image(6, 8, 1)).unwrap();
        assert_eq!((p.h(), p.w(), p.num_classes()), (6, 8, 3));
        assert!(p.is_normalized(1e-12));
    }

    #[test]
    fn transition_rows_are_distributions_in_both_modes() {
        let img = rand_image(4, 6, 2);
        let spec = MiniUNetSpec { in_channels: 3, base_filters: 4, num_classes: 4 };
        let net = MiniUNet::init(spec, HeadKind::TransitionRowSoftmax, 8).unwrap();
        let t = net.predict_transition(&img, None).unwrap();
        assert!(t.rows_normalized(1e-12));
        assert!(t.data().iter().all(|&v| v > 0.0 && v < 1.0));

        let net = MiniUNet::init(spec, HeadKind::TransitionUniformRemainder, 8).unwrap();
        let obs = LabelField::zeros(4, 6, 4);
        let t = net.predict_transition(&img, Some(&obs)).unwrap();
        assert!(t.rows_normalized(1e-12));
    }

    #[test]
    fn zero_weight_heads_give_uniform_outputs() {
        let img = rand_image(4, 4, 3);
        let spec = MiniUNetSpec { in_channels: 3, base_filters: 2, num_classes: 4 };

        let mut net = MiniUNet::init(spec, HeadKind::Clean, 4).unwrap();
        let head = net.layers_mut().last_mut().unwrap();
        head.w.iter_mut().for_each(|v| *v = 0.0);
        let p = net.predict_clean(&img).unwrap();
        assert!(p.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));

        let mut net = MiniUNet::init(spec, HeadKind::TransitionRowSoftmax, 4).unwrap();
        let head = net.layers_mut().last_mut().unwrap();
        head.w.iter_mut().for_each(|v| *v = 0.0);
        let t = net.predict_transition(&img, None).unwrap();
        assert!(t.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn uniform_remainder_places_sigmoid_mass_at_observed_column() {
        let img = rand_image(2, 2, 5);
        let spec = MiniUNetSpec { in_channels: 3, base_filters: 2, num_classes: 4 };
        let mut net = MiniUNet::init(spec, HeadKind::TransitionUniformRemainder, 6).unwrap();
        // Zero head weights and set every bias to logit(0.7): p = 0.7 for
        // all rows, all pixels.
        let head = net.layers_mut().last_mut().unwrap();
        head.w.iter_mut().for_each(|v| *v = 0.0);
        head.b.iter_mut().for_each(|v| *v = (0.7f64 / 0.3).ln());
        let obs = LabelField::from_vec(2, 2, 4, vec![2, 0, 1, 3]).unwrap();
        let t = net.predict_transition(&img, Some(&obs)).unwrap();
        for from in 0..4 {
            let row = t.row(0, 1, from);
            // Observed label at (0,1) is 0.
            assert_relative_eq!(row[0], 0.7, max_relative = 1e-12);
            for to in 1..4 {
                assert_relative_eq!(row[to], 0.1, max_relative = 1e-12);
            }
        }
        assert!(t.rows_normalized(1e-12));
    }

    #[test]
    fn uniform_remainder_with_p_one_over_c_matches_uniform_row() {
        let img = rand_image(2, 2, 5);
        let spec = MiniUNetSpec { in_channels: 3, base_filters: 2, num_classes: 4 };
        let mut net = MiniUNet::init(spec, HeadKind::TransitionUniformRemainder, 6).unwrap();
        let head = net.layers_mut().last_mut().unwrap();
        head.w.iter_mut().for_each(|v| *v = 0.0);
        // logit(1/4): p = 1/4, remainder (3/4)/3 = 1/4 as well.
        head.b.iter_mut().for_each(|v| *v = (0.25f64 / 0.75).ln());
        let obs = LabelField::zeros(2, 2, 4);
        let t = net.predict_transition(&img, Some(&obs)).unwrap();
        for &v in t.data() {
            assert_relative_eq!(v, 0.25, max_relative = 1e-12);
        }
    }

    #[test]
    fn uniform_remainder_requires_observed_labels() {
        let net = MiniUNet::init(small_spec(), HeadKind::TransitionUniformRemainder, 1).unwrap();
        assert!(net.predict_transition(&rand_image(4, 4, 1), None).is_err());
    }

    #[test]
    fn head_width_scales_with_class_count() {
        let spec = MiniUNetSpec { in_channels: 3, base_filters: 4, num_classes: 5 };
        let clean = MiniUNet::init(spec, HeadKind::Clean, 0).unwrap();
        let trans = MiniUNet::init(spec, HeadKind::TransitionRowSoftmax, 0).unwrap();
        let c_out = clean.layers().last().unwrap().out_c;
        let t_out = trans.layers().last().unwrap().out_c;
        assert_eq!(t_out, 5 * c_out);
    }

    #[test]
    fn odd_image_dims_are_a_configuration_error() {
        let net = MiniUNet::init(small_spec(), HeadKind::Clean, 1).unwrap();
        let img = Tensor4::zeros(1, 5, 4, 3);
        assert!(matches!(net.predict_clean(&img), Err(ConfigError::Shape(_))));
    }

    #[test]
    fn wrong_head_calls_are_rejected() {
        let clean = MiniUNet::init(small_spec(), HeadKind::Clean, 1).unwrap();
        let trans = MiniUNet::init(small_spec(), HeadKind::TransitionRowSoftmax, 1).unwrap();
        let img = rand_image(4, 4, 0);
        assert!(clean.predict_transition(&img, None).is_err());
        assert!(trans.predict_clean(&img).is_err());
    }

    #[test]
    fn prediction_is_deterministic() {
        let net = MiniUNet::init(small_spec(), HeadKind::Clean, 42).unwrap();
        let img = rand_image(6, 6, 9);
        let a = net.predict_clean(&img).unwrap();
        let b = net.predict_clean(&img).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn flat_params_round_trip() {
        let a = MiniUNet::init(small_spec(), HeadKind::Clean, 10).unwrap();
        let mut b = MiniUNet::init(small_spec(), HeadKind::Clean, 11).unwrap();
        b.load_flat_params(&a.flatten_params()).unwrap();
        let img = rand_image(4, 4, 12);
        assert_eq!(a.predict_clean(&img).unwrap(), b.predict_clean(&img).unwrap());
        assert!(b.load_flat_params(&[0.0]).is_err());
        assert!(b.load_flat_params(&vec![f64::NAN; b.param_count()]).is_err());
    }

    #[test]
    fn sgd_step_applies_and_clears_gradients() {
        let mut net = MiniUNet::init(small_spec(), HeadKind::Clean, 1).unwrap();
        // Plant p = 1.0 with gradient 2.0 in one slot: lr 0.1 gives 0.8.
        net.layers_mut()[0].w[0] = 1.0;
        net.params.grads[0].w[0] = 2.0;
        net.sgd_step(0.1);
        assert_relative_eq!(net.layers()[0].w[0], 0.8, max_relative = 1e-15);
        assert_eq!(net.params.grads[0].w[0], 0.0);
        // A second step without new gradients must not move parameters.
        net.sgd_step(0.1);
        assert_relative_eq!(net.layers()[0].w[0], 0.8, max_relative = 1e-15);
    }

    #[test]
    fn two_sgd_steps_on_planted_gradient_match_closed_form() {
        let mut net = MiniUNet::init(small_spec(), HeadKind::Clean, 1).unwrap();
        net.layers_mut()[0].w[0] = 1.0;
        for _ in 0..2 {
            net.params.grads[0].w[0] = 3.0;
            net.sgd_step(0.05);
        }
        assert_relative_eq!(net.layers()[0].w[0], 1.0 - 2.0 * 0.05 * 3.0, max_relative = 1e-15);
    }

    /// End-to-end gradient check through trunk, head and the grouped
    /// cross-entropy, for both softmax head shapes.
    #[test]
    fn whole_network_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let img = rand_image(4, 4, 13);
        for head in [HeadKind::Clean, HeadKind::TransitionRowSoftmax] {
            let spec = small_spec();
            let c = spec.num_classes;
            let group = c;
            let channels = head.channels(c);
            // Random non-negative weights stand in for posteriors.
            let weights = Tensor4::from_vec(
                1,
                4,
                4,
                channels,
                (0..16 * channels).map(|_| rng.random_range(0.0..1.0)).collect(),
            )
            .unwrap();
            let mut net = MiniUNet::init(spec, head, 21).unwrap();
            let (logits, cache) = net.forward(&img).unwrap();
            let probs = softmax_groups(&logits, group).unwrap();
            let (_, g_logits) = weighted_cross_entropy(&probs, &weights, group, 1.0).unwrap();
            net.zero_grads();
            net.backward(&cache, &g_logits);
            let analytic = net.flatten_grads();
            let mut params = net.flatten_params();
            let proto = net.clone();
            let err = finite_diff_check(&mut params, &analytic, 1e-5, |p| {
                let mut n = proto.clone();
                n.load_flat_params(p).unwrap();
                let (lg, _) = n.forward(&img).unwrap();
                let pr = softmax_groups(&lg, group).unwrap();
                weighted_cross_entropy(&pr, &weights, group, 1.0).unwrap().0
            });
            assert!(err < 1e-5, "gradient error {err} for {head:?}");
        }
    }
}
