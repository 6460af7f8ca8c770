//! Release gate: every claim the crate makes, checked end to end.
//!
//! Each test covers one numbered claim and prints a single summary line
//! with its measured values (visible under `--nocapture`). The expensive
//! desk-scale experiment behind claims 4-6 runs once and is shared.
//!
//! The list:
//!
//!  1. analytic gradients match central finite differences for every layer
//!     and every head, in under a minute;
//!  2. E-step posteriors match an independent brute-force enumeration;
//!  3. E/M cycles never decrease the joint log-likelihood on a one-pixel
//!     logit-table problem, and the cycles settle;
//!  4. on a desk-scale run the adaptive model beats the mixture baseline,
//!     which beats everything else, and reaches 90% test accuracy;
//!  5. the adaptive model's averaged transitions recover the true
//!     corruption matrices better than the global-matrix baseline;
//!  6. the logged agreement ratios land near their ground-truth values;
//!  7. the Otsu search equals an exhaustive oracle and K-Means never
//!     increases its objective;
//!  8. binary dilation is the complement of erosion on the complement;
//!  9. image, label, and checkpoint codecs round-trip bit-exactly, and
//!     generation is byte-reproducible;
//! 10. the uniformity/disparity score ranks a correct checkerboard
//!     segmentation strictly below random ones.

use std::sync::OnceLock;
use std::time::Instant;

use antn::classical::{kmeans_fit, otsu_thresholds, LUM_BINS};
use antn::em::{e_step_joint, e_step_single, marginal_log_likelihood, Likelihood};
use antn::io::checkpoint::{load_model, save_model, TrainedModel};
use antn::io::pnm::{decode_pgm, decode_ppm, encode_pgm, encode_ppm};
use antn::metrics::{
    average_transition, expected_transition, pixel_accuracy, uniformity_disparity,
    TransitionMatrix,
};
use antn::morph::{dilate_labels, erode_labels};
use antn::net::{HeadKind, MiniUNet, MiniUNetSpec};
use antn::ops::{
    sigmoid_forward, sigmoid_weighted_ce, softmax_groups, weighted_cross_entropy,
};
use antn::synth::{gen_synthetic, SynthConfig};
use antn::train::{
    train_antn, train_ntn, train_unet_direct, AntnModel, Dataset, LabelSource, NtnModel,
    NtnTransitionLayer, TrainConfig,
};
use antn::{LabelField, ProbField, Tensor4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn rand_image(h: usize, w: usize, seed: u64) -> Tensor4 {
    let mut r = rng(seed);
    let data = (0..h * w * 3).map(|_| r.random_range(0.0..1.0)).collect();
    Tensor4::from_vec(1, h, w, 3, data).unwrap()
}

// ---------------------------------------------------------------------------
// 1. Gradient correctness.

#[test]
fn gradients_match_central_differences() {
    let t0 = Instant::now();
    let spec = MiniUNetSpec { in_channels: 3, base_filters: 4, num_classes: 4 };
    let c = spec.num_classes;
    let heads = [
        HeadKind::Clean,
        HeadKind::TransitionRowSoftmax,
        HeadKind::TransitionUniformRemainder,
    ];
    let mut worst = 0.0f64;
    for head in heads {
        let channels = head.channels(c);
        for seed in 0..20u64 {
            let img = rand_image(8, 8, 900 + seed);
            let mut wr = rng(7000 + seed);
            let weights = Tensor4::from_vec(
                1,
                8,
                8,
                channels,
                (0..64 * channels).map(|_| wr.random_range(0.0..1.0)).collect(),
            )
            .unwrap();
            // Loss the training loop minimizes for this head, as a pure
            // function of the flat parameter vector.
            let loss_of = |net: &MiniUNet| -> (f64, Tensor4) {
                let (logits, _) = net.forward(&img).unwrap();
                match head {
                    HeadKind::TransitionUniformRemainder => {
                        let probs = sigmoid_forward(&logits);
                        sigmoid_weighted_ce(&probs, &weights, 1.0).unwrap()
                    }
                    _ => {
                        let probs = softmax_groups(&logits, c).unwrap();
                        weighted_cross_entropy(&probs, &weights, c, 1.0).unwrap()
                    }
                }
            };
            let mut net = MiniUNet::init(spec, head, 300 + seed).unwrap();
            let (_, cache) = net.forward(&img).unwrap();
            let (_, g_logits) = loss_of(&net);
            net.zero_grads();
            net.backward(&cache, &g_logits);
            let analytic = net.flatten_grads();
            let mut params = net.flatten_params();
            let proto = net.clone();
            let probe = |p: &[f64]| {
                let mut n = proto.clone();
                n.load_flat_params(p).unwrap();
                loss_of(&n).0
            };
            let mut fd = vec![0.0f64; params.len()];
            for (i, slot) in fd.iter_mut().enumerate() {
                // The activations are piecewise linear, so a probe interval
                // that straddles a kink measures a secant across two smooth
                // pieces; shrink the step until the interval sits on one.
                // The absolute floor absorbs roundoff, which grows as the
                // step shrinks (eps * loss / step, order 1e-14 / step here).
                let mut accepted = false;
                for step in [1e-5, 3e-6, 1e-6] {
                    let saved = params[i];
                    params[i] = saved + step;
                    let lp = probe(&params);
                    params[i] = saved - step;
                    let lm = probe(&params);
                    params[i] = saved;
                    *slot = (lp - lm) / (2.0 * step);
                    let diff = (*slot - analytic[i]).abs();
                    if diff <= 1e-5 * slot.abs().max(analytic[i].abs()) + 1e-14 / step {
                        accepted = true;
                        break;
                    }
                }
                assert!(
                    accepted,
                    "coordinate {i} off by {:.3e} at every step \
                     (analytic {:+.6e}, measured {:+.6e}, {head:?} seed {seed})",
                    (*slot - analytic[i]).abs(),
                    analytic[i],
                    *slot
                );
            }
            let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
            let diff_norm = norm(
                &analytic.iter().zip(&fd).map(|(a, f)| a - f).collect::<Vec<_>>(),
            );
            let err = diff_norm / norm(&analytic).max(norm(&fd));
            assert!(err < 1e-5, "gradient error {err:.3e} for {head:?} seed {seed}");
            worst = worst.max(err);
        }
    }
    let dt = t0.elapsed().as_secs_f64();
    assert!(dt < 60.0, "gradient sweep took {dt:.1}s, budget is one minute");
    println!(
        "[ 1/10] gradients vs central differences: worst rel err {worst:.3e} \
         over 3 heads x 20 seeds in {dt:.1}s: PASS"
    );
}

// ---------------------------------------------------------------------------
// 2. E-step equals brute-force enumeration.

#[test]
fn e_step_matches_brute_force_enumeration() {
    // 25 x 40 = 1000 pixels per class count.
    let (h, w) = (25usize, 40usize);
    let mut worst = 0.0f64;
    for c in [2usize, 3, 4] {
        let mut r = rng(40 + c as u64);
        let mut prior_data = vec![0.0; h * w * c];
        for row in prior_data.chunks_exact_mut(c) {
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = r.random_range(0.01..1.0);
                sum += *v;
            }
            row.iter_mut().for_each(|v| *v /= sum);
        }
        let prior = ProbField::from_vec(h, w, c, prior_data).unwrap();
        let col = |r: &mut ChaCha8Rng| {
            let data = (0..h * w * c).map(|_| r.random_range(0.01..1.0)).collect();
            ProbField::from_vec(h, w, c, data).unwrap()
        };
        let col1 = col(&mut r);
        let col2 = col(&mut r);

        let single = e_step_single(&prior, &col1).unwrap().posterior;
        let joint = e_step_joint(&prior, &col1, &col2).unwrap().posterior;

        // Straight-line enumeration over the latent class, written against
        // the definition rather than the library internals.
        for pix in 0..h * w {
            let p = &prior.data()[pix * c..(pix + 1) * c];
            let c1 = &col1.data()[pix * c..(pix + 1) * c];
            let c2 = &col2.data()[pix * c..(pix + 1) * c];
            let mut den_s = 0.0;
            let mut den_j = 0.0;
            for y in 0..c {
                den_s += p[y] * c1[y];
                den_j += p[y] * c1[y] * c2[y];
            }
            for y in 0..c {
                let qs = p[y] * c1[y] / den_s;
                let qj = p[y] * c1[y] * c2[y] / den_j;
                let es = (single.data()[pix * c + y] - qs).abs();
                let ej = (joint.data()[pix * c + y] - qj).abs();
                assert!(es <= 1e-12, "single posterior off by {es:.3e} (C={c})");
                assert!(ej <= 1e-12, "joint posterior off by {ej:.3e} (C={c})");
                worst = worst.max(es).max(ej);
            }
        }
    }
    println!(
        "[ 2/10] E-step vs brute force: worst abs err {worst:.3e} \
         over 1000 pixels x C in {{2,3,4}}: PASS"
    );
}

// ---------------------------------------------------------------------------
// 3. EM monotonicity on the one-pixel logit-table problem.

/// Runs 200 E/M cycles on a single pixel where the clean predictor and both
/// transition predictors are bare logit tables. Returns (first, last,
/// smallest per-cycle delta, delta of one extra cycle).
fn toy_em(c: usize, obs1: usize, obs2: usize, seed: u64) -> (f64, f64, f64, f64) {
    let lr = 0.1;
    let mut r = rng(seed);
    let mut logit = |n: usize| {
        Tensor4::from_vec(1, 1, 1, n, (0..n).map(|_| r.random_range(-0.5..0.5)).collect())
            .unwrap()
    };
    let mut z3 = logit(c);
    let mut z1 = logit(c * c);
    let mut z2 = logit(c * c);

    let fields = |z3: &Tensor4, z1: &Tensor4, z2: &Tensor4| {
        let p = ProbField::from_tensor(softmax_groups(z3, c).unwrap()).unwrap();
        let t1 = softmax_groups(z1, c).unwrap();
        let t2 = softmax_groups(z2, c).unwrap();
        let col = |t: &Tensor4, obs: usize| {
            let v: Vec<f64> = (0..c).map(|y| t.data()[y * c + obs]).collect();
            ProbField::from_vec(1, 1, c, v).unwrap()
        };
        (p, col(&t1, obs1), col(&t2, obs2), t1, t2)
    };
    let l3_of = |z3: &Tensor4, z1: &Tensor4, z2: &Tensor4| {
        let (p, c1, c2, _, _) = fields(z3, z1, z2);
        marginal_log_likelihood(&p, &c1, &c2, Likelihood::L3).unwrap()
    };
    // One posterior-weighted gradient step on a transition table: weight
    // mass sits at the observed column of every row.
    let step_table = |z: &mut Tensor4, t: &Tensor4, q: &ProbField, obs: usize| {
        let mut wdata = vec![0.0; c * c];
        for y in 0..c {
            wdata[y * c + obs] = q.at(0, 0, y);
        }
        let w = Tensor4::from_vec(1, 1, 1, c * c, wdata).unwrap();
        let (_, g) = weighted_cross_entropy(t, &w, c, 1.0).unwrap();
        for (zv, gv) in z.data_mut().iter_mut().zip(g.data()) {
            *zv -= lr * gv;
        }
    };
    let mut cycle = |z3: &mut Tensor4, z1: &mut Tensor4, z2: &mut Tensor4| {
        let (p, c1, c2, t1, t2) = fields(z3, z1, z2);
        let q1 = e_step_single(&p, &c1).unwrap().posterior;
        let q2 = e_step_single(&p, &c2).unwrap().posterior;
        let q3 = e_step_joint(&p, &c1, &c2).unwrap().posterior;
        step_table(z1, &t1, &q1, obs1);
        step_table(z2, &t2, &q2, obs2);
        let w3 = Tensor4::from_vec(1, 1, 1, c, q3.data().to_vec()).unwrap();
        let p3 = softmax_groups(z3, c).unwrap();
        let (_, g3) = weighted_cross_entropy(&p3, &w3, c, 1.0).unwrap();
        for (zv, gv) in z3.data_mut().iter_mut().zip(g3.data()) {
            *zv -= lr * gv;
        }
    };

    let first = l3_of(&z3, &z1, &z2);
    let mut prev = first;
    let mut min_delta = f64::INFINITY;
    for k in 0..200 {
        cycle(&mut z3, &mut z1, &mut z2);
        let now = l3_of(&z3, &z1, &z2);
        let delta = now - prev;
        assert!(delta >= -1e-9, "cycle {k} dropped L3 by {:.3e} (C={c})", -delta);
        min_delta = min_delta.min(delta);
        prev = now;
    }
    cycle(&mut z3, &mut z1, &mut z2);
    let extra = l3_of(&z3, &z1, &z2) - prev;
    (first, prev, min_delta, extra)
}

#[test]
fn em_cycles_never_decrease_the_joint_likelihood() {
    let mut tail = 0.0f64;
    for (c, obs1, obs2, seed) in [(2usize, 0usize, 1usize, 51u64), (3, 0, 1, 52), (4, 2, 2, 53)] {
        let (first, last, min_delta, extra) = toy_em(c, obs1, obs2, seed);
        assert!(last > first, "200 cycles should improve L3 ({first} -> {last}, C={c})");
        assert!(min_delta >= -1e-9);
        // Settled: per-cycle progress decays harmonically once the softmax
        // tables saturate, so the marginal cycle contributing under 1% of
        // the total gain (and under 5e-3 outright) counts as converged.
        assert!(
            extra.abs() < 5e-3 && extra.abs() < (last - first) / 100.0,
            "cycle 201 still moves L3 by {extra:.3e} after a gain of {:.3e} (C={c})",
            last - first
        );
        tail = tail.max(extra.abs());
    }
    println!(
        "[ 3/10] one-pixel EM: L3 non-decreasing within 1e-9 over 200 cycles, \
         settled (next-cycle delta <= {tail:.2e}): PASS"
    );
}

// ---------------------------------------------------------------------------
// 4-6. The shared desk-scale experiment.

struct DeskRun {
    elapsed_secs: f64,
    acc_unet1: f64,
    acc_unet2: f64,
    acc_unet3: f64,
    acc_ntn1: f64,
    acc_ntn2: f64,
    acc_antn: f64,
    frob_antn1: f64,
    frob_antn2: f64,
    frob_ntn1: f64,
    frob_ntn2: f64,
    r1_est: f64,
    r2_est: f64,
    r1_true: f64,
    r2_true: f64,
}

static DESK: OnceLock<DeskRun> = OnceLock::new();

fn desk_train_config() -> TrainConfig {
    // Scaled schedule: 30/60/60 epochs instead of 100/200/200, with the
    // learning-rate drop and the global-matrix diffusion phase scaled by
    // the same 0.3 factor. The rate itself is tuned for this plain-SGD
    // setup at 64x64; the full-size defaults underfit within this budget.
    TrainConfig {
        num_classes: 4,
        base_filters: 8,
        epochs_init_clean: 30,
        epochs_transition: 60,
        epochs_alternate: 60,
        alternate_interval: 5,
        epochs_ntn_diffuse: 45,
        lr_main: 1e-3,
        lr_final: 1e-4,
        lr_drop_epoch: 135,
        batch_size: 1,
        seed: 0,
        ..TrainConfig::default()
    }
}

/// Pixel accuracy of a clean-label network pooled over a whole set.
fn pooled_accuracy(net: &MiniUNet, images: &[Tensor4], truth: &[LabelField]) -> f64 {
    let mut agree = 0.0;
    let mut total = 0usize;
    for (img, t) in images.iter().zip(truth) {
        let pred = net.predict_clean(img).unwrap().argmax_labels();
        agree += pixel_accuracy(&pred, t).unwrap() * t.pixels() as f64;
        total += t.pixels();
    }
    agree / total as f64
}

/// All label fields flattened into one 1 x N grid so transition and
/// agreement statistics pool over every pixel.
fn pooled_labels(fields: &[LabelField]) -> LabelField {
    let c = fields[0].num_classes();
    let data: Vec<u8> = fields.iter().flat_map(|f| f.data().iter().copied()).collect();
    let n = data.len();
    LabelField::from_vec(1, n, c, data).unwrap()
}

fn agreement_ratio(a: &LabelField, b: &LabelField) -> f64 {
    let agree = a.data().iter().zip(b.data()).filter(|(x, y)| x == y).count();
    let disagree = a.pixels() - agree;
    if disagree == 0 {
        f64::INFINITY
    } else {
        agree as f64 / disagree as f64
    }
}

fn desk() -> &'static DeskRun {
    DESK.get_or_init(|| {
        let synth = SynthConfig::default();
        let all = gen_synthetic(&synth).unwrap();
        let (train, test) = all.split_at(35);
        let images: Vec<Tensor4> = train.iter().map(|(i, _)| i.clone()).collect();
        let clean: Vec<LabelField> = train.iter().map(|(_, l)| l.clone()).collect();
        let noisy1: Vec<LabelField> =
            clean.iter().map(|l| erode_labels(l, synth.se_size).unwrap()).collect();
        let noisy2: Vec<LabelField> =
            clean.iter().map(|l| dilate_labels(l, synth.se_size).unwrap()).collect();
        let test_images: Vec<Tensor4> = test.iter().map(|(i, _)| i.clone()).collect();
        let test_clean: Vec<LabelField> = test.iter().map(|(_, l)| l.clone()).collect();

        let data = Dataset {
            images,
            noisy1: noisy1.clone(),
            noisy2: Some(noisy2.clone()),
            clean_ref: Some(clean.clone()),
        };
        let cfg = desk_train_config();

        let t0 = Instant::now();
        let (u1, u2, u3, n1, n2, antn) = std::thread::scope(|s| {
            let h1 = s.spawn(|| train_unet_direct(&data, LabelSource::Noisy1, &cfg));
            let h2 = s.spawn(|| train_unet_direct(&data, LabelSource::Noisy2, &cfg));
            let h3 = s.spawn(|| train_unet_direct(&data, LabelSource::Mixture, &cfg));
            let h4 = s.spawn(|| train_ntn(&data, LabelSource::Noisy1, &cfg));
            let h5 = s.spawn(|| train_ntn(&data, LabelSource::Noisy2, &cfg));
            let h6 = s.spawn(|| train_antn(&data, &cfg));
            (
                h1.join().unwrap().expect("direct training on source 1"),
                h2.join().unwrap().expect("direct training on source 2"),
                h3.join().unwrap().expect("direct training on the mixture"),
                h4.join().unwrap().expect("global-matrix training on source 1"),
                h5.join().unwrap().expect("global-matrix training on source 2"),
                h6.join().unwrap().expect("adaptive training"),
            )
        });
        let elapsed_secs = t0.elapsed().as_secs_f64();

        let (antn_model, antn_log) = antn;
        let c = cfg.num_classes;

        let clean_pool = pooled_labels(&clean);
        let n1_pool = pooled_labels(&noisy1);
        let n2_pool = pooled_labels(&noisy2);
        let expected1 = expected_transition(&clean_pool, &n1_pool).unwrap();
        let expected2 = expected_transition(&clean_pool, &n2_pool).unwrap();
        let avg1 = average_transition(&antn_model.trans1, &data.images, None).unwrap();
        let avg2 = average_transition(&antn_model.trans2, &data.images, None).unwrap();
        let q1 = TransitionMatrix::new(c, n1.0.q.q_matrix(), vec![true; c]).unwrap();
        let q2 = TransitionMatrix::new(c, n2.0.q.q_matrix(), vec![true; c]).unwrap();

        let last = antn_log.last().expect("training logged at least one epoch");

        DeskRun {
            elapsed_secs,
            acc_unet1: pooled_accuracy(&u1.0, &test_images, &test_clean),
            acc_unet2: pooled_accuracy(&u2.0, &test_images, &test_clean),
            acc_unet3: pooled_accuracy(&u3.0, &test_images, &test_clean),
            acc_ntn1: pooled_accuracy(&n1.0.clean, &test_images, &test_clean),
            acc_ntn2: pooled_accuracy(&n2.0.clean, &test_images, &test_clean),
            acc_antn: pooled_accuracy(&antn_model.clean, &test_images, &test_clean),
            frob_antn1: avg1.frobenius_distance(&expected1).unwrap(),
            frob_antn2: avg2.frobenius_distance(&expected2).unwrap(),
            frob_ntn1: q1.frobenius_distance(&expected1).unwrap(),
            frob_ntn2: q2.frobenius_distance(&expected2).unwrap(),
            r1_est: last.r1,
            r2_est: last.r2,
            r1_true: agreement_ratio(&clean_pool, &n1_pool),
            r2_true: agreement_ratio(&clean_pool, &n2_pool),
        }
    })
}

#[test]
fn desk_run_recovers_the_accuracy_ordering() {
    let d = desk();
    let others = [
        ("direct/1", d.acc_unet1),
        ("direct/2", d.acc_unet2),
        ("global/1", d.acc_ntn1),
        ("global/2", d.acc_ntn2),
    ];
    let (best_name, best_other) =
        others.iter().fold(("", f64::MIN), |acc, &(n, v)| if v > acc.1 { (n, v) } else { acc });
    assert!(
        d.acc_antn > d.acc_unet3,
        "adaptive {:.4} should beat the mixture baseline {:.4}",
        d.acc_antn,
        d.acc_unet3
    );
    assert!(
        d.acc_unet3 > best_other,
        "mixture {:.4} should beat the remaining baselines (best: {best_name} {best_other:.4})",
        d.acc_unet3
    );
    assert!(d.acc_antn >= 0.90, "adaptive accuracy {:.4} below 0.90", d.acc_antn);
    println!(
        "[ 4/10] desk ordering: adaptive {:.4} > mixture {:.4} > best other {:.4} \
         ({:.0}s wall, 30 min target): PASS",
        d.acc_antn, d.acc_unet3, best_other, d.elapsed_secs
    );
}

#[test]
fn desk_run_transitions_beat_the_global_matrix() {
    let d = desk();
    assert!(
        d.frob_antn1 < d.frob_ntn1,
        "source 1: averaged transitions {:.4} not closer than global matrix {:.4}",
        d.frob_antn1,
        d.frob_ntn1
    );
    assert!(
        d.frob_antn2 < d.frob_ntn2,
        "source 2: averaged transitions {:.4} not closer than global matrix {:.4}",
        d.frob_antn2,
        d.frob_ntn2
    );
    println!(
        "[ 5/10] transition recovery: {:.4} < {:.4} (erosion), {:.4} < {:.4} (dilation): PASS",
        d.frob_antn1, d.frob_ntn1, d.frob_antn2, d.frob_ntn2
    );
}

#[test]
fn desk_run_agreement_ratios_track_ground_truth() {
    let d = desk();
    for (name, est, truth) in
        [("source 1", d.r1_est, d.r1_true), ("source 2", d.r2_est, d.r2_true)]
    {
        if !truth.is_finite() {
            continue;
        }
        assert!(est.is_finite(), "{name}: estimated ratio is not finite (truth {truth:.3})");
        let rel = (est - truth).abs() / truth;
        assert!(
            rel <= 0.25,
            "{name}: estimated ratio {est:.3} is {:.0}% off the actual {truth:.3}",
            rel * 100.0
        );
    }
    println!(
        "[ 6/10] agreement ratios: {:.3} vs {:.3} (erosion), {:.3} vs {:.3} (dilation), \
         both within 25%: PASS",
        d.r1_est, d.r1_true, d.r2_est, d.r2_true
    );
}

// ---------------------------------------------------------------------------
// 7. Classical segmenters against oracles.

/// Exhaustive search for the threshold tuple maximizing between-class
/// variance, written directly from the definition: recursion over strictly
/// increasing tuples, variance from per-interval means. Strictly greater
/// scores win, so the lexicographically first optimum is kept.
fn oracle_otsu(hist: &[u64; LUM_BINS], classes: usize) -> Vec<usize> {
    let mut cum_n = vec![0.0f64; LUM_BINS + 1];
    let mut cum_s = vec![0.0f64; LUM_BINS + 1];
    for i in 0..LUM_BINS {
        cum_n[i + 1] = cum_n[i] + hist[i] as f64;
        cum_s[i + 1] = cum_s[i] + (i as f64) * hist[i] as f64;
    }
    let total_n = cum_n[LUM_BINS];
    let mean_t = cum_s[LUM_BINS] / total_n;

    fn recurse(
        cum_n: &[f64],
        cum_s: &[f64],
        total_n: f64,
        mean_t: f64,
        tuple: &mut Vec<usize>,
        remaining: usize,
        next: usize,
        acc: f64,
        best: &mut (f64, Vec<usize>),
    ) {
        if remaining == 0 {
            let lo = tuple.last().map_or(0, |&t| t + 1);
            let n = cum_n[LUM_BINS] - cum_n[lo];
            let mut score = acc;
            if n > 0.0 {
                let mu = (cum_s[LUM_BINS] - cum_s[lo]) / n;
                score += n / total_n * (mu - mean_t) * (mu - mean_t);
            }
            if score > best.0 {
                *best = (score, tuple.clone());
            }
            return;
        }
        // Leave room for the remaining thresholds above this one.
        for t in next..=LUM_BINS - 1 - remaining {
            let lo = tuple.last().map_or(0, |&p| p + 1);
            let n = cum_n[t + 1] - cum_n[lo];
            let mut acc2 = acc;
            if n > 0.0 {
                let mu = (cum_s[t + 1] - cum_s[lo]) / n;
                acc2 += n / total_n * (mu - mean_t) * (mu - mean_t);
            }
            tuple.push(t);
            recurse(cum_n, cum_s, total_n, mean_t, tuple, remaining - 1, t + 1, acc2, best);
            tuple.pop();
        }
    }

    let mut best = (f64::NEG_INFINITY, Vec::new());
    let mut tuple = Vec::new();
    recurse(&cum_n, &cum_s, total_n, mean_t, &mut tuple, classes - 1, 0, 0.0, &mut best);
    best.1
}

#[test]
fn classical_segmenters_match_their_oracles() {
    let mut r = rng(70);
    // Threshold search: random sparse histograms, exact tuple equality.
    let mut checked = 0usize;
    for case in 0..100 {
        let mut hist = [0u64; LUM_BINS];
        let nonzero = r.random_range(5..=60);
        for _ in 0..nonzero {
            hist[r.random_range(0..LUM_BINS)] += r.random_range(1..100) as u64;
        }
        for classes in [2usize, 3] {
            let got = otsu_thresholds(&hist, classes).unwrap();
            let want = oracle_otsu(&hist, classes);
            assert_eq!(got, want, "threshold tuple differs (case {case}, {classes} classes)");
            checked += 1;
        }
        if case < 10 {
            let got = otsu_thresholds(&hist, 4).unwrap();
            let want = oracle_otsu(&hist, 4);
            assert_eq!(got, want, "threshold tuple differs (case {case}, 4 classes)");
            checked += 1;
        }
    }

    // Lloyd iterations: the recorded objective never increases.
    let mut iters_seen = 0usize;
    for case in 0..100u64 {
        let k = 2 + (case as usize) % 4;
        let n = 20 + (case as usize * 7) % 180;
        // Half blob mixture, half uniform: both regimes exercised.
        let pts: Vec<[f64; 3]> = (0..n)
            .map(|i| {
                if i % 2 == 0 {
                    let b = i % k;
                    let center = (b as f64 + 0.5) / k as f64;
                    [
                        (center + r.random_range(-0.1..0.1)).clamp(0.0, 1.0),
                        (center + r.random_range(-0.1..0.1)).clamp(0.0, 1.0),
                        (center + r.random_range(-0.1..0.1)).clamp(0.0, 1.0),
                    ]
                } else {
                    [r.random_range(0.0..1.0), r.random_range(0.0..1.0), r.random_range(0.0..1.0)]
                }
            })
            .collect();
        let fit = kmeans_fit(&pts, k, 500 + case).unwrap();
        assert!(!fit.wcss.is_empty());
        for (i, pair) in fit.wcss.windows(2).enumerate() {
            assert!(
                pair[1] <= pair[0] + 1e-9,
                "objective rose from {} to {} at iteration {i} (case {case})",
                pair[0],
                pair[1]
            );
        }
        iters_seen += fit.wcss.len();
    }
    println!(
        "[ 7/10] classical segmenters: {checked} threshold searches equal the oracle, \
         objective non-increasing over {iters_seen} Lloyd iterations: PASS"
    );
}

// ---------------------------------------------------------------------------
// 8. Morphological duality.

#[test]
fn binary_duality_holds_on_random_masks() {
    let mut r = rng(80);
    let complement = |f: &LabelField| {
        LabelField::from_vec(f.h(), f.w(), 2, f.data().iter().map(|&v| 1 - v).collect()).unwrap()
    };
    let mut cases = 0usize;
    for _ in 0..100 {
        let data: Vec<u8> = (0..256).map(|_| r.random_range(0..2)).collect();
        let mask = LabelField::from_vec(16, 16, 2, data).unwrap();
        for se in [3usize, 5] {
            let dilated = dilate_labels(&mask, se).unwrap();
            let dual = complement(&erode_labels(&complement(&mask), se).unwrap());
            assert_eq!(dilated, dual, "duality broke for a {se}x{se} window");
            cases += 1;
        }
    }
    println!("[ 8/10] dilation = complement . erosion . complement on {cases} masks: PASS");
}

// ---------------------------------------------------------------------------
// 9. I/O round trips.

#[test]
fn io_round_trips_are_bit_exact() {
    let mut r = rng(90);

    // Color images: any canonical file is reproduced byte for byte.
    for _ in 0..100 {
        let (w, h) = (r.random_range(1..=13), r.random_range(1..=13));
        let payload: Vec<u8> = (0..3 * w * h).map(|_| r.random_range(0..=255)).collect();
        let mut bytes = format!("P6\n{w} {h}\n255\n").into_bytes();
        bytes.extend_from_slice(&payload);
        let image = decode_ppm(&bytes).unwrap();
        assert_eq!(encode_ppm(&image).unwrap(), bytes);
        // A commented header is cosmetic: same pixels.
        let mut commented = format!("P6\n# scratch\n{w} {h}\n255\n").into_bytes();
        commented.extend_from_slice(&payload);
        assert_eq!(decode_ppm(&commented).unwrap().data(), image.data());
    }

    // Label maps, under both a tight and the loosest class bound.
    for case in 0..100 {
        let classes = 2 + case % 9;
        let (w, h) = (r.random_range(1..=13), r.random_range(1..=13));
        let labels: Vec<u8> = (0..w * h).map(|_| r.random_range(0..classes) as u8).collect();
        let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
        bytes.extend_from_slice(&labels);
        let tight = decode_pgm(&bytes, classes).unwrap();
        let loose = decode_pgm(&bytes, 256).unwrap();
        assert_eq!(tight.data(), loose.data());
        assert_eq!(encode_pgm(&tight), bytes);
    }

    // Checkpoints: save, load, save again; bytes and parameters identical.
    let spec = |f: usize, c: usize| MiniUNetSpec {
        in_channels: 3,
        base_filters: f,
        num_classes: c,
    };
    let mut scrambled = MiniUNet::init(spec(2, 3), HeadKind::Clean, 11).unwrap();
    let n = scrambled.param_count();
    let noise: Vec<f64> = (0..n).map(|_| r.random_range(-3.0..3.0)).collect();
    scrambled.load_flat_params(&noise).unwrap();
    let q_logits: Vec<f64> = (0..16).map(|_| r.random_range(-2.0..2.0)).collect();
    let models = [
        TrainedModel::Unet(MiniUNet::init(spec(4, 4), HeadKind::Clean, 1).unwrap()),
        TrainedModel::Unet(scrambled),
        TrainedModel::Ntn(NtnModel {
            clean: MiniUNet::init(spec(2, 4), HeadKind::Clean, 2).unwrap(),
            q: NtnTransitionLayer::from_logits(4, q_logits).unwrap(),
        }),
        TrainedModel::Antn(AntnModel {
            clean: MiniUNet::init(spec(2, 4), HeadKind::Clean, 3).unwrap(),
            trans1: MiniUNet::init(spec(2, 4), HeadKind::TransitionRowSoftmax, 4).unwrap(),
            trans2: MiniUNet::init(spec(2, 4), HeadKind::TransitionRowSoftmax, 5).unwrap(),
        }),
        TrainedModel::Antn(AntnModel {
            clean: MiniUNet::init(spec(2, 4), HeadKind::Clean, 6).unwrap(),
            trans1: MiniUNet::init(spec(2, 4), HeadKind::TransitionUniformRemainder, 7).unwrap(),
            trans2: MiniUNet::init(spec(2, 4), HeadKind::TransitionUniformRemainder, 8).unwrap(),
        }),
    ];
    for model in &models {
        let bytes = save_model(model);
        let loaded = load_model(&bytes).unwrap();
        assert_eq!(save_model(&loaded), bytes);
        let params = |m: &TrainedModel| -> Vec<f64> {
            match m {
                TrainedModel::Unet(n) => n.flatten_params(),
                TrainedModel::Ntn(n) => {
                    let mut p = n.clean.flatten_params();
                    p.extend_from_slice(n.q.logits());
                    p
                }
                TrainedModel::Antn(a) => {
                    let mut p = a.clean.flatten_params();
                    p.extend(a.trans1.flatten_params());
                    p.extend(a.trans2.flatten_params());
                    p
                }
            }
        };
        let (a, b) = (params(model), params(&loaded));
        assert_eq!(a.len(), b.len());
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    // Generation is byte-reproducible: the same seed yields identical files.
    let synth = SynthConfig {
        image_size: 32,
        images_total: 3,
        radius_min: 4.0,
        radius_max: 8.0,
        seed: 9,
        ..SynthConfig::default()
    };
    let (one, two) = (gen_synthetic(&synth).unwrap(), gen_synthetic(&synth).unwrap());
    assert_eq!(one.len(), two.len());
    for ((img_a, lab_a), (img_b, lab_b)) in one.iter().zip(&two) {
        assert_eq!(encode_ppm(img_a).unwrap(), encode_ppm(img_b).unwrap());
        assert_eq!(encode_pgm(lab_a), encode_pgm(lab_b));
    }
    println!(
        "[ 9/10] io round trips: 100 color files, 100 label files, 5 checkpoints, \
         generation reproducible: PASS"
    );
}

// ---------------------------------------------------------------------------
// 10. Unsupervised score sanity.

#[test]
fn checkerboard_scores_below_random_segmentations() {
    let (h, w) = (16usize, 16usize);
    let a = [0.85, 0.15, 0.20];
    let b = [0.15, 0.25, 0.85];
    let mut img = vec![0.0f64; h * w * 3];
    let mut labels = vec![0u8; h * w];
    for y in 0..h {
        for x in 0..w {
            let cell = ((y + x) % 2) as u8;
            labels[y * w + x] = cell;
            let color = if cell == 0 { a } else { b };
            img[(y * w + x) * 3..(y * w + x) * 3 + 3].copy_from_slice(&color);
        }
    }
    let image = Tensor4::from_vec(1, h, w, 3, img).unwrap();
    let correct = LabelField::from_vec(h, w, 2, labels).unwrap();
    let score = uniformity_disparity(&image, &correct).unwrap();

    let mut r = rng(100);
    let mut worst_gap = f64::INFINITY;
    for draw in 0..10 {
        let data: Vec<u8> = (0..h * w).map(|_| r.random_range(0..2)).collect();
        let random = LabelField::from_vec(h, w, 2, data).unwrap();
        let other = uniformity_disparity(&image, &random).unwrap();
        assert!(
            other > score,
            "random draw {draw} scored {other:.4}, not above the correct {score:.4}"
        );
        worst_gap = worst_gap.min(other - score);
    }
    println!(
        "[10/10] uniformity/disparity: correct checkerboard {score:.4}, \
         10 random segmentations all higher (closest gap {worst_gap:.4}): PASS"
    );
}
