//! Independent oracles for the numerical components.

mod common;

use rand::Rng;

use grumo::augment::Augmentation;
use grumo::baselines::{dropout_samples, dropstar_uncertainty, pixelwise_variance};
use grumo::kernels::{conv2d, ConvGeometry};
use grumo::maps::{normalize_masked, ValidMask};
use grumo::metrics::{self, MetricKind, PixelRecord};
use grumo::model::{ForwardOptions, Model, ModelConfig};
use grumo::rng::{normal, seeded};
use grumo::synth::{gen_scene, SceneParams, Split};
use grumo::train::{mean_abs_rel, train_fixture, TrainOptions};
use grumo::uncertainty::{
    attach_aux_loss, estimate, extract_gradients, layer_uncertainty, reference_for, ChannelReduce, GradConfig,
};
use grumo::{Shape, Tensor};

fn random<T: grumo::Scalar>(seed: u64, shape: Shape) -> Tensor<T> {
    let mut r = seeded(seed);
    Tensor::from_fn(shape, |_, _, _, _| T::narrow(normal(&mut r)))
}

fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
    let (xs, ws) = (x.shape(), w.shape());
    let oh = (xs.h + 2 * pad - ws.h) / stride + 1;
    let ow = (xs.w + 2 * pad - ws.w) / stride + 1;
    Tensor::from_fn(Shape::new(xs.n, ws.n, oh, ow), |n, o, y, xo| {
        let mut acc = b.data()[o];
        for c in 0..xs.c {
            for ky in 0..ws.h {
                for kx in 0..ws.w {
                    let iy = (y * stride + ky) as isize - pad as isize;
                    let ix = (xo * stride + kx) as isize - pad as isize;
                    if iy >= 0 && ix >= 0 && (iy as usize) < xs.h && (ix as usize) < xs.w {
                        acc += w.at(o, c, ky, kx) * x.at(n, c, iy as usize, ix as usize);
                    }
                }
            }
        }
        acc
    })
}

#[test]
fn strided_conv_matches_naive_loop() {
    let x = random::<f32>(1, Shape::new(1, 2, 5, 5));
    let w = random::<f32>(2, Shape::new(3, 2, 3, 3));
    let b = random::<f32>(3, Shape::new(1, 3, 1, 1));
    let got = conv2d(&x, &w, &b, ConvGeometry { stride: 2, pad: 1 }).unwrap();
    let want = naive_conv(&x.cast(), &w.cast(), &b.cast(), 2, 1);
    assert_eq!(got.shape(), Shape::new(1, 3, 3, 3));
    assert!((got.at(0, 0, 0, 0) as f64 - want.at(0, 0, 0, 0)).abs() < 1e-6);
    for (g, w) in got.data().iter().zip(want.data()) {
        assert!((*g as f64 - w).abs() < 1e-5, "{g} vs {w}");
    }
}

#[test]
fn random_convs_match_naive_loop() {
    let mut r = seeded(77);
    for case in 0..40u64 {
        let (n, c, o) = (r.random_range(1..=2), r.random_range(1..=4), r.random_range(1..=4));
        let k = [1, 2, 3, 5][r.random_range(0..4)];
        let (h, w) = (r.random_range(k..=9), r.random_range(k..=9));
        let (stride, pad) = (r.random_range(1..=3), r.random_range(0..=k / 2 + 1));
        let x = random::<f64>(case * 3, Shape::new(n, c, h, w));
        let wt = random::<f64>(case * 3 + 1, Shape::new(o, c, k, k));
        let b = random::<f64>(case * 3 + 2, Shape::new(1, o, 1, 1));
        let got = conv2d(&x, &wt, &b, ConvGeometry { stride, pad }).unwrap();
        let want = naive_conv(&x, &wt, &b, stride, pad);
        assert_eq!(got.shape(), want.shape(), "case {case}");
        for (g, w) in got.data().iter().zip(want.data()) {
            assert!((g - w).abs() < 1e-12, "case {case}: {g} vs {w}");
        }
    }
}

fn small_image(seed: u64, size: usize) -> Tensor<f64> {
    gen_scene(seed, &SceneParams::sized(size, size)).unwrap().image.cast()
}

#[test]
fn extracted_gradients_match_replayed_finite_differences() {
    let model = Model::<f32>::init(ModelConfig::default(), 4).unwrap().cast::<f64>();
    let image = small_image(11, 16);
    let cfg = GradConfig::ours();
    let mut bundle = model.forward(&image, ForwardOptions::traced()).unwrap();
    let (d_ref, mask) = reference_for(&model, &image, &cfg.aug).unwrap();
    let loss = attach_aux_loss(bundle.trace.as_mut().unwrap(), &d_ref, &mask, None).unwrap();
    let tags: Vec<String> = ["dec2", "dec6", "dec9"].iter().map(|s| s.to_string()).collect();
    let grads = extract_gradients(&bundle, loss, &tags).unwrap();

    let trace = bundle.trace.as_mut().unwrap();
    let mut r = seeded(5);
    let mut worst = 0.0f64;
    for tag in &tags {
        let node = trace.tape.tagged(tag).unwrap();
        let base = trace.tape.value(node).unwrap().clone();
        assert_eq!(grads[tag].shape(), base.shape());
        for _ in 0..20 {
            let j = r.random_range(0..base.numel());
            let mut eval = |delta: f64| {
                let mut data = base.data().to_vec();
                data[j] += delta;
                trace.tape.replay(&[(node, Tensor::new(base.shape(), data).unwrap())]).unwrap();
                trace.tape.value(loss).unwrap().data()[0]
            };
            let eps = 1e-4;
            let numeric = (eval(eps) - eval(-eps)) / (2.0 * eps);
            // Restore the recorded values before the next probe reads its base.
            trace.tape.replay(&[]).unwrap();
            let analytic = grads[tag].data()[j];
            let rel = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-8);
            worst = worst.max(rel);
        }
    }
    assert!(worst < 1e-4, "max relative error {worst:e}");
}

#[test]
fn variance_term_gradient_reaches_the_log_variance() {
    let model = Model::<f32>::init(ModelConfig::predictive(), 2).unwrap().cast::<f64>();
    let image = small_image(3, 16);
    let lambda = 2.0;
    let mut bundle = model.forward(&image, ForwardOptions::traced()).unwrap();
    let (d_ref, mask) = reference_for(&model, &image, &Augmentation::HFlip).unwrap();
    let trace = bundle.trace.as_mut().unwrap();
    let loss = attach_aux_loss(trace, &d_ref, &mask, Some(lambda)).unwrap();
    let grads = trace.tape.backward(loss).unwrap();

    // d/ds of λ·exp(s) is λ·σ² wherever the clamp is inactive; the depth term
    // does not depend on s.
    let logit = trace.tape.value(trace.sigma_logit.unwrap()).unwrap().clone();
    let sigma_sq = bundle.sigma_sq.as_ref().unwrap();
    let g = grads.get(trace.sigma_logit.unwrap()).unwrap().unwrap();
    for i in 0..g.numel() {
        assert!(logit.data()[i].abs() < 10.0);
        let want = lambda * sigma_sq.data()[i];
        assert!((g.data()[i] - want).abs() <= 1e-12 * want.abs().max(1.0));
    }
    // And ∂/∂d̂ of the squared residual is 2(d̂ - d_ref).
    let gd = grads.get(trace.depth).unwrap().unwrap();
    for ((g, d), r) in gd.data().iter().zip(bundle.depth.values()).zip(d_ref.values()) {
        assert!((g - 2.0 * (d - r)).abs() < 1e-12);
    }
}

#[test]
fn scaled_loss_leaves_the_map_unchanged() {
    let model = Model::<f32>::init(ModelConfig::default(), 6).unwrap();
    let image = gen_scene(8, &SceneParams::sized(16, 16)).unwrap().image;
    let map = |scale: Option<f32>| {
        let mut bundle = model.forward(&image, ForwardOptions::traced()).unwrap();
        let (d_ref, mask) = reference_for(&model, &image, &Augmentation::HFlip).unwrap();
        let trace = bundle.trace.as_mut().unwrap();
        let mut loss = attach_aux_loss(trace, &d_ref, &mask, None).unwrap();
        if let Some(c) = scale {
            loss = trace.tape.mul_scalar(loss, c).unwrap();
        }
        let tag = "dec6".to_string();
        let g = extract_gradients(&bundle, loss, std::slice::from_ref(&tag)).unwrap();
        layer_uncertainty(&g[&tag], &mask, ChannelReduce::AbsMax).unwrap().values().clone()
    };
    let base = map(None);
    assert!(map(Some(4.0)).bits_eq(&base), "power-of-two scaling is exact");
    for (a, b) in map(Some(3.7)).data().iter().zip(base.data()) {
        assert!((a - b).abs() < 1e-6);
    }
}

/// Sutherland-Hodgman clipping of `poly` against the convex polygon `clip`
/// (both counter-clockwise).
fn clip_polygon(poly: &[(f64, f64)], clip: &[(f64, f64)]) -> Vec<(f64, f64)> {
    let mut out = poly.to_vec();
    for i in 0..clip.len() {
        let (a, b) = (clip[i], clip[(i + 1) % clip.len()]);
        let inside = |p: (f64, f64)| (b.0 - a.0) * (p.1 - a.1) - (b.1 - a.1) * (p.0 - a.0) >= 0.0;
        let cross = |p: (f64, f64), q: (f64, f64)| {
            let (dx, dy) = (q.0 - p.0, q.1 - p.1);
            let (ex, ey) = (b.0 - a.0, b.1 - a.1);
            let t = (ex * (p.1 - a.1) - ey * (p.0 - a.0)) / (ey * dx - ex * dy);
            (p.0 + t * dx, p.1 + t * dy)
        };
        let input = std::mem::take(&mut out);
        for j in 0..input.len() {
            let (p, q) = (input[j], input[(j + 1) % input.len()]);
            match (inside(p), inside(q)) {
                (true, true) => out.push(q),
                (true, false) => out.push(cross(p, q)),
                (false, true) => {
                    out.push(cross(p, q));
                    out.push(q);
                }
                (false, false) => {}
            }
        }
    }
    out
}

fn polygon_area_perimeter(p: &[(f64, f64)]) -> (f64, f64) {
    let mut area = 0.0;
    let mut perimeter = 0.0;
    for i in 0..p.len() {
        let (a, b) = (p[i], p[(i + 1) % p.len()]);
        area += a.0 * b.1 - b.0 * a.1;
        perimeter += ((b.0 - a.0).powi(2) + (b.1 - a.1).powi(2)).sqrt();
    }
    (area.abs() / 2.0, perimeter)
}

#[test]
fn rotation_mask_matches_clipped_overlap_area() {
    let n = 64.0;
    let frame = [(0.0, 0.0), (n, 0.0), (n, n), (0.0, n)];
    let theta = 20f64.to_radians();
    let rotated: Vec<(f64, f64)> = frame
        .iter()
        .map(|&(x, y)| {
            let (dx, dy) = (x - n / 2.0, y - n / 2.0);
            (n / 2.0 + dx * theta.cos() - dy * theta.sin(), n / 2.0 + dx * theta.sin() + dy * theta.cos())
        })
        .collect();
    let (area, perimeter) = polygon_area_perimeter(&clip_polygon(&rotated, &frame));

    let d = grumo::DepthMap::new(Tensor::<f32>::ones(Shape::new(1, 1, 64, 64))).unwrap();
    let (_, mask) = Augmentation::Rotate { degrees: 20.0 }.invert(&d);
    let count = mask.count() as f64;
    assert!(
        (count - area).abs() <= 2.0 * perimeter,
        "mask {count} pixels, overlap area {area:.1}, perimeter {perimeter:.1}"
    );
    assert!(count < area, "the mask never extends past the overlap");
}

#[test]
fn dropout_variance_matches_two_pass_oracle() {
    let model = Model::<f32>::init(ModelConfig::default(), 9).unwrap();
    let image = gen_scene(10, &SceneParams::sized(16, 16)).unwrap().image;
    let samples = dropout_samples(&model, &image, 8, 0.2, 1).unwrap();
    let n = samples.len() as f64;
    let naive: Vec<f64> = (0..samples[0].values().len())
        .map(|i| {
            let v: Vec<f64> = samples.iter().map(|s| s.values()[i] as f64).collect();
            let mean = v.iter().sum::<f64>() / n;
            v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n
        })
        .collect();
    let refs: Vec<&Tensor<f32>> = samples.iter().map(|s| s.tensor()).collect();
    let welford = pixelwise_variance(&refs).unwrap();
    for (a, b) in welford.data().iter().zip(&naive) {
        assert!((*a as f64 - b).abs() <= 1e-6 * b.max(1e-6), "{a} vs {b}");
    }
    let u = dropstar_uncertainty(&model, &image, 8, 0.2, 1).unwrap();
    let mask = ValidMask::all_true(16, 16);
    let expected = normalize_masked(&welford, &mask);
    assert!(u.values().bits_eq(&expected));
}

#[test]
fn reversed_ranking_on_four_pixels() {
    // Squared errors 16, 9, 4, 1 with the least uncertain pixel the worst.
    let recs: Vec<PixelRecord> = [4.0, 3.0, 2.0, 1.0]
        .iter()
        .zip([1.0, 2.0, 3.0, 4.0])
        .map(|(&e, u)| PixelRecord {
            gt: 10.0,
            pred: 10.0 + e,
            uncertainty: u,
        })
        .collect();
    let r = metrics::sparsification(&recs, MetricKind::Rmse, 4).unwrap();
    // Removal counts ⌊0.98·t⌋ for t = 0..4 are 0, 0, 1, 2, 3.
    let oracle = [30.0 / 4.0, 30.0 / 4.0, 14.0 / 3.0, 5.0 / 2.0, 1.0].map(f64::sqrt);
    let actual = [30.0 / 4.0, 30.0 / 4.0, 29.0 / 3.0, 25.0 / 2.0, 16.0].map(f64::sqrt);
    let ause = actual.iter().zip(&oracle).map(|(a, o)| a - o).sum::<f64>() / 5.0;
    assert!((r.ause - ause).abs() < 1e-12);
    for i in 0..5 {
        assert!((r.oracle[i] - oracle[i]).abs() < 1e-12);
        assert!((r.actual[i] - actual[i]).abs() < 1e-12);
    }
}

#[test]
fn constant_uncertainty_removes_in_index_order() {
    let errs = [0.5, 0.1, 0.3, 0.0, 0.2, 0.4];
    let recs: Vec<PixelRecord> = errs
        .iter()
        .map(|&e| PixelRecord {
            gt: 1.0,
            pred: 1.0 + e,
            uncertainty: 0.7,
        })
        .collect();
    let r = metrics::sparsification(&recs, MetricKind::AbsRel, 6).unwrap();
    // Removal counts ⌊0.98·t⌋ for t = 0..6 are 0, 0, 1, 2, 3, 4, 5.
    let full = errs.iter().sum::<f64>() / 6.0;
    let actual: Vec<f64> = [0, 0, 1, 2, 3, 4, 5]
        .iter()
        .map(|&k| errs[k..].iter().sum::<f64>() / (6 - k) as f64)
        .collect();
    let aurg = actual.iter().map(|a| full - a).sum::<f64>() / 7.0;
    assert!((r.aurg - aurg).abs() < 1e-12);
    assert!(r.aurg != 0.0, "non-constant errors make the flat random curve differ");
}

/// nUCE by looping over bins and scanning every pixel for membership.
fn nuce_bin_loop(errors: &[f64], uncertainties: &[f64], bins: usize) -> f64 {
    let norm = |v: &[f64]| {
        let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        v.iter()
            .map(|x| if hi > lo { (x - lo) / (hi - lo) } else { 0.0 })
            .collect::<Vec<_>>()
    };
    let (e, u) = (norm(errors), norm(uncertainties));
    let mut total = 0.0;
    for m in 0..bins {
        let lo = m as f64 / bins as f64;
        let hi = (m + 1) as f64 / bins as f64;
        let members: Vec<usize> = (0..e.len())
            .filter(|&j| e[j] >= lo && (e[j] < hi || (m == bins - 1 && e[j] <= 1.0)))
            .collect();
        if members.is_empty() {
            continue;
        }
        let c = members.len() as f64;
        let me = members.iter().map(|&j| e[j]).sum::<f64>() / c;
        let mu = members.iter().map(|&j| u[j]).sum::<f64>() / c;
        total += c / e.len() as f64 * (me - mu).abs();
    }
    total
}

#[test]
fn nuce_matches_bin_loop_oracle() {
    assert!((metrics::nuce_from_values(&[0.0, 1.0, 2.0, 3.0], &[5.0; 4], 4).unwrap() - 0.5).abs() < 1e-15);
    assert!((nuce_bin_loop(&[0.0, 1.0, 2.0, 3.0], &[5.0; 4], 4) - 0.5).abs() < 1e-15);
    let mut r = seeded(31);
    for _ in 0..50 {
        let n = r.random_range(1..300);
        let e: Vec<f64> = (0..n).map(|_| normal(&mut r).powi(2)).collect();
        let u: Vec<f64> = (0..n).map(|_| r.random::<f64>()).collect();
        for bins in [1, 7, 100] {
            let got = metrics::nuce_from_values(&e, &u, bins).unwrap();
            assert!((got - nuce_bin_loop(&e, &u, bins)).abs() < 1e-12);
        }
    }
}

#[test]
fn scene_depths_cover_the_range() {
    let set = common::scene_set(Split::Test, 256, 32);
    let p = &set.manifest.params;
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    let mut hist = [0usize; 10];
    for s in &set.scenes {
        for &d in s.depth.values() {
            let d = d as f64;
            assert!(d >= p.d_min - 1e-6 && d <= p.d_max + 1e-6);
            lo = lo.min(d);
            hi = hi.max(d);
            let b = (((d - p.d_min) / (p.d_max - p.d_min) * 10.0) as usize).min(9);
            hist[b] += 1;
        }
    }
    assert!((hi - lo) / (p.d_max - p.d_min) >= 0.9, "span {lo}..{hi}");
    assert!(hist.iter().all(|&c| c > 0), "empty depth decile: {hist:?}");
}

#[test]
fn feature_flip_and_image_flip_differ_with_full_masks() {
    let model = Model::<f32>::init(ModelConfig::default(), 12).unwrap();
    let image = gen_scene(14, &SceneParams::sized(32, 32)).unwrap().image;
    let a = estimate(&model, &image, &GradConfig::ours()).unwrap();
    let b = estimate(&model, &image, &GradConfig::ours_feat()).unwrap();
    assert!(a.uncertainty.mask().is_all_true() && b.uncertainty.mask().is_all_true());
    let diff: f64 = a
        .uncertainty
        .values()
        .data()
        .iter()
        .zip(b.uncertainty.values().data())
        .map(|(x, y)| ((x - y) as f64).powi(2))
        .sum::<f64>()
        .sqrt();
    assert!(diff > 0.0, "feature and image flips gave identical maps");
}

#[test]
fn training_improves_on_initialisation() {
    let train = common::scene_set(Split::Train, 64, 16);
    let test = common::scene_set(Split::Test, 64, 16);
    let opts = TrainOptions {
        epochs: 200,
        ..TrainOptions::default()
    };
    let init = Model::<f32>::init(ModelConfig::default(), 0).unwrap();
    let trained = train_fixture(ModelConfig::default(), &train.scenes, 0, &opts).unwrap();
    let (before, after) = (
        mean_abs_rel(&init, &test.scenes).unwrap(),
        mean_abs_rel(&trained, &test.scenes).unwrap(),
    );
    assert!(after < before, "Abs Rel {before:.4} -> {after:.4}");
}
