//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line for each
//! and exits non-zero if any criterion fails.

mod common;

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::Rng;

use grumo::io::gt01::{self, HostOrder};
use grumo::maps::ValidMask;
use grumo::metrics::{self, MetricKind, PixelRecord, DEFAULT_STEPS};
use grumo::model::{ForwardOptions, Model, ModelConfig};
use grumo::model_io::{load_model, save_model};
use grumo::pipeline::{self, GradVariant, Method};
use grumo::rng::{normal, seeded, uniform, SeededRng};
use grumo::synth::{gen_scene, SceneParams, SceneSet};
use grumo::uncertainty::{
    attach_aux_loss, estimate, extract_gradients, layer_uncertainty, reference_for, ChannelReduce, GradConfig,
};
use grumo::{NodeId, Shape, Tape, Tensor};

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Outcome {
            pass,
            detail: detail.into(),
        }
    }
}

// ---- criterion 1: gradient check ----

const GRAD_EPS: f64 = 1e-3;
const GRAD_TOL: f64 = 1e-3;
const GRAD_FLOOR: f64 = 1e-6;
const KINK_MARGIN: f64 = 1e-2;
const PROBES_PER_NET: usize = 100;

#[derive(Clone, Copy)]
enum Act {
    Relu,
    Elu,
    Sigmoid,
}

fn random_tensor(r: &mut SeededRng, shape: Shape, scale: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_, _, _, _| scale * normal(r))
}

struct Net {
    tape: Tape<f64>,
    tagged: Vec<NodeId>,
    loss: NodeId,
    kinked: Vec<NodeId>,
}

/// A random 3 to 5 layer conv net over 4×4 inputs with residual adds, channel
/// concatenation and a squared-output loss. Squares are kept out of the hidden
/// layers, where stacking them makes the loss large enough for roundoff to
/// dominate the central difference.
fn random_net(seed: u64) -> Net {
    let mut r = seeded(seed);
    let layers = r.random_range(3..=5);
    let mut c = r.random_range(1..=3);
    let mut tape = Tape::<f64>::new();
    let mut prev = tape.leaf(random_tensor(&mut r, Shape::new(1, c, 4, 4), 1.0));
    let mut tagged = Vec::new();
    let mut kinked = Vec::new();
    for l in 0..layers {
        let c_out = r.random_range(2..=3);
        let k = if r.random_bool(0.7) { 3 } else { 1 };
        let w = tape.leaf(random_tensor(&mut r, Shape::new(c_out, c, k, k), 0.6));
        let b = tape.leaf(random_tensor(&mut r, Shape::new(1, c_out, 1, 1), 0.3));
        let z = tape.conv2d(prev, w, b, 1, k / 2).unwrap();
        let act = [Act::Relu, Act::Elu, Act::Sigmoid][r.random_range(0..3)];
        let a = match act {
            Act::Relu => tape.relu(z),
            Act::Elu => tape.elu(z),
            Act::Sigmoid => tape.sigmoid(z),
        }
        .unwrap();
        if matches!(act, Act::Relu | Act::Elu) {
            kinked.push(z);
        }
        let (out, c_next) = match r.random_range(0..3) {
            1 if c_out == c => (tape.add(a, prev).unwrap(), c_out),
            2 => (tape.concat(&[a, prev]).unwrap(), c_out + c),
            _ => (a, c_out),
        };
        tape.tag(out, &format!("l{l}")).unwrap();
        tagged.push(out);
        prev = out;
        c = c_next;
    }
    let sq = tape.square(prev).unwrap();
    let half = tape.mul_scalar(sq, 0.5).unwrap();
    let loss = tape.sum(half).unwrap();
    Net {
        tape,
        tagged,
        loss,
        kinked,
    }
}

fn away_from_kinks(net: &Net) -> bool {
    net.kinked
        .iter()
        .all(|&z| net.tape.value(z).unwrap().data().iter().all(|v| v.abs() >= KINK_MARGIN))
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut worst = 0.0f64;
    let mut seed = 0u64;
    let mut nets = 0;
    let mut probes = 0;
    while nets < 20 {
        seed += 1;
        let mut net = random_net(seed);
        if !away_from_kinks(&net) {
            continue;
        }
        nets += 1;
        let grads = net.tape.backward(net.loss).unwrap();
        let mut r = seeded(seed ^ 0xabcd);
        for _ in 0..PROBES_PER_NET {
            let node = net.tagged[r.random_range(0..net.tagged.len())];
            let base = net.tape.value(node).unwrap().clone();
            let j = r.random_range(0..base.numel());
            let analytic = grads.or_zeros(node, base.shape()).unwrap().data()[j];
            let mut eval = |delta: f64| {
                let mut data = base.data().to_vec();
                data[j] += delta;
                let v = Tensor::new(base.shape(), data).unwrap();
                net.tape.replay(&[(node, v)]).unwrap();
                net.tape.value(net.loss).unwrap().data()[0]
            };
            let numeric = (eval(GRAD_EPS) - eval(-GRAD_EPS)) / (2.0 * GRAD_EPS);
            net.tape.replay(&[]).unwrap();
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_FLOOR);
            worst = worst.max(rel);
            probes += 1;
        }
    }
    let elapsed = start.elapsed();
    Outcome::new(
        worst < GRAD_TOL && elapsed < Duration::from_secs(30),
        format!("{nets} nets, {probes} probes, max rel err {worst:.2e} (< {GRAD_TOL:e}), {elapsed:.1?}"),
    )
}

// ---- criterion 2: zero loss on symmetric inputs ----

/// Mirrors the left half of the image onto the right half.
fn symmetrize(t: &Tensor<f32>) -> Tensor<f32> {
    let w = t.shape().w;
    Tensor::from_fn(t.shape(), |n, c, y, x| t.at(n, c, y, x.min(w - 1 - x)))
}

fn criterion_2(fixture: &Model<f32>) -> Outcome {
    let model = fixture.mirror_symmetric();
    let params = SceneParams::sized(common::FIXTURE_SIZE, common::FIXTURE_SIZE);
    let mut bad = Vec::new();
    for i in 0..10u64 {
        let image = symmetrize(&gen_scene(1000 + i, &params).unwrap().image);
        for cfg in [GradConfig::ours(), GradConfig::ours_feat()] {
            let e = estimate(&model, &image, &cfg).unwrap();
            if e.loss != 0.0 || !e.uncertainty.is_all_zero() {
                bad.push(format!("scene {i} {} loss {:e}", cfg.aug, e.loss));
            }
        }
    }
    Outcome::new(
        bad.is_empty(),
        if bad.is_empty() {
            "10 scenes, hflip and feat-hflip, loss and maps exactly zero".to_string()
        } else {
            bad.join("; ")
        },
    )
}

// ---- criterion 3: lambda = 0 reduces to the regular loss ----

/// The single-layer map built from the loss without any variance term.
fn regular_loss_map(model: &Model<f32>, image: &Tensor<f32>, cfg: &GradConfig) -> Tensor<f32> {
    let mut bundle = model.forward(image, ForwardOptions::traced()).unwrap();
    let (d_ref, mask) = reference_for(model, image, &cfg.aug).unwrap();
    let loss = attach_aux_loss(bundle.trace.as_mut().unwrap(), &d_ref, &mask, None).unwrap();
    let tag = format!("dec{}", cfg.layers()[0]);
    let grads = extract_gradients(&bundle, loss, std::slice::from_ref(&tag)).unwrap();
    layer_uncertainty(&grads[&tag], &mask, ChannelReduce::AbsMax)
        .unwrap()
        .values()
        .clone()
}

fn criterion_3(predictive: &Model<f32>, test: &SceneSet) -> Outcome {
    let cfg = GradConfig {
        lambda: 0.0,
        ..GradConfig::ours()
    };
    let mut mismatched = 0;
    for scene in test.scenes.iter().take(10) {
        let ours = estimate(predictive, &scene.image, &cfg).unwrap();
        let regular = regular_loss_map(predictive, &scene.image, &cfg);
        if !ours.uncertainty.values().bits_eq(&regular) {
            mismatched += 1;
        }
    }
    Outcome::new(
        mismatched == 0,
        format!("10 scenes, {mismatched} maps differ bitwise from the regular-loss map"),
    )
}

// ---- criterion 4: perfect-calibration fixtures ----

fn fixture_records(model: &Model<f32>, test: &SceneSet, count: usize) -> Vec<Vec<PixelRecord>> {
    test.scenes
        .iter()
        .take(count)
        .map(|s| {
            let pred = model.predict(&s.image).unwrap();
            let (h, w) = s.depth.hw();
            let zeros = vec![0.0f32; h * w];
            metrics::records(s.depth.values(), pred.values(), &zeros, &ValidMask::all_true(h, w)).unwrap()
        })
        .collect()
}

fn with_uncertainty(records: &[PixelRecord], u: &[f64]) -> Vec<PixelRecord> {
    records
        .iter()
        .zip(u)
        .map(|(r, &u)| PixelRecord { uncertainty: u, ..*r })
        .collect()
}

fn criterion_4(fixture: &Model<f32>, test: &SceneSet) -> Outcome {
    const TOL: f64 = 1e-9;
    let images = fixture_records(fixture, test, 5);
    let mut worst_ause = 0.0f64;
    for recs in &images {
        for kind in MetricKind::ALL {
            // A strictly increasing transform of the metric's own pixel error.
            let u: Vec<f64> = metrics::pixel_errors(recs, kind).iter().map(|e| e / (1.0 + e)).collect();
            let r = metrics::sparsification(&with_uncertainty(recs, &u), kind, DEFAULT_STEPS).unwrap();
            worst_ause = worst_ause.max(r.ause.abs());
        }
    }
    let sq = |recs: &[PixelRecord]| -> Vec<f64> { recs.iter().map(|r| (r.pred - r.gt).powi(2)).collect() };
    let mut worst_nuce = 0.0f64;
    for recs in &images {
        let calibrated = with_uncertainty(recs, &sq(recs));
        worst_nuce = worst_nuce.max(metrics::nuce(&calibrated, 100).unwrap());
    }
    let pooled: Vec<PixelRecord> = images.concat();
    let pooled = with_uncertainty(&pooled, &sq(&pooled));
    worst_nuce = worst_nuce.max(metrics::nuce(&pooled, 100).unwrap());
    Outcome::new(
        worst_ause <= TOL && worst_nuce <= TOL,
        format!("5 scenes, max |AUSE| {worst_ause:.1e}, max nUCE {worst_nuce:.1e} (<= {TOL:e})"),
    )
}

// ---- criterion 5: brute-force sparsification ----

fn brute_metric(errors: &[f64], kind: MetricKind) -> f64 {
    let mean = errors.iter().sum::<f64>() / errors.len() as f64;
    match kind {
        MetricKind::Rmse => mean.sqrt(),
        _ => mean,
    }
}

/// Best remaining metric for every removal count, over all subsets.
fn brute_oracle(errors: &[f64], kind: MetricKind) -> Vec<f64> {
    let n = errors.len();
    let mut best = vec![f64::INFINITY; n + 1];
    for keep in 1u32..(1 << n) {
        let kept: Vec<f64> = (0..n).filter(|i| keep >> i & 1 == 1).map(|i| errors[i]).collect();
        let removed = n - kept.len();
        best[removed] = best[removed].min(brute_metric(&kept, kind));
    }
    best
}

fn brute_sparsification(records: &[PixelRecord], kind: MetricKind, steps: usize) -> (f64, f64) {
    let n = records.len();
    let steps = steps.min(n);
    let errors = metrics::pixel_errors(records, kind);
    let oracle = brute_oracle(&errors, kind);
    let mut by_u: Vec<usize> = (0..n).collect();
    by_u.sort_by(|&a, &b| {
        records[b]
            .uncertainty
            .partial_cmp(&records[a].uncertainty)
            .unwrap()
            .then(a.cmp(&b))
    });
    let full = brute_metric(&errors, kind);
    let (mut ause, mut aurg) = (0.0, 0.0);
    for t in 0..=steps {
        let k = (t as f64 * 0.98 / steps as f64 * n as f64).floor() as usize;
        let remaining: Vec<f64> = by_u[k..].iter().map(|&i| errors[i]).collect();
        let actual = brute_metric(&remaining, kind);
        ause += actual - oracle[k];
        aurg += full - actual;
    }
    let points = (steps + 1) as f64;
    (ause / points, aurg / points)
}

fn random_records(r: &mut SeededRng, n: usize) -> Vec<PixelRecord> {
    (0..n)
        .map(|_| {
            let gt = uniform(r, 1.0, 10.0);
            PixelRecord {
                gt,
                pred: (gt * (1.0 + 0.3 * normal(r))).max(0.1),
                // Few levels, so ties are common.
                uncertainty: r.random_range(0..6) as f64 / 5.0,
            }
        })
        .collect()
}

fn criterion_5() -> Outcome {
    const TOL: f64 = 1e-9;
    let mut worst = 0.0f64;
    for set in 0..50u64 {
        let recs = random_records(&mut seeded(500 + set), 16);
        for kind in MetricKind::ALL {
            for steps in [4, DEFAULT_STEPS] {
                let got = metrics::sparsification(&recs, kind, steps).unwrap();
                let (ause, aurg) = brute_sparsification(&recs, kind, steps);
                worst = worst.max((got.ause - ause).abs()).max((got.aurg - aurg).abs());
            }
        }
    }
    Outcome::new(
        worst <= TOL,
        format!("50 sets of 16 pixels, max AUSE/AURG deviation {worst:.1e} (<= {TOL:e})"),
    )
}

// ---- criterion 6: random-uncertainty null ----

fn criterion_6() -> Outcome {
    let base = random_records(&mut seeded(6), 1024);
    let mut details = Vec::new();
    let mut pass = true;
    for kind in MetricKind::ALL {
        let aurgs: Vec<f64> = (0..200u64)
            .map(|trial| {
                let mut r = seeded(10_000 + trial);
                let u: Vec<f64> = (0..base.len()).map(|_| r.random::<f64>()).collect();
                metrics::sparsification(&with_uncertainty(&base, &u), kind, DEFAULT_STEPS)
                    .unwrap()
                    .aurg
            })
            .collect();
        let n = aurgs.len() as f64;
        let mean = aurgs.iter().sum::<f64>() / n;
        let sd = (aurgs.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        let bound = 3.0 * sd / n.sqrt();
        pass &= mean.abs() < bound;
        details.push(format!("{kind} |mean| {:.2e} < {bound:.2e}", mean.abs()));
    }
    Outcome::new(pass, format!("200 trials: {}", details.join(", ")))
}

// ---- criterion 7: method ordering on the trained fixture ----

const SPEARMAN_THRESHOLD: f64 = 0.2;

fn criterion_7(fixture: &Model<f32>, test: &SceneSet, train_time: Duration) -> Outcome {
    let start = Instant::now();
    let methods: Vec<Method> = ["ours", "ours-feat", "ours-multi", "var"]
        .iter()
        .map(|s| s.parse().unwrap())
        .collect();
    let evals = pipeline::compare(fixture, test, &methods, DEFAULT_STEPS, 100).unwrap();
    let rmse = |name: &str| {
        evals
            .iter()
            .find(|e| e.method == name)
            .unwrap()
            .metric(MetricKind::Rmse)
            .clone()
    };
    let aurg: Vec<(String, f64)> = ["ours", "ours-feat", "ours-multi"]
        .iter()
        .map(|m| (m.to_string(), rmse(m).aurg))
        .collect();
    let ours = Method::Grad {
        variant: GradVariant::Ours,
        cfg: GradConfig::ours(),
    };
    let preds = pipeline::predict_dataset(fixture, test, &ours).unwrap();
    let pooled = pipeline::pooled_spearman(test, &preds).unwrap().unwrap_or(f64::NAN);
    let per_image = pipeline::mean_spearman(test, &preds).unwrap().unwrap_or(f64::NAN);
    let (ause_ours, ause_var) = (rmse("ours").ause, rmse("var").ause);
    let elapsed = train_time + start.elapsed();

    let a = aurg.iter().all(|(_, v)| *v > 0.0);
    let b = pooled > SPEARMAN_THRESHOLD;
    let c = ause_ours <= ause_var;
    let mark = |ok: bool| if ok { "ok" } else { "FAILED" };
    let aurg_text: Vec<String> = aurg.iter().map(|(m, v)| format!("{m} {v:.4}")).collect();
    Outcome::new(
        a && b && c && elapsed < Duration::from_secs(300),
        format!(
            "(a) AURG(RMSE) {} [{}]; (b) Spearman {pooled:.3} > {SPEARMAN_THRESHOLD} [{}] \
             (per-image mean {per_image:.3}); (c) AUSE(RMSE) ours {ause_ours:.4} <= var {ause_var:.4} [{}]; \
             {elapsed:.1?} including training",
            aurg_text.join(", "),
            mark(a),
            mark(b),
            mark(c)
        ),
    )
}

// ---- criterion 8: max fusion dominates every layer ----

fn criterion_8(fixture: &Model<f32>, test: &SceneSet) -> Outcome {
    let cfg = GradConfig::ours_multi();
    let mut violations = 0usize;
    for scene in test.scenes.iter().take(10) {
        let e = estimate(fixture, &scene.image, &cfg).unwrap();
        let fused = e.uncertainty.values().data();
        for (_, m) in &e.layer_maps {
            violations += fused.iter().zip(m.values().data()).filter(|(f, v)| f < v).count();
        }
    }
    Outcome::new(
        violations == 0,
        format!("10 scenes, layers {:?}, {violations} pixels below a layer map", cfg.layers()),
    )
}

// ---- criterion 9: format round trips ----

/// Little-endian GT01 bytes built independently of the codec.
fn expected_gt01(t: &Tensor<f32>) -> Vec<u8> {
    let mut out = b"GT01".to_vec();
    out.extend_from_slice(&4u32.to_le_bytes());
    for d in t.shape().dims() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_bits().to_le_bytes());
    }
    out
}

fn criterion_9() -> Outcome {
    let mut failures = Vec::new();
    let mut r = seeded(9);
    for i in 0..100 {
        let shape = Shape::new(
            r.random_range(1..=2),
            r.random_range(1..=4),
            r.random_range(1..=6),
            r.random_range(1..=6),
        );
        // Arbitrary bit patterns, NaN payloads and infinities included.
        let t = Tensor::new(shape, (0..shape.numel()).map(|_| f32::from_bits(r.random())).collect()).unwrap();
        let le = gt01::encode_from_host(&t, HostOrder::Little);
        let be = gt01::encode_from_host(&t, HostOrder::Big);
        let back = gt01::decode(&be).unwrap();
        if le != be || le != expected_gt01(&t) || !back.bits_eq(&t) {
            failures.push(format!("tensor {i}"));
        }
    }
    let dir = tempfile::tempdir().unwrap();
    for seed in 0..10u64 {
        let config = if seed % 2 == 0 {
            ModelConfig::default()
        } else {
            ModelConfig::predictive()
        };
        let model = Model::<f32>::init(config, seed).unwrap();
        let path = dir.path().join(format!("m{seed}"));
        save_model(&model, &path).unwrap();
        let loaded = load_model(&path).unwrap();
        let same = loaded.config() == model.config()
            && loaded.weights().len() == model.weights().len()
            && model
                .weights()
                .iter()
                .all(|(k, v)| loaded.weights().get(k).is_some_and(|w| w.bits_eq(v)));
        if !same {
            failures.push(format!("model {seed}"));
        }
    }
    Outcome::new(
        failures.is_empty(),
        if failures.is_empty() {
            "100 GT01 tensors (little and simulated big-endian host) and 10 model directories bitwise stable"
                .to_string()
        } else {
            format!("unstable: {}", failures.join(", "))
        },
    )
}

// ---- criterion 10: deterministic compare ----

fn run_cli(args: &[&str], threads: &str) -> std::process::Output {
    let out = Command::new(env!("CARGO_BIN_EXE_grumo"))
        .args(args)
        .env("GRUMO_THREADS", threads)
        .output()
        .expect("spawn grumo");
    assert!(
        out.status.success(),
        "grumo {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn criterion_10(fixture: &Model<f32>) -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let p = |name: &str| dir.path().join(name).to_str().unwrap().to_string();
    save_model(fixture, Path::new(&p("model"))).unwrap();
    let size = common::FIXTURE_SIZE.to_string();
    run_cli(
        &["gen-data", "--seed", "3", "--count", "16", "--size", &size, "--split", "test", "--out", &p("data")],
        "1",
    );
    let mut tables = Vec::new();
    for (run, threads) in [("a", "1"), ("b", "1"), ("c", "2")] {
        let out = p(&format!("out_{run}"));
        run_cli(&["compare", "--model", &p("model"), "--data", &p("data"), "--out", &out], threads);
        tables.push(std::fs::read(Path::new(&out).join("table.csv")).unwrap());
    }
    let identical = tables.windows(2).all(|w| w[0] == w[1]);
    Outcome::new(
        identical && !tables[0].is_empty(),
        format!(
            "table.csv from 3 compare runs (1, 1 and 2 threads) {}",
            if identical { "byte-identical" } else { "differs" }
        ),
    )
}

fn main() {
    let train = common::fixture_train_set();
    let test = common::fixture_test_set();
    let t0 = Instant::now();
    let fixture = common::train_regular(&train);
    let train_time = t0.elapsed();
    let predictive = common::train_predictive(&train, 5);

    let criteria: Vec<(&str, Box<dyn Fn() -> Outcome + '_>)> = vec![
        ("gradient check", Box::new(criterion_1)),
        ("symmetric zero loss", Box::new(|| criterion_2(&fixture))),
        ("lambda zero reduction", Box::new(|| criterion_3(&predictive, &test))),
        ("perfect calibration", Box::new(|| criterion_4(&fixture, &test))),
        ("sparsification brute force", Box::new(criterion_5)),
        ("random-uncertainty null", Box::new(criterion_6)),
        ("method ordering", Box::new(|| criterion_7(&fixture, &test, train_time))),
        ("max-fusion dominance", Box::new(|| criterion_8(&fixture, &test))),
        ("format round trips", Box::new(criterion_9)),
        ("determinism", Box::new(|| criterion_10(&fixture))),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let outcome = run();
        let status = if outcome.pass { "PASS" } else { "FAIL" };
        println!("criterion {:>2} {name}: {status}: {}", i + 1, outcome.detail);
        failed += usize::from(!outcome.pass);
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
