//! The twelve acceptance criteria, run in order. Every criterion prints one
//! `[PASS]`/`[FAIL]` line; the test fails if any criterion fails.
//!
//! Run with `cargo test --release -p pedloc-cli --test acceptance`. The full
//! run trains nine networks and takes roughly twenty minutes on one core.

use std::io::Write;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::{Distribution, Exp1, Normal};

use pedloc::dataio::{read_checkpoint, write_checkpoint, AnnotationRecord, Checkpoint};
use pedloc::evalkit::{
    alp, ale, difficulty_of, fit_segments_from_records, geometric_predictions, iou,
    match_detections, metric_report, network_predictions, pairs_from_records, Detection,
    Difficulty, GtInstance, MatchedPair, MetricReport,
};
use pedloc::geo_baseline::{estimate_distance, fit_segments, solve_segment_depth, SegmentObservation};
use pedloc::geometry::{backproject, normalize_keypoints, BBox, CameraIntrinsics, NormalizedInput, INPUT_DIM};
use pedloc::height_model::{
    expected_task_error, teen_extended_mixture, Group, HeightComponent, HeightMixture,
};
use pedloc::net::{
    batch_loss, laplace_loss, train, ArchConfig, DropoutMasks, LocModel,
    LossKind, TrainConfig, TrainingSet,
};
use pedloc::rng::stream;
use pedloc::synthgen::{generate_samples, make_lying_variant, SceneSample, SynthConfig};
use pedloc::uncertainty::{
    combine_passes, coverage_report, mc_predict, mc_predict_batch, point_predict,
    DistanceEstimate, IntervalKind, UncertaintyConfig,
};

const SEEDS: [u64; 3] = [0, 1, 2];

struct Verdict {
    passed: bool,
    detail: String,
}

impl Verdict {
    fn new(passed: bool, detail: impl Into<String>) -> Self {
        Verdict {
            passed,
            detail: detail.into(),
        }
    }
}

/// Bypasses the test harness capture so the lines always reach the terminal.
fn say(line: &str) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{line}");
    let _ = out.flush();
}

fn secs(d: Duration) -> f64 {
    d.as_secs_f64()
}

// ---------------------------------------------------------------- 1

fn comp(group: Group, weight: f64, mean: f64, std: f64) -> HeightComponent {
    HeightComponent {
        group,
        weight,
        mean,
        std,
    }
}

fn mixtures() -> Vec<HeightMixture> {
    let adult = HeightMixture::default();
    vec![
        adult.clone(),
        HeightMixture::single(171.5, 7.0).unwrap(),
        teen_extended_mixture(&adult),
        HeightMixture::with_mixture_mean(vec![
            comp(Group::Male, 0.7, 180.0, 8.0),
            comp(Group::Female, 0.3, 160.0, 6.0),
        ])
        .unwrap(),
        HeightMixture::new(
            vec![
                comp(Group::Male, 0.5, 178.0, 7.0),
                comp(Group::Female, 0.5, 165.0, 7.0),
            ],
            175.0,
        )
        .unwrap(),
    ]
}

/// Mean and standard error of `|1 − h_mean/h|` over `n` direct draws.
fn monte_carlo_slope(mix: &HeightMixture, n: usize, seed: u64) -> (f64, f64) {
    let mut rng = stream(seed, 0);
    let comps = mix.components();
    let normals: Vec<Normal<f64>> = comps
        .iter()
        .map(|c| Normal::new(c.mean, c.std).unwrap())
        .collect();
    let (mut s1, mut s2) = (0.0, 0.0);
    for _ in 0..n {
        let mut u: f64 = rng.random();
        let mut k = 0;
        while k + 1 < comps.len() && u >= comps[k].weight {
            u -= comps[k].weight;
            k += 1;
        }
        let v = (1.0 - mix.h_mean() / normals[k].sample(&mut rng)).abs();
        s1 += v;
        s2 += v * v;
    }
    let mean = s1 / n as f64;
    (mean, ((s2 / n as f64 - mean * mean) / n as f64).sqrt())
}

fn task_error_oracle() -> Verdict {
    let start = Instant::now();
    let (mut worst_z, mut worst_lin): (f64, f64) = (0.0, 0.0);
    for (i, mix) in mixtures().iter().enumerate() {
        let (c, se) = monte_carlo_slope(mix, 10_000_000, 1000 + i as u64);
        for d in [5.0, 20.0, 40.0] {
            let q = expected_task_error(mix, d);
            worst_z = worst_z.max((q - d * c).abs() / (d * se));
            worst_lin = worst_lin.max((expected_task_error(mix, 2.0 * d) - 2.0 * q).abs());
        }
    }
    let t = secs(start.elapsed());
    Verdict::new(
        worst_z < 3.0 && worst_lin <= 1e-12 && t < 30.0,
        format!("worst deviation {worst_z:.2} SE (< 3), linearity {worst_lin:.1e} (<= 1e-12), {t:.1} s (< 30 s)"),
    )
}

// ---------------------------------------------------------------- 2

const FD_STEP: f64 = 1e-5;
const FD_DECAY: f64 = 1e-3;

fn fd_objective(model: &LocModel, x: &Array2<f64>, t: &Array1<f64>, masks: &DropoutMasks, loss: LossKind) -> f64 {
    let (out, _) = model.forward_train(x, Some(masks)).unwrap();
    let (l, _) = batch_loss(loss, &out, t.view());
    l + 0.5 * FD_DECAY * model.params.weight_sq_norm()
}

/// Worst relative error over every parameter. Entries whose true gradient
/// is zero are compared on an absolute scale of 1e-4.
fn worst_gradient_error(loss: LossKind, seed: u64) -> (usize, f64) {
    let arch = ArchConfig {
        hidden: 8,
        ..ArchConfig::default()
    };
    let mut rng = stream(seed, 0);
    let mut model = LocModel::new(arch, 0.2, &mut rng).unwrap();
    for n in &mut model.params.norms {
        n.gamma.mapv_inplace(|_| rng.random_range(0.5..1.5));
        n.beta.mapv_inplace(|_| rng.random_range(-0.2..0.2));
    }
    let rows = 6;
    let x = Array2::from_shape_simple_fn((rows, INPUT_DIM), || rng.random_range(-0.5..0.5));
    let t = Array1::from_shape_simple_fn(rows, || rng.random_range(3.0..20.0));
    let masks = DropoutMasks::sample(&mut rng, &arch, rows, 0.2);

    let (out, cache) = model.forward_train(&x, Some(&masks)).unwrap();
    let (_, d_out) = batch_loss(loss, &out, t.view());
    let analytic: Vec<f64> = model
        .backward(&cache, &d_out, Some(&masks), FD_DECAY)
        .slices()
        .concat();

    let mut worst: f64 = 0.0;
    let mut index = 0;
    for k in 0..model.params.slices().len() {
        for j in 0..model.params.slices()[k].len() {
            let orig = model.params.slices()[k][j];
            model.params.slices_mut()[k][j] = orig + FD_STEP;
            let plus = fd_objective(&model, &x, &t, &masks, loss);
            model.params.slices_mut()[k][j] = orig - FD_STEP;
            let minus = fd_objective(&model, &x, &t, &masks, loss);
            model.params.slices_mut()[k][j] = orig;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let a = analytic[index];
            worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-4));
            index += 1;
        }
    }
    (index, worst)
}

fn gradient_fidelity() -> Verdict {
    let start = Instant::now();
    let mut parts = Vec::new();
    let mut ok = true;
    for loss in LossKind::ALL {
        let (n, worst) = worst_gradient_error(loss, 11);
        ok &= worst < 1e-4;
        parts.push(format!("{loss} {worst:.1e} over {n} parameters"));
    }
    let t = secs(start.elapsed());
    Verdict::new(
        ok && t < 60.0,
        format!("{} (< 1e-4), {t:.1} s (< 60 s)", parts.join(", ")),
    )
}

// ---------------------------------------------------------------- 3

fn laplace_values() -> Verdict {
    let cases = [
        (10.0, 10.0, 1.0, std::f64::consts::LN_2),
        (10.0, 5.0, 0.5, 1.0),
        (20.0, 22.0, 0.1, 1.0 + 0.2f64.ln()),
    ];
    let mut worst: f64 = 0.0;
    let mut got = Vec::new();
    for (x, mu, b, expected) in cases {
        let v = laplace_loss(x, mu, f64::ln(b)).unwrap();
        worst = worst.max((v - expected).abs());
        got.push(format!("{v:.4}"));
    }
    Verdict::new(
        worst < 1e-9,
        format!("{} (worst deviation {worst:.1e}, < 1e-9)", got.join(", ")),
    )
}

// ---------------------------------------------------------------- 4

fn variance_consistency() -> Verdict {
    let b = 0.8;
    let mean_var = SEEDS
        .iter()
        .copied()
        .chain(3..20)
        .map(|seed| {
            let s = combine_passes(&[(15.0, b)], 100_000, &mut stream(seed, 1)).unwrap();
            s.sigma * s.sigma
        })
        .sum::<f64>()
        / 20.0;
    let laplace = mean_var / (2.0 * b * b) - 1.0;
    let s = combine_passes(&[(9.0, 0.0), (11.0, 0.0)], 100_000, &mut stream(0, 0)).unwrap();
    let two_point = s.sigma * s.sigma - 1.0;
    Verdict::new(
        laplace.abs() < 0.05 && two_point.abs() < 0.02,
        format!(
            "σ²/2b² − 1 = {laplace:+.4} over 20 seeds (< 5%), two-point σ² − 1 = {two_point:+.4} (< 2%)"
        ),
    )
}

// ---------------------------------------------------------------- 5

fn observations(samples: &[SceneSample]) -> Vec<SegmentObservation<'_>> {
    samples
        .iter()
        .map(|s| SegmentObservation {
            kp: &s.kp,
            camera: &s.camera,
            center: s.center,
        })
        .collect()
}

fn geometric_exactness() -> Verdict {
    let cfg = SynthConfig {
        pixel_noise_std: 0.0,
        mix: HeightMixture::single(171.5, 1e-9).unwrap(),
        ..SynthConfig::default()
    };
    let stats = fit_segments(observations(&generate_samples(200, 1, &cfg).unwrap())).unwrap();
    let worst = generate_samples(1000, 2, &cfg)
        .unwrap()
        .iter()
        .map(|s| (estimate_distance(&s.kp, &s.camera, &stats).unwrap() - s.d_gt).abs())
        .fold(0.0, f64::max);

    let k = CameraIntrinsics::new(1000.0, 1000.0, 0.0, 0.0).unwrap();
    let top = backproject(&k, (0.0, -25.25)).unwrap();
    let bottom = backproject(&k, (0.0, 25.25)).unwrap();
    let z = solve_segment_depth(top, bottom, 0.505).unwrap();
    let on_axis = (z - 10.0).abs();
    Verdict::new(
        worst < 1e-6 && on_axis < 1e-9,
        format!("worst |d − d_gt| {worst:.1e} m over 1000 scenes (< 1e-6), on-axis 50.5 px → {z} m (error {on_axis:.1e}, < 1e-9)"),
    )
}

// ---------------------------------------------------------------- 6 and 7

struct Bench {
    train_records: Vec<AnnotationRecord>,
    test_records: Vec<AnnotationRecord>,
    test: Vec<SceneSample>,
    train_set: TrainingSet,
    val_set: TrainingSet,
    test_inputs: Vec<NormalizedInput>,
}

fn records(prefix: &str, samples: &[SceneSample]) -> Vec<AnnotationRecord> {
    samples
        .iter()
        .enumerate()
        .map(|(i, s)| AnnotationRecord::from_scene(format!("{prefix}-{i:06}"), s))
        .collect()
}

fn bench() -> Bench {
    let cfg = SynthConfig::default();
    let train = generate_samples(5000, 1, &cfg).unwrap();
    let val = generate_samples(1000, 2, &cfg).unwrap();
    let test = generate_samples(3000, 3, &cfg).unwrap();
    Bench {
        train_records: records("train", &train),
        test_records: records("test", &test),
        train_set: TrainingSet::from_samples(&train, Default::default()).unwrap(),
        val_set: TrainingSet::from_samples(&val, Default::default()).unwrap(),
        test_inputs: test
            .iter()
            .map(|s| normalize_keypoints(&s.camera, &s.kp).unwrap())
            .collect(),
        test,
    }
}

fn train_model(b: &Bench, loss: LossKind, seed: u64) -> LocModel {
    let cfg = TrainConfig {
        loss,
        seed,
        ..TrainConfig::default()
    };
    assert_eq!((cfg.epochs, cfg.lr, cfg.batch), (200, 1e-3, 512));
    train(&b.train_set, Some(&b.val_set), &cfg).unwrap().model
}

fn mean(v: impl IntoIterator<Item = f64>) -> f64 {
    let (mut s, mut n) = (0.0, 0usize);
    for x in v {
        s += x;
        n += 1;
    }
    s / n as f64
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

fn end_to_end(b: &Bench, estimates: &[DistanceEstimate], model: &LocModel, elapsed: f64) -> Verdict {
    let mix = HeightMixture::default();
    let heads = point_predict(model, &b.test_inputs).unwrap();
    let mut ok = elapsed < 600.0;
    let mut parts = Vec::new();
    for lo in [5.0, 10.0, 15.0, 20.0, 25.0] {
        let idx: Vec<usize> = (0..b.test.len())
            .filter(|&i| b.test[i].d_gt >= lo && b.test[i].d_gt < lo + 5.0)
            .collect();
        let e = mean(idx.iter().map(|&i| expected_task_error(&mix, b.test[i].d_gt)));
        let ale = mean(idx.iter().map(|&i| (estimates[i].mu - b.test[i].d_gt).abs())) / e;
        let spread = mean(idx.iter().map(|&i| estimates[i].b)) / e;
        let eval_spread = mean(idx.iter().map(|&i| heads[i].spread())) / e;
        let bin_ok = (0.8..=2.0).contains(&ale) && (0.7..=1.6).contains(&spread);
        ok &= bin_ok;
        parts.push(format!(
            "{lo}-{} m ALE {ale:.2}ê b {spread:.2}ê (eval-mode {eval_spread:.2}ê){}",
            lo + 5.0,
            if bin_ok { "" } else { " ✗" }
        ));
    }
    Verdict::new(
        ok,
        format!(
            "{}; bands ALE 0.8–2.0ê, b 0.7–1.6ê; pipeline {elapsed:.0} s (< 600 s)",
            parts.join("; ")
        ),
    )
}

fn laplace_oracle<R: Rng>(rng: &mut R, mu: f64, b: f64) -> f64 {
    let a: f64 = Exp1.sample(rng);
    let c: f64 = Exp1.sample(rng);
    mu + b * (a - c)
}

fn calibration(b: &Bench, estimates: &[DistanceEstimate]) -> Verdict {
    let n = estimates.len() as f64;
    let inside = |w: &dyn Fn(&DistanceEstimate) -> f64| {
        100.0
            * estimates
                .iter()
                .zip(&b.test)
                .filter(|(e, s)| (s.d_gt - e.mu).abs() <= w(e))
                .count() as f64
            / n
    };
    let aleatoric = inside(&|e| e.b);
    let combined = inside(&|e| e.sigma);

    let mut rng = stream(21, 0);
    let (mut es, mut gts) = (Vec::new(), Vec::new());
    for _ in 0..100_000 {
        let mu = rng.random_range(5.0..40.0);
        let spread = rng.random_range(0.1..2.0);
        es.push(DistanceEstimate::new(mu, spread, 2.0 * spread, Default::default()));
        gts.push(laplace_oracle(&mut rng, mu, spread));
    }
    let harness = coverage_report(&es, &gts, IntervalKind::Aleatoric, None)
        .unwrap()
        .recall;
    let target = 100.0 * (1.0 - (-1.0f64).exp());
    Verdict::new(
        (55.0..=75.0).contains(&aleatoric) && combined >= aleatoric && (harness - target).abs() <= 1.0,
        format!(
            "aleatoric ±b {aleatoric:.1}% (55–75%), combined ±σ {combined:.1}% (≥ aleatoric), Laplace harness {harness:.2}% vs {target:.2}% (± 1)"
        ),
    )
}

// ---------------------------------------------------------------- 8

fn mean_interval(model: &LocModel, samples: &[&SceneSample]) -> f64 {
    let inputs: Vec<NormalizedInput> = samples
        .iter()
        .map(|s| normalize_keypoints(&s.camera, &s.kp).unwrap())
        .collect();
    let est = mc_predict_batch(model, &inputs, &UncertaintyConfig::default()).unwrap();
    mean(est.iter().map(|e| e.interval[1] - e.interval[0]))
}

fn out_of_distribution(b: &Bench, models: &[&LocModel]) -> Verdict {
    let cfg = SynthConfig::default();
    let lying: Vec<SceneSample> = generate_samples(200, 40, &cfg)
        .unwrap()
        .iter()
        .map(|s| make_lying_variant(s).unwrap())
        .collect();
    // nearest unused test sample by distance
    let mut used = vec![false; b.test.len()];
    let mut standing = Vec::new();
    let mut worst_gap: f64 = 0.0;
    for l in &lying {
        let j = (0..b.test.len())
            .filter(|&j| !used[j])
            .min_by(|&i, &j| (b.test[i].d_gt - l.d_gt).abs().total_cmp(&(b.test[j].d_gt - l.d_gt).abs()))
            .unwrap();
        used[j] = true;
        worst_gap = worst_gap.max((b.test[j].d_gt - l.d_gt).abs());
        standing.push(&b.test[j]);
    }
    let lying_refs: Vec<&SceneSample> = lying.iter().collect();
    let mut ratios = Vec::new();
    let mut parts = Vec::new();
    for (seed, model) in SEEDS.iter().zip(models) {
        let l = mean_interval(model, &lying_refs);
        let s = mean_interval(model, &standing);
        ratios.push(l / s);
        parts.push(format!("seed {seed}: {l:.2} m vs {s:.2} m"));
    }
    let m = median(ratios);
    Verdict::new(
        m > 1.0,
        format!(
            "mean 2σ lying vs standing {} (distance match within {worst_gap:.3} m); median ratio {m:.2} (> 1)",
            parts.join(", ")
        ),
    )
}

// ---------------------------------------------------------------- 9

fn report(b: &Bench, model: &LocModel) -> MetricReport {
    let preds = network_predictions(model, &b.test_records).unwrap();
    metric_report(&pairs_from_records(&b.test_records, &preds))
}

fn ablation(b: &Bench, models: &[(LossKind, u64, &LocModel)]) -> Verdict {
    let stats = fit_segments_from_records(&b.train_records).unwrap();
    let geo = metric_report(&pairs_from_records(
        &b.test_records,
        &geometric_predictions(&b.test_records, &stats),
    ));
    let geo_far = geo.distance_ale(3).unwrap();
    let mut ok = true;
    let mut parts = Vec::new();
    let overall = |loss: LossKind| -> (f64, f64) {
        let reports: Vec<MetricReport> = models
            .iter()
            .filter(|(l, _, _)| *l == loss)
            .map(|(_, _, m)| report(b, m))
            .collect();
        let all = median(reports.iter().map(|r| r.ale.unwrap()).collect());
        let far = median(reports.iter().map(|r| r.distance_ale(3).unwrap()).collect());
        (all, far)
    };
    let mut medians = Vec::new();
    for loss in LossKind::ALL {
        let (all, far) = overall(loss);
        ok &= far < geo_far;
        parts.push(format!("{loss} {all:.3}/{far:.3}"));
        medians.push((loss, all));
    }
    let lap = medians.iter().find(|m| m.0 == LossKind::Laplace).unwrap().1;
    let gau = medians.iter().find(|m| m.0 == LossKind::Gaussian).unwrap().1;
    ok &= lap <= gau;
    Verdict::new(
        ok,
        format!(
            "median ALE overall/30+ m: {}, geometric {:.3}/{geo_far:.3}; need laplace ≤ gaussian overall and every loss < geometric at 30+ m",
            parts.join(", "),
            geo.ale.unwrap()
        ),
    )
}

// ---------------------------------------------------------------- 10

fn pair(d_pred: f64, d_gt: f64) -> MatchedPair {
    MatchedPair {
        id: format!("{d_pred}-{d_gt}"),
        d_pred,
        d_gt,
        bbox: BBox::new(0.0, 0.0, 10.0, 50.0),
        difficulty: Difficulty::Easy,
    }
}

fn gt(id: &str, bbox: BBox) -> GtInstance {
    GtInstance {
        id: id.into(),
        bbox,
        d: 10.0,
        occlusion: Some(0),
        truncation: Some(0.0),
    }
}

fn det(id: &str, bbox: BBox) -> Detection {
    Detection {
        id: id.into(),
        bbox,
        d: 10.0,
    }
}

fn metric_examples() -> Vec<(&'static str, bool)> {
    let unit = BBox::new(0.0, 0.0, 10.0, 10.0);
    let errs = [pair(10.3, 10.0), pair(9.3, 10.0), pair(11.5, 10.0)];
    // IoU 0.5 and 0.2 by horizontal shifts of a 10×10 box
    let shifted = |iou: f64| {
        let s = 10.0 * (1.0 - iou) / (1.0 + iou);
        BBox::new(s, 0.0, 10.0 + s, 10.0)
    };
    let two = match_detections(
        &[det("a", BBox::new(1.0, 0.0, 11.0, 10.0)), det("b", BBox::new(3.0, 0.0, 13.0, 10.0))],
        &[gt("g", unit)],
        0.3,
    );
    vec![
        ("iou identical", iou(&unit, &unit) == 1.0),
        ("iou disjoint", iou(&unit, &BBox::new(20.0, 0.0, 30.0, 10.0)) == 0.0),
        ("iou half overlap", iou(&unit, &BBox::new(5.0, 0.0, 15.0, 10.0)) == 50.0 / 150.0),
        (
            "match at 0.5",
            match_detections(&[det("a", shifted(0.5))], &[gt("g", unit)], 0.3).pairs.len() == 1,
        ),
        (
            "no match at 0.2",
            match_detections(&[det("a", shifted(0.2))], &[gt("g", unit)], 0.3).pairs.is_empty(),
        ),
        (
            "one-to-one",
            two.pairs.len() == 1 && two.indices == vec![(0, 0)] && two.false_positives == 1,
        ),
        ("alp 2 of 3", alp(&errs, 1.0) == Some(200.0 / 3.0)),
        ("alp below min", alp(&errs, 0.2) == Some(0.0)),
        ("ale exact", ale(&[pair(10.0, 10.0), pair(4.0, 4.0)]) == Some(0.0)),
        ("ale single", ale(&[pair(12.5, 10.0)]) == Some(2.5)),
        ("easy", difficulty_of(Some(50.0), Some(0), Some(0.0)) == Difficulty::Easy),
        ("moderate", difficulty_of(Some(30.0), Some(1), Some(0.0)) == Difficulty::Moderate),
        ("hard", difficulty_of(Some(20.0), Some(0), Some(0.0)) == Difficulty::Hard),
    ]
}

fn metrics() -> Verdict {
    let examples = metric_examples();
    let failed: Vec<&str> = examples.iter().filter(|e| !e.1).map(|e| e.0).collect();
    let mut rng = stream(77, 0);
    let mut violations = 0;
    for _ in 0..1000 {
        let n = rng.random_range(1..50);
        let pairs: Vec<MatchedPair> = (0..n)
            .map(|_| {
                let d = rng.random_range(1.0..60.0);
                pair(d + rng.random_range(-5.0..5.0), d)
            })
            .collect();
        let mut ts: Vec<f64> = (0..6).map(|_| rng.random_range(0.0..6.0)).collect();
        ts.sort_by(f64::total_cmp);
        let values: Vec<f64> = ts.iter().map(|&t| alp(&pairs, t).unwrap()).collect();
        if values.windows(2).any(|w| w[0] > w[1]) {
            violations += 1;
        }
    }
    Verdict::new(
        failed.is_empty() && violations == 0,
        format!(
            "{}/{} examples exact{}, ALP monotone in {}/1000 random trials",
            examples.len() - failed.len(),
            examples.len(),
            if failed.is_empty() {
                String::new()
            } else {
                format!(" (failed: {})", failed.join(", "))
            },
            1000 - violations
        ),
    )
}

// ---------------------------------------------------------------- 11

fn pedloc(dir: &Path, args: &[&str]) -> bool {
    Command::new(env!("CARGO_BIN_EXE_pedloc"))
        .current_dir(dir)
        .args(args)
        .output()
        .map(|o| o.status.success())
        .unwrap_or(false)
}

fn cli_pipeline(dir: &Path) -> bool {
    let preds = ["--predictions", "preds.jsonl", "--gt", "data/test.jsonl"];
    pedloc(dir, &["gen", "--n", "600", "--seed", "7", "--out", "data"])
        && pedloc(
            dir,
            &["train", "--data", "data", "--out", "model.json", "--epochs", "4", "--batch", "128", "--seed", "3"],
        )
        && pedloc(
            dir,
            &["infer", "--checkpoint", "model.json", "--input", "data/test.jsonl", "--out", "preds.jsonl", "--passes", "10"],
        )
        && pedloc(dir, &[&["eval"][..], &preds, &["--out-dir", "rep"]].concat())
}

const PIPELINE_FILES: [&str; 9] = [
    "data/train.jsonl",
    "data/val.jsonl",
    "data/test.jsonl",
    "model.json",
    "model.history.csv",
    "preds.jsonl",
    "rep/metrics.csv",
    "rep/bins.csv",
    "rep/calibration.csv",
];

fn determinism(b: &Bench, model: &LocModel) -> Verdict {
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let ran = dirs.iter().all(|d| cli_pipeline(d.path()));
    let differing: Vec<&str> = PIPELINE_FILES
        .iter()
        .filter(|f| {
            std::fs::read(dirs[0].path().join(f)).ok() != std::fs::read(dirs[1].path().join(f)).ok()
        })
        .copied()
        .collect();

    // the checkpoint written by the first run, reloaded and re-run
    let d = dirs[0].path();
    let reloaded = read_checkpoint(&d.join("model.json"))
        .and_then(|c| write_checkpoint(&d.join("copy.json"), &c))
        .is_ok()
        && pedloc(
            d,
            &["infer", "--checkpoint", "copy.json", "--input", "data/test.jsonl", "--out", "copy.jsonl", "--passes", "10"],
        )
        && pedloc(d, &["eval", "--predictions", "copy.jsonl", "--gt", "data/test.jsonl", "--out-dir", "rep2"]);
    let same = |a: &str, c: &str| std::fs::read(d.join(a)).ok() == std::fs::read(d.join(c)).ok();
    let cli_round_trip = reloaded
        && same("model.json", "copy.json")
        && same("preds.jsonl", "copy.jsonl")
        && ["metrics.csv", "bins.csv", "calibration.csv"]
            .iter()
            .all(|f| same(&format!("rep/{f}"), &format!("rep2/{f}")));

    // and the full-size trained network
    let path = d.join("full.json");
    write_checkpoint(&path, &Checkpoint::new(model.clone(), TrainConfig::default())).unwrap();
    let back = read_checkpoint(&path).unwrap().model;
    let bits = |m: &LocModel| -> Vec<u64> {
        point_predict(m, &b.test_inputs)
            .unwrap()
            .iter()
            .flat_map(|h| [h.mu.to_bits(), h.s.to_bits()])
            .collect()
    };
    let lib_round_trip = bits(model) == bits(&back);

    Verdict::new(
        ran && differing.is_empty() && cli_round_trip && lib_round_trip,
        format!(
            "two gen/train/infer/eval runs {}; checkpoint round trip via CLI {}, full-size network eval outputs {}",
            if !ran {
                "did not complete".to_string()
            } else if differing.is_empty() {
                format!("byte-identical over {} files", PIPELINE_FILES.len())
            } else {
                format!("differ in {differing:?}")
            },
            if cli_round_trip { "identical" } else { "differs" },
            if lib_round_trip { "bitwise identical" } else { "differ" },
        ),
    )
}

// ---------------------------------------------------------------- 12

/// Median wall time of `runs` calls after three warm-up calls.
fn median_time(runs: usize, mut f: impl FnMut()) -> f64 {
    for _ in 0..3 {
        f();
    }
    median(
        (0..runs)
            .map(|_| {
                let t = Instant::now();
                f();
                secs(t.elapsed()) * 1e3
            })
            .collect(),
    )
}

fn latency(b: &Bench, model: &LocModel) -> Verdict {
    let mut x = Array2::zeros((512, INPUT_DIM));
    for (i, mut row) in x.rows_mut().into_iter().enumerate() {
        row.assign(&ndarray::aview1(&b.test_inputs[i].coords));
    }
    let batch = median_time(21, || {
        std::hint::black_box(model.predict(&x).unwrap());
    });
    let cfg = UncertaintyConfig::default();
    let single = median_time(21, || {
        std::hint::black_box(mc_predict(model, &b.test_inputs[0], &cfg).unwrap());
    });
    Verdict::new(
        batch < 50.0 && single < 250.0,
        format!(
            "eval-mode forward of 512 instances {batch:.1} ms (< 50 ms), T = {} MC for one instance {single:.1} ms (< 250 ms), medians of 21 runs",
            cfg.passes
        ),
    )
}

// ----------------------------------------------------------------

#[test]
fn acceptance_criteria() {
    let mut verdicts: Vec<(usize, &str, Verdict)> = Vec::new();
    let mut record = |id: usize, title: &'static str, v: Verdict| {
        say(&format!(
            "[{}] {id:>2}. {title}: {}",
            if v.passed { "PASS" } else { "FAIL" },
            v.detail
        ));
        verdicts.push((id, title, v));
    };

    record(1, "task-error oracle", task_error_oracle());
    record(2, "gradient fidelity", gradient_fidelity());
    record(3, "Laplace loss values", laplace_values());
    record(4, "variance consistency", variance_consistency());
    record(5, "geometric exactness", geometric_exactness());
    record(10, "metrics", metrics());

    let start = Instant::now();
    let b = bench();
    let first = train_model(&b, LossKind::Laplace, SEEDS[0]);
    let estimates = mc_predict_batch(&first, &b.test_inputs, &UncertaintyConfig::default()).unwrap();
    let pipeline = secs(start.elapsed());
    record(6, "end-to-end learning", end_to_end(&b, &estimates, &first, pipeline));
    record(7, "calibration", calibration(&b, &estimates));
    record(12, "latency", latency(&b, &first));
    record(11, "determinism", determinism(&b, &first));

    let mut models: Vec<(LossKind, u64, LocModel)> = vec![(LossKind::Laplace, SEEDS[0], first)];
    for loss in LossKind::ALL {
        for seed in SEEDS {
            if (loss, seed) != (LossKind::Laplace, SEEDS[0]) {
                models.push((loss, seed, train_model(&b, loss, seed)));
            }
        }
    }
    let laplace: Vec<&LocModel> = models
        .iter()
        .filter(|m| m.0 == LossKind::Laplace)
        .map(|m| &m.2)
        .collect();
    record(8, "out-of-distribution intervals", out_of_distribution(&b, &laplace));
    let refs: Vec<(LossKind, u64, &LocModel)> = models.iter().map(|(l, s, m)| (*l, *s, m)).collect();
    record(9, "loss ablation ordering", ablation(&b, &refs));

    verdicts.sort_by_key(|v| v.0);
    say("acceptance summary:");
    for (id, title, v) in &verdicts {
        say(&format!("  [{}] {id:>2}. {title}", if v.passed { "PASS" } else { "FAIL" }));
    }
    let failed: Vec<usize> = verdicts.iter().filter(|v| !v.2.passed).map(|v| v.0).collect();
    say(&format!("{}/{} criteria passed", verdicts.len() - failed.len(), verdicts.len()));
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
