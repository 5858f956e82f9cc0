use pedloc::geometry::{NormalizedInput, Point3D, INPUT_DIM};
use pedloc::net::{ArchConfig, LocModel};
use pedloc::rng::stream;
use pedloc::uncertainty::{
    combine_passes, coverage_report, high_risk_analysis, mc_predict, mc_predict_batch,
    DistanceEstimate, IntervalKind, UncertaintyConfig,
};
use rand::Rng;
use rand_distr::{Distribution, Exp1};

/// Laplace draw as the difference of two unit exponentials.
fn laplace_oracle<R: Rng>(rng: &mut R, mu: f64, b: f64) -> f64 {
    let a: f64 = Exp1.sample(rng);
    let c: f64 = Exp1.sample(rng);
    mu + b * (a - c)
}

#[test]
fn single_pass_variance_is_two_b_squared() {
    let b = 0.8;
    let mean_var: f64 = (0..20)
        .map(|seed| {
            let s = combine_passes(&[(15.0, b)], 100_000, &mut stream(seed, 1)).unwrap();
            s.sigma * s.sigma
        })
        .sum::<f64>()
        / 20.0;
    let target = 2.0 * b * b;
    assert!((mean_var / target - 1.0).abs() < 0.05, "{mean_var} vs {target}");
}

#[test]
fn deterministic_two_point_passes() {
    let s = combine_passes(&[(9.0, 0.0), (11.0, 0.0)], 100_000, &mut stream(0, 0)).unwrap();
    assert!((s.sigma * s.sigma - 1.0).abs() < 0.02);
}

#[test]
fn partition_of_samples_does_not_matter_for_identical_passes() {
    let b = 0.5;
    let avg = |passes: usize, per: usize| -> f64 {
        (0..20)
            .map(|seed| {
                let p = vec![(20.0, b); passes];
                combine_passes(&p, per, &mut stream(seed, passes as u64)).unwrap().sigma.powi(2)
            })
            .sum::<f64>()
            / 20.0
    };
    let one = avg(1, 20_000);
    let many = avg(200, 100);
    // each average has a relative standard error of about 0.35%
    assert!((one / many - 1.0).abs() < 0.03, "{one} vs {many}");
}

#[test]
fn sigma_is_monotone_in_spread_for_fixed_means() {
    let means = [18.0, 19.5, 21.0, 20.2];
    let mut prev = 0.0;
    for b in [0.0, 0.2, 0.4, 0.8, 1.6] {
        let passes: Vec<_> = means.iter().map(|&m| (m, b)).collect();
        let s = combine_passes(&passes, 50_000, &mut stream(9, 0)).unwrap();
        assert!(s.sigma >= prev);
        prev = s.sigma;
    }
}

#[test]
fn laplace_coverage_matches_the_cdf() {
    let mut rng = stream(21, 0);
    let n = 100_000;
    let (mut es, mut gts) = (Vec::with_capacity(n), Vec::with_capacity(n));
    for _ in 0..n {
        let mu = rng.random_range(5.0..40.0);
        let b = rng.random_range(0.1..2.0);
        es.push(DistanceEstimate::new(mu, b, 2.0 * b, Point3D::new(0.0, 0.0, mu)));
        gts.push(laplace_oracle(&mut rng, mu, b));
    }
    let r = coverage_report(&es, &gts, IntervalKind::Aleatoric, None).unwrap();
    let expected = 100.0 * (1.0 - (-1.0f64).exp());
    assert!((r.recall - expected).abs() < 1.0, "{}", r.recall);
    let c = coverage_report(&es, &gts, IntervalKind::Combined, None).unwrap();
    assert!(c.recall > r.recall);
}

#[test]
fn unbiased_residuals_are_high_risk_half_the_time() {
    let mut rng = stream(22, 0);
    let n = 10_000;
    let (mut es, mut gts) = (Vec::new(), Vec::new());
    for _ in 0..n {
        let gt = rng.random_range(5.0..40.0);
        let mu = laplace_oracle(&mut rng, gt, 0.05 * gt);
        es.push(DistanceEstimate::new(mu, 0.05 * mu, 0.08 * mu, Point3D::new(0.0, 0.0, mu)));
        gts.push(gt);
    }
    let r = high_risk_analysis(&es, &gts).unwrap();
    assert!((r.high_risk_fraction - 50.0).abs() < 3.0, "{}", r.high_risk_fraction);
}

fn inputs(n: usize) -> Vec<NormalizedInput> {
    let mut rng = stream(30, 0);
    (0..n)
        .map(|_| {
            let mut coords = [0.0; INPUT_DIM];
            for c in coords.iter_mut() {
                *c = rng.random_range(-0.1..0.1);
            }
            NormalizedInput {
                coords,
                center_ray: [0.0, 0.0, 1.0],
            }
        })
        .collect()
}

fn fake_trained(p: f64) -> LocModel {
    let mut m = LocModel::new(ArchConfig::default(), p, &mut stream(31, 0)).unwrap();
    // a positive distance head
    m.params.linears.last_mut().unwrap().bias[0] = 20.0;
    m.params.linears.last_mut().unwrap().bias[1] = -3.0;
    m.trained = true;
    m
}

#[test]
fn mc_results_do_not_depend_on_batching() {
    let model = fake_trained(0.2);
    let xs = inputs(5);
    let cfg = UncertaintyConfig {
        passes: 10,
        samples: 20,
        ..Default::default()
    };
    let batch = mc_predict_batch(&model, &xs, &cfg).unwrap();
    let single = mc_predict(&model, &xs[0], &cfg).unwrap();
    assert_eq!(batch[0], single);
    let again = mc_predict_batch(&model, &xs, &cfg).unwrap();
    assert_eq!(batch, again);
}

#[test]
fn without_dropout_sigma_comes_from_the_spread_only() {
    let model = fake_trained(0.0);
    let xs = inputs(3);
    let cfg = UncertaintyConfig {
        passes: 1,
        samples: 100_000,
        ..Default::default()
    };
    for e in mc_predict_batch(&model, &xs, &cfg).unwrap() {
        let ratio = e.sigma * e.sigma / (2.0 * e.b * e.b);
        assert!((ratio - 1.0).abs() < 0.05, "{ratio}");
        assert!(e.interval[0] <= e.aleatoric_interval[1]);
    }
}
