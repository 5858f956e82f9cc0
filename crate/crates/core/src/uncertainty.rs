//! Combined aleatoric and epistemic uncertainty from MC dropout.
//!
//! Each stochastic pass `t` yields a Laplace distribution `(μ_t, b_t)`. `I`
//! samples are drawn from every pass and the variance of all `T·I` samples is
//! the combined uncertainty `σ²`.

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Open01};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{localize, NormalizedInput, Point3D, INPUT_DIM};
use crate::height_model::{expected_task_error, HeightMixture};
use crate::net::{DropoutMasks, LocModel, PredictionHead};
use crate::rng::{derive_seed, stream};

const MASK_STREAM: u64 = 0x6d61736b;
const SAMPLE_STREAM: u64 = 0x6c61706c;
/// Upper bound on rows per MC forward batch.
const MC_CHUNK_ROWS: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UncertaintyConfig {
    /// Stochastic forward passes.
    pub passes: usize,
    /// Laplace samples per pass.
    pub samples: usize,
    /// Dropout probability at test time; `None` uses the model's.
    pub p_drop: Option<f64>,
    pub seed: u64,
}

impl Default for UncertaintyConfig {
    fn default() -> Self {
        UncertaintyConfig {
            passes: 50,
            samples: 100,
            p_drop: None,
            seed: 0,
        }
    }
}

impl UncertaintyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.passes == 0 || self.samples == 0 {
            return Err(Error::InvalidConfig(
                "MC passes and samples per pass must be at least 1".into(),
            ));
        }
        if let Some(p) = self.p_drop {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::InvalidConfig(format!("p_drop {p} outside [0, 1)")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistanceEstimate {
    pub mu: f64,
    /// Mean spread over passes, meters.
    pub b: f64,
    /// Combined standard deviation, meters.
    pub sigma: f64,
    pub interval: [f64; 2],
    pub aleatoric_interval: [f64; 2],
    pub point: Point3D,
}

impl DistanceEstimate {
    pub fn new(mu: f64, b: f64, sigma: f64, point: Point3D) -> Self {
        DistanceEstimate {
            mu,
            b,
            sigma,
            interval: [mu - sigma, mu + sigma],
            aleatoric_interval: [mu - b, mu + b],
            point,
        }
    }
}

/// Summary of a set of passes before localization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PassSummary {
    pub mu: f64,
    pub b: f64,
    pub sigma: f64,
}

/// Draws from `Laplace(mu, b)` by inverting the CDF.
pub fn sample_laplace<R: Rng + ?Sized>(rng: &mut R, mu: f64, b: f64) -> f64 {
    let u: f64 = Open01.sample(rng);
    let c = u - 0.5;
    mu - b * c.signum() * (1.0 - 2.0 * c.abs()).ln()
}

/// Combines per-pass `(μ_t, b_t)` into the mean prediction, mean spread and
/// the standard deviation of `samples` Laplace draws per pass.
pub fn combine_passes<R: Rng + ?Sized>(
    passes: &[(f64, f64)],
    samples: usize,
    rng: &mut R,
) -> Result<PassSummary> {
    if passes.is_empty() {
        return Err(Error::EmptyInput("no forward passes"));
    }
    if samples == 0 {
        return Err(Error::InvalidConfig("samples per pass must be at least 1".into()));
    }
    let t = passes.len() as f64;
    let mu = passes.iter().map(|p| p.0).sum::<f64>() / t;
    let b = passes.iter().map(|p| p.1).sum::<f64>() / t;
    // shifted sums keep the variance accurate at large distances
    let (mut s1, mut s2) = (0.0, 0.0);
    for &(m, spread) in passes {
        for _ in 0..samples {
            let x = sample_laplace(rng, m, spread) - mu;
            s1 += x;
            s2 += x * x;
        }
    }
    let n = t * samples as f64;
    let mean = s1 / n;
    let var = (s2 / n - mean * mean).max(0.0);
    Ok(PassSummary {
        mu,
        b,
        sigma: var.sqrt(),
    })
}

/// Per-instance `(μ_t, b_t)` for `passes` MC-dropout passes over `inputs`.
/// The dropout mask for instance `i` and pass `t` depends only on
/// `(seed, i, t)`, so results do not depend on how rows are batched.
pub fn mc_passes(
    model: &LocModel,
    inputs: &[NormalizedInput],
    passes: usize,
    p_drop: f64,
    seed: u64,
) -> Result<Vec<Vec<(f64, f64)>>> {
    if !model.trained {
        return Err(Error::Untrained);
    }
    let mask_seed = derive_seed(seed, MASK_STREAM);
    let jobs: Vec<(usize, usize)> = (0..inputs.len())
        .flat_map(|i| (0..passes).map(move |t| (i, t)))
        .collect();
    let mut out = vec![Vec::with_capacity(passes); inputs.len()];
    for chunk in jobs.chunks(MC_CHUNK_ROWS) {
        let mut x = Array2::zeros((chunk.len(), INPUT_DIM));
        for (row, &(i, _)) in chunk.iter().enumerate() {
            x.row_mut(row).assign(&ndarray::aview1(&inputs[i].coords));
        }
        let y = if p_drop > 0.0 {
            let masks = DropoutMasks::per_row(&model.arch, chunk.len(), p_drop, |row| {
                let (i, t) = chunk[row];
                stream(derive_seed(mask_seed, i as u64), t as u64)
            });
            model.predict_mc(&x, &masks)?
        } else {
            model.predict(&x)?
        };
        for (row, &(i, _)) in chunk.iter().enumerate() {
            let head = PredictionHead {
                mu: y[[row, 0]],
                s: y[[row, 1]],
            };
            out[i].push((head.mu, head.spread()));
        }
    }
    Ok(out)
}

/// MC-dropout prediction for a batch of instances.
pub fn mc_predict_batch(
    model: &LocModel,
    inputs: &[NormalizedInput],
    cfg: &UncertaintyConfig,
) -> Result<Vec<DistanceEstimate>> {
    cfg.validate()?;
    let p = cfg.p_drop.unwrap_or(model.p_drop);
    let passes = mc_passes(model, inputs, cfg.passes, p, cfg.seed)?;
    let sample_seed = derive_seed(cfg.seed, SAMPLE_STREAM);
    passes
        .iter()
        .zip(inputs)
        .enumerate()
        .map(|(i, (pp, input))| {
            let mut rng = stream(sample_seed, i as u64);
            let s = combine_passes(pp, cfg.samples, &mut rng)?;
            let point = localize(s.mu, &input.center_ray)?;
            Ok(DistanceEstimate::new(s.mu, s.b, s.sigma, point))
        })
        .collect()
}

pub fn mc_predict(
    model: &LocModel,
    input: &NormalizedInput,
    cfg: &UncertaintyConfig,
) -> Result<DistanceEstimate> {
    Ok(mc_predict_batch(model, std::slice::from_ref(input), cfg)?.remove(0))
}

/// Deterministic eval-mode prediction `(μ, b)` for each input.
pub fn point_predict(model: &LocModel, inputs: &[NormalizedInput]) -> Result<Vec<PredictionHead>> {
    if !model.trained {
        return Err(Error::Untrained);
    }
    let mut x = Array2::zeros((inputs.len(), INPUT_DIM));
    for (row, input) in inputs.iter().enumerate() {
        x.row_mut(row).assign(&ndarray::aview1(&input.coords));
    }
    let y = model.predict(&x)?;
    Ok(y.rows()
        .into_iter()
        .map(|r| PredictionHead { mu: r[0], s: r[1] })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntervalKind {
    /// `μ ± b`
    Aleatoric,
    /// `μ ± σ`
    Combined,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub kind: IntervalKind,
    pub n: usize,
    /// Percent of ground truths inside the interval.
    pub recall: f64,
    /// Mean interval width, meters.
    pub mean_interval: f64,
    /// Mean `|x − μ| / half-width`.
    pub mean_abs_err_over_sigma: f64,
    /// Mean `|half-width − ê(x)|` when a height model is given.
    pub mean_abs_sigma_minus_task_error: Option<f64>,
}

fn half_width(e: &DistanceEstimate, kind: IntervalKind) -> f64 {
    match kind {
        IntervalKind::Aleatoric => e.b,
        IntervalKind::Combined => e.sigma,
    }
}

fn check_pairs(estimates: &[DistanceEstimate], gts: &[f64]) -> Result<()> {
    if estimates.len() != gts.len() {
        return Err(Error::Shape(format!(
            "{} estimates but {} ground truths",
            estimates.len(),
            gts.len()
        )));
    }
    if estimates.is_empty() {
        return Err(Error::EmptyInput("no matched pairs"));
    }
    Ok(())
}

pub fn coverage_report(
    estimates: &[DistanceEstimate],
    gts: &[f64],
    kind: IntervalKind,
    mix: Option<&HeightMixture>,
) -> Result<CoverageReport> {
    check_pairs(estimates, gts)?;
    let n = estimates.len() as f64;
    let (mut inside, mut width, mut ratio, mut gap) = (0usize, 0.0, 0.0, 0.0);
    for (e, &x) in estimates.iter().zip(gts) {
        let hw = half_width(e, kind);
        let err = (x - e.mu).abs();
        if err <= hw {
            inside += 1;
        }
        width += 2.0 * hw;
        ratio += if hw > 0.0 {
            err / hw
        } else if err == 0.0 {
            0.0
        } else {
            f64::INFINITY
        };
        if let Some(m) = mix {
            gap += (hw - expected_task_error(m, x)).abs();
        }
    }
    Ok(CoverageReport {
        kind,
        n: estimates.len(),
        recall: 100.0 * inside as f64 / n,
        mean_interval: width / n,
        mean_abs_err_over_sigma: ratio / n,
        mean_abs_sigma_minus_task_error: mix.map(|_| gap / n),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HighRiskReport {
    pub n: usize,
    /// Percent of instances closer than predicted.
    pub high_risk_fraction: f64,
    /// Percent of high-risk instances inside the combined interval; `None`
    /// when there are none.
    pub covered_high_risk: Option<f64>,
}

pub fn high_risk_analysis(estimates: &[DistanceEstimate], gts: &[f64]) -> Result<HighRiskReport> {
    check_pairs(estimates, gts)?;
    let (mut risky, mut covered) = (0usize, 0usize);
    for (e, &x) in estimates.iter().zip(gts) {
        if x < e.mu {
            risky += 1;
            if x >= e.interval[0] && x <= e.interval[1] {
                covered += 1;
            }
        }
    }
    Ok(HighRiskReport {
        n: estimates.len(),
        high_risk_fraction: 100.0 * risky as f64 / estimates.len() as f64,
        covered_high_risk: (risky > 0).then(|| 100.0 * covered as f64 / risky as f64),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpreadRow {
    pub d_lo: f64,
    pub d_hi: f64,
    pub n: usize,
    pub mean_b: Option<f64>,
    pub e_hat: Option<f64>,
    pub b_minus_e_hat: Option<f64>,
}

impl SpreadRow {
    pub fn is_empty(&self) -> bool {
        self.n == 0
    }
}

/// Mean predicted spread against the mean task error per ground-truth
/// distance bin `[edges[k], edges[k + 1])`.
pub fn spread_vs_task_error(
    estimates: &[DistanceEstimate],
    gts: &[f64],
    mix: &HeightMixture,
    edges: &[f64],
) -> Result<Vec<SpreadRow>> {
    check_pairs(estimates, gts)?;
    if edges.len() < 2 || edges.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::InvalidConfig("bin edges must be increasing".into()));
    }
    Ok(edges
        .windows(2)
        .map(|w| {
            let (mut n, mut sb, mut se) = (0usize, 0.0, 0.0);
            for (e, &x) in estimates.iter().zip(gts) {
                if x >= w[0] && x < w[1] {
                    n += 1;
                    sb += e.b;
                    se += expected_task_error(mix, x);
                }
            }
            let mean = |s: f64| (n > 0).then(|| s / n as f64);
            SpreadRow {
                d_lo: w[0],
                d_hi: w[1],
                n,
                mean_b: mean(sb),
                e_hat: mean(se),
                b_minus_e_hat: mean(sb - se),
            }
        })
        .collect())
}
