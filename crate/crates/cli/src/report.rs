//! Matching predictions to ground truth and the report tables built on top.

use serde::Serialize;

use pedloc::dataio::{AnnotationRecord, PredictionRecord};
use pedloc::evalkit::{
    match_detections, metric_report, Detection, GtInstance, MatchedPair, MetricReport,
    ALP_THRESHOLDS, DISTANCE_BIN_NAMES,
};
use pedloc::geometry::Point3D;
use pedloc::height_model::{expected_task_error, HeightMixture};
use pedloc::uncertainty::{
    coverage_report, high_risk_analysis, spread_vs_task_error, CoverageReport, DistanceEstimate,
    HighRiskReport, IntervalKind, SpreadRow,
};

use crate::error::{CliError, Result};

/// Predictions matched one-to-one with ground truth.
#[derive(Debug, Clone)]
pub struct Matched {
    pub pairs: Vec<MatchedPair>,
    /// Estimate of the detection in `pairs[k]`.
    pub estimates: Vec<DistanceEstimate>,
    pub false_positives: usize,
    pub missed: usize,
}

impl Matched {
    pub fn gts(&self) -> Vec<f64> {
        self.pairs.iter().map(|p| p.d_gt).collect()
    }
}

pub fn estimate_of(p: &PredictionRecord) -> DistanceEstimate {
    DistanceEstimate {
        mu: p.mu,
        b: p.b,
        sigma: p.sigma,
        interval: p.interval,
        aleatoric_interval: p.aleatoric_interval,
        point: Point3D::new(p.point[0], p.point[1], p.point[2]),
    }
}

pub fn match_predictions(
    preds: &[PredictionRecord],
    records: &[AnnotationRecord],
    iou_threshold: f64,
) -> Result<Matched> {
    if !(0.0..=1.0).contains(&iou_threshold) {
        return Err(CliError::Invalid(format!(
            "IoU threshold {iou_threshold} outside [0, 1]"
        )));
    }
    let gts: Vec<GtInstance> = records.iter().filter_map(GtInstance::from_record).collect();
    if gts.is_empty() {
        return Err(CliError::Invalid("ground-truth file has no annotated instances".into()));
    }
    let dets: Vec<Detection> = preds.iter().map(Detection::from_prediction).collect();
    let out = match_detections(&dets, &gts, iou_threshold);
    let estimates = out.indices.iter().map(|&(i, _)| estimate_of(&preds[i])).collect();
    Ok(Matched {
        pairs: out.pairs,
        estimates,
        false_positives: out.false_positives,
        missed: out.missed,
    })
}

/// One row of the long-format metrics table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricRow {
    pub metric: String,
    pub group: String,
    pub n: usize,
    pub value: Option<f64>,
}

pub fn metric_rows(report: &MetricReport, matched: &Matched) -> Vec<MetricRow> {
    let mut rows = Vec::new();
    let row = |metric: &str, group: &str, n: usize, value: Option<f64>| MetricRow {
        metric: metric.to_string(),
        group: group.to_string(),
        n,
        value,
    };
    for (t, v) in &report.alp {
        rows.push(row(&format!("alp_{t}m"), "all", report.n, *v));
    }
    rows.push(row("ale", "all", report.n, report.ale));
    for g in &report.by_difficulty {
        rows.push(row("ale", &g.group, g.n, g.ale));
    }
    for g in &report.by_distance {
        rows.push(row("ale", &g.group, g.n, g.ale));
    }
    rows.push(row("false_positives", "all", matched.false_positives, None));
    rows.push(row("missed", "all", matched.missed, None));
    debug_assert_eq!(report.alp.len(), ALP_THRESHOLDS.len());
    debug_assert_eq!(report.by_distance.len(), DISTANCE_BIN_NAMES.len());
    rows
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CalibrationRow {
    pub interval: IntervalKind,
    pub n: usize,
    pub recall: f64,
    pub mean_interval: f64,
    pub mean_abs_err_over_half_width: f64,
    pub mean_abs_half_width_minus_task_error: Option<f64>,
    pub high_risk_fraction: f64,
    pub covered_high_risk: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Calibration {
    pub aleatoric: CoverageReport,
    pub combined: CoverageReport,
    pub high_risk: HighRiskReport,
}

pub fn calibration(matched: &Matched, mix: &HeightMixture) -> Result<Calibration> {
    let gts = matched.gts();
    Ok(Calibration {
        aleatoric: coverage_report(&matched.estimates, &gts, IntervalKind::Aleatoric, Some(mix))?,
        combined: coverage_report(&matched.estimates, &gts, IntervalKind::Combined, Some(mix))?,
        high_risk: high_risk_analysis(&matched.estimates, &gts)?,
    })
}

impl Calibration {
    pub fn rows(&self) -> Vec<CalibrationRow> {
        [self.aleatoric, self.combined]
            .iter()
            .map(|c| CalibrationRow {
                interval: c.kind,
                n: c.n,
                recall: c.recall,
                mean_interval: c.mean_interval,
                mean_abs_err_over_half_width: c.mean_abs_err_over_sigma,
                mean_abs_half_width_minus_task_error: c.mean_abs_sigma_minus_task_error,
                high_risk_fraction: self.high_risk.high_risk_fraction,
                covered_high_risk: self.high_risk.covered_high_risk,
            })
            .collect()
    }
}

/// Bin edges `0, w, 2w, ...` up to the largest ground-truth distance.
pub fn bin_edges(gts: &[f64], width: f64) -> Result<Vec<f64>> {
    if !(width > 0.0) {
        return Err(CliError::Invalid(format!("bin width {width} must be positive")));
    }
    let max = gts.iter().cloned().fold(0.0, f64::max);
    let n = (max / width).floor() as usize + 1;
    Ok((0..=n).map(|k| k as f64 * width).collect())
}

pub fn spread_rows(matched: &Matched, mix: &HeightMixture, width: f64) -> Result<Vec<SpreadRow>> {
    let gts = matched.gts();
    let edges = bin_edges(&gts, width)?;
    Ok(spread_vs_task_error(&matched.estimates, &gts, mix, &edges)?)
}

/// Per-bin ALE next to the mean task error and mean spreads.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BinRow {
    pub d_lo: f64,
    pub d_hi: f64,
    pub n: usize,
    pub ale: Option<f64>,
    pub mean_b: Option<f64>,
    pub mean_sigma: Option<f64>,
    pub e_hat: Option<f64>,
}

pub fn bin_rows(matched: &Matched, mix: &HeightMixture, width: f64) -> Result<Vec<BinRow>> {
    let gts = matched.gts();
    let edges = bin_edges(&gts, width)?;
    Ok(edges
        .windows(2)
        .map(|w| {
            let (mut n, mut err, mut b, mut sigma, mut e) = (0usize, 0.0, 0.0, 0.0, 0.0);
            for (p, est) in matched.pairs.iter().zip(&matched.estimates) {
                if p.d_gt >= w[0] && p.d_gt < w[1] {
                    n += 1;
                    err += (est.mu - p.d_gt).abs();
                    b += est.b;
                    sigma += est.sigma;
                    e += expected_task_error(mix, p.d_gt);
                }
            }
            let mean = |s: f64| (n > 0).then(|| s / n as f64);
            BinRow {
                d_lo: w[0],
                d_hi: w[1],
                n,
                ale: mean(err),
                mean_b: mean(b),
                mean_sigma: mean(sigma),
                e_hat: mean(e),
            }
        })
        .collect())
}

/// Per-instance values for scatter plots.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ErrorPoint {
    pub id: String,
    pub d_gt: f64,
    pub d_pred: f64,
    pub abs_err: f64,
    pub b: f64,
    pub sigma: f64,
    pub e_hat: f64,
}

pub fn error_points(matched: &Matched, mix: &HeightMixture) -> Vec<ErrorPoint> {
    matched
        .pairs
        .iter()
        .zip(&matched.estimates)
        .map(|(p, e)| ErrorPoint {
            id: p.id.clone(),
            d_gt: p.d_gt,
            d_pred: e.mu,
            abs_err: (e.mu - p.d_gt).abs(),
            b: e.b,
            sigma: e.sigma,
            e_hat: expected_task_error(mix, p.d_gt),
        })
        .collect()
}

/// Coverage of `μ ± k·b` and `μ ± k·σ` against the Laplace reference
/// `1 − e^{−k}`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReliabilityPoint {
    pub k: f64,
    pub aleatoric_coverage: f64,
    pub combined_coverage: f64,
    pub laplace_reference: f64,
}

pub fn reliability_curve(matched: &Matched) -> Vec<ReliabilityPoint> {
    let n = matched.pairs.len().max(1) as f64;
    (1..=40)
        .map(|i| {
            let k = i as f64 * 0.1;
            let (mut a, mut c) = (0usize, 0usize);
            for (p, e) in matched.pairs.iter().zip(&matched.estimates) {
                let err = (p.d_gt - e.mu).abs();
                a += usize::from(err <= k * e.b);
                c += usize::from(err <= k * e.sigma);
            }
            ReliabilityPoint {
                k,
                aleatoric_coverage: 100.0 * a as f64 / n,
                combined_coverage: 100.0 * c as f64 / n,
                laplace_reference: 100.0 * (1.0 - (-k).exp()),
            }
        })
        .collect()
}

pub fn metrics(matched: &Matched) -> MetricReport {
    metric_report(&matched.pairs)
}
