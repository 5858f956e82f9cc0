//! Localization metrics, ground-truth matching and loss ablations.

use serde::{Deserialize, Serialize};

use crate::dataio::{AnnotationRecord, PredictionRecord};
use crate::error::{Error, Result};
use crate::geo_baseline::{estimate_distance, fit_segments, SegmentObservation, SegmentStats};
use crate::geometry::{normalize_keypoints_with, BBox, Point3D};
use crate::net::{train, LossKind, TrainConfig, TrainingSet};
use crate::uncertainty::point_predict;

pub const DEFAULT_IOU_THRESHOLD: f64 = 0.3;
pub const ALP_THRESHOLDS: [f64; 3] = [0.5, 1.0, 2.0];
/// Lower edges of the ground-truth distance bins; the last bin is open.
pub const DISTANCE_BIN_EDGES: [f64; 4] = [0.0, 10.0, 20.0, 30.0];
pub const DISTANCE_BIN_NAMES: [&str; 4] = ["0-10", "10-20", "20-30", "30+"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Difficulty {
    Easy,
    Moderate,
    Hard,
}

impl Difficulty {
    pub const ALL: [Difficulty; 3] = [Difficulty::Easy, Difficulty::Moderate, Difficulty::Hard];

    pub fn name(&self) -> &'static str {
        match self {
            Difficulty::Easy => "easy",
            Difficulty::Moderate => "moderate",
            Difficulty::Hard => "hard",
        }
    }
}

/// KITTI regimes: easy needs a box at least 40 px tall, no occlusion and at
/// most 15% truncation; moderate at least 25 px, occlusion ≤ 1 and at most
/// 30% truncation. Everything else, including missing fields, is hard.
pub fn difficulty_of(
    bbox_height: Option<f64>,
    occlusion: Option<u8>,
    truncation: Option<f64>,
) -> Difficulty {
    let (Some(h), Some(occ), Some(trunc)) = (bbox_height, occlusion, truncation) else {
        return Difficulty::Hard;
    };
    if h >= 40.0 && occ == 0 && trunc <= 0.15 {
        Difficulty::Easy
    } else if h >= 25.0 && occ <= 1 && trunc <= 0.30 {
        Difficulty::Moderate
    } else {
        Difficulty::Hard
    }
}

/// Intersection over union; degenerate boxes score 0.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    if a.is_degenerate() || b.is_degenerate() {
        return 0.0;
    }
    let w = (a.u_max.min(b.u_max) - a.u_min.max(b.u_min)).max(0.0);
    let h = (a.v_max.min(b.v_max) - a.v_min.max(b.v_min)).max(0.0);
    let inter = w * h;
    let union = a.area() + b.area() - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GtInstance {
    pub id: String,
    pub bbox: BBox,
    pub d: f64,
    pub occlusion: Option<u8>,
    pub truncation: Option<f64>,
}

impl GtInstance {
    pub fn from_record(r: &AnnotationRecord) -> Option<Self> {
        let gt = r.gt.as_ref()?;
        Some(GtInstance {
            id: r.id.clone(),
            bbox: r.bbox(),
            d: gt.distance(),
            occlusion: gt.occlusion,
            truncation: gt.truncation,
        })
    }

    pub fn difficulty(&self) -> Difficulty {
        difficulty_of(Some(self.bbox.height()), self.occlusion, self.truncation)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub id: String,
    pub bbox: BBox,
    pub d: f64,
}

impl Detection {
    pub fn from_prediction(p: &PredictionRecord) -> Self {
        Detection {
            id: p.id.clone(),
            bbox: p.bbox(),
            d: p.mu,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchedPair {
    /// Ground-truth instance id.
    pub id: String,
    pub d_pred: f64,
    pub d_gt: f64,
    pub bbox: BBox,
    pub difficulty: Difficulty,
}

impl MatchedPair {
    pub fn abs_error(&self) -> f64 {
        (self.d_pred - self.d_gt).abs()
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MatchOutcome {
    pub pairs: Vec<MatchedPair>,
    /// `(detection index, ground-truth index)` of each pair.
    pub indices: Vec<(usize, usize)>,
    /// Detections without a ground truth.
    pub false_positives: usize,
    /// Ground truths without a detection.
    pub missed: usize,
}

/// Greedy one-to-one matching by descending IoU. Ties go to the lower
/// detection id, then the lower ground-truth id.
pub fn match_detections(
    detections: &[Detection],
    gts: &[GtInstance],
    threshold: f64,
) -> MatchOutcome {
    let mut candidates = Vec::new();
    for (i, det) in detections.iter().enumerate() {
        for (j, gt) in gts.iter().enumerate() {
            let score = iou(&det.bbox, &gt.bbox);
            if score >= threshold && score > 0.0 {
                candidates.push((score, i, j));
            }
        }
    }
    candidates.sort_by(|a, b| {
        b.0.total_cmp(&a.0)
            .then_with(|| detections[a.1].id.cmp(&detections[b.1].id))
            .then_with(|| gts[a.2].id.cmp(&gts[b.2].id))
            .then_with(|| (a.1, a.2).cmp(&(b.1, b.2)))
    });
    let mut det_used = vec![false; detections.len()];
    let mut gt_used = vec![false; gts.len()];
    let mut pairs = Vec::new();
    let mut indices = Vec::new();
    for (_, i, j) in candidates {
        if det_used[i] || gt_used[j] {
            continue;
        }
        det_used[i] = true;
        gt_used[j] = true;
        indices.push((i, j));
        pairs.push(MatchedPair {
            id: gts[j].id.clone(),
            d_pred: detections[i].d,
            d_gt: gts[j].d,
            bbox: gts[j].bbox,
            difficulty: gts[j].difficulty(),
        });
    }
    MatchOutcome {
        pairs,
        indices,
        false_positives: det_used.iter().filter(|u| !**u).count(),
        missed: gt_used.iter().filter(|u| !**u).count(),
    }
}

/// Percent of pairs with absolute error strictly below `threshold`; `None`
/// for an empty set.
pub fn alp(pairs: &[MatchedPair], threshold: f64) -> Option<f64> {
    if pairs.is_empty() {
        return None;
    }
    let hits = pairs.iter().filter(|p| p.abs_error() < threshold).count();
    Some(100.0 * hits as f64 / pairs.len() as f64)
}

/// Mean absolute distance error; `None` for an empty set.
pub fn ale(pairs: &[MatchedPair]) -> Option<f64> {
    if pairs.is_empty() {
        return None;
    }
    Some(pairs.iter().map(MatchedPair::abs_error).sum::<f64>() / pairs.len() as f64)
}

pub fn distance_bin(d: f64) -> usize {
    DISTANCE_BIN_EDGES.iter().rposition(|&e| d >= e).unwrap_or(0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Grouping {
    Difficulty,
    DistanceBin,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupAle {
    pub group: String,
    pub n: usize,
    /// `None` marks an empty group.
    pub ale: Option<f64>,
}

pub fn ale_by(pairs: &[MatchedPair], grouping: Grouping) -> Vec<GroupAle> {
    let groups: Vec<(String, Vec<&MatchedPair>)> = match grouping {
        Grouping::Difficulty => Difficulty::ALL
            .iter()
            .map(|d| {
                (
                    d.name().to_string(),
                    pairs.iter().filter(|p| p.difficulty == *d).collect(),
                )
            })
            .collect(),
        Grouping::DistanceBin => DISTANCE_BIN_NAMES
            .iter()
            .enumerate()
            .map(|(k, name)| {
                (
                    name.to_string(),
                    pairs.iter().filter(|p| distance_bin(p.d_gt) == k).collect(),
                )
            })
            .collect(),
    };
    groups
        .into_iter()
        .map(|(group, ps)| GroupAle {
            group,
            n: ps.len(),
            ale: (!ps.is_empty())
                .then(|| ps.iter().map(|p| p.abs_error()).sum::<f64>() / ps.len() as f64),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub n: usize,
    /// `(threshold, ALP %)` pairs.
    pub alp: Vec<(f64, Option<f64>)>,
    pub ale: Option<f64>,
    pub by_difficulty: Vec<GroupAle>,
    pub by_distance: Vec<GroupAle>,
}

impl MetricReport {
    pub fn distance_ale(&self, bin: usize) -> Option<f64> {
        self.by_distance.get(bin).and_then(|g| g.ale)
    }
}

pub fn metric_report(pairs: &[MatchedPair]) -> MetricReport {
    MetricReport {
        n: pairs.len(),
        alp: ALP_THRESHOLDS.iter().map(|&t| (t, alp(pairs, t))).collect(),
        ale: ale(pairs),
        by_difficulty: ale_by(pairs, Grouping::Difficulty),
        by_distance: ale_by(pairs, Grouping::DistanceBin),
    }
}

/// Restricts every method's pairs to the ground-truth ids matched by all
/// methods.
pub fn common_subset(methods: &[Vec<MatchedPair>]) -> Vec<Vec<MatchedPair>> {
    use std::collections::BTreeSet;
    let Some(first) = methods.first() else {
        return Vec::new();
    };
    let mut common: BTreeSet<&str> = first.iter().map(|p| p.id.as_str()).collect();
    for m in &methods[1..] {
        let ids: BTreeSet<&str> = m.iter().map(|p| p.id.as_str()).collect();
        common.retain(|id| ids.contains(id));
    }
    methods
        .iter()
        .map(|m| {
            m.iter()
                .filter(|p| common.contains(p.id.as_str()))
                .cloned()
                .collect()
        })
        .collect()
}

/// Pairs for records that carry ground truth, in record order. `preds[i]`
/// belongs to `records[i]`; `None` entries are skipped.
pub fn pairs_from_records(records: &[AnnotationRecord], preds: &[Option<f64>]) -> Vec<MatchedPair> {
    records
        .iter()
        .zip(preds)
        .filter_map(|(r, p)| {
            let gt = GtInstance::from_record(r)?;
            Some(MatchedPair {
                d_pred: (*p)?,
                d_gt: gt.d,
                difficulty: gt.difficulty(),
                bbox: gt.bbox,
                id: gt.id,
            })
        })
        .collect()
}

/// Segment statistics from annotated records with 3D centers.
pub fn fit_segments_from_records(records: &[AnnotationRecord]) -> Result<SegmentStats> {
    let parsed = records
        .iter()
        .filter_map(|r| {
            let gt = r.gt.as_ref()?;
            Some((|| Ok((r.keypoints()?, r.camera()?, gt.center)))())
        })
        .collect::<Result<Vec<_>>>()?;
    fit_segments(parsed.iter().map(|(kp, camera, c)| SegmentObservation {
        kp,
        camera,
        center: Point3D::new(c[0], c[1], c[2]),
    }))
}

/// Geometric-baseline distance per record; `None` where it cannot be
/// resolved.
pub fn geometric_predictions(records: &[AnnotationRecord], stats: &SegmentStats) -> Vec<Option<f64>> {
    records
        .iter()
        .map(|r| {
            let kp = r.keypoints().ok()?;
            let camera = r.camera().ok()?;
            estimate_distance(&kp, &camera, stats).ok()
        })
        .collect()
}

/// Eval-mode network distances per record; `None` where the keypoints
/// cannot be normalized.
pub fn network_predictions(
    model: &crate::net::LocModel,
    records: &[AnnotationRecord],
) -> Result<Vec<Option<f64>>> {
    let inputs: Vec<_> = records
        .iter()
        .map(|r| {
            let kp = r.keypoints().ok()?;
            let camera = r.camera().ok()?;
            normalize_keypoints_with(&camera, &kp, model.centering).ok()
        })
        .collect();
    let valid: Vec<_> = inputs.iter().flatten().cloned().collect();
    let heads = point_predict(model, &valid)?;
    let mut it = heads.into_iter();
    Ok(inputs
        .iter()
        .map(|i| i.as_ref().map(|_| it.next().expect("one head per input").mu))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub method: String,
    /// `None` for the deterministic geometric baseline.
    pub seed: Option<u64>,
    pub report: Option<MetricReport>,
    pub error: Option<String>,
}

/// One CSV row: per-bin and overall ALE as mean and standard deviation over
/// seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub method: String,
    pub runs: usize,
    pub failed: usize,
    pub ale_0_10: Option<f64>,
    pub ale_0_10_std: Option<f64>,
    pub ale_10_20: Option<f64>,
    pub ale_10_20_std: Option<f64>,
    pub ale_20_30: Option<f64>,
    pub ale_20_30_std: Option<f64>,
    pub ale_30_plus: Option<f64>,
    pub ale_30_plus_std: Option<f64>,
    pub ale_overall: Option<f64>,
    pub ale_overall_std: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
    pub cells: Vec<AblationCell>,
    pub rows: Vec<AblationRow>,
}

impl AblationResult {
    /// Median over seeds of a method's overall ALE.
    pub fn median_overall(&self, method: &str) -> Option<f64> {
        let values: Vec<f64> = self
            .cells
            .iter()
            .filter(|c| c.method == method)
            .filter_map(|c| c.report.as_ref()?.ale)
            .collect();
        median(&values)
    }

    pub fn median_bin(&self, method: &str, bin: usize) -> Option<f64> {
        let values: Vec<f64> = self
            .cells
            .iter()
            .filter(|c| c.method == method)
            .filter_map(|c| c.report.as_ref()?.distance_ale(bin))
            .collect();
        median(&values)
    }
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Some(if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    })
}

fn mean_std(values: &[f64]) -> (Option<f64>, Option<f64>) {
    if values.is_empty() {
        return (None, None);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (Some(mean), Some(var.sqrt()))
}

fn summarize(method: &str, cells: &[&AblationCell]) -> AblationRow {
    let reports: Vec<&MetricReport> = cells.iter().filter_map(|c| c.report.as_ref()).collect();
    let bin = |k: usize| {
        mean_std(&reports.iter().filter_map(|r| r.distance_ale(k)).collect::<Vec<_>>())
    };
    let (b0, s0) = bin(0);
    let (b1, s1) = bin(1);
    let (b2, s2) = bin(2);
    let (b3, s3) = bin(3);
    let (o, so) = mean_std(&reports.iter().filter_map(|r| r.ale).collect::<Vec<_>>());
    AblationRow {
        method: method.to_string(),
        runs: cells.len(),
        failed: cells.len() - reports.len(),
        ale_0_10: b0,
        ale_0_10_std: s0,
        ale_10_20: b1,
        ale_10_20_std: s1,
        ale_20_30: b2,
        ale_20_30_std: s2,
        ale_30_plus: b3,
        ale_30_plus_std: s3,
        ale_overall: o,
        ale_overall_std: so,
    }
}

pub const GEOMETRIC_METHOD: &str = "geometric";

/// Splits of annotated records used by an ablation.
#[derive(Debug, Clone, Copy)]
pub struct AblationData<'a> {
    pub train: &'a [AnnotationRecord],
    pub val: &'a [AnnotationRecord],
    pub test: &'a [AnnotationRecord],
}

/// Trains one model per `(loss, seed)` and evaluates it on the test split
/// next to the geometric baseline. Training failures are recorded in the
/// affected cell. `on_model` sees every trained model.
pub fn run_ablation(
    data: AblationData<'_>,
    losses: &[LossKind],
    seeds: &[u64],
    base: &TrainConfig,
    mut on_model: impl FnMut(LossKind, u64, &crate::net::LocModel),
) -> Result<AblationResult> {
    if data.train.is_empty() || data.test.is_empty() {
        return Err(Error::EmptyInput("ablation needs train and test records"));
    }
    let train_set = TrainingSet::from_records(data.train, base.centering)?;
    let val_set = if data.val.is_empty() {
        None
    } else {
        Some(TrainingSet::from_records(data.val, base.centering)?)
    };

    let mut cells = Vec::new();
    for &loss in losses {
        for &seed in seeds {
            let cfg = TrainConfig {
                loss,
                seed,
                ..base.clone()
            };
            let cell = match train(&train_set, val_set.as_ref(), &cfg)
                .and_then(|out| {
                    on_model(loss, seed, &out.model);
                    network_predictions(&out.model, data.test)
                }) {
                Ok(preds) => AblationCell {
                    method: loss.name().to_string(),
                    seed: Some(seed),
                    report: Some(metric_report(&pairs_from_records(data.test, &preds))),
                    error: None,
                },
                Err(e) => AblationCell {
                    method: loss.name().to_string(),
                    seed: Some(seed),
                    report: None,
                    error: Some(e.to_string()),
                },
            };
            cells.push(cell);
        }
    }

    let geo = fit_segments_from_records(data.train).map(|stats| {
        let preds = geometric_predictions(data.test, &stats);
        metric_report(&pairs_from_records(data.test, &preds))
    });
    cells.push(match geo {
        Ok(report) => AblationCell {
            method: GEOMETRIC_METHOD.to_string(),
            seed: None,
            report: Some(report),
            error: None,
        },
        Err(e) => AblationCell {
            method: GEOMETRIC_METHOD.to_string(),
            seed: None,
            report: None,
            error: Some(e.to_string()),
        },
    });

    let mut rows = Vec::new();
    let methods = losses
        .iter()
        .map(|l| l.name())
        .chain(std::iter::once(GEOMETRIC_METHOD));
    for method in methods {
        let mine: Vec<&AblationCell> = cells.iter().filter(|c| c.method == method).collect();
        rows.push(summarize(method, &mine));
    }
    Ok(AblationResult { cells, rows })
}
