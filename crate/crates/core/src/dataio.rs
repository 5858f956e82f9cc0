//! File formats: annotation and prediction JSONL, KITTI calibration and
//! label text, model checkpoints, and CSV reports.
//!
//! Every JSONL line and the checkpoint carry a `version` field. CSV reports
//! start with a `# format: <kind> v<version>` comment line. Floats are
//! written in shortest round-trip form, so reading and re-writing a file
//! reproduces it byte for byte.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::geo_baseline::SegmentStats;
use crate::geometry::{BBox, CameraIntrinsics, Joint, Keypoints2D, Point3D, NUM_JOINTS};
use crate::height_model::Group;
use crate::net::{LocModel, TrainConfig};
use crate::synthgen::{PoseTag, SceneSample};

pub const ANNOTATION_VERSION: u32 = 1;
pub const PREDICTION_VERSION: u32 = 1;
pub const CHECKPOINT_VERSION: u32 = 1;
pub const CSV_VERSION: u32 = 1;

/// Ground truth attached to an annotation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    /// Center of the person in the camera frame, meters.
    pub center: [f64; 3],
    /// Stature in centimeters, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub h_gt: Option<f64>,
    /// KITTI occlusion level (0 = fully visible ... 3 = unknown).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub occlusion: Option<u8>,
    /// KITTI truncation in [0, 1].
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truncation: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group: Option<Group>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pose: Option<PoseTag>,
}

impl GroundTruth {
    pub fn distance(&self) -> f64 {
        Point3D::new(self.center[0], self.center[1], self.center[2]).norm()
    }
}

/// One line of an annotation file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub version: u32,
    pub id: String,
    pub image_id: String,
    /// 17 × `[u, v, conf]` in COCO order.
    pub keypoints: Vec<[f64; 3]>,
    /// `[u_min, v_min, u_max, v_max]`.
    pub bbox: [f64; 4],
    /// Row-major 3×3 intrinsic matrix.
    pub intrinsics: [f64; 9],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt: Option<GroundTruth>,
}

impl AnnotationRecord {
    pub fn from_scene(id: String, s: &SceneSample) -> Self {
        AnnotationRecord {
            version: ANNOTATION_VERSION,
            image_id: id.clone(),
            id,
            keypoints: s.kp.joints().iter().map(|j| [j.u, j.v, j.conf]).collect(),
            bbox: s.kp.bbox().to_array(),
            intrinsics: s.camera.to_row_major(),
            gt: Some(GroundTruth {
                center: s.center.to_array(),
                h_gt: Some(s.h_gt),
                occlusion: Some(0),
                truncation: Some(0.0),
                group: Some(s.gender),
                pose: Some(s.pose_tag),
            }),
        }
    }

    pub fn keypoints(&self) -> Result<Keypoints2D> {
        let joints: Vec<Joint> = self
            .keypoints
            .iter()
            .map(|k| Joint::new(k[0], k[1], k[2]))
            .collect();
        let b = self.bbox;
        Keypoints2D::from_slice(&joints, BBox::new(b[0], b[1], b[2], b[3]))
    }

    pub fn camera(&self) -> Result<CameraIntrinsics> {
        CameraIntrinsics::from_row_major(&self.intrinsics)
    }

    pub fn bbox(&self) -> BBox {
        let b = self.bbox;
        BBox::new(b[0], b[1], b[2], b[3])
    }

    pub fn distance(&self) -> Option<f64> {
        self.gt.as_ref().map(GroundTruth::distance)
    }

    /// Every semantic problem with this record.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.version != ANNOTATION_VERSION {
            out.push(format!(
                "version: {} (expected {ANNOTATION_VERSION})",
                self.version
            ));
        }
        if self.keypoints.len() != NUM_JOINTS {
            out.push(format!(
                "keypoints: {} entries (expected {NUM_JOINTS})",
                self.keypoints.len()
            ));
        }
        for (i, k) in self.keypoints.iter().enumerate() {
            if !(k[0].is_finite() && k[1].is_finite()) {
                out.push(format!("keypoints[{i}]: non-finite coordinate"));
            }
            if !(0.0..=1.0).contains(&k[2]) {
                out.push(format!("keypoints[{i}]: confidence {} outside [0, 1]", k[2]));
            }
        }
        if self.bbox().is_degenerate() {
            out.push(format!("bbox: {:?} has non-positive width or height", self.bbox));
        }
        if let Err(e) = self.camera() {
            out.push(format!("intrinsics: {e}"));
        }
        if let Some(gt) = &self.gt {
            if !(gt.center[2] > 0.0) || gt.center.iter().any(|c| !c.is_finite()) {
                out.push(format!("gt.center: {:?} must be finite with z > 0", gt.center));
            }
            if let Some(h) = gt.h_gt {
                if !(h > 0.0) {
                    out.push(format!("gt.h_gt: {h} must be positive"));
                }
            }
            if let Some(t) = gt.truncation {
                if !(0.0..=1.0).contains(&t) {
                    out.push(format!("gt.truncation: {t} outside [0, 1]"));
                }
            }
        }
        out
    }
}

/// One line of a prediction file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub version: u32,
    pub id: String,
    pub bbox: [f64; 4],
    pub mu: f64,
    pub b: f64,
    pub sigma: f64,
    pub interval: [f64; 2],
    pub aleatoric_interval: [f64; 2],
    pub point: [f64; 3],
}

impl PredictionRecord {
    pub fn bbox(&self) -> BBox {
        let b = self.bbox;
        BBox::new(b[0], b[1], b[2], b[3])
    }

    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.version != PREDICTION_VERSION {
            out.push(format!(
                "version: {} (expected {PREDICTION_VERSION})",
                self.version
            ));
        }
        for (name, v) in [("mu", self.mu), ("b", self.b), ("sigma", self.sigma)] {
            if !v.is_finite() {
                out.push(format!("{name}: non-finite"));
            }
        }
        if !(self.b >= 0.0) {
            out.push(format!("b: {} is negative", self.b));
        }
        if !(self.sigma >= 0.0) {
            out.push(format!("sigma: {} is negative", self.sigma));
        }
        if self.interval[0] > self.interval[1] {
            out.push("interval: lower bound above upper bound".into());
        }
        out
    }
}

/// Keys of a JSON object that must be present, with their expected kind.
fn required_fields(value: &Value, fields: &[(&str, fn(&Value) -> bool, &str)]) -> Vec<String> {
    let Some(obj) = value.as_object() else {
        return vec!["record is not a JSON object".into()];
    };
    fields
        .iter()
        .filter_map(|(name, check, kind)| match obj.get(*name) {
            None => Some(format!("{name}: missing")),
            Some(v) if !check(v) => Some(format!("{name}: expected {kind}")),
            _ => None,
        })
        .collect()
}

fn is_number_array(len: Option<usize>) -> impl Fn(&Value) -> bool {
    move |v| {
        v.as_array().is_some_and(|a| {
            len.is_none_or(|n| a.len() == n) && a.iter().all(Value::is_number)
        })
    }
}

fn annotation_shape(v: &Value) -> Vec<String> {
    let mut problems = required_fields(
        v,
        &[
            ("version", Value::is_u64, "an unsigned integer"),
            ("id", Value::is_string, "a string"),
            ("image_id", Value::is_string, "a string"),
            ("keypoints", Value::is_array, "an array of [u, v, conf]"),
            ("bbox", |v| is_number_array(Some(4))(v), "4 numbers"),
            ("intrinsics", |v| is_number_array(Some(9))(v), "9 numbers"),
        ],
    );
    if let Some(kps) = v.get("keypoints").and_then(Value::as_array) {
        for (i, k) in kps.iter().enumerate() {
            if !is_number_array(Some(3))(k) {
                problems.push(format!("keypoints[{i}]: expected [u, v, conf]"));
            }
        }
    }
    if let Some(gt) = v.get("gt") {
        if !gt.is_null() {
            problems.extend(
                required_fields(gt, &[("center", |v| is_number_array(Some(3))(v), "3 numbers")])
                    .into_iter()
                    .map(|p| format!("gt.{p}")),
            );
        }
    }
    problems
}

fn prediction_shape(v: &Value) -> Vec<String> {
    required_fields(
        v,
        &[
            ("version", Value::is_u64, "an unsigned integer"),
            ("id", Value::is_string, "a string"),
            ("bbox", |v| is_number_array(Some(4))(v), "4 numbers"),
            ("mu", Value::is_number, "a number"),
            ("b", Value::is_number, "a number"),
            ("sigma", Value::is_number, "a number"),
            ("interval", |v| is_number_array(Some(2))(v), "2 numbers"),
            ("aleatoric_interval", |v| is_number_array(Some(2))(v), "2 numbers"),
            ("point", |v| is_number_array(Some(3))(v), "3 numbers"),
        ],
    )
}

fn read_jsonl<T: DeserializeOwned>(
    path: &Path,
    shape: fn(&Value) -> Vec<String>,
    problems: fn(&T) -> Vec<String>,
) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    let mut violations = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let value: Value = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: lineno,
            message: e.to_string(),
        })?;
        let shape_problems = shape(&value);
        if !shape_problems.is_empty() {
            violations.extend(shape_problems.into_iter().map(|p| format!("line {lineno}: {p}")));
            continue;
        }
        let record: T = serde_json::from_value(value).map_err(|e| Error::Parse {
            line: lineno,
            message: e.to_string(),
        })?;
        let record_problems = problems(&record);
        if record_problems.is_empty() {
            out.push(record);
        } else {
            violations.extend(record_problems.into_iter().map(|p| format!("line {lineno}: {p}")));
        }
    }
    if violations.is_empty() {
        Ok(out)
    } else {
        Err(Error::Schema(violations))
    }
}

/// Writes `bytes` to `path` while holding an exclusive lock on it.
pub fn write_locked(path: &Path, bytes: &[u8]) -> Result<()> {
    let io = |e| Error::io(path, e);
    let mut file = OpenOptions::new()
        .create(true)
        .write(true)
        .truncate(false)
        .open(path)
        .map_err(io)?;
    file.lock().map_err(io)?;
    file.set_len(0).map_err(io)?;
    file.write_all(bytes).map_err(io)?;
    file.flush().map_err(io)?;
    file.unlock().map_err(io)
}

fn to_jsonl<T: Serialize>(records: &[T]) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r)?;
        buf.push(b'\n');
    }
    Ok(buf)
}

pub fn read_annotations(path: &Path) -> Result<Vec<AnnotationRecord>> {
    read_jsonl(path, annotation_shape, AnnotationRecord::problems)
}

pub fn write_annotations(path: &Path, records: &[AnnotationRecord]) -> Result<()> {
    write_locked(path, &to_jsonl(records)?)
}

pub fn read_predictions(path: &Path) -> Result<Vec<PredictionRecord>> {
    read_jsonl(path, prediction_shape, PredictionRecord::problems)
}

pub fn write_predictions(path: &Path, records: &[PredictionRecord]) -> Result<()> {
    write_locked(path, &to_jsonl(records)?)
}

/// Intrinsics from the `P2:` row of a KITTI calibration file.
pub fn parse_kitti_calib(text: &str) -> Result<CameraIntrinsics> {
    parse_kitti_calib_key(text, "P2")
}

/// Intrinsics from the `key:` projection row (12 floats, row-major 3×4). The
/// fourth column holds the stereo baseline and is ignored.
pub fn parse_kitti_calib_key(text: &str, key: &str) -> Result<CameraIntrinsics> {
    let mut last_line = 0;
    for (i, line) in text.lines().enumerate() {
        last_line = i + 1;
        let Some((name, rest)) = line.split_once(':') else {
            continue;
        };
        if name.trim() != key {
            continue;
        }
        let values = rest
            .split_whitespace()
            .map(|t| {
                t.parse::<f64>().map_err(|e| Error::Parse {
                    line: i + 1,
                    message: format!("{key}: invalid number {t:?}: {e}"),
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        if values.len() != 12 {
            return Err(Error::Parse {
                line: i + 1,
                message: format!("{key}: expected 12 values, got {}", values.len()),
            });
        }
        let k = [
            values[0], values[1], values[2], values[4], values[5], values[6], values[8],
            values[9], values[10],
        ];
        return CameraIntrinsics::from_row_major(&k).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        });
    }
    Err(Error::Parse {
        line: last_line,
        message: format!("no {key}: row found"),
    })
}

/// Formats intrinsics as a KITTI projection row with a zero baseline.
pub fn format_kitti_calib(key: &str, k: &CameraIntrinsics) -> String {
    let m = k.to_row_major();
    format!(
        "{key}: {} {} {} 0 {} {} {} 0 {} {} {} 0",
        m[0], m[1], m[2], m[3], m[4], m[5], m[6], m[7], m[8]
    )
}

/// One object from a KITTI `label_2` file.
#[derive(Debug, Clone, PartialEq)]
pub struct KittiObject {
    pub kind: String,
    pub truncation: f64,
    pub occlusion: u8,
    pub bbox: BBox,
    /// Height, width, length in meters.
    pub dimensions: [f64; 3],
    /// Bottom center of the 3D box in the camera frame.
    pub location: [f64; 3],
}

impl KittiObject {
    /// Center of the 3D box (KITTI locations sit on the box bottom).
    pub fn center(&self) -> [f64; 3] {
        [
            self.location[0],
            self.location[1] - 0.5 * self.dimensions[0],
            self.location[2],
        ]
    }
}

pub fn parse_kitti_labels(text: &str) -> Result<Vec<KittiObject>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let tokens: Vec<&str> = line.split_whitespace().collect();
        if tokens.is_empty() {
            continue;
        }
        let err = |message: String| Error::Parse {
            line: i + 1,
            message,
        };
        if tokens.len() < 15 {
            return Err(err(format!("expected at least 15 fields, got {}", tokens.len())));
        }
        let num = |j: usize| {
            tokens[j]
                .parse::<f64>()
                .map_err(|e| err(format!("field {j}: {e}")))
        };
        out.push(KittiObject {
            kind: tokens[0].to_string(),
            truncation: num(1)?,
            occlusion: tokens[2]
                .parse::<u8>()
                .map_err(|e| err(format!("field 2: {e}")))?,
            bbox: BBox::new(num(4)?, num(5)?, num(6)?, num(7)?),
            dimensions: [num(8)?, num(9)?, num(10)?],
            location: [num(11)?, num(12)?, num(13)?],
        });
    }
    Ok(out)
}

/// Everything needed to reproduce a trained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub model: LocModel,
    pub train_config: TrainConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub segment_stats: Option<SegmentStats>,
    /// Seed the dataset was generated with, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data_seed: Option<u64>,
}

impl Checkpoint {
    pub fn new(model: LocModel, train_config: TrainConfig) -> Self {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            model,
            train_config,
            segment_stats: None,
            data_seed: None,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut bytes = serde_json::to_vec(self)?;
        bytes.push(b'\n');
        Ok(bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let value: Value = serde_json::from_slice(bytes)?;
        let version = value
            .get("version")
            .and_then(Value::as_u64)
            .ok_or_else(|| Error::Schema(vec!["version: missing".into()]))?;
        if version != u64::from(CHECKPOINT_VERSION) {
            return Err(Error::VersionMismatch {
                found: version as u32,
                expected: CHECKPOINT_VERSION,
            });
        }
        let ckpt: Checkpoint = serde_json::from_value(value)?;
        ckpt.model.validate()?;
        Ok(ckpt)
    }
}

pub fn write_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    write_locked(path, &ckpt.to_bytes()?)
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}

/// Writes serializable rows as CSV preceded by a format comment line.
pub fn write_csv<T: Serialize>(path: &Path, kind: &str, rows: &[T]) -> Result<()> {
    let mut buf = format!("# format: {kind} v{CSV_VERSION}\n").into_bytes();
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        for r in rows {
            w.serialize(r)?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
    }
    write_locked(path, &buf)
}

pub fn read_csv<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthgen::{sample_scene, SynthConfig};

    #[test]
    fn kitti_calib_line() {
        let k = parse_kitti_calib("P2: 721 0 609 0 0 721 172 0 0 0 1 0").unwrap();
        assert_eq!((k.fx, k.fy, k.cx, k.cy, k.skew), (721.0, 721.0, 609.0, 172.0, 0.0));
    }

    #[test]
    fn kitti_calib_real_layout() {
        let text = "P0: 7.215377e+02 0.000000e+00 6.095593e+02 0.000000e+00 0.000000e+00 7.215377e+02 1.728540e+02 0.000000e+00 0.000000e+00 0.000000e+00 1.000000e+00 0.000000e+00\n\
P2: 7.215377e+02 0.000000e+00 6.095593e+02 4.485728e+01 0.000000e+00 7.215377e+02 1.728540e+02 2.163791e-01 0.000000e+00 0.000000e+00 1.000000e+00 2.745884e-03\n\
R0_rect: 9.999239e-01 9.837760e-03 -7.445048e-03 -9.869795e-03 9.999421e-01 -4.278459e-03 7.402527e-03 4.351614e-03 9.999631e-01\n";
        let k = parse_kitti_calib(text).unwrap();
        assert_eq!(k.fx, 721.5377);
        assert_eq!(k.cy, 172.854);
    }

    #[test]
    fn kitti_calib_errors() {
        assert!(matches!(parse_kitti_calib(""), Err(Error::Parse { .. })));
        match parse_kitti_calib("P0: 1 2 3\nP2: 721 0 609 0 0 721 172\n") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        match parse_kitti_calib("\nP2: 721 0 x 0 0 721 172 0 0 0 1 0") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn kitti_calib_round_trip_keeps_digits() {
        let k = CameraIntrinsics::with_skew(721.5377123456789, 720.1, 609.5593, 172.854, 0.125)
            .unwrap();
        let line = format_kitti_calib("P2", &k);
        assert_eq!(parse_kitti_calib(&line).unwrap(), k);
    }

    #[test]
    fn kitti_labels() {
        let text = "Pedestrian 0.00 0 -0.20 712.40 143.00 810.73 307.92 1.89 0.48 1.20 1.84 1.47 8.41 0.01\n";
        let objs = parse_kitti_labels(text).unwrap();
        assert_eq!(objs.len(), 1);
        assert_eq!(objs[0].kind, "Pedestrian");
        assert_eq!(objs[0].occlusion, 0);
        assert!((objs[0].center()[1] - (1.47 - 0.945)).abs() < 1e-12);
        assert!(parse_kitti_labels("Pedestrian 0.0 0").is_err());
    }

    #[test]
    fn annotation_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.jsonl");
        let s = sample_scene(3, &SynthConfig::default()).unwrap();
        let rec = AnnotationRecord::from_scene("x-1".into(), &s);
        write_annotations(&path, std::slice::from_ref(&rec)).unwrap();
        let back = read_annotations(&path).unwrap();
        assert_eq!(back, vec![rec.clone()]);
        assert_eq!(back[0].keypoints().unwrap(), s.kp);
        assert!((back[0].distance().unwrap() - s.d_gt).abs() < 1e-12);
    }

    #[test]
    fn schema_errors_list_every_field() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        std::fs::write(
            &path,
            "{\"version\":1,\"id\":3,\"keypoints\":[[1,2]],\"bbox\":[0,0,1],\"intrinsics\":[1,0,0,0,1,0,0,0,1]}\n",
        )
        .unwrap();
        match read_annotations(&path) {
            Err(Error::Schema(problems)) => {
                let joined = problems.join("\n");
                for field in ["id", "image_id", "bbox", "keypoints[0]"] {
                    assert!(joined.contains(field), "{joined}");
                }
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn semantic_errors_are_reported() {
        let s = sample_scene(3, &SynthConfig::default()).unwrap();
        let mut rec = AnnotationRecord::from_scene("x".into(), &s);
        rec.keypoints.pop();
        rec.bbox = [5.0, 5.0, 5.0, 9.0];
        rec.intrinsics[0] = -1.0;
        let problems = rec.problems();
        assert_eq!(problems.len(), 3, "{problems:?}");
    }

    #[test]
    fn truncated_file_is_a_clean_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.jsonl");
        let s = sample_scene(3, &SynthConfig::default()).unwrap();
        let line = serde_json::to_string(&AnnotationRecord::from_scene("x".into(), &s)).unwrap();
        std::fs::write(&path, format!("{line}\n{}", &line[..line.len() / 2])).unwrap();
        assert!(matches!(read_annotations(&path), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn csv_with_format_header() {
        #[derive(Serialize, Deserialize, PartialEq, Debug)]
        struct Row {
            a: f64,
            b: String,
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.csv");
        let rows = vec![Row { a: 0.1, b: "x".into() }, Row { a: 2.5e-9, b: "y".into() }];
        write_csv(&path, "test", &rows).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("# format: test v1\na,b\n"));
        assert_eq!(read_csv::<Row>(&path).unwrap(), rows);
    }
}
