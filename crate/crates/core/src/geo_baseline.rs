//! Geometric distance baseline: a body segment of known metric length,
//! assumed vertical, is inverted through the pinhole model.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{backproject, coco, CameraIntrinsics, Joint, Keypoints2D, Point3D};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Segment {
    HeadShoulder,
    ShoulderHip,
    HipAnkle,
}

impl Segment {
    pub const ALL: [Segment; 3] = [Segment::HeadShoulder, Segment::ShoulderHip, Segment::HipAnkle];

    pub fn name(&self) -> &'static str {
        match self {
            Segment::HeadShoulder => "head_shoulder",
            Segment::ShoulderHip => "shoulder_hip",
            Segment::HipAnkle => "hip_ankle",
        }
    }

    /// Joint groups of the upper and lower endpoint.
    fn endpoints(&self) -> (&'static [usize], &'static [usize]) {
        const NOSE: &[usize] = &[coco::NOSE];
        const SHOULDERS: &[usize] = &[coco::LEFT_SHOULDER, coco::RIGHT_SHOULDER];
        const HIPS: &[usize] = &[coco::LEFT_HIP, coco::RIGHT_HIP];
        const ANKLES: &[usize] = &[coco::LEFT_ANKLE, coco::RIGHT_ANKLE];
        match self {
            Segment::HeadShoulder => (NOSE, SHOULDERS),
            Segment::ShoulderHip => (SHOULDERS, HIPS),
            Segment::HipAnkle => (HIPS, ANKLES),
        }
    }

    /// Averaged pixel positions of the two endpoints. Every joint in a group
    /// must be present.
    pub fn pixels(&self, kp: &Keypoints2D) -> Option<((f64, f64), (f64, f64))> {
        let (top, bottom) = self.endpoints();
        Some((average(kp.joints(), top)?, average(kp.joints(), bottom)?))
    }
}

fn average(joints: &[Joint], group: &[usize]) -> Option<(f64, f64)> {
    let mut sum = (0.0, 0.0);
    for &i in group {
        let j = joints[i];
        if !j.is_present() {
            return None;
        }
        sum.0 += j.u;
        sum.1 += j.v;
    }
    let n = group.len() as f64;
    Some((sum.0 / n, sum.1 / n))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegmentLength {
    pub segment: Segment,
    /// Meters.
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentStats {
    pub segments: Vec<SegmentLength>,
    pub selected: Segment,
}

impl SegmentStats {
    pub fn get(&self, segment: Segment) -> Option<&SegmentLength> {
        self.segments.iter().find(|s| s.segment == segment)
    }

    pub fn selected_length(&self) -> &SegmentLength {
        self.get(self.selected).expect("selected segment is fitted")
    }

    pub fn validate(&self) -> Result<()> {
        for s in &self.segments {
            if !(s.mean > 0.0) || !(s.std >= 0.0) {
                return Err(Error::InvalidConfig(format!(
                    "segment {} has mean {} and std {}",
                    s.segment.name(),
                    s.mean,
                    s.std
                )));
            }
        }
        if self.get(self.selected).is_none() {
            return Err(Error::InvalidConfig("selected segment has no statistics".into()));
        }
        Ok(())
    }
}

/// One training instance: keypoints, camera and ground-truth 3D center.
#[derive(Debug, Clone, Copy)]
pub struct SegmentObservation<'a> {
    pub kp: &'a Keypoints2D,
    pub camera: &'a CameraIntrinsics,
    pub center: Point3D,
}

/// Vertical metric length of `segment`, back-projecting both endpoints at
/// depth `z`.
pub fn measure_segment(
    segment: Segment,
    kp: &Keypoints2D,
    camera: &CameraIntrinsics,
    z: f64,
) -> Result<Option<f64>> {
    let Some((top, bottom)) = segment.pixels(kp) else {
        return Ok(None);
    };
    let (_, y1) = backproject(camera, top)?;
    let (_, y2) = backproject(camera, bottom)?;
    Ok(Some((y2 - y1).abs() * z))
}

/// Per-segment length statistics over instances with known 3D centers. The
/// segment with the lowest spread is selected.
pub fn fit_segments<'a>(
    instances: impl IntoIterator<Item = SegmentObservation<'a>>,
) -> Result<SegmentStats> {
    let mut lengths: [Vec<f64>; 3] = Default::default();
    for obs in instances {
        if !(obs.center.z > 0.0) {
            continue;
        }
        for (seg, out) in Segment::ALL.iter().zip(lengths.iter_mut()) {
            if let Some(l) = measure_segment(*seg, obs.kp, obs.camera, obs.center.z)? {
                out.push(l);
            }
        }
    }

    let mut segments = Vec::new();
    for (seg, ls) in Segment::ALL.iter().zip(&lengths) {
        if ls.is_empty() {
            continue;
        }
        let n = ls.len() as f64;
        let mean = ls.iter().sum::<f64>() / n;
        let var = ls.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / n;
        if mean > 0.0 {
            segments.push(SegmentLength {
                segment: *seg,
                mean,
                std: var.sqrt(),
                count: ls.len(),
            });
        }
    }
    let selected = segments
        .iter()
        .min_by(|a, b| a.std.total_cmp(&b.std))
        .map(|s| s.segment)
        .ok_or(Error::EmptyInput("no instance with a measurable segment"))?;
    Ok(SegmentStats { segments, selected })
}

/// Depth `z` of a vertical segment of metric length `length` whose
/// endpoints project to the normalized coordinates `top` and `bottom`.
///
/// Both specular solutions (`±length`) of the least-squares system are
/// formed and the one in front of the camera is kept.
pub fn solve_segment_depth(top: (f64, f64), bottom: (f64, f64), length: f64) -> Result<f64> {
    if !(length > 0.0) {
        return Err(Error::UnresolvableDistance(format!("segment length {length}")));
    }
    let extent = (bottom.1 - top.1).abs();
    if extent <= 1e-12 * (1.0 + top.1.abs()) {
        return Err(Error::UnresolvableDistance(
            "segment has no vertical extent in the image".into(),
        ));
    }
    // unknowns (x, y, z) of the upper endpoint; the lower one is (x, y ± Δy, z)
    let a = nalgebra::Matrix4x3::new(
        1.0, 0.0, -top.0, //
        0.0, 1.0, -top.1, //
        1.0, 0.0, -bottom.0, //
        0.0, 1.0, -bottom.1,
    );
    let ata: Matrix3<f64> = a.transpose() * a;
    let lu = ata.lu();
    let mut best: Option<f64> = None;
    for sign in [1.0, -1.0] {
        let rhs = nalgebra::Vector4::new(0.0, 0.0, 0.0, -sign * length);
        let atb: Vector3<f64> = a.transpose() * rhs;
        let sol = lu
            .solve(&atb)
            .ok_or_else(|| Error::UnresolvableDistance("singular normal equations".into()))?;
        if sol.z > 0.0 {
            best = Some(sol.z);
        }
    }
    best.ok_or(Error::BehindCamera { z: 0.0 })
}

/// Distance to the person from the selected segment's length. The 3D point
/// is placed at the recovered depth along the ray through the box center.
pub fn estimate_location(
    kp: &Keypoints2D,
    camera: &CameraIntrinsics,
    stats: &SegmentStats,
) -> Result<Point3D> {
    let seg = stats.selected_length();
    let (top, bottom) = seg.segment.pixels(kp).ok_or_else(|| {
        Error::UnresolvableDistance(format!("{} joints missing", seg.segment.name()))
    })?;
    let z = solve_segment_depth(
        backproject(camera, top)?,
        backproject(camera, bottom)?,
        seg.mean,
    )?;
    let (xc, yc) = backproject(camera, kp.bbox().center())?;
    Ok(Point3D::new(z * xc, z * yc, z))
}

pub fn estimate_distance(
    kp: &Keypoints2D,
    camera: &CameraIntrinsics,
    stats: &SegmentStats,
) -> Result<f64> {
    Ok(estimate_location(kp, camera, stats)?.norm())
}
