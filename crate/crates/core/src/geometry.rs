//! Pinhole camera model and keypoint normalization.
//!
//! Pixels are mapped to normalized image coordinates with `K⁻¹·[u, v, 1]ᵀ`.
//! The network never sees pixels, only zero-centered normalized coordinates,
//! which removes the camera intrinsics and the absolute image location from
//! its input.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of joints in the COCO keypoint layout.
pub const NUM_JOINTS: usize = 17;

/// Length of the network input vector (x*, y* per joint).
pub const INPUT_DIM: usize = 2 * NUM_JOINTS;

/// COCO-17 joint indices.
pub mod coco {
    pub const NOSE: usize = 0;
    pub const LEFT_EYE: usize = 1;
    pub const RIGHT_EYE: usize = 2;
    pub const LEFT_EAR: usize = 3;
    pub const RIGHT_EAR: usize = 4;
    pub const LEFT_SHOULDER: usize = 5;
    pub const RIGHT_SHOULDER: usize = 6;
    pub const LEFT_ELBOW: usize = 7;
    pub const RIGHT_ELBOW: usize = 8;
    pub const LEFT_WRIST: usize = 9;
    pub const RIGHT_WRIST: usize = 10;
    pub const LEFT_HIP: usize = 11;
    pub const RIGHT_HIP: usize = 12;
    pub const LEFT_KNEE: usize = 13;
    pub const RIGHT_KNEE: usize = 14;
    pub const LEFT_ANKLE: usize = 15;
    pub const RIGHT_ANKLE: usize = 16;
}

/// Pinhole intrinsics. The implied matrix is
/// `[[fx, skew, cx], [0, fy, cy], [0, 0, 1]]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    #[serde(default)]
    pub skew: f64,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        Self::with_skew(fx, fy, cx, cy, 0.0)
    }

    pub fn with_skew(fx: f64, fy: f64, cx: f64, cy: f64, skew: f64) -> Result<Self> {
        let k = CameraIntrinsics {
            fx,
            fy,
            cx,
            cy,
            skew,
        };
        k.validate()?;
        Ok(k)
    }

    /// Identity intrinsics: pixels are already normalized coordinates.
    pub fn identity() -> Self {
        CameraIntrinsics {
            fx: 1.0,
            fy: 1.0,
            cx: 0.0,
            cy: 0.0,
            skew: 0.0,
        }
    }

    /// KITTI object benchmark left color camera (P2), rounded.
    pub fn kitti() -> Self {
        CameraIntrinsics {
            fx: 721.5377,
            fy: 721.5377,
            cx: 609.5593,
            cy: 172.854,
            skew: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.fx, self.fy, self.cx, self.cy, self.skew];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidIntrinsics("non-finite entry".into()));
        }
        if self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(Error::InvalidIntrinsics(format!(
                "focal lengths must be positive (fx = {}, fy = {})",
                self.fx, self.fy
            )));
        }
        Ok(())
    }

    /// Builds intrinsics from a row-major 3×3 matrix. The bottom row must be
    /// `[0, 0, 1]` and `K[1][0]` must be zero.
    pub fn from_row_major(m: &[f64; 9]) -> Result<Self> {
        if m[3] != 0.0 || m[6] != 0.0 || m[7] != 0.0 || m[8] != 1.0 {
            return Err(Error::InvalidIntrinsics(format!(
                "not an upper-triangular intrinsic matrix: {m:?}"
            )));
        }
        Self::with_skew(m[0], m[4], m[2], m[5], m[1])
    }

    pub fn to_row_major(&self) -> [f64; 9] {
        [
            self.fx, self.skew, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0,
        ]
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::from_row_slice(&self.to_row_major())
    }

    /// Multiplies focal lengths, principal point and skew by `factor`, which
    /// is what resizing the image by `factor` does to the intrinsics.
    pub fn scaled(&self, factor: f64) -> Self {
        CameraIntrinsics {
            fx: self.fx * factor,
            fy: self.fy * factor,
            cx: self.cx * factor,
            cy: self.cy * factor,
            skew: self.skew * factor,
        }
    }
}

/// A 3D point in the camera frame (x right, y down, z forward), meters.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point3D {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Point3D {
    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Point3D { x, y, z }
    }

    pub fn norm(&self) -> f64 {
        self.to_vector().norm()
    }

    pub fn to_vector(self) -> Vector3<f64> {
        Vector3::new(self.x, self.y, self.z)
    }

    pub fn from_vector(v: &Vector3<f64>) -> Self {
        Point3D::new(v.x, v.y, v.z)
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }
}

/// Axis-aligned image box in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub u_min: f64,
    pub v_min: f64,
    pub u_max: f64,
    pub v_max: f64,
}

impl BBox {
    pub const fn new(u_min: f64, v_min: f64, u_max: f64, v_max: f64) -> Self {
        BBox {
            u_min,
            v_min,
            u_max,
            v_max,
        }
    }

    pub fn width(&self) -> f64 {
        self.u_max - self.u_min
    }

    pub fn height(&self) -> f64 {
        self.v_max - self.v_min
    }

    pub fn area(&self) -> f64 {
        if self.is_degenerate() {
            0.0
        } else {
            self.width() * self.height()
        }
    }

    pub fn center(&self) -> (f64, f64) {
        (
            0.5 * (self.u_min + self.u_max),
            0.5 * (self.v_min + self.v_max),
        )
    }

    pub fn is_degenerate(&self) -> bool {
        !(self.width() > 0.0 && self.height() > 0.0)
    }

    /// Smallest box containing all the given pixels.
    pub fn enclosing(pixels: impl IntoIterator<Item = (f64, f64)>) -> Option<Self> {
        let mut it = pixels.into_iter();
        let (u, v) = it.next()?;
        let mut b = BBox::new(u, v, u, v);
        for (u, v) in it {
            b.u_min = b.u_min.min(u);
            b.v_min = b.v_min.min(v);
            b.u_max = b.u_max.max(u);
            b.v_max = b.v_max.max(v);
        }
        Some(b)
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.u_min, self.v_min, self.u_max, self.v_max]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Joint {
    pub u: f64,
    pub v: f64,
    pub conf: f64,
}

impl Joint {
    pub const fn new(u: f64, v: f64, conf: f64) -> Self {
        Joint { u, v, conf }
    }

    pub fn is_present(&self) -> bool {
        self.conf > 0.0
    }
}

/// One detected person: 17 COCO joints and the detection box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Keypoints2D {
    joints: [Joint; NUM_JOINTS],
    bbox: BBox,
}

impl Keypoints2D {
    pub fn new(joints: [Joint; NUM_JOINTS], bbox: BBox) -> Result<Self> {
        let kp = Keypoints2D { joints, bbox };
        kp.validate()?;
        Ok(kp)
    }

    pub fn from_slice(joints: &[Joint], bbox: BBox) -> Result<Self> {
        let joints: [Joint; NUM_JOINTS] = joints.try_into().map_err(|_| {
            Error::InvalidKeypoints(format!(
                "expected {NUM_JOINTS} joints, got {}",
                joints.len()
            ))
        })?;
        Self::new(joints, bbox)
    }

    pub fn validate(&self) -> Result<()> {
        if self.bbox.is_degenerate() {
            return Err(Error::InvalidKeypoints(format!(
                "bounding box must have positive width and height: {:?}",
                self.bbox
            )));
        }
        for (i, j) in self.joints.iter().enumerate() {
            if !(j.u.is_finite() && j.v.is_finite()) {
                return Err(Error::InvalidKeypoints(format!("joint {i} is not finite")));
            }
            if !(0.0..=1.0).contains(&j.conf) {
                return Err(Error::InvalidKeypoints(format!(
                    "joint {i} confidence {} outside [0, 1]",
                    j.conf
                )));
            }
        }
        Ok(())
    }

    pub fn joints(&self) -> &[Joint; NUM_JOINTS] {
        &self.joints
    }

    pub fn bbox(&self) -> BBox {
        self.bbox
    }

    pub fn num_present(&self) -> usize {
        self.joints.iter().filter(|j| j.is_present()).count()
    }

    /// Extent of the present joints, ignoring the detection box.
    pub fn joint_extent(&self) -> Option<BBox> {
        BBox::enclosing(
            self.joints
                .iter()
                .filter(|j| j.is_present())
                .map(|j| (j.u, j.v)),
        )
    }
}

/// Reference point subtracted from the normalized joints.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Centering {
    /// Centroid of the joints with `conf > 0`.
    #[default]
    Centroid,
    /// Center of the detection box.
    BboxCenter,
}

/// Network input: 34 zero-centered normalized coordinates, laid out as
/// `[x*_0, y*_0, x*_1, y*_1, ...]`, plus the unit ray through the box center.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedInput {
    pub coords: [f64; INPUT_DIM],
    pub center_ray: [f64; 3],
}

/// First two components of `K⁻¹·[u, v, 1]ᵀ`.
pub fn backproject(k: &CameraIntrinsics, (u, v): (f64, f64)) -> Result<(f64, f64)> {
    k.validate()?;
    let y = (v - k.cy) / k.fy;
    let x = (u - k.cx - k.skew * y) / k.fx;
    Ok((x, y))
}

/// Perspective division followed by multiplication with `K`.
pub fn project(k: &CameraIntrinsics, p: &Point3D) -> Result<(f64, f64)> {
    if !(p.z > 0.0) {
        return Err(Error::BehindCamera { z: p.z });
    }
    let x = p.x / p.z;
    let y = p.y / p.z;
    Ok((k.fx * x + k.skew * y + k.cx, k.fy * y + k.cy))
}

/// Unit vector along `K⁻¹·[u, v, 1]ᵀ`.
pub fn pixel_ray(k: &CameraIntrinsics, pixel: (f64, f64)) -> Result<[f64; 3]> {
    let (x, y) = backproject(k, pixel)?;
    let v = Vector3::new(x, y, 1.0).normalize();
    Ok([v.x, v.y, v.z])
}

pub fn normalize_keypoints(k: &CameraIntrinsics, kp: &Keypoints2D) -> Result<NormalizedInput> {
    normalize_keypoints_with(k, kp, Centering::Centroid)
}

pub fn normalize_keypoints_with(
    k: &CameraIntrinsics,
    kp: &Keypoints2D,
    centering: Centering,
) -> Result<NormalizedInput> {
    let present = kp.num_present();
    if present < 2 {
        return Err(Error::DegeneratePose { present });
    }

    let mut normalized = [(0.0, 0.0); NUM_JOINTS];
    for (slot, joint) in normalized.iter_mut().zip(kp.joints()) {
        *slot = backproject(k, (joint.u, joint.v))?;
    }

    let reference = match centering {
        Centering::Centroid => {
            // offsets from the first present joint keep a collapsed pose exact
            let anchor = normalized
                .iter()
                .zip(kp.joints())
                .find(|(_, j)| j.is_present())
                .map(|(n, _)| *n)
                .expect("at least two present joints");
            let (mut sx, mut sy) = (0.0, 0.0);
            for (n, j) in normalized.iter().zip(kp.joints()) {
                if j.is_present() {
                    sx += n.0 - anchor.0;
                    sy += n.1 - anchor.1;
                }
            }
            (
                anchor.0 + sx / present as f64,
                anchor.1 + sy / present as f64,
            )
        }
        Centering::BboxCenter => backproject(k, kp.bbox().center())?,
    };

    let mut coords = [0.0; INPUT_DIM];
    for (i, (n, j)) in normalized.iter().zip(kp.joints()).enumerate() {
        // missing joints sit on the reference point
        if j.is_present() {
            coords[2 * i] = n.0 - reference.0;
            coords[2 * i + 1] = n.1 - reference.1;
        }
    }

    Ok(NormalizedInput {
        coords,
        center_ray: pixel_ray(k, kp.bbox().center())?,
    })
}

/// The 3D point at distance `d` along `center_ray`.
pub fn localize(d: f64, center_ray: &[f64; 3]) -> Result<Point3D> {
    if !(d > 0.0) || !d.is_finite() {
        return Err(Error::InvalidDistance(d));
    }
    Ok(Point3D::new(
        d * center_ray[0],
        d * center_ray[1],
        d * center_ray[2],
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn kitti_like() -> CameraIntrinsics {
        CameraIntrinsics::new(721.0, 721.0, 609.0, 172.0).unwrap()
    }

    fn pose_at(u0: f64, v0: f64) -> Keypoints2D {
        let mut joints = [Joint::default(); NUM_JOINTS];
        for (i, j) in joints.iter_mut().enumerate() {
            *j = Joint::new(u0 + (i % 3) as f64 * 7.0, v0 + i as f64 * 9.5, 1.0);
        }
        Keypoints2D::new(joints, BBox::new(u0 - 5.0, v0 - 5.0, u0 + 25.0, v0 + 170.0)).unwrap()
    }

    #[test]
    fn identity_backprojection() {
        let (x, y) = backproject(&CameraIntrinsics::identity(), (0.3, 0.7)).unwrap();
        assert_eq!((x, y), (0.3, 0.7));
    }

    #[test]
    fn principal_point_maps_to_origin() {
        assert_eq!(backproject(&kitti_like(), (609.0, 172.0)).unwrap(), (0.0, 0.0));
    }

    #[test]
    fn project_examples() {
        let uv = project(&CameraIntrinsics::identity(), &Point3D::new(0.0, 0.0, 5.0)).unwrap();
        assert_eq!(uv, (0.0, 0.0));
        let k = CameraIntrinsics::new(1000.0, 1000.0, 0.0, 0.0).unwrap();
        let (u, v) = project(&k, &Point3D::new(0.0, 0.505, 10.0)).unwrap();
        assert_eq!(u, 0.0);
        assert_relative_eq!(v, 50.5, max_relative = 1e-15);
    }

    #[test]
    fn behind_camera_is_rejected() {
        let k = kitti_like();
        assert!(matches!(
            project(&k, &Point3D::new(0.0, 0.0, 0.0)),
            Err(Error::BehindCamera { .. })
        ));
        assert!(project(&k, &Point3D::new(1.0, 0.0, -2.0)).is_err());
    }

    #[test]
    fn singular_intrinsics_rejected() {
        assert!(CameraIntrinsics::new(0.0, 700.0, 1.0, 1.0).is_err());
        let bad = CameraIntrinsics {
            fx: 700.0,
            fy: 0.0,
            cx: 0.0,
            cy: 0.0,
            skew: 0.0,
        };
        assert!(matches!(
            backproject(&bad, (1.0, 1.0)),
            Err(Error::InvalidIntrinsics(_))
        ));
        assert!(CameraIntrinsics::from_row_major(&[1.0, 0.0, 0.0, 0.5, 1.0, 0.0, 0.0, 0.0, 1.0]).is_err());
    }

    #[test]
    fn skewed_intrinsics_invert_exactly() {
        let k = CameraIntrinsics::with_skew(700.0, 690.0, 600.0, 180.0, 3.5).unwrap();
        let p = Point3D::new(1.3, -0.4, 12.0);
        let uv = project(&k, &p).unwrap();
        let inv = k.matrix().try_inverse().unwrap();
        let oracle = inv * Vector3::new(uv.0, uv.1, 1.0);
        let (x, y) = backproject(&k, uv).unwrap();
        assert_relative_eq!(x, oracle.x, max_relative = 1e-12);
        assert_relative_eq!(y, oracle.y, max_relative = 1e-12);
        assert_relative_eq!(x, p.x / p.z, max_relative = 1e-12);
    }

    #[test]
    fn row_major_round_trip() {
        let k = CameraIntrinsics::with_skew(700.0, 690.0, 600.0, 180.0, 0.25).unwrap();
        assert_eq!(CameraIntrinsics::from_row_major(&k.to_row_major()).unwrap(), k);
    }

    #[test]
    fn collapsed_pose_centers_to_zero() {
        let joints = [Joint::new(400.0, 200.0, 1.0); NUM_JOINTS];
        let kp = Keypoints2D::new(joints, BBox::new(390.0, 190.0, 410.0, 210.0)).unwrap();
        let input = normalize_keypoints(&kitti_like(), &kp).unwrap();
        assert!(input.coords.iter().all(|&c| c == 0.0));
    }

    #[test]
    fn degenerate_pose_rejected() {
        let mut joints = [Joint::new(1.0, 1.0, 0.0); NUM_JOINTS];
        joints[3].conf = 0.9;
        let kp = Keypoints2D::new(joints, BBox::new(0.0, 0.0, 2.0, 2.0)).unwrap();
        assert!(matches!(
            normalize_keypoints(&kitti_like(), &kp),
            Err(Error::DegeneratePose { present: 1 })
        ));
    }

    #[test]
    fn missing_joints_are_imputed_at_the_centroid() {
        let mut kp = pose_at(300.0, 50.0);
        kp.joints[4].conf = 0.0;
        kp.joints[9].conf = 0.0;
        let input = normalize_keypoints(&kitti_like(), &kp).unwrap();
        assert_eq!(input.coords[8], 0.0);
        assert_eq!(input.coords[19], 0.0);
        let mx: f64 = (0..NUM_JOINTS).map(|i| input.coords[2 * i]).sum::<f64>() / 17.0;
        let my: f64 = (0..NUM_JOINTS).map(|i| input.coords[2 * i + 1]).sum::<f64>() / 17.0;
        assert!(mx.abs() < 1e-9 && my.abs() < 1e-9);
    }

    #[test]
    fn translated_pose_matches_direct_recomputation() {
        let k = kitti_like();
        let a = normalize_keypoints(&k, &pose_at(300.0, 50.0)).unwrap();
        let b = normalize_keypoints(&k, &pose_at(300.0 + 37.25, 50.0)).unwrap();

        // independent evaluation through the general 3x3 inverse
        let inv = k.matrix().try_inverse().unwrap();
        let shifted = pose_at(337.25, 50.0);
        let pts: Vec<Vector3<f64>> = shifted
            .joints()
            .iter()
            .map(|j| inv * Vector3::new(j.u, j.v, 1.0))
            .collect();
        let c = pts.iter().fold(Vector3::zeros(), |acc, p| acc + p) / NUM_JOINTS as f64;
        for i in 0..NUM_JOINTS {
            assert!((b.coords[2 * i] - (pts[i].x - c.x)).abs() < 1e-12);
            assert!((b.coords[2 * i + 1] - (pts[i].y - c.y)).abs() < 1e-12);
            assert!((a.coords[2 * i] - b.coords[2 * i]).abs() < 1e-12);
        }
    }

    #[test]
    fn bbox_centering_mode() {
        let k = kitti_like();
        let kp = pose_at(300.0, 50.0);
        let input = normalize_keypoints_with(&k, &kp, Centering::BboxCenter).unwrap();
        let (cx, cy) = backproject(&k, kp.bbox().center()).unwrap();
        let (x0, y0) = backproject(&k, (kp.joints()[0].u, kp.joints()[0].v)).unwrap();
        assert_relative_eq!(input.coords[0], x0 - cx, epsilon = 1e-15);
        assert_relative_eq!(input.coords[1], y0 - cy, epsilon = 1e-15);
    }

    #[test]
    fn localize_examples() {
        assert_eq!(
            localize(10.0, &[0.0, 0.0, 1.0]).unwrap(),
            Point3D::new(0.0, 0.0, 10.0)
        );
        assert!(matches!(
            localize(0.0, &[0.0, 0.0, 1.0]),
            Err(Error::InvalidDistance(_))
        ));
        assert!(localize(-3.0, &[0.0, 0.0, 1.0]).is_err());
    }

    #[test]
    fn keypoint_validation() {
        let joints = [Joint::new(1.0, 1.0, 1.0); NUM_JOINTS];
        assert!(Keypoints2D::new(joints, BBox::new(0.0, 0.0, 0.0, 5.0)).is_err());
        assert!(Keypoints2D::from_slice(&joints[..16], BBox::new(0.0, 0.0, 1.0, 5.0)).is_err());
        let mut bad = joints;
        bad[2].conf = 1.5;
        assert!(Keypoints2D::new(bad, BBox::new(0.0, 0.0, 1.0, 5.0)).is_err());
    }
}
