//! Synthetic pedestrian scenes seen through a pinhole camera.
//!
//! A planar, fronto-parallel skeleton is scaled to a height drawn from the
//! stature mixture, placed at a uniformly drawn distance along a ray inside
//! the horizontal field of view, projected, and perturbed with i.i.d.
//! Gaussian pixel noise. Since the skeleton shape does not depend on height,
//! the image carries no information about stature and the only irreducible
//! error is the height ambiguity.

use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataio::{self, AnnotationRecord};
use crate::error::{Error, Result};
use crate::geometry::{
    coco, pixel_ray, project, BBox, CameraIntrinsics, Joint, Keypoints2D, Point3D, NUM_JOINTS,
};
use crate::height_model::{Group, HeightMixture};
use crate::rng::{derive_seed, StreamRng};

const MAX_PLACEMENT_TRIES: usize = 100;

/// Body proportions as fractions of stature. Rows are heights above the
/// ankles; lateral offsets are positive towards the person's left, which is
/// image-right for someone facing the camera.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkeletonTemplate {
    pub rows: [f64; NUM_JOINTS],
    pub lateral: [f64; NUM_JOINTS],
    /// Top of the head (not a COCO joint), 1 by definition.
    pub head_top: f64,
    /// Half width of the person box.
    pub box_half_width: f64,
}

impl Default for SkeletonTemplate {
    fn default() -> Self {
        use coco::*;
        let mut rows = [0.0; NUM_JOINTS];
        let mut lateral = [0.0; NUM_JOINTS];
        let mut pair = |l: usize, r: usize, row: f64, half_width: f64| {
            rows[l] = row;
            rows[r] = row;
            lateral[l] = half_width;
            lateral[r] = -half_width;
        };
        pair(LEFT_EYE, RIGHT_EYE, 0.950, 0.018);
        pair(LEFT_EAR, RIGHT_EAR, 0.945, 0.042);
        pair(LEFT_SHOULDER, RIGHT_SHOULDER, 0.818, 0.129);
        pair(LEFT_ELBOW, RIGHT_ELBOW, 0.630, 0.150);
        pair(LEFT_WRIST, RIGHT_WRIST, 0.485, 0.145);
        pair(LEFT_HIP, RIGHT_HIP, 0.530, 0.095);
        pair(LEFT_KNEE, RIGHT_KNEE, 0.285, 0.070);
        pair(LEFT_ANKLE, RIGHT_ANKLE, 0.0, 0.060);
        rows[NOSE] = 0.936;
        SkeletonTemplate {
            rows,
            lateral,
            head_top: 1.0,
            box_half_width: 0.16,
        }
    }
}

impl SkeletonTemplate {
    const PAIRS: [(usize, usize); 8] = [
        (coco::LEFT_EYE, coco::RIGHT_EYE),
        (coco::LEFT_EAR, coco::RIGHT_EAR),
        (coco::LEFT_SHOULDER, coco::RIGHT_SHOULDER),
        (coco::LEFT_ELBOW, coco::RIGHT_ELBOW),
        (coco::LEFT_WRIST, coco::RIGHT_WRIST),
        (coco::LEFT_HIP, coco::RIGHT_HIP),
        (coco::LEFT_KNEE, coco::RIGHT_KNEE),
        (coco::LEFT_ANKLE, coco::RIGHT_ANKLE),
    ];

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(format!("skeleton template: {m}")));
        if self.rows[coco::LEFT_ANKLE] != 0.0 || self.rows[coco::RIGHT_ANKLE] != 0.0 {
            return bad("ankle rows must be 0");
        }
        if self.head_top != 1.0 {
            return bad("head top must be 1");
        }
        for (l, r) in Self::PAIRS {
            if self.rows[l] != self.rows[r] || self.lateral[l] != -self.lateral[r] {
                return bad("left/right joints are not symmetric");
            }
        }
        if self.rows.iter().any(|&r| !(0.0..=1.0).contains(&r)) {
            return bad("rows must lie in [0, 1]");
        }
        Ok(())
    }

    /// Shoulder row minus hip row.
    pub fn shoulder_hip_fraction(&self) -> f64 {
        self.rows[coco::LEFT_SHOULDER] - self.rows[coco::LEFT_HIP]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoseTag {
    Standing,
    Lying,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    /// Distance range in meters, sampled uniformly.
    pub d_range: (f64, f64),
    /// Fraction of the horizontal half field of view used for the person
    /// center.
    pub lateral_fov_fraction: f64,
    /// Std of the i.i.d. Gaussian noise added to each pixel coordinate.
    pub pixel_noise_std: f64,
    /// Probability that a joint is reported missing (conf = 0).
    pub joint_dropout: f64,
    pub mix: HeightMixture,
    pub camera: CameraIntrinsics,
    /// Image width and height in pixels.
    pub image_size: (f64, f64),
    pub template: SkeletonTemplate,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            d_range: (5.0, 40.0),
            lateral_fov_fraction: 0.3,
            pixel_noise_std: 2.0,
            joint_dropout: 0.0,
            mix: HeightMixture::default(),
            camera: CameraIntrinsics::kitti(),
            image_size: (1242.0, 375.0),
            template: SkeletonTemplate::default(),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.d_range;
        if !(lo > 1.0 && hi < 100.0 && lo < hi) {
            return Err(Error::InvalidConfig(format!(
                "distance range ({lo}, {hi}) must lie within (1, 100) m"
            )));
        }
        if !(0.0..=1.0).contains(&self.lateral_fov_fraction) {
            return Err(Error::InvalidConfig(format!(
                "lateral_fov_fraction {} outside [0, 1]",
                self.lateral_fov_fraction
            )));
        }
        if !(self.pixel_noise_std >= 0.0) || !self.pixel_noise_std.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "pixel_noise_std {} must be non-negative",
                self.pixel_noise_std
            )));
        }
        if !(0.0..1.0).contains(&self.joint_dropout) {
            return Err(Error::InvalidConfig(format!(
                "joint_dropout {} outside [0, 1)",
                self.joint_dropout
            )));
        }
        if !(self.image_size.0 > 0.0 && self.image_size.1 > 0.0) {
            return Err(Error::InvalidConfig("image size must be positive".into()));
        }
        self.mix.validate()?;
        self.camera.validate()?;
        self.template.validate()
    }
}

/// One synthetic pedestrian with its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSample {
    pub kp: Keypoints2D,
    /// Norm of the ground-truth center, meters.
    pub d_gt: f64,
    /// Stature, centimeters.
    pub h_gt: f64,
    pub gender: Group,
    pub pose_tag: PoseTag,
    pub camera: CameraIntrinsics,
    /// 3D center of the person box.
    pub center: Point3D,
    /// Noise-free 3D joints.
    pub joints_3d: [Point3D; NUM_JOINTS],
    /// Corners of the person box in 3D.
    pub box_corners: [Point3D; 4],
    /// Pixel noise that was added to each projected joint.
    pub noise: [(f64, f64); NUM_JOINTS],
}

fn group_of(mix: &HeightMixture, idx: usize) -> Group {
    mix.components()[idx].group
}

fn inside(size: (f64, f64), (u, v): (f64, f64)) -> bool {
    (0.0..=size.0).contains(&u) && (0.0..=size.1).contains(&v)
}

fn render(
    camera: &CameraIntrinsics,
    joints_3d: &[Point3D; NUM_JOINTS],
    box_corners: &[Point3D; 4],
    noise: &[(f64, f64); NUM_JOINTS],
    present: &[bool; NUM_JOINTS],
) -> Result<(Keypoints2D, [(f64, f64); NUM_JOINTS])> {
    let mut clean = [(0.0, 0.0); NUM_JOINTS];
    let mut joints = [Joint::default(); NUM_JOINTS];
    for i in 0..NUM_JOINTS {
        let (u, v) = project(camera, &joints_3d[i])?;
        clean[i] = (u, v);
        joints[i] = if present[i] {
            Joint::new(u + noise[i].0, v + noise[i].1, 1.0)
        } else {
            Joint::new(0.0, 0.0, 0.0)
        };
    }
    let corners = box_corners
        .iter()
        .map(|p| project(camera, p))
        .collect::<Result<Vec<_>>>()?;
    let bbox = BBox::enclosing(corners).expect("four corners");
    Ok((Keypoints2D::new(joints, bbox)?, clean))
}

/// Draws one standing pedestrian. The same seed always gives the same sample.
pub fn sample_scene(seed: u64, cfg: &SynthConfig) -> Result<SceneSample> {
    cfg.validate()?;
    let mut rng = StreamRng::seed_from_u64(seed);
    let noise_dist = Normal::new(0.0, cfg.pixel_noise_std).expect("validated std");
    let k = &cfg.camera;
    let t = &cfg.template;
    let half_span = k.cx.min(cfg.image_size.0 - k.cx).max(0.0);

    for _ in 0..MAX_PLACEMENT_TRIES {
        let (idx, h_cm) = cfg.mix.sample(&mut rng);
        let d: f64 = rng.random_range(cfg.d_range.0..cfg.d_range.1);
        let offset: f64 = rng.random_range(-1.0..=1.0);
        let mut noise = [(0.0, 0.0); NUM_JOINTS];
        for n in noise.iter_mut() {
            *n = (noise_dist.sample(&mut rng), noise_dist.sample(&mut rng));
        }
        let mut present = [true; NUM_JOINTS];
        for p in present.iter_mut() {
            let draw: f64 = rng.random();
            *p = draw >= cfg.joint_dropout;
        }
        if !(h_cm > 0.0) || present.iter().filter(|&&p| p).count() < 2 {
            continue;
        }

        let h = h_cm / 100.0;
        let ray = pixel_ray(k, (k.cx + offset * cfg.lateral_fov_fraction * half_span, k.cy))?;
        let center = Point3D::new(d * ray[0], d * ray[1], d * ray[2]);
        let mut joints_3d = [Point3D::default(); NUM_JOINTS];
        for (i, p) in joints_3d.iter_mut().enumerate() {
            *p = Point3D::new(
                center.x + t.lateral[i] * h,
                center.y + (0.5 - t.rows[i]) * h,
                center.z,
            );
        }
        let bw = t.box_half_width * h;
        let box_corners = [
            Point3D::new(center.x - bw, center.y - 0.5 * h, center.z),
            Point3D::new(center.x + bw, center.y - 0.5 * h, center.z),
            Point3D::new(center.x - bw, center.y + 0.5 * h, center.z),
            Point3D::new(center.x + bw, center.y + 0.5 * h, center.z),
        ];

        let (kp, _) = render(k, &joints_3d, &box_corners, &noise, &present)?;
        let bbox = kp.bbox();
        let fits = inside(cfg.image_size, (bbox.u_min, bbox.v_min))
            && inside(cfg.image_size, (bbox.u_max, bbox.v_max))
            && kp
                .joints()
                .iter()
                .filter(|j| j.is_present())
                .all(|j| inside(cfg.image_size, (j.u, j.v)));
        if !fits {
            continue;
        }
        return Ok(SceneSample {
            kp,
            d_gt: center.norm(),
            h_gt: h_cm,
            gender: group_of(&cfg.mix, idx),
            pose_tag: PoseTag::Standing,
            camera: *k,
            center,
            joints_3d,
            box_corners,
            noise,
        });
    }
    Err(Error::SceneOutOfImage {
        tries: MAX_PLACEMENT_TRIES,
    })
}

/// Rotates a standing sample by 90° about the camera x-axis through the
/// ankles so that the person lies on the ground with the head towards the
/// camera, then re-projects it with the same pixel noise.
pub fn make_lying_variant(s: &SceneSample) -> Result<SceneSample> {
    if s.pose_tag != PoseTag::Standing {
        return Err(Error::InvalidConfig("sample is already lying".into()));
    }
    let ankle_y = 0.5 * (s.joints_3d[coco::LEFT_ANKLE].y + s.joints_3d[coco::RIGHT_ANKLE].y);
    let pivot_z = s.center.z;
    // rotation by +90°: (dy, dz) -> (-dz, dy)
    let rotate = |p: &Point3D| {
        let dy = p.y - ankle_y;
        let dz = p.z - pivot_z;
        Point3D::new(p.x, ankle_y - dz, pivot_z + dy)
    };
    let joints_3d = s.joints_3d.map(|p| rotate(&p));
    let box_corners = s.box_corners.map(|p| rotate(&p));
    let center = rotate(&s.center);
    if let Some(p) = joints_3d
        .iter()
        .chain(&box_corners)
        .chain(std::iter::once(&center))
        .find(|p| !(p.z > 0.0))
    {
        return Err(Error::BehindCamera { z: p.z });
    }
    let present = std::array::from_fn(|i| s.kp.joints()[i].is_present());
    let (kp, _) = render(&s.camera, &joints_3d, &box_corners, &s.noise, &present)?;
    Ok(SceneSample {
        kp,
        d_gt: center.norm(),
        pose_tag: PoseTag::Lying,
        center,
        joints_3d,
        box_corners,
        ..s.clone()
    })
}

/// `n` samples with per-sample seeds derived from `(seed, index)`.
pub fn generate_samples(n: usize, seed: u64, cfg: &SynthConfig) -> Result<Vec<SceneSample>> {
    (0..n)
        .map(|i| sample_scene(derive_seed(seed, i as u64), cfg))
        .collect()
}

pub const SPLIT_NAMES: [&str; 3] = ["train", "val", "test"];

/// Record counts per split; the remainder goes to the last split.
pub fn split_counts(n: usize, ratios: [f64; 3]) -> Result<[usize; 3]> {
    let total: f64 = ratios.iter().sum();
    if ratios.iter().any(|r| !(*r >= 0.0)) || (total - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidConfig(format!(
            "split ratios {ratios:?} must be non-negative and sum to 1"
        )));
    }
    let train = (n as f64 * ratios[0]).round() as usize;
    let val = ((n as f64 * ratios[1]).round() as usize).min(n - train.min(n));
    let train = train.min(n);
    Ok([train, val, n - train - val])
}

/// Seed of split `index` in a dataset generated with `seed`.
pub fn split_seed(seed: u64, index: usize) -> u64 {
    derive_seed(seed, 0x5eed_0000 + index as u64)
}

/// Writes `train.jsonl`, `val.jsonl` and `test.jsonl` under `dir`.
pub fn generate_dataset(
    n: usize,
    ratios: [f64; 3],
    cfg: &SynthConfig,
    seed: u64,
    dir: &Path,
) -> Result<Vec<PathBuf>> {
    if n == 0 {
        return Err(Error::InvalidConfig("dataset size must be at least 1".into()));
    }
    cfg.validate()?;
    let counts = split_counts(n, ratios)?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths = Vec::with_capacity(3);
    for (i, (name, count)) in SPLIT_NAMES.iter().zip(counts).enumerate() {
        let samples = generate_samples(count, split_seed(seed, i), cfg)?;
        let records: Vec<AnnotationRecord> = samples
            .iter()
            .enumerate()
            .map(|(j, s)| AnnotationRecord::from_scene(format!("{name}-{j:06}"), s))
            .collect();
        let path = dir.join(format!("{name}.jsonl"));
        dataio::write_annotations(&path, &records)?;
        paths.push(path);
    }
    Ok(paths)
}
