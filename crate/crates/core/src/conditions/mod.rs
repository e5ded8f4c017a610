//! Control signals: 3D boxes, BEV sketches, the ego trajectory and a scene
//! tag, plus their lateral perturbation, reprojection and embedding.

mod embed;
mod manifest;

pub use embed::{CondCache, CondFeatures, ConditionEncoder, ConditionEncoderConfig};
pub use manifest::{decode_conditions, encode_conditions, read_conditions, write_conditions, ConditionFileError};

use std::f64::consts::PI;

use nalgebra::UnitQuaternion;
use thiserror::Error;

use crate::geometry::{project_point, GeometryError, Intrinsics, PoseSE3, Projection, Vec3};
use crate::kv::KvError;

#[derive(Debug, Error)]
pub enum ConditionError {
    #[error("unknown scene tag {0:?}")]
    UnknownTag(String),
    #[error("misaligned conditions: {0}")]
    Misaligned(String),
    #[error("invalid trajectory: {0}")]
    InvalidTrajectory(String),
    #[error("invalid box: {0}")]
    InvalidBox(String),
    #[error("invalid sketch: {0}")]
    InvalidSketch(String),
    #[error(transparent)]
    Manifest(#[from] KvError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Wraps an angle into `(-π, π]`.
pub fn wrap_angle(a: f64) -> f64 {
    if a > -PI && a <= PI {
        return a;
    }
    let mut w = a.rem_euclid(2.0 * PI);
    if w > PI {
        w -= 2.0 * PI;
    }
    w
}

#[derive(Debug, Clone, PartialEq)]
pub struct Box3D {
    pub center: Vec3,
    /// Length (along heading), width, height.
    pub size: Vec3,
    pub yaw: f64,
    pub class_tag: String,
}

impl Box3D {
    pub fn new(center: Vec3, size: Vec3, yaw: f64, class_tag: impl Into<String>) -> Result<Self, ConditionError> {
        if !size.iter().all(|s| *s > 0.0 && s.is_finite()) || !center.iter().all(|c| c.is_finite()) || !yaw.is_finite()
        {
            return Err(ConditionError::InvalidBox(format!("center {center:?} size {size:?} yaw {yaw}")));
        }
        Ok(Self {
            center,
            size,
            yaw: wrap_angle(yaw),
            class_tag: class_tag.into(),
        })
    }

    /// The 8 corners, ordered by sign pattern `(±l/2, ±w/2, ±h/2)` with x
    /// slowest, rotated by yaw about +z.
    pub fn corners(&self) -> [Vec3; 8] {
        let (s, c) = self.yaw.sin_cos();
        let half = self.size * 0.5;
        let mut out = [Vec3::zeros(); 8];
        for (i, corner) in out.iter_mut().enumerate() {
            let sx = if i & 4 != 0 { 1.0 } else { -1.0 };
            let sy = if i & 2 != 0 { 1.0 } else { -1.0 };
            let sz = if i & 1 != 0 { 1.0 } else { -1.0 };
            let (lx, ly, lz) = (sx * half.x, sy * half.y, sz * half.z);
            *corner = self.center + Vec3::new(c * lx - s * ly, s * lx + c * ly, lz);
        }
        out
    }

    /// Whether a point lies inside the box (boundary inclusive, with a small
    /// tolerance).
    pub fn contains(&self, p: &Vec3) -> bool {
        let d = p - self.center;
        let (s, c) = self.yaw.sin_cos();
        let local = Vec3::new(c * d.x + s * d.y, -s * d.x + c * d.y, d.z);
        (0..3).all(|i| local[i].abs() <= 0.5 * self.size[i] + 1e-9)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectedBox {
    pub corners: [Projection; 8],
    /// False when every corner is behind the camera.
    pub visible: bool,
}

pub fn reproject_boxes(boxes: &[Box3D], intr: &Intrinsics, cam_pose: &PoseSE3) -> Vec<ProjectedBox> {
    boxes
        .iter()
        .map(|b| {
            let corners = b.corners().map(|p| project_point(&p, intr, cam_pose));
            ProjectedBox {
                visible: corners.iter().any(|c| matches!(c, Projection::Visible { .. })),
                corners,
            }
        })
        .collect()
}

pub const SKETCH_LANE: usize = 0;
pub const SKETCH_BOUNDARY: usize = 1;
pub const SKETCH_CHANNELS: usize = 2;

/// Ego-centered top-down occupancy raster. Row `i` covers ego `x` around
/// `(i + 0.5 - res/2)·cell`, column `j` covers ego `y` likewise.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BEVSketch {
    pub res: usize,
    /// Window side length in millimeters, so the sketch stays `Eq`.
    pub extent_mm: u64,
    /// Channel-major `{0,1}` cells.
    pub data: Vec<u8>,
}

impl BEVSketch {
    pub fn new(res: usize, extent_m: f64) -> Self {
        Self {
            res,
            extent_mm: (extent_m * 1000.0).round() as u64,
            data: vec![0; SKETCH_CHANNELS * res * res],
        }
    }

    pub fn extent(&self) -> f64 {
        self.extent_mm as f64 / 1000.0
    }

    pub fn cell_size(&self) -> f64 {
        self.extent() / self.res as f64
    }

    pub fn get(&self, ch: usize, row: usize, col: usize) -> u8 {
        self.data[(ch * self.res + row) * self.res + col]
    }

    pub fn set(&mut self, ch: usize, row: usize, col: usize, v: u8) {
        self.data[(ch * self.res + row) * self.res + col] = v;
    }

    /// Cell containing ego-frame point `(x, y)`, if inside the window.
    pub fn cell_of(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        let half = self.res as f64 / 2.0;
        let r = (x / self.cell_size() + half).floor();
        let c = (y / self.cell_size() + half).floor();
        if r >= 0.0 && c >= 0.0 && r < self.res as f64 && c < self.res as f64 {
            Some((r as usize, c as usize))
        } else {
            None
        }
    }

    pub fn center_of(&self, row: usize, col: usize) -> (f64, f64) {
        let half = self.res as f64 / 2.0;
        let cs = self.cell_size();
        ((row as f64 + 0.5 - half) * cs, (col as f64 + 0.5 - half) * cs)
    }

    pub fn validate(&self) -> Result<(), ConditionError> {
        if self.res == 0 || self.extent_mm == 0 || self.data.len() != SKETCH_CHANNELS * self.res * self.res {
            return Err(ConditionError::InvalidSketch(format!(
                "res {} extent {} mm with {} cells",
                self.res,
                self.extent_mm,
                self.data.len()
            )));
        }
        if self.data.iter().any(|&v| v > 1) {
            return Err(ConditionError::InvalidSketch("cell value outside {0,1}".into()));
        }
        Ok(())
    }
}

/// Resamples `sketch` (ego-centered under pose `from`) into the ego frame of
/// `to`, nearest neighbor; cells that map outside the window become 0.
pub fn resample_sketch(sketch: &BEVSketch, from: &PoseSE3, to: &PoseSE3) -> BEVSketch {
    if from == to {
        return sketch.clone();
    }
    // New-frame point -> world -> old frame.
    let change = from.inverse().compose(to);
    let mut out = BEVSketch { data: vec![0; sketch.data.len()], ..sketch.clone() };
    for row in 0..sketch.res {
        for col in 0..sketch.res {
            let (x, y) = out.center_of(row, col);
            let p = change.transform_point(&Vec3::new(x, y, 0.0));
            if let Some((r, c)) = sketch.cell_of(p.x, p.y) {
                for ch in 0..SKETCH_CHANNELS {
                    out.set(ch, row, col, sketch.get(ch, r, c));
                }
            }
        }
    }
    out
}

/// One sketch per timestep, each resampled under `traj'⁻¹ ∘ traj` at that
/// timestep.
pub fn reproject_sketch(sketch: &BEVSketch, traj: &EgoTrajectory, traj_new: &EgoTrajectory) -> Vec<BEVSketch> {
    traj.poses
        .iter()
        .zip(&traj_new.poses)
        .map(|(a, b)| resample_sketch(sketch, a, b))
        .collect()
}

/// Ego poses (ego-to-world) with strictly increasing timestamps.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EgoTrajectory {
    pub poses: Vec<PoseSE3>,
    pub timestamps: Vec<f64>,
}

impl EgoTrajectory {
    pub fn new(poses: Vec<PoseSE3>, timestamps: Vec<f64>) -> Result<Self, ConditionError> {
        if poses.len() != timestamps.len() {
            return Err(ConditionError::InvalidTrajectory(format!(
                "{} poses vs {} timestamps",
                poses.len(),
                timestamps.len()
            )));
        }
        if timestamps.windows(2).any(|w| !(w[1] > w[0])) || timestamps.iter().any(|t| !t.is_finite()) {
            return Err(ConditionError::InvalidTrajectory("timestamps must strictly increase".into()));
        }
        if poses.iter().any(|p| (p.rotation.quaternion().norm() - 1.0).abs() > 1e-9) {
            return Err(ConditionError::InvalidTrajectory("non-unit quaternion".into()));
        }
        Ok(Self { poses, timestamps })
    }

    /// Timestamps `0, 1, 2, …`.
    pub fn from_poses(poses: Vec<PoseSE3>) -> Self {
        let timestamps = (0..poses.len()).map(|t| t as f64).collect();
        Self { poses, timestamps }
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }
}

/// Shifts every pose by `dy` along its own lateral axis: `t' = t + R·(0,dy,0)`.
pub fn perturb_trajectory(traj: &EgoTrajectory, dy: f64) -> EgoTrajectory {
    EgoTrajectory {
        poses: traj
            .poses
            .iter()
            .map(|p| PoseSE3 {
                rotation: p.rotation,
                translation: p.translation + p.rotation * Vec3::new(0.0, dy, 0.0),
            })
            .collect(),
        timestamps: traj.timestamps.clone(),
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ConditionSet {
    /// One ego-centered sketch per timestep.
    pub sketch: Vec<BEVSketch>,
    /// World-frame boxes per timestep.
    pub boxes: Vec<Vec<Box3D>>,
    pub trajectory: EgoTrajectory,
    pub tag: String,
}

impl ConditionSet {
    /// Only a tag; no spatial signals.
    pub fn tag_only(tag: impl Into<String>) -> Self {
        Self {
            tag: tag.into(),
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<(), ConditionError> {
        let t = self.trajectory.len();
        if self.boxes.len() != t || (!self.sketch.is_empty() && self.sketch.len() != t) {
            return Err(ConditionError::Misaligned(format!(
                "trajectory {t}, boxes {}, sketches {}",
                self.boxes.len(),
                self.sketch.len()
            )));
        }
        for s in &self.sketch {
            s.validate()?;
        }
        Ok(())
    }

    /// The conditions seen from the laterally shifted track: new trajectory,
    /// sketches resampled into the shifted ego frames, boxes unchanged in the
    /// world frame.
    pub fn perturbed(&self, dy: f64) -> ConditionSet {
        let trajectory = perturb_trajectory(&self.trajectory, dy);
        let sketch = self
            .sketch
            .iter()
            .enumerate()
            .map(|(t, s)| resample_sketch(s, &self.trajectory.poses[t], &trajectory.poses[t]))
            .collect();
        ConditionSet {
            sketch,
            boxes: self.boxes.clone(),
            trajectory,
            tag: self.tag.clone(),
        }
    }
}

/// Yaw of a rotation about +z (heading of the x axis in the xy plane).
pub fn yaw_of(q: &UnitQuaternion<f64>) -> f64 {
    let x = q * Vec3::x();
    x.y.atan2(x.x)
}
