//! Pinhole cameras, rigid transforms and per-pixel ray maps.
//!
//! Conventions used throughout the crate:
//! - quaternions are Hamilton, stored `(w, x, y, z)`;
//! - poses map local points into the parent frame (camera-to-ego,
//!   ego-to-world, camera-to-world);
//! - camera frame is x right, y down, z forward;
//! - pixel `u` covers `[u, u + 1)`, so its center sits at `u + 0.5`.

use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector2, Vector3};
use thiserror::Error;

use crate::gaussians::Gaussian3D;
use crate::kv::{KvDoc, KvError};

pub type Vec3 = Vector3<f64>;

/// Tag written into every file header that stores poses or rotations.
pub const CONVENTION: &str = "wxyz-hamilton parent-from-local";

/// Minimum camera-frame depth for a point to count as visible.
pub const MIN_VISIBLE_Z: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("invalid camera: {0}")]
    InvalidCamera(String),
    #[error("invalid depth {0}: must be positive")]
    InvalidDepth(f64),
    #[error("invalid pose: {0}")]
    InvalidPose(String),
    #[error(transparent)]
    Manifest(#[from] KvError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
    ) -> Result<Self, GeometryError> {
        let intr = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        intr.validate()?;
        Ok(intr)
    }

    /// Square-pixel camera with the principal point at the image center.
    pub fn from_fov(width: usize, height: usize, fov_x_deg: f64) -> Result<Self, GeometryError> {
        let fx = 0.5 * width as f64 / (0.5 * fov_x_deg.to_radians()).tan();
        Self::new(fx, fx, 0.5 * width as f64, 0.5 * height as f64, width, height)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if !(self.fx > 0.0 && self.fx.is_finite() && self.fy > 0.0 && self.fy.is_finite()) {
            return Err(GeometryError::InvalidCamera(format!(
                "focal lengths must be positive, got fx={} fy={}",
                self.fx, self.fy
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(GeometryError::InvalidCamera("empty image".into()));
        }
        let (w, h) = (self.width as f64, self.height as f64);
        if !(self.cx >= 0.0 && self.cx < w && self.cy >= 0.0 && self.cy < h) {
            return Err(GeometryError::InvalidCamera(format!(
                "principal point ({}, {}) outside {}x{}",
                self.cx, self.cy, self.width, self.height
            )));
        }
        Ok(())
    }

    /// Intrinsics of the same camera at `1/factor` resolution. Pixel `i` of
    /// the result looks through the center of the `factor x factor` block it
    /// summarizes.
    pub fn downsampled(&self, factor: usize) -> Result<Self, GeometryError> {
        if factor == 0 || !self.width.is_multiple_of(factor) || !self.height.is_multiple_of(factor) {
            return Err(GeometryError::InvalidCamera(format!(
                "downsample factor {factor} does not divide {}x{}",
                self.width, self.height
            )));
        }
        let f = factor as f64;
        Self::new(
            self.fx / f,
            self.fy / f,
            self.cx / f,
            self.cy / f,
            self.width / factor,
            self.height / factor,
        )
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }
}

/// Rigid transform mapping local coordinates into the parent frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseSE3 {
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vec3,
}

impl Default for PoseSE3 {
    fn default() -> Self {
        Self::identity()
    }
}

impl PoseSE3 {
    pub fn identity() -> Self {
        Self {
            rotation: UnitQuaternion::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn new(rotation: UnitQuaternion<f64>, translation: Vec3) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn from_translation(translation: Vec3) -> Self {
        Self::new(UnitQuaternion::identity(), translation)
    }

    /// Builds a pose from raw `(w, x, y, z)` components, which must already be
    /// unit length within `1e-6`. Components within `1e-12` of unit norm are
    /// kept bit-for-bit so stored poses reload exactly.
    pub fn from_wxyz(q: [f64; 4], translation: Vec3) -> Result<Self, GeometryError> {
        let quat = Quaternion::new(q[0], q[1], q[2], q[3]);
        let norm = quat.norm();
        if !norm.is_finite() || (norm - 1.0).abs() > 1e-6 || !translation.iter().all(|v| v.is_finite())
        {
            return Err(GeometryError::InvalidPose(format!(
                "quaternion norm {norm} or non-finite translation"
            )));
        }
        Ok(Self::new(unit_quat_exact(quat), translation))
    }

    pub fn wxyz(&self) -> [f64; 4] {
        let q = self.rotation.quaternion();
        [q.w, q.i, q.j, q.k]
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        quat_to_matrix(&self.rotation)
    }

    /// `self ∘ other`: apply `other` first, then `self`.
    pub fn compose(&self, other: &PoseSE3) -> PoseSE3 {
        PoseSE3 {
            rotation: UnitQuaternion::new_normalize(
                self.rotation.into_inner() * other.rotation.into_inner(),
            ),
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> PoseSE3 {
        let inv = self.rotation.inverse();
        PoseSE3 {
            rotation: inv,
            translation: -(inv * self.translation),
        }
    }

    pub fn transform_point(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    pub fn rotate(&self, v: &Vec3) -> Vec3 {
        self.rotation * v
    }
}

/// Wraps a nearly-unit quaternion without touching its bits, renormalizing
/// only when it is off by more than `1e-12`.
pub fn unit_quat_exact(q: Quaternion<f64>) -> UnitQuaternion<f64> {
    if (q.norm() - 1.0).abs() <= 1e-12 {
        UnitQuaternion::new_unchecked(q)
    } else {
        UnitQuaternion::new_normalize(q)
    }
}

/// Rotation matrix of a unit quaternion from the explicit polynomial form.
/// The rasterizer's gradient code differentiates exactly this expression.
pub fn quat_to_matrix(q: &UnitQuaternion<f64>) -> Matrix3<f64> {
    let q = q.quaternion();
    let (w, x, y, z) = (q.w, q.i, q.j, q.k);
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Per-pixel ray origins and unit directions, row-major `height x width`.
#[derive(Debug, Clone, PartialEq)]
pub struct RayMap {
    pub width: usize,
    pub height: usize,
    pub origins: Vec<Vec3>,
    pub directions: Vec<Vec3>,
}

impl RayMap {
    pub fn origin(&self, u: usize, v: usize) -> Vec3 {
        self.origins[v * self.width + u]
    }

    pub fn direction(&self, u: usize, v: usize) -> Vec3 {
        self.directions[v * self.width + u]
    }

    /// Six-channel Plücker-style encoding `(origin, direction)` per pixel.
    pub fn plucker_channels(&self) -> Vec<[f64; 6]> {
        self.origins
            .iter()
            .zip(&self.directions)
            .map(|(o, d)| [o.x, o.y, o.z, d.x, d.y, d.z])
            .collect()
    }
}

/// Unit ray through continuous pixel coordinates `(u, v)`, where integer
/// `(u, v)` addresses a pixel and `+0.5` reaches its center.
pub fn pixel_ray(intr: &Intrinsics, pose: &PoseSE3, u: f64, v: f64) -> Vec3 {
    let cam = Vec3::new(
        (u + 0.5 - intr.cx) / intr.fx,
        (v + 0.5 - intr.cy) / intr.fy,
        1.0,
    );
    (pose.rotation * cam).normalize()
}

pub fn plucker_ray_map(intr: &Intrinsics, pose: &PoseSE3) -> Result<RayMap, GeometryError> {
    intr.validate()?;
    let n = intr.pixel_count();
    let mut directions = Vec::with_capacity(n);
    for v in 0..intr.height {
        for u in 0..intr.width {
            directions.push(pixel_ray(intr, pose, u as f64, v as f64));
        }
    }
    Ok(RayMap {
        width: intr.width,
        height: intr.height,
        origins: vec![pose.translation; n],
        directions,
    })
}

/// Point at ray-length `depth` along a unit ray.
pub fn unproject(origin: &Vec3, direction: &Vec3, depth: f64) -> Result<Vec3, GeometryError> {
    if !(depth > 0.0) {
        return Err(GeometryError::InvalidDepth(depth));
    }
    Ok(origin + direction * depth)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Projection {
    Visible { pixel: Vector2<f64>, z: f64 },
    NotVisible,
}

impl Projection {
    pub fn visible(self) -> Option<(Vector2<f64>, f64)> {
        match self {
            Projection::Visible { pixel, z } => Some((pixel, z)),
            Projection::NotVisible => None,
        }
    }
}

/// Pinhole projection of a world point through a camera-to-world pose.
/// Returns continuous image coordinates and camera-frame depth.
pub fn project_point(p: &Vec3, intr: &Intrinsics, pose: &PoseSE3) -> Projection {
    let cam = pose.rotation.inverse() * (p - pose.translation);
    if !(cam.z > MIN_VISIBLE_Z) {
        return Projection::NotVisible;
    }
    Projection::Visible {
        pixel: Vector2::new(
            intr.fx * cam.x / cam.z + intr.cx,
            intr.fy * cam.y / cam.z + intr.cy,
        ),
        z: cam.z,
    }
}

/// Moves a Gaussian into the pose's parent frame. Scale, opacity and color
/// are untouched; the covariance transforms as `R Σ Rᵀ`.
pub fn transform_gaussian(g: &Gaussian3D, pose: &PoseSE3) -> Gaussian3D {
    Gaussian3D {
        mu: pose.transform_point(&g.mu),
        rot: UnitQuaternion::new_normalize(pose.rotation.into_inner() * g.rot.into_inner()),
        ..*g
    }
}

/// A rig camera: intrinsics plus its camera-to-ego extrinsic pose.
#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    pub id: String,
    pub intrinsics: Intrinsics,
    pub extrinsics: PoseSE3,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct CameraRig {
    pub cameras: Vec<Camera>,
}

impl CameraRig {
    pub fn to_kv(&self, doc: &mut KvDoc) {
        doc.push("rig.convention", CONVENTION);
        doc.push("rig.cameras", self.cameras.len());
        for (i, cam) in self.cameras.iter().enumerate() {
            let p = format!("camera.{i}");
            let k = &cam.intrinsics;
            doc.push(format!("{p}.id"), &cam.id);
            doc.push(format!("{p}.fx"), k.fx);
            doc.push(format!("{p}.fy"), k.fy);
            doc.push(format!("{p}.cx"), k.cx);
            doc.push(format!("{p}.cy"), k.cy);
            doc.push(format!("{p}.width"), k.width);
            doc.push(format!("{p}.height"), k.height);
            doc.push(format!("{p}.quaternion"), crate::kv::join_list(&cam.extrinsics.wxyz()));
            let t = cam.extrinsics.translation;
            doc.push(format!("{p}.translation"), crate::kv::join_list(&[t.x, t.y, t.z]));
        }
    }

    pub fn from_kv(doc: &KvDoc) -> Result<Self, GeometryError> {
        let convention = doc.require("rig.convention")?;
        if convention != CONVENTION {
            return Err(GeometryError::InvalidPose(format!(
                "unsupported convention `{convention}`"
            )));
        }
        let n: usize = doc.parsed("rig.cameras")?;
        if n > 4096 {
            return Err(GeometryError::InvalidCamera(format!("{n} cameras")));
        }
        let mut cameras = Vec::with_capacity(n);
        for i in 0..n {
            let p = format!("camera.{i}");
            let width: usize = doc.parsed(&format!("{p}.width"))?;
            let height: usize = doc.parsed(&format!("{p}.height"))?;
            if width.saturating_mul(height) > 1 << 24 {
                return Err(GeometryError::InvalidCamera("image too large".into()));
            }
            let intrinsics = Intrinsics::new(
                doc.finite(&format!("{p}.fx"))?,
                doc.finite(&format!("{p}.fy"))?,
                doc.finite(&format!("{p}.cx"))?,
                doc.finite(&format!("{p}.cy"))?,
                width,
                height,
            )?;
            cameras.push(Camera {
                id: doc.require(&format!("{p}.id"))?.to_string(),
                intrinsics,
                extrinsics: pose_from_kv(doc, &p)?,
            });
        }
        Ok(Self { cameras })
    }

    pub fn to_text(&self) -> String {
        let mut doc = KvDoc::new();
        self.to_kv(&mut doc);
        doc.to_text("worldsplat camera rig")
    }

    pub fn parse(text: &str) -> Result<Self, GeometryError> {
        Self::from_kv(&KvDoc::parse(text)?)
    }
}

pub(crate) fn pose_from_kv(doc: &KvDoc, prefix: &str) -> Result<PoseSE3, GeometryError> {
    let q = doc.finite_list(&format!("{prefix}.quaternion"))?;
    let t = doc.finite_list(&format!("{prefix}.translation"))?;
    if q.len() != 4 || t.len() != 3 {
        return Err(GeometryError::InvalidPose(format!(
            "{prefix}: expected 4 quaternion and 3 translation values"
        )));
    }
    PoseSE3::from_wxyz([q[0], q[1], q[2], q[3]], Vec3::new(t[0], t[1], t[2]))
}

pub(crate) fn pose_to_kv(doc: &mut KvDoc, prefix: &str, pose: &PoseSE3) {
    doc.push(format!("{prefix}.quaternion"), crate::kv::join_list(&pose.wxyz()));
    let t = pose.translation;
    doc.push(format!("{prefix}.translation"), crate::kv::join_list(&[t.x, t.y, t.z]));
}
