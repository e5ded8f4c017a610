//! Gaussian primitives, activation of raw per-pixel decoder outputs, and the
//! static/dynamic 4D aggregation.
//!
//! A raw pixel record holds 16 values laid out as
//! `delta(3) depth(1) rot(4) scale(3) opacity(1) color(3) mask(1)`.
//! Activation turns the first 15 into the 14 Gaussian parameters
//! `(mu, rot, scale, opacity, color)`; the last one is the dynamic-mask logit.

mod gs4d;

pub use gs4d::{decode_gs4d, encode_gs4d, read_gs4d, write_gs4d, GaussianSet};

use nalgebra::{Matrix3, Quaternion, UnitQuaternion};
use thiserror::Error;

use crate::conditions::EgoTrajectory;
use crate::geometry::{quat_to_matrix, transform_gaussian, PoseSE3, RayMap, Vec3};

pub const RAW_CHANNELS: usize = 16;
/// Activated Gaussian parameters per pixel, not counting the mask.
pub const GAUSSIAN_CHANNELS: usize = 14;

/// Offsets of each field inside a raw pixel record.
pub mod ch {
    pub const DELTA: usize = 0;
    pub const DEPTH: usize = 3;
    pub const ROT: usize = 4;
    pub const SCALE: usize = 8;
    pub const OPACITY: usize = 11;
    pub const COLOR: usize = 12;
    pub const MASK: usize = 15;

    pub fn name(c: usize) -> &'static str {
        match c {
            0..=2 => "delta",
            3 => "depth_raw",
            4..=7 => "rot_raw",
            8..=10 => "scale_raw",
            11 => "opacity_raw",
            12..=14 => "color_raw",
            _ => "mask_logit",
        }
    }
}

const SCALE_RAW_MIN: f64 = -8.0;
const SCALE_RAW_MAX: f64 = 4.0;
const OPACITY_EPS: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GaussianError {
    #[error("corrupt latent: non-finite value in channel `{channel}` at pixel {pixel}")]
    CorruptLatent { channel: &'static str, pixel: usize },
    #[error("incomplete trajectory: no ego pose for timestep {0}")]
    IncompleteTrajectory(usize),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
}

/// One anisotropic splat.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Gaussian3D {
    pub mu: Vec3,
    pub rot: UnitQuaternion<f64>,
    pub scale: Vec3,
    pub opacity: f64,
    pub color: Vec3,
}

impl Gaussian3D {
    pub fn isotropic(mu: Vec3, scale: f64, opacity: f64, color: Vec3) -> Self {
        Self {
            mu,
            rot: UnitQuaternion::identity(),
            scale: Vec3::repeat(scale),
            opacity,
            color,
        }
    }

    /// `R S² Rᵀ`.
    pub fn covariance(&self) -> Matrix3<f64> {
        let r = quat_to_matrix(&self.rot);
        let s2 = Matrix3::from_diagonal(&self.scale.component_mul(&self.scale));
        r * s2 * r.transpose()
    }

    pub fn is_valid(&self) -> bool {
        let finite = self.mu.iter().chain(self.scale.iter()).chain(self.color.iter()).all(|v| v.is_finite());
        finite
            && self.scale.iter().all(|&s| s > 0.0)
            && self.opacity > 0.0
            && self.opacity < 1.0
            && (self.rot.quaternion().norm() - 1.0).abs() < 1e-6
            && self.color.iter().all(|&c| (0.0..=1.0).contains(&c))
    }

    /// The 14 parameters in file order: mu, rot (wxyz), scale, opacity, color.
    pub fn to_array(&self) -> [f64; GAUSSIAN_CHANNELS] {
        let q = self.rot.quaternion();
        [
            self.mu.x, self.mu.y, self.mu.z, q.w, q.i, q.j, q.k, self.scale.x, self.scale.y,
            self.scale.z, self.opacity, self.color.x, self.color.y, self.color.z,
        ]
    }
}

/// Gradient of a scalar loss with respect to one Gaussian's parameters.
/// `rot` is the gradient with respect to the raw `(w, x, y, z)` components.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct GaussianGrad {
    pub mu: Vec3,
    pub rot: [f64; 4],
    pub scale: Vec3,
    pub opacity: f64,
    pub color: Vec3,
}

impl GaussianGrad {
    pub fn add_assign(&mut self, other: &GaussianGrad) {
        self.mu += other.mu;
        for i in 0..4 {
            self.rot[i] += other.rot[i];
        }
        self.scale += other.scale;
        self.opacity += other.opacity;
        self.color += other.color;
    }
}

/// Raw decoder output for one view at one timestep, `height x width` pixels of
/// [`RAW_CHANNELS`] values each.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelGaussianParams {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl PixelGaussianParams {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height * RAW_CHANNELS],
        }
    }

    pub fn pixel(&self, i: usize) -> &[f64] {
        &self.data[i * RAW_CHANNELS..(i + 1) * RAW_CHANNELS]
    }

    pub fn pixel_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * RAW_CHANNELS..(i + 1) * RAW_CHANNELS]
    }

    pub fn mask_logits(&self) -> Vec<f64> {
        (0..self.width * self.height)
            .map(|i| self.pixel(i)[ch::MASK])
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActivationConfig {
    pub d_min: f64,
    pub delta_max: f64,
    pub mask_threshold: f64,
}

impl Default for ActivationConfig {
    fn default() -> Self {
        Self {
            d_min: 0.1,
            delta_max: 0.5,
            mask_threshold: 0.5,
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow for large `x`.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Inverse of [`softplus`] for positive inputs.
pub fn softplus_inv(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Hamilton product `a ⊗ b` on `(w, x, y, z)` arrays.
pub fn quat_mul(a: [f64; 4], b: [f64; 4]) -> [f64; 4] {
    [
        a[0] * b[0] - a[1] * b[1] - a[2] * b[2] - a[3] * b[3],
        a[0] * b[1] + a[1] * b[0] + a[2] * b[3] - a[3] * b[2],
        a[0] * b[2] - a[1] * b[3] + a[2] * b[0] + a[3] * b[1],
        a[0] * b[3] + a[1] * b[2] - a[2] * b[1] + a[3] * b[0],
    ]
}

/// Gradient of `L(a ⊗ b)` with respect to `b`, given the gradient with
/// respect to the product.
pub fn quat_mul_grad_rhs(a: [f64; 4], g: [f64; 4]) -> [f64; 4] {
    // Transpose of the left-multiplication matrix of `a`.
    [
        a[0] * g[0] + a[1] * g[1] + a[2] * g[2] + a[3] * g[3],
        -a[1] * g[0] + a[0] * g[1] + a[3] * g[2] - a[2] * g[3],
        -a[2] * g[0] - a[3] * g[1] + a[0] * g[2] + a[1] * g[3],
        -a[3] * g[0] + a[2] * g[1] - a[1] * g[2] + a[0] * g[3],
    ]
}

/// Gradient through `q / |q|` evaluated at the normalized output `n`.
pub fn normalize_grad(n: [f64; 4], norm: f64, g: [f64; 4]) -> [f64; 4] {
    let dot: f64 = (0..4).map(|i| n[i] * g[i]).sum();
    [
        (g[0] - n[0] * dot) / norm,
        (g[1] - n[1] * dot) / norm,
        (g[2] - n[2] * dot) / norm,
        (g[3] - n[3] * dot) / norm,
    ]
}

pub fn wxyz(q: &UnitQuaternion<f64>) -> [f64; 4] {
    let q = q.quaternion();
    [q.w, q.i, q.j, q.k]
}

fn quat_from(a: [f64; 4]) -> Quaternion<f64> {
    Quaternion::new(a[0], a[1], a[2], a[3])
}

/// `sigmoid(logit) > threshold`; a logit landing exactly on the threshold is
/// static.
pub fn classify_dynamic(mask_logits: &[f64], threshold: f64) -> Vec<bool> {
    mask_logits.iter().map(|&m| sigmoid(m) > threshold).collect()
}

/// Identifies which view and timestep a set of Gaussians came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct FrameId {
    pub timestep: usize,
    pub view: usize,
}

/// Pixel-aligned Gaussians of one view at one timestep, expressed in that
/// timestep's ego frame.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianFrame {
    pub id: FrameId,
    pub gaussians: Vec<Gaussian3D>,
    pub dynamic_flags: Vec<bool>,
}

impl GaussianFrame {
    pub fn static_count(&self) -> usize {
        self.dynamic_flags.iter().filter(|d| !**d).count()
    }

    pub fn dynamic_count(&self) -> usize {
        self.dynamic_flags.iter().filter(|d| **d).count()
    }
}

fn check_finite(params: &PixelGaussianParams) -> Result<(), GaussianError> {
    for (idx, v) in params.data.iter().enumerate() {
        if !v.is_finite() {
            return Err(GaussianError::CorruptLatent {
                channel: ch::name(idx % RAW_CHANNELS),
                pixel: idx / RAW_CHANNELS,
            });
        }
    }
    Ok(())
}

/// Activates one raw pixel record. `cam_rot` is the camera-to-frame rotation
/// applied to the camera-relative predicted orientation.
pub fn activate_pixel(
    raw: &[f64],
    origin: &Vec3,
    direction: &Vec3,
    cam_rot: &UnitQuaternion<f64>,
    cfg: &ActivationConfig,
) -> Gaussian3D {
    let mut delta = Vec3::new(raw[0], raw[1], raw[2]);
    let dn = delta.norm();
    if dn > cfg.delta_max {
        delta *= cfg.delta_max / dn;
    }
    let depth = softplus(raw[ch::DEPTH]) + cfg.d_min;

    let q_raw = [raw[4], raw[5], raw[6], raw[7]];
    let qn = q_raw.iter().map(|v| v * v).sum::<f64>().sqrt();
    let q_local = if qn < 1e-12 {
        [1.0, 0.0, 0.0, 0.0]
    } else {
        [q_raw[0] / qn, q_raw[1] / qn, q_raw[2] / qn, q_raw[3] / qn]
    };
    let rot = UnitQuaternion::new_normalize(quat_from(quat_mul(wxyz(cam_rot), q_local)));

    let scale = Vec3::from_fn(|i, _| raw[ch::SCALE + i].clamp(SCALE_RAW_MIN, SCALE_RAW_MAX).exp());
    Gaussian3D {
        mu: origin + direction * depth + delta,
        rot,
        scale,
        opacity: sigmoid(raw[ch::OPACITY]).clamp(OPACITY_EPS, 1.0 - OPACITY_EPS),
        color: Vec3::from_fn(|i, _| sigmoid(raw[ch::COLOR + i])),
    }
}

/// Backward of [`activate_pixel`]: writes the gradient with respect to the
/// first 15 raw channels into `out` (the mask channel is left untouched).
pub fn activate_pixel_backward(
    raw: &[f64],
    direction: &Vec3,
    cam_rot: &UnitQuaternion<f64>,
    cfg: &ActivationConfig,
    grad: &GaussianGrad,
    out: &mut [f64],
) {
    // mu = o + depth * d + clamp(delta)
    let delta = Vec3::new(raw[0], raw[1], raw[2]);
    let dn = delta.norm();
    let g_delta = if dn > cfg.delta_max {
        let u = delta / dn;
        (grad.mu - u * u.dot(&grad.mu)) * (cfg.delta_max / dn)
    } else {
        grad.mu
    };
    out[0] += g_delta.x;
    out[1] += g_delta.y;
    out[2] += g_delta.z;
    out[ch::DEPTH] += grad.mu.dot(direction) * sigmoid(raw[ch::DEPTH]);

    let q_raw = [raw[4], raw[5], raw[6], raw[7]];
    let qn = q_raw.iter().map(|v| v * v).sum::<f64>().sqrt();
    if qn >= 1e-12 {
        let q_local = [q_raw[0] / qn, q_raw[1] / qn, q_raw[2] / qn, q_raw[3] / qn];
        let a = wxyz(cam_rot);
        let pre = quat_mul(a, q_local);
        let pn = pre.iter().map(|v| v * v).sum::<f64>().sqrt();
        let n = [pre[0] / pn, pre[1] / pn, pre[2] / pn, pre[3] / pn];
        let g_pre = normalize_grad(n, pn, grad.rot);
        let g_local = quat_mul_grad_rhs(a, g_pre);
        let g_raw = normalize_grad(q_local, qn, g_local);
        for i in 0..4 {
            out[ch::ROT + i] += g_raw[i];
        }
    }

    for i in 0..3 {
        let r = raw[ch::SCALE + i];
        if r > SCALE_RAW_MIN && r < SCALE_RAW_MAX {
            out[ch::SCALE + i] += grad.scale[i] * r.exp();
        }
        let c = sigmoid(raw[ch::COLOR + i]);
        out[ch::COLOR + i] += grad.color[i] * c * (1.0 - c);
    }
    let o = sigmoid(raw[ch::OPACITY]);
    if o > OPACITY_EPS && o < 1.0 - OPACITY_EPS {
        out[ch::OPACITY] += grad.opacity * o * (1.0 - o);
    }
}

/// Turns one raw grid into pixel-aligned Gaussians: `mu = R_o + depth·R_d + δ`.
/// `rays` and the returned Gaussians live in the frame `cam_pose` maps into.
pub fn params_to_gaussians(
    params: &PixelGaussianParams,
    rays: &RayMap,
    cam_pose: &PoseSE3,
    cfg: &ActivationConfig,
    id: FrameId,
) -> Result<GaussianFrame, GaussianError> {
    if params.width != rays.width || params.height != rays.height {
        return Err(GaussianError::ShapeMismatch(format!(
            "params {}x{} vs rays {}x{}",
            params.width, params.height, rays.width, rays.height
        )));
    }
    check_finite(params)?;
    let n = params.width * params.height;
    let gaussians = (0..n)
        .map(|i| {
            activate_pixel(
                params.pixel(i),
                &rays.origins[i],
                &rays.directions[i],
                &cam_pose.rotation,
                cfg,
            )
        })
        .collect();
    Ok(GaussianFrame {
        id,
        gaussians,
        dynamic_flags: classify_dynamic(&params.mask_logits(), cfg.mask_threshold),
    })
}

/// Gradient of a loss with respect to the raw grid, given per-Gaussian
/// gradients of the frame produced by [`params_to_gaussians`].
pub fn params_to_gaussians_backward(
    params: &PixelGaussianParams,
    rays: &RayMap,
    cam_pose: &PoseSE3,
    cfg: &ActivationConfig,
    grads: &[GaussianGrad],
) -> Vec<f64> {
    let mut out = vec![0.0; params.data.len()];
    for (i, g) in grads.iter().enumerate() {
        activate_pixel_backward(
            params.pixel(i),
            &rays.directions[i],
            &cam_pose.rotation,
            cfg,
            g,
            &mut out[i * RAW_CHANNELS..(i + 1) * RAW_CHANNELS],
        );
    }
    out
}

/// Backward of [`transform_gaussian`]: maps a gradient on the transformed
/// Gaussian back onto the source Gaussian.
pub fn transform_gaussian_backward(
    source: &Gaussian3D,
    pose: &PoseSE3,
    grad: &GaussianGrad,
) -> GaussianGrad {
    let a = wxyz(&pose.rotation);
    let pre = quat_mul(a, wxyz(&source.rot));
    let pn = pre.iter().map(|v| v * v).sum::<f64>().sqrt();
    let n = [pre[0] / pn, pre[1] / pn, pre[2] / pn, pre[3] / pn];
    GaussianGrad {
        mu: pose.rotation.inverse() * grad.mu,
        rot: quat_mul_grad_rhs(a, normalize_grad(n, pn, grad.rot)),
        ..*grad
    }
}

/// Where a Gaussian in an aggregated scene came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct Provenance {
    pub source: FrameId,
    pub index: usize,
    pub dynamic: bool,
}

/// Per-timestep Gaussian sets in one world frame.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Scene4D {
    pub timesteps: Vec<Vec<Gaussian3D>>,
    pub provenance: Vec<Vec<Provenance>>,
}

impl Scene4D {
    pub fn len(&self) -> usize {
        self.timesteps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timesteps.is_empty()
    }

    pub fn at(&self, t: usize) -> &[Gaussian3D] {
        &self.timesteps[t]
    }
}

/// Index plan of the aggregation: for every timestep, which `(frame, pixel)`
/// pairs it contains, in output order. Shared by [`aggregate_4d`] and the
/// differentiable training path.
pub fn aggregation_plan(frames: &[GaussianFrame], timesteps: usize) -> Vec<Vec<(usize, usize)>> {
    let mut order: Vec<usize> = (0..frames.len()).collect();
    order.sort_by_key(|&f| frames[f].id);
    let statics: Vec<(usize, usize)> = order
        .iter()
        .flat_map(|&f| {
            frames[f]
                .dynamic_flags
                .iter()
                .enumerate()
                .filter(|(_, d)| !**d)
                .map(move |(i, _)| (f, i))
        })
        .collect();
    (0..timesteps)
        .map(|t| {
            let mut set = statics.clone();
            for &f in order.iter().filter(|&&f| frames[f].id.timestep == t) {
                set.extend(
                    frames[f]
                        .dynamic_flags
                        .iter()
                        .enumerate()
                        .filter(|(_, d)| **d)
                        .map(|(i, _)| (f, i)),
                );
            }
            set
        })
        .collect()
}

/// Lifts every frame into the world frame with its timestep's ego pose and
/// forms, for each timestep `t`, the union of all frames' static Gaussians
/// with the dynamic Gaussians of `t`. No deduplication.
///
/// Output order is deterministic: statics ordered by (timestep, view, pixel),
/// then the dynamics of `t` in the same order.
pub fn aggregate_4d(frames: &[GaussianFrame], ego: &EgoTrajectory) -> Result<Scene4D, GaussianError> {
    let timesteps = frames
        .iter()
        .map(|f| f.id.timestep + 1)
        .max()
        .unwrap_or(0)
        .max(ego.len());
    for f in frames {
        if f.gaussians.len() != f.dynamic_flags.len() {
            return Err(GaussianError::ShapeMismatch(format!(
                "frame {:?}: {} gaussians vs {} flags",
                f.id,
                f.gaussians.len(),
                f.dynamic_flags.len()
            )));
        }
    }
    if timesteps > ego.len() {
        return Err(GaussianError::IncompleteTrajectory(ego.len()));
    }
    let world: Vec<Vec<Gaussian3D>> = frames
        .iter()
        .map(|f| {
            let pose = &ego.poses[f.id.timestep];
            f.gaussians.iter().map(|g| transform_gaussian(g, pose)).collect()
        })
        .collect();
    let plan = aggregation_plan(frames, timesteps);
    let timesteps_out = plan
        .iter()
        .map(|set| set.iter().map(|&(f, i)| world[f][i]).collect())
        .collect();
    let provenance = plan
        .iter()
        .map(|set| {
            set.iter()
                .map(|&(f, i)| Provenance {
                    source: frames[f].id,
                    index: i,
                    dynamic: frames[f].dynamic_flags[i],
                })
                .collect()
        })
        .collect();
    Ok(Scene4D {
        timesteps: timesteps_out,
        provenance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{plucker_ray_map, Intrinsics};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_raw(rng: &mut ChaCha8Rng, n: usize) -> PixelGaussianParams {
        let side = (n as f64).sqrt() as usize;
        let mut p = PixelGaussianParams::zeros(side, side);
        for v in p.data.iter_mut() {
            *v = rng.gen_range(-2.0..2.0);
        }
        p
    }

    fn random_pose(rng: &mut ChaCha8Rng) -> PoseSE3 {
        PoseSE3::new(
            UnitQuaternion::new_normalize(Quaternion::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            )),
            Vec3::from_fn(|_, _| rng.gen_range(-3.0..3.0)),
        )
    }

    #[test]
    fn zero_params_use_documented_fallbacks() {
        let intr = Intrinsics::from_fov(4, 4, 60.0).unwrap();
        let rays = plucker_ray_map(&intr, &PoseSE3::identity()).unwrap();
        let params = PixelGaussianParams::zeros(4, 4);
        let cfg = ActivationConfig::default();
        let frame =
            params_to_gaussians(&params, &rays, &PoseSE3::identity(), &cfg, FrameId::default())
                .unwrap();
        for (i, g) in frame.gaussians.iter().enumerate() {
            let depth = std::f64::consts::LN_2 + 0.1;
            assert!((g.mu - (rays.origins[i] + rays.directions[i] * depth)).norm() < 1e-15);
            assert_eq!(g.opacity, 0.5);
            assert_eq!(g.rot, UnitQuaternion::identity());
            assert_eq!(g.scale, Vec3::repeat(1.0));
            assert!(g.is_valid());
        }
        assert!(frame.dynamic_flags.iter().all(|d| !d));
    }

    #[test]
    fn large_depth_raw_stays_finite() {
        assert_eq!(softplus(40.0), 40.0 + (-40.0f64).exp().ln_1p());
        assert!(softplus(800.0).is_finite());
        assert!((softplus(-800.0)).abs() < 1e-300);
        for y in [0.01, 0.5, 3.0, 25.0] {
            assert!((softplus(softplus_inv(y)) - y).abs() < 1e-12 * y.max(1.0));
        }
    }

    #[test]
    fn nan_names_the_channel() {
        let intr = Intrinsics::from_fov(2, 2, 60.0).unwrap();
        let rays = plucker_ray_map(&intr, &PoseSE3::identity()).unwrap();
        let mut params = PixelGaussianParams::zeros(2, 2);
        params.pixel_mut(3)[ch::OPACITY] = f64::NAN;
        let err = params_to_gaussians(
            &params,
            &rays,
            &PoseSE3::identity(),
            &ActivationConfig::default(),
            FrameId::default(),
        )
        .unwrap_err();
        assert_eq!(
            err,
            GaussianError::CorruptLatent {
                channel: "opacity_raw",
                pixel: 3
            }
        );
    }

    #[test]
    fn delta_is_clamped() {
        let mut raw = [0.0; RAW_CHANNELS];
        raw[0] = 3.0;
        raw[1] = 4.0;
        let g = activate_pixel(
            &raw,
            &Vec3::zeros(),
            &Vec3::z(),
            &UnitQuaternion::identity(),
            &ActivationConfig::default(),
        );
        let depth = softplus(0.0) + 0.1;
        assert!((g.mu - Vec3::new(0.3, 0.4, depth)).norm() < 1e-12);
    }

    #[test]
    fn classify_boundary_is_static() {
        assert_eq!(classify_dynamic(&[0.0, 10.0, -10.0], 0.5), vec![false, true, false]);
    }

    #[test]
    fn activation_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let cfg = ActivationConfig {
            delta_max: 0.8,
            ..Default::default()
        };
        for trial in 0..20 {
            let mut raw: Vec<f64> = (0..RAW_CHANNELS).map(|_| rng.gen_range(-1.5..1.5)).collect();
            if trial % 2 == 0 {
                raw[0] *= 3.0;
            }
            let origin = Vec3::from_fn(|_, _| rng.gen_range(-1.0..1.0));
            let dir = Vec3::from_fn(|_, _| rng.gen_range(-1.0..1.0)).normalize();
            let cam = random_pose(&mut rng).rotation;
            let weights: Vec<f64> = (0..GAUSSIAN_CHANNELS).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let loss = |r: &[f64]| -> f64 {
                let g = activate_pixel(r, &origin, &dir, &cam, &cfg);
                g.to_array().iter().zip(&weights).map(|(a, w)| a * w).sum()
            };
            let grad = GaussianGrad {
                mu: Vec3::new(weights[0], weights[1], weights[2]),
                rot: [weights[3], weights[4], weights[5], weights[6]],
                scale: Vec3::new(weights[7], weights[8], weights[9]),
                opacity: weights[10],
                color: Vec3::new(weights[11], weights[12], weights[13]),
            };
            let mut analytic = vec![0.0; RAW_CHANNELS];
            activate_pixel_backward(&raw, &dir, &cam, &cfg, &grad, &mut analytic);
            for c in 0..ch::MASK {
                let h = 1e-6;
                let mut plus = raw.clone();
                plus[c] += h;
                let mut minus = raw.clone();
                minus[c] -= h;
                let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
                assert!(
                    (fd - analytic[c]).abs() < 1e-6 * (1.0 + fd.abs()),
                    "channel {c}: fd {fd} analytic {}",
                    analytic[c]
                );
            }
        }
    }

    #[test]
    fn transform_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pose = random_pose(&mut rng);
        let g = Gaussian3D {
            mu: Vec3::new(0.3, -0.2, 1.0),
            rot: random_pose(&mut rng).rotation,
            scale: Vec3::new(0.1, 0.2, 0.3),
            opacity: 0.4,
            color: Vec3::new(0.1, 0.5, 0.9),
        };
        let w: Vec<f64> = (0..GAUSSIAN_CHANNELS).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let loss = |g: &Gaussian3D| -> f64 {
            transform_gaussian(g, &pose)
                .to_array()
                .iter()
                .zip(&w)
                .map(|(a, b)| a * b)
                .sum()
        };
        let grad = GaussianGrad {
            mu: Vec3::new(w[0], w[1], w[2]),
            rot: [w[3], w[4], w[5], w[6]],
            scale: Vec3::new(w[7], w[8], w[9]),
            opacity: w[10],
            color: Vec3::new(w[11], w[12], w[13]),
        };
        let back = transform_gaussian_backward(&g, &pose, &grad);
        let h = 1e-6;
        for i in 0..3 {
            let mut p = g;
            p.mu[i] += h;
            let mut m = g;
            m.mu[i] -= h;
            let fd = (loss(&p) - loss(&m)) / (2.0 * h);
            assert!((fd - back.mu[i]).abs() < 1e-7);
        }
        // Rotation gradient is checked along tangent directions of the unit
        // sphere, where the renormalized product is differentiable.
        let q = wxyz(&g.rot);
        for _ in 0..4 {
            let mut t: [f64; 4] = [0.0; 4];
            for v in t.iter_mut() {
                *v = rng.gen_range(-1.0..1.0);
            }
            let dot: f64 = (0..4).map(|i| t[i] * q[i]).sum();
            for i in 0..4 {
                t[i] -= dot * q[i];
            }
            let shifted = |sgn: f64| {
                let raw: Vec<f64> = (0..4).map(|i| q[i] + sgn * h * t[i]).collect();
                Gaussian3D {
                    rot: UnitQuaternion::new_unchecked(Quaternion::new(raw[0], raw[1], raw[2], raw[3])),
                    ..g
                }
            };
            let fd = (loss(&shifted(1.0)) - loss(&shifted(-1.0))) / (2.0 * h);
            let analytic: f64 = (0..4).map(|i| back.rot[i] * t[i]).sum();
            assert!((fd - analytic).abs() < 1e-6, "fd {fd} analytic {analytic}");
        }
    }

    #[test]
    fn random_raw_produces_valid_gaussians() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let intr = Intrinsics::from_fov(8, 8, 60.0).unwrap();
        let pose = random_pose(&mut rng);
        let rays = plucker_ray_map(&intr, &pose).unwrap();
        let mut params = random_raw(&mut rng, 64);
        for v in params.data.iter_mut() {
            *v *= 20.0;
        }
        let frame =
            params_to_gaussians(&params, &rays, &pose, &ActivationConfig::default(), FrameId::default())
                .unwrap();
        assert!(frame.gaussians.iter().all(|g| g.is_valid()));
    }
}
