//! Procedural driving scenes with exact ground truth: a straight road with
//! lane markings, roadside blocks and a backdrop, plus ellipsoid vehicles
//! moving at constant velocity. Targets are brute-force renders of the
//! stored Gaussians.

mod io;

pub use io::{read_scene, verify_scene, write_scene, SCENE_MANIFEST};

use std::f64::consts::PI;

use nalgebra::UnitQuaternion;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::conditions::{
    BEVSketch, Box3D, ConditionError, ConditionSet, EgoTrajectory, SKETCH_BOUNDARY, SKETCH_LANE,
};
use crate::decoder::{DecoderError, DecoderScene, MultiModalLatent, TargetView, DOWNSAMPLE, LATENT_CHANNELS};
use crate::format::FormatError;
use crate::gaussians::{FrameId, Gaussian3D, GaussianFrame, GaussianSet};
use crate::geometry::{
    pixel_ray, project_point, Camera, CameraRig, GeometryError, Intrinsics, PoseSE3, Vec3,
};
use crate::raster::{render_reference_with_ids, DepthImage, GrayImage, RenderOutput, RgbImage};

/// Seconds between timesteps.
pub const FRAME_DT: f64 = 0.5;
/// Ego speed along world `+x`, meters per second.
pub const EGO_SPEED: f64 = 2.0;
pub const CAMERA_HEIGHT: f64 = 1.6;
pub const CAMERA_FOV_DEG: f64 = 70.0;
/// Yaw between neighboring rig cameras.
pub const CAMERA_SPACING_DEG: f64 = 50.0;
pub const SCENE_TAGS: [&str; 2] = ["day", "dusk"];
pub const VEHICLE_CLASS: &str = "vehicle";

const LANE_LINES: [f64; 4] = [-5.25, -1.75, 1.75, 5.25];
const ROAD_EDGE: f64 = 7.0;
const LANES: [f64; 3] = [-3.5, 0.0, 3.5];
const FRONT_WALL_X: f64 = 50.0;
const SIDE_WALL_Y: f64 = 27.0;
const WALL_HEIGHT: f64 = 44.0;
const VEHICLE_HALF: [f64; 3] = [2.1, 0.9, 0.75];
const VEHICLE_RINGS: usize = 6;
const VEHICLE_SEGMENTS: usize = 10;
const SKETCH_RES: usize = 64;
const SKETCH_EXTENT: f64 = 32.0;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid scene spec: {0}")]
    Spec(String),
    #[error("scene does not match its files: {0}")]
    Mismatch(String),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Condition(#[from] ConditionError),
    #[error(transparent)]
    Decoder(#[from] DecoderError),
    #[error("manifest: {0}")]
    Manifest(#[from] crate::kv::KvError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SceneSpec {
    pub seed: u64,
    pub views: usize,
    pub timesteps: usize,
    pub height: usize,
    pub width: usize,
    /// Budget for static Gaussians; the layout uses at most this many.
    pub n_static: usize,
    /// Number of vehicles.
    pub n_dynamic: usize,
    /// Mirror the layout about the ego lane's center line.
    pub symmetric: bool,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            views: 2,
            timesteps: 4,
            height: 32,
            width: 32,
            n_static: 1500,
            n_dynamic: 2,
            symmetric: false,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        if self.views == 0 || self.timesteps == 0 || self.height == 0 || self.width == 0 {
            return Err(SynthError::Spec(format!(
                "{} views, {} timesteps, {}x{} pixels",
                self.views, self.timesteps, self.width, self.height
            )));
        }
        if self.views > 7 {
            return Err(SynthError::Spec(format!("at most 7 cameras fit the rig, got {}", self.views)));
        }
        if self.height * self.width > 1 << 20 || self.timesteps > 1024 || self.n_static > 1 << 20 || self.n_dynamic > 64 {
            return Err(SynthError::Spec("scene too large".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Palette {
    asphalt: Vec3,
    verge: Vec3,
    marking: Vec3,
    building: Vec3,
    sky: Vec3,
    shade: f64,
}

fn palette(tag: &str) -> Palette {
    match tag {
        "dusk" => Palette {
            asphalt: Vec3::new(0.22, 0.21, 0.25),
            verge: Vec3::new(0.25, 0.30, 0.24),
            marking: Vec3::new(0.75, 0.72, 0.60),
            building: Vec3::new(0.40, 0.33, 0.36),
            sky: Vec3::new(0.85, 0.55, 0.40),
            shade: 0.8,
        },
        _ => Palette {
            asphalt: Vec3::new(0.33, 0.33, 0.35),
            verge: Vec3::new(0.36, 0.52, 0.30),
            marking: Vec3::new(0.90, 0.90, 0.85),
            building: Vec3::new(0.62, 0.56, 0.50),
            sky: Vec3::new(0.55, 0.72, 0.92),
            shade: 1.0,
        },
    }
}

/// Constant color behind all splats for scenes with this tag.
pub fn background_for(tag: &str) -> Vec3 {
    palette(tag).sky
}

/// `V` cameras at `CAMERA_HEIGHT`, fanned symmetrically about the heading,
/// camera 0 leftmost.
pub fn default_rig(views: usize, width: usize, height: usize) -> Result<CameraRig, GeometryError> {
    let intr = Intrinsics::from_fov(width, height, CAMERA_FOV_DEG)?;
    // camera z → ego x, camera x → ego −y, camera y → ego −z
    let base = UnitQuaternion::from_basis_unchecked(&[-Vec3::y(), -Vec3::z(), Vec3::x()]);
    let cameras = (0..views)
        .map(|i| {
            let yaw = CAMERA_SPACING_DEG.to_radians() * ((views as f64 - 1.0) / 2.0 - i as f64);
            let rot = UnitQuaternion::from_axis_angle(&Vec3::z_axis(), yaw) * base;
            Camera {
                id: format!("cam{i}"),
                intrinsics: intr,
                extrinsics: PoseSE3::new(rot, Vec3::new(0.0, 0.0, CAMERA_HEIGHT)),
            }
        })
        .collect();
    Ok(CameraRig { cameras })
}

/// Straight ego track along world `+x` at `EGO_SPEED`.
pub fn default_trajectory(timesteps: usize) -> EgoTrajectory {
    let poses = (0..timesteps)
        .map(|t| PoseSE3::from_translation(Vec3::new(EGO_SPEED * FRAME_DT * t as f64, 0.0, 0.0)))
        .collect();
    let stamps = (0..timesteps).map(|t| FRAME_DT * t as f64).collect();
    EgoTrajectory::new(poses, stamps).expect("increasing timestamps")
}

/// A vehicle body in its own frame (x forward, z up, origin at the center
/// of its footprint) and a constant world velocity.
#[derive(Debug, Clone, PartialEq)]
pub struct Vehicle {
    pub start: Vec3,
    pub yaw: f64,
    /// Meters per second in the world frame.
    pub velocity: Vec3,
    pub body: Vec<Gaussian3D>,
}

impl Vehicle {
    pub fn pose_at(&self, time: f64) -> PoseSE3 {
        PoseSE3::new(
            UnitQuaternion::from_axis_angle(&Vec3::z_axis(), self.yaw),
            self.start + self.velocity * time,
        )
    }

    /// Tight box around the body's centers at `time`, padded by `margin`.
    pub fn fitted_box(&self, time: f64, margin: f64) -> Result<Box3D, ConditionError> {
        let mut lo = Vec3::repeat(f64::INFINITY);
        let mut hi = Vec3::repeat(f64::NEG_INFINITY);
        for g in &self.body {
            lo = lo.inf(&g.mu);
            hi = hi.sup(&g.mu);
        }
        let pose = self.pose_at(time);
        let local_center = (lo + hi) * 0.5;
        Box3D::new(
            pose.transform_point(&local_center),
            hi - lo + Vec3::repeat(2.0 * margin),
            self.yaw,
            VEHICLE_CLASS,
        )
    }
}

/// Ground-truth views for one `(view, timestep)`, as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameTargets {
    pub rgb: RgbImage,
    pub depth: DepthImage,
    pub mask: GrayImage,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub spec: SceneSpec,
    pub tag: String,
    pub rig: CameraRig,
    pub trajectory: EgoTrajectory,
    pub background: Vec3,
    /// World-frame Gaussians per timestep: statics first, then each
    /// vehicle's body in order. Already `f32`-exact.
    pub gaussians: Vec<GaussianSet>,
    /// Dynamic Gaussians per vehicle, in storage order.
    pub vehicle_sizes: Vec<usize>,
    /// Index `v·T + t`.
    pub targets: Vec<FrameTargets>,
    pub conditions: ConditionSet,
    /// Range of every stored depth value; the latent depth normalization.
    pub depth_range: (f64, f64),
}

impl SyntheticScene {
    pub fn target(&self, v: usize, t: usize) -> &FrameTargets {
        &self.targets[v * self.spec.timesteps + t]
    }

    pub fn static_count(&self) -> usize {
        self.gaussians.first().map_or(0, |s| s.dynamic.iter().filter(|d| !**d).count())
    }

    /// World pose of camera `v` at timestep `t` on `trajectory`.
    pub fn camera_pose(&self, trajectory: &EgoTrajectory, v: usize, t: usize) -> PoseSE3 {
        trajectory.poses[t].compose(&self.rig.cameras[v].extrinsics)
    }

    /// Brute-force render of the ground truth at `t` from an arbitrary pose,
    /// with the majority-contribution dynamic mask.
    pub fn render_truth(&self, t: usize, intr: &Intrinsics, pose: &PoseSE3) -> (RenderOutput, Vec<bool>) {
        let set = &self.gaussians[t];
        let (out, top) = render_reference_with_ids(&set.gaussians, intr, pose, &self.background);
        let mask = top.iter().map(|i| i.is_some_and(|i| set.dynamic[i])).collect();
        (out, mask)
    }

    /// Decoder inputs and supervision at the decoder's latent resolution.
    pub fn to_decoder_scene(&self) -> Result<DecoderScene, SynthError> {
        let latent = encode_latent(self, DOWNSAMPLE)?;
        let targets = self
            .targets
            .iter()
            .map(|f| TargetView {
                rgb: f.rgb.to_f64(),
                depth: f.depth.data.iter().map(|&d| d as f64).collect(),
                mask: f.mask.to_mask(),
            })
            .collect();
        Ok(DecoderScene::new(
            latent,
            self.rig.cameras.clone(),
            self.trajectory.clone(),
            targets,
            self.background,
        )?)
    }
}

struct Layout {
    statics: Vec<Gaussian3D>,
    vehicles: Vec<Vehicle>,
}

fn flat(mu: Vec3, scale: Vec3, opacity: f64, color: Vec3) -> Gaussian3D {
    Gaussian3D {
        mu,
        rot: UnitQuaternion::identity(),
        scale,
        opacity,
        color: color.map(|c| c.clamp(0.0, 1.0)),
    }
}

/// Smooth low-amplitude variation, even in `y` so mirrored layouts stay
/// mirrored.
struct Texture {
    phase: [f64; 4],
}

impl Texture {
    fn new(rng: &mut ChaCha8Rng) -> Self {
        Self {
            phase: [0.0; 4].map(|_| rng.gen_range(0.0..2.0 * PI)),
        }
    }

    fn at(&self, a: f64, b: f64) -> f64 {
        let b = b.abs();
        0.03 * (0.31 * a + self.phase[0]).sin() * (0.43 * b + self.phase[1]).cos()
            + 0.02 * (0.11 * a + 0.07 * b + self.phase[2]).sin()
            + 0.015 * (0.9 * b + self.phase[3]).sin()
    }
}

fn push_grid(
    out: &mut Vec<Gaussian3D>,
    count: usize,
    aspect: f64,
    place: impl Fn(f64, f64, f64, f64) -> Gaussian3D,
) {
    if count == 0 {
        return;
    }
    let cols = ((aspect * count as f64).sqrt().ceil() as usize).clamp(1, count);
    let rows = (count / cols).max(1);
    for r in 0..rows {
        for c in 0..cols {
            let u = (r as f64 + 0.5) / rows as f64;
            let v = (c as f64 + 0.5) / cols as f64;
            out.push(place(u, v, 1.0 / rows as f64, 1.0 / cols as f64));
        }
    }
}

fn ground(out: &mut Vec<Gaussian3D>, budget: usize, pal: &Palette, tex: &Texture) {
    // Geometric row spacing keeps each splat's extent proportional to its
    // distance, so flat splats stay below the horizon once projected.
    let (x_near, x_far) = (1.0, FRONT_WALL_X);
    let half_w = SIDE_WALL_Y;
    let log_ratio = (x_far / x_near).ln();
    push_grid(out, budget, 1.0, |u, v, du, dv| {
        let x = x_near * (log_ratio * u).exp();
        let dx = x * log_ratio * du;
        let y = -half_w + 2.0 * half_w * v;
        let dy = 2.0 * half_w * dv;
        let base = if y.abs() < ROAD_EDGE { pal.asphalt } else { pal.verge };
        let shade = tex.at(x, y);
        flat(
            Vec3::new(x, y, 0.0),
            Vec3::new((0.8 * dx).min(0.1 * x), (0.8 * dy).min(0.5 * x), 0.02),
            0.97,
            base.add_scalar(shade),
        )
    });
}

fn markings(out: &mut Vec<Gaussian3D>, budget: usize, pal: &Palette) {
    let per_line = budget / LANE_LINES.len();
    for &y in &LANE_LINES {
        for k in 0..per_line {
            let x = 2.0 + 5.0 * k as f64;
            if x > FRONT_WALL_X - 2.0 {
                break;
            }
            out.push(flat(Vec3::new(x, y, 0.01), Vec3::new(0.7, 0.15, 0.01), 0.8, pal.marking));
        }
    }
}

fn backdrop(out: &mut Vec<Gaussian3D>, budget: usize, pal: &Palette, tex: &Texture) {
    let color = |z: f64, along: f64| {
        let w = ((z - 14.0) / 6.0).clamp(0.0, 1.0);
        let building = pal.building.add_scalar(tex.at(along.abs(), z) * 1.5);
        building * (1.0 - w) + pal.sky * w
    };
    let front = budget / 2;
    let side = (budget - front) / 2;
    let (w_front, w_side) = (2.0 * (SIDE_WALL_Y + 3.0), FRONT_WALL_X + 2.0);
    push_grid(out, front, w_front / WALL_HEIGHT, |u, v, du, dv| {
        let (z, y) = (WALL_HEIGHT * u, -0.5 * w_front + w_front * v);
        flat(
            Vec3::new(FRONT_WALL_X, y, z),
            Vec3::new(0.05, 0.8 * w_front * dv, 0.8 * WALL_HEIGHT * du),
            0.97,
            color(z, y),
        )
    });
    for sign in [1.0, -1.0] {
        push_grid(out, side, w_side / WALL_HEIGHT, |u, v, du, dv| {
            let (z, x) = (WALL_HEIGHT * u, -2.0 + w_side * v);
            flat(
                Vec3::new(x, sign * SIDE_WALL_Y, z),
                Vec3::new(0.8 * w_side * dv, 0.05, 0.8 * WALL_HEIGHT * du),
                0.97,
                color(z, x),
            )
        });
    }
}

/// 3×3×3 lattices of splats filling roadside boxes.
fn blocks(out: &mut Vec<Gaussian3D>, count: usize, symmetric: bool, pal: &Palette, rng: &mut ChaCha8Rng) {
    let mut placed = 0;
    while placed < count {
        let size = Vec3::new(rng.gen_range(3.0..8.0), rng.gen_range(3.0..6.0), rng.gen_range(2.0..8.0));
        let x = rng.gen_range(6.0..42.0);
        let y = rng.gen_range(ROAD_EDGE + 2.0 + 0.5 * size.y..SIDE_WALL_Y - 2.0 - 0.5 * size.y);
        let side = if rng.gen::<bool>() { 1.0 } else { -1.0 };
        let tint = Vec3::new(rng.gen_range(-0.1..0.1), rng.gen_range(-0.1..0.1), rng.gen_range(-0.1..0.1));
        let base = (pal.building * 0.9 + tint) * pal.shade;
        let sides: &[f64] = if symmetric { &[1.0, -1.0] } else { std::slice::from_ref(&side) };
        for &s in sides {
            if placed == count {
                break;
            }
            for (i, j, k) in (0..27).map(|n| (n / 9, (n / 3) % 3, n % 3)) {
                let f = |n: usize| (n as f64 + 0.5) / 3.0 - 0.5;
                let mu = Vec3::new(x + size.x * f(i), s * y + size.y * f(j), size.z * (f(k) + 0.5));
                let shade = 0.9 + 0.05 * k as f64;
                out.push(flat(mu, size * (0.8 / 3.0), 0.98, base * shade));
            }
            placed += 1;
        }
    }
}

/// Ellipsoid shell of splats plus a darker cabin band.
fn vehicle_body(color: Vec3) -> Vec<Gaussian3D> {
    let [a, b, c] = VEHICLE_HALF;
    let mut body = Vec::with_capacity(VEHICLE_RINGS * VEHICLE_SEGMENTS + 2);
    for r in 0..VEHICLE_RINGS {
        let el = -PI / 2.0 + PI * (r as f64 + 0.5) / VEHICLE_RINGS as f64;
        for s in 0..VEHICLE_SEGMENTS {
            let az = 2.0 * PI * s as f64 / VEHICLE_SEGMENTS as f64;
            let mu = Vec3::new(a * el.cos() * az.cos(), b * el.cos() * az.sin(), c + c * el.sin());
            let cabin = r + 2 >= VEHICLE_RINGS;
            let col = if cabin { color * 0.35 + Vec3::repeat(0.1) } else { color };
            body.push(flat(mu, Vec3::new(0.5, 0.35, 0.3), 0.98, col));
        }
    }
    body.push(flat(Vec3::new(0.0, 0.0, c), Vec3::new(1.6, 0.7, 0.55), 0.98, color));
    body.push(flat(Vec3::new(0.0, 0.0, 0.15), Vec3::new(1.8, 0.75, 0.12), 0.98, Vec3::repeat(0.08)));
    body
}

const VEHICLE_COLORS: [[f64; 3]; 6] = [
    [0.80, 0.12, 0.10],
    [0.12, 0.30, 0.80],
    [0.90, 0.80, 0.20],
    [0.92, 0.92, 0.92],
    [0.12, 0.12, 0.14],
    [0.20, 0.60, 0.30],
];

fn vehicles(n: usize, symmetric: bool, pal: &Palette, rng: &mut ChaCha8Rng) -> Vec<Vehicle> {
    // One speed per lane and fixed slots along it keep bodies apart at every
    // timestep. The ego lane never moves slower than the ego.
    let mut speeds = [rng.gen_range(0.5..3.5), rng.gen_range(EGO_SPEED..3.5), -rng.gen_range(0.5..3.5)];
    if symmetric {
        speeds[2] = speeds[0];
    }
    let mut free: Vec<(usize, usize)> = (0..LANES.len()).flat_map(|l| (0..4).map(move |s| (l, s))).collect();
    let mut out = Vec::with_capacity(n);
    let make = |lane: usize, slot: usize, color: Vec3| {
        let speed = speeds[lane];
        // Oncoming traffic starts further out so it stays in view longer.
        let x0 = if speed < 0.0 { 11.0 } else { 5.0 };
        Vehicle {
            start: Vec3::new(x0 + 6.0 * slot as f64, LANES[lane], 0.0),
            yaw: if speed < 0.0 { PI } else { 0.0 },
            velocity: Vec3::new(speed, 0.0, 0.0),
            body: vehicle_body(color),
        }
    };
    while out.len() < n && !free.is_empty() {
        let k = rng.gen_range(0..free.len());
        let (lane, slot) = free[k];
        let color = Vec3::from(VEHICLE_COLORS[rng.gen_range(0..VEHICLE_COLORS.len())]) * pal.shade;
        if symmetric && lane != 1 {
            if out.len() + 2 > n {
                free.retain(|&(l, _)| l == 1);
                continue;
            }
            free.retain(|&(l, s)| s != slot || l == 1);
            out.push(make(0, slot, color));
            out.push(make(2, slot, color));
        } else {
            free.swap_remove(k);
            out.push(make(lane, slot, color));
        }
    }
    out
}

fn layout(spec: &SceneSpec, pal: &Palette, rng: &mut ChaCha8Rng) -> Layout {
    let n = spec.n_static;
    let tex = Texture::new(rng);
    let n_marks = (n / 10).min(4 * 10);
    let n_blocks = n / 5 / 27;
    let n_ground = n / 2;
    let n_backdrop = n - n_ground - n_marks - 27 * n_blocks;
    let mut statics = Vec::with_capacity(n);
    ground(&mut statics, n_ground, pal, &tex);
    markings(&mut statics, n_marks, pal);
    blocks(&mut statics, n_blocks, spec.symmetric, pal, rng);
    backdrop(&mut statics, n_backdrop, pal, &tex);
    let vehicles = vehicles(spec.n_dynamic, spec.symmetric, pal, rng);
    Layout { statics, vehicles }
}

fn sketch_at(pose: &PoseSE3) -> BEVSketch {
    let mut s = BEVSketch::new(SKETCH_RES, SKETCH_EXTENT);
    let half_cell = 0.5 * s.cell_size();
    for row in 0..SKETCH_RES {
        for col in 0..SKETCH_RES {
            let (x, y) = s.center_of(row, col);
            let w = pose.transform_point(&Vec3::new(x, y, 0.0));
            if LANE_LINES.iter().any(|l| (w.y - l).abs() <= half_cell) {
                s.set(SKETCH_LANE, row, col, 1);
            }
            if (w.y.abs() - ROAD_EDGE).abs() <= half_cell {
                s.set(SKETCH_BOUNDARY, row, col, 1);
            }
        }
    }
    s
}

/// Builds the scene: layout, per-timestep Gaussian sets, brute-force
/// targets, fitted boxes and sketches. Deterministic in `spec`.
pub fn generate_scene(spec: &SceneSpec) -> Result<SyntheticScene, SynthError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let tag = SCENE_TAGS[rng.gen_range(0..SCENE_TAGS.len())].to_string();
    let pal = palette(&tag);
    let Layout { statics, vehicles } = layout(spec, &pal, &mut rng);
    if statics.is_empty() && vehicles.is_empty() {
        log::warn!("scene {} has no Gaussians; targets show only the background", spec.seed);
    }
    let rig = default_rig(spec.views, spec.width, spec.height)?;
    let trajectory = default_trajectory(spec.timesteps);
    let background = background_for(&tag);

    let mut gaussians = Vec::with_capacity(spec.timesteps);
    let mut boxes = Vec::with_capacity(spec.timesteps);
    for t in 0..spec.timesteps {
        let time = trajectory.timestamps[t];
        let mut set = GaussianSet {
            gaussians: statics.clone(),
            dynamic: vec![false; statics.len()],
        };
        let mut frame_boxes = Vec::with_capacity(vehicles.len());
        for v in &vehicles {
            let pose = v.pose_at(time);
            set.gaussians.extend(v.body.iter().map(|g| crate::geometry::transform_gaussian(g, &pose)));
            set.dynamic.extend(std::iter::repeat_n(true, v.body.len()));
            frame_boxes.push(v.fitted_box(time, 0.05)?);
        }
        gaussians.push(set.quantized());
        boxes.push(frame_boxes);
    }
    let mut scene = SyntheticScene {
        spec: *spec,
        tag: tag.clone(),
        rig,
        background,
        vehicle_sizes: vehicles.iter().map(|v| v.body.len()).collect(),
        targets: Vec::new(),
        conditions: ConditionSet {
            sketch: trajectory.poses.iter().map(sketch_at).collect(),
            boxes,
            trajectory: trajectory.clone(),
            tag,
        },
        trajectory,
        gaussians,
        depth_range: (0.0, 0.0),
    };
    scene.targets = render_targets(&scene);
    scene.depth_range = depth_range(&scene.targets);
    Ok(scene)
}

/// Generates every spec in parallel; output order follows `specs`.
pub fn generate_scenes(specs: &[SceneSpec]) -> Result<Vec<SyntheticScene>, SynthError> {
    specs.par_iter().map(generate_scene).collect()
}

pub(crate) fn render_targets(scene: &SyntheticScene) -> Vec<FrameTargets> {
    let (nv, nt) = (scene.spec.views, scene.spec.timesteps);
    (0..nv * nt)
        .into_par_iter()
        .map(|f| {
            let (v, t) = (f / nt, f % nt);
            let cam = &scene.rig.cameras[v];
            let pose = scene.camera_pose(&scene.trajectory, v, t);
            let (out, mask) = scene.render_truth(t, &cam.intrinsics, &pose);
            FrameTargets {
                rgb: RgbImage::from_f32(out.width, out.height, &out.rgb),
                depth: DepthImage {
                    width: out.width,
                    height: out.height,
                    data: out.depth,
                },
                mask: GrayImage::from_mask(out.width, out.height, &mask),
            }
        })
        .collect()
}

fn depth_range(targets: &[FrameTargets]) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for d in targets.iter().flat_map(|f| &f.depth.data) {
        lo = lo.min(*d as f64);
        hi = hi.max(*d as f64);
    }
    if !(lo.is_finite() && lo > 0.0) {
        lo = 0.1;
    }
    if !(hi > lo) {
        hi = lo + 1.0;
    }
    (lo, hi)
}

/// Latent of every `(view, timestep)`: box-averaged rgb, box-averaged depth
/// normalized over the scene's depth range, max-pooled mask.
pub fn encode_latent(scene: &SyntheticScene, downsample: usize) -> Result<MultiModalLatent, SynthError> {
    let s = &scene.spec;
    if downsample == 0 || !s.width.is_multiple_of(downsample) || !s.height.is_multiple_of(downsample) {
        return Err(SynthError::Spec(format!(
            "downsample {downsample} does not divide {}x{}",
            s.width, s.height
        )));
    }
    let (h, w) = (s.height / downsample, s.width / downsample);
    let mut lat = MultiModalLatent::zeros(s.views, s.timesteps, h, w, scene.depth_range);
    let area = (downsample * downsample) as f64;
    for v in 0..s.views {
        for t in 0..s.timesteps {
            let tg = scene.target(v, t);
            let mut frame = vec![0.0; lat.frame_len()];
            for y in 0..h {
                for x in 0..w {
                    let mut acc = [0.0; 4];
                    let mut mask = false;
                    for yy in y * downsample..(y + 1) * downsample {
                        for xx in x * downsample..(x + 1) * downsample {
                            let i = yy * s.width + xx;
                            for c in 0..3 {
                                acc[c] += tg.rgb.data[3 * i + c] as f64 / 255.0;
                            }
                            acc[3] += tg.depth.data[i] as f64;
                            mask |= tg.mask.data[i] >= 128;
                        }
                    }
                    let o = (y * w + x) * LATENT_CHANNELS;
                    for c in 0..3 {
                        frame[o + c] = acc[c] / area;
                    }
                    frame[o + 3] = lat.normalize_depth(acc[3] / area).clamp(-1.0, 1.0);
                    frame[o + 4] = if mask { 1.0 } else { 0.0 };
                }
            }
            lat.frame_mut(v, t).copy_from_slice(&frame);
        }
    }
    Ok(lat)
}

/// Pixel-aligned frames built straight from the stored targets: one
/// isotropic splat per pixel at its true depth, flagged dynamic by the mask.
/// Expressed in the ego frame of each timestep, like decoder output.
pub fn teacher_frames(scene: &SyntheticScene) -> Vec<GaussianFrame> {
    let (nv, nt) = (scene.spec.views, scene.spec.timesteps);
    let mut frames = Vec::with_capacity(nv * nt);
    for v in 0..nv {
        let cam = &scene.rig.cameras[v];
        let intr = &cam.intrinsics;
        for t in 0..nt {
            let tg = scene.target(v, t);
            let mut gaussians = Vec::with_capacity(intr.pixel_count());
            let mut dynamic_flags = Vec::with_capacity(intr.pixel_count());
            for py in 0..intr.height {
                for px in 0..intr.width {
                    let i = py * intr.width + px;
                    let d = tg.depth.data[i] as f64;
                    let dir = pixel_ray(intr, &cam.extrinsics, px as f64, py as f64);
                    let c = |k: usize| tg.rgb.data[3 * i + k] as f64 / 255.0;
                    gaussians.push(Gaussian3D::isotropic(
                        cam.extrinsics.translation + dir * d,
                        0.6 * d / intr.fx,
                        0.95,
                        Vec3::new(c(0), c(1), c(2)),
                    ));
                    dynamic_flags.push(tg.mask.data[i] >= 128);
                }
            }
            frames.push(GaussianFrame {
                id: FrameId { timestep: t, view: v },
                gaussians,
                dynamic_flags,
            });
        }
    }
    frames
}

/// Pixels of a view rendered at timestep `t` whose ground-truth surface point
/// some training camera also sees: static pixels may be seen from any
/// timestep, dynamic ones only from `t`. A training camera sees the point
/// when it projects inside the image and the stored depth at that pixel
/// agrees with its distance within `rel_tol`.
pub fn covisible_pixels(
    scene: &SyntheticScene,
    t: usize,
    intr: &Intrinsics,
    pose: &PoseSE3,
    depth: &[f32],
    mask: &[bool],
    rel_tol: f64,
) -> Vec<bool> {
    let (nv, nt) = (scene.spec.views, scene.spec.timesteps);
    (0..intr.pixel_count())
        .map(|i| {
            let (px, py) = ((i % intr.width) as f64, (i / intr.width) as f64);
            let p = pose.translation + pixel_ray(intr, pose, px, py) * depth[i] as f64;
            let times: Vec<usize> = if mask[i] { vec![t] } else { (0..nt).collect() };
            times.iter().any(|&tt| {
                (0..nv).any(|v| {
                    let cam = &scene.rig.cameras[v];
                    let cpose = scene.camera_pose(&scene.trajectory, v, tt);
                    let Some((uv, _)) = project_point(&p, &cam.intrinsics, &cpose).visible() else {
                        return false;
                    };
                    let (u, w) = (uv.x.floor(), uv.y.floor());
                    let ci = &cam.intrinsics;
                    if u < 0.0 || w < 0.0 || u >= ci.width as f64 || w >= ci.height as f64 {
                        return false;
                    }
                    let stored = scene.target(v, tt).depth.data[w as usize * ci.width + u as usize] as f64;
                    let dist = (p - cpose.translation).norm();
                    (stored - dist).abs() <= rel_tol * dist
                })
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaussians::aggregate_4d;
    use crate::raster::render_reference;

    fn small(seed: u64) -> SceneSpec {
        SceneSpec {
            seed,
            height: 16,
            width: 16,
            timesteps: 3,
            n_static: 400,
            ..Default::default()
        }
    }

    #[test]
    fn rig_looks_forward() {
        let rig = default_rig(1, 16, 16).unwrap();
        let c = &rig.cameras[0];
        let ray = pixel_ray(&c.intrinsics, &c.extrinsics, 7.5, 7.5);
        assert!((ray - Vec3::x()).norm() < 1e-12, "{ray:?}");
        let right = pixel_ray(&c.intrinsics, &c.extrinsics, 15.0, 7.5);
        assert!(right.y < 0.0);
        let two = default_rig(2, 16, 16).unwrap();
        let left = two.cameras[0].extrinsics.rotate(&Vec3::z());
        assert!(left.y > 0.0 && (left.y.atan2(left.x) - 25f64.to_radians()).abs() < 1e-12);
    }

    #[test]
    fn targets_are_self_consistent() {
        let scene = generate_scene(&small(3)).unwrap();
        for v in 0..scene.spec.views {
            for t in 0..scene.spec.timesteps {
                let cam = &scene.rig.cameras[v];
                let pose = scene.camera_pose(&scene.trajectory, v, t);
                let out = render_reference(&scene.gaussians[t].gaussians, &cam.intrinsics, &pose, &scene.background);
                let tg = scene.target(v, t);
                assert_eq!(RgbImage::from_f32(16, 16, &out.rgb), tg.rgb);
                assert_eq!(out.depth, tg.depth.data);
            }
        }
    }

    #[test]
    fn seed_determinism_and_variation() {
        let a = generate_scene(&small(5)).unwrap();
        let b = generate_scene(&small(5)).unwrap();
        let c = generate_scene(&small(6)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.gaussians, c.gaussians);
    }

    #[test]
    fn no_vehicles_means_static_world() {
        let scene = generate_scene(&SceneSpec {
            n_dynamic: 0,
            ..small(2)
        })
        .unwrap();
        assert!(scene.targets.iter().all(|f| f.mask.data.iter().all(|&m| m == 0)));
        let s4 = aggregate_4d(&teacher_frames(&scene), &scene.trajectory).unwrap();
        for t in 1..s4.len() {
            assert_eq!(s4.at(t), s4.at(0));
        }
    }

    #[test]
    fn vehicles_show_up_in_masks_and_boxes() {
        let scene = generate_scene(&SceneSpec {
            n_dynamic: 3,
            ..small(9)
        })
        .unwrap();
        assert_eq!(scene.vehicle_sizes.len(), 3);
        let any_mask = scene.targets.iter().any(|f| f.mask.data.iter().any(|&m| m > 0));
        assert!(any_mask);
        let statics = scene.static_count();
        for t in 0..scene.spec.timesteps {
            let set = &scene.gaussians[t];
            let mut start = statics;
            for (k, &n) in scene.vehicle_sizes.iter().enumerate() {
                let b = &scene.conditions.boxes[t][k];
                let inside = set.gaussians[start..start + n].iter().filter(|g| b.contains(&g.mu)).count();
                assert!(inside as f64 >= 0.99 * n as f64, "vehicle {k} at {t}: {inside}/{n}");
                start += n;
            }
        }
    }

    #[test]
    fn empty_scene_is_valid() {
        let scene = generate_scene(&SceneSpec {
            n_static: 0,
            n_dynamic: 0,
            ..small(1)
        })
        .unwrap();
        assert!(scene.gaussians.iter().all(|s| s.gaussians.is_empty()));
        let bg = RgbImage::from_f32(1, 1, scene.background.map(|c| c as f32).as_slice());
        assert_eq!(&scene.targets[0].rgb.data[..3], &bg.data[..]);
    }

    #[test]
    fn latent_at_full_resolution_matches_targets() {
        let scene = generate_scene(&small(4)).unwrap();
        let lat = encode_latent(&scene, 1).unwrap();
        let tg = scene.target(1, 2);
        for i in 0..16 * 16 {
            let (y, x) = (i / 16, i % 16);
            assert_eq!(lat.at(1, 2, y, x, 0), tg.rgb.data[3 * i] as f64 / 255.0);
            let d = tg.depth.data[i] as f64;
            assert!((lat.denormalize_depth(lat.at(1, 2, y, x, 3)) - d).abs() < 1e-6 * d.max(1.0));
            assert_eq!(lat.at(1, 2, y, x, 4) > 0.5, tg.mask.data[i] >= 128);
        }
        assert!(encode_latent(&scene, 3).is_err());
    }

    #[test]
    fn symmetric_scene_mirrors() {
        let scene = generate_scene(&SceneSpec {
            symmetric: true,
            n_dynamic: 2,
            ..small(8)
        })
        .unwrap();
        let mirror = |p: &Vec3| Vec3::new(p.x, -p.y, p.z);
        let set = &scene.gaussians[0];
        for g in &set.gaussians {
            let m = mirror(&g.mu);
            assert!(
                set.gaussians.iter().any(|h| (h.mu - m).norm() < 1e-4 && (h.color - g.color).norm() < 1e-6),
                "no mirror for {:?}",
                g.mu
            );
        }
    }

    #[test]
    fn covisibility_of_training_view_is_total() {
        let scene = generate_scene(&small(11)).unwrap();
        let cam = &scene.rig.cameras[0];
        let pose = scene.camera_pose(&scene.trajectory, 0, 1);
        let tg = scene.target(0, 1);
        let vis = covisible_pixels(&scene, 1, &cam.intrinsics, &pose, &tg.depth.data, &tg.mask.to_mask(), 1e-4);
        assert!(vis.iter().all(|&v| v));
    }
}
