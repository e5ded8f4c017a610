//! Gaussian splatting: EWA projection, a tile-binned renderer, a brute-force
//! reference renderer and a differentiable compositing path.
//!
//! Both renderers share [`project_gaussian`] and the per-pixel compositing
//! loop; they differ only in which splats each pixel visits and in whether
//! the skip and early-out thresholds are applied.

mod diff;
mod image;

pub use diff::{quat_to_matrix_backward, render_backward, render_forward, DiffRender};
pub use image::{
    decode_dpth, decode_pgm, decode_ppm, encode_dpth, encode_pgm, encode_ppm, read_dpth, read_pgm,
    read_ppm, write_dpth, write_pgm, write_ppm, DepthImage, GrayImage, RgbImage,
};

use nalgebra::{Matrix2, Matrix2x3, Vector2};
use rayon::prelude::*;

use crate::gaussians::Gaussian3D;
use crate::geometry::{quat_to_matrix, Intrinsics, PoseSE3, Vec3};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RasterConfig {
    pub tile_size: usize,
    /// Contributions with `alpha' < skip_alpha` are ignored. `None` disables.
    pub skip_alpha: Option<f64>,
    /// Stop compositing a pixel once transmittance drops below this.
    pub early_out: Option<f64>,
    /// Low-pass term added to the diagonal of every 2D covariance (px²).
    pub dilation: f64,
    pub near: f64,
    pub alpha_max: f64,
}

/// Contributions fainter than this are dropped even with the skip threshold
/// off. Binning uses the same cutoff, so tiling never changes the result.
const ALPHA_FLOOR: f64 = 1e-12;

impl Default for RasterConfig {
    fn default() -> Self {
        Self {
            tile_size: 16,
            skip_alpha: Some(1.0 / 255.0),
            early_out: Some(1e-4),
            dilation: 0.3,
            near: 0.01,
            alpha_max: 0.99,
        }
    }
}

impl RasterConfig {
    /// Thresholds off: every splat is composited to the end.
    pub fn exact() -> Self {
        Self {
            skip_alpha: None,
            early_out: None,
            ..Self::default()
        }
    }

    pub fn with_tile_size(self, tile_size: usize) -> Self {
        Self { tile_size, ..self }
    }
}

/// A Gaussian projected into one camera.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplatProjection {
    pub mean2d: Vector2<f64>,
    pub cov2d: Matrix2<f64>,
    /// Inverse covariance `(a, b, c)` for `[[a, b], [b, c]]`.
    pub conic: [f64; 3],
    /// Camera-frame depth, used for ordering.
    pub z: f64,
    /// Distance from the camera center, used for the depth output.
    pub ray_depth: f64,
    pub color: Vec3,
    pub opacity: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Projected {
    Splat(SplatProjection),
    Culled,
    Singular,
}

/// Intermediates of the projection that the backward pass reuses.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ProjectionTerms {
    pub p_cam: Vec3,
    pub jw: Matrix2x3<f64>,
    /// `x/z` and `y/z` as used in the Jacobian, and whether the guard band
    /// clamped them.
    pub ratio: [f64; 2],
    pub clamped: [bool; 2],
}

/// The Jacobian is evaluated no further than this multiple of the image
/// half-extent outside the frustum, so splats beside the camera plane do not
/// explode.
const GUARD_BAND: f64 = 1.3;

fn guarded_ratio(v: f64, z: f64, focal: f64, principal: f64, extent: usize) -> (f64, bool) {
    let lo = -GUARD_BAND * principal / focal;
    let hi = GUARD_BAND * (extent as f64 - principal) / focal;
    let r = v / z;
    if r < lo {
        (lo, true)
    } else if r > hi {
        (hi, true)
    } else {
        (r, false)
    }
}

pub(crate) fn project_with_terms(
    g: &Gaussian3D,
    intr: &Intrinsics,
    pose: &PoseSE3,
    cfg: &RasterConfig,
) -> (Projected, Option<ProjectionTerms>) {
    let w = quat_to_matrix(&pose.rotation).transpose();
    let p = w * (g.mu - pose.translation);
    if !(p.z > cfg.near) {
        return (Projected::Culled, None);
    }
    let (x, y, z) = (p.x, p.y, p.z);
    let (jx, clamp_x) = guarded_ratio(x, z, intr.fx, intr.cx, intr.width);
    let (jy, clamp_y) = guarded_ratio(y, z, intr.fy, intr.cy, intr.height);
    let j = Matrix2x3::new(intr.fx / z, 0.0, -intr.fx * jx / z, 0.0, intr.fy / z, -intr.fy * jy / z);
    let jw = j * w;
    let cov3 = g.covariance();
    let mut cov2d = jw * cov3 * jw.transpose();
    cov2d[(0, 0)] += cfg.dilation;
    cov2d[(1, 1)] += cfg.dilation;
    let mean2d = Vector2::new(intr.fx * x / z + intr.cx, intr.fy * y / z + intr.cy);

    let (a, b, c) = (cov2d[(0, 0)], cov2d[(0, 1)], cov2d[(1, 1)]);
    let det = a * c - b * b;
    if !(det > 0.0) || !det.is_finite() || !mean2d.iter().all(|v| v.is_finite()) {
        return (Projected::Singular, None);
    }
    let (rx, ry) = (3.0 * a.sqrt(), 3.0 * c.sqrt());
    let (wd, ht) = (intr.width as f64, intr.height as f64);
    if mean2d.x + rx < 0.0 || mean2d.x - rx > wd || mean2d.y + ry < 0.0 || mean2d.y - ry > ht {
        return (Projected::Culled, None);
    }
    let splat = SplatProjection {
        mean2d,
        cov2d,
        conic: [c / det, -b / det, a / det],
        z,
        ray_depth: p.norm(),
        color: g.color,
        opacity: g.opacity,
    };
    (
        Projected::Splat(splat),
        Some(ProjectionTerms {
            p_cam: p,
            jw,
            ratio: [jx, jy],
            clamped: [clamp_x, clamp_y],
        }),
    )
}

/// EWA projection with the default dilation and near plane. Culled when the
/// mean is within 1 cm of the camera plane or its 3σ box misses the image.
/// For means far outside the frustum the Jacobian is taken at the nearest
/// point of a guard band 1.3× the image extent.
pub fn project_gaussian(g: &Gaussian3D, intr: &Intrinsics, pose: &PoseSE3) -> Projected {
    project_with_terms(g, intr, pose, &RasterConfig::default()).0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct RenderStats {
    pub culled: usize,
    pub singular: usize,
}

/// Rendered buffers, row-major. `rgb` is interleaved.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderOutput {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<f32>,
    pub depth: Vec<f32>,
    pub alpha: Vec<f32>,
    pub stats: RenderStats,
}

impl RenderOutput {
    pub fn rgb_at(&self, u: usize, v: usize) -> [f32; 3] {
        let i = 3 * (v * self.width + u);
        [self.rgb[i], self.rgb[i + 1], self.rgb[i + 2]]
    }

    pub fn max_abs_diff(&self, other: &RenderOutput) -> f64 {
        let channel = |a: &[f32], b: &[f32]| {
            a.iter()
                .zip(b)
                .map(|(x, y)| (*x as f64 - *y as f64).abs())
                .fold(0.0, f64::max)
        };
        channel(&self.rgb, &other.rgb)
            .max(channel(&self.alpha, &other.alpha))
            .max(channel(&self.depth, &other.depth))
    }
}

/// Projected splats in global front-to-back order.
pub(crate) struct SortedSplats {
    pub splats: Vec<SplatProjection>,
    /// Index into the input Gaussian list for each sorted splat.
    pub source: Vec<usize>,
    pub terms: Vec<ProjectionTerms>,
    pub stats: RenderStats,
}

pub(crate) fn project_and_sort(
    gaussians: &[Gaussian3D],
    intr: &Intrinsics,
    pose: &PoseSE3,
    cfg: &RasterConfig,
) -> SortedSplats {
    let mut stats = RenderStats::default();
    let mut visible = Vec::with_capacity(gaussians.len());
    for (i, g) in gaussians.iter().enumerate() {
        match project_with_terms(g, intr, pose, cfg) {
            (Projected::Splat(s), Some(t)) => visible.push((i, s, t)),
            (Projected::Singular, _) => stats.singular += 1,
            _ => stats.culled += 1,
        }
    }
    // Stable on ties: equal depths keep insertion order.
    visible.sort_by(|a, b| a.1.z.total_cmp(&b.1.z).then(a.0.cmp(&b.0)));
    SortedSplats {
        source: visible.iter().map(|v| v.0).collect(),
        splats: visible.iter().map(|v| v.1).collect(),
        terms: visible.iter().map(|v| v.2).collect(),
        stats,
    }
}

/// Per-pixel compositing state.
#[derive(Debug, Clone, Copy)]
pub(crate) struct PixelAccum {
    pub rgb: [f64; 3],
    pub depth_sum: f64,
    pub transmittance: f64,
    /// Sorted index and weight of the largest single contribution.
    pub top: Option<(usize, f64)>,
}

#[inline]
pub(crate) fn splat_alpha(s: &SplatProjection, px: f64, py: f64, alpha_max: f64) -> f64 {
    let dx = px - s.mean2d.x;
    let dy = py - s.mean2d.y;
    let [a, b, c] = s.conic;
    let power = -0.5 * (a * dx * dx + 2.0 * b * dx * dy + c * dy * dy);
    if power > 0.0 {
        return 0.0;
    }
    (s.opacity * power.exp()).min(alpha_max)
}

/// Front-to-back compositing of the splats named by `order` at pixel center
/// `(px, py)`. `visit` sees each accepted `(sorted index, alpha')`.
#[inline]
pub(crate) fn composite_pixel(
    splats: &[SplatProjection],
    order: impl Iterator<Item = usize>,
    px: f64,
    py: f64,
    cfg: &RasterConfig,
    mut visit: impl FnMut(usize, f64),
) -> PixelAccum {
    let mut acc = PixelAccum {
        rgb: [0.0; 3],
        depth_sum: 0.0,
        transmittance: 1.0,
        top: None,
    };
    for k in order {
        let s = &splats[k];
        let alpha = splat_alpha(s, px, py, cfg.alpha_max);
        if alpha < cfg.skip_alpha.unwrap_or(ALPHA_FLOOR) {
            continue;
        }
        let w = alpha * acc.transmittance;
        for c in 0..3 {
            acc.rgb[c] += s.color[c] * w;
        }
        acc.depth_sum += s.ray_depth * w;
        if acc.top.map_or(w > 0.0, |(_, best)| w > best) {
            acc.top = Some((k, w));
        }
        visit(k, alpha);
        acc.transmittance *= 1.0 - alpha;
        if let Some(min_t) = cfg.early_out {
            if acc.transmittance < min_t {
                break;
            }
        }
    }
    acc
}

pub(crate) struct PixelValue {
    pub rgb: [f64; 3],
    pub depth: f64,
    pub alpha: f64,
}

pub(crate) fn finish_pixel(acc: &PixelAccum, background: &Vec3) -> PixelValue {
    let alpha = 1.0 - acc.transmittance;
    PixelValue {
        rgb: [
            acc.rgb[0] + acc.transmittance * background.x,
            acc.rgb[1] + acc.transmittance * background.y,
            acc.rgb[2] + acc.transmittance * background.z,
        ],
        depth: acc.depth_sum / alpha.max(1e-6),
        alpha,
    }
}

/// Tile lists: for every tile, the sorted indices of splats whose alpha can
/// reach the binning cutoff somewhere inside the tile.
pub(crate) fn bin_tiles(
    splats: &[SplatProjection],
    width: usize,
    height: usize,
    cfg: &RasterConfig,
) -> (usize, usize, Vec<Vec<u32>>) {
    let ts = cfg.tile_size.max(1);
    let tiles_x = width.div_ceil(ts);
    let tiles_y = height.div_ceil(ts);
    let mut bins = vec![Vec::new(); tiles_x * tiles_y];
    let floor = cfg.skip_alpha.unwrap_or(ALPHA_FLOOR);
    for (k, s) in splats.iter().enumerate() {
        if !(s.opacity >= floor) {
            continue;
        }
        // Pixels beyond Mahalanobis radius m have opacity·exp(-m²/2) < floor.
        let m2 = 2.0 * (s.opacity / floor).ln();
        let rx = (m2 * s.cov2d[(0, 0)]).sqrt();
        let ry = (m2 * s.cov2d[(1, 1)]).sqrt();
        // Pixel centers sit at u + 0.5.
        let u0 = (s.mean2d.x - rx - 0.5).ceil().max(0.0);
        let u1 = (s.mean2d.x + rx - 0.5).floor().min(width as f64 - 1.0);
        let v0 = (s.mean2d.y - ry - 0.5).ceil().max(0.0);
        let v1 = (s.mean2d.y + ry - 0.5).floor().min(height as f64 - 1.0);
        if u0 > u1 || v0 > v1 {
            continue;
        }
        let (tx0, tx1) = (u0 as usize / ts, u1 as usize / ts);
        let (ty0, ty1) = (v0 as usize / ts, v1 as usize / ts);
        for ty in ty0..=ty1 {
            for tx in tx0..=tx1 {
                bins[ty * tiles_x + tx].push(k as u32);
            }
        }
    }
    (tiles_x, tiles_y, bins)
}

struct TileResult {
    u0: usize,
    v0: usize,
    w: usize,
    pixels: Vec<PixelValue>,
}

/// Tile-binned renderer. Tiles are rendered in parallel; each owns disjoint
/// pixels, so the result does not depend on the worker count.
pub fn render_with(
    gaussians: &[Gaussian3D],
    intr: &Intrinsics,
    pose: &PoseSE3,
    background: &Vec3,
    cfg: &RasterConfig,
) -> RenderOutput {
    let sorted = project_and_sort(gaussians, intr, pose, cfg);
    let (width, height) = (intr.width, intr.height);
    let (tiles_x, tiles_y, bins) = bin_tiles(&sorted.splats, width, height, cfg);
    let ts = cfg.tile_size.max(1);
    let results: Vec<TileResult> = (0..tiles_x * tiles_y)
        .into_par_iter()
        .map(|tile| {
            let (tx, ty) = (tile % tiles_x, tile / tiles_x);
            let (u0, v0) = (tx * ts, ty * ts);
            let (u1, v1) = ((u0 + ts).min(width), (v0 + ts).min(height));
            let list = &bins[tile];
            let mut pixels = Vec::with_capacity((u1 - u0) * (v1 - v0));
            for v in v0..v1 {
                for u in u0..u1 {
                    let acc = composite_pixel(
                        &sorted.splats,
                        list.iter().map(|&k| k as usize),
                        u as f64 + 0.5,
                        v as f64 + 0.5,
                        cfg,
                        |_, _| {},
                    );
                    pixels.push(finish_pixel(&acc, background));
                }
            }
            TileResult {
                u0,
                v0,
                w: u1 - u0,
                pixels,
            }
        })
        .collect();
    let mut out = blank_output(width, height, sorted.stats);
    for tile in results {
        for (j, p) in tile.pixels.iter().enumerate() {
            let (u, v) = (tile.u0 + j % tile.w, tile.v0 + j / tile.w);
            store_pixel(&mut out, v * width + u, p);
        }
    }
    out
}

/// Tiled render with the default configuration (16-pixel tiles, thresholds
/// on).
pub fn render(
    gaussians: &[Gaussian3D],
    intr: &Intrinsics,
    pose: &PoseSE3,
    background: &Vec3,
) -> RenderOutput {
    render_with(gaussians, intr, pose, background, &RasterConfig::default())
}

fn blank_output(width: usize, height: usize, stats: RenderStats) -> RenderOutput {
    RenderOutput {
        width,
        height,
        rgb: vec![0.0; 3 * width * height],
        depth: vec![0.0; width * height],
        alpha: vec![0.0; width * height],
        stats,
    }
}

fn store_pixel(out: &mut RenderOutput, i: usize, p: &PixelValue) {
    for c in 0..3 {
        out.rgb[3 * i + c] = p.rgb[c] as f32;
    }
    out.depth[i] = p.depth as f32;
    out.alpha[i] = p.alpha as f32;
}

/// Reference render plus, per pixel, the input index of the Gaussian with
/// the largest compositing weight.
pub fn render_reference_with_ids(
    gaussians: &[Gaussian3D],
    intr: &Intrinsics,
    pose: &PoseSE3,
    background: &Vec3,
) -> (RenderOutput, Vec<Option<usize>>) {
    let cfg = RasterConfig::exact();
    let sorted = project_and_sort(gaussians, intr, pose, &cfg);
    let (width, height) = (intr.width, intr.height);
    let mut out = blank_output(width, height, sorted.stats);
    let mut top = vec![None; width * height];
    for v in 0..height {
        for u in 0..width {
            let acc = composite_pixel(
                &sorted.splats,
                0..sorted.splats.len(),
                u as f64 + 0.5,
                v as f64 + 0.5,
                &cfg,
                |_, _| {},
            );
            let i = v * width + u;
            store_pixel(&mut out, i, &finish_pixel(&acc, background));
            top[i] = acc.top.map(|(k, _)| sorted.source[k]);
        }
    }
    (out, top)
}

/// Brute force: every pixel visits every splat in sorted order with no
/// tiling, no skip threshold and no early-out.
pub fn render_reference(
    gaussians: &[Gaussian3D],
    intr: &Intrinsics,
    pose: &PoseSE3,
    background: &Vec3,
) -> RenderOutput {
    render_reference_with_ids(gaussians, intr, pose, background).0
}
