//! Differentiable compositing. The forward pass records, per pixel, the
//! splats that contributed and their `alpha'`; the backward pass replays the
//! compositing recursion in reverse and chains through the EWA projection to
//! the 3D Gaussian parameters. The depth-sort permutation is held constant.

use nalgebra::{Matrix2, Matrix3, UnitQuaternion};
use rayon::prelude::*;

use super::{
    bin_tiles, composite_pixel, finish_pixel, project_and_sort, RasterConfig,
    RenderStats, SortedSplats,
};
use crate::gaussians::{Gaussian3D, GaussianGrad};
use crate::geometry::{quat_to_matrix, Intrinsics, PoseSE3, Vec3};

/// Forward state kept for [`render_backward`]. Buffers are `f64`.
pub struct DiffRender {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<f64>,
    pub depth: Vec<f64>,
    pub alpha: Vec<f64>,
    pub stats: RenderStats,
    sorted: SortedSplats,
    /// Per pixel: `(sorted splat index, alpha')` in compositing order.
    contrib: Vec<Vec<(u32, f64)>>,
    background: Vec3,
    fx: f64,
    fy: f64,
    cam_rot: Matrix3<f64>,
    alpha_max: f64,
    tile_size: usize,
}

pub fn render_forward(
    gaussians: &[Gaussian3D],
    intr: &Intrinsics,
    pose: &PoseSE3,
    background: &Vec3,
    cfg: &RasterConfig,
) -> DiffRender {
    let sorted = project_and_sort(gaussians, intr, pose, cfg);
    let (width, height) = (intr.width, intr.height);
    let (tiles_x, tiles_y, bins) = bin_tiles(&sorted.splats, width, height, cfg);
    let ts = cfg.tile_size.max(1);
    let tiles: Vec<Vec<(usize, [f64; 5], Vec<(u32, f64)>)>> = (0..tiles_x * tiles_y)
        .into_par_iter()
        .map(|tile| {
            let (tx, ty) = (tile % tiles_x, tile / tiles_x);
            let (u0, v0) = (tx * ts, ty * ts);
            let mut out = Vec::new();
            for v in v0..(v0 + ts).min(height) {
                for u in u0..(u0 + ts).min(width) {
                    let mut list = Vec::new();
                    let acc = composite_pixel(
                        &sorted.splats,
                        bins[tile].iter().map(|&k| k as usize),
                        u as f64 + 0.5,
                        v as f64 + 0.5,
                        cfg,
                        |k, a| list.push((k as u32, a)),
                    );
                    let p = finish_pixel(&acc, background);
                    out.push((v * width + u, [p.rgb[0], p.rgb[1], p.rgb[2], p.depth, p.alpha], list));
                }
            }
            out
        })
        .collect();
    let n = width * height;
    let mut state = DiffRender {
        width,
        height,
        rgb: vec![0.0; 3 * n],
        depth: vec![0.0; n],
        alpha: vec![0.0; n],
        stats: sorted.stats,
        contrib: vec![Vec::new(); n],
        sorted,
        background: *background,
        fx: intr.fx,
        fy: intr.fy,
        cam_rot: quat_to_matrix(&pose.rotation),
        alpha_max: cfg.alpha_max,
        tile_size: ts,
    };
    for (i, vals, list) in tiles.into_iter().flatten() {
        state.rgb[3 * i..3 * i + 3].copy_from_slice(&vals[..3]);
        state.depth[i] = vals[3];
        state.alpha[i] = vals[4];
        state.contrib[i] = list;
    }
    state
}

/// Gradient with respect to one projected splat.
#[derive(Debug, Clone, Copy, Default)]
struct SplatGrad {
    mean: [f64; 2],
    conic: [f64; 3],
    opacity: f64,
    color: [f64; 3],
    ray_depth: f64,
}

impl SplatGrad {
    fn add(&mut self, o: &SplatGrad) {
        for i in 0..2 {
            self.mean[i] += o.mean[i];
        }
        for i in 0..3 {
            self.conic[i] += o.conic[i];
            self.color[i] += o.color[i];
        }
        self.opacity += o.opacity;
        self.ray_depth += o.ray_depth;
    }
}

impl DiffRender {
    fn pixel_backward(&self, i: usize, g_rgb: [f64; 3], g_depth: f64, g_alpha: f64, acc: &mut [SplatGrad]) {
        let list = &self.contrib[i];
        if list.is_empty() {
            return;
        }
        let splats = &self.sorted.splats;
        let mut trans = Vec::with_capacity(list.len());
        let mut t = 1.0;
        let mut depth_sum = 0.0;
        for &(k, a) in list {
            trans.push(t);
            depth_sum += splats[k as usize].ray_depth * a * t;
            t *= 1.0 - a;
        }
        let t_final = t;
        let alpha = 1.0 - t_final;
        let denom = alpha.max(1e-6);
        let g_dsum = g_depth / denom;
        let g_a = if alpha > 1e-6 {
            g_alpha - g_depth * depth_sum / (alpha * alpha)
        } else {
            g_alpha
        };

        let (u, v) = ((i % self.width) as f64 + 0.5, (i / self.width) as f64 + 0.5);
        let bg = self.background;
        let mut s_rgb = [t_final * bg.x, t_final * bg.y, t_final * bg.z];
        let mut s_depth = 0.0;
        for (j, &(k, a)) in list.iter().enumerate().rev() {
            let k = k as usize;
            let s = &splats[k];
            let ti = trans[j];
            let w = a * ti;
            let inv = 1.0 / (1.0 - a);
            let mut g = g_dsum * (ti * s.ray_depth - s_depth * inv) + g_a * t_final * inv;
            for c in 0..3 {
                g += g_rgb[c] * (ti * s.color[c] - s_rgb[c] * inv);
                acc[k].color[c] += g_rgb[c] * w;
                s_rgb[c] += s.color[c] * w;
            }
            acc[k].ray_depth += g_dsum * w;
            s_depth += s.ray_depth * w;

            let dx = u - s.mean2d.x;
            let dy = v - s.mean2d.y;
            let [ca, cb, cc] = s.conic;
            let power = -0.5 * (ca * dx * dx + 2.0 * cb * dx * dy + cc * dy * dy);
            let gauss = power.exp();
            if s.opacity * gauss >= self.alpha_max {
                continue;
            }
            acc[k].opacity += g * gauss;
            let gp = g * a;
            acc[k].mean[0] += gp * (ca * dx + cb * dy);
            acc[k].mean[1] += gp * (cb * dx + cc * dy);
            acc[k].conic[0] += -0.5 * gp * dx * dx;
            acc[k].conic[1] += -gp * dx * dy;
            acc[k].conic[2] += -0.5 * gp * dy * dy;
        }
    }

    /// Maps a splat-space gradient onto the source Gaussian.
    fn chain_to_3d(&self, k: usize, g: &SplatGrad, gaussian: &Gaussian3D) -> GaussianGrad {
        let s = &self.sorted.splats[k];
        let terms = &self.sorted.terms[k];
        // conic = inverse(cov2d)
        let (a, b, c) = (s.cov2d[(0, 0)], s.cov2d[(0, 1)], s.cov2d[(1, 1)]);
        let det = a * c - b * b;
        let d2 = det * det;
        let [ga, gb, gc] = g.conic;
        let g_a = ga * (-c * c / d2) + gb * (b * c / d2) + gc * (-b * b / d2);
        let g_b = ga * (2.0 * b * c / d2) + gb * (-1.0 / det - 2.0 * b * b / d2) + gc * (2.0 * a * b / d2);
        let g_c = ga * (-b * b / d2) + gb * (a * b / d2) + gc * (-a * a / d2);
        let g_cov = Matrix2::new(g_a, 0.5 * g_b, 0.5 * g_b, g_c);

        let jw = terms.jw;
        let sigma = gaussian.covariance();
        let g_sigma = jw.transpose() * g_cov * jw;
        let g_jw = 2.0 * g_cov * jw * sigma;
        // jw = J W with W = R_cᵀ, so dL/dJ = dL/d(jw) · R_c.
        let g_j = g_jw * self.cam_rot;

        let p = terms.p_cam;
        let z = p.z;
        let (fx, fy) = (self.fx, self.fy);
        let z2 = z * z;
        let [rx, ry] = terms.ratio;
        // J = [[fx/z, 0, −fx·rx/z], [0, fy/z, −fy·ry/z]] with r = x/z unless
        // clamped, in which case r is a constant.
        let (dx_j02, dz_j02) = if terms.clamped[0] { (0.0, fx * rx / z2) } else { (-fx / z2, 2.0 * fx * rx / z2) };
        let (dy_j12, dz_j12) = if terms.clamped[1] { (0.0, fy * ry / z2) } else { (-fy / z2, 2.0 * fy * ry / z2) };
        let mut g_p = Vec3::new(
            g_j[(0, 2)] * dx_j02 + g.mean[0] * fx / z,
            g_j[(1, 2)] * dy_j12 + g.mean[1] * fy / z,
            g_j[(0, 0)] * (-fx / z2)
                + g_j[(0, 2)] * dz_j02
                + g_j[(1, 1)] * (-fy / z2)
                + g_j[(1, 2)] * dz_j12
                + g.mean[0] * (-fx * p.x / z2)
                + g.mean[1] * (-fy * p.y / z2),
        );
        g_p += p * (g.ray_depth / p.norm());

        // Sigma = M Mᵀ with M = R S.
        let r = quat_to_matrix(&gaussian.rot);
        let m = r * Matrix3::from_diagonal(&gaussian.scale);
        let g_m = 2.0 * g_sigma * m;
        let mut g_scale = Vec3::zeros();
        let mut g_r = Matrix3::zeros();
        for row in 0..3 {
            for col in 0..3 {
                g_scale[col] += g_m[(row, col)] * r[(row, col)];
                g_r[(row, col)] = g_m[(row, col)] * gaussian.scale[col];
            }
        }
        GaussianGrad {
            mu: self.cam_rot * g_p,
            rot: quat_to_matrix_backward(&gaussian.rot, &g_r),
            scale: g_scale,
            opacity: g.opacity,
            color: Vec3::new(g.color[0], g.color[1], g.color[2]),
        }
    }
}

/// Gradient of the polynomial in [`quat_to_matrix`] with respect to the raw
/// `(w, x, y, z)` components.
pub fn quat_to_matrix_backward(q: &UnitQuaternion<f64>, g: &Matrix3<f64>) -> [f64; 4] {
    let q = q.quaternion();
    let (w, x, y, z) = (q.w, q.i, q.j, q.k);
    let r = |i: usize, j: usize| g[(i, j)];
    let gw = 2.0
        * (-z * r(0, 1) + y * r(0, 2) + z * r(1, 0) - x * r(1, 2) - y * r(2, 0) + x * r(2, 1));
    let gx = 2.0 * (y * r(0, 1) + z * r(0, 2) + y * r(1, 0) - w * r(1, 2) + z * r(2, 0) + w * r(2, 1))
        - 4.0 * x * (r(1, 1) + r(2, 2));
    let gy = 2.0 * (x * r(0, 1) + w * r(0, 2) + x * r(1, 0) + z * r(1, 2) - w * r(2, 0) + z * r(2, 1))
        - 4.0 * y * (r(0, 0) + r(2, 2));
    let gz = 2.0 * (-w * r(0, 1) + x * r(0, 2) + w * r(1, 0) + y * r(1, 2) + x * r(2, 0) + y * r(2, 1))
        - 4.0 * z * (r(0, 0) + r(1, 1));
    [gw, gx, gy, gz]
}

/// Backward of [`render_forward`]. Takes the gradient of the loss with
/// respect to the `rgb`, `depth` and `alpha` buffers and returns one
/// [`GaussianGrad`] per input Gaussian (zero for culled ones).
pub fn render_backward(
    state: &DiffRender,
    gaussians: &[Gaussian3D],
    d_rgb: &[f64],
    d_depth: &[f64],
    d_alpha: &[f64],
) -> Vec<GaussianGrad> {
    let n_splats = state.sorted.splats.len();
    let n_px = state.width * state.height;
    assert_eq!(d_rgb.len(), 3 * n_px);
    assert_eq!(d_depth.len(), n_px);
    assert_eq!(d_alpha.len(), n_px);
    // Fixed row chunks, summed in chunk order: independent of worker count.
    let rows = state.tile_size.max(1);
    let partials: Vec<Vec<SplatGrad>> = (0..state.height.div_ceil(rows))
        .into_par_iter()
        .map(|chunk| {
            let mut acc = vec![SplatGrad::default(); n_splats];
            for v in chunk * rows..((chunk + 1) * rows).min(state.height) {
                for u in 0..state.width {
                    let i = v * state.width + u;
                    let g_rgb = [d_rgb[3 * i], d_rgb[3 * i + 1], d_rgb[3 * i + 2]];
                    state.pixel_backward(i, g_rgb, d_depth[i], d_alpha[i], &mut acc);
                }
            }
            acc
        })
        .collect();
    let mut total = vec![SplatGrad::default(); n_splats];
    for part in &partials {
        for (t, p) in total.iter_mut().zip(part) {
            t.add(p);
        }
    }
    let mut out = vec![GaussianGrad::default(); gaussians.len()];
    for (k, g) in total.iter().enumerate() {
        let src = state.sorted.source[k];
        out[src] = state.chain_to_3d(k, g, &gaussians[src]);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::render_reference;
    use nalgebra::Quaternion;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn micro_scene(rng: &mut ChaCha8Rng, n: usize) -> Vec<Gaussian3D> {
        (0..n)
            .map(|_| Gaussian3D {
                mu: Vec3::new(rng.gen_range(-0.4..0.4), rng.gen_range(-0.4..0.4), rng.gen_range(2.0..4.0)),
                rot: UnitQuaternion::new_normalize(Quaternion::new(
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                )),
                scale: Vec3::new(rng.gen_range(0.1..0.3), rng.gen_range(0.1..0.3), rng.gen_range(0.1..0.3)),
                opacity: rng.gen_range(0.2..0.8),
                color: Vec3::new(rng.gen(), rng.gen(), rng.gen()),
            })
            .collect()
    }

    fn weighted(out: &DiffRender, w: &(Vec<f64>, Vec<f64>, Vec<f64>)) -> f64 {
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        dot(&out.rgb, &w.0) + dot(&out.depth, &w.1) + dot(&out.alpha, &w.2)
    }

    fn params(g: &Gaussian3D) -> [f64; 14] {
        g.to_array()
    }

    fn from_params(p: &[f64; 14]) -> Gaussian3D {
        Gaussian3D {
            mu: Vec3::new(p[0], p[1], p[2]),
            // Unnormalized on purpose: the gradient is with respect to raw components.
            rot: UnitQuaternion::new_unchecked(Quaternion::new(p[3], p[4], p[5], p[6])),
            scale: Vec3::new(p[7], p[8], p[9]),
            opacity: p[10],
            color: Vec3::new(p[11], p[12], p[13]),
        }
    }

    fn grad_array(g: &GaussianGrad) -> [f64; 14] {
        [
            g.mu.x, g.mu.y, g.mu.z, g.rot[0], g.rot[1], g.rot[2], g.rot[3], g.scale.x, g.scale.y, g.scale.z,
            g.opacity, g.color.x, g.color.y, g.color.z,
        ]
    }

    #[test]
    fn matches_reference_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let scene = micro_scene(&mut rng, 20);
        let intr = Intrinsics::new(20.0, 20.0, 8.0, 8.0, 16, 16).unwrap();
        let pose = PoseSE3::identity();
        let bg = Vec3::new(0.1, 0.2, 0.3);
        let d = render_forward(&scene, &intr, &pose, &bg, &RasterConfig::exact().with_tile_size(8));
        let r = render_reference(&scene, &intr, &pose, &bg);
        for i in 0..d.rgb.len() {
            assert!((d.rgb[i] - r.rgb[i] as f64).abs() < 1e-6);
        }
    }

    fn worst_fd_error(scene: &[Gaussian3D], rng: &mut ChaCha8Rng) -> f64 {
        let intr = Intrinsics::new(12.0, 12.0, 4.0, 4.0, 8, 8).unwrap();
        let pose = PoseSE3::new(
            UnitQuaternion::from_euler_angles(0.05, -0.03, 0.02),
            Vec3::new(0.05, -0.02, 0.1),
        );
        let bg = Vec3::new(0.3, 0.5, 0.2);
        let cfg = RasterConfig::exact().with_tile_size(4);
        let w = (
            (0..192).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<_>>(),
            (0..64).map(|_| rng.gen_range(-0.1..0.1)).collect::<Vec<_>>(),
            (0..64).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<_>>(),
        );
        let state = render_forward(scene, &intr, &pose, &bg, &cfg);
        let grads = render_backward(&state, scene, &w.0, &w.1, &w.2);
        let h = 1e-6;
        let mut worst: f64 = 0.0;
        for (gi, g) in scene.iter().enumerate() {
            let analytic = grad_array(&grads[gi]);
            for p in 0..14 {
                let eval = |delta: f64| {
                    let mut arr = params(g);
                    arr[p] += delta;
                    let mut s = scene.to_vec();
                    s[gi] = from_params(&arr);
                    weighted(&render_forward(&s, &intr, &pose, &bg, &cfg), &w)
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                let err = (fd - analytic[p]).abs() / fd.abs().max(analytic[p].abs()).max(1e-3);
                worst = worst.max(err);
            }
        }
        worst
    }

    #[test]
    fn finite_difference_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let scene = micro_scene(&mut rng, 4);
        let worst = worst_fd_error(&scene, &mut rng);
        assert!(worst < 1e-4, "worst relative error {worst}");
    }

    #[test]
    fn guard_band_gradients() {
        // Mean beyond the guard band on both axes, footprint still on screen.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut scene = micro_scene(&mut rng, 2);
        scene[0].mu = Vec3::new(1.4, -1.2, 2.0);
        scene[0].scale = Vec3::new(0.9, 0.7, 0.8);
        let worst = worst_fd_error(&scene, &mut rng);
        assert!(worst < 1e-4, "worst relative error {worst}");
    }

    #[test]
    fn quat_matrix_backward_fd() {
        let q = UnitQuaternion::new_normalize(Quaternion::new(0.3, -0.5, 0.2, 0.7));
        let g = Matrix3::new(0.1, -0.4, 0.3, 0.9, -0.2, 0.5, 0.7, 0.6, -0.8);
        let a = quat_to_matrix_backward(&q, &g);
        let base = [q.w, q.i, q.j, q.k];
        for k in 0..4 {
            let f = |d: f64| {
                let mut c = base;
                c[k] += d;
                let m = quat_to_matrix(&UnitQuaternion::new_unchecked(Quaternion::new(c[0], c[1], c[2], c[3])));
                m.component_mul(&g).sum()
            };
            let fd = (f(1e-6) - f(-1e-6)) / 2e-6;
            assert!((fd - a[k]).abs() < 1e-7);
        }
    }
}
