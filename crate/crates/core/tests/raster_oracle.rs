//! The renderers against a naive EWA splatter written here from the
//! documented contract, plus threshold and tiling properties.

use nalgebra::{Matrix2x3, Matrix3, UnitQuaternion, Vector3};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use worldsplat::gaussians::Gaussian3D;
use worldsplat::geometry::{Intrinsics, PoseSE3, Vec3};
use worldsplat::pipeline::selftest::{random_gaussian, random_scene};
use worldsplat::raster::{render_reference, render_with, RasterConfig, RenderOutput};

struct Naive {
    rgb: Vec<f64>,
    depth: Vec<f64>,
    alpha: Vec<f64>,
}

/// Per-pixel loop over depth-sorted splats, 1.3x guard band on the
/// Jacobian, 0.3 px dilation, 3-sigma frustum cull, alpha capped at 0.99.
fn naive_render(gs: &[Gaussian3D], intr: &Intrinsics, pose: &PoseSE3, bg: &Vec3) -> Naive {
    struct S {
        m: [f64; 2],
        inv: [f64; 3],
        z: f64,
        dist: f64,
        color: Vec3,
        opacity: f64,
    }
    let w: Matrix3<f64> = pose.rotation.to_rotation_matrix().matrix().transpose();
    let mut splats = Vec::new();
    for g in gs {
        let p = w * (g.mu - pose.translation);
        if p.z <= 0.01 {
            continue;
        }
        let band = |v: f64, f: f64, c: f64, n: usize| {
            (v / p.z).clamp(-1.3 * c / f, 1.3 * (n as f64 - c) / f)
        };
        let tx = band(p.x, intr.fx, intr.cx, intr.width);
        let ty = band(p.y, intr.fy, intr.cy, intr.height);
        let j = Matrix2x3::new(
            intr.fx / p.z,
            0.0,
            -intr.fx * tx / p.z,
            0.0,
            intr.fy / p.z,
            -intr.fy * ty / p.z,
        );
        let r = g.rot.to_rotation_matrix().into_inner();
        let sigma = r * Matrix3::from_diagonal(&g.scale.component_mul(&g.scale)) * r.transpose();
        let c2 = j * w * sigma * w.transpose() * j.transpose();
        let (a, b, c) = (c2[(0, 0)] + 0.3, c2[(0, 1)], c2[(1, 1)] + 0.3);
        let det = a * c - b * b;
        if det <= 0.0 {
            continue;
        }
        let m = [intr.fx * p.x / p.z + intr.cx, intr.fy * p.y / p.z + intr.cy];
        let (rx, ry) = (3.0 * a.sqrt(), 3.0 * c.sqrt());
        if m[0] + rx < 0.0 || m[0] - rx > intr.width as f64 || m[1] + ry < 0.0 || m[1] - ry > intr.height as f64 {
            continue;
        }
        splats.push(S {
            m,
            inv: [c / det, -b / det, a / det],
            z: p.z,
            dist: p.norm(),
            color: g.color,
            opacity: g.opacity,
        });
    }
    splats.sort_by(|x, y| x.z.partial_cmp(&y.z).unwrap());
    let n = intr.width * intr.height;
    let mut out = Naive {
        rgb: vec![0.0; 3 * n],
        depth: vec![0.0; n],
        alpha: vec![0.0; n],
    };
    for v in 0..intr.height {
        for u in 0..intr.width {
            let (x, y) = (u as f64 + 0.5, v as f64 + 0.5);
            let (mut t, mut col, mut d) = (1.0, Vector3::zeros(), 0.0);
            for s in &splats {
                let (dx, dy) = (x - s.m[0], y - s.m[1]);
                let q = s.inv[0] * dx * dx + 2.0 * s.inv[1] * dx * dy + s.inv[2] * dy * dy;
                let a = if q < 0.0 { 0.0 } else { (s.opacity * (-0.5 * q).exp()).min(0.99) };
                col += s.color * a * t;
                d += s.dist * a * t;
                t *= 1.0 - a;
            }
            let i = v * intr.width + u;
            let rgb = col + bg * t;
            out.rgb[3 * i..3 * i + 3].copy_from_slice(rgb.as_slice());
            out.alpha[i] = 1.0 - t;
            out.depth[i] = d / (1.0 - t).max(1e-6);
        }
    }
    out
}

fn gap(r: &RenderOutput, n: &Naive) -> (f64, f64) {
    let d = |a: &[f32], b: &[f64]| a.iter().zip(b).map(|(x, y)| (*x as f64 - y).abs()).fold(0.0, f64::max);
    let color = d(&r.rgb, &n.rgb).max(d(&r.alpha, &n.alpha));
    // Relative depth error on pixels that carry a surface.
    let depth = r
        .depth
        .iter()
        .zip(&n.depth)
        .zip(&n.alpha)
        .filter(|(_, &a)| a > 1e-4)
        .map(|((x, y), _)| (*x as f64 - y).abs() / y.max(1.0))
        .fold(0.0, f64::max);
    (color, depth)
}

fn random_pose(rng: &mut impl Rng) -> PoseSE3 {
    let axis = Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
    let rot = UnitQuaternion::from_scaled_axis(axis * 0.2);
    // Keep the random cloud (z in [2, 12]) in front of the camera.
    PoseSE3::new(rot, Vec3::new(rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5), rng.gen_range(-1.0..0.5)))
}

#[test]
fn reference_matches_naive_splatter() {
    let intr = Intrinsics::new(28.0, 31.0, 15.0, 17.0, 32, 30).unwrap();
    let bg = Vec3::new(0.3, 0.1, 0.6);
    for seed in 0..12 {
        let gs = random_scene(500 + seed, 150);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pose = if seed % 2 == 0 { PoseSE3::identity() } else { random_pose(&mut rng) };
        let naive = naive_render(&gs, &intr, &pose, &bg);
        let reference = render_reference(&gs, &intr, &pose, &bg);
        let tiled = render_with(&gs, &intr, &pose, &bg, &RasterConfig::exact());
        for out in [&reference, &tiled] {
            let (c, d) = gap(out, &naive);
            assert!(c < 1e-6, "seed {seed}: color/alpha gap {c}");
            assert!(d < 1e-5, "seed {seed}: depth gap {d}");
        }
    }
}

#[test]
fn splats_beside_the_camera_use_the_guard_band() {
    let intr = Intrinsics::new(30.0, 30.0, 16.0, 16.0, 32, 32).unwrap();
    let bg = Vec3::zeros();
    let mut g = random_gaussian(&mut ChaCha8Rng::seed_from_u64(3));
    // Far outside the frustum horizontally, but wide enough to reach it.
    g.mu = Vec3::new(6.0, 0.0, 2.0);
    g.scale = Vec3::new(3.0, 0.5, 0.5);
    g.opacity = 0.9;
    let naive = naive_render(&[g], &intr, &PoseSE3::identity(), &bg);
    assert!(naive.alpha.iter().any(|&a| a > 1e-3), "test splat should touch the image");
    let (c, _) = gap(&render_reference(&[g], &intr, &PoseSE3::identity(), &bg), &naive);
    assert!(c < 1e-6, "{c}");
}

fn scene_strategy() -> impl Strategy<Value = (u64, usize)> {
    (any::<u64>(), 1usize..120)
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 24, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn tile_size_does_not_change_output((seed, n) in scene_strategy()) {
        let intr = Intrinsics::new(30.0, 30.0, 16.0, 16.0, 40, 24).unwrap();
        let gs = random_scene(seed, n);
        let bg = Vec3::new(0.2, 0.2, 0.2);
        let base = render_with(&gs, &intr, &PoseSE3::identity(), &bg, &RasterConfig::exact().with_tile_size(16));
        for ts in [8, 32] {
            let other = render_with(&gs, &intr, &PoseSE3::identity(), &bg, &RasterConfig::exact().with_tile_size(ts));
            prop_assert!(other.max_abs_diff(&base) <= 1e-6);
        }
    }

    #[test]
    fn zero_opacity_splats_change_nothing((seed, n) in scene_strategy(), extra in 1usize..20) {
        let intr = Intrinsics::new(30.0, 30.0, 16.0, 16.0, 32, 32).unwrap();
        let gs = random_scene(seed, n);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5a5a);
        let mut padded = gs.clone();
        for _ in 0..extra {
            let mut g = random_gaussian(&mut rng);
            g.opacity = 0.0;
            let at = rng.gen_range(0..=padded.len());
            padded.insert(at, g);
        }
        let bg = Vec3::new(0.5, 0.4, 0.3);
        let a = render_with(&gs, &intr, &PoseSE3::identity(), &bg, &RasterConfig::default());
        let b = render_with(&padded, &intr, &PoseSE3::identity(), &bg, &RasterConfig::default());
        prop_assert_eq!((&a.rgb, &a.depth, &a.alpha), (&b.rgb, &b.depth, &b.alpha));
    }

    #[test]
    fn alpha_in_unit_interval_and_rgb_finite((seed, n) in scene_strategy()) {
        let intr = Intrinsics::new(30.0, 30.0, 16.0, 16.0, 32, 32).unwrap();
        let out = render_with(&random_scene(seed, n), &intr, &PoseSE3::identity(), &Vec3::zeros(), &RasterConfig::default());
        prop_assert!(out.alpha.iter().all(|a| (0.0..=1.0).contains(a)));
        prop_assert!(out.rgb.iter().all(|v| v.is_finite()));
        for (d, a) in out.depth.iter().zip(&out.alpha) {
            if *a > 1e-4 {
                prop_assert!(d.is_finite());
            }
        }
    }
}
