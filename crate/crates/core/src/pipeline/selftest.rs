//! Quick oracle and gradient checks run by the `selftest` command.

use nalgebra::{Quaternion, UnitQuaternion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::PipelineConfig;
use crate::conditions::{decode_conditions, encode_conditions, EgoTrajectory};
use crate::decoder::{
    decode_decoder, decoder_loss, encode_decoder, DecoderConfig, DecoderScene, GaussianDecoder, LossWeights,
    MultiModalLatent, TargetView, LATENT_CHANNELS,
};
use crate::flow::{
    decode_field, encode_field, euler_sample, flow_gradient_check, Conditioning, FieldConfig, FlowItem, FlowSample,
    PointMassOracle, Schedule, VelocityField,
};
use crate::gaussians::{aggregate_4d, decode_gs4d, encode_gs4d, FrameId, Gaussian3D, GaussianFrame, GaussianSet};
use crate::geometry::{Camera, Intrinsics, PoseSE3, Vec3};
use crate::nn::{max_relative_fd_error, AttentionBlock, ParamBuilder};
use crate::synthdata::{generate_scene, SceneSpec};
use crate::raster::{
    decode_dpth, encode_dpth, project_gaussian, render_reference, render_with, DepthImage, Projected, RasterConfig,
    SplatProjection,
};

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub value: f64,
    pub limit: f64,
    pub passed: bool,
}

impl Check {
    fn at_most(name: &'static str, value: f64, limit: f64) -> Self {
        Self {
            name,
            value,
            limit,
            passed: value <= limit,
        }
    }

    pub fn line(&self) -> String {
        format!(
            "{} {}: {:.3e} (limit {:.1e})",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.value,
            self.limit
        )
    }
}

pub fn random_gaussian(rng: &mut impl Rng) -> Gaussian3D {
    let q = Quaternion::new(
        rng.gen_range(-1.0..1.0),
        rng.gen_range(-1.0..1.0),
        rng.gen_range(-1.0..1.0),
        rng.gen_range(-1.0..1.0),
    );
    Gaussian3D {
        mu: Vec3::new(rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0), rng.gen_range(2.0..12.0)),
        rot: UnitQuaternion::from_quaternion(q),
        scale: Vec3::new(rng.gen_range(0.05..0.6), rng.gen_range(0.05..0.6), rng.gen_range(0.05..0.6)),
        opacity: rng.gen_range(0.1..0.95),
        color: Vec3::new(rng.gen(), rng.gen(), rng.gen()),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RasterOracle {
    /// Worst gap over rgb, alpha and depth with thresholds off.
    pub exact: f64,
    /// Worst rgb or alpha gap with the default thresholds.
    pub thresholded: f64,
    /// Worst depth gap (meters) with the default thresholds, over pixels
    /// whose reference alpha exceeds 1e-4.
    pub thresholded_depth: f64,
    /// Worst amount by which a thresholded rgb or alpha gap exceeds its
    /// per-pixel bound: the summed alpha' of splats below the skip threshold
    /// plus the early-out transmittance.
    pub bound_excess: f64,
}

pub fn random_scene(seed: u64, max_gaussians: usize) -> Vec<Gaussian3D> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(1..=max_gaussians);
    (0..n).map(|_| random_gaussian(&mut rng)).collect()
}

/// Tiled renderer against the brute-force reference over seeded scenes.
pub fn raster_oracle(scenes: usize, max_gaussians: usize) -> RasterOracle {
    let intr = Intrinsics::new(30.0, 30.0, 16.0, 16.0, 32, 32).expect("valid intrinsics");
    let pose = PoseSE3::identity();
    let bg = Vec3::new(0.1, 0.2, 0.3);
    let defaults = RasterConfig::default();
    let skip = defaults.skip_alpha.expect("default skip threshold");
    let early = defaults.early_out.expect("default early-out");
    let mut out = RasterOracle {
        exact: 0.0,
        thresholded: 0.0,
        thresholded_depth: 0.0,
        bound_excess: f64::NEG_INFINITY,
    };
    for s in 0..scenes {
        let gs = random_scene(1000 + s as u64, max_gaussians);
        let reference = render_reference(&gs, &intr, &pose, &bg);
        let a = render_with(&gs, &intr, &pose, &bg, &RasterConfig::exact());
        let b = render_with(&gs, &intr, &pose, &bg, &defaults);
        out.exact = out.exact.max(a.max_abs_diff(&reference));
        let splats: Vec<SplatProjection> = gs
            .iter()
            .filter_map(|g| match project_gaussian(g, &intr, &pose) {
                Projected::Splat(sp) => Some(sp),
                _ => None,
            })
            .collect();
        for v in 0..intr.height {
            for u in 0..intr.width {
                let i = v * intr.width + u;
                let (px, py) = (u as f64 + 0.5, v as f64 + 0.5);
                let skipped: f64 = splats
                    .iter()
                    .map(|sp| splat_alpha(sp, px, py, defaults.alpha_max))
                    .filter(|&al| al < skip)
                    .sum();
                let bound = skipped + early + 1e-6;
                let gap = (0..3)
                    .map(|c| (b.rgb[3 * i + c] as f64 - reference.rgb[3 * i + c] as f64).abs())
                    .fold((b.alpha[i] as f64 - reference.alpha[i] as f64).abs(), f64::max);
                out.thresholded = out.thresholded.max(gap);
                out.bound_excess = out.bound_excess.max(gap - bound);
                if reference.alpha[i] > 1e-4 {
                    let d = (b.depth[i] as f64 - reference.depth[i] as f64).abs();
                    out.thresholded_depth = out.thresholded_depth.max(d);
                }
            }
        }
    }
    out
}

/// Opacity-weighted Gaussian falloff at a pixel center, capped like the
/// compositor.
fn splat_alpha(s: &SplatProjection, px: f64, py: f64, alpha_max: f64) -> f64 {
    let (dx, dy) = (px - s.mean2d.x, py - s.mean2d.y);
    let [a, b, c] = s.conic;
    let power = -0.5 * (a * dx * dx + 2.0 * b * dx * dy + c * dy * dy);
    if power > 0.0 {
        0.0
    } else {
        (s.opacity * power.exp()).min(alpha_max)
    }
}

pub fn flow_gradient() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut field = VelocityField::new(
        FieldConfig {
            hidden: 8,
            layers: 2,
            ..FieldConfig::new(3).with_render()
        },
        12,
    );
    // Break the zero-initialized output layer so every coordinate carries gradient.
    for v in field.params.iter_mut() {
        *v += rng.gen_range(-0.3..0.3);
    }
    let samples: Vec<FlowSample> = (0..6)
        .map(|_| {
            let x = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let eps = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
            FlowSample::new(x, eps, rng.gen_range(0.0..0.95)).expect("valid sample")
        })
        .collect();
    let renders: Vec<Vec<f64>> = (0..6).map(|_| (0..3).map(|_| rng.gen()).collect()).collect();
    let items: Vec<FlowItem> = samples
        .iter()
        .zip(&renders)
        .map(|(s, r)| FlowItem {
            sample: s,
            cond: Conditioning {
                features: None,
                render: Some(r),
            },
        })
        .collect();
    let coords: Vec<usize> = (0..10).map(|_| rng.gen_range(0..field.num_params())).collect();
    flow_gradient_check(&field, &items, &coords, 1e-4)
}

pub fn attention_gradient() -> f64 {
    let mut pb = ParamBuilder::new();
    let blk = AttentionBlock::new(&mut pb, 4, 2);
    let p = pb.build(13);
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let x: Vec<f64> = (0..8 * 4).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let w: Vec<f64> = (0..8 * 4).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let groups = vec![vec![0, 1, 2, 3], vec![4, 5, 6, 7]];
    let loss = |p: &[f64]| {
        let (y, _) = blk.forward(p, &x, &groups);
        y.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>()
    };
    let (_, cache) = blk.forward(&p, &x, &groups);
    let mut g = vec![0.0; p.len()];
    blk.backward(&p, &cache, &groups, &w, &mut g);
    let coords: Vec<usize> = (0..p.len()).step_by(3).collect();
    max_relative_fd_error(&mut |q| loss(q), &p, &g, &coords, 1e-5, 1e-4)
}

/// A two-frame, one-view, 8×8 decoder scene with random targets.
pub fn micro_decoder_scene(seed: u64) -> (GaussianDecoder, DecoderScene) {
    let cfg = DecoderConfig {
        dim: 8,
        heads: 2,
        blocks: 1,
        mlp_hidden: 8,
        head_mid: 4,
        head_out: 4,
    };
    let mut dec = GaussianDecoder::new(cfg, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
    for v in dec.params.iter_mut() {
        *v += rng.gen_range(-0.05..0.05);
    }
    let mut lat = MultiModalLatent::zeros(1, 2, 2, 2, (2.0, 20.0));
    for (i, v) in lat.data.iter_mut().enumerate() {
        *v = match i % LATENT_CHANNELS {
            3 => rng.gen_range(-1.0..1.0),
            4 => (rng.gen::<f64>() > 0.7) as u8 as f64,
            _ => rng.gen(),
        };
    }
    let cam = Camera {
        id: "cam0".into(),
        intrinsics: Intrinsics::new(8.0, 8.0, 4.0, 4.0, 8, 8).expect("valid intrinsics"),
        extrinsics: PoseSE3::identity(),
    };
    let traj = EgoTrajectory::from_poses(vec![
        PoseSE3::identity(),
        PoseSE3::from_translation(Vec3::new(0.0, 0.0, 0.4)),
    ]);
    let targets = (0..2)
        .map(|_| TargetView {
            rgb: (0..192).map(|_| rng.gen()).collect(),
            depth: (0..64).map(|_| rng.gen_range(3.0..12.0)).collect(),
            mask: (0..64).map(|_| rng.gen::<f64>() > 0.8).collect(),
        })
        .collect();
    let scene = DecoderScene::new(lat, vec![cam], traj, targets, Vec3::new(0.2, 0.3, 0.4)).expect("consistent scene");
    (dec, scene)
}

pub fn decoder_loss_gradient() -> f64 {
    let (dec, scene) = micro_decoder_scene(30);
    let cfg = RasterConfig::exact();
    let w = LossWeights::default();
    let loss = |p: &[f64]| {
        decoder_loss(&dec, p, &scene, 0, 2, &[0, 1], &w, &cfg, None)
            .expect("valid micro scene")
            .0
            .loss
    };
    let (_, g) = decoder_loss(&dec, &dec.params, &scene, 0, 2, &[0, 1], &w, &cfg, None).expect("valid micro scene");
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let coords: Vec<usize> = (0..12).map(|_| rng.gen_range(0..dec.params.len())).collect();
    max_relative_fd_error(&mut |p| loss(p), &dec.params, &g, &coords, 1e-6, 1e-4)
}

/// Counting and static-invariance violations of 4D aggregation over random
/// configurations (0 means both identities held everywhere).
pub fn aggregation_identity(configs: usize) -> usize {
    let mut violations = 0;
    for c in 0..configs {
        let mut rng = ChaCha8Rng::seed_from_u64(2000 + c as u64);
        let (nv, nt) = (rng.gen_range(1..4), rng.gen_range(1..5));
        let mut frames = Vec::new();
        for v in 0..nv {
            for t in 0..nt {
                let n = rng.gen_range(0..6);
                frames.push(GaussianFrame {
                    id: FrameId { timestep: t, view: v },
                    gaussians: (0..n).map(|_| random_gaussian(&mut rng)).collect(),
                    dynamic_flags: (0..n).map(|_| rng.gen_bool(0.4)).collect(),
                });
            }
        }
        let poses = (0..nt)
            .map(|t| PoseSE3::from_translation(Vec3::new(t as f64, 0.0, 0.0)))
            .collect();
        let scene = aggregate_4d(&frames, &EgoTrajectory::from_poses(poses)).expect("valid frames");
        let statics: usize = frames.iter().map(|f| f.static_count()).sum();
        let mut first_static: Option<Vec<Gaussian3D>> = None;
        for t in 0..nt {
            let dynamics: usize = frames
                .iter()
                .filter(|f| f.id.timestep == t)
                .map(|f| f.dynamic_count())
                .sum();
            if scene.at(t).len() != statics + dynamics {
                violations += 1;
            }
            let st: Vec<Gaussian3D> = scene
                .at(t)
                .iter()
                .zip(&scene.provenance[t])
                .filter(|(_, p)| !p.dynamic)
                .map(|(g, _)| *g)
                .collect();
            match &first_static {
                None => first_static = Some(st),
                Some(s0) if *s0 != st => violations += 1,
                _ => {}
            }
        }
    }
    violations
}

/// Largest gap between point-mass oracle samples at N = 1, 8 and 64.
pub fn straight_path_exactness() -> f64 {
    let oracle = PointMassOracle {
        x0: vec![1.0, -2.5, 0.3],
    };
    let eps = [0.4, 1.1, -0.7];
    let run = |n| euler_sample(&oracle, &eps, Schedule { steps: n }, &Conditioning::default()).expect("finite");
    let a = run(1);
    [8, 64]
        .iter()
        .flat_map(|&n| run(n).into_iter().zip(a.clone()).map(|(x, y)| (x - y).abs()))
        .chain(a.iter().zip(&oracle.x0).map(|(x, y)| (x - y).abs()))
        .fold(0.0, f64::max)
}

/// Number of file formats whose write-read-write cycle changed bytes.
pub fn format_roundtrips() -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(3000);
    let set = GaussianSet {
        gaussians: (0..5).map(|_| random_gaussian(&mut rng)).collect(),
        dynamic: vec![true, false, false, true, false],
    }
    .quantized();
    let depth = DepthImage {
        width: 3,
        height: 2,
        data: vec![1.0, 2.5, 0.0, 7.25, 3.0, 1e-3],
    };
    let (dec, _) = micro_decoder_scene(3);
    let field = VelocityField::new(FieldConfig { hidden: 4, ..FieldConfig::new(3) }, 4);
    let gs = encode_gs4d(&set);
    let dp = encode_dpth(&depth);
    let gd = encode_decoder(&dec);
    let rf = encode_field(&field);
    let spec = SceneSpec {
        n_static: 50,
        n_dynamic: 2,
        seed: 3,
        ..Default::default()
    };
    let manifest = generate_scene(&spec).map(|sc| encode_conditions(&sc.conditions)).unwrap_or_default();
    let cfg_text = PipelineConfig::default().to_text();
    let ok = [
        !manifest.is_empty()
            && decode_conditions(&manifest)
                .map(|c| encode_conditions(&c) == manifest)
                .unwrap_or(false),
        PipelineConfig::parse(&cfg_text)
            .map(|c| c.to_text() == cfg_text)
            .unwrap_or(false),
        decode_gs4d(&gs).map(|s| encode_gs4d(&s) == gs).unwrap_or(false),
        decode_dpth(&dp).map(|d| encode_dpth(&d) == dp).unwrap_or(false),
        decode_decoder(&gd).map(|d| encode_decoder(&d) == gd).unwrap_or(false),
        decode_field(&rf).map(|f| encode_field(&f) == rf).unwrap_or(false),
    ];
    ok.iter().filter(|b| !**b).count()
}

/// All checks in a fixed order.
pub fn run_selftest() -> Vec<Check> {
    let r = raster_oracle(20, 200);
    vec![
        Check::at_most("raster oracle, thresholds off", r.exact, 1e-6),
        Check::at_most("raster oracle, default thresholds within skip/early-out bound", r.bound_excess, 0.0),
        Check::at_most("flow gradient", flow_gradient(), 1e-4),
        Check::at_most("attention gradient", attention_gradient(), 1e-4),
        Check::at_most("decoder loss gradient through renderer", decoder_loss_gradient(), 1e-3),
        Check::at_most("4D aggregation identities", aggregation_identity(50) as f64, 0.0),
        Check::at_most("straight-path Euler exactness", straight_path_exactness(), 0.0),
        Check::at_most("format roundtrips", format_roundtrips() as f64, 0.0),
    ]
}
