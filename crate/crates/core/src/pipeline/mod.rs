//! End-to-end orchestration: latent generation (or the clean-latent bypass),
//! decoding, 4D aggregation, rendering along shifted tracks and refinement.

pub mod commands;
pub mod config;
pub mod metrics;
pub mod refine;
pub mod selftest;

use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

pub use config::PipelineConfig;
pub use metrics::{compute_metrics, FrameData, FrameMetrics, MetricsReport};
pub use refine::{box_blur3, mask_patch, refine_frame, refiner_field_config};

use crate::conditions::{ConditionError, EgoTrajectory};
use crate::decoder::{DecoderError, DecoderRays, GaussianDecoder, MultiModalLatent, DOWNSAMPLE, LATENT_CHANNELS};
use crate::flow::{euler_sample_guided, Conditioning, FlowError, Schedule, VelocityField};
use crate::format::FormatError;
use crate::gaussians::{aggregate_4d, params_to_gaussians, ActivationConfig, FrameId, GaussianError, Scene4D};
use crate::geometry::Vec3;
use crate::kv::KvError;
use crate::raster::{render_with, RenderOutput};
use crate::synthdata::{covisible_pixels, encode_latent, SynthError, SyntheticScene};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config: {0}")]
    Config(String),
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("missing {what}: {}", path.display())]
    Missing { what: &'static str, path: PathBuf },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error(transparent)]
    Kv(#[from] KvError),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Decoder(#[from] DecoderError),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Condition(#[from] ConditionError),
    #[error(transparent)]
    Gaussian(#[from] GaussianError),
    #[error("selftest failed: {0}")]
    Selftest(String),
}

impl PipelineError {
    /// Short machine-readable category for the CLI's error line.
    pub fn kind(&self) -> &'static str {
        match self {
            PipelineError::Config(_) | PipelineError::UnknownKey(_) | PipelineError::Kv(_) => "config",
            PipelineError::Missing { .. } => "missing",
            PipelineError::Shape(_) => "shape",
            PipelineError::Format(_) => "format",
            PipelineError::Synth(_) => "synth",
            PipelineError::Decoder(_) => "decoder",
            PipelineError::Flow(_) => "flow",
            PipelineError::Condition(_) => "condition",
            PipelineError::Gaussian(_) => "gaussian",
            PipelineError::Selftest(_) => "selftest",
        }
    }
}

/// Trained networks used by inference. The flow field is only needed in
/// generation mode.
#[derive(Debug, Clone, PartialEq)]
pub struct Models {
    pub flow: Option<VelocityField>,
    pub decoder: GaussianDecoder,
    pub refiner: Option<VelocityField>,
}

/// Renders along one laterally shifted trajectory, index `v·T + t`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackOutput {
    pub dy: f64,
    pub trajectory: EgoTrajectory,
    pub renders: Vec<RenderOutput>,
    /// Pixels whose composited weight is mostly dynamic Gaussians.
    pub masks: Vec<Vec<bool>>,
    /// Final rgb in `[0, 1]`: refined when a refiner ran, else the render.
    pub frames: Vec<Vec<f64>>,
    pub refined: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InferOutput {
    pub latent: MultiModalLatent,
    pub scene4d: Scene4D,
    pub tracks: Vec<TrackOutput>,
}

/// SplitMix64 finalizer over a sequence of words: independent seeds for
/// nested loops without sharing one generator.
pub fn mix_seed(parts: &[u64]) -> u64 {
    let mut h: u64 = 0x9e37_79b9_7f4a_7c15;
    for &p in parts {
        h = h.wrapping_add(p).wrapping_add(0x9e37_79b9_7f4a_7c15);
        let mut z = h;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        h = z ^ (z >> 31);
    }
    h
}

pub fn gaussian_noise(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()
}

/// Latent shape the decoder expects for `scene`.
pub fn latent_template(scene: &SyntheticScene) -> MultiModalLatent {
    let s = &scene.spec;
    MultiModalLatent::zeros(
        s.views,
        s.timesteps,
        s.height / DOWNSAMPLE,
        s.width / DOWNSAMPLE,
        scene.depth_range,
    )
}

/// Clamps a sampled latent into the ranges the encoder produces.
fn clamp_latent(data: &mut [f64]) {
    for (i, v) in data.iter_mut().enumerate() {
        *v = match i % LATENT_CHANNELS {
            3 => v.clamp(-1.0, 1.0),
            _ => v.clamp(0.0, 1.0),
        };
    }
}

/// Samples a latent for `scene`'s conditions with the generative field.
pub fn generate_latent(
    cfg: &PipelineConfig,
    flow: &VelocityField,
    scene: &SyntheticScene,
    stream: u64,
) -> Result<MultiModalLatent, PipelineError> {
    let mut latent = latent_template(scene);
    if flow.cfg.latent_dim != latent.data.len() {
        return Err(PipelineError::Shape(format!(
            "flow checkpoint expects latents of {} values, the scene needs {}",
            flow.cfg.latent_dim,
            latent.data.len()
        )));
    }
    let features = match flow.encoder() {
        Some(enc) => Some(enc.features(&scene.conditions)?),
        None => None,
    };
    let eps = gaussian_noise(latent.data.len(), mix_seed(&[cfg.seed, stream, 0]));
    let cond = Conditioning {
        features: features.as_ref(),
        render: None,
    };
    let schedule = Schedule {
        steps: cfg.flow.euler_steps,
    };
    let mut x = euler_sample_guided(flow, &eps, schedule, &cond, cfg.flow.guidance)?;
    clamp_latent(&mut x);
    latent.data = x;
    Ok(latent)
}

/// Decodes a latent into pixel-aligned Gaussians and aggregates them along
/// the scene's recorded trajectory.
pub fn decode_scene(
    decoder: &GaussianDecoder,
    latent: &MultiModalLatent,
    scene: &SyntheticScene,
) -> Result<Scene4D, PipelineError> {
    let rays = DecoderRays::new(&scene.rig.cameras)?;
    let raws = decoder.decode(latent, &rays)?;
    let nt = latent.timesteps;
    let act = ActivationConfig::default();
    let frames = raws
        .iter()
        .enumerate()
        .map(|(f, r)| {
            let (v, t) = (f / nt, f % nt);
            params_to_gaussians(
                r,
                &rays.full[v],
                &scene.rig.cameras[v].extrinsics,
                &act,
                FrameId { timestep: t, view: v },
            )
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(aggregate_4d(&frames, &scene.trajectory)?)
}

/// Renders every camera at every timestep from `trajectory`.
pub fn render_along(
    cfg: &PipelineConfig,
    scene4d: &Scene4D,
    scene: &SyntheticScene,
    trajectory: &EgoTrajectory,
) -> (Vec<RenderOutput>, Vec<Vec<bool>>) {
    let (nv, nt) = (scene.spec.views, scene.spec.timesteps);
    let mut renders = Vec::with_capacity(nv * nt);
    let mut masks = Vec::with_capacity(nv * nt);
    for v in 0..nv {
        let cam = &scene.rig.cameras[v];
        for t in 0..nt {
            let pose = scene.camera_pose(trajectory, v, t);
            let gs = scene4d.at(t);
            renders.push(render_with(gs, &cam.intrinsics, &pose, &scene.background, &cfg.raster));
            let flags: Vec<_> = gs
                .iter()
                .zip(&scene4d.provenance[t])
                .map(|(g, p)| {
                    let mut g = *g;
                    g.color = if p.dynamic { Vec3::new(1.0, 1.0, 1.0) } else { Vec3::zeros() };
                    g
                })
                .collect();
            let dyn_weight = render_with(&flags, &cam.intrinsics, &pose, &Vec3::zeros(), &cfg.raster);
            masks.push(
                (0..cam.intrinsics.pixel_count())
                    .map(|i| dyn_weight.alpha[i] > 0.0 && dyn_weight.rgb[3 * i] > 0.5 * dyn_weight.alpha[i])
                    .collect(),
            );
        }
    }
    (renders, masks)
}

/// Renders each configured offset and refines the renders when the config
/// enables it and a refiner is present.
pub fn infer_from_latent(
    cfg: &PipelineConfig,
    models: &Models,
    scene: &SyntheticScene,
    latent: MultiModalLatent,
    stream: u64,
) -> Result<InferOutput, PipelineError> {
    let scene4d = decode_scene(&models.decoder, &latent, scene)?;
    let refiner = models.refiner.as_ref().filter(|_| cfg.refiner.enabled);
    let mut tracks = Vec::with_capacity(cfg.infer.dy.len());
    for (k, &dy) in cfg.infer.dy.iter().enumerate() {
        let conditions = scene.conditions.perturbed(dy);
        let trajectory = conditions.trajectory.clone();
        let (renders, masks) = render_along(cfg, &scene4d, scene, &trajectory);
        let frames = match refiner {
            Some(field) => {
                let features = match field.encoder() {
                    Some(enc) => Some(enc.features(&conditions)?),
                    None => None,
                };
                renders
                    .iter()
                    .enumerate()
                    .map(|(f, r)| {
                        let rgb: Vec<f64> = r.rgb.iter().map(|&x| x as f64).collect();
                        let seed = mix_seed(&[cfg.seed, stream, 1, k as u64, f as u64]);
                        refine_frame(field, &rgb, features.as_ref(), cfg.refiner.euler_steps, seed)
                    })
                    .collect::<Result<Vec<_>, _>>()?
            }
            None => renders.iter().map(|r| r.rgb.iter().map(|&x| x as f64).collect()).collect(),
        };
        tracks.push(TrackOutput {
            dy,
            trajectory,
            renders,
            masks,
            frames,
            refined: refiner.is_some(),
        });
    }
    Ok(InferOutput {
        latent,
        scene4d,
        tracks,
    })
}

/// Generation mode: noise, Euler sampling under the scene's conditions,
/// then decoding and rendering.
pub fn infer(
    cfg: &PipelineConfig,
    models: &Models,
    scene: &SyntheticScene,
    stream: u64,
) -> Result<InferOutput, PipelineError> {
    let flow = models
        .flow
        .as_ref()
        .ok_or_else(|| PipelineError::Config("generation mode needs a flow model".into()))?;
    let latent = generate_latent(cfg, flow, scene, stream)?;
    infer_from_latent(cfg, models, scene, latent, stream)
}

/// Reconstruction mode: the scene's clean latent feeds the decoder directly.
pub fn infer_reconstruct(
    cfg: &PipelineConfig,
    models: &Models,
    scene: &SyntheticScene,
    stream: u64,
) -> Result<InferOutput, PipelineError> {
    let latent = encode_latent(scene, DOWNSAMPLE)?;
    infer_from_latent(cfg, models, scene, latent, stream)
}

/// Generator ground truth along a track: rgb, depth, top-contributor mask.
pub fn track_truth(scene: &SyntheticScene, trajectory: &EgoTrajectory) -> Vec<FrameData> {
    let (nv, nt) = (scene.spec.views, scene.spec.timesteps);
    let mut out = Vec::with_capacity(nv * nt);
    for v in 0..nv {
        let intr = &scene.rig.cameras[v].intrinsics;
        for t in 0..nt {
            let pose = scene.camera_pose(trajectory, v, t);
            let (r, mask) = scene.render_truth(t, intr, &pose);
            out.push(FrameData {
                width: r.width,
                height: r.height,
                rgb: r.rgb.iter().map(|&x| x as f64).collect(),
                depth: r.depth.iter().map(|&x| x as f64).collect(),
                mask,
            });
        }
    }
    out
}

/// Pixels of each track frame that some training camera also observes.
pub fn track_visibility(cfg: &PipelineConfig, scene: &SyntheticScene, truth: &[FrameData], trajectory: &EgoTrajectory) -> Vec<Vec<bool>> {
    let nt = scene.spec.timesteps;
    truth
        .iter()
        .enumerate()
        .map(|(f, tr)| {
            let (v, t) = (f / nt, f % nt);
            let intr = &scene.rig.cameras[v].intrinsics;
            let pose = scene.camera_pose(trajectory, v, t);
            let depth: Vec<f32> = tr.depth.iter().map(|&d| d as f32).collect();
            covisible_pixels(scene, t, intr, &pose, &depth, &tr.mask, cfg.infer.visibility_tol)
        })
        .collect()
}

/// Final frames of a track against generator truth, on visible pixels.
pub fn track_metrics(
    cfg: &PipelineConfig,
    scene: &SyntheticScene,
    track: &TrackOutput,
) -> Result<MetricsReport, PipelineError> {
    let truth = track_truth(scene, &track.trajectory);
    let valid = track_visibility(cfg, scene, &truth, &track.trajectory);
    let pred: Vec<FrameData> = track
        .frames
        .iter()
        .zip(&track.renders)
        .zip(&track.masks)
        .map(|((rgb, r), m)| FrameData {
            width: r.width,
            height: r.height,
            rgb: rgb.clone(),
            depth: r.depth.iter().map(|&x| x as f64).collect(),
            mask: m.clone(),
        })
        .collect();
    compute_metrics(&pred, &truth, Some(&valid))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoder::DecoderConfig;
    use crate::flow::{FieldConfig, PointMassOracle};
    use crate::synthdata::{generate_scene, SceneSpec};

    fn small_scene() -> SyntheticScene {
        generate_scene(&SceneSpec {
            seed: 4,
            height: 16,
            width: 16,
            timesteps: 2,
            n_static: 300,
            ..Default::default()
        })
        .unwrap()
    }

    fn tiny_decoder() -> GaussianDecoder {
        GaussianDecoder::new(
            DecoderConfig {
                dim: 8,
                heads: 2,
                blocks: 1,
                mlp_hidden: 8,
                head_mid: 4,
                head_out: 4,
            },
            1,
        )
    }

    #[test]
    fn zero_offset_track_matches_the_recorded_track() {
        let scene = small_scene();
        let mut cfg = PipelineConfig::default();
        cfg.infer.dy = vec![0.0, 1.0];
        let models = Models {
            flow: None,
            decoder: tiny_decoder(),
            refiner: None,
        };
        let out = infer_reconstruct(&cfg, &models, &scene, 0).unwrap();
        let (direct, _) = render_along(&cfg, &out.scene4d, &scene, &scene.trajectory);
        assert_eq!(out.tracks[0].renders, direct);
        assert_ne!(out.tracks[1].renders, direct);
        let again = infer_reconstruct(&cfg, &models, &scene, 0).unwrap();
        assert_eq!(again, out);
    }

    /// A sampler that always lands on the clean latent turns generation into
    /// reconstruction.
    #[test]
    fn oracle_flow_matches_reconstruction() {
        let scene = small_scene();
        let mut cfg = PipelineConfig::default();
        cfg.infer.dy = vec![2.0];
        let clean = encode_latent(&scene, DOWNSAMPLE).unwrap();
        let oracle = PointMassOracle { x0: clean.data.clone() };
        let eps = gaussian_noise(clean.data.len(), 3);
        let sampled = crate::flow::euler_sample(&oracle, &eps, Schedule { steps: 8 }, &Conditioning::default()).unwrap();
        assert_eq!(sampled, clean.data);
        let models = Models {
            flow: None,
            decoder: tiny_decoder(),
            refiner: None,
        };
        let mut latent = latent_template(&scene);
        latent.data = sampled;
        let gen = infer_from_latent(&cfg, &models, &scene, latent, 0).unwrap();
        let rec = infer_reconstruct(&cfg, &models, &scene, 0).unwrap();
        assert_eq!(gen, rec);
    }

    #[test]
    fn flow_with_wrong_latent_size_is_a_shape_error() {
        let scene = small_scene();
        let flow = VelocityField::new(FieldConfig::new(7), 0);
        let cfg = PipelineConfig::default();
        assert!(matches!(generate_latent(&cfg, &flow, &scene, 0), Err(PipelineError::Shape(_))));
    }

    #[test]
    fn generated_latents_are_valid_and_seeded() {
        let scene = small_scene();
        let cfg = PipelineConfig::default();
        let n = latent_template(&scene).data.len();
        let mut flow = VelocityField::new(FieldConfig { hidden: 8, ..FieldConfig::new(n) }, 2);
        for (i, v) in flow.params.iter_mut().enumerate() {
            *v += 0.05 * ((i * 7919) % 13) as f64 / 13.0 - 0.025;
        }
        let a = generate_latent(&cfg, &flow, &scene, 0).unwrap();
        a.validate().unwrap();
        assert_eq!(a, generate_latent(&cfg, &flow, &scene, 0).unwrap());
        assert_ne!(a, generate_latent(&cfg, &flow, &scene, 1).unwrap());
    }

    #[test]
    fn truth_track_metrics_are_perfect() {
        let scene = small_scene();
        let cfg = PipelineConfig::default();
        let truth = track_truth(&scene, &scene.trajectory);
        let valid = track_visibility(&cfg, &scene, &truth, &scene.trajectory);
        let r = compute_metrics(&truth, &truth, Some(&valid)).unwrap();
        assert_eq!(r.mean_psnr, f64::INFINITY);
        assert!(valid.iter().all(|v| v.iter().all(|&b| b)));
    }
}
