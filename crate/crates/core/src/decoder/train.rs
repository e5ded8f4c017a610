//! Rendering loss, training loop and evaluation for the decoder.

use std::path::PathBuf;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{write_decoder, DecoderError, DecoderRays, GaussianDecoder, MultiModalLatent};
use crate::conditions::EgoTrajectory;
use crate::gaussians::{
    aggregate_4d, aggregation_plan, ch, params_to_gaussians, params_to_gaussians_backward, sigmoid,
    transform_gaussian_backward, ActivationConfig, FrameId, GaussianFrame, GaussianGrad, PixelGaussianParams,
    RAW_CHANNELS,
};
use crate::geometry::{transform_gaussian, Camera, Vec3};
use crate::nn::{OptimizerConfig, OptimizerKind};
use crate::raster::{render_backward, render_forward, render_with, RasterConfig};

/// Ground truth for one `(view, timestep)`: interleaved rgb in `[0, 1]`,
/// ray-length depth in meters, dynamic mask.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetView {
    pub rgb: Vec<f64>,
    pub depth: Vec<f64>,
    pub mask: Vec<bool>,
}

/// Everything the decoder needs from one scene.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderScene {
    pub latent: MultiModalLatent,
    pub rays: DecoderRays,
    pub cameras: Vec<Camera>,
    pub trajectory: EgoTrajectory,
    /// Index `v·T + t`.
    pub targets: Vec<TargetView>,
    pub background: Vec3,
}

impl DecoderScene {
    pub fn new(
        latent: MultiModalLatent,
        cameras: Vec<Camera>,
        trajectory: EgoTrajectory,
        targets: Vec<TargetView>,
        background: Vec3,
    ) -> Result<Self, DecoderError> {
        let rays = DecoderRays::new(&cameras)?;
        let s = Self {
            latent,
            rays,
            cameras,
            trajectory,
            targets,
            background,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn views(&self) -> usize {
        self.latent.views
    }

    pub fn timesteps(&self) -> usize {
        self.latent.timesteps
    }

    pub fn target(&self, v: usize, t: usize) -> &TargetView {
        &self.targets[v * self.timesteps() + t]
    }

    pub fn validate(&self) -> Result<(), DecoderError> {
        self.latent.validate()?;
        let (nv, nt) = (self.views(), self.timesteps());
        if self.cameras.len() != nv || self.targets.len() != nv * nt || self.trajectory.len() < nt {
            return Err(DecoderError::Shape(format!(
                "{} cameras, {} targets, {} poses for {nv} views x {nt} timesteps",
                self.cameras.len(),
                self.targets.len(),
                self.trajectory.len()
            )));
        }
        for (v, c) in self.cameras.iter().enumerate() {
            let (w, h) = (c.intrinsics.width, c.intrinsics.height);
            if w != self.latent.width * super::DOWNSAMPLE || h != self.latent.height * super::DOWNSAMPLE {
                return Err(DecoderError::Shape(format!("camera {v} is {w}x{h}, latent {}x{}", self.latent.width, self.latent.height)));
            }
            for t in 0..nt {
                let tv = self.target(v, t);
                if tv.rgb.len() != 3 * w * h || tv.depth.len() != w * h || tv.mask.len() != w * h {
                    return Err(DecoderError::Shape(format!("target ({v}, {t}) does not match {w}x{h}")));
                }
            }
        }
        Ok(())
    }
}

/// Slot for an image-space perceptual term on interleaved rgb.
pub trait PerceptualLoss: Sync {
    fn loss_and_grad(&self, pred: &[f64], target: &[f64], width: usize, height: usize) -> (f64, Vec<f64>);
}

/// L1 distance between horizontal and vertical finite-difference gradients.
#[derive(Debug, Clone, Copy, Default)]
pub struct GradientMagnitudeL1;

impl PerceptualLoss for GradientMagnitudeL1 {
    fn loss_and_grad(&self, pred: &[f64], target: &[f64], width: usize, height: usize) -> (f64, Vec<f64>) {
        let mut g = vec![0.0; pred.len()];
        let mut total = 0.0;
        let mut count = 0usize;
        let idx = |x: usize, y: usize, c: usize| (y * width + x) * 3 + c;
        let mut term = |a: usize, b: usize, g: &mut [f64]| {
            let d = (pred[a] - pred[b]) - (target[a] - target[b]);
            total += d.abs();
            let s = d.signum();
            g[a] += s;
            g[b] -= s;
        };
        for y in 0..height {
            for x in 0..width {
                for c in 0..3 {
                    if x + 1 < width {
                        term(idx(x + 1, y, c), idx(x, y, c), &mut g);
                        count += 1;
                    }
                    if y + 1 < height {
                        term(idx(x, y + 1, c), idx(x, y, c), &mut g);
                        count += 1;
                    }
                }
            }
        }
        let n = count.max(1) as f64;
        g.iter_mut().for_each(|v| *v /= n);
        (total / n, g)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub perceptual: f64,
    pub depth: f64,
    pub mask: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            perceptual: 0.0,
            depth: 1.0,
            mask: 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    pub loss: f64,
    pub rgb_l1: f64,
    pub depth_l1: f64,
    pub mask_bce: f64,
    pub perceptual: f64,
    /// PSNR of the rendered targets.
    pub psnr: f64,
    /// IoU of predicted against true dynamic masks over the clip frames.
    pub iou: f64,
}

pub(crate) fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / mse).log10()
    }
}

fn bce_with_logits(l: f64, y: bool) -> f64 {
    // log(1 + e^{-|l|}) + max(l, 0) − l·y
    (1.0 + (-l.abs()).exp()).ln() + l.max(0.0) - if y { l } else { 0.0 }
}

pub(crate) fn iou(pred: &[bool], truth: &[bool]) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for (&a, &b) in pred.iter().zip(truth) {
        inter += (a && b) as usize;
        union += (a || b) as usize;
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Loss of raw grids for clip frames `[t0, t0 + clip)` (index `v·clip + k`)
/// rendered at `targets`, and optionally the gradient per raw grid.
#[allow(clippy::too_many_arguments)]
fn raw_loss(
    raws: &[PixelGaussianParams],
    scene: &DecoderScene,
    t0: usize,
    clip: usize,
    targets: &[usize],
    weights: &LossWeights,
    raster: &RasterConfig,
    act: &ActivationConfig,
    perceptual: Option<&dyn PerceptualLoss>,
    want_grad: bool,
) -> Result<(LossReport, Vec<Vec<f64>>), DecoderError> {
    let nv = scene.views();
    if t0 + clip > scene.timesteps() || clip == 0 {
        return Err(DecoderError::TargetOutOfRange {
            t: t0 + clip,
            len: scene.timesteps(),
        });
    }
    if let Some(&t) = targets.iter().find(|&&t| t < t0 || t >= t0 + clip) {
        return Err(DecoderError::TargetOutOfRange { t, len: t0 + clip });
    }
    if raws.len() != nv * clip {
        return Err(DecoderError::Shape(format!("{} raw grids for {nv}x{clip} frames", raws.len())));
    }
    let frames: Vec<GaussianFrame> = raws
        .iter()
        .enumerate()
        .map(|(f, r)| {
            let (v, k) = (f / clip, f % clip);
            params_to_gaussians(
                r,
                &scene.rays.full[v],
                &scene.cameras[v].extrinsics,
                act,
                FrameId {
                    timestep: t0 + k,
                    view: v,
                },
            )
        })
        .collect::<Result<_, _>>()?;
    let world: Vec<Vec<_>> = frames
        .iter()
        .map(|fr| {
            let pose = &scene.trajectory.poses[fr.id.timestep];
            fr.gaussians.iter().map(|g| transform_gaussian(g, pose)).collect()
        })
        .collect();
    let plan = aggregation_plan(&frames, t0 + clip);
    let mut ego_grads: Vec<Vec<GaussianGrad>> = frames
        .iter()
        .map(|f| vec![GaussianGrad::default(); if want_grad { f.gaussians.len() } else { 0 }])
        .collect();

    let n_targets = (targets.len() * nv).max(1) as f64;
    let (mut rgb_l1, mut depth_l1, mut perc, mut sq) = (0.0, 0.0, 0.0, 0.0);
    let mut sq_count = 0usize;
    for &t in targets {
        let set: Vec<_> = plan[t].iter().map(|&(f, i)| world[f][i]).collect();
        for v in 0..nv {
            let cam = &scene.cameras[v];
            let pose = scene.trajectory.poses[t].compose(&cam.extrinsics);
            let st = render_forward(&set, &cam.intrinsics, &pose, &scene.background, raster);
            let tv = scene.target(v, t);
            let npx = st.width * st.height;
            let mut d_rgb = vec![0.0; 3 * npx];
            let mut d_depth = vec![0.0; npx];
            let (mut l_rgb, mut l_depth) = (0.0, 0.0);
            for i in 0..3 * npx {
                let d = st.rgb[i] - tv.rgb[i];
                l_rgb += d.abs();
                sq += d * d;
                d_rgb[i] = d.signum() / (3 * npx) as f64 / n_targets;
            }
            sq_count += 3 * npx;
            for i in 0..npx {
                let d = st.depth[i] - tv.depth[i];
                l_depth += d.abs();
                d_depth[i] = weights.depth * d.signum() / npx as f64 / n_targets;
            }
            rgb_l1 += l_rgb / (3 * npx) as f64;
            depth_l1 += l_depth / npx as f64;
            if let (Some(pl), true) = (perceptual, weights.perceptual != 0.0) {
                let (l, g) = pl.loss_and_grad(&st.rgb, &tv.rgb, st.width, st.height);
                perc += l;
                for (a, b) in d_rgb.iter_mut().zip(g) {
                    *a += weights.perceptual * b / n_targets;
                }
            }
            if want_grad {
                let grads = render_backward(&st, &set, &d_rgb, &d_depth, &vec![0.0; npx]);
                let tpose = &scene.trajectory.poses[t];
                for (k, &(f, i)) in plan[t].iter().enumerate() {
                    let g = transform_gaussian_backward(&frames[f].gaussians[i], tpose, &grads[k]);
                    ego_grads[f][i].add_assign(&g);
                }
            }
        }
    }
    rgb_l1 /= n_targets;
    depth_l1 /= n_targets;
    perc /= n_targets;

    let mut bce = 0.0;
    let mut pred_mask = Vec::new();
    let mut true_mask = Vec::new();
    let n_mask: usize = raws.iter().map(|r| r.width * r.height).sum();
    let mut raw_grads = Vec::with_capacity(raws.len());
    for (f, r) in raws.iter().enumerate() {
        let (v, k) = (f / clip, f % clip);
        let truth = &scene.target(v, t0 + k).mask;
        let mut g = if want_grad {
            params_to_gaussians_backward(r, &scene.rays.full[v], &scene.cameras[v].extrinsics, act, &ego_grads[f])
        } else {
            Vec::new()
        };
        for (px, &y) in truth.iter().enumerate() {
            let l = r.pixel(px)[ch::MASK];
            bce += bce_with_logits(l, y);
            if want_grad {
                g[px * RAW_CHANNELS + ch::MASK] += weights.mask * (sigmoid(l) - y as u8 as f64) / n_mask as f64;
            }
        }
        pred_mask.extend(&frames[f].dynamic_flags);
        true_mask.extend_from_slice(truth);
        raw_grads.push(g);
    }
    bce /= n_mask.max(1) as f64;
    let loss = rgb_l1 + weights.perceptual * perc + weights.depth * depth_l1 + weights.mask * bce;
    Ok((
        LossReport {
            loss,
            rgb_l1,
            depth_l1,
            mask_bce: bce,
            perceptual: perc,
            psnr: psnr_from_mse(sq / sq_count.max(1) as f64),
            iou: iou(&pred_mask, &true_mask),
        },
        raw_grads,
    ))
}

/// Loss of explicit raw grids (no network), e.g. planted ground truth.
#[allow(clippy::too_many_arguments)]
pub fn decoder_loss_from_raw(
    raws: &[PixelGaussianParams],
    scene: &DecoderScene,
    t0: usize,
    clip: usize,
    targets: &[usize],
    weights: &LossWeights,
    raster: &RasterConfig,
) -> Result<(LossReport, Vec<Vec<f64>>), DecoderError> {
    raw_loss(raws, scene, t0, clip, targets, weights, raster, &ActivationConfig::default(), None, true)
}

/// Decodes frames `[base_t, base_t + clip)`, aggregates them and renders
/// every view at each target timestep. Returns the loss report and the
/// gradient with respect to `decoder.params`.
#[allow(clippy::too_many_arguments)]
pub fn decoder_loss(
    decoder: &GaussianDecoder,
    params: &[f64],
    scene: &DecoderScene,
    base_t: usize,
    clip: usize,
    targets: &[usize],
    weights: &LossWeights,
    raster: &RasterConfig,
    perceptual: Option<&dyn PerceptualLoss>,
) -> Result<(LossReport, Vec<f64>), DecoderError> {
    if base_t + clip > scene.timesteps() || clip == 0 {
        return Err(DecoderError::TargetOutOfRange {
            t: base_t + clip,
            len: scene.timesteps(),
        });
    }
    let latent = scene.latent.clip(base_t, clip);
    decoder.check_inputs(&latent, &scene.rays)?;
    let (raws, cache) = decoder.forward(params, &latent, &scene.rays);
    if raws.iter().any(|r| r.data.iter().any(|v| !v.is_finite())) {
        return Err(DecoderError::CorruptForward("non-finite decoder output".into()));
    }
    let (report, raw_grads) = raw_loss(
        &raws,
        scene,
        base_t,
        clip,
        targets,
        weights,
        raster,
        &ActivationConfig::default(),
        perceptual,
        true,
    )?;
    let mut g = vec![0.0; params.len()];
    decoder.backward(params, &cache, &raw_grads, &mut g);
    Ok((report, g))
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderTrainConfig {
    pub steps: usize,
    pub optimizer: OptimizerConfig,
    /// Target timesteps rendered per step (every view of each).
    pub targets_per_step: usize,
    /// Frames per decoded clip; 0 uses every timestep.
    pub clip_len: usize,
    pub weights: LossWeights,
    pub raster: RasterConfig,
    pub seed: u64,
    pub checkpoint_dir: Option<PathBuf>,
    pub checkpoint_every: usize,
}

impl Default for DecoderTrainConfig {
    fn default() -> Self {
        Self {
            steps: 5000,
            optimizer: OptimizerConfig {
                kind: OptimizerKind::Adam,
                lr: 2e-3,
                momentum: 0.9,
                clip: 10.0,
                final_lr_scale: 0.05,
            },
            targets_per_step: 2,
            clip_len: 0,
            weights: LossWeights::default(),
            raster: RasterConfig::default(),
            seed: 0,
            checkpoint_dir: None,
            checkpoint_every: 1000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    pub loss: f64,
    pub psnr: f64,
    pub iou: f64,
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut s = String::from("step,loss,psnr,iou\n");
    for r in rows {
        s.push_str(&format!("{},{},{},{}\n", r.step, r.loss, r.psnr, r.iou));
    }
    s
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedDecoder {
    pub decoder: GaussianDecoder,
    pub metrics: Vec<MetricsRow>,
}

pub fn train_decoder(
    mut decoder: GaussianDecoder,
    scenes: &[DecoderScene],
    cfg: &DecoderTrainConfig,
    perceptual: Option<&dyn PerceptualLoss>,
) -> Result<TrainedDecoder, DecoderError> {
    if scenes.is_empty() {
        return Err(DecoderError::Shape("no training scenes".into()));
    }
    for s in scenes {
        s.validate()?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = cfg.optimizer.build(decoder.num_params());
    let mut metrics = Vec::with_capacity(cfg.steps);
    let mut last_good: Option<PathBuf> = None;
    for step in 0..cfg.steps {
        let scene = &scenes[rng.gen_range(0..scenes.len())];
        let nt = scene.timesteps();
        let clip = if cfg.clip_len == 0 { nt } else { cfg.clip_len.min(nt) };
        let base_t = rng.gen_range(0..=nt - clip);
        let k = cfg.targets_per_step.clamp(1, clip);
        let mut targets: Vec<usize> = sample(&mut rng, clip, k).into_iter().map(|i| base_t + i).collect();
        targets.sort_unstable();
        let (report, mut grad) = decoder_loss(
            &decoder,
            &decoder.params,
            scene,
            base_t,
            clip,
            &targets,
            &cfg.weights,
            &cfg.raster,
            perceptual,
        )
        .map_err(|e| match e {
            DecoderError::CorruptForward(_) => DecoderError::Diverged {
                step,
                last_good: last_good.clone(),
            },
            other => other,
        })?;
        if !report.loss.is_finite() {
            return Err(DecoderError::Diverged { step, last_good });
        }
        opt.set_lr(cfg.optimizer.lr_at(step, cfg.steps));
        cfg.optimizer.apply(opt.as_mut(), &mut decoder.params, &mut grad);
        if decoder.params.iter().any(|p| !p.is_finite()) {
            return Err(DecoderError::Diverged { step, last_good });
        }
        metrics.push(MetricsRow {
            step,
            loss: report.loss,
            psnr: report.psnr,
            iou: report.iou,
        });
        if let Some(dir) = &cfg.checkpoint_dir {
            if cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 {
                let path = dir.join(format!("decoder_step{:06}.gdec", step + 1));
                write_decoder(&path, &decoder)?;
                last_good = Some(path);
            }
        }
    }
    Ok(TrainedDecoder { decoder, metrics })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderEval {
    /// PSNR per `(view, timestep)`, index `v·T + t`.
    pub psnr: Vec<f64>,
    pub mean_psnr: f64,
    pub min_psnr: f64,
    pub iou: f64,
}

/// Decodes the whole latent, aggregates, and renders every training view.
pub fn evaluate_decoder(
    decoder: &GaussianDecoder,
    scene: &DecoderScene,
    raster: &RasterConfig,
) -> Result<DecoderEval, DecoderError> {
    let raws = decoder.decode(&scene.latent, &scene.rays)?;
    let (nv, nt) = (scene.views(), scene.timesteps());
    let act = ActivationConfig::default();
    let mut frames = Vec::with_capacity(raws.len());
    for (f, r) in raws.iter().enumerate() {
        let (v, t) = (f / nt, f % nt);
        frames.push(params_to_gaussians(
            r,
            &scene.rays.full[v],
            &scene.cameras[v].extrinsics,
            &act,
            FrameId { timestep: t, view: v },
        )?);
    }
    let scene4d = aggregate_4d(&frames, &scene.trajectory)?;
    let mut psnr = Vec::with_capacity(nv * nt);
    for v in 0..nv {
        for t in 0..nt {
            let cam = &scene.cameras[v];
            let pose = scene.trajectory.poses[t].compose(&cam.extrinsics);
            let out = render_with(scene4d.at(t), &cam.intrinsics, &pose, &scene.background, raster);
            let tv = scene.target(v, t);
            let mse = out
                .rgb
                .iter()
                .zip(&tv.rgb)
                .map(|(&a, &b)| (a as f64 - b).powi(2))
                .sum::<f64>()
                / tv.rgb.len() as f64;
            psnr.push(psnr_from_mse(mse));
        }
    }
    let pred: Vec<bool> = frames.iter().flat_map(|f| f.dynamic_flags.iter().copied()).collect();
    let truth: Vec<bool> = (0..nv)
        .flat_map(|v| (0..nt).flat_map(move |t| scene.target(v, t).mask.clone()))
        .collect();
    let mean_psnr = psnr.iter().sum::<f64>() / psnr.len().max(1) as f64;
    let min_psnr = psnr.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(DecoderEval {
        psnr,
        mean_psnr,
        min_psnr,
        iou: iou(&pred, &truth),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoder::tests::micro_setup;
    use crate::geometry::PoseSE3;
    use crate::nn::max_relative_fd_error;

    fn micro_scene() -> (GaussianDecoder, DecoderScene) {
        let (mut dec, lat, rays) = micro_setup(1, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        for v in dec.params.iter_mut() {
            *v += rng.gen_range(-0.05..0.05);
        }
        let cameras: Vec<Camera> = (0..1)
            .map(|v| Camera {
                id: format!("cam{v}"),
                intrinsics: rays.intrinsics[v],
                extrinsics: PoseSE3::identity(),
            })
            .collect();
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
        let scene = DecoderScene::new(lat, cameras, traj, targets, Vec3::new(0.2, 0.3, 0.4)).unwrap();
        (dec, scene)
    }

    #[test]
    fn end_to_end_gradient_through_renderer() {
        let (dec, scene) = micro_scene();
        let cfg = RasterConfig::exact();
        let w = LossWeights::default();
        let (_, g) = decoder_loss(&dec, &dec.params, &scene, 0, 2, &[0, 1], &w, &cfg, None).unwrap();
        let f = |p: &[f64]| {
            let latent = scene.latent.clone();
            let (raws, _) = dec.forward(p, &latent, &scene.rays);
            raw_loss(&raws, &scene, 0, 2, &[0, 1], &w, &cfg, &ActivationConfig::default(), None, false)
                .unwrap()
                .0
                .loss
        };
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let coords: Vec<usize> = (0..20).map(|_| rng.gen_range(0..dec.params.len())).collect();
        let err = max_relative_fd_error(&mut |p| f(p), &dec.params, &g, &coords, 1e-6, 1e-4);
        assert!(err < 1e-3, "{err}");
    }

    #[test]
    fn zero_weights_leave_photometric_l1() {
        let (dec, scene) = micro_scene();
        let cfg = RasterConfig::exact();
        let zero = LossWeights {
            perceptual: 0.0,
            depth: 0.0,
            mask: 0.0,
        };
        let (r, _) = decoder_loss(&dec, &dec.params, &scene, 0, 2, &[1], &zero, &cfg, None).unwrap();
        assert_eq!(r.loss, r.rgb_l1);
        assert!(r.depth_l1 > 0.0 && r.mask_bce > 0.0);
    }

    #[test]
    fn target_outside_clip_is_rejected() {
        let (dec, scene) = micro_scene();
        let w = LossWeights::default();
        let cfg = RasterConfig::default();
        assert!(matches!(
            decoder_loss(&dec, &dec.params, &scene, 0, 1, &[1], &w, &cfg, None),
            Err(DecoderError::TargetOutOfRange { .. })
        ));
        assert!(matches!(
            decoder_loss(&dec, &dec.params, &scene, 1, 2, &[1], &w, &cfg, None),
            Err(DecoderError::TargetOutOfRange { .. })
        ));
    }

    #[test]
    fn gradient_proxy_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        let pred: Vec<f64> = (0..4 * 3 * 3).map(|_| rng.gen()).collect();
        let target: Vec<f64> = (0..4 * 3 * 3).map(|_| rng.gen()).collect();
        let (_, g) = GradientMagnitudeL1.loss_and_grad(&pred, &target, 4, 3);
        let coords: Vec<usize> = (0..pred.len()).collect();
        let err = max_relative_fd_error(
            &mut |p| GradientMagnitudeL1.loss_and_grad(p, &target, 4, 3).0,
            &pred,
            &g,
            &coords,
            1e-7,
            1e-4,
        );
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn seeded_training_is_deterministic() {
        let (dec, scene) = micro_scene();
        let cfg = DecoderTrainConfig {
            steps: 3,
            ..Default::default()
        };
        let a = train_decoder(dec.clone(), std::slice::from_ref(&scene), &cfg, None).unwrap();
        let b = train_decoder(dec, std::slice::from_ref(&scene), &cfg, None).unwrap();
        assert_eq!(a, b);
        assert!(a.metrics[2].loss.is_finite());
    }
}
