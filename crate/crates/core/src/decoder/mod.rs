//! Latent-to-Gaussian decoder: token embedding of latent plus ray channels,
//! alternating cross-view and temporal attention, and a two-stage
//! upsampling convolutional head that emits raw per-pixel Gaussian records.

mod checkpoint;
mod train;

pub use checkpoint::{decode_decoder, encode_decoder, read_decoder, write_decoder};
pub use train::{
    decoder_loss, decoder_loss_from_raw, evaluate_decoder, metrics_csv, train_decoder, DecoderEval, DecoderScene,
    DecoderTrainConfig, GradientMagnitudeL1, LossReport, LossWeights, MetricsRow, PerceptualLoss, TargetView,
    TrainedDecoder,
};

use std::path::PathBuf;

use rayon::prelude::*;
use thiserror::Error;

use crate::format::FormatError;
use crate::gaussians::{ch, logit, softplus_inv, PixelGaussianParams, RAW_CHANNELS};
use crate::geometry::{plucker_ray_map, Camera, GeometryError, Intrinsics, RayMap};
use crate::nn::{
    silu_backward, silu_vec, upsample2x, upsample2x_backward, AttentionBlock, AttentionCache, Conv2d, ConvCache,
    Linear, MlpBlock, MlpCache, ParamBuilder,
};

/// Channels of the desk-scale latent: rgb, normalized depth, mask.
pub const LATENT_CHANNELS: usize = 5;
/// Ratio between image and latent resolution (two 2× head stages).
pub const DOWNSAMPLE: usize = 4;
const PLUCKER: usize = 6;

#[derive(Debug, Error)]
pub enum DecoderError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("corrupt forward pass: {0}")]
    CorruptForward(String),
    #[error("target timestep {t} outside clip of {len} frames")]
    TargetOutOfRange { t: usize, len: usize },
    #[error("training diverged at step {step}; last good checkpoint: {}", last_good.as_ref().map_or("none".to_string(), |p| p.display().to_string()))]
    Diverged { step: usize, last_good: Option<PathBuf> },
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("{0}")]
    Gaussian(#[from] crate::gaussians::GaussianError),
}

/// `V×T×H'×W'×C` grid, channels last. The depth channel is normalized to
/// `[−1, 1]` over `depth_range`.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiModalLatent {
    pub views: usize,
    pub timesteps: usize,
    pub height: usize,
    pub width: usize,
    pub depth_range: (f64, f64),
    pub data: Vec<f64>,
}

impl MultiModalLatent {
    pub fn zeros(views: usize, timesteps: usize, height: usize, width: usize, depth_range: (f64, f64)) -> Self {
        Self {
            views,
            timesteps,
            height,
            width,
            depth_range,
            data: vec![0.0; views * timesteps * height * width * LATENT_CHANNELS],
        }
    }

    pub fn frame_len(&self) -> usize {
        self.height * self.width * LATENT_CHANNELS
    }

    pub fn frame(&self, v: usize, t: usize) -> &[f64] {
        let n = self.frame_len();
        let f = v * self.timesteps + t;
        &self.data[f * n..(f + 1) * n]
    }

    pub fn frame_mut(&mut self, v: usize, t: usize) -> &mut [f64] {
        let n = self.frame_len();
        let f = v * self.timesteps + t;
        &mut self.data[f * n..(f + 1) * n]
    }

    pub fn at(&self, v: usize, t: usize, y: usize, x: usize, c: usize) -> f64 {
        self.frame(v, t)[(y * self.width + x) * LATENT_CHANNELS + c]
    }

    /// Frames `[t0, t0 + len)` of every view.
    pub fn clip(&self, t0: usize, len: usize) -> MultiModalLatent {
        let mut out = MultiModalLatent::zeros(self.views, len, self.height, self.width, self.depth_range);
        for v in 0..self.views {
            for t in 0..len {
                out.frame_mut(v, t).copy_from_slice(self.frame(v, t0 + t));
            }
        }
        out
    }

    pub fn normalize_depth(&self, d: f64) -> f64 {
        let (lo, hi) = self.depth_range;
        2.0 * (d - lo) / (hi - lo).max(1e-9) - 1.0
    }

    pub fn denormalize_depth(&self, n: f64) -> f64 {
        let (lo, hi) = self.depth_range;
        lo + (n + 1.0) * 0.5 * (hi - lo)
    }

    pub fn validate(&self) -> Result<(), DecoderError> {
        let expect = self.views * self.timesteps * self.height * self.width * LATENT_CHANNELS;
        if self.data.len() != expect {
            return Err(DecoderError::Shape(format!("latent holds {} values, expected {expect}", self.data.len())));
        }
        let (lo, hi) = self.depth_range;
        if !(lo.is_finite() && hi.is_finite() && lo > 0.0 && hi > lo) {
            return Err(DecoderError::Shape(format!("invalid depth range ({lo}, {hi})")));
        }
        for (i, &v) in self.data.iter().enumerate() {
            if !v.is_finite() {
                return Err(DecoderError::CorruptForward(format!("non-finite latent value at {i}")));
            }
            if i % LATENT_CHANNELS == 3 && v.abs() > 1.0 + 1e-6 {
                return Err(DecoderError::Shape(format!("normalized depth {v} outside [-1, 1]")));
            }
        }
        Ok(())
    }
}

/// Ray maps of every view at latent, half and full resolution, in the ego
/// frame (camera extrinsics). Rays do not depend on time.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderRays {
    pub intrinsics: Vec<Intrinsics>,
    pub quarter: Vec<RayMap>,
    pub half: Vec<RayMap>,
    pub full: Vec<RayMap>,
}

impl DecoderRays {
    pub fn new(cameras: &[Camera]) -> Result<Self, DecoderError> {
        let mut out = DecoderRays {
            intrinsics: Vec::new(),
            quarter: Vec::new(),
            half: Vec::new(),
            full: Vec::new(),
        };
        for c in cameras {
            let i = &c.intrinsics;
            out.intrinsics.push(*i);
            out.full.push(plucker_ray_map(i, &c.extrinsics)?);
            out.half.push(plucker_ray_map(&i.downsampled(2)?, &c.extrinsics)?);
            out.quarter.push(plucker_ray_map(&i.downsampled(DOWNSAMPLE)?, &c.extrinsics)?);
        }
        Ok(out)
    }

    pub fn views(&self) -> usize {
        self.full.len()
    }
}

fn plucker_channel_major(r: &RayMap) -> Vec<f64> {
    let n = r.width * r.height;
    let pl = r.plucker_channels();
    let mut out = vec![0.0; PLUCKER * n];
    for (i, p) in pl.iter().enumerate() {
        for c in 0..PLUCKER {
            out[c * n + i] = p[c];
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecoderConfig {
    pub dim: usize,
    pub heads: usize,
    pub blocks: usize,
    pub mlp_hidden: usize,
    pub head_mid: usize,
    pub head_out: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            dim: 32,
            heads: 4,
            blocks: 2,
            mlp_hidden: 64,
            head_mid: 32,
            head_out: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Block {
    cross_view: AttentionBlock,
    temporal: AttentionBlock,
    mlp: MlpBlock,
}

#[derive(Debug, Clone, PartialEq)]
struct Layout {
    embed: Linear,
    blocks: Vec<Block>,
    conv1: Conv2d,
    conv2: Conv2d,
    conv3: Conv2d,
}

/// Scale applied to the final convolution per raw channel.
const OUT_SCALE: [f64; RAW_CHANNELS] = [
    0.5, 0.5, 0.5, 2.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 2.0, 2.0, 2.0, 2.0, 4.0,
];
/// Isotropic footprint of a fresh Gaussian relative to its pixel size.
const FOOTPRINT: f64 = 0.6;
const INIT_OPACITY: f64 = 0.9;

fn build_layout(cfg: &DecoderConfig) -> (Layout, ParamBuilder) {
    let mut pb = ParamBuilder::new();
    let embed = Linear::new(&mut pb, LATENT_CHANNELS + PLUCKER, cfg.dim, 1.0);
    let blocks = (0..cfg.blocks)
        .map(|_| Block {
            cross_view: AttentionBlock::new(&mut pb, cfg.dim, cfg.heads),
            temporal: AttentionBlock::new(&mut pb, cfg.dim, cfg.heads),
            mlp: MlpBlock::new(&mut pb, cfg.dim, cfg.mlp_hidden),
        })
        .collect();
    let conv1 = Conv2d::new(&mut pb, cfg.dim + PLUCKER, cfg.head_mid, 3, 1.0);
    let conv2 = Conv2d::new(&mut pb, cfg.head_mid + PLUCKER, cfg.head_out, 3, 1.0);
    let conv3 = Conv2d::new(&mut pb, cfg.head_out + LATENT_CHANNELS, RAW_CHANNELS, 1, 0.1);
    (
        Layout {
            embed,
            blocks,
            conv1,
            conv2,
            conv3,
        },
        pb,
    )
}

/// Groups for cross-view attention: per timestep, every `(view, y, x)` token.
pub fn cross_view_groups(views: usize, timesteps: usize, h: usize, w: usize) -> Vec<Vec<usize>> {
    (0..timesteps)
        .map(|t| {
            (0..views)
                .flat_map(|v| (0..h * w).map(move |p| (v * timesteps + t) * h * w + p))
                .collect()
        })
        .collect()
}

/// Groups for temporal attention: per `(view, y, x)`, every timestep.
pub fn temporal_groups(views: usize, timesteps: usize, h: usize, w: usize) -> Vec<Vec<usize>> {
    (0..views)
        .flat_map(|v| {
            (0..h * w).map(move |p| (0..timesteps).map(|t| (v * timesteps + t) * h * w + p).collect())
        })
        .collect()
}

/// Cross-view attention on a `V×T×H×W×C` token tensor: tokens of all views
/// at one timestep attend to each other.
pub fn cross_view_attention(
    block: &AttentionBlock,
    p: &[f64],
    x: &[f64],
    dims: (usize, usize, usize, usize),
) -> Result<(Vec<f64>, AttentionCache), DecoderError> {
    let (v, t, h, w) = dims;
    if x.len() != v * t * h * w * block.dim {
        return Err(DecoderError::Shape(format!("tensor of {} values for {dims:?}x{}", x.len(), block.dim)));
    }
    Ok(block.forward(p, x, &cross_view_groups(v, t, h, w)))
}

/// Temporal attention: each `(view, pixel)` token stream attends over time.
pub fn temporal_attention(
    block: &AttentionBlock,
    p: &[f64],
    x: &[f64],
    dims: (usize, usize, usize, usize),
) -> Result<(Vec<f64>, AttentionCache), DecoderError> {
    let (v, t, h, w) = dims;
    if x.len() != v * t * h * w * block.dim {
        return Err(DecoderError::Shape(format!("tensor of {} values for {dims:?}x{}", x.len(), block.dim)));
    }
    Ok(block.forward(p, x, &temporal_groups(v, t, h, w)))
}

struct BlockCache {
    cv: AttentionCache,
    tm: AttentionCache,
    mlp: MlpCache,
}

struct HeadCache {
    c1: ConvCache,
    a1: Vec<f64>,
    c2: ConvCache,
    a2: Vec<f64>,
    c3: ConvCache,
}

pub struct DecodeCache {
    dims: (usize, usize, usize, usize),
    tokens_in: Vec<f64>,
    blocks: Vec<BlockCache>,
    heads: Vec<HeadCache>,
}

/// The decoder `D_φ` with its flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianDecoder {
    pub cfg: DecoderConfig,
    pub seed: u64,
    pub params: Vec<f64>,
    layout: Layout,
}

impl GaussianDecoder {
    pub fn new(cfg: DecoderConfig, seed: u64) -> Self {
        let (layout, pb) = build_layout(&cfg);
        let mut params = pb.build(seed);
        // Identity orientation by default; other channels start from the latent skip.
        params[layout.conv3.b + ch::ROT] = 1.0 / OUT_SCALE[ch::ROT];
        Self {
            cfg,
            seed,
            params,
            layout,
        }
    }

    pub fn from_parts(cfg: DecoderConfig, seed: u64, params: Vec<f64>) -> Option<Self> {
        if cfg.heads == 0 || !cfg.dim.is_multiple_of(cfg.heads) {
            return None;
        }
        let (layout, pb) = build_layout(&cfg);
        (pb.len() == params.len()).then_some(Self {
            cfg,
            seed,
            params,
            layout,
        })
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    fn check_inputs(&self, latent: &MultiModalLatent, rays: &DecoderRays) -> Result<(), DecoderError> {
        latent.validate()?;
        if rays.views() != latent.views {
            return Err(DecoderError::Shape(format!(
                "{} ray maps for {} latent views",
                rays.views(),
                latent.views
            )));
        }
        for (v, q) in rays.quarter.iter().enumerate() {
            if q.width != latent.width || q.height != latent.height {
                return Err(DecoderError::Shape(format!(
                    "view {v}: rays {}x{} at latent resolution, latent {}x{}",
                    q.width, q.height, latent.width, latent.height
                )));
            }
        }
        Ok(())
    }

    /// Raw per-pixel records for every `(view, timestep)`, index `v·T + t`.
    pub fn decode(&self, latent: &MultiModalLatent, rays: &DecoderRays) -> Result<Vec<PixelGaussianParams>, DecoderError> {
        self.check_inputs(latent, rays)?;
        let (out, _) = self.forward(&self.params, latent, rays);
        for (f, grid) in out.iter().enumerate() {
            if let Some(i) = grid.data.iter().position(|v| !v.is_finite()) {
                return Err(DecoderError::CorruptForward(format!(
                    "frame {f}: non-finite {} at pixel {}",
                    ch::name(i % RAW_CHANNELS),
                    i / RAW_CHANNELS
                )));
            }
        }
        Ok(out)
    }

    pub(crate) fn forward(
        &self,
        p: &[f64],
        latent: &MultiModalLatent,
        rays: &DecoderRays,
    ) -> (Vec<PixelGaussianParams>, DecodeCache) {
        let (nv, nt, h, w) = (latent.views, latent.timesteps, latent.height, latent.width);
        let d = self.cfg.dim;
        let n_tok = nv * nt * h * w;
        let mut tokens_in = Vec::with_capacity(n_tok * (LATENT_CHANNELS + PLUCKER));
        for v in 0..nv {
            let pl = rays.quarter[v].plucker_channels();
            for t in 0..nt {
                let frame = latent.frame(v, t);
                for (px, pk) in pl.iter().enumerate() {
                    tokens_in.extend_from_slice(&frame[px * LATENT_CHANNELS..(px + 1) * LATENT_CHANNELS]);
                    tokens_in.extend_from_slice(pk);
                }
            }
        }
        let mut x = self.layout.embed.forward(p, &tokens_in, n_tok);
        let cv_groups = cross_view_groups(nv, nt, h, w);
        let tm_groups = temporal_groups(nv, nt, h, w);
        let mut blocks = Vec::with_capacity(self.layout.blocks.len());
        for b in &self.layout.blocks {
            let (y, cv) = b.cross_view.forward(p, &x, &cv_groups);
            let (y, tm) = b.temporal.forward(p, &y, &tm_groups);
            let (y, mlp) = b.mlp.forward(p, &y);
            blocks.push(BlockCache { cv, tm, mlp });
            x = y;
        }
        let results: Vec<(PixelGaussianParams, HeadCache)> = (0..nv * nt)
            .into_par_iter()
            .map(|f| {
                let v = f / nt;
                let feat = &x[f * h * w * d..(f + 1) * h * w * d];
                self.head_forward(p, feat, latent.frame(v, f % nt), latent, rays, v, h, w)
            })
            .collect();
        let (out, heads) = results.into_iter().unzip();
        (
            out,
            DecodeCache {
                dims: (nv, nt, h, w),
                tokens_in,
                blocks,
                heads,
            },
        )
    }

    #[allow(clippy::too_many_arguments)]
    fn head_forward(
        &self,
        p: &[f64],
        feat: &[f64],
        lat: &[f64],
        latent: &MultiModalLatent,
        rays: &DecoderRays,
        v: usize,
        h: usize,
        w: usize,
    ) -> (PixelGaussianParams, HeadCache) {
        let d = self.cfg.dim;
        let l = &self.layout;
        let (h2, w2, h4, w4) = (2 * h, 2 * w, 4 * h, 4 * w);
        let mut fm = vec![0.0; d * h * w];
        for px in 0..h * w {
            for c in 0..d {
                fm[c * h * w + px] = feat[px * d + c];
            }
        }
        let mut in1 = upsample2x(&fm, d, h, w);
        in1.extend(plucker_channel_major(&rays.half[v]));
        let (a1, c1) = l.conv1.forward(p, &in1, h2, w2);
        let s1 = silu_vec(&a1);
        let mut in2 = upsample2x(&s1, self.cfg.head_mid, h2, w2);
        in2.extend(plucker_channel_major(&rays.full[v]));
        let (a2, c2) = l.conv2.forward(p, &in2, h4, w4);
        let mut in3 = silu_vec(&a2);
        let n = h4 * w4;
        let lat_up = latent_upsampled(lat, h, w);
        in3.extend_from_slice(&lat_up);
        let (o, c3) = l.conv3.forward(p, &in3, h4, w4);
        let fx = rays.intrinsics[v].fx;
        let mut grid = PixelGaussianParams::zeros(w4, h4);
        for px in 0..n {
            let skip = latent_skip(
                [
                    lat_up[px],
                    lat_up[n + px],
                    lat_up[2 * n + px],
                    lat_up[3 * n + px],
                    lat_up[4 * n + px],
                ],
                latent,
                fx,
            );
            let rec = grid.pixel_mut(px);
            for c in 0..RAW_CHANNELS {
                rec[c] = skip[c] + OUT_SCALE[c] * o[c * n + px];
            }
        }
        (
            grid,
            HeadCache {
                c1,
                a1,
                c2,
                a2,
                c3,
            },
        )
    }

    /// Backpropagates gradients on the raw grids (pixel-major, per frame)
    /// into `g`.
    pub(crate) fn backward(&self, p: &[f64], cache: &DecodeCache, d_raw: &[Vec<f64>], g: &mut [f64]) {
        let (nv, nt, h, w) = cache.dims;
        let d = self.cfg.dim;
        let n_frames = nv * nt;
        let parts: Vec<(Vec<f64>, Vec<f64>)> = (0..n_frames)
            .into_par_iter()
            .map(|f| {
                let mut gp = vec![0.0; p.len()];
                let gfeat = self.head_backward(p, &cache.heads[f], &d_raw[f], h, w, &mut gp);
                (gfeat, gp)
            })
            .collect();
        let mut gx = Vec::with_capacity(n_frames * h * w * d);
        for (gfeat, gp) in parts {
            gx.extend(gfeat);
            for (a, b) in g.iter_mut().zip(gp) {
                *a += b;
            }
        }
        let cv_groups = cross_view_groups(nv, nt, h, w);
        let tm_groups = temporal_groups(nv, nt, h, w);
        for (b, bc) in self.layout.blocks.iter().zip(&cache.blocks).rev() {
            let gy = b.mlp.backward(p, &bc.mlp, &gx, g);
            let gy = b.temporal.backward(p, &bc.tm, &tm_groups, &gy, g);
            gx = b.cross_view.backward(p, &bc.cv, &cv_groups, &gy, g);
        }
        self.layout.embed.backward_params(&cache.tokens_in, nv * nt * h * w, &gx, g);
    }

    fn head_backward(&self, p: &[f64], hc: &HeadCache, d_raw: &[f64], h: usize, w: usize, g: &mut [f64]) -> Vec<f64> {
        let d = self.cfg.dim;
        let l = &self.layout;
        let (h2, w2, h4, w4) = (2 * h, 2 * w, 4 * h, 4 * w);
        let n = h4 * w4;
        let mut go = vec![0.0; RAW_CHANNELS * n];
        for px in 0..n {
            for c in 0..RAW_CHANNELS {
                go[c * n + px] = OUT_SCALE[c] * d_raw[px * RAW_CHANNELS + c];
            }
        }
        let g_in3 = l.conv3.backward(p, &hc.c3, &go, g);
        let g_s2 = &g_in3[..self.cfg.head_out * n];
        let g_a2 = silu_backward(&hc.a2, g_s2);
        let g_in2 = l.conv2.backward(p, &hc.c2, &g_a2, g);
        let g_u2 = &g_in2[..self.cfg.head_mid * n];
        let g_s1 = upsample2x_backward(g_u2, self.cfg.head_mid, h2, w2);
        let g_a1 = silu_backward(&hc.a1, &g_s1);
        let g_in1 = l.conv1.backward(p, &hc.c1, &g_a1, g);
        let g_u1 = &g_in1[..d * h2 * w2];
        let g_fm = upsample2x_backward(g_u1, d, h, w);
        let mut gfeat = vec![0.0; h * w * d];
        for px in 0..h * w {
            for c in 0..d {
                gfeat[px * d + c] = g_fm[c * h * w + px];
            }
        }
        gfeat
    }
}

/// Nearest-neighbour 4× upsampling of one latent frame, channel-major.
fn latent_upsampled(lat: &[f64], h: usize, w: usize) -> Vec<f64> {
    let (h4, w4) = (h * DOWNSAMPLE, w * DOWNSAMPLE);
    let mut out = vec![0.0; LATENT_CHANNELS * h4 * w4];
    for c in 0..LATENT_CHANNELS {
        for y in 0..h4 {
            for x in 0..w4 {
                out[(c * h4 + y) * w4 + x] = lat[((y / DOWNSAMPLE) * w + x / DOWNSAMPLE) * LATENT_CHANNELS + c];
            }
        }
    }
    out
}

/// Fixed raw record implied by the latent alone: color and depth from the
/// latent, a footprint of about one pixel, high opacity and the mask.
fn latent_skip(l: [f64; LATENT_CHANNELS], latent: &MultiModalLatent, fx: f64) -> [f64; RAW_CHANNELS] {
    let depth = latent.denormalize_depth(l[3].clamp(-1.0, 1.0)).max(0.2);
    let mut r = [0.0; RAW_CHANNELS];
    r[ch::DEPTH] = softplus_inv(depth - 0.1);
    let s = (FOOTPRINT * depth / fx).ln();
    for i in 0..3 {
        r[ch::SCALE + i] = s;
        r[ch::COLOR + i] = logit(l[i].clamp(0.02, 0.98));
    }
    r[ch::OPACITY] = logit(INIT_OPACITY);
    r[ch::MASK] = 4.0 * (2.0 * l[4].clamp(0.0, 1.0) - 1.0);
    r
}
