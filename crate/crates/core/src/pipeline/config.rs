//! Pipeline configuration as a flat `key = value` document.
//!
//! Every key has a default; `to_text` prints all of them, so the output of
//! `--print-config` is itself a complete config file.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use super::PipelineError;
use crate::decoder::{DecoderConfig, DecoderTrainConfig, LossWeights};
use crate::flow::{FlowTrainConfig, Schedule};
use crate::kv::{join_list, parse_list, KvDoc};
use crate::nn::{OptimizerConfig, OptimizerKind};
use crate::raster::RasterConfig;
use crate::synthdata::SceneSpec;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSettings {
    pub count: usize,
    pub views: usize,
    pub timesteps: usize,
    pub height: usize,
    pub width: usize,
    pub n_static: usize,
    pub n_dynamic: usize,
    pub symmetric: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowSettings {
    /// Empty means `<out_dir>/checkpoints/flow.rflw`.
    pub checkpoint: Option<PathBuf>,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub final_lr_scale: f64,
    pub hidden: usize,
    pub layers: usize,
    pub cond_dropout: f64,
    pub euler_steps: usize,
    pub guidance: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderSettings {
    pub checkpoint: Option<PathBuf>,
    pub steps: usize,
    pub lr: f64,
    pub final_lr_scale: f64,
    pub depth_weight: f64,
    pub mask_weight: f64,
    pub targets_per_step: usize,
    pub clip_len: usize,
    pub checkpoint_every: usize,
    pub dim: usize,
    pub heads: usize,
    pub blocks: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefinerSettings {
    pub checkpoint: Option<PathBuf>,
    /// Run the refiner during `infer` and `reconstruct`.
    pub enabled: bool,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub final_lr_scale: f64,
    pub hidden: usize,
    pub layers: usize,
    pub mix_ratio: f64,
    pub euler_steps: usize,
    /// Lateral offsets whose renders become training pairs.
    pub train_dy: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InferSettings {
    pub dy: Vec<f64>,
    /// Also write pre-refinement renders and aggregated Gaussians.
    pub dump: bool,
    /// Relative depth tolerance of the visibility test used for metrics.
    pub visibility_tol: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub scenes: PathBuf,
    /// Scenes for `infer`, `reconstruct` and `render`; defaults to `scenes`.
    pub eval_scenes: Option<PathBuf>,
    pub synth: SynthSettings,
    pub flow: FlowSettings,
    pub decoder: DecoderSettings,
    pub refiner: RefinerSettings,
    pub infer: InferSettings,
    pub raster: RasterConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let dec = DecoderTrainConfig::default();
        let arch = DecoderConfig::default();
        Self {
            seed: 0,
            out_dir: PathBuf::from("out"),
            scenes: PathBuf::from("data/scenes"),
            eval_scenes: None,
            synth: SynthSettings {
                count: 4,
                views: 2,
                timesteps: 4,
                height: 32,
                width: 32,
                n_static: 1500,
                n_dynamic: 2,
                symmetric: false,
            },
            flow: FlowSettings {
                checkpoint: None,
                steps: 2000,
                batch: 32,
                lr: 1e-3,
                final_lr_scale: 1.0,
                hidden: 128,
                layers: 3,
                cond_dropout: 0.1,
                euler_steps: Schedule::default().steps,
                guidance: 1.0,
            },
            decoder: DecoderSettings {
                checkpoint: None,
                steps: dec.steps,
                lr: dec.optimizer.lr,
                final_lr_scale: dec.optimizer.final_lr_scale,
                depth_weight: dec.weights.depth,
                mask_weight: dec.weights.mask,
                targets_per_step: dec.targets_per_step,
                clip_len: dec.clip_len,
                checkpoint_every: dec.checkpoint_every,
                dim: arch.dim,
                heads: arch.heads,
                blocks: arch.blocks,
            },
            refiner: RefinerSettings {
                checkpoint: None,
                enabled: true,
                steps: 1500,
                batch: 32,
                lr: 1e-3,
                final_lr_scale: 0.05,
                hidden: 128,
                layers: 2,
                mix_ratio: 0.5,
                euler_steps: Schedule::default().steps,
                train_dy: vec![0.0, 1.0, -1.0, 2.0, -2.0],
            },
            infer: InferSettings {
                dy: vec![0.0, 2.0, -2.0],
                dump: false,
                visibility_tol: 0.05,
            },
            raster: RasterConfig::default(),
        }
    }
}

fn bad(key: &str, value: &str, msg: impl Display) -> PipelineError {
    PipelineError::Config(format!("key `{key}`: invalid value `{value}`: {msg}"))
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, PipelineError>
where
    T::Err: Display,
{
    value.parse().map_err(|e| bad(key, value, e))
}

fn finite(key: &str, value: &str) -> Result<f64, PipelineError> {
    let v: f64 = parse(key, value)?;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(bad(key, value, "not finite"))
    }
}

fn finite_list(key: &str, value: &str) -> Result<Vec<f64>, PipelineError> {
    let v: Vec<f64> = parse_list(value).map_err(|e| bad(key, value, e))?;
    if v.iter().all(|x| x.is_finite()) {
        Ok(v)
    } else {
        Err(bad(key, value, "not finite"))
    }
}

fn opt_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

fn path_text(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

fn opt_threshold(key: &str, value: &str) -> Result<Option<f64>, PipelineError> {
    if value == "off" {
        Ok(None)
    } else {
        finite(key, value).map(Some)
    }
}

fn threshold_text(t: Option<f64>) -> String {
    t.map_or("off".to_string(), |v| v.to_string())
}

impl PipelineConfig {
    /// Defaults overridden by every key in `doc`.
    pub fn from_kv(doc: &KvDoc) -> Result<Self, PipelineError> {
        let mut cfg = Self::default();
        for (k, v) in doc.entries() {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self, PipelineError> {
        Self::from_kv(&KvDoc::parse(text)?)
    }

    /// Applies a single override; unknown keys are an error.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), PipelineError> {
        let v = value.trim();
        match key {
            "seed" => self.seed = parse(key, v)?,
            "out_dir" => self.out_dir = PathBuf::from(v),
            "data.scenes" => self.scenes = PathBuf::from(v),
            "data.eval_scenes" => self.eval_scenes = opt_path(v),
            "synth.count" => self.synth.count = parse(key, v)?,
            "synth.views" => self.synth.views = parse(key, v)?,
            "synth.timesteps" => self.synth.timesteps = parse(key, v)?,
            "synth.height" => self.synth.height = parse(key, v)?,
            "synth.width" => self.synth.width = parse(key, v)?,
            "synth.n_static" => self.synth.n_static = parse(key, v)?,
            "synth.n_dynamic" => self.synth.n_dynamic = parse(key, v)?,
            "synth.symmetric" => self.synth.symmetric = parse(key, v)?,
            "flow.checkpoint" => self.flow.checkpoint = opt_path(v),
            "flow.steps" => self.flow.steps = parse(key, v)?,
            "flow.batch" => self.flow.batch = parse(key, v)?,
            "flow.lr" => self.flow.lr = finite(key, v)?,
            "flow.final_lr_scale" => self.flow.final_lr_scale = finite(key, v)?,
            "flow.hidden" => self.flow.hidden = parse(key, v)?,
            "flow.layers" => self.flow.layers = parse(key, v)?,
            "flow.cond_dropout" => self.flow.cond_dropout = finite(key, v)?,
            "flow.euler_steps" => self.flow.euler_steps = parse(key, v)?,
            "flow.guidance" => self.flow.guidance = finite(key, v)?,
            "decoder.checkpoint" => self.decoder.checkpoint = opt_path(v),
            "decoder.steps" => self.decoder.steps = parse(key, v)?,
            "decoder.lr" => self.decoder.lr = finite(key, v)?,
            "decoder.final_lr_scale" => self.decoder.final_lr_scale = finite(key, v)?,
            "decoder.weight.depth" => self.decoder.depth_weight = finite(key, v)?,
            "decoder.weight.mask" => self.decoder.mask_weight = finite(key, v)?,
            "decoder.targets_per_step" => self.decoder.targets_per_step = parse(key, v)?,
            "decoder.clip_len" => self.decoder.clip_len = parse(key, v)?,
            "decoder.checkpoint_every" => self.decoder.checkpoint_every = parse(key, v)?,
            "decoder.dim" => self.decoder.dim = parse(key, v)?,
            "decoder.heads" => self.decoder.heads = parse(key, v)?,
            "decoder.blocks" => self.decoder.blocks = parse(key, v)?,
            "refiner.checkpoint" => self.refiner.checkpoint = opt_path(v),
            "refiner.enabled" => self.refiner.enabled = parse(key, v)?,
            "refiner.steps" => self.refiner.steps = parse(key, v)?,
            "refiner.batch" => self.refiner.batch = parse(key, v)?,
            "refiner.lr" => self.refiner.lr = finite(key, v)?,
            "refiner.final_lr_scale" => self.refiner.final_lr_scale = finite(key, v)?,
            "refiner.hidden" => self.refiner.hidden = parse(key, v)?,
            "refiner.layers" => self.refiner.layers = parse(key, v)?,
            "refiner.mix_ratio" => self.refiner.mix_ratio = finite(key, v)?,
            "refiner.euler_steps" => self.refiner.euler_steps = parse(key, v)?,
            "refiner.train_dy" => self.refiner.train_dy = finite_list(key, v)?,
            "infer.dy" => self.infer.dy = finite_list(key, v)?,
            "infer.dump" => self.infer.dump = parse(key, v)?,
            "infer.visibility_tol" => self.infer.visibility_tol = finite(key, v)?,
            "raster.tile_size" => self.raster.tile_size = parse(key, v)?,
            "raster.skip_alpha" => self.raster.skip_alpha = opt_threshold(key, v)?,
            "raster.early_out" => self.raster.early_out = opt_threshold(key, v)?,
            "raster.dilation" => self.raster.dilation = finite(key, v)?,
            "raster.near" => self.raster.near = finite(key, v)?,
            "raster.alpha_max" => self.raster.alpha_max = finite(key, v)?,
            _ => return Err(PipelineError::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    /// Applies `key=value` overrides in order.
    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<(), PipelineError> {
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| PipelineError::Config(format!("override `{o}` is not key=value")))?;
            self.set(k.trim(), v)?;
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let fail = |m: &str| Err(PipelineError::Config(m.to_string()));
        if self.flow.euler_steps == 0 || self.refiner.euler_steps == 0 {
            return fail("euler_steps must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.refiner.mix_ratio) {
            return fail("refiner.mix_ratio must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.flow.cond_dropout) {
            return fail("flow.cond_dropout must lie in [0, 1]");
        }
        if self.raster.tile_size == 0 {
            return fail("raster.tile_size must be positive");
        }
        if !(self.raster.alpha_max > 0.0 && self.raster.alpha_max < 1.0) {
            return fail("raster.alpha_max must lie in (0, 1)");
        }
        if self.decoder.heads == 0 || !self.decoder.dim.is_multiple_of(self.decoder.heads) {
            return fail("decoder.dim must be a positive multiple of decoder.heads");
        }
        if !self.infer.dy.iter().chain(&self.refiner.train_dy).all(|d| d.is_finite()) {
            return fail("lateral offsets must be finite");
        }
        if self.infer.visibility_tol <= 0.0 {
            return fail("infer.visibility_tol must be positive");
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KvDoc {
        let mut d = KvDoc::new();
        d.push("seed", self.seed);
        d.push("out_dir", self.out_dir.display());
        d.push("data.scenes", self.scenes.display());
        d.push("data.eval_scenes", path_text(&self.eval_scenes));
        let s = &self.synth;
        d.push("synth.count", s.count);
        d.push("synth.views", s.views);
        d.push("synth.timesteps", s.timesteps);
        d.push("synth.height", s.height);
        d.push("synth.width", s.width);
        d.push("synth.n_static", s.n_static);
        d.push("synth.n_dynamic", s.n_dynamic);
        d.push("synth.symmetric", s.symmetric);
        let f = &self.flow;
        d.push("flow.checkpoint", path_text(&f.checkpoint));
        d.push("flow.steps", f.steps);
        d.push("flow.batch", f.batch);
        d.push("flow.lr", f.lr);
        d.push("flow.final_lr_scale", f.final_lr_scale);
        d.push("flow.hidden", f.hidden);
        d.push("flow.layers", f.layers);
        d.push("flow.cond_dropout", f.cond_dropout);
        d.push("flow.euler_steps", f.euler_steps);
        d.push("flow.guidance", f.guidance);
        let c = &self.decoder;
        d.push("decoder.checkpoint", path_text(&c.checkpoint));
        d.push("decoder.steps", c.steps);
        d.push("decoder.lr", c.lr);
        d.push("decoder.final_lr_scale", c.final_lr_scale);
        d.push("decoder.weight.depth", c.depth_weight);
        d.push("decoder.weight.mask", c.mask_weight);
        d.push("decoder.targets_per_step", c.targets_per_step);
        d.push("decoder.clip_len", c.clip_len);
        d.push("decoder.checkpoint_every", c.checkpoint_every);
        d.push("decoder.dim", c.dim);
        d.push("decoder.heads", c.heads);
        d.push("decoder.blocks", c.blocks);
        let r = &self.refiner;
        d.push("refiner.checkpoint", path_text(&r.checkpoint));
        d.push("refiner.enabled", r.enabled);
        d.push("refiner.steps", r.steps);
        d.push("refiner.batch", r.batch);
        d.push("refiner.lr", r.lr);
        d.push("refiner.final_lr_scale", r.final_lr_scale);
        d.push("refiner.hidden", r.hidden);
        d.push("refiner.layers", r.layers);
        d.push("refiner.mix_ratio", r.mix_ratio);
        d.push("refiner.euler_steps", r.euler_steps);
        d.push("refiner.train_dy", join_list(&r.train_dy));
        d.push("infer.dy", join_list(&self.infer.dy));
        d.push("infer.dump", self.infer.dump);
        d.push("infer.visibility_tol", self.infer.visibility_tol);
        let x = &self.raster;
        d.push("raster.tile_size", x.tile_size);
        d.push("raster.skip_alpha", threshold_text(x.skip_alpha));
        d.push("raster.early_out", threshold_text(x.early_out));
        d.push("raster.dilation", x.dilation);
        d.push("raster.near", x.near);
        d.push("raster.alpha_max", x.alpha_max);
        d
    }

    pub fn to_text(&self) -> String {
        self.to_kv().to_text("worldsplat pipeline config")
    }

    pub fn flow_checkpoint(&self) -> PathBuf {
        self.flow.checkpoint.clone().unwrap_or_else(|| self.out_dir.join("checkpoints/flow.rflw"))
    }

    pub fn decoder_checkpoint(&self) -> PathBuf {
        self.decoder
            .checkpoint
            .clone()
            .unwrap_or_else(|| self.out_dir.join("checkpoints/decoder.gdec"))
    }

    pub fn refiner_checkpoint(&self) -> PathBuf {
        self.refiner
            .checkpoint
            .clone()
            .unwrap_or_else(|| self.out_dir.join("checkpoints/refiner.rflw"))
    }

    pub fn eval_scenes(&self) -> &Path {
        self.eval_scenes.as_deref().unwrap_or(&self.scenes)
    }

    /// Spec of the `i`-th generated scene.
    pub fn scene_spec(&self, i: usize) -> SceneSpec {
        let s = &self.synth;
        SceneSpec {
            seed: self.seed.wrapping_add(i as u64),
            views: s.views,
            timesteps: s.timesteps,
            height: s.height,
            width: s.width,
            n_static: s.n_static,
            n_dynamic: s.n_dynamic,
            symmetric: s.symmetric,
        }
    }

    pub fn decoder_arch(&self) -> DecoderConfig {
        DecoderConfig {
            dim: self.decoder.dim,
            heads: self.decoder.heads,
            blocks: self.decoder.blocks,
            ..DecoderConfig::default()
        }
    }

    pub fn decoder_train(&self) -> DecoderTrainConfig {
        let c = &self.decoder;
        DecoderTrainConfig {
            steps: c.steps,
            optimizer: OptimizerConfig {
                kind: OptimizerKind::Adam,
                lr: c.lr,
                final_lr_scale: c.final_lr_scale,
                ..DecoderTrainConfig::default().optimizer
            },
            targets_per_step: c.targets_per_step,
            clip_len: c.clip_len,
            weights: LossWeights {
                perceptual: 0.0,
                depth: c.depth_weight,
                mask: c.mask_weight,
            },
            raster: self.raster,
            seed: self.seed,
            checkpoint_dir: None,
            checkpoint_every: c.checkpoint_every,
        }
    }

    pub fn flow_train(&self) -> FlowTrainConfig {
        let f = &self.flow;
        FlowTrainConfig {
            steps: f.steps,
            batch_size: f.batch,
            optimizer: OptimizerConfig {
                lr: f.lr,
                final_lr_scale: f.final_lr_scale,
                ..OptimizerConfig::default()
            },
            cond_dropout: f.cond_dropout,
            seed: self.seed,
        }
    }

    /// Refiner training uses Adam: the render skip path makes plain SGD
    /// crawl on image-sized latents.
    pub fn refiner_train(&self) -> FlowTrainConfig {
        let r = &self.refiner;
        FlowTrainConfig {
            steps: r.steps,
            batch_size: r.batch,
            optimizer: OptimizerConfig {
                kind: OptimizerKind::Adam,
                lr: r.lr,
                final_lr_scale: r.final_lr_scale,
                ..OptimizerConfig::default()
            },
            cond_dropout: self.flow.cond_dropout,
            seed: self.seed.wrapping_add(1),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn printed_defaults_parse_back() {
        let cfg = PipelineConfig::default();
        let back = PipelineConfig::parse(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.to_text(), cfg.to_text());
    }

    #[test]
    fn overrides_and_rejections() {
        let mut cfg = PipelineConfig::default();
        cfg.apply_overrides(&["infer.dy = 1.5,-3".into(), "raster.skip_alpha=off".into()])
            .unwrap();
        assert_eq!(cfg.infer.dy, vec![1.5, -3.0]);
        assert_eq!(cfg.raster.skip_alpha, None);
        assert!(matches!(cfg.set("nope", "1"), Err(PipelineError::UnknownKey(_))));
        assert!(cfg.set("infer.dy", "1,nan").is_err());
        assert!(cfg.apply_overrides(&["refiner.mix_ratio=2".into()]).is_err());
        assert!(cfg.apply_overrides(&["seed".into()]).is_err());
    }

    #[test]
    fn checkpoint_paths_default_under_out_dir() {
        let mut cfg = PipelineConfig::default();
        cfg.set("out_dir", "/tmp/x").unwrap();
        assert_eq!(cfg.decoder_checkpoint(), PathBuf::from("/tmp/x/checkpoints/decoder.gdec"));
        cfg.set("decoder.checkpoint", "d.gdec").unwrap();
        assert_eq!(cfg.decoder_checkpoint(), PathBuf::from("d.gdec"));
    }
}
