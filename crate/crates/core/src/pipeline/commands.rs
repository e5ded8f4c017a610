//! Filesystem-level commands behind the CLI. Each returns the lines it
//! wants printed; nothing here depends on wall-clock time, so reruns with
//! the same config write identical bytes.
//!
//! Output layout under `out_dir`:
//!
//! ```text
//! checkpoints/{flow.rflw, decoder.gdec, refiner.rflw}   default checkpoint paths
//! decoder_checkpoints/decoder_step{N}.gdec               periodic decoder snapshots
//! flow_loss.csv, decoder_metrics.csv, refiner_loss.csv   training logs
//! {infer,reconstruct}/metrics.csv, summary.txt
//! {infer,reconstruct}/<scene>/dy_<±d.dd>/                final frames per track
//! render/<scene>/{original,dy_<±d.dd>}/                  decoder renders
//! metrics.csv                                            `metrics` command output
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use super::{
    compute_metrics, decode_scene, infer, infer_reconstruct, refiner_field_config, render_along, track_metrics,
    track_truth, FrameData, InferOutput, MetricsReport, Models, PipelineConfig, PipelineError,
};
use crate::decoder::{evaluate_decoder, metrics_csv, read_decoder, train_decoder, write_decoder, GaussianDecoder, DOWNSAMPLE};
use crate::flow::{
    loss_history_csv, read_field, train_flow as fit_flow, train_refiner as fit_refiner, FieldConfig, FlowDatum,
    RefinerPair, VelocityField,
};
use crate::conditions::ConditionEncoderConfig;
use crate::format::{write_atomic, FormatError};
use crate::gaussians::GaussianSet;
use crate::kv::KvDoc;
use crate::raster::{
    read_dpth, read_pgm, read_ppm, write_dpth, write_pgm, write_ppm, DepthImage, GrayImage, RenderOutput, RgbImage,
};
use crate::synthdata::{encode_latent, generate_scenes, read_scene, write_scene, SyntheticScene, SCENE_MANIFEST, SCENE_TAGS};

fn mkdir(dir: &Path) -> Result<(), PipelineError> {
    fs::create_dir_all(dir).map_err(|e| FormatError::io(dir, e).into())
}

fn write_text(path: &Path, text: &str) -> Result<(), PipelineError> {
    if let Some(parent) = path.parent() {
        mkdir(parent)?;
    }
    Ok(write_atomic(path, text.as_bytes())?)
}

fn require(path: &Path, what: &'static str) -> Result<(), PipelineError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(PipelineError::Missing {
            what,
            path: path.to_path_buf(),
        })
    }
}

/// Scene directories directly under `dir`, sorted by name.
pub fn load_scenes(dir: &Path) -> Result<Vec<(String, SyntheticScene)>, PipelineError> {
    let missing = || PipelineError::Missing {
        what: "scene directory",
        path: dir.to_path_buf(),
    };
    let entries = fs::read_dir(dir).map_err(|_| missing())?;
    let mut names: Vec<String> = entries
        .filter_map(|e| e.ok())
        .filter(|e| e.path().join(SCENE_MANIFEST).is_file())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(missing());
    }
    names
        .into_iter()
        .map(|n| {
            let scene = read_scene(&dir.join(&n))?;
            Ok((n, scene))
        })
        .collect()
}

pub fn track_dir_name(dy: f64) -> String {
    // -0.0 would otherwise print as "-0.00".
    let dy = if dy == 0.0 { 0.0 } else { dy };
    format!("dy_{dy:+.2}")
}

fn frame_name(kind: &str, v: usize, t: usize, ext: &str) -> String {
    format!("{kind}_v{v}_t{t}.{ext}")
}

fn rgb_image(width: usize, height: usize, rgb: &[f64]) -> RgbImage {
    let f: Vec<f32> = rgb.iter().map(|&x| x as f32).collect();
    RgbImage::from_f32(width, height, &f)
}

fn write_render(dir: &Path, v: usize, t: usize, r: &RenderOutput, rgb: &[f64], mask: &[bool]) -> Result<(), PipelineError> {
    write_ppm(&dir.join(frame_name("rgb", v, t, "ppm")), &rgb_image(r.width, r.height, rgb))?;
    write_dpth(
        &dir.join(frame_name("depth", v, t, "dpth")),
        &DepthImage {
            width: r.width,
            height: r.height,
            data: r.depth.clone(),
        },
    )?;
    write_pgm(
        &dir.join(frame_name("mask", v, t, "pgm")),
        &GrayImage::from_mask(r.width, r.height, mask),
    )?;
    Ok(())
}

pub fn gen_synth(cfg: &PipelineConfig) -> Result<Vec<String>, PipelineError> {
    let specs: Vec<_> = (0..cfg.synth.count).map(|i| cfg.scene_spec(i)).collect();
    let scenes = generate_scenes(&specs)?;
    mkdir(&cfg.scenes)?;
    let mut lines = Vec::new();
    for (i, s) in scenes.iter().enumerate() {
        let dir = cfg.scenes.join(format!("scene_{i:03}"));
        write_scene(&dir, s)?;
        lines.push(format!(
            "wrote {} (seed {}, tag {}, {} Gaussians)",
            dir.display(),
            s.spec.seed,
            s.tag,
            s.gaussians.first().map_or(0, |g| g.gaussians.len())
        ));
    }
    Ok(lines)
}

pub fn train_flow(cfg: &PipelineConfig) -> Result<Vec<String>, PipelineError> {
    let scenes = load_scenes(&cfg.scenes)?;
    let latents = scenes
        .iter()
        .map(|(_, s)| encode_latent(s, DOWNSAMPLE))
        .collect::<Result<Vec<_>, _>>()?;
    let dim = latents[0].data.len();
    if let Some((n, _)) = scenes.iter().zip(&latents).find(|(_, l)| l.data.len() != dim) {
        return Err(PipelineError::Shape(format!("scene {} has a different latent size", n.0)));
    }
    let tags = SCENE_TAGS.iter().map(|s| s.to_string()).collect();
    let field_cfg = FieldConfig {
        hidden: cfg.flow.hidden,
        layers: cfg.flow.layers,
        ..FieldConfig::new(dim)
    }
    .with_conditions(ConditionEncoderConfig::default(), tags);
    let field = VelocityField::new(field_cfg, cfg.seed);
    let data = scenes
        .iter()
        .zip(latents)
        .map(|((_, s), l)| FlowDatum::conditioned(&field, l.data, &s.conditions))
        .collect::<Result<Vec<_>, _>>()?;
    let out = fit_flow(field, &data, &cfg.flow_train())?;
    let path = cfg.flow_checkpoint();
    if let Some(p) = path.parent() {
        mkdir(p)?;
    }
    crate::flow::write_field(&path, &out.field)?;
    write_text(&cfg.out_dir.join("flow_loss.csv"), &loss_history_csv(&out.history))?;
    let last = out.history.last().map_or(f64::NAN, |h| h.1);
    Ok(vec![format!(
        "flow: {} scenes, latent {dim}, {} steps, last loss {last:.6}; wrote {}",
        scenes.len(),
        cfg.flow.steps,
        path.display()
    )])
}

pub fn train_decoder_cmd(cfg: &PipelineConfig) -> Result<Vec<String>, PipelineError> {
    let scenes = load_scenes(&cfg.scenes)?;
    let dscenes = scenes
        .iter()
        .map(|(_, s)| s.to_decoder_scene())
        .collect::<Result<Vec<_>, _>>()?;
    let mut tc = cfg.decoder_train();
    if tc.checkpoint_every > 0 {
        let dir = cfg.out_dir.join("decoder_checkpoints");
        mkdir(&dir)?;
        tc.checkpoint_dir = Some(dir);
    }
    let dec = GaussianDecoder::new(cfg.decoder_arch(), cfg.seed);
    let out = train_decoder(dec, &dscenes, &tc, None)?;
    let path = cfg.decoder_checkpoint();
    if let Some(p) = path.parent() {
        mkdir(p)?;
    }
    write_decoder(&path, &out.decoder)?;
    write_text(&cfg.out_dir.join("decoder_metrics.csv"), &metrics_csv(&out.metrics))?;
    let mut lines = vec![format!("decoder: {} steps; wrote {}", tc.steps, path.display())];
    for ((name, _), ds) in scenes.iter().zip(&dscenes) {
        let e = evaluate_decoder(&out.decoder, ds, &cfg.raster)?;
        lines.push(format!(
            "{name}: psnr_mean={:.4} psnr_min={:.4} iou={:.4}",
            e.mean_psnr, e.min_psnr, e.iou
        ));
    }
    Ok(lines)
}

fn load_decoder(cfg: &PipelineConfig) -> Result<GaussianDecoder, PipelineError> {
    let path = cfg.decoder_checkpoint();
    require(&path, "decoder checkpoint")?;
    Ok(read_decoder(&path)?)
}

fn load_field(path: &Path, what: &'static str) -> Result<VelocityField, PipelineError> {
    require(path, what)?;
    Ok(read_field(path)?)
}

/// The refiner, when enabled: an explicitly configured path must exist; the
/// default path is optional.
fn load_refiner(cfg: &PipelineConfig) -> Result<Option<VelocityField>, PipelineError> {
    if !cfg.refiner.enabled {
        return Ok(None);
    }
    let path = cfg.refiner_checkpoint();
    if cfg.refiner.checkpoint.is_none() && !path.is_file() {
        log::warn!("no refiner checkpoint at {}; frames are not refined", path.display());
        return Ok(None);
    }
    load_field(&path, "refiner checkpoint").map(Some)
}

pub fn train_refiner_cmd(cfg: &PipelineConfig) -> Result<Vec<String>, PipelineError> {
    let decoder = load_decoder(cfg)?;
    let scenes = load_scenes(&cfg.scenes)?;
    let (w, h) = (scenes[0].1.spec.width, scenes[0].1.spec.height);
    if scenes.iter().any(|(_, s)| (s.spec.width, s.spec.height) != (w, h)) {
        return Err(PipelineError::Shape("refiner scenes must share one image size".into()));
    }
    let tags = SCENE_TAGS.iter().map(|s| s.to_string()).collect();
    let field = VelocityField::new(
        refiner_field_config(w, h, cfg.refiner.hidden, cfg.refiner.layers, Some(tags)),
        cfg.seed,
    );
    let enc = field.encoder().expect("refiner is conditioned");
    let mut pairs = Vec::new();
    for (_, s) in &scenes {
        let latent = encode_latent(s, DOWNSAMPLE)?;
        let scene4d = decode_scene(&decoder, &latent, s)?;
        for &dy in &cfg.refiner.train_dy {
            let conditions = s.conditions.perturbed(dy);
            let features = enc.features(&conditions)?;
            let (renders, _) = render_along(cfg, &scene4d, s, &conditions.trajectory);
            let truth = track_truth(s, &conditions.trajectory);
            for (r, t) in renders.iter().zip(truth) {
                pairs.push(RefinerPair {
                    clean: t.rgb,
                    degraded: r.rgb.iter().map(|&x| x as f64).collect(),
                    features: Some(features.clone()),
                });
            }
        }
    }
    let out = fit_refiner(field, &pairs, cfg.refiner.mix_ratio, &cfg.refiner_train())?;
    let path = cfg.refiner_checkpoint();
    if let Some(p) = path.parent() {
        mkdir(p)?;
    }
    crate::flow::write_field(&path, &out.field)?;
    write_text(&cfg.out_dir.join("refiner_loss.csv"), &loss_history_csv(&out.history))?;
    Ok(vec![format!(
        "refiner: {} pairs, {} steps; wrote {}",
        pairs.len(),
        cfg.refiner.steps,
        path.display()
    )])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Generate,
    Reconstruct,
}

impl Mode {
    pub fn dir_name(self) -> &'static str {
        match self {
            Mode::Generate => "infer",
            Mode::Reconstruct => "reconstruct",
        }
    }
}

/// Per-scene, per-track metrics of one inference run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunMetrics {
    pub scene: String,
    pub dy: f64,
    pub report: MetricsReport,
}

fn write_outputs(cfg: &PipelineConfig, dir: &Path, out: &InferOutput, nt: usize) -> Result<(), PipelineError> {
    for track in &out.tracks {
        let tdir = dir.join(track_dir_name(track.dy));
        mkdir(&tdir)?;
        for (f, r) in track.renders.iter().enumerate() {
            let (v, t) = (f / nt, f % nt);
            write_render(&tdir, v, t, r, &track.frames[f], &track.masks[f])?;
            if cfg.infer.dump {
                let raw: Vec<f64> = r.rgb.iter().map(|&x| x as f64).collect();
                write_ppm(&tdir.join(frame_name("render", v, t, "ppm")), &rgb_image(r.width, r.height, &raw))?;
            }
        }
    }
    if cfg.infer.dump {
        for (t, gs) in out.scene4d.timesteps.iter().enumerate() {
            let set = GaussianSet {
                gaussians: gs.clone(),
                dynamic: out.scene4d.provenance[t].iter().map(|p| p.dynamic).collect(),
            };
            crate::gaussians::write_gs4d(&dir.join(format!("gaussians_t{t}.gs4d")), &set)?;
        }
    }
    Ok(())
}

/// Runs inference over the evaluation scenes and writes frames and metrics.
pub fn run_inference(cfg: &PipelineConfig, mode: Mode) -> Result<(Vec<String>, Vec<RunMetrics>), PipelineError> {
    let decoder = load_decoder(cfg)?;
    let flow = match mode {
        Mode::Generate => Some(load_field(&cfg.flow_checkpoint(), "flow checkpoint")?),
        Mode::Reconstruct => None,
    };
    let models = Models {
        flow,
        decoder,
        refiner: load_refiner(cfg)?,
    };
    let scenes = load_scenes(cfg.eval_scenes())?;
    let root = cfg.out_dir.join(mode.dir_name());
    mkdir(&root)?;
    let mut csv = format!("scene,dy,view,timestep,{}\n", MetricsReport::csv_header());
    let mut summary = KvDoc::new();
    let mut lines = Vec::new();
    let mut all = Vec::new();
    for (i, (name, scene)) in scenes.iter().enumerate() {
        let out = match mode {
            Mode::Generate => infer(cfg, &models, scene, i as u64)?,
            Mode::Reconstruct => infer_reconstruct(cfg, &models, scene, i as u64)?,
        };
        let nt = scene.spec.timesteps;
        write_outputs(cfg, &root.join(name), &out, nt)?;
        for track in &out.tracks {
            let report = track_metrics(cfg, scene, track)?;
            for (f, m) in report.frames.iter().enumerate() {
                csv.push_str(&format!("{name},{},{},{},{}\n", track.dy, f / nt, f % nt, MetricsReport::csv_row(m)));
            }
            let key = format!("{name}.{}", track_dir_name(track.dy).replace('+', "p").replace('-', "m"));
            summary.push(format!("{key}.psnr_mean"), report.mean_psnr);
            summary.push(format!("{key}.psnr_min"), report.min_psnr);
            summary.push(format!("{key}.rgb_l1"), report.mean_rgb_l1);
            summary.push(format!("{key}.depth_l1"), report.mean_depth_l1);
            summary.push(format!("{key}.iou"), report.mean_iou);
            lines.push(format!("{name} {}: {}", track_dir_name(track.dy), report.summary_line()));
            all.push(RunMetrics {
                scene: name.clone(),
                dy: track.dy,
                report,
            });
        }
    }
    write_text(&root.join("metrics.csv"), &csv)?;
    write_text(
        &root.join("summary.txt"),
        &summary.to_text(&format!("{} metrics on visible pixels", mode.dir_name())),
    )?;
    Ok((lines, all))
}

/// Decoder renders of the clean latent along the recorded track and each
/// configured offset.
pub fn render_cmd(cfg: &PipelineConfig) -> Result<Vec<String>, PipelineError> {
    let decoder = load_decoder(cfg)?;
    let scenes = load_scenes(cfg.eval_scenes())?;
    let root = cfg.out_dir.join("render");
    let mut lines = Vec::new();
    for (name, scene) in &scenes {
        let latent = encode_latent(scene, DOWNSAMPLE)?;
        let scene4d = decode_scene(&decoder, &latent, scene)?;
        let nt = scene.spec.timesteps;
        let mut tracks: Vec<(String, _)> = vec![("original".to_string(), scene.trajectory.clone())];
        for &dy in &cfg.infer.dy {
            tracks.push((track_dir_name(dy), scene.conditions.perturbed(dy).trajectory));
        }
        for (dir_name, traj) in tracks {
            let dir = root.join(name).join(&dir_name);
            mkdir(&dir)?;
            let (renders, masks) = render_along(cfg, &scene4d, scene, &traj);
            for (f, r) in renders.iter().enumerate() {
                let rgb: Vec<f64> = r.rgb.iter().map(|&x| x as f64).collect();
                write_render(&dir, f / nt, f % nt, r, &rgb, &masks[f])?;
            }
            lines.push(format!("wrote {}", dir.display()));
        }
    }
    Ok(lines)
}

fn read_frame(dir: &Path, rgb_name: &str) -> Result<FrameData, PipelineError> {
    let rgb = read_ppm(&dir.join(rgb_name))?;
    let depth_path = dir.join(rgb_name.replacen("rgb_", "depth_", 1).replace(".ppm", ".dpth"));
    let mask_path = dir.join(rgb_name.replacen("rgb_", "mask_", 1).replace(".ppm", ".pgm"));
    let depth = if depth_path.is_file() {
        read_dpth(&depth_path)?.data.iter().map(|&d| d as f64).collect()
    } else {
        Vec::new()
    };
    let mask = if mask_path.is_file() {
        read_pgm(&mask_path)?.to_mask()
    } else {
        Vec::new()
    };
    Ok(FrameData {
        width: rgb.width,
        height: rgb.height,
        rgb: rgb.to_f64(),
        depth,
        mask,
    })
}

/// Compares every `rgb_*.ppm` in `truth` with the same-named file in `pred`,
/// plus matching depth and mask files where both sides have them.
pub fn metrics_cmd(cfg: &PipelineConfig, pred: &Path, truth: &Path) -> Result<Vec<String>, PipelineError> {
    let entries = fs::read_dir(truth).map_err(|e| FormatError::io(truth, e))?;
    let mut names: Vec<String> = entries
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.starts_with("rgb_") && n.ends_with(".ppm"))
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(PipelineError::Missing {
            what: "rgb frames",
            path: truth.to_path_buf(),
        });
    }
    let mut p_frames = Vec::new();
    let mut t_frames = Vec::new();
    for n in &names {
        let path = pred.join(n);
        require(&path, "predicted frame")?;
        p_frames.push(read_frame(pred, n)?);
        t_frames.push(read_frame(truth, n)?);
    }
    let report = compute_metrics(&p_frames, &t_frames, None)?;
    let mut csv = format!("frame,{}\n", MetricsReport::csv_header());
    for (n, m) in names.iter().zip(&report.frames) {
        csv.push_str(&format!("{n},{}\n", MetricsReport::csv_row(m)));
    }
    let out: PathBuf = cfg.out_dir.join("metrics.csv");
    write_text(&out, &csv)?;
    Ok(vec![report.summary_line(), format!("wrote {}", out.display())])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn track_names() {
        assert_eq!(track_dir_name(2.0), "dy_+2.00");
        assert_eq!(track_dir_name(-0.0), "dy_+0.00");
        assert_eq!(track_dir_name(-1.25), "dy_-1.25");
    }
}
