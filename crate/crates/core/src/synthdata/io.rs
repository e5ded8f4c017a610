//! Scene directories.
//!
//! ```text
//! manifest.txt           spec, tag, background, depth range, rig, trajectory
//! conditions.txt         condition manifest
//! gaussians_t{t}.gs4d    world-frame Gaussians at timestep t
//! rgb_v{v}_t{t}.ppm      target color
//! depth_v{v}_t{t}.dpth   target ray-length depth
//! mask_v{v}_t{t}.pgm     target dynamic mask
//! ```

use std::fs;
use std::path::Path;

use super::{render_targets, FrameTargets, SceneSpec, SynthError, SyntheticScene};
use crate::conditions::{read_conditions, write_conditions, ConditionFileError, EgoTrajectory};
use crate::format::{read_text, write_atomic, FormatError};
use crate::gaussians::{read_gs4d, write_gs4d};
use crate::geometry::{pose_from_kv, pose_to_kv, CameraRig, Vec3};
use crate::kv::{join_list, KvDoc};
use crate::raster::{read_dpth, read_pgm, read_ppm, write_dpth, write_pgm, write_ppm};

pub const SCENE_MANIFEST: &str = "manifest.txt";
const CONDITIONS: &str = "conditions.txt";
const FORMAT_VERSION: u32 = 1;

fn gaussians_file(t: usize) -> String {
    format!("gaussians_t{t}.gs4d")
}

fn frame_file(kind: &str, v: usize, t: usize, ext: &str) -> String {
    format!("{kind}_v{v}_t{t}.{ext}")
}

fn manifest(scene: &SyntheticScene) -> String {
    let s = &scene.spec;
    let mut doc = KvDoc::new();
    doc.push("scene.format", FORMAT_VERSION);
    doc.push("scene.seed", s.seed);
    doc.push("scene.views", s.views);
    doc.push("scene.timesteps", s.timesteps);
    doc.push("scene.height", s.height);
    doc.push("scene.width", s.width);
    doc.push("scene.n_static", s.n_static);
    doc.push("scene.n_dynamic", s.n_dynamic);
    doc.push("scene.symmetric", s.symmetric);
    doc.push("scene.tag", &scene.tag);
    let b = scene.background;
    doc.push("scene.background", join_list(&[b.x, b.y, b.z]));
    doc.push("scene.depth_min", scene.depth_range.0);
    doc.push("scene.depth_max", scene.depth_range.1);
    doc.push("scene.vehicles", scene.vehicle_sizes.len());
    for (i, n) in scene.vehicle_sizes.iter().enumerate() {
        doc.push(format!("vehicle.{i}.gaussians"), n);
    }
    scene.rig.to_kv(&mut doc);
    for (t, pose) in scene.trajectory.poses.iter().enumerate() {
        doc.push(format!("ego.{t}.time"), scene.trajectory.timestamps[t]);
        pose_to_kv(&mut doc, &format!("ego.{t}"), pose);
    }
    doc.to_text("worldsplat synthetic scene")
}

/// Writes every scene file into `dir` (created if missing), each atomically.
pub fn write_scene(dir: &Path, scene: &SyntheticScene) -> Result<(), SynthError> {
    fs::create_dir_all(dir).map_err(|e| FormatError::io(dir, e))?;
    write_atomic(&dir.join(SCENE_MANIFEST), manifest(scene).as_bytes())?;
    write_conditions(&dir.join(CONDITIONS), &scene.conditions)?;
    for (t, set) in scene.gaussians.iter().enumerate() {
        write_gs4d(&dir.join(gaussians_file(t)), set)?;
    }
    let nt = scene.spec.timesteps;
    for (f, tg) in scene.targets.iter().enumerate() {
        let (v, t) = (f / nt, f % nt);
        write_ppm(&dir.join(frame_file("rgb", v, t, "ppm")), &tg.rgb)?;
        write_dpth(&dir.join(frame_file("depth", v, t, "dpth")), &tg.depth)?;
        write_pgm(&dir.join(frame_file("mask", v, t, "pgm")), &tg.mask)?;
    }
    Ok(())
}

fn mismatch(msg: impl Into<String>) -> SynthError {
    SynthError::Mismatch(msg.into())
}

pub fn read_scene(dir: &Path) -> Result<SyntheticScene, SynthError> {
    let doc = KvDoc::parse(&read_text(&dir.join(SCENE_MANIFEST))?)?;
    let version: u32 = doc.parsed("scene.format")?;
    if version != FORMAT_VERSION {
        return Err(FormatError::Unsupported {
            what: "scene format",
            value: version as u64,
        }
        .into());
    }
    let spec = SceneSpec {
        seed: doc.parsed("scene.seed")?,
        views: doc.parsed("scene.views")?,
        timesteps: doc.parsed("scene.timesteps")?,
        height: doc.parsed("scene.height")?,
        width: doc.parsed("scene.width")?,
        n_static: doc.parsed("scene.n_static")?,
        n_dynamic: doc.parsed("scene.n_dynamic")?,
        symmetric: doc.parsed("scene.symmetric")?,
    };
    spec.validate()?;
    let bg = doc.finite_list("scene.background")?;
    if bg.len() != 3 {
        return Err(mismatch("background needs 3 values"));
    }
    let depth_range = (doc.finite("scene.depth_min")?, doc.finite("scene.depth_max")?);
    let n_vehicles: usize = doc.parsed("scene.vehicles")?;
    if n_vehicles > spec.n_dynamic {
        return Err(mismatch(format!("{n_vehicles} vehicles for n_dynamic {}", spec.n_dynamic)));
    }
    let vehicle_sizes = (0..n_vehicles)
        .map(|i| doc.parsed(&format!("vehicle.{i}.gaussians")))
        .collect::<Result<Vec<usize>, _>>()?;
    let rig = CameraRig::from_kv(&doc)?;
    if rig.cameras.len() != spec.views
        || rig
            .cameras
            .iter()
            .any(|c| c.intrinsics.width != spec.width || c.intrinsics.height != spec.height)
    {
        return Err(mismatch("rig does not match the scene size"));
    }
    let mut poses = Vec::with_capacity(spec.timesteps);
    let mut times = Vec::with_capacity(spec.timesteps);
    for t in 0..spec.timesteps {
        times.push(doc.finite(&format!("ego.{t}.time"))?);
        poses.push(pose_from_kv(&doc, &format!("ego.{t}"))?);
    }
    let trajectory = EgoTrajectory::new(poses, times)?;
    let conditions = read_conditions(&dir.join(CONDITIONS)).map_err(|e| match e {
        ConditionFileError::Format(f) => SynthError::Format(f),
        ConditionFileError::Condition(c) => SynthError::Condition(c),
    })?;

    let n_dyn: usize = vehicle_sizes.iter().sum();
    let mut gaussians = Vec::with_capacity(spec.timesteps);
    for t in 0..spec.timesteps {
        let set = read_gs4d(&dir.join(gaussians_file(t)))?;
        let dynamic = set.dynamic.iter().filter(|d| **d).count();
        let statics = set.dynamic.len() - dynamic;
        if dynamic != n_dyn || set.dynamic[statics..].iter().any(|d| !d) {
            return Err(mismatch(format!("timestep {t}: dynamic Gaussians out of order or miscounted")));
        }
        gaussians.push(set);
    }
    let mut targets = Vec::with_capacity(spec.views * spec.timesteps);
    for v in 0..spec.views {
        for t in 0..spec.timesteps {
            let rgb = read_ppm(&dir.join(frame_file("rgb", v, t, "ppm")))?;
            let depth = read_dpth(&dir.join(frame_file("depth", v, t, "dpth")))?;
            let mask = read_pgm(&dir.join(frame_file("mask", v, t, "pgm")))?;
            let dims = [(rgb.width, rgb.height), (depth.width, depth.height), (mask.width, mask.height)];
            if dims.iter().any(|&d| d != (spec.width, spec.height)) {
                return Err(mismatch(format!("frame ({v}, {t}) has the wrong size")));
            }
            targets.push(FrameTargets { rgb, depth, mask });
        }
    }
    Ok(SyntheticScene {
        spec,
        tag: conditions.tag.clone(),
        rig,
        trajectory,
        background: Vec3::new(bg[0], bg[1], bg[2]),
        gaussians,
        vehicle_sizes,
        targets,
        conditions,
        depth_range,
    })
}

/// Re-renders the stored Gaussians and checks that every stored target is
/// reproduced exactly.
pub fn verify_scene(dir: &Path) -> Result<SyntheticScene, SynthError> {
    let scene = read_scene(dir)?;
    let fresh = render_targets(&scene);
    let nt = scene.spec.timesteps;
    for (f, (a, b)) in fresh.iter().zip(&scene.targets).enumerate() {
        if a != b {
            return Err(mismatch(format!("frame (view {}, timestep {}) differs from its render", f / nt, f % nt)));
        }
    }
    Ok(scene)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::generate_scene;

    fn spec() -> SceneSpec {
        SceneSpec {
            seed: 21,
            height: 16,
            width: 16,
            timesteps: 2,
            n_static: 300,
            n_dynamic: 2,
            ..Default::default()
        }
    }

    fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
        let mut v: Vec<_> = fs::read_dir(dir)
            .unwrap()
            .map(|e| {
                let e = e.unwrap();
                (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
            })
            .collect();
        v.sort();
        v
    }

    #[test]
    fn write_read_write_is_identical() {
        let scene = generate_scene(&spec()).unwrap();
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        write_scene(a.path(), &scene).unwrap();
        let back = verify_scene(a.path()).unwrap();
        assert_eq!(back, scene);
        write_scene(b.path(), &back).unwrap();
        assert_eq!(dir_bytes(a.path()), dir_bytes(b.path()));
    }

    #[test]
    fn same_seed_same_files() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        write_scene(a.path(), &generate_scene(&spec()).unwrap()).unwrap();
        write_scene(b.path(), &generate_scene(&spec()).unwrap()).unwrap();
        assert_eq!(dir_bytes(a.path()), dir_bytes(b.path()));
    }

    #[test]
    fn tampered_target_fails_verification() {
        let scene = generate_scene(&spec()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_scene(dir.path(), &scene).unwrap();
        let mut rgb = scene.targets[1].rgb.clone();
        rgb.data[5] ^= 1;
        write_ppm(&dir.path().join(frame_file("rgb", 0, 1, "ppm")), &rgb).unwrap();
        assert!(matches!(verify_scene(dir.path()), Err(SynthError::Mismatch(_))));
        fs::remove_file(dir.path().join(gaussians_file(0))).unwrap();
        assert!(read_scene(dir.path()).is_err());
    }
}
