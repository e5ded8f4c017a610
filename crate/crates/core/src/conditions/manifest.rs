//! Condition manifest: a key-value document with the trajectory, per-timestep
//! boxes, the tag and base64-encoded sketch rasters.

use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;

use super::{BEVSketch, Box3D, ConditionError, ConditionSet, EgoTrajectory, SKETCH_CHANNELS};
use crate::format::{read_text, write_atomic, FormatError};
use crate::geometry::{pose_from_kv, pose_to_kv, Vec3, CONVENTION};
use crate::kv::{join_list, KvDoc, KvError};

/// Upper bound on list sizes accepted from a manifest.
const MAX_ITEMS: usize = 1 << 16;

pub fn encode_conditions(c: &ConditionSet) -> String {
    let mut doc = KvDoc::new();
    doc.push("cond.convention", CONVENTION);
    doc.push("cond.tag", &c.tag);
    doc.push("cond.timesteps", c.trajectory.len());
    for (t, pose) in c.trajectory.poses.iter().enumerate() {
        doc.push(format!("traj.{t}.time"), c.trajectory.timestamps[t]);
        pose_to_kv(&mut doc, &format!("traj.{t}"), pose);
    }
    for (t, list) in c.boxes.iter().enumerate() {
        doc.push(format!("box.{t}.count"), list.len());
        for (i, b) in list.iter().enumerate() {
            let p = format!("box.{t}.{i}");
            doc.push(format!("{p}.center"), join_list(&[b.center.x, b.center.y, b.center.z]));
            doc.push(format!("{p}.size"), join_list(&[b.size.x, b.size.y, b.size.z]));
            doc.push(format!("{p}.yaw"), b.yaw);
            doc.push(format!("{p}.class"), &b.class_tag);
        }
    }
    doc.push("sketch.count", c.sketch.len());
    if let Some(first) = c.sketch.first() {
        doc.push("sketch.res", first.res);
        doc.push("sketch.extent_mm", first.extent_mm);
    }
    for (t, s) in c.sketch.iter().enumerate() {
        doc.push(format!("sketch.{t}.data"), STANDARD.encode(&s.data));
    }
    doc.to_text("worldsplat conditions")
}

fn vec3(doc: &KvDoc, key: &str) -> Result<Vec3, ConditionError> {
    let v = doc.finite_list(key)?;
    if v.len() != 3 {
        return Err(KvError::Invalid {
            key: key.into(),
            value: doc.get(key).unwrap_or("").into(),
            msg: "expected 3 values".into(),
        }
        .into());
    }
    Ok(Vec3::new(v[0], v[1], v[2]))
}

fn bounded(doc: &KvDoc, key: &str) -> Result<usize, ConditionError> {
    let n: usize = doc.parsed(key)?;
    if n > MAX_ITEMS {
        return Err(ConditionError::Misaligned(format!("{key} = {n} is too large")));
    }
    Ok(n)
}

pub fn decode_conditions(text: &str) -> Result<ConditionSet, ConditionError> {
    let doc = KvDoc::parse(text)?;
    let conv = doc.require("cond.convention")?;
    if conv != CONVENTION {
        return Err(ConditionError::InvalidTrajectory(format!("unsupported convention {conv:?}")));
    }
    let tag = doc.require("cond.tag")?.to_string();
    let steps = bounded(&doc, "cond.timesteps")?;
    let mut poses = Vec::with_capacity(steps);
    let mut times = Vec::with_capacity(steps);
    for t in 0..steps {
        times.push(doc.finite(&format!("traj.{t}.time"))?);
        poses.push(pose_from_kv(&doc, &format!("traj.{t}"))?);
    }
    let trajectory = EgoTrajectory::new(poses, times)?;
    let mut boxes = Vec::with_capacity(steps);
    for t in 0..steps {
        let n = bounded(&doc, &format!("box.{t}.count"))?;
        let mut list = Vec::with_capacity(n);
        for i in 0..n {
            let p = format!("box.{t}.{i}");
            list.push(Box3D::new(
                vec3(&doc, &format!("{p}.center"))?,
                vec3(&doc, &format!("{p}.size"))?,
                doc.finite(&format!("{p}.yaw"))?,
                doc.require(&format!("{p}.class"))?,
            )?);
        }
        boxes.push(list);
    }
    let n_sketch = bounded(&doc, "sketch.count")?;
    let mut sketch = Vec::with_capacity(n_sketch);
    if n_sketch > 0 {
        let res = bounded(&doc, "sketch.res")?;
        let extent_mm: u64 = doc.parsed("sketch.extent_mm")?;
        if res == 0 || res > 1024 {
            return Err(ConditionError::InvalidSketch(format!("resolution {res}")));
        }
        for t in 0..n_sketch {
            let key = format!("sketch.{t}.data");
            let data = STANDARD
                .decode(doc.require(&key)?)
                .map_err(|e| ConditionError::InvalidSketch(format!("{key}: {e}")))?;
            let s = BEVSketch { res, extent_mm, data };
            if s.data.len() != SKETCH_CHANNELS * res * res {
                return Err(ConditionError::InvalidSketch(format!("{key}: {} cells", s.data.len())));
            }
            sketch.push(s);
        }
    }
    let set = ConditionSet {
        sketch,
        boxes,
        trajectory,
        tag,
    };
    set.validate()?;
    Ok(set)
}

#[derive(Debug, thiserror::Error)]
pub enum ConditionFileError {
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Condition(#[from] ConditionError),
}

pub fn write_conditions(path: &Path, c: &ConditionSet) -> Result<(), FormatError> {
    write_atomic(path, encode_conditions(c).as_bytes())
}

pub fn read_conditions(path: &Path) -> Result<ConditionSet, ConditionFileError> {
    Ok(decode_conditions(&read_text(path)?)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::PoseSE3;
    use nalgebra::UnitQuaternion;

    #[test]
    fn roundtrip_is_byte_stable() {
        let traj = EgoTrajectory::new(
            (0..3)
                .map(|t| {
                    PoseSE3::new(
                        UnitQuaternion::from_euler_angles(0.0, 0.0, 0.1 * t as f64),
                        Vec3::new(t as f64 * 1.1, 0.3, 0.0),
                    )
                })
                .collect(),
            vec![0.0, 0.5, 1.0],
        )
        .unwrap();
        let mut sk = BEVSketch::new(8, 32.0);
        sk.set(1, 3, 4, 1);
        let c = ConditionSet {
            sketch: vec![sk; 3],
            boxes: vec![
                vec![Box3D::new(Vec3::new(1.0, -2.0, 0.7), Vec3::new(4.0, 2.0, 1.4), -1.0, "car").unwrap()],
                vec![],
                vec![],
            ],
            trajectory: traj,
            tag: "suburb".into(),
        };
        let text = encode_conditions(&c);
        let back = decode_conditions(&text).unwrap();
        assert_eq!(back, c);
        assert_eq!(encode_conditions(&back), text);
    }

    #[test]
    fn rejects_bad_manifests() {
        assert!(decode_conditions("cond.tag = x\n").is_err());
        let c = ConditionSet {
            trajectory: EgoTrajectory::from_poses(vec![PoseSE3::identity()]),
            boxes: vec![vec![]],
            ..ConditionSet::tag_only("x")
        };
        let text = encode_conditions(&c);
        assert!(decode_conditions(&text).is_ok());
        assert!(decode_conditions(&text.replace("cond.timesteps = 1", "cond.timesteps = 2")).is_err());
        assert!(decode_conditions(&text.replace("sketch.count = 0", "sketch.count = 1")).is_err());
    }
}
