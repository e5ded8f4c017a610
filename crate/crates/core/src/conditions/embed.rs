//! Condition embedding: box corners through a shared MLP and mean-pooled,
//! trajectory pose deltas through an MLP, a learned tag table and a pooled
//! sketch branch, concatenated and projected to the output width.

use super::{ConditionError, ConditionSet, SKETCH_CHANNELS};
use crate::geometry::Vec3;
use crate::nn::{silu_backward, silu_vec, Init, Linear, ParamBuilder};

const BOX_FEATURES: usize = 25;
const POSE_FEATURES: usize = 7;
const CORNER_SCALE: f64 = 20.0;
const TRANSLATION_SCALE: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConditionEncoderConfig {
    pub max_timesteps: usize,
    pub box_hidden: usize,
    pub box_dim: usize,
    pub traj_hidden: usize,
    pub traj_dim: usize,
    pub tag_dim: usize,
    pub sketch_pool: usize,
    pub sketch_dim: usize,
    pub out_dim: usize,
}

impl Default for ConditionEncoderConfig {
    fn default() -> Self {
        Self {
            max_timesteps: 8,
            box_hidden: 32,
            box_dim: 16,
            traj_hidden: 32,
            traj_dim: 16,
            tag_dim: 8,
            sketch_pool: 4,
            sketch_dim: 8,
            out_dim: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConditionEncoder {
    pub cfg: ConditionEncoderConfig,
    pub tags: Vec<String>,
    box1: Linear,
    box2: Linear,
    traj1: Linear,
    traj2: Linear,
    tag_table: usize,
    sketch: Linear,
    out: Linear,
}

/// Fixed numeric inputs extracted from a [`ConditionSet`].
#[derive(Debug, Clone, PartialEq)]
pub struct CondFeatures {
    pub boxes: Vec<f64>,
    pub n_boxes: usize,
    pub traj: Vec<f64>,
    pub tag: usize,
    pub sketch: Vec<f64>,
}

pub struct CondCache {
    feats: CondFeatures,
    box_pre: Vec<f64>,
    box_act: Vec<f64>,
    traj_pre: Vec<f64>,
    traj_act: Vec<f64>,
    sketch_pre: Vec<f64>,
    concat: Vec<f64>,
}

impl ConditionEncoder {
    pub fn new(pb: &mut ParamBuilder, cfg: ConditionEncoderConfig, tags: Vec<String>) -> Self {
        let box1 = Linear::new(pb, BOX_FEATURES, cfg.box_hidden, 1.0);
        let box2 = Linear::new(pb, cfg.box_hidden, cfg.box_dim, 1.0);
        let traj1 = Linear::new(pb, cfg.max_timesteps * POSE_FEATURES, cfg.traj_hidden, 1.0);
        let traj2 = Linear::new(pb, cfg.traj_hidden, cfg.traj_dim, 1.0);
        let tag_table = pb.alloc(tags.len().max(1) * cfg.tag_dim, Init::Normal(1.0));
        let sketch_in = SKETCH_CHANNELS * cfg.sketch_pool * cfg.sketch_pool;
        let sketch = Linear::new(pb, sketch_in, cfg.sketch_dim, 1.0);
        let concat = cfg.box_dim + cfg.traj_dim + cfg.tag_dim + cfg.sketch_dim;
        let out = Linear::new(pb, concat, cfg.out_dim, 1.0);
        Self {
            cfg,
            tags,
            box1,
            box2,
            traj1,
            traj2,
            tag_table,
            sketch,
            out,
        }
    }

    pub fn out_dim(&self) -> usize {
        self.cfg.out_dim
    }

    pub fn tag_index(&self, tag: &str) -> Result<usize, ConditionError> {
        self.tags
            .iter()
            .position(|t| t == tag)
            .ok_or_else(|| ConditionError::UnknownTag(tag.to_string()))
    }

    pub fn tag_row<'a>(&self, p: &'a [f64], tag: usize) -> &'a [f64] {
        let d = self.cfg.tag_dim;
        &p[self.tag_table + tag * d..self.tag_table + (tag + 1) * d]
    }

    pub fn features(&self, c: &ConditionSet) -> Result<CondFeatures, ConditionError> {
        c.validate()?;
        let tag = self.tag_index(&c.tag)?;
        let t_len = c.trajectory.len();
        let t_norm = (t_len.max(2) - 1) as f64;
        let mut boxes = Vec::new();
        let mut n_boxes = 0;
        for (t, list) in c.boxes.iter().enumerate() {
            let inv = c.trajectory.poses[t].inverse();
            for b in list {
                for corner in b.corners() {
                    let e = inv.transform_point(&corner) / CORNER_SCALE;
                    boxes.extend_from_slice(&[e.x, e.y, e.z]);
                }
                boxes.push(t as f64 / t_norm);
                n_boxes += 1;
            }
        }
        let mut traj = vec![0.0; self.cfg.max_timesteps * POSE_FEATURES];
        if let Some(first) = c.trajectory.poses.first() {
            let inv = first.inverse();
            for (t, pose) in c.trajectory.poses.iter().take(self.cfg.max_timesteps).enumerate() {
                let rel = inv.compose(pose);
                let d: Vec3 = rel.translation / TRANSLATION_SCALE;
                let q = rel.wxyz();
                traj[t * POSE_FEATURES..(t + 1) * POSE_FEATURES]
                    .copy_from_slice(&[d.x, d.y, d.z, q[0] - 1.0, q[1], q[2], q[3]]);
            }
        }
        let pool = self.cfg.sketch_pool;
        let mut sketch = vec![0.0; SKETCH_CHANNELS * pool * pool];
        for s in &c.sketch {
            for ch in 0..SKETCH_CHANNELS {
                for r in 0..s.res {
                    for col in 0..s.res {
                        let cell = (ch * pool + r * pool / s.res) * pool + col * pool / s.res;
                        sketch[cell] += s.get(ch, r, col) as f64;
                    }
                }
            }
        }
        if let Some(s) = c.sketch.first() {
            let per_block = (s.res * s.res) as f64 / (pool * pool) as f64;
            let norm = per_block * c.sketch.len() as f64;
            sketch.iter_mut().for_each(|v| *v /= norm);
        }
        Ok(CondFeatures {
            boxes,
            n_boxes,
            traj,
            tag,
            sketch,
        })
    }

    pub fn forward(&self, p: &[f64], feats: &CondFeatures) -> (Vec<f64>, CondCache) {
        let cfg = &self.cfg;
        let box_pre = self.box1.forward(p, &feats.boxes, feats.n_boxes);
        let box_act = silu_vec(&box_pre);
        let box_out = self.box2.forward(p, &box_act, feats.n_boxes);
        let mut pooled = vec![0.0; cfg.box_dim];
        if feats.n_boxes > 0 {
            for row in box_out.chunks(cfg.box_dim) {
                for (a, b) in pooled.iter_mut().zip(row) {
                    *a += b;
                }
            }
            pooled.iter_mut().for_each(|v| *v /= feats.n_boxes as f64);
        }
        let traj_pre = self.traj1.forward(p, &feats.traj, 1);
        let traj_act = silu_vec(&traj_pre);
        let traj_out = self.traj2.forward(p, &traj_act, 1);
        let sketch_pre = self.sketch.forward(p, &feats.sketch, 1);
        let sketch_out = silu_vec(&sketch_pre);

        let mut concat = pooled;
        concat.extend_from_slice(&traj_out);
        concat.extend_from_slice(self.tag_row(p, feats.tag));
        concat.extend_from_slice(&sketch_out);
        let emb = self.out.forward(p, &concat, 1);
        (
            emb,
            CondCache {
                feats: feats.clone(),
                box_pre,
                box_act,
                traj_pre,
                traj_act,
                sketch_pre,
                concat,
            },
        )
    }

    pub fn backward(&self, p: &[f64], cache: &CondCache, g_emb: &[f64], g: &mut [f64]) {
        let cfg = &self.cfg;
        let g_concat = self.out.backward(p, &cache.concat, 1, g_emb, g);
        let (g_pool, rest) = g_concat.split_at(cfg.box_dim);
        let (g_traj, rest) = rest.split_at(cfg.traj_dim);
        let (g_tag, g_sketch) = rest.split_at(cfg.tag_dim);

        let n = cache.feats.n_boxes;
        if n > 0 {
            let per: Vec<f64> = g_pool.iter().map(|v| v / n as f64).collect();
            let g_box_out: Vec<f64> = (0..n).flat_map(|_| per.iter().copied()).collect();
            let g_act = self.box2.backward(p, &cache.box_act, n, &g_box_out, g);
            let g_pre = silu_backward(&cache.box_pre, &g_act);
            self.box1.backward_params(&cache.feats.boxes, n, &g_pre, g);
        }
        let g_act = self.traj2.backward(p, &cache.traj_act, 1, g_traj, g);
        let g_pre = silu_backward(&cache.traj_pre, &g_act);
        self.traj1.backward_params(&cache.feats.traj, 1, &g_pre, g);

        let off = self.tag_table + cache.feats.tag * cfg.tag_dim;
        for (i, v) in g_tag.iter().enumerate() {
            g[off + i] += v;
        }
        let g_pre = silu_backward(&cache.sketch_pre, g_sketch);
        self.sketch.backward_params(&cache.feats.sketch, 1, &g_pre, g);
    }

    pub fn embed(&self, p: &[f64], c: &ConditionSet) -> Result<Vec<f64>, ConditionError> {
        Ok(self.forward(p, &self.features(c)?).0)
    }
}
