//! Pre-norm residual blocks: multi-head self-attention over caller-defined
//! token groups, and a two-layer MLP.
//!
//! Attention has no positional terms, so it is equivariant to any
//! permutation of the tokens within a group.

use super::{gemm, silu_backward, silu_vec, LayerNorm, LayerNormCache, Linear, ParamBuilder};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttentionBlock {
    pub ln: LayerNorm,
    pub qkv: Linear,
    pub proj: Linear,
    pub dim: usize,
    pub heads: usize,
}

pub struct AttentionCache {
    ln: LayerNormCache,
    normed: Vec<f64>,
    qkv: Vec<f64>,
    /// Softmax probabilities per (group, head), `L×L` row-major.
    probs: Vec<Vec<f64>>,
    attn: Vec<f64>,
}

impl AttentionBlock {
    pub fn new(pb: &mut ParamBuilder, dim: usize, heads: usize) -> Self {
        assert!(heads > 0 && dim.is_multiple_of(heads), "dim must divide into heads");
        Self {
            ln: LayerNorm::new(pb, dim),
            qkv: Linear::new(pb, dim, 3 * dim, 1.0),
            proj: Linear::new(pb, dim, dim, 0.5),
            dim,
            heads,
        }
    }

    fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    fn gather(&self, qkv: &[f64], group: &[usize], part: usize, head: usize) -> Vec<f64> {
        let (d, dh) = (self.dim, self.head_dim());
        let mut out = Vec::with_capacity(group.len() * dh);
        for &tok in group {
            let base = tok * 3 * d + part * d + head * dh;
            out.extend_from_slice(&qkv[base..base + dh]);
        }
        out
    }

    fn scatter_add(&self, dst: &mut [f64], stride: usize, offset: usize, group: &[usize], head: usize, src: &[f64]) {
        let dh = self.head_dim();
        for (i, &tok) in group.iter().enumerate() {
            let base = tok * stride + offset + head * dh;
            for j in 0..dh {
                dst[base + j] += src[i * dh + j];
            }
        }
    }

    /// `x` holds `N` tokens of width `dim`; attention runs independently
    /// inside each group of token indices. Groups must partition the tokens.
    pub fn forward(&self, p: &[f64], x: &[f64], groups: &[Vec<usize>]) -> (Vec<f64>, AttentionCache) {
        let (d, dh) = (self.dim, self.head_dim());
        let n = x.len() / d;
        let (normed, ln) = self.ln.forward(p, x);
        let qkv = self.qkv.forward(p, &normed, n);
        let scale = 1.0 / (dh as f64).sqrt();
        let mut attn = vec![0.0; n * d];
        let mut probs = Vec::with_capacity(groups.len() * self.heads);
        for group in groups {
            let l = group.len();
            for h in 0..self.heads {
                let q = self.gather(&qkv, group, 0, h);
                let k = self.gather(&qkv, group, 1, h);
                let v = self.gather(&qkv, group, 2, h);
                let mut s = vec![0.0; l * l];
                gemm(l, dh, l, &q, false, &k, true, &mut s, false);
                for row in s.chunks_mut(l) {
                    let max = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b * scale));
                    let mut sum = 0.0;
                    for e in row.iter_mut() {
                        *e = (*e * scale - max).exp();
                        sum += *e;
                    }
                    for e in row.iter_mut() {
                        *e /= sum;
                    }
                }
                let mut a = vec![0.0; l * dh];
                gemm(l, l, dh, &s, false, &v, false, &mut a, false);
                self.scatter_add(&mut attn, d, 0, group, h, &a);
                probs.push(s);
            }
        }
        let out = self.proj.forward(p, &attn, n);
        let y = x.iter().zip(&out).map(|(a, b)| a + b).collect();
        (
            y,
            AttentionCache {
                ln,
                normed,
                qkv,
                probs,
                attn,
            },
        )
    }

    pub fn backward(
        &self,
        p: &[f64],
        cache: &AttentionCache,
        groups: &[Vec<usize>],
        gy: &[f64],
        g: &mut [f64],
    ) -> Vec<f64> {
        let (d, dh) = (self.dim, self.head_dim());
        let n = gy.len() / d;
        let scale = 1.0 / (dh as f64).sqrt();
        let g_attn = self.proj.backward(p, &cache.attn, n, gy, g);
        let mut g_qkv = vec![0.0; n * 3 * d];
        let mut pi = 0;
        for group in groups {
            let l = group.len();
            for h in 0..self.heads {
                let probs = &cache.probs[pi];
                pi += 1;
                let q = self.gather(&cache.qkv, group, 0, h);
                let k = self.gather(&cache.qkv, group, 1, h);
                let v = self.gather(&cache.qkv, group, 2, h);
                let mut ga = Vec::with_capacity(l * dh);
                for &tok in group {
                    let base = tok * d + h * dh;
                    ga.extend_from_slice(&g_attn[base..base + dh]);
                }
                let mut gv = vec![0.0; l * dh];
                gemm(l, l, dh, probs, true, &ga, false, &mut gv, false);
                let mut gp = vec![0.0; l * l];
                gemm(l, dh, l, &ga, false, &v, true, &mut gp, false);
                for r in 0..l {
                    let prow = &probs[r * l..(r + 1) * l];
                    let grow = &mut gp[r * l..(r + 1) * l];
                    let dot: f64 = prow.iter().zip(grow.iter()).map(|(a, b)| a * b).sum();
                    for (gs, &pv) in grow.iter_mut().zip(prow) {
                        *gs = pv * (*gs - dot) * scale;
                    }
                }
                let mut gq = vec![0.0; l * dh];
                gemm(l, l, dh, &gp, false, &k, false, &mut gq, false);
                let mut gk = vec![0.0; l * dh];
                gemm(l, l, dh, &gp, true, &q, false, &mut gk, false);
                self.scatter_add(&mut g_qkv, 3 * d, 0, group, h, &gq);
                self.scatter_add(&mut g_qkv, 3 * d, d, group, h, &gk);
                self.scatter_add(&mut g_qkv, 3 * d, 2 * d, group, h, &gv);
            }
        }
        let g_normed = self.qkv.backward(p, &cache.normed, n, &g_qkv, g);
        let gx = self.ln.backward(p, &cache.ln, &g_normed, g);
        gx.iter().zip(gy).map(|(a, b)| a + b).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MlpBlock {
    pub ln: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

pub struct MlpCache {
    ln: LayerNormCache,
    normed: Vec<f64>,
    pre: Vec<f64>,
    act: Vec<f64>,
}

impl MlpBlock {
    pub fn new(pb: &mut ParamBuilder, dim: usize, hidden: usize) -> Self {
        Self {
            ln: LayerNorm::new(pb, dim),
            fc1: Linear::new(pb, dim, hidden, 1.0),
            fc2: Linear::new(pb, hidden, dim, 0.5),
        }
    }

    pub fn forward(&self, p: &[f64], x: &[f64]) -> (Vec<f64>, MlpCache) {
        let n = x.len() / self.ln.dim;
        let (normed, ln) = self.ln.forward(p, x);
        let pre = self.fc1.forward(p, &normed, n);
        let act = silu_vec(&pre);
        let out = self.fc2.forward(p, &act, n);
        let y = x.iter().zip(&out).map(|(a, b)| a + b).collect();
        (y, MlpCache { ln, normed, pre, act })
    }

    pub fn backward(&self, p: &[f64], cache: &MlpCache, gy: &[f64], g: &mut [f64]) -> Vec<f64> {
        let n = gy.len() / self.ln.dim;
        let g_act = self.fc2.backward(p, &cache.act, n, gy, g);
        let g_pre = silu_backward(&cache.pre, &g_act);
        let g_normed = self.fc1.backward(p, &cache.normed, n, &g_pre, g);
        let gx = self.ln.backward(p, &cache.ln, &g_normed, g);
        gx.iter().zip(gy).map(|(a, b)| a + b).collect()
    }
}
