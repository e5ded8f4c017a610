//! Small neural-network toolkit with hand-written backward passes.
//!
//! Models keep all parameters in one flat `Vec<f64>`; layers are plain
//! offset descriptors into it, so optimizers, checkpoints and finite
//! difference checks all work on a single slice. Gradients use the same
//! layout.

mod attention;
mod conv;
mod optim;

pub use attention::{AttentionBlock, AttentionCache, MlpBlock, MlpCache};
pub use conv::{upsample2x, upsample2x_backward, Conv2d, ConvCache};
pub use optim::{clip_grad_norm, Adam, Optimizer, OptimizerConfig, OptimizerKind, Sgd};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Normal(f64),
    Const(f64),
}

/// Allocates parameter ranges in declaration order.
#[derive(Debug, Clone, Default)]
pub struct ParamBuilder {
    len: usize,
    inits: Vec<(usize, usize, Init)>,
}

impl ParamBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn alloc(&mut self, n: usize, init: Init) -> usize {
        let off = self.len;
        self.inits.push((off, n, init));
        self.len += n;
        off
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Draws every range in declaration order from one seeded stream.
    pub fn build(&self, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = vec![0.0; self.len];
        for &(off, n, init) in &self.inits {
            match init {
                Init::Normal(std) => {
                    let d = Normal::new(0.0, std).expect("finite std");
                    for v in &mut p[off..off + n] {
                        *v = d.sample(&mut rng);
                    }
                }
                Init::Const(c) => p[off..off + n].fill(c),
            }
        }
        p
    }

    /// Overrides the initializer of the range starting at `off`.
    pub fn set_init(&mut self, off: usize, init: Init) {
        if let Some(entry) = self.inits.iter_mut().find(|e| e.0 == off) {
            entry.2 = init;
        }
    }
}

/// `C (m×n) = op(A) (m×k) · op(B) (k×n)`, row-major storage, optionally
/// accumulating into `C`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let beta = if accumulate { 1.0 } else { 0.0 };
    if k == 0 {
        if !accumulate {
            c[..m * n].fill(0.0);
        }
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the strides describe `m×k`, `k×n` and `m×n` views that lie
    // inside the slices, which the debug assertion above checks.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Fully connected layer, `y = x Wᵀ + b` with `W` stored `out × in`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Linear {
    pub w: usize,
    pub b: usize,
    pub inp: usize,
    pub out: usize,
}

impl Linear {
    /// Weights ~ N(0, gain²/in); zero bias.
    pub fn new(pb: &mut ParamBuilder, inp: usize, out: usize, gain: f64) -> Self {
        let std = gain / (inp.max(1) as f64).sqrt();
        let init = if gain == 0.0 { Init::Const(0.0) } else { Init::Normal(std) };
        let w = pb.alloc(inp * out, init);
        let b = pb.alloc(out, Init::Const(0.0));
        Self { w, b, inp, out }
    }

    pub fn weights<'a>(&self, p: &'a [f64]) -> &'a [f64] {
        &p[self.w..self.w + self.inp * self.out]
    }

    pub fn bias<'a>(&self, p: &'a [f64]) -> &'a [f64] {
        &p[self.b..self.b + self.out]
    }

    pub fn forward(&self, p: &[f64], x: &[f64], rows: usize) -> Vec<f64> {
        let mut y = Vec::with_capacity(rows * self.out);
        for _ in 0..rows {
            y.extend_from_slice(self.bias(p));
        }
        gemm(rows, self.inp, self.out, x, false, self.weights(p), true, &mut y, true);
        y
    }

    /// Accumulates parameter gradients into `g` and returns `dL/dx`.
    pub fn backward(&self, p: &[f64], x: &[f64], rows: usize, gy: &[f64], g: &mut [f64]) -> Vec<f64> {
        self.backward_params(x, rows, gy, g);
        let mut gx = vec![0.0; rows * self.inp];
        gemm(rows, self.out, self.inp, gy, false, self.weights(p), false, &mut gx, false);
        gx
    }

    pub fn backward_params(&self, x: &[f64], rows: usize, gy: &[f64], g: &mut [f64]) {
        gemm(
            self.out,
            rows,
            self.inp,
            gy,
            true,
            x,
            false,
            &mut g[self.w..self.w + self.inp * self.out],
            true,
        );
        let gb = &mut g[self.b..self.b + self.out];
        for r in 0..rows {
            for (o, v) in gb.iter_mut().zip(&gy[r * self.out..(r + 1) * self.out]) {
                *o += v;
            }
        }
    }
}

pub const LN_EPS: f64 = 1e-5;

/// Layer normalization over the last dimension.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerNorm {
    pub gamma: usize,
    pub beta: usize,
    pub dim: usize,
}

/// Normalized activations and per-row inverse standard deviations.
#[derive(Debug, Clone)]
pub struct LayerNormCache {
    pub xhat: Vec<f64>,
    pub inv_std: Vec<f64>,
}

impl LayerNorm {
    pub fn new(pb: &mut ParamBuilder, dim: usize) -> Self {
        Self {
            gamma: pb.alloc(dim, Init::Const(1.0)),
            beta: pb.alloc(dim, Init::Const(0.0)),
            dim,
        }
    }

    pub fn forward(&self, p: &[f64], x: &[f64]) -> (Vec<f64>, LayerNormCache) {
        let d = self.dim;
        let rows = x.len() / d;
        let mut y = vec![0.0; x.len()];
        let mut xhat = vec![0.0; x.len()];
        let mut inv_std = vec![0.0; rows];
        let gamma = &p[self.gamma..self.gamma + d];
        let beta = &p[self.beta..self.beta + d];
        for r in 0..rows {
            let row = &x[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                y[r * d + j] = gamma[j] * h + beta[j];
            }
        }
        (y, LayerNormCache { xhat, inv_std })
    }

    pub fn backward(&self, p: &[f64], cache: &LayerNormCache, gy: &[f64], g: &mut [f64]) -> Vec<f64> {
        let d = self.dim;
        let rows = gy.len() / d;
        let mut gx = vec![0.0; gy.len()];
        for r in 0..rows {
            let xh = &cache.xhat[r * d..(r + 1) * d];
            let gyr = &gy[r * d..(r + 1) * d];
            let mut mean_g = 0.0;
            let mut mean_gx = 0.0;
            for j in 0..d {
                g[self.gamma + j] += gyr[j] * xh[j];
                g[self.beta + j] += gyr[j];
                let gh = gyr[j] * p[self.gamma + j];
                mean_g += gh;
                mean_gx += gh * xh[j];
            }
            mean_g /= d as f64;
            mean_gx /= d as f64;
            for j in 0..d {
                let gh = gyr[j] * p[self.gamma + j];
                gx[r * d + j] = cache.inv_std[r] * (gh - mean_g - xh[j] * mean_gx);
            }
        }
        gx
    }
}

#[inline]
pub fn silu(x: f64) -> f64 {
    x * crate::gaussians::sigmoid(x)
}

#[inline]
pub fn silu_grad(x: f64) -> f64 {
    let s = crate::gaussians::sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

pub fn silu_vec(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| silu(v)).collect()
}

/// `gy ⊙ silu'(x)`.
pub fn silu_backward(x: &[f64], gy: &[f64]) -> Vec<f64> {
    x.iter().zip(gy).map(|(&v, &g)| g * silu_grad(v)).collect()
}

/// Sinusoidal embedding of a scalar in `[0,1]`, `dim` even.
pub fn sinusoidal_embedding(s: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    for i in 0..half {
        let freq = (1000f64).powf(i as f64 / half.max(1) as f64);
        out.push((s * freq).sin());
    }
    for i in 0..half {
        let freq = (1000f64).powf(i as f64 / half.max(1) as f64);
        out.push((s * freq).cos());
    }
    out
}

/// Maximum relative discrepancy between `analytic` and a central finite
/// difference of `f` at the chosen coordinates. Relative error is measured
/// against `max(|analytic|, |numeric|, floor)`.
pub fn max_relative_fd_error(
    f: &mut dyn FnMut(&[f64]) -> f64,
    params: &[f64],
    analytic: &[f64],
    coords: &[usize],
    h: f64,
    floor: f64,
) -> f64 {
    let mut p = params.to_vec();
    let mut worst: f64 = 0.0;
    for &i in coords {
        let orig = p[i];
        p[i] = orig + h;
        let up = f(&p);
        p[i] = orig - h;
        let down = f(&p);
        p[i] = orig;
        let fd = (up - down) / (2.0 * h);
        let err = (fd - analytic[i]).abs() / fd.abs().max(analytic[i].abs()).max(floor);
        worst = worst.max(err);
    }
    worst
}

/// Deterministic pairwise sum: the tree shape depends only on the length.
pub fn tree_sum(values: &[f64]) -> f64 {
    match values.len() {
        0 => 0.0,
        1 => values[0],
        n => tree_sum(&values[..n / 2]) + tree_sum(&values[n / 2..]),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn gemm_matches_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (m, k, n) = (5, 7, 3);
        let a: Vec<f64> = (0..m * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..k * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut c = vec![0.0; m * n];
        gemm(m, k, n, &a, false, &b, false, &mut c, false);
        for i in 0..m {
            for j in 0..n {
                let want: f64 = (0..k).map(|t| a[i * k + t] * b[t * n + j]).sum();
                assert!((c[i * n + j] - want).abs() < 1e-12);
            }
        }
        // Transposed operands: Aᵀ stored k×m, Bᵀ stored n×k.
        let at: Vec<f64> = (0..k * m).map(|i| a[(i % m) * k + i / m]).collect();
        let bt: Vec<f64> = (0..n * k).map(|i| b[(i % k) * n + i / k]).collect();
        let mut c2 = vec![0.0; m * n];
        gemm(m, k, n, &at, true, &bt, true, &mut c2, false);
        for (x, y) in c.iter().zip(&c2) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn linear_and_layernorm_gradients() {
        let mut pb = ParamBuilder::new();
        let ln = LayerNorm::new(&mut pb, 6);
        let lin = Linear::new(&mut pb, 6, 4, 1.0);
        let mut p = pb.build(1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for v in &mut p[ln.gamma..ln.beta + 6] {
            *v += rng.gen_range(-0.5..0.5);
        }
        let x: Vec<f64> = (0..18).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let w: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let loss = |p: &[f64], x: &[f64]| {
            let (h, _) = ln.forward(p, x);
            let y = lin.forward(p, &h, 3);
            y.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() + y.iter().map(|v| v * v).sum::<f64>()
        };
        let (h, cache) = ln.forward(&p, &x);
        let y = lin.forward(&p, &h, 3);
        let gy: Vec<f64> = y.iter().zip(&w).map(|(v, w)| w + 2.0 * v).collect();
        let mut g = vec![0.0; p.len()];
        let gh = lin.backward(&p, &h, 3, &gy, &mut g);
        let gx = ln.backward(&p, &cache, &gh, &mut g);
        let coords: Vec<usize> = (0..p.len()).collect();
        let err = max_relative_fd_error(&mut |q| loss(q, &x), &p, &g, &coords, 1e-5, 1e-6);
        assert!(err < 1e-6, "param err {err}");
        let xc: Vec<usize> = (0..x.len()).collect();
        let err = max_relative_fd_error(&mut |xx| loss(&p, xx), &x, &gx, &xc, 1e-5, 1e-6);
        assert!(err < 1e-6, "input err {err}");
    }

    #[test]
    fn tree_sum_is_order_fixed() {
        let v: Vec<f64> = (0..37).map(|i| (i as f64).sin() * 1e10 + 1e-6).collect();
        assert_eq!(tree_sum(&v).to_bits(), tree_sum(&v.clone()).to_bits());
        assert!((tree_sum(&v) - v.iter().sum::<f64>()).abs() < 1e-3);
    }
}
