//! Same-padded 2D convolution via im2col, and nearest-neighbor upsampling.
//! Images are channel-major `[channels, height, width]`.

use super::{gemm, Init, ParamBuilder};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Conv2d {
    pub w: usize,
    pub b: usize,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
}

pub struct ConvCache {
    cols: Vec<f64>,
    height: usize,
    width: usize,
}

impl Conv2d {
    /// Odd kernel size `k`; weights ~ N(0, gain²/(cin·k²)).
    pub fn new(pb: &mut ParamBuilder, cin: usize, cout: usize, k: usize, gain: f64) -> Self {
        assert!(k % 2 == 1);
        let fan_in = (cin * k * k).max(1) as f64;
        let init = if gain == 0.0 { Init::Const(0.0) } else { Init::Normal(gain / fan_in.sqrt()) };
        let w = pb.alloc(cout * cin * k * k, init);
        let b = pb.alloc(cout, Init::Const(0.0));
        Self { w, b, cin, cout, k }
    }

    fn im2col(&self, x: &[f64], h: usize, w: usize) -> Vec<f64> {
        let (k, pad) = (self.k, (self.k / 2) as isize);
        let hw = h * w;
        let mut cols = vec![0.0; self.cin * k * k * hw];
        for c in 0..self.cin {
            for ky in 0..k {
                for kx in 0..k {
                    let row = ((c * k + ky) * k + kx) * hw;
                    for y in 0..h {
                        let sy = y as isize + ky as isize - pad;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        for xx in 0..w {
                            let sx = xx as isize + kx as isize - pad;
                            if sx < 0 || sx >= w as isize {
                                continue;
                            }
                            cols[row + y * w + xx] = x[c * hw + sy as usize * w + sx as usize];
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &[f64], h: usize, w: usize) -> Vec<f64> {
        let (k, pad) = (self.k, (self.k / 2) as isize);
        let hw = h * w;
        let mut x = vec![0.0; self.cin * hw];
        for c in 0..self.cin {
            for ky in 0..k {
                for kx in 0..k {
                    let row = ((c * k + ky) * k + kx) * hw;
                    for y in 0..h {
                        let sy = y as isize + ky as isize - pad;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        for xx in 0..w {
                            let sx = xx as isize + kx as isize - pad;
                            if sx < 0 || sx >= w as isize {
                                continue;
                            }
                            x[c * hw + sy as usize * w + sx as usize] += cols[row + y * w + xx];
                        }
                    }
                }
            }
        }
        x
    }

    pub fn forward(&self, p: &[f64], x: &[f64], h: usize, w: usize) -> (Vec<f64>, ConvCache) {
        let hw = h * w;
        let kk = self.cin * self.k * self.k;
        let cols = if self.k == 1 { x.to_vec() } else { self.im2col(x, h, w) };
        let mut y = Vec::with_capacity(self.cout * hw);
        for o in 0..self.cout {
            y.extend(std::iter::repeat_n(p[self.b + o], hw));
        }
        gemm(self.cout, kk, hw, &p[self.w..self.w + self.cout * kk], false, &cols, false, &mut y, true);
        (y, ConvCache { cols, height: h, width: w })
    }

    pub fn backward(&self, p: &[f64], cache: &ConvCache, gy: &[f64], g: &mut [f64]) -> Vec<f64> {
        let hw = cache.height * cache.width;
        let kk = self.cin * self.k * self.k;
        gemm(self.cout, hw, kk, gy, false, &cache.cols, true, &mut g[self.w..self.w + self.cout * kk], true);
        for o in 0..self.cout {
            g[self.b + o] += gy[o * hw..(o + 1) * hw].iter().sum::<f64>();
        }
        let mut gcols = vec![0.0; kk * hw];
        gemm(kk, self.cout, hw, &p[self.w..self.w + self.cout * kk], true, gy, false, &mut gcols, false);
        if self.k == 1 {
            gcols
        } else {
            self.col2im(&gcols, cache.height, cache.width)
        }
    }
}

pub fn upsample2x(x: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let (h2, w2) = (2 * h, 2 * w);
    let mut out = vec![0.0; c * h2 * w2];
    for ch in 0..c {
        for y in 0..h2 {
            for xx in 0..w2 {
                out[(ch * h2 + y) * w2 + xx] = x[(ch * h + y / 2) * w + xx / 2];
            }
        }
    }
    out
}

pub fn upsample2x_backward(gy: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let (h2, w2) = (2 * h, 2 * w);
    let mut gx = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..h2 {
            for xx in 0..w2 {
                gx[(ch * h + y / 2) * w + xx / 2] += gy[(ch * h2 + y) * w2 + xx];
            }
        }
    }
    gx
}
