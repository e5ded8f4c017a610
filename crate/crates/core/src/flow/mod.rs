//! Rectified flow: interpolation, a residual-MLP velocity field with manual
//! backpropagation, Euler sampling, training and the refiner variant.
//!
//! The network predicts a clean estimate `x̂` and reports the velocity
//! `g = (x̂ − z) / max(1 − s, floor)`. For point-mass data the optimum is a
//! constant `x̂`, which the network represents exactly for every `z`, so the
//! learned field matches the analytic one well outside the training
//! distribution. The loss is still the plain velocity regression
//! `‖g − (x − ε)‖²`.

mod checkpoint;
mod train;

pub use checkpoint::{decode_field, encode_field, read_field, write_field};
pub use train::{
    loss_history_csv, train_flow, train_refiner, FlowDatum, FlowTrainConfig, RefinerPair, TrainedField,
};

use rayon::prelude::*;
use thiserror::Error;

use crate::conditions::{CondCache, CondFeatures, ConditionEncoder, ConditionEncoderConfig};
use crate::nn::{silu_backward, silu_vec, sinusoidal_embedding, tree_sum, Init, Linear, ParamBuilder};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FlowError {
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("mixing parameter {0} outside [0, 1]")]
    BadMix(f64),
    #[error("training diverged at step {step}: loss {loss}, gradient norm {grad_norm}")]
    Diverged { step: usize, loss: f64, grad_norm: f64 },
    #[error("sampling diverged at step {step} of {steps}")]
    DivergedSampling { step: usize, steps: usize },
    #[error("analytic oracle undefined at s = {0}")]
    UndefinedOracle(f64),
    #[error("unpaired refiner data: {0}")]
    Unpaired(String),
    #[error("empty dataset")]
    EmptyDataset,
    #[error("condition error: {0}")]
    Condition(String),
}

/// `z = (1 − s)·eps + s·x`.
pub fn interpolate(x: &[f64], eps: &[f64], s: f64) -> Result<Vec<f64>, FlowError> {
    if x.len() != eps.len() {
        return Err(FlowError::LengthMismatch(x.len(), eps.len()));
    }
    if !(0.0..=1.0).contains(&s) {
        return Err(FlowError::BadMix(s));
    }
    Ok(x.iter().zip(eps).map(|(&xv, &e)| (1.0 - s) * e + s * xv).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowSample {
    pub x: Vec<f64>,
    pub eps: Vec<f64>,
    pub s: f64,
    pub z: Vec<f64>,
}

impl FlowSample {
    pub fn new(x: Vec<f64>, eps: Vec<f64>, s: f64) -> Result<Self, FlowError> {
        let z = interpolate(&x, &eps, s)?;
        Ok(Self { x, eps, s, z })
    }

    /// The regression target `x − eps`.
    pub fn target(&self) -> Vec<f64> {
        self.x.iter().zip(&self.eps).map(|(a, b)| a - b).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Schedule {
    pub steps: usize,
}

impl Default for Schedule {
    fn default() -> Self {
        Self { steps: 8 }
    }
}

/// What a model is conditioned on for one sample.
#[derive(Debug, Clone, Copy, Default)]
pub struct Conditioning<'a> {
    /// Encoded condition set; `None` is the null (dropped) condition.
    pub features: Option<&'a CondFeatures>,
    /// Extra per-element channels, e.g. renders for the refiner.
    pub render: Option<&'a [f64]>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Prediction {
    Velocity(Vec<f64>),
    /// A clean-data estimate `x̂`; velocity `(x̂ − z) / max(1 − s, floor)`.
    Data { x_hat: Vec<f64>, floor: f64 },
}

impl Prediction {
    pub fn velocity(&self, z: &[f64], s: f64) -> Vec<f64> {
        match self {
            Prediction::Velocity(g) => g.clone(),
            Prediction::Data { x_hat, floor } => {
                let den = (1.0 - s).max(*floor);
                x_hat.iter().zip(z).map(|(x, z)| (x - z) / den).collect()
            }
        }
    }
}

pub trait VelocityModel: Sync {
    fn predict(&self, z: &[f64], s: f64, cond: &Conditioning) -> Prediction;
}

/// Exact field for data concentrated at `x0` with standard normal noise:
/// the posterior mean of `x` is `x0` itself.
#[derive(Debug, Clone, PartialEq)]
pub struct PointMassOracle {
    pub x0: Vec<f64>,
}

impl VelocityModel for PointMassOracle {
    fn predict(&self, _z: &[f64], _s: f64, _c: &Conditioning) -> Prediction {
        Prediction::Data {
            x_hat: self.x0.clone(),
            floor: 0.0,
        }
    }
}

/// `E[x − ε | z(s) = z]` for point-mass data at `x0`: `x0 − (z − s·x0)/(1 − s)`.
pub fn analytic_velocity_1d(z: f64, s: f64, x0: f64) -> Result<f64, FlowError> {
    if !(s < 1.0) || s < 0.0 {
        return Err(FlowError::UndefinedOracle(s));
    }
    Ok(x0 - (z - s * x0) / (1.0 - s))
}

/// Forward Euler from noise (`s = 0`) to data (`s = 1`) with `s_k = k/N`.
pub fn euler_sample(
    model: &dyn VelocityModel,
    eps_init: &[f64],
    schedule: Schedule,
    cond: &Conditioning,
) -> Result<Vec<f64>, FlowError> {
    euler_sample_guided(model, eps_init, schedule, cond, 1.0)
}

/// Euler sampling with classifier-free-style guidance: the velocity is
/// `g_null + w·(g_cond − g_null)`. `w = 1` evaluates only the conditional
/// branch.
pub fn euler_sample_guided(
    model: &dyn VelocityModel,
    eps_init: &[f64],
    schedule: Schedule,
    cond: &Conditioning,
    guidance: f64,
) -> Result<Vec<f64>, FlowError> {
    let n = schedule.steps.max(1);
    let dt = 1.0 / n as f64;
    let mut z = eps_init.to_vec();
    for k in 0..n {
        let s = k as f64 / n as f64;
        let pred = model.predict(&z, s, cond);
        z = if guidance == 1.0 {
            euler_step(&z, &pred, s, dt, n - k)
        } else {
            let null = Conditioning {
                features: None,
                ..*cond
            };
            let gc = pred.velocity(&z, s);
            let gu = model.predict(&z, s, &null).velocity(&z, s);
            z.iter()
                .zip(gc.iter().zip(&gu))
                .map(|(zv, (c, u))| zv + dt * (u + guidance * (c - u)))
                .collect()
        };
        if z.iter().any(|v| !v.is_finite()) {
            return Err(FlowError::DivergedSampling { step: k, steps: n });
        }
    }
    Ok(z)
}

/// One step `z + dt·g`. For data predictions this is written as the
/// interpolation `(1 − a)·z + a·x̂` with `a = dt/(1 − s) = 1/(N − k)`, so the
/// final step lands exactly on `x̂`.
fn euler_step(z: &[f64], pred: &Prediction, s: f64, dt: f64, remaining: usize) -> Vec<f64> {
    match pred {
        Prediction::Velocity(g) => z.iter().zip(g).map(|(a, b)| a + dt * b).collect(),
        Prediction::Data { x_hat, floor } => {
            let a = if 1.0 - s >= *floor { 1.0 / remaining as f64 } else { dt / floor };
            z.iter().zip(x_hat).map(|(zv, x)| (1.0 - a) * zv + a * x).collect()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FieldConfig {
    pub latent_dim: usize,
    pub hidden: usize,
    pub layers: usize,
    pub s_embed: usize,
    /// Length of the per-element render input (0 disables).
    pub render_dim: usize,
    /// Condition encoder; `None` for an unconditional field.
    pub encoder: Option<ConditionEncoderConfig>,
    pub tags: Vec<String>,
    pub denom_floor: f64,
}

impl FieldConfig {
    pub fn new(latent_dim: usize) -> Self {
        Self {
            latent_dim,
            hidden: 128,
            layers: 3,
            s_embed: 16,
            render_dim: 0,
            encoder: None,
            tags: Vec::new(),
            denom_floor: 1e-3,
        }
    }

    pub fn with_conditions(mut self, enc: ConditionEncoderConfig, tags: Vec<String>) -> Self {
        self.encoder = Some(enc);
        self.tags = tags;
        self
    }

    pub fn with_render(mut self) -> Self {
        self.render_dim = self.latent_dim;
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Layout {
    encoder: Option<ConditionEncoder>,
    inp: Linear,
    blocks: Vec<Linear>,
    out: Linear,
    /// Per-element skip weights on the render input.
    gamma: Option<usize>,
}

/// The velocity network `g_ψ` plus its condition encoder. All parameters
/// live in `params`.
#[derive(Debug, Clone, PartialEq)]
pub struct VelocityField {
    pub cfg: FieldConfig,
    pub seed: u64,
    pub params: Vec<f64>,
    layout: Layout,
}

fn build_layout(cfg: &FieldConfig) -> (Layout, ParamBuilder) {
    let mut pb = ParamBuilder::new();
    let encoder = cfg
        .encoder
        .map(|e| ConditionEncoder::new(&mut pb, e, cfg.tags.clone()));
    let cond_dim = encoder.as_ref().map_or(0, |e| e.out_dim());
    let in_dim = cfg.latent_dim + cfg.render_dim + cfg.s_embed + cond_dim;
    let inp = Linear::new(&mut pb, in_dim, cfg.hidden, 1.0);
    let blocks = (0..cfg.layers).map(|_| Linear::new(&mut pb, cfg.hidden, cfg.hidden, 0.5)).collect();
    let out = Linear::new(&mut pb, cfg.hidden, cfg.latent_dim, 0.0);
    let gamma = (cfg.render_dim > 0).then(|| pb.alloc(cfg.render_dim, Init::Const(1.0)));
    (
        Layout {
            encoder,
            inp,
            blocks,
            out,
            gamma,
        },
        pb,
    )
}

/// Intermediates of one batched forward pass.
struct FieldCache {
    rows: usize,
    input: Vec<f64>,
    h0_pre: Vec<f64>,
    hs: Vec<Vec<f64>>,
    pres: Vec<Vec<f64>>,
    cond: Vec<Option<CondCache>>,
}

impl VelocityField {
    pub fn new(cfg: FieldConfig, seed: u64) -> Self {
        let (layout, pb) = build_layout(&cfg);
        Self {
            params: pb.build(seed),
            cfg,
            seed,
            layout,
        }
    }

    /// Rebuilds the layout for `cfg` around existing parameters.
    pub fn from_parts(cfg: FieldConfig, seed: u64, params: Vec<f64>) -> Option<Self> {
        let (layout, pb) = build_layout(&cfg);
        (pb.len() == params.len()).then_some(Self {
            params,
            cfg,
            seed,
            layout,
        })
    }

    pub fn encoder(&self) -> Option<&ConditionEncoder> {
        self.layout.encoder.as_ref()
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    fn cond_dim(&self) -> usize {
        self.layout.encoder.as_ref().map_or(0, |e| e.out_dim())
    }

    fn forward_batch(&self, p: &[f64], zs: &[&[f64]], ss: &[f64], conds: &[Conditioning]) -> (Vec<f64>, FieldCache) {
        let cfg = &self.cfg;
        let rows = zs.len();
        let l = cfg.latent_dim;
        let cond_dim = self.cond_dim();
        let in_dim = self.layout.inp.inp;
        let mut input = Vec::with_capacity(rows * in_dim);
        let mut cond_caches = Vec::with_capacity(rows);
        for r in 0..rows {
            assert_eq!(zs[r].len(), l, "latent length");
            input.extend_from_slice(zs[r]);
            if cfg.render_dim > 0 {
                match conds[r].render {
                    Some(x) => input.extend_from_slice(x),
                    None => input.extend(std::iter::repeat_n(0.0, cfg.render_dim)),
                }
            }
            input.extend(sinusoidal_embedding(ss[r], cfg.s_embed));
            match (&self.layout.encoder, conds[r].features) {
                (Some(enc), Some(f)) => {
                    let (emb, cache) = enc.forward(p, f);
                    input.extend(emb);
                    cond_caches.push(Some(cache));
                }
                _ => {
                    input.extend(std::iter::repeat_n(0.0, cond_dim));
                    cond_caches.push(None);
                }
            }
        }
        let h0_pre = self.layout.inp.forward(p, &input, rows);
        let mut h = silu_vec(&h0_pre);
        let mut hs = Vec::with_capacity(cfg.layers);
        let mut pres = Vec::with_capacity(cfg.layers);
        for blk in &self.layout.blocks {
            let pre = blk.forward(p, &h, rows);
            let next: Vec<f64> = h.iter().zip(silu_vec(&pre)).map(|(a, b)| a + b).collect();
            hs.push(h);
            pres.push(pre);
            h = next;
        }
        let mut x_hat = self.layout.out.forward(p, &h, rows);
        hs.push(h);
        if let Some(gamma) = self.layout.gamma {
            for r in 0..rows {
                if let Some(render) = conds[r].render {
                    for j in 0..l {
                        x_hat[r * l + j] += p[gamma + j] * render[j];
                    }
                }
            }
        }
        (
            x_hat,
            FieldCache {
                rows,
                input,
                h0_pre,
                hs,
                pres,
                cond: cond_caches,
            },
        )
    }

    fn backward_batch(&self, p: &[f64], cache: &FieldCache, conds: &[Conditioning], g_xhat: &[f64], g: &mut [f64]) {
        let rows = cache.rows;
        let l = self.cfg.latent_dim;
        if let Some(gamma) = self.layout.gamma {
            for r in 0..rows {
                if let Some(render) = conds[r].render {
                    for j in 0..l {
                        g[gamma + j] += g_xhat[r * l + j] * render[j];
                    }
                }
            }
        }
        let n_blocks = self.layout.blocks.len();
        let mut g_h = self.layout.out.backward(p, &cache.hs[n_blocks], rows, g_xhat, g);
        for (b, blk) in self.layout.blocks.iter().enumerate().rev() {
            let g_pre = silu_backward(&cache.pres[b], &g_h);
            let g_in = blk.backward(p, &cache.hs[b], rows, &g_pre, g);
            for (a, v) in g_h.iter_mut().zip(g_in) {
                *a += v;
            }
        }
        let g_h0 = silu_backward(&cache.h0_pre, &g_h);
        let needs_input_grad = cache.cond.iter().any(|c| c.is_some());
        if !needs_input_grad {
            self.layout.inp.backward_params(&cache.input, rows, &g_h0, g);
            return;
        }
        let g_input = self.layout.inp.backward(p, &cache.input, rows, &g_h0, g);
        let enc = self.layout.encoder.as_ref().expect("condition cache implies encoder");
        let in_dim = self.layout.inp.inp;
        let off = in_dim - self.cond_dim();
        for (r, c) in cache.cond.iter().enumerate() {
            if let Some(c) = c {
                enc.backward(p, c, &g_input[r * in_dim + off..(r + 1) * in_dim], g);
            }
        }
    }

    /// Clean-data estimate for one state.
    pub fn predict_x(&self, z: &[f64], s: f64, cond: &Conditioning) -> Vec<f64> {
        self.forward_batch(&self.params, &[z], &[s], std::slice::from_ref(cond)).0
    }

    pub fn velocity(&self, z: &[f64], s: f64, cond: &Conditioning) -> Vec<f64> {
        self.predict(z, s, cond).velocity(z, s)
    }

    /// Loss terms `‖g − (x − eps)‖²` for a chunk and, optionally, the
    /// parameter gradient of their sum.
    fn chunk_loss(&self, p: &[f64], items: &[FlowItem], grad: Option<&mut [f64]>) -> Vec<f64> {
        let zs: Vec<&[f64]> = items.iter().map(|it| it.sample.z.as_slice()).collect();
        let ss: Vec<f64> = items.iter().map(|it| it.sample.s).collect();
        let conds: Vec<Conditioning> = items.iter().map(|it| it.cond).collect();
        let (x_hat, cache) = self.forward_batch(p, &zs, &ss, &conds);
        let l = self.cfg.latent_dim;
        let mut losses = Vec::with_capacity(items.len());
        let mut g_xhat = vec![0.0; x_hat.len()];
        for (r, it) in items.iter().enumerate() {
            let den = (1.0 - it.sample.s).max(self.cfg.denom_floor);
            let mut acc = 0.0;
            for j in 0..l {
                let g = (x_hat[r * l + j] - it.sample.z[j]) / den;
                let resid = g - (it.sample.x[j] - it.sample.eps[j]);
                acc += resid * resid;
                g_xhat[r * l + j] = 2.0 * resid / den;
            }
            losses.push(acc);
        }
        if let Some(g) = grad {
            self.backward_batch(p, &cache, &conds, &g_xhat, g);
        }
        losses
    }
}

impl VelocityModel for VelocityField {
    fn predict(&self, z: &[f64], s: f64, cond: &Conditioning) -> Prediction {
        Prediction::Data {
            x_hat: self.predict_x(z, s, cond),
            floor: self.cfg.denom_floor,
        }
    }
}

/// One training example: a sample and what it is conditioned on.
#[derive(Debug, Clone, Copy)]
pub struct FlowItem<'a> {
    pub sample: &'a FlowSample,
    pub cond: Conditioning<'a>,
}

/// Samples per parallel chunk. Fixed, so the reduction tree never depends
/// on the worker count.
const CHUNK: usize = 8;

/// Mean over the batch of `‖g_ψ(z, s, c) − (x − eps)‖²`.
pub fn flow_loss(field: &VelocityField, items: &[FlowItem]) -> f64 {
    flow_loss_with(field, &field.params, items)
}

fn flow_loss_with(field: &VelocityField, p: &[f64], items: &[FlowItem]) -> f64 {
    if items.is_empty() {
        return 0.0;
    }
    let per: Vec<Vec<f64>> = items.par_chunks(CHUNK).map(|c| field.chunk_loss(p, c, None)).collect();
    let flat: Vec<f64> = per.into_iter().flatten().collect();
    tree_sum(&flat) / items.len() as f64
}

/// Loss and its gradient with respect to `field.params`.
pub fn flow_loss_and_grad(field: &VelocityField, items: &[FlowItem]) -> Result<(f64, Vec<f64>), FlowError> {
    for it in items {
        let l = field.cfg.latent_dim;
        if it.sample.x.len() != l {
            return Err(FlowError::LengthMismatch(it.sample.x.len(), l));
        }
    }
    if items.is_empty() {
        return Ok((0.0, vec![0.0; field.params.len()]));
    }
    let parts: Vec<(Vec<f64>, Vec<f64>)> = items
        .par_chunks(CHUNK)
        .map(|c| {
            let mut g = vec![0.0; field.params.len()];
            let losses = field.chunk_loss(&field.params, c, Some(&mut g));
            (losses, g)
        })
        .collect();
    let n = items.len() as f64;
    let mut losses = Vec::with_capacity(items.len());
    let mut grad = vec![0.0; field.params.len()];
    for (l, g) in parts {
        losses.extend(l);
        for (a, b) in grad.iter_mut().zip(g) {
            *a += b;
        }
    }
    grad.iter_mut().for_each(|v| *v /= n);
    let loss = tree_sum(&losses) / n;
    if !loss.is_finite() {
        return Err(FlowError::Diverged {
            step: 0,
            loss,
            grad_norm: f64::NAN,
        });
    }
    Ok((loss, grad))
}

/// Loss of an arbitrary model (no gradient), e.g. an oracle or a stub.
pub fn model_loss(model: &dyn VelocityModel, items: &[FlowItem]) -> f64 {
    let terms: Vec<f64> = items
        .iter()
        .map(|it| {
            let g = model.predict(&it.sample.z, it.sample.s, &it.cond).velocity(&it.sample.z, it.sample.s);
            g.iter()
                .zip(it.sample.target())
                .map(|(a, b)| (a - b) * (a - b))
                .sum()
        })
        .collect();
    tree_sum(&terms) / items.len().max(1) as f64
}

/// Finite-difference check of [`flow_loss_and_grad`] on the given
/// parameter coordinates; returns the worst relative error.
pub fn flow_gradient_check(field: &VelocityField, items: &[FlowItem], coords: &[usize], h: f64) -> f64 {
    let (_, grad) = flow_loss_and_grad(field, items).expect("finite loss");
    crate::nn::max_relative_fd_error(
        &mut |p| flow_loss_with(field, p, items),
        &field.params,
        &grad,
        coords,
        h,
        1e-6,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conditions::ConditionSet;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    struct Stub<F: Fn(&[f64], f64) -> Vec<f64> + Sync>(F);

    impl<F: Fn(&[f64], f64) -> Vec<f64> + Sync> VelocityModel for Stub<F> {
        fn predict(&self, z: &[f64], s: f64, _c: &Conditioning) -> Prediction {
            Prediction::Velocity((self.0)(z, s))
        }
    }

    #[test]
    fn interpolation_endpoints() {
        let x = vec![2.0, -1.0];
        let e = vec![0.5, 3.0];
        assert_eq!(interpolate(&x, &e, 0.0).unwrap(), e);
        assert_eq!(interpolate(&x, &e, 1.0).unwrap(), x);
        assert_eq!(interpolate(&[2.0], &[0.0], 0.25).unwrap(), vec![0.5]);
        assert!(interpolate(&[1.0], &[1.0, 2.0], 0.5).is_err());
    }

    #[test]
    fn stubbed_losses() {
        let samples: Vec<FlowSample> = [0.0, 0.3, 0.9]
            .iter()
            .map(|&s| FlowSample::new(vec![1.0], vec![0.0], s).unwrap())
            .collect();
        let items: Vec<FlowItem> = samples
            .iter()
            .map(|s| FlowItem {
                sample: s,
                cond: Conditioning::default(),
            })
            .collect();
        assert_eq!(model_loss(&Stub(|_z: &[f64], _s| vec![0.0]), &items), 1.0);
        // x − eps is constant here, so the exact velocity is a constant stub.
        assert_eq!(model_loss(&Stub(|_z: &[f64], _s| vec![1.0]), &items), 0.0);
    }

    #[test]
    fn analytic_oracle_values() {
        assert_eq!(analytic_velocity_1d(0.5, 0.0, 1.0).unwrap(), 0.5);
        assert!(analytic_velocity_1d(1.0, 0.999, 1.0).unwrap().is_finite());
        assert!(analytic_velocity_1d(1.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn straight_path_exactness() {
        let oracle = PointMassOracle { x0: vec![1.0, -0.37, 12.5] };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..20 {
            let eps: Vec<f64> = (0..3).map(|_| rng.gen_range(-3.0..3.0)).collect();
            for n in [1, 3, 8, 64] {
                let out = euler_sample(&oracle, &eps, Schedule { steps: n }, &Conditioning::default()).unwrap();
                assert_eq!(out, oracle.x0, "N = {n}");
            }
        }
        // The velocity form agrees with the analytic expression.
        let v = oracle.predict(&[0.5], 0.25, &Conditioning::default()).velocity(&[0.5], 0.25);
        assert!((v[0] - analytic_velocity_1d(0.5, 0.25, 1.0).unwrap()).abs() < 1e-15);
    }

    #[test]
    fn gradient_check_small_field() {
        let mut cfg = FieldConfig::new(3).with_conditions(Default::default(), vec!["a".into(), "b".into()]);
        cfg.hidden = 16;
        cfg = cfg.with_render();
        let mut field = VelocityField::new(cfg, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        // Move the zero-initialized output layer off zero so every path carries gradient.
        for v in field.params.iter_mut() {
            *v += rng.gen_range(-0.05..0.05);
        }
        let enc = field.encoder().unwrap().clone();
        let fa = enc.features(&ConditionSet::tag_only("a")).unwrap();
        let fb = enc.features(&ConditionSet::tag_only("b")).unwrap();
        let samples: Vec<FlowSample> = (0..10)
            .map(|_| {
                FlowSample::new(
                    (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                    (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                    rng.gen_range(0.0..0.9),
                )
                .unwrap()
            })
            .collect();
        let renders: Vec<Vec<f64>> = (0..10).map(|_| (0..3).map(|_| rng.gen()).collect()).collect();
        let items: Vec<FlowItem> = samples
            .iter()
            .enumerate()
            .map(|(i, s)| FlowItem {
                sample: s,
                cond: Conditioning {
                    features: match i % 3 {
                        0 => Some(&fa),
                        1 => Some(&fb),
                        _ => None,
                    },
                    render: Some(&renders[i]),
                },
            })
            .collect();
        let coords: Vec<usize> = (0..10).map(|_| rng.gen_range(0..field.num_params())).collect();
        let err = flow_gradient_check(&field, &items, &coords, 1e-4);
        assert!(err < 1e-4, "{err}");
    }
}
