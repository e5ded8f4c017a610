//! Training loops for the generative field and the refiner.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{flow_loss_and_grad, Conditioning, FlowError, FlowItem, FlowSample, VelocityField};
use crate::conditions::{CondFeatures, ConditionSet};
use crate::nn::OptimizerConfig;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlowTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    /// Probability of replacing a sample's condition with the null condition.
    pub cond_dropout: f64,
    pub seed: u64,
}

impl Default for FlowTrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch_size: 64,
            optimizer: OptimizerConfig::default(),
            cond_dropout: 0.1,
            seed: 0,
        }
    }
}

/// A training latent with its (optional) encoded conditions.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowDatum {
    pub x: Vec<f64>,
    pub features: Option<CondFeatures>,
}

impl FlowDatum {
    pub fn unconditional(x: Vec<f64>) -> Self {
        Self { x, features: None }
    }

    pub fn conditioned(field: &VelocityField, x: Vec<f64>, c: &ConditionSet) -> Result<Self, FlowError> {
        let enc = field
            .encoder()
            .ok_or_else(|| FlowError::Condition("field has no condition encoder".into()))?;
        let features = enc.features(c).map_err(|e| FlowError::Condition(e.to_string()))?;
        Ok(Self {
            x,
            features: Some(features),
        })
    }
}

/// A clean latent, the latent of a degraded render of it, and conditions.
#[derive(Debug, Clone, PartialEq)]
pub struct RefinerPair {
    pub clean: Vec<f64>,
    pub degraded: Vec<f64>,
    pub features: Option<CondFeatures>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedField {
    pub field: VelocityField,
    /// `(step, batch loss)` for every step.
    pub history: Vec<(usize, f64)>,
}

pub fn loss_history_csv(history: &[(usize, f64)]) -> String {
    let mut s = String::from("step,loss\n");
    for (step, loss) in history {
        s.push_str(&format!("{step},{loss}\n"));
    }
    s
}

struct Draw {
    datum: usize,
    sample: FlowSample,
    keep_cond: bool,
    degraded: bool,
}

fn draw_batch(
    rng: &mut ChaCha8Rng,
    n_data: usize,
    batch: usize,
    x_of: &dyn Fn(usize) -> Vec<f64>,
    dropout: f64,
    mix: f64,
) -> Vec<Draw> {
    (0..batch)
        .map(|_| {
            let datum = rng.gen_range(0..n_data);
            let x = x_of(datum);
            let eps: Vec<f64> = (0..x.len()).map(|_| rng.sample(StandardNormal)).collect();
            let s: f64 = rng.gen();
            let keep_cond = rng.gen::<f64>() >= dropout;
            let degraded = rng.gen::<f64>() < mix;
            Draw {
                datum,
                sample: FlowSample::new(x, eps, s).expect("lengths agree and s in [0,1)"),
                keep_cond,
                degraded,
            }
        })
        .collect()
}

fn run<'a>(
    mut field: VelocityField,
    cfg: &FlowTrainConfig,
    n_data: usize,
    mix: f64,
    x_of: &dyn Fn(usize) -> Vec<f64>,
    cond_of: &dyn Fn(usize, bool) -> (Option<&'a CondFeatures>, Option<&'a [f64]>),
) -> Result<TrainedField, FlowError> {
    if n_data == 0 {
        return Err(FlowError::EmptyDataset);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = cfg.optimizer.build(field.num_params());
    let mut history = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let draws = draw_batch(&mut rng, n_data, cfg.batch_size.max(1), x_of, cfg.cond_dropout, mix);
        let items: Vec<FlowItem> = draws
            .iter()
            .map(|d| {
                let (features, render) = cond_of(d.datum, d.degraded);
                FlowItem {
                    sample: &d.sample,
                    cond: Conditioning {
                        features: features.filter(|_| d.keep_cond),
                        render,
                    },
                }
            })
            .collect();
        let (loss, mut grad) = flow_loss_and_grad(&field, &items).map_err(|e| match e {
            FlowError::Diverged { loss, grad_norm, .. } => FlowError::Diverged { step, loss, grad_norm },
            other => other,
        })?;
        opt.set_lr(cfg.optimizer.lr_at(step, cfg.steps));
        let norm = cfg.optimizer.apply(opt.as_mut(), &mut field.params, &mut grad);
        if !norm.is_finite() || field.params.iter().any(|p| !p.is_finite()) {
            return Err(FlowError::Diverged {
                step,
                loss,
                grad_norm: norm,
            });
        }
        history.push((step, loss));
    }
    Ok(TrainedField { field, history })
}

/// Trains `field` on `data` with fresh noise and uniform `s` each step.
pub fn train_flow(field: VelocityField, data: &[FlowDatum], cfg: &FlowTrainConfig) -> Result<TrainedField, FlowError> {
    let l = field.cfg.latent_dim;
    if let Some(d) = data.iter().find(|d| d.x.len() != l) {
        return Err(FlowError::LengthMismatch(d.x.len(), l));
    }
    run(
        field,
        cfg,
        data.len(),
        0.0,
        &|i| data[i].x.clone(),
        &|i, _| (data[i].features.as_ref(), None),
    )
}

/// Trains a render-conditioned field to map noise to the clean latent.
/// A fraction `mix_ratio` of samples see the degraded render; the rest see
/// the clean one.
pub fn train_refiner(
    field: VelocityField,
    pairs: &[RefinerPair],
    mix_ratio: f64,
    cfg: &FlowTrainConfig,
) -> Result<TrainedField, FlowError> {
    if !(0.0..=1.0).contains(&mix_ratio) {
        return Err(FlowError::BadMix(mix_ratio));
    }
    if field.cfg.render_dim == 0 {
        return Err(FlowError::Unpaired("field takes no render input".into()));
    }
    let l = field.cfg.latent_dim;
    for (i, p) in pairs.iter().enumerate() {
        if p.clean.len() != l || p.degraded.len() != l {
            return Err(FlowError::Unpaired(format!(
                "pair {i}: clean {} and degraded {} for latent {l}",
                p.clean.len(),
                p.degraded.len()
            )));
        }
    }
    run(
        field,
        cfg,
        pairs.len(),
        mix_ratio,
        &|i| pairs[i].clean.clone(),
        &|i, degraded| {
            let p = &pairs[i];
            let r = if degraded { &p.degraded } else { &p.clean };
            (p.features.as_ref(), Some(r.as_slice()))
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::{euler_sample, FieldConfig, Schedule};

    #[test]
    fn deterministic_training() {
        let cfg = FlowTrainConfig {
            steps: 5,
            batch_size: 10,
            ..Default::default()
        };
        let data = vec![FlowDatum::unconditional(vec![1.0, 2.0])];
        let f = || VelocityField::new(FieldConfig { hidden: 8, ..FieldConfig::new(2) }, 1);
        let a = train_flow(f(), &data, &cfg).unwrap();
        let b = train_flow(f(), &data, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn refiner_rejects_bad_input() {
        let f = VelocityField::new(FieldConfig::new(2).with_render(), 1);
        let pair = RefinerPair {
            clean: vec![0.0; 2],
            degraded: vec![0.0; 3],
            features: None,
        };
        assert!(matches!(
            train_refiner(f.clone(), &[pair], 0.5, &FlowTrainConfig::default()),
            Err(FlowError::Unpaired(_))
        ));
        assert!(matches!(
            train_refiner(f, &[], 1.5, &FlowTrainConfig::default()),
            Err(FlowError::BadMix(_))
        ));
    }

    #[test]
    fn learns_a_point_mass() {
        let cfg = FlowTrainConfig {
            steps: 1000,
            batch_size: 32,
            optimizer: OptimizerConfig {
                lr: 2e-3,
                final_lr_scale: 0.01,
                ..Default::default()
            },
            ..Default::default()
        };
        let field = VelocityField::new(
            FieldConfig {
                hidden: 32,
                layers: 1,
                ..FieldConfig::new(1)
            },
            2,
        );
        let out = train_flow(field, &[FlowDatum::unconditional(vec![1.0])], &cfg).unwrap();
        let x = euler_sample(&out.field, &[0.3], Schedule { steps: 8 }, &Conditioning::default()).unwrap();
        assert!((x[0] - 1.0).abs() < 0.05, "{x:?}");
    }
}
