//! Per-frame refinement with a render-conditioned flow field, plus the
//! synthetic degradations used to train and probe it.
//!
//! The refiner's latent is a frame's interleaved rgb at full resolution.

use super::{gaussian_noise, PipelineError};
use crate::conditions::{CondFeatures, ConditionEncoderConfig};
use crate::flow::{euler_sample, Conditioning, FieldConfig, Schedule, VelocityField};

/// Zeroes a `size × size` patch with top-left corner `(x0, y0)`.
pub fn mask_patch(rgb: &[f64], width: usize, height: usize, x0: usize, y0: usize, size: usize) -> Vec<f64> {
    assert_eq!(rgb.len(), 3 * width * height);
    let mut out = rgb.to_vec();
    for y in y0..(y0 + size).min(height) {
        for x in x0..(x0 + size).min(width) {
            let i = 3 * (y * width + x);
            out[i..i + 3].fill(0.0);
        }
    }
    out
}

/// 3×3 box blur with clamped borders.
pub fn box_blur3(rgb: &[f64], width: usize, height: usize) -> Vec<f64> {
    assert_eq!(rgb.len(), 3 * width * height);
    let mut out = vec![0.0; rgb.len()];
    for y in 0..height {
        for x in 0..width {
            for c in 0..3 {
                let mut s = 0.0;
                for dy in [-1i64, 0, 1] {
                    for dx in [-1i64, 0, 1] {
                        let yy = (y as i64 + dy).clamp(0, height as i64 - 1) as usize;
                        let xx = (x as i64 + dx).clamp(0, width as i64 - 1) as usize;
                        s += rgb[3 * (yy * width + xx) + c];
                    }
                }
                out[3 * (y * width + x) + c] = s / 9.0;
            }
        }
    }
    out
}

/// Field layout of a refiner for `width × height` frames. With `tags`, the
/// field also encodes the (shifted) condition set.
pub fn refiner_field_config(
    width: usize,
    height: usize,
    hidden: usize,
    layers: usize,
    tags: Option<Vec<String>>,
) -> FieldConfig {
    let base = FieldConfig {
        hidden,
        layers,
        ..FieldConfig::new(3 * width * height).with_render()
    };
    match tags {
        Some(t) => base.with_conditions(ConditionEncoderConfig::default(), t),
        None => base,
    }
}

/// Samples a refined frame conditioned on `render`; the result is clamped
/// to `[0, 1]`.
pub fn refine_frame(
    field: &VelocityField,
    render: &[f64],
    features: Option<&CondFeatures>,
    steps: usize,
    seed: u64,
) -> Result<Vec<f64>, PipelineError> {
    if field.cfg.render_dim != render.len() || field.cfg.latent_dim != render.len() {
        return Err(PipelineError::Shape(format!(
            "refiner expects frames of {} values, got {}",
            field.cfg.latent_dim,
            render.len()
        )));
    }
    let eps = gaussian_noise(render.len(), seed);
    let cond = Conditioning {
        features,
        render: Some(render),
    };
    let mut x = euler_sample(field, &eps, Schedule { steps }, &cond)?;
    for v in x.iter_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blur_keeps_constants_and_mask_hits_only_the_patch() {
        let flat = vec![0.25; 3 * 5 * 4];
        assert_eq!(box_blur3(&flat, 5, 4), flat);
        let ramp: Vec<f64> = (0..3 * 5 * 4).map(|i| i as f64).collect();
        let m = mask_patch(&ramp, 5, 4, 3, 2, 8);
        for (i, (a, b)) in ramp.iter().zip(&m).enumerate() {
            let (x, y) = ((i / 3) % 5, (i / 3) / 5);
            if x >= 3 && y >= 2 {
                assert_eq!(*b, 0.0);
            } else {
                assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn refiner_rejects_wrong_frame_size() {
        let f = VelocityField::new(refiner_field_config(2, 2, 8, 1, None), 0);
        assert!(refine_frame(&f, &[0.0; 5], None, 8, 0).is_err());
        let out = refine_frame(&f, &[0.5; 12], None, 8, 0).unwrap();
        assert!(out.iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
