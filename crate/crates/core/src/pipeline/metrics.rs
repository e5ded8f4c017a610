//! Image metrics: PSNR, rgb L1, depth L1 and mask IoU.

use super::PipelineError;

/// One frame's buffers. `rgb` is interleaved in `[0, 1]`; `depth` in meters
/// with non-positive values meaning "no surface"; both optional extras may
/// be empty.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameData {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<f64>,
    pub depth: Vec<f64>,
    pub mask: Vec<bool>,
}

impl FrameData {
    pub fn rgb_only(width: usize, height: usize, rgb: Vec<f64>) -> Self {
        Self {
            width,
            height,
            rgb,
            depth: Vec::new(),
            mask: Vec::new(),
        }
    }

    fn pixels(&self) -> usize {
        self.width * self.height
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameMetrics {
    /// `+∞` when the compared pixels are identical.
    pub psnr: f64,
    pub rgb_l1: f64,
    /// `NaN` when neither frame carries depth or no pixel has a surface.
    pub depth_l1: f64,
    /// `NaN` when neither frame carries a mask.
    pub iou: f64,
    /// Pixels that entered the comparison.
    pub pixels: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub frames: Vec<FrameMetrics>,
    pub mean_psnr: f64,
    pub min_psnr: f64,
    pub mean_rgb_l1: f64,
    pub mean_depth_l1: f64,
    pub mean_iou: f64,
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / mse).log10()
    }
}

fn mean_of_defined(values: impl Iterator<Item = f64>) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for v in values.filter(|v| !v.is_nan()) {
        sum += v;
        n += 1;
    }
    if n == 0 {
        f64::NAN
    } else {
        sum / n as f64
    }
}

fn frame_metrics(p: &FrameData, t: &FrameData, valid: Option<&[bool]>) -> Result<FrameMetrics, PipelineError> {
    let n = t.pixels();
    let dims = |f: &FrameData| {
        f.rgb.len() == 3 * f.pixels()
            && (f.depth.is_empty() || f.depth.len() == f.pixels())
            && (f.mask.is_empty() || f.mask.len() == f.pixels())
    };
    if (p.width, p.height) != (t.width, t.height) || !dims(p) || !dims(t) || valid.is_some_and(|v| v.len() != n) {
        return Err(PipelineError::Shape(format!(
            "cannot compare {}x{} with {}x{}",
            p.width, p.height, t.width, t.height
        )));
    }
    let keep = |i: usize| valid.is_none_or(|v| v[i]);
    let (mut se, mut ae, mut count) = (0.0, 0.0, 0usize);
    for i in (0..n).filter(|&i| keep(i)) {
        for c in 0..3 {
            let d = p.rgb[3 * i + c] - t.rgb[3 * i + c];
            se += d * d;
            ae += d.abs();
        }
        count += 1;
    }
    let denom = (3 * count).max(1) as f64;
    let psnr = if count == 0 { f64::NAN } else { psnr_from_mse(se / denom) };
    let depth_l1 = if p.depth.is_empty() || t.depth.is_empty() {
        f64::NAN
    } else {
        mean_of_defined(
            (0..n)
                .filter(|&i| keep(i) && t.depth[i] > 0.0)
                .map(|i| (p.depth[i] - t.depth[i]).abs()),
        )
    };
    let iou = if p.mask.is_empty() || t.mask.is_empty() {
        f64::NAN
    } else {
        let (mut inter, mut union) = (0usize, 0usize);
        for i in (0..n).filter(|&i| keep(i)) {
            inter += (p.mask[i] && t.mask[i]) as usize;
            union += (p.mask[i] || t.mask[i]) as usize;
        }
        if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        }
    };
    Ok(FrameMetrics {
        psnr,
        rgb_l1: if count == 0 { f64::NAN } else { ae / denom },
        depth_l1,
        iou,
        pixels: count,
    })
}

/// Compares frame lists pairwise. `valid`, when given, restricts every
/// metric of frame `i` to the pixels flagged in `valid[i]`.
pub fn compute_metrics(
    pred: &[FrameData],
    truth: &[FrameData],
    valid: Option<&[Vec<bool>]>,
) -> Result<MetricsReport, PipelineError> {
    if pred.len() != truth.len() || valid.is_some_and(|v| v.len() != truth.len()) {
        return Err(PipelineError::Shape(format!(
            "{} predicted frames for {} ground-truth frames",
            pred.len(),
            truth.len()
        )));
    }
    let frames = pred
        .iter()
        .zip(truth)
        .enumerate()
        .map(|(i, (p, t))| frame_metrics(p, t, valid.map(|v| v[i].as_slice())))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(summarize(frames))
}

pub fn summarize(frames: Vec<FrameMetrics>) -> MetricsReport {
    let psnrs = frames.iter().map(|f| f.psnr).filter(|p| !p.is_nan());
    let min_psnr = psnrs.clone().fold(f64::INFINITY, f64::min);
    MetricsReport {
        mean_psnr: mean_of_defined(psnrs),
        min_psnr: if frames.is_empty() { f64::NAN } else { min_psnr },
        mean_rgb_l1: mean_of_defined(frames.iter().map(|f| f.rgb_l1)),
        mean_depth_l1: mean_of_defined(frames.iter().map(|f| f.depth_l1)),
        mean_iou: mean_of_defined(frames.iter().map(|f| f.iou)),
        frames,
    }
}

impl MetricsReport {
    pub fn csv_header() -> &'static str {
        "psnr,rgb_l1,depth_l1,iou,pixels"
    }

    pub fn csv_row(f: &FrameMetrics) -> String {
        format!("{},{},{},{},{}", f.psnr, f.rgb_l1, f.depth_l1, f.iou, f.pixels)
    }

    pub fn summary_line(&self) -> String {
        format!(
            "psnr_mean={:.4} psnr_min={:.4} rgb_l1={:.6} depth_l1={:.6} iou={:.4}",
            self.mean_psnr, self.min_psnr, self.mean_rgb_l1, self.mean_depth_l1, self.mean_iou
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn solid(v: f64) -> FrameData {
        FrameData::rgb_only(2, 2, vec![v; 12])
    }

    #[test]
    fn identical_frames_give_infinite_psnr() {
        let r = compute_metrics(&[solid(0.3)], &[solid(0.3)], None).unwrap();
        assert_eq!(r.frames[0].psnr, f64::INFINITY);
        assert_eq!(r.frames[0].rgb_l1, 0.0);
    }

    #[test]
    fn black_against_white_is_zero_db() {
        let r = compute_metrics(&[solid(0.0)], &[solid(1.0)], None).unwrap();
        assert_eq!(r.frames[0].psnr, 0.0);
        let checker: Vec<f64> = (0..12).map(|i| ((i / 3) % 2) as f64).collect();
        let inverse: Vec<f64> = checker.iter().map(|v| 1.0 - v).collect();
        let r = compute_metrics(
            &[FrameData::rgb_only(2, 2, checker)],
            &[FrameData::rgb_only(2, 2, inverse)],
            None,
        )
        .unwrap();
        assert_eq!(r.frames[0].psnr, 0.0);
    }

    #[test]
    fn valid_mask_depth_and_iou() {
        let mut p = solid(0.5);
        let mut t = solid(0.5);
        p.rgb[0] = 1.0;
        p.depth = vec![2.0, 3.0, 5.0, 1.0];
        t.depth = vec![2.5, 3.0, 0.0, 1.0];
        p.mask = vec![true, true, false, false];
        t.mask = vec![true, false, false, false];
        let valid = vec![vec![false, true, true, true]];
        let r = compute_metrics(&[p.clone()], &[t.clone()], Some(&valid)).unwrap();
        let f = r.frames[0];
        assert_eq!(f.psnr, f64::INFINITY);
        assert_eq!(f.depth_l1, 0.0);
        assert_eq!(f.iou, 0.0);
        assert_eq!(f.pixels, 3);
        let f = compute_metrics(&[p], &[t], None).unwrap().frames[0];
        assert!((f.depth_l1 - 0.5 / 3.0).abs() < 1e-12);
        assert_eq!(f.iou, 0.5);
    }

    #[test]
    fn mismatched_shapes_are_rejected() {
        let a = FrameData::rgb_only(2, 1, vec![0.0; 6]);
        assert!(matches!(compute_metrics(&[a], &[solid(0.0)], None), Err(PipelineError::Shape(_))));
        assert!(compute_metrics(&[], &[solid(0.0)], None).is_err());
    }
}
