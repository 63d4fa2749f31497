//! Deployment-time logic: error metrics, velocity scaling of network output,
//! the adaptive shift controller and multi-shift fusion.

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::baseline::{baseline_depth, block_match_flow, depth_from_flow, BLOCK, SEARCH_RADIUS};
use crate::depthnet::{stack_pairs, DepthNet};
use crate::geometry::{DepthMap, Foe, PinholeCamera};
use crate::scenegen::RgbGrid;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum InferenceError {
    #[error("{0}")]
    Domain(String),
}

/// L1 and RMSE over a set of pixels, meters.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub l1: f64,
    pub rmse: f64,
    pub count: usize,
}

pub fn compute_metrics(pred: &[f64], target: &[f64]) -> Result<Metrics, InferenceError> {
    if pred.len() != target.len() {
        return Err(InferenceError::Domain(format!("{} predictions for {} targets", pred.len(), target.len())));
    }
    if pred.is_empty() {
        return Err(InferenceError::Domain("no pixels to score".into()));
    }
    let mut abs = 0.0;
    let mut sq = 0.0;
    for (p, t) in pred.iter().zip(target) {
        let d = p - t;
        abs += d.abs();
        sq += d * d;
    }
    let n = pred.len() as f64;
    Ok(Metrics { l1: abs / n, rmse: (sq / n).sqrt(), count: pred.len() })
}

/// Deployment parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InferenceConfig {
    /// Speed the training displacement corresponds to, m/s.
    pub v0: f64,
    pub fps: f64,
    /// Target mean depth of the shift controller, meters.
    pub e0: f64,
    /// Camera displacement of a training pair at the nominal shift, meters.
    pub nominal_displacement: f64,
    pub buffer_length: usize,
    /// Fraction of a shift's ceiling below which its estimate is trusted.
    pub fusion_tau: f64,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self { v0: 9.0, fps: 30.0, e0: 50.0, nominal_displacement: 0.3, buffer_length: 10, fusion_tau: 0.8 }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<(), InferenceError> {
        let positive = [self.v0, self.fps, self.e0, self.nominal_displacement];
        if positive.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(InferenceError::Domain(format!("V0, fps, E0 and displacement must be positive: {self:?}")));
        }
        if self.buffer_length < 2 {
            return Err(InferenceError::Domain("frame buffer must hold at least two frames".into()));
        }
        if !(self.fusion_tau > 0.0 && self.fusion_tau <= 1.0) {
            return Err(InferenceError::Domain(format!("fusion threshold {} outside (0, 1]", self.fusion_tau)));
        }
        Ok(())
    }

    /// Training-equivalent speed of a pair `shift` frames apart when flying at
    /// `speed` m/s: the pair displacement relative to the nominal one, times V0.
    pub fn effective_velocity(&self, speed: f64, shift: usize) -> f64 {
        let displacement = speed * shift as f64 / self.fps;
        self.v0 * displacement / self.nominal_displacement
    }

    /// Largest depth a pair can report once scaled.
    pub fn ceiling(&self, v_t: f64) -> f64 {
        crate::dataset::MAX_TARGET_DEPTH as f64 * v_t / self.v0
    }
}

pub fn scale_depth_by_velocity(raw: &DepthMap, v_t: f64, config: &InferenceConfig) -> Result<DepthMap, InferenceError> {
    if !(v_t > 0.0 && v_t.is_finite()) {
        return Err(InferenceError::Domain(format!("velocity must be positive, got {v_t}")));
    }
    let k = (v_t / config.v0) as f32;
    Ok(raw.map(|d| k * d))
}

/// Next temporal shift: `round(shift * E_depth / E0)`, halves away from zero,
/// clamped to the frame buffer.
pub fn adaptive_shift_update(shift: usize, depth: &DepthMap, config: &InferenceConfig) -> usize {
    let upper = config.buffer_length.saturating_sub(1).max(1);
    let target = shift.max(1) as f64 * depth.mean() / config.e0;
    if !target.is_finite() {
        return upper;
    }
    (target.round().max(1.0) as usize).min(upper)
}

/// Anything that maps image pairs to raw depth, meters at the training speed.
pub trait DepthPredictor {
    /// Pairs are `(reference frame, earlier frame)`.
    fn predict_pairs(&self, pairs: &[(&RgbGrid, &RgbGrid)]) -> Result<Vec<DepthMap>, InferenceError>;
}

impl DepthPredictor for DepthNet<f32> {
    fn predict_pairs(&self, pairs: &[(&RgbGrid, &RgbGrid)]) -> Result<Vec<DepthMap>, InferenceError> {
        let input = stack_pairs::<f32>(pairs);
        let outputs = self.predict(&input).map_err(|e| InferenceError::Domain(e.to_string()))?;
        let finest = &outputs[0];
        let (n, _, h, w) = finest.dims4("predict").map_err(|e| InferenceError::Domain(e.to_string()))?;
        Ok((0..n)
            .map(|b| {
                let d = finest.data[b * h * w..(b + 1) * h * w]
                    .iter()
                    .map(|&v| v.clamp(0.0, crate::dataset::MAX_TARGET_DEPTH))
                    .collect();
                DepthMap::new(w, h, d)
            })
            .collect())
    }
}

/// The classical pipeline behind the predictor interface: block matching and
/// the FOE conversion at the nominal displacement. Pixels with too little
/// motion report the ceiling; the border the matcher cannot reach copies the
/// nearest matched pixel. A known FOE skips its estimation.
#[derive(Debug, Clone)]
pub struct BaselinePredictor {
    pub camera: PinholeCamera,
    pub nominal_displacement: f64,
    pub foe: Option<Foe>,
}

impl DepthPredictor for BaselinePredictor {
    fn predict_pairs(&self, pairs: &[(&RgbGrid, &RgbGrid)]) -> Result<Vec<DepthMap>, InferenceError> {
        let max = crate::dataset::MAX_TARGET_DEPTH;
        let margin = BLOCK / 2 + SEARCH_RADIUS;
        pairs
            .iter()
            .map(|(a, b)| {
                let m = match &self.foe {
                    Some(foe) => {
                        let est = block_match_flow(a, b).map_err(|e| InferenceError::Domain(e.to_string()))?;
                        depth_from_flow(&self.camera, &est.flow.scaled(-1.0), foe, self.nominal_displacement)
                    }
                    None => {
                        baseline_depth(a, b, &self.camera, self.nominal_displacement)
                            .map_err(|e| InferenceError::Domain(e.to_string()))?
                            .0
                    }
                };
                let (w, h) = (m.depth.width, m.depth.height);
                if w <= 2 * margin || h <= 2 * margin {
                    return Err(InferenceError::Domain(format!("{w}x{h} frames are smaller than the matching window")));
                }
                let mut out = DepthMap::filled(w, h, max);
                for y in 0..h {
                    for x in 0..w {
                        let (sx, sy) = (x.clamp(margin, w - 1 - margin), y.clamp(margin, h - 1 - margin));
                        if m.valid[sy * w + sx] {
                            out.set(x, y, m.depth.get(sx, sy).min(max));
                        }
                    }
                }
                Ok(out)
            })
            .collect()
    }
}

/// One velocity-scaled map per shift plus the fused map.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiShiftDepth {
    pub fused: DepthMap,
    pub per_shift: Vec<(usize, DepthMap)>,
}

/// Per pixel, the first map whose value lies below `tau` times its ceiling,
/// else the last map. Maps are ordered by increasing shift.
pub fn fuse_depths(maps: &[(DepthMap, f64)], tau: f64) -> Result<DepthMap, InferenceError> {
    let Some((last, _)) = maps.last() else {
        return Err(InferenceError::Domain("no depth maps to fuse".into()));
    };
    if maps.iter().any(|(m, _)| (m.width, m.height) != (last.width, last.height)) {
        return Err(InferenceError::Domain("depth maps differ in size".into()));
    }
    let data = (0..last.data.len())
        .map(|i| {
            maps.iter()
                .find(|(m, ceiling)| (m.data[i] as f64) < tau * ceiling)
                .map_or(last.data[i], |(m, _)| m.data[i])
        })
        .collect();
    Ok(DepthMap::new(last.width, last.height, data))
}

/// Pairs the newest frame of `buffer` with the frame `shift` steps earlier for
/// every shift, predicts in one batch, scales each map and fuses them.
pub fn multi_shift_infer(
    buffer: &[RgbGrid],
    shifts: &[usize],
    predictor: &dyn DepthPredictor,
    speed: f64,
    config: &InferenceConfig,
) -> Result<MultiShiftDepth, InferenceError> {
    config.validate()?;
    if shifts.is_empty() {
        return Err(InferenceError::Domain("empty shift list".into()));
    }
    let mut sorted = shifts.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    let t = buffer.len().checked_sub(1).ok_or_else(|| InferenceError::Domain("empty frame buffer".into()))?;
    if let Some(&s) = sorted.iter().find(|&&s| s == 0 || s > t) {
        return Err(InferenceError::Domain(format!("shift {s} outside the {}-frame buffer", buffer.len())));
    }
    let pairs: Vec<(&RgbGrid, &RgbGrid)> = sorted.iter().map(|&s| (&buffer[t], &buffer[t - s])).collect();
    let raw = predictor.predict_pairs(&pairs)?;
    let mut per_shift = Vec::with_capacity(sorted.len());
    let mut with_ceiling = Vec::with_capacity(sorted.len());
    for (&s, r) in sorted.iter().zip(&raw) {
        let v_t = config.effective_velocity(speed, s);
        let scaled = scale_depth_by_velocity(r, v_t, config)?;
        with_ceiling.push((scaled.clone(), config.ceiling(v_t)));
        per_shift.push((s, scaled));
    }
    let fused = fuse_depths(&with_ceiling, config.fusion_tau)?;
    Ok(MultiShiftDepth { fused, per_shift })
}

fn hsv(h: f64, s: f64, v: f64) -> [u8; 3] {
    let c = v * s;
    let hp = (h / 60.0).rem_euclid(6.0);
    let x = c * (1.0 - (hp % 2.0 - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r, g, b].map(|t| ((t + m) * 255.0).round() as u8)
}

/// Depth colored from red (near) through the hues to purple at `max_depth`.
pub fn false_color(depth: &DepthMap, max_depth: f32) -> RgbImage {
    RgbImage::from_fn(depth.width as u32, depth.height as u32, |x, y| {
        let t = (depth.get(x as usize, y as usize) / max_depth).clamp(0.0, 1.0) as f64;
        Rgb(hsv(280.0 * t, 1.0, 1.0))
    })
}

/// Green where the prediction matches, shading to red for overestimated and
/// blue for underestimated depth; full saturation at `scale` meters of error.
pub fn error_image(pred: &DepthMap, truth: &DepthMap, scale: f32) -> Result<RgbImage, InferenceError> {
    if (pred.width, pred.height) != (truth.width, truth.height) {
        return Err(InferenceError::Domain("prediction and ground truth differ in size".into()));
    }
    Ok(RgbImage::from_fn(pred.width as u32, pred.height as u32, |x, y| {
        let e = pred.get(x as usize, y as usize) - truth.get(x as usize, y as usize);
        let k = (e.abs() / scale).clamp(0.0, 1.0);
        let g = ((1.0 - k) * 255.0).round() as u8;
        let c = (k * 255.0).round() as u8;
        if e >= 0.0 { Rgb([c, g, 0]) } else { Rgb([0, g, c]) }
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn metrics_examples() {
        let m = compute_metrics(&[50.0; 4], &[100.0; 4]).unwrap();
        assert_eq!((m.l1, m.rmse), (50.0, 50.0));
        let m = compute_metrics(&[0.0, 0.0], &[3.0, 4.0]).unwrap();
        assert_eq!(m.l1, 3.5);
        assert!((m.rmse - 12.5f64.sqrt()).abs() < 1e-12);
        let m = compute_metrics(&[1.0, 2.0], &[1.0, 2.0]).unwrap();
        assert_eq!((m.l1, m.rmse), (0.0, 0.0));
        assert!(compute_metrics(&[], &[]).is_err());
        assert!(compute_metrics(&[1.0], &[]).is_err());
    }

    #[test]
    fn velocity_scaling_examples() {
        let cfg = InferenceConfig::default();
        let raw = DepthMap::filled(3, 2, 20.0);
        assert_eq!(scale_depth_by_velocity(&raw, 9.0, &cfg).unwrap(), raw);
        assert!(scale_depth_by_velocity(&raw, 4.5, &cfg).unwrap().data.iter().all(|&d| d == 10.0));
        assert!(scale_depth_by_velocity(&raw, 0.0, &cfg).is_err());
        assert!(scale_depth_by_velocity(&raw, -1.0, &cfg).is_err());
        assert_eq!(cfg.effective_velocity(9.0, 1), 9.0);
        assert_eq!(cfg.effective_velocity(4.5, 2), 9.0);
    }

    #[test]
    fn shift_update_examples() {
        let cfg = InferenceConfig::default();
        let at = |e: f32| DepthMap::filled(4, 4, e);
        assert_eq!(adaptive_shift_update(3, &at(50.0), &cfg), 3);
        assert_eq!(adaptive_shift_update(3, &at(100.0), &cfg), 6);
        assert_eq!(adaptive_shift_update(3, &at(75.0), &cfg), 5);
        assert_eq!(adaptive_shift_update(3, &at(1000.0), &cfg), 9);
        assert_eq!(adaptive_shift_update(3, &at(1.0), &cfg), 1);
    }

    #[test]
    fn fusion_rule() {
        let near = DepthMap::new(2, 1, vec![5.0, 95.0]);
        let far = DepthMap::new(2, 1, vec![4.0, 120.0]);
        let fused = fuse_depths(&[(near.clone(), 100.0), (far.clone(), 300.0)], 0.8).unwrap();
        assert_eq!(fused.data, vec![5.0, 120.0]);
        assert_eq!(fuse_depths(&[(near.clone(), 100.0)], 0.8).unwrap(), near);
        assert!(fuse_depths(&[], 0.8).is_err());
    }

    struct Constant;

    impl DepthPredictor for Constant {
        fn predict_pairs(&self, pairs: &[(&RgbGrid, &RgbGrid)]) -> Result<Vec<DepthMap>, InferenceError> {
            Ok(pairs.iter().map(|_| DepthMap::filled(2, 2, 30.0)).collect())
        }
    }

    #[test]
    fn multi_shift_contract() {
        let cfg = InferenceConfig::default();
        let buffer = vec![RgbGrid::filled(2, 2, [0, 0, 0]); 4];
        let out = multi_shift_infer(&buffer, &[3, 1], &Constant, 9.0, &cfg).unwrap();
        assert_eq!(out.per_shift.iter().map(|(s, _)| *s).collect::<Vec<_>>(), vec![1, 3]);
        assert!(out.per_shift[1].1.data.iter().all(|&d| d == 90.0));
        assert!(out.fused.data.iter().all(|&d| d == 30.0));
        let single = multi_shift_infer(&buffer, &[2], &Constant, 9.0, &cfg).unwrap();
        assert_eq!(single.fused, single.per_shift[0].1);
        assert!(multi_shift_infer(&buffer, &[], &Constant, 9.0, &cfg).is_err());
        assert!(multi_shift_infer(&buffer, &[4], &Constant, 9.0, &cfg).is_err());
    }

    #[test]
    fn images_have_the_map_size() {
        let d = DepthMap::new(3, 2, vec![0.0, 50.0, 100.0, 10.0, 20.0, 30.0]);
        let img = false_color(&d, 100.0);
        assert_eq!(img.dimensions(), (3, 2));
        assert_eq!(img.get_pixel(0, 0).0, [255, 0, 0]);
        let err = error_image(&d, &d.map(|v| v + 1.0), 10.0).unwrap();
        assert_eq!(err.get_pixel(0, 0).0[0], 0);
        assert!(err.get_pixel(0, 0).0[2] > 0);
        assert_eq!(error_image(&d, &d, 1.0).unwrap().get_pixel(1, 1).0, [0, 255, 0]);
    }
}
