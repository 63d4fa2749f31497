//! Classical pipeline: block-matching flow, least-squares FOE and per-pixel
//! depth from disparity.

use nalgebra::{Matrix2, Vector2};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use thiserror::Error;

use crate::geometry::{depth_from_disparity, DepthMap, FlowField, Foe, MotionSense, PinholeCamera, PixelPoint};
use crate::scenegen::RgbGrid;

pub const BLOCK: usize = 7;
pub const SEARCH_RADIUS: usize = 8;
/// Disparities below this are too small to convert, pixels.
pub const MIN_DISPARITY: f64 = 0.05;
/// Normal matrices worse conditioned than this mean a FOE at infinity.
pub const MAX_CONDITION: f64 = 1e6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BaselineError {
    #[error("no reliable flow vectors to estimate the focus of expansion")]
    NoReliableVectors,
    #[error("frames differ in size: {0:?} vs {1:?}")]
    SizeMismatch((usize, usize), (usize, usize)),
}

/// Flow with a per-pixel matching margin.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowEstimate {
    pub flow: FlowField,
    pub confidence: Vec<f64>,
}

impl FlowEstimate {
    /// Wraps a known flow field with unit confidence on valid pixels.
    pub fn from_flow(flow: FlowField) -> Self {
        let confidence = flow.valid.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect();
        Self { flow, confidence }
    }
}

fn sad(a: &[f64], b: &[f64], w: usize, (ax, ay): (usize, usize), (bx, by): (usize, usize)) -> f64 {
    let half = BLOCK / 2;
    let mut s = 0.0;
    for dy in 0..BLOCK {
        let ra = (ay + dy - half) * w;
        let rb = (by + dy - half) * w;
        for dx in 0..BLOCK {
            s += (a[ra + ax + dx - half] - b[rb + bx + dx - half]).abs();
        }
    }
    s
}

fn ssd(a: &[f64], b: &[f64], w: usize, (ax, ay): (usize, usize), (bx, by): (usize, usize)) -> f64 {
    let half = BLOCK / 2;
    let mut s = 0.0;
    for dy in 0..BLOCK {
        let ra = (ay + dy - half) * w;
        let rb = (by + dy - half) * w;
        for dx in 0..BLOCK {
            let d = a[ra + ax + dx - half] - b[rb + bx + dx - half];
            s += d * d;
        }
    }
    s
}

/// Vertex offset of the parabola through `(-1, l), (0, c), (1, r)`.
fn parabola_offset(l: f64, c: f64, r: f64) -> f64 {
    let denom = l - 2.0 * c + r;
    if denom > 0.0 {
        (0.5 * (l - r) / denom).clamp(-0.5, 0.5)
    } else {
        0.0
    }
}

/// SAD block matching from `frame_a` into `frame_b`: the flow of pixel `P` of
/// `frame_a` is `P_b - P`. The integer winner is refined per axis by a
/// parabola through the squared-difference costs around it, which unlike the
/// V-shaped SAD profile is locally quadratic. Pixels whose search window
/// leaves the image are masked.
pub fn block_match_flow(frame_a: &RgbGrid, frame_b: &RgbGrid) -> Result<FlowEstimate, BaselineError> {
    if (frame_a.width, frame_a.height) != (frame_b.width, frame_b.height) {
        return Err(BaselineError::SizeMismatch((frame_a.width, frame_a.height), (frame_b.width, frame_b.height)));
    }
    let (w, h) = (frame_a.width, frame_a.height);
    let (ga, gb) = (frame_a.luma(), frame_b.luma());
    let margin = BLOCK / 2 + SEARCH_RADIUS;
    let side = 2 * SEARCH_RADIUS + 1;
    let area = (BLOCK * BLOCK) as f64;
    let rows: Vec<Vec<(f64, f64, f64, bool)>> = (0..h)
        .into_par_iter()
        .map(|y| {
            let mut row = vec![(0.0, 0.0, 0.0, false); w];
            if y < margin || y + margin >= h {
                return row;
            }
            let mut cost = vec![0.0; side * side];
            for (x, cell) in row.iter_mut().enumerate() {
                if x < margin || x + margin >= w {
                    continue;
                }
                let mut best = (f64::INFINITY, 0usize, 0usize);
                for j in 0..side {
                    for i in 0..side {
                        let c = sad(&ga, &gb, w, (x, y), (x + i - SEARCH_RADIUS, y + j - SEARCH_RADIUS));
                        cost[j * side + i] = c;
                        if c < best.0 {
                            best = (c, i, j);
                        }
                    }
                }
                let (c0, bi, bj) = best;
                let mut second = f64::INFINITY;
                for j in 0..side {
                    for i in 0..side {
                        if i.abs_diff(bi) <= 1 && j.abs_diff(bj) <= 1 {
                            continue;
                        }
                        second = second.min(cost[j * side + i]);
                    }
                }
                let (bx, by) = (x + bi - SEARCH_RADIUS, y + bj - SEARCH_RADIUS);
                let ssd_at = |ox: isize, oy: isize| {
                    ssd(&ga, &gb, w, (x, y), (bx.wrapping_add_signed(ox), by.wrapping_add_signed(oy)))
                };
                let (sub_x, sub_y) = if c0 == 0.0 {
                    (0.0, 0.0)
                } else {
                    let centre = ssd_at(0, 0);
                    let sx = if bi > 0 && bi + 1 < side { parabola_offset(ssd_at(-1, 0), centre, ssd_at(1, 0)) } else { 0.0 };
                    let sy = if bj > 0 && bj + 1 < side { parabola_offset(ssd_at(0, -1), centre, ssd_at(0, 1)) } else { 0.0 };
                    (sx, sy)
                };
                let du = bi as f64 - SEARCH_RADIUS as f64 + sub_x;
                let dv = bj as f64 - SEARCH_RADIUS as f64 + sub_y;
                *cell = (du, dv, ((second - c0) / area).max(0.0), true);
            }
            row
        })
        .collect();
    let mut flow = FlowField::zeros(w, h);
    let mut confidence = vec![0.0; w * h];
    for (y, row) in rows.into_iter().enumerate() {
        for (x, (du, dv, c, ok)) in row.into_iter().enumerate() {
            let i = y * w + x;
            flow.du[i] = du;
            flow.dv[i] = dv;
            flow.valid[i] = ok;
            confidence[i] = c;
        }
    }
    Ok(FlowEstimate { flow, confidence })
}

/// One flow vector at an image point, with a reliability weight.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlowVector {
    pub p: PixelPoint,
    pub du: f64,
    pub dv: f64,
    pub confidence: f64,
}

/// Weighted least squares on `dv * u_f - du * v_f = dv * u - du * v`, with
/// weights `confidence * |flow|`.
pub fn estimate_foe_from_vectors(vectors: &[FlowVector]) -> Result<Foe, BaselineError> {
    let mut a = Matrix2::<f64>::zeros();
    let mut b = Vector2::<f64>::zeros();
    let mut mean_dir = Vector2::<f64>::zeros();
    let mut n = 0usize;
    for fv in vectors {
        let mag = fv.du.hypot(fv.dv);
        let w = fv.confidence * mag;
        if !(w > 0.0) || !w.is_finite() {
            continue;
        }
        let row = Vector2::new(fv.dv, -fv.du);
        let rhs = fv.dv * fv.p.u - fv.du * fv.p.v;
        a += w * row * row.transpose();
        b += w * rhs * row;
        mean_dir += fv.confidence * Vector2::new(fv.du, fv.dv) / mag;
        n += 1;
    }
    if n == 0 {
        return Err(BaselineError::NoReliableVectors);
    }
    let eig = a.symmetric_eigenvalues();
    let (lo, hi) = (eig.min(), eig.max());
    let solved = if lo > 0.0 && hi / lo <= MAX_CONDITION { a.try_inverse().map(|inv| inv * b) } else { None };
    match solved {
        Some(foe) => {
            let mut radial = 0.0;
            for fv in vectors {
                let w = fv.confidence * fv.du.hypot(fv.dv);
                if w > 0.0 && w.is_finite() {
                    radial += w * (fv.du * (fv.p.u - foe.x) + fv.dv * (fv.p.v - foe.y));
                }
            }
            let sense = if radial >= 0.0 { MotionSense::Expansion } else { MotionSense::Contraction };
            Ok(Foe::finite(foe.x, foe.y, sense))
        }
        None => {
            let norm = mean_dir.norm();
            if !(norm > 0.0) {
                return Err(BaselineError::NoReliableVectors);
            }
            Ok(Foe::AtInfinity { direction: mean_dir / norm })
        }
    }
}

/// FOE of a dense estimate, using pixel centers as positions.
pub fn estimate_foe(camera: &PinholeCamera, flow: &FlowEstimate) -> Result<Foe, BaselineError> {
    let f = &flow.flow;
    let mut vectors = Vec::new();
    for y in 0..f.height {
        for x in 0..f.width {
            let i = y * f.width + x;
            if f.valid[i] && flow.confidence[i] > 0.0 {
                vectors.push(FlowVector { p: camera.pixel_center(x, y), du: f.du[i], dv: f.dv[i], confidence: flow.confidence[i] });
            }
        }
    }
    estimate_foe_from_vectors(&vectors)
}

/// Depth with a validity mask; masked pixels hold 0.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedDepth {
    pub depth: DepthMap,
    pub valid: Vec<bool>,
}

impl MaskedDepth {
    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }
}

/// Converts a flow field (reference-view convention) to depth.
pub fn depth_from_flow(camera: &PinholeCamera, flow: &FlowField, foe: &Foe, speed: f64) -> MaskedDepth {
    let (w, h) = (flow.width, flow.height);
    let mut depth = DepthMap::filled(w, h, 0.0);
    let mut valid = vec![false; w * h];
    for y in 0..h {
        for x in 0..w {
            let Some(d) = flow.disparity(x, y) else { continue };
            if d < MIN_DISPARITY {
                continue;
            }
            if let Ok(z) = depth_from_disparity(camera, camera.pixel_center(x, y), d, foe, speed) {
                depth.set(x, y, z as f32);
                valid[y * w + x] = true;
            }
        }
    }
    MaskedDepth { depth, valid }
}

/// Full baseline for reference frame `frame_a` and a second view `frame_b`
/// taken after a displacement of length `speed`.
pub fn baseline_depth(
    frame_a: &RgbGrid,
    frame_b: &RgbGrid,
    camera: &PinholeCamera,
    speed: f64,
) -> Result<(MaskedDepth, Foe), BaselineError> {
    let mut est = block_match_flow(frame_a, frame_b)?;
    // Matching measures where reference pixels went; the geometry convention
    // is the flow that brings the other view onto the reference.
    est.flow = est.flow.scaled(-1.0);
    depth_from_estimate(camera, &est, speed)
}

/// FOE estimation followed by per-pixel conversion. A field without any
/// motion gives a fully masked map.
pub fn depth_from_estimate(
    camera: &PinholeCamera,
    est: &FlowEstimate,
    speed: f64,
) -> Result<(MaskedDepth, Foe), BaselineError> {
    let f = &est.flow;
    let still = (0..f.du.len()).all(|i| !f.valid[i] || (f.du[i] == 0.0 && f.dv[i] == 0.0));
    if still {
        let depth = MaskedDepth { depth: DepthMap::filled(f.width, f.height, 0.0), valid: vec![false; f.du.len()] };
        return Ok((depth, Foe::AtInfinity { direction: Vector2::new(1.0, 0.0) }));
    }
    let foe = estimate_foe(camera, est)?;
    Ok((depth_from_flow(camera, f, &foe, speed), foe))
}

/// Adds independent Gaussian noise of deviation `sigma` pixels to both flow
/// components of every valid pixel.
pub fn add_flow_noise(flow: &FlowField, sigma: f64, rng: &mut impl Rng) -> FlowField {
    let mut out = flow.clone();
    let normal = Normal::new(0.0, sigma).expect("finite noise deviation");
    for i in 0..out.du.len() {
        if out.valid[i] {
            out.du[i] += normal.sample(rng);
            out.dv[i] += normal.sample(rng);
        }
    }
    out
}

/// Absolute depth error of one valid pixel and its distance to the FOE.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RadialError {
    pub radius: f64,
    pub abs_error: f64,
}

pub fn radial_errors(camera: &PinholeCamera, est: &MaskedDepth, truth: &DepthMap, foe: PixelPoint) -> Vec<RadialError> {
    let mut out = Vec::new();
    for y in 0..truth.height {
        for x in 0..truth.width {
            if est.valid[y * truth.width + x] {
                out.push(RadialError {
                    radius: camera.pixel_center(x, y).distance(&foe),
                    abs_error: (est.depth.get(x, y) as f64 - truth.get(x, y) as f64).abs(),
                });
            }
        }
    }
    out
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}
