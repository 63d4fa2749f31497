//! Scene records, training samples and their augmentations.

pub mod pfm;
mod store;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use thiserror::Error;

use nalgebra::Vector3;

use crate::geometry::{DepthMap, PinholeCamera, Translation};
use crate::scenegen::{Primitive, RgbGrid};
pub use store::{
    generate_dataset, generate_records, load_dataset, load_index, load_metadata, load_scene, read_png, save_scene, write_png,
    Dataset, DatasetIndex,
    GenerateOptions, INDEX_FILE, METADATA_FILE,
};

/// Upper clamp of training targets, meters.
pub const MAX_TARGET_DEPTH: f32 = 100.0;
/// Lower floor applied to targets fed to the network, meters.
pub const TARGET_FLOOR: f32 = 0.5;
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: schema error{}: {detail}", key.as_ref().map(|k| format!(" in `{k}`")).unwrap_or_default())]
    Schema { path: PathBuf, key: Option<String>, detail: String },
    #[error("{path}: expected {expected}, found {found}")]
    DimensionMismatch { path: PathBuf, expected: String, found: String },
    #[error("{path}: corrupt file: {detail}")]
    Corrupt { path: String, detail: String },
    #[error("{0}")]
    Domain(String),
}

impl DatasetError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        DatasetError::Io { path: path.to_path_buf(), source }
    }
}

/// Contents of `metadata.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneMetadata {
    pub schema_version: u32,
    pub seed: u64,
    pub camera_direction: [f64; 3],
    pub per_frame_displacement: f64,
    pub nominal_shift: usize,
    pub sequence_length: usize,
    pub fov: f64,
    pub f: f64,
    /// `[width, height]` in pixels.
    pub resolution: [usize; 2],
    pub wall_distance: f64,
    pub max_render_distance: f64,
    pub primitives: Vec<Primitive>,
}

/// One rendered sequence with its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneRecord {
    pub id: String,
    pub metadata: SceneMetadata,
    pub frames: Vec<RgbGrid>,
    pub depths: Vec<DepthMap>,
}

impl SceneRecord {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn resolution(&self) -> usize {
        self.metadata.resolution[0]
    }

    pub fn camera(&self) -> PinholeCamera {
        let [w, h] = self.metadata.resolution;
        PinholeCamera::new(self.metadata.f, w as f64 / 2.0, h as f64 / 2.0, w, h).expect("metadata camera is valid")
    }

    pub fn camera_position(&self, k: usize) -> Vector3<f64> {
        Vector3::from(self.metadata.camera_direction) * (k as f64 * self.metadata.per_frame_displacement)
    }

    /// Displacement from the viewpoint of frame `t + shift` to that of frame `t`.
    pub fn pair_translation(&self, t: usize, shift: i32) -> Translation {
        let other = (t as i64 + shift as i64) as usize;
        Translation::from_vector(self.camera_position(t) - self.camera_position(other))
    }
}

/// A training pair. `frame_a` is the reference view whose depth is the target.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub frame_a: RgbGrid,
    pub frame_b: RgbGrid,
    pub shift: i32,
    pub target: DepthMap,
}

/// Ground truth depth renormalized to the nominal shift, before clamping.
pub fn normalized_depth(gt: f32, nominal_shift: usize, shift: i32) -> f32 {
    ((gt as f64 * nominal_shift as f64) / shift.unsigned_abs() as f64) as f32
}

/// Builds the pair `(frame_t, frame_{t+shift})` and its target.
///
/// A shift of `k` frames moves the camera `|k| / nominal` times as far as the
/// nominal pair, which looks like a scene `nominal / |k|` times as deep.
/// Negative shifts only reverse the motion. Zero shift pairs a frame with
/// itself and targets the clamp value everywhere.
pub fn make_sample(record: &SceneRecord, t: usize, shift: i32) -> Result<Sample, DatasetError> {
    let len = record.len() as i64;
    let other = t as i64 + shift as i64;
    if t as i64 >= len || other < 0 || other >= len {
        return Err(DatasetError::Domain(format!(
            "frame {t} with shift {shift} outside a sequence of {len} frames"
        )));
    }
    let gt = &record.depths[t];
    let target = if shift == 0 {
        DepthMap::filled(gt.width, gt.height, MAX_TARGET_DEPTH)
    } else {
        let nominal = record.metadata.nominal_shift;
        gt.map(|z| normalized_depth(z, nominal, shift).min(MAX_TARGET_DEPTH))
    };
    Ok(Sample { frame_a: record.frames[t].clone(), frame_b: record.frames[other as usize].clone(), shift, target })
}

/// Distribution of temporal shifts used when drawing samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftSpec {
    pub shifts: Vec<i32>,
    pub weights: Vec<f64>,
}

impl ShiftSpec {
    /// `{±1, ±2, ±3}` uniformly, plus zero-shift pairs with probability 5%.
    pub fn training_default() -> Self {
        let mut shifts = vec![0];
        let mut weights = vec![0.05];
        for s in [1, 2, 3] {
            shifts.extend([s, -s]);
            weights.extend([0.95 / 6.0, 0.95 / 6.0]);
        }
        Self { shifts, weights }
    }

    pub fn only(shift: i32) -> Self {
        Self { shifts: vec![shift], weights: vec![1.0] }
    }

    pub fn uniform(shifts: &[i32]) -> Self {
        Self { shifts: shifts.to_vec(), weights: vec![1.0; shifts.len()] }
    }

    pub fn validate(&self, sequence_length: usize) -> Result<(), DatasetError> {
        if self.shifts.is_empty() || self.shifts.len() != self.weights.len() {
            return Err(DatasetError::Domain("shift spec needs one weight per shift".into()));
        }
        for &s in &self.shifts {
            if !(-9..=9).contains(&s) || s.unsigned_abs() as usize >= sequence_length {
                return Err(DatasetError::Domain(format!("shift {s} not allowed for {sequence_length} frames")));
            }
        }
        if self.weights.iter().any(|w| !(*w >= 0.0)) || self.weights.iter().sum::<f64>() <= 0.0 {
            return Err(DatasetError::Domain("shift weights must be non-negative and not all zero".into()));
        }
        Ok(())
    }

    pub fn draw(&self, rng: &mut impl Rng) -> i32 {
        let total: f64 = self.weights.iter().sum();
        let mut u = rng.random_range(0.0..total);
        for (s, w) in self.shifts.iter().zip(&self.weights) {
            if u < *w {
                return *s;
            }
            u -= w;
        }
        *self.shifts.last().unwrap()
    }

    /// Draws a shift and a reference frame compatible with it.
    pub fn draw_pair(&self, sequence_length: usize, rng: &mut impl Rng) -> (usize, i32) {
        let shift = self.draw(rng);
        let lo = (-shift).max(0) as usize;
        let hi = sequence_length - 1 - shift.max(0) as usize;
        (rng.random_range(lo..=hi), shift)
    }
}

/// Pixel-grid symmetry applied jointly to both frames and the target.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GeometricOp {
    HFlip,
    VFlip,
    /// Counter-clockwise quarter turns.
    Rot90(u8),
}

impl GeometricOp {
    /// The eight elements of the square's symmetry group.
    pub const DIHEDRAL: [&'static [GeometricOp]; 8] = [
        &[],
        &[GeometricOp::Rot90(1)],
        &[GeometricOp::Rot90(2)],
        &[GeometricOp::Rot90(3)],
        &[GeometricOp::HFlip],
        &[GeometricOp::VFlip],
        &[GeometricOp::HFlip, GeometricOp::Rot90(1)],
        &[GeometricOp::VFlip, GeometricOp::Rot90(1)],
    ];

    /// Source coordinates of output pixel `(x, y)` in a `w x h` grid.
    fn source(self, x: usize, y: usize, w: usize, h: usize) -> (usize, usize) {
        match self {
            GeometricOp::HFlip => (w - 1 - x, y),
            GeometricOp::VFlip => (x, h - 1 - y),
            GeometricOp::Rot90(k) => match k % 4 {
                0 => (x, y),
                1 => (w - 1 - y, x),
                2 => (w - 1 - x, h - 1 - y),
                _ => (y, h - 1 - x),
            },
        }
    }

    fn remap<T: Copy>(self, data: &[T], w: usize, h: usize, channels: usize) -> Vec<T> {
        let mut out = Vec::with_capacity(data.len());
        for y in 0..h {
            for x in 0..w {
                let (sx, sy) = self.source(x, y, w, h);
                let base = (sy * w + sx) * channels;
                out.extend_from_slice(&data[base..base + channels]);
            }
        }
        out
    }
}

pub fn rgb_apply(op: GeometricOp, img: &RgbGrid) -> RgbGrid {
    RgbGrid::new(img.width, img.height, op.remap(&img.data, img.width, img.height, 3))
}

pub fn depth_apply(op: GeometricOp, depth: &DepthMap) -> DepthMap {
    DepthMap::new(depth.width, depth.height, op.remap(&depth.data, depth.width, depth.height, 1))
}

/// Applies `op` to both frames and the target. Quarter turns need square grids.
pub fn augment_geometric(sample: &Sample, op: GeometricOp) -> Result<Sample, DatasetError> {
    let (w, h) = (sample.target.width, sample.target.height);
    if matches!(op, GeometricOp::Rot90(k) if k % 2 == 1) && w != h {
        return Err(DatasetError::Domain(format!("quarter turn of a non-square {w}x{h} sample")));
    }
    Ok(Sample {
        frame_a: rgb_apply(op, &sample.frame_a),
        frame_b: rgb_apply(op, &sample.frame_b),
        shift: sample.shift,
        target: depth_apply(op, &sample.target),
    })
}

/// Block-average downsampling by `factor` (a power of two).
pub fn pool_depth(depth: &DepthMap, factor: usize) -> Result<DepthMap, DatasetError> {
    if factor == 0 || !factor.is_power_of_two() || depth.width % factor != 0 || depth.height % factor != 0 {
        return Err(DatasetError::Domain(format!(
            "cannot pool {}x{} by {factor}",
            depth.width, depth.height
        )));
    }
    let (ow, oh) = (depth.width / factor, depth.height / factor);
    let area = (factor * factor) as f64;
    let mut out = Vec::with_capacity(ow * oh);
    for by in 0..oh {
        for bx in 0..ow {
            let mut acc = 0.0f64;
            for y in by * factor..(by + 1) * factor {
                for x in bx * factor..(bx + 1) * factor {
                    acc += depth.get(x, y) as f64;
                }
            }
            out.push((acc / area) as f32);
        }
    }
    Ok(DepthMap::new(ow, oh, out))
}

/// Deterministic stream of augmented samples drawn from a set of records.
pub struct SampleStream<'a> {
    records: &'a [SceneRecord],
    spec: ShiftSpec,
    rng: ChaCha8Rng,
    geometric: bool,
}

impl<'a> SampleStream<'a> {
    pub fn new(records: &'a [SceneRecord], spec: ShiftSpec, seed: u64, geometric: bool) -> Self {
        Self { records, spec, rng: ChaCha8Rng::seed_from_u64(seed), geometric }
    }

    /// Draws one sample from `records[scene]`.
    pub fn sample_from(&mut self, scene: usize) -> Sample {
        let record = &self.records[scene];
        let (t, shift) = self.spec.draw_pair(record.len(), &mut self.rng);
        let mut sample = make_sample(record, t, shift).expect("drawn pair is in range");
        if self.geometric {
            let ops = GeometricOp::DIHEDRAL[self.rng.random_range(0..8)];
            for &op in ops {
                sample = augment_geometric(&sample, op).expect("dataset frames are square");
            }
        }
        sample
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }
}
