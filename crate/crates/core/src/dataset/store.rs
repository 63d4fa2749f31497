//! Directory layout, save/load and dataset generation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

use super::{pfm, DatasetError, SceneMetadata, SceneRecord, SCHEMA_VERSION};
use crate::geometry::PinholeCamera;
use crate::scenegen::{generate_and_render, RgbGrid, SceneParams};

pub const METADATA_FILE: &str = "metadata.json";
pub const INDEX_FILE: &str = "index.json";

fn frame_name(k: usize) -> String {
    format!("frame_{k:03}.png")
}

fn depth_name(k: usize) -> String {
    format!("depth_{k:03}.pfm")
}

/// Pulls the offending key out of a serde message such as "missing field `x`".
fn schema_error(path: &Path, err: &serde_json::Error) -> DatasetError {
    let msg = err.to_string();
    let key = msg.split('`').nth(1).map(str::to_string);
    DatasetError::Schema { path: path.to_path_buf(), key, detail: msg }
}

pub fn write_png(path: &Path, img: &RgbGrid) -> Result<(), DatasetError> {
    let buf = image::RgbImage::from_raw(img.width as u32, img.height as u32, img.data.clone())
        .ok_or_else(|| DatasetError::Domain(format!("{}: pixel buffer does not match size", path.display())))?;
    buf.save_with_format(path, image::ImageFormat::Png).map_err(|e| match e {
        image::ImageError::IoError(io) => DatasetError::io(path, io),
        other => DatasetError::Corrupt { path: path.display().to_string(), detail: other.to_string() },
    })
}

pub fn read_png(path: &Path) -> Result<RgbGrid, DatasetError> {
    let reader = image::ImageReader::open(path).map_err(|e| DatasetError::io(path, e))?;
    let img = reader
        .with_guessed_format()
        .map_err(|e| DatasetError::io(path, e))?
        .decode()
        .map_err(|e| DatasetError::Corrupt { path: path.display().to_string(), detail: e.to_string() })?;
    let rgb = img.into_rgb8();
    Ok(RgbGrid::new(rgb.width() as usize, rgb.height() as usize, rgb.into_raw()))
}

/// Writes `record` into `dir`, creating it if needed.
pub fn save_scene(dir: &Path, record: &SceneRecord) -> Result<(), DatasetError> {
    std::fs::create_dir_all(dir).map_err(|e| DatasetError::io(dir, e))?;
    let meta_path = dir.join(METADATA_FILE);
    let json = serde_json::to_string_pretty(&record.metadata).expect("metadata serializes");
    std::fs::write(&meta_path, json).map_err(|e| DatasetError::io(&meta_path, e))?;
    for (k, (frame, depth)) in record.frames.iter().zip(&record.depths).enumerate() {
        write_png(&dir.join(frame_name(k)), frame)?;
        pfm::write(&dir.join(depth_name(k)), depth)?;
    }
    Ok(())
}

pub fn load_metadata(dir: &Path) -> Result<SceneMetadata, DatasetError> {
    let meta_path = dir.join(METADATA_FILE);
    let text = std::fs::read_to_string(&meta_path).map_err(|e| DatasetError::io(&meta_path, e))?;
    let meta: SceneMetadata = serde_json::from_str(&text).map_err(|e| schema_error(&meta_path, &e))?;
    if meta.schema_version != SCHEMA_VERSION {
        return Err(DatasetError::Schema {
            path: meta_path,
            key: Some("schema_version".into()),
            detail: format!("unsupported version {}", meta.schema_version),
        });
    }
    Ok(meta)
}

/// Reads a scene directory and checks every file against the metadata.
pub fn load_scene(dir: &Path) -> Result<SceneRecord, DatasetError> {
    let meta = load_metadata(dir)?;
    let [w, h] = meta.resolution;
    let expected = format!("{w}x{h}");
    let mut frames = Vec::with_capacity(meta.sequence_length);
    let mut depths = Vec::with_capacity(meta.sequence_length);
    for k in 0..meta.sequence_length {
        let fp = dir.join(frame_name(k));
        let frame = read_png(&fp)?;
        if (frame.width, frame.height) != (w, h) {
            return Err(DatasetError::DimensionMismatch {
                path: fp,
                expected,
                found: format!("{}x{}", frame.width, frame.height),
            });
        }
        let dp = dir.join(depth_name(k));
        let depth = pfm::read(&dp)?;
        if (depth.width, depth.height) != (w, h) {
            return Err(DatasetError::DimensionMismatch {
                path: dp,
                expected,
                found: format!("{}x{}", depth.width, depth.height),
            });
        }
        frames.push(frame);
        depths.push(depth);
    }
    let id = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    Ok(SceneRecord { id, metadata: meta, frames, depths })
}

/// Contents of `index.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetIndex {
    pub schema_version: u32,
    pub resolution: usize,
    pub seed: u64,
    pub train: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct GenerateOptions {
    pub scenes: usize,
    pub resolution: usize,
    pub seed: u64,
    /// Fraction of scenes held out for testing.
    pub test_fraction: f64,
    /// Template for every scene; its `seed` is replaced per scene.
    pub params: SceneParams,
}

impl GenerateOptions {
    pub fn new(scenes: usize, resolution: usize, seed: u64) -> Self {
        Self { scenes, resolution, seed, test_fraction: 0.1, params: SceneParams::default() }
    }

    fn scene_seed(&self, i: usize) -> u64 {
        self.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(i as u64 + 1)
    }
}

/// Renders scenes in memory. Also used by tests and benchmarks.
pub fn generate_records(opts: &GenerateOptions) -> Result<Vec<SceneRecord>, DatasetError> {
    (0..opts.scenes)
        .into_par_iter()
        .map(|i| {
            let params = SceneParams { seed: opts.scene_seed(i), ..opts.params.clone() };
            let (scene, frames) = generate_and_render(&params, opts.resolution)
                .map_err(|e| DatasetError::Domain(format!("scene {i}: {e}")))?;
            let camera = PinholeCamera::from_fov(opts.resolution, opts.resolution, params.fov_deg)
                .map_err(|e| DatasetError::Domain(e.to_string()))?;
            let metadata = SceneMetadata {
                schema_version: SCHEMA_VERSION,
                seed: params.seed,
                camera_direction: scene.camera_direction,
                per_frame_displacement: params.per_frame_displacement,
                nominal_shift: params.nominal_shift,
                sequence_length: params.sequence_length,
                fov: params.fov_deg,
                f: camera.f,
                resolution: [opts.resolution, opts.resolution],
                wall_distance: params.wall_distance,
                max_render_distance: params.max_render_distance,
                primitives: scene.primitives,
            };
            let (images, depths) = frames.into_iter().map(|f| (f.image, f.depth)).unzip();
            Ok(SceneRecord { id: format!("scene_{i:05}"), metadata, frames: images, depths })
        })
        .collect()
}

/// Splits scene ids into train and test with a seeded shuffle.
fn split_ids(ids: &[String], test_fraction: f64, seed: u64) -> (Vec<String>, Vec<String>) {
    let mut order: Vec<usize> = (0..ids.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_test = if ids.len() < 2 { 0 } else { ((ids.len() as f64 * test_fraction).round() as usize).max(1) };
    let mut test: Vec<String> = order[..n_test].iter().map(|&i| ids[i].clone()).collect();
    let mut train: Vec<String> = order[n_test..].iter().map(|&i| ids[i].clone()).collect();
    test.sort();
    train.sort();
    (train, test)
}

/// Renders and writes a full dataset under `root`.
pub fn generate_dataset(root: &Path, opts: &GenerateOptions) -> Result<DatasetIndex, DatasetError> {
    let records = generate_records(opts)?;
    let ids: Vec<String> = records.iter().map(|r| r.id.clone()).collect();
    let (train, test) = split_ids(&ids, opts.test_fraction, opts.seed);
    for r in &records {
        let split = if test.contains(&r.id) { "test" } else { "train" };
        save_scene(&root.join(split).join(&r.id), r)?;
    }
    let index = DatasetIndex { schema_version: SCHEMA_VERSION, resolution: opts.resolution, seed: opts.seed, train, test };
    let path = root.join(INDEX_FILE);
    std::fs::write(&path, serde_json::to_string_pretty(&index).expect("index serializes"))
        .map_err(|e| DatasetError::io(&path, e))?;
    Ok(index)
}

pub fn load_index(root: &Path) -> Result<DatasetIndex, DatasetError> {
    let path = root.join(INDEX_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| DatasetError::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| schema_error(&path, &e))
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub index: DatasetIndex,
    pub train: Vec<SceneRecord>,
    pub test: Vec<SceneRecord>,
}

pub fn load_dataset(root: &Path) -> Result<Dataset, DatasetError> {
    let index = load_index(root)?;
    let load = |split: &str, ids: &[String]| -> Result<Vec<SceneRecord>, DatasetError> {
        ids.par_iter().map(|id| load_scene(&root.join(split).join(id))).collect()
    };
    let train = load("train", &index.train)?;
    let test = load("test", &index.test)?;
    Ok(Dataset { root: root.to_path_buf(), index, train, test })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_opts(scenes: usize) -> GenerateOptions {
        let mut o = GenerateOptions::new(scenes, 32, 3);
        o.params.primitive_count = 6;
        o
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let rec = generate_records(&small_opts(1)).unwrap().remove(0);
        let path = dir.path().join(&rec.id);
        save_scene(&path, &rec).unwrap();
        let back = load_scene(&path).unwrap();
        assert_eq!(back, rec);
    }

    #[test]
    fn missing_key_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let rec = generate_records(&small_opts(1)).unwrap().remove(0);
        save_scene(dir.path(), &rec).unwrap();
        let meta_path = dir.path().join(METADATA_FILE);
        let mut v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&meta_path).unwrap()).unwrap();
        v.as_object_mut().unwrap().remove("camera_direction");
        std::fs::write(&meta_path, v.to_string()).unwrap();
        match load_scene(dir.path()) {
            Err(DatasetError::Schema { key, .. }) => assert_eq!(key.as_deref(), Some("camera_direction")),
            other => panic!("unexpected {other:?}"),
        }
        v.as_object_mut().unwrap().insert("camera_direction".into(), serde_json::json!([0.0, 0.0, 1.0]));
        v.as_object_mut().unwrap().insert("extra".into(), serde_json::json!(1));
        std::fs::write(&meta_path, v.to_string()).unwrap();
        match load_scene(dir.path()) {
            Err(DatasetError::Schema { key, .. }) => assert_eq!(key.as_deref(), Some("extra")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn wrong_depth_dimensions_detected() {
        let dir = tempfile::tempdir().unwrap();
        let rec = generate_records(&small_opts(1)).unwrap().remove(0);
        save_scene(dir.path(), &rec).unwrap();
        pfm::write(&dir.path().join(depth_name(4)), &crate::geometry::DepthMap::filled(16, 32, 1.0)).unwrap();
        assert!(matches!(load_scene(dir.path()), Err(DatasetError::DimensionMismatch { .. })));
    }

    #[test]
    fn dataset_split_and_reload() {
        let dir = tempfile::tempdir().unwrap();
        let opts = small_opts(10);
        let index = generate_dataset(dir.path(), &opts).unwrap();
        assert_eq!(index.test.len(), 1);
        assert_eq!(index.train.len(), 9);
        let again = split_ids(&(0..10).map(|i| format!("scene_{i:05}")).collect::<Vec<_>>(), 0.1, opts.seed);
        assert_eq!((again.0, again.1), (index.train.clone(), index.test.clone()));
        let ds = load_dataset(dir.path()).unwrap();
        assert_eq!(ds.train.len(), 9);
        assert_eq!(ds.test[0].id, index.test[0]);
        assert!(dir.path().join("test").join(&index.test[0]).join("frame_009.png").exists());
    }
}
