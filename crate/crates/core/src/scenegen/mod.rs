//! Procedural "Still Box" scenes and a primary-ray renderer.
//!
//! A scene is a handful of randomly placed, sized and textured primitives
//! inside a closed box of walls. The camera never rotates: it looks down `+z`
//! and translates along one random direction per scene.

mod shapes;
pub mod texture;

use nalgebra::{Rotation3, UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{DepthMap, PinholeCamera};
pub use shapes::{torus_implicit, PrimitiveKind, TORUS_MAJOR, TORUS_MINOR};
pub use texture::{Rgb, Texture, RAMP_COUNT, TILE_COUNT};

type V3 = Vector3<f64>;

/// Attempts per primitive before giving up on a scene.
pub const PLACEMENT_ATTEMPTS: usize = 200;
/// Extra clearance kept between the camera path and any bounding sphere.
pub const PATH_MARGIN: f64 = 0.05;
pub const SUPPORTED_RESOLUTIONS: [usize; 5] = [32, 64, 128, 256, 512];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SceneError {
    #[error("invalid scene parameters: {0}")]
    InvalidParams(String),
    #[error("could not place primitive {index} clear of the camera path after {attempts} attempts")]
    RetryBudgetExhausted { index: usize, attempts: usize },
    #[error("unsupported resolution {width}x{height} (square 32..512 powers of two)")]
    UnsupportedResolution { width: usize, height: usize },
    #[error(transparent)]
    Camera(#[from] crate::geometry::GeometryError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneParams {
    pub fov_deg: f64,
    pub max_render_distance: f64,
    pub primitive_count: usize,
    pub texture_ratio: f64,
    pub size_range: (f64, f64),
    pub distance_range: (f64, f64),
    pub per_frame_displacement: f64,
    pub sequence_length: usize,
    pub nominal_shift: usize,
    pub seed: u64,
    /// Half extent of the wall box, meters.
    pub wall_distance: f64,
    /// Probability that a primitive is placed anywhere around the camera
    /// instead of inside the forward frustum.
    pub behind_fraction: f64,
    /// Forces the camera direction; uniform on the sphere when `None`.
    pub fixed_direction: Option<[f64; 3]>,
    /// 4x supersampling of the color image (depth stays the center ray).
    pub supersample: bool,
}

impl Default for SceneParams {
    fn default() -> Self {
        Self {
            fov_deg: 90.0,
            max_render_distance: 200.0,
            primitive_count: 20,
            texture_ratio: 0.5,
            size_range: (0.1, 2.0),
            distance_range: (0.0, 25.0),
            per_frame_displacement: 0.1,
            sequence_length: 10,
            nominal_shift: 3,
            seed: 0,
            wall_distance: 100.0,
            behind_fraction: 0.1,
            fixed_direction: None,
            supersample: false,
        }
    }
}

impl SceneParams {
    pub fn with_seed(seed: u64) -> Self {
        Self { seed, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), SceneError> {
        let bad = |m: String| Err(SceneError::InvalidParams(m));
        if !(self.size_range.0 > 0.0 && self.size_range.0 <= self.size_range.1) {
            return bad(format!("size range {:?} must have a positive lower bound", self.size_range));
        }
        if !(self.distance_range.0 >= 0.0 && self.distance_range.0 <= self.distance_range.1) {
            return bad(format!("distance range {:?}", self.distance_range));
        }
        if !(0.0..=1.0).contains(&self.texture_ratio) || !(0.0..=1.0).contains(&self.behind_fraction) {
            return bad("probabilities must lie in [0, 1]".into());
        }
        if self.sequence_length < 2 || self.per_frame_displacement <= 0.0 {
            return bad("need at least two frames and a positive displacement".into());
        }
        if self.nominal_shift == 0 || self.nominal_shift >= self.sequence_length {
            return bad(format!("nominal shift {} out of range", self.nominal_shift));
        }
        let path = self.per_frame_displacement * (self.sequence_length - 1) as f64;
        if !(self.wall_distance > path && self.wall_distance * 3f64.sqrt() + path <= self.max_render_distance) {
            return bad(format!(
                "walls at {} m must enclose the path and stay within {} m",
                self.wall_distance, self.max_render_distance
            ));
        }
        if let Some(d) = self.fixed_direction {
            if V3::from(d).norm() == 0.0 {
                return bad("fixed direction must be non-zero".into());
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Primitive {
    pub kind: PrimitiveKind,
    pub center: [f64; 3],
    /// Overall size in meters (cube edge, sphere/torus outer diameter, cone height).
    pub scale: f64,
    /// Object orientation as a unit quaternion `[w, i, j, k]`.
    pub orientation: [f64; 4],
    pub texture: Texture,
}

impl Primitive {
    pub fn new(kind: PrimitiveKind, center: [f64; 3], scale: f64, texture: Texture) -> Self {
        Self { kind, center, scale, orientation: [1.0, 0.0, 0.0, 0.0], texture }
    }

    fn rotation(&self) -> Rotation3<f64> {
        let [w, i, j, k] = self.orientation;
        UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(w, i, j, k)).to_rotation_matrix()
    }

    pub fn bounding_radius(&self) -> f64 {
        self.kind.bounding_radius() * self.scale
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub primitives: Vec<Primitive>,
    pub wall_distance: f64,
    pub camera_direction: [f64; 3],
    pub params: SceneParams,
}

impl Scene {
    /// Camera position of frame `k`.
    pub fn camera_position(&self, k: usize) -> V3 {
        V3::from(self.camera_direction) * (k as f64 * self.params.per_frame_displacement)
    }
}

fn uniform_sphere(rng: &mut ChaCha8Rng) -> V3 {
    loop {
        let v = V3::new(StandardNormal.sample(rng), StandardNormal.sample(rng), StandardNormal.sample(rng));
        let n = v.norm();
        if n > 1e-9 {
            return v / n;
        }
    }
}

fn segment_distance(p: &V3, a: &V3, b: &V3) -> f64 {
    let ab = b - a;
    let len2 = ab.norm_squared();
    let s = if len2 == 0.0 { 0.0 } else { ((p - a).dot(&ab) / len2).clamp(0.0, 1.0) };
    (p - (a + ab * s)).norm()
}

/// Draws a random scene. Deterministic in `params.seed`.
pub fn generate_scene(params: &SceneParams) -> Result<Scene, SceneError> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let direction = match params.fixed_direction {
        Some(d) => V3::from(d).normalize(),
        None => uniform_sphere(&mut rng),
    };
    let path_end = direction * (params.per_frame_displacement * (params.sequence_length - 1) as f64);
    let half_tan = (params.fov_deg.to_radians() / 2.0).tan();

    let mut primitives = Vec::with_capacity(params.primitive_count);
    for index in 0..params.primitive_count {
        let mut placed = None;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let kind = PrimitiveKind::ALL[rng.random_range(0..4)];
            let scale = rng.random_range(params.size_range.0..=params.size_range.1);
            let distance = rng.random_range(params.distance_range.0..=params.distance_range.1);
            let dir = if rng.random_bool(params.behind_fraction) {
                uniform_sphere(&mut rng)
            } else {
                let a: f64 = rng.random_range(-1.0..1.0);
                let b: f64 = rng.random_range(-1.0..1.0);
                V3::new(a * half_tan, b * half_tan, 1.0).normalize()
            };
            let center = dir * distance;
            let q = loop {
                let v: [f64; 4] = std::array::from_fn(|_| StandardNormal.sample(&mut rng));
                let n = v.iter().map(|c| c * c).sum::<f64>().sqrt();
                if n > 1e-9 {
                    break v.map(|c| c / n);
                }
            };
            let texture = if rng.random_bool(params.texture_ratio) {
                Texture::Uniform { ramp: rng.random_range(0..RAMP_COUNT) }
            } else {
                Texture::Photographic { tile: rng.random_range(0..TILE_COUNT) }
            };
            let radius = kind.bounding_radius() * scale;
            if segment_distance(&center, &V3::zeros(), &path_end) > radius + PATH_MARGIN {
                placed = Some(Primitive { kind, center: center.into(), scale, orientation: q, texture });
                break;
            }
        }
        match placed {
            Some(p) => primitives.push(p),
            None => return Err(SceneError::RetryBudgetExhausted { index, attempts: PLACEMENT_ATTEMPTS }),
        }
    }
    Ok(Scene { primitives, wall_distance: params.wall_distance, camera_direction: direction.into(), params: params.clone() })
}

fn tiled_plane(primitives: &mut Vec<Primitive>, x: (f64, f64), y: (f64, f64), z_front: f64, cell: f64, tile0: u32) {
    let (nx, ny) = (((x.1 - x.0) / cell).ceil() as usize, ((y.1 - y.0) / cell).ceil() as usize);
    for j in 0..ny {
        for i in 0..nx {
            let center = [x.0 + (i as f64 + 0.5) * cell, y.0 + (j as f64 + 0.5) * cell, z_front + cell / 2.0];
            // Tiles 1 mod 3 are the smooth noise family.
            let tile = (1 + 3 * (tile0 + (j * nx + i) as u32 * 5)) % (TILE_COUNT - TILE_COUNT % 3);
            primitives.push(Primitive::new(PrimitiveKind::Cube, center, cell, Texture::Photographic { tile }));
        }
    }
}

/// Validation scene for multi-shift fusion: lateral motion along `+x`; seen
/// from the last frame the right half of the view is a textured plane at
/// `near` meters and everything else a textured plane at `far` meters. The
/// near plane lies on the side the camera moves towards, so nothing visible
/// in the last frame is hidden in earlier ones.
pub fn near_far_scene(near: f64, far: f64, per_frame_displacement: f64, sequence_length: usize) -> Scene {
    let params = SceneParams {
        per_frame_displacement,
        sequence_length,
        primitive_count: 0,
        wall_distance: 4.0 * far,
        max_render_distance: 8.0 * far,
        fixed_direction: Some([1.0, 0.0, 0.0]),
        supersample: true,
        ..SceneParams::default()
    };
    let end = per_frame_displacement * (sequence_length - 1) as f64;
    let mut primitives = Vec::new();
    tiled_plane(&mut primitives, (end, end + 1.5 * near), (-1.5 * near, 1.5 * near), near, near / 2.0, 0);
    let span = 1.3 * far + end;
    tiled_plane(&mut primitives, (-span, span), (-1.3 * far, 1.3 * far), far, far / 2.0, 1);
    Scene { primitives, wall_distance: params.wall_distance, camera_direction: [1.0, 0.0, 0.0], params }
}

/// Result of a primary ray.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    /// Ray parameter (meters along the unit direction).
    pub t: f64,
    /// z-depth relative to the ray origin.
    pub depth: f64,
    pub albedo: Rgb,
    /// Outward surface normal (inward for walls), world frame.
    pub normal: [f64; 3],
}

struct PreparedPrimitive {
    kind: PrimitiveKind,
    center: V3,
    inv_scale: f64,
    rotation: Rotation3<f64>,
    bound2: f64,
    texture: Texture,
}

/// A scene with per-primitive transforms precomputed for ray casting.
pub struct SceneTracer {
    prims: Vec<PreparedPrimitive>,
    wall: f64,
}

impl SceneTracer {
    pub fn new(scene: &Scene) -> Self {
        let prims = scene
            .primitives
            .iter()
            .map(|p| PreparedPrimitive {
                kind: p.kind,
                center: V3::from(p.center),
                inv_scale: 1.0 / p.scale,
                rotation: p.rotation(),
                bound2: p.bounding_radius().powi(2),
                texture: p.texture,
            })
            .collect();
        Self { prims, wall: scene.wall_distance }
    }

    fn wall_hit(&self, origin: &V3, dir: &V3) -> (f64, usize) {
        let mut best = (f64::INFINITY, 0);
        for axis in 0..3 {
            if dir[axis] == 0.0 {
                continue;
            }
            let side = dir[axis].signum();
            let t = (side * self.wall - origin[axis]) / dir[axis];
            if t > 0.0 && t < best.0 {
                best = (t, 2 * axis + usize::from(side > 0.0));
            }
        }
        best
    }

    /// Nearest intersection along a unit direction. Walls guarantee a hit for
    /// origins inside the box.
    pub fn ray_cast(&self, origin: &V3, dir: &V3) -> Hit {
        let (mut t_best, face) = self.wall_hit(origin, dir);
        let mut best: Option<(usize, V3)> = None;
        for (idx, p) in self.prims.iter().enumerate() {
            // Bounding-sphere rejection.
            let oc = origin - p.center;
            let b = oc.dot(dir);
            let c = oc.norm_squared() - p.bound2;
            if c > 0.0 && (b > 0.0 || b * b < c) {
                continue;
            }
            let inv = p.rotation.inverse();
            let o_local = inv * oc * p.inv_scale;
            let d_local = inv * dir * p.inv_scale;
            if let Some((t, n_local)) = p.kind.intersect(&o_local, &d_local) {
                if t < t_best {
                    t_best = t;
                    best = Some((idx, n_local));
                }
            }
        }
        let point = origin + dir * t_best;
        let (albedo, normal) = match best {
            Some((idx, n_local)) => {
                let p = &self.prims[idx];
                let local = p.rotation.inverse() * (point - p.center) * p.inv_scale;
                (texture::albedo(p.texture, local.into()), p.rotation * n_local)
            }
            None => {
                let axis = face / 2;
                let mut n = V3::zeros();
                n[axis] = if face % 2 == 1 { -1.0 } else { 1.0 };
                (texture::wall_albedo(face, point.into(), self.wall), n)
            }
        };
        Hit { t: t_best, depth: t_best * dir.z, albedo, normal: normal.into() }
    }
}

/// Convenience wrapper around [`SceneTracer::ray_cast`].
pub fn ray_cast(scene: &Scene, origin: [f64; 3], direction: [f64; 3]) -> Hit {
    SceneTracer::new(scene).ray_cast(&V3::from(origin), &V3::from(direction))
}

/// 8-bit RGB image, row major, interleaved.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbGrid {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl RgbGrid {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Self {
        assert_eq!(data.len(), width * height * 3, "rgb buffer size");
        Self { width, height, data }
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        Self { width, height, data: rgb.iter().copied().cycle().take(width * height * 3).collect() }
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = 3 * (y * self.width + x);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// Rec. 601 luma in [0, 255].
    pub fn luma(&self) -> Vec<f64> {
        self.data
            .chunks_exact(3)
            .map(|c| 0.299 * c[0] as f64 + 0.587 * c[1] as f64 + 0.114 * c[2] as f64)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderedFrame {
    pub image: RgbGrid,
    pub depth: DepthMap,
}

/// Direction towards the light, world frame (`y` points down).
fn light_direction() -> V3 {
    V3::new(0.35, -0.8, -0.5).normalize()
}

fn shade(hit: &Hit) -> Rgb {
    let lambert = V3::from(hit.normal).dot(&light_direction()).max(0.0);
    let k = 0.35 + 0.65 * lambert;
    hit.albedo.map(|c| c * k)
}

fn to_u8(c: f64) -> u8 {
    (c.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Renders one view from `origin` with a fixed (non-rotated) orientation.
pub fn render_view(tracer: &SceneTracer, camera: &PinholeCamera, origin: V3, supersample: bool) -> RenderedFrame {
    let (w, h) = (camera.width, camera.height);
    let mut rgb = vec![0u8; w * h * 3];
    let mut depth = vec![0f32; w * h];
    rgb.par_chunks_mut(w * 3).zip(depth.par_chunks_mut(w)).enumerate().for_each(|(y, (row_rgb, row_depth))| {
        for x in 0..w {
            let center = camera.pixel_center(x, y);
            let dir = camera.ray_direction(center).normalize();
            let hit = tracer.ray_cast(&origin, &dir);
            row_depth[x] = hit.depth as f32;
            let color = if supersample {
                let mut acc = [0.0; 3];
                for (ox, oy) in [(-0.25, -0.25), (0.25, -0.25), (-0.25, 0.25), (0.25, 0.25)] {
                    let mut p = center;
                    p.u += ox;
                    p.v += oy;
                    let c = shade(&tracer.ray_cast(&origin, &camera.ray_direction(p).normalize()));
                    for k in 0..3 {
                        acc[k] += c[k] / 4.0;
                    }
                }
                acc
            } else {
                shade(&hit)
            };
            for k in 0..3 {
                row_rgb[3 * x + k] = to_u8(color[k]);
            }
        }
    });
    RenderedFrame { image: RgbGrid::new(w, h, rgb), depth: DepthMap::new(w, h, depth) }
}

/// Renders `sequence_length` frames along the scene's camera path.
pub fn render_sequence(scene: &Scene, camera: &PinholeCamera) -> Result<Vec<RenderedFrame>, SceneError> {
    if camera.width != camera.height || !SUPPORTED_RESOLUTIONS.contains(&camera.width) {
        return Err(SceneError::UnsupportedResolution { width: camera.width, height: camera.height });
    }
    let tracer = SceneTracer::new(scene);
    Ok((0..scene.params.sequence_length)
        .map(|k| render_view(&tracer, camera, scene.camera_position(k), scene.params.supersample))
        .collect())
}

/// Generates a scene and renders it with the 90 degree camera at `size`.
pub fn generate_and_render(params: &SceneParams, size: usize) -> Result<(Scene, Vec<RenderedFrame>), SceneError> {
    let scene = generate_scene(params)?;
    let camera = PinholeCamera::from_fov(size, size, params.fov_deg)?;
    let frames = render_sequence(&scene, &camera)?;
    Ok((scene, frames))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn empty_scene() -> Scene {
        let params = SceneParams { primitive_count: 0, ..SceneParams::default() };
        generate_scene(&params).unwrap()
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_scene(&SceneParams::with_seed(7)).unwrap();
        let b = generate_scene(&SceneParams::with_seed(7)).unwrap();
        assert_eq!(a, b);
        let c = generate_scene(&SceneParams::with_seed(8)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn empty_scene_has_walls_only() {
        let scene = empty_scene();
        assert!(scene.primitives.is_empty());
        let hit = ray_cast(&scene, [0.0; 3], [0.0, 0.0, 1.0]);
        assert_relative_eq!(hit.depth, 100.0, epsilon = 1e-12);
    }

    #[test]
    fn sphere_depth_on_axis() {
        let mut scene = empty_scene();
        scene.primitives.push(Primitive::new(PrimitiveKind::Sphere, [0.0, 0.0, 5.0], 2.0, Texture::Uniform { ramp: 0 }));
        let hit = ray_cast(&scene, [0.0; 3], [0.0, 0.0, 1.0]);
        assert_relative_eq!(hit.depth, 4.0, max_relative = 1e-12);
    }

    #[test]
    fn sphere_and_walls_match_closed_form_off_axis() {
        let mut scene = empty_scene();
        scene.primitives.push(Primitive::new(PrimitiveKind::Sphere, [0.5, -0.3, 6.0], 3.0, Texture::Uniform { ramp: 3 }));
        let tracer = SceneTracer::new(&scene);
        let origin = V3::new(0.1, 0.0, 0.2);
        for (dx, dy) in [(0.0, 0.0), (0.1, -0.05), (0.2, 0.1), (0.9, 0.9), (-0.7, 0.3)] {
            let d = V3::new(dx, dy, 1.0).normalize();
            let hit = tracer.ray_cast(&origin, &d);
            // Closed form ray-sphere.
            let oc = origin - V3::new(0.5, -0.3, 6.0);
            let b = oc.dot(&d);
            let c = oc.norm_squared() - 1.5 * 1.5;
            let disc = b * b - c;
            let expected_t = if disc >= 0.0 {
                -b - disc.sqrt()
            } else {
                // Front wall unless a side wall comes first.
                (0..3).filter(|&a| d[a] != 0.0).map(|a| (d[a].signum() * 100.0 - origin[a]) / d[a]).fold(f64::INFINITY, f64::min)
            };
            assert_relative_eq!(hit.t, expected_t, max_relative = 1e-6);
            assert_relative_eq!(hit.depth, expected_t * d.z, max_relative = 1e-6);
        }
    }

    #[test]
    fn torus_hole_shows_the_wall() {
        let mut scene = empty_scene();
        scene.primitives.push(Primitive::new(PrimitiveKind::Torus, [0.0, 0.0, 5.0], 2.5, Texture::Uniform { ramp: 1 }));
        let hit = ray_cast(&scene, [0.0; 3], [0.0, 0.0, 1.0]);
        assert_relative_eq!(hit.depth, 100.0, epsilon = 1e-12);
        // Through the tube (major radius 1 at this scale).
        let d = V3::new(1.0, 0.0, 4.75).normalize();
        let hit = ray_cast(&scene, [0.0; 3], d.into());
        assert!(hit.depth < 5.0 && hit.depth > 4.5, "{}", hit.depth);
    }

    #[test]
    fn camera_path_clears_primitives() {
        for seed in 0..50 {
            let scene = generate_scene(&SceneParams::with_seed(seed)).unwrap();
            let end = scene.camera_position(scene.params.sequence_length - 1);
            for p in &scene.primitives {
                assert!(segment_distance(&V3::from(p.center), &V3::zeros(), &end) > p.bounding_radius());
                assert!((scene.params.size_range.0..=scene.params.size_range.1).contains(&p.scale));
            }
            assert_relative_eq!(V3::from(scene.camera_direction).norm(), 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn over_dense_scenes_fail_cleanly() {
        let params = SceneParams { size_range: (30.0, 40.0), distance_range: (0.0, 1.0), ..SceneParams::default() };
        assert!(matches!(generate_scene(&params), Err(SceneError::RetryBudgetExhausted { index: 0, .. })));
    }

    #[test]
    fn invalid_params_rejected() {
        let params = SceneParams { size_range: (0.0, 2.0), ..SceneParams::default() };
        assert!(matches!(generate_scene(&params), Err(SceneError::InvalidParams(_))));
        let params = SceneParams { wall_distance: 150.0, ..SceneParams::default() };
        assert!(params.validate().is_err());
    }

    #[test]
    fn rendered_depth_is_bounded_and_deterministic() {
        let scene = generate_scene(&SceneParams::with_seed(3)).unwrap();
        let cam = PinholeCamera::from_fov(32, 32, 90.0).unwrap();
        let frames = render_sequence(&scene, &cam).unwrap();
        assert_eq!(frames.len(), 10);
        for f in &frames {
            assert!(f.depth.data.iter().all(|&z| z > 0.0 && z <= 200.0));
            assert_eq!((f.image.width, f.image.height), (f.depth.width, f.depth.height));
        }
        assert_eq!(frames, render_sequence(&scene, &cam).unwrap());
        let odd = PinholeCamera::from_fov(48, 48, 90.0).unwrap();
        assert!(matches!(render_sequence(&scene, &odd), Err(SceneError::UnsupportedResolution { .. })));
    }
}
