//! Projective geometry of a camera that only translates.
//!
//! Conventions used throughout the crate:
//!
//! * camera axes: `x` right, `y` down, `z` forward (optical axis);
//! * pixel coordinates are continuous, pixel `(i, j)` has its center at
//!   `(i + 0.5, j + 0.5)`;
//! * depth is z-depth (distance along the optical axis), never ray length.
//!
//! A motion pair is made of a *source* view `A` and a *reference* view `B`.
//! [`Translation`] is the camera displacement `A -> B`, depth maps belong to
//! the reference view and a [`FlowField`] stores, for every reference pixel,
//! its position in `B` minus its position in `A`.  For a camera moving forward
//! (`m_z > 0`) flow radiates away from the focus of expansion.

use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("invalid camera: {0}")]
    InvalidCamera(String),
    #[error("point is behind the camera (z = {z})")]
    BehindCamera { z: f64 },
    #[error("translation has zero norm")]
    ZeroTranslation,
    #[error("point passes behind the source camera (Z + m_z = {0})")]
    PassesBehindCamera(f64),
    #[error("zero disparity: depth is unbounded")]
    Divergent,
    #[error("disparity {disparity} is incompatible with a positive depth (got {depth})")]
    GeometryViolation { disparity: f64, depth: f64 },
}

pub type Result<T> = std::result::Result<T, GeometryError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PixelPoint {
    pub u: f64,
    pub v: f64,
}

impl PixelPoint {
    pub fn new(u: f64, v: f64) -> Self {
        Self { u, v }
    }

    pub fn distance(&self, other: &PixelPoint) -> f64 {
        (self.u - other.u).hypot(self.v - other.v)
    }
}

/// Intrinsics of an ideal pinhole camera, all in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PinholeCamera {
    pub f: f64,
    pub u0: f64,
    pub v0: f64,
    pub width: usize,
    pub height: usize,
}

impl PinholeCamera {
    pub fn new(f: f64, u0: f64, v0: f64, width: usize, height: usize) -> Result<Self> {
        if !(f > 0.0 && f.is_finite()) {
            return Err(GeometryError::InvalidCamera(format!("focal length {f} must be > 0")));
        }
        if !(0.0..=width as f64).contains(&u0) || !(0.0..=height as f64).contains(&v0) {
            return Err(GeometryError::InvalidCamera(format!(
                "principal point ({u0}, {v0}) outside {width}x{height}"
            )));
        }
        Ok(Self { f, u0, v0, width, height })
    }

    /// Camera with the principal point at the image center and the given
    /// horizontal field of view.  A 90 degree field of view gives `f = width / 2`
    /// exactly.
    pub fn from_fov(width: usize, height: usize, fov_deg: f64) -> Result<Self> {
        if !(fov_deg > 0.0 && fov_deg < 180.0) {
            return Err(GeometryError::InvalidCamera(format!("field of view {fov_deg} out of (0, 180)")));
        }
        let half_tan = if fov_deg == 90.0 { 1.0 } else { (fov_deg.to_radians() / 2.0).tan() };
        let f = width as f64 / 2.0 / half_tan;
        Self::new(f, width as f64 / 2.0, height as f64 / 2.0, width, height)
    }

    pub fn principal_point(&self) -> PixelPoint {
        PixelPoint::new(self.u0, self.v0)
    }

    pub fn pixel_center(&self, i: usize, j: usize) -> PixelPoint {
        PixelPoint::new(i as f64 + 0.5, j as f64 + 0.5)
    }

    /// Unnormalized viewing direction `((u - u0)/f, (v - v0)/f, 1)` through `p`.
    pub fn ray_direction(&self, p: PixelPoint) -> Vector3<f64> {
        Vector3::new((p.u - self.u0) / self.f, (p.v - self.v0) / self.f, 1.0)
    }
}

/// Camera displacement between the two views of a pair, in meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Translation {
    pub m: Vector3<f64>,
}

impl Translation {
    pub fn new(mx: f64, my: f64, mz: f64) -> Self {
        Self { m: Vector3::new(mx, my, mz) }
    }

    pub fn from_vector(m: Vector3<f64>) -> Self {
        Self { m }
    }

    /// Norm `V` of the displacement.
    pub fn speed(&self) -> f64 {
        self.m.norm()
    }

    pub fn is_lateral(&self) -> bool {
        self.m.z == 0.0
    }
}

/// Whether flow radiates from the focus (camera moved towards the reference
/// view's optical axis direction) or converges to it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MotionSense {
    Expansion,
    Contraction,
}

impl MotionSense {
    fn sign(self) -> f64 {
        match self {
            MotionSense::Expansion => 1.0,
            MotionSense::Contraction => -1.0,
        }
    }
}

/// Focus of expansion.  Pure lateral motion pushes it to infinity, where only
/// its direction (defined up to sign) is meaningful.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Foe {
    Finite { point: PixelPoint, sense: MotionSense },
    AtInfinity { direction: Vector2<f64> },
}

impl Foe {
    pub fn finite(u: f64, v: f64, sense: MotionSense) -> Self {
        Foe::Finite { point: PixelPoint::new(u, v), sense }
    }

    pub fn point(&self) -> Option<PixelPoint> {
        match self {
            Foe::Finite { point, .. } => Some(*point),
            Foe::AtInfinity { .. } => None,
        }
    }
}

/// Per-pixel z-depth grid in meters, row major.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl DepthMap {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), width * height, "depth buffer size");
        Self { width, height, data }
    }

    pub fn filled(width: usize, height: usize, value: f32) -> Self {
        Self { width, height, data: vec![value; width * height] }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, value: f32) {
        self.data[y * self.width + x] = value;
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&z| z as f64).sum::<f64>() / self.data.len() as f64
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> DepthMap {
        DepthMap { width: self.width, height: self.height, data: self.data.iter().map(|&z| f(z)).collect() }
    }
}

/// Dense 2D displacement field with a validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    pub width: usize,
    pub height: usize,
    pub du: Vec<f64>,
    pub dv: Vec<f64>,
    pub valid: Vec<bool>,
}

impl FlowField {
    pub fn zeros(width: usize, height: usize) -> Self {
        let n = width * height;
        Self { width, height, du: vec![0.0; n], dv: vec![0.0; n], valid: vec![true; n] }
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> Option<(f64, f64)> {
        let idx = y * self.width + x;
        self.valid[idx].then(|| (self.du[idx], self.dv[idx]))
    }

    /// Flow magnitude.
    pub fn disparity(&self, x: usize, y: usize) -> Option<f64> {
        self.at(x, y).map(|(du, dv)| du.hypot(dv))
    }

    pub fn scaled(&self, factor: f64) -> FlowField {
        FlowField {
            du: self.du.iter().map(|d| d * factor).collect(),
            dv: self.dv.iter().map(|d| d * factor).collect(),
            ..self.clone()
        }
    }
}

pub fn project_point(camera: &PinholeCamera, x: &Vector3<f64>) -> Result<PixelPoint> {
    if !(x.z > 0.0) {
        return Err(GeometryError::BehindCamera { z: x.z });
    }
    Ok(PixelPoint::new(camera.u0 + camera.f * x.x / x.z, camera.v0 + camera.f * x.y / x.z))
}

/// The FOE is the projection of the displacement vector.
pub fn foe_from_translation(camera: &PinholeCamera, t: &Translation) -> Result<Foe> {
    let m = t.m;
    if t.speed() == 0.0 {
        return Err(GeometryError::ZeroTranslation);
    }
    if m.z != 0.0 {
        let sense = if m.z > 0.0 { MotionSense::Expansion } else { MotionSense::Contraction };
        Ok(Foe::finite(camera.u0 + camera.f * m.x / m.z, camera.v0 + camera.f * m.y / m.z, sense))
    } else {
        let lateral = Vector2::new(m.x, m.y);
        Ok(Foe::AtInfinity { direction: lateral / lateral.norm() })
    }
}

/// Flow of one reference pixel at depth `z`, or `None` when the point was
/// behind the source camera.
fn flow_at(camera: &PinholeCamera, p: PixelPoint, z: f64, m: &Vector3<f64>) -> Option<(f64, f64)> {
    let source_depth = z + m.z;
    if !(source_depth > 0.0) || !(z > 0.0) {
        return None;
    }
    if m.z != 0.0 {
        let foe_u = camera.u0 + camera.f * m.x / m.z;
        let foe_v = camera.v0 + camera.f * m.y / m.z;
        let k = m.z / source_depth;
        Some((k * (p.u - foe_u), k * (p.v - foe_v)))
    } else {
        let k = -camera.f / z;
        Some((k * m.x, k * m.y))
    }
}

/// Motion field induced by translating the camera in a rigid scene whose
/// reference-view depth is `depth`.
pub fn analytic_flow(camera: &PinholeCamera, depth: &DepthMap, t: &Translation) -> FlowField {
    let (w, h) = (depth.width, depth.height);
    let mut flow = FlowField::zeros(w, h);
    for y in 0..h {
        for x in 0..w {
            let idx = y * w + x;
            match flow_at(camera, camera.pixel_center(x, y), depth.data[idx] as f64, &t.m) {
                Some((du, dv)) => {
                    flow.du[idx] = du;
                    flow.dv[idx] = dv;
                }
                None => flow.valid[idx] = false,
            }
        }
    }
    flow
}

pub fn disparity_from_depth(camera: &PinholeCamera, p: PixelPoint, z: f64, t: &Translation) -> Result<f64> {
    if !(z > 0.0) {
        return Err(GeometryError::BehindCamera { z });
    }
    let m = t.m;
    if !(z + m.z > 0.0) {
        return Err(GeometryError::PassesBehindCamera(z + m.z));
    }
    if m.z != 0.0 {
        let foe_u = camera.u0 + camera.f * m.x / m.z;
        let foe_v = camera.v0 + camera.f * m.y / m.z;
        Ok((m.z / (z + m.z)).abs() * (p.u - foe_u).hypot(p.v - foe_v))
    } else {
        Ok(camera.f * t.speed() / z)
    }
}

/// Depth of reference pixel `p` from its disparity, the FOE and the speed `V`.
///
/// For a finite FOE the forward component is recovered from the FOE offset,
/// `|m_z| = V f / sqrt(f^2 + |P0 - FOE|^2)`, and then
/// `Z = |m_z| (|P - FOE| / disparity - s)` with `s = +1` for an expanding
/// field and `-1` for a contracting one.  At infinity `Z = f V / disparity`.
pub fn depth_from_disparity(
    camera: &PinholeCamera,
    p: PixelPoint,
    disparity: f64,
    foe: &Foe,
    speed: f64,
) -> Result<f64> {
    if speed == 0.0 {
        return Err(GeometryError::ZeroTranslation);
    }
    if disparity == 0.0 {
        return Err(GeometryError::Divergent);
    }
    let depth = match foe {
        Foe::Finite { point, sense } => {
            let offset = camera.principal_point().distance(point);
            let mz = speed * camera.f / camera.f.hypot(offset);
            mz * (p.distance(point) / disparity - sense.sign())
        }
        Foe::AtInfinity { .. } => camera.f * speed / disparity,
    };
    if depth > 0.0 && depth.is_finite() {
        Ok(depth)
    } else {
        Err(GeometryError::GeometryViolation { disparity, depth })
    }
}

/// 2D cross product, zero for collinear vectors.
#[inline]
pub fn cross2(a: (f64, f64), b: (f64, f64)) -> f64 {
    a.0 * b.1 - a.1 * b.0
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn cam32() -> PinholeCamera {
        PinholeCamera::new(32.0, 32.0, 32.0, 64, 64).unwrap()
    }

    fn unit_cam() -> PinholeCamera {
        PinholeCamera { f: 1.0, u0: 0.0, v0: 0.0, width: 8, height: 8 }
    }

    #[test]
    fn projection() {
        let p = project_point(&cam32(), &Vector3::new(0.0, 0.0, 5.0)).unwrap();
        assert_eq!((p.u, p.v), (32.0, 32.0));
        let p = project_point(&cam32(), &Vector3::new(5.0, 0.0, 5.0)).unwrap();
        assert_eq!((p.u, p.v), (64.0, 32.0));
        let err = project_point(&unit_cam(), &Vector3::new(0.0, 0.0, -1.0)).unwrap_err();
        assert!(matches!(err, GeometryError::BehindCamera { .. }));
    }

    #[test]
    fn ninety_degree_fov_gives_half_width_focal() {
        let cam = PinholeCamera::from_fov(64, 64, 90.0).unwrap();
        assert_eq!(cam.f, 32.0);
        assert_eq!((cam.u0, cam.v0), (32.0, 32.0));
    }

    #[test]
    fn foe_cases() {
        let foe = foe_from_translation(&cam32(), &Translation::new(0.0, 0.0, 1.0)).unwrap();
        assert_eq!(foe, Foe::finite(32.0, 32.0, MotionSense::Expansion));
        let foe = foe_from_translation(&cam32(), &Translation::new(1.0, 0.0, 1.0)).unwrap();
        assert_eq!(foe.point().unwrap(), PixelPoint::new(64.0, 32.0));
        let foe = foe_from_translation(&cam32(), &Translation::new(1.0, 0.0, 0.0)).unwrap();
        assert_eq!(foe, Foe::AtInfinity { direction: Vector2::new(1.0, 0.0) });
        let foe = foe_from_translation(&cam32(), &Translation::new(0.0, 0.0, -2.0)).unwrap();
        assert!(matches!(foe, Foe::Finite { sense: MotionSense::Contraction, .. }));
        assert_eq!(
            foe_from_translation(&cam32(), &Translation::new(0.0, 0.0, 0.0)),
            Err(GeometryError::ZeroTranslation)
        );
    }

    /// Source-view projection minus reference-view projection, done from
    /// scratch: back-project, shift into the source frame, re-project.
    fn flow_by_reprojection(cam: &PinholeCamera, p: PixelPoint, z: f64, m: Vector3<f64>) -> (f64, f64) {
        let x = cam.ray_direction(p) * z;
        let src = project_point(cam, &(x + m)).unwrap();
        (p.u - src.u, p.v - src.v)
    }

    #[test]
    fn analytic_flow_substitution_example() {
        let cam = unit_cam();
        let (du, dv) = flow_at(&cam, PixelPoint::new(3.0, 0.0), 9.0, &Vector3::new(1.0, 0.0, 1.0)).unwrap();
        assert_relative_eq!(du, 0.2, epsilon = 1e-15);
        assert_eq!(dv, 0.0);
        let oracle = flow_by_reprojection(&cam, PixelPoint::new(3.0, 0.0), 9.0, Vector3::new(1.0, 0.0, 1.0));
        assert_relative_eq!(oracle.0, 0.2, epsilon = 1e-12);
    }

    #[test]
    fn flow_vanishes_at_the_foe() {
        let cam = cam32();
        let (du, dv) = flow_at(&cam, cam.principal_point(), 7.0, &Vector3::new(0.0, 0.0, 1.0)).unwrap();
        assert_eq!((du, dv), (0.0, 0.0));
    }

    #[test]
    fn lateral_flow_is_the_limit_of_the_finite_formula() {
        let cam = cam32();
        // Depth is stored as f32, hence the 1e-6 tolerance below.
        let depth = DepthMap::filled(64, 64, 4.8);
        let flow = analytic_flow(&cam, &depth, &Translation::new(-0.3, 0.0, 0.0));
        for idx in 0..64 * 64 {
            assert_relative_eq!(flow.du[idx], 2.0, max_relative = 1e-6);
            assert_eq!(flow.dv[idx], 0.0);
        }
        // Moving right makes the scene slide left.
        let flow = analytic_flow(&cam, &depth, &Translation::new(0.3, 0.0, 0.0));
        assert_relative_eq!(flow.du[0], -2.0, max_relative = 1e-6);
        let p = cam.pixel_center(5, 9);
        let near_lateral = flow_at(&cam, p, 4.8, &Vector3::new(0.3, 0.0, 1e-9)).unwrap();
        assert_relative_eq!(near_lateral.0, -2.0, epsilon = 1e-6);
    }

    #[test]
    fn analytic_flow_masks_points_behind_source() {
        let depth = DepthMap::filled(4, 4, 0.5);
        let flow = analytic_flow(&unit_cam(), &depth, &Translation::new(0.0, 0.0, -1.0));
        assert!(flow.valid.iter().all(|v| !v));
    }

    #[test]
    fn disparity_examples() {
        let d = disparity_from_depth(&unit_cam(), PixelPoint::new(3.0, 0.0), 9.0, &Translation::new(1.0, 0.0, 1.0));
        assert_relative_eq!(d.unwrap(), 0.2, epsilon = 1e-15);
        let d = disparity_from_depth(&cam32(), PixelPoint::new(1.0, 2.0), 4.8, &Translation::new(0.3, 0.0, 0.0));
        assert_relative_eq!(d.unwrap(), 2.0, epsilon = 1e-12);
        let d = disparity_from_depth(&cam32(), PixelPoint::new(64.0, 32.0), 3.0, &Translation::new(1.0, 0.0, 1.0));
        assert_eq!(d.unwrap(), 0.0);
        let err = disparity_from_depth(&cam32(), PixelPoint::new(1.0, 1.0), 1.0, &Translation::new(0.0, 0.0, -2.0));
        assert!(matches!(err, Err(GeometryError::PassesBehindCamera(_))));
    }

    #[test]
    fn depth_examples() {
        let cam = unit_cam();
        let foe = Foe::finite(1.0, 0.0, MotionSense::Expansion);
        let z = depth_from_disparity(&cam, PixelPoint::new(3.0, 0.0), 0.2, &foe, 2f64.sqrt()).unwrap();
        assert_relative_eq!(z, 9.0, epsilon = 1e-12);

        let lateral = Foe::AtInfinity { direction: Vector2::new(1.0, 0.0) };
        let z = depth_from_disparity(&cam32(), PixelPoint::new(3.0, 0.0), 2.0, &lateral, 0.3).unwrap();
        assert_relative_eq!(z, 4.8, epsilon = 1e-12);

        let err = depth_from_disparity(&cam, PixelPoint::new(3.0, 0.0), 3.0, &foe, 2f64.sqrt()).unwrap_err();
        assert!(matches!(err, GeometryError::GeometryViolation { .. }));
        let err = depth_from_disparity(&cam, PixelPoint::new(3.0, 0.0), 0.0, &foe, 1.0).unwrap_err();
        assert_eq!(err, GeometryError::Divergent);
    }

    #[test]
    fn lateral_limit_of_finite_branch() {
        let cam = cam32();
        let speed: f64 = 0.5;
        let mz = 1e-6 * speed;
        let mx = (speed * speed - mz * mz).sqrt();
        let t = Translation::new(mx, 0.0, mz);
        let foe = foe_from_translation(&cam, &t).unwrap();
        let p = cam.pixel_center(10, 20);
        let z = 6.0;
        let d = disparity_from_depth(&cam, p, z, &t).unwrap();
        let finite = depth_from_disparity(&cam, p, d, &foe, speed).unwrap();
        let limit = cam.f * speed / d;
        assert_relative_eq!(finite, limit, max_relative = 1e-4);
    }

    fn noisy_depth_error(r: f64, eps: f64) -> f64 {
        let cam = cam32();
        let t = Translation::new(0.0, 0.0, 1.0);
        let foe = foe_from_translation(&cam, &t).unwrap();
        let p = PixelPoint::new(cam.u0 + r, cam.v0);
        let z = 10.0;
        let d = disparity_from_depth(&cam, p, z, &t).unwrap();
        let est = depth_from_disparity(&cam, p, d + eps, &foe, 1.0).unwrap();
        (est - z).abs()
    }

    #[test]
    fn depth_error_diverges_near_foe() {
        let near = noisy_depth_error(1.0, 0.1);
        let far = noisy_depth_error(32.0, 0.1);
        assert!(near >= 10.0 * far, "near {near} far {far}");
        let errors: Vec<f64> = [32.0, 16.0, 8.0, 4.0, 2.0, 1.0, 0.5, 0.25].iter().map(|&r| noisy_depth_error(r, 0.1)).collect();
        assert!(errors.windows(2).all(|w| w[1] > w[0]), "{errors:?}");
    }

    fn camera_strategy() -> impl Strategy<Value = PinholeCamera> {
        (prop_oneof![Just(32usize), Just(64), Just(128)], 0.3f64..3.0, 0.0f64..1.0, 0.0f64..1.0).prop_map(
            |(size, fscale, pu, pv)| {
                let s = size as f64;
                PinholeCamera::new(fscale * s / 2.0, pu * s, pv * s, size, size).unwrap()
            },
        )
    }

    proptest! {
        #[test]
        fn disparity_depth_round_trip(
            cam in camera_strategy(),
            m in (-1.0f64..1.0, -1.0f64..1.0, -1.0f64..1.0),
            pu in 0.0f64..1.0, pv in 0.0f64..1.0,
            z in 0.2f64..150.0,
        ) {
            let t = Translation::new(m.0, m.1, m.2);
            prop_assume!(t.speed() > 1e-3 && z + m.2 > 1e-3);
            let p = PixelPoint::new(pu * cam.width as f64, pv * cam.height as f64);
            let foe = foe_from_translation(&cam, &t).unwrap();
            if let Some(fp) = foe.point() {
                prop_assume!(p.distance(&fp) > 1e-3);
            }
            let d = disparity_from_depth(&cam, p, z, &t).unwrap();
            let back = depth_from_disparity(&cam, p, d, &foe, t.speed()).unwrap();
            prop_assert!(((back - z) / z).abs() < 1e-6, "z {} back {}", z, back);
        }

        #[test]
        fn analytic_flow_is_collinear_with_foe_offset(
            cam in camera_strategy(),
            m in (-1.0f64..1.0, -1.0f64..1.0, 0.05f64..1.0),
            zs in proptest::collection::vec(0.5f32..80.0, 16),
        ) {
            let depth = DepthMap::new(4, 4, zs);
            let t = Translation::new(m.0, m.1, m.2);
            let flow = analytic_flow(&cam, &depth, &t);
            let fp = foe_from_translation(&cam, &t).unwrap().point().unwrap();
            for y in 0..4 {
                for x in 0..4 {
                    let (du, dv) = flow.at(x, y).unwrap();
                    let p = cam.pixel_center(x, y);
                    let off = (p.u - fp.u, p.v - fp.v);
                    let bound = 1e-9 * du.hypot(dv) * off.0.hypot(off.1);
                    prop_assert!(cross2((du, dv), off).abs() <= bound.max(1e-300));
                    let oracle = flow_by_reprojection(&cam, p, depth.get(x, y) as f64, t.m);
                    prop_assert!((oracle.0 - du).abs() < 1e-9 * (1.0 + du.abs()));
                    prop_assert!((oracle.1 - dv).abs() < 1e-9 * (1.0 + dv.abs()));
                }
            }
        }
    }
}
