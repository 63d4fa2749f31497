//! Ray/primitive intersection in unit local coordinates.
//!
//! Every primitive is modelled at unit size around the origin. The caller
//! maps the world ray into that frame without renormalizing the direction,
//! so the returned parameter `t` is the world-space ray parameter.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

type V3 = Vector3<f64>;

const T_MIN: f64 = 1e-9;

/// Torus radii in local units: outer radius 0.5, major/minor ratio 4.
pub const TORUS_MAJOR: f64 = 0.4;
pub const TORUS_MINOR: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrimitiveKind {
    /// Axis-aligned cube `[-0.5, 0.5]^3`.
    Cube,
    /// Sphere of radius 0.5.
    Sphere,
    /// Cone along `y`: base disk of radius 0.5 at `y = -0.5`, apex at `y = 0.5`.
    Cone,
    /// Torus around the local `z` axis.
    Torus,
}

impl PrimitiveKind {
    pub const ALL: [PrimitiveKind; 4] =
        [PrimitiveKind::Cube, PrimitiveKind::Sphere, PrimitiveKind::Cone, PrimitiveKind::Torus];

    /// Radius of the bounding sphere in local units.
    pub fn bounding_radius(self) -> f64 {
        match self {
            PrimitiveKind::Cube => 3f64.sqrt() / 2.0,
            PrimitiveKind::Sphere => 0.5,
            PrimitiveKind::Cone => 0.5f64.sqrt(),
            PrimitiveKind::Torus => TORUS_MAJOR + TORUS_MINOR,
        }
    }

    /// Nearest hit `(t, outward normal)` with `t > 0`.
    pub fn intersect(self, o: &V3, d: &V3) -> Option<(f64, V3)> {
        match self {
            PrimitiveKind::Cube => cube(o, d),
            PrimitiveKind::Sphere => sphere(o, d, 0.5),
            PrimitiveKind::Cone => cone(o, d),
            PrimitiveKind::Torus => torus(o, d),
        }
    }
}

/// Real roots of `a t^2 + b t + c`, ascending.
fn quadratic(a: f64, b: f64, c: f64) -> Option<(f64, f64)> {
    if a.abs() < 1e-14 {
        if b.abs() < 1e-14 {
            return None;
        }
        let t = -c / b;
        return Some((t, t));
    }
    let disc = b * b - 4.0 * a * c;
    if disc < 0.0 {
        return None;
    }
    let sq = disc.sqrt();
    // Numerically stable pair.
    let q = -0.5 * (b + b.signum() * sq);
    let (r0, r1) = if q == 0.0 { (0.0, 0.0) } else { (q / a, c / q) };
    Some(if r0 < r1 { (r0, r1) } else { (r1, r0) })
}

pub(crate) fn sphere(o: &V3, d: &V3, radius: f64) -> Option<(f64, V3)> {
    let (t0, t1) = quadratic(d.dot(d), 2.0 * o.dot(d), o.dot(o) - radius * radius)?;
    let t = if t0 > T_MIN { t0 } else if t1 > T_MIN { t1 } else { return None };
    Some((t, (o + d * t) / radius))
}

fn cube(o: &V3, d: &V3) -> Option<(f64, V3)> {
    let mut t_near = f64::NEG_INFINITY;
    let mut t_far = f64::INFINITY;
    let mut near_axis = 0;
    let mut far_axis = 0;
    for axis in 0..3 {
        if d[axis] == 0.0 {
            if o[axis].abs() > 0.5 {
                return None;
            }
            continue;
        }
        let inv = 1.0 / d[axis];
        let mut t0 = (-0.5 - o[axis]) * inv;
        let mut t1 = (0.5 - o[axis]) * inv;
        if t0 > t1 {
            std::mem::swap(&mut t0, &mut t1);
        }
        if t0 > t_near {
            t_near = t0;
            near_axis = axis;
        }
        if t1 < t_far {
            t_far = t1;
            far_axis = axis;
        }
    }
    if t_near > t_far {
        return None;
    }
    let (t, axis) = if t_near > T_MIN { (t_near, near_axis) } else if t_far > T_MIN { (t_far, far_axis) } else { return None };
    let mut n = V3::zeros();
    n[axis] = (o[axis] + d[axis] * t).signum();
    Some((t, n))
}

fn cone(o: &V3, d: &V3) -> Option<(f64, V3)> {
    // Lateral surface: x^2 + z^2 = ((0.5 - y) / 2)^2 for y in [-0.5, 0.5].
    let q = 0.5 - o.y;
    let a = d.x * d.x + d.z * d.z - 0.25 * d.y * d.y;
    let b = 2.0 * (o.x * d.x + o.z * d.z) + 0.5 * q * d.y;
    let c = o.x * o.x + o.z * o.z - 0.25 * q * q;
    let mut best: Option<(f64, V3)> = None;
    let mut consider = |t: f64, n: V3| {
        if t > T_MIN && best.is_none_or(|(bt, _)| t < bt) {
            best = Some((t, n));
        }
    };
    if let Some((t0, t1)) = quadratic(a, b, c) {
        for t in [t0, t1] {
            let p = o + d * t;
            if (-0.5..=0.5).contains(&p.y) {
                consider(t, V3::new(2.0 * p.x, 0.5 * (0.5 - p.y), 2.0 * p.z).normalize());
            }
        }
    }
    if d.y != 0.0 {
        let t = (-0.5 - o.y) / d.y;
        let p = o + d * t;
        if p.x * p.x + p.z * p.z <= 0.25 {
            consider(t, V3::new(0.0, -1.0, 0.0));
        }
    }
    best
}

/// Implicit torus function, negative inside the tube.
pub fn torus_implicit(p: &V3) -> f64 {
    let (big, small) = (TORUS_MAJOR, TORUS_MINOR);
    let s = p.dot(p) + big * big - small * small;
    s * s - 4.0 * big * big * (p.x * p.x + p.y * p.y)
}

/// Coefficients `[c4, c3, c2, c1, c0]` of the torus quartic along the ray.
fn torus_quartic(o: &V3, d: &V3) -> [f64; 5] {
    let (big, small) = (TORUS_MAJOR, TORUS_MINOR);
    let dd = d.dot(d);
    let od = o.dot(d);
    let k = o.dot(o) + big * big - small * small;
    let r4 = 4.0 * big * big;
    [
        dd * dd,
        4.0 * dd * od,
        2.0 * dd * k + 4.0 * od * od - r4 * (d.x * d.x + d.y * d.y),
        4.0 * k * od - 2.0 * r4 * (o.x * d.x + o.y * d.y),
        k * k - r4 * (o.x * o.x + o.y * o.y),
    ]
}

fn horner(c: &[f64; 5], t: f64) -> f64 {
    (((c[0] * t + c[1]) * t + c[2]) * t + c[3]) * t + c[4]
}

/// Smallest positive real root of the quartic: bracket on the bounding-sphere
/// interval with a fine scan, then bisect.
fn torus(o: &V3, d: &V3) -> Option<(f64, V3)> {
    let outer = TORUS_MAJOR + TORUS_MINOR;
    let (t_in, t_out) = quadratic(d.dot(d), 2.0 * o.dot(d), o.dot(o) - outer * outer)?;
    if t_out <= T_MIN {
        return None;
    }
    let coeffs = torus_quartic(o, d);
    let start = t_in.max(T_MIN);
    // The tube is 2 * TORUS_MINOR thick; 256 steps across the unit ball
    // resolve it comfortably.
    let steps = 256;
    let dt = (t_out - start) / steps as f64;
    let mut t_prev = start;
    let mut f_prev = horner(&coeffs, t_prev);
    for i in 1..=steps {
        let t = start + dt * i as f64;
        let f = horner(&coeffs, t);
        if (f_prev > 0.0) != (f > 0.0) {
            let (mut lo, mut hi) = (t_prev, t);
            let f_lo_sign = f_prev > 0.0;
            for _ in 0..80 {
                let mid = 0.5 * (lo + hi);
                if (horner(&coeffs, mid) > 0.0) == f_lo_sign {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            let t_hit = 0.5 * (lo + hi);
            let p = o + d * t_hit;
            let s = p.dot(&p) + TORUS_MAJOR * TORUS_MAJOR - TORUS_MINOR * TORUS_MINOR;
            let r4 = 4.0 * TORUS_MAJOR * TORUS_MAJOR;
            let grad = V3::new(2.0 * s * p.x - r4 * p.x, 2.0 * s * p.y - r4 * p.y, 2.0 * s * p.z);
            return Some((t_hit, grad.normalize()));
        }
        t_prev = t;
        f_prev = f;
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn sphere_center_ray() {
        let (t, n) = sphere(&V3::new(0.0, 0.0, -5.0), &V3::new(0.0, 0.0, 1.0), 1.0).unwrap();
        assert_relative_eq!(t, 4.0, epsilon = 1e-12);
        assert_relative_eq!(n.z, -1.0, epsilon = 1e-12);
    }

    #[test]
    fn cube_faces() {
        let (t, n) = PrimitiveKind::Cube.intersect(&V3::new(0.2, 0.1, -3.0), &V3::new(0.0, 0.0, 1.0)).unwrap();
        assert_relative_eq!(t, 2.5, epsilon = 1e-12);
        assert_eq!(n, V3::new(0.0, 0.0, -1.0));
        assert!(PrimitiveKind::Cube.intersect(&V3::new(0.7, 0.0, -3.0), &V3::new(0.0, 0.0, 1.0)).is_none());
    }

    #[test]
    fn cone_base_and_side() {
        // Straight up the axis from below hits the base disk.
        let (t, n) = PrimitiveKind::Cone.intersect(&V3::new(0.0, -2.0, 0.0), &V3::new(0.0, 1.0, 0.0)).unwrap();
        assert_relative_eq!(t, 1.5, epsilon = 1e-12);
        assert_eq!(n, V3::new(0.0, -1.0, 0.0));
        // Horizontal ray at y = 0 meets the side where radius is 0.25.
        let (t, _) = PrimitiveKind::Cone.intersect(&V3::new(-2.0, 0.0, 0.0), &V3::new(1.0, 0.0, 0.0)).unwrap();
        assert_relative_eq!(t, 1.75, epsilon = 1e-12);
        // Above the apex: miss.
        assert!(PrimitiveKind::Cone.intersect(&V3::new(-2.0, 0.6, 0.0), &V3::new(1.0, 0.0, 0.0)).is_none());
    }

    /// Dense march on the implicit surface, independent of the quartic.
    fn march_torus(o: &V3, d: &V3) -> Option<f64> {
        let step = 1e-5;
        let mut t = 0.0;
        while t < 10.0 {
            if torus_implicit(&(o + d * t)) <= 0.0 {
                return Some(t);
            }
            t += step;
        }
        None
    }

    #[test]
    fn torus_matches_dense_march() {
        let rays = [
            (V3::new(0.4, 0.0, -2.0), V3::new(0.0, 0.0, 1.0)),
            (V3::new(-2.0, 0.0, 0.03), V3::new(1.0, 0.0, 0.0)),
            (V3::new(0.3, 0.25, -1.0), V3::new(0.02, 0.01, 1.0).normalize()),
            (V3::new(0.0, -2.0, 0.05), V3::new(0.0, 1.0, 0.0)),
        ];
        for (o, d) in rays {
            let oracle = march_torus(&o, &d).expect("oracle hit");
            let (t, _) = PrimitiveKind::Torus.intersect(&o, &d).expect("torus hit");
            assert!((t - oracle).abs() < 2e-5, "t {t} oracle {oracle}");
        }
    }

    #[test]
    fn torus_hole_is_empty() {
        let o = V3::new(0.0, 0.0, -2.0);
        let d = V3::new(0.0, 0.0, 1.0);
        assert!(march_torus(&o, &d).is_none());
        assert!(PrimitiveKind::Torus.intersect(&o, &d).is_none());
    }
}
