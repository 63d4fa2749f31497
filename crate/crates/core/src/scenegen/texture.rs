//! Procedural texture bank.
//!
//! Object textures are solid (3D) functions of the primitive's local
//! coordinates, so a surface point keeps its color whatever the viewpoint.

use serde::{Deserialize, Serialize};

pub type Rgb = [f64; 3];

/// Number of distinct "photographic" tiles and color ramps in the bank.
pub const TILE_COUNT: u32 = 64;
pub const RAMP_COUNT: u32 = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Texture {
    /// Stand-in for a photograph: checker, noise or banded composites.
    Photographic { tile: u32 },
    /// Smooth two-color ramp along one local axis.
    Uniform { ramp: u32 },
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

fn unit(h: u64) -> f64 {
    (h >> 11) as f64 / (1u64 << 53) as f64
}

fn palette(seed: u64, k: u64) -> Rgb {
    let h = splitmix(seed ^ splitmix(k));
    [unit(h), unit(splitmix(h)), unit(splitmix(splitmix(h)))].map(|c| 0.1 + 0.85 * c)
}

fn lerp(a: Rgb, b: Rgb, t: f64) -> Rgb {
    let t = t.clamp(0.0, 1.0);
    [a[0] + (b[0] - a[0]) * t, a[1] + (b[1] - a[1]) * t, a[2] + (b[2] - a[2]) * t]
}

fn lattice(seed: u64, x: i64, y: i64, z: i64) -> f64 {
    let h = splitmix(seed ^ splitmix((x as u64) ^ splitmix((y as u64) ^ splitmix(z as u64))));
    unit(h)
}

fn smooth(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

/// Trilinearly interpolated value noise in [0, 1].
pub fn value_noise(seed: u64, p: [f64; 3]) -> f64 {
    let cell = p.map(f64::floor);
    let (ix, iy, iz) = (cell[0] as i64, cell[1] as i64, cell[2] as i64);
    let (fx, fy, fz) = (smooth(p[0] - cell[0]), smooth(p[1] - cell[1]), smooth(p[2] - cell[2]));
    let mut acc = 0.0;
    for dz in 0..2 {
        for dy in 0..2 {
            for dx in 0..2 {
                let w = (if dx == 1 { fx } else { 1.0 - fx })
                    * (if dy == 1 { fy } else { 1.0 - fy })
                    * (if dz == 1 { fz } else { 1.0 - fz });
                acc += w * lattice(seed, ix + dx, iy + dy, iz + dz);
            }
        }
    }
    acc
}

fn fbm(seed: u64, p: [f64; 3], octaves: u32) -> f64 {
    let (mut sum, mut amp, mut norm, mut freq) = (0.0, 1.0, 0.0, 1.0);
    for o in 0..octaves {
        sum += amp * value_noise(seed.wrapping_add(o as u64), p.map(|c| c * freq));
        norm += amp;
        amp *= 0.5;
        freq *= 2.0;
    }
    sum / norm
}

/// Albedo of a textured point given in local object coordinates
/// (roughly within `[-0.5, 0.5]^3`).
pub fn albedo(texture: Texture, p: [f64; 3]) -> Rgb {
    match texture {
        Texture::Uniform { ramp } => {
            let seed = 0xC0FFEE ^ ramp as u64;
            let axis = (splitmix(seed) % 3) as usize;
            lerp(palette(seed, 0), palette(seed, 1), p[axis] + 0.5)
        }
        Texture::Photographic { tile } => {
            let seed = 0x5EED_0000 ^ splitmix(tile as u64);
            let c0 = palette(seed, 0);
            let c1 = palette(seed, 1);
            let c2 = palette(seed, 2);
            let freq = 2.0 + (splitmix(seed ^ 7) % 4) as f64;
            match tile % 3 {
                0 => {
                    let s = p.map(|c| ((c + 0.5) * freq).floor() as i64);
                    let base = if (s[0] + s[1] + s[2]).rem_euclid(2) == 0 { c0 } else { c1 };
                    lerp(base, c2, 0.3 * fbm(seed, p.map(|c| c * 4.0 * freq), 2))
                }
                1 => {
                    let n = fbm(seed, p.map(|c| c * freq), 3);
                    if n < 0.5 { lerp(c0, c1, 2.0 * n) } else { lerp(c1, c2, 2.0 * n - 1.0) }
                }
                _ => {
                    let axis = (splitmix(seed ^ 3) % 3) as usize;
                    let warp = fbm(seed, p.map(|c| c * 2.0), 2);
                    let band = (((p[axis] + 0.5) * freq + warp) * std::f64::consts::PI).sin() * 0.5 + 0.5;
                    lerp(lerp(c0, c1, band), c2, 0.25 * warp)
                }
            }
        }
    }
}

/// Wall albedo: a slow ramp across the face, in world coordinates.
pub fn wall_albedo(face: usize, p: [f64; 3], half_extent: f64) -> Rgb {
    let seed = 0xBEEF ^ face as u64;
    let axis = (face / 2 + 1) % 3;
    let t = (p[axis] / half_extent + 1.0) / 2.0;
    lerp(palette(seed, 0), palette(seed, 1), t).map(|c| 0.3 + 0.5 * c)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noise_is_deterministic_and_bounded() {
        for i in 0..200 {
            let p = [i as f64 * 0.37, -(i as f64) * 0.11, 0.5];
            let n = value_noise(9, p);
            assert_eq!(n, value_noise(9, p));
            assert!((0.0..=1.0).contains(&n));
        }
    }

    #[test]
    fn albedos_are_valid_colors() {
        for tile in 0..TILE_COUNT {
            let c = albedo(Texture::Photographic { tile }, [0.1, -0.2, 0.3]);
            assert!(c.iter().all(|v| (0.0..=1.0).contains(v)));
        }
        for ramp in 0..RAMP_COUNT {
            let c = albedo(Texture::Uniform { ramp }, [0.4, 0.4, -0.4]);
            assert!(c.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
